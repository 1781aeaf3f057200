#include "normlab/gains.hpp"

#include <cmath>
#include <stdexcept>

namespace normlab {

ArchKind arch_kind_from_string(const std::string& name) {
  if (name == "encoder_only") return ArchKind::encoder_only;
  if (name == "decoder_only") return ArchKind::decoder_only;
  if (name == "encoder_decoder") return ArchKind::encoder_decoder;
  throw std::invalid_argument("unknown architecture kind: " + name);
}

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::encoder_only: return "encoder_only";
    case ArchKind::decoder_only: return "decoder_only";
    case ArchKind::encoder_decoder: return "encoder_decoder";
  }
  throw std::invalid_argument("invalid architecture kind value");
}

ArchShape make_arch(ArchKind kind, int encoder_layers, int decoder_layers) {
  const bool needs_enc = kind != ArchKind::decoder_only;
  const bool needs_dec = kind != ArchKind::encoder_only;
  if (needs_enc && encoder_layers < 1)
    throw std::invalid_argument("architecture requires encoder_layers >= 1");
  if (needs_dec && decoder_layers < 1)
    throw std::invalid_argument("architecture requires decoder_layers >= 1");
  if (!needs_enc && encoder_layers != 0)
    throw std::invalid_argument("decoder_only takes no encoder layers");
  if (!needs_dec && decoder_layers != 0)
    throw std::invalid_argument("encoder_only takes no decoder layers");
  return ArchShape{kind, encoder_layers, decoder_layers};
}

GainSpec compute_gains(const ArchShape& arch, bool rounded) {
  GainSpec spec;
  spec.arch = make_arch(arch.kind, arch.encoder_layers, arch.decoder_layers);
  spec.rounded = rounded;
  switch (arch.kind) {
    case ArchKind::encoder_only: {
      const double n = arch.encoder_layers;
      spec.encoder.alpha = std::pow(2.0 * n, 0.25);
      spec.encoder.beta = std::pow(8.0 * n, -0.25);
      break;
    }
    case ArchKind::decoder_only: {
      const double m = arch.decoder_layers;
      spec.decoder.alpha = std::pow(2.0 * m, 0.25);
      spec.decoder.beta = std::pow(8.0 * m, -0.25);
      break;
    }
    case ArchKind::encoder_decoder: {
      const double n = arch.encoder_layers;
      const double m = arch.decoder_layers;
      const double n4m = n * n * n * n * m;
      if (rounded) {
        spec.encoder.alpha = 0.81 * std::pow(n4m, 1.0 / 16.0);
        spec.encoder.beta = 0.87 * std::pow(n4m, -1.0 / 16.0);
      } else {
        spec.encoder.alpha = std::pow(n4m / 27.0, 1.0 / 16.0);
        spec.encoder.beta = 1.0 / (std::sqrt(2.0) * spec.encoder.alpha);
      }
      spec.decoder.alpha = std::pow(3.0 * m, 0.25);
      spec.decoder.beta = std::pow(12.0 * m, -0.25);
      break;
    }
  }
  return spec;
}

double postln_init_scale(int l, int n_layers) {
  if (n_layers < 1) throw std::invalid_argument("postln_init_scale: depth must be >= 1");
  if (l < 1 || l > n_layers)
    throw std::invalid_argument("postln_init_scale: layer index out of range");
  return double(n_layers - l + 1);
}

NormVariant norm_variant_from_string(const std::string& name) {
  if (name == "post_ln") return NormVariant::post_ln;
  if (name == "pre_ln") return NormVariant::pre_ln;
  if (name == "no_ln") return NormVariant::no_ln;
  if (name == "deepnorm") return NormVariant::deepnorm;
  throw std::invalid_argument("unknown norm variant: " + name);
}

std::string to_string(NormVariant variant) {
  switch (variant) {
    case NormVariant::post_ln: return "post_ln";
    case NormVariant::pre_ln: return "pre_ln";
    case NormVariant::no_ln: return "no_ln";
    case NormVariant::deepnorm: return "deepnorm";
  }
  throw std::invalid_argument("invalid norm variant value");
}

Tensor apply_residual(Tape& tape, const NormScheme& scheme, const Tensor& x,
                      const std::function<Tensor(const Tensor&)>& sublayer, double eps,
                      Tensor* norm_site) {
  switch (scheme.variant) {
    case NormVariant::post_ln: {
      Tensor sum = tape.add(x, sublayer(x));
      if (norm_site) *norm_site = sum;
      return tape.layer_norm(sum, eps);
    }
    case NormVariant::pre_ln:
      if (norm_site) *norm_site = x;
      return tape.add(x, sublayer(tape.layer_norm(x, eps)));
    case NormVariant::no_ln: {
      Tensor sum = tape.add(x, sublayer(x));
      if (norm_site) *norm_site = sum;
      return sum;
    }
    case NormVariant::deepnorm: {
      Tensor sum = tape.add_scaled(x, scheme.alpha, sublayer(x));
      if (norm_site) *norm_site = sum;
      return tape.layer_norm(sum, eps);
    }
  }
  throw std::invalid_argument("invalid norm variant value");
}

}  // namespace normlab
