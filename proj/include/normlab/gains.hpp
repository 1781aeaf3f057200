#pragma once

#include <functional>
#include <string>

#include "normlab/tensor.hpp"

namespace normlab {

enum class ArchKind { encoder_only, decoder_only, encoder_decoder };

ArchKind arch_kind_from_string(const std::string& name);
std::string to_string(ArchKind kind);

struct ArchShape {
  ArchKind kind = ArchKind::encoder_only;
  int encoder_layers = 0;  // N; 0 iff kind == decoder_only
  int decoder_layers = 0;  // M; 0 iff kind == encoder_only
};

// Validates that exactly the layer counts the kind calls for are >= 1.
ArchShape make_arch(ArchKind kind, int encoder_layers, int decoder_layers);

// Residual up-scale alpha and init gain beta for one stack. beta applies to
// the value projection, the output projection, and both FFN matrices;
// query/key projections keep gain 1.
struct StackGains {
  double alpha = 1.0;
  double beta = 1.0;
};

struct GainSpec {
  ArchShape arch;
  bool rounded = false;
  StackGains encoder;  // identity gains when the component is absent
  StackGains decoder;
};

// encoder_only:    alpha = (2N)^{1/4},  beta = (8N)^{-1/4}
// decoder_only:    alpha = (2M)^{1/4},  beta = (8M)^{-1/4}
// encoder_decoder: alpha_d = (3M)^{1/4}, beta_d = (12M)^{-1/4};
//   exact encoder form  alpha_e = (N^4 M / 27)^{1/16}, beta_e = 1/(sqrt(2) alpha_e)
//   rounded variant     alpha_e = 0.81 (N^4 M)^{1/16}, beta_e = 0.87 (N^4 M)^{-1/16}
// The exact forms satisfy alpha^4 = 2L (single stacks), alpha_d^4 = 3M,
// alpha_e^16 = N^4 M / 27, and alpha^2 * 2 beta^2 = 1 per stack, to 1e-12.
// The derivation targets alpha >= 1; very shallow encoder-decoder stacks
// (N^4 M < 27) produce alpha_e < 1, which is reported as-is.
GainSpec compute_gains(const ArchShape& arch, bool rounded = false);

// Depth-scaled baseline: 1-based layer l of n_layers gets its residual-branch
// weight std divided by the returned k = n_layers - l + 1 (variance 1/(k^2 d')),
// so bottom layers start smallest and the top layer is unscaled.
double postln_init_scale(int l, int n_layers);

enum class NormVariant { post_ln, pre_ln, no_ln, deepnorm };

NormVariant norm_variant_from_string(const std::string& name);
std::string to_string(NormVariant variant);

struct NormScheme {
  NormVariant variant = NormVariant::post_ln;
  double alpha = 1.0;  // deepnorm residual scale; ignored by other variants
};

// Residual composition per scheme:
//   post_ln  -> LN(x + G(x))
//   pre_ln   -> x + G(LN(x))
//   no_ln    -> x + G(x)
//   deepnorm -> LN(alpha * x + G(x)); alpha == 1 reproduces post_ln bit for bit
// norm_site, when given, receives the tensor whose magnitude the scheme must
// control: the normalization input, or the raw residual sum under no_ln.
Tensor apply_residual(Tape& tape, const NormScheme& scheme, const Tensor& x,
                      const std::function<Tensor(const Tensor&)>& sublayer, double eps,
                      Tensor* norm_site = nullptr);

}  // namespace normlab
