#include "normlab/scalar_theory.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace normlab {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double self_step(double alpha, double v, double w, double x) {
  const double p = v * w;
  return (alpha + p) / std::sqrt(alpha * alpha + p * p) * x;
}

double cross_step(double alpha, double v, double w, double y, double x_enc) {
  const double p = v * w;
  return (alpha * y + p * x_enc) / std::sqrt(alpha * alpha + p * p);
}

void check_unit_interval(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!(x > 0.0) || x > 1.0)
      throw std::invalid_argument(std::string(what) + " scalars must lie in (0, 1]");
}

void check_deltas(const std::vector<double>& d, std::size_t expect, const char* what) {
  if (d.size() != expect)
    throw std::invalid_argument(std::string(what) + ": delta count must match sub-layers");
  for (double x : d)
    if (!(x >= 0.0)) throw std::invalid_argument(std::string(what) + ": deltas must be >= 0");
}

using FlatForward =
    std::function<double(const std::vector<double>&, const std::vector<double>&)>;
using BoundTerms = std::function<std::vector<double>(const std::vector<double>&)>;

// Central-difference gradient direction per (v_i, w_i) pair, pointed so a
// step of magnitude eta stays inside (0, 1].
std::vector<std::array<double, 2>> adversarial_directions(const FlatForward& fwd,
                                                          const std::vector<double>& v0,
                                                          const std::vector<double>& w0,
                                                          double eta) {
  const double h = 1e-7;
  const std::size_t n = v0.size();
  std::vector<std::array<double, 2>> dirs(n);
  std::vector<double> v = v0, w = w0;
  auto in_range = [eta](double v0i, double w0i, double dv, double dw) {
    const double vn = v0i + eta * dv, wn = w0i + eta * dw;
    return vn > 0.0 && vn <= 1.0 && wn > 0.0 && wn <= 1.0;
  };
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = v0[i] + h;
    const double fvp = fwd(v, w);
    v[i] = v0[i] - h;
    const double fvm = fwd(v, w);
    v[i] = v0[i];
    w[i] = w0[i] + h;
    const double fwp = fwd(v, w);
    w[i] = w0[i] - h;
    const double fwm = fwd(v, w);
    w[i] = w0[i];
    double gv = (fvp - fvm) / (2.0 * h);
    double gw = (fwp - fwm) / (2.0 * h);
    const double norm = std::hypot(gv, gw);
    if (norm < 1e-300) {
      gv = -1.0;
      gw = -1.0;
    } else {
      gv /= norm;
      gw /= norm;
    }
    const double diag = 1.0 / std::sqrt(2.0);
    if (in_range(v0[i], w0[i], gv, gw)) dirs[i] = {gv, gw};
    else if (in_range(v0[i], w0[i], -gv, -gw)) dirs[i] = {-gv, -gw};
    else if (in_range(v0[i], w0[i], -diag, -diag)) dirs[i] = {-diag, -diag};
    else if (in_range(v0[i], w0[i], diag, diag)) dirs[i] = {diag, diag};
    else
      throw std::runtime_error("adversarial step cannot stay inside (0, 1]");
  }
  return dirs;
}

BoundReport run_bound_trials(const FlatForward& fwd, const std::vector<double>& v0,
                             const std::vector<double>& w0, Philox& rng, double eta,
                             int trials, PerturbDirections dirs, const BoundTerms& terms_of) {
  if (!(eta >= 0.0)) throw std::invalid_argument("eta must be >= 0");
  if (trials < 1) throw std::invalid_argument("at least one trial required");

  const std::size_t n = v0.size();
  const double base = fwd(v0, w0);
  if (!(std::abs(base) > 0.0))
    throw std::runtime_error("degenerate scalar forward; relative update undefined");

  std::vector<std::array<double, 2>> adv;
  if (dirs == PerturbDirections::adversarial && eta > 0.0)
    adv = adversarial_directions(fwd, v0, w0, eta);

  BoundReport rep;
  rep.eta = eta;
  rep.trials = trials;
  std::vector<double> r(n), vt(n), wt(n), vm(n), wm(n);
  for (int t = 0; t < trials; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      if (eta == 0.0) {
        r[i] = 0.0;
        vt[i] = v0[i];
        wt[i] = w0[i];
        continue;
      }
      if (dirs == PerturbDirections::adversarial) {
        r[i] = eta;
        vt[i] = v0[i] + eta * adv[i][0];
        wt[i] = w0[i] + eta * adv[i][1];
        continue;
      }
      // Uniform angle, magnitude eta * (0, 1]; redraw anything leaving the
      // assumption's (0, 1] box so streams stay comparable across eta.
      for (;;) {
        const double angle = kTwoPi * rng.uniform01();
        const double mag = eta * (1.0 - rng.uniform01());
        const double dv = mag * std::cos(angle), dw = mag * std::sin(angle);
        const double vn = v0[i] + dv, wn = w0[i] + dw;
        if (vn > 0.0 && vn <= 1.0 && wn > 0.0 && wn <= 1.0) {
          r[i] = mag;
          vt[i] = vn;
          wt[i] = wn;
          break;
        }
      }
    }
    double measured = std::abs(fwd(vt, wt) - base) / std::abs(base);
    // The bound covers every direction on the trial's perturbation sphere,
    // so check the worse side of the mirrored pair whenever the mirror also
    // stays inside (0, 1]. The pairwise max approaches its first-order value
    // from above, which is what makes the worst ratio fall as eta shrinks.
    if (eta > 0.0) {
      bool mirror_ok = true;
      for (std::size_t i = 0; i < n; ++i) {
        vm[i] = 2.0 * v0[i] - vt[i];
        wm[i] = 2.0 * w0[i] - wt[i];
        if (!(vm[i] > 0.0 && vm[i] <= 1.0 && wm[i] > 0.0 && wm[i] <= 1.0)) {
          mirror_ok = false;
          break;
        }
      }
      if (mirror_ok)
        measured = std::max(measured, std::abs(fwd(vm, wm) - base) / std::abs(base));
    }
    std::vector<double> terms = terms_of(r);
    double bound = 0.0;
    for (double x : terms) bound += x;
    const double ratio = bound > 0.0 ? measured / bound : 0.0;
    if (t == 0 || ratio > rep.worst_ratio) {
      rep.worst_ratio = ratio;
      rep.measured_update = measured;
      rep.theoretical_bound = bound;
      rep.per_term = std::move(terms);
    }
  }
  return rep;
}

}  // namespace

ScalarModel::ScalarModel(ArchShape arch, double alpha_encoder, std::vector<double> v_encoder,
                         std::vector<double> w_encoder, double alpha_decoder,
                         std::vector<double> v_decoder, std::vector<double> w_decoder)
    : arch_(make_arch(arch.kind, arch.encoder_layers, arch.decoder_layers)),
      alpha_encoder_(alpha_encoder),
      alpha_decoder_(alpha_decoder),
      v_encoder_(std::move(v_encoder)),
      w_encoder_(std::move(w_encoder)),
      v_decoder_(std::move(v_decoder)),
      w_decoder_(std::move(w_decoder)) {
  const std::size_t expect_enc =
      arch_.kind == ArchKind::decoder_only ? 0 : std::size_t(2) * arch_.encoder_layers;
  const std::size_t expect_dec =
      arch_.kind == ArchKind::encoder_only
          ? 0
          : std::size_t(arch_.kind == ArchKind::encoder_decoder ? 3 : 2) * arch_.decoder_layers;
  if (v_encoder_.size() != expect_enc || w_encoder_.size() != expect_enc)
    throw std::invalid_argument("encoder scalar count must be 2N");
  if (v_decoder_.size() != expect_dec || w_decoder_.size() != expect_dec)
    throw std::invalid_argument("decoder scalar count must match the kind");
  if (!(alpha_encoder_ > 0.0) || !(alpha_decoder_ > 0.0))
    throw std::invalid_argument("alpha must be positive");
  check_unit_interval(v_encoder_, "encoder v");
  check_unit_interval(w_encoder_, "encoder w");
  check_unit_interval(v_decoder_, "decoder v");
  check_unit_interval(w_decoder_, "decoder w");
}

ScalarModel ScalarModel::from_gains(const GainSpec& gains) {
  const ArchShape& a = gains.arch;
  const std::size_t ne = a.kind == ArchKind::decoder_only ? 0 : std::size_t(2) * a.encoder_layers;
  const std::size_t nd =
      a.kind == ArchKind::encoder_only
          ? 0
          : std::size_t(a.kind == ArchKind::encoder_decoder ? 3 : 2) * a.decoder_layers;
  return ScalarModel(a, gains.encoder.alpha, std::vector<double>(ne, gains.encoder.beta),
                     std::vector<double>(ne, gains.encoder.beta), gains.decoder.alpha,
                     std::vector<double>(nd, gains.decoder.beta),
                     std::vector<double>(nd, gains.decoder.beta));
}

ScalarModel ScalarModel::vanilla(const ArchShape& arch) {
  const std::size_t ne =
      arch.kind == ArchKind::decoder_only ? 0 : std::size_t(2) * arch.encoder_layers;
  const std::size_t nd =
      arch.kind == ArchKind::encoder_only
          ? 0
          : std::size_t(arch.kind == ArchKind::encoder_decoder ? 3 : 2) * arch.decoder_layers;
  return ScalarModel(arch, 1.0, std::vector<double>(ne, 1.0), std::vector<double>(ne, 1.0), 1.0,
                     std::vector<double>(nd, 1.0), std::vector<double>(nd, 1.0));
}

bool ScalarModel::cross_attention_at(int j) const {
  if (arch_.kind != ArchKind::encoder_decoder) return false;
  if (j < 0 || j >= decoder_sublayers())
    throw std::invalid_argument("decoder sub-layer index out of range");
  return j % 3 == 1;
}

double ScalarModel::encoder_forward(double x) const {
  if (arch_.kind == ArchKind::decoder_only)
    throw std::invalid_argument("decoder_only model has no encoder chain");
  for (std::size_t i = 0; i < v_encoder_.size(); ++i)
    x = self_step(alpha_encoder_, v_encoder_[i], w_encoder_[i], x);
  return x;
}

double ScalarModel::forward(double x) const {
  if (!std::isfinite(x)) throw std::invalid_argument("forward input must be finite");
  switch (arch_.kind) {
    case ArchKind::encoder_only:
      return encoder_forward(x);
    case ArchKind::decoder_only: {
      double y = x;
      for (std::size_t j = 0; j < v_decoder_.size(); ++j)
        y = self_step(alpha_decoder_, v_decoder_[j], w_decoder_[j], y);
      return y;
    }
    case ArchKind::encoder_decoder: {
      const double x_enc = encoder_forward(x);
      double y = x;
      for (int j = 0; j < decoder_sublayers(); ++j) {
        const std::size_t u = std::size_t(j);
        y = cross_attention_at(j)
                ? cross_step(alpha_decoder_, v_decoder_[u], w_decoder_[u], y, x_enc)
                : self_step(alpha_decoder_, v_decoder_[u], w_decoder_[u], y);
      }
      return y;
    }
  }
  throw std::invalid_argument("invalid architecture kind value");
}

LemmaReport lemma1_check(const Tensor& x, const std::vector<double>& q) {
  if (x.shape().size() != 2) throw std::invalid_argument("lemma1_check: rank-2 input required");
  const auto n = x.rows(), d = x.cols();
  if (std::int64_t(q.size()) != n)
    throw std::invalid_argument("lemma1_check: one score per row required");

  double mx = q[0];
  for (double s : q) mx = std::max(mx, s);
  std::vector<double> s(q.size());
  double z = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) z += (s[i] = std::exp(q[i] - mx));
  for (double& si : s) si /= z;

  LemmaReport rep;
  std::vector<double> mix(std::size_t(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* xi = x.value().data() + i * d;
    double row = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      mix[std::size_t(j)] += s[std::size_t(i)] * xi[j];
      row += xi[j] * xi[j];
    }
    rep.rhs = std::max(rep.rhs, std::sqrt(row));
  }
  rep.lhs = l2_norm(mix);
  rep.holds = rep.lhs <= rep.rhs + 1e-9;
  return rep;
}

double theorem1_bound(const ScalarModel& model, const std::vector<double>& delta_theta) {
  const bool dec = model.arch().kind == ArchKind::decoder_only;
  const std::vector<double>& v = dec ? model.v_decoder() : model.v_encoder();
  const std::vector<double>& w = dec ? model.w_decoder() : model.w_encoder();
  const double alpha = dec ? model.alpha_decoder() : model.alpha_encoder();
  check_deltas(delta_theta, v.size(), "theorem1_bound");
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    sum += std::sqrt(v[i] * v[i] + w[i] * w[i]) / alpha * delta_theta[i];
  return sum;
}

double theorem2_bound(const ScalarModel& model, const std::vector<double>& delta_encoder,
                      const std::vector<double>& delta_decoder) {
  if (model.arch().kind != ArchKind::encoder_decoder)
    throw std::invalid_argument("theorem2_bound needs an encoder_decoder model");
  check_deltas(delta_encoder, model.v_encoder().size(), "theorem2_bound");
  check_deltas(delta_decoder, model.v_decoder().size(), "theorem2_bound");

  double cross_coeff = 0.0;
  for (int j = 0; j < model.decoder_sublayers(); ++j)
    if (model.cross_attention_at(j))
      cross_coeff +=
          model.v_decoder()[std::size_t(j)] * model.w_decoder()[std::size_t(j)] /
          model.alpha_decoder();

  double enc_sum = 0.0;
  for (std::size_t i = 0; i < delta_encoder.size(); ++i) {
    const double vi = model.v_encoder()[i], wi = model.w_encoder()[i];
    enc_sum += std::sqrt(vi * vi + wi * wi) / model.alpha_encoder() * delta_encoder[i];
  }
  double dec_sum = 0.0;
  for (std::size_t j = 0; j < delta_decoder.size(); ++j) {
    const double vj = model.v_decoder()[j], wj = model.w_decoder()[j];
    dec_sum += std::sqrt(vj * vj + wj * wj) / model.alpha_decoder() * delta_decoder[j];
  }
  return cross_coeff * enc_sum + dec_sum;
}

BoundReport verify_theorem1(const ScalarModel& model, Philox& rng, double eta, int trials,
                            PerturbDirections dirs, double alpha_corruption) {
  if (!(alpha_corruption > 0.0))
    throw std::invalid_argument("alpha corruption factor must be positive");
  const bool dec = model.arch().kind == ArchKind::decoder_only;
  const std::vector<double>& v0 = dec ? model.v_decoder() : model.v_encoder();
  const std::vector<double>& w0 = dec ? model.w_decoder() : model.w_encoder();
  const double alpha_decl = dec ? model.alpha_decoder() : model.alpha_encoder();
  const double alpha_dyn = alpha_decl * alpha_corruption;

  FlatForward fwd = [alpha_dyn](const std::vector<double>& v, const std::vector<double>& w) {
    double x = 1.0;
    for (std::size_t i = 0; i < v.size(); ++i) x = self_step(alpha_dyn, v[i], w[i], x);
    return x;
  };
  BoundTerms terms = [&v0, &w0, alpha_decl](const std::vector<double>& r) {
    std::vector<double> t(r.size());
    for (std::size_t i = 0; i < r.size(); ++i)
      t[i] = std::sqrt(v0[i] * v0[i] + w0[i] * w0[i]) / alpha_decl * r[i];
    return t;
  };
  return run_bound_trials(fwd, v0, w0, rng, eta, trials, dirs, terms);
}

BoundReport verify_theorem2(const ScalarModel& model, Philox& rng, double eta, int trials,
                            PerturbDirections dirs, double alpha_corruption) {
  if (model.arch().kind != ArchKind::encoder_decoder)
    throw std::invalid_argument("verify_theorem2 needs an encoder_decoder model");
  if (!(alpha_corruption > 0.0))
    throw std::invalid_argument("alpha corruption factor must be positive");

  const std::size_t ne = model.v_encoder().size();
  const std::size_t nd = model.v_decoder().size();
  std::vector<double> v0(ne + nd), w0(ne + nd);
  std::copy(model.v_encoder().begin(), model.v_encoder().end(), v0.begin());
  std::copy(model.v_decoder().begin(), model.v_decoder().end(), v0.begin() + ne);
  std::copy(model.w_encoder().begin(), model.w_encoder().end(), w0.begin());
  std::copy(model.w_decoder().begin(), model.w_decoder().end(), w0.begin() + ne);

  const double ae = model.alpha_encoder() * alpha_corruption;
  const double ad = model.alpha_decoder() * alpha_corruption;
  const ScalarModel* m = &model;
  FlatForward fwd = [m, ne, ae, ad](const std::vector<double>& v, const std::vector<double>& w) {
    double x_enc = 1.0;
    for (std::size_t i = 0; i < ne; ++i) x_enc = self_step(ae, v[i], w[i], x_enc);
    double y = 1.0;
    for (int j = 0; j < m->decoder_sublayers(); ++j) {
      const std::size_t u = ne + std::size_t(j);
      y = m->cross_attention_at(j) ? cross_step(ad, v[u], w[u], y, x_enc)
                                   : self_step(ad, v[u], w[u], y);
    }
    return y;
  };
  BoundTerms terms = [m, ne](const std::vector<double>& r) {
    const std::vector<double> re(r.begin(), r.begin() + std::ptrdiff_t(ne));
    const std::vector<double> rd(r.begin() + std::ptrdiff_t(ne), r.end());
    double cross_coeff = 0.0;
    for (int j = 0; j < m->decoder_sublayers(); ++j)
      if (m->cross_attention_at(j))
        cross_coeff += m->v_decoder()[std::size_t(j)] * m->w_decoder()[std::size_t(j)] /
                       m->alpha_decoder();
    std::vector<double> t(r.size());
    for (std::size_t i = 0; i < ne; ++i) {
      const double vi = m->v_encoder()[i], wi = m->w_encoder()[i];
      t[i] = cross_coeff * std::sqrt(vi * vi + wi * wi) / m->alpha_encoder() * re[i];
    }
    for (std::size_t j = 0; j < rd.size(); ++j) {
      const double vj = m->v_decoder()[j], wj = m->w_decoder()[j];
      t[ne + j] = std::sqrt(vj * vj + wj * wj) / m->alpha_decoder() * rd[j];
    }
    return t;
  };
  return run_bound_trials(fwd, v0, w0, rng, eta, trials, dirs, terms);
}

}  // namespace normlab
