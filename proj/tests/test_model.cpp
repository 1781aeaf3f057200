#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "normlab/gains.hpp"
#include "normlab/model.hpp"
#include "normlab/rng.hpp"
#include "normlab/tensor.hpp"

using namespace normlab;

namespace {

double sample_std(const Tensor& t) {
  const auto& v = t.value();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(v.size()));
}

ModelConfig tiny_config(ArchKind kind, int n_layers, int m_layers) {
  ModelConfig config;
  config.arch = make_arch(kind, n_layers, m_layers);
  config.d_model = 16;
  config.n_heads = 2;
  config.d_ffn = 24;
  config.vocab_size = 11;
  config.max_seq_len = 12;
  return config;
}

const SubLayer& find_sublayer(const TransformerModel& model, const std::string& tag) {
  for (const auto& sub : model.encoder) {
    if (sub.tag == tag) return sub;
  }
  for (const auto& sub : model.decoder) {
    if (sub.tag == tag) return sub;
  }
  throw std::runtime_error("no sub-layer tagged " + tag);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation rejects bad fields") {
  ModelConfig config = tiny_config(ArchKind::encoder_only, 2, 0);
  CHECK_NOTHROW(validate(config));

  SUBCASE("head count must divide d_model") {
    config.n_heads = 3;
    CHECK_THROWS_AS(validate(config), std::invalid_argument);
  }
  SUBCASE("dims must be positive") {
    config.d_ffn = 0;
    CHECK_THROWS_AS(validate(config), std::invalid_argument);
  }
  SUBCASE("vocab must be positive") {
    config.vocab_size = 0;
    CHECK_THROWS_AS(validate(config), std::invalid_argument);
  }
  SUBCASE("sequence capacity must be positive") {
    config.max_seq_len = 0;
    CHECK_THROWS_AS(validate(config), std::invalid_argument);
  }
  SUBCASE("ln eps must be positive") {
    config.ln_eps = 0.0;
    CHECK_THROWS_AS(validate(config), std::invalid_argument);
  }
  SUBCASE("layer counts must match the arch kind") {
    config.arch.decoder_layers = 1;
    CHECK_THROWS_AS(validate(config), std::invalid_argument);
  }
}

TEST_CASE("init scheme strings round-trip") {
  for (auto scheme :
       {InitScheme::xavier_gain1, InitScheme::deepnorm_init, InitScheme::postln_init}) {
    CHECK(init_scheme_from_string(to_string(scheme)) == scheme);
  }
  CHECK_THROWS_AS(init_scheme_from_string("glorot"), std::invalid_argument);
}

TEST_CASE("config json round-trips and rejects unknown keys") {
  ModelConfig config = tiny_config(ArchKind::encoder_decoder, 3, 2);
  config.norm_variant = NormVariant::deepnorm;
  config.rounded_gains = true;
  config.init = InitScheme::deepnorm_init;
  config.ln_eps = 1e-6;
  config.seed = 77;

  const std::string text = model_config_to_json_text(config);
  const ModelConfig back = model_config_from_json_text(text);
  CHECK(back.arch.kind == config.arch.kind);
  CHECK(back.arch.encoder_layers == config.arch.encoder_layers);
  CHECK(back.arch.decoder_layers == config.arch.decoder_layers);
  CHECK(back.d_model == config.d_model);
  CHECK(back.n_heads == config.n_heads);
  CHECK(back.d_ffn == config.d_ffn);
  CHECK(back.norm_variant == config.norm_variant);
  CHECK(back.rounded_gains == config.rounded_gains);
  CHECK(back.init == config.init);
  CHECK(back.vocab_size == config.vocab_size);
  CHECK(back.max_seq_len == config.max_seq_len);
  CHECK(back.ln_eps == config.ln_eps);
  CHECK(back.seed == config.seed);

  SUBCASE("missing fields fall back to defaults") {
    const ModelConfig sparse = model_config_from_json_text(
        R"({"arch": {"kind": "decoder_only", "decoder_layers": 4}})");
    CHECK(sparse.arch.kind == ArchKind::decoder_only);
    CHECK(sparse.d_model == 64);
    CHECK(sparse.n_heads == 4);
    CHECK(sparse.init == InitScheme::xavier_gain1);
    CHECK(sparse.norm_variant == NormVariant::post_ln);
  }
  SUBCASE("unknown top-level key is rejected") {
    CHECK_THROWS_AS(model_config_from_json_text(
                        R"({"arch": {"kind": "encoder_only", "encoder_layers": 1}, "depth": 3})"),
                    std::invalid_argument);
  }
  SUBCASE("unknown arch key is rejected") {
    CHECK_THROWS_AS(model_config_from_json_text(
                        R"({"arch": {"kind": "encoder_only", "encoder_layers": 1, "x": 2}})"),
                    std::invalid_argument);
  }
  SUBCASE("unknown norm key is rejected") {
    CHECK_THROWS_AS(
        model_config_from_json_text(
            R"({"arch": {"kind": "encoder_only", "encoder_layers": 1}, "norm": {"eps": 1}})"),
        std::invalid_argument);
  }
  SUBCASE("arch is required") {
    CHECK_THROWS_AS(model_config_from_json_text(R"({"d_model": 32})"), std::invalid_argument);
  }
  SUBCASE("non-json input is rejected") {
    CHECK_THROWS_AS(model_config_from_json_text("d_model: 32"), std::invalid_argument);
  }
  SUBCASE("wrong field type is rejected") {
    CHECK_THROWS_AS(model_config_from_json_text(
                        R"({"arch": {"kind": "encoder_only", "encoder_layers": 1}, "d_model": "big"})"),
                    std::invalid_argument);
  }
}

TEST_CASE("stack shapes follow the arch") {
  SUBCASE("encoder_only holds self+ffn pairs") {
    TransformerModel m = build_model(tiny_config(ArchKind::encoder_only, 3, 0));
    CHECK(m.encoder.size() == 6);
    CHECK(m.decoder.empty());
    CHECK(m.src_embed.defined());
    CHECK_FALSE(m.tgt_embed.defined());
    CHECK(m.encoder[0].kind == SubLayerKind::self_attention);
    CHECK(m.encoder[1].kind == SubLayerKind::ffn);
    CHECK(m.encoder[4].tag == "enc_3_self");
  }
  SUBCASE("decoder_only holds self+ffn pairs") {
    TransformerModel m = build_model(tiny_config(ArchKind::decoder_only, 0, 2));
    CHECK(m.encoder.empty());
    CHECK(m.decoder.size() == 4);
    CHECK_FALSE(m.src_embed.defined());
    CHECK(m.tgt_embed.defined());
    CHECK(m.decoder[2].tag == "dec_2_self");
  }
  SUBCASE("encoder_decoder adds cross attention triples") {
    TransformerModel m = build_model(tiny_config(ArchKind::encoder_decoder, 3, 2));
    CHECK(m.encoder.size() == 6);
    CHECK(m.decoder.size() == 6);
    CHECK(m.decoder[0].kind == SubLayerKind::self_attention);
    CHECK(m.decoder[1].kind == SubLayerKind::cross_attention);
    CHECK(m.decoder[2].kind == SubLayerKind::ffn);
    CHECK(m.decoder[1].tag == "dec_1_cross");

    const auto named = m.named_parameters();
    CHECK(named.size() == 2 + 6 * 3 + (4 + 4 + 2) * 2 + 1);
    const std::int64_t d = 16, f = 24, v = 11;
    const std::int64_t expected = 2 * v * d                  // embeddings
                                  + 3 * (4 * d * d + d * f + f * d)  // encoder layers
                                  + 2 * (8 * d * d + d * f + f * d)  // decoder layers
                                  + d * v;                   // output projection
    CHECK(m.parameter_count() == expected);
  }
}

TEST_CASE("weight draws are deterministic and stream-separated") {
  const ModelConfig config = tiny_config(ArchKind::encoder_decoder, 2, 2);
  TransformerModel a = build_model(config);
  TransformerModel b = build_model(config);
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second.value() == pb[i].second.value());
  }

  ModelConfig other = config;
  other.seed = config.seed + 1;
  TransformerModel c = build_model(other);
  CHECK(c.named_parameters()[0].second.value() != pa[0].second.value());

  const SubLayer& self = find_sublayer(a, "enc_1_self");
  CHECK(self.wq.value() != self.wk.value());
  CHECK(self.wv.value() != self.wo.value());
}

TEST_CASE("deepnorm init scales exactly the residual-carrying families") {
  ModelConfig config;
  config.arch = make_arch(ArchKind::encoder_only, 1, 0);
  config.d_model = 64;
  config.n_heads = 4;
  config.d_ffn = 128;
  config.init = InitScheme::deepnorm_init;

  TransformerModel m = build_model(config);
  const double beta = m.gains.encoder.beta;
  CHECK(beta == doctest::Approx(std::pow(8.0, -0.25)).epsilon(1e-12));

  const SubLayer& ffn = find_sublayer(m, "enc_1_ffn");
  const SubLayer& self = find_sublayer(m, "enc_1_self");
  const double xavier_w1 = std::sqrt(2.0 / (64 + 128));
  CHECK(sample_std(ffn.w1) == doctest::Approx(beta * xavier_w1).epsilon(0.05));
  CHECK(sample_std(self.wv) == doctest::Approx(beta * std::sqrt(2.0 / 128)).epsilon(0.05));
  CHECK(sample_std(self.wq) == doctest::Approx(std::sqrt(2.0 / 128)).epsilon(0.05));
  CHECK(sample_std(self.wk) == doctest::Approx(std::sqrt(2.0 / 128)).epsilon(0.05));

  SUBCASE("scaled draws equal gain-1 draws times beta elementwise") {
    ModelConfig plain = config;
    plain.init = InitScheme::xavier_gain1;
    TransformerModel p = build_model(plain);
    const SubLayer& pffn = find_sublayer(p, "enc_1_ffn");
    const SubLayer& pself = find_sublayer(p, "enc_1_self");
    for (std::size_t i = 0; i < 64; ++i) {
      CHECK(ffn.w1.value()[i] == doctest::Approx(beta * pffn.w1.value()[i]).epsilon(1e-12));
    }
    CHECK(self.wq.value() == pself.wq.value());
    CHECK(self.wk.value() == pself.wk.value());
  }
}

TEST_CASE("deepnorm init uses the decoder beta on cross attention") {
  ModelConfig config = tiny_config(ArchKind::encoder_decoder, 2, 2);
  config.d_model = 64;
  config.d_ffn = 128;
  config.n_heads = 4;
  config.init = InitScheme::deepnorm_init;

  TransformerModel m = build_model(config);
  const GainSpec gains = compute_gains(config.arch, false);
  const SubLayer& cross = find_sublayer(m, "dec_1_cross");
  const double xavier_sq = std::sqrt(2.0 / 128);
  CHECK(sample_std(cross.wv) == doctest::Approx(gains.decoder.beta * xavier_sq).epsilon(0.05));
  CHECK(sample_std(cross.wo) == doctest::Approx(gains.decoder.beta * xavier_sq).epsilon(0.05));
  const SubLayer& enc_self = find_sublayer(m, "enc_2_self");
  CHECK(sample_std(enc_self.wv) ==
        doctest::Approx(gains.encoder.beta * xavier_sq).epsilon(0.05));
}

TEST_CASE("postln init shrinks bottom layers by the depth ladder") {
  ModelConfig config;
  config.arch = make_arch(ArchKind::encoder_only, 4, 0);
  config.d_model = 256;
  config.n_heads = 4;
  config.d_ffn = 128;
  config.init = InitScheme::postln_init;

  TransformerModel m = build_model(config);
  const double std1 = sample_std(find_sublayer(m, "enc_1_ffn").w2);
  const double std4 = sample_std(find_sublayer(m, "enc_4_ffn").w2);
  CHECK(std4 / std1 == doctest::Approx(4.0).epsilon(0.10));

  const double xavier_sq = std::sqrt(2.0 / 512);
  CHECK(sample_std(find_sublayer(m, "enc_1_self").wq) == doctest::Approx(xavier_sq).epsilon(0.05));
  CHECK(sample_std(find_sublayer(m, "enc_4_self").wq) == doctest::Approx(xavier_sq).epsilon(0.05));
}

TEST_CASE("single-position attention reduces to the value path") {
  TransformerModel m = build_model(tiny_config(ArchKind::encoder_only, 1, 0));
  const SubLayer& self = find_sublayer(m, "enc_1_self");

  Philox rng(404);
  std::vector<double> row(16);
  for (auto& x : row) x = rng.normal();
  for (bool causal : {false, true}) {
    Tape tape;
    Tensor x = Tensor::leaf({1, 16}, row, false);
    Tensor got = attention_forward(tape, x, x, self, causal);
    Tensor want = tape.matmul(tape.matmul(x, self.wv), self.wo);
    CHECK(got.value() == want.value());
  }
}

TEST_CASE("attention_forward rejects ffn sub-layers") {
  TransformerModel m = build_model(tiny_config(ArchKind::encoder_only, 1, 0));
  Tape tape;
  Tensor x = Tensor::leaf({2, 16}, std::vector<double>(32, 0.5), false);
  CHECK_THROWS_AS(attention_forward(tape, x, x, find_sublayer(m, "enc_1_ffn"), false),
                  std::invalid_argument);
}

TEST_CASE("single-head attention rows obey the value-row bound") {
  ModelConfig config = tiny_config(ArchKind::encoder_only, 1, 0);
  config.n_heads = 1;
  config.d_model = 32;
  TransformerModel m = build_model(config);
  const SubLayer& self = find_sublayer(m, "enc_1_self");

  Philox rng(405);
  std::vector<double> data(6 * 32);
  for (auto& x : data) x = rng.normal();
  Tape tape;
  Tensor x = Tensor::leaf({6, 32}, data, false);
  Tensor v = tape.matmul(x, self.wv);
  Tensor mixed = tape.attention_heads(tape.matmul(x, self.wq), tape.matmul(x, self.wk), v,
                                      1, false);

  double max_value_row = 0.0;
  for (std::int64_t i = 0; i < 6; ++i) {
    double sq = 0.0;
    for (std::int64_t j = 0; j < 32; ++j) {
      const double e = v.value()[static_cast<std::size_t>(i * 32 + j)];
      sq += e * e;
    }
    max_value_row = std::max(max_value_row, std::sqrt(sq));
  }
  for (std::int64_t i = 0; i < 6; ++i) {
    double sq = 0.0;
    for (std::int64_t j = 0; j < 32; ++j) {
      const double e = mixed.value()[static_cast<std::size_t>(i * 32 + j)];
      sq += e * e;
    }
    CHECK(std::sqrt(sq) <= max_value_row + 1e-9);
  }
}

TEST_CASE("forward validates token streams") {
  TransformerModel enc = build_model(tiny_config(ArchKind::encoder_only, 1, 0));
  TransformerModel dec = build_model(tiny_config(ArchKind::decoder_only, 0, 1));
  TransformerModel both = build_model(tiny_config(ArchKind::encoder_decoder, 1, 1));
  Tape tape;
  CHECK_THROWS_AS(model_forward(tape, enc, {}, {}), std::invalid_argument);
  CHECK_THROWS_AS(model_forward(tape, enc, {1, 2}, {3}), std::invalid_argument);
  CHECK_THROWS_AS(model_forward(tape, dec, {1}, {2}), std::invalid_argument);
  CHECK_THROWS_AS(model_forward(tape, both, {1}, {}), std::invalid_argument);
  CHECK_THROWS_AS(model_forward(tape, enc, {0, 11}, {}), std::invalid_argument);
  CHECK_THROWS_AS(model_forward(tape, enc, std::vector<int>(13, 1), {}), std::invalid_argument);
}

TEST_CASE("forward logits have the right shape and are deterministic") {
  TransformerModel m = build_model(tiny_config(ArchKind::encoder_decoder, 2, 2));
  Tape t1, t2;
  Tensor a = model_forward(t1, m, {1, 2, 3, 4, 5}, {0, 6, 7});
  Tensor b = model_forward(t2, m, {1, 2, 3, 4, 5}, {0, 6, 7});
  CHECK(a.shape() == Shape{3, 11});
  CHECK(a.value() == b.value());
}

TEST_CASE("branch dropout is opt-in and mask-stream deterministic") {
  ModelConfig config = tiny_config(ArchKind::encoder_only, 2, 0);
  config.dropout = 0.4;
  TransformerModel m = build_model(config);
  const std::vector<int> src = {1, 2, 3, 4};

  Tape t1, t2, t3, t4;
  Tensor plain = model_forward(t1, m, src, {});
  Philox r2(11), r3(11), r4(12);
  Tensor a = model_forward(t2, m, src, {}, nullptr, &r2);
  Tensor b = model_forward(t3, m, src, {}, nullptr, &r3);
  Tensor c = model_forward(t4, m, src, {}, nullptr, &r4);
  CHECK(a.value() == b.value());
  CHECK(a.value() != plain.value());
  CHECK(a.value() != c.value());

  SUBCASE("zero rate with an rng matches the evaluation pass") {
    ModelConfig off = config;
    off.dropout = 0.0;
    TransformerModel m0 = build_model(off);
    Tape t5, t6;
    Philox r5(11);
    CHECK(model_forward(t5, m0, src, {}, nullptr, &r5).value() ==
          model_forward(t6, m0, src, {}).value());
  }
  SUBCASE("rate is validated and serialized") {
    ModelConfig bad = config;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
    const ModelConfig back = model_config_from_json_text(model_config_to_json_text(config));
    CHECK(back.dropout == config.dropout);
  }
}

TEST_CASE("token order changes the logits") {
  TransformerModel m = build_model(tiny_config(ArchKind::encoder_only, 2, 0));
  Tape t1, t2;
  Tensor a = model_forward(t1, m, {1, 2, 3, 4}, {});
  Tensor b = model_forward(t2, m, {4, 3, 2, 1}, {});
  CHECK(l2_diff(a.value(), b.value()) > 1e-6);
}

TEST_CASE("causal masking isolates future target positions") {
  TransformerModel m = build_model(tiny_config(ArchKind::encoder_decoder, 1, 2));
  Tape t1, t2;
  Tensor base = model_forward(t1, m, {1, 2, 3}, {0, 4, 5, 6});
  Tensor bumped = model_forward(t2, m, {1, 2, 3}, {0, 4, 9, 6});

  const auto& a = base.value();
  const auto& b = bumped.value();
  for (std::size_t j = 0; j < 2 * 11; ++j) CHECK(a[j] == b[j]);
  double tail = 0.0;
  for (std::size_t j = 2 * 11; j < a.size(); ++j) tail += std::abs(a[j] - b[j]);
  CHECK(tail > 1e-9);

  SUBCASE("encoder edits reach every decoder position") {
    Tape t3;
    Tensor cross = model_forward(t3, m, {1, 2, 8}, {0, 4, 5, 6});
    const auto& c = cross.value();
    double head = 0.0;
    for (std::size_t j = 0; j < 11; ++j) head += std::abs(a[j] - c[j]);
    CHECK(head > 1e-9);
  }
}

TEST_CASE("silent branches collapse post_ln to a normalization chain") {
  ModelConfig config = tiny_config(ArchKind::encoder_only, 3, 0);
  TransformerModel m = build_model(config);
  for (auto& sub : m.encoder) {
    if (sub.kind == SubLayerKind::ffn) {
      std::fill(sub.w2.value().begin(), sub.w2.value().end(), 0.0);
    } else {
      std::fill(sub.wo.value().begin(), sub.wo.value().end(), 0.0);
    }
  }

  Tape tape;
  const std::vector<int> src = {1, 2, 3, 4};
  Tensor logits = model_forward(tape, m, src, {});

  Tensor x = tape.embedding_rows(m.src_embed, src, std::sqrt(16.0));
  std::vector<double> slice(4 * 16);
  std::copy_n(m.positional.value().begin(), slice.size(), slice.begin());
  x = tape.add(x, Tensor::leaf({4, 16}, slice, false));
  for (std::size_t i = 0; i < m.encoder.size(); ++i) x = tape.layer_norm(x, config.ln_eps);
  Tensor want = tape.matmul(x, m.out_proj);
  CHECK(logits.value() == want.value());
}

TEST_CASE("hundred sub-layer scaled-residual forward stays controlled") {
  ModelConfig config;
  config.arch = make_arch(ArchKind::encoder_only, 50, 0);
  config.d_model = 32;
  config.n_heads = 4;
  config.d_ffn = 64;
  config.vocab_size = 32;
  config.norm_variant = NormVariant::deepnorm;
  config.init = InitScheme::deepnorm_init;

  TransformerModel m = build_model(config);
  // Identity projection exposes the final normalized stream as the logits.
  std::fill(m.out_proj.value().begin(), m.out_proj.value().end(), 0.0);
  for (int i = 0; i < 32; ++i) m.out_proj.value()[static_cast<std::size_t>(i * 32 + i)] = 1.0;

  Tape tape;
  ForwardDiagnostics diag;
  Tensor out = model_forward(tape, m, {3, 1, 4, 1, 5, 9, 2, 6}, {}, &diag);

  REQUIRE(diag.ln_inputs.size() == 100);
  for (const auto& probe : diag.ln_inputs) {
    CHECK(std::isfinite(probe.mean_row_norm));
    CHECK(probe.mean_row_norm < 1e3);
  }
  for (std::int64_t i = 0; i < 8; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t j = 0; j < 32; ++j) mean += out.value()[static_cast<std::size_t>(i * 32 + j)];
    mean /= 32.0;
    for (std::int64_t j = 0; j < 32; ++j) {
      const double d = out.value()[static_cast<std::size_t>(i * 32 + j)] - mean;
      var += d * d;
    }
    var /= 32.0;
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("diagnostics tag every normalization site in order") {
  TransformerModel m = build_model(tiny_config(ArchKind::encoder_decoder, 1, 1));
  Tape tape;
  ForwardDiagnostics diag;
  model_forward(tape, m, {1, 2}, {0, 3}, &diag);
  REQUIRE(diag.ln_inputs.size() == 5);
  CHECK(diag.ln_inputs[0].tag == "enc_1_self");
  CHECK(diag.ln_inputs[1].tag == "enc_1_ffn");
  CHECK(diag.ln_inputs[2].tag == "dec_1_self");
  CHECK(diag.ln_inputs[3].tag == "dec_1_cross");
  CHECK(diag.ln_inputs[4].tag == "dec_1_ffn");
}

TEST_CASE("full-model gradients match finite differences") {
  ModelConfig config = tiny_config(ArchKind::encoder_decoder, 2, 2);
  config.norm_variant = NormVariant::deepnorm;
  config.init = InitScheme::deepnorm_init;
  config.seed = 9;
  TransformerModel model = build_model(config);

  const std::vector<int> src = {1, 2, 3, 4};
  const std::vector<int> tgt = {0, 5, 6, 7};
  const std::vector<int> targets = {5, 6, 7, 8};

  auto loss_value = [&]() {
    Tape tape;
    Tensor logits = model_forward(tape, model, src, tgt);
    return tape.cross_entropy(logits, targets, 0.0).item();
  };

  Tape tape;
  Tensor logits = model_forward(tape, model, src, tgt);
  Tensor loss = tape.cross_entropy(logits, targets, 0.0);
  tape.backward(loss);

  for (const char* name : {"enc_1_self.wq", "enc_2_ffn.w1", "dec_1_cross.wv", "dec_2_self.wo",
                           "src_embed", "tgt_embed", "out_proj"}) {
    Tensor weight;
    for (auto& [pname, tensor] : model.named_parameters()) {
      if (pname == name) weight = tensor;
    }
    REQUIRE(weight.defined());

    auto probe = [&](const Tensor& candidate) {
      std::vector<double> saved = weight.value();
      weight.value() = candidate.value();
      const double out = loss_value();
      weight.value() = saved;
      return out;
    };
    Tensor start = Tensor::leaf(weight.shape(), weight.value(), false);
    const std::vector<double> fd = finite_diff_grad(probe, start, 1e-5);

    INFO("parameter ", name);
    const double rel = l2_diff(fd, weight.grad()) / std::max(l2_norm(fd), 1e-8);
    CHECK(rel < 1e-5);
  }
}

TEST_CASE("checkpoints round-trip bit for bit") {
  ModelConfig config = tiny_config(ArchKind::encoder_decoder, 2, 1);
  config.norm_variant = NormVariant::deepnorm;
  config.init = InitScheme::deepnorm_init;
  config.seed = 31;
  TransformerModel model = build_model(config);
  model.out_proj.value()[5] = 1.25;  // drift from the seeded init

  const std::string path = "model_roundtrip.ckpt";
  save_checkpoint(model, path);
  TransformerModel loaded = load_checkpoint(path);

  CHECK(model_config_to_json_text(loaded.config) == model_config_to_json_text(model.config));
  const auto pa = model.named_parameters();
  const auto pb = loaded.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second.value() == pb[i].second.value());
  }

  SUBCASE("saving the loaded model reproduces the file") {
    const std::string again = "model_roundtrip2.ckpt";
    save_checkpoint(loaded, again);
    std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(again.c_str());
  }
  SUBCASE("corrupt magic is rejected") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  SUBCASE("truncated files are rejected") {
    std::ifstream f(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    f.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  std::remove(path.c_str());
}

TEST_CASE("missing checkpoint paths are reported") {
  CHECK_THROWS_AS(load_checkpoint("no_such_dir/nothing.ckpt"), std::runtime_error);
}

}  // TEST_SUITE
