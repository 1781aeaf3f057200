#include "normlab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "normlab/rng.hpp"

namespace normlab {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    require(known, "unknown key \"" + item.key() + "\" in " + where);
  }
}

}  // namespace

InitScheme init_scheme_from_string(const std::string& name) {
  if (name == "xavier_gain1") return InitScheme::xavier_gain1;
  if (name == "deepnorm_init") return InitScheme::deepnorm_init;
  if (name == "postln_init") return InitScheme::postln_init;
  throw std::invalid_argument("unknown init scheme: " + name);
}

std::string to_string(InitScheme scheme) {
  switch (scheme) {
    case InitScheme::xavier_gain1: return "xavier_gain1";
    case InitScheme::deepnorm_init: return "deepnorm_init";
    case InitScheme::postln_init: return "postln_init";
  }
  throw std::invalid_argument("invalid init scheme value");
}

std::string to_string(SubLayerKind kind) {
  switch (kind) {
    case SubLayerKind::self_attention: return "self";
    case SubLayerKind::cross_attention: return "cross";
    case SubLayerKind::ffn: return "ffn";
  }
  throw std::invalid_argument("invalid sub-layer kind value");
}

void validate(const ModelConfig& config) {
  make_arch(config.arch.kind, config.arch.encoder_layers, config.arch.decoder_layers);
  require(config.d_model >= 1, "d_model must be >= 1");
  require(config.n_heads >= 1, "n_heads must be >= 1");
  require(config.d_model % config.n_heads == 0, "d_model must be divisible by n_heads");
  require(config.d_ffn >= 1, "d_ffn must be >= 1");
  require(config.vocab_size >= 1, "vocab_size must be >= 1");
  require(config.max_seq_len >= 1, "max_seq_len must be >= 1");
  require(std::isfinite(config.ln_eps) && config.ln_eps > 0.0, "ln_eps must be positive");
  require(config.dropout >= 0.0 && config.dropout < 1.0, "dropout must lie in [0, 1)");
}

std::string model_config_to_json_text(const ModelConfig& config) {
  json j;
  j["arch"] = {{"kind", to_string(config.arch.kind)},
               {"encoder_layers", config.arch.encoder_layers},
               {"decoder_layers", config.arch.decoder_layers}};
  j["d_model"] = config.d_model;
  j["n_heads"] = config.n_heads;
  j["d_ffn"] = config.d_ffn;
  j["norm"] = {{"variant", to_string(config.norm_variant)},
               {"rounded_gains", config.rounded_gains}};
  j["init"] = to_string(config.init);
  j["vocab_size"] = config.vocab_size;
  j["max_seq_len"] = config.max_seq_len;
  j["ln_eps"] = config.ln_eps;
  j["dropout"] = config.dropout;
  j["seed"] = config.seed;
  return j.dump(2);
}

ModelConfig model_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& err) {
    throw std::invalid_argument(std::string("model config is not valid JSON: ") + err.what());
  }
  try {
    require(j.is_object(), "model config must be a JSON object");
    check_keys(j,
               {"arch", "d_model", "n_heads", "d_ffn", "norm", "init", "vocab_size",
                "max_seq_len", "ln_eps", "dropout", "seed"},
               "model config");
    require(j.contains("arch"), "model config requires an \"arch\" object");

    ModelConfig config;
    const json& arch = j.at("arch");
    require(arch.is_object(), "\"arch\" must be a JSON object");
    check_keys(arch, {"kind", "encoder_layers", "decoder_layers"}, "\"arch\"");
    require(arch.contains("kind"), "\"arch\" requires a \"kind\"");
    config.arch = make_arch(arch_kind_from_string(arch.at("kind").get<std::string>()),
                            arch.value("encoder_layers", 0), arch.value("decoder_layers", 0));

    config.d_model = j.value("d_model", config.d_model);
    config.n_heads = j.value("n_heads", config.n_heads);
    config.d_ffn = j.value("d_ffn", config.d_ffn);
    if (j.contains("norm")) {
      const json& norm = j.at("norm");
      require(norm.is_object(), "\"norm\" must be a JSON object");
      check_keys(norm, {"variant", "rounded_gains"}, "\"norm\"");
      if (norm.contains("variant")) {
        config.norm_variant = norm_variant_from_string(norm.at("variant").get<std::string>());
      }
      config.rounded_gains = norm.value("rounded_gains", config.rounded_gains);
    }
    if (j.contains("init")) config.init = init_scheme_from_string(j.at("init").get<std::string>());
    config.vocab_size = j.value("vocab_size", config.vocab_size);
    config.max_seq_len = j.value("max_seq_len", config.max_seq_len);
    config.ln_eps = j.value("ln_eps", config.ln_eps);
    config.dropout = j.value("dropout", config.dropout);
    config.seed = j.value("seed", config.seed);
    validate(config);
    return config;
  } catch (const json::exception& err) {
    throw std::invalid_argument(std::string("malformed model config: ") + err.what());
  }
}

std::vector<Tensor> SubLayer::parameters() const {
  if (kind == SubLayerKind::ffn) return {w1, w2};
  return {wq, wk, wv, wo};
}

namespace {

const char* const kAttentionNames[] = {"wq", "wk", "wv", "wo"};
const char* const kFfnNames[] = {"w1", "w2"};

void append_named(const SubLayer& sub,
                  std::vector<std::pair<std::string, Tensor>>& out) {
  const auto params = sub.parameters();
  const char* const* names = sub.kind == SubLayerKind::ffn ? kFfnNames : kAttentionNames;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.emplace_back(sub.tag + "." + names[i], params[i]);
  }
}

Tensor sinusoidal_table(int max_seq_len, int d_model) {
  std::vector<double> values(static_cast<std::size_t>(max_seq_len) * d_model, 0.0);
  for (int pos = 0; pos < max_seq_len; ++pos) {
    for (int j = 0; j < d_model; ++j) {
      const int pair = j - (j % 2);
      const double freq = std::pow(10000.0, -static_cast<double>(pair) / d_model);
      const double angle = pos * freq;
      values[static_cast<std::size_t>(pos) * d_model + j] =
          (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::leaf({max_seq_len, d_model}, values, false);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (src_embed.defined()) out.emplace_back("src_embed", src_embed);
  if (tgt_embed.defined()) out.emplace_back("tgt_embed", tgt_embed);
  for (const SubLayer& sub : encoder) append_named(sub, out);
  for (const SubLayer& sub : decoder) append_named(sub, out);
  out.emplace_back("out_proj", out_proj);
  return out;
}

std::vector<Tensor> TransformerModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, tensor] : named_parameters()) out.push_back(tensor);
  return out;
}

std::int64_t TransformerModel::parameter_count() const {
  std::int64_t total = 0;
  for (const Tensor& tensor : parameters()) total += tensor.numel();
  return total;
}

TransformerModel build_model(const ModelConfig& config) {
  validate(config);
  TransformerModel model;
  model.config = config;
  model.gains = compute_gains(config.arch, config.rounded_gains);

  const int d = config.d_model;
  auto draw = [&](const std::string& name, std::int64_t fan_in, std::int64_t fan_out,
                  double gain) {
    Philox rng = Philox::for_tensor(config.seed, name);
    return xavier_normal(fan_in, fan_out, gain, rng, true);
  };

  auto build_stack = [&](const char* component, int n_layers, bool with_cross,
                         const StackGains& stack_gains) {
    std::vector<SubLayer> stack;
    for (int l = 1; l <= n_layers; ++l) {
      double branch_gain = 1.0;
      if (config.init == InitScheme::deepnorm_init) branch_gain = stack_gains.beta;
      if (config.init == InitScheme::postln_init) branch_gain = 1.0 / postln_init_scale(l, n_layers);

      auto make_attention = [&](SubLayerKind kind) {
        SubLayer sub;
        sub.kind = kind;
        sub.tag = std::string(component) + "_" + std::to_string(l) + "_" + to_string(kind);
        sub.n_heads = config.n_heads;
        sub.wq = draw(sub.tag + ".wq", d, d, 1.0);
        sub.wk = draw(sub.tag + ".wk", d, d, 1.0);
        sub.wv = draw(sub.tag + ".wv", d, d, branch_gain);
        sub.wo = draw(sub.tag + ".wo", d, d, branch_gain);
        return sub;
      };

      stack.push_back(make_attention(SubLayerKind::self_attention));
      if (with_cross) stack.push_back(make_attention(SubLayerKind::cross_attention));

      SubLayer ffn;
      ffn.kind = SubLayerKind::ffn;
      ffn.tag = std::string(component) + "_" + std::to_string(l) + "_ffn";
      ffn.w1 = draw(ffn.tag + ".w1", d, config.d_ffn, branch_gain);
      ffn.w2 = draw(ffn.tag + ".w2", config.d_ffn, d, branch_gain);
      stack.push_back(ffn);
    }
    return stack;
  };

  const ArchShape& arch = config.arch;
  if (arch.kind != ArchKind::decoder_only) {
    model.src_embed = draw("src_embed", config.vocab_size, d, 1.0);
    model.encoder = build_stack("enc", arch.encoder_layers, false, model.gains.encoder);
  }
  if (arch.kind != ArchKind::encoder_only) {
    model.tgt_embed = draw("tgt_embed", config.vocab_size, d, 1.0);
    model.decoder = build_stack("dec", arch.decoder_layers,
                                arch.kind == ArchKind::encoder_decoder, model.gains.decoder);
  }
  model.out_proj = draw("out_proj", d, config.vocab_size, 1.0);
  model.positional = sinusoidal_table(config.max_seq_len, d);
  return model;
}

Tensor attention_forward(Tape& tape, const Tensor& x_q, const Tensor& x_kv,
                         const SubLayer& layer, bool causal) {
  require(layer.kind != SubLayerKind::ffn, "attention_forward needs an attention sub-layer");
  Tensor q = tape.matmul(x_q, layer.wq);
  Tensor k = tape.matmul(x_kv, layer.wk);
  Tensor v = tape.matmul(x_kv, layer.wv);
  Tensor mixed = tape.attention_heads(q, k, v, layer.n_heads, causal);
  return tape.matmul(mixed, layer.wo);
}

namespace {

struct ForwardContext {
  Tape& tape;
  const TransformerModel& model;
  ForwardDiagnostics* diag;
  Philox* dropout_rng;
};

Tensor embed_with_positions(ForwardContext& ctx, const Tensor& table,
                            const std::vector<int>& ids) {
  const ModelConfig& config = ctx.model.config;
  require(static_cast<int>(ids.size()) <= config.max_seq_len,
          "sequence length exceeds max_seq_len");
  Tensor tokens =
      ctx.tape.embedding_rows(table, ids, std::sqrt(static_cast<double>(config.d_model)));
  const std::int64_t len = tokens.rows();
  const std::int64_t d = config.d_model;
  std::vector<double> slice(static_cast<std::size_t>(len) * d);
  std::copy_n(ctx.model.positional.value().begin(), slice.size(), slice.begin());
  Tensor positions = Tensor::leaf({len, d}, slice, false);
  return ctx.tape.add(tokens, positions);
}

Tensor run_sublayer(ForwardContext& ctx, const Tensor& x, const SubLayer& sub,
                    const Tensor* encoder_out, bool causal, double alpha) {
  auto masked = [&](Tensor g) {
    const double p = ctx.model.config.dropout;
    if (ctx.dropout_rng && p > 0.0) g = ctx.tape.dropout(g, p, *ctx.dropout_rng);
    return g;
  };
  std::function<Tensor(const Tensor&)> branch;
  switch (sub.kind) {
    case SubLayerKind::self_attention:
      branch = [&](const Tensor& h) {
        return masked(attention_forward(ctx.tape, h, h, sub, causal));
      };
      break;
    case SubLayerKind::cross_attention:
      branch = [&](const Tensor& h) {
        return masked(attention_forward(ctx.tape, h, *encoder_out, sub, false));
      };
      break;
    case SubLayerKind::ffn:
      branch = [&](const Tensor& h) {
        return masked(ctx.tape.matmul(ctx.tape.relu(ctx.tape.matmul(h, sub.w1)), sub.w2));
      };
      break;
  }
  NormScheme scheme{ctx.model.config.norm_variant, alpha};
  Tensor site;
  Tensor out = apply_residual(ctx.tape, scheme, x, branch, ctx.model.config.ln_eps,
                              ctx.diag ? &site : nullptr);
  if (ctx.diag) ctx.diag->ln_inputs.push_back({sub.tag, mean_row_norm(site)});
  return out;
}

Tensor run_stack(ForwardContext& ctx, Tensor x, const std::vector<SubLayer>& stack,
                 const Tensor* encoder_out, bool causal_self, double alpha) {
  for (const SubLayer& sub : stack) {
    const bool causal = sub.kind == SubLayerKind::self_attention && causal_self;
    x = run_sublayer(ctx, x, sub, encoder_out, causal, alpha);
  }
  return x;
}

}  // namespace

Tensor model_forward(Tape& tape, const TransformerModel& model,
                     const std::vector<int>& src_tokens,
                     const std::vector<int>& tgt_tokens, ForwardDiagnostics* diag,
                     Philox* dropout_rng) {
  const ModelConfig& config = model.config;
  ForwardContext ctx{tape, model, diag, dropout_rng};
  const bool deep = config.norm_variant == NormVariant::deepnorm;
  const double alpha_e = deep ? model.gains.encoder.alpha : 1.0;
  const double alpha_d = deep ? model.gains.decoder.alpha : 1.0;

  Tensor stream;
  switch (config.arch.kind) {
    case ArchKind::encoder_only: {
      require(!src_tokens.empty(), "encoder_only forward needs src tokens");
      require(tgt_tokens.empty(), "encoder_only forward takes no tgt tokens");
      Tensor x = embed_with_positions(ctx, model.src_embed, src_tokens);
      stream = run_stack(ctx, x, model.encoder, nullptr, false, alpha_e);
      break;
    }
    case ArchKind::decoder_only: {
      require(src_tokens.empty(), "decoder_only forward takes no src tokens");
      require(!tgt_tokens.empty(), "decoder_only forward needs tgt tokens");
      Tensor y = embed_with_positions(ctx, model.tgt_embed, tgt_tokens);
      stream = run_stack(ctx, y, model.decoder, nullptr, true, alpha_d);
      break;
    }
    case ArchKind::encoder_decoder: {
      require(!src_tokens.empty() && !tgt_tokens.empty(),
              "encoder_decoder forward needs both src and tgt tokens");
      Tensor x = embed_with_positions(ctx, model.src_embed, src_tokens);
      Tensor enc_out = run_stack(ctx, x, model.encoder, nullptr, false, alpha_e);
      Tensor y = embed_with_positions(ctx, model.tgt_embed, tgt_tokens);
      stream = run_stack(ctx, y, model.decoder, &enc_out, true, alpha_d);
      break;
    }
  }

  if (config.norm_variant == NormVariant::pre_ln) {
    if (diag) diag->ln_inputs.push_back({"final", mean_row_norm(stream)});
    stream = tape.layer_norm(stream, config.ln_eps);
  }
  return tape.matmul(stream, model.out_proj);
}

namespace {

constexpr char kMagic[4] = {'N', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

template <typename T>
void write_raw(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint file truncated");
  return value;
}

}  // namespace

void save_checkpoint(const TransformerModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_raw(out, kVersion);

  const std::string config_text = model_config_to_json_text(model.config);
  write_raw(out, static_cast<std::uint64_t>(config_text.size()));
  out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));

  const auto params = model.named_parameters();
  write_raw(out, static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    write_raw(out, static_cast<std::uint64_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& shape = tensor.shape();
    write_raw(out, static_cast<std::uint64_t>(shape.size()));
    for (std::int64_t dim : shape) write_raw(out, static_cast<std::uint64_t>(dim));
    out.write(reinterpret_cast<const char*>(tensor.value().data()),
              static_cast<std::streamsize>(tensor.value().size() * sizeof(double)));
  }
  out.flush();
  if (!out) throw std::runtime_error("failed to write checkpoint: " + path);
}

TransformerModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint for reading: " + path);

  char magic[4] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  const auto version = read_raw<std::uint32_t>(in);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }

  const auto config_size = read_raw<std::uint64_t>(in);
  std::string config_text(config_size, '\0');
  in.read(config_text.data(), static_cast<std::streamsize>(config_size));
  if (!in) throw std::runtime_error("checkpoint file truncated");

  TransformerModel model = build_model(model_config_from_json_text(config_text));
  auto params = model.named_parameters();
  const auto count = read_raw<std::uint64_t>(in);
  if (count != params.size()) {
    throw std::runtime_error("checkpoint tensor count does not match the stored config");
  }
  for (auto& [name, tensor] : params) {
    const auto name_size = read_raw<std::uint64_t>(in);
    std::string stored_name(name_size, '\0');
    in.read(stored_name.data(), static_cast<std::streamsize>(name_size));
    if (!in) throw std::runtime_error("checkpoint file truncated");
    if (stored_name != name) {
      throw std::runtime_error("checkpoint tensor \"" + stored_name +
                               "\" does not match expected \"" + name + "\"");
    }
    const auto rank = read_raw<std::uint64_t>(in);
    Shape shape(rank);
    for (auto& dim : shape) dim = static_cast<std::int64_t>(read_raw<std::uint64_t>(in));
    if (shape != tensor.shape()) {
      throw std::runtime_error("checkpoint tensor \"" + stored_name + "\" has the wrong shape");
    }
    in.read(reinterpret_cast<char*>(tensor.value().data()),
            static_cast<std::streamsize>(tensor.value().size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint file truncated");
  }
  return model;
}

}  // namespace normlab
