#include "normlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "json.hpp"

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

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer: " + name);
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
  }
  throw std::invalid_argument("invalid optimizer value");
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "constant") return ScheduleKind::constant;
  if (name == "inverse_sqrt") return ScheduleKind::inverse_sqrt;
  throw std::invalid_argument("unknown schedule: " + name);
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::inverse_sqrt: return "inverse_sqrt";
  }
  throw std::invalid_argument("invalid schedule value");
}

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "reverse") return TaskKind::reverse;
  if (name == "sort") return TaskKind::sort;
  throw std::invalid_argument("unknown task: " + name);
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::sort: return "sort";
  }
  throw std::invalid_argument("invalid task value");
}

void validate(const TaskSpec& task) {
  require(task.seq_len >= 2, "task seq_len must be >= 2");
  require(task.vocab_size >= 3, "task vocab_size must be >= 3 (top id is the start marker)");
}

int start_token(const TaskSpec& task) { return task.vocab_size - 1; }

SamplePair make_batch(const TaskSpec& task, Philox& rng) {
  validate(task);
  SamplePair sample;
  const int alphabet = task.vocab_size - 1;
  sample.src.resize(static_cast<std::size_t>(task.seq_len));
  for (int& token : sample.src) {
    token = static_cast<int>(rng.uniform01() * alphabet);
  }
  sample.tgt = sample.src;
  switch (task.kind) {
    case TaskKind::copy: break;
    case TaskKind::reverse: std::reverse(sample.tgt.begin(), sample.tgt.end()); break;
    case TaskKind::sort: std::sort(sample.tgt.begin(), sample.tgt.end()); break;
  }
  return sample;
}

EncodedSample encode_sample(ArchKind kind, const SamplePair& sample, int start_id) {
  const std::size_t len = sample.src.size();
  require(sample.tgt.size() == len, "sample src and tgt lengths must match");
  EncodedSample out;
  switch (kind) {
    case ArchKind::encoder_only:
      out.src = sample.src;
      out.targets = sample.tgt;
      break;
    case ArchKind::decoder_only:
      out.tgt = sample.src;
      out.tgt.push_back(start_id);
      out.tgt.insert(out.tgt.end(), sample.tgt.begin(), sample.tgt.end() - 1);
      out.targets.assign(len, -1);
      out.targets.insert(out.targets.end(), sample.tgt.begin(), sample.tgt.end());
      break;
    case ArchKind::encoder_decoder:
      out.src = sample.src;
      out.tgt.push_back(start_id);
      out.tgt.insert(out.tgt.end(), sample.tgt.begin(), sample.tgt.end() - 1);
      out.targets = sample.tgt;
      break;
  }
  return out;
}

void validate(const TrainConfig& config) {
  require(std::isfinite(config.lr) && config.lr >= 0.0, "lr must be finite and >= 0");
  require(config.warmup_steps >= 0, "warmup_steps must be >= 0");
  require(std::isfinite(config.warmup_init_lr) && config.warmup_init_lr >= 0.0,
          "warmup_init_lr must be finite and >= 0");
  require(config.steps >= 0, "steps must be >= 0");
  require(config.batch_size >= 1, "batch_size must be >= 1");
  require(config.record_interval >= 1, "record_interval must be >= 1");
  require(std::isfinite(config.grad_clip) && config.grad_clip >= 0.0,
          "grad_clip must be finite and >= 0");
  require(config.label_smoothing >= 0.0 && config.label_smoothing < 1.0,
          "label_smoothing must lie in [0, 1)");
  require(config.beta1 >= 0.0 && config.beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(config.beta2 >= 0.0 && config.beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(std::isfinite(config.adam_eps) && config.adam_eps > 0.0, "adam eps must be positive");
  validate(config.task);
}

std::string train_config_to_json_text(const TrainConfig& config) {
  json j;
  j["optimizer"] = {{"kind", to_string(config.optimizer)},
                    {"beta1", config.beta1},
                    {"beta2", config.beta2},
                    {"eps", config.adam_eps}};
  j["lr"] = config.lr;
  j["schedule"] = {{"kind", to_string(config.schedule)},
                   {"warmup_steps", config.warmup_steps},
                   {"warmup_init_lr", config.warmup_init_lr}};
  j["steps"] = config.steps;
  j["batch_size"] = config.batch_size;
  j["record_interval"] = config.record_interval;
  j["task"] = {{"kind", to_string(config.task.kind)},
               {"vocab_size", config.task.vocab_size},
               {"seq_len", config.task.seq_len}};
  j["grad_clip"] = config.grad_clip;
  j["label_smoothing"] = config.label_smoothing;
  j["seed"] = config.seed;
  return j.dump(2);
}

TrainConfig train_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& err) {
    throw std::invalid_argument(std::string("train config is not valid JSON: ") + err.what());
  }
  try {
    require(j.is_object(), "train config must be a JSON object");
    check_keys(j,
               {"optimizer", "lr", "schedule", "steps", "batch_size", "record_interval", "task",
                "grad_clip", "label_smoothing", "seed"},
               "train config");
    TrainConfig config;
    if (j.contains("optimizer")) {
      const json& opt = j.at("optimizer");
      require(opt.is_object(), "\"optimizer\" must be a JSON object");
      check_keys(opt, {"kind", "beta1", "beta2", "eps"}, "\"optimizer\"");
      if (opt.contains("kind")) {
        config.optimizer = optimizer_kind_from_string(opt.at("kind").get<std::string>());
      }
      config.beta1 = opt.value("beta1", config.beta1);
      config.beta2 = opt.value("beta2", config.beta2);
      config.adam_eps = opt.value("eps", config.adam_eps);
    }
    config.lr = j.value("lr", config.lr);
    if (j.contains("schedule")) {
      const json& sched = j.at("schedule");
      require(sched.is_object(), "\"schedule\" must be a JSON object");
      check_keys(sched, {"kind", "warmup_steps", "warmup_init_lr"}, "\"schedule\"");
      if (sched.contains("kind")) {
        config.schedule = schedule_kind_from_string(sched.at("kind").get<std::string>());
      }
      config.warmup_steps = sched.value("warmup_steps", config.warmup_steps);
      config.warmup_init_lr = sched.value("warmup_init_lr", config.warmup_init_lr);
    }
    config.steps = j.value("steps", config.steps);
    config.batch_size = j.value("batch_size", config.batch_size);
    config.record_interval = j.value("record_interval", config.record_interval);
    if (j.contains("task")) {
      const json& task = j.at("task");
      require(task.is_object(), "\"task\" must be a JSON object");
      check_keys(task, {"kind", "vocab_size", "seq_len"}, "\"task\"");
      if (task.contains("kind")) {
        config.task.kind = task_kind_from_string(task.at("kind").get<std::string>());
      }
      config.task.vocab_size = task.value("vocab_size", config.task.vocab_size);
      config.task.seq_len = task.value("seq_len", config.task.seq_len);
    }
    config.grad_clip = j.value("grad_clip", config.grad_clip);
    config.label_smoothing = j.value("label_smoothing", config.label_smoothing);
    config.seed = j.value("seed", config.seed);
    validate(config);
    return config;
  } catch (const json::exception& err) {
    throw std::invalid_argument(std::string("malformed train config: ") + err.what());
  }
}

double lr_at(const TrainConfig& config, int step) {
  require(step >= 1, "lr_at needs a 1-based step");
  if (config.schedule == ScheduleKind::constant) return config.lr;
  const int warmup = config.warmup_steps;
  if (step < warmup) {
    return config.warmup_init_lr +
           (config.lr - config.warmup_init_lr) * static_cast<double>(step) / warmup;
  }
  const double knee = std::max(warmup, 1);
  return config.lr * std::sqrt(knee / static_cast<double>(step));
}

AdamState make_adam_state(const std::vector<Tensor>& params) {
  AdamState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const Tensor& p : params) {
    state.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    state.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
  return state;
}

namespace {

bool grads_finite(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  return true;
}

}  // namespace

bool sgd_step(const std::vector<Tensor>& params, double lr) {
  if (!grads_finite(params)) return false;
  for (Tensor p : params) {
    auto& value = p.value();
    const auto& grad = p.grad();
    for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr * grad[i];
  }
  return true;
}

bool adam_step(const std::vector<Tensor>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  require(state.m.size() == params.size() && state.v.size() == params.size(),
          "adam state does not match the parameter list");
  if (!grads_finite(params)) return false;
  state.t += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto& value = p.value();
    const auto& grad = p.grad();
    require(state.m[k].size() == value.size(), "adam state tensor size mismatch");
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      state.m[k][i] = beta1 * state.m[k][i] + (1.0 - beta1) * g;
      state.v[k][i] = beta2 * state.v[k][i] + (1.0 - beta2) * g * g;
      value[i] -= lr * (state.m[k][i] / c1) / (std::sqrt(state.v[k][i] / c2) + eps);
    }
  }
  return true;
}

double clip_gradients(const std::vector<Tensor>& params, double clip) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (clip > 0.0 && norm > clip) {
    const double scale = clip / norm;
    for (const Tensor& p : params) {
      for (double& g : p.grad()) g *= scale;
    }
  }
  return norm;
}

double RunTrace::initial_loss() const {
  return loss.empty() ? std::numeric_limits<double>::quiet_NaN() : loss.front();
}

double RunTrace::final_loss() const {
  return loss.empty() ? std::numeric_limits<double>::quiet_NaN() : loss.back();
}

bool RunTrace::converged() const {
  if (diverged || loss.empty()) return false;
  return std::isfinite(final_loss()) && final_loss() < 0.1 * initial_loss();
}

namespace {

void zero_all(const std::vector<Tensor>& params) {
  for (Tensor p : params) p.zero_grad();
}

struct BatchForward {
  Tensor loss;
  std::vector<double> logits;
  std::vector<std::string> site_tags;
  std::vector<double> ln_norms;
};

BatchForward batch_forward(Tape& tape, const TransformerModel& model,
                           const std::vector<EncodedSample>& samples, double smoothing,
                           bool want_diag, Philox* dropout_rng) {
  BatchForward out;
  std::vector<Tensor> losses;
  std::vector<double> site_acc;
  for (const EncodedSample& sample : samples) {
    ForwardDiagnostics diag;
    Tensor logits = model_forward(tape, model, sample.src, sample.tgt,
                                  want_diag ? &diag : nullptr, dropout_rng);
    out.logits.insert(out.logits.end(), logits.value().begin(), logits.value().end());
    losses.push_back(tape.cross_entropy(logits, sample.targets, smoothing));
    if (want_diag) {
      if (out.site_tags.empty()) {
        for (const auto& probe : diag.ln_inputs) out.site_tags.push_back(probe.tag);
        site_acc.assign(diag.ln_inputs.size(), 0.0);
      }
      for (std::size_t i = 0; i < diag.ln_inputs.size(); ++i) {
        site_acc[i] += diag.ln_inputs[i].mean_row_norm;
      }
    }
  }
  Tensor total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = tape.add(total, losses[i]);
  out.loss = tape.scale(total, 1.0 / static_cast<double>(losses.size()));
  if (want_diag) {
    out.ln_norms = site_acc;
    for (double& x : out.ln_norms) x /= static_cast<double>(samples.size());
  }
  return out;
}

}  // namespace

RunTrace train_run(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                   TransformerModel* final_model) {
  validate(model_cfg);
  validate(train_cfg);
  require(model_cfg.vocab_size == train_cfg.task.vocab_size,
          "model vocab_size must equal the task vocab_size");
  const int needed_len = model_cfg.arch.kind == ArchKind::decoder_only
                             ? 2 * train_cfg.task.seq_len
                             : train_cfg.task.seq_len;
  require(needed_len <= model_cfg.max_seq_len,
          "max_seq_len is too small for the task sequences");

  TransformerModel model = build_model(model_cfg);
  const std::vector<Tensor> params = model.parameters();
  AdamState adam = make_adam_state(params);

  std::vector<std::string> sublayer_tags;
  std::vector<std::vector<Tensor>> sublayer_params;
  for (const auto* stack : {&model.encoder, &model.decoder}) {
    for (const SubLayer& sub : *stack) {
      sublayer_tags.push_back(sub.tag);
      sublayer_params.push_back(sub.parameters());
    }
  }

  const int bos = start_token(train_cfg.task);
  Philox probe_rng = Philox::for_tensor(train_cfg.seed, "probe_batch");
  std::vector<EncodedSample> probe;
  for (int b = 0; b < train_cfg.batch_size; ++b) {
    probe.push_back(encode_sample(model_cfg.arch.kind, make_batch(train_cfg.task, probe_rng), bos));
  }
  Philox batch_rng = Philox::for_tensor(train_cfg.seed, "train_batches");
  Philox dropout_rng = Philox::for_tensor(train_cfg.seed, "dropout");
  Philox* drop = model_cfg.dropout > 0.0 ? &dropout_rng : nullptr;

  RunTrace trace;
  trace.sublayer_tags = sublayer_tags;
  std::vector<double> logits0;

  auto record_probe = [&](int step, double lr_value) {
    zero_all(params);
    Tape tape;
    BatchForward bf =
        batch_forward(tape, model, probe, train_cfg.label_smoothing, true, nullptr);
    const double probe_loss = bf.loss.item();
    if (!std::isfinite(probe_loss)) return false;
    tape.backward(bf.loss);

    trace.steps.push_back(step);
    trace.loss.push_back(probe_loss);
    trace.lr.push_back(lr_value);
    if (step == 0) {
      logits0 = bf.logits;
      trace.model_update.push_back(0.0);
      trace.ln_site_tags = bf.site_tags;
    } else {
      trace.model_update.push_back(l2_diff(bf.logits, logits0));
    }
    std::vector<double> norms;
    norms.reserve(sublayer_params.size());
    for (const auto& group : sublayer_params) {
      double sq = 0.0;
      for (const Tensor& p : group) {
        for (double g : p.grad()) sq += g * g;
      }
      norms.push_back(std::sqrt(sq));
    }
    trace.grad_norms.push_back(std::move(norms));
    trace.ln_input_norms.push_back(bf.ln_norms);
    zero_all(params);
    return true;
  };

  if (!record_probe(0, 0.0)) {
    trace.diverged = true;
    trace.divergence_step = 0;
    return trace;
  }
  const double initial = trace.loss.front();

  for (int step = 1; step <= train_cfg.steps; ++step) {
    const double lr = lr_at(train_cfg, step);
    std::vector<EncodedSample> batch;
    for (int b = 0; b < train_cfg.batch_size; ++b) {
      batch.push_back(
          encode_sample(model_cfg.arch.kind, make_batch(train_cfg.task, batch_rng), bos));
    }

    zero_all(params);
    Tape tape;
    BatchForward bf = batch_forward(tape, model, batch, train_cfg.label_smoothing, false, drop);
    const double train_loss = bf.loss.item();
    if (!std::isfinite(train_loss) || train_loss > 1000.0 * initial) {
      trace.diverged = true;
      trace.divergence_step = step;
      break;
    }
    tape.backward(bf.loss);
    if (train_cfg.grad_clip > 0.0) clip_gradients(params, train_cfg.grad_clip);

    const bool stepped = train_cfg.optimizer == OptimizerKind::sgd
                             ? sgd_step(params, lr)
                             : adam_step(params, adam, lr, train_cfg.beta1, train_cfg.beta2,
                                         train_cfg.adam_eps);
    if (!stepped) {
      trace.diverged = true;
      trace.divergence_step = step;
      break;
    }
    trace.steps_completed = step;

    if (step % train_cfg.record_interval == 0 || step == train_cfg.steps) {
      if (!record_probe(step, lr)) {
        trace.diverged = true;
        trace.divergence_step = step;
        break;
      }
    }
  }

  if (final_model) *final_model = std::move(model);
  return trace;
}

namespace {

std::string format_double(double x) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.17g", x);
  return buffer;
}

}  // namespace

std::string trace_to_csv(const RunTrace& trace) {
  std::string out = "step,loss,lr,model_update";
  for (const auto& tag : trace.sublayer_tags) out += ",grad_norm_" + tag;
  for (const auto& tag : trace.ln_site_tags) out += ",ln_input_" + tag;
  out += "\n";
  for (std::size_t r = 0; r < trace.steps.size(); ++r) {
    out += std::to_string(trace.steps[r]);
    out += "," + format_double(trace.loss[r]);
    out += "," + format_double(trace.lr[r]);
    out += "," + format_double(trace.model_update[r]);
    for (double g : trace.grad_norms[r]) out += "," + format_double(g);
    for (double n : trace.ln_input_norms[r]) out += "," + format_double(n);
    out += "\n";
  }
  return out;
}

std::string trace_summary_json(const RunTrace& trace) {
  json j;
  j["diverged"] = trace.diverged;
  j["divergence_step"] =
      trace.divergence_step ? json(*trace.divergence_step) : json(nullptr);
  j["steps_completed"] = trace.steps_completed;
  j["records"] = trace.steps.size();
  if (!trace.loss.empty()) {
    j["initial_loss"] = trace.initial_loss();
    j["final_loss"] = trace.final_loss();
    j["final_model_update"] = trace.model_update.back();
    j["peak_model_update"] =
        *std::max_element(trace.model_update.begin(), trace.model_update.end());
  } else {
    j["initial_loss"] = nullptr;
    j["final_loss"] = nullptr;
    j["final_model_update"] = nullptr;
    j["peak_model_update"] = nullptr;
  }
  j["converged"] = trace.converged();

  json sublayers = json::array();
  for (std::size_t i = 0; i < trace.sublayer_tags.size(); ++i) {
    json entry;
    entry["tag"] = trace.sublayer_tags[i];
    if (!trace.grad_norms.empty()) {
      entry["grad_norm_first"] = trace.grad_norms.front()[i];
      entry["grad_norm_last"] = trace.grad_norms.back()[i];
    }
    sublayers.push_back(entry);
  }
  j["sublayers"] = sublayers;

  json sites = json::array();
  for (std::size_t i = 0; i < trace.ln_site_tags.size(); ++i) {
    json entry;
    entry["tag"] = trace.ln_site_tags[i];
    double peak = 0.0;
    for (const auto& row : trace.ln_input_norms) peak = std::max(peak, row[i]);
    entry["peak"] = peak;
    entry["final"] = trace.ln_input_norms.back()[i];
    sites.push_back(entry);
  }
  j["ln_sites"] = sites;
  return j.dump(2);
}

VanishingSummary detect_gradient_vanishing(const RunTrace& trace) {
  require(trace.grad_norms.size() >= 2, "vanishing detection needs at least two records");
  VanishingSummary summary;
  summary.tags = trace.sublayer_tags;
  const auto& first = trace.grad_norms.front();
  const auto& last = trace.grad_norms.back();
  for (std::size_t i = 0; i < summary.tags.size(); ++i) {
    const double ratio = last[i] / std::max(first[i], 1e-300);
    summary.ratios.push_back(ratio);
    summary.vanished.push_back(ratio < 0.01);
  }
  return summary;
}

UpdateSeries full_model_update_series(const ModelConfig& model_cfg,
                                      const TrainConfig& train_cfg) {
  TrainConfig dense = train_cfg;
  dense.record_interval = 1;
  const RunTrace trace = train_run(model_cfg, dense);
  UpdateSeries series;
  series.diverged = trace.diverged;
  if (trace.model_update.size() > 1) {
    series.series.assign(trace.model_update.begin() + 1, trace.model_update.end());
  }
  return series;
}

}  // namespace normlab
