#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "normlab/model.hpp"
#include "normlab/rng.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

enum class OptimizerKind { sgd, adam };
OptimizerKind optimizer_kind_from_string(const std::string& name);
std::string to_string(OptimizerKind kind);

enum class ScheduleKind { constant, inverse_sqrt };
ScheduleKind schedule_kind_from_string(const std::string& name);
std::string to_string(ScheduleKind kind);

enum class TaskKind { copy, reverse, sort };
TaskKind task_kind_from_string(const std::string& name);
std::string to_string(TaskKind kind);

// Synthetic sequence-to-sequence tasks: tgt is src copied, reversed, or
// ascending-sorted. The top token id is reserved as the decoder start marker
// and never occurs in task data, so task tokens are uniform over the
// remaining vocab_size - 1 ids.
struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  int vocab_size = 32;
  int seq_len = 16;
};
void validate(const TaskSpec& task);
int start_token(const TaskSpec& task);

struct SamplePair {
  std::vector<int> src, tgt;
};
SamplePair make_batch(const TaskSpec& task, Philox& rng);

// One task sample arranged for an architecture: encoder_only classifies
// every source position; decoder_only concatenates src, the start marker,
// and tgt into one causal stream with loss only on the tgt span;
// encoder_decoder feeds src to the encoder and the marker-shifted tgt to
// the decoder. targets align with the forward's logit rows; -1 masks a row.
struct EncodedSample {
  std::vector<int> src, tgt;
  std::vector<int> targets;
};
EncodedSample encode_sample(ArchKind kind, const SamplePair& sample, int start_id);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double lr = 5e-4;
  ScheduleKind schedule = ScheduleKind::constant;
  int warmup_steps = 0;
  double warmup_init_lr = 1e-7;
  int steps = 250;
  int batch_size = 2;
  int record_interval = 10;
  TaskSpec task;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  double label_smoothing = 0.0;
  std::uint64_t seed = 1;
};
void validate(const TrainConfig& config);

// Strict JSON round-trip mirroring the model config conventions: unknown
// keys rejected at every level, absent fields keep their defaults.
std::string train_config_to_json_text(const TrainConfig& config);
TrainConfig train_config_from_json_text(const std::string& text);

// Learning rate applied at 1-based step. constant ignores warmup fields.
// inverse_sqrt ramps linearly from warmup_init_lr to lr over warmup_steps
// (hitting lr exactly at the knot), then decays as lr * sqrt(w / step);
// warmup_steps == 0 decays from full lr at step 1.
double lr_at(const TrainConfig& config, int step);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t t = 0;
};
AdamState make_adam_state(const std::vector<Tensor>& params);

// Both steppers return false and leave parameters and state untouched when
// any gradient entry is non-finite; the caller records the divergence.
bool sgd_step(const std::vector<Tensor>& params, double lr);
bool adam_step(const std::vector<Tensor>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps);
// Scales every gradient by clip/norm when the global norm exceeds clip > 0.
// Returns the pre-clip global norm.
double clip_gradients(const std::vector<Tensor>& params, double clip);

// Instrumented training record. Row 0 is the pre-training state: loss and
// diagnostics on the probe batch, lr 0, model_update exactly 0. Later rows
// land every record_interval steps and at the final step. loss, gradient
// norms, and normalization-site norms are measured on the fixed probe
// batch, so the series are deterministic and comparable across schemes;
// the per-step training loss only drives divergence detection.
struct RunTrace {
  std::vector<int> steps;
  std::vector<double> loss;
  std::vector<double> lr;
  std::vector<double> model_update;  // ||F(theta) - F(theta_0)|| over probe logits
  std::vector<std::string> sublayer_tags;
  std::vector<std::vector<double>> grad_norms;  // [record][sublayer]
  std::vector<std::string> ln_site_tags;
  std::vector<std::vector<double>> ln_input_norms;  // [record][site]
  bool diverged = false;
  std::optional<int> divergence_step;
  int steps_completed = 0;

  double initial_loss() const;
  double final_loss() const;
  bool converged() const;  // finished, finite, and final < 0.1 * initial
};

// Runs the full loop: fresh model from model_cfg, probe batch from the
// "probe_batch" stream of train_cfg.seed, training batches from
// "train_batches", dropout masks from "dropout". Divergence (non-finite
// loss, loss above 1000x the row-0 probe loss, or non-finite gradients)
// stops the run before applying the offending update. final_model, when
// given, receives the trained model.
RunTrace train_run(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                   TransformerModel* final_model = nullptr);

// One row per record: step, loss, lr, model_update, then grad_norm_<tag>
// per sub-layer and ln_input_<tag> per normalization site, full precision.
std::string trace_to_csv(const RunTrace& trace);
// Compact summary: divergence, loss endpoints, update extremes, per-tag
// first/last gradient norms and peak site norms.
std::string trace_summary_json(const RunTrace& trace);

struct VanishingSummary {
  std::vector<std::string> tags;
  std::vector<double> ratios;  // last-record over first-record gradient norm
  std::vector<bool> vanished;  // ratio < 0.01
};
// Needs at least two records; throws std::invalid_argument otherwise.
VanishingSummary detect_gradient_vanishing(const RunTrace& trace);

// ||F(theta_i) - F(theta_0)|| on the probe batch after every single step,
// truncated at divergence. steps == 0 yields an empty series.
struct UpdateSeries {
  std::vector<double> series;
  bool diverged = false;
};
UpdateSeries full_model_update_series(const ModelConfig& model_cfg,
                                      const TrainConfig& train_cfg);

}  // namespace normlab
