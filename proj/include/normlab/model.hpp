#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "normlab/gains.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

enum class InitScheme { xavier_gain1, deepnorm_init, postln_init };

InitScheme init_scheme_from_string(const std::string& name);
std::string to_string(InitScheme scheme);

struct ModelConfig {
  ArchShape arch;
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 128;
  NormVariant norm_variant = NormVariant::post_ln;
  // deepnorm residual scales and init gains come from the depth formulas;
  // this picks the rounded constants instead of the exact forms.
  bool rounded_gains = false;
  InitScheme init = InitScheme::xavier_gain1;
  int vocab_size = 16;
  int max_seq_len = 32;
  double ln_eps = 1e-5;
  // Dropout on each residual-branch output; active only when model_forward
  // is handed a mask stream, so evaluation passes stay deterministic.
  double dropout = 0.0;
  std::uint64_t seed = 1;
};

// Throws std::invalid_argument on any violated field constraint.
void validate(const ModelConfig& config);

// Round-trip text form used by checkpoints and run configs. Parsing is
// strict: unknown keys anywhere are rejected, "arch" is required, every
// other field falls back to its default.
std::string model_config_to_json_text(const ModelConfig& config);
ModelConfig model_config_from_json_text(const std::string& text);

enum class SubLayerKind { self_attention, cross_attention, ffn };
std::string to_string(SubLayerKind kind);

// One residual branch. Attention kinds use wq, wk, wv, wo; ffn uses w1, w2.
// tag names the sub-layer in diagnostics and checkpoints: <component>_<layer>_<kind>
// with component in {enc, dec}, layer 1-based, kind in {self, cross, ffn}.
struct SubLayer {
  SubLayerKind kind = SubLayerKind::ffn;
  std::string tag;
  int n_heads = 1;
  Tensor wq, wk, wv, wo;
  Tensor w1, w2;
  std::vector<Tensor> parameters() const;
};

struct TransformerModel {
  ModelConfig config;
  GainSpec gains;  // residual scales and init gains actually applied
  // encoder holds (self, ffn) pairs; decoder holds (self, cross, ffn)
  // triples, or (self, ffn) pairs when there is no encoder to attend to.
  std::vector<SubLayer> encoder;
  std::vector<SubLayer> decoder;
  Tensor src_embed;    // [vocab_size x d_model]; absent for decoder_only
  Tensor tgt_embed;    // [vocab_size x d_model]; absent for encoder_only
  Tensor out_proj;     // [d_model x vocab_size]
  Tensor positional;   // [max_seq_len x d_model] sinusoidal table, constant

  // Trainable tensors in a fixed, documented order: embeddings, encoder
  // sub-layers bottom-up, decoder sub-layers bottom-up, output projection.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;
};

// Draws all weights from per-tensor streams seeded by (config.seed, name).
// Init schemes: xavier_gain1 puts gain 1 everywhere; deepnorm_init applies
// the stack's beta to wv, wo, w1, w2 (wq, wk keep gain 1); postln_init
// divides the same four families in layer l by k = n_layers - l + 1.
// Embeddings and the output projection always use gain 1.
TransformerModel build_model(const ModelConfig& config);

// Multi-head attention per sub-layer weights: softmax over per-head scaled
// scores of (x_q wq)(x_kv wk)^T mixes rows of (x_kv wv), then wo projects.
Tensor attention_forward(Tape& tape, const Tensor& x_q, const Tensor& x_kv,
                         const SubLayer& layer, bool causal);

// Mean row norm of every normalization-site input, in forward order; the
// tag matches the sub-layer that produced it.
struct LnProbe {
  std::string tag;
  double mean_row_norm = 0.0;
};
struct ForwardDiagnostics {
  std::vector<LnProbe> ln_inputs;
};

// Runs the stacks for one sequence pair and returns [len x vocab] logits.
// encoder_only consumes src (tgt must be empty); decoder_only consumes tgt
// (src must be empty) with causal self-attention; encoder_decoder consumes
// both and cross-attends decoder positions to the encoder output. Token
// embeddings are scaled by sqrt(d_model) and offset by the sinusoidal
// table. pre_ln applies one final normalization before the projection.
// dropout_rng enables config.dropout on every residual-branch output;
// without it the forward is a deterministic evaluation pass.
Tensor model_forward(Tape& tape, const TransformerModel& model,
                     const std::vector<int>& src_tokens,
                     const std::vector<int>& tgt_tokens,
                     ForwardDiagnostics* diag = nullptr, Philox* dropout_rng = nullptr);

// Flat binary checkpoint: magic "NLCK", u32 version, u64 config length,
// config JSON text, u64 tensor count, then per tensor name length + name +
// rank + dims + row-major f64 values, all little-endian. load rebuilds from
// the stored config and requires an exact name/shape match.
void save_checkpoint(const TransformerModel& model, const std::string& path);
TransformerModel load_checkpoint(const std::string& path);

}  // namespace normlab
