// The five model variants as forward functions over packed batches, plus the
// losses, parameter/FLOPs accounting, parameter alignment between EncDec and
// LM configurations, and checkpoint serialization.
//
// Sequence conventions (uniform across variants so target losses compare):
//   - pair.src: the source tokens as fed (tags included), no EOS
//   - pair.tgt: the label stream, content tokens then EOS
//   - EncDec / TopOnly decode from input [start, tgt[0..m-2]]; prediction row k
//     is labeled tgt[k]
//   - PrefixLM / CausalLM run over the concatenation [src, tgt] (|src|+|tgt|
//     rows); row |src|-1+k is labeled tgt[k], so the last source row predicts
//     the first target token, and the final row carries no label. When the
//     start token is part of the LM stream (target_start tagging) the target
//     block becomes [start, tgt[0..m-1]] and labels shift one row later.
//   - CausalLM additionally labels source rows 0..|src|-2 with src[1..] for the
//     source-side LM loss; TgtOnly leaves them padded.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "lmmt/data.hpp"
#include "lmmt/transformer.hpp"

namespace lmmt {

enum class Family { EncDec, PrefixLM, CausalLM };

struct ModelVariant {
  Family family = Family::EncDec;
  bool top_only = false;  // PrefixLM only
  bool tgt_only = false;  // CausalLM only
};

// canonical names: encdec, prefixlm, prefixlm_top, causallm, causallm_tgt
std::string variant_name(const ModelVariant& v);
ModelVariant parse_variant(const std::string& name);
void validate_variant(const ModelVariant& v);  // rejects illegal flag/family combos

enum class ScaleMode { Deep, Wide };

struct ModelConfig {
  ModelVariant variant;
  int vocab_size = 0;
  int d = 512;
  int d_ff = 2048;
  int layers = 6;
  int heads = 8;
  NormPlacement norm = NormPlacement::PostNorm;
  float dropout = 0.1f;
  float label_smoothing = 0.1f;
  bool tie_lm_stacks = true;  // PrefixLM+TopOnly: share one stack across both passes
};

ModelConfig base_preset();  // d=512, d_ff=2048, heads=8
ModelConfig big_preset();   // doubled

void validate_config(const ModelConfig& config);

struct ModelState {
  ModelConfig config;
  Tensor embedding;  // vocab x d, scaled by sqrt(d) at lookup
  Tensor out_w;      // d x vocab
  Tensor out_b;      // 1 x vocab
  std::vector<LayerParams> stack;      // encoder stack, or the shared LM stack
  std::vector<LayerParams> dec_stack;  // EncDec decoder; untied TopOnly second pass
  std::optional<NormParams> final_norm;      // pre-norm only
  std::optional<NormParams> dec_final_norm;  // pre-norm EncDec / untied TopOnly
};

ModelState init_model(const ModelConfig& config, uint64_t seed);

// stable (name, tensor) listing used by the optimizer and checkpoints
std::vector<std::pair<std::string, Tensor>> named_parameters(ModelState& state);
void set_training_mode(ModelState& state, bool requires_grad);

// Packed forward over a batch. logits hold one row per prediction position
// (decoder rows for EncDec/TopOnly, every concatenation row for PrefixLM and
// CausalLM); tgt_labels/src_labels give each row's label or pad.
struct ForwardResult {
  Tensor logits;
  std::vector<int> tgt_labels;
  std::vector<int> src_labels;
  std::vector<std::pair<int, int>> pair_rows;  // per pair: its row range in logits
  int tgt_tokens = 0;
  int src_tokens = 0;
};

ForwardResult forward_batch(Tape* tape, ModelState& state, std::span<const SequencePair> batch,
                            const DropoutSpec& dropout = {});

// single-pair forwards
Tensor forward_encdec(Tape* tape, ModelState& state, const std::vector<int>& src,
                      const std::vector<int>& tgt, int start_token = kBosId);
Tensor forward_lm(Tape* tape, ModelState& state, const std::vector<int>& src,
                  const std::vector<int>& tgt, MaskKind mask_kind);
Tensor forward_prefixlm_toponly(Tape* tape, ModelState& state, const std::vector<int>& src,
                                const std::vector<int>& tgt, int start_token = kBosId);

// label-smoothed target loss over the rows with non-pad target labels
Tensor loss_tgt(Tape* tape, const Tensor& logits, const std::vector<int>& tgt_labels,
                float smoothing);

struct CausalLoss {
  Tensor total;     // src_part + tgt_part, each a mean over its own token count
  double src_part;  // per-token mean over source labels (0 when none)
  double tgt_part;  // per-token mean over target labels
};

// source-LM + translation objective; with no source labels (TgtOnly or |X|=1)
// the total equals the target loss exactly
CausalLoss loss_causallm(Tape* tape, const Tensor& logits, const std::vector<int>& src_labels,
                         const std::vector<int>& tgt_labels, float smoothing);

// training objective for the configured variant
Tensor training_loss(Tape* tape, const ModelState& state, const ForwardResult& fwd,
                     double* src_part = nullptr, double* tgt_part = nullptr);

// log-probabilities for the next target token given a partial target prefix
std::vector<float> next_token_logprobs(ModelState& state, const std::vector<int>& src,
                                       const std::vector<int>& prefix, int start_token,
                                       bool start_in_lm_stream);

// non-embedding parameter count: stacks, norms, final norms; excludes the
// embedding table and the output projection
int64_t param_count(const ModelConfig& config);

// forward FLOPs for one (src_len, tgt_len) pair at 2 FLOPs per multiply-add,
// counting attention projections, attention score/mix products, and the FFN
int64_t flops_estimate(const ModelConfig& config, int src_len, int tgt_len);

struct AlignedConfigs {
  ModelConfig deep;
  ModelConfig wide;
  int64_t target_params = 0;
  int64_t deep_params = 0;
  int64_t wide_params = 0;
  double deep_mismatch = 0.0;  // |achieved-target|/target
  double wide_mismatch = 0.0;
};

// Parameter-aligned LM configurations for an EncDec anchor: deep stacks more
// layers (smallest depth reaching the anchor count; pre-norm auto-selected
// above 12 layers), wide keeps the depth and rescales d_ff to the closest
// match. The returned configs carry family PrefixLM; restamp the variant as
// needed (all LM variants share stack geometry).
AlignedConfigs align_configs(const ModelConfig& encdec_anchor);

// checkpoint bundles: versioned text manifest + little-endian float32 payload
struct TensorBundle {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_bundle(const std::string& path, const TensorBundle& bundle);
TensorBundle load_bundle(const std::string& path);

std::map<std::string, std::string> config_meta(const ModelConfig& config);
ModelConfig config_from_meta(const std::map<std::string, std::string>& meta);

void save_model(const std::string& path, ModelState& state);
ModelState load_model(const std::string& path);

}  // namespace lmmt
