// Transformer building blocks: attention mask construction, sinusoidal
// positions, multi-head attention over packed batches, and a full
// pre/post-norm layer.
//
// Packing convention: sequences in a batch are stacked row-wise into one
// matrix. An AttentionSegment names one sequence's query rows and the key/value
// row spans it may attend over, with an explicit 0/1 mask of shape
// (num query rows) x (total key rows across spans). Several spans let a query
// block attend over non-contiguous context (e.g. encoder memory + its own
// prefix) without copying rows.
#pragma once

#include <optional>
#include <vector>

#include "lmmt/tensor.hpp"

namespace lmmt {

enum class MaskKind { EncSelf, DecSelf, Cross, Prefix, Causal };

struct AttentionMaskSpec {
  MaskKind kind;
  int src_len = 0;
  int tgt_len = 0;
};

// Realizes the visibility pattern for one sequence pair:
//   EncSelf: [src x src] all ones          DecSelf: [tgt x tgt] lower triangle
//   Cross:   [tgt x src] all ones
//   Prefix:  [(src+tgt) x (src+tgt)], position i sees j iff j <= i or j falls
//            inside the source block
//   Causal:  [(src+tgt) x (src+tgt)] lower triangle
BoolMatrix build_mask(const AttentionMaskSpec& spec);

// rows [first, first+count) of the sinusoidal position table, width d (even)
Tensor sinusoid_positions(int first, int count, int d);

// Position rows for a concatenated source+target sequence. With
// restart_at_target the target block restarts counting at 0, matching what an
// encoder/decoder pair would see; otherwise positions run straight through.
Tensor positions(int src_len, int tgt_len, int d, bool restart_at_target = true);

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

struct NormParams {
  Tensor gain, bias;
};

enum class NormPlacement { PostNorm, PreNorm };

struct AttentionSegment {
  int q_begin = 0;
  int q_end = 0;
  std::vector<std::pair<int, int>> k_spans;  // [begin,end) row ranges in the context
  const BoolMatrix* mask = nullptr;
};

struct DropoutSpec {
  float rate = 0.0f;
  RngStream* rng = nullptr;
  bool training = false;
  bool active() const { return training && rate > 0.0f && rng != nullptr; }
};

// Scaled dot-product attention with per-segment masking, then output
// projection. Queries come from x, keys/values from context (which may be x).
Tensor multi_head_attention(Tape* tape, const Tensor& x, const Tensor& context,
                            const AttentionParams& params, int heads,
                            const std::vector<AttentionSegment>& segments,
                            const DropoutSpec& attn_dropout = {});

// single-sequence convenience: one segment covering all of x and context
Tensor multi_head_attention(Tape* tape, const Tensor& x, const Tensor& context,
                            const BoolMatrix& mask, const AttentionParams& params,
                            int heads, const DropoutSpec& attn_dropout = {});

struct LayerParams {
  AttentionParams self_attn;
  std::optional<AttentionParams> cross_attn;
  FfnParams ffn;
  NormParams norm_self;
  std::optional<NormParams> norm_cross;
  NormParams norm_ffn;
};

struct LayerInputs {
  // prepended (already computed) rows forming the head of the self-attention
  // context; self segment k-spans index into concat(self_prefix, x)
  const Tensor* self_prefix = nullptr;
  const std::vector<AttentionSegment>* self_segments = nullptr;
  const Tensor* cross_context = nullptr;
  const std::vector<AttentionSegment>* cross_segments = nullptr;
};

// One encoder/decoder layer: self-attention, optional cross-attention (iff
// params.cross_attn is set), position-wise ReLU FFN. PostNorm runs
// sublayer -> dropout -> residual -> norm; PreNorm runs
// norm -> sublayer -> dropout -> residual.
Tensor transformer_layer(Tape* tape, const Tensor& x, const LayerParams& params, int heads,
                         NormPlacement placement, const LayerInputs& in,
                         const DropoutSpec& dropout = {});

}  // namespace lmmt
