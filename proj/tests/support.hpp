#pragma once

// Shared test machinery: double-precision reference implementations used as
// independent oracles, a finite-difference gradient harness, and helpers for
// building deterministic toy corpora. Kept free of any test-framework
// dependency so both the unit tests and the acceptance checker can include it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lmmt/data.hpp"
#include "lmmt/model.hpp"
#include "lmmt/rng.hpp"
#include "lmmt/tensor.hpp"
#include "lmmt/transformer.hpp"

namespace support {

using Mat = std::vector<std::vector<double>>;

// ---------------------------------------------------------------------------
// double-precision matrix helpers
// ---------------------------------------------------------------------------

inline Mat zeros(int rows, int cols) {
  return Mat(static_cast<size_t>(rows), std::vector<double>(static_cast<size_t>(cols), 0.0));
}

inline Mat to_mat(const lmmt::Tensor& t) {
  Mat m = zeros(t.rows(), t.cols());
  auto v = t.values();
  for (int r = 0; r < t.rows(); ++r)
    for (int c = 0; c < t.cols(); ++c)
      m[static_cast<size_t>(r)][static_cast<size_t>(c)] =
          static_cast<double>(v[static_cast<size_t>(r) * t.cols() + c]);
  return m;
}

inline Mat mat_mul(const Mat& a, const Mat& b) {
  if (a.empty() || b.empty() || a[0].size() != b.size())
    throw std::invalid_argument("mat_mul: shape mismatch");
  Mat out = zeros(static_cast<int>(a.size()), static_cast<int>(b[0].size()));
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t k = 0; k < b.size(); ++k) {
      const double aik = a[i][k];
      for (size_t j = 0; j < b[0].size(); ++j) out[i][j] += aik * b[k][j];
    }
  return out;
}

inline Mat mat_add(const Mat& a, const Mat& b) {
  Mat out = a;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) out[i][j] += b[i][j];
  return out;
}

// adds the single row of `bias` to every row of x
inline Mat add_bias(const Mat& x, const Mat& bias) {
  Mat out = x;
  for (auto& row : out)
    for (size_t j = 0; j < row.size(); ++j) row[j] += bias[0][j];
  return out;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j)
      worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  return worst;
}

// ---------------------------------------------------------------------------
// scalar reference ops
// ---------------------------------------------------------------------------

// softmax over the unmasked entries of one row; masked entries come out zero
inline std::vector<double> ref_softmax_row(const std::vector<double>& logits,
                                           const std::vector<uint8_t>& keep) {
  double best = -1e300;
  for (size_t j = 0; j < logits.size(); ++j)
    if (keep[j]) best = std::max(best, logits[j]);
  std::vector<double> out(logits.size(), 0.0);
  double total = 0.0;
  for (size_t j = 0; j < logits.size(); ++j)
    if (keep[j]) {
      out[j] = std::exp(logits[j] - best);
      total += out[j];
    }
  for (double& v : out) v /= total;
  return out;
}

inline std::vector<double> ref_layer_norm_row(const std::vector<double>& x,
                                              const std::vector<double>& gain,
                                              const std::vector<double>& bias,
                                              double eps = 1e-6) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - mean) * inv * gain[j] + bias[j];
  return out;
}

// mean label-smoothed cross entropy over rows whose target is not `pad`
inline double ref_cross_entropy(const Mat& logits, const std::vector<int>& targets,
                                double smoothing, int pad) {
  const size_t v = logits[0].size();
  double total = 0.0;
  int counted = 0;
  for (size_t r = 0; r < logits.size(); ++r) {
    if (targets[r] == pad) continue;
    double best = *std::max_element(logits[r].begin(), logits[r].end());
    double lse = 0.0;
    for (double z : logits[r]) lse += std::exp(z - best);
    lse = best + std::log(lse);
    const double off = smoothing / static_cast<double>(v);
    double loss = 0.0;
    for (size_t j = 0; j < v; ++j) {
      const double p = off + (static_cast<int>(j) == targets[r] ? 1.0 - smoothing : 0.0);
      loss += p * (lse - logits[r][j]);
    }
    total += loss;
    ++counted;
  }
  return total / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// reference attention and transformer layer (post-norm only)
// ---------------------------------------------------------------------------

struct RefAttention {
  Mat wq, bq, wk, bk, wv, bv, wo, bo;
};

inline RefAttention ref_attn_params(const lmmt::AttentionParams& a) {
  return {to_mat(a.wq), to_mat(a.bq), to_mat(a.wk), to_mat(a.bk),
          to_mat(a.wv), to_mat(a.bv), to_mat(a.wo), to_mat(a.bo)};
}

// per-head attention computed one head at a time; `mask` has one row per
// query row of x and one column per row of ctx
inline Mat ref_attention(const Mat& x, const Mat& ctx, const RefAttention& p, int heads,
                         const std::vector<std::vector<uint8_t>>& mask) {
  const int d = static_cast<int>(p.wq[0].size());
  const int dh = d / heads;
  Mat q = add_bias(mat_mul(x, p.wq), p.bq);
  Mat k = add_bias(mat_mul(ctx, p.wk), p.bk);
  Mat v = add_bias(mat_mul(ctx, p.wv), p.bv);
  Mat mixed = zeros(static_cast<int>(x.size()), d);
  for (int h = 0; h < heads; ++h) {
    const int base = h * dh;
    for (size_t i = 0; i < x.size(); ++i) {
      std::vector<double> scores(ctx.size());
      for (size_t j = 0; j < ctx.size(); ++j) {
        double dot = 0.0;
        for (int c = 0; c < dh; ++c) dot += q[i][base + c] * k[j][base + c];
        scores[j] = dot / std::sqrt(static_cast<double>(dh));
      }
      std::vector<double> w = ref_softmax_row(scores, mask[i]);
      for (size_t j = 0; j < ctx.size(); ++j)
        for (int c = 0; c < dh; ++c) mixed[i][base + c] += w[j] * v[j][base + c];
    }
  }
  return add_bias(mat_mul(mixed, p.wo), p.bo);
}

inline Mat ref_norm_all(const Mat& x, const lmmt::NormParams& n) {
  Mat gain = to_mat(n.gain), bias = to_mat(n.bias);
  Mat out = x;
  for (auto& row : out) row = ref_layer_norm_row(row, gain[0], bias[0]);
  return out;
}

inline Mat ref_ffn(const Mat& x, const lmmt::FfnParams& f) {
  Mat h = add_bias(mat_mul(x, to_mat(f.w1)), to_mat(f.b1));
  for (auto& row : h)
    for (double& v : row) v = std::max(v, 0.0);
  return add_bias(mat_mul(h, to_mat(f.w2)), to_mat(f.b2));
}

// one post-norm layer whose single attention reads keys and values from `ctx`
inline Mat ref_layer_postnorm(const Mat& x, const Mat& ctx, const lmmt::LayerParams& layer,
                              int heads, const std::vector<std::vector<uint8_t>>& mask) {
  Mat a = ref_attention(x, ctx, ref_attn_params(layer.self_attn), heads, mask);
  Mat h = ref_norm_all(mat_add(x, a), layer.norm_self);
  Mat f = ref_ffn(h, layer.ffn);
  return ref_norm_all(mat_add(h, f), layer.norm_ffn);
}

// ---------------------------------------------------------------------------
// step-by-step encoder-decoder reference (two-softmax decoder, post-norm)
// ---------------------------------------------------------------------------

inline Mat ref_embed(const lmmt::ModelState& state, const std::vector<int>& ids,
                     int first_pos);

inline Mat ref_encdec_logits(const lmmt::ModelState& state, const lmmt::SequencePair& pair) {
  if (state.config.norm != lmmt::NormPlacement::PostNorm)
    throw std::invalid_argument("ref_encdec_logits: post-norm only");
  const int heads = state.config.heads;
  const int nx = static_cast<int>(pair.src.size());

  Mat x = ref_embed(state, pair.src, 0);
  std::vector<std::vector<uint8_t>> full(
      static_cast<size_t>(nx), std::vector<uint8_t>(static_cast<size_t>(nx), 1));
  for (const lmmt::LayerParams& layer : state.stack)
    x = ref_layer_postnorm(x, x, layer, heads, full);

  std::vector<int> dec_ids{pair.start_token};
  dec_ids.insert(dec_ids.end(), pair.tgt.begin(), pair.tgt.end() - 1);
  const int ny = static_cast<int>(dec_ids.size());
  Mat y = ref_embed(state, dec_ids, 0);
  std::vector<std::vector<uint8_t>> causal(
      static_cast<size_t>(ny), std::vector<uint8_t>(static_cast<size_t>(ny), 0));
  for (int r = 0; r < ny; ++r)
    for (int c = 0; c <= r; ++c) causal[static_cast<size_t>(r)][static_cast<size_t>(c)] = 1;
  std::vector<std::vector<uint8_t>> cross(
      static_cast<size_t>(ny), std::vector<uint8_t>(static_cast<size_t>(nx), 1));
  for (const lmmt::LayerParams& layer : state.dec_stack) {
    Mat a = ref_attention(y, y, ref_attn_params(layer.self_attn), heads, causal);
    Mat h = ref_norm_all(mat_add(y, a), layer.norm_self);
    Mat c = ref_attention(h, x, ref_attn_params(*layer.cross_attn), heads, cross);
    Mat h2 = ref_norm_all(mat_add(h, c), *layer.norm_cross);
    Mat f = ref_ffn(h2, layer.ffn);
    y = ref_norm_all(mat_add(h2, f), layer.norm_ffn);
  }
  return add_bias(mat_mul(y, to_mat(state.out_w)), to_mat(state.out_b));
}

// ---------------------------------------------------------------------------
// merged-attention encoder-decoder reference
// ---------------------------------------------------------------------------
//
// Runs the source through the first stack with full self-attention, then runs
// the decoder rows through the second stack where each layer's only attention
// block sees [memory ; own causal prefix] in a single softmax. This is the
// two-pass architecture spelled out row by row, so it doubles as an
// independent check of the production forward pass.

inline Mat ref_embed(const lmmt::ModelState& state, const std::vector<int>& ids,
                     int first_pos) {
  const int d = state.config.d;
  Mat table = to_mat(state.embedding);
  Mat pe = to_mat(lmmt::sinusoid_positions(first_pos, static_cast<int>(ids.size()), d));
  Mat out = zeros(static_cast<int>(ids.size()), d);
  for (size_t r = 0; r < ids.size(); ++r)
    for (int c = 0; c < d; ++c)
      out[r][c] = table[static_cast<size_t>(ids[r])][static_cast<size_t>(c)] *
                      std::sqrt(static_cast<double>(d)) +
                  pe[r][static_cast<size_t>(c)];
  return out;
}

inline Mat ref_merged_encdec_logits(const lmmt::ModelState& state,
                                    const lmmt::SequencePair& pair) {
  if (state.config.norm != lmmt::NormPlacement::PostNorm)
    throw std::invalid_argument("ref_merged_encdec_logits: post-norm only");
  const int heads = state.config.heads;
  const int nx = static_cast<int>(pair.src.size());

  Mat x = ref_embed(state, pair.src, 0);
  std::vector<std::vector<uint8_t>> full(
      static_cast<size_t>(nx), std::vector<uint8_t>(static_cast<size_t>(nx), 1));
  for (const lmmt::LayerParams& layer : state.stack)
    x = ref_layer_postnorm(x, x, layer, heads, full);

  std::vector<int> dec_ids{pair.start_token};
  dec_ids.insert(dec_ids.end(), pair.tgt.begin(), pair.tgt.end() - 1);
  Mat y = ref_embed(state, dec_ids, 0);
  const int ny = static_cast<int>(dec_ids.size());
  std::vector<std::vector<uint8_t>> joint(
      static_cast<size_t>(ny), std::vector<uint8_t>(static_cast<size_t>(nx + ny), 0));
  for (int r = 0; r < ny; ++r) {
    for (int c = 0; c < nx; ++c) joint[static_cast<size_t>(r)][static_cast<size_t>(c)] = 1;
    for (int c = 0; c <= r; ++c)
      joint[static_cast<size_t>(r)][static_cast<size_t>(nx + c)] = 1;
  }
  const std::vector<lmmt::LayerParams>& pass2 =
      state.config.tie_lm_stacks ? state.stack : state.dec_stack;
  for (const lmmt::LayerParams& layer : pass2) {
    Mat ctx = x;
    ctx.insert(ctx.end(), y.begin(), y.end());
    y = ref_layer_postnorm(y, ctx, layer, heads, joint);
  }
  return add_bias(mat_mul(y, to_mat(state.out_w)), to_mat(state.out_b));
}

// ---------------------------------------------------------------------------
// finite-difference gradient harness
// ---------------------------------------------------------------------------

struct FdReport {
  double max_rel = 0.0;
  int checked = 0;
  double worst_fd = 0.0;
  double worst_analytic = 0.0;
  int64_t worst_index = -1;
};

inline double rel_gap(double a, double b, double floor_at) {
  return std::abs(a - b) / std::max({floor_at, std::abs(a), std::abs(b)});
}

// Central differences on the listed elements of `param` against one taped
// backward pass. `make_loss` must rebuild the graph from the tensors' current
// values; it gets a null tape for the plain re-evaluations.
inline FdReport fd_compare(const std::function<lmmt::Tensor(lmmt::Tape*)>& make_loss,
                           lmmt::Tensor param, const std::vector<int64_t>& elements,
                           double h, double denom_floor) {
  param.set_requires_grad(true);
  param.zero_grad();
  lmmt::Tape tape;
  lmmt::Tensor loss = make_loss(&tape);
  tape.backward(loss);
  std::vector<float> g(param.grad().begin(), param.grad().end());

  FdReport rep;
  auto vals = param.values();
  for (int64_t i : elements) {
    const float saved = vals[static_cast<size_t>(i)];
    vals[static_cast<size_t>(i)] = static_cast<float>(saved + h);
    const double up = static_cast<double>(make_loss(nullptr).item());
    vals[static_cast<size_t>(i)] = static_cast<float>(saved - h);
    const double down = static_cast<double>(make_loss(nullptr).item());
    vals[static_cast<size_t>(i)] = saved;
    const double fd = (up - down) / (2.0 * h);
    const double rel = rel_gap(fd, static_cast<double>(g[static_cast<size_t>(i)]), denom_floor);
    ++rep.checked;
    if (rel > rep.max_rel) {
      rep.max_rel = rel;
      rep.worst_fd = fd;
      rep.worst_analytic = static_cast<double>(g[static_cast<size_t>(i)]);
      rep.worst_index = i;
    }
  }
  return rep;
}

inline std::vector<int64_t> every_element(const lmmt::Tensor& t) {
  std::vector<int64_t> idx(static_cast<size_t>(t.rows()) * t.cols());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
  return idx;
}

// spread of element indices for large tensors, deterministic per purpose tag
inline std::vector<int64_t> sampled_elements(const lmmt::Tensor& t, int count, uint64_t seed,
                                             const std::string& purpose) {
  lmmt::RngStream rng(seed, purpose);
  const int64_t n = static_cast<int64_t>(t.rows()) * t.cols();
  std::vector<int64_t> idx;
  for (int i = 0; i < count; ++i)
    idx.push_back(static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n))));
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

inline void fill_normal(lmmt::Tensor t, uint64_t seed, const std::string& purpose,
                        float stddev = 1.0f) {
  lmmt::RngStream rng(seed, purpose);
  t.fill_normal(rng, stddev);
}

// double-weighted scalar reduction w_row * x * w_col so every element of x
// reaches the loss with a distinct coefficient
inline lmmt::Tensor weighted_scalar(lmmt::Tape* tape, const lmmt::Tensor& x,
                                    const lmmt::Tensor& w_row, const lmmt::Tensor& w_col) {
  return lmmt::ops::matmul(tape, lmmt::ops::matmul(tape, w_row, x), w_col);
}

inline std::pair<lmmt::Tensor, lmmt::Tensor> reduction_weights(int rows, int cols,
                                                               uint64_t seed) {
  lmmt::Tensor w_row(1, rows), w_col(cols, 1);
  fill_normal(w_row, seed, "fd/w_row", 0.5f);
  fill_normal(w_col, seed, "fd/w_col", 0.5f);
  return {w_row, w_col};
}

// ---------------------------------------------------------------------------
// toy corpora
// ---------------------------------------------------------------------------

// handmade pair with explicit streams; start token defaults to the shared BOS
inline lmmt::SequencePair make_pair(std::vector<int> src, std::vector<int> tgt_with_eos,
                                    int start_token = lmmt::kBosId,
                                    bool start_in_lm_stream = false) {
  lmmt::SequencePair p;
  p.src = std::move(src);
  p.tgt = std::move(tgt_with_eos);
  p.start_token = start_token;
  p.start_in_lm_stream = start_in_lm_stream;
  return p;
}

// a scratch directory wiped on entry, for checkpoint and file round-trip tests
inline std::string fresh_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "lmmt_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// two-language vocabulary reused by the trainer and eval tests
inline lmmt::VocabLayout tiny_layout(int n_languages = 2, int tokens_per_language = 8) {
  lmmt::VocabLayout layout;
  layout.n_languages = n_languages;
  layout.tokens_per_language = tokens_per_language;
  return layout;
}

// reversal corpus l0 -> l1 over the tiny layout, lengths in [min_len, max_len]
inline lmmt::ParallelCorpus tiny_corpus(const lmmt::VocabLayout& layout, int n,
                                        uint64_t seed, lmmt::Split split, int min_len = 2,
                                        int max_len = 4) {
  lmmt::TranslationRule rule;
  rule.src_lang = 0;
  rule.tgt_lang = 1;
  rule.transform = lmmt::StructuralTransform::Reversal;
  return lmmt::generate_corpus(layout.language(0, min_len, max_len),
                               layout.language(1, min_len, max_len), rule, n, seed, split);
}

}  // namespace support
