#include "lmmt/transformer.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace lmmt {

using EigenMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EigenMat>;
using CMap = Eigen::Map<const EigenMat>;

namespace {

Map map(Tensor& t) { return Map(t.values().data(), t.rows(), t.cols()); }
CMap cmap(const Tensor& t) { return CMap(t.values().data(), t.rows(), t.cols()); }
Map gmap(Tensor& t) { return Map(t.grad().data(), t.rows(), t.cols()); }

int span_total(const AttentionSegment& seg) {
  int n = 0;
  for (auto [b, e] : seg.k_spans) n += e - b;
  return n;
}

// segment geometry kept alive for the backward pass (no mask pointer)
struct SegGeom {
  int q_begin, q_end;
  std::vector<std::pair<int, int>> k_spans;
  int nk;
  size_t probs_offset;  // into the cached probability buffer, per head-major layout
};

}  // namespace

BoolMatrix build_mask(const AttentionMaskSpec& spec) {
  const int sx = spec.src_len, sy = spec.tgt_len;
  auto demand = [&](bool ok, const char* what) {
    if (!ok)
      throw std::invalid_argument(std::string("build_mask: ") + what +
                                  " must be positive (src_len=" + std::to_string(sx) +
                                  ", tgt_len=" + std::to_string(sy) + ")");
  };
  switch (spec.kind) {
    case MaskKind::EncSelf: {
      demand(sx > 0, "src_len");
      return BoolMatrix(sx, sx, 1);
    }
    case MaskKind::DecSelf: {
      demand(sy > 0, "tgt_len");
      BoolMatrix m(sy, sy, 0);
      for (int i = 0; i < sy; ++i)
        for (int j = 0; j <= i; ++j) m.at(i, j) = 1;
      return m;
    }
    case MaskKind::Cross: {
      demand(sx > 0, "src_len");
      demand(sy > 0, "tgt_len");
      return BoolMatrix(sy, sx, 1);
    }
    case MaskKind::Prefix: {
      demand(sx > 0, "src_len");
      demand(sy > 0, "tgt_len");
      const int s = sx + sy;
      BoolMatrix m(s, s, 0);
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j)
          if (j <= i || j < sx) m.at(i, j) = 1;
      return m;
    }
    case MaskKind::Causal: {
      demand(sx > 0, "src_len");
      demand(sy > 0, "tgt_len");
      const int s = sx + sy;
      BoolMatrix m(s, s, 0);
      for (int i = 0; i < s; ++i)
        for (int j = 0; j <= i; ++j) m.at(i, j) = 1;
      return m;
    }
  }
  throw std::invalid_argument("build_mask: unknown mask kind");
}

Tensor sinusoid_positions(int first, int count, int d) {
  if (d <= 0 || d % 2 != 0)
    throw std::invalid_argument("sinusoid_positions: width must be positive and even, got " +
                                std::to_string(d));
  if (first < 0 || count < 0)
    throw std::invalid_argument("sinusoid_positions: negative range");
  Tensor out(count, d);
  for (int r = 0; r < count; ++r) {
    const double pos = first + r;
    for (int i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / d);
      out.at(r, 2 * i) = static_cast<float>(std::sin(pos * freq));
      out.at(r, 2 * i + 1) = static_cast<float>(std::cos(pos * freq));
    }
  }
  return out;
}

Tensor positions(int src_len, int tgt_len, int d, bool restart_at_target) {
  if (src_len < 0 || tgt_len < 0)
    throw std::invalid_argument("positions: negative length");
  Tensor out(src_len + tgt_len, d);
  Tensor src = sinusoid_positions(0, src_len, d);
  Tensor tgt = restart_at_target ? sinusoid_positions(0, tgt_len, d)
                                 : sinusoid_positions(src_len, tgt_len, d);
  std::copy(src.values().begin(), src.values().end(), out.values().begin());
  std::copy(tgt.values().begin(), tgt.values().end(),
            out.values().begin() + src.size());
  return out;
}

namespace {

// Core scaled dot-product attention over packed segments. Records its own
// backward step; caches pre-dropout attention probabilities per segment/head.
Tensor attention_core(Tape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                      int heads, const std::vector<AttentionSegment>& segments,
                      const DropoutSpec& drop) {
  const int d = q.cols();
  if (k.cols() != d || v.cols() != d)
    throw std::invalid_argument("attention: width mismatch: q " + q.shape_str() + ", k " +
                                k.shape_str() + ", v " + v.shape_str());
  if (k.rows() != v.rows())
    throw std::invalid_argument("attention: key/value row counts differ: " + k.shape_str() +
                                " vs " + v.shape_str());
  if (heads <= 0 || d % heads != 0)
    throw std::invalid_argument("attention: head count " + std::to_string(heads) +
                                " does not divide model width " + std::to_string(d));
  const int dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  std::vector<SegGeom> geoms;
  geoms.reserve(segments.size());
  size_t probs_size = 0;
  for (size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.q_begin < 0 || seg.q_end > q.rows() || seg.q_begin >= seg.q_end)
      throw std::invalid_argument("attention: segment " + std::to_string(s) +
                                  " query range invalid for " + q.shape_str());
    for (auto [b, e] : seg.k_spans)
      if (b < 0 || e > k.rows() || b >= e)
        throw std::invalid_argument("attention: segment " + std::to_string(s) +
                                    " key span invalid for " + k.shape_str());
    const int nq = seg.q_end - seg.q_begin;
    const int nk = span_total(seg);
    if (seg.mask == nullptr || seg.mask->rows != nq || seg.mask->cols != nk)
      throw std::invalid_argument("attention: segment " + std::to_string(s) +
                                  " mask does not cover " + std::to_string(nq) + "x" +
                                  std::to_string(nk));
    geoms.push_back({seg.q_begin, seg.q_end, seg.k_spans, nk, probs_size});
    probs_size += static_cast<size_t>(heads) * nq * nk;
  }

  const bool wants = tape != nullptr &&
                     (q.requires_grad() || k.requires_grad() || v.requires_grad());
  const bool dropping = drop.active();
  auto probs = std::make_shared<std::vector<float>>();
  auto keep = std::make_shared<std::vector<uint8_t>>();
  if (wants) probs->resize(probs_size);
  if (wants && dropping) keep->resize(probs_size);
  const float inv_keep = dropping ? 1.0f / (1.0f - drop.rate) : 1.0f;

  Tensor out(q.rows(), d);
  EigenMat scores, ctx;
  for (size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    const SegGeom& g = geoms[s];
    const int nq = g.q_end - g.q_begin;
    for (int h = 0; h < heads; ++h) {
      scores.resize(nq, g.nk);
      int coff = 0;
      for (auto [b, e] : g.k_spans) {
        scores.block(0, coff, nq, e - b).noalias() =
            cmap(q).block(g.q_begin, h * dh, nq, dh) *
            cmap(k).block(b, h * dh, e - b, dh).transpose() * scale;
        coff += e - b;
      }
      // masked softmax, row by row
      for (int r = 0; r < nq; ++r) {
        bool any = false;
        float mx = -std::numeric_limits<float>::infinity();
        for (int c = 0; c < g.nk; ++c) {
          const float z = scores(r, c) + (seg.mask->at(r, c) ? 0.0f : -1e9f);
          any = any || seg.mask->at(r, c);
          scores(r, c) = z;
          if (z > mx) mx = z;
        }
        if (!any)
          throw std::invalid_argument("attention: query row " + std::to_string(r) +
                                      " of segment " + std::to_string(s) +
                                      " is fully masked");
        double denom = 0.0;
        for (int c = 0; c < g.nk; ++c) {
          const float e = std::exp(scores(r, c) - mx);
          scores(r, c) = e;
          denom += e;
        }
        const float inv = static_cast<float>(1.0 / denom);
        for (int c = 0; c < g.nk; ++c)
          scores(r, c) = seg.mask->at(r, c) ? scores(r, c) * inv : 0.0f;
      }
      if (wants) {
        float* dst = probs->data() + g.probs_offset + static_cast<size_t>(h) * nq * g.nk;
        Map(dst, nq, g.nk) = scores;
      }
      if (dropping) {
        uint8_t* kb = wants ? keep->data() + g.probs_offset + static_cast<size_t>(h) * nq * g.nk
                            : nullptr;
        for (int r = 0; r < nq; ++r)
          for (int c = 0; c < g.nk; ++c) {
            const bool keep_it = drop.rng->next_float() >= drop.rate;
            if (kb) kb[static_cast<size_t>(r) * g.nk + c] = keep_it;
            scores(r, c) = keep_it ? scores(r, c) * inv_keep : 0.0f;
          }
      }
      ctx.resize(nq, dh);
      ctx.setZero();
      int voff = 0;
      for (auto [b, e] : g.k_spans) {
        ctx.noalias() += scores.block(0, voff, nq, e - b) * cmap(v).block(b, h * dh, e - b, dh);
        voff += e - b;
      }
      map(out).block(g.q_begin, h * dh, nq, dh) = ctx;
    }
  }

  if (wants) {
    out.set_requires_grad(true);
    tape->record([q = q, k = k, v = v, out, geoms, heads, dh, scale, probs, keep, dropping,
                  inv_keep]() mutable {
      EigenMat dP, A, P, dS;
      for (const SegGeom& g : geoms) {
        const int nq = g.q_end - g.q_begin;
        for (int h = 0; h < heads; ++h) {
          const float* src = probs->data() + g.probs_offset + static_cast<size_t>(h) * nq * g.nk;
          A = CMap(src, nq, g.nk);
          if (dropping) {
            const uint8_t* kb = keep->data() + g.probs_offset + static_cast<size_t>(h) * nq * g.nk;
            P = A;
            for (int r = 0; r < nq; ++r)
              for (int c = 0; c < g.nk; ++c)
                P(r, c) = kb[static_cast<size_t>(r) * g.nk + c] ? P(r, c) * inv_keep : 0.0f;
          }
          const EigenMat& post = dropping ? P : A;
          auto dOh = gmap(out).block(g.q_begin, h * dh, nq, dh);
          dP.resize(nq, g.nk);
          int coff = 0;
          for (auto [b, e] : g.k_spans) {
            dP.block(0, coff, nq, e - b).noalias() =
                dOh * cmap(v).block(b, h * dh, e - b, dh).transpose();
            if (v.requires_grad())
              gmap(v).block(b, h * dh, e - b, dh).noalias() +=
                  post.block(0, coff, nq, e - b).transpose() * dOh;
            coff += e - b;
          }
          if (dropping) {
            const uint8_t* kb = keep->data() + g.probs_offset + static_cast<size_t>(h) * nq * g.nk;
            for (int r = 0; r < nq; ++r)
              for (int c = 0; c < g.nk; ++c)
                dP(r, c) = kb[static_cast<size_t>(r) * g.nk + c] ? dP(r, c) * inv_keep : 0.0f;
          }
          dS.resize(nq, g.nk);
          for (int r = 0; r < nq; ++r) {
            double dot = 0.0;
            for (int c = 0; c < g.nk; ++c) dot += static_cast<double>(dP(r, c)) * A(r, c);
            for (int c = 0; c < g.nk; ++c)
              dS(r, c) = A(r, c) * (dP(r, c) - static_cast<float>(dot));
          }
          coff = 0;
          for (auto [b, e] : g.k_spans) {
            if (q.requires_grad())
              gmap(q).block(g.q_begin, h * dh, nq, dh).noalias() +=
                  dS.block(0, coff, nq, e - b) * cmap(k).block(b, h * dh, e - b, dh) * scale;
            if (k.requires_grad())
              gmap(k).block(b, h * dh, e - b, dh).noalias() +=
                  dS.block(0, coff, nq, e - b).transpose() *
                  cmap(q).block(g.q_begin, h * dh, nq, dh) * scale;
            coff += e - b;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor multi_head_attention(Tape* tape, const Tensor& x, const Tensor& context,
                            const AttentionParams& params, int heads,
                            const std::vector<AttentionSegment>& segments,
                            const DropoutSpec& attn_dropout) {
  using namespace ops;
  Tensor qp = add_row_bias(tape, matmul(tape, x, params.wq), params.bq);
  Tensor kp = add_row_bias(tape, matmul(tape, context, params.wk), params.bk);
  Tensor vp = add_row_bias(tape, matmul(tape, context, params.wv), params.bv);
  Tensor core = attention_core(tape, qp, kp, vp, heads, segments, attn_dropout);
  return add_row_bias(tape, matmul(tape, core, params.wo), params.bo);
}

Tensor multi_head_attention(Tape* tape, const Tensor& x, const Tensor& context,
                            const BoolMatrix& mask, const AttentionParams& params,
                            int heads, const DropoutSpec& attn_dropout) {
  std::vector<AttentionSegment> segs(1);
  segs[0].q_begin = 0;
  segs[0].q_end = x.rows();
  segs[0].k_spans = {{0, context.rows()}};
  segs[0].mask = &mask;
  return multi_head_attention(tape, x, context, params, heads, segs, attn_dropout);
}

Tensor transformer_layer(Tape* tape, const Tensor& x, const LayerParams& params, int heads,
                         NormPlacement placement, const LayerInputs& in,
                         const DropoutSpec& dropout) {
  if (in.self_segments == nullptr)
    throw std::invalid_argument("transformer_layer: self-attention segments missing");
  const bool has_cross_params = params.cross_attn.has_value();
  const bool has_cross_input = in.cross_context != nullptr;
  if (has_cross_params != has_cross_input)
    throw std::invalid_argument(
        has_cross_params
            ? "transformer_layer: cross-attention parameters present but no cross context"
            : "transformer_layer: cross context given but layer has no cross-attention "
              "parameters");
  if (has_cross_params && (in.cross_segments == nullptr || !params.norm_cross.has_value()))
    throw std::invalid_argument(
        "transformer_layer: cross-attention needs segments and a norm");

  auto maybe_drop = [&](const Tensor& t) {
    return dropout.active() ? ops::dropout(tape, t, dropout.rate, *dropout.rng, true) : t;
  };
  auto sublayer = [&](const Tensor& h, const NormParams& np, auto&& fn) {
    if (placement == NormPlacement::PreNorm) {
      Tensor u = ops::layer_norm(tape, h, np.gain, np.bias);
      return ops::add(tape, h, maybe_drop(fn(u)));
    }
    Tensor r = ops::add(tape, h, maybe_drop(fn(h)));
    return ops::layer_norm(tape, r, np.gain, np.bias);
  };

  Tensor h = sublayer(x, params.norm_self, [&](const Tensor& u) {
    Tensor ctx = in.self_prefix != nullptr ? ops::concat_rows(tape, *in.self_prefix, u) : u;
    return multi_head_attention(tape, u, ctx, params.self_attn, heads, *in.self_segments,
                                dropout);
  });

  if (has_cross_params) {
    h = sublayer(h, *params.norm_cross, [&](const Tensor& u) {
      return multi_head_attention(tape, u, *in.cross_context, *params.cross_attn, heads,
                                  *in.cross_segments, dropout);
    });
  }

  return sublayer(h, params.norm_ffn, [&](const Tensor& u) {
    Tensor a = ops::relu(
        tape, ops::add_row_bias(tape, ops::matmul(tape, u, params.ffn.w1), params.ffn.b1));
    a = maybe_drop(a);
    return ops::add_row_bias(tape, ops::matmul(tape, a, params.ffn.w2), params.ffn.b2);
  });
}

}  // namespace lmmt
