#include "lmmt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace lmmt {

using EigenMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EigenMat>;
using CMap = Eigen::Map<const EigenMat>;

namespace {

Map map(Tensor& t) { return Map(t.values().data(), t.rows(), t.cols()); }
CMap cmap(const Tensor& t) { return CMap(t.values().data(), t.rows(), t.cols()); }
Map gmap(Tensor& t) { return Map(t.grad().data(), t.rows(), t.cols()); }

bool wants_grad(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void mark_output(Tensor& out) { out.set_requires_grad(true); }

}  // namespace

Tensor::Tensor(int rows, int cols) {
  if (rows < 0 || cols < 0) throw std::invalid_argument("tensor: negative dimension");
  impl_ = std::make_shared<TensorImpl>();
  impl_->rows = rows;
  impl_->cols = cols;
  impl_->v.assign(static_cast<size_t>(rows) * cols, 0.0f);
}

Tensor Tensor::zeros(int rows, int cols) { return Tensor(rows, cols); }

Tensor Tensor::full(int rows, int cols, float value) {
  Tensor t(rows, cols);
  for (float& x : t.values()) x = value;
  return t;
}

Tensor Tensor::from(int rows, int cols, std::initializer_list<float> vals) {
  return from(rows, cols, std::vector<float>(vals));
}

Tensor Tensor::from(int rows, int cols, const std::vector<float>& vals) {
  Tensor t(rows, cols);
  if (static_cast<int64_t>(vals.size()) != t.size())
    throw std::invalid_argument("tensor: " + std::to_string(vals.size()) +
                                " values for shape " + t.shape_str());
  std::copy(vals.begin(), vals.end(), t.values().begin());
  return t;
}

float Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor " + shape_str() + " is not 1x1");
  return impl_->v[0];
}

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on && impl_->g.size() != impl_->v.size()) impl_->g.assign(impl_->v.size(), 0.0f);
  if (!on) impl_->g.clear();
}

std::span<float> Tensor::grad() {
  if (!impl_->requires_grad) throw std::logic_error("grad: tensor has no gradient buffer");
  return impl_->g;
}

std::span<const float> Tensor::grad() const {
  if (!impl_->requires_grad) throw std::logic_error("grad: tensor has no gradient buffer");
  return impl_->g;
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) std::fill(impl_->g.begin(), impl_->g.end(), 0.0f);
}

Tensor Tensor::clone() const {
  Tensor t(rows(), cols());
  std::copy(impl_->v.begin(), impl_->v.end(), t.values().begin());
  return t;
}

void Tensor::fill_normal(RngStream& rng, float stddev) {
  for (float& x : impl_->v) x = rng.next_normal() * stddev;
}

void Tensor::fill_glorot(RngStream& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(rows() + cols()));
  for (float& x : impl_->v) x = (2.0f * rng.next_float() - 1.0f) * limit;
}

std::string Tensor::shape_str() const {
  return "[" + std::to_string(rows()) + "x" + std::to_string(cols()) + "]";
}

void Tape::backward(const Tensor& loss) {
  if (consumed_)
    throw std::logic_error("backward: tape already consumed; run a new forward pass");
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be 1x1, got " + loss.shape_str());
  if (!loss.requires_grad())
    throw std::logic_error("backward: loss does not depend on any gradient-tracked tensor");
  consumed_ = true;
  const_cast<Tensor&>(loss).grad()[0] = 1.0f;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

namespace ops {

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions disagree: " + a.shape_str() +
                                " vs " + b.shape_str());
  Tensor out(a.rows(), b.cols());
  map(out).noalias() = cmap(a) * cmap(b);
  if (wants_grad(tape, {&a, &b})) {
    mark_output(out);
    tape->record([a = a, b = b, out]() mutable {
      if (a.requires_grad()) gmap(a).noalias() += gmap(out) * cmap(b).transpose();
      if (b.requires_grad()) gmap(b).noalias() += cmap(a).transpose() * gmap(out);
    });
  }
  return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("add: shape mismatch: " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor out(a.rows(), a.cols());
  map(out) = cmap(a) + cmap(b);
  if (wants_grad(tape, {&a, &b})) {
    mark_output(out);
    tape->record([a = a, b = b, out]() mutable {
      if (a.requires_grad()) gmap(a) += gmap(out);
      if (b.requires_grad()) gmap(b) += gmap(out);
    });
  }
  return out;
}

Tensor add_row_bias(Tape* tape, const Tensor& x, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols())
    throw std::invalid_argument("add_row_bias: bias " + bias.shape_str() +
                                " does not match row width of " + x.shape_str());
  Tensor out(x.rows(), x.cols());
  map(out) = cmap(x).rowwise() + cmap(bias).row(0);
  if (wants_grad(tape, {&x, &bias})) {
    mark_output(out);
    tape->record([x = x, bias = bias, out]() mutable {
      if (x.requires_grad()) gmap(x) += gmap(out);
      if (bias.requires_grad()) gmap(bias).row(0) += gmap(out).colwise().sum();
    });
  }
  return out;
}

Tensor scale(Tape* tape, const Tensor& x, float c) {
  Tensor out(x.rows(), x.cols());
  map(out) = cmap(x) * c;
  if (wants_grad(tape, {&x})) {
    mark_output(out);
    tape->record([x = x, out, c]() mutable { gmap(x) += gmap(out) * c; });
  }
  return out;
}

Tensor relu(Tape* tape, const Tensor& x) {
  Tensor out(x.rows(), x.cols());
  auto xv = x.values();
  auto ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  if (wants_grad(tape, {&x})) {
    mark_output(out);
    tape->record([x = x, out]() mutable {
      auto xg = x.grad();
      auto og = out.grad();
      auto xv = x.values();
      for (size_t i = 0; i < xv.size(); ++i)
        if (xv[i] > 0.0f) xg[i] += og[i];
    });
  }
  return out;
}

Tensor softmax_masked(Tape* tape, const Tensor& logits, const BoolMatrix& mask) {
  if (mask.rows != logits.rows() || mask.cols != logits.cols())
    throw std::invalid_argument("softmax_masked: mask " + std::to_string(mask.rows) + "x" +
                                std::to_string(mask.cols) + " does not match logits " +
                                logits.shape_str());
  const int n = logits.rows(), m = logits.cols();
  Tensor out(n, m);
  for (int r = 0; r < n; ++r) {
    bool any = false;
    float mx = -std::numeric_limits<float>::infinity();
    for (int c = 0; c < m; ++c) {
      const float z = logits.at(r, c) + (mask.at(r, c) ? 0.0f : -1e9f);
      any = any || mask.at(r, c);
      if (z > mx) mx = z;
    }
    if (!any)
      throw std::invalid_argument("softmax_masked: row " + std::to_string(r) +
                                  " is fully masked");
    double denom = 0.0;
    for (int c = 0; c < m; ++c) {
      const float z = logits.at(r, c) + (mask.at(r, c) ? 0.0f : -1e9f);
      const float e = std::exp(z - mx);
      out.at(r, c) = e;
      denom += e;
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int c = 0; c < m; ++c) out.at(r, c) = mask.at(r, c) ? out.at(r, c) * inv : 0.0f;
  }
  if (wants_grad(tape, {&logits})) {
    mark_output(out);
    tape->record([logits = logits, out]() mutable {
      const int n = out.rows(), m = out.cols();
      auto lg = logits.grad();
      for (int r = 0; r < n; ++r) {
        double dot = 0.0;
        for (int c = 0; c < m; ++c) dot += static_cast<double>(out.grad()[r * m + c]) * out.at(r, c);
        for (int c = 0; c < m; ++c) {
          const float p = out.at(r, c);
          lg[static_cast<size_t>(r) * m + c] +=
              p * (out.grad()[static_cast<size_t>(r) * m + c] - static_cast<float>(dot));
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 ||
      bias.cols() != x.cols())
    throw std::invalid_argument("layer_norm: gain/bias must be [1x" +
                                std::to_string(x.cols()) + "], got " + gain.shape_str() +
                                " and " + bias.shape_str());
  const int n = x.rows(), d = x.cols();
  Tensor out(n, d);
  Tensor xhat(n, d);       // cached for backward
  std::vector<float> inv_std(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r) {
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += x.at(r, c);
    mean /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) {
      const double t = x.at(r, c) - mean;
      var += t * t;
    }
    var /= d;
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv_std[static_cast<size_t>(r)] = is;
    for (int c = 0; c < d; ++c) {
      const float xh = (x.at(r, c) - static_cast<float>(mean)) * is;
      xhat.at(r, c) = xh;
      out.at(r, c) = gain.at(0, c) * xh + bias.at(0, c);
    }
  }
  if (wants_grad(tape, {&x, &gain, &bias})) {
    mark_output(out);
    tape->record([x = x, gain = gain, bias = bias, out, xhat, inv_std]() mutable {
      const int n = out.rows(), d = out.cols();
      for (int r = 0; r < n; ++r) {
        double sum_gy = 0.0, sum_gy_xh = 0.0;
        for (int c = 0; c < d; ++c) {
          const float gy = out.grad()[static_cast<size_t>(r) * d + c] * gain.at(0, c);
          sum_gy += gy;
          sum_gy_xh += static_cast<double>(gy) * xhat.at(r, c);
        }
        const float m1 = static_cast<float>(sum_gy / d);
        const float m2 = static_cast<float>(sum_gy_xh / d);
        for (int c = 0; c < d; ++c) {
          const float go = out.grad()[static_cast<size_t>(r) * d + c];
          if (gain.requires_grad()) gain.grad()[c] += go * xhat.at(r, c);
          if (bias.requires_grad()) bias.grad()[c] += go;
          if (x.requires_grad()) {
            const float gy = go * gain.at(0, c);
            x.grad()[static_cast<size_t>(r) * d + c] +=
                (gy - m1 - xhat.at(r, c) * m2) * inv_std[static_cast<size_t>(r)];
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(Tape* tape, const Tensor& x, float rate, RngStream& rng, bool training) {
  if (rate < 0.0f || rate >= 1.0f)
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0f) {
    Tensor out = x.clone();
    if (wants_grad(tape, {&x})) {
      mark_output(out);
      tape->record([x = x, out]() mutable { gmap(x) += gmap(out); });
    }
    return out;
  }
  Tensor out(x.rows(), x.cols());
  auto keep = std::make_shared<std::vector<uint8_t>>(x.size());
  const float inv_keep = 1.0f / (1.0f - rate);
  auto xv = x.values();
  auto ov = out.values();
  for (size_t i = 0; i < xv.size(); ++i) {
    const bool k = rng.next_float() >= rate;
    (*keep)[i] = k;
    ov[i] = k ? xv[i] * inv_keep : 0.0f;
  }
  if (wants_grad(tape, {&x})) {
    mark_output(out);
    tape->record([x = x, out, keep, inv_keep]() mutable {
      auto xg = x.grad();
      auto og = out.grad();
      for (size_t i = 0; i < xg.size(); ++i)
        if ((*keep)[i]) xg[i] += og[i] * inv_keep;
    });
  }
  return out;
}

Tensor embedding(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
  const int v = table.rows(), d = table.cols();
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(ids[i]) + " at position " +
                                  std::to_string(i) + " outside table " + table.shape_str());
  Tensor out(static_cast<int>(ids.size()), d);
  for (size_t i = 0; i < ids.size(); ++i)
    for (int c = 0; c < d; ++c) out.at(static_cast<int>(i), c) = table.at(ids[i], c);
  if (wants_grad(tape, {&table})) {
    mark_output(out);
    tape->record([table = table, out, ids]() mutable {
      const int d = out.cols();
      for (size_t i = 0; i < ids.size(); ++i)
        for (int c = 0; c < d; ++c)
          table.grad()[static_cast<size_t>(ids[i]) * d + c] +=
              out.grad()[i * static_cast<size_t>(d) + c];
    });
  }
  return out;
}

Tensor cross_entropy_label_smoothed(Tape* tape, const Tensor& logits,
                                    const std::vector<int>& targets, float smoothing,
                                    int pad_id) {
  const int n = logits.rows(), v = logits.cols();
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for logits " + logits.shape_str());
  if (smoothing < 0.0f || smoothing >= 1.0f)
    throw std::invalid_argument("cross_entropy: smoothing must be in [0,1), got " +
                                std::to_string(smoothing));
  int n_real = 0;
  for (int r = 0; r < n; ++r) {
    if (targets[r] == pad_id) continue;
    if (targets[r] < 0 || targets[r] >= v)
      throw std::invalid_argument("cross_entropy: target " + std::to_string(targets[r]) +
                                  " at row " + std::to_string(r) + " outside vocab of " +
                                  std::to_string(v));
    ++n_real;
  }
  if (n_real == 0)
    throw std::invalid_argument("cross_entropy: every target is pad; nothing to average");

  // cache softmax probabilities for the backward scatter
  auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(n) * v);
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    if (targets[r] == pad_id) continue;
    float mx = logits.at(r, 0);
    for (int c = 1; c < v; ++c) mx = std::max(mx, logits.at(r, c));
    double denom = 0.0, mean_logit = 0.0;
    for (int c = 0; c < v; ++c) {
      denom += std::exp(static_cast<double>(logits.at(r, c)) - mx);
      mean_logit += logits.at(r, c);
    }
    mean_logit /= v;
    const double lse = std::log(denom) + mx;
    for (int c = 0; c < v; ++c)
      (*probs)[static_cast<size_t>(r) * v + c] =
          static_cast<float>(std::exp(static_cast<double>(logits.at(r, c)) - mx) / denom);
    // loss_r = lse - sum_c q_c * z_c with q = smoothing/V + (1-smoothing)*onehot
    total += lse - (1.0 - smoothing) * logits.at(r, targets[r]) - smoothing * mean_logit;
  }
  Tensor out = Tensor::from(1, 1, {static_cast<float>(total / n_real)});
  if (wants_grad(tape, {&logits})) {
    mark_output(out);
    const float eps = smoothing;
    tape->record([logits = logits, out, probs, targets, eps, pad_id, n_real]() mutable {
      const int n = logits.rows(), v = logits.cols();
      const float g = out.grad()[0] / static_cast<float>(n_real);
      const float uniform = eps / static_cast<float>(v);
      for (int r = 0; r < n; ++r) {
        if (targets[r] == pad_id) continue;
        for (int c = 0; c < v; ++c) {
          float q = uniform + (c == targets[r] ? 1.0f - eps : 0.0f);
          logits.grad()[static_cast<size_t>(r) * v + c] +=
              g * ((*probs)[static_cast<size_t>(r) * v + c] - q);
        }
      }
    });
  }
  return out;
}

Tensor concat_rows(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("concat_rows: width mismatch: " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor out(a.rows() + b.rows(), a.cols());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.size());
  if (wants_grad(tape, {&a, &b})) {
    mark_output(out);
    tape->record([a = a, b = b, out]() mutable {
      auto og = out.grad();
      if (a.requires_grad())
        for (int64_t i = 0; i < a.size(); ++i) a.grad()[static_cast<size_t>(i)] += og[static_cast<size_t>(i)];
      if (b.requires_grad())
        for (int64_t i = 0; i < b.size(); ++i)
          b.grad()[static_cast<size_t>(i)] += og[static_cast<size_t>(a.size() + i)];
    });
  }
  return out;
}

Tensor slice_rows(Tape* tape, const Tensor& x, int begin, int end) {
  if (begin < 0 || end > x.rows() || begin > end)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") outside " + x.shape_str());
  const int d = x.cols();
  Tensor out(end - begin, d);
  std::copy(x.values().begin() + static_cast<size_t>(begin) * d,
            x.values().begin() + static_cast<size_t>(end) * d, out.values().begin());
  if (wants_grad(tape, {&x})) {
    mark_output(out);
    tape->record([x = x, out, begin]() mutable {
      const int d = out.cols();
      for (int64_t i = 0; i < out.size(); ++i)
        x.grad()[static_cast<size_t>(begin) * d + i] += out.grad()[static_cast<size_t>(i)];
    });
  }
  return out;
}

Tensor sum(Tape* tape, const Tensor& x) {
  double total = 0.0;
  for (float v : x.values()) total += v;
  Tensor out = Tensor::from(1, 1, {static_cast<float>(total)});
  if (wants_grad(tape, {&x})) {
    mark_output(out);
    tape->record([x = x, out]() mutable {
      const float g = out.grad()[0];
      for (float& gv : x.grad()) gv += g;
    });
  }
  return out;
}

}  // namespace ops
}  // namespace lmmt
