// Small reverse-mode autodiff core over dense float32 matrices.
//
// Tensors are handles onto shared storage; copying a Tensor aliases it.
// Ops optionally record backward closures on a Tape. Running an op with a
// null tape gives a plain inference-mode computation: no graph, no gradient
// buffers touched. Tape::backward replays the closures in reverse and is
// single-shot until reset().
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "lmmt/rng.hpp"

namespace lmmt {

// Float storage pinned to 64-byte boundaries. Eigen selects SIMD code paths
// from runtime pointer alignment, so plain malloc placement would let heap
// history change the low-order bits of reductions and break bit-exact reruns
// and checkpoint resumes.
template <typename T>
struct AlignedAllocator {
  static constexpr std::size_t kAlign = 64;
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign}));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t{kAlign});
  }
  bool operator==(const AlignedAllocator&) const { return true; }
};

using AlignedFloats = std::vector<float, AlignedAllocator<float>>;

struct TensorImpl {
  int rows = 0;
  int cols = 0;
  AlignedFloats v;
  AlignedFloats g;  // allocated only when requires_grad
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols);

  static Tensor zeros(int rows, int cols);
  static Tensor full(int rows, int cols, float value);
  static Tensor from(int rows, int cols, std::initializer_list<float> vals);
  static Tensor from(int rows, int cols, const std::vector<float>& vals);

  bool defined() const { return impl_ != nullptr; }
  int rows() const { return impl_->rows; }
  int cols() const { return impl_->cols; }
  int64_t size() const { return static_cast<int64_t>(impl_->rows) * impl_->cols; }

  std::span<float> values() { return impl_->v; }
  std::span<const float> values() const { return impl_->v; }
  float& at(int r, int c) { return impl_->v[static_cast<size_t>(r) * impl_->cols + c]; }
  float at(int r, int c) const { return impl_->v[static_cast<size_t>(r) * impl_->cols + c]; }
  float item() const;  // requires a 1x1 tensor

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  // independent deep copy (values only, grad state reset)
  Tensor clone() const;

  void fill_normal(RngStream& rng, float stddev);
  void fill_glorot(RngStream& rng);  // uniform(+-sqrt(6/(fan_in+fan_out)))

  TensorImpl* impl() const { return impl_.get(); }
  std::string shape_str() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// dense 0/1 matrix used for attention masks
struct BoolMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> data;

  BoolMatrix() = default;
  BoolMatrix(int r, int c, uint8_t fill = 0)
      : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}
  uint8_t& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  uint8_t at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  bool operator==(const BoolMatrix& o) const {
    return rows == o.rows && cols == o.cols && data == o.data;
  }
};

class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  // Seeds d(loss)/d(loss)=1 and replays recorded steps in reverse. A second
  // call without reset() throws: the graph has been consumed.
  void backward(const Tensor& loss);

  void reset() {
    steps_.clear();
    consumed_ = false;
  }
  size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
};

namespace ops {

// c = a @ b, a:[m x k], b:[k x n]
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);

// elementwise sum, same shape
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);

// broadcast-add a [1 x d] bias to every row of x [n x d]
Tensor add_row_bias(Tape* tape, const Tensor& x, const Tensor& bias);

Tensor scale(Tape* tape, const Tensor& x, float c);

Tensor relu(Tape* tape, const Tensor& x);

// Row-wise softmax over positions where mask==1. Masked logits get a -1e9
// additive surrogate before exponentiation and the corresponding outputs are
// then set to exactly 0. A row with no unmasked entry is an error, not NaN.
Tensor softmax_masked(Tape* tape, const Tensor& logits, const BoolMatrix& mask);

// per-row normalization to zero mean / unit variance, then gain & bias
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-6f);

// Inverted dropout: keep with prob 1-rate and scale kept values by 1/(1-rate).
// Identity when training=false or rate==0. The mask comes from `rng` only.
Tensor dropout(Tape* tape, const Tensor& x, float rate, RngStream& rng, bool training);

// gather rows of table [V x d] at ids; backward scatters into the table
Tensor embedding(Tape* tape, const Tensor& table, const std::vector<int>& ids);

// Mean label-smoothed cross entropy over non-pad targets, natural log.
// Smoothed target distribution: q_c = smoothing/V + (1-smoothing)*[c==target].
// Rows whose target is pad_id contribute no loss and no gradient.
Tensor cross_entropy_label_smoothed(Tape* tape, const Tensor& logits,
                                    const std::vector<int>& targets, float smoothing,
                                    int pad_id);

Tensor concat_rows(Tape* tape, const Tensor& a, const Tensor& b);

// rows [begin, end) as a fresh tensor; backward adds into the source range
Tensor slice_rows(Tape* tape, const Tensor& x, int begin, int end);

Tensor sum(Tape* tape, const Tensor& x);

}  // namespace ops
}  // namespace lmmt
