#pragma once

// Reverse-mode differentiation over dense row-major arrays.
//
// A Tape records primitive applications in program order (define-by-run).
// Every primitive appends one node whose value is computed eagerly; backward()
// walks the nodes in exact reverse order. Instantiated for float (training,
// explaining) and double (gradient checks).

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace xflow::grad {

enum class Precision { F32, F64 };

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Fixed 64-byte alignment keeps vectorized kernels on the same code path
/// for every buffer, so results do not depend on heap addresses.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
class NumArray {
 public:
  NumArray() = default;
  /// Zero-filled array of the given shape.
  explicit NumArray(Shape shape);
  /// Throws ShapeError on size mismatch, NumericError on non-finite values.
  NumArray(Shape shape, std::vector<T> values);

  static NumArray scalar(T v) { return NumArray({1}, {v}); }
  static NumArray filled(Shape shape, T v);

  static constexpr Precision precision() {
    return sizeof(T) == sizeof(float) ? Precision::F32 : Precision::F64;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }
  /// Leading extent for rank-2 arrays, 1 for rank-1.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  /// Trailing extent.
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  T operator[](std::size_t i) const { return values_[i]; }
  T& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  bool all_finite() const;
  void reshape(Shape shape);

  template <typename U>
  NumArray<U> cast() const {
    NumArray<U> r(shape_);
    std::transform(values_.begin(), values_.end(), r.values().begin(), [](T v) { return static_cast<U>(v); });
    return r;
  }

  friend bool operator==(const NumArray& a, const NumArray& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<T, AlignedAllocator<T>> values_;
};

/// Handle to a node on a Tape.
struct Var {
  std::uint32_t id = 0;
};

enum class Op : std::uint8_t {
  Leaf,
  Gather,
  PairGather,
  Linear,
  Attention,
  Softmax,
  LogSoftmax,
  LayerNorm,
  Relu,
  Sigmoid,
  LogSigmoid,
  Log,
  Add,
  Mul,
  Scale,
  AddScalar,
  RowScale,
  MeanPool,
  Sum,
  Nll,
  Reshape,
};

const char* op_name(Op op);

/// Options for multi-head scaled dot-product attention.
struct AttentionOptions {
  std::size_t heads = 1;
  /// One entry per key position; 0 excludes the key via a -inf logit.
  std::span<const std::uint8_t> key_present;
  /// Optional [L, L] additive logit term shared by all heads.
  std::optional<Var> logit_bias;
  /// Optional [L, L] multiplicative factor on the raw logits, shared by heads.
  std::optional<Var> logit_scale;
};

/// The computation record. Not thread-safe; one tape per worker. Leaves
/// created with leaf_ref() borrow storage that must outlive the tape.
template <typename T>
class Tape {
 public:
  explicit Tape(bool check_finite = kCheckFiniteDefault);

  Var leaf(NumArray<T> value, bool requires_grad = false);
  Var leaf_ref(const NumArray<T>& value, bool requires_grad = false);

  const NumArray<T>& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  Op op(Var v) const { return nodes_[v.id].op; }
  std::size_t size() const { return nodes_.size(); }

  // Primitives.
  Var gather(Var table, std::span<const int> indices);
  Var pair_gather(Var table, std::span<const int> indices);
  Var linear(Var x, Var weight, std::optional<Var> bias = std::nullopt);
  Var attention(Var q, Var k, Var v, const AttentionOptions& options);
  Var softmax(Var x);
  /// Row-wise log-softmax; outputs below `floor` are clamped (zero gradient).
  Var log_softmax(Var x, T floor = -std::numeric_limits<T>::infinity());
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5));
  Var relu(Var x);
  Var sigmoid(Var x);
  Var log_sigmoid(Var x);
  /// log(max(x, clamp)); zero gradient where clamped.
  Var log(Var x, T clamp = T(1e-12));
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, T factor);
  Var add_scalar(Var x, T c);
  /// out[i, :] = x[i, :] * s[i]; s has rows(x) elements.
  Var row_scale(Var x, Var s);
  /// Mean over rows flagged present; returns [1, cols].
  Var mean_pool(Var x, std::span<const std::uint8_t> present);
  Var sum(Var x);
  /// -(1/rows) * sum(weights * x); weights has the shape of x.
  Var nll(Var x, const NumArray<T>& weights);
  Var reshape(Var x, Shape shape);

  /// Per-head attention probabilities of an Attention node, [heads * L, L].
  const NumArray<T>& attention_probs(Var attention_node) const;

  /// Gradients of the scalar `terminal` with respect to each entry of `wrt`.
  /// Entries not connected to the terminal receive zeros.
  std::vector<NumArray<T>> backward(Var terminal, std::span<const Var> wrt) const;

#ifdef NDEBUG
  static constexpr bool kCheckFiniteDefault = false;
#else
  static constexpr bool kCheckFiniteDefault = true;
#endif

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<std::uint32_t> inputs;
    NumArray<T> owned;
    const NumArray<T>* borrowed = nullptr;
    bool requires_grad = false;
    T scalar = T(0);
    std::size_t count = 0;
    std::vector<int> indices;
    std::vector<std::uint8_t> flags;
    std::vector<NumArray<T>> aux;
    int bias_slot = -1;
    int scale_slot = -1;

    const NumArray<T>& value() const { return borrowed != nullptr ? *borrowed : owned; }
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void backprop_node(std::size_t idx, const std::vector<bool>& flows,
                     std::vector<NumArray<T>>& grads, std::vector<bool>& has_grad) const;

  std::vector<Node> nodes_;
  bool check_finite_;
};

extern template class NumArray<float>;
extern template class NumArray<double>;
extern template class Tape<float>;
extern template class Tape<double>;

/// Builds a scalar-valued graph on `tape` from the given leaf handles.
using GraphBuilder = std::function<Var(Tape<double>& tape, std::span<const Var> leaves)>;

struct FiniteDifferenceOptions {
  /// Coordinates sampled per leaf; leaves with fewer coordinates are checked
  /// exhaustively.
  std::size_t max_coords_per_leaf = 64;
  std::uint64_t seed = 0;
};

/// Central-difference gradient check in F64. Returns the maximum over
/// sampled coordinates of |analytic - numeric| / max(1e-12, |numeric|).
double finite_difference_check(const GraphBuilder& build,
                               const std::vector<NumArray<double>>& leaves, double step,
                               const FiniteDifferenceOptions& options = {});

}  // namespace xflow::grad
