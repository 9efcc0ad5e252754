#include "xflow/grad.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "xflow/errors.hpp"

namespace xflow::grad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
MatMap<T> mat(NumArray<T>& a) {
  return MatMap<T>(a.data(), static_cast<Eigen::Index>(a.rows()),
                   static_cast<Eigen::Index>(a.cols()));
}

template <typename T>
ConstMatMap<T> mat(const NumArray<T>& a) {
  return ConstMatMap<T>(a.data(), static_cast<Eigen::Index>(a.rows()),
                        static_cast<Eigen::Index>(a.cols()));
}

template <typename T>
VecMap<T> vec(NumArray<T>& a) {
  return VecMap<T>(a.data(), static_cast<Eigen::Index>(a.size()));
}

template <typename T>
ConstVecMap<T> vec(const NumArray<T>& a) {
  return ConstVecMap<T>(a.data(), static_cast<Eigen::Index>(a.size()));
}

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

bool is_matrix_like(const Shape& s) { return s.size() == 1 || s.size() == 2; }

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T z = std::exp(-x);
    return T(1) / (T(1) + z);
  }
  T z = std::exp(x);
  return z / (T(1) + z);
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Gather: return "embedding_gather";
    case Op::PairGather: return "pair_gather";
    case Op::Linear: return "linear";
    case Op::Attention: return "attention";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::LogSigmoid: return "log_sigmoid";
    case Op::Log: return "log";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::RowScale: return "row_scale";
    case Op::MeanPool: return "mean_pool";
    case Op::Sum: return "sum";
    case Op::Nll: return "nll";
    case Op::Reshape: return "reshape";
  }
  return "unknown";
}

// ---------------------------------------------------------------- NumArray

template <typename T>
NumArray<T>::NumArray(Shape shape) : shape_(std::move(shape)), values_(shape_numel(shape_), T(0)) {}

template <typename T>
NumArray<T>::NumArray(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), values_(values.begin(), values.end()) {
  if (shape_numel(shape_) != values_.size()) {
    throw ShapeError("NumArray: shape " + shape_str(shape_) + " holds " +
                     std::to_string(shape_numel(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
  if (!all_finite()) throw NumericError("NumArray: non-finite value at construction");
}

template <typename T>
NumArray<T> NumArray<T>::filled(Shape shape, T v) {
  NumArray out(std::move(shape));
  std::fill(out.values_.begin(), out.values_.end(), v);
  return out;
}

template <typename T>
bool NumArray<T>::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void NumArray<T>::reshape(Shape shape) {
  if (shape_numel(shape) != values_.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  shape_ = std::move(shape);
}

// ---------------------------------------------------------------- Tape

template <typename T>
Tape<T>::Tape(bool check_finite) : check_finite_(check_finite) {
  nodes_.reserve(128);
}

template <typename T>
Var Tape<T>::push(Node n) {
  if (check_finite_ && !n.value().all_finite()) {
    throw NumericError(std::string(op_name(n.op)) + ": non-finite output");
  }
  if (n.op != Op::Leaf) {
    n.requires_grad = false;
    for (auto in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id >= nodes_.size()) throw ShapeError("tape: dangling variable");
  return nodes_[v.id];
}

template <typename T>
const NumArray<T>& Tape<T>::value(Var v) const {
  return node(v).value();
}

template <typename T>
Var Tape<T>::leaf(NumArray<T> value, bool requires_grad) {
  Node n;
  n.op = Op::Leaf;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::leaf_ref(const NumArray<T>& value, bool requires_grad) {
  Node n;
  n.op = Op::Leaf;
  n.borrowed = &value;
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::gather(Var table, std::span<const int> indices) {
  const auto& tab = value(table);
  if (tab.rank() != 2) shape_fail(Op::Gather, "table must be rank 2, got " + shape_str(tab.shape()));
  const std::size_t d = tab.cols();
  Node n;
  n.op = Op::Gather;
  n.inputs = {table.id};
  n.indices.assign(indices.begin(), indices.end());
  n.owned = NumArray<T>({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= tab.rows()) {
      shape_fail(Op::Gather, "index " + std::to_string(idx) + " outside table " +
                                 shape_str(tab.shape()));
    }
    std::copy_n(tab.data() + static_cast<std::size_t>(idx) * d, d, n.owned.data() + i * d);
  }
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::pair_gather(Var table, std::span<const int> indices) {
  const auto& tab = value(table);
  if (tab.rank() != 2 || tab.rows() != tab.cols()) {
    shape_fail(Op::PairGather, "table must be square, got " + shape_str(tab.shape()));
  }
  const std::size_t v = tab.cols();
  const std::size_t len = indices.size();
  for (int idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= v) {
      shape_fail(Op::PairGather, "index " + std::to_string(idx) + " outside table " +
                                     shape_str(tab.shape()));
    }
  }
  Node n;
  n.op = Op::PairGather;
  n.inputs = {table.id};
  n.indices.assign(indices.begin(), indices.end());
  n.owned = NumArray<T>({len, len});
  for (std::size_t j = 0; j < len; ++j) {
    for (std::size_t k = 0; k < len; ++k) {
      n.owned.at(j, k) = tab.at(static_cast<std::size_t>(indices[j]), static_cast<std::size_t>(indices[k]));
    }
  }
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::linear(Var x, Var weight, std::optional<Var> bias) {
  const auto& xv = value(x);
  const auto& wv = value(weight);
  if (!is_matrix_like(xv.shape()) || wv.rank() != 2 || xv.cols() != wv.rows()) {
    shape_fail(Op::Linear, "x " + shape_str(xv.shape()) + " incompatible with weight " +
                               shape_str(wv.shape()));
  }
  Node n;
  n.op = Op::Linear;
  n.inputs = {x.id, weight.id};
  n.owned = NumArray<T>({xv.rows(), wv.cols()});
  auto out = mat(n.owned);
  out.noalias() = mat(xv) * mat(wv);
  if (bias) {
    const auto& bv = value(*bias);
    if (bv.size() != wv.cols()) {
      shape_fail(Op::Linear, "bias " + shape_str(bv.shape()) + " does not match weight " +
                                 shape_str(wv.shape()));
    }
    out.rowwise() += vec(bv).transpose();
    n.inputs.push_back(bias->id);
  }
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::attention(Var q, Var k, Var v, const AttentionOptions& options) {
  const auto& qv = value(q);
  const auto& kv = value(k);
  const auto& vv = value(v);
  if (qv.rank() != 2 || qv.shape() != kv.shape() || qv.shape() != vv.shape()) {
    shape_fail(Op::Attention, "q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) +
                                  ", v " + shape_str(vv.shape()) + " must be equal rank-2 shapes");
  }
  const std::size_t len = qv.rows();
  const std::size_t d = qv.cols();
  const std::size_t heads = options.heads;
  if (heads == 0 || d % heads != 0) {
    shape_fail(Op::Attention, "width " + std::to_string(d) + " not divisible by " +
                                  std::to_string(heads) + " heads");
  }
  if (options.key_present.size() != len) {
    shape_fail(Op::Attention, "key presence has " + std::to_string(options.key_present.size()) +
                                  " entries for length " + std::to_string(len));
  }
  if (std::none_of(options.key_present.begin(), options.key_present.end(),
                   [](std::uint8_t f) { return f != 0; })) {
    shape_fail(Op::Attention, "no present key positions");
  }
  const Shape square{len, len};
  Node n;
  n.op = Op::Attention;
  n.inputs = {q.id, k.id, v.id};
  n.count = heads;
  n.flags.assign(options.key_present.begin(), options.key_present.end());
  const NumArray<T>* bias = nullptr;
  const NumArray<T>* lscale = nullptr;
  if (options.logit_bias) {
    bias = &value(*options.logit_bias);
    if (bias->shape() != square) {
      shape_fail(Op::Attention, "logit bias " + shape_str(bias->shape()) + " expected " +
                                    shape_str(square));
    }
    n.bias_slot = static_cast<int>(n.inputs.size());
    n.inputs.push_back(options.logit_bias->id);
  }
  if (options.logit_scale) {
    lscale = &value(*options.logit_scale);
    if (lscale->shape() != square) {
      shape_fail(Op::Attention, "logit scale " + shape_str(lscale->shape()) + " expected " +
                                    shape_str(square));
    }
    n.scale_slot = static_cast<int>(n.inputs.size());
    n.inputs.push_back(options.logit_scale->id);
  }

  const std::size_t dk = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
  const auto L = static_cast<Eigen::Index>(len);
  const auto DK = static_cast<Eigen::Index>(dk);
  NumArray<T> probs({heads * len, len});
  n.owned = NumArray<T>({len, d});
  auto Q = mat(qv);
  auto K = mat(kv);
  auto V = mat(vv);
  auto out = mat(n.owned);
  auto P = mat(probs);
  RowMat<T> S(L, L);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * dk);
    S.noalias() = Q.middleCols(off, DK) * K.middleCols(off, DK).transpose();
    S *= inv_sqrt;
    if (lscale) S.array() *= mat(*lscale).array();
    if (bias) S += mat(*bias);
    auto Ph = P.middleRows(static_cast<Eigen::Index>(h * len), L);
    for (Eigen::Index r = 0; r < L; ++r) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index c = 0; c < L; ++c) {
        if (n.flags[static_cast<std::size_t>(c)]) mx = std::max(mx, S(r, c));
      }
      T total = T(0);
      for (Eigen::Index c = 0; c < L; ++c) {
        T e = n.flags[static_cast<std::size_t>(c)] ? std::exp(S(r, c) - mx) : T(0);
        Ph(r, c) = e;
        total += e;
      }
      Ph.row(r) /= total;
    }
    out.middleCols(off, DK).noalias() = Ph * V.middleCols(off, DK);
  }
  n.aux.push_back(std::move(probs));
  return push(std::move(n));
}

template <typename T>
const NumArray<T>& Tape<T>::attention_probs(Var attention_node) const {
  const auto& n = node(attention_node);
  if (n.op != Op::Attention) throw ShapeError("attention_probs: node is not an attention node");
  return n.aux.front();
}

template <typename T>
Var Tape<T>::softmax(Var x) {
  const auto& xv = value(x);
  if (!is_matrix_like(xv.shape())) shape_fail(Op::Softmax, "rank " + std::to_string(xv.rank()));
  Node n;
  n.op = Op::Softmax;
  n.inputs = {x.id};
  n.owned = xv;
  auto y = mat(n.owned);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const T mx = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::log_softmax(Var x, T floor) {
  const auto& xv = value(x);
  if (!is_matrix_like(xv.shape())) shape_fail(Op::LogSoftmax, "rank " + std::to_string(xv.rank()));
  Node n;
  n.op = Op::LogSoftmax;
  n.inputs = {x.id};
  n.scalar = floor;
  n.owned = xv;
  NumArray<T> soft(xv.shape());
  auto y = mat(n.owned);
  auto s = mat(soft);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const T mx = y.row(r).maxCoeff();
    const T lse = mx + std::log((y.row(r).array() - mx).exp().sum());
    y.row(r).array() -= lse;
    s.row(r) = y.row(r).array().exp();
  }
  n.flags.assign(n.owned.size(), 0);
  for (std::size_t i = 0; i < n.owned.size(); ++i) {
    if (n.owned[i] < floor) {
      n.owned[i] = floor;
      n.flags[i] = 1;
    }
  }
  n.aux.push_back(std::move(soft));
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::layer_norm(Var x, Var gamma, Var beta, T eps) {
  const auto& xv = value(x);
  const auto& gv = value(gamma);
  const auto& bv = value(beta);
  if (!is_matrix_like(xv.shape()) || gv.size() != xv.cols() || bv.size() != xv.cols()) {
    shape_fail(Op::LayerNorm, "x " + shape_str(xv.shape()) + ", gamma " + shape_str(gv.shape()) +
                                  ", beta " + shape_str(bv.shape()));
  }
  Node n;
  n.op = Op::LayerNorm;
  n.inputs = {x.id, gamma.id, beta.id};
  const std::size_t rows = xv.rows();
  const std::size_t d = xv.cols();
  NumArray<T> xhat(xv.shape());
  NumArray<T> rstd({rows});
  n.owned = NumArray<T>(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mean = T(0);
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const T xh = (in[c] - mean) * inv;
      xhat[r * d + c] = xh;
      n.owned[r * d + c] = xh * gv[c] + bv[c];
    }
  }
  n.aux.push_back(std::move(xhat));
  n.aux.push_back(std::move(rstd));
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::relu(Var x) {
  Node n;
  n.op = Op::Relu;
  n.inputs = {x.id};
  n.owned = value(x);
  for (auto& e : n.owned.values()) e = std::max(e, T(0));
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::sigmoid(Var x) {
  Node n;
  n.op = Op::Sigmoid;
  n.inputs = {x.id};
  n.owned = value(x);
  for (auto& e : n.owned.values()) e = stable_sigmoid(e);
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::log_sigmoid(Var x) {
  Node n;
  n.op = Op::LogSigmoid;
  n.inputs = {x.id};
  n.owned = value(x);
  for (auto& e : n.owned.values()) e = std::min(e, T(0)) - std::log1p(std::exp(-std::abs(e)));
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::log(Var x, T clamp) {
  Node n;
  n.op = Op::Log;
  n.inputs = {x.id};
  n.scalar = clamp;
  n.owned = value(x);
  for (auto& e : n.owned.values()) e = std::log(std::max(e, clamp));
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.shape() != bv.shape()) {
    shape_fail(Op::Add, shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Node n;
  n.op = Op::Add;
  n.inputs = {a.id, b.id};
  n.owned = av;
  vec(n.owned) += vec(bv);
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.shape() != bv.shape()) {
    shape_fail(Op::Mul, shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Node n;
  n.op = Op::Mul;
  n.inputs = {a.id, b.id};
  n.owned = av;
  vec(n.owned).array() *= vec(bv).array();
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::scale(Var x, T factor) {
  Node n;
  n.op = Op::Scale;
  n.inputs = {x.id};
  n.scalar = factor;
  n.owned = value(x);
  vec(n.owned) *= factor;
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::add_scalar(Var x, T c) {
  Node n;
  n.op = Op::AddScalar;
  n.inputs = {x.id};
  n.scalar = c;
  n.owned = value(x);
  vec(n.owned).array() += c;
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::row_scale(Var x, Var s) {
  const auto& xv = value(x);
  const auto& sv = value(s);
  if (!is_matrix_like(xv.shape()) || sv.size() != xv.rows()) {
    shape_fail(Op::RowScale, "x " + shape_str(xv.shape()) + " with scales " + shape_str(sv.shape()));
  }
  Node n;
  n.op = Op::RowScale;
  n.inputs = {x.id, s.id};
  n.owned = xv;
  auto y = mat(n.owned);
  for (Eigen::Index r = 0; r < y.rows(); ++r) y.row(r) *= sv[static_cast<std::size_t>(r)];
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::mean_pool(Var x, std::span<const std::uint8_t> present) {
  const auto& xv = value(x);
  if (!is_matrix_like(xv.shape()) || present.size() != xv.rows()) {
    shape_fail(Op::MeanPool, "x " + shape_str(xv.shape()) + " with " +
                                 std::to_string(present.size()) + " presence flags");
  }
  const auto count = static_cast<std::size_t>(
      std::count_if(present.begin(), present.end(), [](std::uint8_t f) { return f != 0; }));
  if (count == 0) shape_fail(Op::MeanPool, "no present positions");
  Node n;
  n.op = Op::MeanPool;
  n.inputs = {x.id};
  n.flags.assign(present.begin(), present.end());
  n.count = count;
  n.owned = NumArray<T>({1, xv.cols()});
  auto out = vec(n.owned);
  auto X = mat(xv);
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    if (present[static_cast<std::size_t>(r)]) out += X.row(r).transpose();
  }
  out /= static_cast<T>(count);
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::sum(Var x) {
  Node n;
  n.op = Op::Sum;
  n.inputs = {x.id};
  n.owned = NumArray<T>::scalar(vec(value(x)).sum());
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::nll(Var x, const NumArray<T>& weights) {
  const auto& xv = value(x);
  if (xv.shape() != weights.shape()) {
    shape_fail(Op::Nll, "input " + shape_str(xv.shape()) + " vs weights " + shape_str(weights.shape()));
  }
  Node n;
  n.op = Op::Nll;
  n.inputs = {x.id};
  n.aux.push_back(weights);
  const T rows = static_cast<T>(xv.rows());
  n.owned = NumArray<T>::scalar(-vec(xv).dot(vec(weights)) / rows);
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::reshape(Var x, Shape shape) {
  Node n;
  n.op = Op::Reshape;
  n.inputs = {x.id};
  n.owned = value(x);
  try {
    n.owned.reshape(std::move(shape));
  } catch (const ShapeError& e) {
    shape_fail(Op::Reshape, e.what());
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------- backward

template <typename T>
std::vector<NumArray<T>> Tape<T>::backward(Var terminal, std::span<const Var> wrt) const {
  const auto& term = node(terminal);
  if (term.value().size() != 1) {
    throw ShapeError("backward: terminal must be scalar, got " + shape_str(term.value().shape()));
  }
  const std::size_t n_nodes = terminal.id + 1;
  // A node carries gradient iff it lies on a path from a requested node to
  // the terminal.
  std::vector<bool> flows(n_nodes, false);
  for (const Var& w : wrt) {
    if (w.id < n_nodes) flows[w.id] = true;
  }
  for (std::size_t i = 0; i < n_nodes; ++i) {
    if (flows[i]) continue;
    for (auto in : nodes_[i].inputs) {
      if (flows[in]) {
        flows[i] = true;
        break;
      }
    }
  }

  std::vector<NumArray<T>> grads(n_nodes);
  std::vector<bool> has_grad(n_nodes, false);
  if (flows[terminal.id]) {
    grads[terminal.id] = NumArray<T>::filled(term.value().shape(), T(1));
    has_grad[terminal.id] = true;
  }
  for (std::size_t i = n_nodes; i-- > 0;) {
    if (!has_grad[i] || nodes_[i].op == Op::Leaf) continue;
    backprop_node(i, flows, grads, has_grad);
  }
  std::vector<NumArray<T>> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    const auto& shape = node(w).value().shape();
    if (w.id < n_nodes && has_grad[w.id]) {
      out.push_back(grads[w.id]);
    } else {
      out.emplace_back(shape);
    }
  }
  return out;
}

template <typename T>
void Tape<T>::backprop_node(std::size_t idx, const std::vector<bool>& flows,
                            std::vector<NumArray<T>>& grads, std::vector<bool>& has_grad) const {
  const Node& n = nodes_[idx];
  const NumArray<T>& dy = grads[idx];
  auto g = [&](std::size_t slot) -> NumArray<T>& {
    const auto in = n.inputs[slot];
    if (!has_grad[in]) {
      grads[in] = NumArray<T>(nodes_[in].value().shape());
      has_grad[in] = true;
    }
    return grads[in];
  };
  auto wants = [&](std::size_t slot) { return flows[n.inputs[slot]]; };
  const auto in_val = [&](std::size_t slot) -> const NumArray<T>& {
    return nodes_[n.inputs[slot]].value();
  };

  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::Gather: {
      if (!wants(0)) return;
      auto& gt = g(0);
      const std::size_t d = gt.cols();
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        T* dst = gt.data() + static_cast<std::size_t>(n.indices[i]) * d;
        const T* src = dy.data() + i * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      return;
    }
    case Op::PairGather: {
      if (!wants(0)) return;
      auto& gt = g(0);
      const std::size_t len = n.indices.size();
      for (std::size_t j = 0; j < len; ++j) {
        for (std::size_t k = 0; k < len; ++k) {
          gt.at(static_cast<std::size_t>(n.indices[j]), static_cast<std::size_t>(n.indices[k])) +=
              dy.at(j, k);
        }
      }
      return;
    }
    case Op::Linear: {
      auto DY = mat(dy);
      if (wants(0)) mat(g(0)).noalias() += DY * mat(in_val(1)).transpose();
      if (wants(1)) mat(g(1)).noalias() += mat(in_val(0)).transpose() * DY;
      if (n.inputs.size() > 2 && wants(2)) vec(g(2)) += DY.colwise().sum().transpose();
      return;
    }
    case Op::Attention: {
      const auto& qv = in_val(0);
      const auto& kv = in_val(1);
      const auto& vv = in_val(2);
      const std::size_t len = qv.rows();
      const std::size_t d = qv.cols();
      const std::size_t heads = n.count;
      const std::size_t dk = d / heads;
      const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
      const auto L = static_cast<Eigen::Index>(len);
      const auto DK = static_cast<Eigen::Index>(dk);
      auto P = mat(n.aux.front());
      auto Q = mat(qv);
      auto K = mat(kv);
      auto V = mat(vv);
      auto DY = mat(dy);
      const bool want_q = wants(0), want_k = wants(1), want_v = wants(2);
      const bool want_bias = n.bias_slot >= 0 && wants(static_cast<std::size_t>(n.bias_slot));
      const bool want_scale = n.scale_slot >= 0 && wants(static_cast<std::size_t>(n.scale_slot));
      const NumArray<T>* lscale =
          n.scale_slot >= 0 ? &in_val(static_cast<std::size_t>(n.scale_slot)) : nullptr;
      RowMat<T> dP(L, L), dS(L, L), raw(L, L);
      for (std::size_t h = 0; h < heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h * dk);
        auto Ph = P.middleRows(static_cast<Eigen::Index>(h * len), L);
        auto dOh = DY.middleCols(off, DK);
        if (want_v) mat(g(2)).middleCols(off, DK).noalias() += Ph.transpose() * dOh;
        if (!(want_q || want_k || want_bias || want_scale)) continue;
        dP.noalias() = dOh * V.middleCols(off, DK).transpose();
        for (Eigen::Index r = 0; r < L; ++r) {
          const T dot = Ph.row(r).dot(dP.row(r));
          dS.row(r) = Ph.row(r).array() * (dP.row(r).array() - dot);
        }
        if (want_bias) mat(g(static_cast<std::size_t>(n.bias_slot))) += dS;
        if (lscale || want_scale) {
          raw.noalias() = Q.middleCols(off, DK) * K.middleCols(off, DK).transpose();
          raw *= inv_sqrt;
          if (want_scale) {
            mat(g(static_cast<std::size_t>(n.scale_slot))).array() += dS.array() * raw.array();
          }
          if (lscale) dS.array() *= mat(*lscale).array();
        }
        dS *= inv_sqrt;
        if (want_q) mat(g(0)).middleCols(off, DK).noalias() += dS * K.middleCols(off, DK);
        if (want_k) mat(g(1)).middleCols(off, DK).noalias() += dS.transpose() * Q.middleCols(off, DK);
      }
      return;
    }
    case Op::Softmax: {
      if (!wants(0)) return;
      auto Y = mat(n.value());
      auto DY = mat(dy);
      auto DX = mat(g(0));
      for (Eigen::Index r = 0; r < Y.rows(); ++r) {
        const T dot = Y.row(r).dot(DY.row(r));
        DX.row(r).array() += Y.row(r).array() * (DY.row(r).array() - dot);
      }
      return;
    }
    case Op::LogSoftmax: {
      if (!wants(0)) return;
      NumArray<T> live = dy;
      for (std::size_t i = 0; i < live.size(); ++i) {
        if (n.flags[i]) live[i] = T(0);
      }
      auto S = mat(n.aux.front());
      auto D = mat(live);
      auto DX = mat(g(0));
      for (Eigen::Index r = 0; r < D.rows(); ++r) {
        const T total = D.row(r).sum();
        DX.row(r) += D.row(r) - S.row(r) * total;
      }
      return;
    }
    case Op::LayerNorm: {
      const auto& xhat = n.aux[0];
      const auto& rstd = n.aux[1];
      const auto& gv = in_val(1);
      const std::size_t rows = xhat.rows();
      const std::size_t d = xhat.cols();
      if (wants(1) || wants(2)) {
        NumArray<T>* dg = wants(1) ? &g(1) : nullptr;
        NumArray<T>* db = wants(2) ? &g(2) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < d; ++c) {
            const T gy = dy[r * d + c];
            if (dg) (*dg)[c] += gy * xhat[r * d + c];
            if (db) (*db)[c] += gy;
          }
        }
      }
      if (wants(0)) {
        auto& dx = g(0);
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = T(0), mean_dx = T(0);
          for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = dy[r * d + c] * gv[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xhat[r * d + c];
          }
          mean_d /= static_cast<T>(d);
          mean_dx /= static_cast<T>(d);
          for (std::size_t c = 0; c < d; ++c) {
            dx[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
          }
        }
      }
      return;
    }
    case Op::Relu: {
      if (!wants(0)) return;
      const auto& xv = in_val(0);
      auto& dx = g(0);
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (xv[i] > T(0)) dx[i] += dy[i];
      }
      return;
    }
    case Op::Sigmoid: {
      if (!wants(0)) return;
      const auto& y = n.value();
      auto& dx = g(0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
      return;
    }
    case Op::LogSigmoid: {
      if (!wants(0)) return;
      const auto& xv = in_val(0);
      auto& dx = g(0);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * stable_sigmoid(-xv[i]);
      return;
    }
    case Op::Log: {
      if (!wants(0)) return;
      const auto& xv = in_val(0);
      auto& dx = g(0);
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (xv[i] > n.scalar) dx[i] += dy[i] / xv[i];
      }
      return;
    }
    case Op::Add: {
      if (wants(0)) vec(g(0)) += vec(dy);
      if (wants(1)) vec(g(1)) += vec(dy);
      return;
    }
    case Op::Mul: {
      if (wants(0)) vec(g(0)).array() += vec(dy).array() * vec(in_val(1)).array();
      if (wants(1)) vec(g(1)).array() += vec(dy).array() * vec(in_val(0)).array();
      return;
    }
    case Op::Scale: {
      if (wants(0)) vec(g(0)) += n.scalar * vec(dy);
      return;
    }
    case Op::AddScalar:
    case Op::Reshape: {
      if (wants(0)) vec(g(0)) += vec(dy);
      return;
    }
    case Op::RowScale: {
      const auto& xv = in_val(0);
      const auto& sv = in_val(1);
      auto DY = mat(dy);
      if (wants(0)) {
        auto DX = mat(g(0));
        for (Eigen::Index r = 0; r < DY.rows(); ++r) DX.row(r) += DY.row(r) * sv[static_cast<std::size_t>(r)];
      }
      if (wants(1)) {
        auto& ds = g(1);
        auto X = mat(xv);
        for (Eigen::Index r = 0; r < DY.rows(); ++r) ds[static_cast<std::size_t>(r)] += DY.row(r).dot(X.row(r));
      }
      return;
    }
    case Op::MeanPool: {
      if (!wants(0)) return;
      auto DX = mat(g(0));
      const T inv = T(1) / static_cast<T>(n.count);
      for (Eigen::Index r = 0; r < DX.rows(); ++r) {
        if (n.flags[static_cast<std::size_t>(r)]) DX.row(r) += vec(dy).transpose() * inv;
      }
      return;
    }
    case Op::Sum: {
      if (wants(0)) vec(g(0)).array() += dy[0];
      return;
    }
    case Op::Nll: {
      if (!wants(0)) return;
      const T rows = static_cast<T>(in_val(0).rows());
      vec(g(0)) += (-dy[0] / rows) * vec(n.aux.front());
      return;
    }
  }
}

template class NumArray<float>;
template class NumArray<double>;
template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------- fd check

double finite_difference_check(const GraphBuilder& build,
                               const std::vector<NumArray<double>>& leaves, double step,
                               const FiniteDifferenceOptions& options) {
  auto evaluate = [&](const std::vector<NumArray<double>>& vals) {
    Tape<double> tape(true);
    std::vector<Var> vars;
    vars.reserve(vals.size());
    for (const auto& v : vals) vars.push_back(tape.leaf_ref(v, true));
    const Var out = build(tape, vars);
    return tape.value(out)[0];
  };

  Tape<double> tape(true);
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const auto& v : leaves) vars.push_back(tape.leaf_ref(v, true));
  const Var out = build(tape, vars);
  const auto analytic = tape.backward(out, vars);

  std::mt19937_64 rng(options.seed);
  std::vector<NumArray<double>> work = leaves;
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const std::size_t n = leaves[li].size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > options.max_coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_leaf);
    }
    for (std::size_t c : coords) {
      const double orig = work[li][c];
      work[li][c] = orig + step;
      const double up = evaluate(work);
      work[li][c] = orig - step;
      const double down = evaluate(work);
      work[li][c] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(analytic[li][c] - numeric) / std::max(1e-12, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace xflow::grad
