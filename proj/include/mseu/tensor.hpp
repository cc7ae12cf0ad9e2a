#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "mseu/common.hpp"

namespace mseu {

template <class S>
class Tape;
template <class S>
class TapeScope;

namespace detail {

inline uint64_t next_tape_epoch() {
  static uint64_t counter = 0;
  return ++counter;
}

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int k = (int)s.size() - 2; k >= 0; --k) st[(size_t)k] = st[(size_t)k + 1] * s[(size_t)k + 1];
  return st;
}

template <class S>
using Arr = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S>
using CArr = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

template <class S, class A>
Arr<S> arr(std::vector<S, A>& v) { return {v.data(), (Eigen::Index)v.size()}; }
template <class S, class A>
CArr<S> carr(const std::vector<S, A>& v) { return {v.data(), (Eigen::Index)v.size()}; }
template <class S>
Arr<S> arr_p(S* p, int64_t n) { return {p, (Eigen::Index)n}; }
template <class S>
CArr<S> carr_p(const S* p, int64_t n) { return {p, (Eigen::Index)n}; }

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<Mat<S>>;
template <class S>
using CMatMap = Eigen::Map<const Mat<S>>;

}  // namespace detail

// Gradient bookkeeping shared by all copies of a tensor. `grad` is the leaf
// accumulator; epoch/node tie the tensor to the tape of the current pass.
template <class S>
struct GradMeta {
  bool requires_grad = false;
  std::shared_ptr<detail::AVec<S>> grad;
  uint64_t epoch = 0;
  int node = -1;
};

// Dense row-major tensor with shared immutable storage. Copies are shallow.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.data_ = std::make_shared<detail::AVec<S>>((size_t)numel_of(shape), S(0));
    t.shape_ = std::move(shape);
    return t;
  }
  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }
  static Tensor scalar(S v) { return from(std::vector<S>{v}, Shape{}); }

  static Tensor from_buf(detail::AVec<S> vals, Shape shape) {
    require((int64_t)vals.size() == numel_of(shape),
            "tensor: " + std::to_string(vals.size()) + " values do not fill " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<detail::AVec<S>>(std::move(vals));
    return t;
  }
  static Tensor from(const std::vector<S>& vals, Shape shape) {
    return from_buf(detail::AVec<S>(vals.begin(), vals.end()), std::move(shape));
  }

  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
    detail::AVec<S> v((size_t)numel_of(shape));
    for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
    return from_buf(std::move(v), shape);
  }
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    detail::AVec<S> v((size_t)numel_of(shape));
    for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
    return from_buf(std::move(v), shape);
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return (int)shape_.size(); }
  int64_t dim(int i) const { return shape_[(size_t)i]; }
  int64_t numel() const { return data_ ? (int64_t)data_->size() : 0; }
  bool defined() const { return (bool)data_; }

  std::span<const S> data() const { return {data_->data(), data_->size()}; }
  // In-place access, reserved for init, optimizer updates and checkpoint
  // restore. Never mutate storage a live tape has captured.
  detail::AVec<S>& mutable_data() { return *data_; }
  const std::shared_ptr<detail::AVec<S>>& storage() const { return data_; }

  S item() const {
    require(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
    return (*data_)[0];
  }

  S at(std::initializer_list<int64_t> idx) const {
    require((int)idx.size() == rank(), "at: index rank mismatch for " + shape_str(shape_));
    auto st = detail::strides_of(shape_);
    int64_t off = 0;
    int k = 0;
    for (int64_t i : idx) off += i * st[(size_t)k++];
    return (*data_)[(size_t)off];
  }

  Tensor& set_requires_grad(bool on) {
    if (on && !meta_) meta_ = std::make_shared<GradMeta<S>>();
    if (meta_) meta_->requires_grad = on;
    return *this;
  }
  bool requires_grad() const { return meta_ && meta_->requires_grad; }

  bool has_grad() const { return meta_ && meta_->grad; }
  std::span<const S> grad() const {
    require(has_grad(), "grad: no gradient recorded");
    return {meta_->grad->data(), meta_->grad->size()};
  }
  Tensor grad_tensor() const {
    auto g = grad();
    return from(std::vector<S>(g.begin(), g.end()), shape_);
  }
  void zero_grad() {
    if (meta_ && meta_->grad) std::fill(meta_->grad->begin(), meta_->grad->end(), S(0));
  }

  bool all_finite() const {
    for (S v : *data_)
      if (!std::isfinite((double)v)) return false;
    return true;
  }
  void check_finite(const std::string& what) const {
    if (!all_finite()) throw std::runtime_error(what + ": non-finite values");
  }

  // autograd plumbing
  const std::shared_ptr<GradMeta<S>>& meta() const { return meta_; }
  std::shared_ptr<GradMeta<S>>& meta() { return meta_; }

  // View with the same storage and grad identity.
  Tensor reshaped(Shape shape) const {
    require(numel_of(shape) == numel(),
            "reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

 private:
  Tensor(Shape shape, S fill) {
    data_ = std::make_shared<detail::AVec<S>>((size_t)numel_of(shape), fill);
    shape_ = std::move(shape);
  }

  Shape shape_;
  std::shared_ptr<detail::AVec<S>> data_;
  std::shared_ptr<GradMeta<S>> meta_;
};

// Define-by-run tape. Creation order is the topological order; backward walks
// it once in reverse, pulling each node's gradient into its parents.
template <class S>
class Tape {
 public:
  using Pull = std::function<void(const S*, Tape&)>;

  Tape() : epoch_(detail::next_tape_epoch()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }
  uint64_t epoch() const { return epoch_; }
  int64_t size() const { return (int64_t)nodes_.size(); }

  bool participates(const Tensor<S>& t) const {
    auto& m = t.meta();
    return m && ((m->epoch == epoch_ && m->node >= 0) || m->requires_grad);
  }

  // Node id of `t` on this tape; registers requires_grad leaves on first use.
  int node_of(const Tensor<S>& t) {
    auto& m = const_cast<Tensor<S>&>(t).meta();
    if (!m) return -1;
    if (m->epoch == epoch_ && m->node >= 0) return m->node;
    if (m->requires_grad) {
      int id = new_node(t.numel());
      nodes_[(size_t)id].leaf = m;
      m->epoch = epoch_;
      m->node = id;
      leaves_.push_back(id);
      return id;
    }
    return -1;
  }

  void watch(Tensor<S>& t) {
    require(t.requires_grad(), "watch: tensor does not require gradients");
    node_of(t);
  }

  void record(Tensor<S>& out, Pull pull) {
    int id = new_node(out.numel());
    nodes_[(size_t)id].pull = std::move(pull);
    auto m = std::make_shared<GradMeta<S>>();
    m->epoch = epoch_;
    m->node = id;
    out.meta() = std::move(m);
  }

  // Gradient buffer of a node, zero-initialized on first touch. Null id -> null.
  S* grad_buf(int node) {
    if (node < 0) return nullptr;
    auto& g = grads_[(size_t)node];
    if (!g) g = std::make_unique<detail::AVec<S>>((size_t)nodes_[(size_t)node].numel, S(0));
    return g->data();
  }

  void backward(const Tensor<S>& loss) {
    require(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto& m = loss.meta();
    require(m && m->epoch == epoch_ && m->node >= 0, "backward: loss is not on this tape");
    grads_.clear();
    grads_.resize(nodes_.size());
    grad_buf(m->node)[0] = S(1);
    for (int i = (int)nodes_.size() - 1; i >= 0; --i) {
      if (grads_[(size_t)i] && nodes_[(size_t)i].pull) nodes_[(size_t)i].pull(grads_[(size_t)i]->data(), *this);
    }
    for (int id : leaves_) {
      auto& leaf = nodes_[(size_t)id].leaf;
      if (!leaf->grad) leaf->grad = std::make_shared<detail::AVec<S>>((size_t)nodes_[(size_t)id].numel, S(0));
      if (grads_[(size_t)id]) {
        detail::arr(*leaf->grad) += detail::carr(*grads_[(size_t)id]);
      }
    }
    grads_.clear();
  }

 private:
  friend class TapeScope<S>;

  struct Node {
    int64_t numel = 0;
    Pull pull;
    std::shared_ptr<GradMeta<S>> leaf;
  };

  int new_node(int64_t numel) {
    nodes_.push_back(Node{numel, nullptr, nullptr});
    return (int)nodes_.size() - 1;
  }

  uint64_t epoch_;
  std::vector<Node> nodes_;
  std::vector<std::unique_ptr<detail::AVec<S>>> grads_;
  std::vector<int> leaves_;

  inline static thread_local Tape* current_ = nullptr;
};

template <class S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& t) : prev_(Tape<S>::current_) { Tape<S>::current_ = &t; }
  ~TapeScope() { Tape<S>::current_ = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

namespace detail {

template <class S>
struct Rec {
  Tape<S>* tape = nullptr;
  std::array<int, 6> in{{-1, -1, -1, -1, -1, -1}};
  explicit operator bool() const { return tape != nullptr; }
};

template <class S, class... Ts>
Rec<S> begin_op(const Ts&... ins) {
  Rec<S> r;
  Tape<S>* tp = Tape<S>::current();
  if (!tp) return r;
  if (!(tp->participates(ins) || ...)) return r;
  r.tape = tp;
  int k = 0;
  ((r.in[(size_t)k++] = tp->node_of(ins)), ...);
  return r;
}

template <class S, class Fwd, class Bwd>
Tensor<S> map_unary(const Tensor<S>& x, Fwd fwd, Bwd bwd) {
  detail::AVec<S> v((size_t)x.numel());
  fwd(carr_p(x.data().data(), x.numel()), arr(v));
  auto out = Tensor<S>::from_buf(std::move(v), x.shape());
  if (auto r = begin_op<S>(x)) {
    int ix = r.in[0];
    r.tape->record(out, [ix, bwd, xs = x.storage(), ys = out.storage()](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) {
        int64_t n = (int64_t)xs->size();
        bwd(carr_p(g, n), carr_p(xs->data(), n), carr_p(ys->data(), n), arr_p(gx, n));
      }
    });
  }
  return out;
}

}  // namespace detail

// ---- elementwise ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  detail::AVec<S> v((size_t)a.numel());
  detail::arr(v) = detail::carr_p(a.data().data(), a.numel()) + detail::carr_p(b.data().data(), b.numel());
  auto out = Tensor<S>::from_buf(std::move(v), a.shape());
  if (auto r = detail::begin_op<S>(a, b)) {
    r.tape->record(out, [ia = r.in[0], ib = r.in[1], n = a.numel()](const S* g, Tape<S>& tp) {
      if (S* ga = tp.grad_buf(ia)) detail::arr_p(ga, n) += detail::carr_p(g, n);
      if (S* gb = tp.grad_buf(ib)) detail::arr_p(gb, n) += detail::carr_p(g, n);
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(),
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  detail::AVec<S> v((size_t)a.numel());
  detail::arr(v) = detail::carr_p(a.data().data(), a.numel()) - detail::carr_p(b.data().data(), b.numel());
  auto out = Tensor<S>::from_buf(std::move(v), a.shape());
  if (auto r = detail::begin_op<S>(a, b)) {
    r.tape->record(out, [ia = r.in[0], ib = r.in[1], n = a.numel()](const S* g, Tape<S>& tp) {
      if (S* ga = tp.grad_buf(ia)) detail::arr_p(ga, n) += detail::carr_p(g, n);
      if (S* gb = tp.grad_buf(ib)) detail::arr_p(gb, n) -= detail::carr_p(g, n);
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  detail::AVec<S> v((size_t)a.numel());
  detail::arr(v) = detail::carr_p(a.data().data(), a.numel()) * detail::carr_p(b.data().data(), b.numel());
  auto out = Tensor<S>::from_buf(std::move(v), a.shape());
  if (auto r = detail::begin_op<S>(a, b)) {
    r.tape->record(out, [ia = r.in[0], ib = r.in[1], as = a.storage(), bs = b.storage()](
                            const S* g, Tape<S>& tp) {
      int64_t n = (int64_t)as->size();
      if (S* ga = tp.grad_buf(ia))
        detail::arr_p(ga, n) += detail::carr_p(g, n) * detail::carr(*bs);
      if (S* gb = tp.grad_buf(ib))
        detail::arr_p(gb, n) += detail::carr_p(g, n) * detail::carr(*as);
    });
  }
  return out;
}

// y = a*x + b with scalar a, b
template <class S>
Tensor<S> affine(const Tensor<S>& x, S a, S b) {
  return detail::map_unary(
      x, [a, b](auto xv, auto yv) { yv = a * xv + b; },
      [a](auto g, auto, auto, auto gx) { gx += a * g; });
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S a) { return affine(x, a, S(0)); }
template <class S>
Tensor<S> neg(const Tensor<S>& x) { return affine(x, S(-1), S(0)); }

template <class S>
Tensor<S> silu(const Tensor<S>& x) {
  return detail::map_unary(
      x, [](auto xv, auto yv) { yv = xv / (S(1) + (-xv).exp()); },
      [](auto g, auto xv, auto, auto gx) {
        auto s = (S(1) + (-xv).exp()).inverse();
        gx += g * s * (S(1) + xv * (S(1) - s));
      });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::map_unary(
      x, [](auto xv, auto yv) { yv = (S(1) + (-xv).exp()).inverse(); },
      [](auto g, auto, auto yv, auto gx) { gx += g * yv * (S(1) - yv); });
}

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  return detail::map_unary(
      x, [](auto xv, auto yv) { yv = xv.exp(); },
      [](auto g, auto, auto yv, auto gx) { gx += g * yv; });
}

template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
  return detail::map_unary(
      x, [](auto xv, auto yv) { yv = xv.max(S(0)) + (S(1) + (-xv.abs()).exp()).log(); },
      [](auto g, auto xv, auto, auto gx) { gx += g / (S(1) + (-xv).exp()); });
}

template <class S>
Tensor<S> cos(const Tensor<S>& x) {
  return detail::map_unary(
      x, [](auto xv, auto yv) { yv = xv.cos(); },
      [](auto g, auto xv, auto, auto gx) { gx -= g * xv.sin(); });
}

template <class S>
Tensor<S> sin(const Tensor<S>& x) {
  return detail::map_unary(
      x, [](auto xv, auto yv) { yv = xv.sin(); },
      [](auto g, auto xv, auto, auto gx) { gx += g * xv.cos(); });
}

template <class S>
Tensor<S> abs(const Tensor<S>& x) {
  return detail::map_unary(
      x, [](auto xv, auto yv) { yv = xv.abs(); },
      [](auto g, auto xv, auto, auto gx) { gx += g * xv.sign(); });
}

// x^e with constant exponent; gradients need e >= 1 to stay bounded at 0.
template <class S>
Tensor<S> pow(const Tensor<S>& x, double e) {
  return detail::map_unary(
      x, [e](auto xv, auto yv) { yv = xv.pow(S(e)); },
      [e](auto g, auto xv, auto, auto gx) { gx += g * S(e) * xv.pow(S(e - 1)); });
}

template <class S>
Tensor<S> atan2(const Tensor<S>& p, const Tensor<S>& q) {
  require(p.shape() == q.shape(),
          "atan2: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  detail::AVec<S> v((size_t)p.numel());
  {
    auto pd = p.data(), qd = q.data();
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::atan2(pd[i], qd[i]);
  }
  auto out = Tensor<S>::from_buf(std::move(v), p.shape());
  if (auto r = detail::begin_op<S>(p, q)) {
    r.tape->record(out, [ip = r.in[0], iq = r.in[1], ps = p.storage(), qs = q.storage()](
                            const S* g, Tape<S>& tp) {
      int64_t n = (int64_t)ps->size();
      S* gp = tp.grad_buf(ip);
      S* gq = tp.grad_buf(iq);
      const S* pd = ps->data();
      const S* qd = qs->data();
      for (int64_t i = 0; i < n; ++i) {
        S d = pd[i] * pd[i] + qd[i] * qd[i];
        if (d == S(0)) continue;
        if (gp) gp[i] += g[i] * qd[i] / d;
        if (gq) gq[i] -= g[i] * pd[i] / d;
      }
    });
  }
  return out;
}

// x[..., C] + b[C]
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  require(x.rank() >= 1 && b.rank() == 1 && x.dim(x.rank() - 1) == b.dim(0),
          "add_bias: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  int64_t c = b.dim(0);
  int64_t rows = x.numel() / c;
  detail::AVec<S> v((size_t)x.numel());
  {
    detail::CMatMap<S> xm(x.data().data(), rows, c);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bv(b.data().data(), c);
    detail::MatMap<S> om(v.data(), rows, c);
    om = xm;
    om.rowwise() += bv.transpose();
  }
  auto out = Tensor<S>::from_buf(std::move(v), x.shape());
  if (auto r = detail::begin_op<S>(x, b)) {
    r.tape->record(out, [ix = r.in[0], ib = r.in[1], rows, c](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) detail::arr_p(gx, rows * c) += detail::carr_p(g, rows * c);
      if (S* gb = tp.grad_buf(ib)) {
        detail::CMatMap<S> gm(g, rows, c);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gbv(gb, c);
        gbv += gm.colwise().sum().transpose();
      }
    });
  }
  return out;
}

// x[..., C] * s[C]
template <class S>
Tensor<S> mul_channels(const Tensor<S>& x, const Tensor<S>& s) {
  require(x.rank() >= 1 && s.rank() == 1 && x.dim(x.rank() - 1) == s.dim(0),
          "mul_channels: " + shape_str(x.shape()) + " with scale " + shape_str(s.shape()));
  int64_t c = s.dim(0);
  int64_t rows = x.numel() / c;
  detail::AVec<S> v((size_t)x.numel());
  {
    detail::CMatMap<S> xm(x.data().data(), rows, c);
    detail::MatMap<S> om(v.data(), rows, c);
    om = xm.array().rowwise() *
         Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>>(s.data().data(), c);
  }
  auto out = Tensor<S>::from_buf(std::move(v), x.shape());
  if (auto r = detail::begin_op<S>(x, s)) {
    r.tape->record(out, [ix = r.in[0], is = r.in[1], xs = x.storage(), ss = s.storage(), rows,
                         c](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) {
        detail::MatMap<S> gxm(gx, rows, c);
        detail::CMatMap<S> gm(g, rows, c);
        gxm.array() += gm.array().rowwise() *
                       Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>>(ss->data(), c);
      }
      if (S* gs = tp.grad_buf(is)) {
        detail::CMatMap<S> gm(g, rows, c);
        detail::CMatMap<S> xm(xs->data(), rows, c);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gsv(gs, c);
        gsv += (gm.array() * xm.array()).colwise().sum().matrix().transpose();
      }
    });
  }
  return out;
}

// ---- reductions ----

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  S total = detail::carr_p(x.data().data(), x.numel()).sum();
  auto out = Tensor<S>::scalar(total);
  if (auto r = detail::begin_op<S>(x)) {
    r.tape->record(out, [ix = r.in[0], n = x.numel()](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) detail::arr_p(gx, n) += g[0];
    });
  }
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  require(x.numel() > 0, "mean: empty tensor");
  S total = detail::carr_p(x.data().data(), x.numel()).sum() / S(x.numel());
  auto out = Tensor<S>::scalar(total);
  if (auto r = detail::begin_op<S>(x)) {
    r.tape->record(out, [ix = r.in[0], n = x.numel()](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) detail::arr_p(gx, n) += g[0] / S(n);
    });
  }
  return out;
}

// ---- linear algebra ----

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::AVec<S> v((size_t)(m * n));
  {
    detail::CMatMap<S> A(a.data().data(), m, k), B(b.data().data(), k, n);
    detail::MatMap<S> C(v.data(), m, n);
    C.noalias() = A * B;
  }
  auto out = Tensor<S>::from_buf(std::move(v), {m, n});
  if (auto r = detail::begin_op<S>(a, b)) {
    r.tape->record(out, [ia = r.in[0], ib = r.in[1], as = a.storage(), bs = b.storage(), m, k, n](
                            const S* g, Tape<S>& tp) {
      detail::CMatMap<S> G(g, m, n);
      if (S* ga = tp.grad_buf(ia)) {
        detail::CMatMap<S> B(bs->data(), k, n);
        detail::MatMap<S>(ga, m, k).noalias() += G * B.transpose();
      }
      if (S* gb = tp.grad_buf(ib)) {
        detail::CMatMap<S> A(as->data(), m, k);
        detail::MatMap<S>(gb, k, n).noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

// ---- structural ----

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  return x.reshaped(std::move(shape));
}

template <class S>
Tensor<S> flip(const Tensor<S>& x, int axis) {
  require(axis >= 0 && axis < x.rank(),
          "flip: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const auto& sh = x.shape();
  int64_t len = sh[(size_t)axis];
  int64_t outer = 1, inner = 1;
  for (int k = 0; k < axis; ++k) outer *= sh[(size_t)k];
  for (int k = axis + 1; k < x.rank(); ++k) inner *= sh[(size_t)k];
  detail::AVec<S> v((size_t)x.numel());
  const S* xd = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < len; ++i)
      std::memcpy(v.data() + (o * len + (len - 1 - i)) * inner, xd + (o * len + i) * inner,
                  (size_t)inner * sizeof(S));
  auto out = Tensor<S>::from_buf(std::move(v), sh);
  if (auto r = detail::begin_op<S>(x)) {
    r.tape->record(out, [ix = r.in[0], outer, len, inner](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) {
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < len; ++i)
            detail::arr_p(gx + (o * len + i) * inner, inner) +=
                detail::carr_p(g + (o * len + (len - 1 - i)) * inner, inner);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& perm) {
  int r = x.rank();
  require((int)perm.size() == r, "permute: order has wrong rank for " + shape_str(x.shape()));
  {
    std::vector<char> seen((size_t)r, 0);
    for (int p : perm) {
      require(p >= 0 && p < r && !seen[(size_t)p], "permute: invalid axis order");
      seen[(size_t)p] = 1;
    }
  }
  Shape oshape((size_t)r);
  for (int k = 0; k < r; ++k) oshape[(size_t)k] = x.dim(perm[(size_t)k]);
  auto xst = detail::strides_of(x.shape());
  std::vector<int64_t> step((size_t)r);
  for (int k = 0; k < r; ++k) step[(size_t)k] = xst[(size_t)perm[(size_t)k]];

  auto walk = [r](const Shape& os, const std::vector<int64_t>& st, auto&& f) {
    int64_t n = numel_of(os);
    if (r == 0) {
      if (n == 1) f(0, 0);
      return;
    }
    std::vector<int64_t> idx((size_t)r, 0);
    int64_t src = 0;
    for (int64_t j = 0; j < n; ++j) {
      f(j, src);
      for (int k = r - 1; k >= 0; --k) {
        idx[(size_t)k]++;
        src += st[(size_t)k];
        if (idx[(size_t)k] < os[(size_t)k]) break;
        src -= st[(size_t)k] * os[(size_t)k];
        idx[(size_t)k] = 0;
      }
    }
  };

  detail::AVec<S> v((size_t)x.numel());
  const S* xd = x.data().data();
  walk(oshape, step, [&](int64_t j, int64_t src) { v[(size_t)j] = xd[src]; });
  auto out = Tensor<S>::from_buf(std::move(v), oshape);
  if (auto r2 = detail::begin_op<S>(x)) {
    r2.tape->record(out, [ix = r2.in[0], oshape, step, walk](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) {
        walk(oshape, step, [&](int64_t j, int64_t src) { gx[src] += g[j]; });
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, const std::vector<int64_t>& starts,
                const std::vector<int64_t>& sizes) {
  int r = x.rank();
  require((int)starts.size() == r && (int)sizes.size() == r,
          "slice: starts/sizes rank mismatch for " + shape_str(x.shape()));
  for (int k = 0; k < r; ++k)
    require(starts[(size_t)k] >= 0 && sizes[(size_t)k] >= 0 &&
                starts[(size_t)k] + sizes[(size_t)k] <= x.dim(k),
            "slice: window out of bounds for " + shape_str(x.shape()));
  Shape oshape(sizes.begin(), sizes.end());
  auto xst = detail::strides_of(x.shape());
  int64_t base = 0;
  for (int k = 0; k < r; ++k) base += starts[(size_t)k] * xst[(size_t)k];

  // walk over output rows of the innermost dim for contiguous copies
  int64_t inner = r > 0 ? sizes[(size_t)r - 1] : 1;
  int64_t rows = numel_of(oshape) / std::max<int64_t>(inner, 1);
  detail::AVec<S> v((size_t)numel_of(oshape));
  const S* xd = x.data().data();
  auto row_src = [base, r, oshape, xst](int64_t row) {
    int64_t src = base, rem = row;
    for (int k = r - 2; k >= 0; --k) {
      int64_t i = rem % oshape[(size_t)k];
      rem /= oshape[(size_t)k];
      src += i * xst[(size_t)k];
    }
    return src;
  };
  if (inner > 0)
    for (int64_t row = 0; row < rows; ++row)
      std::memcpy(v.data() + row * inner, xd + row_src(row), (size_t)inner * sizeof(S));
  auto out = Tensor<S>::from_buf(std::move(v), oshape);
  if (auto rc = detail::begin_op<S>(x)) {
    rc.tape->record(out, [ix = rc.in[0], rows, inner, row_src](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) {
        for (int64_t row = 0; row < rows; ++row)
          detail::arr_p(gx + row_src(row), inner) += detail::carr_p(g + row * inner, inner);
      }
    });
  }
  return out;
}

enum class PadKind { zero, reflect };

// Per-dimension (lo, hi) padding. Reflection mirrors without repeating the
// edge sample and needs pad < dim extent.
template <class S>
Tensor<S> pad(const Tensor<S>& x, const std::vector<int64_t>& lo, const std::vector<int64_t>& hi,
              PadKind kind = PadKind::zero) {
  int r = x.rank();
  require((int)lo.size() == r && (int)hi.size() == r,
          "pad: lo/hi rank mismatch for " + shape_str(x.shape()));
  Shape oshape((size_t)r);
  for (int k = 0; k < r; ++k) {
    require(lo[(size_t)k] >= 0 && hi[(size_t)k] >= 0, "pad: negative padding");
    if (kind == PadKind::reflect)
      require(lo[(size_t)k] < x.dim(k) && hi[(size_t)k] < x.dim(k),
              "pad: reflection wider than input " + shape_str(x.shape()));
    oshape[(size_t)k] = x.dim(k) + lo[(size_t)k] + hi[(size_t)k];
  }
  auto xst = detail::strides_of(x.shape());
  const auto& xsh = x.shape();

  // src offset of an output element, -1 when it falls in a zero region
  auto src_of = [r, lo, xsh, xst, kind](const std::vector<int64_t>& idx) -> int64_t {
    int64_t src = 0;
    for (int k = 0; k < r; ++k) {
      int64_t i = idx[(size_t)k] - lo[(size_t)k];
      int64_t n = xsh[(size_t)k];
      if (i < 0 || i >= n) {
        if (kind == PadKind::zero) return -1;
        i = i < 0 ? -i : 2 * (n - 1) - i;
      }
      src += i * xst[(size_t)k];
    }
    return src;
  };
  auto walk = [r](const Shape& os, auto&& f) {
    std::vector<int64_t> idx((size_t)std::max(r, 1), 0);
    int64_t n = numel_of(os);
    for (int64_t j = 0; j < n; ++j) {
      f(j, idx);
      for (int k = r - 1; k >= 0; --k) {
        if (++idx[(size_t)k] < os[(size_t)k]) break;
        idx[(size_t)k] = 0;
      }
    }
  };

  detail::AVec<S> v((size_t)numel_of(oshape), S(0));
  const S* xd = x.data().data();
  walk(oshape, [&](int64_t j, const std::vector<int64_t>& idx) {
    int64_t s = src_of(idx);
    if (s >= 0) v[(size_t)j] = xd[s];
  });
  auto out = Tensor<S>::from_buf(std::move(v), oshape);
  if (auto rc = detail::begin_op<S>(x)) {
    rc.tape->record(out, [ix = rc.in[0], oshape, src_of, walk](const S* g, Tape<S>& tp) {
      if (S* gx = tp.grad_buf(ix)) {
        walk(oshape, [&](int64_t j, const std::vector<int64_t>& idx) {
          int64_t s = src_of(idx);
          if (s >= 0) gx[s] += g[j];
        });
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
  require(!xs.empty(), "concat: no inputs");
  int r = xs[0].rank();
  require(axis >= 0 && axis < r,
          "concat: axis " + std::to_string(axis) + " out of range for " + shape_str(xs[0].shape()));
  int64_t axis_total = 0;
  for (const auto& t : xs) {
    require(t.rank() == r, "concat: rank mismatch " + shape_str(t.shape()) + " vs " +
                               shape_str(xs[0].shape()));
    for (int k = 0; k < r; ++k)
      require(k == axis || t.dim(k) == xs[0].dim(k),
              "concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
    axis_total += t.dim(axis);
  }
  Shape oshape = xs[0].shape();
  oshape[(size_t)axis] = axis_total;
  int64_t outer = 1, inner = 1;
  for (int k = 0; k < axis; ++k) outer *= oshape[(size_t)k];
  for (int k = axis + 1; k < r; ++k) inner *= oshape[(size_t)k];

  detail::AVec<S> v((size_t)numel_of(oshape));
  std::vector<int64_t> lens, offs;
  {
    int64_t off = 0;
    for (const auto& t : xs) {
      lens.push_back(t.dim(axis));
      offs.push_back(off);
      off += t.dim(axis);
    }
  }
  for (size_t i = 0; i < xs.size(); ++i) {
    const S* xd = xs[i].data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(v.data() + (o * axis_total + offs[i]) * inner, xd + o * lens[i] * inner,
                  (size_t)(lens[i] * inner) * sizeof(S));
  }
  auto out = Tensor<S>::from_buf(std::move(v), oshape);

  Tape<S>* tp = Tape<S>::current();
  if (tp) {
    bool any = false;
    for (const auto& t : xs) any = any || tp->participates(t);
    if (any) {
      std::vector<int> ids;
      ids.reserve(xs.size());
      for (const auto& t : xs) ids.push_back(tp->node_of(t));
      tp->record(out, [ids, lens, offs, outer, inner, axis_total](const S* g, Tape<S>& tp2) {
        for (size_t i = 0; i < ids.size(); ++i) {
          if (S* gx = tp2.grad_buf(ids[i])) {
            for (int64_t o = 0; o < outer; ++o)
              detail::arr_p(gx + o * lens[i] * inner, lens[i] * inner) +=
                  detail::carr_p(g + (o * axis_total + offs[i]) * inner, lens[i] * inner);
          }
        }
      });
    }
  }
  return out;
}

}  // namespace mseu
