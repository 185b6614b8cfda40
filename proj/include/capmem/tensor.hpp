#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "capmem/rng.hpp"

namespace capmem {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail_op(const std::string& op, const std::string& msg) {
  throw TensorError(op + ": " + msg);
}

// Integer tensor for token ids and targets. Not differentiable.
struct IntTensor {
  Shape shape;
  std::vector<int32_t> data;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<int32_t> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw TensorError("IntTensor: shape " + shape_str(shape) + " does not match data size " +
                        std::to_string(data.size()));
  }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

enum class Op {
  None,
  Add,
  Mul,
  Scale,
  Matmul,
  EmbeddingGather,
  LayerNorm,
  Gelu,
  SoftmaxLastDim,
  CausalMaskFill,
  Dropout,
  SplitHeads,
  MergeHeads,
  CrossEntropy,
  Sum,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::None: return "none";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Matmul: return "matmul";
    case Op::EmbeddingGather: return "embedding_gather";
    case Op::LayerNorm: return "layernorm";
    case Op::Gelu: return "gelu";
    case Op::SoftmaxLastDim: return "softmax_lastdim";
    case Op::CausalMaskFill: return "causal_mask_fill";
    case Op::Dropout: return "dropout";
    case Op::SplitHeads: return "reshape_split_heads";
    case Op::MergeHeads: return "merge_heads";
    case Op::CrossEntropy: return "cross_entropy_from_logits";
    case Op::Sum: return "sum";
  }
  return "?";
}

namespace detail {
// Graph recording is on by default; generation and loss estimation turn it
// off to skip node bookkeeping they will never backpropagate through.
inline thread_local bool g_grad_enabled = true;

// Training builds and drops the same activation shapes every iteration;
// recycling buffers through a per-thread pool avoids the page-fault churn of
// fresh large allocations. Buffers come back with stale contents, so every
// op either fully overwrites its output or zero-fills explicitly.
class BufferPool {
 public:
  void* acquire(size_t bytes) {
    auto& bin = bins_[bytes];
    if (!bin.empty()) {
      void* p = bin.back();
      bin.pop_back();
      return p;
    }
    return ::operator new(bytes);
  }
  void release(void* p, size_t bytes) { bins_[bytes].push_back(p); }
  ~BufferPool() {
    for (auto& [bytes, bin] : bins_)
      for (void* p : bin) ::operator delete(p);
  }

 private:
  std::unordered_map<size_t, std::vector<void*>> bins_;
};

inline BufferPool& buffer_pool() {
  static thread_local BufferPool pool;
  return pool;
}

// std::allocator substitute: pooled storage, and value-initialization of
// trivial element types is a no-op (callers fill what they need).
template <class T>
struct PoolAlloc {
  using value_type = T;
  PoolAlloc() noexcept = default;
  template <class U>
  PoolAlloc(const PoolAlloc<U>&) noexcept {}

  T* allocate(size_t n) { return static_cast<T*>(buffer_pool().acquire(n * sizeof(T))); }
  void deallocate(T* p, size_t n) noexcept { buffer_pool().release(p, n * sizeof(T)); }

  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <class U>
  bool operator==(const PoolAlloc<U>&) const noexcept {
    return true;
  }
};

}  // namespace detail

template <class S>
using Vec = std::vector<S, detail::PoolAlloc<S>>;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

template <class S>
class TensorT;

template <class S>
struct NodeT {
  Shape shape;
  Vec<S> data;
  Vec<S> grad;  // allocated lazily, same shape as data
  bool requires_grad = false;

  Op op = Op::None;
  std::vector<TensorT<S>> inputs;

  // Op attributes. i0/i1/f0 meaning depends on op:
  //   Scale: f0 = factor
  //   Matmul: i0 = transpose_b
  //   LayerNorm: f0 = epsilon
  //   Dropout: f0 = rate
  //   SplitHeads: i0 = n_head, i1 = section
  int64_t i0 = 0;
  int64_t i1 = 0;
  double f0 = 0.0;

  std::vector<int32_t> ids;  // EmbeddingGather / CrossEntropy targets
  Vec<S> aux;                // LayerNorm mean||rstd, Gelu cdf, Dropout mask, CrossEntropy probs

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) {
      grad.resize(data.size());
      std::fill(grad.begin(), grad.end(), S(0));
    }
  }
};

// Value-semantics handle onto a graph node. Copying a tensor shares the node.
template <class S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  // Allocated but not initialized; for op outputs that overwrite everything.
  static TensorT uninit(Shape shape) {
    TensorT t;
    t.node_ = std::make_shared<NodeT<S>>();
    t.node_->shape = std::move(shape);
    t.node_->data.resize(static_cast<size_t>(numel_of(t.node_->shape)));
    return t;
  }

  static TensorT zeros(Shape shape) { return filled(std::move(shape), S(0)); }

  static TensorT filled(Shape shape, S value) {
    TensorT t = uninit(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static TensorT from_data(Shape shape, Vec<S> data) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw TensorError("tensor: shape " + shape_str(shape) + " does not match data size " +
                        std::to_string(data.size()));
    TensorT t;
    t.node_ = std::make_shared<NodeT<S>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    return t;
  }

  static TensorT from_data(Shape shape, const std::vector<S>& data) {
    return from_data(std::move(shape), Vec<S>(data.begin(), data.end()));
  }

  static TensorT scalar(S value) { return from_data({}, Vec<S>{value}); }

  // Leaf with gradient tracking (a trainable parameter).
  static TensorT param(Shape shape, Vec<S> data) {
    TensorT t = from_data(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t ndim() const { return node_->shape.size(); }

  Vec<S>& data() { return node_->data; }
  const Vec<S>& data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Gradient buffer; materializes zeros on first access.
  Vec<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const Vec<S>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw TensorError("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
  }

  NodeT<S>* node() const { return node_.get(); }
  std::shared_ptr<NodeT<S>> handle() const { return node_; }

 private:
  std::shared_ptr<NodeT<S>> node_;

  template <class T>
  friend TensorT<T> make_op_node(Op op, Shape shape, std::vector<TensorT<T>> inputs);
};

template <class S>
TensorT<S> make_op_node(Op op, Shape shape, std::vector<TensorT<S>> inputs) {
  TensorT<S> out = TensorT<S>::uninit(std::move(shape));
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& in : inputs)
      if (in.node()->requires_grad || in.node()->op != Op::None) needs = true;
    if (needs) {
      out.node()->op = op;
      out.node()->inputs = std::move(inputs);
      out.node()->requires_grad = true;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inner matmul kernels. All accumulate into C so the same code serves the
// forward pass (C zero-filled) and gradient accumulation. The hot kernels
// keep four accumulator vectors in registers (GCC/Clang vector extensions;
// plain loops otherwise). Every C element is summed in ascending reduction
// order by a single owner, so results are bitwise reproducible.

#if defined(__GNUC__) || defined(__clang__)
#define CAPMEM_VEC_EXT 1
#endif

namespace detail {

#ifdef CAPMEM_VEC_EXT
template <class S>
struct NativeVec;
template <>
struct NativeVec<float> {
  typedef float V __attribute__((vector_size(64)));
  typedef float H __attribute__((vector_size(32)));
  static constexpr int64_t lanes = 16;
};
template <>
struct NativeVec<double> {
  typedef double V __attribute__((vector_size(64)));
  typedef double H __attribute__((vector_size(32)));
  static constexpr int64_t lanes = 8;
};

// C tile of 4 rows x one vector, accumulated over `steps` rank-1 updates.
// a_r advance by astep per update; the b row by bstep.
template <class VT, class S>
inline void tile_fma_rows4(const S* a0, const S* a1, const S* a2, const S* a3, int64_t astep,
                           const S* b, int64_t bstep, int64_t steps, S* c0, S* c1, S* c2, S* c3) {
  VT acc0{}, acc1{}, acc2{}, acc3{};
  for (int64_t p = 0; p < steps; ++p) {
    VT bv;
    std::memcpy(&bv, b, sizeof(VT));
    b += bstep;
    acc0 += *a0 * bv;
    a0 += astep;
    acc1 += *a1 * bv;
    a1 += astep;
    acc2 += *a2 * bv;
    a2 += astep;
    acc3 += *a3 * bv;
    a3 += astep;
  }
  auto add_out = [](S* cp, VT acc) {
    VT cv;
    std::memcpy(&cv, cp, sizeof(VT));
    cv += acc;
    std::memcpy(cp, &cv, sizeof(VT));
  };
  add_out(c0, acc0);
  add_out(c1, acc1);
  add_out(c2, acc2);
  add_out(c3, acc3);
}
#endif

// Scalar tile for leftover columns.
template <class S>
inline void tile_fma_rows4_tail(const S* a0, const S* a1, const S* a2, const S* a3, int64_t astep,
                                const S* b, int64_t bstep, int64_t steps, int64_t cols, S* c0,
                                S* c1, S* c2, S* c3) {
  for (int64_t j = 0; j < cols; ++j) {
    S s0{}, s1{}, s2{}, s3{};
    const S* bp = b + j;
    const S *p0 = a0, *p1 = a1, *p2 = a2, *p3 = a3;
    for (int64_t p = 0; p < steps; ++p) {
      const S bv = *bp;
      bp += bstep;
      s0 += *p0 * bv;
      p0 += astep;
      s1 += *p1 * bv;
      p1 += astep;
      s2 += *p2 * bv;
      p2 += astep;
      s3 += *p3 * bv;
      p3 += astep;
    }
    c0[j] += s0;
    c1[j] += s1;
    c2[j] += s2;
    c3[j] += s3;
  }
}

// One C row against the full B panel.
template <class S>
inline void row_times_panel(const S* arow, int64_t astep, const S* b, int64_t steps, int64_t n,
                            S* crow) {
  for (int64_t p = 0; p < steps; ++p) {
    const S av = *arow;
    arow += astep;
    const S* brow = b + p * n;
    for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

// Four C rows (c_r = cbase + r*n) fed by a_r = abase + r*arow_stride.
template <class S>
inline void gemm_rows4(const S* abase, int64_t arow_stride, int64_t astep, const S* b,
                       int64_t bstep, int64_t steps, int64_t n, S* cbase, int64_t crow_stride) {
  const S* a0 = abase;
  const S* a1 = abase + arow_stride;
  const S* a2 = abase + 2 * arow_stride;
  const S* a3 = abase + 3 * arow_stride;
  int64_t j0 = 0;
#ifdef CAPMEM_VEC_EXT
  using NV = NativeVec<S>;
  for (; j0 + NV::lanes <= n; j0 += NV::lanes)
    tile_fma_rows4<typename NV::V>(a0, a1, a2, a3, astep, b + j0, bstep, steps, cbase + j0,
                                   cbase + crow_stride + j0, cbase + 2 * crow_stride + j0,
                                   cbase + 3 * crow_stride + j0);
  for (; j0 + NV::lanes / 2 <= n; j0 += NV::lanes / 2)
    tile_fma_rows4<typename NV::H>(a0, a1, a2, a3, astep, b + j0, bstep, steps, cbase + j0,
                                   cbase + crow_stride + j0, cbase + 2 * crow_stride + j0,
                                   cbase + 3 * crow_stride + j0);
#endif
  if (j0 < n)
    tile_fma_rows4_tail(a0, a1, a2, a3, astep, b + j0, bstep, steps, n - j0, cbase + j0,
                        cbase + crow_stride + j0, cbase + 2 * crow_stride + j0,
                        cbase + 3 * crow_stride + j0);
}

}  // namespace detail

// C[M,N] += A[M,K] @ B[K,N]. Row blocks stay outermost so the A rows live in
// L1 while the (small, shared) B panel is re-streamed per block.
template <class S>
void gemm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  int64_t i0 = 0;
  for (; i0 + 4 <= m; i0 += 4)
    detail::gemm_rows4(a + i0 * k, k, int64_t{1}, b, n, k, n, c + i0 * n, n);
  for (; i0 < m; ++i0) detail::row_times_panel(a + i0 * k, int64_t{1}, b, k, n, c + i0 * n);
}

// C[M,N] += A[M,K] @ B[N,K]^T  (dot products along K, fixed summation tree).
// Only the small batched attention matrices go through this form.
template <class S>
void gemm_nt(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  constexpr int64_t kLanes = 8;
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S lanes[kLanes] = {};
      int64_t p = 0;
      for (; p + kLanes <= k; p += kLanes)
        for (int64_t l = 0; l < kLanes; ++l) lanes[l] += arow[p + l] * brow[p + l];
      S acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
              ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
      for (; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T @ B[M,N]. The reduction runs over M, so M is chunked to
// keep the streamed A/B rows cache-resident while C (small: K x N) is revisited
// once per chunk. Each C element still accumulates in ascending-m order.
template <class S>
void gemm_tn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  constexpr int64_t kChunk = 512;
  for (int64_t p0 = 0; p0 < m; p0 += kChunk) {
    const int64_t steps = std::min(m, p0 + kChunk) - p0;
    const S* achunk = a + p0 * k;
    const S* bchunk = b + p0 * n;
    int64_t k0 = 0;
    for (; k0 + 4 <= k; k0 += 4)
      detail::gemm_rows4(achunk + k0, int64_t{1}, k, bchunk, n, steps, n, c + k0 * n, n);
    for (; k0 < k; ++k0) detail::row_times_panel(achunk + k0, k, bchunk, steps, n, c + k0 * n);
  }
}

// dst[N,M] = src[M,N]
template <class S>
void transpose_2d(const S* src, S* dst, int64_t m, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
}

// ---------------------------------------------------------------------------
// Primitive forwards.

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool suffix = sb.size() <= sa.size() &&
                std::equal(sb.begin(), sb.end(), sa.end() - static_cast<int64_t>(sb.size()));
  if (!suffix)
    fail_op("add", "shape " + shape_str(sb) + " does not broadcast onto " + shape_str(sa));
  auto out = make_op_node<S>(Op::Add, sa, {a, b});
  const int64_t n = a.numel(), nb = b.numel();
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % nb];
  return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    fail_op("mul", "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = make_op_node<S>(Op::Mul, a.shape(), {a, b});
  const int64_t n = a.numel();
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, double factor) {
  auto out = make_op_node<S>(Op::Scale, a.shape(), {a});
  out.node()->f0 = factor;
  const int64_t n = a.numel();
  const S* pa = a.data().data();
  S* po = out.data().data();
  const S f = static_cast<S>(factor);
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * f;
  return out;
}

// a: [..., M, K]; b either 2-D weight [K, N] ([N, K] when transpose_b) shared
// across leading dims, or batched with the same leading dims as a.
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, bool transpose_b = false) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    fail_op("matmul", "inputs must be at least 2-D, got " + shape_str(sa) + " and " + shape_str(sb));
  const int64_t ka = sa[sa.size() - 1];
  const int64_t kb = transpose_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
  const int64_t nb = transpose_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
  if (ka != kb)
    fail_op("matmul", "inner dimensions differ: " + shape_str(sa) + " vs " + shape_str(sb) +
                          (transpose_b ? " (b transposed)" : ""));
  const bool batched = sb.size() > 2;
  if (batched && !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2))
    fail_op("matmul", "batch dimensions differ: " + shape_str(sa) + " vs " + shape_str(sb));

  Shape so(sa);
  so[so.size() - 1] = nb;
  auto out = make_op_node<S>(Op::Matmul, so, {a, b});
  out.node()->i0 = transpose_b ? 1 : 0;

  const int64_t m = sa[sa.size() - 2];
  const int64_t batch = a.numel() / (m * ka);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.data().data();
  std::fill(out.data().begin(), out.data().end(), S(0));
  if (!batched) {
    // One flat GEMM over all leading dims. A transposed shared weight is
    // small; materializing it keeps the product on the fast NN path.
    if (transpose_b) {
      Vec<S> bt(static_cast<size_t>(ka * nb));
      transpose_2d(pb, bt.data(), nb, ka);
      gemm_nn(pa, bt.data(), po, batch * m, ka, nb);
    } else {
      gemm_nn(pa, pb, po, batch * m, ka, nb);
    }
  } else {
    for (int64_t g = 0; g < batch; ++g) {
      const S* ag = pa + g * m * ka;
      const S* bg = pb + g * ka * nb;
      S* og = po + g * m * nb;
      if (transpose_b)
        gemm_nt(ag, bg, og, m, ka, nb);
      else
        gemm_nn(ag, bg, og, m, ka, nb);
    }
  }
  return out;
}

template <class S>
TensorT<S> embedding_gather(const TensorT<S>& table, const IntTensor& ids) {
  const Shape& st = table.shape();
  if (st.size() != 2) fail_op("embedding_gather", "table must be 2-D, got " + shape_str(st));
  const int64_t v = st[0], e = st[1];
  Shape so = ids.shape;
  so.push_back(e);
  auto out = make_op_node<S>(Op::EmbeddingGather, so, {table});
  out.node()->ids = ids.data;
  const S* pt = table.data().data();
  S* po = out.data().data();
  for (int64_t i = 0; i < ids.numel(); ++i) {
    const int32_t id = ids.data[static_cast<size_t>(i)];
    if (id < 0 || id >= v)
      fail_op("embedding_gather",
              "id " + std::to_string(id) + " out of range for table " + shape_str(st));
    std::copy(pt + id * e, pt + (id + 1) * e, po + i * e);
  }
  return out;
}

// Normalizes the last dimension to zero mean / unit variance, then applies a
// per-channel gain. No bias (the models here run bias-free norms).
template <class S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gain, double eps = 1e-5) {
  const Shape& sx = x.shape();
  if (sx.empty()) fail_op("layernorm", "input must have at least 1 dim");
  const int64_t c = sx.back();
  if (gain.shape() != Shape{c})
    fail_op("layernorm", "gain shape " + shape_str(gain.shape()) + " does not match channels " +
                             std::to_string(c) + " of " + shape_str(sx));
  auto out = make_op_node<S>(Op::LayerNorm, sx, {x, gain});
  out.node()->f0 = eps;
  const int64_t rows = x.numel() / c;
  out.node()->aux.resize(static_cast<size_t>(2 * rows));
  const S* px = x.data().data();
  const S* pg = gain.data().data();
  S* po = out.data().data();
  S* paux = out.node()->aux.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * c;
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + eps);
    paux[r] = static_cast<S>(mean);
    paux[rows + r] = static_cast<S>(rstd);
    S* orow = po + r * c;
    for (int64_t j = 0; j < c; ++j)
      orow[j] = static_cast<S>((row[j] - mean) * rstd) * pg[j];
  }
  return out;
}

// Exact Gaussian-CDF GELU. The CDF is cached for the backward pass.
template <class S>
TensorT<S> gelu(const TensorT<S>& x) {
  auto out = make_op_node<S>(Op::Gelu, x.shape(), {x});
  const int64_t n = x.numel();
  const S* px = x.data().data();
  S* po = out.data().data();
  const bool record = out.node()->op == Op::Gelu;
  if (record) out.node()->aux.resize(static_cast<size_t>(n));
  S* pc = record ? out.node()->aux.data() : nullptr;
  constexpr S kInvSqrt2 = static_cast<S>(0.70710678118654752440);
  for (int64_t i = 0; i < n; ++i) {
    const S v = px[i];
    const S cdf = S(0.5) * (S(1) + std::erf(v * kInvSqrt2));
    if (pc) pc[i] = cdf;
    po[i] = v * cdf;
  }
  return out;
}

template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
  const Shape& sx = x.shape();
  if (sx.empty()) fail_op("softmax_lastdim", "input must have at least 1 dim");
  const int64_t c = sx.back();
  auto out = make_op_node<S>(Op::SoftmaxLastDim, sx, {x});
  const int64_t rows = x.numel() / c;
  const S* px = x.data().data();
  S* po = out.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * c;
    S* orow = po + r * c;
    S m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const S e = std::exp(row[j] - m);
      orow[j] = e;
      sum += e;
    }
    const S inv = static_cast<S>(1.0 / sum);
    for (int64_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  return out;
}

// Sets strictly-upper-triangular entries of the trailing [T, T] square to the
// most negative finite value, so downstream softmax assigns them weight 0
// without producing inf - inf in the backward pass.
template <class S>
TensorT<S> causal_mask_fill(const TensorT<S>& x) {
  const Shape& sx = x.shape();
  if (sx.size() < 2 || sx[sx.size() - 1] != sx[sx.size() - 2])
    fail_op("causal_mask_fill", "trailing dims must form a square, got " + shape_str(sx));
  const int64_t t = sx.back();
  auto out = make_op_node<S>(Op::CausalMaskFill, sx, {x});
  const int64_t mats = x.numel() / (t * t);
  const S* px = x.data().data();
  S* po = out.data().data();
  const S neg = std::numeric_limits<S>::lowest();
  for (int64_t g = 0; g < mats; ++g) {
    const S* xm = px + g * t * t;
    S* om = po + g * t * t;
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < t; ++j) om[i * t + j] = (j > i) ? neg : xm[i * t + j];
  }
  return out;
}

// Inverted dropout: kept activations are scaled by 1/(1-rate) at train time,
// so evaluation is a plain identity. rate 0 or eval mode returns the input
// tensor unchanged (bit-identical).
template <class S>
TensorT<S> dropout(const TensorT<S>& x, double rate, bool training, RngStream* stream) {
  if (rate < 0.0 || rate >= 1.0) fail_op("dropout", "rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  if (stream == nullptr) fail_op("dropout", "training-mode dropout needs an rng stream");
  auto out = make_op_node<S>(Op::Dropout, x.shape(), {x});
  out.node()->f0 = rate;
  const int64_t n = x.numel();
  out.node()->aux.resize(static_cast<size_t>(n));
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  const S* px = x.data().data();
  S* po = out.data().data();
  S* pm = out.node()->aux.data();
  for (int64_t i = 0; i < n; ++i) {
    const S m = (stream->next_double() < rate) ? S(0) : keep_scale;
    pm[i] = m;
    po[i] = px[i] * m;
  }
  return out;
}

// x: [B, T, sections*C] -> [B, n_head, T, C/n_head], selecting one section.
// With sections == 3 this splits a fused qkv projection into heads.
template <class S>
TensorT<S> reshape_split_heads(const TensorT<S>& x, int64_t n_head, int64_t section,
                               int64_t sections = 3) {
  const Shape& sx = x.shape();
  if (sx.size() != 3) fail_op("reshape_split_heads", "input must be 3-D, got " + shape_str(sx));
  if (section < 0 || section >= sections)
    fail_op("reshape_split_heads", "section " + std::to_string(section) + " out of range");
  if (sx[2] % sections != 0 || (sx[2] / sections) % n_head != 0)
    fail_op("reshape_split_heads", "last dim of " + shape_str(sx) + " not divisible into " +
                                       std::to_string(sections) + " sections of " +
                                       std::to_string(n_head) + " heads");
  const int64_t b = sx[0], t = sx[1], c = sx[2] / sections, hd = c / n_head;
  auto out = make_op_node<S>(Op::SplitHeads, Shape{b, n_head, t, hd}, {x});
  out.node()->i0 = n_head;
  out.node()->i1 = section;
  const S* px = x.data().data();
  S* po = out.data().data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t h = 0; h < n_head; ++h)
      for (int64_t ti = 0; ti < t; ++ti) {
        const S* src = px + (bi * t + ti) * sections * c + section * c + h * hd;
        S* dst = po + ((bi * n_head + h) * t + ti) * hd;
        std::copy(src, src + hd, dst);
      }
  return out;
}

// [B, H, T, D] -> [B, T, H*D]
template <class S>
TensorT<S> merge_heads(const TensorT<S>& x) {
  const Shape& sx = x.shape();
  if (sx.size() != 4) fail_op("merge_heads", "input must be 4-D, got " + shape_str(sx));
  const int64_t b = sx[0], h = sx[1], t = sx[2], d = sx[3];
  auto out = make_op_node<S>(Op::MergeHeads, Shape{b, t, h * d}, {x});
  const S* px = x.data().data();
  S* po = out.data().data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t hi = 0; hi < h; ++hi)
      for (int64_t ti = 0; ti < t; ++ti) {
        const S* src = px + ((bi * h + hi) * t + ti) * d;
        S* dst = po + (bi * t + ti) * h * d + hi * d;
        std::copy(src, src + d, dst);
      }
  return out;
}

// Mean token-level cross-entropy. logits: [..., V], targets: matching leading
// shape. Stable log-sum-exp; per-position probabilities are cached for the
// backward pass.
template <class S>
TensorT<S> cross_entropy_from_logits(const TensorT<S>& logits, const IntTensor& targets) {
  const Shape& sl = logits.shape();
  if (sl.empty()) fail_op("cross_entropy_from_logits", "logits must have at least 1 dim");
  const int64_t v = sl.back();
  Shape lead(sl.begin(), sl.end() - 1);
  if (targets.shape != lead)
    fail_op("cross_entropy_from_logits", "targets " + shape_str(targets.shape) +
                                             " do not match logits " + shape_str(sl));
  const int64_t rows = logits.numel() / v;
  auto out = make_op_node<S>(Op::CrossEntropy, Shape{}, {logits});
  out.node()->ids = targets.data;
  out.node()->aux.resize(static_cast<size_t>(rows * v));
  const S* pl = logits.data().data();
  S* probs = out.node()->aux.data();
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const int32_t tgt = targets.data[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= v)
      fail_op("cross_entropy_from_logits",
              "target id " + std::to_string(tgt) + " out of range for vocab " + std::to_string(v));
    const S* row = pl + r * v;
    S m = row[0];
    for (int64_t j = 1; j < v; ++j) m = std::max(m, row[j]);
    S* prow = probs + r * v;
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      const S e = std::exp(row[j] - m);
      prow[j] = e;
      sum += e;
    }
    const double logsum = std::log(sum) + static_cast<double>(m);
    total += logsum - static_cast<double>(row[tgt]);
    const S inv = static_cast<S>(1.0 / sum);
    for (int64_t j = 0; j < v; ++j) prow[j] *= inv;
  }
  out.data()[0] = static_cast<S>(total / static_cast<double>(rows));
  return out;
}

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  auto out = make_op_node<S>(Op::Sum, Shape{}, {x});
  double total = 0.0;
  for (S v : x.data()) total += v;
  out.data()[0] = static_cast<S>(total);
  return out;
}

// ---------------------------------------------------------------------------
// Reverse pass.

namespace detail {

template <class S>
void backward_step(NodeT<S>* n) {
  const Vec<S>& g = n->grad;
  switch (n->op) {
    case Op::Add: {
      auto& a = n->inputs[0];
      auto& b = n->inputs[1];
      const int64_t nn = n->numel(), nb = b.numel();
      if (a.node()->requires_grad) {
        S* ga = a.grad().data();
        for (int64_t i = 0; i < nn; ++i) ga[i] += g[i];
      }
      if (b.node()->requires_grad) {
        S* gb = b.grad().data();
        for (int64_t i = 0; i < nn; ++i) gb[i % nb] += g[i];
      }
      break;
    }
    case Op::Mul: {
      auto& a = n->inputs[0];
      auto& b = n->inputs[1];
      const int64_t nn = n->numel();
      if (a.node()->requires_grad) {
        S* ga = a.grad().data();
        const S* pb = b.data().data();
        for (int64_t i = 0; i < nn; ++i) ga[i] += g[i] * pb[i];
      }
      if (b.node()->requires_grad) {
        S* gb = b.grad().data();
        const S* pa = a.data().data();
        for (int64_t i = 0; i < nn; ++i) gb[i] += g[i] * pa[i];
      }
      break;
    }
    case Op::Scale: {
      auto& a = n->inputs[0];
      if (!a.node()->requires_grad) break;
      const S f = static_cast<S>(n->f0);
      S* ga = a.grad().data();
      for (int64_t i = 0; i < n->numel(); ++i) ga[i] += g[i] * f;
      break;
    }
    case Op::Matmul: {
      auto& a = n->inputs[0];
      auto& b = n->inputs[1];
      const bool tb = n->i0 != 0;
      const Shape& sa = a.shape();
      const Shape& sb = b.shape();
      const int64_t k = sa[sa.size() - 1];
      const int64_t m = sa[sa.size() - 2];
      const int64_t nout = n->shape[n->shape.size() - 1];
      const int64_t batch = a.numel() / (m * k);
      const bool batched = sb.size() > 2;
      const S* pa = a.data().data();
      const S* pb = b.data().data();
      const S* pg = g.data();
      if (!batched) {
        const int64_t rows = batch * m;
        if (a.node()->requires_grad) {
          S* ga = a.grad().data();
          if (tb) {
            // dA = G @ B, B stored [N, K]
            gemm_nn(pg, pb, ga, rows, nout, k);
          } else {
            // dA = G @ B^T, B stored [K, N]; transpose the weight once.
            Vec<S> bt(static_cast<size_t>(k * nout));
            transpose_2d(pb, bt.data(), k, nout);
            gemm_nn(pg, bt.data(), ga, rows, nout, k);
          }
        }
        if (b.node()->requires_grad) {
          S* gb = b.grad().data();
          if (tb) {
            // dB[n,k] = sum_r G[r,n] A[r,k]
            gemm_tn(pg, pa, gb, rows, nout, k);
          } else {
            // dB[k,n] = sum_r A[r,k] G[r,n]
            gemm_tn(pa, pg, gb, rows, k, nout);
          }
        }
      } else {
        for (int64_t gi = 0; gi < batch; ++gi) {
          const S* ag = pa + gi * m * k;
          const S* bg = pb + gi * k * nout;
          const S* gg = pg + gi * m * nout;
          if (a.node()->requires_grad) {
            S* ga = a.grad().data() + gi * m * k;
            if (tb)
              gemm_nn(gg, bg, ga, m, nout, k);
            else
              gemm_nt(gg, bg, ga, m, nout, k);
          }
          if (b.node()->requires_grad) {
            S* gb = b.grad().data() + gi * k * nout;
            if (tb)
              gemm_tn(gg, ag, gb, m, nout, k);
            else
              gemm_tn(ag, gg, gb, m, k, nout);
          }
        }
      }
      break;
    }
    case Op::EmbeddingGather: {
      auto& table = n->inputs[0];
      if (!table.node()->requires_grad) break;
      const int64_t e = table.shape()[1];
      S* gt = table.grad().data();
      const S* pg = g.data();
      for (size_t i = 0; i < n->ids.size(); ++i) {
        const S* src = pg + static_cast<int64_t>(i) * e;
        S* dst = gt + n->ids[i] * e;
        for (int64_t j = 0; j < e; ++j) dst[j] += src[j];
      }
      break;
    }
    case Op::LayerNorm: {
      auto& x = n->inputs[0];
      auto& gain = n->inputs[1];
      const int64_t c = x.shape().back();
      const int64_t rows = x.numel() / c;
      const S* px = x.data().data();
      const S* pgain = gain.data().data();
      const S* paux = n->aux.data();
      const S* pg = g.data();
      S* gx = x.node()->requires_grad ? x.grad().data() : nullptr;
      S* ggain = gain.node()->requires_grad ? gain.grad().data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const double mean = paux[r];
        const double rstd = paux[rows + r];
        const S* xrow = px + r * c;
        const S* grow = pg + r * c;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          const double xh = (xrow[j] - mean) * rstd;
          const double gg = static_cast<double>(grow[j]) * pgain[j];
          s1 += gg;
          s2 += gg * xh;
          if (ggain) ggain[j] += static_cast<S>(grow[j] * xh);
        }
        if (gx) {
          s1 /= static_cast<double>(c);
          s2 /= static_cast<double>(c);
          S* gxrow = gx + r * c;
          for (int64_t j = 0; j < c; ++j) {
            const double xh = (xrow[j] - mean) * rstd;
            const double gg = static_cast<double>(grow[j]) * pgain[j];
            gxrow[j] += static_cast<S>((gg - s1 - xh * s2) * rstd);
          }
        }
      }
      break;
    }
    case Op::Gelu: {
      auto& x = n->inputs[0];
      if (!x.node()->requires_grad) break;
      const S* px = x.data().data();
      const S* pc = n->aux.data();
      S* gx = x.grad().data();
      constexpr S kInvSqrt2Pi = static_cast<S>(0.39894228040143267794);
      for (int64_t i = 0; i < n->numel(); ++i) {
        const S v = px[i];
        const S pdf = std::exp(S(-0.5) * v * v) * kInvSqrt2Pi;
        gx[i] += g[i] * (pc[i] + v * pdf);
      }
      break;
    }
    case Op::SoftmaxLastDim: {
      auto& x = n->inputs[0];
      if (!x.node()->requires_grad) break;
      const int64_t c = n->shape.back();
      const int64_t rows = n->numel() / c;
      const S* py = n->data.data();
      const S* pg = g.data();
      S* gx = x.grad().data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* y = py + r * c;
        const S* gr = pg + r * c;
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) dot += static_cast<double>(gr[j]) * y[j];
        S* gxr = gx + r * c;
        for (int64_t j = 0; j < c; ++j)
          gxr[j] += static_cast<S>((gr[j] - dot) * y[j]);
      }
      break;
    }
    case Op::CausalMaskFill: {
      auto& x = n->inputs[0];
      if (!x.node()->requires_grad) break;
      const int64_t t = n->shape.back();
      const int64_t mats = n->numel() / (t * t);
      S* gx = x.grad().data();
      const S* pg = g.data();
      for (int64_t gi = 0; gi < mats; ++gi)
        for (int64_t i = 0; i < t; ++i)
          for (int64_t j = 0; j <= i; ++j)
            gx[gi * t * t + i * t + j] += pg[gi * t * t + i * t + j];
      break;
    }
    case Op::Dropout: {
      auto& x = n->inputs[0];
      if (!x.node()->requires_grad) break;
      S* gx = x.grad().data();
      const S* pm = n->aux.data();
      for (int64_t i = 0; i < n->numel(); ++i) gx[i] += g[i] * pm[i];
      break;
    }
    case Op::SplitHeads: {
      auto& x = n->inputs[0];
      if (!x.node()->requires_grad) break;
      const int64_t b = n->shape[0], h = n->shape[1], t = n->shape[2], hd = n->shape[3];
      const int64_t c = h * hd;
      const int64_t sections = x.shape()[2] / c;
      const int64_t section = n->i1;
      S* gx = x.grad().data();
      const S* pg = g.data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
          for (int64_t ti = 0; ti < t; ++ti) {
            const S* src = pg + ((bi * h + hi) * t + ti) * hd;
            S* dst = gx + (bi * t + ti) * sections * c + section * c + hi * hd;
            for (int64_t j = 0; j < hd; ++j) dst[j] += src[j];
          }
      break;
    }
    case Op::MergeHeads: {
      auto& x = n->inputs[0];
      if (!x.node()->requires_grad) break;
      const Shape& sx = x.shape();
      const int64_t b = sx[0], h = sx[1], t = sx[2], d = sx[3];
      S* gx = x.grad().data();
      const S* pg = g.data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
          for (int64_t ti = 0; ti < t; ++ti) {
            const S* src = pg + (bi * t + ti) * h * d + hi * d;
            S* dst = gx + ((bi * h + hi) * t + ti) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
          }
      break;
    }
    case Op::CrossEntropy: {
      auto& logits = n->inputs[0];
      if (!logits.node()->requires_grad) break;
      const int64_t v = logits.shape().back();
      const int64_t rows = logits.numel() / v;
      const S gscale = g[0] / static_cast<S>(rows);
      const S* probs = n->aux.data();
      S* gl = logits.grad().data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* prow = probs + r * v;
        S* grow = gl + r * v;
        for (int64_t j = 0; j < v; ++j) grow[j] += gscale * prow[j];
        grow[n->ids[static_cast<size_t>(r)]] -= gscale;
      }
      break;
    }
    case Op::Sum: {
      auto& x = n->inputs[0];
      if (!x.node()->requires_grad) break;
      S* gx = x.grad().data();
      const S gv = g[0];
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += gv;
      break;
    }
    case Op::None:
      break;
  }
}

}  // namespace detail

// Reverse-topological gradient accumulation from a scalar loss. Grads add up
// across repeated calls; callers zero parameter grads between steps.
template <class S>
void backward(const TensorT<S>& loss) {
  if (loss.numel() != 1)
    throw TensorError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

  // Iterative post-order DFS.
  std::vector<NodeT<S>*> order;
  std::unordered_set<NodeT<S>*> visited;
  std::vector<std::pair<NodeT<S>*, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      NodeT<S>* child = node->inputs[idx].node();
      ++idx;
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<S>* n = *it;
    if (n->op == Op::None || !n->requires_grad) continue;
    n->ensure_grad();
    for (auto& in : n->inputs)
      if (in.node()->requires_grad) in.node()->ensure_grad();
    detail::backward_step(n);
  }
}

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace capmem
