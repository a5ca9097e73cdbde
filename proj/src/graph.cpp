#include "metabridge/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace metabridge::diff {

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t ra = a.size();
  const size_t rb = b.size();
  const size_t r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = (i < r - ra) ? 1 : a[i - (r - ra)];
    const int64_t db = (i < r - rb) ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " and " +
                                  shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Element strides for indexing `from` along each axis of the broadcast
/// target `to`; broadcast axes get stride 0.
std::vector<int64_t> broadcast_strides(const Shape& from, const Shape& to) {
  std::vector<int64_t> strides(to.size(), 0);
  int64_t s = 1;
  for (size_t i = 0; i < from.size(); ++i) {
    const size_t fi = from.size() - 1 - i;
    const size_t ti = to.size() - 1 - i;
    strides[ti] = (from[fi] == 1 && to[ti] != 1) ? 0 : s;
    s *= from[fi];
  }
  return strides;
}

template <class F>
Tensor elementwise2(const Tensor& a, const Tensor& b, F f) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  const Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  const auto sa = broadcast_strides(a.shape(), os);
  const auto sb = broadcast_strides(b.shape(), os);
  const size_t r = os.size();
  std::vector<int64_t> idx(r, 0);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t oa = 0;
  int64_t ob = 0;
  for (int64_t lin = 0; lin < out.size(); ++lin) {
    po[lin] = f(pa[oa], pb[ob]);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < os[d]) break;
      idx[d] = 0;
      oa -= sa[d] * os[d];
      ob -= sb[d] * os[d];
    }
  }
  return out;
}

template <class F>
Tensor elementwise1(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = f(pa[i]);
  return out;
}

/// C += A * B for row-major (m,k) x (k,n); C must be zero-initialized by the caller.
void matmul_accum(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* Ai = A + i * k;
    double* Ci = C + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aip = Ai[p];
      const double* Bp = B + p * n;
      for (int64_t j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
    }
  }
}

Shape drop_trailing(const Shape& s, size_t count) {
  return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(count));
}

}  // namespace

void Graph::check(ValueId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
    throw std::invalid_argument("graph: value id " + std::to_string(id) + " out of range");
  }
}

ValueId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

ValueId Graph::leaf(Tensor v) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(v);
  return push(std::move(n));
}

ValueId Graph::constant(Tensor v) {
  Node n;
  n.op = Op::kConst;
  n.value = std::move(v);
  return push(std::move(n));
}

ValueId Graph::matmul(ValueId a, ValueId b) {
  check(a);
  check(b);
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  Tensor out;
  if (tb.rank() == 2 && ta.rank() >= 2) {
    // (..., k) x (k, n) -> (..., n)
    const int64_t k = ta.dim(ta.rank() - 1);
    if (k != tb.dim(0)) {
      throw std::invalid_argument("matmul: incompatible shapes " + shape_str(ta.shape()) + " x " +
                                  shape_str(tb.shape()));
    }
    const int64_t n = tb.dim(1);
    const int64_t m = ta.size() / k;
    Shape os = ta.shape();
    os.back() = n;
    out = Tensor::zeros(os);
    matmul_accum(ta.data(), tb.data(), out.data(), m, k, n);
  } else if (ta.rank() == tb.rank() && ta.rank() >= 3) {
    // (..., m, k) x (..., k, n) -> (..., m, n), identical leading dims
    const size_t r = ta.rank();
    const int64_t m = ta.dim(r - 2);
    const int64_t k = ta.dim(r - 1);
    const int64_t n = tb.dim(r - 1);
    bool lead_ok = k == tb.dim(r - 2);
    for (size_t i = 0; i + 2 < r && lead_ok; ++i) lead_ok = ta.dim(i) == tb.dim(i);
    if (!lead_ok) {
      throw std::invalid_argument("matmul: incompatible shapes " + shape_str(ta.shape()) + " x " +
                                  shape_str(tb.shape()));
    }
    Shape os = ta.shape();
    os[r - 2] = m;
    os[r - 1] = n;
    out = Tensor::zeros(os);
    const int64_t batches = ta.size() / (m * k);
    for (int64_t idx = 0; idx < batches; ++idx) {
      matmul_accum(ta.data() + idx * m * k, tb.data() + idx * k * n, out.data() + idx * m * n, m,
                   k, n);
    }
  } else {
    throw std::invalid_argument("matmul: unsupported ranks " + shape_str(ta.shape()) + " x " +
                                shape_str(tb.shape()));
  }
  Node n;
  n.op = Op::kMatMul;
  n.a = a;
  n.b = b;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::add(ValueId a, ValueId b) {
  check(a);
  check(b);
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.value = elementwise2(val(a), val(b), [](double x, double y) { return x + y; });
  return push(std::move(n));
}

ValueId Graph::sub(ValueId a, ValueId b) {
  check(a);
  check(b);
  Node n;
  n.op = Op::kSub;
  n.a = a;
  n.b = b;
  n.value = elementwise2(val(a), val(b), [](double x, double y) { return x - y; });
  return push(std::move(n));
}

ValueId Graph::mul(ValueId a, ValueId b) {
  check(a);
  check(b);
  Node n;
  n.op = Op::kMul;
  n.a = a;
  n.b = b;
  n.value = elementwise2(val(a), val(b), [](double x, double y) { return x * y; });
  return push(std::move(n));
}

ValueId Graph::scale(ValueId a, double c) {
  check(a);
  Node n;
  n.op = Op::kScale;
  n.a = a;
  n.c0 = c;
  n.value = elementwise1(val(a), [c](double x) { return c * x; });
  return push(std::move(n));
}

ValueId Graph::add_scalar(ValueId a, double c) {
  check(a);
  Node n;
  n.op = Op::kAddScalar;
  n.a = a;
  n.c0 = c;
  n.value = elementwise1(val(a), [c](double x) { return x + c; });
  return push(std::move(n));
}

ValueId Graph::exp(ValueId a) {
  check(a);
  Node n;
  n.op = Op::kExp;
  n.a = a;
  n.value = elementwise1(val(a), [](double x) { return std::exp(x); });
  return push(std::move(n));
}

ValueId Graph::log(ValueId a) {
  check(a);
  Node n;
  n.op = Op::kLog;
  n.a = a;
  n.value = elementwise1(val(a), [](double x) { return std::log(x); });
  return push(std::move(n));
}

ValueId Graph::recip(ValueId a) {
  check(a);
  Node n;
  n.op = Op::kRecip;
  n.a = a;
  n.value = elementwise1(val(a), [](double x) { return 1.0 / x; });
  return push(std::move(n));
}

ValueId Graph::sqrt(ValueId a) {
  check(a);
  Node n;
  n.op = Op::kSqrt;
  n.a = a;
  n.value = elementwise1(val(a), [](double x) { return std::sqrt(x); });
  return push(std::move(n));
}

ValueId Graph::clamp_min(ValueId a, double lo) {
  check(a);
  Node n;
  n.op = Op::kClampMin;
  n.a = a;
  n.c0 = lo;
  n.value = elementwise1(val(a), [lo](double x) { return x < lo ? lo : x; });
  return push(std::move(n));
}

ValueId Graph::clamp(ValueId a, double lo, double hi) {
  check(a);
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  Node n;
  n.op = Op::kClamp;
  n.a = a;
  n.c0 = lo;
  n.c1 = hi;
  n.value = elementwise1(val(a), [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); });
  return push(std::move(n));
}

ValueId Graph::softmax_last(ValueId a) {
  check(a);
  const Tensor& ta = val(a);
  if (ta.rank() == 0) throw std::invalid_argument("softmax_last: rank-0 operand");
  const int64_t cols = ta.dim(ta.rank() - 1);
  const int64_t rows = ta.size() / cols;
  Tensor out(ta.shape());
  const double* pa = ta.data();
  double* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = pa + r * cols;
    double* y = po + r * cols;
    double m = x[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
  }
  Node n;
  n.op = Op::kSoftmaxLast;
  n.a = a;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::sum_to(ValueId a, Shape target) {
  check(a);
  const Tensor& ta = val(a);
  if (broadcast_shape(target, ta.shape()) != ta.shape()) {
    throw std::invalid_argument("sum_to: target " + shape_str(target) +
                                " does not broadcast to " + shape_str(ta.shape()));
  }
  if (target == ta.shape()) {
    // Reduction is the identity; still record the node to keep the tape uniform.
  }
  Tensor out = Tensor::zeros(target);
  const auto st = broadcast_strides(target, ta.shape());
  const size_t r = ta.rank();
  std::vector<int64_t> idx(r, 0);
  const double* pa = ta.data();
  double* po = out.data();
  int64_t ot = 0;
  for (int64_t lin = 0; lin < ta.size(); ++lin) {
    po[ot] += pa[lin];
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      ot += st[d];
      if (idx[d] < ta.dim(d)) break;
      idx[d] = 0;
      ot -= st[d] * ta.dim(d);
    }
  }
  Node n;
  n.op = Op::kSumTo;
  n.a = a;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::broadcast_to(ValueId a, Shape target) {
  check(a);
  const Tensor& ta = val(a);
  if (broadcast_shape(ta.shape(), target) != target) {
    throw std::invalid_argument("broadcast_to: cannot broadcast " + shape_str(ta.shape()) +
                                " to " + shape_str(target));
  }
  Tensor out(target);
  const auto sa = broadcast_strides(ta.shape(), target);
  const size_t r = target.size();
  std::vector<int64_t> idx(r, 0);
  const double* pa = ta.data();
  double* po = out.data();
  int64_t oa = 0;
  for (int64_t lin = 0; lin < out.size(); ++lin) {
    po[lin] = pa[oa];
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      if (idx[d] < target[d]) break;
      idx[d] = 0;
      oa -= sa[d] * target[d];
    }
  }
  Node n;
  n.op = Op::kBroadcastTo;
  n.a = a;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::mean_all(ValueId a) {
  check(a);
  const int64_t count = val(a).size();
  return scale(sum_all(a), 1.0 / static_cast<double>(count));
}

ValueId Graph::concat(ValueId a, ValueId b, int64_t axis) {
  check(a);
  check(b);
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != tb.rank() || axis < 0 || axis >= ta.rank()) {
    throw std::invalid_argument("concat: bad axis or rank mismatch");
  }
  for (int64_t i = 0; i < ta.rank(); ++i) {
    if (i != axis && ta.dim(i) != tb.dim(i)) {
      throw std::invalid_argument("concat: shapes " + shape_str(ta.shape()) + " and " +
                                  shape_str(tb.shape()) + " differ off axis " +
                                  std::to_string(axis));
    }
  }
  Shape os = ta.shape();
  os[static_cast<size_t>(axis)] += tb.dim(static_cast<size_t>(axis));
  Tensor out(os);
  int64_t inner = 1;
  for (int64_t i = axis + 1; i < ta.rank(); ++i) inner *= ta.dim(i);
  const int64_t block_a = ta.dim(static_cast<size_t>(axis)) * inner;
  const int64_t block_b = tb.dim(static_cast<size_t>(axis)) * inner;
  const int64_t outer = ta.size() / block_a;
  const double* pa = ta.data();
  const double* pb = tb.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(pa + o * block_a, block_a, po);
    po += block_a;
    std::copy_n(pb + o * block_b, block_b, po);
    po += block_b;
  }
  Node n;
  n.op = Op::kConcat;
  n.a = a;
  n.b = b;
  n.i0 = axis;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::slice_axis(ValueId a, int64_t axis, int64_t start, int64_t len) {
  check(a);
  const Tensor& ta = val(a);
  if (axis < 0 || axis >= ta.rank() || start < 0 || len <= 0 ||
      start + len > ta.dim(static_cast<size_t>(axis))) {
    throw std::invalid_argument("slice_axis: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") invalid for axis " +
                                std::to_string(axis) + " of " + shape_str(ta.shape()));
  }
  Shape os = ta.shape();
  os[static_cast<size_t>(axis)] = len;
  Tensor out(os);
  int64_t inner = 1;
  for (int64_t i = axis + 1; i < ta.rank(); ++i) inner *= ta.dim(i);
  const int64_t src_block = ta.dim(static_cast<size_t>(axis)) * inner;
  const int64_t dst_block = len * inner;
  const int64_t outer = ta.size() / src_block;
  const double* pa = ta.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(pa + o * src_block + start * inner, dst_block, po + o * dst_block);
  }
  Node n;
  n.op = Op::kSliceAxis;
  n.a = a;
  n.i0 = axis;
  n.i1 = start;
  n.i2 = len;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::pad_axis(ValueId a, int64_t axis, int64_t start, int64_t total) {
  check(a);
  const Tensor& ta = val(a);
  if (axis < 0 || axis >= ta.rank() || start < 0 ||
      start + ta.dim(static_cast<size_t>(axis)) > total) {
    throw std::invalid_argument("pad_axis: placement invalid for axis " + std::to_string(axis) +
                                " of " + shape_str(ta.shape()));
  }
  Shape os = ta.shape();
  os[static_cast<size_t>(axis)] = total;
  Tensor out = Tensor::zeros(os);
  int64_t inner = 1;
  for (int64_t i = axis + 1; i < ta.rank(); ++i) inner *= ta.dim(i);
  const int64_t src_block = ta.dim(static_cast<size_t>(axis)) * inner;
  const int64_t dst_block = total * inner;
  const int64_t outer = ta.size() / src_block;
  const double* pa = ta.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(pa + o * src_block, src_block, po + o * dst_block + start * inner);
  }
  Node n;
  n.op = Op::kPadAxis;
  n.a = a;
  n.i0 = axis;
  n.i1 = start;
  n.i2 = ta.dim(static_cast<size_t>(axis));
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::gather_rows(ValueId table, std::shared_ptr<const std::vector<int32_t>> ids,
                           Shape id_shape) {
  check(table);
  const Tensor& tt = val(table);
  if (tt.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2");
  if (!ids || static_cast<int64_t>(ids->size()) != shape_size(id_shape)) {
    throw std::invalid_argument("gather_rows: id count does not match id shape");
  }
  const int64_t rows = tt.dim(0);
  const int64_t d = tt.dim(1);
  Shape os = id_shape;
  os.push_back(d);
  Tensor out(os);
  const double* pt = tt.data();
  double* po = out.data();
  for (size_t i = 0; i < ids->size(); ++i) {
    const int32_t id = (*ids)[i];
    if (id < 0 || id >= rows) {
      throw std::invalid_argument("gather_rows: id " + std::to_string(id) + " out of range [0, " +
                                  std::to_string(rows) + ")");
    }
    std::copy_n(pt + static_cast<int64_t>(id) * d, d, po + static_cast<int64_t>(i) * d);
  }
  Node n;
  n.op = Op::kGatherRows;
  n.a = table;
  n.i2 = rows;
  n.ids = std::move(ids);
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::scatter_rows(ValueId src, std::shared_ptr<const std::vector<int32_t>> ids,
                            int64_t rows) {
  check(src);
  const Tensor& ts = val(src);
  if (ts.rank() < 2) throw std::invalid_argument("scatter_rows: source must have rank >= 2");
  const int64_t d = ts.dim(ts.rank() - 1);
  const int64_t count = ts.size() / d;
  if (!ids || static_cast<int64_t>(ids->size()) != count) {
    throw std::invalid_argument("scatter_rows: id count does not match source shape");
  }
  Tensor out = Tensor::zeros({rows, d});
  const double* ps = ts.data();
  double* po = out.data();
  for (int64_t i = 0; i < count; ++i) {
    const int32_t id = (*ids)[static_cast<size_t>(i)];
    if (id < 0 || id >= rows) {
      throw std::invalid_argument("scatter_rows: id " + std::to_string(id) +
                                  " out of range [0, " + std::to_string(rows) + ")");
    }
    double* dst = po + static_cast<int64_t>(id) * d;
    const double* srcp = ps + i * d;
    for (int64_t j = 0; j < d; ++j) dst[j] += srcp[j];
  }
  Node n;
  n.op = Op::kScatterRows;
  n.a = src;
  n.i2 = rows;
  n.ids = std::move(ids);
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::transpose_last2(ValueId a) {
  check(a);
  const Tensor& ta = val(a);
  if (ta.rank() < 2) throw std::invalid_argument("transpose_last2: rank must be >= 2");
  const size_t r = ta.rank();
  const int64_t m = ta.dim(r - 2);
  const int64_t nn = ta.dim(r - 1);
  Shape os = ta.shape();
  std::swap(os[r - 2], os[r - 1]);
  Tensor out(os);
  const int64_t batches = ta.size() / (m * nn);
  const double* pa = ta.data();
  double* po = out.data();
  for (int64_t bidx = 0; bidx < batches; ++bidx) {
    const double* src = pa + bidx * m * nn;
    double* dst = po + bidx * m * nn;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < nn; ++j) dst[j * m + i] = src[i * nn + j];
    }
  }
  Node n;
  n.op = Op::kTransposeLast2;
  n.a = a;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::swap_axes(ValueId a, int64_t ax1, int64_t ax2) {
  check(a);
  const Tensor& ta = val(a);
  const size_t r = ta.rank();
  if (ax1 < 0 || ax2 < 0 || static_cast<size_t>(ax1) >= r || static_cast<size_t>(ax2) >= r) {
    throw std::invalid_argument("swap_axes: axis out of range for " + shape_str(ta.shape()));
  }
  if (ax1 == ax2) return reshape(a, ta.shape());
  Shape os = ta.shape();
  std::swap(os[static_cast<size_t>(ax1)], os[static_cast<size_t>(ax2)]);
  Tensor out(os);
  // Stride map: walking the output in row-major order, read the input at the
  // axis-swapped offset.
  std::vector<int64_t> in_strides(r, 1);
  for (size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * ta.dim(i + 1);
  std::vector<int64_t> strides(r);
  for (size_t i = 0; i < r; ++i) strides[i] = in_strides[i];
  std::swap(strides[static_cast<size_t>(ax1)], strides[static_cast<size_t>(ax2)]);
  std::vector<int64_t> idx(r, 0);
  const double* pa = ta.data();
  double* po = out.data();
  int64_t off = 0;
  for (int64_t lin = 0; lin < out.size(); ++lin) {
    po[lin] = pa[off];
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < os[d]) break;
      idx[d] = 0;
      off -= strides[d] * os[d];
    }
  }
  Node n;
  n.op = Op::kSwapAxes;
  n.a = a;
  n.i0 = ax1;
  n.i1 = ax2;
  n.value = std::move(out);
  return push(std::move(n));
}

ValueId Graph::reshape(ValueId a, Shape target) {
  check(a);
  const Tensor& ta = val(a);
  if (shape_size(target) != ta.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(ta.shape()) + " as " +
                                shape_str(target));
  }
  Node n;
  n.op = Op::kReshape;
  n.a = a;
  n.value = Tensor(std::move(target), ta.values());
  return push(std::move(n));
}

std::vector<ValueId> Graph::backward(ValueId loss, std::span<const ValueId> wrt) {
  check(loss);
  for (ValueId id : wrt) check(id);
  if (val(loss).size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(val(loss).shape()));
  }
  std::vector<ValueId> adj(static_cast<size_t>(loss) + 1, kNoValue);
  adj[static_cast<size_t>(loss)] = constant(Tensor::full(val(loss).shape(), 1.0));

  auto accumulate = [&](ValueId target, ValueId g) {
    ValueId& slot = adj[static_cast<size_t>(target)];
    slot = (slot == kNoValue) ? g : add(slot, g);
  };

  for (ValueId i = loss; i >= 0; --i) {
    const ValueId g = adj[static_cast<size_t>(i)];
    if (g == kNoValue) continue;
    // Copy the descriptor fields; emitting adjoint nodes may reallocate nodes_.
    const Op op = node(i).op;
    const ValueId a = node(i).a;
    const ValueId b = node(i).b;
    const double c0 = node(i).c0;
    const double c1 = node(i).c1;
    const int64_t i0 = node(i).i0;
    const int64_t i1 = node(i).i1;
    const int64_t i2 = node(i).i2;
    auto ids = node(i).ids;
    switch (op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kMatMul: {
        // Shape copies, not references: emitting adjoint nodes below may
        // reallocate nodes_ and invalidate anything pointing into it.
        const Shape sa = val(a).shape();
        const Shape sb = val(b).shape();
        if (sb.size() == 2) {
          accumulate(a, matmul(g, transpose_last2(b)));
          const int64_t k = sa.back();
          const int64_t nn = sb[1];
          const int64_t m = val(a).size() / k;
          const ValueId a2 = reshape(a, {m, k});
          const ValueId g2 = reshape(g, {m, nn});
          accumulate(b, matmul(transpose_last2(a2), g2));
        } else {
          accumulate(a, matmul(g, transpose_last2(b)));
          accumulate(b, matmul(transpose_last2(a), g));
        }
        break;
      }
      case Op::kAdd:
        accumulate(a, sum_to(g, val(a).shape()));
        accumulate(b, sum_to(g, val(b).shape()));
        break;
      case Op::kSub:
        accumulate(a, sum_to(g, val(a).shape()));
        accumulate(b, scale(sum_to(g, val(b).shape()), -1.0));
        break;
      case Op::kMul:
        accumulate(a, sum_to(mul(g, b), val(a).shape()));
        accumulate(b, sum_to(mul(g, a), val(b).shape()));
        break;
      case Op::kScale:
        accumulate(a, scale(g, c0));
        break;
      case Op::kAddScalar:
        accumulate(a, g);
        break;
      case Op::kExp:
        accumulate(a, mul(g, i));
        break;
      case Op::kLog:
        accumulate(a, mul(g, recip(a)));
        break;
      case Op::kRecip: {
        const ValueId y2 = mul(i, i);
        accumulate(a, scale(mul(g, y2), -1.0));
        break;
      }
      case Op::kSqrt:
        accumulate(a, scale(mul(g, recip(i)), 0.5));
        break;
      case Op::kClampMin: {
        // Pass-through mask, treated as locally constant.
        const ValueId mask = constant(
            elementwise1(val(a), [c0](double x) { return x > c0 ? 1.0 : 0.0; }));
        accumulate(a, mul(g, mask));
        break;
      }
      case Op::kClamp: {
        const ValueId mask = constant(elementwise1(
            val(a), [c0, c1](double x) { return (x > c0 && x < c1) ? 1.0 : 0.0; }));
        accumulate(a, mul(g, mask));
        break;
      }
      case Op::kSoftmaxLast: {
        // dx = y * (g - sum_j g_j y_j)
        const ValueId gy = mul(g, i);
        Shape rs = val(i).shape();
        rs.back() = 1;
        const ValueId row_sum = sum_to(gy, rs);
        accumulate(a, mul(i, sub(g, row_sum)));
        break;
      }
      case Op::kSumTo:
        accumulate(a, broadcast_to(g, val(a).shape()));
        break;
      case Op::kBroadcastTo:
        accumulate(a, sum_to(g, val(a).shape()));
        break;
      case Op::kConcat: {
        const int64_t da = val(a).dim(static_cast<size_t>(i0));
        const int64_t db = val(b).dim(static_cast<size_t>(i0));
        accumulate(a, slice_axis(g, i0, 0, da));
        accumulate(b, slice_axis(g, i0, da, db));
        break;
      }
      case Op::kSliceAxis:
        accumulate(a, pad_axis(g, i0, i1, val(a).dim(static_cast<size_t>(i0))));
        break;
      case Op::kPadAxis:
        accumulate(a, slice_axis(g, i0, i1, i2));
        break;
      case Op::kGatherRows: {
        accumulate(a, scatter_rows(g, ids, i2));
        break;
      }
      case Op::kScatterRows: {
        Shape id_shape = drop_trailing(val(a).shape(), 1);
        accumulate(a, gather_rows(g, ids, std::move(id_shape)));
        break;
      }
      case Op::kTransposeLast2:
        accumulate(a, transpose_last2(g));
        break;
      case Op::kSwapAxes:
        accumulate(a, swap_axes(g, i0, i1));
        break;
      case Op::kReshape:
        accumulate(a, reshape(g, val(a).shape()));
        break;
    }
  }

  std::vector<ValueId> out(wrt.size(), kNoValue);
  for (size_t j = 0; j < wrt.size(); ++j) {
    if (wrt[j] <= loss) out[j] = adj[static_cast<size_t>(wrt[j])];
  }
  return out;
}

}  // namespace metabridge::diff
