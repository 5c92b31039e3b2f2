#include "higfa/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "higfa/error.hpp"

namespace higfa::nd {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid()) throw Error(std::string(op) + ": unbound operand");
  if (a.tape() != b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
  return *a.tape();
}

Tape& tape_of(const Var& a, const char* op) {
  if (!a.valid()) throw Error(std::string(op) + ": unbound operand");
  return *a.tape();
}

Tensor checked(Tensor t, const char* op) {
  if (!t.all_finite()) throw DomainError(std::string(op) + " produced a non-finite value");
  return t;
}

// b broadcasts against a when b's shape equals a trailing suffix of a's.
void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) {
    ok = a[a.size() - b.size() + i] == b[i];
  }
  if (!ok) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                     " are not broadcast-compatible");
  }
}

template <class Fwd, class BwdA, class BwdB>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  Tape& tape = same_tape(a, b, name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_broadcast(av.shape(), bv.shape(), name);
  const std::size_t n = av.size();
  const std::size_t nb = bv.size();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % nb]);
  out = checked(std::move(out), name);

  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, bwd_a, bwd_b](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    const std::size_t m = y.size();
    if (t.tracks(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += bwd_a(g[i], x[i], y[i % m]);
    }
    if (t.tracks(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % m] += bwd_b(g[i], x[i], y[i % m]);
    }
  });
}

template <class Fwd, class Bwd>
Var unary(const Var& a, const char* name, Fwd fwd, Bwd bwd) {
  Tape& tape = tape_of(a, name);
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  out = checked(std::move(out), name);
  const std::size_t ia = a.id();
  // bwd(g, x, y) gets the input x and output y.
  return tape.record(std::move(out), {ia}, [ia, bwd](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += bwd(g[i], x[i], y[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Var div(const Var& a, const Var& b) {
  for (double v : b.value().values()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Var scale(const Var& a, double c) {
  return unary(
      a, "scale", [c](double x) { return c * x; }, [c](double g, double, double) { return c * g; });
}

Var exp(const Var& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
  }
  return unary(
      a, "log", [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}

Var tanh(const Var& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

Var relu(const Var& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Var elementwise(OpKind kind, const Var& a, std::optional<Var> b, double constant) {
  auto need_b = [&]() -> const Var& {
    if (!b) throw Error("elementwise: binary op kind requires a second operand");
    return *b;
  };
  switch (kind) {
    case OpKind::add: return add(a, need_b());
    case OpKind::sub: return sub(a, need_b());
    case OpKind::mul: return mul(a, need_b());
    case OpKind::div: return div(a, need_b());
    case OpKind::exp: return exp(a);
    case OpKind::log: return log(a);
    case OpKind::tanh: return tanh(a);
    case OpKind::relu: return relu(a);
    case OpKind::scale: return scale(a, constant);
  }
  throw Error("elementwise: unknown op kind");
}

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: inner extents differ for " + to_string(av.shape()) + " x " +
                     to_string(bv.shape()));
  }
  const auto m = static_cast<Eigen::Index>(av.dim(0));
  const auto k = static_cast<Eigen::Index>(av.dim(1));
  const auto n = static_cast<Eigen::Index>(bv.dim(1));
  Tensor out(Shape{av.dim(0), bv.dim(1)});
  MutMap(out.data(), m, n).noalias() = ConstMap(av.data(), m, k) * ConstMap(bv.data(), k, n);
  out = checked(std::move(out), "matmul");

  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    ConstMap g(t.grad_of(self).data(), m, n);
    if (t.tracks(ia)) {
      MutMap ga(t.grad_buffer(ia).data(), m, k);
      ga.noalias() += g * ConstMap(t.value(ib).data(), k, n).transpose();
    }
    if (t.tracks(ib)) {
      MutMap gb(t.grad_buffer(ib).data(), k, n);
      gb.noalias() += ConstMap(t.value(ia).data(), m, k).transpose() * g;
    }
  });
}

Var sum(const Var& a) {
  Tape& tape = tape_of(a, "sum");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return tape.record(checked(Tensor::scalar(s), "sum"), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    for (double& v : t.grad_buffer(ia)) v += g;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var log_softmax(const Var& a) {
  Tape& tape = tape_of(a, "log_softmax");
  const Tensor& av = a.value();
  if (av.rank() != 1 && av.rank() != 2) {
    throw ShapeError("log_softmax expects rank 1 or 2, got " + to_string(av.shape()));
  }
  const std::size_t cols = av.shape().back();
  const std::size_t rows = av.size() / cols;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(x[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[c] - lse;
  }
  out = checked(std::move(out), "log_softmax");
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, rows, cols](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    const Tensor& y = t.value(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        ga[i] += g[i] - std::exp(y[i]) * gs;
      }
    }
  });
}

Var pick(const Var& a, std::span<const std::size_t> index) {
  Tape& tape = tape_of(a, "pick");
  const Tensor& av = a.value();
  if (av.rank() != 2 || av.dim(0) != index.size()) {
    throw ShapeError("pick: need rank-2 input with one index per row, got " + to_string(av.shape()) +
                     " and " + std::to_string(index.size()) + " indices");
  }
  const std::size_t cols = av.dim(1);
  Tensor out(Shape{index.size()});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= cols) throw Error("pick: index " + std::to_string(index[r]) + " out of range");
    out[r] = av(r, index[r]);
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return tape.record(std::move(out), {ia}, [ia, cols, idx = std::move(idx)](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) ga[r * cols + idx[r]] += g[r];
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> rows) {
  Tape& tape = tape_of(table, "gather_rows");
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("gather_rows expects a rank-2 table, got " + to_string(tv.shape()));
  const std::size_t cols = tv.dim(1);
  Tensor out(Shape{rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= tv.dim(0)) throw Error("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(tv.data() + rows[r] * cols, cols, out.data() + r * cols);
  }
  const std::size_t it = table.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.record(std::move(out), {it}, [it, cols, idx = std::move(idx)](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto gt = t.grad_buffer(it);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) gt[idx[r] * cols + c] += g[r * cols + c];
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b, "concat_cols");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) {
    throw ShapeError("concat_cols: cannot join " + to_string(av.shape()) + " and " + to_string(bv.shape()));
  }
  const std::size_t rows = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  Tensor out(Shape{rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, rows, ca, cb](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    if (t.tracks(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
    }
    if (t.tracks(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += g[r * (ca + cb) + ca + c];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tape& tape = tape_of(a, "reshape");
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return tape.record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

}  // namespace higfa::nd
