#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "higfa/tape.hpp"

namespace higfa::nd {

// Differentiable primitives. Binary ops accept b either with a's shape or
// with a shape equal to a trailing suffix of a's shape (e.g. a bias row
// [n] against a batch [m, n]); the gradient of b is reduced accordingly.
// Every op throws DomainError instead of producing NaN or Inf.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);

enum class OpKind { add, sub, mul, div, exp, log, tanh, relu, scale };

/// Dispatcher over the elementwise primitives. `b` is required for the
/// binary kinds, `constant` is the factor for OpKind::scale.
Var elementwise(OpKind kind, const Var& a, std::optional<Var> b = std::nullopt,
                double constant = 1.0);

/// [m, k] x [k, n] -> [m, n].
Var matmul(const Var& a, const Var& b);

/// Sum / mean of all elements, as a rank-0 tensor.
Var sum(const Var& a);
Var mean(const Var& a);

/// Log-softmax along the last axis of a rank-1 or rank-2 tensor.
Var log_softmax(const Var& a);

/// out[i] = a[i, index[i]] for a rank-2 a.
Var pick(const Var& a, std::span<const std::size_t> index);

/// Rows of a rank-2 table, e.g. an embedding lookup.
Var gather_rows(const Var& table, std::span<const std::size_t> rows);

/// Concatenate two rank-2 tensors with equal row counts along columns.
Var concat_cols(const Var& a, const Var& b);

Var reshape(const Var& a, Shape shape);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace higfa::nd
