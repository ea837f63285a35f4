#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape owns every node created while evaluating an expression. Nodes are
// appended in evaluation order, so walking the tape backwards from the loss
// visits them in reverse topological order. A Var is a cheap handle (tape,
// index); it is only meaningful while its tape is alive.
//
// A tape is single-owner: do not share one across threads. Evaluating with a
// throwaway tape and never calling backward() is the "no recording" path.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ofa/error.hpp"
#include "ofa/matrix.hpp"

namespace ofa::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const noexcept { return tape != nullptr; }
  const Matrix& value() const;
  const Matrix& grad() const;
  double scalar() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  // Backprop callback: receives the tape and the node's own id. It reads the
  // node's gradient and accumulates into its parents' gradients.
  using Backprop = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var parameter(Matrix value) { return push(std::move(value), true, {}); }

  // Record an operation whose value has already been computed. Gradient is
  // tracked when any parent tracks one.
  Var record(Matrix value, std::initializer_list<Var> parents, Backprop backprop) {
    bool needs = false;
    for (const Var& p : parents) {
      check_owned(p);
      needs = needs || nodes_[p.id].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backprop) : Backprop{});
  }

  const Matrix& value(Var v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }

  // Gradient of the last backward() target w.r.t. v; zeros if v did not
  // participate.
  const Matrix& grad(Var v) const {
    check_owned(v);
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) throw Error(ErrorCode::invalid_argument, "no gradient available; call backward() first");
    return n.grad;
  }

  bool needs_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id].needs_grad;
  }

  // Mutable gradient buffer for use inside Backprop callbacks.
  Matrix& grad_buffer(std::size_t id) { return nodes_[id].grad; }
  bool tracks(std::size_t id) const { return nodes_[id].needs_grad; }

  void backward(Var loss) {
    if (loss.tape != this || loss.id >= nodes_.size())
      throw Error(ErrorCode::invalid_argument, "backward() on a node not recorded on this tape");
    const Matrix& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1)
      throw Error(ErrorCode::dimension_mismatch, "backward() requires a scalar loss, got " + lv.shape_string());
    for (Node& n : nodes_) n.grad = Matrix(n.value.rows(), n.value.cols());
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backprop) n.backprop(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Multiply-accumulates executed by matmul() on this tape.
  std::uint64_t macs() const noexcept { return macs_; }
  void add_macs(std::uint64_t n) noexcept { macs_ += n; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backprop backprop;
  };

  Var push(Matrix value, bool needs, Backprop bp) {
    nodes_.push_back(Node{std::move(value), Matrix{}, needs, std::move(bp)});
    return Var{this, nodes_.size() - 1};
  }

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size())
      throw Error(ErrorCode::invalid_argument, "variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  std::uint64_t macs_ = 0;
};

inline const Matrix& Var::value() const {
  if (!tape) throw Error(ErrorCode::invalid_argument, "unbound variable");
  return tape->value(*this);
}

inline const Matrix& Var::grad() const {
  if (!tape) throw Error(ErrorCode::invalid_argument, "unbound variable");
  return tape->grad(*this);
}

inline double Var::scalar() const {
  const Matrix& m = value();
  if (m.size() != 1) throw Error(ErrorCode::dimension_mismatch, "expected 1x1, got " + m.shape_string());
  return m[0];
}

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape) throw Error(ErrorCode::invalid_argument, "unbound variable");
  return *a.tape;
}

inline Tape& same_tape(Var a, Var b) {
  if (!a.tape || a.tape != b.tape) throw Error(ErrorCode::invalid_argument, "operands live on different tapes");
  return *a.tape;
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b))
    throw Error(ErrorCode::dimension_mismatch,
                std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
}

inline void require_scalar(const Matrix& s, const char* op) {
  if (s.size() != 1) throw Error(ErrorCode::dimension_mismatch, std::string(op) + ": expected 1x1 operand");
}

// Elementwise unary op with derivative expressed from (input, output).
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.record(std::move(y), {a}, [a, df](Tape& tp, std::size_t self) {
    if (!tp.tracks(a.id)) return;
    const Matrix& x = tp.value(a);
    const Matrix& y = tp.value(Var{&tp, self});
    const Matrix& g = tp.grad_buffer(self);
    Matrix& ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out = ofa::matmul(av, bv);
  t.add_macs(static_cast<std::uint64_t>(av.rows()) * av.cols() * bv.cols());
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_buffer(self);
    const Matrix& av = tp.value(a);
    const Matrix& bv = tp.value(b);
    if (tp.tracks(a.id)) {
      Matrix& ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t k = 0; k < av.cols(); ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < bv.cols(); ++j) s += g(i, j) * bv(k, j);
          ga(i, k) += s;
        }
    }
    if (tp.tracks(b.id)) {
      Matrix& gb = tp.grad_buffer(b.id);
      for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t k = 0; k < av.cols(); ++k) {
          const double aik = av(i, k);
          for (std::size_t j = 0; j < bv.cols(); ++j) gb(k, j) += aik * g(i, j);
        }
    }
  });
}

// a + b. b may be a 1 x cols row vector, broadcast over the rows of a.
inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const bool broadcast = bv.rows() == 1 && av.rows() > 1 && bv.cols() == av.cols();
  if (!broadcast) detail::require_same_shape(av, bv, "add");
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += broadcast ? bv(0, j) : bv(i, j);
  return t.record(std::move(out), {a, b}, [a, b, broadcast](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_buffer(self);
    if (tp.tracks(a.id)) {
      Matrix& ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.tracks(b.id)) {
      Matrix& gb = tp.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb(broadcast ? 0 : i, j) += g(i, j);
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_buffer(self);
    if (tp.tracks(a.id)) {
      Matrix& ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.tracks(b.id)) {
      Matrix& gb = tp.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

// Hadamard product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_buffer(self);
    const Matrix& av = tp.value(a);
    const Matrix& bv = tp.value(b);
    if (tp.tracks(a.id)) {
      Matrix& ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.tracks(b.id)) {
      Matrix& gb = tp.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

// scale * a + shift, elementwise, with constant scale and shift.
inline Var affine(Var a, double scale, double shift) {
  return detail::unary(
      a, [scale, shift](double x) { return scale * x + shift; },
      [scale](double, double) { return scale; });
}

inline Var scale(Var a, double s) { return affine(a, s, 0.0); }

// a * s where s is a 1x1 node.
inline Var scale_by(Var a, Var s) {
  Tape& t = detail::same_tape(a, s);
  detail::require_scalar(s.value(), "scale_by");
  const double sv = s.scalar();
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * out[i];
  return t.record(std::move(out), {a, s}, [a, s](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_buffer(self);
    const Matrix& av = tp.value(a);
    const double sv = tp.value(s)[0];
    if (tp.tracks(a.id)) {
      Matrix& ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
    }
    if (tp.tracks(s.id)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      tp.grad_buffer(s.id)[0] += acc;
    }
  });
}

// a / s where s is a nonzero 1x1 node.
inline Var divide_by(Var a, Var s) {
  Tape& t = detail::same_tape(a, s);
  detail::require_scalar(s.value(), "divide_by");
  const double sv = s.scalar();
  if (sv == 0.0) throw Error(ErrorCode::invalid_argument, "divide_by: zero divisor");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] / sv;
  return t.record(std::move(out), {a, s}, [a, s](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_buffer(self);
    const Matrix& y = tp.value(Var{&tp, self});
    const double sv = tp.value(s)[0];
    if (tp.tracks(a.id)) {
      Matrix& ga = tp.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / sv;
    }
    if (tp.tracks(s.id)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * y[i];
      tp.grad_buffer(s.id)[0] -= acc / sv;
    }
  });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// log(sigmoid(x)), stable for large |x|.
inline Var log_sigmoid(Var a) {
  return detail::unary(
      a, [](double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0) return std::exp(-x) / (1.0 + std::exp(-x));
        return 1.0 / (1.0 + std::exp(x));
      });
}

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var exp(Var a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// |x|; subgradient 0 at the kink.
inline Var abs(Var a) {
  return detail::unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

// Clamp to [lo, hi]; zero gradient where clamped.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// min(s, c) for a 1x1 node s and constant c.
inline Var min_with(Var s, double c) {
  detail::require_scalar(s.value(), "min_with");
  if (s.scalar() < c) return s;
  return s.tape->constant(Matrix::scalar(c));
}

inline Var sum(Var a) {
  Tape& t = detail::tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Matrix::scalar(s), {a}, [a](Tape& tp, std::size_t self) {
    if (!tp.tracks(a.id)) return;
    const double g = tp.grad_buffer(self)[0];
    Matrix& ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Column means: rows x cols -> 1 x cols.
inline Var mean_rows(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& x = a.value();
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) *= inv;
  return t.record(std::move(out), {a}, [a, inv](Tape& tp, std::size_t self) {
    if (!tp.tracks(a.id)) return;
    const Matrix& g = tp.grad_buffer(self);
    Matrix& ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j) * inv;
  });
}

inline Var transpose(Var a) {
  Tape& t = detail::tape_of(a);
  return t.record(ofa::transpose(a.value()), {a}, [a](Tape& tp, std::size_t self) {
    if (!tp.tracks(a.id)) return;
    const Matrix& g = tp.grad_buffer(self);
    Matrix& ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(j, i);
  });
}

// Row-wise softmax.
inline Var softmax_rows(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double m = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) m = std::max(m, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += (y(i, j) = std::exp(x(i, j) - m));
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) /= z;
  }
  return t.record(std::move(y), {a}, [a](Tape& tp, std::size_t self) {
    if (!tp.tracks(a.id)) return;
    const Matrix& y = tp.value(Var{&tp, self});
    const Matrix& g = tp.grad_buffer(self);
    Matrix& ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

// Mean absolute difference over all entries -> 1x1.
inline Var l1(Var a, Var b) { return mean(abs(sub(a, b))); }

// Per-row cosine similarity of two equally shaped matrices -> rows x 1.
inline Var cosine_similarity(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "cosine_similarity");
  constexpr double kFloor = 1e-12;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out(av.rows(), 1);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < av.cols(); ++j) {
      ab += av(i, j) * bv(i, j);
      aa += av(i, j) * av(i, j);
      bb += bv(i, j) * bv(i, j);
    }
    out(i, 0) = ab / std::max(std::sqrt(aa) * std::sqrt(bb), kFloor);
  }
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Matrix& av = tp.value(a);
    const Matrix& bv = tp.value(b);
    const Matrix& g = tp.grad_buffer(self);
    for (std::size_t i = 0; i < av.rows(); ++i) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t j = 0; j < av.cols(); ++j) {
        ab += av(i, j) * bv(i, j);
        aa += av(i, j) * av(i, j);
        bb += bv(i, j) * bv(i, j);
      }
      const double na = std::sqrt(aa), nb = std::sqrt(bb);
      const double gi = g(i, 0);
      if (na * nb < kFloor) {
        // Floored denominator: cos = ab / kFloor.
        for (std::size_t j = 0; j < av.cols(); ++j) {
          if (tp.tracks(a.id)) tp.grad_buffer(a.id)(i, j) += gi * bv(i, j) / kFloor;
          if (tp.tracks(b.id)) tp.grad_buffer(b.id)(i, j) += gi * av(i, j) / kFloor;
        }
        continue;
      }
      const double cos = ab / (na * nb);
      for (std::size_t j = 0; j < av.cols(); ++j) {
        if (tp.tracks(a.id))
          tp.grad_buffer(a.id)(i, j) += gi * (bv(i, j) / (na * nb) - cos * av(i, j) / aa);
        if (tp.tracks(b.id))
          tp.grad_buffer(b.id)(i, j) += gi * (av(i, j) / (na * nb) - cos * bv(i, j) / bb);
      }
    }
  });
}

// Mean softmax cross-entropy of row-wise logits against integer labels.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = detail::tape_of(logits);
  const Matrix& x = logits.value();
  if (labels.size() != x.rows())
    throw Error(ErrorCode::dimension_mismatch, "cross_entropy: label count != rows");
  Matrix probs(x.rows(), x.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= x.cols())
      throw Error(ErrorCode::invalid_argument, "cross_entropy: label out of range");
    double m = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) m = std::max(m, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += (probs(i, j) = std::exp(x(i, j) - m));
    for (std::size_t j = 0; j < x.cols(); ++j) probs(i, j) /= z;
    loss += -(x(i, label) - m - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(x.rows());
  std::vector<int> owned(labels.begin(), labels.end());
  return t.record(Matrix::scalar(loss * inv), {logits},
                  [logits, probs = std::move(probs), owned = std::move(owned), inv](Tape& tp, std::size_t self) {
                    if (!tp.tracks(logits.id)) return;
                    const double g = tp.grad_buffer(self)[0] * inv;
                    Matrix& ga = tp.grad_buffer(logits.id);
                    for (std::size_t i = 0; i < probs.rows(); ++i)
                      for (std::size_t j = 0; j < probs.cols(); ++j)
                        ga(i, j) += g * (probs(i, j) - (static_cast<int>(j) == owned[i] ? 1.0 : 0.0));
                  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace ofa::ad
