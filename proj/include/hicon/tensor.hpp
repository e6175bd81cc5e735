#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hicon/common.hpp"

namespace hicon {

// Dense row-major matrix of 64-bit floats. Vectors are N x 1, scalars 1 x 1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

  static Tensor scalar(double x) {
    Tensor t(1, 1);
    t.v[0] = x;
    return t;
  }

  static Tensor from(std::initializer_list<std::initializer_list<double>> data) {
    Tensor t(data.size(), data.size() ? data.begin()->size() : 0);
    std::size_t i = 0;
    for (const auto& row : data) {
      if (row.size() != t.cols) throw ContractError("Tensor::from: ragged rows");
      for (double x : row) t.v[i++] = x;
    }
    return t;
  }

  static Tensor column(std::initializer_list<double> data) {
    Tensor t(data.size(), 1);
    std::copy(data.begin(), data.end(), t.v.begin());
    return t;
  }

  double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
  double* row_ptr(std::size_t i) { return v.data() + i * cols; }
  const double* row_ptr(std::size_t i) const { return v.data() + i * cols; }
  std::size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + " x " + std::to_string(cols) + "]";
  }
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (double x : t.v) {
    if (!std::isfinite(x)) {
      throw NumericalError(std::string(op) + ": non-finite value in output " + t.shape_str());
    }
  }
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ContractError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                        b.shape_str());
  }
}

// Numerically stable log(1 + e^x).
inline double softplus_scalar(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

}  // namespace detail

using VarId = int;

// Recorded operation graph. Nodes are created in topological order; a single
// reverse sweep over the tape produces gradients for every leaf. One tape has
// one writer; separate tapes are independent.
class Tape {
 public:
  struct Node {
    Tensor value;
    std::function<void(Tape&, const Tensor& grad_out, std::vector<Tensor>& grads)> backward;
    bool is_leaf = false;
  };

  VarId leaf(Tensor t) {
    detail::check_finite(t, "leaf");
    nodes_.push_back(Node{std::move(t), nullptr, true});
    leaf_ids_.push_back(static_cast<VarId>(nodes_.size() - 1));
    return static_cast<VarId>(nodes_.size() - 1);
  }

  // Non-differentiated input (graph constants, precomputed coefficients).
  VarId constant(Tensor t) {
    detail::check_finite(t, "constant");
    nodes_.push_back(Node{std::move(t), nullptr, false});
    return static_cast<VarId>(nodes_.size() - 1);
  }

  const Tensor& value(VarId id) const { return nodes_.at(id).value; }
  const std::vector<VarId>& leaves() const { return leaf_ids_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Folded sign pattern of every kinked activation evaluated on this tape.
  // grad_check compares signatures of the two probe passes to detect
  // finite-difference steps that straddle a non-differentiable point.
  std::uint64_t kink_signature() const { return kink_signature_; }

  // ---- primitives ------------------------------------------------------

  VarId add(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    detail::check_same_shape(ta, tb, "add");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += tb.v[i];
    return record("add", std::move(out), [a, b](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      tp.acc_same(grads, a, g, 1.0);
      tp.acc_same(grads, b, g, 1.0);
    });
  }

  VarId sub(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    detail::check_same_shape(ta, tb, "sub");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] -= tb.v[i];
    return record("sub", std::move(out), [a, b](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      tp.acc_same(grads, a, g, 1.0);
      tp.acc_same(grads, b, g, -1.0);
    });
  }

  VarId scale(VarId a, double c) {
    Tensor out = value(a);
    for (double& x : out.v) x *= c;
    return record("scale", std::move(out), [a, c](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      tp.acc_same(grads, a, g, c);
    });
  }

  VarId mul(VarId a, VarId b) {  // elementwise
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    detail::check_same_shape(ta, tb, "mul");
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] *= tb.v[i];
    return record("mul", std::move(out), [a, b](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      const Tensor& ta = tp.value(a);
      const Tensor& tb = tp.value(b);
      Tensor& ga = tp.grad_slot(grads, a);
      Tensor& gb = tp.grad_slot(grads, b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.v[i] += g.v[i] * tb.v[i];
        gb.v[i] += g.v[i] * ta.v[i];
      }
    });
  }

  // Row i of x scaled by s[i]; s is a differentiable N x 1 column.
  VarId mul_rowwise(VarId x, VarId s) {
    const Tensor& tx = value(x);
    const Tensor& ts = value(s);
    if (ts.cols != 1 || ts.rows != tx.rows) {
      throw ContractError("mul_rowwise: scale must be " + std::to_string(tx.rows) +
                          " x 1, got " + ts.shape_str());
    }
    Tensor out = tx;
    for (std::size_t i = 0; i < tx.rows; ++i) {
      const double si = ts.v[i];
      double* r = out.row_ptr(i);
      for (std::size_t j = 0; j < tx.cols; ++j) r[j] *= si;
    }
    return record("mul_rowwise", std::move(out),
                  [x, s](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& tx = tp.value(x);
                    const Tensor& ts = tp.value(s);
                    Tensor& gx = tp.grad_slot(grads, x);
                    Tensor& gs = tp.grad_slot(grads, s);
                    for (std::size_t i = 0; i < tx.rows; ++i) {
                      const double si = ts.v[i];
                      const double* gr = g.row_ptr(i);
                      const double* xr = tx.row_ptr(i);
                      double* gxr = gx.row_ptr(i);
                      double dot = 0.0;
                      for (std::size_t j = 0; j < tx.cols; ++j) {
                        gxr[j] += gr[j] * si;
                        dot += gr[j] * xr[j];
                      }
                      gs.v[i] += dot;
                    }
                  });
  }

  // Row i scaled by the constant w[i] (graph normalization coefficients).
  VarId scale_rows(VarId x, std::vector<double> w) {
    const Tensor& tx = value(x);
    if (w.size() != tx.rows) {
      throw ContractError("scale_rows: coefficient count " + std::to_string(w.size()) +
                          " != rows " + std::to_string(tx.rows));
    }
    Tensor out = tx;
    for (std::size_t i = 0; i < tx.rows; ++i) {
      double* r = out.row_ptr(i);
      for (std::size_t j = 0; j < tx.cols; ++j) r[j] *= w[i];
    }
    return record("scale_rows", std::move(out),
                  [x, w = std::move(w)](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor& gx = tp.grad_slot(grads, x);
                    for (std::size_t i = 0; i < g.rows; ++i) {
                      const double* gr = g.row_ptr(i);
                      double* gxr = gx.row_ptr(i);
                      for (std::size_t j = 0; j < g.cols; ++j) gxr[j] += gr[j] * w[i];
                    }
                  });
  }

  VarId matmul(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols != tb.rows) {
      throw ContractError("matmul: inner dims differ, " + ta.shape_str() + " * " + tb.shape_str());
    }
    Tensor out(ta.rows, tb.cols);
    mm(ta, tb, out);
    return record("matmul", std::move(out), [a, b](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      const Tensor& ta = tp.value(a);
      const Tensor& tb = tp.value(b);
      // dA = G B^T, dB = A^T G
      mm_nt_acc(g, tb, tp.grad_slot(grads, a));
      mm_tn_acc(ta, g, tp.grad_slot(grads, b));
    });
  }

  // C = A * B^T
  VarId matmul_nt(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols != tb.cols) {
      throw ContractError("matmul_nt: inner dims differ, " + ta.shape_str() + " * " +
                          tb.shape_str() + "^T");
    }
    Tensor out(ta.rows, tb.rows);
    mm_nt_acc(ta, tb, out);
    return record("matmul_nt", std::move(out), [a, b](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      const Tensor& ta = tp.value(a);
      const Tensor& tb = tp.value(b);
      // dA = G B, dB = G^T A
      mm_acc(g, tb, tp.grad_slot(grads, a));
      mm_tn_acc(g, ta, tp.grad_slot(grads, b));
    });
  }

  VarId concat_rows(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols != tb.cols) {
      throw ContractError("concat_rows: column mismatch " + ta.shape_str() + " vs " +
                          tb.shape_str());
    }
    Tensor out(ta.rows + tb.rows, ta.cols);
    std::copy(ta.v.begin(), ta.v.end(), out.v.begin());
    std::copy(tb.v.begin(), tb.v.end(), out.v.begin() + ta.size());
    const std::size_t split = ta.rows;
    return record("concat_rows", std::move(out),
                  [a, b, split](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor& ga = tp.grad_slot(grads, a);
                    Tensor& gb = tp.grad_slot(grads, b);
                    const std::size_t na = split * g.cols;
                    for (std::size_t i = 0; i < na; ++i) ga.v[i] += g.v[i];
                    for (std::size_t i = 0; i < gb.size(); ++i) gb.v[i] += g.v[na + i];
                  });
  }

  VarId concat_cols(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rows != tb.rows) {
      throw ContractError("concat_cols: row mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    }
    Tensor out(ta.rows, ta.cols + tb.cols);
    for (std::size_t i = 0; i < ta.rows; ++i) {
      std::copy(ta.row_ptr(i), ta.row_ptr(i) + ta.cols, out.row_ptr(i));
      std::copy(tb.row_ptr(i), tb.row_ptr(i) + tb.cols, out.row_ptr(i) + ta.cols);
    }
    const std::size_t ca = ta.cols;
    return record("concat_cols", std::move(out),
                  [a, b, ca](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor& ga = tp.grad_slot(grads, a);
                    Tensor& gb = tp.grad_slot(grads, b);
                    for (std::size_t i = 0; i < g.rows; ++i) {
                      const double* gr = g.row_ptr(i);
                      double* gar = ga.row_ptr(i);
                      double* gbr = gb.row_ptr(i);
                      for (std::size_t j = 0; j < ca; ++j) gar[j] += gr[j];
                      for (std::size_t j = 0; j < g.cols - ca; ++j) gbr[j] += gr[ca + j];
                    }
                  });
  }

  VarId row_gather(VarId a, std::vector<int> idx) {
    const Tensor& ta = value(a);
    for (int i : idx) {
      if (i < 0 || static_cast<std::size_t>(i) >= ta.rows) {
        throw ContractError("row_gather: index " + std::to_string(i) + " out of " +
                            std::to_string(ta.rows) + " rows");
      }
    }
    Tensor out(idx.size(), ta.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy(ta.row_ptr(idx[r]), ta.row_ptr(idx[r]) + ta.cols, out.row_ptr(r));
    }
    return record("row_gather", std::move(out),
                  [a, idx = std::move(idx)](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor& ga = tp.grad_slot(grads, a);
                    for (std::size_t r = 0; r < idx.size(); ++r) {
                      const double* gr = g.row_ptr(r);
                      double* gar = ga.row_ptr(idx[r]);
                      for (std::size_t j = 0; j < g.cols; ++j) gar[j] += gr[j];
                    }
                  });
  }

  // Sums rows sharing a segment id into the corresponding output row.
  // Empty segments yield zero rows.
  VarId segment_sum(VarId a, std::vector<int> seg, std::size_t n_segments) {
    const Tensor& ta = value(a);
    check_segments(seg, ta.rows, n_segments, "segment_sum");
    Tensor out(n_segments, ta.cols);
    for (std::size_t r = 0; r < ta.rows; ++r) {
      const double* src = ta.row_ptr(r);
      double* dst = out.row_ptr(seg[r]);
      for (std::size_t j = 0; j < ta.cols; ++j) dst[j] += src[j];
    }
    return record("segment_sum", std::move(out),
                  [a, seg = std::move(seg)](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor& ga = tp.grad_slot(grads, a);
                    for (std::size_t r = 0; r < ga.rows; ++r) {
                      const double* gr = g.row_ptr(seg[r]);
                      double* gar = ga.row_ptr(r);
                      for (std::size_t j = 0; j < g.cols; ++j) gar[j] += gr[j];
                    }
                  });
  }

  // Softmax of an N x 1 column within each segment.
  VarId segment_softmax(VarId a, std::vector<int> seg) {
    const Tensor& ta = value(a);
    if (ta.cols != 1) throw ContractError("segment_softmax: expects N x 1, got " + ta.shape_str());
    std::size_t n_segments = 0;
    for (int s : seg) n_segments = std::max<std::size_t>(n_segments, s + 1);
    check_segments(seg, ta.rows, n_segments == 0 ? 1 : n_segments, "segment_softmax");
    std::vector<double> seg_max(n_segments, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < ta.rows; ++r) seg_max[seg[r]] = std::max(seg_max[seg[r]], ta.v[r]);
    std::vector<double> seg_sum(n_segments, 0.0);
    Tensor out(ta.rows, 1);
    for (std::size_t r = 0; r < ta.rows; ++r) {
      out.v[r] = std::exp(ta.v[r] - seg_max[seg[r]]);
      seg_sum[seg[r]] += out.v[r];
    }
    for (std::size_t r = 0; r < ta.rows; ++r) out.v[r] /= seg_sum[seg[r]];
    const VarId self = static_cast<VarId>(nodes_.size());
    return record("segment_softmax", std::move(out),
                  [a, self, seg = std::move(seg)](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& y = tp.value(self);
                    std::size_t n_segments = 0;
                    for (int s : seg) n_segments = std::max<std::size_t>(n_segments, s + 1);
                    std::vector<double> seg_dot(n_segments, 0.0);
                    for (std::size_t r = 0; r < y.rows; ++r) seg_dot[seg[r]] += g.v[r] * y.v[r];
                    Tensor& ga = tp.grad_slot(grads, a);
                    for (std::size_t r = 0; r < y.rows; ++r) {
                      ga.v[r] += y.v[r] * (g.v[r] - seg_dot[seg[r]]);
                    }
                  });
  }

  // Rows normalized to unit l2 norm; zero rows stay zero (and receive zero
  // adjoint), so isolated nodes never produce non-finite values.
  VarId l2_normalize_rows(VarId a) {
    const Tensor& ta = value(a);
    Tensor out = ta;
    std::vector<double> norms(ta.rows, 0.0);
    for (std::size_t i = 0; i < ta.rows; ++i) {
      const double* r = ta.row_ptr(i);
      double s = 0.0;
      for (std::size_t j = 0; j < ta.cols; ++j) s += r[j] * r[j];
      norms[i] = std::sqrt(s);
      fold_kink(norms[i] > 0.0);
      if (norms[i] > 0.0) {
        double* o = out.row_ptr(i);
        for (std::size_t j = 0; j < ta.cols; ++j) o[j] /= norms[i];
      }
    }
    const VarId self = static_cast<VarId>(nodes_.size());
    return record("l2_normalize_rows", std::move(out),
                  [a, self, norms = std::move(norms)](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& y = tp.value(self);
                    Tensor& ga = tp.grad_slot(grads, a);
                    for (std::size_t i = 0; i < y.rows; ++i) {
                      if (norms[i] <= 0.0) continue;
                      const double* yr = y.row_ptr(i);
                      const double* gr = g.row_ptr(i);
                      double* gar = ga.row_ptr(i);
                      double dot = 0.0;
                      for (std::size_t j = 0; j < y.cols; ++j) dot += yr[j] * gr[j];
                      for (std::size_t j = 0; j < y.cols; ++j) {
                        gar[j] += (gr[j] - yr[j] * dot) / norms[i];
                      }
                    }
                  });
  }

  VarId leaky_relu(VarId a, double slope = 0.2) {
    const Tensor& ta = value(a);
    Tensor out = ta;
    for (double& x : out.v) {
      fold_kink(x > 0.0);
      if (x < 0.0) x *= slope;
    }
    return record("leaky_relu", std::move(out),
                  [a, slope](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& ta = tp.value(a);
                    Tensor& ga = tp.grad_slot(grads, a);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      ga.v[i] += g.v[i] * (ta.v[i] > 0.0 ? 1.0 : slope);
                    }
                  });
  }

  VarId sigmoid(VarId a) {
    Tensor out = value(a);
    for (double& x : out.v) x = detail::sigmoid_scalar(x);
    const VarId self = static_cast<VarId>(nodes_.size());
    return record("sigmoid", std::move(out), [a, self](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      const Tensor& y = tp.value(self);
      Tensor& ga = tp.grad_slot(grads, a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * y.v[i] * (1.0 - y.v[i]);
    });
  }

  VarId log(VarId a) {
    const Tensor& ta = value(a);
    Tensor out = ta;
    for (double& x : out.v) {
      if (x <= 0.0) throw NumericalError("log: non-positive input " + std::to_string(x));
      x = std::log(x);
    }
    return record("log", std::move(out), [a](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      const Tensor& ta = tp.value(a);
      Tensor& ga = tp.grad_slot(grads, a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] / ta.v[i];
    });
  }

  VarId exp(VarId a) {
    Tensor out = value(a);
    for (double& x : out.v) x = std::exp(x);
    const VarId self = static_cast<VarId>(nodes_.size());
    return record("exp", std::move(out), [a, self](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      const Tensor& y = tp.value(self);
      Tensor& ga = tp.grad_slot(grads, a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * y.v[i];
    });
  }

  VarId softplus(VarId a) {
    Tensor out = value(a);
    for (double& x : out.v) x = detail::softplus_scalar(x);
    return record("softplus", std::move(out), [a](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      const Tensor& ta = tp.value(a);
      Tensor& ga = tp.grad_slot(grads, a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.v[i] += g.v[i] * detail::sigmoid_scalar(ta.v[i]);
      }
    });
  }

  // Row-wise dot product of two equal-shape matrices -> N x 1.
  VarId dot_rows(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    detail::check_same_shape(ta, tb, "dot_rows");
    Tensor out(ta.rows, 1);
    for (std::size_t i = 0; i < ta.rows; ++i) {
      const double* ra = ta.row_ptr(i);
      const double* rb = tb.row_ptr(i);
      double s = 0.0;
      for (std::size_t j = 0; j < ta.cols; ++j) s += ra[j] * rb[j];
      out.v[i] = s;
    }
    return record("dot_rows", std::move(out), [a, b](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      const Tensor& ta = tp.value(a);
      const Tensor& tb = tp.value(b);
      Tensor& ga = tp.grad_slot(grads, a);
      Tensor& gb = tp.grad_slot(grads, b);
      for (std::size_t i = 0; i < ta.rows; ++i) {
        const double gi = g.v[i];
        const double* ra = ta.row_ptr(i);
        const double* rb = tb.row_ptr(i);
        double* gra = ga.row_ptr(i);
        double* grb = gb.row_ptr(i);
        for (std::size_t j = 0; j < ta.cols; ++j) {
          gra[j] += gi * rb[j];
          grb[j] += gi * ra[j];
        }
      }
    });
  }

  // Column means -> 1 x D.
  VarId mean_rows(VarId a) {
    const Tensor& ta = value(a);
    if (ta.rows == 0) throw ContractError("mean_rows: empty input");
    Tensor out(1, ta.cols);
    for (std::size_t i = 0; i < ta.rows; ++i) {
      const double* r = ta.row_ptr(i);
      for (std::size_t j = 0; j < ta.cols; ++j) out.v[j] += r[j];
    }
    for (double& x : out.v) x /= static_cast<double>(ta.rows);
    const double inv_n = 1.0 / static_cast<double>(ta.rows);
    return record("mean_rows", std::move(out),
                  [a, inv_n](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor& ga = tp.grad_slot(grads, a);
                    for (std::size_t i = 0; i < ga.rows; ++i) {
                      double* gar = ga.row_ptr(i);
                      for (std::size_t j = 0; j < ga.cols; ++j) gar[j] += g.v[j] * inv_n;
                    }
                  });
  }

  VarId sum_all(VarId a) {
    const Tensor& ta = value(a);
    double s = 0.0;
    for (double x : ta.v) s += x;
    return record("sum_all", Tensor::scalar(s), [a](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
      Tensor& ga = tp.grad_slot(grads, a);
      for (double& x : ga.v) x += g.v[0];
    });
  }

  // log(sum_j exp(x_ij)) per row -> N x 1, computed with max shifting.
  VarId row_logsumexp(VarId a) {
    const Tensor& ta = value(a);
    if (ta.cols == 0) throw ContractError("row_logsumexp: empty rows");
    Tensor out(ta.rows, 1);
    for (std::size_t i = 0; i < ta.rows; ++i) {
      const double* r = ta.row_ptr(i);
      double m = r[0];
      for (std::size_t j = 1; j < ta.cols; ++j) m = std::max(m, r[j]);
      double s = 0.0;
      for (std::size_t j = 0; j < ta.cols; ++j) s += std::exp(r[j] - m);
      out.v[i] = m + std::log(s);
    }
    const VarId self = static_cast<VarId>(nodes_.size());
    return record("row_logsumexp", std::move(out),
                  [a, self](Tape& tp, const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& ta = tp.value(a);
                    const Tensor& lse = tp.value(self);
                    Tensor& ga = tp.grad_slot(grads, a);
                    for (std::size_t i = 0; i < ta.rows; ++i) {
                      const double* r = ta.row_ptr(i);
                      double* gar = ga.row_ptr(i);
                      for (std::size_t j = 0; j < ta.cols; ++j) {
                        gar[j] += g.v[i] * std::exp(r[j] - lse.v[i]);
                      }
                    }
                  });
  }

  // ---- reverse pass ----------------------------------------------------

  struct Gradients {
    std::vector<Tensor> by_id;
    const Tensor& at(VarId id) const { return by_id.at(id); }
  };

  // Gradient of a scalar loss with respect to every leaf. Leaves with no
  // path to the loss get zero tensors of their own shape.
  Gradients backward(VarId loss) {
    if (loss < 0 || static_cast<std::size_t>(loss) >= nodes_.size()) {
      throw ContractError("backward: unknown variable id");
    }
    if (!value(loss).is_scalar()) {
      throw ContractError("backward: loss must be scalar, got " + value(loss).shape_str());
    }
    Gradients g;
    g.by_id.resize(nodes_.size());
    g.by_id[loss] = Tensor::scalar(1.0);
    for (VarId i = loss; i >= 0; --i) {
      if (g.by_id[i].size() == 0 || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, g.by_id[i], g.by_id);
    }
    for (VarId leaf : leaf_ids_) {
      if (g.by_id[leaf].size() == 0) {
        g.by_id[leaf] = Tensor(value(leaf).rows, value(leaf).cols);
      }
    }
    return g;
  }

 private:
  friend struct TapeTestAccess;

  Tensor& grad_slot(std::vector<Tensor>& grads, VarId id) {
    Tensor& slot = grads[id];
    if (slot.size() == 0) slot = Tensor(value(id).rows, value(id).cols);
    return slot;
  }

  void acc_same(std::vector<Tensor>& grads, VarId id, const Tensor& g, double c) {
    Tensor& slot = grad_slot(grads, id);
    for (std::size_t i = 0; i < g.size(); ++i) slot.v[i] += c * g.v[i];
  }

  template <typename F>
  VarId record(const char* op, Tensor out, F&& backward) {
    detail::check_finite(out, op);
    nodes_.push_back(Node{std::move(out), std::forward<F>(backward), false});
    return static_cast<VarId>(nodes_.size() - 1);
  }

  void check_segments(const std::vector<int>& seg, std::size_t rows, std::size_t n_segments,
                      const char* op) const {
    if (seg.size() != rows) {
      throw ContractError(std::string(op) + ": segment ids (" + std::to_string(seg.size()) +
                          ") not aligned with rows (" + std::to_string(rows) + ")");
    }
    for (int s : seg) {
      if (s < 0 || static_cast<std::size_t>(s) >= n_segments) {
        throw ContractError(std::string(op) + ": segment id " + std::to_string(s) +
                            " outside [0, " + std::to_string(n_segments) + ")");
      }
    }
  }

  void fold_kink(bool positive_side) {
    kink_signature_ ^= positive_side ? 0x9e3779b97f4a7c15ull : 0xc2b2ae3d27d4eb4full;
    kink_signature_ *= 0x100000001b3ull;
  }

  // C += A * B (C preallocated, possibly nonzero)
  static void mm_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    for (std::size_t i = 0; i < a.rows; ++i) {
      const double* ar = a.row_ptr(i);
      double* cr = c.row_ptr(i);
      for (std::size_t k = 0; k < a.cols; ++k) {
        const double aik = ar[k];
        if (aik == 0.0) continue;
        const double* br = b.row_ptr(k);
        for (std::size_t j = 0; j < b.cols; ++j) cr[j] += aik * br[j];
      }
    }
  }

  static void mm(const Tensor& a, const Tensor& b, Tensor& c) { mm_acc(a, b, c); }

  // C += A * B^T
  static void mm_nt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    for (std::size_t i = 0; i < a.rows; ++i) {
      const double* ar = a.row_ptr(i);
      double* cr = c.row_ptr(i);
      for (std::size_t j = 0; j < b.rows; ++j) {
        const double* br = b.row_ptr(j);
        double s = 0.0;
        for (std::size_t k = 0; k < a.cols; ++k) s += ar[k] * br[k];
        cr[j] += s;
      }
    }
  }

  // C += A^T * B
  static void mm_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    for (std::size_t k = 0; k < a.rows; ++k) {
      const double* ar = a.row_ptr(k);
      const double* br = b.row_ptr(k);
      for (std::size_t i = 0; i < a.cols; ++i) {
        const double aki = ar[i];
        if (aki == 0.0) continue;
        double* cr = c.row_ptr(i);
        for (std::size_t j = 0; j < b.cols; ++j) cr[j] += aki * br[j];
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<VarId> leaf_ids_;
  std::uint64_t kink_signature_ = 1469598103934665603ull;
};

// ---- gradient checking ---------------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-6;
  // Relative deviation uses max(|analytic|, |numeric|, denom_floor) as the
  // denominator so finite-difference noise on near-zero gradients does not
  // dominate the report.
  double denom_floor = 1e-3;
};

struct GradCheckEntry {
  std::size_t leaf;
  std::size_t index;
  double analytic = 0.0;
  double numeric = 0.0;
  double abs_dev = 0.0;
  double rel_dev = 0.0;
  bool numerical_error = false;
};

struct GradCheckReport {
  bool pass = true;
  double max_abs_dev = 0.0;
  double max_rel_dev = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nondiff = 0;
  std::vector<GradCheckEntry> failures;
};

// Compares the analytic gradient of `program` against central finite
// differences, entry by entry. Probe pairs that straddle a kink of a
// non-smooth primitive (detected via the tape's sign signature) are excluded
// rather than reported as failures.
template <typename Program>
GradCheckReport grad_check(Program&& program, const std::vector<Tensor>& theta,
                           const GradCheckOptions& opt = {}) {
  if (opt.h <= 0.0) throw ContractError("grad_check: step h must be positive");

  Tape base;
  std::vector<VarId> base_leaves;
  base_leaves.reserve(theta.size());
  for (const Tensor& t : theta) base_leaves.push_back(base.leaf(t));
  const VarId loss = program(base, base_leaves);
  if (!base.value(loss).is_scalar()) {
    throw ContractError("grad_check: program output must be scalar");
  }
  const Tape::Gradients analytic = base.backward(loss);

  auto eval_at = [&](const std::vector<Tensor>& point, std::uint64_t* sig) -> double {
    Tape tp;
    std::vector<VarId> ids;
    ids.reserve(point.size());
    for (const Tensor& t : point) ids.push_back(tp.leaf(t));
    const VarId out = program(tp, ids);
    if (sig) *sig = tp.kink_signature();
    return tp.value(out).v[0];
  };

  GradCheckReport report;
  std::vector<Tensor> probe = theta;
  for (std::size_t l = 0; l < theta.size(); ++l) {
    for (std::size_t i = 0; i < theta[l].size(); ++i) {
      const double saved = probe[l].v[i];
      double fp = 0.0, fm = 0.0;
      std::uint64_t sig_p = 0, sig_m = 0;
      bool failed_numerically = false;
      try {
        probe[l].v[i] = saved + opt.h;
        fp = eval_at(probe, &sig_p);
        probe[l].v[i] = saved - opt.h;
        fm = eval_at(probe, &sig_m);
      } catch (const NumericalError&) {
        failed_numerically = true;
      }
      probe[l].v[i] = saved;

      if (failed_numerically) {
        GradCheckEntry e{l, i, analytic.at(base_leaves[l]).v[i], 0.0, 0.0, 0.0, true};
        report.failures.push_back(e);
        report.pass = false;
        continue;
      }
      if (sig_p != sig_m) {
        ++report.skipped_nondiff;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic.at(base_leaves[l]).v[i];
      const double abs_dev = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      const double rel_dev = abs_dev / denom;
      ++report.checked;
      report.max_abs_dev = std::max(report.max_abs_dev, abs_dev);
      report.max_rel_dev = std::max(report.max_rel_dev, rel_dev);
      if (rel_dev > opt.tol) {
        report.failures.push_back(GradCheckEntry{l, i, a, numeric, abs_dev, rel_dev, false});
        report.pass = false;
      }
    }
  }
  return report;
}

}  // namespace hicon
