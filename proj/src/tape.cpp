#include "gaq/tape.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>

#include "gaq/error.hpp"

namespace gaq::ad {

namespace {

void require_same_shape(const Node& a, const Node& b, std::string_view op) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": operand shapes differ");
}

void require(bool ok, std::string_view op, std::string_view what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + std::string(what));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

NodeId Tape::leaf(int rows, int cols, std::vector<double> values, bool requires_grad) {
  require(static_cast<std::size_t>(rows) * cols == values.size(), "leaf", "value count does not match shape");
  Node n;
  n.op = "leaf";
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(values);
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::emplace(std::string_view op, std::vector<NodeId> inputs, int rows, int cols, std::vector<double> value,
                     std::function<void(Tape&, const Node&)> backward) {
  Node n;
  n.op = op;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  if (record_) {
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](NodeId i) { return requires_grad(i); });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

std::vector<double>& Tape::grad_accumulator(NodeId id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(NodeId loss) {
  if (node(loss).size() != 1) throw Error(ErrorCode::NonScalarLoss, "loss node is not a scalar");
  for (Node& n : nodes_) n.grad.clear();
  grad_accumulator(loss)[0] = 1.0;
  for (NodeId id = loss; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, n);
  }
}

// ---- standalone rules ----------------------------------------------------

double ste_linear_backward(double x, const QuantScheme& s, double upstream) {
  return linear_in_range(x, s) ? upstream : 0.0;
}

Vec3 geometric_ste_backward(Vec3 u, Vec3 upstream) {
  if (!(std::abs(norm(u) - 1.0) <= 1e-9)) throw Error(ErrorCode::NotUnit, "projection base is not unit-norm");
  Vec3 r = upstream - dot(u, upstream) * u;
  // A second pass removes the O(eps |g|) radial residue of the first.
  r -= dot(u, r) * u;
  return r;
}

// ---- elementwise ---------------------------------------------------------

NodeId add(Tape& t, NodeId a, NodeId b) {
  require_same_shape(t.node(a), t.node(b), "add");
  const auto& va = t.node(a).value;
  const auto& vb = t.node(b).value;
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return t.emplace("add", {a, b}, t.node(a).rows, t.node(a).cols, std::move(out), [a, b](Tape& tp, const Node& n) {
    for (NodeId in : {a, b}) {
      if (!tp.requires_grad(in)) continue;
      auto& g = tp.grad_accumulator(in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

NodeId sub(Tape& t, NodeId a, NodeId b) {
  require_same_shape(t.node(a), t.node(b), "sub");
  const auto& va = t.node(a).value;
  const auto& vb = t.node(b).value;
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
  return t.emplace("sub", {a, b}, t.node(a).rows, t.node(a).cols, std::move(out), [a, b](Tape& tp, const Node& n) {
    if (tp.requires_grad(a)) {
      auto& g = tp.grad_accumulator(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (tp.requires_grad(b)) {
      auto& g = tp.grad_accumulator(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

NodeId mul(Tape& t, NodeId a, NodeId b) {
  require_same_shape(t.node(a), t.node(b), "mul");
  const auto& va = t.node(a).value;
  const auto& vb = t.node(b).value;
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return t.emplace("mul", {a, b}, t.node(a).rows, t.node(a).cols, std::move(out), [a, b](Tape& tp, const Node& n) {
    if (tp.requires_grad(a)) {
      const auto& vb = tp.value(b);
      auto& g = tp.grad_accumulator(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * vb[i];
    }
    if (tp.requires_grad(b)) {
      const auto& va = tp.value(a);
      auto& g = tp.grad_accumulator(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * va[i];
    }
  });
}

NodeId scale(Tape& t, NodeId a, double c) {
  std::vector<double> out(t.node(a).value);
  for (double& v : out) v *= c;
  return t.emplace("scale", {a}, t.node(a).rows, t.node(a).cols, std::move(out), [a, c](Tape& tp, const Node& n) {
    auto& g = tp.grad_accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
  });
}

NodeId add_row_bias(Tape& t, NodeId a, NodeId b) {
  const Node& na = t.node(a);
  const Node& nb = t.node(b);
  require(nb.rows == 1 && nb.cols == na.cols, "add_row_bias", "bias must be 1 x cols");
  const int rows = na.rows, cols = na.cols;
  std::vector<double> out(na.value);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r * cols + c] += nb.value[c];
  return t.emplace("add_row_bias", {a, b}, rows, cols, std::move(out), [a, b, rows, cols](Tape& tp, const Node& n) {
    if (tp.requires_grad(a)) {
      auto& g = tp.grad_accumulator(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (tp.requires_grad(b)) {
      auto& g = tp.grad_accumulator(b);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) g[c] += n.grad[r * cols + c];
    }
  });
}

NodeId matmul(Tape& t, NodeId a, NodeId b) {
  const Node& na = t.node(a);
  const Node& nb = t.node(b);
  require(na.cols == nb.rows, "matmul", "inner dimensions differ");
  const int n = na.rows, k = na.cols, m = nb.cols;
  std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i) {
    double* orow = out.data() + static_cast<std::size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double aip = na.value[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = nb.value.data() + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return t.emplace("matmul", {a, b}, n, m, std::move(out), [a, b, n, k, m](Tape& tp, const Node& node) {
    const double* g = node.grad.data();
    if (tp.requires_grad(a)) {
      const auto& vb = tp.value(b);
      auto& ga = tp.grad_accumulator(a);
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int j = 0; j < m; ++j) acc += g[i * m + j] * vb[p * m + j];
          ga[i * k + p] += acc;
        }
    }
    if (tp.requires_grad(b)) {
      const auto& va = tp.value(a);
      auto& gb = tp.grad_accumulator(b);
      for (int i = 0; i < n; ++i)
        for (int p = 0; p < k; ++p) {
          const double aip = va[i * k + p];
          if (aip == 0.0) continue;
          for (int j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
        }
    }
  });
}

NodeId silu(Tape& t, NodeId a) {
  std::vector<double> out(t.node(a).value);
  for (double& v : out) v = v * sigmoid(v);
  return t.emplace("silu", {a}, t.node(a).rows, t.node(a).cols, std::move(out), [a](Tape& tp, const Node& n) {
    const auto& x = tp.value(a);
    auto& g = tp.grad_accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = sigmoid(x[i]);
      g[i] += n.grad[i] * (s + x[i] * s * (1.0 - s));
    }
  });
}

// ---- structural ----------------------------------------------------------

NodeId gather_rows(Tape& t, NodeId a, std::span<const int> rows) {
  const Node& na = t.node(a);
  const int cols = na.cols;
  std::vector<int> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * cols);
  for (std::size_t e = 0; e < idx.size(); ++e) {
    require(idx[e] >= 0 && idx[e] < na.rows, "gather_rows", "row index out of range");
    std::copy_n(na.value.begin() + static_cast<std::ptrdiff_t>(idx[e]) * cols, cols, out.begin() + e * cols);
  }
  const int n_out = static_cast<int>(idx.size());
  return t.emplace("gather_rows", {a}, n_out, cols, std::move(out), [a, idx = std::move(idx), cols](Tape& tp, const Node& n) {
    auto& g = tp.grad_accumulator(a);
    for (std::size_t e = 0; e < idx.size(); ++e)
      for (int c = 0; c < cols; ++c) g[static_cast<std::size_t>(idx[e]) * cols + c] += n.grad[e * cols + c];
  });
}

NodeId scatter_add_rows(Tape& t, NodeId a, std::span<const int> idx_in, int n_out) {
  const Node& na = t.node(a);
  require(static_cast<std::size_t>(na.rows) == idx_in.size(), "scatter_add_rows", "index count differs from rows");
  const int cols = na.cols;
  std::vector<int> idx(idx_in.begin(), idx_in.end());
  std::vector<double> out(static_cast<std::size_t>(n_out) * cols, 0.0);
  for (std::size_t e = 0; e < idx.size(); ++e) {
    require(idx[e] >= 0 && idx[e] < n_out, "scatter_add_rows", "target row out of range");
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(idx[e]) * cols + c] += na.value[e * cols + c];
  }
  return t.emplace("scatter_add_rows", {a}, n_out, cols, std::move(out), [a, idx = std::move(idx), cols](Tape& tp, const Node& n) {
    auto& g = tp.grad_accumulator(a);
    for (std::size_t e = 0; e < idx.size(); ++e)
      for (int c = 0; c < cols; ++c) g[e * cols + c] += n.grad[static_cast<std::size_t>(idx[e]) * cols + c];
  });
}

NodeId concat_cols(Tape& t, std::span<const NodeId> parts_in) {
  require(!parts_in.empty(), "concat_cols", "no operands");
  std::vector<NodeId> parts(parts_in.begin(), parts_in.end());
  const int rows = t.node(parts[0]).rows;
  std::vector<int> offsets;
  int cols = 0;
  for (NodeId p : parts) {
    require(t.node(p).rows == rows, "concat_cols", "row counts differ");
    offsets.push_back(cols);
    cols += t.node(p).cols;
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Node& np = t.node(parts[k]);
    for (int r = 0; r < rows; ++r)
      std::copy_n(np.value.begin() + static_cast<std::ptrdiff_t>(r) * np.cols, np.cols,
                  out.begin() + static_cast<std::ptrdiff_t>(r) * cols + offsets[k]);
  }
  return t.emplace("concat_cols", parts, rows, cols, std::move(out),
                   [parts, offsets, rows, cols](Tape& tp, const Node& n) {
                     for (std::size_t k = 0; k < parts.size(); ++k) {
                       if (!tp.requires_grad(parts[k])) continue;
                       const int pc = tp.node(parts[k]).cols;
                       auto& g = tp.grad_accumulator(parts[k]);
                       for (int r = 0; r < rows; ++r)
                         for (int c = 0; c < pc; ++c) g[r * pc + c] += n.grad[r * cols + offsets[k] + c];
                     }
                   });
}

NodeId slice_cols(Tape& t, NodeId a, int begin, int count) {
  const Node& na = t.node(a);
  require(begin >= 0 && count >= 0 && begin + count <= na.cols, "slice_cols", "column range out of bounds");
  const int rows = na.rows, cols = na.cols;
  std::vector<double> out(static_cast<std::size_t>(rows) * count);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < count; ++c) out[r * count + c] = na.value[r * cols + begin + c];
  return t.emplace("slice_cols", {a}, rows, count, std::move(out), [a, begin, count, rows, cols](Tape& tp, const Node& n) {
    auto& g = tp.grad_accumulator(a);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < count; ++c) g[r * cols + begin + c] += n.grad[r * count + c];
  });
}

NodeId mul_rows(Tape& t, NodeId a, NodeId w) {
  const Node& na = t.node(a);
  const Node& nw = t.node(w);
  require(nw.rows == na.rows && nw.cols == 1, "mul_rows", "weights must be rows x 1");
  const int rows = na.rows, cols = na.cols;
  std::vector<double> out(na.value);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r * cols + c] *= nw.value[r];
  return t.emplace("mul_rows", {a, w}, rows, cols, std::move(out), [a, w, rows, cols](Tape& tp, const Node& n) {
    if (tp.requires_grad(a)) {
      const auto& vw = tp.value(w);
      auto& g = tp.grad_accumulator(a);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) g[r * cols + c] += n.grad[r * cols + c] * vw[r];
    }
    if (tp.requires_grad(w)) {
      const auto& va = tp.value(a);
      auto& g = tp.grad_accumulator(w);
      for (int r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += n.grad[r * cols + c] * va[r * cols + c];
        g[r] += acc;
      }
    }
  });
}

NodeId channel_gate(Tape& t, NodeId v, NodeId gate) {
  const Node& nv = t.node(v);
  const Node& ng = t.node(gate);
  require(nv.rows == ng.rows && nv.cols == 3 * ng.cols, "channel_gate", "expected v [n x 3F], g [n x F]");
  const int rows = nv.rows, f = ng.cols;
  std::vector<double> out(nv.value);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < f; ++c)
      for (int k = 0; k < 3; ++k) out[r * 3 * f + 3 * c + k] *= ng.value[r * f + c];
  return t.emplace("channel_gate", {v, gate}, rows, 3 * f, std::move(out), [v, gate, rows, f](Tape& tp, const Node& n) {
    if (tp.requires_grad(v)) {
      const auto& vg = tp.value(gate);
      auto& g = tp.grad_accumulator(v);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < f; ++c)
          for (int k = 0; k < 3; ++k) g[r * 3 * f + 3 * c + k] += n.grad[r * 3 * f + 3 * c + k] * vg[r * f + c];
    }
    if (tp.requires_grad(gate)) {
      const auto& vv = tp.value(v);
      auto& g = tp.grad_accumulator(gate);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < f; ++c) {
          double acc = 0.0;
          for (int k = 0; k < 3; ++k) acc += n.grad[r * 3 * f + 3 * c + k] * vv[r * 3 * f + 3 * c + k];
          g[r * f + c] += acc;
        }
    }
  });
}

NodeId outer_dir(Tape& t, NodeId gate, NodeId u) {
  const Node& ng = t.node(gate);
  const Node& nu = t.node(u);
  require(ng.rows == nu.rows && nu.cols == 3, "outer_dir", "expected g [n x F], u [n x 3]");
  const int rows = ng.rows, f = ng.cols;
  std::vector<double> out(static_cast<std::size_t>(rows) * 3 * f);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < f; ++c)
      for (int k = 0; k < 3; ++k) out[r * 3 * f + 3 * c + k] = ng.value[r * f + c] * nu.value[r * 3 + k];
  return t.emplace("outer_dir", {gate, u}, rows, 3 * f, std::move(out), [gate, u, rows, f](Tape& tp, const Node& n) {
    if (tp.requires_grad(gate)) {
      const auto& vu = tp.value(u);
      auto& g = tp.grad_accumulator(gate);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < f; ++c) {
          double acc = 0.0;
          for (int k = 0; k < 3; ++k) acc += n.grad[r * 3 * f + 3 * c + k] * vu[r * 3 + k];
          g[r * f + c] += acc;
        }
    }
    if (tp.requires_grad(u)) {
      const auto& vg = tp.value(gate);
      auto& g = tp.grad_accumulator(u);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < f; ++c)
          for (int k = 0; k < 3; ++k) g[r * 3 + k] += n.grad[r * 3 * f + 3 * c + k] * vg[r * f + c];
    }
  });
}

NodeId channel_sum(Tape& t, NodeId v) {
  const Node& nv = t.node(v);
  require(nv.cols % 3 == 0, "channel_sum", "columns must be a multiple of 3");
  const int rows = nv.rows, f = nv.cols / 3;
  std::vector<double> out(static_cast<std::size_t>(rows) * 3, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < f; ++c)
      for (int k = 0; k < 3; ++k) out[r * 3 + k] += nv.value[r * 3 * f + 3 * c + k];
  return t.emplace("channel_sum", {v}, rows, 3, std::move(out), [v, rows, f](Tape& tp, const Node& n) {
    auto& g = tp.grad_accumulator(v);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < f; ++c)
        for (int k = 0; k < 3; ++k) g[r * 3 * f + 3 * c + k] += n.grad[r * 3 + k];
  });
}

NodeId channel_norms(Tape& t, NodeId v) {
  const Node& nv = t.node(v);
  require(nv.cols % 3 == 0, "channel_norms", "columns must be a multiple of 3");
  const int rows = nv.rows, f = nv.cols / 3;
  std::vector<double> out(static_cast<std::size_t>(rows) * f);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < f; ++c) {
      const double* p = nv.value.data() + r * 3 * f + 3 * c;
      out[r * f + c] = norm({p[0], p[1], p[2]});
    }
  return t.emplace("channel_norms", {v}, rows, f, std::move(out), [v, rows, f](Tape& tp, const Node& n) {
    const auto& vv = tp.value(v);
    auto& g = tp.grad_accumulator(v);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < f; ++c) {
        const double m = n.value[r * f + c];
        if (m == 0.0) continue;
        const double s = n.grad[r * f + c] / m;
        for (int k = 0; k < 3; ++k) g[r * 3 * f + 3 * c + k] += s * vv[r * 3 * f + 3 * c + k];
      }
  });
}

// ---- reductions ----------------------------------------------------------

NodeId sum_all(Tape& t, NodeId a) {
  double acc = 0.0;
  for (double v : t.node(a).value) acc += v;
  return t.emplace("sum_all", {a}, 1, 1, {acc}, [a](Tape& tp, const Node& n) {
    auto& g = tp.grad_accumulator(a);
    for (double& x : g) x += n.grad[0];
  });
}

NodeId mean_abs(Tape& t, NodeId a) {
  const auto& va = t.node(a).value;
  require(!va.empty(), "mean_abs", "empty operand");
  double acc = 0.0;
  for (double v : va) acc += std::abs(v);
  const double inv = 1.0 / static_cast<double>(va.size());
  return t.emplace("mean_abs", {a}, 1, 1, {acc * inv}, [a, inv](Tape& tp, const Node& n) {
    const auto& x = tp.value(a);
    auto& g = tp.grad_accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * inv * ((x[i] > 0) - (x[i] < 0));
  });
}

NodeId l2_norm(Tape& t, NodeId a) {
  double acc = 0.0;
  for (double v : t.node(a).value) acc += v * v;
  const double r = std::sqrt(acc);
  return t.emplace("l2_norm", {a}, 1, 1, {r}, [a](Tape& tp, const Node& n) {
    const double r = n.value[0];
    if (r == 0.0) return;
    const auto& x = tp.value(a);
    auto& g = tp.grad_accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * x[i] / r;
  });
}

// ---- attention -----------------------------------------------------------

NodeId cosine_attention(Tape& t, NodeId q, NodeId k, std::span<const int> dst_in, std::span<const int> src_in,
                        double tau, double eps) {
  const Node& nq = t.node(q);
  const Node& nk = t.node(k);
  require(nq.cols == nk.cols && nq.rows == nk.rows, "cosine_attention", "query/key shapes differ");
  require(dst_in.size() == src_in.size(), "cosine_attention", "edge arrays differ in length");
  const int n_nodes = nq.rows, d = nq.cols;
  const int n_edges = static_cast<int>(dst_in.size());
  std::vector<int> dst(dst_in.begin(), dst_in.end());
  std::vector<int> src(src_in.begin(), src_in.end());

  // Unit-normalised rows. The norm is clamped below at eps rather than
  // shifted by it, so the cosine is exactly invariant to rescaling.
  std::vector<double> qn(nq.value), kn(nk.value), qnorm(n_nodes), knorm(n_nodes);
  for (int i = 0; i < n_nodes; ++i) {
    double sq = 0.0, sk = 0.0;
    for (int c = 0; c < d; ++c) {
      sq += nq.value[i * d + c] * nq.value[i * d + c];
      sk += nk.value[i * d + c] * nk.value[i * d + c];
    }
    qnorm[i] = std::sqrt(sq);
    knorm[i] = std::sqrt(sk);
    for (int c = 0; c < d; ++c) {
      qn[i * d + c] /= std::max(qnorm[i], eps);
      kn[i * d + c] /= std::max(knorm[i], eps);
    }
  }

  std::vector<double> logits(n_edges);
  for (int e = 0; e < n_edges; ++e) {
    double c = 0.0;
    for (int p = 0; p < d; ++p) c += qn[dst[e] * d + p] * kn[src[e] * d + p];
    logits[e] = tau * c;
  }
  std::vector<double> row_max(n_nodes, -std::numeric_limits<double>::infinity()), row_sum(n_nodes, 0.0);
  for (int e = 0; e < n_edges; ++e) row_max[dst[e]] = std::max(row_max[dst[e]], logits[e]);
  std::vector<double> alpha(n_edges);
  for (int e = 0; e < n_edges; ++e) {
    alpha[e] = std::exp(logits[e] - row_max[dst[e]]);
    row_sum[dst[e]] += alpha[e];
  }
  for (int e = 0; e < n_edges; ++e) alpha[e] /= row_sum[dst[e]];

  return t.emplace(
      "cosine_attention", {q, k}, n_edges, 1, alpha,
      [q, k, dst = std::move(dst), src = std::move(src), qn = std::move(qn), kn = std::move(kn),
       qnorm = std::move(qnorm), knorm = std::move(knorm), tau, eps, n_nodes, d](Tape& tp, const Node& n) {
        const int n_edges = static_cast<int>(dst.size());
        // softmax backward per receiver
        std::vector<double> weighted(n_nodes, 0.0);
        for (int e = 0; e < n_edges; ++e) weighted[dst[e]] += n.value[e] * n.grad[e];
        std::vector<double> dqn(static_cast<std::size_t>(n_nodes) * d, 0.0), dkn(dqn.size(), 0.0);
        for (int e = 0; e < n_edges; ++e) {
          const double dc = tau * n.value[e] * (n.grad[e] - weighted[dst[e]]);
          for (int p = 0; p < d; ++p) {
            dqn[dst[e] * d + p] += dc * kn[src[e] * d + p];
            dkn[src[e] * d + p] += dc * qn[dst[e] * d + p];
          }
        }
        // through x / max(|x|, eps)
        auto through_norm = [&](NodeId id, const std::vector<double>& dxn, const std::vector<double>& norms) {
          if (!tp.requires_grad(id)) return;
          const auto& x = tp.value(id);
          auto& g = tp.grad_accumulator(id);
          for (int i = 0; i < n_nodes; ++i) {
            const double r = norms[i];
            if (r <= eps) {
              for (int p = 0; p < d; ++p) g[i * d + p] += dxn[i * d + p] / eps;
              continue;
            }
            double xd = 0.0;
            for (int p = 0; p < d; ++p) xd += x[i * d + p] * dxn[i * d + p];
            const double b = xd / (r * r * r);
            for (int p = 0; p < d; ++p) g[i * d + p] += dxn[i * d + p] / r - b * x[i * d + p];
          }
        };
        through_norm(q, dqn, qnorm);
        through_norm(k, dkn, knorm);
      });
}

// ---- fake quantization ---------------------------------------------------

NodeId fake_quant_linear(Tape& t, NodeId a, std::span<const QuantScheme> schemes_in) {
  const Node& na = t.node(a);
  require(schemes_in.size() == 1 || schemes_in.size() == static_cast<std::size_t>(na.cols), "fake_quant_linear",
          "need one scheme per column or one for the block");
  std::vector<QuantScheme> schemes(schemes_in.begin(), schemes_in.end());
  const int rows = na.rows, cols = na.cols;
  auto scheme_of = [&schemes](int c) -> const QuantScheme& { return schemes.size() == 1 ? schemes[0] : schemes[c]; };
  std::vector<double> out(na.value.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r * cols + c] = quantize_linear(na.value[r * cols + c], scheme_of(c));
  return t.emplace("fake_quant_linear", {a}, rows, cols, std::move(out),
                   [a, schemes = std::move(schemes), rows, cols](Tape& tp, const Node& n) {
                     const auto& x = tp.value(a);
                     auto& g = tp.grad_accumulator(a);
                     for (int r = 0; r < rows; ++r)
                       for (int c = 0; c < cols; ++c) {
                         const QuantScheme& s = schemes.size() == 1 ? schemes[0] : schemes[c];
                         g[r * cols + c] += ste_linear_backward(x[r * cols + c], s, n.grad[r * cols + c]);
                       }
                   });
}

std::vector<double> weight_column_scales(std::span<const double> w, int rows, int cols, int bits, bool per_tensor) {
  const int qmax = (1 << (bits - 1)) - 1;
  std::vector<double> scales(cols, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) scales[c] = std::max(scales[c], std::abs(w[r * cols + c]));
  if (per_tensor) {
    const double m = cols > 0 ? *std::max_element(scales.begin(), scales.end()) : 0.0;
    std::fill(scales.begin(), scales.end(), m);
  }
  for (double& s : scales) s = s > 0.0 ? s / qmax : 1.0;
  return scales;
}

NodeId fake_quant_weight(Tape& t, NodeId w, int bits, bool per_tensor) {
  const Node& nw = t.node(w);
  const int rows = nw.rows, cols = nw.cols;
  const std::vector<double> scales = weight_column_scales(nw.value, rows, cols, bits, per_tensor);
  std::vector<double> out(nw.value.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out[r * cols + c] = quantize_linear(nw.value[r * cols + c], QuantScheme{bits, QuantKind::LinearSymmetric, scales[c], 0});
  return t.emplace("fake_quant_weight", {w}, rows, cols, std::move(out), [w](Tape& tp, const Node& n) {
    auto& g = tp.grad_accumulator(w);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

NodeId fake_quant_mddq(Tape& t, NodeId v, std::span<const QuantScheme> magnitude_in, const SphericalCodebook& cb,
                       DirectionGrad rule, std::uint64_t* calls) {
  const Node& nv = t.node(v);
  const int rows = nv.rows, f = nv.cols / 3;
  require(nv.cols % 3 == 0 && magnitude_in.size() == static_cast<std::size_t>(f), "fake_quant_mddq",
          "expected v [n x 3F] and F magnitude schemes");
  std::vector<QuantScheme> mags(magnitude_in.begin(), magnitude_in.end());
  std::vector<double> out(nv.value.size(), 0.0);
  // Cached per channel: magnitude, unit direction (e_z fallback), codeword.
  std::vector<double> m(static_cast<std::size_t>(rows) * f), qm(m.size());
  std::vector<Vec3> u(m.size()), code(m.size());
  std::uint64_t lookups = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < f; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * f + c;
      const double* p = nv.value.data() + r * 3 * f + 3 * c;
      const Vec3 vec{p[0], p[1], p[2]};
      m[i] = norm(vec);
      if (m[i] == 0.0) continue;
      u[i] = m[i] < 1e-9 ? Vec3{0, 0, 1} : vec / m[i];
      qm[i] = quantize_magnitude(m[i], mags[c]);
      code[i] = cb.codewords()[static_cast<std::size_t>(cb.nearest_index(u[i]))];
      ++lookups;
      const Vec3 q = qm[i] * code[i];
      double* o = out.data() + r * 3 * f + 3 * c;
      o[0] = q.x;
      o[1] = q.y;
      o[2] = q.z;
    }
  if (calls) *calls += lookups;
  return t.emplace(
      "fake_quant_mddq", {v}, rows, 3 * f, std::move(out),
      [v, mags = std::move(mags), m = std::move(m), qm = std::move(qm), u = std::move(u), code = std::move(code), rule, rows,
       f](Tape& tp, const Node& n) {
        auto& g = tp.grad_accumulator(v);
        auto& stats = tp.ste_stats();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < f; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * f + c;
            if (m[i] < 1e-9) continue;  // degenerate: no gradient through either half
            const double* up = n.grad.data() + r * 3 * f + 3 * c;
            const Vec3 gq{up[0], up[1], up[2]};
            const double dm = magnitude_in_range(m[i], mags[c]) ? dot(gq, code[i]) : 0.0;
            Vec3 du{};
            switch (rule) {
              case DirectionGrad::Geometric: {
                du = geometric_ste_backward(u[i], qm[i] * gq);
                const double radial = std::abs(dot(u[i], du));
                assert(radial <= 1e-10 * std::max(1.0, norm(qm[i] * gq)));
                ++stats.projections;
                stats.max_radial = std::max(stats.max_radial, radial);
                break;
              }
              case DirectionGrad::Euclidean: du = qm[i] * gq; break;
              case DirectionGrad::HardAssignment: break;
            }
            // u = v / |v|: dv = dm * u + (I - u u^T) du / |v|
            const Vec3 tangent = du - dot(u[i], du) * u[i];
            const Vec3 dv = dm * u[i] + tangent / m[i];
            double* gv = g.data() + r * 3 * f + 3 * c;
            gv[0] += dv.x;
            gv[1] += dv.y;
            gv[2] += dv.z;
          }
      });
}

NodeId fake_quant_direction(Tape& t, NodeId v, const SphericalCodebook& cb, DirectionGrad rule) {
  const Node& nv = t.node(v);
  const int rows = nv.rows, f = nv.cols / 3;
  require(nv.cols % 3 == 0, "fake_quant_direction", "expected v [n x 3F]");
  std::vector<double> out(nv.value.size(), 0.0), m(static_cast<std::size_t>(rows) * f);
  std::vector<Vec3> u(m.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < f; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * f + c;
      const double* p = nv.value.data() + r * 3 * f + 3 * c;
      const Vec3 vec{p[0], p[1], p[2]};
      m[i] = norm(vec);
      if (m[i] == 0.0) continue;
      u[i] = vec / m[i];
      const Vec3 q = cb.codewords()[static_cast<std::size_t>(cb.nearest_index(u[i]))];
      double* o = out.data() + r * 3 * f + 3 * c;
      o[0] = q.x;
      o[1] = q.y;
      o[2] = q.z;
    }
  return t.emplace("fake_quant_direction", {v}, rows, 3 * f, std::move(out),
                   [v, m = std::move(m), u = std::move(u), rule, rows, f](Tape& tp, const Node& n) {
                     auto& g = tp.grad_accumulator(v);
                     if (rule == DirectionGrad::HardAssignment) return;  // piecewise constant: no gradient
                     auto& stats = tp.ste_stats();
                     for (int r = 0; r < rows; ++r)
                       for (int c = 0; c < f; ++c) {
                         const std::size_t i = static_cast<std::size_t>(r) * f + c;
                         if (m[i] < 1e-9) continue;
                         const double* up = n.grad.data() + r * 3 * f + 3 * c;
                         Vec3 du{up[0], up[1], up[2]};
                         if (rule == DirectionGrad::Geometric) {
                           du = geometric_ste_backward(u[i], du);
                           ++stats.projections;
                           stats.max_radial = std::max(stats.max_radial, std::abs(dot(u[i], du)));
                         }
                         const Vec3 dv = (du - dot(u[i], du) * u[i]) / m[i];
                         double* gv = g.data() + r * 3 * f + 3 * c;
                         gv[0] += dv.x;
                         gv[1] += dv.y;
                         gv[2] += dv.z;
                       }
                   });
}

// ---- gradient checking ---------------------------------------------------

FiniteDifferenceReport finite_difference_check(
    const TapeFunction& f, std::span<const double> x, std::span<const std::vector<double>> directions, double h,
    const std::function<std::vector<std::int64_t>(std::span<const double>)>& cell_key) {
  const int n = static_cast<int>(x.size());
  auto eval = [&](std::span<const double> at) {
    Tape tp(false);
    const NodeId in = tp.leaf(1, n, std::vector<double>(at.begin(), at.end()), false);
    return tp.scalar_value(f(tp, in));
  };

  Tape tape;
  const NodeId in = tape.leaf(1, n, std::vector<double>(x.begin(), x.end()), true);
  tape.backward(f(tape, in));
  std::vector<double> grad(tape.grad(in).begin(), tape.grad(in).end());
  if (grad.empty()) grad.assign(n, 0.0);

  FiniteDifferenceReport rep;
  const auto base_cell = cell_key ? cell_key(x) : std::vector<std::int64_t>{};
  for (const auto& d : directions) {
    std::vector<double> xp(x.begin(), x.end()), xm(x.begin(), x.end());
    for (int i = 0; i < n; ++i) {
      xp[i] += h * d[i];
      xm[i] -= h * d[i];
    }
    if (cell_key && (cell_key(xp) != base_cell || cell_key(xm) != base_cell)) {
      ++rep.skipped;
      continue;
    }
    double analytic = 0.0;
    for (int i = 0; i < n; ++i) analytic += grad[i] * d[i];
    const double numeric = (eval(xp) - eval(xm)) / (2.0 * h);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
    rep.max_relative_error = std::max(rep.max_relative_error, std::abs(analytic - numeric) / denom);
    rep.analytic.push_back(analytic);
    rep.numeric.push_back(numeric);
    ++rep.checked;
  }
  return rep;
}

}  // namespace gaq::ad
