#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "gaq/codebook.hpp"
#include "gaq/geom.hpp"
#include "gaq/quantizers.hpp"

namespace gaq::ad {

using NodeId = std::int32_t;

class Tape;

/// One recorded operation. Values are dense row-major (rows x cols) blocks;
/// grad has the same shape once backward() reaches the node.
struct Node {
  std::string_view op;
  std::vector<NodeId> inputs;
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::function<void(Tape&, const Node&)> backward;

  std::size_t size() const { return value.size(); }
};

/// Backward rule for the direction half of MDDQ.
enum class DirectionGrad {
  Geometric,      // (I - u u^T) dL/dq
  Euclidean,      // dL/dq passed through unchanged
  HardAssignment  // zero: nearest-codeword selection has no gradient
};

/// Running record of the Geometric STE: the largest |<u, dL/du>| produced by
/// any projection on this tape.
struct GeometricSteStats {
  std::uint64_t projections = 0;
  double max_radial = 0.0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in creation order, so
/// the insertion order is already topological.
class Tape {
 public:
  /// With record == false no backward closures are kept (inference).
  explicit Tape(bool record = true) : record_(record) {}

  NodeId leaf(int rows, int cols, std::vector<double> values, bool requires_grad);
  NodeId constant(int rows, int cols, std::vector<double> values) {
    return leaf(rows, cols, std::move(values), false);
  }
  NodeId scalar(double v) { return constant(1, 1, {v}); }

  NodeId emplace(std::string_view op, std::vector<NodeId> inputs, int rows, int cols, std::vector<double> value,
                 std::function<void(Tape&, const Node&)> backward);

  /// Reverse accumulation from a 1x1 node. Throws NonScalarLoss otherwise.
  void backward(NodeId loss);

  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::span<const double> value(NodeId id) const { return node(id).value; }
  double scalar_value(NodeId id) const { return node(id).value.at(0); }
  /// Empty span when the node received no gradient.
  std::span<const double> grad(NodeId id) const { return node(id).grad; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }

  /// Gradient buffer of `id` (zero-initialised on first use); backward rules
  /// accumulate into it.
  std::vector<double>& grad_accumulator(NodeId id);

  GeometricSteStats& ste_stats() { return ste_stats_; }
  const GeometricSteStats& ste_stats() const { return ste_stats_; }

 private:
  bool record_;
  std::vector<Node> nodes_;
  GeometricSteStats ste_stats_;
};

// ---- standalone backward rules -------------------------------------------

/// Clipped STE for quantize_linear: upstream inside the grid range, 0 when
/// the forward saturated.
double ste_linear_backward(double x, const QuantScheme& s, double upstream);

/// Tangent projection (I - u u^T) g. Throws NotUnit if |u| != 1 (1e-9).
Vec3 geometric_ste_backward(Vec3 u, Vec3 upstream);

// ---- differentiable operations -------------------------------------------

NodeId add(Tape& t, NodeId a, NodeId b);
NodeId sub(Tape& t, NodeId a, NodeId b);
NodeId mul(Tape& t, NodeId a, NodeId b);
NodeId scale(Tape& t, NodeId a, double c);
/// a [n x m] + b [1 x m] broadcast over rows.
NodeId add_row_bias(Tape& t, NodeId a, NodeId b);
NodeId matmul(Tape& t, NodeId a, NodeId b);
NodeId silu(Tape& t, NodeId a);
NodeId gather_rows(Tape& t, NodeId a, std::span<const int> rows);
/// out[idx[e]] += a[e]; result has n_out rows.
NodeId scatter_add_rows(Tape& t, NodeId a, std::span<const int> idx, int n_out);
NodeId concat_cols(Tape& t, std::span<const NodeId> parts);
NodeId slice_cols(Tape& t, NodeId a, int begin, int count);
/// Each row of a [n x c] scaled by w [n x 1].
NodeId mul_rows(Tape& t, NodeId a, NodeId w);
/// Vector block v [n x 3F] with channel c scaled by g [n x F] column c.
NodeId channel_gate(Tape& t, NodeId v, NodeId g);
/// out [n x 3F], channel c of row e = g[e,c] * u[e] for u [n x 3].
NodeId outer_dir(Tape& t, NodeId g, NodeId u);
/// Sum over the F channels of v [n x 3F] -> [n x 3].
NodeId channel_sum(Tape& t, NodeId v);
/// Per-channel Euclidean norms of v [n x 3F] -> [n x F]; zero gradient at 0.
NodeId channel_norms(Tape& t, NodeId v);
/// Sum of all entries -> 1x1.
NodeId sum_all(Tape& t, NodeId a);
/// mean |a| -> 1x1 (subgradient 0 at 0).
NodeId mean_abs(Tape& t, NodeId a);
/// sqrt(sum a^2) -> 1x1 (zero gradient at 0).
NodeId l2_norm(Tape& t, NodeId a);

/// Cosine attention with inverse temperature tau. For every edge e the
/// receiver is dst[e] and the sender src[e]; weights are softmax-normalised
/// over the edges sharing a receiver. Row norms are clamped below at eps.
/// Returns [E x 1].
NodeId cosine_attention(Tape& t, NodeId q, NodeId k, std::span<const int> dst, std::span<const int> src,
                        double tau, double eps = 1e-8);

// ---- fake quantization ---------------------------------------------------

/// Per-column symmetric linear quantization (one scheme per column, or one
/// scheme for the whole block) with the clipped STE.
NodeId fake_quant_linear(Tape& t, NodeId a, std::span<const QuantScheme> schemes);

/// Weight quantization with a per-output-column scale max|w_col| / qmax
/// (or one scale for the whole matrix), recomputed from the current values;
/// STE backward.
NodeId fake_quant_weight(Tape& t, NodeId w, int bits, bool per_tensor = false);

/// MDDQ of every channel of v [n x 3F]; one magnitude scheme per channel.
/// `calls` (optional) is incremented by the number of direction lookups.
NodeId fake_quant_mddq(Tape& t, NodeId v, std::span<const QuantScheme> magnitude, const SphericalCodebook& cb,
                       DirectionGrad rule, std::uint64_t* calls = nullptr);

/// Direction half of MDDQ alone: every channel of v [n x 3F] is replaced by
/// the codeword nearest v / |v| (zero channels stay zero).
NodeId fake_quant_direction(Tape& t, NodeId v, const SphericalCodebook& cb, DirectionGrad rule);

/// Per-column weight scales used by fake_quant_weight.
/// With per_tensor every column gets the same scale.
std::vector<double> weight_column_scales(std::span<const double> w, int rows, int cols, int bits,
                                         bool per_tensor = false);

// ---- gradient checking ---------------------------------------------------

/// Scalar function recorded on a tape: given the input leaf, returns the
/// loss node.
using TapeFunction = std::function<NodeId(Tape&, NodeId)>;

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  int checked = 0;
  int skipped = 0;  // directions whose stencil crossed a quantizer cell boundary
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares <grad, d> with the central difference (f(x+hd) - f(x-hd)) / 2h
/// for each direction. `cell_key`, when given, maps x to an identifier of the
/// active quantization cell; directions whose stencil points land in a
/// different cell are skipped.
FiniteDifferenceReport finite_difference_check(
    const TapeFunction& f, std::span<const double> x, std::span<const std::vector<double>> directions, double h,
    const std::function<std::vector<std::int64_t>(std::span<const double>)>& cell_key = {});

}  // namespace gaq::ad
