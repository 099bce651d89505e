#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gaq/model.hpp"

namespace gaq {

struct BenchReport {
  std::string op;
  int bits = 32;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t bytes = 0;         // analytic: weights + activation + output
  std::int64_t weight_bytes = 0;  // analytic: weights only
  double us_median = 0.0;
  double us_p10 = 0.0;
  double us_p90 = 0.0;
  double speedup_vs_fp32 = 1.0;
  bool compute_bound = false;  // below the memory-bound size threshold
  // Numerical validation against an fp64 reference (GEMV only).
  double max_abs_error = 0.0;
  double error_bound = 0.0;
  bool validated = false;
};

struct BenchOptions {
  int trials = 30;
  int warmup = 5;
  std::int64_t cache_bytes = 0;  // last-level cache estimate; 0 = detect
  std::uint64_t seed = 0;
  bool validate = true;
  bool strict = false;  // throw InsufficientSize instead of flagging
};

/// Last-level cache size from sysfs, or 32 MiB when unavailable.
std::int64_t detect_cache_bytes();

/// Analytic weight bytes of a rows x cols matrix at `bits` (INT4 rounds up).
std::int64_t gemv_weight_bytes(std::int64_t rows, std::int64_t cols, int bits);

/// Smallest square-ish shape whose fp32 footprint is at least `factor`
/// times the cache estimate.
std::pair<std::int64_t, std::int64_t> memory_bound_shape(std::int64_t cache_bytes, double factor = 8.0);

/// Single-threaded y = W x with W stored at `bits` (4, 8 or 32) and a
/// per-row scale for the integer widths. Sizes whose fp32 footprint is below
/// 8x the cache estimate are flagged compute-bound.
BenchReport bench_gemv(std::int64_t rows, std::int64_t cols, int bits, const BenchOptions& opts = {});

/// Fills speedup_vs_fp32 of every report from the fp32 report of the same shape.
void fill_speedups(std::span<BenchReport> reports);

/// Per-phase latency of the model forward (the four profiler phases plus a
/// "Total" row). Weight bytes are counted at the mode's weight width.
std::vector<BenchReport> bench_model_breakdown(const Model& model, const MolecularFrame& frame, int trials = 30,
                                               int warmup = 5);

struct ComplexityConfig {
  std::string arch;  // painn | spookynet | nequip | so3krates
  int l_max = 1;
  int channels = 32;
  double atoms = 1;
  double neighbors = 1;
  int bits = 32;
};

struct ComplexityRow {
  ComplexityConfig config;
  double per_edge_factor = 0.0;
  double c_full = 0.0;
  double c_quant = 0.0;
  double gain = 0.0;  // c_quant / c_full = bits / 32
};

/// Per-layer full-precision cost n <N> * factor, with factor 4F (PaiNN),
/// (l+1)^2 F (SpookyNet), (l+1)^6 F (NequIP) or (l+1)^2 + F (So3krates),
/// scaled by rho_k = k / 32.
std::vector<ComplexityRow> complexity_table(std::span<const ComplexityConfig> configs);

void write_bench_csv(std::ostream& os, std::span<const BenchReport> reports);
void write_complexity_csv(std::ostream& os, std::span<const ComplexityRow> rows);

}  // namespace gaq
