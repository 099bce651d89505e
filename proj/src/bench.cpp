#include "gaq/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <random>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "gaq/error.hpp"
#include "gaq/profiler.hpp"

namespace gaq {

std::int64_t detect_cache_bytes() {
  std::int64_t best = 0;
  for (int idx = 0; idx < 8; ++idx) {
    std::ifstream in("/sys/devices/system/cpu/cpu0/cache/index" + std::to_string(idx) + "/size");
    std::string s;
    if (!(in >> s) || s.empty()) continue;
    std::int64_t mult = 1;
    const char unit = s.back();
    if (unit == 'K') mult = 1024;
    if (unit == 'M') mult = 1024 * 1024;
    if (unit == 'K' || unit == 'M') s.pop_back();
    try {
      best = std::max<std::int64_t>(best, std::stoll(s) * mult);
    } catch (const std::exception&) {
    }
  }
  return best > 0 ? best : std::int64_t{32} << 20;
}

std::int64_t gemv_weight_bytes(std::int64_t rows, std::int64_t cols, int bits) {
  return rows * ((cols * bits + 7) / 8);
}

std::pair<std::int64_t, std::int64_t> memory_bound_shape(std::int64_t cache_bytes, double factor) {
  constexpr std::int64_t cols = 16384;
  const auto elements = static_cast<std::int64_t>(std::ceil(factor * static_cast<double>(cache_bytes) / 4.0));
  std::int64_t rows = (elements + cols - 1) / cols;
  rows = (rows + 63) / 64 * 64;
  return {rows, cols};
}

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(v.size() - 1, lo + 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Sixteen independent accumulators let the compiler vectorise the portable
// reductions. With AVX-512 each kernel has an explicit two-accumulator path;
// all three widths get the same treatment so the timings stay comparable.
constexpr int kLanes = 16;

#if defined(__AVX512F__)
float gemv_row_f32(const float* row, const float* x, std::int64_t cols, std::int64_t& c) {
  __m512 a0 = _mm512_setzero_ps(), a1 = _mm512_setzero_ps();
  for (; c + 32 <= cols; c += 32) {
    a0 = _mm512_fmadd_ps(_mm512_loadu_ps(row + c), _mm512_loadu_ps(x + c), a0);
    a1 = _mm512_fmadd_ps(_mm512_loadu_ps(row + c + 16), _mm512_loadu_ps(x + c + 16), a1);
  }
  return _mm512_reduce_add_ps(_mm512_add_ps(a0, a1));
}

float gemv_row_i8(const std::int8_t* row, const float* x, std::int64_t cols, std::int64_t& c) {
  __m512 a0 = _mm512_setzero_ps(), a1 = _mm512_setzero_ps();
  for (; c + 32 <= cols; c += 32) {
    const __m256i b = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(row + c));
    const __m512 w0 = _mm512_cvtepi32_ps(_mm512_cvtepi8_epi32(_mm256_castsi256_si128(b)));
    const __m512 w1 = _mm512_cvtepi32_ps(_mm512_cvtepi8_epi32(_mm256_extracti128_si256(b, 1)));
    a0 = _mm512_fmadd_ps(w0, _mm512_loadu_ps(x + c), a0);
    a1 = _mm512_fmadd_ps(w1, _mm512_loadu_ps(x + c + 16), a1);
  }
  return _mm512_reduce_add_ps(_mm512_add_ps(a0, a1));
}

// The 16-entry table lives in one register; codes select from it by permute.
float gemv_row_i4(const std::uint8_t* row, const float* table, const float* x, std::int64_t cols, std::int64_t& c) {
  const __m512 lut = _mm512_loadu_ps(table);
  __m512 a0 = _mm512_setzero_ps(), a1 = _mm512_setzero_ps();
  const auto indices = [](const std::uint8_t* p) {
    // Eight bytes -> sixteen indices, low nibble first.
    const __m128i b = _mm_cvtepu8_epi16(_mm_loadl_epi64(reinterpret_cast<const __m128i*>(p)));
    const __m128i lo = _mm_and_si128(b, _mm_set1_epi16(15));
    const __m128i hi = _mm_srli_epi16(b, 4);
    return _mm512_cvtepu8_epi32(_mm_or_si128(lo, _mm_slli_epi16(hi, 8)));
  };
  for (; c + 32 <= cols; c += 32) {
    a0 = _mm512_fmadd_ps(_mm512_permutexvar_ps(indices(row + c / 2), lut), _mm512_loadu_ps(x + c), a0);
    a1 = _mm512_fmadd_ps(_mm512_permutexvar_ps(indices(row + c / 2 + 8), lut), _mm512_loadu_ps(x + c + 16), a1);
  }
  return _mm512_reduce_add_ps(_mm512_add_ps(a0, a1));
}
#endif

void gemv_f32(const float* w, const float* x, float* y, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = w + r * cols;
    std::int64_t c = 0;
    float s = 0.0f;
#if defined(__AVX512F__)
    s += gemv_row_f32(row, x, cols, c);
#endif
    float acc[kLanes] = {};
    for (; c + kLanes <= cols; c += kLanes)
      for (int k = 0; k < kLanes; ++k) acc[k] += row[c + k] * x[c + k];
    for (; c < cols; ++c) s += row[c] * x[c];
    for (float a : acc) s += a;
    y[r] = s;
  }
}

void gemv_i8(const std::int8_t* w, const float* scale, const float* x, float* y, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int8_t* row = w + r * cols;
    std::int64_t c = 0;
    float s = 0.0f;
#if defined(__AVX512F__)
    s += gemv_row_i8(row, x, cols, c);
#endif
    float acc[kLanes] = {};
    for (; c + kLanes <= cols; c += kLanes)
      for (int k = 0; k < kLanes; ++k) acc[k] += static_cast<float>(row[c + k]) * x[c + k];
    for (; c < cols; ++c) s += static_cast<float>(row[c]) * x[c];
    for (float a : acc) s += a;
    y[r] = s * scale[r];
  }
}

// Two codes per byte, LSB first; each row dequantizes through its own
// 16-entry table.
void gemv_i4(const std::uint8_t* w, const float* lut, const float* x, float* y, std::int64_t rows, std::int64_t cols) {
  const std::int64_t row_bytes = (cols + 1) / 2;
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::uint8_t* row = w + r * row_bytes;
    const float* t = lut + r * 16;
    std::int64_t c = 0;
    float s = 0.0f;
#if defined(__AVX512F__)
    s += gemv_row_i4(row, t, x, cols, c);
#endif
    float a0 = 0.0f, a1 = 0.0f;
    for (; c + 1 < cols; c += 2) {
      a0 += t[row[c / 2] & 15] * x[c];
      a1 += t[row[c / 2] >> 4] * x[c + 1];
    }
    for (; c < cols; ++c) s += t[row[c / 2] & 15] * x[c];
    y[r] = s + a0 + a1;
  }
}

}  // namespace

BenchReport bench_gemv(std::int64_t rows, std::int64_t cols, int bits, const BenchOptions& opts) {
  if (bits != 4 && bits != 8 && bits != 32) throw Error(ErrorCode::UsageError, "bits must be 4, 8 or 32");
  if (rows < 1 || cols < 1) throw Error(ErrorCode::InvalidSize, "empty GEMV shape");
  if (opts.trials < 1 || opts.warmup < 0) throw Error(ErrorCode::UsageError, "trials must be >= 1");
  const std::int64_t cache = opts.cache_bytes > 0 ? opts.cache_bytes : detect_cache_bytes();

  BenchReport rep;
  rep.op = "gemv";
  rep.bits = bits;
  rep.rows = rows;
  rep.cols = cols;
  rep.weight_bytes = gemv_weight_bytes(rows, cols, bits);
  rep.bytes = rep.weight_bytes + 4 * cols + 4 * rows;
  rep.compute_bound = rows * cols * 4 < 8 * cache;
  if (rep.compute_bound && opts.strict)
    throw Error(ErrorCode::InsufficientSize, "fp32 footprint " + std::to_string(rows * cols * 4) +
                                                 " B is below 8x the cache estimate " + std::to_string(cache) + " B");

  std::mt19937_64 xrng(opts.seed);
  std::uniform_real_distribution<float> unit(-1.0f, 1.0f);
  std::vector<float> x(cols);
  for (float& v : x) v = unit(xrng);

  // Rows are generated independently so the fp64 reference and error bound
  // come for free while the matrix is built.
  std::vector<float> w32;
  std::vector<std::int8_t> w8;
  std::vector<std::uint8_t> w4;
  std::vector<float> scale(rows), lut;
  std::vector<double> reference(rows), bound(rows);
  const std::int64_t row_bytes4 = (cols + 1) / 2;
  if (bits == 32) w32.resize(static_cast<std::size_t>(rows * cols));
  if (bits == 8) w8.resize(static_cast<std::size_t>(rows * cols));
  if (bits == 4) {
    w4.assign(static_cast<std::size_t>(rows * row_bytes4), 0);
    lut.resize(static_cast<std::size_t>(rows * 16));
  }
  std::vector<float> row(cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::mt19937_64 rng(opts.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(r) + 1);
    float maxabs = 0.0f;
    double ref = 0.0, mag = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      row[c] = unit(rng);
      maxabs = std::max(maxabs, std::abs(row[c]));
      ref += static_cast<double>(row[c]) * x[c];
      mag += std::abs(static_cast<double>(row[c]) * x[c]);
    }
    reference[r] = ref;
    if (bits == 32) {
      std::copy(row.begin(), row.end(), w32.begin() + r * cols);
      // Worst-case float summation error.
      bound[r] = static_cast<double>(cols) * std::numeric_limits<float>::epsilon() * mag;
      continue;
    }
    const int qmax = (1 << (bits - 1)) - 1;
    const float s = maxabs > 0.0f ? maxabs / static_cast<float>(qmax) : 1.0f;
    scale[r] = s;
    bound[r] = static_cast<double>(s) * static_cast<double>(cols);
    for (std::int64_t c = 0; c < cols; ++c) {
      const int code = std::clamp(static_cast<int>(std::lround(row[c] / s)), -qmax, qmax);
      if (bits == 8) {
        w8[r * cols + c] = static_cast<std::int8_t>(code);
      } else {
        w4[r * row_bytes4 + c / 2] |= static_cast<std::uint8_t>((code + 8) << (4 * (c & 1)));
      }
    }
    if (bits == 4)
      for (int k = 0; k < 16; ++k) lut[r * 16 + k] = static_cast<float>(k - 8) * s;
  }

  std::vector<float> y(rows);
  auto run = [&] {
    if (bits == 32) gemv_f32(w32.data(), x.data(), y.data(), rows, cols);
    if (bits == 8) gemv_i8(w8.data(), scale.data(), x.data(), y.data(), rows, cols);
    if (bits == 4) gemv_i4(w4.data(), lut.data(), x.data(), y.data(), rows, cols);
  };
  for (int k = 0; k < opts.warmup; ++k) run();
  std::vector<double> times;
  for (int k = 0; k < opts.trials; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  rep.us_median = percentile(times, 0.5);
  rep.us_p10 = percentile(times, 0.1);
  rep.us_p90 = percentile(times, 0.9);

  if (opts.validate) {
    rep.validated = true;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double err = std::abs(static_cast<double>(y[r]) - reference[r]);
      rep.max_abs_error = std::max(rep.max_abs_error, err);
      rep.error_bound = std::max(rep.error_bound, bound[r]);
      if (!(err <= bound[r])) rep.validated = false;
    }
  }
  return rep;
}

void fill_speedups(std::span<BenchReport> reports) {
  for (BenchReport& r : reports) {
    r.speedup_vs_fp32 = std::numeric_limits<double>::quiet_NaN();
    for (const BenchReport& base : reports)
      if (base.op == r.op && base.bits == 32 && base.rows == r.rows && base.cols == r.cols && r.us_median > 0.0)
        r.speedup_vs_fp32 = base.us_median / r.us_median;
  }
}

std::vector<BenchReport> bench_model_breakdown(const Model& model, const MolecularFrame& frame, int trials, int warmup) {
  if (trials < 1 || warmup < 0) throw Error(ErrorCode::UsageError, "trials must be >= 1");
  const int bits = model.config().weight_bits();
  std::vector<std::vector<double>> phase_us(kPhaseCount);
  std::vector<double> total_us;
  PhaseProfiler prof;
  ForwardOptions opts;
  opts.profiler = &prof;
  for (int k = 0; k < warmup + trials; ++k) {
    prof.reset();
    const auto t0 = std::chrono::steady_clock::now();
    predict(model, frame, opts);
    const auto t1 = std::chrono::steady_clock::now();
    if (k < warmup) continue;
    for (int p = 0; p < kPhaseCount; ++p) phase_us[p].push_back(prof.microseconds(static_cast<Phase>(p)));
    total_us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  const auto weight_bytes =
      static_cast<std::int64_t>((model.weight_element_count() * static_cast<std::size_t>(bits) + 7) / 8);
  std::vector<BenchReport> out;
  auto row = [&](std::string name, const std::vector<double>& us, std::int64_t bytes) {
    BenchReport r;
    r.op = std::move(name);
    r.bits = bits;
    r.rows = static_cast<std::int64_t>(frame.atom_count());
    r.cols = 0;
    r.bytes = bytes;
    r.weight_bytes = bytes;
    r.us_median = percentile(us, 0.5);
    r.us_p10 = percentile(us, 0.1);
    r.us_p90 = percentile(us, 0.9);
    r.speedup_vs_fp32 = std::numeric_limits<double>::quiet_NaN();
    out.push_back(std::move(r));
  };
  for (int p = 0; p < kPhaseCount; ++p)
    row(std::string(phase_name(static_cast<Phase>(p))), phase_us[p], p == static_cast<int>(Phase::WeightIO) ? weight_bytes : 0);
  row("Total", total_us, weight_bytes);
  return out;
}

std::vector<ComplexityRow> complexity_table(std::span<const ComplexityConfig> configs) {
  std::vector<ComplexityRow> out;
  for (const ComplexityConfig& c : configs) {
    if (c.l_max < 0 || c.channels < 1 || !(c.atoms > 0) || !(c.neighbors > 0) || c.bits < 1)
      throw Error(ErrorCode::UsageError, "complexity parameters must be positive");
    const double l1 = c.l_max + 1.0;
    const double f = c.channels;
    double factor = 0.0;
    if (c.arch == "painn")
      factor = 4.0 * f;
    else if (c.arch == "spookynet")
      factor = l1 * l1 * f;
    else if (c.arch == "nequip")
      factor = std::pow(l1, 6) * f;
    else if (c.arch == "so3krates")
      factor = l1 * l1 + f;
    else
      throw Error(ErrorCode::UsageError, "unknown architecture '" + c.arch + "'");
    ComplexityRow r;
    r.config = c;
    r.per_edge_factor = factor;
    r.c_full = c.atoms * c.neighbors * factor;
    r.gain = c.bits / 32.0;
    r.c_quant = r.c_full * r.gain;
    out.push_back(r);
  }
  return out;
}

void write_bench_csv(std::ostream& os, std::span<const BenchReport> reports) {
  os << "op,bits,rows,cols,bytes,us_median,us_p10,us_p90,speedup_vs_fp32\n";
  char buf[512];
  for (const BenchReport& r : reports) {
    std::snprintf(buf, sizeof buf, "%s,%d,%lld,%lld,%lld,%.3f,%.3f,%.3f,%.4f\n", r.op.c_str(), r.bits,
                  static_cast<long long>(r.rows), static_cast<long long>(r.cols), static_cast<long long>(r.bytes),
                  r.us_median, r.us_p10, r.us_p90, r.speedup_vs_fp32);
    os << buf;
  }
}

void write_complexity_csv(std::ostream& os, std::span<const ComplexityRow> rows) {
  os << "arch,l_max,channels,atoms,neighbors,bits,per_edge_factor,c_full,c_quant,gain\n";
  char buf[512];
  for (const ComplexityRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g,%.17g,%d,%.17g,%.17g,%.17g,%.17g\n", r.config.arch.c_str(),
                  r.config.l_max, r.config.channels, r.config.atoms, r.config.neighbors, r.config.bits,
                  r.per_edge_factor, r.c_full, r.c_quant, r.gain);
    os << buf;
  }
}

}  // namespace gaq
