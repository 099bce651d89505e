#pragma once

#include <array>
#include <chrono>
#include <string_view>

namespace gaq {

/// Latency phases of one model forward.
enum class Phase { WeightIO = 0, Gemm = 1, QuantOverhead = 2, Attention = 3 };
inline constexpr int kPhaseCount = 4;

inline std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::WeightIO: return "Memory I/O (Weights)";
    case Phase::Gemm: return "Compute (GEMM)";
    case Phase::QuantOverhead: return "Quant Overhead";
    case Phase::Attention: return "Attention";
  }
  return "?";
}

class PhaseProfiler {
 public:
  using Clock = std::chrono::steady_clock;

  void add(Phase p, Clock::duration d) { totals_[static_cast<int>(p)] += d; }
  double microseconds(Phase p) const {
    return std::chrono::duration<double, std::micro>(totals_[static_cast<int>(p)]).count();
  }
  void reset() { totals_ = {}; }

 private:
  std::array<Clock::duration, kPhaseCount> totals_{};
};

/// Times the enclosing scope into `profiler` (no-op when null). Scopes must
/// not nest.
class ScopedPhase {
 public:
  ScopedPhase(PhaseProfiler* profiler, Phase p) : profiler_(profiler), phase_(p) {
    if (profiler_) start_ = PhaseProfiler::Clock::now();
  }
  ~ScopedPhase() {
    if (profiler_) profiler_->add(phase_, PhaseProfiler::Clock::now() - start_);
  }
  ScopedPhase(const ScopedPhase&) = delete;
  ScopedPhase& operator=(const ScopedPhase&) = delete;

 private:
  PhaseProfiler* profiler_;
  Phase phase_;
  PhaseProfiler::Clock::time_point start_{};
};

}  // namespace gaq
