#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <string_view>

namespace skimlite {

enum class Phase : std::uint8_t {
  basket_fetch = 0,
  decompress,
  deserialize,
  select,
  write,
  result_transfer,
};

inline constexpr std::size_t kPhaseCount = 6;
inline constexpr std::array<Phase, kPhaseCount> kAllPhases = {
    Phase::basket_fetch, Phase::decompress, Phase::deserialize,
    Phase::select,       Phase::write,      Phase::result_transfer};

std::string_view phase_name(Phase p);

/// Per-phase wall-clock seconds plus job totals. Phases are accumulated at
/// non-overlapping call sites, so their sum never exceeds total_wall.
struct TimingBreakdown {
  std::array<double, kPhaseCount> phase{};
  double total_wall = 0.0;
  double cpu_time = 0.0;

  double& operator[](Phase p) { return phase[static_cast<std::size_t>(p)]; }
  double operator[](Phase p) const { return phase[static_cast<std::size_t>(p)]; }
  double phase_sum() const;
};

/// Accumulator handed down to the engine and transport by whoever wants
/// timings. A null sink means "don't measure".
class TimingSink {
 public:
  void add(Phase p, double seconds) { breakdown_[p] += seconds; }
  const TimingBreakdown& breakdown() const { return breakdown_; }
  TimingBreakdown& breakdown() { return breakdown_; }

 private:
  TimingBreakdown breakdown_;
};

class ScopedPhase {
 public:
  ScopedPhase(TimingSink* sink, Phase phase) : sink_(sink), phase_(phase) {
    if (sink_) start_ = std::chrono::steady_clock::now();
  }
  ~ScopedPhase() {
    if (sink_) {
      const std::chrono::duration<double> d = std::chrono::steady_clock::now() - start_;
      sink_->add(phase_, d.count());
    }
  }
  ScopedPhase(const ScopedPhase&) = delete;
  ScopedPhase& operator=(const ScopedPhase&) = delete;

 private:
  TimingSink* sink_;
  Phase phase_;
  std::chrono::steady_clock::time_point start_;
};

/// CPU seconds consumed by the calling thread.
inline double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + static_cast<double>(ts.tv_nsec) * 1e-9;
}

}  // namespace skimlite
