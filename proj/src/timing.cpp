#include "skimlite/timing.hpp"

namespace skimlite {

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::basket_fetch: return "basket_fetch";
    case Phase::decompress: return "decompress";
    case Phase::deserialize: return "deserialize";
    case Phase::select: return "select";
    case Phase::write: return "write";
    case Phase::result_transfer: return "result_transfer";
  }
  return "unknown";
}

double TimingBreakdown::phase_sum() const {
  double s = 0.0;
  for (auto v : phase) s += v;
  return s;
}

}  // namespace skimlite
