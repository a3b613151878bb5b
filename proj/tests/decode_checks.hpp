#pragma once

// Trace invariants shared by the decoder unit tests and the acceptance run.

#include <string>

#include "maskgit/decoder.hpp"

namespace maskgit::testing {

/// Empty string when the result satisfies the decode contract for
/// `initial`, otherwise a description of the first violation.
inline std::string check_decode_contract(const TokenGrid& initial, const DecodeResult& r, const DecodeOptions& opts) {
  const std::size_t masked0 = initial.masked_count();
  if (masked0 == 0) return r.predict_passes == 0 && r.grid == initial ? "" : "empty mask altered the grid";
  if (r.predict_passes != opts.iterations) {
    return "predict passes " + std::to_string(r.predict_passes) + " != T " + std::to_string(opts.iterations);
  }
  if (r.trace.size() != static_cast<std::size_t>(opts.iterations)) return "trace length differs from T";
  const MaskCountPlan plan = plan_decode_masks(opts.schedule, opts.iterations, masked0);
  TokenGrid prev = initial;
  for (const DecodeState& s : r.trace) {
    const std::size_t t = static_cast<std::size_t>(s.t);
    if (s.grid.masked_count() != plan.remaining[t]) {
      return "masked count " + std::to_string(s.grid.masked_count()) + " != plan " +
             std::to_string(plan.remaining[t]) + " at t=" + std::to_string(t);
    }
    for (std::size_t i = 0; i < s.grid.size(); ++i) {
      if (!prev.mask[i] && (s.grid.mask[i] || s.grid.tokens[i] != prev.tokens[i])) {
        return "position " + std::to_string(i) + " changed after commitment at t=" + std::to_string(t);
      }
      if (!initial.mask[i] && (s.grid.mask[i] || s.grid.tokens[i] != initial.tokens[i])) {
        return "frozen position " + std::to_string(i) + " changed at t=" + std::to_string(t);
      }
      if (!prev.mask[i] && s.confidences[i] != 1.0) {
        return "unmasked position " + std::to_string(i) + " has confidence != 1";
      }
      if (prev.mask[i] && !(s.confidences[i] >= 0.0 && s.confidences[i] <= 1.0)) {
        return "confidence outside [0, 1]";
      }
    }
    prev = s.grid;
  }
  if (!r.grid.fully_unmasked() || !(r.grid == prev)) return "final grid is not the last trace state";
  return "";
}

}  // namespace maskgit::testing
