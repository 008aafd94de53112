#pragma once

// Playback-quality metrics. Replays a sequence of per-frame delivery
// outcomes against an idealized player clock and reports rebuffering and
// picture-quality aggregates:
//
//   * Playback starts once every frame of the first chunk has resolved;
//     that wait is the startup delay and is excluded from stall metrics.
//   * Each frame falls due one frame period after its predecessor.  A
//     displayable frame (intact or recovered) that resolves after its due
//     time stalls playback until it resolves, pushing every later due time
//     back by the stall length.  Frames that resolved as corrupted or
//     missing never stall: the player renders degraded output and moves on.
//   * Picture quality is scored per frame: clean chunks score 1.0, and each
//     corrupted or missing frame scores 0.30 and degrades the rest of its
//     chunk geometrically (factor 0.85 per loss, floored at 0.20) until the
//     next chunk resets the error state.  Frames that never resolved score
//     zero.  The average is diluted by one frame-period per stalled period,
//     and the result maps onto a five-band mean-opinion score.

#include <cstdint>
#include <span>

#include "clipstream/base.hpp"
#include "clipstream/session.hpp"

namespace clipstream::metrics {

struct InvalidParams : Error {
  using Error::Error;
};

struct PlayerParams {
  double fps = 24.0;
  std::uint32_t frames_per_chunk = 96;

  void validate() const;
};

// Per-frame quality score constants.
inline constexpr double kDegradedScore = 0.30;   // a corrupted/missing frame
inline constexpr double kErrorDecay = 0.85;      // per prior loss in the chunk
inline constexpr double kScoreFloor = 0.20;      // decay never goes below this

struct PlaybackReport {
  Micros startup_delay = 0;   // session start until the first chunk resolved
  Micros stall_total = 0;     // summed stall time, startup excluded
  std::uint32_t stall_events = 0;
  double buf_ratio = 0.0;     // stall_total / media duration
  double rate_buf = 0.0;      // stall_events / frame count
  double assim = 1.0;         // average per-frame quality score in [0, 1]
  int mos = 5;                // 1 (bad) .. 5 (excellent), banded from assim
  std::uint32_t frames_total = 0;
  std::uint32_t frames_intact = 0;
  std::uint32_t frames_recovered = 0;
  std::uint32_t frames_corrupted = 0;
  std::uint32_t frames_missing = 0;
  std::uint32_t frames_unresolved = 0;
  bool completed = true;      // no frame was left unresolved
};

// Maps an average quality score onto the five-band mean-opinion scale.
int mos_band(double assim);

// Human-readable name for a band: 1 -> "bad" .. 5 -> "excellent".
const char* mos_name(int band);

// Replays `statuses` (frame i of the presentation at position i, as emitted
// by the session client) against the player clock described above.
PlaybackReport evaluate_playback(std::span<const session::FrameStatus> statuses,
                                 const PlayerParams& params);

}  // namespace clipstream::metrics
