#include "clipstream/player_metrics.hpp"

#include <algorithm>
#include <cmath>

namespace clipstream::metrics {

void PlayerParams::validate() const {
  if (!(fps > 0.0) || !std::isfinite(fps))
    throw InvalidParams("fps must be positive and finite");
  if (frames_per_chunk == 0)
    throw InvalidParams("frames_per_chunk must be positive");
}

int mos_band(double assim) {
  if (assim >= 0.99) return 5;
  if (assim >= 0.95) return 4;
  if (assim >= 0.88) return 3;
  if (assim >= 0.50) return 2;
  return 1;
}

const char* mos_name(int band) {
  switch (band) {
    case 5: return "excellent";
    case 4: return "good";
    case 3: return "fair";
    case 2: return "poor";
    case 1: return "bad";
    default: throw InvalidParams("mean-opinion band out of range");
  }
}

namespace {

bool displayable(session::Outcome o) {
  return o == session::Outcome::kIntact || o == session::Outcome::kRecovered;
}

bool degraded(session::Outcome o) {
  return o == session::Outcome::kCorrupted || o == session::Outcome::kMissing;
}

}  // namespace

PlaybackReport evaluate_playback(std::span<const session::FrameStatus> statuses,
                                 const PlayerParams& params) {
  params.validate();

  PlaybackReport rep;
  rep.frames_total = static_cast<std::uint32_t>(statuses.size());
  if (statuses.empty()) return rep;

  for (const auto& st : statuses) {
    switch (st.outcome) {
      case session::Outcome::kIntact: ++rep.frames_intact; break;
      case session::Outcome::kRecovered: ++rep.frames_recovered; break;
      case session::Outcome::kCorrupted: ++rep.frames_corrupted; break;
      case session::Outcome::kMissing: ++rep.frames_missing; break;
      case session::Outcome::kUnresolved: ++rep.frames_unresolved; break;
    }
  }
  rep.completed = rep.frames_unresolved == 0;

  // Playback begins when the whole first chunk has resolved.
  const std::size_t first_chunk =
      std::min<std::size_t>(params.frames_per_chunk, statuses.size());
  Micros start = 0;
  for (std::size_t i = 0; i < first_chunk; ++i)
    start = std::max(start, statuses[i].complete_time);
  rep.startup_delay = start;

  // Walk the playout clock.  Stalls push every later due time back.
  Micros acc_stall = 0;
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    const Micros due =
        start +
        static_cast<Micros>(std::llround(static_cast<double>(i) * 1e6 /
                                         params.fps)) +
        acc_stall;
    const auto& st = statuses[i];
    if (displayable(st.outcome) && st.complete_time > due) {
      const Micros stall = st.complete_time - due;
      acc_stall += stall;
      rep.stall_total += stall;
      ++rep.stall_events;
    }
  }

  const auto duration = static_cast<Micros>(std::llround(
      static_cast<double>(statuses.size()) * 1e6 / params.fps));
  rep.buf_ratio = duration > 0
                      ? static_cast<double>(rep.stall_total) /
                            static_cast<double>(duration)
                      : 0.0;
  rep.rate_buf = static_cast<double>(rep.stall_events) /
                 static_cast<double>(statuses.size());

  // Quality scores: per-chunk loss state decays the rest of the chunk.
  double score_sum = 0.0;
  std::uint32_t chunk_losses = 0;
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    if (i % params.frames_per_chunk == 0) chunk_losses = 0;
    const auto o = statuses[i].outcome;
    if (displayable(o)) {
      score_sum += chunk_losses == 0
                       ? 1.0
                       : std::max(kScoreFloor,
                                  std::pow(kErrorDecay, chunk_losses));
    } else if (degraded(o)) {
      score_sum += kDegradedScore;
      ++chunk_losses;
    }
    // Unresolved frames score zero.
  }
  const auto stall_periods = static_cast<std::uint64_t>(std::ceil(
      static_cast<double>(rep.stall_total) * params.fps / 1e6));
  rep.assim = score_sum / static_cast<double>(statuses.size() + stall_periods);
  rep.mos = mos_band(rep.assim);
  return rep;
}

}  // namespace clipstream::metrics
