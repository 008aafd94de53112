#pragma once

// Deterministic end-to-end experiment harness.
//
// One *run* streams a media trace from a server to a client over an emulated
// duplex link (rate, propagation delay, drop-tail queue, random loss) and
// scores the client's playback. The virtual clock advances event-to-event,
// so results depend only on the inputs, never on the wall clock.
//
// A *matrix* sweeps delivery modes x loss rates x repetitions, each run
// seeded by a decorrelated hash of (base seed, mode, loss, rep). Runs are
// independent and may execute in parallel; rows are always emitted in the
// declared sweep order, so output is byte-identical for a given input no
// matter the schedule.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clipstream/base.hpp"
#include "clipstream/media.hpp"
#include "clipstream/player_metrics.hpp"
#include "clipstream/session.hpp"

namespace clipstream::harness {

struct ConfigError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

struct WorldParams {
  double rate_mbps = 20.0;         ///< bottleneck rate, both directions
  double delay_ms = 15.0;          ///< one-way propagation delay
  std::size_t buffer_packets = 1000;
  double loss_rate = 0.0;          ///< per-packet, each direction
  std::uint64_t seed = 1;          ///< fully determines the run
  double deadline_factor = 4.0;    ///< give up after factor x media duration
  /// Mode and coding knobs. Experiments default to paced release (a
  /// streaming server, not a bulk download); set pace_lookahead_s to 0 for
  /// an eager push.
  session::SessionConfig session = [] {
    session::SessionConfig c;
    c.pace_lookahead_s = 1.5;
    return c;
  }();

  void validate() const;  // throws ConfigError
};

struct RunRow {
  session::Mode mode = session::Mode::kTcpLike;
  double loss_rate = 0.0;
  int rep = 0;
  std::uint64_t seed = 0;
  double buf_ratio = 0.0;
  double rate_buf = 0.0;
  double assim = 1.0;
  int mos = 5;
  double startup_s = 0.0;
  std::uint64_t bytes_sent = 0;  ///< server wire bytes, headers included
  double fec_overhead = 0.0;     ///< parity+padding bytes / payload bytes
  bool completed = true;         ///< every frame resolved before the deadline
  // Reliability split of the source payload (not emitted in reports).
  double reliable_share = 0.0;        ///< reliable payload bytes / total
  std::uint32_t reliable_frames = 0;  ///< frames sent on reliable streams
  std::uint32_t frames_total = 0;
};

/// Stream `trace` through an emulated link once and score the playback.
RunRow run_once(const media::Trace& trace, const WorldParams& params);

// ---------------------------------------------------------------------------
// Matrix sweep
// ---------------------------------------------------------------------------

inline constexpr std::array<double, 8> kDefaultLossSweep = {
    0.0, 0.0008, 0.0016, 0.0032, 0.0064, 0.0128, 0.0256, 0.0512};

struct MatrixParams {
  std::vector<session::Mode> modes{session::kAllModes.begin(),
                                   session::kAllModes.end()};
  std::vector<double> loss_rates{kDefaultLossSweep.begin(),
                                 kDefaultLossSweep.end()};
  int reps = 10;
  std::uint64_t base_seed = 1;
  WorldParams world;  ///< loss_rate, seed, and session.mode set per run
  bool parallel = true;

  void validate() const;  // throws ConfigError
};

/// The seed for one cell of the sweep: a decorrelated, order-free hash.
std::uint64_t run_seed(std::uint64_t base_seed, session::Mode mode,
                       double loss_rate, int rep);

struct SummaryStat {
  double mean = 0.0;
  double median = 0.0;  // even samples: mean of the two middle order stats
  double stddev = 0.0;  // population; a single sample has spread zero
};

/// Summarize a non-empty sample. Throws ConfigError on an empty one.
SummaryStat summarize(std::vector<double> values);

struct Aggregate {
  session::Mode mode = session::Mode::kTcpLike;
  double loss_rate = 0.0;
  int n = 0;
  int completed_runs = 0;
  SummaryStat buf_ratio;
  SummaryStat rate_buf;
  SummaryStat assim;
  SummaryStat mos;
  SummaryStat startup_s;
  SummaryStat fec_overhead;
};

struct MatrixResult {
  std::vector<RunRow> rows;  ///< sweep order: mode, then loss, then rep
  std::vector<Aggregate> aggregates;  ///< one per (mode, loss), same order
};

MatrixResult run_matrix(const media::Trace& trace, const MatrixParams& params);

// ---------------------------------------------------------------------------
// Emitters (all deterministic for a given result)
// ---------------------------------------------------------------------------

std::string rows_csv(const MatrixResult& result);
std::string aggregates_csv(const MatrixResult& result);
std::string matrix_json(const MatrixResult& result);
/// Aggregate medians, one gnuplot index block per mode.
std::string matrix_gnuplot(const MatrixResult& result);

}  // namespace clipstream::harness
