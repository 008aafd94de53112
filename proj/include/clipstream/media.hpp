#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "clipstream/base.hpp"

namespace clipstream::media {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct ParseError : Error {
  explicit ParseError(const std::string& what)
      : Error("trace parse error: " + what) {}
};

struct InvariantViolation : Error {
  explicit InvariantViolation(const std::string& what)
      : Error("trace invariant violated: " + what) {}
};

struct InvalidParams : Error {
  explicit InvalidParams(const std::string& what)
      : Error("invalid trace parameters: " + what) {}
};

// ---------------------------------------------------------------------------
// Frames and traces
// ---------------------------------------------------------------------------

enum class FrameType : std::uint8_t { kI = 0, kP = 1, kB = 2 };

char frame_type_char(FrameType t);
FrameType frame_type_from_char(char c);  // throws ParseError

struct Frame {
  std::uint32_t index = 0;
  Micros pts = 0;  ///< presentation time, microseconds, trunc(index * 1e6/fps)
  FrameType type = FrameType::kI;
  std::uint32_t size = 0;  ///< payload bytes
  bool reliable = false;   ///< delivery-class tag: true for I frames
};

struct Trace {
  double fps = 24.0;
  double duration_s = 0.0;
  int frames_per_chunk = 96;
  std::vector<Frame> frames;

  std::size_t chunk_count() const;
  std::uint64_t total_bytes() const;
  std::uint64_t reliable_bytes() const;  ///< bytes in frames tagged reliable
  std::size_t chunk_of(std::uint32_t index) const {
    return index / static_cast<std::uint32_t>(frames_per_chunk);
  }
};

// ---------------------------------------------------------------------------
// Synthetic trace generation
// ---------------------------------------------------------------------------

/// Slots of the nominal duration * fps budget reserved for container control
/// records at the tail of the presentation; they carry no media payload and
/// are excluded from the frame list.
inline constexpr int kControlFrameSlots = 3;

struct TraceParams {
  double duration_s = 296.21;
  double fps = 24.0;
  int frames_per_chunk = 96;
  /// Total media payload in decimal megabytes (1 MB = 10^6 bytes).
  double total_mb = 176.0;
  /// Fraction of payload bytes carried by I frames.
  double i_share = 0.12;
  /// Lognormal size jitter, as a coefficient of variation (0 disables).
  double size_jitter = 0.2;
  std::uint64_t seed = 1;

  void validate() const;  // throws InvalidParams
};

/// Deterministically generate a trace. Each chunk is one I frame followed by
/// P/B frames; the final chunk may be short. Frame sizes are lognormally
/// jittered around per-class means, then rescaled so the I-class and P/B-class
/// byte totals are exact.
Trace generate_trace(const TraceParams& params);

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// CSV with the exact header `index,pts_ms,type,size_bytes`.
void write_trace_csv(const Trace& trace, std::ostream& out);

/// Parse and validate a CSV trace. The file does not carry fps, so the
/// caller supplies it; pts values are validated against it. Errors mention
/// 1-based line numbers.
Trace parse_trace_csv(std::istream& in, double fps = 24.0);

/// JSON manifest holding fps, duration, chunk shape, and all frames.
std::string write_manifest_json(const Trace& trace);
Trace parse_manifest_json(const std::string& text);

}  // namespace clipstream::media
