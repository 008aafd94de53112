#pragma once
// Video streaming session layer.
//
// A ServerSession walks a media trace in presentation order and hands each
// frame to the transport under one of four delivery strategies; a
// ClientSession reassembles the byte streams, undoes any erasure coding, and
// classifies every frame as intact, recovered, corrupted, or missing.
//
// All session metadata travels in-band on the reliable control stream
// (stream 0) as fixed-size records, one per frame, written before the
// frame's wire bytes. A record tells the receiver which stream carries the
// frame, at which offset, how many bytes it occupies on the wire, and how it
// was coded, so the receiver can attribute transport-level holes to frames
// and to individual shards.

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "clipstream/base.hpp"
#include "clipstream/fec.hpp"
#include "clipstream/media.hpp"
#include "clipstream/transport.hpp"
#include "clipstream/wire.hpp"

namespace clipstream::session {

/// The reliable control stream delivered bytes that do not parse as a valid
/// record sequence (bad type tag, inconsistent coding geometry, offsets that
/// do not line up, or a truncated tail).
struct ControlStreamCorrupt : Error {
  explicit ControlStreamCorrupt(const std::string& what)
      : Error("control stream corrupt: " + what) {}
};

// ---------------------------------------------------------------------------
// Delivery modes
// ---------------------------------------------------------------------------

/// How frames map onto transport streams.
///  - kTcpLike:       every frame in order on one reliable stream.
///  - kQuicLike:      one reliable stream per chunk.
///  - kClipstream:    I frames on a reliable stream; P/B frames uncoded on
///                    one unreliable stream.
///  - kClipstreamFec: as kClipstream, with P/B frames erasure-coded.
enum class Mode : std::uint8_t {
  kTcpLike = 0,
  kQuicLike = 1,
  kClipstream = 2,
  kClipstreamFec = 3,
};

inline constexpr std::array<Mode, 4> kAllModes = {
    Mode::kTcpLike, Mode::kQuicLike, Mode::kClipstream, Mode::kClipstreamFec};

const char* mode_name(Mode mode);
Mode parse_mode(std::string_view name);  // throws Error on unknown names

bool mode_uses_unreliable(Mode mode);
bool mode_uses_fec(Mode mode);

// ---------------------------------------------------------------------------
// Control records
// ---------------------------------------------------------------------------

/// Fixed-size per-frame record on the control stream (big-endian):
///   index u32 | type u8 | stream_id u32 | offset u64 | length u32 |
///   fec_k u8 | fec_m u8 | shard_size u16 | payload_length u32
/// Uncoded frames carry fec_k = fec_m = shard_size = 0 and
/// length == payload_length. Coded frames carry the shard geometry and
/// length == (fec_k + fec_m) * shard_size: the wire bytes are the shards in
/// positional order, data shards first, the last data shard zero-padded.
struct ControlRecord {
  std::uint32_t index = 0;
  media::FrameType type = media::FrameType::kI;
  std::uint32_t stream_id = 0;
  std::uint64_t offset = 0;
  std::uint32_t length = 0;
  std::uint8_t fec_k = 0;
  std::uint8_t fec_m = 0;
  std::uint16_t shard_size = 0;
  std::uint32_t payload_length = 0;

  bool coded() const { return fec_k != 0; }
};

inline constexpr std::size_t kControlRecordSize = 29;

void append_control_record(std::vector<std::uint8_t>& out,
                           const ControlRecord& rec);
/// Decode exactly kControlRecordSize bytes; validates internal consistency.
ControlRecord decode_control_record(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Deterministic payload content
// ---------------------------------------------------------------------------

/// Generates frame payload bytes deterministically from (content seed,
/// frame index), so a receiver configured with the same seed can verify
/// end-to-end integrity without shipping reference data.
class PayloadSource {
 public:
  explicit PayloadSource(std::uint64_t content_seed) : seed_(content_seed) {}

  std::vector<std::uint8_t> payload(std::uint32_t index,
                                    std::uint32_t size) const;
  /// FNV-1a 64 over payload(index, size).
  std::uint64_t digest(std::uint32_t index, std::uint32_t size) const;

 private:
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class FecPolicy : std::uint8_t { kStatic = 0, kAdaptive = 1 };

struct SessionConfig {
  Mode mode = Mode::kClipstreamFec;
  std::uint16_t shard_size = static_cast<std::uint16_t>(fec::kDefaultShardSize);
  FecPolicy fec_policy = FecPolicy::kStatic;
  std::uint64_t content_seed = 0xC11F57AEull;
  /// Use the OpenMP coding kernels. Leave off when many sessions already run
  /// in parallel with each other.
  bool fec_parallel = false;
  /// Stream at the media cadence, releasing each frame no earlier than this
  /// many seconds ahead of its presentation time (0 = push eagerly). Pacing
  /// keeps a streaming workload from behaving like a bulk download and
  /// overrunning bottleneck queues it does not need.
  double pace_lookahead_s = 0.0;

  void validate() const;  // throws Error
};

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

struct ServerStats {
  std::uint64_t payload_bytes_total = 0;  ///< media bytes fully handed over
  std::uint64_t wire_bytes_total = 0;     ///< stream bytes incl. parity/padding
  std::uint64_t reliable_payload_bytes = 0;
  std::uint64_t unreliable_payload_bytes = 0;
  std::uint64_t parity_overhead_bytes = 0;  ///< wire minus payload, coded frames
  std::uint64_t control_bytes = 0;
  std::uint32_t frames_pushed = 0;
  std::uint32_t reliable_frames = 0;
};

/// Pushes a trace through a transport connection as eagerly as flow credit
/// allows. Drive by calling pump() whenever the connection state may have
/// changed (datagram processed, timer fired); calls are cheap when nothing
/// can move.
class ServerSession {
 public:
  ServerSession(transport::Connection& conn, const media::Trace& trace,
                const SessionConfig& cfg);

  void pump(Micros now);
  /// All frames handed to the transport and final stream markers sent. The
  /// transport may still be retransmitting.
  bool finished() const { return finished_; }
  /// When pacing is on and the next frame is not yet due for release, the
  /// instant pump() should run again even if the transport is idle.
  std::optional<Micros> next_wakeup() const { return wake_; }
  const ServerStats& stats() const { return stats_; }

 private:
  struct PendingWrite {
    std::uint32_t stream_id = 0;
    std::vector<std::uint8_t> bytes;
    std::size_t off = 0;
  };

  bool push_pending();                 // true when fully accepted
  void prepare_frame(std::uint32_t index);
  std::uint32_t route_stream(const media::Frame& frame);
  const fec::Coder& coder_for(const fec::FecParams& params);

  transport::Connection& conn_;
  const media::Trace& trace_;
  SessionConfig cfg_;
  PayloadSource source_;

  std::optional<std::uint32_t> single_sid_;      // tcp-like
  std::map<std::size_t, std::uint32_t> chunk_sids_;  // quic-like
  std::optional<std::uint32_t> reliable_sid_;    // clipstream I-frame stream
  std::optional<std::uint32_t> unreliable_sid_;  // clipstream P/B stream
  std::map<std::uint32_t, std::uint64_t> stream_offsets_;
  std::map<std::tuple<int, int, int>, fec::Coder> coders_;

  std::uint32_t next_frame_ = 0;
  Micros epoch_ = -1;                 // establishment time; pacing reference
  std::optional<Micros> wake_;        // next pacing release, when blocked
  std::deque<PendingWrite> pending_;  // control record first, then wire bytes
  bool frame_in_pending_ = false;     // pending_ tail belongs to next_frame_
  std::uint64_t pending_payload_ = 0;
  std::uint64_t pending_wire_ = 0;
  bool pending_reliable_route_ = false;
  bool finished_ = false;
  ServerStats stats_;
};

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// Final state of one frame at the receiver.
///  - kIntact:     every wire byte arrived.
///  - kRecovered:  erasures occurred but decoding reconstructed the payload.
///  - kCorrupted:  part of the frame is irrecoverably zero-filled.
///  - kMissing:    none of the frame's wire bytes arrived.
///  - kUnresolved: the run ended before the frame's bytes were accounted for.
enum class Outcome : std::uint8_t {
  kIntact = 0,
  kRecovered = 1,
  kCorrupted = 2,
  kMissing = 3,
  kUnresolved = 4,
};

inline constexpr std::size_t kOutcomeCount = 5;

const char* outcome_name(Outcome o);

struct FrameStatus {
  std::uint32_t index = 0;
  media::FrameType type = media::FrameType::kP;
  Outcome outcome = Outcome::kUnresolved;
  Micros complete_time = 0;  ///< when the frame reached its final state
  std::uint32_t payload_length = 0;
  std::uint32_t erased_shards = 0;  ///< coded frames: shards lost in transit
  bool digest_ok = false;
};

struct ClientStats {
  std::array<std::uint32_t, kOutcomeCount> outcome_counts{};
  std::uint32_t digest_failures = 0;  ///< intact/recovered frames failing check
  std::uint64_t wire_bytes_consumed = 0;
};

/// Reassembles frames from a transport connection. Drive by calling pump()
/// with the readable-stream hints from Connection::on_datagram, and plain
/// pump(now, {}) when a timer fires (reordering holes can become consumable
/// through the passage of time alone). Statuses are returned in strictly
/// increasing frame-index order across the whole session.
class ClientSession {
 public:
  ClientSession(transport::Connection& conn, const SessionConfig& cfg,
                std::uint32_t total_frames);

  std::vector<FrameStatus> pump(Micros now,
                                std::span<const std::uint32_t> readable);
  /// Declare every still-unresolved frame kUnresolved at `now` and emit it.
  std::vector<FrameStatus> force_finish(Micros now);
  bool finished() const { return next_emit_ == total_frames_; }
  const ClientStats& stats() const { return stats_; }

 private:
  struct StreamBuf {
    std::uint64_t base = 0;  ///< absolute stream offset of pending.front()
    std::deque<std::uint8_t> pending;
    wire::IntervalSet erased;  ///< absolute zero-filled ranges, inclusive
    bool fin = false;
  };

  void read_stream(std::uint32_t sid, Micros now);
  void parse_control(Micros now);
  void attribute(std::uint32_t sid, Micros now);
  void resolve(const ControlRecord& rec, std::vector<std::uint8_t> bytes,
               const std::vector<std::pair<std::uint64_t, std::uint64_t>>& erased,
               Micros now);
  std::vector<FrameStatus> take_emittable();
  const fec::Coder& coder_for(const fec::FecParams& params);

  transport::Connection& conn_;
  SessionConfig cfg_;
  PayloadSource source_;
  std::uint32_t total_frames_;

  std::map<std::uint32_t, StreamBuf> bufs_;
  std::map<std::uint32_t, std::deque<ControlRecord>> regions_;
  std::map<std::uint32_t, std::uint64_t> expected_offset_;
  std::vector<std::uint32_t> unreliable_sids_;  // always serviced on pump
  std::vector<bool> seen_record_;
  std::map<std::uint32_t, FrameStatus> resolved_;  // awaiting in-order emission
  std::uint32_t next_emit_ = 0;
  std::map<std::tuple<int, int, int>, fec::Coder> coders_;
  ClientStats stats_;
};

}  // namespace clipstream::session
