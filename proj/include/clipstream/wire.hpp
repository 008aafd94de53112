#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "clipstream/base.hpp"

namespace clipstream::wire {

// ---------------------------------------------------------------------------
// Constants
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::size_t kHeaderSize = 18;
inline constexpr std::uint8_t kFlagHandshake = 0x01;

inline constexpr std::uint8_t kFramePadding = 0x00;
inline constexpr std::uint8_t kFrameStream = 0x01;
inline constexpr std::uint8_t kFrameAck = 0x02;
inline constexpr std::uint8_t kFrameHandshake = 0x03;
inline constexpr std::uint8_t kFrameMaxData = 0x04;
inline constexpr std::uint8_t kFrameMaxStreamData = 0x05;

inline constexpr std::uint8_t kStreamFlagFin = 0x01;

inline constexpr std::uint8_t kParamUnreliableSupported = 0x01;
inline constexpr std::uint8_t kParamInitialMaxData = 0x02;
inline constexpr std::uint8_t kParamInitialMaxStreamData = 0x03;

inline constexpr std::uint64_t kDefaultInitialMaxData = 16ull * 1024 * 1024;
inline constexpr std::uint64_t kDefaultInitialMaxStreamData =
    8ull * 1024 * 1024;

/// Fixed per-frame byte overheads (everything except variable payload).
inline constexpr std::size_t kStreamFrameOverhead = 16;  // type+id+off+len+flg
inline constexpr std::size_t kAckFrameBaseSize = 23;     // without range pairs
inline constexpr std::size_t kAckRangePairSize = 16;
inline constexpr std::size_t kMaxDataFrameSize = 9;
inline constexpr std::size_t kMaxStreamDataFrameSize = 13;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct OversizedPacket : Error {
  explicit OversizedPacket(std::size_t size, std::size_t limit)
      : Error("packet payload of " + std::to_string(size) +
              " bytes exceeds mtu_payload " + std::to_string(limit)) {}
};

struct InvalidFrame : Error {
  explicit InvalidFrame(const std::string& what)
      : Error("invalid frame: " + what) {}
};

struct UnknownFrameType : Error {
  explicit UnknownFrameType(std::uint8_t type)
      : Error("unknown frame type 0x" + std::to_string(type)) {}
};

struct UnknownVersion : Error {
  explicit UnknownVersion(std::uint8_t version)
      : Error("unknown protocol version " + std::to_string(version)) {}
};

struct EmptySet : Error {
  EmptySet() : Error("cannot build ACK frame from empty packet-number set") {}
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct WireConfig {
  /// Maximum encoded frame bytes per packet (header excluded).
  std::size_t mtu_payload = 1400;
  /// Maximum number of distinct packet-number ranges one ACK frame conveys.
  std::size_t max_ack_ranges = 32;

  void validate() const {
    if (mtu_payload < 64) {
      throw Error("mtu_payload must be >= 64, got " +
                  std::to_string(mtu_payload));
    }
    if (max_ack_ranges < 1) {
      throw Error("max_ack_ranges must be >= 1");
    }
  }
};

// ---------------------------------------------------------------------------
// IntervalSet: a set of uint64 values stored as disjoint inclusive ranges
// ---------------------------------------------------------------------------

class IntervalSet {
 public:
  bool empty() const { return map_.empty(); }

  std::size_t range_count() const { return map_.size(); }

  /// Total number of contained values.
  std::uint64_t count() const {
    std::uint64_t n = 0;
    for (const auto& [lo, hi] : map_) n += hi - lo + 1;
    return n;
  }

  void insert(std::uint64_t v) { insert_range(v, v); }

  /// Insert the inclusive range [lo, hi], merging with neighbours.
  void insert_range(std::uint64_t lo, std::uint64_t hi) {
    if (hi < lo) return;
    auto it = map_.upper_bound(lo);
    if (it != map_.begin()) {
      auto prev = std::prev(it);
      // Merge with a predecessor that overlaps or directly abuts [lo, hi].
      if (prev->second >= lo || (lo > 0 && prev->second == lo - 1)) {
        lo = prev->first;
        if (prev->second > hi) hi = prev->second;
        it = map_.erase(prev);
      }
    }
    while (it != map_.end() &&
           (it->first <= hi || (hi + 1 == it->first && hi + 1 != 0))) {
      if (it->second > hi) hi = it->second;
      it = map_.erase(it);
    }
    map_.emplace(lo, hi);
  }

  bool contains(std::uint64_t v) const {
    auto it = map_.upper_bound(v);
    if (it == map_.begin()) return false;
    auto prev = std::prev(it);
    return prev->first <= v && v <= prev->second;
  }

  /// Largest contained value. Throws EmptySet when empty.
  std::uint64_t largest() const {
    if (map_.empty()) throw EmptySet();
    return map_.rbegin()->second;
  }

  /// Number of contained values strictly greater than v.
  std::uint64_t count_greater(std::uint64_t v) const {
    std::uint64_t n = 0;
    auto it = map_.upper_bound(v);
    if (it != map_.begin()) {
      auto prev = std::prev(it);
      if (prev->second > v) n += prev->second - v;
    }
    for (; it != map_.end(); ++it) n += it->second - it->first + 1;
    return n;
  }

  /// Remove the inclusive range [lo, hi], splitting intervals as needed.
  void remove_range(std::uint64_t lo, std::uint64_t hi) {
    if (hi < lo || map_.empty()) return;
    auto it = map_.upper_bound(lo);
    if (it != map_.begin()) --it;
    while (it != map_.end() && it->first <= hi) {
      std::uint64_t s_lo = it->first;
      std::uint64_t s_hi = it->second;
      if (s_hi < lo) {
        ++it;
        continue;
      }
      it = map_.erase(it);
      if (s_lo < lo) map_.emplace(s_lo, lo - 1);
      if (s_hi > hi) {
        map_.emplace(hi + 1, s_hi);
        break;
      }
    }
  }

  /// Drop the range holding the smallest values (bounds memory when old
  /// history is no longer interesting).
  void drop_lowest_range() {
    if (!map_.empty()) map_.erase(map_.begin());
  }

  /// Remove all values strictly less than v.
  void prune_below(std::uint64_t v) {
    auto it = map_.begin();
    while (it != map_.end() && it->second < v) it = map_.erase(it);
    if (it != map_.end() && it->first < v) {
      std::uint64_t hi = it->second;
      map_.erase(it);
      map_.emplace(v, hi);
    }
  }

  /// Disjoint inclusive intervals in ascending order.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> intervals() const {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
    out.reserve(map_.size());
    for (const auto& [lo, hi] : map_) out.emplace_back(lo, hi);
    return out;
  }

 private:
  std::map<std::uint64_t, std::uint64_t> map_;  // lo -> hi, inclusive
};

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

/// A run of `length` padding bytes (each 0x00 on the wire). Consecutive
/// padding bytes decode as a single frame.
struct PaddingFrame {
  std::size_t length = 1;
};

struct StreamFrame {
  std::uint32_t stream_id = 0;
  std::uint64_t offset = 0;
  bool fin = false;
  std::vector<std::uint8_t> data;
};

/// One additional ACK range below the previous one. `gap` is the number of
/// unacknowledged packet numbers between this range's highest value H and the
/// previous range's lowest value L: gap = L - H - 1 (always >= 1).
/// `run_length` is the number of packets in the range (always >= 1).
struct AckRange {
  std::uint64_t gap = 0;
  std::uint64_t run_length = 0;
};

struct AckFrame {
  std::uint64_t largest_acked = 0;
  std::uint32_t ack_delay_us = 0;
  /// Length of the run ending at largest_acked, inclusive (>= 1).
  std::uint64_t first_run_length = 1;
  std::vector<AckRange> ranges;
};

struct HandshakeFrame {
  bool unreliable_supported = false;
  std::uint64_t initial_max_data = kDefaultInitialMaxData;
  std::uint64_t initial_max_stream_data = kDefaultInitialMaxStreamData;
};

struct MaxDataFrame {
  std::uint64_t limit = 0;
};

struct MaxStreamDataFrame {
  std::uint32_t stream_id = 0;
  std::uint64_t limit = 0;
};

using Frame = std::variant<PaddingFrame, StreamFrame, AckFrame, HandshakeFrame,
                           MaxDataFrame, MaxStreamDataFrame>;

// ---------------------------------------------------------------------------
// Packets
// ---------------------------------------------------------------------------

struct PacketHeader {
  std::uint8_t version = kVersion;
  std::uint8_t flags = 0;
  std::uint64_t connection_id = 0;
  std::uint64_t packet_number = 0;

  bool is_handshake() const { return (flags & kFlagHandshake) != 0; }
  void set_handshake(bool on) {
    if (on) {
      flags |= kFlagHandshake;
    } else {
      flags &= static_cast<std::uint8_t>(~kFlagHandshake);
    }
  }
};

struct Packet {
  PacketHeader header;
  std::vector<Frame> frames;
};

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

/// Encoded size of one frame in bytes.
std::size_t frame_wire_size(const Frame& frame);

/// Append one frame's encoding to `out`. Throws InvalidFrame on
/// unrepresentable fields (e.g. stream data longer than 65535 bytes).
void encode_frame(std::vector<std::uint8_t>& out, const Frame& frame);

/// Encode header + frames. Throws OversizedPacket if the frame bytes exceed
/// config.mtu_payload.
std::vector<std::uint8_t> encode_packet(const Packet& packet,
                                        const WireConfig& config);

/// Decode a full datagram. Throws Truncated, UnknownVersion,
/// UnknownFrameType, InvalidFrame, or OversizedPacket.
Packet decode_packet(std::span<const std::uint8_t> data,
                     const WireConfig& config);

/// Build an ACK frame covering the newest ranges of `acked` (at most
/// `max_ranges` distinct ranges; older ranges are dropped first).
/// Throws EmptySet when `acked` is empty.
AckFrame make_ack(const IntervalSet& acked, std::uint32_t ack_delay_us,
                  std::size_t max_ranges);

/// Expand an ACK frame into inclusive [lo, hi] packet-number intervals in
/// descending order of hi. Throws InvalidFrame on malformed range data.
std::vector<std::pair<std::uint64_t, std::uint64_t>> ack_ranges(
    const AckFrame& frame);

}  // namespace clipstream::wire
