#include "clipstream/wire.hpp"

#include <algorithm>

#include "clipstream/bytes.hpp"

namespace clipstream::wire {

namespace {

struct FrameSizeVisitor {
  std::size_t operator()(const PaddingFrame& f) const { return f.length; }
  std::size_t operator()(const StreamFrame& f) const {
    return kStreamFrameOverhead + f.data.size();
  }
  std::size_t operator()(const AckFrame& f) const {
    return kAckFrameBaseSize + kAckRangePairSize * f.ranges.size();
  }
  std::size_t operator()(const HandshakeFrame&) const {
    // type + param_count + (tag+len+1) + 2 * (tag+len+8)
    return 1 + 1 + 4 + 11 + 11;
  }
  std::size_t operator()(const MaxDataFrame&) const {
    return kMaxDataFrameSize;
  }
  std::size_t operator()(const MaxStreamDataFrame&) const {
    return kMaxStreamDataFrameSize;
  }
};

struct FrameEncodeVisitor {
  std::vector<std::uint8_t>& out;

  void operator()(const PaddingFrame& f) const {
    if (f.length == 0) throw InvalidFrame("padding frame of length 0");
    out.insert(out.end(), f.length, 0x00);
  }

  void operator()(const StreamFrame& f) const {
    if (f.data.size() > 0xFFFF) {
      throw InvalidFrame("stream frame data longer than 65535 bytes");
    }
    put_u8(out, kFrameStream);
    put_u32(out, f.stream_id);
    put_u64(out, f.offset);
    put_u16(out, static_cast<std::uint16_t>(f.data.size()));
    put_u8(out, f.fin ? kStreamFlagFin : 0x00);
    out.insert(out.end(), f.data.begin(), f.data.end());
  }

  void operator()(const AckFrame& f) const {
    if (f.ranges.size() > 0xFFFF) {
      throw InvalidFrame("ack frame with more than 65535 ranges");
    }
    ack_ranges(f);  // validates; throws InvalidFrame on malformed data
    put_u8(out, kFrameAck);
    put_u64(out, f.largest_acked);
    put_u32(out, f.ack_delay_us);
    put_u16(out, static_cast<std::uint16_t>(f.ranges.size()));
    put_u64(out, f.first_run_length);
    for (const AckRange& r : f.ranges) {
      put_u64(out, r.gap);
      put_u64(out, r.run_length);
    }
  }

  void operator()(const HandshakeFrame& f) const {
    put_u8(out, kFrameHandshake);
    put_u8(out, 3);  // param count
    put_u8(out, kParamUnreliableSupported);
    put_u16(out, 1);
    put_u8(out, f.unreliable_supported ? 1 : 0);
    put_u8(out, kParamInitialMaxData);
    put_u16(out, 8);
    put_u64(out, f.initial_max_data);
    put_u8(out, kParamInitialMaxStreamData);
    put_u16(out, 8);
    put_u64(out, f.initial_max_stream_data);
  }

  void operator()(const MaxDataFrame& f) const {
    put_u8(out, kFrameMaxData);
    put_u64(out, f.limit);
  }

  void operator()(const MaxStreamDataFrame& f) const {
    put_u8(out, kFrameMaxStreamData);
    put_u32(out, f.stream_id);
    put_u64(out, f.limit);
  }
};

StreamFrame decode_stream_frame(ByteReader& reader) {
  StreamFrame f;
  f.stream_id = reader.u32();
  f.offset = reader.u64();
  std::uint16_t length = reader.u16();
  std::uint8_t flags = reader.u8();
  if ((flags & ~kStreamFlagFin) != 0) {
    throw InvalidFrame("stream frame with unknown flag bits");
  }
  f.fin = (flags & kStreamFlagFin) != 0;
  auto data = reader.bytes(length);
  f.data.assign(data.begin(), data.end());
  return f;
}

AckFrame decode_ack_frame(ByteReader& reader) {
  AckFrame f;
  f.largest_acked = reader.u64();
  f.ack_delay_us = reader.u32();
  std::uint16_t range_count = reader.u16();
  f.first_run_length = reader.u64();
  f.ranges.reserve(range_count);
  for (std::uint16_t i = 0; i < range_count; ++i) {
    AckRange r;
    r.gap = reader.u64();
    r.run_length = reader.u64();
    f.ranges.push_back(r);
  }
  ack_ranges(f);  // validate
  return f;
}

HandshakeFrame decode_handshake_frame(ByteReader& reader) {
  HandshakeFrame f;
  std::uint8_t param_count = reader.u8();
  for (std::uint8_t i = 0; i < param_count; ++i) {
    std::uint8_t tag = reader.u8();
    std::uint16_t len = reader.u16();
    auto value = reader.bytes(len);
    ByteReader value_reader(value);
    switch (tag) {
      case kParamUnreliableSupported: {
        if (len != 1) {
          throw InvalidFrame("unreliable_supported param must be 1 byte");
        }
        std::uint8_t v = value_reader.u8();
        if (v > 1) {
          throw InvalidFrame("unreliable_supported param must be 0 or 1");
        }
        f.unreliable_supported = (v == 1);
        break;
      }
      case kParamInitialMaxData:
        if (len != 8) {
          throw InvalidFrame("initial_max_data param must be 8 bytes");
        }
        f.initial_max_data = value_reader.u64();
        break;
      case kParamInitialMaxStreamData:
        if (len != 8) {
          throw InvalidFrame("initial_max_stream_data param must be 8 bytes");
        }
        f.initial_max_stream_data = value_reader.u64();
        break;
      default:
        break;  // unknown params are skipped for forward compatibility
    }
  }
  return f;
}

}  // namespace

std::size_t frame_wire_size(const Frame& frame) {
  return std::visit(FrameSizeVisitor{}, frame);
}

void encode_frame(std::vector<std::uint8_t>& out, const Frame& frame) {
  std::visit(FrameEncodeVisitor{out}, frame);
}

std::vector<std::uint8_t> encode_packet(const Packet& packet,
                                        const WireConfig& config) {
  config.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + 64);
  put_u8(out, packet.header.version);
  put_u8(out, packet.header.flags);
  put_u64(out, packet.header.connection_id);
  put_u64(out, packet.header.packet_number);
  for (const Frame& frame : packet.frames) {
    encode_frame(out, frame);
  }
  std::size_t payload = out.size() - kHeaderSize;
  if (payload > config.mtu_payload) {
    throw OversizedPacket(payload, config.mtu_payload);
  }
  return out;
}

Packet decode_packet(std::span<const std::uint8_t> data,
                     const WireConfig& config) {
  config.validate();
  if (data.size() > kHeaderSize + config.mtu_payload) {
    throw OversizedPacket(data.size() - kHeaderSize, config.mtu_payload);
  }
  ByteReader reader(data);
  Packet packet;
  packet.header.version = reader.u8();
  if (packet.header.version != kVersion) {
    throw UnknownVersion(packet.header.version);
  }
  packet.header.flags = reader.u8();
  packet.header.connection_id = reader.u64();
  packet.header.packet_number = reader.u64();
  while (!reader.empty()) {
    std::uint8_t type = reader.u8();
    switch (type) {
      case kFramePadding: {
        // Coalesce a run of zero bytes into one padding frame.
        std::size_t run = 1;
        while (!reader.empty() && reader.peek() == kFramePadding) {
          reader.u8();
          ++run;
        }
        packet.frames.emplace_back(PaddingFrame{run});
        break;
      }
      case kFrameStream:
        packet.frames.emplace_back(decode_stream_frame(reader));
        break;
      case kFrameAck:
        packet.frames.emplace_back(decode_ack_frame(reader));
        break;
      case kFrameHandshake:
        packet.frames.emplace_back(decode_handshake_frame(reader));
        break;
      case kFrameMaxData: {
        MaxDataFrame f;
        f.limit = reader.u64();
        packet.frames.emplace_back(f);
        break;
      }
      case kFrameMaxStreamData: {
        MaxStreamDataFrame f;
        f.stream_id = reader.u32();
        f.limit = reader.u64();
        packet.frames.emplace_back(f);
        break;
      }
      default:
        throw UnknownFrameType(type);
    }
  }
  return packet;
}

AckFrame make_ack(const IntervalSet& acked, std::uint32_t ack_delay_us,
                  std::size_t max_ranges) {
  if (acked.empty()) throw EmptySet();
  if (max_ranges < 1) max_ranges = 1;
  auto ivals = acked.intervals();  // ascending
  // Keep only the newest `max_ranges` intervals.
  std::size_t keep = std::min(ivals.size(), max_ranges);
  std::size_t start = ivals.size() - keep;

  AckFrame f;
  f.ack_delay_us = ack_delay_us;
  const auto& newest = ivals.back();
  f.largest_acked = newest.second;
  f.first_run_length = newest.second - newest.first + 1;
  std::uint64_t prev_lo = newest.first;
  // Walk downward over the remaining kept intervals.
  for (std::size_t i = ivals.size() - 1; i-- > start;) {
    const auto& [lo, hi] = ivals[i];
    AckRange r;
    r.gap = prev_lo - hi - 1;
    r.run_length = hi - lo + 1;
    f.ranges.push_back(r);
    prev_lo = lo;
  }
  return f;
}

std::vector<std::pair<std::uint64_t, std::uint64_t>> ack_ranges(
    const AckFrame& frame) {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
  out.reserve(1 + frame.ranges.size());
  if (frame.first_run_length < 1) {
    throw InvalidFrame("ack first_run_length must be >= 1");
  }
  if (frame.first_run_length > frame.largest_acked + 1) {
    throw InvalidFrame("ack first run extends below packet number 0");
  }
  std::uint64_t hi = frame.largest_acked;
  std::uint64_t lo = frame.largest_acked - (frame.first_run_length - 1);
  out.emplace_back(lo, hi);
  for (const AckRange& r : frame.ranges) {
    if (r.gap < 1) throw InvalidFrame("ack range gap must be >= 1");
    if (r.run_length < 1) throw InvalidFrame("ack run_length must be >= 1");
    if (lo < r.gap + 1) {
      throw InvalidFrame("ack range extends below packet number 0");
    }
    hi = lo - r.gap - 1;
    if (hi + 1 < r.run_length) {
      throw InvalidFrame("ack range extends below packet number 0");
    }
    lo = hi - (r.run_length - 1);
    out.emplace_back(lo, hi);
  }
  return out;
}

}  // namespace clipstream::wire
