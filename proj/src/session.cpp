#include "clipstream/session.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "clipstream/bytes.hpp"
#include "clipstream/log.hpp"
#include "clipstream/rng.hpp"

namespace clipstream::session {

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

const char* mode_name(Mode mode) {
  switch (mode) {
    case Mode::kTcpLike:
      return "tcp_like";
    case Mode::kQuicLike:
      return "quic_like";
    case Mode::kClipstream:
      return "clipstream";
    case Mode::kClipstreamFec:
      return "clipstream_fec";
  }
  throw Error("invalid mode value");
}

Mode parse_mode(std::string_view name) {
  if (name == "tcp" || name == "tcp_like") return Mode::kTcpLike;
  if (name == "quic" || name == "quic_like") return Mode::kQuicLike;
  if (name == "cs" || name == "clipstream") return Mode::kClipstream;
  if (name == "csfec" || name == "clipstream_fec") return Mode::kClipstreamFec;
  throw Error("unknown mode: " + std::string(name));
}

bool mode_uses_unreliable(Mode mode) {
  return mode == Mode::kClipstream || mode == Mode::kClipstreamFec;
}

bool mode_uses_fec(Mode mode) { return mode == Mode::kClipstreamFec; }

const char* outcome_name(Outcome o) {
  switch (o) {
    case Outcome::kIntact:
      return "intact";
    case Outcome::kRecovered:
      return "recovered";
    case Outcome::kCorrupted:
      return "corrupted";
    case Outcome::kMissing:
      return "missing";
    case Outcome::kUnresolved:
      return "unresolved";
  }
  throw Error("invalid outcome value");
}

// ---------------------------------------------------------------------------
// Control records
// ---------------------------------------------------------------------------

void append_control_record(std::vector<std::uint8_t>& out,
                           const ControlRecord& rec) {
  put_u32(out, rec.index);
  put_u8(out, static_cast<std::uint8_t>(rec.type));
  put_u32(out, rec.stream_id);
  put_u64(out, rec.offset);
  put_u32(out, rec.length);
  put_u8(out, rec.fec_k);
  put_u8(out, rec.fec_m);
  put_u16(out, rec.shard_size);
  put_u32(out, rec.payload_length);
}

ControlRecord decode_control_record(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kControlRecordSize)
    throw ControlStreamCorrupt("record must be exactly " +
                               std::to_string(kControlRecordSize) + " bytes");
  ByteReader r(bytes);
  ControlRecord rec;
  rec.index = r.u32();
  const std::uint8_t type = r.u8();
  if (type > 2) throw ControlStreamCorrupt("bad frame type tag");
  rec.type = static_cast<media::FrameType>(type);
  rec.stream_id = r.u32();
  rec.offset = r.u64();
  rec.length = r.u32();
  rec.fec_k = r.u8();
  rec.fec_m = r.u8();
  rec.shard_size = r.u16();
  rec.payload_length = r.u32();
  if (rec.fec_k == 0) {
    if (rec.fec_m != 0 || rec.shard_size != 0)
      throw ControlStreamCorrupt("parity fields set on an uncoded record");
    if (rec.length != rec.payload_length)
      throw ControlStreamCorrupt("uncoded record length mismatch");
  } else {
    if (rec.shard_size == 0)
      throw ControlStreamCorrupt("coded record with zero shard size");
    const std::uint32_t total =
        static_cast<std::uint32_t>(rec.fec_k) + rec.fec_m;
    if (total > static_cast<std::uint32_t>(fec::kMaxTotalShards))
      throw ControlStreamCorrupt("shard count exceeds the coding budget");
    if (rec.length != total * rec.shard_size)
      throw ControlStreamCorrupt("coded record length mismatch");
    if (rec.payload_length == 0 ||
        rec.payload_length >
            static_cast<std::uint32_t>(rec.fec_k) * rec.shard_size)
      throw ControlStreamCorrupt("payload does not fit the data shards");
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Payload source
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> PayloadSource::payload(std::uint32_t index,
                                                 std::uint32_t size) const {
  std::vector<std::uint8_t> out(size);
  std::uint64_t state = mix_seed(seed_, index);
  std::size_t i = 0;
  while (i < out.size()) {
    const std::uint64_t word = splitmix64(state);
    for (int shift = 56; shift >= 0 && i < out.size(); shift -= 8)
      out[i++] = static_cast<std::uint8_t>(word >> shift);
  }
  return out;
}

std::uint64_t PayloadSource::digest(std::uint32_t index,
                                    std::uint32_t size) const {
  return fnv1a_bytes(payload(index, size));
}

void SessionConfig::validate() const {
  if (shard_size < 1) throw Error("session shard_size must be >= 1");
  if (!(pace_lookahead_s >= 0.0) || !std::isfinite(pace_lookahead_s))
    throw Error("session pace lookahead must be non-negative and finite");
}

// ---------------------------------------------------------------------------
// ServerSession
// ---------------------------------------------------------------------------

ServerSession::ServerSession(transport::Connection& conn,
                             const media::Trace& trace,
                             const SessionConfig& cfg)
    : conn_(conn), trace_(trace), cfg_(cfg), source_(cfg.content_seed) {
  cfg_.validate();
}

const fec::Coder& ServerSession::coder_for(const fec::FecParams& params) {
  const auto key = std::make_tuple(params.k, params.m,
                                   static_cast<int>(params.shard_size));
  auto it = coders_.find(key);
  if (it == coders_.end()) it = coders_.emplace(key, fec::Coder(params)).first;
  return it->second;
}

std::uint32_t ServerSession::route_stream(const media::Frame& frame) {
  switch (cfg_.mode) {
    case Mode::kTcpLike:
      if (!single_sid_)
        single_sid_ = conn_.open_stream(transport::StreamClass::kReliable);
      return *single_sid_;
    case Mode::kQuicLike: {
      const std::size_t chunk = trace_.chunk_of(frame.index);
      auto it = chunk_sids_.find(chunk);
      if (it == chunk_sids_.end())
        it = chunk_sids_
                 .emplace(chunk,
                          conn_.open_stream(transport::StreamClass::kReliable))
                 .first;
      return it->second;
    }
    case Mode::kClipstream:
    case Mode::kClipstreamFec:
      if (frame.reliable) {
        if (!reliable_sid_)
          reliable_sid_ = conn_.open_stream(transport::StreamClass::kReliable);
        return *reliable_sid_;
      }
      if (!unreliable_sid_)
        unreliable_sid_ = conn_.open_stream(transport::StreamClass::kUnreliable);
      return *unreliable_sid_;
  }
  throw Error("invalid mode value");
}

void ServerSession::prepare_frame(std::uint32_t index) {
  const media::Frame& frame = trace_.frames[index];
  const std::uint32_t sid = route_stream(frame);

  ControlRecord rec;
  rec.index = frame.index;
  rec.type = frame.type;
  rec.stream_id = sid;
  rec.offset = stream_offsets_[sid];
  rec.payload_length = frame.size;

  std::vector<std::uint8_t> wire_bytes;
  const bool code =
      mode_uses_fec(cfg_.mode) && !frame.reliable && frame.size > 0;
  if (code) {
    const fec::FecParams params =
        cfg_.fec_policy == FecPolicy::kStatic
            ? fec::choose_params_static(frame.size, cfg_.shard_size)
            : fec::choose_params_adaptive(frame.size, conn_.loss_estimate(),
                                          cfg_.shard_size);
    const auto payload = source_.payload(frame.index, frame.size);
    const fec::ShardSet set =
        coder_for(params).encode(payload, cfg_.fec_parallel);
    wire_bytes.reserve(static_cast<std::size_t>(params.total()) *
                       params.shard_size);
    for (const auto& shard : set.shards)
      wire_bytes.insert(wire_bytes.end(), shard.begin(), shard.end());
    rec.fec_k = static_cast<std::uint8_t>(params.k);
    rec.fec_m = static_cast<std::uint8_t>(params.m);
    rec.shard_size = static_cast<std::uint16_t>(params.shard_size);
    rec.length = static_cast<std::uint32_t>(wire_bytes.size());
  } else {
    wire_bytes = source_.payload(frame.index, frame.size);
    rec.length = frame.size;
  }
  stream_offsets_[sid] = rec.offset + rec.length;

  PendingWrite control;
  control.stream_id = transport::kControlStreamId;
  append_control_record(control.bytes, rec);
  pending_.push_back(std::move(control));

  PendingWrite data;
  data.stream_id = sid;
  data.bytes = std::move(wire_bytes);
  pending_.push_back(std::move(data));

  frame_in_pending_ = true;
  pending_payload_ = frame.size;
  pending_wire_ = rec.length;
  pending_reliable_route_ = !transport::stream_is_unreliable(sid);
}

bool ServerSession::push_pending() {
  while (!pending_.empty()) {
    PendingWrite& w = pending_.front();
    while (w.off < w.bytes.size()) {
      const std::size_t n = conn_.stream_write(
          w.stream_id, std::span(w.bytes).subspan(w.off), false);
      if (n == 0) return false;
      w.off += n;
    }
    pending_.pop_front();
  }
  return true;
}

void ServerSession::pump(Micros now) {
  if (finished_ || !conn_.established()) return;
  if (epoch_ < 0) epoch_ = now;  // pacing starts at establishment
  wake_.reset();
  for (;;) {
    if (!pending_.empty()) {
      if (!push_pending()) return;  // flow-credit blocked; retry on next pump
      if (frame_in_pending_) {
        stats_.payload_bytes_total += pending_payload_;
        stats_.wire_bytes_total += pending_wire_;
        stats_.parity_overhead_bytes += pending_wire_ - pending_payload_;
        stats_.control_bytes += kControlRecordSize;
        if (pending_reliable_route_) {
          stats_.reliable_payload_bytes += pending_payload_;
          ++stats_.reliable_frames;
        } else {
          stats_.unreliable_payload_bytes += pending_payload_;
        }
        ++stats_.frames_pushed;
        frame_in_pending_ = false;
        ++next_frame_;
      }
      continue;
    }
    if (next_frame_ >= trace_.frames.size()) {
      conn_.stream_write(transport::kControlStreamId, {}, true);
      for (const auto& [sid, offset] : stream_offsets_) {
        (void)offset;
        conn_.stream_write(sid, {}, true);
      }
      finished_ = true;
      CLIPSTREAM_LOG_DEBUG("session server finished: %u frames, %llu wire bytes",
                           stats_.frames_pushed,
                           static_cast<unsigned long long>(stats_.wire_bytes_total));
      return;
    }
    if (cfg_.pace_lookahead_s > 0.0) {
      const auto lookahead = static_cast<Micros>(
          std::llround(cfg_.pace_lookahead_s * 1e6));
      const Micros release =
          epoch_ + std::max<Micros>(0, trace_.frames[next_frame_].pts -
                                           lookahead);
      if (now < release) {
        wake_ = release;
        return;
      }
    }
    prepare_frame(next_frame_);
  }
}

// ---------------------------------------------------------------------------
// ClientSession
// ---------------------------------------------------------------------------

ClientSession::ClientSession(transport::Connection& conn,
                             const SessionConfig& cfg,
                             std::uint32_t total_frames)
    : conn_(conn),
      cfg_(cfg),
      source_(cfg.content_seed),
      total_frames_(total_frames),
      seen_record_(total_frames, false) {
  cfg_.validate();
}

const fec::Coder& ClientSession::coder_for(const fec::FecParams& params) {
  const auto key = std::make_tuple(params.k, params.m,
                                   static_cast<int>(params.shard_size));
  auto it = coders_.find(key);
  if (it == coders_.end()) it = coders_.emplace(key, fec::Coder(params)).first;
  return it->second;
}

void ClientSession::read_stream(std::uint32_t sid, Micros now) {
  constexpr std::size_t kReadBudget = 4u << 20;
  const auto r = conn_.stream_read(sid, kReadBudget, now);
  if (r.data.empty() && r.zero_ranges.empty() && !r.fin_reached) return;
  auto& b = bufs_[sid];
  for (const auto& [lo, end] : r.zero_ranges)
    if (end > lo) b.erased.insert_range(lo, end - 1);
  b.pending.insert(b.pending.end(), r.data.begin(), r.data.end());
  b.fin = b.fin || r.fin_reached;
  stats_.wire_bytes_consumed += r.data.size();
}

void ClientSession::parse_control(Micros now) {
  (void)now;
  auto it = bufs_.find(transport::kControlStreamId);
  if (it == bufs_.end()) return;
  auto& b = it->second;
  while (b.pending.size() >= kControlRecordSize) {
    std::array<std::uint8_t, kControlRecordSize> raw;
    std::copy_n(b.pending.begin(), kControlRecordSize, raw.begin());
    b.pending.erase(b.pending.begin(),
                    b.pending.begin() + static_cast<std::ptrdiff_t>(
                                            kControlRecordSize));
    b.base += kControlRecordSize;
    const ControlRecord rec = decode_control_record(raw);
    if (rec.index >= total_frames_)
      throw ControlStreamCorrupt("frame index out of range");
    if (seen_record_[rec.index])
      throw ControlStreamCorrupt("duplicate frame record");
    seen_record_[rec.index] = true;
    if (rec.stream_id == transport::kControlStreamId)
      throw ControlStreamCorrupt("record routes data onto the control stream");
    auto [eit, first_use] = expected_offset_.try_emplace(rec.stream_id, 0);
    (void)first_use;
    if (rec.offset != eit->second)
      throw ControlStreamCorrupt("record offset does not follow the previous frame");
    eit->second += rec.length;
    if (transport::stream_is_unreliable(rec.stream_id) &&
        std::find(unreliable_sids_.begin(), unreliable_sids_.end(),
                  rec.stream_id) == unreliable_sids_.end())
      unreliable_sids_.push_back(rec.stream_id);
    regions_[rec.stream_id].push_back(rec);
  }
  if (b.fin && !b.pending.empty())
    throw ControlStreamCorrupt("truncated record at end of stream");
}

void ClientSession::attribute(std::uint32_t sid, Micros now) {
  auto rit = regions_.find(sid);
  if (rit == regions_.end()) return;
  auto& q = rit->second;
  auto& b = bufs_[sid];
  while (!q.empty() && b.pending.size() >= q.front().length) {
    const ControlRecord rec = q.front();
    q.pop_front();
    if (b.base != rec.offset)
      throw ControlStreamCorrupt("stream bytes out of step with records");
    std::vector<std::uint8_t> bytes(
        b.pending.begin(),
        b.pending.begin() + static_cast<std::ptrdiff_t>(rec.length));
    b.pending.erase(
        b.pending.begin(),
        b.pending.begin() + static_cast<std::ptrdiff_t>(rec.length));
    std::vector<std::pair<std::uint64_t, std::uint64_t>> erased;
    if (rec.length > 0) {
      const std::uint64_t lo = rec.offset;
      const std::uint64_t hi = rec.offset + rec.length - 1;
      for (const auto& [a, z] : b.erased.intervals()) {
        if (z < lo || a > hi) continue;
        erased.emplace_back(std::max(a, lo) - lo, std::min(z, hi) - lo + 1);
      }
      b.erased.prune_below(rec.offset + rec.length);
    }
    b.base += rec.length;
    resolve(rec, std::move(bytes), erased, now);
  }
}

void ClientSession::resolve(
    const ControlRecord& rec, std::vector<std::uint8_t> bytes,
    const std::vector<std::pair<std::uint64_t, std::uint64_t>>& erased,
    Micros now) {
  FrameStatus st;
  st.index = rec.index;
  st.type = rec.type;
  st.complete_time = now;
  st.payload_length = rec.payload_length;

  std::uint64_t erased_bytes = 0;
  for (const auto& [lo, end] : erased) erased_bytes += end - lo;

  if (!rec.coded()) {
    if (erased_bytes == 0)
      st.outcome = Outcome::kIntact;
    else if (erased_bytes >= rec.length)
      st.outcome = Outcome::kMissing;
    else
      st.outcome = Outcome::kCorrupted;
    if (st.outcome == Outcome::kIntact)
      st.digest_ok = fnv1a_bytes(bytes) ==
                     source_.digest(rec.index, rec.payload_length);
  } else {
    const int k = rec.fec_k;
    const int total = k + rec.fec_m;
    std::vector<std::uint8_t> shard_present(
        static_cast<std::size_t>(total), 1);
    for (const auto& [lo, end] : erased) {
      const std::uint64_t first = lo / rec.shard_size;
      const std::uint64_t last = (end - 1) / rec.shard_size;
      for (std::uint64_t s = first; s <= last; ++s) shard_present[s] = 0;
    }
    const int present =
        static_cast<int>(std::count(shard_present.begin(), shard_present.end(),
                                    std::uint8_t{1}));
    st.erased_shards = static_cast<std::uint32_t>(total - present);
    if (st.erased_shards == 0) {
      // Systematic layout: the payload is simply the head of the data shards.
      st.outcome = Outcome::kIntact;
      st.digest_ok =
          fnv1a_bytes(std::span(bytes).first(rec.payload_length)) ==
          source_.digest(rec.index, rec.payload_length);
    } else if (present >= k) {
      fec::ShardSet set;
      set.params = fec::FecParams{k, rec.fec_m, rec.shard_size};
      set.payload_length = rec.payload_length;
      set.present = shard_present;
      set.shards.resize(static_cast<std::size_t>(total));
      for (int s = 0; s < total; ++s) {
        const auto begin =
            bytes.begin() + static_cast<std::ptrdiff_t>(s) * rec.shard_size;
        set.shards[static_cast<std::size_t>(s)].assign(begin,
                                                       begin + rec.shard_size);
      }
      const auto payload = coder_for(set.params).decode(set, cfg_.fec_parallel);
      st.outcome = Outcome::kRecovered;
      st.digest_ok = fnv1a_bytes(payload) ==
                     source_.digest(rec.index, rec.payload_length);
    } else if (present == 0) {
      st.outcome = Outcome::kMissing;
    } else {
      st.outcome = Outcome::kCorrupted;
    }
  }

  if ((st.outcome == Outcome::kIntact || st.outcome == Outcome::kRecovered) &&
      !st.digest_ok)
    ++stats_.digest_failures;
  resolved_.emplace(rec.index, st);
}

std::vector<FrameStatus> ClientSession::take_emittable() {
  std::vector<FrameStatus> out;
  auto it = resolved_.find(next_emit_);
  while (it != resolved_.end()) {
    out.push_back(it->second);
    stats_.outcome_counts[static_cast<std::size_t>(it->second.outcome)]++;
    resolved_.erase(it);
    ++next_emit_;
    it = resolved_.find(next_emit_);
  }
  return out;
}

std::vector<FrameStatus> ClientSession::pump(
    Micros now, std::span<const std::uint32_t> readable) {
  read_stream(transport::kControlStreamId, now);
  parse_control(now);
  for (const std::uint32_t sid : readable)
    if (sid != transport::kControlStreamId) read_stream(sid, now);
  // Unreliable streams can release bytes purely through the passage of time,
  // so service them on every pump.
  for (const std::uint32_t sid : unreliable_sids_) read_stream(sid, now);
  for (auto& [sid, buf] : bufs_) {
    (void)buf;
    if (sid != transport::kControlStreamId) attribute(sid, now);
  }
  return take_emittable();
}

std::vector<FrameStatus> ClientSession::force_finish(Micros now) {
  for (int pass = 0; pass < 64; ++pass) {
    const std::uint64_t before = stats_.wire_bytes_consumed;
    read_stream(transport::kControlStreamId, now);
    parse_control(now);
    std::vector<std::uint32_t> sids;
    for (const auto& [sid, buf] : bufs_) {
      (void)buf;
      sids.push_back(sid);
    }
    for (const auto& [sid, q] : regions_) {
      (void)q;
      if (std::find(sids.begin(), sids.end(), sid) == sids.end())
        sids.push_back(sid);
    }
    for (const std::uint32_t sid : sids) {
      if (sid != transport::kControlStreamId) {
        read_stream(sid, now);
        attribute(sid, now);
      }
    }
    if (stats_.wire_bytes_consumed == before) break;
  }
  // Frames whose record arrived but whose bytes never fully did.
  for (const auto& [sid, q] : regions_) {
    (void)sid;
    for (const ControlRecord& rec : q) {
      if (resolved_.count(rec.index)) continue;
      FrameStatus st;
      st.index = rec.index;
      st.type = rec.type;
      st.outcome = Outcome::kUnresolved;
      st.complete_time = now;
      st.payload_length = rec.payload_length;
      resolved_.emplace(rec.index, st);
    }
  }
  // Frames we never even heard about.
  for (std::uint32_t i = next_emit_; i < total_frames_; ++i) {
    if (resolved_.count(i)) continue;
    FrameStatus st;
    st.index = i;
    st.outcome = Outcome::kUnresolved;
    st.complete_time = now;
    resolved_.emplace(i, st);
  }
  return take_emittable();
}

}  // namespace clipstream::session
