#include "clipstream/transport.hpp"

#include <algorithm>
#include <cstddef>
#include <limits>
#include <variant>

#include "clipstream/log.hpp"

namespace clipstream::transport {

namespace {
constexpr std::uint64_t kUnlimited = std::numeric_limits<std::uint64_t>::max();
constexpr std::size_t kBoundedAckRanges = 64;  // receiver ack-state cap
}  // namespace

// ---------------------------------------------------------------------------
// Construction and handshake
// ---------------------------------------------------------------------------

Connection::Connection(Role role, std::uint64_t connection_id,
                       const ConnectionConfig& config)
    : role_(role), cid_(connection_id), cfg_(config) {
  cfg_.validate();
  srtt_ = cfg_.initial_srtt;
  rttvar_ = cfg_.initial_rttvar;
  cwnd_ = static_cast<std::uint64_t>(cfg_.initial_cwnd_packets) * cfg_.mtu();
  ssthresh_ = kUnlimited;
  conn_recv_limit_ = cfg_.params.initial_max_data;

  // The control stream exists in both directions from the start. Its send
  // limit stays at zero until the peer's handshake announces a window.
  SendStream& ss = send_streams_[kControlStreamId];
  ss.unreliable = false;
  ss.send_limit = 0;
  RecvStream& rs = recv_streams_[kControlStreamId];
  rs.unreliable = false;
  rs.recv_limit = cfg_.params.initial_max_stream_data;
}

void Connection::start_handshake(Micros) {
  if (handshake_sent_) return;
  handshake_sent_ = true;
  handshake_pending_ = true;
}

// ---------------------------------------------------------------------------
// Stream operations
// ---------------------------------------------------------------------------

std::uint32_t Connection::open_stream(StreamClass cls) {
  if (!established_)
    throw Error("open_stream before the connection is established");
  std::uint32_t id;
  if (cls == StreamClass::kUnreliable) {
    if (!negotiated_.unreliable_enabled) throw UnreliableNotNegotiated{};
    if (next_unreliable_id_ > std::numeric_limits<std::uint32_t>::max() - 2)
      throw StreamsExhausted{};
    id = next_unreliable_id_;
    next_unreliable_id_ += 2;
  } else {
    if (next_reliable_id_ > std::numeric_limits<std::uint32_t>::max() - 2)
      throw StreamsExhausted{};
    id = next_reliable_id_;
    next_reliable_id_ += 2;
  }
  SendStream& ss = send_streams_[id];
  ss.unreliable = (cls == StreamClass::kUnreliable);
  ss.send_limit = peer_params_.initial_max_stream_data;
  return id;
}

Connection::SendStream& Connection::send_stream_or_throw(std::uint32_t id) {
  auto it = send_streams_.find(id);
  if (it == send_streams_.end())
    throw StreamReset("stream " + std::to_string(id) +
                      " was never opened for sending");
  return it->second;
}

Connection::RecvStream& Connection::recv_stream_for(std::uint32_t id) {
  auto [it, inserted] = recv_streams_.try_emplace(id);
  if (inserted) {
    it->second.unreliable = stream_is_unreliable(id);
    it->second.recv_limit = cfg_.params.initial_max_stream_data;
  }
  return it->second;
}

std::size_t Connection::stream_write(std::uint32_t id,
                                     std::span<const std::uint8_t> data,
                                     bool fin) {
  SendStream& ss = send_stream_or_throw(id);
  if (ss.fin_requested) throw StreamClosed(id);
  const std::uint64_t stream_room =
      ss.send_limit > ss.accepted ? ss.send_limit - ss.accepted : 0;
  const std::uint64_t conn_room =
      conn_send_limit_ > conn_accepted_ ? conn_send_limit_ - conn_accepted_ : 0;
  const auto take = static_cast<std::size_t>(std::min<std::uint64_t>(
      data.size(), std::min(stream_room, conn_room)));
  ss.buffer.insert(ss.buffer.end(), data.begin(),
                   data.begin() + static_cast<std::ptrdiff_t>(take));
  ss.accepted += take;
  conn_accepted_ += take;
  if (fin && take == data.size()) {
    ss.fin_requested = true;
    ss.fin_offset = ss.accepted;
  }
  return take;
}

ReadResult Connection::stream_read(std::uint32_t id, std::size_t max_bytes,
                                   Micros now) {
  RecvStream& rs = recv_stream_for(id);
  ReadResult out;
  std::size_t budget = max_bytes;
  while (budget > 0) {
    auto front = rs.segs.begin();
    if (front != rs.segs.end() && front->first == rs.read_offset) {
      // Contiguous data at the read head.
      std::vector<std::uint8_t>& seg = front->second;
      const std::size_t take = std::min(budget, seg.size());
      out.data.insert(out.data.end(), seg.begin(),
                      seg.begin() + static_cast<std::ptrdiff_t>(take));
      rs.read_offset += take;
      rs.consumed += take;
      conn_consumed_ += take;
      budget -= take;
      if (take == seg.size()) {
        rs.segs.erase(front);
      } else {
        std::vector<std::uint8_t> rest(
            seg.begin() + static_cast<std::ptrdiff_t>(take), seg.end());
        rs.segs.erase(front);
        rs.segs.emplace(rs.read_offset, std::move(rest));
      }
      rs.gap_since = -1;  // any gap now at the front is freshly exposed
      continue;
    }

    // The read head sits on a hole (or nothing further is known).
    if (!rs.unreliable) break;  // reliable streams wait for every byte
    std::uint64_t gap_end;
    if (front != rs.segs.end()) {
      gap_end = front->first;
    } else if (rs.fin_offset) {
      gap_end = *rs.fin_offset;
    } else {
      break;  // no evidence of anything beyond the read head yet
    }
    if (gap_end <= rs.read_offset) break;

    const bool window_elapsed =
        rs.highest_end > gap_end + cfg_.reorder_window_bytes;
    const bool timer_elapsed =
        rs.gap_since >= 0 && now - rs.gap_since > cfg_.reorder_timeout;
    const bool fin_known = rs.fin_offset.has_value();
    if (!(window_elapsed || timer_elapsed || fin_known)) break;

    const std::uint64_t gap_len = gap_end - rs.read_offset;
    const auto take =
        static_cast<std::size_t>(std::min<std::uint64_t>(budget, gap_len));
    out.zero_ranges.emplace_back(rs.read_offset, rs.read_offset + take);
    out.data.insert(out.data.end(), take, std::uint8_t{0});
    rs.read_offset += take;
    rs.consumed += take;
    conn_consumed_ += take;
    budget -= take;
    rs.gap_since = -1;
  }
  if (rs.fin_offset && rs.read_offset >= *rs.fin_offset) {
    out.fin_reached = true;
    rs.fin_delivered = true;
  }
  refresh_gap_state(rs, now);
  grant_flow_credit(id, rs);
  return out;
}

void Connection::refresh_gap_state(RecvStream& rs, Micros now) {
  const bool front_gap =
      (!rs.segs.empty() && rs.segs.begin()->first > rs.read_offset) ||
      (rs.segs.empty() && rs.fin_offset && rs.read_offset < *rs.fin_offset);
  if (front_gap) {
    if (rs.gap_since < 0) rs.gap_since = now;
  } else {
    rs.gap_since = -1;
  }
}

void Connection::grant_flow_credit(std::uint32_t id, RecvStream& rs) {
  const std::uint64_t stream_window = cfg_.params.initial_max_stream_data;
  if (rs.recv_limit - rs.consumed < stream_window / 2) {
    if (std::find(max_stream_data_pending_.begin(),
                  max_stream_data_pending_.end(),
                  id) == max_stream_data_pending_.end())
      max_stream_data_pending_.push_back(id);
  }
  const std::uint64_t conn_window = cfg_.params.initial_max_data;
  if (conn_recv_limit_ - conn_consumed_ < conn_window / 2)
    max_data_pending_ = true;
}

void Connection::insert_segment(RecvStream& rs, std::uint64_t off,
                                const std::vector<std::uint8_t>& bytes) {
  std::uint64_t lo = std::max(off, rs.read_offset);
  const std::uint64_t hi = off + bytes.size();
  while (lo < hi) {
    // Locate the segment covering or following lo.
    auto it = rs.segs.upper_bound(lo);
    if (it != rs.segs.begin()) {
      auto prev = std::prev(it);
      if (prev->first + prev->second.size() > lo) it = prev;
    }
    std::uint64_t free_end = hi;
    if (it != rs.segs.end() && it->first < hi) {
      if (it->first <= lo) {
        // lo already covered; skip past this segment (first arrival wins).
        lo = it->first + it->second.size();
        continue;
      }
      free_end = it->first;
    }
    if (free_end > lo) {
      rs.segs.emplace(
          lo, std::vector<std::uint8_t>(
                  bytes.begin() + static_cast<std::ptrdiff_t>(lo - off),
                  bytes.begin() + static_cast<std::ptrdiff_t>(free_end - off)));
      lo = free_end;
    }
  }
}

// ---------------------------------------------------------------------------
// Receiving datagrams
// ---------------------------------------------------------------------------

Events Connection::on_datagram(std::span<const std::uint8_t> datagram,
                               Micros now) {
  Events ev;
  wire::Packet pkt;
  try {
    pkt = wire::decode_packet(datagram, cfg_.wire);
  } catch (const wire::UnknownVersion&) {
    throw VersionMismatch{};
  }
  if (pkt.header.connection_id != cid_) {
    ++stats_.cid_mismatch_drops;
    return ev;
  }
  ++stats_.packets_received;
  stats_.bytes_received += datagram.size();
  const std::uint64_t pn = pkt.header.packet_number;
  if (recv_pns_.contains(pn)) return ev;  // duplicate of a processed packet

  bool eliciting = false;
  for (const wire::Frame& frame : pkt.frames) {
    process_frame(frame, now, ev);
    if (!std::holds_alternative<wire::PaddingFrame>(frame) &&
        !std::holds_alternative<wire::AckFrame>(frame))
      eliciting = true;
  }
  if (eliciting) note_eliciting_received(pn, now);

  std::sort(ev.readable.begin(), ev.readable.end());
  ev.readable.erase(std::unique(ev.readable.begin(), ev.readable.end()),
                    ev.readable.end());
  return ev;
}

void Connection::note_eliciting_received(std::uint64_t pn, Micros now) {
  recv_pns_.insert(pn);
  while (recv_pns_.range_count() > kBoundedAckRanges)
    recv_pns_.drop_lowest_range();
  if (pending_eliciting_ == 0) {
    first_pending_receipt_ = now;
    ack_timer_ = now + cfg_.max_ack_delay;
  }
  ++pending_eliciting_;
  if (pending_eliciting_ >= cfg_.ack_packet_threshold) ack_timer_ = now;
}

void Connection::process_frame(const wire::Frame& frame, Micros now,
                               Events& ev) {
  if (std::holds_alternative<wire::PaddingFrame>(frame)) return;

  if (const auto* sf = std::get_if<wire::StreamFrame>(&frame)) {
    RecvStream& rs = recv_stream_for(sf->stream_id);
    if (rs.unreliable && established_ && !negotiated_.unreliable_enabled)
      throw Error("peer sent unreliable stream data without negotiation");
    const std::uint64_t off = sf->offset;
    const std::uint64_t end = off + sf->data.size();
    if (rs.fin_offset &&
        (end > *rs.fin_offset || (sf->fin && end != *rs.fin_offset)))
      throw StreamReset("stream " + std::to_string(sf->stream_id) +
                        " received data conflicting with its final size");
    if (sf->fin) rs.fin_offset = end;
    if (end > rs.recv_limit)
      throw Error("peer exceeded the stream flow-control limit");
    if (end > rs.highest_end) {
      const std::uint64_t delta = end - rs.highest_end;
      if (conn_recv_highest_ + delta > conn_recv_limit_)
        throw Error("peer exceeded the connection flow-control limit");
      conn_recv_highest_ += delta;
      rs.highest_end = end;
    }
    if (!sf->data.empty() && end > rs.read_offset)
      insert_segment(rs, off, sf->data);
    refresh_gap_state(rs, now);
    ev.readable.push_back(sf->stream_id);
    return;
  }

  if (const auto* ack = std::get_if<wire::AckFrame>(&frame)) {
    process_ack(*ack, now);
    return;
  }

  if (const auto* hs = std::get_if<wire::HandshakeFrame>(&frame)) {
    if (!established_) {
      peer_params_.unreliable_supported = hs->unreliable_supported;
      peer_params_.initial_max_data = hs->initial_max_data;
      peer_params_.initial_max_stream_data = hs->initial_max_stream_data;
      negotiated_ = negotiate(cfg_.params, peer_params_);
      conn_send_limit_ =
          std::max(conn_send_limit_, peer_params_.initial_max_data);
      for (auto& [sid, ss] : send_streams_)
        ss.send_limit =
            std::max(ss.send_limit, peer_params_.initial_max_stream_data);
      established_ = true;
      ev.established = true;
      CLIPSTREAM_LOG_DEBUG("transport: cid=%llu established",
                           static_cast<unsigned long long>(cid_));
    }
    if (!handshake_sent_) {
      // We are the passive side: answer with our own parameters.
      handshake_sent_ = true;
      handshake_pending_ = true;
    }
    return;
  }

  if (const auto* md = std::get_if<wire::MaxDataFrame>(&frame)) {
    conn_send_limit_ = std::max(conn_send_limit_, md->limit);
    return;
  }

  if (const auto* msd = std::get_if<wire::MaxStreamDataFrame>(&frame)) {
    auto it = send_streams_.find(msd->stream_id);
    if (it != send_streams_.end())
      it->second.send_limit = std::max(it->second.send_limit, msd->limit);
    return;
  }
}

// ---------------------------------------------------------------------------
// Acknowledgment processing, RTT, loss detection
// ---------------------------------------------------------------------------

void Connection::process_ack(const wire::AckFrame& ack, Micros now) {
  const auto ranges = wire::ack_ranges(ack);

  // An RTT sample is taken only when the largest acknowledged packet is
  // newly acknowledged.
  auto largest_it = sent_.find(ack.largest_acked);
  if (largest_it != sent_.end())
    update_rtt(now - largest_it->second.send_time,
               static_cast<Micros>(ack.ack_delay_us));
  largest_acked_ = std::max(largest_acked_, ack.largest_acked);
  any_acked_ = true;

  bool newly_acked = false;
  for (const auto& [lo, hi] : ranges) {
    acked_pns_.insert_range(lo, hi);
    auto it = sent_.lower_bound(lo);
    while (it != sent_.end() && it->first <= hi) {
      SentRecord rec = std::move(it->second);
      it = sent_.erase(it);
      on_packet_acked(rec, now);
      note_loss_sample(false);
      ++stats_.acked_eliciting_packets;
      newly_acked = true;
    }
  }
  while (acked_pns_.range_count() > kBoundedAckRanges)
    acked_pns_.drop_lowest_range();

  if (newly_acked) {
    pto_count_ = 0;
    arm_pto(now);
  }
  detect_losses(now);
}

void Connection::on_packet_acked(const SentRecord& rec, Micros) {
  if (rec.in_flight) bytes_in_flight_ -= rec.size;
  cc_on_ack(rec.pn, rec.size);
  if (rec.handshake) {
    handshake_acked_ = true;
    handshake_pending_ = false;
  }
  // The peer has processed the acknowledgment this packet carried; stop
  // re-advertising the packet numbers it covered.
  if (rec.acked_through > 0) recv_pns_.prune_below(rec.acked_through);
  for (const auto& c : rec.chunks) {
    auto it = send_streams_.find(c.id);
    if (it == send_streams_.end()) continue;
    SendStream& ss = it->second;
    if (c.fin) {
      ss.fin_acked = true;
      ss.fin_rtx_pending = false;
    }
    if (ss.unreliable || c.length == 0) continue;
    const std::uint64_t lo = c.offset;
    const std::uint64_t hi = c.offset + c.length - 1;
    ss.acked.insert_range(lo, hi);
    ss.rtx.remove_range(lo, hi);
    // Release buffered bytes once the acknowledged prefix is contiguous.
    const auto iv = ss.acked.intervals();
    if (!iv.empty() && iv.front().first <= ss.buffer_base) {
      const std::uint64_t new_base = iv.front().second + 1;
      if (new_base > ss.buffer_base) {
        ss.buffer.erase(ss.buffer.begin(),
                        ss.buffer.begin() + static_cast<std::ptrdiff_t>(
                                                new_base - ss.buffer_base));
        ss.buffer_base = new_base;
        ss.acked.prune_below(new_base);
      }
    }
  }
}

void Connection::update_rtt(Micros latest, Micros ack_delay) {
  if (latest < 0) latest = 0;
  latest_rtt_ = latest;
  min_rtt_ = have_rtt_sample_ ? std::min(min_rtt_, latest) : latest;
  const Micros adjusted = latest > ack_delay ? latest - ack_delay : latest;
  if (!have_rtt_sample_) {
    have_rtt_sample_ = true;
    srtt_ = adjusted;
    rttvar_ = adjusted / 2;
  } else {
    const Micros err =
        srtt_ > adjusted ? srtt_ - adjusted : adjusted - srtt_;
    rttvar_ = (3 * rttvar_ + err) / 4;
    srtt_ = (7 * srtt_ + adjusted) / 8;
  }
}

void Connection::note_loss_sample(bool lost) {
  loss_ewma_ = 0.9 * loss_ewma_ + (lost ? 0.1 : 0.0);
}

void Connection::detect_losses(Micros now) {
  if (!any_acked_ || sent_.empty()) {
    loss_timer_.reset();
    if (sent_.empty()) pto_deadline_.reset();
    return;
  }
  const Micros rtt_ref = std::max(srtt_, latest_rtt_);
  const Micros time_thresh = rtt_ref + rtt_ref / 8;  // 9/8 of the RTT estimate
  std::vector<std::uint64_t> lost;
  Micros earliest = std::numeric_limits<Micros>::max();
  for (const auto& [pn, rec] : sent_) {
    if (pn >= largest_acked_) break;  // only packets older than the newest ack
    const bool by_count =
        acked_pns_.count_greater(pn) >=
        static_cast<std::uint64_t>(cfg_.loss_packet_threshold);
    const bool by_time = now - rec.send_time > time_thresh;
    if (by_count || by_time) {
      lost.push_back(pn);
    } else {
      earliest = std::min(earliest, rec.send_time + time_thresh + 1);
    }
  }
  for (const std::uint64_t pn : lost) {
    auto it = sent_.find(pn);
    SentRecord rec = std::move(it->second);
    sent_.erase(it);
    declare_lost(pn, rec);
  }
  loss_timer_ = earliest == std::numeric_limits<Micros>::max()
                    ? std::nullopt
                    : std::optional<Micros>(earliest);
  if (sent_.empty()) pto_deadline_.reset();
}

void Connection::declare_lost(std::uint64_t pn, const SentRecord& rec) {
  ++stats_.packets_lost;
  lost_packets_.push_back(pn);
  if (rec.in_flight) bytes_in_flight_ -= rec.size;
  note_loss_sample(true);
  cc_on_loss(pn);
  on_packet_lost(rec);
  CLIPSTREAM_LOG_DEBUG("transport: cid=%llu lost pn=%llu",
                       static_cast<unsigned long long>(cid_),
                       static_cast<unsigned long long>(pn));
}

void Connection::on_packet_lost(const SentRecord& rec) {
  if (rec.handshake && !handshake_acked_) handshake_pending_ = true;
  if (rec.max_data) max_data_pending_ = true;
  for (const std::uint32_t id : rec.max_stream_data) {
    if (std::find(max_stream_data_pending_.begin(),
                  max_stream_data_pending_.end(),
                  id) == max_stream_data_pending_.end())
      max_stream_data_pending_.push_back(id);
  }
  for (const auto& c : rec.chunks) {
    auto it = send_streams_.find(c.id);
    if (it == send_streams_.end()) continue;
    SendStream& ss = it->second;
    if (c.fin && !ss.fin_acked) ss.fin_rtx_pending = true;
    if (c.length == 0) continue;
    if (ss.unreliable) {
      stats_.unreliable_bytes_abandoned += c.length;
      continue;
    }
    const std::uint64_t lo = std::max<std::uint64_t>(c.offset, ss.buffer_base);
    const std::uint64_t end = c.offset + c.length;
    if (lo >= end) continue;  // everything here was acknowledged meanwhile
    ss.rtx.insert_range(lo, end - 1);
    for (const auto& [alo, ahi] : ss.acked.intervals()) {
      if (ahi < lo) continue;
      if (alo > end - 1) break;
      ss.rtx.remove_range(std::max(alo, lo), std::min(ahi, end - 1));
    }
  }
}

// ---------------------------------------------------------------------------
// Congestion control
// ---------------------------------------------------------------------------

void Connection::cc_on_ack(std::uint64_t pn, std::size_t acked_size) {
  if (in_recovery_ && pn > recovery_end_pn_) {
    in_recovery_ = false;
    // A recovery epoch with no delay inflation is treated as random loss:
    // restore exponential growth instead of inching back linearly.
    if (!epoch_congested_) ssthresh_ = kUnlimited;
  }
  if (in_recovery_) return;  // no growth while recovering
  if (cwnd_ < ssthresh_) {
    cwnd_ += acked_size;  // slow start
  } else {
    cwnd_ += (static_cast<std::uint64_t>(cfg_.mtu()) * acked_size) /
             std::max<std::uint64_t>(cwnd_, 1);
  }
}

void Connection::cc_on_loss(std::uint64_t pn) {
  if (any_loss_epoch_ && pn <= recovery_end_pn_) return;  // same epoch
  any_loss_epoch_ = true;
  // Delay gate: only sustained queueing delay marks the epoch as congestive.
  epoch_congested_ = have_rtt_sample_ && min_rtt_ > 0 &&
                     srtt_ > min_rtt_ + min_rtt_ / 8;
  ssthresh_ =
      std::max(cwnd_ / 2, 2 * static_cast<std::uint64_t>(cfg_.mtu()));
  cwnd_ = ssthresh_;
  recovery_end_pn_ = next_pn_ == 0 ? 0 : next_pn_ - 1;
  in_recovery_ = true;
}

// ---------------------------------------------------------------------------
// Timers
// ---------------------------------------------------------------------------

void Connection::arm_pto(Micros now) {
  if (sent_.empty()) {
    pto_deadline_.reset();
    return;
  }
  const int shift = std::min(pto_count_, 20);
  const Micros interval = (srtt_ + 4 * rttvar_ + cfg_.pto_extra) << shift;
  pto_deadline_ = now + interval;
}

void Connection::maybe_fire_pto(Micros now) {
  while (pto_deadline_ && now >= *pto_deadline_ && !sent_.empty()) {
    // Declare the oldest outstanding packet lost and schedule a probe. This
    // frees congestion-window room, so the probe can always eventually go out.
    auto it = sent_.begin();
    const std::uint64_t pn = it->first;
    SentRecord rec = std::move(it->second);
    sent_.erase(it);
    ++pto_count_;
    probe_pending_ = true;
    declare_lost(pn, rec);
    arm_pto(now);
  }
  if (sent_.empty()) pto_deadline_.reset();
}

std::optional<Micros> Connection::earliest_gap_deadline() const {
  std::optional<Micros> t;
  for (const auto& [id, rs] : recv_streams_) {
    if (!rs.unreliable || rs.gap_since < 0) continue;
    const Micros d = rs.gap_since + cfg_.reorder_timeout + 1;
    if (!t || d < *t) t = d;
  }
  return t;
}

std::optional<Micros> Connection::next_timer() const {
  std::optional<Micros> t;
  auto consider = [&t](const std::optional<Micros>& c) {
    if (c && (!t || *c < *t)) t = c;
  };
  if (!recv_pns_.empty() && pending_eliciting_ > 0) consider(ack_timer_);
  consider(loss_timer_);
  if (!sent_.empty()) consider(pto_deadline_);
  consider(earliest_gap_deadline());
  return t;
}

// ---------------------------------------------------------------------------
// Packet assembly
// ---------------------------------------------------------------------------

std::vector<std::vector<std::uint8_t>> Connection::poll_transmit(Micros now) {
  maybe_fire_pto(now);
  detect_losses(now);
  return build_packets(now);
}

std::vector<std::vector<std::uint8_t>> Connection::build_packets(Micros now) {
  std::vector<std::vector<std::uint8_t>> out;
  bool cwnd_blocked = false;
  while (!cwnd_blocked) {
    const bool ack_due =
        ack_timer_ && now >= *ack_timer_ && !recv_pns_.empty();
    std::vector<wire::Frame> frames;
    SentRecord rec;
    std::size_t payload = 0;
    bool eliciting = false;
    const std::size_t mtu_payload = cfg_.wire.mtu_payload;

    auto room = [&] { return mtu_payload - payload; };
    // Whether an ack-eliciting frame of wire size s still fits under cwnd,
    // counting the whole packet built so far (header and ACK included: the
    // first ack-eliciting frame converts the entire packet to in-flight).
    auto cwnd_allows = [&](std::size_t s) {
      return bytes_in_flight_ + wire::kHeaderSize + payload + s <= cwnd_;
    };

    // 1. Our handshake parameters, when pending.
    if (handshake_pending_) {
      wire::HandshakeFrame hs;
      hs.unreliable_supported = cfg_.params.unreliable_supported;
      hs.initial_max_data = cfg_.params.initial_max_data;
      hs.initial_max_stream_data = cfg_.params.initial_max_stream_data;
      const std::size_t s = wire::frame_wire_size(hs);
      if (s <= room() && cwnd_allows(s)) {
        frames.emplace_back(hs);
        payload += s;
        eliciting = true;
        rec.handshake = true;
        handshake_pending_ = false;
      } else if (!cwnd_allows(s)) {
        cwnd_blocked = true;
      }
    }

    // 2. Acknowledgments ride along in every packet while we hold any.
    bool ack_attached = false;
    if (!recv_pns_.empty()) {
      std::uint32_t delay = 0;
      if (pending_eliciting_ > 0 && now > first_pending_receipt_)
        delay = static_cast<std::uint32_t>(std::min<Micros>(
            now - first_pending_receipt_,
            std::numeric_limits<std::uint32_t>::max()));
      wire::AckFrame af =
          wire::make_ack(recv_pns_, delay, cfg_.wire.max_ack_ranges);
      const std::size_t s = wire::frame_wire_size(af);
      if (s <= room()) {
        rec.acked_through = af.largest_acked + 1;
        frames.emplace_back(std::move(af));
        payload += s;
        ack_attached = true;
      }
    }

    // 3. Flow-control window updates.
    if (!cwnd_blocked && max_data_pending_) {
      const std::size_t s = wire::kMaxDataFrameSize;
      if (s <= room() && cwnd_allows(s)) {
        const std::uint64_t limit = std::max(
            conn_recv_limit_, conn_consumed_ + cfg_.params.initial_max_data);
        conn_recv_limit_ = limit;
        frames.emplace_back(wire::MaxDataFrame{limit});
        payload += s;
        eliciting = true;
        rec.max_data = true;
        max_data_pending_ = false;
      } else if (!cwnd_allows(s)) {
        cwnd_blocked = true;
      }
    }
    if (!cwnd_blocked && !max_stream_data_pending_.empty()) {
      std::sort(max_stream_data_pending_.begin(),
                max_stream_data_pending_.end());
      max_stream_data_pending_.erase(
          std::unique(max_stream_data_pending_.begin(),
                      max_stream_data_pending_.end()),
          max_stream_data_pending_.end());
      while (!max_stream_data_pending_.empty()) {
        const std::size_t s = wire::kMaxStreamDataFrameSize;
        if (s > room()) break;  // continue in the next packet
        if (!cwnd_allows(s)) {
          cwnd_blocked = true;
          break;
        }
        const std::uint32_t id = max_stream_data_pending_.front();
        RecvStream& rs = recv_stream_for(id);
        const std::uint64_t limit = std::max(
            rs.recv_limit, rs.consumed + cfg_.params.initial_max_stream_data);
        rs.recv_limit = limit;
        frames.emplace_back(wire::MaxStreamDataFrame{id, limit});
        payload += s;
        eliciting = true;
        rec.max_stream_data.push_back(id);
        max_stream_data_pending_.erase(max_stream_data_pending_.begin());
      }
    }

    // 4. Retransmissions (reliable data first, ascending stream id), plus
    //    re-emission of lost FIN markers for either stream class.
    for (auto& [id, ss] : send_streams_) {
      if (cwnd_blocked) break;
      if (!ss.unreliable) {
        while (!ss.rtx.empty()) {
          if (room() <= wire::kStreamFrameOverhead) break;
          const auto iv = ss.rtx.intervals().front();
          const std::uint64_t lo = iv.first;
          const std::uint64_t avail = iv.second - iv.first + 1;
          const std::size_t space = room() - wire::kStreamFrameOverhead;
          const auto len = static_cast<std::size_t>(std::min<std::uint64_t>(
              {avail, static_cast<std::uint64_t>(space), 65535ull}));
          const std::size_t s = wire::kStreamFrameOverhead + len;
          if (!cwnd_allows(s)) {
            cwnd_blocked = true;
            break;
          }
          const bool fin_here = ss.fin_rtx_pending && ss.fin_requested &&
                                lo + len == ss.fin_offset;
          wire::StreamFrame f;
          f.stream_id = id;
          f.offset = lo;
          f.fin = fin_here;
          const auto base =
              static_cast<std::ptrdiff_t>(lo - ss.buffer_base);
          f.data.assign(ss.buffer.begin() + base,
                        ss.buffer.begin() + base +
                            static_cast<std::ptrdiff_t>(len));
          frames.emplace_back(std::move(f));
          payload += s;
          eliciting = true;
          rec.chunks.push_back(
              {id, lo, static_cast<std::uint32_t>(len), fin_here});
          ss.rtx.remove_range(lo, lo + len - 1);
          if (fin_here) ss.fin_rtx_pending = false;
          stats_.bytes_retransmitted += len;
        }
      }
      if (!cwnd_blocked && ss.fin_rtx_pending &&
          (ss.unreliable || ss.rtx.empty())) {
        const std::size_t s = wire::kStreamFrameOverhead;
        if (s <= room()) {
          if (!cwnd_allows(s)) {
            cwnd_blocked = true;
          } else {
            wire::StreamFrame f;
            f.stream_id = id;
            f.offset = ss.fin_offset;
            f.fin = true;
            frames.emplace_back(std::move(f));
            payload += s;
            eliciting = true;
            rec.chunks.push_back({id, ss.fin_offset, 0, true});
            ss.fin_rtx_pending = false;
          }
        }
      }
    }

    // 5. New data, one frame per stream per pass, round-robin.
    if (!cwnd_blocked && !send_streams_.empty()) {
      std::vector<std::uint32_t> order;
      order.reserve(send_streams_.size());
      for (auto it = send_streams_.upper_bound(rr_cursor_);
           it != send_streams_.end(); ++it)
        order.push_back(it->first);
      for (auto it = send_streams_.begin();
           it != send_streams_.end() && it->first <= rr_cursor_; ++it)
        order.push_back(it->first);

      bool packet_full = false;
      bool progress = true;
      while (progress && !cwnd_blocked && !packet_full) {
        progress = false;
        for (const std::uint32_t id : order) {
          SendStream& ss = send_streams_.at(id);
          const std::uint64_t pending = ss.accepted - ss.emit_frontier;
          const bool want_fin = ss.fin_requested && !ss.fin_emitted;
          if (pending == 0 && !want_fin) continue;
          if (room() < wire::kStreamFrameOverhead + (pending > 0 ? 1u : 0u)) {
            packet_full = true;
            break;
          }
          const std::size_t space = room() - wire::kStreamFrameOverhead;
          const auto len = static_cast<std::size_t>(std::min<std::uint64_t>(
              {pending, static_cast<std::uint64_t>(space), 65535ull}));
          const bool fin_here =
              want_fin && ss.emit_frontier + len == ss.fin_offset;
          if (len == 0 && !fin_here) continue;
          const std::size_t s = wire::kStreamFrameOverhead + len;
          if (!cwnd_allows(s)) {
            cwnd_blocked = true;
            break;
          }
          wire::StreamFrame f;
          f.stream_id = id;
          f.offset = ss.emit_frontier;
          f.fin = fin_here;
          const auto base =
              static_cast<std::ptrdiff_t>(ss.emit_frontier - ss.buffer_base);
          f.data.assign(ss.buffer.begin() + base,
                        ss.buffer.begin() + base +
                            static_cast<std::ptrdiff_t>(len));
          frames.emplace_back(std::move(f));
          payload += s;
          eliciting = true;
          rec.chunks.push_back({id, ss.emit_frontier,
                                static_cast<std::uint32_t>(len), fin_here});
          ss.emit_frontier += len;
          if (ss.unreliable && len > 0) {
            // Unreliable bytes leave the buffer at first transmission.
            ss.buffer.erase(ss.buffer.begin(),
                            ss.buffer.begin() +
                                static_cast<std::ptrdiff_t>(len));
            ss.buffer_base += len;
          }
          if (fin_here) ss.fin_emitted = true;
          rr_cursor_ = id;
          progress = true;
        }
      }
    }

    // 6. Probe after a timeout: if nothing above was ack-eliciting, force an
    //    empty frame on the control stream so the peer must acknowledge.
    if (probe_pending_) {
      if (eliciting) {
        probe_pending_ = false;
      } else if (!cwnd_blocked) {
        const std::size_t s = wire::kStreamFrameOverhead;
        if (s <= room() && cwnd_allows(s)) {
          SendStream& ss = send_streams_.at(kControlStreamId);
          wire::StreamFrame f;
          f.stream_id = kControlStreamId;
          f.offset = ss.emit_frontier;
          frames.emplace_back(std::move(f));
          payload += s;
          eliciting = true;
          rec.chunks.push_back({kControlStreamId, ss.emit_frontier, 0, false});
          probe_pending_ = false;
        } else if (!cwnd_allows(s)) {
          cwnd_blocked = true;
        }
      }
    }

    if (frames.empty()) break;
    if (!eliciting && !ack_due) break;  // nothing worth a datagram

    wire::Packet pkt;
    pkt.header.version = wire::kVersion;
    pkt.header.connection_id = cid_;
    pkt.header.packet_number = next_pn_;
    pkt.header.set_handshake(rec.handshake);
    pkt.frames = std::move(frames);
    std::vector<std::uint8_t> dgram = wire::encode_packet(pkt, cfg_.wire);

    rec.pn = next_pn_;
    rec.send_time = now;
    rec.size = dgram.size();
    ++next_pn_;
    ++stats_.packets_sent;
    stats_.bytes_sent += dgram.size();
    if (ack_attached) {
      pending_eliciting_ = 0;
      ack_timer_.reset();
    }
    if (eliciting) {
      rec.in_flight = true;
      bytes_in_flight_ += rec.size;
      sent_.emplace(rec.pn, std::move(rec));
      arm_pto(now);
    }
    out.push_back(std::move(dgram));
  }
  return out;
}

}  // namespace clipstream::transport
