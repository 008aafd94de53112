// Partially reliable transport connection: streams, acknowledgments, loss
// recovery, flow control, and congestion control on top of the wire codec.
//
// A Connection is a pure state machine driven by three inputs: application
// stream operations, received datagrams (on_datagram), and the passage of
// virtual time (poll_transmit / next_timer). It never performs I/O and never
// reads a clock; all times are supplied by the caller in microseconds. Two
// Connections joined by any datagram conduit (lossy, reordering, duplicating)
// form a session.
//
// Reliability model:
//   - Reliable streams (even ids, plus control stream 0) retransmit lost data
//     until acknowledged; receivers deliver exact in-order bytes.
//   - Unreliable streams (odd ids) never retransmit. Receivers deliver what
//     arrives; holes that persist past a reordering window or timeout are
//     surfaced to the application as explicit zero-filled ranges so a
//     forward-error-correction layer above can treat them as erasures.
#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clipstream/base.hpp"
#include "clipstream/wire.hpp"

namespace clipstream::transport {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// Peer spoke a wire version we do not understand.
struct VersionMismatch : Error {
  VersionMismatch() : Error("peer version not supported") {}
};

// Application asked for an unreliable stream but the peer did not negotiate
// unreliable delivery support.
struct UnreliableNotNegotiated : Error {
  UnreliableNotNegotiated()
      : Error("peer did not negotiate unreliable stream support") {}
};

// The 32-bit stream id space is exhausted (practically unreachable).
struct StreamsExhausted : Error {
  StreamsExhausted() : Error("stream id space exhausted") {}
};

// Write to a stream that already carries a FIN.
struct StreamClosed : Error {
  explicit StreamClosed(std::uint32_t id)
      : Error("stream " + std::to_string(id) + " is closed for writing") {}
};

// Operation on a stream this endpoint does not know in that role
// (reading a stream we write, writing a stream we never opened, or a FIN
// offset conflict from the peer).
struct StreamReset : Error {
  explicit StreamReset(const std::string& what) : Error(what) {}
};

// ---------------------------------------------------------------------------
// Parameters and configuration
// ---------------------------------------------------------------------------

enum class Role : std::uint8_t { kClient, kServer };
enum class StreamClass : std::uint8_t { kReliable, kUnreliable };

// Stream 0 is created implicitly on both endpoints and is always reliable.
inline constexpr std::uint32_t kControlStreamId = 0;

// Odd stream ids are unreliable, even ids (including 0) reliable.
constexpr bool stream_is_unreliable(std::uint32_t id) { return (id & 1u) != 0; }

// Local transport parameters advertised during the handshake.
struct TransportParams {
  bool unreliable_supported = true;
  std::uint64_t initial_max_data = wire::kDefaultInitialMaxData;
  std::uint64_t initial_max_stream_data = wire::kDefaultInitialMaxStreamData;
};

// Result of combining both endpoints' parameters.
struct NegotiatedParams {
  bool unreliable_enabled = false;
};

// Unreliable streams require both sides to support them.
inline NegotiatedParams negotiate(const TransportParams& local,
                                  const TransportParams& peer) {
  NegotiatedParams n;
  n.unreliable_enabled = local.unreliable_supported && peer.unreliable_supported;
  return n;
}

struct ConnectionConfig {
  TransportParams params;
  wire::WireConfig wire;

  // RTT estimator seed values used until the first sample arrives.
  Micros initial_srtt = 100'000;
  Micros initial_rttvar = 50'000;

  // Constant added to the probe-timeout interval to absorb peer ack delay.
  Micros pto_extra = 25'000;

  // Receiver: how long a single pending packet may wait before an ACK is
  // forced out, and how many ack-eliciting packets force one immediately.
  Micros max_ack_delay = 25'000;
  int ack_packet_threshold = 2;

  // Sender loss detection: a packet is lost when this many higher-numbered
  // packets have been acknowledged, or when it has been outstanding longer
  // than 9/8 of the current RTT estimate.
  int loss_packet_threshold = 3;

  // Receiver hole-skipping policy for unreliable streams: a leading gap is
  // abandoned once bytes this far beyond it have arrived, or once it has
  // stalled the stream for this long.
  std::uint64_t reorder_window_bytes = 4'200;
  Micros reorder_timeout = 60'000;

  // Initial congestion window, in full-size packets.
  int initial_cwnd_packets = 32;

  // Maximum datagram size produced by this connection.
  std::size_t mtu() const { return wire::kHeaderSize + wire.mtu_payload; }

  void validate() const {
    wire.validate();
    if (initial_srtt <= 0 || initial_rttvar < 0)
      throw Error("invalid RTT seed configuration");
    if (pto_extra < 0 || max_ack_delay < 0)
      throw Error("invalid timer configuration");
    if (ack_packet_threshold < 1)
      throw Error("ack_packet_threshold must be at least 1");
    if (loss_packet_threshold < 1)
      throw Error("loss_packet_threshold must be at least 1");
    if (reorder_timeout <= 0)
      throw Error("reorder_timeout must be positive");
    if (initial_cwnd_packets < 2)
      throw Error("initial_cwnd_packets must be at least 2");
  }
};

// ---------------------------------------------------------------------------
// Connection-level counters (monotone; exposed for diagnostics and tests)
// ---------------------------------------------------------------------------

struct ConnStats {
  std::uint64_t packets_sent = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t packets_received = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t packets_lost = 0;
  std::uint64_t bytes_retransmitted = 0;
  std::uint64_t unreliable_bytes_abandoned = 0;
  std::uint64_t cid_mismatch_drops = 0;
  std::uint64_t acked_eliciting_packets = 0;
};

// ---------------------------------------------------------------------------
// Read interface
// ---------------------------------------------------------------------------

// One stream_read result. `data` is the next run of consumable bytes in
// stream order. For unreliable streams, portions of `data` may be synthetic
// zeros standing in for bytes the transport gave up on; `zero_ranges` lists
// those spans as absolute [begin, end) stream offsets. Reliable streams
// always return zero_ranges empty.
struct ReadResult {
  std::vector<std::uint8_t> data;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> zero_ranges;
  bool fin_reached = false;
};

// What a datagram did to the connection, so callers know what to poll.
struct Events {
  bool established = false;              // handshake completed just now
  std::vector<std::uint32_t> readable;   // streams with (possibly) new data
};

// ---------------------------------------------------------------------------
// Connection
// ---------------------------------------------------------------------------

class Connection {
 public:
  Connection(Role role, std::uint64_t connection_id,
             const ConnectionConfig& config);

  // -- Handshake ------------------------------------------------------------

  // Client: queue the initial handshake packet. Idempotent.
  void start_handshake(Micros now);

  bool established() const { return established_; }
  bool negotiated_unreliable() const { return negotiated_.unreliable_enabled; }
  const TransportParams& peer_params() const { return peer_params_; }

  // -- Streams --------------------------------------------------------------

  // Allocate the next locally-initiated stream id of the given class.
  std::uint32_t open_stream(StreamClass cls);

  // Append bytes (and/or a FIN) to a send stream. Returns how many bytes of
  // `data` were accepted; the remainder was refused by flow-control limits
  // and must be re-offered later. The FIN is recorded only when every byte of
  // `data` is accepted. A fin-only call (empty data) always succeeds.
  std::size_t stream_write(std::uint32_t id, std::span<const std::uint8_t> data,
                           bool fin);

  // Pull consumable bytes from a receive stream, at most `max_bytes`.
  ReadResult stream_read(std::uint32_t id, std::size_t max_bytes, Micros now);

  // -- Datagram plane -------------------------------------------------------

  // Process one received datagram.
  Events on_datagram(std::span<const std::uint8_t> datagram, Micros now);

  // Run timers (loss detection, probe timeout, ack delay) and emit every
  // datagram the connection is currently allowed to send.
  std::vector<std::vector<std::uint8_t>> poll_transmit(Micros now);

  // Earliest future instant at which poll_transmit would do new work, if any.
  std::optional<Micros> next_timer() const;

  // -- Introspection ----------------------------------------------------------

  const ConnStats& stats() const { return stats_; }
  std::uint64_t cwnd() const { return cwnd_; }
  std::uint64_t bytes_in_flight() const { return bytes_in_flight_; }
  Micros srtt() const { return srtt_; }
  // Smoothed estimate of the network loss rate seen by this sender.
  double loss_estimate() const { return loss_ewma_; }
  // Packet numbers declared lost, in declaration order.
  const std::vector<std::uint64_t>& lost_packet_log() const {
    return lost_packets_;
  }

 private:
  // -- Send side of one stream ----------------------------------------------
  struct SendStream {
    bool unreliable = false;

    // Bytes [buffer_base_, accepted_) are retained in `buffer`. For reliable
    // streams the base advances as the acknowledged watermark moves; for
    // unreliable streams bytes are discarded as soon as they are first
    // emitted, so the buffer holds only [emit_frontier_, accepted_).
    std::deque<std::uint8_t> buffer;
    std::uint64_t buffer_base = 0;
    std::uint64_t accepted = 0;        // total bytes accepted from the app
    std::uint64_t emit_frontier = 0;   // lowest offset never yet sent
    wire::IntervalSet acked;           // reliable: offsets acknowledged
    wire::IntervalSet rtx;             // reliable: offsets pending resend

    bool fin_requested = false;
    std::uint64_t fin_offset = 0;
    bool fin_emitted = false;
    bool fin_acked = false;
    bool fin_rtx_pending = false;

    std::uint64_t send_limit = 0;      // peer's flow-control cap (absolute)

    bool finished() const {
      if (!fin_requested) return false;
      if (unreliable) return fin_emitted || fin_acked;
      return fin_acked && buffer_base == accepted;
    }
  };

  // -- Receive side of one stream ---------------------------------------------
  struct RecvStream {
    bool unreliable = false;

    // Out-of-order segments not yet consumed, keyed by absolute offset.
    // Invariant: segments are disjoint and all lie at offset >= read_offset.
    std::map<std::uint64_t, std::vector<std::uint8_t>> segs;
    std::uint64_t read_offset = 0;     // next byte the app will see
    std::uint64_t highest_end = 0;     // one past the highest byte received
    std::optional<std::uint64_t> fin_offset;
    bool fin_delivered = false;

    // When the stream became blocked on a missing leading byte; -1 if the
    // front of the reassembly queue is contiguous.
    Micros gap_since = -1;

    std::uint64_t recv_limit = 0;      // what we advertised to the peer
    std::uint64_t consumed = 0;        // bytes delivered to the app
  };

  // Bookkeeping for one in-flight packet, kept until acked or lost.
  struct SentRecord {
    std::uint64_t pn = 0;
    Micros send_time = 0;
    std::size_t size = 0;          // full datagram size
    bool in_flight = false;        // counted against cwnd
    bool handshake = false;
    // When this packet carried an acknowledgment, one past the largest
    // packet number it covered; once the peer acknowledges this packet,
    // receive state below that bound is confirmed delivered and pruned.
    std::uint64_t acked_through = 0;
    bool max_data = false;         // carried a MAX_DATA frame
    std::vector<std::uint32_t> max_stream_data;  // streams with limit updates
    // Stream payload ranges carried: (id, offset, length, fin).
    struct Chunk {
      std::uint32_t id;
      std::uint64_t offset;
      std::uint32_t length;
      bool fin;
    };
    std::vector<Chunk> chunks;
  };

  // --- internal helpers (defined in transport.cpp) ---
  SendStream& send_stream_or_throw(std::uint32_t id);
  RecvStream& recv_stream_for(std::uint32_t id);
  void insert_segment(RecvStream& rs, std::uint64_t off,
                      const std::vector<std::uint8_t>& bytes);
  void note_eliciting_received(std::uint64_t pn, Micros now);
  void process_frame(const wire::Frame& frame, Micros now, Events& ev);
  void process_ack(const wire::AckFrame& ack, Micros now);
  void on_packet_acked(const SentRecord& rec, Micros now);
  void on_packet_lost(const SentRecord& rec);
  void declare_lost(std::uint64_t pn, const SentRecord& rec);
  void detect_losses(Micros now);
  void maybe_fire_pto(Micros now);
  void update_rtt(Micros latest, Micros ack_delay);
  void cc_on_ack(std::uint64_t pn, std::size_t acked_size);
  void cc_on_loss(std::uint64_t pn);
  void note_loss_sample(bool lost);
  void arm_pto(Micros now);
  void refresh_gap_state(RecvStream& rs, Micros now);
  std::optional<Micros> earliest_gap_deadline() const;
  void grant_flow_credit(std::uint32_t id, RecvStream& rs);

  // Packet assembly.
  std::vector<std::vector<std::uint8_t>> build_packets(Micros now);

  Role role_;
  std::uint64_t cid_;
  ConnectionConfig cfg_;

  // Handshake state.
  bool handshake_sent_ = false;      // we queued our handshake at least once
  bool handshake_pending_ = false;   // a handshake frame awaits (re)send
  bool handshake_acked_ = false;     // peer acknowledged our handshake packet
  bool established_ = false;
  TransportParams peer_params_;
  NegotiatedParams negotiated_;

  // Streams.
  std::map<std::uint32_t, SendStream> send_streams_;
  std::map<std::uint32_t, RecvStream> recv_streams_;
  std::uint32_t next_reliable_id_ = 2;
  std::uint32_t next_unreliable_id_ = 1;

  // Connection-level flow control.
  std::uint64_t conn_send_limit_ = 0;    // peer's cap on our aggregate sends
  std::uint64_t conn_accepted_ = 0;      // aggregate bytes accepted for send
  std::uint64_t conn_recv_limit_ = 0;    // our advertised cap to the peer
  std::uint64_t conn_recv_highest_ = 0;  // aggregate highest ends received
  std::uint64_t conn_consumed_ = 0;      // aggregate bytes delivered to app
  bool max_data_pending_ = false;
  std::vector<std::uint32_t> max_stream_data_pending_;

  // Packet numbering and in-flight tracking.
  std::uint64_t next_pn_ = 0;
  std::map<std::uint64_t, SentRecord> sent_;
  std::uint64_t bytes_in_flight_ = 0;
  std::uint64_t largest_acked_ = 0;
  bool any_acked_ = false;
  wire::IntervalSet acked_pns_;      // pns the peer has acknowledged

  // Receiver ack state.
  wire::IntervalSet recv_pns_;       // ack-eliciting pns received
  int pending_eliciting_ = 0;        // eliciting packets since last ACK sent
  Micros first_pending_receipt_ = 0;
  std::optional<Micros> ack_timer_;

  // RTT estimation.
  bool have_rtt_sample_ = false;
  Micros srtt_;
  Micros rttvar_;
  Micros min_rtt_ = 0;
  Micros latest_rtt_ = 0;

  // Loss detection timers.
  std::optional<Micros> loss_timer_;
  std::optional<Micros> pto_deadline_;
  int pto_count_ = 0;
  bool probe_pending_ = false;

  // Congestion control.
  std::uint64_t cwnd_;
  std::uint64_t ssthresh_;
  std::uint64_t recovery_end_pn_ = 0;
  bool in_recovery_ = false;
  bool epoch_congested_ = false;
  bool any_loss_epoch_ = false;

  // Loss-rate estimator (for the FEC layer above).
  double loss_ewma_ = 0.0;

  // Round-robin cursor over send streams for new-data scheduling.
  std::uint32_t rr_cursor_ = 0;

  ConnStats stats_;
  std::vector<std::uint64_t> lost_packets_;
};

}  // namespace clipstream::transport
