#include <algorithm>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include "clipstream/media.hpp"
#include "clipstream/rng.hpp"
#include "clipstream/session.hpp"
#include "clipstream/transport.hpp"
#include "clipstream/wire.hpp"
#include "doctest.h"

namespace s = clipstream::session;
namespace t = clipstream::transport;
namespace w = clipstream::wire;
namespace media = clipstream::media;
using clipstream::Micros;
using Bytes = std::vector<std::uint8_t>;

namespace {

constexpr std::uint64_t kCid = 0xFEEDFACE01020304ull;

struct Sim {
  t::Connection server_conn{t::Role::kServer, kCid, t::ConnectionConfig{}};
  t::Connection client_conn{t::Role::kClient, kCid, t::ConnectionConfig{}};
  Micros now = 0;

  void establish() {
    client_conn.start_handshake(now);
    for (int i = 0;
         i < 8 && !(server_conn.established() && client_conn.established());
         ++i) {
      for (auto& d : client_conn.poll_transmit(now))
        server_conn.on_datagram(d, now);
      for (auto& d : server_conn.poll_transmit(now))
        client_conn.on_datagram(d, now);
    }
    REQUIRE(server_conn.established());
    REQUIRE(client_conn.established());
  }
};

using DropFn = std::function<bool(const Bytes&, std::size_t)>;

// Drive both sessions to quiescence: a fixpoint of pumps and datagram
// exchange at each instant, then a hop to the earliest pending timer.
// Server-to-client datagrams can be dropped via the predicate (called with
// the raw datagram and its ordinal). Stops early when virtual time would
// pass `deadline` (the transport never stops probing unacknowledged data on
// its own). Returns the emitted frame statuses.
std::vector<s::FrameStatus> drive(Sim& sim, s::ServerSession& server,
                                  s::ClientSession& client,
                                  const DropFn& drop = {},
                                  Micros deadline = 3'600'000'000) {
  std::vector<s::FrameStatus> out;
  std::size_t dg_index = 0;
  for (int iter = 0; iter < 1'000'000; ++iter) {
    for (int spin = 0;; ++spin) {
      REQUIRE(spin < 100'000);
      bool moved = false;
      server.pump(sim.now);
      for (auto& d : sim.server_conn.poll_transmit(sim.now)) {
        const std::size_t idx = dg_index++;
        moved = true;
        if (drop && drop(d, idx)) continue;
        auto ev = sim.client_conn.on_datagram(d, sim.now);
        auto st = client.pump(sim.now, ev.readable);
        out.insert(out.end(), st.begin(), st.end());
      }
      for (auto& d : sim.client_conn.poll_transmit(sim.now)) {
        moved = true;
        sim.server_conn.on_datagram(d, sim.now);
      }
      if (!moved) break;
    }
    {
      auto st = client.pump(sim.now, {});
      out.insert(out.end(), st.begin(), st.end());
    }
    if (client.finished() && server.finished()) return out;
    std::optional<Micros> next;
    for (const auto& c :
         {sim.server_conn.next_timer(), sim.client_conn.next_timer(),
          server.next_wakeup()})
      if (c && (!next || *c < *next)) next = c;
    if (!next) return out;  // idle but unfinished: caller decides what now
    if (*next >= deadline) {
      sim.now = deadline;
      return out;
    }
    sim.now = std::max(sim.now + 1, *next);
  }
  FAIL("drive did not quiesce");
  return out;
}

}  // namespace

TEST_CASE("session: mode names parse and print") {
  CHECK(s::parse_mode("tcp") == s::Mode::kTcpLike);
  CHECK(s::parse_mode("tcp_like") == s::Mode::kTcpLike);
  CHECK(s::parse_mode("quic") == s::Mode::kQuicLike);
  CHECK(s::parse_mode("cs") == s::Mode::kClipstream);
  CHECK(s::parse_mode("csfec") == s::Mode::kClipstreamFec);
  for (const auto m : s::kAllModes) CHECK(s::parse_mode(s::mode_name(m)) == m);
  CHECK_THROWS_AS(s::parse_mode("sctp"), clipstream::Error);
  CHECK(s::mode_uses_unreliable(s::Mode::kClipstream));
  CHECK(s::mode_uses_unreliable(s::Mode::kClipstreamFec));
  CHECK_FALSE(s::mode_uses_unreliable(s::Mode::kTcpLike));
  CHECK_FALSE(s::mode_uses_unreliable(s::Mode::kQuicLike));
  CHECK(s::mode_uses_fec(s::Mode::kClipstreamFec));
  CHECK_FALSE(s::mode_uses_fec(s::Mode::kClipstream));
}

TEST_CASE("session: control record codec round-trips and validates") {
  s::ControlRecord rec;
  rec.index = 5;
  rec.type = media::FrameType::kP;
  rec.stream_id = 1;
  rec.offset = 999;
  rec.length = 26'400;
  rec.fec_k = 19;
  rec.fec_m = 3;
  rec.shard_size = 1'200;
  rec.payload_length = 22'030;

  Bytes buf;
  s::append_control_record(buf, rec);
  REQUIRE(buf.size() == s::kControlRecordSize);
  const auto rt = s::decode_control_record(buf);
  CHECK(rt.index == 5);
  CHECK(rt.type == media::FrameType::kP);
  CHECK(rt.stream_id == 1);
  CHECK(rt.offset == 999);
  CHECK(rt.length == 26'400);
  CHECK(rt.fec_k == 19);
  CHECK(rt.fec_m == 3);
  CHECK(rt.shard_size == 1'200);
  CHECK(rt.payload_length == 22'030);
  CHECK(rt.coded());

  SUBCASE("wrong size") {
    buf.pop_back();
    CHECK_THROWS_AS(s::decode_control_record(buf), s::ControlStreamCorrupt);
  }
  SUBCASE("bad type tag") {
    buf[4] = 7;
    CHECK_THROWS_AS(s::decode_control_record(buf), s::ControlStreamCorrupt);
  }
  SUBCASE("parity fields on an uncoded record") {
    s::ControlRecord bad = rec;
    bad.fec_k = 0;
    Bytes b2;
    s::append_control_record(b2, bad);
    CHECK_THROWS_AS(s::decode_control_record(b2), s::ControlStreamCorrupt);
  }
  SUBCASE("uncoded length mismatch") {
    s::ControlRecord bad;
    bad.index = 1;
    bad.length = 10;
    bad.payload_length = 11;
    Bytes b2;
    s::append_control_record(b2, bad);
    CHECK_THROWS_AS(s::decode_control_record(b2), s::ControlStreamCorrupt);
  }
  SUBCASE("coded length mismatch") {
    s::ControlRecord bad = rec;
    bad.length = 26'399;
    Bytes b2;
    s::append_control_record(b2, bad);
    CHECK_THROWS_AS(s::decode_control_record(b2), s::ControlStreamCorrupt);
  }
  SUBCASE("payload exceeding the data shards") {
    s::ControlRecord bad = rec;
    bad.payload_length = 19 * 1'200 + 1;
    Bytes b2;
    s::append_control_record(b2, bad);
    CHECK_THROWS_AS(s::decode_control_record(b2), s::ControlStreamCorrupt);
  }
}

TEST_CASE("session: payload source is deterministic and verifiable") {
  s::PayloadSource a(42), b(42), c(43);
  const auto p1 = a.payload(7, 1'000);
  CHECK(p1 == b.payload(7, 1'000));
  CHECK(p1 != c.payload(7, 1'000));
  CHECK(p1 != a.payload(8, 1'000));
  CHECK(a.digest(7, 1'000) == clipstream::fnv1a_bytes(p1));
  CHECK(a.payload(7, 0).empty());
  // Shorter requests are prefixes of longer ones (same byte stream).
  const auto p2 = a.payload(7, 100);
  CHECK(std::equal(p2.begin(), p2.end(), p1.begin()));
}

TEST_CASE("session: lossless clipstream_fec delivers every frame intact") {
  media::TraceParams tp;
  tp.duration_s = 4.0;
  tp.total_mb = 1.0;
  tp.seed = 7;
  const auto trace = media::generate_trace(tp);
  REQUIRE(trace.frames.size() == 93);

  Sim sim;
  sim.establish();
  s::SessionConfig cfg;
  cfg.mode = s::Mode::kClipstreamFec;
  s::ServerSession server(sim.server_conn, trace, cfg);
  s::ClientSession client(sim.client_conn, cfg,
                          static_cast<std::uint32_t>(trace.frames.size()));
  const auto statuses = drive(sim, server, client);

  REQUIRE(statuses.size() == trace.frames.size());
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    CHECK(statuses[i].index == i);
    CHECK(statuses[i].outcome == s::Outcome::kIntact);
    CHECK(statuses[i].digest_ok);
    CHECK(statuses[i].payload_length == trace.frames[i].size);
    CHECK(statuses[i].type == trace.frames[i].type);
  }
  const auto& st = server.stats();
  CHECK(st.payload_bytes_total == trace.total_bytes());
  CHECK(st.reliable_payload_bytes == trace.reliable_bytes());
  // The generator pins the reliable class at exactly 12% of payload bytes.
  CHECK(st.reliable_payload_bytes * 100 == trace.total_bytes() * 12);
  CHECK(st.parity_overhead_bytes > 0);
  CHECK(st.frames_pushed == 93);
  CHECK(st.reliable_frames == 1);
  CHECK(st.control_bytes == 93 * s::kControlRecordSize);
  CHECK(client.stats().outcome_counts[0] == 93);
  CHECK(client.stats().digest_failures == 0);
  CHECK(client.finished());
}

TEST_CASE("session: coded frame geometry follows the static parity policy") {
  media::Trace trace;
  trace.fps = 24.0;
  trace.duration_s = 0.125;
  trace.frames = {
      media::Frame{0, 0, media::FrameType::kI, 5'000, true},
      media::Frame{1, 41'666, media::FrameType::kP, 22'030, false},
      media::Frame{2, 83'333, media::FrameType::kB, 3'000, false},
  };

  Sim sim;
  sim.establish();
  s::SessionConfig cfg;
  cfg.mode = s::Mode::kClipstreamFec;
  s::ServerSession server(sim.server_conn, trace, cfg);
  s::ClientSession client(sim.client_conn, cfg, 3);
  const auto statuses = drive(sim, server, client);

  REQUIRE(statuses.size() == 3);
  for (const auto& st : statuses) {
    CHECK(st.outcome == s::Outcome::kIntact);
    CHECK(st.digest_ok);
  }
  // 22'030 payload bytes -> k=19 data + m=3 parity shards = 26'400 on the
  // wire; 3'000 bytes -> k=3, m=1 = 4'800; the I frame travels uncoded.
  CHECK(server.stats().wire_bytes_total == 5'000 + 26'400 + 4'800);
  CHECK(server.stats().parity_overhead_bytes ==
        (26'400 - 22'030) + (4'800 - 3'000));
}

namespace {

// Drops the first server datagram that carries unreliable stream payload.
DropFn drop_first_unreliable(bool& dropped) {
  return [&dropped](const Bytes& d, std::size_t) {
    if (dropped) return false;
    const auto p = w::decode_packet(d, w::WireConfig{});
    for (const auto& f : p.frames)
      if (const auto* sf = std::get_if<w::StreamFrame>(&f))
        if (t::stream_is_unreliable(sf->stream_id) && !sf->data.empty()) {
          dropped = true;
          return true;
        }
    return false;
  };
}

}  // namespace

TEST_CASE("session: clipstream turns an unreliable loss into a corrupted frame") {
  media::TraceParams tp;
  tp.duration_s = 4.0;
  tp.total_mb = 1.0;
  tp.seed = 9;
  const auto trace = media::generate_trace(tp);

  Sim sim;
  sim.establish();
  s::SessionConfig cfg;
  cfg.mode = s::Mode::kClipstream;
  s::ServerSession server(sim.server_conn, trace, cfg);
  s::ClientSession client(sim.client_conn, cfg,
                          static_cast<std::uint32_t>(trace.frames.size()));
  bool dropped = false;
  const auto statuses = drive(sim, server, client, drop_first_unreliable(dropped));

  REQUIRE(dropped);
  REQUIRE(statuses.size() == trace.frames.size());
  const auto& counts = client.stats().outcome_counts;
  CHECK(counts[static_cast<std::size_t>(s::Outcome::kCorrupted)] +
            counts[static_cast<std::size_t>(s::Outcome::kMissing)] >=
        1);
  CHECK(counts[static_cast<std::size_t>(s::Outcome::kRecovered)] == 0);
  CHECK(counts[static_cast<std::size_t>(s::Outcome::kUnresolved)] == 0);
  for (const auto& st : statuses)
    if (st.type == media::FrameType::kI)
      CHECK(st.outcome == s::Outcome::kIntact);
  CHECK(server.stats().frames_pushed == trace.frames.size());
  CHECK(server.stats().parity_overhead_bytes == 0);
}

TEST_CASE("session: clipstream_fec recovers an unreliable loss") {
  media::TraceParams tp;
  tp.duration_s = 4.0;
  tp.total_mb = 3.0;  // P/B frames around 28 KB -> k~24, m~4 parity shards
  tp.seed = 9;
  const auto trace = media::generate_trace(tp);

  Sim sim;
  sim.establish();
  s::SessionConfig cfg;
  cfg.mode = s::Mode::kClipstreamFec;
  s::ServerSession server(sim.server_conn, trace, cfg);
  s::ClientSession client(sim.client_conn, cfg,
                          static_cast<std::uint32_t>(trace.frames.size()));
  bool dropped = false;
  const auto statuses = drive(sim, server, client, drop_first_unreliable(dropped));

  REQUIRE(dropped);
  REQUIRE(statuses.size() == trace.frames.size());
  const auto& counts = client.stats().outcome_counts;
  CHECK(counts[static_cast<std::size_t>(s::Outcome::kRecovered)] >= 1);
  CHECK(counts[static_cast<std::size_t>(s::Outcome::kCorrupted)] == 0);
  CHECK(counts[static_cast<std::size_t>(s::Outcome::kMissing)] == 0);
  CHECK(counts[static_cast<std::size_t>(s::Outcome::kUnresolved)] == 0);
  for (const auto& st : statuses) {
    if (st.outcome == s::Outcome::kRecovered) CHECK(st.erased_shards >= 1);
    CHECK(st.digest_ok);
  }
  CHECK(client.stats().digest_failures == 0);
}

TEST_CASE("session: reliable modes deliver every frame intact through loss") {
  for (const auto mode : {s::Mode::kTcpLike, s::Mode::kQuicLike}) {
    CAPTURE(s::mode_name(mode));
    media::TraceParams tp;
    tp.duration_s = 8.3;  // 196 frames across 3 chunks
    tp.total_mb = 1.0;
    tp.seed = 11;
    const auto trace = media::generate_trace(tp);
    REQUIRE(trace.frames.size() == 196);

    Sim sim;
    sim.establish();
    s::SessionConfig cfg;
    cfg.mode = mode;
    s::ServerSession server(sim.server_conn, trace, cfg);
    s::ClientSession client(sim.client_conn, cfg,
                            static_cast<std::uint32_t>(trace.frames.size()));
    const auto statuses =
        drive(sim, server, client,
              [](const Bytes&, std::size_t i) { return i % 7 == 3; });

    REQUIRE(statuses.size() == trace.frames.size());
    for (const auto& st : statuses) {
      CHECK(st.outcome == s::Outcome::kIntact);
      CHECK(st.digest_ok);
    }
    CHECK(sim.server_conn.stats().bytes_retransmitted > 0);
  }
}

TEST_CASE("session: paced release follows the media schedule") {
  media::TraceParams tp;
  tp.duration_s = 4.0;
  tp.total_mb = 1.0;
  tp.seed = 7;
  const auto trace = media::generate_trace(tp);

  Sim sim;
  sim.establish();
  REQUIRE(sim.now == 0);

  s::SessionConfig cfg;
  cfg.mode = s::Mode::kClipstreamFec;
  cfg.pace_lookahead_s = 1.0;
  s::ServerSession server(sim.server_conn, trace, cfg);
  s::ClientSession client(sim.client_conn, cfg,
                          static_cast<std::uint32_t>(trace.frames.size()));

  // At time zero only frames within the one-second lookahead are released;
  // the server then asks to wake when the next frame becomes due.
  server.pump(sim.now);
  REQUIRE(server.next_wakeup().has_value());
  CHECK(*server.next_wakeup() == trace.frames[25].pts - 1'000'000);
  CHECK_FALSE(server.finished());

  auto statuses = drive(sim, server, client);
  REQUIRE(statuses.size() == trace.frames.size());
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    CHECK(statuses[i].outcome == s::Outcome::kIntact);
    CHECK(statuses[i].digest_ok);
  }
  // The tail of the presentation cannot complete before its paced release.
  CHECK(statuses.back().complete_time >=
        trace.frames.back().pts - 1'000'000);
  CHECK(server.stats().payload_bytes_total == trace.total_bytes());
}

TEST_CASE("session: an unfinished run is truncated with unresolved frames") {
  media::TraceParams tp;
  tp.duration_s = 4.0;
  tp.total_mb = 1.0;
  tp.seed = 13;
  const auto trace = media::generate_trace(tp);

  Sim sim;
  sim.establish();
  s::SessionConfig cfg;
  cfg.mode = s::Mode::kClipstream;
  s::ServerSession server(sim.server_conn, trace, cfg);
  s::ClientSession client(sim.client_conn, cfg,
                          static_cast<std::uint32_t>(trace.frames.size()));
  // Suppress every packet that carries only unreliable-stream frames (the
  // final marker included), so reliable traffic completes but the unreliable
  // tail never can; the sender keeps probing it forever, so stop at a
  // virtual deadline.
  auto statuses = drive(
      sim, server, client,
      [](const Bytes& d, std::size_t) {
        const auto p = w::decode_packet(d, w::WireConfig{});
        bool any_unreliable = false;
        for (const auto& f : p.frames)
          if (const auto* sf = std::get_if<w::StreamFrame>(&f)) {
            if (!t::stream_is_unreliable(sf->stream_id)) return false;
            any_unreliable = true;
          }
        return any_unreliable;
      },
      16'000'000);

  CHECK_FALSE(client.finished());
  const auto rest = client.force_finish(sim.now);
  CHECK(client.finished());
  statuses.insert(statuses.end(), rest.begin(), rest.end());
  REQUIRE(statuses.size() == trace.frames.size());

  std::size_t n_unresolved = 0;
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    CHECK(statuses[i].index == i);
    // Metadata always comes through on the (reliable) control stream, even
    // for frames whose payload never resolved.
    CHECK(statuses[i].type == trace.frames[i].type);
    CHECK(statuses[i].payload_length == trace.frames[i].size);
    if (trace.frames[i].reliable) {
      CHECK(statuses[i].outcome == s::Outcome::kIntact);
    } else {
      // Some payload bytes may ride packets shared with reliable streams, so
      // individual frames can land anywhere; none may be falsely recovered.
      CHECK(statuses[i].outcome != s::Outcome::kRecovered);
      if (statuses[i].outcome == s::Outcome::kUnresolved) ++n_unresolved;
    }
  }
  CHECK(n_unresolved >= 1);
}
