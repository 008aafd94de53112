#include "clipstream/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <utility>

#include "clipstream/log.hpp"
#include "clipstream/netem.hpp"
#include "clipstream/rng.hpp"
#include "clipstream/transport.hpp"
#include "json.hpp"

namespace clipstream::harness {

void WorldParams::validate() const {
  if (!(rate_mbps > 0.0) || !std::isfinite(rate_mbps))
    throw ConfigError("link rate must be positive and finite");
  if (!(delay_ms >= 0.0) || !std::isfinite(delay_ms))
    throw ConfigError("link delay must be non-negative and finite");
  if (buffer_packets == 0)
    throw ConfigError("link buffer must hold at least one packet");
  if (!(loss_rate >= 0.0 && loss_rate < 1.0))
    throw ConfigError("loss rate must lie in [0, 1)");
  if (!(deadline_factor >= 1.0) || !std::isfinite(deadline_factor))
    throw ConfigError("deadline factor must be at least 1");
  session.validate();
}

void MatrixParams::validate() const {
  if (modes.empty()) throw ConfigError("matrix needs at least one mode");
  if (loss_rates.empty())
    throw ConfigError("matrix needs at least one loss rate");
  if (reps < 1) throw ConfigError("matrix needs at least one repetition");
  WorldParams probe = world;
  for (double loss : loss_rates) {
    probe.loss_rate = loss;
    probe.validate();
  }
}

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

namespace {

constexpr int kMaxSettleSpins = 1'000'000;
constexpr std::uint64_t kMaxEventHops = 200'000'000;

struct World {
  transport::Connection server;
  transport::Connection client;
  netem::DuplexLink link;
  session::ServerSession server_session;
  session::ClientSession client_session;
  std::vector<session::FrameStatus> statuses;
  Micros now = 0;

  World(const media::Trace& trace, const WorldParams& wp,
        const transport::ConnectionConfig& ccfg, const netem::LinkConfig& lcfg,
        std::uint64_t cid)
      : server(transport::Role::kServer, cid, ccfg),
        client(transport::Role::kClient, cid, ccfg),
        link(lcfg, wp.seed),
        server_session(server, trace, wp.session),
        client_session(client, wp.session,
                       static_cast<std::uint32_t>(trace.frames.size())) {}

  void absorb(std::vector<session::FrameStatus> emitted) {
    statuses.insert(statuses.end(),
                    std::make_move_iterator(emitted.begin()),
                    std::make_move_iterator(emitted.end()));
  }

  // Run every action available at the current instant until none remains:
  // session pumps, transmissions, and link deliveries that have matured.
  void settle() {
    for (int spin = 0;; ++spin) {
      if (spin >= kMaxSettleSpins)
        throw Error("harness event loop failed to settle");
      bool progress = false;
      server_session.pump(now);
      for (auto& d : server.poll_transmit(now)) {
        link.a_to_b.push(std::move(d), now);
        progress = true;
      }
      while (auto delivery = link.a_to_b.poll(now)) {
        const auto ev = client.on_datagram(delivery->data, now);
        absorb(client_session.pump(now, ev.readable));
        progress = true;
      }
      for (auto& d : client.poll_transmit(now)) {
        link.b_to_a.push(std::move(d), now);
        progress = true;
      }
      while (auto delivery = link.b_to_a.poll(now)) {
        server.on_datagram(delivery->data, now);
        progress = true;
      }
      // Timer-released data (reordering holes) surfaces without new bytes.
      auto emitted = client_session.pump(now, {});
      if (!emitted.empty()) {
        absorb(std::move(emitted));
        progress = true;
      }
      if (!progress) return;
    }
  }

  std::optional<Micros> next_event() const {
    std::optional<Micros> next;
    auto consider = [&next](std::optional<Micros> t) {
      if (t && (!next || *t < *next)) next = *t;
    };
    consider(server.next_timer());
    consider(client.next_timer());
    consider(server_session.next_wakeup());
    consider(link.a_to_b.next_delivery_time());
    consider(link.b_to_a.next_delivery_time());
    return next;
  }
};

}  // namespace

RunRow run_once(const media::Trace& trace, const WorldParams& wp) {
  wp.validate();
  if (trace.frames.empty()) throw ConfigError("trace has no frames");

  const auto duration_us = static_cast<Micros>(std::llround(
      static_cast<double>(trace.frames.size()) * 1e6 / trace.fps));
  const auto deadline = static_cast<Micros>(
      std::llround(wp.deadline_factor * static_cast<double>(duration_us)));

  transport::ConnectionConfig ccfg;
  netem::LinkConfig lcfg;
  lcfg.rate_bps = wp.rate_mbps * 1e6;
  lcfg.one_way_delay = static_cast<Micros>(std::llround(wp.delay_ms * 1e3));
  lcfg.buffer_packets = wp.buffer_packets;
  lcfg.loss_rate = wp.loss_rate;

  const std::uint64_t cid = mix_seed(wp.seed, 0x636f6e6e2d696421ull);
  World w(trace, wp, ccfg, lcfg, cid);
  w.client.start_handshake(w.now);

  for (std::uint64_t hops = 0;; ++hops) {
    if (hops >= kMaxEventHops)
      throw Error("harness run exceeded its event budget");
    w.settle();
    if (w.server_session.finished() && w.client_session.finished()) break;
    const auto next = w.next_event();
    if (!next || *next >= deadline) {
      // Out of time (or, defensively, out of events): score what is
      // deliverable by the deadline, then close the books.
      w.now = deadline;
      w.settle();
      w.absorb(w.client_session.force_finish(w.now));
      break;
    }
    w.now = std::max(*next, w.now + 1);
  }

  if (w.statuses.size() != trace.frames.size())
    throw Error("harness produced a frame status count mismatch");

  if (log_enabled(LogLevel::kDebug)) {
    const auto& cs = w.server.stats();
    const auto& ls = w.link.a_to_b.stats();
    const auto& ss = w.server_session.stats();
    CLIPSTREAM_LOG_DEBUG(
        "server conn: pkts=%llu bytes=%llu rtx_bytes=%llu abandoned=%llu",
        static_cast<unsigned long long>(cs.packets_sent),
        static_cast<unsigned long long>(cs.bytes_sent),
        static_cast<unsigned long long>(cs.bytes_retransmitted),
        static_cast<unsigned long long>(cs.unreliable_bytes_abandoned));
    CLIPSTREAM_LOG_DEBUG(
        "downlink: offered=%llu dropq=%llu lost=%llu delivered=%llu",
        static_cast<unsigned long long>(ls.offered),
        static_cast<unsigned long long>(ls.dropped_queue),
        static_cast<unsigned long long>(ls.lost_random),
        static_cast<unsigned long long>(ls.delivered));
    CLIPSTREAM_LOG_DEBUG(
        "session: payload=%llu wire=%llu parity=%llu control=%llu",
        static_cast<unsigned long long>(ss.payload_bytes_total),
        static_cast<unsigned long long>(ss.wire_bytes_total),
        static_cast<unsigned long long>(ss.parity_overhead_bytes),
        static_cast<unsigned long long>(ss.control_bytes));
  }

  metrics::PlayerParams pp;
  pp.fps = trace.fps;
  pp.frames_per_chunk = trace.frames_per_chunk;
  const auto report = metrics::evaluate_playback(w.statuses, pp);

  const auto& sstats = w.server_session.stats();
  RunRow row;
  row.mode = wp.session.mode;
  row.loss_rate = wp.loss_rate;
  row.seed = wp.seed;
  row.buf_ratio = report.buf_ratio;
  row.rate_buf = report.rate_buf;
  row.assim = report.assim;
  row.mos = report.mos;
  row.startup_s = static_cast<double>(report.startup_delay) / 1e6;
  row.bytes_sent = w.server.stats().bytes_sent;
  row.fec_overhead =
      sstats.payload_bytes_total > 0
          ? static_cast<double>(sstats.parity_overhead_bytes) /
                static_cast<double>(sstats.payload_bytes_total)
          : 0.0;
  row.completed = report.completed;
  row.reliable_share =
      sstats.payload_bytes_total > 0
          ? static_cast<double>(sstats.reliable_payload_bytes) /
                static_cast<double>(sstats.payload_bytes_total)
          : 0.0;
  row.reliable_frames = sstats.reliable_frames;
  row.frames_total = sstats.frames_pushed;
  return row;
}

// ---------------------------------------------------------------------------
// Matrix sweep
// ---------------------------------------------------------------------------

std::uint64_t run_seed(std::uint64_t base_seed, session::Mode mode,
                       double loss_rate, int rep) {
  std::uint64_t h = fnv1a_u64(static_cast<std::uint64_t>(mode));
  h = fnv1a_u64(
      static_cast<std::uint64_t>(std::llround(loss_rate * 1e6)), h);
  h = fnv1a_u64(static_cast<std::uint64_t>(rep), h);
  return mix_seed(base_seed, h);
}

SummaryStat summarize(std::vector<double> values) {
  if (values.empty()) throw ConfigError("cannot summarize an empty sample");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  SummaryStat s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) /
           static_cast<double>(n);
  s.median = (n % 2 == 1)
                 ? values[n / 2]
                 : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(n));
  return s;
}

MatrixResult run_matrix(const media::Trace& trace, const MatrixParams& mp) {
  mp.validate();

  struct Cell {
    session::Mode mode;
    double loss;
    int rep;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  cells.reserve(mp.modes.size() * mp.loss_rates.size() *
                static_cast<std::size_t>(mp.reps));
  for (auto mode : mp.modes)
    for (double loss : mp.loss_rates)
      for (int rep = 0; rep < mp.reps; ++rep)
        cells.push_back({mode, loss, rep,
                         run_seed(mp.base_seed, mode, loss, rep)});

  MatrixResult result;
  result.rows.resize(cells.size());
  std::string first_error;

  const auto total = static_cast<std::int64_t>(cells.size());
#pragma omp parallel for schedule(dynamic, 1) if (mp.parallel)
  for (std::int64_t i = 0; i < total; ++i) {
    const auto& cell = cells[static_cast<std::size_t>(i)];
    try {
      WorldParams wp = mp.world;
      wp.loss_rate = cell.loss;
      wp.seed = cell.seed;
      wp.session.mode = cell.mode;
      auto row = run_once(trace, wp);
      row.rep = cell.rep;
      result.rows[static_cast<std::size_t>(i)] = row;
      CLIPSTREAM_LOG_INFO("run %s loss=%.4f rep=%d: assim=%.4f buf=%.5f%s",
                          session::mode_name(cell.mode), cell.loss, cell.rep,
                          row.assim, row.buf_ratio,
                          row.completed ? "" : " (truncated)");
    } catch (const std::exception& e) {
#pragma omp critical(clipstream_harness_error)
      if (first_error.empty()) first_error = e.what();
    }
  }
  if (!first_error.empty()) throw Error(first_error);

  // Rows sit in sweep order, so each (mode, loss) cell is one contiguous
  // slice of `reps` rows.
  std::size_t at = 0;
  for (auto mode : mp.modes) {
    for (double loss : mp.loss_rates) {
      Aggregate agg;
      agg.mode = mode;
      agg.loss_rate = loss;
      agg.n = mp.reps;
      std::vector<double> buf, rate, assim, mos, startup, fec;
      for (int rep = 0; rep < mp.reps; ++rep) {
        const RunRow& row = result.rows[at++];
        buf.push_back(row.buf_ratio);
        rate.push_back(row.rate_buf);
        assim.push_back(row.assim);
        mos.push_back(static_cast<double>(row.mos));
        startup.push_back(row.startup_s);
        fec.push_back(row.fec_overhead);
        if (row.completed) ++agg.completed_runs;
      }
      agg.buf_ratio = summarize(std::move(buf));
      agg.rate_buf = summarize(std::move(rate));
      agg.assim = summarize(std::move(assim));
      agg.mos = summarize(std::move(mos));
      agg.startup_s = summarize(std::move(startup));
      agg.fec_overhead = summarize(std::move(fec));
      result.aggregates.push_back(agg);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Emitters
// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void append_stat(std::string& out, const SummaryStat& s) {
  out += ',';
  out += fmt(s.mean);
  out += ',';
  out += fmt(s.median);
  out += ',';
  out += fmt(s.stddev);
}

nlohmann::json stat_json(const SummaryStat& s) {
  return {{"mean", s.mean}, {"median", s.median}, {"stddev", s.stddev}};
}

}  // namespace

std::string rows_csv(const MatrixResult& result) {
  std::string out =
      "mode,loss,rep,seed,buf_ratio,rate_buf,assim,mos,startup_s,"
      "bytes_sent,fec_overhead,completed\n";
  for (const RunRow& r : result.rows) {
    out += session::mode_name(r.mode);
    out += ',';
    out += fmt(r.loss_rate);
    out += ',';
    out += std::to_string(r.rep);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += fmt(r.buf_ratio);
    out += ',';
    out += fmt(r.rate_buf);
    out += ',';
    out += fmt(r.assim);
    out += ',';
    out += std::to_string(r.mos);
    out += ',';
    out += fmt(r.startup_s);
    out += ',';
    out += std::to_string(r.bytes_sent);
    out += ',';
    out += fmt(r.fec_overhead);
    out += ',';
    out += r.completed ? '1' : '0';
    out += '\n';
  }
  return out;
}

std::string aggregates_csv(const MatrixResult& result) {
  std::string out = "mode,loss,n,completed_runs";
  for (const char* name :
       {"buf_ratio", "rate_buf", "assim", "mos", "startup_s", "fec_overhead"})
    for (const char* stat : {"mean", "median", "stddev"}) {
      out += ',';
      out += name;
      out += '_';
      out += stat;
    }
  out += '\n';
  for (const Aggregate& a : result.aggregates) {
    out += session::mode_name(a.mode);
    out += ',';
    out += fmt(a.loss_rate);
    out += ',';
    out += std::to_string(a.n);
    out += ',';
    out += std::to_string(a.completed_runs);
    append_stat(out, a.buf_ratio);
    append_stat(out, a.rate_buf);
    append_stat(out, a.assim);
    append_stat(out, a.mos);
    append_stat(out, a.startup_s);
    append_stat(out, a.fec_overhead);
    out += '\n';
  }
  return out;
}

std::string matrix_json(const MatrixResult& result) {
  nlohmann::json rows = nlohmann::json::array();
  for (const RunRow& r : result.rows) {
    rows.push_back({{"mode", session::mode_name(r.mode)},
                    {"loss", r.loss_rate},
                    {"rep", r.rep},
                    {"seed", r.seed},
                    {"buf_ratio", r.buf_ratio},
                    {"rate_buf", r.rate_buf},
                    {"assim", r.assim},
                    {"mos", r.mos},
                    {"startup_s", r.startup_s},
                    {"bytes_sent", r.bytes_sent},
                    {"fec_overhead", r.fec_overhead},
                    {"completed", r.completed}});
  }
  nlohmann::json aggs = nlohmann::json::array();
  for (const Aggregate& a : result.aggregates) {
    aggs.push_back({{"mode", session::mode_name(a.mode)},
                    {"loss", a.loss_rate},
                    {"n", a.n},
                    {"completed_runs", a.completed_runs},
                    {"buf_ratio", stat_json(a.buf_ratio)},
                    {"rate_buf", stat_json(a.rate_buf)},
                    {"assim", stat_json(a.assim)},
                    {"mos", stat_json(a.mos)},
                    {"startup_s", stat_json(a.startup_s)},
                    {"fec_overhead", stat_json(a.fec_overhead)}});
  }
  nlohmann::json j{{"rows", rows}, {"aggregates", aggs}};
  return j.dump(2) + "\n";
}

std::string matrix_gnuplot(const MatrixResult& result) {
  std::string out =
      "# clipstream matrix aggregates (medians)\n"
      "# columns: loss buf_ratio rate_buf assim mos startup_s "
      "fec_overhead\n";
  std::optional<session::Mode> current;
  int index = 0;
  for (const Aggregate& a : result.aggregates) {
    if (!current || *current != a.mode) {
      if (current) out += "\n\n";
      out += "# mode: ";
      out += session::mode_name(a.mode);
      out += " (index ";
      out += std::to_string(index++);
      out += ")\n";
      current = a.mode;
    }
    out += fmt(a.loss_rate);
    out += ' ';
    out += fmt(a.buf_ratio.median);
    out += ' ';
    out += fmt(a.rate_buf.median);
    out += ' ';
    out += fmt(a.assim.median);
    out += ' ';
    out += fmt(a.mos.median);
    out += ' ';
    out += fmt(a.startup_s.median);
    out += ' ';
    out += fmt(a.fec_overhead.median);
    out += '\n';
  }
  return out;
}

}  // namespace clipstream::harness
