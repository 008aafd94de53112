// clipstream command-line front end.
//
//   clipstream run        sweep delivery modes across loss rates and report
//   clipstream gen-trace  synthesize a media trace and write it as CSV
//
// Exits 0 on success and 2 on configuration or usage errors.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clipstream/harness.hpp"
#include "clipstream/log.hpp"
#include "clipstream/media.hpp"
#include "clipstream/session.hpp"

namespace {

namespace h = clipstream::harness;
namespace media = clipstream::media;
namespace session = clipstream::session;

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(csv);
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw h::ConfigError("cannot open output file: " + path);
  out << text;
  if (!out.flush()) throw h::ConfigError("failed writing output file: " + path);
}

int cmd_run(const std::string& modes_csv, const std::string& loss_csv,
            int reps, std::uint64_t seed, double rate_mbps, double delay_ms,
            std::size_t buffer_pkts, double deadline_factor, double lookahead_s,
            unsigned shard_size, const std::string& fec_policy,
            const std::string& trace_path, double duration_s, double fps,
            double total_mb, std::uint64_t trace_seed, bool serial,
            const std::string& out_path, const std::string& aggregates_path,
            const std::string& format) {
  h::MatrixParams mp;

  mp.modes.clear();
  for (const auto& name : split_list(modes_csv))
    mp.modes.push_back(session::parse_mode(name));

  mp.loss_rates.clear();
  for (const auto& item : split_list(loss_csv)) {
    std::size_t used = 0;
    const double percent = std::stod(item, &used);
    if (used != item.size())
      throw h::ConfigError("malformed loss value: " + item);
    mp.loss_rates.push_back(percent / 100.0);  // given in percent
  }

  mp.reps = reps;
  mp.base_seed = seed;
  mp.parallel = !serial;
  mp.world.rate_mbps = rate_mbps;
  mp.world.delay_ms = delay_ms;
  mp.world.buffer_packets = buffer_pkts;
  mp.world.deadline_factor = deadline_factor;
  mp.world.session.pace_lookahead_s = lookahead_s;
  mp.world.session.shard_size = static_cast<std::uint16_t>(shard_size);
  if (fec_policy == "static")
    mp.world.session.fec_policy = session::FecPolicy::kStatic;
  else if (fec_policy == "adaptive")
    mp.world.session.fec_policy = session::FecPolicy::kAdaptive;
  else
    throw h::ConfigError("fec policy must be 'static' or 'adaptive'");

  media::Trace trace;
  if (!trace_path.empty()) {
    std::ifstream in(trace_path);
    if (!in) throw h::ConfigError("cannot open trace file: " + trace_path);
    trace = media::parse_trace_csv(in, fps);
  } else {
    media::TraceParams tp;
    tp.duration_s = duration_s;
    tp.fps = fps;
    tp.total_mb = total_mb;
    tp.seed = trace_seed;
    trace = media::generate_trace(tp);
  }
  CLIPSTREAM_LOG_INFO("trace: %zu frames, %llu bytes, %zu chunks",
                      trace.frames.size(),
                      static_cast<unsigned long long>(trace.total_bytes()),
                      trace.chunk_count());

  const auto result = h::run_matrix(trace, mp);

  std::string text;
  if (format == "csv")
    text = h::rows_csv(result);
  else if (format == "json")
    text = h::matrix_json(result);
  else if (format == "gnuplot")
    text = h::matrix_gnuplot(result);
  else
    throw h::ConfigError("format must be csv, json, or gnuplot");
  write_output(out_path, text);
  if (!aggregates_path.empty())
    write_output(aggregates_path, h::aggregates_csv(result));

  if (!out_path.empty())
    std::cout << "wrote " << result.rows.size() << " rows to " << out_path
              << "\n";
  return 0;
}

int cmd_gen_trace(double duration_s, double fps, double total_mb,
                  std::uint64_t seed, const std::string& out_path,
                  const std::string& manifest_path) {
  media::TraceParams tp;
  tp.duration_s = duration_s;
  tp.fps = fps;
  tp.total_mb = total_mb;
  tp.seed = seed;
  const auto trace = media::generate_trace(tp);

  std::ostringstream csv;
  media::write_trace_csv(trace, csv);
  write_output(out_path, csv.str());
  if (!manifest_path.empty())
    write_output(manifest_path, media::write_manifest_json(trace));
  if (!out_path.empty())
    std::cout << "wrote " << trace.frames.size() << " frames to " << out_path
              << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"partially reliable video streaming experiments"};
  app.require_subcommand(1);

  // --- run ---
  auto* run = app.add_subcommand("run", "sweep modes across loss rates");
  std::string modes_csv = "tcp_like,quic_like,clipstream,clipstream_fec";
  std::string loss_csv = "0,0.08,0.16,0.32,0.64,1.28,2.56,5.12";
  int reps = 10;
  std::uint64_t seed = 1;
  double rate_mbps = 20.0, delay_ms = 15.0, deadline_factor = 4.0;
  double lookahead_s = 1.5;
  std::size_t buffer_pkts = 1000;
  unsigned shard_size = 1200;
  std::string fec_policy = "static";
  std::string trace_path;
  double duration_s = 296.21, fps = 24.0, total_mb = 176.0;
  std::uint64_t trace_seed = 1;
  bool serial = false;
  std::string out_path, aggregates_path, format = "csv";

  run->add_option("--modes", modes_csv, "comma-separated delivery modes");
  run->add_option("--loss", loss_csv, "comma-separated loss rates in percent");
  run->add_option("--reps", reps, "repetitions per (mode, loss) cell");
  run->add_option("--seed", seed, "base seed for the whole matrix");
  run->add_option("--rate-mbps", rate_mbps, "bottleneck rate");
  run->add_option("--delay-ms", delay_ms, "one-way propagation delay");
  run->add_option("--buffer-pkts", buffer_pkts, "drop-tail queue capacity");
  run->add_option("--deadline-factor", deadline_factor,
                  "give up after factor x media duration");
  run->add_option("--lookahead", lookahead_s,
                  "pace frames this many seconds ahead of playback "
                  "(0 = push eagerly)");
  run->add_option("--shard-size", shard_size, "erasure-coding shard bytes");
  run->add_option("--fec-policy", fec_policy, "static | adaptive");
  run->add_option("--trace", trace_path,
                  "trace CSV (omit to synthesize one)");
  run->add_option("--duration", duration_s, "synthetic trace seconds");
  run->add_option("--fps", fps, "frame rate");
  run->add_option("--total-mb", total_mb, "synthetic trace megabytes");
  run->add_option("--trace-seed", trace_seed, "synthetic trace seed");
  run->add_flag("--serial", serial, "run the sweep on one thread");
  run->add_option("--out", out_path, "output file (default: stdout)");
  run->add_option("--aggregates", aggregates_path,
                  "also write per-cell aggregate CSV here");
  run->add_option("--format", format, "csv | json | gnuplot");

  // --- gen-trace ---
  auto* gen = app.add_subcommand("gen-trace", "synthesize a media trace");
  double g_duration = 296.21, g_fps = 24.0, g_total_mb = 176.0;
  std::uint64_t g_seed = 1;
  std::string g_out, g_manifest;
  gen->add_option("--duration", g_duration, "trace seconds");
  gen->add_option("--fps", g_fps, "frame rate");
  gen->add_option("--total-mb", g_total_mb, "total megabytes");
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--out", g_out, "output CSV (default: stdout)");
  gen->add_option("--manifest", g_manifest, "also write a JSON manifest here");

  try {
    app.parse(argc, argv);
    if (run->parsed())
      return cmd_run(modes_csv, loss_csv, reps, seed, rate_mbps, delay_ms,
                     buffer_pkts, deadline_factor, lookahead_s, shard_size,
                     fec_policy, trace_path, duration_s, fps, total_mb,
                     trace_seed, serial, out_path, aggregates_path, format);
    if (gen->parsed())
      return cmd_gen_trace(g_duration, g_fps, g_total_mb, g_seed, g_out,
                           g_manifest);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
