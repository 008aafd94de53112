// Erasure-coding kernel benchmark: OpenMP kernels vs the serial reference.
//
// For each block geometry the bench encodes a payload and reconstructs it
// from the worst admissible erasure pattern (all parity present, m data
// shards missing), timing the serial and parallel kernels on identical
// inputs and confirming they produce identical bytes.
//
//   fec_bench [--ks 8,16,32,64,128] [--shard-size 1200] [--min-time 0.25]

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "clipstream/fec.hpp"
#include "clipstream/rng.hpp"

namespace {

namespace fec = clipstream::fec;

struct Measurement {
  double ns_per_op = 0.0;
  bool ok = true;  // every timed iteration matched the expected bytes
};

// Repeats fn() until min_time_s of work is accumulated (after a short
// warmup) and returns the mean cost per call.
template <typename Fn>
Measurement bench(double min_time_s, Fn&& fn) {
  using clock = std::chrono::steady_clock;
  Measurement m;
  for (int i = 0; i < 2; ++i) m.ok = fn() && m.ok;  // warmup
  const auto start = clock::now();
  const auto budget = std::chrono::duration<double>(min_time_s);
  std::int64_t iters = 0;
  auto elapsed = start - start;
  while (elapsed < budget && iters < 1'000'000) {
    m.ok = fn() && m.ok;
    ++iters;
    elapsed = clock::now() - start;
  }
  m.ns_per_op =
      std::chrono::duration<double, std::nano>(elapsed).count() /
      static_cast<double>(std::max<std::int64_t>(iters, 1));
  return m;
}

double mb_per_s(std::size_t bytes_per_op, double ns_per_op) {
  return static_cast<double>(bytes_per_op) / ns_per_op * 1e3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"erasure-coding kernel benchmark (serial vs OpenMP)"};
  std::string ks_csv = "8,16,32,64,128";
  std::size_t shard_size = fec::kDefaultShardSize;
  double min_time_s = 0.25;
  app.add_option("--ks", ks_csv, "comma-separated data-shard counts");
  app.add_option("--shard-size", shard_size, "bytes per shard");
  app.add_option("--min-time", min_time_s, "seconds of work per measurement");
  CLI11_PARSE(app, argc, argv);

  std::vector<int> ks;
  {
    std::string token;
    for (std::size_t i = 0; i <= ks_csv.size(); ++i) {
      if (i == ks_csv.size() || ks_csv[i] == ',') {
        if (!token.empty()) ks.push_back(std::stoi(token));
        token.clear();
      } else {
        token += ks_csv[i];
      }
    }
  }

#ifdef _OPENMP
  std::printf("# OpenMP max threads: %d\n", omp_get_max_threads());
#else
  std::printf("# built without OpenMP; both columns run the serial path\n");
#endif
  std::printf("# shard size %zu B, >= %.2f s per measurement\n", shard_size,
              min_time_s);
  std::printf("%4s %3s %9s | %10s %10s %7s | %10s %10s %7s | %s\n", "k", "m",
              "payload", "enc-serial", "enc-omp", "enc-x", "dec-serial",
              "dec-omp", "dec-x", "match");
  std::printf("%4s %3s %9s | %10s %10s %7s | %10s %10s %7s |\n", "", "",
              "(bytes)", "(MB/s)", "(MB/s)", "", "(MB/s)", "(MB/s)", "");

  bool all_ok = true;
  for (const int k : ks) {
    fec::FecParams params;
    params.k = k;
    params.m = fec::parity_shards_static(k);
    params.shard_size = shard_size;
    params.validate();
    const fec::Coder coder(params);

    // Deterministic payload filling every data shard.
    std::vector<std::uint8_t> payload(static_cast<std::size_t>(k) *
                                      shard_size);
    std::uint64_t state = 0x5eedf00d ^ static_cast<std::uint64_t>(k);
    for (auto& b : payload)
      b = static_cast<std::uint8_t>(clipstream::splitmix64(state));

    const fec::ShardSet expect = coder.encode(payload, false);
    const auto enc_s = bench(min_time_s, [&] {
      return coder.encode(payload, false).shards == expect.shards;
    });
    const auto enc_p = bench(min_time_s, [&] {
      return coder.encode(payload, true).shards == expect.shards;
    });

    // Worst admissible erasures: the last m data shards are missing, so
    // reconstruction solves for all of them from parity.
    fec::ShardSet damaged = expect;
    for (int i = std::max(0, k - params.m); i < k; ++i) {
      damaged.present[static_cast<std::size_t>(i)] = 0;
      damaged.shards[static_cast<std::size_t>(i)].clear();
    }
    const auto dec_s = bench(min_time_s, [&] {
      return coder.decode(damaged, false) == payload;
    });
    const auto dec_p = bench(min_time_s, [&] {
      return coder.decode(damaged, true) == payload;
    });

    const bool ok = enc_s.ok && enc_p.ok && dec_s.ok && dec_p.ok;
    all_ok = all_ok && ok;
    std::printf("%4d %3d %9zu | %10.1f %10.1f %6.2fx | %10.1f %10.1f %6.2fx | %s\n",
                k, params.m, payload.size(),
                mb_per_s(payload.size(), enc_s.ns_per_op),
                mb_per_s(payload.size(), enc_p.ns_per_op),
                enc_s.ns_per_op / enc_p.ns_per_op,
                mb_per_s(payload.size(), dec_s.ns_per_op),
                mb_per_s(payload.size(), dec_p.ns_per_op),
                dec_s.ns_per_op / dec_p.ns_per_op, ok ? "ok" : "MISMATCH");
  }
  return all_ok ? 0 : 1;
}
