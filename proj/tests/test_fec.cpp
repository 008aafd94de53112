#include <bit>
#include <cstdint>
#include <random>
#include <vector>

#include "clipstream/fec.hpp"
#include "doctest.h"

namespace f = clipstream::fec;

namespace {

/// Independent reference multiplication: carry-less peasant multiply with
/// bitwise reduction by x^8 + x^4 + x^3 + x^2 + 1.
std::uint8_t slow_mul(std::uint8_t a, std::uint8_t b) {
  unsigned acc = 0;
  unsigned aa = a;
  for (unsigned bb = b; bb != 0; bb >>= 1) {
    if (bb & 1) acc ^= aa;
    aa <<= 1;
    if (aa & 0x100) aa ^= 0x11D;
  }
  return static_cast<std::uint8_t>(acc);
}

std::vector<std::uint8_t> random_payload(std::mt19937_64& rng, std::size_t n) {
  std::vector<std::uint8_t> out(n);
  for (auto& b : out) b = static_cast<std::uint8_t>(rng());
  return out;
}

/// Erase the given shard indices: mark absent and poison the stored bytes.
void erase_shards(f::ShardSet& set, const std::vector<int>& which) {
  for (int i : which) {
    set.present[static_cast<std::size_t>(i)] = 0;
    set.shards[static_cast<std::size_t>(i)].clear();
  }
}

}  // namespace

TEST_CASE("table multiplication matches bitwise reference for all pairs") {
  int mismatches = 0;
  for (unsigned a = 0; a < 256; ++a) {
    for (unsigned b = 0; b < 256; ++b) {
      if (f::gf_mul(static_cast<std::uint8_t>(a),
                    static_cast<std::uint8_t>(b)) !=
          slow_mul(static_cast<std::uint8_t>(a),
                   static_cast<std::uint8_t>(b))) {
        ++mismatches;
      }
    }
  }
  CHECK(mismatches == 0);
}

TEST_CASE("field algebra holds on sampled triples") {
  std::mt19937_64 rng(42);
  for (int i = 0; i < 1000; ++i) {
    auto a = static_cast<std::uint8_t>(rng());
    auto b = static_cast<std::uint8_t>(rng());
    auto c = static_cast<std::uint8_t>(rng());
    CHECK(f::gf_mul(a, b) == f::gf_mul(b, a));
    CHECK(f::gf_mul(a, f::gf_mul(b, c)) == f::gf_mul(f::gf_mul(a, b), c));
    CHECK(f::gf_mul(a, static_cast<std::uint8_t>(b ^ c)) ==
          (f::gf_mul(a, b) ^ f::gf_mul(a, c)));
  }
  for (unsigned a = 1; a < 256; ++a) {
    CHECK(f::gf_mul(static_cast<std::uint8_t>(a),
                    f::gf_inv(static_cast<std::uint8_t>(a))) == 1);
  }
  CHECK_THROWS_AS(f::gf_inv(0), clipstream::Error);
  CHECK(f::gf_pow(2, 8) == 0x1D);  // first reduction of the polynomial
  CHECK(f::gf_pow(0, 0) == 1);
  CHECK(f::gf_pow(0, 5) == 0);
}

TEST_CASE("m = 0 is the identity transform") {
  std::mt19937_64 rng(7);
  auto payload = random_payload(rng, 2500);
  f::FecParams params{3, 0, 1200};
  auto set = f::fec_encode(payload, params);
  REQUIRE(set.shards.size() == 3);
  // Data shards are plain slices, zero-padded at the tail.
  CHECK(std::equal(payload.begin(), payload.begin() + 1200,
                   set.shards[0].begin()));
  CHECK(std::equal(payload.begin() + 1200, payload.begin() + 2400,
                   set.shards[1].begin()));
  CHECK(std::equal(payload.begin() + 2400, payload.end(),
                   set.shards[2].begin()));
  for (std::size_t i = 100; i < 1200; ++i) CHECK(set.shards[2][i] == 0);
  CHECK(f::fec_decode(set) == payload);
}

TEST_CASE("k = 1, m = 1 degenerates to repetition") {
  std::mt19937_64 rng(8);
  auto payload = random_payload(rng, 900);
  f::FecParams params{1, 1, 1200};
  auto set = f::fec_encode(payload, params);
  REQUIRE(set.shards.size() == 2);
  CHECK(set.shards[0] == set.shards[1]);

  erase_shards(set, {0});
  CHECK(f::fec_decode(set) == payload);
}

TEST_CASE("k = 4, m = 2 survives every double erasure") {
  std::mt19937_64 rng(9);
  auto payload = random_payload(rng, 4 * 64 - 13);
  f::FecParams params{4, 2, 64};
  auto original = f::fec_encode(payload, params);
  int patterns = 0;
  for (int i = 0; i < 6; ++i) {
    for (int j = i + 1; j < 6; ++j) {
      auto set = original;
      erase_shards(set, {i, j});
      CHECK(f::fec_decode(set) == payload);
      CHECK(f::fec_decode_serial(set) == payload);
      ++patterns;
    }
  }
  CHECK(patterns == 15);
}

TEST_CASE("any k of k+m shards reconstruct the payload (k <= 8, m <= 4)") {
  std::mt19937_64 rng(10);
  for (int k = 1; k <= 8; ++k) {
    for (int m = 0; m <= 4; ++m) {
      f::FecParams params{k, m, 40};
      std::size_t len = 1 + rng() % (static_cast<std::size_t>(k) * 40);
      auto payload = random_payload(rng, len);
      auto original = f::fec_encode(payload, params);
      int total = k + m;
      int failures = 0;
      for (unsigned mask = 0; mask < (1u << total); ++mask) {
        if (std::popcount(mask) != k) continue;
        auto set = original;
        std::vector<int> absent;
        for (int i = 0; i < total; ++i) {
          if ((mask & (1u << i)) == 0) absent.push_back(i);
        }
        erase_shards(set, absent);
        if (f::fec_decode(set) != payload) ++failures;
      }
      CHECK(failures == 0);
    }
  }
}

TEST_CASE("more than k present shards also decode") {
  std::mt19937_64 rng(11);
  auto payload = random_payload(rng, 5 * 100);
  f::FecParams params{5, 3, 100};
  auto set = f::fec_encode(payload, params);
  erase_shards(set, {0, 2});  // 6 of 8 left, need 5
  CHECK(f::fec_decode(set) == payload);
}

TEST_CASE("decoding with fewer than k shards fails loudly") {
  std::mt19937_64 rng(12);
  auto payload = random_payload(rng, 300);
  f::FecParams params{3, 2, 128};
  auto set = f::fec_encode(payload, params);
  erase_shards(set, {0, 2, 4});  // only 2 of 5 remain
  CHECK_THROWS_AS(f::fec_decode(set), f::InsufficientShards);
}

TEST_CASE("parallel and serial kernels are byte-identical") {
  std::mt19937_64 rng(13);

  SUBCASE("pipeline-sized shards") {
    auto payload = random_payload(rng, 22'030);
    f::FecParams params{19, 5, 1200};
    auto a = f::fec_encode(payload, params);
    auto b = f::fec_encode_serial(payload, params);
    REQUIRE(a.shards.size() == b.shards.size());
    for (std::size_t i = 0; i < a.shards.size(); ++i) {
      CHECK(a.shards[i] == b.shards[i]);
    }
    erase_shards(a, {1, 5, 9, 17, 20});
    auto db = a;
    CHECK(f::fec_decode(a) == payload);
    CHECK(f::fec_decode_serial(db) == payload);
  }

  SUBCASE("multi-block shards exercise the parallel loop") {
    auto payload = random_payload(rng, 4 * 16384 - 77);
    f::FecParams params{4, 2, 16384};
    auto a = f::fec_encode(payload, params);
    auto b = f::fec_encode_serial(payload, params);
    for (std::size_t i = 0; i < a.shards.size(); ++i) {
      CHECK(a.shards[i] == b.shards[i]);
    }
    erase_shards(a, {0, 3});
    CHECK(f::fec_decode(a) == payload);
    CHECK(f::fec_decode_serial(a) == payload);
  }
}

TEST_CASE("static parity policy is ceil(0.15 k)") {
  CHECK(f::parity_shards_static(1) == 1);
  CHECK(f::parity_shards_static(7) == 2);
  CHECK(f::parity_shards_static(19) == 3);
  CHECK(f::parity_shards_static(20) == 3);
  CHECK(f::parity_shards_static(21) == 4);
  CHECK(f::parity_shards_static(100) == 15);
}

TEST_CASE("adaptive parity policy follows the loss estimate") {
  CHECK(f::parity_shards_adaptive(19, 0.0) == 1);     // ceil(19 * 0.02)
  CHECK(f::parity_shards_adaptive(19, 0.0512) == 5);  // ceil(19 * 0.2248)
  CHECK(f::parity_shards_adaptive(19, 0.2) == 10);    // capped at 0.5 k
  CHECK(f::parity_shards_adaptive(10, 0.9) == 5);     // cap again
  CHECK(f::parity_shards_adaptive(5, 0.01) == 1);     // ceil(5 * 0.06)
  CHECK(f::parity_shards_adaptive(1, 0.0) == 1);      // floor of one shard
}

TEST_CASE("parameter selection from payload size") {
  auto p = f::choose_params_static(22'030, 1200);
  CHECK(p.k == 19);
  CHECK(p.m == 3);
  CHECK(p.shard_size == 1200);

  auto q = f::choose_params_adaptive(22'030, 0.0512, 1200);
  CHECK(q.k == 19);
  CHECK(q.m == 5);

  auto tiny = f::choose_params_static(0, 1200);
  CHECK(tiny.k == 1);
  CHECK(tiny.m == 1);

  auto exact = f::choose_params_static(2400, 1200);
  CHECK(exact.k == 2);

  CHECK_THROWS_AS(f::choose_params_static(400'000, 1200), f::PayloadTooLarge);
  // 253 data shards fit, but adding parity overflows the 255-shard budget.
  CHECK_THROWS_AS(f::choose_params_static(253 * 1200, 1200),
                  f::PayloadTooLarge);
}

TEST_CASE("parameter validation rejects bad shapes") {
  CHECK_THROWS_AS((f::FecParams{0, 1, 100}.validate()), clipstream::Error);
  CHECK_THROWS_AS((f::FecParams{1, -1, 100}.validate()), clipstream::Error);
  CHECK_THROWS_AS((f::FecParams{200, 56, 100}.validate()), clipstream::Error);
  CHECK_THROWS_AS((f::FecParams{1, 0, 0}.validate()), clipstream::Error);
  CHECK_NOTHROW((f::FecParams{200, 55, 100}.validate()));

  f::FecParams params{2, 1, 100};
  auto payload = std::vector<std::uint8_t>(201, 1);
  CHECK_THROWS_AS(f::fec_encode(payload, params), f::PayloadTooLarge);
}

TEST_CASE("decode validates shard set shape") {
  std::mt19937_64 rng(14);
  auto payload = random_payload(rng, 150);
  f::FecParams params{2, 1, 100};
  auto set = f::fec_encode(payload, params);

  auto wrong_size = set;
  wrong_size.shards[1].resize(99);
  CHECK_THROWS_AS(f::fec_decode(wrong_size), clipstream::Error);

  auto truncated = set;
  truncated.shards.pop_back();
  truncated.present.pop_back();
  CHECK_THROWS_AS(f::fec_decode(truncated), clipstream::Error);

  f::Coder other(f::FecParams{3, 1, 100});
  CHECK_THROWS_AS(other.decode(set), clipstream::Error);
}

TEST_CASE("payload length is preserved through coding") {
  std::mt19937_64 rng(15);
  for (std::size_t len : {1ul, 99ul, 100ul, 101ul, 250ul, 300ul}) {
    auto payload = random_payload(rng, len);
    auto params = f::choose_params_static(len, 100);
    auto set = f::fec_encode(payload, params);
    CHECK(set.payload_length == len);
    erase_shards(set, {0});
    auto back = f::fec_decode(set);
    CHECK(back.size() == len);
    CHECK(back == payload);
  }
}
