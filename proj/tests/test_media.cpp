#include <cstdint>
#include <set>
#include <sstream>
#include <string>

#include "clipstream/media.hpp"
#include "doctest.h"

namespace m = clipstream::media;

namespace {

m::TraceParams default_params() { return m::TraceParams{}; }

bool message_contains(const clipstream::Error& e, const std::string& needle) {
  return std::string(e.what()).find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("default trace has the documented shape") {
  auto trace = m::generate_trace(default_params());

  CHECK(trace.frames.size() == 7106);  // round(296.21 * 24) - 3 control slots
  CHECK(trace.chunk_count() == 75);
  CHECK(trace.frames_per_chunk == 96);

  std::size_t i_frames = 0;
  for (const auto& f : trace.frames) {
    if (f.type == m::FrameType::kI) {
      ++i_frames;
      CHECK(f.index % 96 == 0);
      CHECK(f.reliable);
    } else {
      CHECK(f.index % 96 != 0);
      CHECK_FALSE(f.reliable);
    }
  }
  CHECK(i_frames == 75);
  CHECK(trace.frames.size() - i_frames == 7031);
  // Final chunk holds the last I frame plus one trailing frame.
  CHECK(trace.frames[7104].type == m::FrameType::kI);
  CHECK(trace.frames[7105].type != m::FrameType::kI);
}

TEST_CASE("per-class byte totals are exact") {
  auto trace = m::generate_trace(default_params());
  CHECK(trace.total_bytes() == 176'000'000);
  CHECK(trace.reliable_bytes() == 21'120'000);  // 12% exactly
  // Mean I frame size is exact: 21,120,000 / 75.
  CHECK(trace.reliable_bytes() / trace.chunk_count() == 281'600);
  CHECK(trace.total_bytes() - trace.reliable_bytes() == 154'880'000);
}

TEST_CASE("zero jitter gives uniform sizes within each class") {
  auto params = default_params();
  params.size_jitter = 0.0;
  auto trace = m::generate_trace(params);
  std::uint64_t total = 0;
  std::size_t pb_seen = 0;
  for (const auto& f : trace.frames) {
    total += f.size;
    if (f.type == m::FrameType::kI) {
      CHECK(f.size == 281'600);
    } else {
      // 154,880,000 = 7031 * 22028 + 1132: the first 1132 P/B frames carry
      // one extra byte.
      std::uint32_t expect = pb_seen < 1132 ? 22'029 : 22'028;
      CHECK(f.size == expect);
      ++pb_seen;
    }
  }
  CHECK(total == 176'000'000);
}

TEST_CASE("jittered sizes vary but keep exact totals and determinism") {
  auto params = default_params();
  params.seed = 77;
  auto a = m::generate_trace(params);
  auto b = m::generate_trace(params);
  REQUIRE(a.frames.size() == b.frames.size());
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    CHECK(a.frames[i].size == b.frames[i].size);
  }
  CHECK(a.total_bytes() == 176'000'000);
  CHECK(a.reliable_bytes() == 21'120'000);

  std::set<std::uint32_t> distinct;
  for (const auto& f : a.frames) {
    CHECK(f.size >= 1);
    if (f.type != m::FrameType::kI) distinct.insert(f.size);
  }
  CHECK(distinct.size() > 100);  // jitter actually spreads sizes

  params.seed = 78;
  auto c = m::generate_trace(params);
  bool any_difference = false;
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    if (a.frames[i].size != c.frames[i].size) {
      any_difference = true;
      break;
    }
  }
  CHECK(any_difference);
  CHECK(c.total_bytes() == 176'000'000);
}

TEST_CASE("pts is the truncated microsecond timestamp") {
  auto trace = m::generate_trace(default_params());
  CHECK(trace.frames[0].pts == 0);
  CHECK(trace.frames[1].pts == 41'666);       // 1e6 / 24 truncated
  CHECK(trace.frames[24].pts == 1'000'000);
  CHECK(trace.frames[7105].pts == 296'041'666);
}

TEST_CASE("csv roundtrip preserves every frame") {
  auto params = default_params();
  params.seed = 5;
  auto trace = m::generate_trace(params);
  std::ostringstream out;
  m::write_trace_csv(trace, out);
  std::string text = out.str();
  CHECK(text.substr(0, text.find('\n')) == "index,pts_ms,type,size_bytes");

  std::istringstream in(text);
  auto back = m::parse_trace_csv(in, 24.0);
  REQUIRE(back.frames.size() == trace.frames.size());
  CHECK(back.frames_per_chunk == 96);
  for (std::size_t i = 0; i < trace.frames.size(); ++i) {
    CHECK(back.frames[i].index == trace.frames[i].index);
    CHECK(back.frames[i].pts == trace.frames[i].pts);
    CHECK(back.frames[i].type == trace.frames[i].type);
    CHECK(back.frames[i].size == trace.frames[i].size);
    CHECK(back.frames[i].reliable == trace.frames[i].reliable);
  }
}

TEST_CASE("manifest json roundtrip preserves every frame") {
  auto params = default_params();
  params.duration_s = 4.0;  // small trace: 96 slots - 3 = 93 frames
  params.total_mb = 2.0;
  auto trace = m::generate_trace(params);
  auto text = m::write_manifest_json(trace);
  auto back = m::parse_manifest_json(text);
  CHECK(back.fps == trace.fps);
  CHECK(back.frames_per_chunk == trace.frames_per_chunk);
  REQUIRE(back.frames.size() == trace.frames.size());
  for (std::size_t i = 0; i < trace.frames.size(); ++i) {
    CHECK(back.frames[i].pts == trace.frames[i].pts);
    CHECK(back.frames[i].type == trace.frames[i].type);
    CHECK(back.frames[i].size == trace.frames[i].size);
  }
}

TEST_CASE("csv parser reports the offending line") {
  SUBCASE("bad header") {
    std::istringstream in("index,pts,type,size\n");
    try {
      m::parse_trace_csv(in);
      FAIL("expected ParseError");
    } catch (const m::ParseError& e) {
      CHECK(message_contains(e, "line 1"));
    }
  }

  SUBCASE("non-contiguous index") {
    std::istringstream in(
        "index,pts_ms,type,size_bytes\n"
        "0,0,I,100\n"
        "2,41,P,100\n");
    try {
      m::parse_trace_csv(in);
      FAIL("expected ParseError");
    } catch (const m::ParseError& e) {
      CHECK(message_contains(e, "line 3"));
      CHECK(message_contains(e, "out of order"));
    }
  }

  SUBCASE("first frame must be an I frame") {
    std::istringstream in(
        "index,pts_ms,type,size_bytes\n"
        "0,0,P,100\n");
    try {
      m::parse_trace_csv(in);
      FAIL("expected ParseError");
    } catch (const m::ParseError& e) {
      CHECK(message_contains(e, "line 2"));
      CHECK(message_contains(e, "start with an I frame"));
    }
  }

  SUBCASE("zero-size frame") {
    std::istringstream in(
        "index,pts_ms,type,size_bytes\n"
        "0,0,I,0\n");
    CHECK_THROWS_AS(m::parse_trace_csv(in), m::ParseError);
  }

  SUBCASE("unknown type") {
    std::istringstream in(
        "index,pts_ms,type,size_bytes\n"
        "0,0,X,100\n");
    try {
      m::parse_trace_csv(in);
      FAIL("expected ParseError");
    } catch (const m::ParseError& e) {
      CHECK(message_contains(e, "line 2"));
    }
  }

  SUBCASE("pts inconsistent with fps") {
    std::istringstream in(
        "index,pts_ms,type,size_bytes\n"
        "0,0,I,100\n"
        "1,99,P,100\n");  // should be 41 ms at 24 fps
    try {
      m::parse_trace_csv(in);
      FAIL("expected ParseError");
    } catch (const m::ParseError& e) {
      CHECK(message_contains(e, "line 3"));
      CHECK(message_contains(e, "pts_ms"));
    }
  }

  SUBCASE("I frame inside a chunk") {
    std::istringstream in(
        "index,pts_ms,type,size_bytes\n"
        "0,0,I,100\n"
        "1,41,P,100\n"
        "2,83,I,100\n"   // chunk size is now 2...
        "3,125,I,100\n"  // ...so an I here is fine, but
        "4,166,P,100\n"
        "5,208,I,100\n");  // this I lands mid-chunk
    CHECK_THROWS_AS(m::parse_trace_csv(in), m::ParseError);
  }

  SUBCASE("wrong field count") {
    std::istringstream in(
        "index,pts_ms,type,size_bytes\n"
        "0,0,I\n");
    CHECK_THROWS_AS(m::parse_trace_csv(in), m::ParseError);
  }

  SUBCASE("empty input") {
    std::istringstream in("");
    CHECK_THROWS_AS(m::parse_trace_csv(in), m::ParseError);
  }
}

TEST_CASE("manifest parser rejects malformed documents") {
  CHECK_THROWS_AS(m::parse_manifest_json("not json"), m::ParseError);
  CHECK_THROWS_AS(m::parse_manifest_json("{}"), m::ParseError);
  CHECK_THROWS_AS(
      m::parse_manifest_json(
          R"({"fps":24,"duration_s":1,"frames_per_chunk":4,"frames":[]})"),
      m::ParseError);
}

TEST_CASE("trace parameters are validated") {
  auto params = default_params();
  params.fps = 0.0;
  CHECK_THROWS_AS(m::generate_trace(params), m::InvalidParams);

  params = default_params();
  params.duration_s = 0.1;  // round(2.4) - 3 < 1 slot
  CHECK_THROWS_AS(m::generate_trace(params), m::InvalidParams);

  params = default_params();
  params.i_share = 0.0;
  CHECK_THROWS_AS(m::generate_trace(params), m::InvalidParams);
  params.i_share = 1.0;
  CHECK_THROWS_AS(m::generate_trace(params), m::InvalidParams);

  params = default_params();
  params.frames_per_chunk = 0;
  CHECK_THROWS_AS(m::generate_trace(params), m::InvalidParams);

  params = default_params();
  params.total_mb = 1e-5;  // 10 bytes over thousands of frames
  CHECK_THROWS_AS(m::generate_trace(params), m::InvalidParams);
}

TEST_CASE("small custom traces keep the chunk structure") {
  m::TraceParams params;
  params.duration_s = 13.0 / 24.0;  // 13 slots - 3 control = 10 frames
  params.fps = 24.0;
  params.frames_per_chunk = 4;
  params.total_mb = 0.1;
  params.i_share = 0.3;
  params.size_jitter = 0.1;
  auto trace = m::generate_trace(params);
  REQUIRE(trace.frames.size() == 10);
  CHECK(trace.chunk_count() == 3);  // chunks of 4, 4, 2
  CHECK(trace.frames[0].type == m::FrameType::kI);
  CHECK(trace.frames[4].type == m::FrameType::kI);
  CHECK(trace.frames[8].type == m::FrameType::kI);
  CHECK(trace.total_bytes() == 100'000);
  CHECK(trace.reliable_bytes() == 30'000);
}
