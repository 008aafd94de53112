#include "clipstream/media.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "clipstream/rng.hpp"
#include "json.hpp"

namespace clipstream::media {

namespace {

Micros pts_for(std::uint32_t index, double fps) {
  return static_cast<Micros>(static_cast<double>(index) * 1e6 / fps);
}

FrameType type_for(std::uint32_t index, int frames_per_chunk) {
  std::uint32_t pos = index % static_cast<std::uint32_t>(frames_per_chunk);
  if (pos == 0) return FrameType::kI;
  return (pos % 3 == 0) ? FrameType::kP : FrameType::kB;
}

/// Distribute `total` bytes over frames proportionally to `weights`,
/// flooring each share and handing out the remainder one byte at a time in
/// order. Every frame receives at least one byte.
std::vector<std::uint32_t> allocate_sizes(std::uint64_t total,
                                          const std::vector<double>& weights) {
  std::size_t n = weights.size();
  if (total < n) {
    throw InvalidParams("class byte total " + std::to_string(total) +
                        " is smaller than its frame count " +
                        std::to_string(n));
  }
  double sum = 0.0;
  for (double w : weights) sum += w;
  std::vector<std::uint32_t> sizes(n);
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double raw = static_cast<double>(total) * weights[i] / sum;
    auto s = static_cast<std::uint64_t>(std::max(1.0, std::floor(raw)));
    sizes[i] = static_cast<std::uint32_t>(s);
    assigned += s;
  }
  // Settle the rounding difference deterministically, one byte per step.
  std::size_t cursor = 0;
  while (assigned < total) {
    ++sizes[cursor];
    ++assigned;
    cursor = (cursor + 1) % n;
  }
  cursor = 0;
  std::size_t stuck = 0;
  while (assigned > total) {
    if (sizes[cursor] > 1) {
      --sizes[cursor];
      --assigned;
      stuck = 0;
    } else if (++stuck > n) {
      throw InvariantViolation("cannot settle size allocation");
    }
    cursor = (cursor + 1) % n;
  }
  return sizes;
}

void check_generated(const Trace& trace, std::uint64_t want_total,
                     std::uint64_t want_reliable) {
  if (trace.total_bytes() != want_total) {
    throw InvariantViolation("generated byte total mismatch");
  }
  if (trace.reliable_bytes() != want_reliable) {
    throw InvariantViolation("generated reliable byte total mismatch");
  }
  for (const Frame& f : trace.frames) {
    bool chunk_start =
        f.index % static_cast<std::uint32_t>(trace.frames_per_chunk) == 0;
    if (chunk_start != (f.type == FrameType::kI)) {
      throw InvariantViolation("chunk structure mismatch at frame " +
                               std::to_string(f.index));
    }
  }
}

[[noreturn]] void parse_fail(std::size_t line, const std::string& what) {
  throw ParseError("line " + std::to_string(line) + ": " + what);
}

std::uint64_t parse_uint(const std::string& field, std::size_t line,
                         const char* name) {
  std::uint64_t value = 0;
  auto [ptr, ec] =
      std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    parse_fail(line, std::string("malformed ") + name + " '" + field + "'");
  }
  return value;
}

/// Structural validation shared by the CSV and manifest parsers. `line_of`
/// maps a frame position to the input line blamed in error messages.
template <typename LineOf>
void validate_frames(std::vector<Frame>& frames, int frames_per_chunk,
                     double fps, LineOf line_of) {
  if (frames.empty()) {
    throw ParseError("trace contains no frames");
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Frame& f = frames[i];
    if (f.index != i) {
      parse_fail(line_of(i), "frame index " + std::to_string(f.index) +
                                 " out of order (expected " +
                                 std::to_string(i) + ")");
    }
    if (f.size < 1) parse_fail(line_of(i), "frame size must be >= 1");
    Micros pts = pts_for(f.index, fps);
    if (f.pts / 1000 != pts / 1000) {
      parse_fail(line_of(i),
                 "pts_ms " + std::to_string(f.pts / 1000) +
                     " does not match fps-derived " + std::to_string(pts / 1000));
    }
    f.pts = pts;
    bool chunk_start =
        f.index % static_cast<std::uint32_t>(frames_per_chunk) == 0;
    if (chunk_start && f.type != FrameType::kI) {
      parse_fail(line_of(i), "chunk must start with an I frame");
    }
    if (!chunk_start && f.type == FrameType::kI) {
      parse_fail(line_of(i), "unexpected I frame inside a chunk");
    }
    f.reliable = (f.type == FrameType::kI);
  }
}

/// frames_per_chunk inferred from the second I frame's position.
int infer_frames_per_chunk(const std::vector<Frame>& frames) {
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].type == FrameType::kI) return static_cast<int>(i);
  }
  return static_cast<int>(frames.size());
}

}  // namespace

char frame_type_char(FrameType t) {
  switch (t) {
    case FrameType::kI:
      return 'I';
    case FrameType::kP:
      return 'P';
    default:
      return 'B';
  }
}

FrameType frame_type_from_char(char c) {
  switch (c) {
    case 'I':
      return FrameType::kI;
    case 'P':
      return FrameType::kP;
    case 'B':
      return FrameType::kB;
    default:
      throw ParseError(std::string("unknown frame type '") + c + "'");
  }
}

std::size_t Trace::chunk_count() const {
  std::size_t n = 0;
  for (const Frame& f : frames) {
    if (f.type == FrameType::kI) ++n;
  }
  return n;
}

std::uint64_t Trace::total_bytes() const {
  std::uint64_t n = 0;
  for (const Frame& f : frames) n += f.size;
  return n;
}

std::uint64_t Trace::reliable_bytes() const {
  std::uint64_t n = 0;
  for (const Frame& f : frames) {
    if (f.reliable) n += f.size;
  }
  return n;
}

void TraceParams::validate() const {
  if (!(fps > 0.0)) throw InvalidParams("fps must be positive");
  if (!(duration_s > 0.0)) throw InvalidParams("duration_s must be positive");
  if (frames_per_chunk < 1) {
    throw InvalidParams("frames_per_chunk must be >= 1");
  }
  if (!(total_mb > 0.0)) throw InvalidParams("total_mb must be positive");
  if (!(i_share > 0.0) || !(i_share < 1.0)) {
    throw InvalidParams("i_share must lie strictly between 0 and 1");
  }
  if (size_jitter < 0.0) throw InvalidParams("size_jitter must be >= 0");
  auto slots = static_cast<std::int64_t>(std::llround(duration_s * fps));
  if (slots - kControlFrameSlots < 1) {
    throw InvalidParams("duration_s * fps leaves no frame slots");
  }
}

Trace generate_trace(const TraceParams& params) {
  params.validate();
  auto slots = static_cast<std::int64_t>(
      std::llround(params.duration_s * params.fps));
  auto n = static_cast<std::size_t>(slots - kControlFrameSlots);
  auto total_bytes = static_cast<std::uint64_t>(
      std::llround(params.total_mb * 1e6));
  auto i_total = static_cast<std::uint64_t>(
      std::llround(params.i_share * static_cast<double>(total_bytes)));
  std::uint64_t pb_total = total_bytes - i_total;

  Trace trace;
  trace.fps = params.fps;
  trace.duration_s = params.duration_s;
  trace.frames_per_chunk = params.frames_per_chunk;
  trace.frames.resize(n);

  // One jitter weight per frame, in index order.
  std::mt19937_64 rng(params.seed);
  double cv = params.size_jitter;
  double sigma = cv > 0.0 ? std::sqrt(std::log1p(cv * cv)) : 0.0;
  double mu = -0.5 * sigma * sigma;

  std::vector<double> i_weights, pb_weights;
  std::vector<std::size_t> i_pos, pb_pos;
  for (std::size_t i = 0; i < n; ++i) {
    Frame& f = trace.frames[i];
    f.index = static_cast<std::uint32_t>(i);
    f.pts = pts_for(f.index, params.fps);
    f.type = type_for(f.index, params.frames_per_chunk);
    f.reliable = (f.type == FrameType::kI);
    double w =
        cv > 0.0 ? std::exp(mu + sigma * standard_normal(rng)) : 1.0;
    if (f.type == FrameType::kI) {
      i_weights.push_back(w);
      i_pos.push_back(i);
    } else {
      pb_weights.push_back(w);
      pb_pos.push_back(i);
    }
  }

  auto i_sizes = allocate_sizes(i_total, i_weights);
  for (std::size_t j = 0; j < i_pos.size(); ++j) {
    trace.frames[i_pos[j]].size = i_sizes[j];
  }
  if (!pb_pos.empty()) {
    auto pb_sizes = allocate_sizes(pb_total, pb_weights);
    for (std::size_t j = 0; j < pb_pos.size(); ++j) {
      trace.frames[pb_pos[j]].size = pb_sizes[j];
    }
  } else if (pb_total > 0) {
    throw InvalidParams("no P/B frames to carry the non-I byte share");
  }

  check_generated(trace, total_bytes, i_total);
  return trace;
}

void write_trace_csv(const Trace& trace, std::ostream& out) {
  out << "index,pts_ms,type,size_bytes\n";
  for (const Frame& f : trace.frames) {
    out << f.index << ',' << (f.pts / 1000) << ',' << frame_type_char(f.type)
        << ',' << f.size << '\n';
  }
}

Trace parse_trace_csv(std::istream& in, double fps) {
  if (!(fps > 0.0)) throw InvalidParams("fps must be positive");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("line 1: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "index,pts_ms,type,size_bytes") {
    parse_fail(1, "expected header 'index,pts_ms,type,size_bytes'");
  }

  Trace trace;
  trace.fps = fps;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 4) {
      parse_fail(line_no, "expected 4 comma-separated fields, got " +
                              std::to_string(fields.size()));
    }
    Frame f;
    f.index =
        static_cast<std::uint32_t>(parse_uint(fields[0], line_no, "index"));
    f.pts = static_cast<Micros>(parse_uint(fields[1], line_no, "pts_ms")) *
            1000;  // validated and replaced by the fps-derived value below
    if (fields[2].size() != 1) parse_fail(line_no, "malformed frame type");
    try {
      f.type = frame_type_from_char(fields[2][0]);
    } catch (const ParseError&) {
      parse_fail(line_no, "unknown frame type '" + fields[2] + "'");
    }
    f.size = static_cast<std::uint32_t>(
        parse_uint(fields[3], line_no, "size_bytes"));
    trace.frames.push_back(f);
  }

  trace.frames_per_chunk = infer_frames_per_chunk(trace.frames);
  validate_frames(trace.frames, trace.frames_per_chunk, fps,
                  [](std::size_t i) { return i + 2; });
  trace.duration_s = static_cast<double>(trace.frames.size()) / fps;
  return trace;
}

std::string write_manifest_json(const Trace& trace) {
  nlohmann::json j;
  j["fps"] = trace.fps;
  j["duration_s"] = trace.duration_s;
  j["frames_per_chunk"] = trace.frames_per_chunk;
  nlohmann::json frames = nlohmann::json::array();
  for (const Frame& f : trace.frames) {
    frames.push_back({{"index", f.index},
                      {"pts_ms", f.pts / 1000},
                      {"type", std::string(1, frame_type_char(f.type))},
                      {"size", f.size},
                      {"reliable", f.reliable}});
  }
  j["frames"] = std::move(frames);
  return j.dump(2);
}

Trace parse_manifest_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest is not valid JSON: ") + e.what());
  }
  Trace trace;
  try {
    trace.fps = j.at("fps").get<double>();
    trace.duration_s = j.at("duration_s").get<double>();
    trace.frames_per_chunk = j.at("frames_per_chunk").get<int>();
    for (const auto& jf : j.at("frames")) {
      Frame f;
      f.index = jf.at("index").get<std::uint32_t>();
      f.pts = jf.at("pts_ms").get<Micros>() * 1000;
      std::string type = jf.at("type").get<std::string>();
      if (type.size() != 1) throw ParseError("malformed frame type");
      f.type = frame_type_from_char(type[0]);
      f.size = jf.at("size").get<std::uint32_t>();
      f.reliable = jf.at("reliable").get<bool>();
      trace.frames.push_back(f);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest missing or mistyped field: ") +
                     e.what());
  }
  if (!(trace.fps > 0.0)) throw ParseError("manifest fps must be positive");
  if (trace.frames_per_chunk < 1) {
    throw ParseError("manifest frames_per_chunk must be >= 1");
  }
  validate_frames(trace.frames, trace.frames_per_chunk, trace.fps,
                  [](std::size_t i) { return i + 1; });
  return trace;
}

}  // namespace clipstream::media
