#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clipstream/base.hpp"

namespace clipstream::fec {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct PayloadTooLarge : Error {
  explicit PayloadTooLarge(const std::string& what)
      : Error("payload too large: " + what) {}
};

struct InsufficientShards : Error {
  InsufficientShards(int have, int need)
      : Error("cannot decode: " + std::to_string(have) +
              " shards present, need " + std::to_string(need)) {}
};

// ---------------------------------------------------------------------------
// GF(2^8) arithmetic (reduction polynomial x^8 + x^4 + x^3 + x^2 + 1, 0x11D)
// ---------------------------------------------------------------------------

std::uint8_t gf_mul(std::uint8_t a, std::uint8_t b);
std::uint8_t gf_inv(std::uint8_t a);  // throws Error for a == 0
std::uint8_t gf_pow(std::uint8_t base, unsigned exponent);

// ---------------------------------------------------------------------------
// Parameters and shard sets
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultShardSize = 1200;
inline constexpr int kMaxTotalShards = 255;

struct FecParams {
  int k = 1;                                  ///< data shards
  int m = 0;                                  ///< parity shards
  std::size_t shard_size = kDefaultShardSize;

  int total() const { return k + m; }

  void validate() const {
    if (k < 1) throw Error("fec k must be >= 1");
    if (m < 0) throw Error("fec m must be >= 0");
    if (k + m > kMaxTotalShards) {
      throw Error("fec k+m must be <= " + std::to_string(kMaxTotalShards));
    }
    if (shard_size < 1) throw Error("fec shard_size must be >= 1");
  }

  bool operator==(const FecParams&) const = default;
};

/// An encoded (or partially received) set of k data + m parity shards.
/// Shard i for i < k is the i-th slice of the payload, zero-padded to
/// shard_size in the last slice; shards k..k+m-1 are parity. There is no
/// framing inside shard bytes: payload_length travels out of band.
struct ShardSet {
  FecParams params;
  std::uint32_t payload_length = 0;
  std::vector<std::vector<std::uint8_t>> shards;  ///< total() entries
  std::vector<std::uint8_t> present;              ///< 1 if shard was received
};

// ---------------------------------------------------------------------------
// Coder
// ---------------------------------------------------------------------------

/// Systematic maximum-distance-separable coder over GF(2^8). The generator
/// matrix is a Vandermonde matrix normalized so its top k rows are the
/// identity; any k of its k+m rows are invertible, so any k received shards
/// reconstruct the payload. Construction cost is paid once per (k, m), so
/// reuse a Coder when encoding many payloads with the same parameters.
class Coder {
 public:
  explicit Coder(FecParams params);

  const FecParams& params() const { return params_; }

  /// Encode a payload of at most k * shard_size bytes. `parallel` selects
  /// the OpenMP kernel; results are byte-identical either way.
  ShardSet encode(std::span<const std::uint8_t> payload,
                  bool parallel = true) const;

  /// Reconstruct the payload from any k present shards. Throws
  /// InsufficientShards when fewer than k are present.
  std::vector<std::uint8_t> decode(const ShardSet& set,
                                   bool parallel = true) const;

 private:
  FecParams params_;
  std::vector<std::uint8_t> generator_;  // (k+m) x k row-major
};

// Convenience wrappers constructing a Coder per call. The *_serial variants
// are the reference implementations the OpenMP kernels are checked against.
ShardSet fec_encode(std::span<const std::uint8_t> payload,
                    const FecParams& params);
ShardSet fec_encode_serial(std::span<const std::uint8_t> payload,
                           const FecParams& params);
std::vector<std::uint8_t> fec_decode(const ShardSet& set);
std::vector<std::uint8_t> fec_decode_serial(const ShardSet& set);

// ---------------------------------------------------------------------------
// Parity policies
// ---------------------------------------------------------------------------

/// Fixed 15% overhead: m = ceil(0.15 k) (always >= 1).
int parity_shards_static(int k);

/// Loss-adaptive overhead: m = max(1, ceil(k * min(0.5, 4 p + 0.02)))
/// where p is the sender's current loss estimate.
int parity_shards_adaptive(int k, double loss_estimate);

/// Parameters for a payload: k = ceil(len / shard_size) (>= 1), m from the
/// named policy. Throws PayloadTooLarge when k + m would exceed the shard
/// budget.
FecParams choose_params_static(std::size_t payload_length,
                               std::size_t shard_size = kDefaultShardSize);
FecParams choose_params_adaptive(std::size_t payload_length,
                                 double loss_estimate,
                                 std::size_t shard_size = kDefaultShardSize);

}  // namespace clipstream::fec
