#include "clipstream/fec.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numeric>

namespace clipstream::fec {

namespace {

constexpr unsigned kPoly = 0x11D;
constexpr unsigned kFieldSize = 256;
constexpr unsigned kGroupOrder = 255;

struct GfTables {
  std::array<std::uint8_t, 2 * kGroupOrder> exp{};  // doubled to skip one mod
  std::array<std::uint8_t, kFieldSize> log{};
  std::vector<std::uint8_t> mul;  // 64 KiB: mul[a << 8 | b]

  GfTables() : mul(kFieldSize * kFieldSize, 0) {
    unsigned x = 1;
    for (unsigned i = 0; i < kGroupOrder; ++i) {
      exp[i] = static_cast<std::uint8_t>(x);
      exp[i + kGroupOrder] = static_cast<std::uint8_t>(x);
      log[x] = static_cast<std::uint8_t>(i);
      x <<= 1;
      if (x & 0x100) x ^= kPoly;
    }
    for (unsigned a = 1; a < kFieldSize; ++a) {
      for (unsigned b = 1; b < kFieldSize; ++b) {
        mul[(a << 8) | b] = exp[log[a] + log[b]];
      }
    }
  }
};

const GfTables& gf() {
  static const GfTables tables;
  return tables;
}

using Matrix = std::vector<std::uint8_t>;  // row-major

std::uint8_t& mat_at(Matrix& m, int cols, int r, int c) {
  return m[static_cast<std::size_t>(r) * cols + c];
}

std::uint8_t mat_at(const Matrix& m, int cols, int r, int c) {
  return m[static_cast<std::size_t>(r) * cols + c];
}

/// Gauss-Jordan inversion of an n x n matrix over GF(2^8).
Matrix invert(Matrix m, int n) {
  const GfTables& t = gf();
  Matrix inv(static_cast<std::size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i) mat_at(inv, n, i, i) = 1;

  for (int col = 0; col < n; ++col) {
    int pivot = -1;
    for (int r = col; r < n; ++r) {
      if (mat_at(m, n, r, col) != 0) {
        pivot = r;
        break;
      }
    }
    if (pivot < 0) throw Error("fec: singular matrix");
    if (pivot != col) {
      for (int c = 0; c < n; ++c) {
        std::swap(mat_at(m, n, pivot, c), mat_at(m, n, col, c));
        std::swap(mat_at(inv, n, pivot, c), mat_at(inv, n, col, c));
      }
    }
    std::uint8_t scale = gf_inv(mat_at(m, n, col, col));
    for (int c = 0; c < n; ++c) {
      mat_at(m, n, col, c) = t.mul[(scale << 8) | mat_at(m, n, col, c)];
      mat_at(inv, n, col, c) = t.mul[(scale << 8) | mat_at(inv, n, col, c)];
    }
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      std::uint8_t f = mat_at(m, n, r, col);
      if (f == 0) continue;
      for (int c = 0; c < n; ++c) {
        mat_at(m, n, r, c) ^= t.mul[(f << 8) | mat_at(m, n, col, c)];
        mat_at(inv, n, r, c) ^= t.mul[(f << 8) | mat_at(inv, n, col, c)];
      }
    }
  }
  return inv;
}

/// Build the systematic generator matrix: a (k+m) x k Vandermonde matrix
/// right-multiplied by the inverse of its top k x k block, so the top k rows
/// become the identity while any k rows stay invertible.
Matrix build_generator(int k, int m) {
  const GfTables& t = gf();
  int rows = k + m;
  Matrix v(static_cast<std::size_t>(rows) * k, 0);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < k; ++j) {
      mat_at(v, k, i, j) = gf_pow(static_cast<std::uint8_t>(i),
                                  static_cast<unsigned>(j));
    }
  }
  Matrix top(v.begin(), v.begin() + static_cast<std::size_t>(k) * k);
  Matrix top_inv = invert(std::move(top), k);
  Matrix g(static_cast<std::size_t>(rows) * k, 0);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < k; ++j) {
      std::uint8_t acc = 0;
      for (int l = 0; l < k; ++l) {
        acc ^= t.mul[(mat_at(v, k, i, l) << 8) | mat_at(top_inv, k, l, j)];
      }
      mat_at(g, k, i, j) = acc;
    }
  }
  return g;
}

/// out[b] ^= coef * in[b] over one byte range.
void mul_xor_range(std::uint8_t* out, const std::uint8_t* in, std::size_t n,
                   std::uint8_t coef) {
  if (coef == 0) return;
  const std::uint8_t* row = gf().mul.data() + (static_cast<std::size_t>(coef) << 8);
  for (std::size_t b = 0; b < n; ++b) out[b] ^= row[in[b]];
}

constexpr std::size_t kKernelBlock = 4096;

}  // namespace

std::uint8_t gf_mul(std::uint8_t a, std::uint8_t b) {
  return gf().mul[(static_cast<unsigned>(a) << 8) | b];
}

std::uint8_t gf_inv(std::uint8_t a) {
  if (a == 0) throw Error("fec: inverse of zero");
  const GfTables& t = gf();
  return t.exp[kGroupOrder - t.log[a]];
}

std::uint8_t gf_pow(std::uint8_t base, unsigned exponent) {
  if (exponent == 0) return 1;
  if (base == 0) return 0;
  const GfTables& t = gf();
  unsigned e = (static_cast<unsigned>(t.log[base]) * exponent) % kGroupOrder;
  return t.exp[e];
}

Coder::Coder(FecParams params) : params_(params) {
  params_.validate();
  generator_ = build_generator(params_.k, params_.m);
}

ShardSet Coder::encode(std::span<const std::uint8_t> payload,
                       bool parallel) const {
  const int k = params_.k;
  const int m = params_.m;
  const std::size_t shard_size = params_.shard_size;
  if (payload.size() > static_cast<std::size_t>(k) * shard_size) {
    throw PayloadTooLarge(std::to_string(payload.size()) +
                          " bytes into k=" + std::to_string(k) +
                          " shards of " + std::to_string(shard_size));
  }

  ShardSet set;
  set.params = params_;
  set.payload_length = static_cast<std::uint32_t>(payload.size());
  set.shards.assign(static_cast<std::size_t>(k + m),
                    std::vector<std::uint8_t>(shard_size, 0));
  set.present.assign(static_cast<std::size_t>(k + m), 1);

  for (int j = 0; j < k; ++j) {
    std::size_t begin = static_cast<std::size_t>(j) * shard_size;
    if (begin >= payload.size()) break;
    std::size_t n = std::min(shard_size, payload.size() - begin);
    std::memcpy(set.shards[static_cast<std::size_t>(j)].data(),
                payload.data() + begin, n);
  }

  if (m == 0) return set;

  const std::size_t nblocks = (shard_size + kKernelBlock - 1) / kKernelBlock;
#pragma omp parallel for schedule(static) if (parallel && nblocks > 1)
  for (std::size_t block = 0; block < nblocks; ++block) {
    std::size_t b0 = block * kKernelBlock;
    std::size_t n = std::min(kKernelBlock, shard_size - b0);
    for (int r = 0; r < m; ++r) {
      std::uint8_t* out = set.shards[static_cast<std::size_t>(k + r)].data() + b0;
      for (int j = 0; j < k; ++j) {
        mul_xor_range(out, set.shards[static_cast<std::size_t>(j)].data() + b0,
                      n, mat_at(generator_, k, k + r, j));
      }
    }
  }
  return set;
}

std::vector<std::uint8_t> Coder::decode(const ShardSet& set,
                                        bool parallel) const {
  const int k = params_.k;
  const std::size_t shard_size = params_.shard_size;
  if (set.params != params_) throw Error("fec: shard set parameter mismatch");
  if (set.shards.size() != static_cast<std::size_t>(params_.total()) ||
      set.present.size() != set.shards.size()) {
    throw Error("fec: shard set has wrong shard count");
  }
  if (set.payload_length > static_cast<std::size_t>(k) * shard_size) {
    throw PayloadTooLarge("declared payload_length exceeds k * shard_size");
  }

  std::vector<int> have;
  for (int i = 0; i < params_.total(); ++i) {
    if (set.present[static_cast<std::size_t>(i)]) {
      if (set.shards[static_cast<std::size_t>(i)].size() != shard_size) {
        throw Error("fec: present shard has wrong size");
      }
      have.push_back(i);
      if (static_cast<int>(have.size()) == k) break;
    }
  }
  if (static_cast<int>(have.size()) < k) {
    throw InsufficientShards(static_cast<int>(have.size()), k);
  }

  std::vector<std::uint8_t> payload(set.payload_length, 0);
  auto emit_data_shard = [&](int j, const std::uint8_t* bytes) {
    std::size_t begin = static_cast<std::size_t>(j) * shard_size;
    if (begin >= payload.size()) return;
    std::size_t n = std::min(shard_size, payload.size() - begin);
    std::memcpy(payload.data() + begin, bytes, n);
  };

  // Fast path: the chosen rows are exactly the data shards.
  bool all_data = true;
  for (int i = 0; i < k; ++i) {
    if (have[static_cast<std::size_t>(i)] != i) {
      all_data = false;
      break;
    }
  }
  if (all_data) {
    for (int j = 0; j < k; ++j) {
      emit_data_shard(j, set.shards[static_cast<std::size_t>(j)].data());
    }
    return payload;
  }

  // Invert the k x k submatrix of the generator for the rows we hold.
  Matrix sub(static_cast<std::size_t>(k) * k, 0);
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < k; ++c) {
      mat_at(sub, k, r, c) =
          mat_at(generator_, k, have[static_cast<std::size_t>(r)], c);
    }
  }
  Matrix inv = invert(std::move(sub), k);

  // Reconstruct only the missing data shards; copy the present ones.
  std::vector<int> missing;
  for (int j = 0; j < k; ++j) {
    if (set.present[static_cast<std::size_t>(j)]) {
      emit_data_shard(j, set.shards[static_cast<std::size_t>(j)].data());
    } else {
      missing.push_back(j);
    }
  }
  if (missing.empty()) return payload;

  std::vector<std::vector<std::uint8_t>> rebuilt(
      missing.size(), std::vector<std::uint8_t>(shard_size, 0));
  const std::size_t nblocks = (shard_size + kKernelBlock - 1) / kKernelBlock;
#pragma omp parallel for schedule(static) if (parallel && nblocks > 1)
  for (std::size_t block = 0; block < nblocks; ++block) {
    std::size_t b0 = block * kKernelBlock;
    std::size_t n = std::min(kKernelBlock, shard_size - b0);
    for (std::size_t mi = 0; mi < missing.size(); ++mi) {
      std::uint8_t* out = rebuilt[mi].data() + b0;
      int j = missing[mi];
      for (int i = 0; i < k; ++i) {
        const auto& src = set.shards[static_cast<std::size_t>(
            have[static_cast<std::size_t>(i)])];
        mul_xor_range(out, src.data() + b0, n, mat_at(inv, k, j, i));
      }
    }
  }
  for (std::size_t mi = 0; mi < missing.size(); ++mi) {
    emit_data_shard(missing[mi], rebuilt[mi].data());
  }
  return payload;
}

ShardSet fec_encode(std::span<const std::uint8_t> payload,
                    const FecParams& params) {
  return Coder(params).encode(payload, true);
}

ShardSet fec_encode_serial(std::span<const std::uint8_t> payload,
                           const FecParams& params) {
  return Coder(params).encode(payload, false);
}

std::vector<std::uint8_t> fec_decode(const ShardSet& set) {
  return Coder(set.params).decode(set, true);
}

std::vector<std::uint8_t> fec_decode_serial(const ShardSet& set) {
  return Coder(set.params).decode(set, false);
}

int parity_shards_static(int k) {
  if (k < 1) throw Error("fec: parity policy needs k >= 1");
  return (3 * k + 19) / 20;  // ceil(0.15 k), exactly
}

int parity_shards_adaptive(int k, double loss_estimate) {
  if (k < 1) throw Error("fec: parity policy needs k >= 1");
  double p = std::clamp(loss_estimate, 0.0, 1.0);
  double factor = std::min(0.5, 4.0 * p + 0.02);
  int m = static_cast<int>(std::ceil(static_cast<double>(k) * factor));
  return std::max(1, m);
}

namespace {

FecParams params_for(std::size_t payload_length, std::size_t shard_size,
                     int (*parity)(int), double loss_estimate,
                     bool adaptive) {
  if (shard_size < 1) throw Error("fec shard_size must be >= 1");
  std::size_t k_raw =
      payload_length == 0 ? 1 : (payload_length + shard_size - 1) / shard_size;
  if (k_raw > static_cast<std::size_t>(kMaxTotalShards)) {
    throw PayloadTooLarge(std::to_string(payload_length) + " bytes need " +
                          std::to_string(k_raw) + " data shards");
  }
  FecParams p;
  p.k = static_cast<int>(k_raw);
  p.shard_size = shard_size;
  p.m = adaptive ? parity_shards_adaptive(p.k, loss_estimate) : parity(p.k);
  if (p.k + p.m > kMaxTotalShards) {
    throw PayloadTooLarge("k=" + std::to_string(p.k) +
                          " plus m=" + std::to_string(p.m) +
                          " exceeds the shard budget");
  }
  return p;
}

}  // namespace

FecParams choose_params_static(std::size_t payload_length,
                               std::size_t shard_size) {
  return params_for(payload_length, shard_size, parity_shards_static, 0.0,
                    false);
}

FecParams choose_params_adaptive(std::size_t payload_length,
                                 double loss_estimate,
                                 std::size_t shard_size) {
  return params_for(payload_length, shard_size, nullptr, loss_estimate, true);
}

}  // namespace clipstream::fec
