#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <vector>

#include "clipstream/base.hpp"

namespace clipstream::netem {

struct LinkConfig {
  /// Bottleneck serialization rate in bits per second.
  double rate_bps = 20'000'000.0;
  /// One-way propagation delay applied after serialization completes.
  Micros one_way_delay = 15'000;
  /// Drop-tail queue capacity in packets.
  std::size_t buffer_packets = 1000;
  /// Independent per-packet loss probability, applied to accepted packets.
  double loss_rate = 0.0;
  /// Seed for the link's private random stream.
  std::uint64_t seed = 1;

  void validate() const;
};

struct LinkStats {
  std::uint64_t offered = 0;        ///< push() calls
  std::uint64_t dropped_queue = 0;  ///< tail drops (queue full)
  std::uint64_t lost_random = 0;    ///< random losses among accepted packets
  std::uint64_t delivered = 0;      ///< packets handed out by poll()
  std::uint64_t bytes_delivered = 0;

  std::uint64_t accepted() const { return offered - dropped_queue; }
};

struct Delivery {
  Micros time = 0;
  std::vector<std::uint8_t> data;
};

/// One direction of an emulated path: a drop-tail queue feeding a
/// fixed-rate serializer, followed by constant propagation delay and an
/// independent Bernoulli loss channel.
///
/// A packet accepted at time t departs the serializer at
///   departure = max(t, previous departure) + size_bytes * 8e6 / rate_bps
/// microseconds and, if not randomly lost, is deliverable from
///   departure + one_way_delay.
///
/// Queue occupancy at time t counts packets whose departure is still in the
/// future; a push is tail-dropped when occupancy >= buffer_packets. The loss
/// draw happens once per accepted packet, at push time, so the loss pattern
/// is a deterministic function of the seed and the accepted-packet sequence.
class Link {
 public:
  explicit Link(const LinkConfig& config);

  /// Offer one packet at time `now`. Returns false on tail drop.
  bool push(std::vector<std::uint8_t> data, Micros now);

  /// Deliver the next packet whose delivery time has been reached, if any.
  /// Each delivery is returned exactly once, in FIFO order.
  std::optional<Delivery> poll(Micros now);

  /// Delivery time of the earliest pending (non-lost) packet.
  std::optional<Micros> next_delivery_time() const;

  /// Packets occupying queue + serializer at time `now`.
  std::size_t occupancy(Micros now) const;

  const LinkStats& stats() const { return stats_; }
  const LinkConfig& config() const { return config_; }

 private:
  struct Queued {
    Micros departure = 0;
    Micros delivery = 0;
    bool lost = false;
    std::vector<std::uint8_t> data;
  };

  LinkConfig config_;
  std::mt19937_64 rng_;
  LinkStats stats_;
  std::deque<Queued> queue_;  // ordered by departure (== push order)
  Micros serializer_free_ = 0;
};

/// Two independent directed links sharing one configuration, with
/// decorrelated random streams derived from a single seed.
struct DuplexLink {
  DuplexLink(const LinkConfig& config, std::uint64_t seed);

  Link a_to_b;
  Link b_to_a;
};

}  // namespace clipstream::netem
