#include "clipstream/netem.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "clipstream/rng.hpp"

namespace clipstream::netem {

void LinkConfig::validate() const {
  if (!(rate_bps > 0.0)) {
    throw Error("link rate_bps must be positive");
  }
  if (one_way_delay < 0) {
    throw Error("link one_way_delay must be non-negative");
  }
  if (buffer_packets < 1) {
    throw Error("link buffer_packets must be >= 1");
  }
  if (!(loss_rate >= 0.0) || !(loss_rate <= 1.0)) {
    throw Error("link loss_rate must be within [0, 1], got " +
                std::to_string(loss_rate));
  }
}

Link::Link(const LinkConfig& config) : config_(config), rng_(config.seed) {
  config_.validate();
}

bool Link::push(std::vector<std::uint8_t> data, Micros now) {
  ++stats_.offered;
  if (occupancy(now) >= config_.buffer_packets) {
    ++stats_.dropped_queue;
    return false;
  }
  double tx_us =
      static_cast<double>(data.size()) * 8.0 * 1e6 / config_.rate_bps;
  Micros departure =
      std::max(now, serializer_free_) + static_cast<Micros>(std::llround(tx_us));
  serializer_free_ = departure;

  Queued q;
  q.departure = departure;
  q.delivery = departure + config_.one_way_delay;
  q.lost = u01(rng_) < config_.loss_rate;
  if (q.lost) {
    ++stats_.lost_random;
  } else {
    q.data = std::move(data);
  }
  queue_.push_back(std::move(q));
  return true;
}

std::optional<Delivery> Link::poll(Micros now) {
  while (!queue_.empty()) {
    Queued& front = queue_.front();
    if (front.lost) {
      // A randomly lost packet vanishes once it has left the serializer.
      if (front.departure <= now) {
        queue_.pop_front();
        continue;
      }
      return std::nullopt;
    }
    if (front.delivery <= now) {
      Delivery d;
      d.time = front.delivery;
      d.data = std::move(front.data);
      queue_.pop_front();
      ++stats_.delivered;
      stats_.bytes_delivered += d.data.size();
      return d;
    }
    return std::nullopt;
  }
  return std::nullopt;
}

std::optional<Micros> Link::next_delivery_time() const {
  for (const Queued& q : queue_) {
    if (!q.lost) return q.delivery;
  }
  return std::nullopt;
}

std::size_t Link::occupancy(Micros now) const {
  // Departures are nondecreasing in queue order.
  auto it = std::partition_point(
      queue_.begin(), queue_.end(),
      [now](const Queued& q) { return q.departure <= now; });
  return static_cast<std::size_t>(queue_.end() - it);
}

DuplexLink::DuplexLink(const LinkConfig& config, std::uint64_t seed)
    : a_to_b([&] {
        LinkConfig c = config;
        std::uint64_t state = seed;
        c.seed = splitmix64(state);
        return c;
      }()),
      b_to_a([&] {
        LinkConfig c = config;
        std::uint64_t state = seed;
        splitmix64(state);  // skip the a_to_b sub-seed
        c.seed = splitmix64(state);
        return c;
      }()) {}

}  // namespace clipstream::netem
