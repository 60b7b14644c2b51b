#pragma once

// In-order handoff between a pool of producer threads and a single consumer.
// Producers claim ascending indices and publish into a bounded ring; the
// consumer takes indices in strictly ascending order, so the consumption
// sequence is independent of worker count and scheduling. Items must be
// produced from the index alone for that determinism to mean anything.

#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

template <typename Item>
class OrderedProducerPool {
 public:
  // Spawns `workers` threads that call produce(i) for i in [0, count).
  // `capacity` bounds how far production may run ahead of consumption.
  // produce must not throw; wrap failures into the Item.
  OrderedProducerPool(Index count, Index capacity, int workers,
                      std::function<Item(Index)> produce)
      : count_(count), cap_(capacity), slots_(capacity), filled_(capacity, 0) {
    threads_.reserve(workers);
    for (int w = 0; w < workers; ++w) {
      threads_.emplace_back([this, produce] {
        for (;;) {
          const Index p = claim();
          if (p < 0) break;
          store(p, produce(p));
        }
      });
    }
  }

  OrderedProducerPool(const OrderedProducerPool&) = delete;
  OrderedProducerPool& operator=(const OrderedProducerPool&) = delete;

  ~OrderedProducerPool() {
    cancel();
    for (auto& t : threads_) t.join();
  }

  // Consumer side; idx must ascend across calls.
  Item take(Index idx) {
    std::unique_lock lock(mu_);
    ready_.wait(lock, [&] { return filled_[idx % cap_] != 0; });
    Item item = std::move(slots_[idx % cap_]);
    filled_[idx % cap_] = 0;
    next_consume_ = idx + 1;
    space_.notify_all();
    return item;
  }

  // Stops further claims and unblocks parked producers; late publications
  // land in the ring and are never consumed. Safe to call repeatedly.
  void cancel() {
    std::lock_guard lock(mu_);
    cancelled_ = true;
    next_claim_ = count_;
    space_.notify_all();
  }

 private:
  Index claim() {
    std::lock_guard lock(mu_);
    return next_claim_ < count_ ? next_claim_++ : -1;
  }

  void store(Index idx, Item&& item) {
    std::unique_lock lock(mu_);
    space_.wait(lock, [&] { return cancelled_ || idx - next_consume_ < cap_; });
    slots_[idx % cap_] = std::move(item);
    filled_[idx % cap_] = 1;
    ready_.notify_all();
  }

  Index count_, cap_;
  Index next_claim_ = 0, next_consume_ = 0;
  bool cancelled_ = false;
  std::vector<Item> slots_;
  std::vector<char> filled_;
  std::mutex mu_;
  std::condition_variable ready_, space_;
  std::vector<std::thread> threads_;
};

// Producer threads to use for `requested` (0 = one per spare hardware thread).
inline int resolve_worker_count(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 1 ? static_cast<int>(hw - 1) : 1;
}

}  // namespace equitempo
