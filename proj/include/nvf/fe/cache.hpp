#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "nvf/bytes.hpp"
#include "nvf/rng.hpp"

namespace nvf::fe {

// Page cache with hybrid eviction: sample `rr_set` resident pages uniformly
// and evict the least-recently-used of the sample. rr_set = 1 degenerates to
// pure random replacement; rr_set >= capacity degenerates to exact LRU.
// Write-through overlay only; eviction never writes back.
class PageCache {
 public:
  PageCache(uint32_t capacity, uint32_t rr_set, uint64_t seed)
      : cap_(capacity), rr_(rr_set ? rr_set : 1), rng_(seed) {}

  // Returns the resident page and bumps its recency, or nullptr.
  const Bytes* lookup(uint64_t page_addr) {
    auto it = map_.find(page_addr);
    if (it == map_.end()) return nullptr;
    it->second.tick = ++tick_;
    return &it->second.bytes;
  }

  void insert(uint64_t page_addr, Bytes bytes) {
    if (cap_ == 0) return;
    auto it = map_.find(page_addr);
    if (it != map_.end()) {
      it->second.bytes = std::move(bytes);
      it->second.tick = ++tick_;
      return;
    }
    if (map_.size() >= cap_) evict_one();
    Entry e;
    e.bytes = std::move(bytes);
    e.tick = ++tick_;
    e.pos = keys_.size();
    keys_.push_back(page_addr);
    map_.emplace(page_addr, std::move(e));
  }

  // Patches resident pages overlapping [addr, addr+data.size()). Pages not
  // resident are left alone (no insert on write).
  void update(uint64_t addr, std::span<const uint8_t> data, uint32_t page_size) {
    uint64_t first = addr / page_size * page_size;
    uint64_t last = (addr + data.size() - 1) / page_size * page_size;
    for (uint64_t p = first; p <= last; p += page_size) {
      auto it = map_.find(p);
      if (it == map_.end()) continue;
      uint64_t lo = std::max(addr, p);
      uint64_t hi = std::min(addr + data.size(), p + it->second.bytes.size());
      for (uint64_t a = lo; a < hi; a++)
        it->second.bytes[a - p] = data[a - addr];
    }
  }

  void clear() {
    map_.clear();
    keys_.clear();
  }

  size_t size() const { return map_.size(); }
  uint64_t evictions() const { return evictions_; }

 private:
  struct Entry {
    Bytes bytes;
    uint64_t tick = 0;
    size_t pos = 0;  // index in keys_
  };

  void evict_one() {
    size_t n = keys_.size();
    size_t m = std::min<size_t>(rr_, n);
    // Distinct uniform sample via partial Fisher-Yates over the key vector.
    for (size_t i = 0; i < m; i++) {
      size_t j = i + size_t(rng_.below(n - i));
      if (j != i) {
        std::swap(keys_[i], keys_[j]);
        map_.at(keys_[i]).pos = i;
        map_.at(keys_[j]).pos = j;
      }
    }
    size_t victim = 0;
    for (size_t i = 1; i < m; i++)
      if (map_.at(keys_[i]).tick < map_.at(keys_[victim]).tick) victim = i;
    uint64_t key = keys_[victim];
    keys_[victim] = keys_.back();
    map_.at(keys_[victim]).pos = victim;
    keys_.pop_back();
    map_.erase(key);
    evictions_++;
  }

  uint32_t cap_, rr_;
  Rng rng_;
  std::unordered_map<uint64_t, Entry> map_;
  std::vector<uint64_t> keys_;
  uint64_t tick_ = 0;
  uint64_t evictions_ = 0;
};

}  // namespace nvf::fe
