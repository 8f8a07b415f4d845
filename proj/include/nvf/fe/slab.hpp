#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <vector>

namespace nvf::fe {

struct AllocatorOom : std::runtime_error {
  AllocatorOom() : std::runtime_error("back-end out of memory") {}
};

// Front tier of the two-tier allocator. Whole slabs come from the back-end
// (mailbox RPC, plugged in as callbacks); requests smaller than a slab are
// served best-fit out of partial slabs. Empty slabs beyond the reclaim
// threshold go back to the back-end.
class SlabAllocator {
 public:
  // acquire(bytes) -> base offset (throws AllocatorOom); release(base, bytes).
  using AcquireFn = std::function<uint64_t(uint32_t bytes)>;
  using ReleaseFn = std::function<void(uint64_t base, uint32_t bytes)>;

  SlabAllocator(uint32_t slab_size, uint32_t reclaim_threshold, AcquireFn acquire,
                ReleaseFn release)
      : slab_size_(slab_size),
        reclaim_threshold_(reclaim_threshold),
        acquire_(std::move(acquire)),
        release_(std::move(release)) {}

  uint64_t alloc(uint32_t size) {
    if (size == 0) throw std::invalid_argument("alloc(0)");
    if (size > slab_size_) {
      // Oversized requests go straight to the back-end tier.
      uint64_t base = acquire_(size);
      large_.emplace(base, size);
      return base;
    }
    // Best fit: the smallest free extent that can hold the request, lowest
    // address on ties.
    Slab* best = nullptr;
    uint64_t best_off = 0;
    uint32_t best_len = UINT32_MAX;
    for (auto& [base, slab] : slabs_) {
      for (auto& [off, len] : slab.free_extents) {
        if (len >= size && (len < best_len || (len == best_len && off < best_off))) {
          best = &slab;
          best_off = off;
          best_len = len;
        }
      }
    }
    if (!best) {
      uint64_t base = acquire_(slab_size_);
      auto [it, ok] = slabs_.emplace(base, Slab{});
      (void)ok;
      best = &it->second;
      best->free_extents.emplace(base, slab_size_);
      best->free_total = slab_size_;
      best_off = base;
      best_len = slab_size_;
    }
    best->free_extents.erase(best_off);
    if (best_len > size) best->free_extents.emplace(best_off + size, best_len - size);
    best->free_total -= size;
    return best_off;
  }

  void free(uint64_t off, uint32_t size) {
    if (auto it = large_.find(off); it != large_.end()) {
      if (it->second != size) throw std::logic_error("large free size mismatch");
      release_(off, size);
      large_.erase(it);
      return;
    }
    auto it = slabs_.upper_bound(off);
    if (it == slabs_.begin()) return;  // pre-restart extent: left to the sweep
    --it;
    Slab& slab = it->second;
    uint64_t base = it->first;
    if (off >= base + slab_size_) return;  // likewise
    if (off + size > base + slab_size_) throw std::logic_error("free crosses slab");
    auto [fit, ok] = slab.free_extents.emplace(off, size);
    if (!ok) throw std::logic_error("double free extent");
    // Coalesce with neighbors.
    if (fit != slab.free_extents.begin()) {
      auto prev = std::prev(fit);
      if (prev->first + prev->second == off) {
        prev->second += fit->second;
        slab.free_extents.erase(fit);
        fit = prev;
      } else if (prev->first + prev->second > off) {
        throw std::logic_error("free overlaps live extent");
      }
    }
    auto next = std::next(fit);
    if (next != slab.free_extents.end()) {
      if (fit->first + fit->second == next->first) {
        fit->second += next->second;
        slab.free_extents.erase(next);
      } else if (fit->first + fit->second > next->first) {
        throw std::logic_error("free overlaps live extent");
      }
    }
    slab.free_total += size;
    reclaim();
  }

  // Releases empty slabs beyond the threshold; returns how many went back.
  size_t reclaim() {
    size_t empties = 0, freed = 0;
    for (auto it = slabs_.begin(); it != slabs_.end();) {
      if (it->second.free_total == slab_size_ && ++empties > reclaim_threshold_) {
        release_(it->first, slab_size_);
        it = slabs_.erase(it);
        freed++;
      } else {
        ++it;
      }
    }
    return freed;
  }

  size_t slab_count() const { return slabs_.size(); }
  size_t empty_count() const {
    size_t n = 0;
    for (auto& [b, s] : slabs_)
      if (s.free_total == slab_size_) n++;
    return n;
  }
  size_t partial_count() const {
    size_t n = 0;
    for (auto& [b, s] : slabs_)
      if (s.free_total != 0 && s.free_total != slab_size_) n++;
    return n;
  }
  size_t full_count() const {
    size_t n = 0;
    for (auto& [b, s] : slabs_)
      if (s.free_total == 0) n++;
    return n;
  }

  // Every span owned by this front end (slabs, incl. empty ones, plus large
  // direct allocations); the recovery sweep treats these as live.
  std::vector<std::pair<uint64_t, uint32_t>> owned_spans() const {
    std::vector<std::pair<uint64_t, uint32_t>> out(large_.begin(), large_.end());
    for (auto& [base, s] : slabs_) out.emplace_back(base, slab_size_);
    return out;
  }

  // Allocated extents, for the overlap checker in tests.
  std::vector<std::pair<uint64_t, uint32_t>> allocated_extents() const {
    std::vector<std::pair<uint64_t, uint32_t>> out(large_.begin(), large_.end());
    for (auto& [base, slab] : slabs_) {
      uint64_t pos = base;
      for (auto& [off, len] : slab.free_extents) {
        if (off > pos) out.emplace_back(pos, uint32_t(off - pos));
        pos = off + len;
      }
      if (pos < base + slab_size_) out.emplace_back(pos, uint32_t(base + slab_size_ - pos));
    }
    return out;
  }

 private:
  struct Slab {
    std::map<uint64_t, uint32_t> free_extents;  // offset -> length
    uint32_t free_total = 0;
  };

  uint32_t slab_size_;
  uint32_t reclaim_threshold_;
  AcquireFn acquire_;
  ReleaseFn release_;
  std::map<uint64_t, Slab> slabs_;        // base -> slab
  std::map<uint64_t, uint32_t> large_;    // oversized direct allocations
};

}  // namespace nvf::fe
