#pragma once

#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "nvf/fe/runtime.hpp"

namespace nvf::ds {

enum class DsKind : uint8_t {
  Stack = 1,
  Queue,
  HashTable,
  SkipList,
  Bst,
  Bpt,
  MvBst,
  MvBpt,
};

const char* ds_kind_name(DsKind k);

// Op-log opcodes; params layouts are fixed little-endian u64 sequences.
inline constexpr uint16_t kOpInsert = 1;     // key | value
inline constexpr uint16_t kOpErase = 2;      // key
inline constexpr uint16_t kOpPush = 3;       // value | old_top
inline constexpr uint16_t kOpPop = 4;        // (none)
inline constexpr uint16_t kOpEnqueue = 5;    // value
inline constexpr uint16_t kOpDequeue = 6;    // (none)
inline constexpr uint16_t kOpVecInsert = 7;  // n | key,value pairs
// Creation marker: its memory logs are forced durable and replayed before the
// structure's roots are published, so it is never re-executed.
inline constexpr uint16_t kOpCreate = 8;     // (none)

struct PopEmpty : std::runtime_error {
  PopEmpty() : std::runtime_error("pop on empty structure") {}
};
struct UnsortedInput : std::runtime_error {
  UnsortedInput() : std::runtime_error("vector insert input not sorted/unique") {}
};

// Deterministic key -> partition routing (same mix on every node).
inline uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
inline uint32_t partition_route(uint64_t key, uint32_t partitions) {
  return partitions <= 1 ? 0 : uint32_t(mix64(key) % partitions);
}

struct DsOptions {
  uint32_t partitions = 1;
  uint32_t root_slot = 0;        // first of `partitions` consecutive slots
  uint32_t lock_slot = 0;        // likewise
  uint64_t buckets = 64;         // hash table buckets per partition
  uint32_t max_level = 8;        // skip list
  sim::SimTime mv_free_delay = 50000;  // deferred-free window for old versions
  bool auto_lock = true;         // acquire partition locks lazily, hold them
  uint32_t cache_level_n = 3;    // tree cache depth threshold N
};

// Base interface. Writers: one task, under the partition writer lock.
// `key` doubles as the value for stack/queue push/pop.
class DataStructure {
 public:
  virtual ~DataStructure() = default;

  virtual void insert(uint64_t key, uint64_t value) = 0;
  virtual std::optional<uint64_t> find(uint64_t key) = 0;
  virtual bool erase(uint64_t key) = 0;

  // Flush pending state and finalize (MV kinds swap their root here too).
  virtual void fence();
  // Release any sticky partition locks (flushes first).
  void release_locks();

  // Sorted key list (validation walks). For stack/queue: contents top/front
  // first. Reads durable + pending state.
  virtual std::vector<uint64_t> keys() = 0;

  // Region block offsets reachable from durable state; used by allocator
  // integrity checks. Walks via gather.
  virtual std::vector<uint64_t> reachable_blocks() = 0;

  // Re-execute one logged operation (recovery path).
  virtual void apply_logged(uint16_t opcode, const Bytes& params);

  DsKind kind() const { return kind_; }
  uint32_t ds_id() const { return id_; }
  const DsOptions& options() const { return opt_; }
  fe::FrontendRuntime& runtime() { return rt_; }

  static std::unique_ptr<DataStructure> create(fe::FrontendRuntime& rt, DsKind k,
                                               uint32_t ds_id, DsOptions opt);
  // Rebuilds the handle from the durable catalog entry (readers, recovery).
  // `writer` false opens a lock-free read-only view (MV kinds only mutate
  // through a writer handle anyway; plain kinds must be quiescent).
  static std::unique_ptr<DataStructure> open(fe::FrontendRuntime& rt,
                                             uint32_t ds_id, bool writer = true);

 protected:
  DataStructure(fe::FrontendRuntime& rt, DsKind k, uint32_t ds_id, DsOptions opt)
      : rt_(rt), kind_(k), id_(ds_id), opt_(opt) {}

  void ensure_lock(uint32_t partition);
  uint32_t route(uint64_t key) const {
    return partition_route(key, opt_.partitions);
  }
  // Block offset that contains a given region offset.
  uint64_t owning_block(uint64_t off) const {
    const auto& g = rt_.geom();
    return g.block_off(g.block_index(off));
  }

  fe::FrontendRuntime& rt_;
  DsKind kind_;
  uint32_t id_;
  DsOptions opt_;
};

// --- kind-specific extras -----------------------------------------------

class StackQueue;    // push/pop | enqueue/dequeue with annulment
class TreeLike;      // vector_insert + tree cache policy

// Downcast helpers for the extras below (throws std::bad_cast style errors).
StackQueue& as_stack_queue(DataStructure& ds);
TreeLike& as_tree(DataStructure& ds);

class StackQueue : public DataStructure {
 public:
  using DataStructure::DataStructure;
  virtual void push(uint64_t value) = 0;               // enqueue for Queue
  virtual std::optional<uint64_t> pop() = 0;           // dequeue for Queue
  virtual uint64_t size() = 0;
};

class TreeLike : public DataStructure {
 public:
  TreeLike(fe::FrontendRuntime& rt, DsKind k, uint32_t ds_id, DsOptions opt)
      : DataStructure(rt, k, ds_id, opt), level_n_(opt.cache_level_n) {}
  // Batched sorted insert; all keys must be strictly ascending and absent
  // keys create subtrees in one pass.
  virtual void vector_insert(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) = 0;
  // Miss-ratio-driven depth threshold adaptation; returns the new N.
  uint32_t tree_cache_adapt();
  uint32_t cache_level() const { return level_n_; }

 protected:
  uint32_t level_n_ = 3;
};

// Catalog codec (32-byte entries in the naming area).
struct CatalogEntry {
  DsKind kind{};
  uint8_t partitions = 1;
  uint8_t root_slot = 0;
  uint8_t lock_slot = 0;
  uint32_t ds_id = 0;
  uint64_t aux = 0;
  uint64_t aux2 = 0;
};
Bytes encode_catalog(const CatalogEntry& e);
std::optional<CatalogEntry> parse_catalog(std::span<const uint8_t> b);

}  // namespace nvf::ds
