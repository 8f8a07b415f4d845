#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nvf/backend/layout.hpp"
#include "nvf/fe/cache.hpp"
#include "nvf/fe/slab.hpp"
#include "nvf/sim/fabric.hpp"

namespace nvf::fe {

// Cumulative optimization ladder. Each step keeps everything before it:
//   Naive : direct remote writes, each followed by a flush read for
//           durability ordering; every read is remote.
//   R     : redo records through the memory log (entry verb + commit verb
//           per operation), replayed by the back-end.
//   RC    : R plus the page cache for reads.
//   RCB   : RC plus the operation-log fast path (one write verb per op)
//           with batched, coalesced memory-log flushes.
enum class Mode : uint8_t { Naive, R, RC, RCB };

const char* mode_name(Mode m);

struct FrontendConfig {
  Mode mode = Mode::RCB;
  uint32_t page_size = 1024;
  uint32_t batch_size = 1024;
  uint32_t rr_set_size = 32;
  uint32_t cache_capacity = 64;     // pages
  uint32_t slab_size = 1024;        // front-tier slab bytes
  uint32_t reclaim_threshold = 2;   // empty slabs kept before returning
  uint32_t verb_payload_cap = 4096; // max bytes per write verb when flushing
  // Flush early once this many payload bytes are buffered, so a batch always
  // fits one atomic record (keeps partial-batch crash states trivial).
  uint32_t flush_bytes_cap = 48 * 1024;
  uint64_t cache_seed = 1;
};

struct NotOwner : std::runtime_error {
  NotOwner() : std::runtime_error("unlock by non-owner") {}
};
struct PendingOp {
  uint16_t opcode = 0;
  uint32_t ds_id = 0;
  uint64_t opn = 0;
  Bytes params;
};

enum class ReadResult : uint8_t { Consistent, Retry };

// One front-end instance: single task, single writer by contract. All durable
// state lives in the back-end region; everything here is a rebuildable index.
class FrontendRuntime {
 public:
  FrontendRuntime(sim::Fabric& fab, sim::NodeId self, sim::NodeId be,
                  uint32_t desc, FrontendConfig cfg);

  // Reads the naming area remotely and initializes ring tails and counters
  // from the descriptor. Assumes a quiesced (fully replayed) or fresh region;
  // crash recovery uses the recovery module's resume path instead.
  void connect();

  // --- data access (Gather-Apply) ---------------------------------------
  // Read [addr, addr+len), overlaid with the pending write set. `cached`
  // false forces a direct read (hot/cold hint; e.g. deep tree levels).
  Bytes gather(uint64_t addr, uint32_t len, bool cached = true);
  uint64_t gather_u64(uint64_t addr, bool cached = true);

  // Buffer a mutation. Naive mode writes through immediately.
  void stage_write(uint64_t addr, std::span<const uint8_t> data);
  void stage_write_u64(uint64_t addr, uint64_t value);

  // Completes one user operation. In RCB this is the op-log fast path: one
  // write verb, no commit; other logged modes emit the record immediately.
  // Returns the operation's OPN (0 in naive mode).
  uint64_t op_persist(uint16_t opcode, uint32_t ds_id, std::span<const uint8_t> params);

  void flush_batch();
  void persistent_fence();

  // Pending (op durable, memory logs unflushed) operations, oldest first.
  const std::vector<PendingOp>& pending_ops() const { return op_buffer_; }
  size_t pending_op_count() const { return op_buffer_.size(); }

  // --- allocation --------------------------------------------------------
  uint64_t alloc(uint32_t size);             // front-tier slab extent
  void free(uint64_t off, uint32_t size);
  uint64_t alloc_block();                    // whole back-end block (MV nodes)
  void free_block(uint64_t off);
  void deferred_free_block(uint64_t off, sim::SimTime delay_ns);
  SlabAllocator& slab() { return slab_; }

  // Raw mailbox RPC; params are the five request words.
  Bytes mailbox_call(uint32_t opcode, std::vector<uint64_t> p);

  // --- naming area -------------------------------------------------------
  uint64_t root_read(uint32_t slot);
  bool root_cas(uint32_t slot, uint64_t expected, uint64_t desired);
  void root_write(uint32_t slot, uint64_t value);
  void catalog_write(uint32_t slot, std::span<const uint8_t> entry32);
  Bytes catalog_read(uint32_t slot);

  // --- concurrency primitives --------------------------------------------
  // CAS spin lock with a durable lock-ahead record; returns after the
  // Acquire record is durable and the LPN has been fetched.
  void writer_lock(uint32_t slot);
  // Flushes pending batch first, writes the Release record, then clears the
  // word with an atomic write.
  void writer_unlock(uint32_t slot);
  bool holds_lock(uint32_t slot) const { return held_locks_.count(slot) != 0; }
  uint64_t lock_owner_tag() const { return uint64_t(self_) + 1; }

  uint64_t reader_lock();                  // spin until SN even, return SN
  ReadResult reader_unlock(uint64_t start_sn);

  // After a restart, lock words still carrying this node's tag are adopted
  // so the resumed session runs under them and can release them normally.
  // Returns how many were adopted.
  size_t adopt_orphan_locks();

  // --- introspection ------------------------------------------------------
  const backend::RegionGeometry& geom() const { return g_; }
  sim::NodeId node() const { return self_; }
  sim::NodeId backend() const { return be_; }
  uint32_t desc() const { return desc_; }
  const FrontendConfig& config() const { return cfg_; }
  Mode mode() const { return cfg_.mode; }
  uint64_t cache_hits() const { return hits_; }
  uint64_t cache_misses() const { return misses_; }
  double miss_ratio() const {
    uint64_t t = hits_ + misses_;
    return t ? double(misses_) / double(t) : 0.0;
  }
  void reset_cache_stats() { hits_ = misses_ = 0; }
  void purge_cache() { cache_.clear(); }
  // Drops overlay extents the back-end has already replayed; subsequent
  // gathers of those ranges go to NVM again.
  void trim_overlay() { prune_overlay(); }
  uint64_t next_opn() const { return next_opn_; }
  // Last OPN whose memory logs the back-end has replayed (one verb).
  uint64_t durable_opn();
  // Block until replay covers `opn` (MV root publication gate).
  void wait_durable_opn(uint64_t opn);
  uint64_t log_tail() const { return log_tail_; }
  uint64_t oplog_tail() const { return oplog_tail_; }

  // Rebind to a promoted mirror (recovery Case 4).
  void rebind_backend(sim::NodeId new_be) { be_ = new_be; }

  // Used by the recovery module when resuming after a crash.
  void set_positions(uint64_t log_tail, uint64_t oplog_tail, uint64_t next_opn) {
    log_tail_ = log_tail;
    oplog_tail_ = oplog_tail;
    next_opn_ = next_opn;
  }
  void adopt_mailbox_seq(uint64_t last) { mail_seq_ = last; }

  // Re-execution window (recovery): ops run through the normal code path but
  // their op-log entries are already durable, so none are appended.
  void begin_reexec() { reexec_ = true; }
  void end_reexec() {
    reexec_ = false;
    flush_batch();
  }
  bool in_reexec() const { return reexec_; }

 private:
  struct WriteExtent {
    Bytes bytes;
    // When set, the whole extent's bytes are available in a durable op-log
    // entry at this packed reference; the flush uses flag=1.
    std::optional<uint64_t> oplog_ref;
    // For flushed extents: the covered OPN; prunable once replay passes it.
    uint64_t opn = 0;
  };

  using ExtentMap = std::map<uint64_t, WriteExtent>;
  static void extent_put(ExtentMap& m, uint64_t addr, WriteExtent e);

  bool logged() const { return cfg_.mode != Mode::Naive; }
  bool cached() const { return cfg_.mode == Mode::RC || cfg_.mode == Mode::RCB; }
  bool batched() const { return cfg_.mode == Mode::RCB; }

  Bytes read_base(uint64_t addr, uint32_t len, bool cached_hint);
  bool fully_covered(uint64_t addr, uint32_t len) const;
  void overlay_writeset(uint64_t addr, Bytes& out) const;
  void writeset_put(uint64_t addr, Bytes bytes, std::optional<uint64_t> ref);
  uint64_t area_off(bool oplog) const;
  void write_record_bytes(uint64_t area, const Bytes& bytes, bool split_commit);
  void append_log_record(const backend::TxRecord& rec, bool split_commit);
  uint64_t append_oplog(const Bytes& entry);  // returns entry's region offset
  uint64_t ring_occupied(bool oplog);
  void wait_ring_space(uint64_t need, bool oplog);
  void retire_to_overlay(uint64_t opn);
  void prune_overlay();
  void lock_journal_write(uint32_t slot, uint32_t intent);

  sim::Fabric& fab_;
  sim::NodeId self_;
  sim::NodeId be_;
  uint32_t desc_;
  FrontendConfig cfg_;
  backend::RegionGeometry g_;
  PageCache cache_;
  SlabAllocator slab_;

  uint64_t log_tail_ = 0;
  uint64_t oplog_tail_ = 0;
  uint64_t next_opn_ = 1;
  uint64_t mail_seq_ = 0;
  uint64_t hits_ = 0, misses_ = 0;
  uint32_t journal_seq_ = 0;
  uint64_t staged_bytes_ = 0;
  bool reexec_ = false;

  // Pending write set: disjoint extents, last write wins byte-wise.
  ExtentMap writeset_;
  // Extents already in durable records but possibly not yet replayed into
  // the data area; overlaid under the write set for read-your-writes, and
  // pruned against the back-end's durable OPN.
  ExtentMap flushed_overlay_;
  std::vector<PendingOp> op_buffer_;
  uint64_t last_pending_opn_ = 0;
  std::set<uint32_t> held_locks_;

  // Extents first written by the op in progress; candidates for flag=1
  // op-log references once the op's params are durable.
  std::vector<uint64_t> curop_touched_;
};

}  // namespace nvf::fe
