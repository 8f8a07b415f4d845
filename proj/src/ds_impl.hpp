#pragma once

// Concrete structure implementations; internal to the library.

#include <map>
#include <unordered_map>

#include "nvf/ds/ds.hpp"

namespace nvf::ds::impl {

using fe::FrontendRuntime;

// Creation protocol shared by all kinds: the constructor stages the initial
// bytes; this makes them durable and replayed before the root refs go live,
// so a creation is never re-executed.
void settle_creation(FrontendRuntime& rt, uint32_t ds_id);

// kOpVecInsert params codec: n | key,value pairs.
Bytes encode_vec_params(const std::vector<std::pair<uint64_t, uint64_t>>& kvs);
std::vector<std::pair<uint64_t, uint64_t>> decode_vec_params(const Bytes& params);

// Rejects inputs that are not strictly ascending by key.
void check_sorted(const std::vector<std::pair<uint64_t, uint64_t>>& kvs);

// Stack: header extent {top u64 | count u64}; node extent {value u64 | next u64}.
class StackImpl final : public StackQueue {
 public:
  StackImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh);
  void insert(uint64_t key, uint64_t value) override;
  std::optional<uint64_t> find(uint64_t key) override;
  bool erase(uint64_t key) override;
  void push(uint64_t value) override;
  std::optional<uint64_t> pop() override;
  uint64_t size() override;
  std::vector<uint64_t> keys() override;
  std::vector<uint64_t> reachable_blocks() override;
  void apply_logged(uint16_t opcode, const Bytes& params) override;

 private:
  uint64_t hdr_ = 0;
};

// Queue: header extent {head u64 | tail u64 | count u64}; same node layout.
class QueueImpl final : public StackQueue {
 public:
  QueueImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh);
  void insert(uint64_t key, uint64_t value) override;
  std::optional<uint64_t> find(uint64_t key) override;
  bool erase(uint64_t key) override;
  void push(uint64_t value) override;  // enqueue
  std::optional<uint64_t> pop() override;  // dequeue
  uint64_t size() override;
  std::vector<uint64_t> keys() override;
  std::vector<uint64_t> reachable_blocks() override;
  void apply_logged(uint16_t opcode, const Bytes& params) override;

 private:
  uint64_t hdr_ = 0;
};

// Hash table: per-partition bucket array of u64 heads; chain node
// {key u64 | value u64 | next u64}.
class HashImpl final : public DataStructure {
 public:
  HashImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh);
  void insert(uint64_t key, uint64_t value) override;
  std::optional<uint64_t> find(uint64_t key) override;
  bool erase(uint64_t key) override;
  std::vector<uint64_t> keys() override;
  std::vector<uint64_t> reachable_blocks() override;

 private:
  uint64_t bucket_addr(uint64_t key) const;
  std::vector<uint64_t> base_;  // per-partition array base
};

// Skip list: header {level-8 tower of u64}; node
// {key u64 | value u64 | level u64 | next[level] u64}. Tower height is a
// deterministic function of the key so recovery re-execution rebuilds
// byte-identical state.
class SkipListImpl final : public DataStructure {
 public:
  SkipListImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh);
  void insert(uint64_t key, uint64_t value) override;
  std::optional<uint64_t> find(uint64_t key) override;
  bool erase(uint64_t key) override;
  std::vector<uint64_t> keys() override;
  std::vector<uint64_t> reachable_blocks() override;
  static uint32_t height_of(uint64_t key, uint32_t max_level);

 private:
  std::vector<uint64_t> hdr_;  // per-partition header tower
  uint64_t node_next(uint64_t node, uint32_t lvl);
};

// BST: per-partition header extent {root u64}; node
// {key u64 | value u64 | left u64 | right u64}.
class BstImpl final : public TreeLike {
 public:
  BstImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh);
  void insert(uint64_t key, uint64_t value) override;
  std::optional<uint64_t> find(uint64_t key) override;
  bool erase(uint64_t key) override;
  void vector_insert(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) override;
  std::vector<uint64_t> keys() override;
  std::vector<uint64_t> reachable_blocks() override;
  void apply_logged(uint16_t opcode, const Bytes& params) override;

 private:
  void insert_core(uint32_t part, uint64_t key, uint64_t value);
  Bytes read_node(uint64_t off, uint32_t depth);
  uint64_t make_node(uint64_t key, uint64_t value, uint64_t l, uint64_t r);
  uint64_t create_sub_tree(const std::vector<std::pair<uint64_t, uint64_t>>& kvs,
                           size_t lo, size_t hi);
  void descend_vec(uint64_t node, uint32_t depth,
                   const std::vector<std::pair<uint64_t, uint64_t>>& kvs,
                   size_t lo, size_t hi);
  uint64_t erase_node(uint64_t parent_ptr_addr, uint64_t off, uint64_t key,
                      uint32_t depth, bool* erased);
  std::vector<uint64_t> hdr_;
};

// B+tree: nodes are whole blocks.
//   header: is_leaf u16 | count u16 | pad u32
//   leaf:   keys[f] | values[f] | next u64
//   internal: keys[f] | children[f+1]
struct BptLayout {
  uint32_t block = 0, leaf_fanout = 0, int_fanout = 0;
  explicit BptLayout(uint32_t block_size)
      : block(block_size),
        leaf_fanout((block_size - 8 - 8) / 16),
        int_fanout((block_size - 8 - 8) / 16) {}
  uint64_t key_off(uint32_t i) const { return 8 + 8ull * i; }
  uint64_t val_off(uint32_t i) const { return 8 + 8ull * leaf_fanout + 8ull * i; }
  uint64_t child_off(uint32_t i) const { return 8 + 8ull * int_fanout + 8ull * i; }
  uint64_t next_off() const { return 8 + 16ull * leaf_fanout; }
};

struct BptNode {
  bool leaf = true;
  std::vector<uint64_t> keys;
  std::vector<uint64_t> vals;      // leaf
  std::vector<uint64_t> children;  // internal (keys.size()+1)
  uint64_t next = 0;               // leaf chain
};

class BptImpl final : public TreeLike {
 public:
  BptImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh);
  void insert(uint64_t key, uint64_t value) override;
  std::optional<uint64_t> find(uint64_t key) override;
  bool erase(uint64_t key) override;
  void vector_insert(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) override;
  std::vector<uint64_t> keys() override;
  std::vector<uint64_t> reachable_blocks() override;
  void apply_logged(uint16_t opcode, const Bytes& params) override;
  void check_invariants();  // occupancy + ordering, for tests

 private:
  friend class MvBptImpl;
  uint64_t root_of(uint32_t part);
  // Active during a batched insert: each node is fetched at most once for the
  // whole batch (the writer lock guarantees nothing moves underneath).
  std::unordered_map<uint64_t, BptNode>* batch_memo_ = nullptr;
  void insert_one(uint32_t part, uint64_t key, uint64_t value);
  void rebalance_child(BptNode& n, uint32_t depth, size_t idx);
  BptNode load(uint64_t off, uint32_t depth);
  void store(uint64_t off, const BptNode& n);
  // Returns {promoted separator, new right sibling} when the child split.
  struct SplitResult {
    bool split = false;
    uint64_t sep = 0, right = 0;
  };
  SplitResult insert_rec(uint64_t off, uint32_t depth, uint64_t key, uint64_t value);
  bool erase_rec(uint64_t off, uint32_t depth, uint64_t key, bool* underflow);
  void collect(uint64_t off, std::vector<uint64_t>* out, bool blocks);
  BptLayout lay_;
  std::vector<uint64_t> hdr_;
};

// Multi-version BST: path copying into whole blocks; root reference in the
// naming area, swapped by CAS once the batch's logs are replayed.
class MvBstImpl final : public TreeLike {
 public:
  MvBstImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh, bool writer);
  void insert(uint64_t key, uint64_t value) override;
  std::optional<uint64_t> find(uint64_t key) override;
  bool erase(uint64_t key) override;
  void fence() override;
  void vector_insert(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) override;
  std::vector<uint64_t> keys() override;
  std::vector<uint64_t> reachable_blocks() override;
  void apply_logged(uint16_t opcode, const Bytes& params) override;
  uint64_t committed_root(uint32_t p) { return rt_.root_read(opt_.root_slot + p); }
  // Snapshot walk from a pinned root (readers); in-order keys.
  std::vector<uint64_t> keys_at(uint64_t root);
  size_t fresh_count() const { return fresh_.size(); }

 private:
  struct Node {
    uint64_t key = 0, value = 0, left = 0, right = 0;
  };
  Node load(uint64_t off);
  uint64_t put_node(const Node& n);           // fresh block, staged bytes
  uint64_t modify(uint64_t off, const Node& n);  // in place if fresh, else copy
  uint64_t insert_rec(uint64_t off, uint64_t key, uint64_t value);
  uint64_t erase_rec(uint64_t off, uint64_t key, bool* erased);
  uint64_t pop_min(uint64_t off, Node* out_min);
  void retire(uint64_t off);  // fresh: free now; else queue for deferred free
  void stage_root(uint32_t part);  // publication rides in the batch's record
  void maybe_finalize();
  bool writer_;
  std::vector<uint64_t> cur_root_, committed_;
  std::set<uint64_t> fresh_;
  std::vector<uint64_t> replaced_;
  uint64_t batch_last_opn_ = 0;
};

// Multi-version B+tree: spine copy-on-write over BptNode blocks; lazy
// deletes (no rebalance), per-batch root swap like MvBst.
class MvBptImpl final : public TreeLike {
 public:
  MvBptImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh, bool writer);
  void insert(uint64_t key, uint64_t value) override;
  std::optional<uint64_t> find(uint64_t key) override;
  bool erase(uint64_t key) override;
  void fence() override;
  void vector_insert(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) override;
  std::vector<uint64_t> keys() override;
  std::vector<uint64_t> reachable_blocks() override;
  void apply_logged(uint16_t opcode, const Bytes& params) override;
  uint64_t committed_root(uint32_t p) { return rt_.root_read(opt_.root_slot + p); }
  std::vector<uint64_t> keys_at(uint64_t root);

 private:
  BptNode load(uint64_t off);
  void store(uint64_t off, const BptNode& n);
  uint64_t put_node(const BptNode& n);
  uint64_t modify(uint64_t off, const BptNode& n);
  struct Ins {
    uint64_t node = 0;      // (possibly new) subtree root
    bool split = false;
    uint64_t sep = 0, right = 0;
  };
  Ins insert_rec(uint64_t off, uint64_t key, uint64_t value);
  uint64_t erase_rec(uint64_t off, uint64_t key, bool* erased);
  void collect(uint64_t off, std::vector<uint64_t>* keys_out,
               std::vector<uint64_t>* blocks_out);
  void retire(uint64_t off);
  void stage_root(uint32_t part);
  void maybe_finalize();
  BptLayout lay_;
  bool writer_;
  std::vector<uint64_t> cur_root_, committed_;
  std::set<uint64_t> fresh_;
  std::vector<uint64_t> replaced_;
  uint64_t batch_last_opn_ = 0;
};

}  // namespace nvf::ds::impl
