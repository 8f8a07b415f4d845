#include <algorithm>

#include "ds_impl.hpp"
#include "nvf/crc32c.hpp"

namespace nvf::ds {

using namespace impl;
using backend::kCatalogEntrySize;

const char* ds_kind_name(DsKind k) {
  switch (k) {
    case DsKind::Stack: return "stack";
    case DsKind::Queue: return "queue";
    case DsKind::HashTable: return "hash";
    case DsKind::SkipList: return "skiplist";
    case DsKind::Bst: return "bst";
    case DsKind::Bpt: return "bpt";
    case DsKind::MvBst: return "mv-bst";
    case DsKind::MvBpt: return "mv-bpt";
  }
  return "?";
}

Bytes encode_catalog(const CatalogEntry& e) {
  Bytes b;
  put_u8(b, uint8_t(e.kind));
  put_u8(b, e.partitions);
  put_u8(b, e.root_slot);
  put_u8(b, e.lock_slot);
  put_u32(b, e.ds_id);
  put_u64(b, e.aux);
  put_u64(b, e.aux2);
  put_u32(b, crc32c({b.data(), b.size()}));
  b.resize(kCatalogEntrySize, 0);
  return b;
}

std::optional<CatalogEntry> parse_catalog(std::span<const uint8_t> b) {
  if (b.size() < kCatalogEntrySize || b[0] == 0) return std::nullopt;
  if (crc32c(b.subspan(0, 24)) != load_u32(b.data() + 24)) return std::nullopt;
  CatalogEntry e;
  e.kind = DsKind(b[0]);
  e.partitions = b[1];
  e.root_slot = b[2];
  e.lock_slot = b[3];
  e.ds_id = load_u32(b.data() + 4);
  e.aux = load_u64(b.data() + 8);
  e.aux2 = load_u64(b.data() + 16);
  return e;
}

// --- base ----------------------------------------------------------------

void DataStructure::ensure_lock(uint32_t partition) {
  uint32_t slot = opt_.lock_slot + partition;
  if (opt_.auto_lock && !rt_.holds_lock(slot)) rt_.writer_lock(slot);
}

void DataStructure::release_locks() {
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    uint32_t slot = opt_.lock_slot + p;
    if (rt_.holds_lock(slot)) rt_.writer_unlock(slot);
  }
}

void DataStructure::fence() { rt_.persistent_fence(); }

void DataStructure::apply_logged(uint16_t opcode, const Bytes& params) {
  switch (opcode) {
    case kOpInsert:
      insert(load_u64(params.data()), load_u64(params.data() + 8));
      break;
    case kOpErase:
      erase(load_u64(params.data()));
      break;
    default:
      throw std::logic_error("unsupported logged opcode for this structure");
  }
}

StackQueue& as_stack_queue(DataStructure& ds) {
  return dynamic_cast<StackQueue&>(ds);
}
TreeLike& as_tree(DataStructure& ds) { return dynamic_cast<TreeLike&>(ds); }

uint32_t TreeLike::tree_cache_adapt() {
  double a = rt_.miss_ratio();
  if (a > 0.50 && level_n_ > 1)
    level_n_--;
  else if (a < 0.25)
    level_n_++;
  rt_.reset_cache_stats();
  return level_n_;
}

namespace impl {

void settle_creation(FrontendRuntime& rt, uint32_t ds_id) {
  if (rt.mode() == fe::Mode::Naive) return;
  Bytes none;
  uint64_t opn = rt.op_persist(kOpCreate, ds_id, none);
  rt.persistent_fence();
  rt.wait_durable_opn(opn);
}

Bytes encode_vec_params(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) {
  Bytes p;
  put_u64(p, kvs.size());
  for (auto& [k, v] : kvs) {
    put_u64(p, k);
    put_u64(p, v);
  }
  return p;
}

std::vector<std::pair<uint64_t, uint64_t>> decode_vec_params(const Bytes& params) {
  uint64_t n = load_u64(params.data());
  std::vector<std::pair<uint64_t, uint64_t>> kvs(n);
  for (uint64_t i = 0; i < n; i++)
    kvs[i] = {load_u64(params.data() + 8 + 16 * i),
              load_u64(params.data() + 16 + 16 * i)};
  return kvs;
}

void check_sorted(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) {
  for (size_t i = 1; i < kvs.size(); i++)
    if (kvs[i].first <= kvs[i - 1].first) throw UnsortedInput();
}

}  // namespace impl

namespace {

std::unique_ptr<DataStructure> construct(fe::FrontendRuntime& rt, DsKind k,
                                         uint32_t id, DsOptions opt, bool fresh,
                                         bool writer) {
  switch (k) {
    case DsKind::Stack: return std::make_unique<StackImpl>(rt, id, opt, fresh);
    case DsKind::Queue: return std::make_unique<QueueImpl>(rt, id, opt, fresh);
    case DsKind::HashTable: return std::make_unique<HashImpl>(rt, id, opt, fresh);
    case DsKind::SkipList: return std::make_unique<SkipListImpl>(rt, id, opt, fresh);
    case DsKind::Bst: return std::make_unique<BstImpl>(rt, id, opt, fresh);
    case DsKind::Bpt: return std::make_unique<BptImpl>(rt, id, opt, fresh);
    case DsKind::MvBst:
      return std::make_unique<MvBstImpl>(rt, id, opt, fresh, writer);
    case DsKind::MvBpt:
      return std::make_unique<MvBptImpl>(rt, id, opt, fresh, writer);
  }
  throw std::invalid_argument("unknown structure kind");
}

}  // namespace

std::unique_ptr<DataStructure> DataStructure::create(fe::FrontendRuntime& rt,
                                                     DsKind k, uint32_t ds_id,
                                                     DsOptions opt) {
  auto ds = construct(rt, k, ds_id, opt, /*fresh=*/true, /*writer=*/true);
  CatalogEntry e;
  e.kind = k;
  e.partitions = uint8_t(opt.partitions);
  e.root_slot = uint8_t(opt.root_slot);
  e.lock_slot = uint8_t(opt.lock_slot);
  e.ds_id = ds_id;
  e.aux = k == DsKind::HashTable ? opt.buckets : opt.max_level;
  e.aux2 = opt.mv_free_delay;
  rt.catalog_write(ds_id, encode_catalog(e));
  return ds;
}

std::unique_ptr<DataStructure> DataStructure::open(fe::FrontendRuntime& rt,
                                                   uint32_t ds_id, bool writer) {
  auto e = parse_catalog(rt.catalog_read(ds_id));
  if (!e) throw std::runtime_error("no catalog entry for structure");
  DsOptions opt;
  opt.partitions = e->partitions;
  opt.root_slot = e->root_slot;
  opt.lock_slot = e->lock_slot;
  if (e->kind == DsKind::HashTable) opt.buckets = e->aux;
  if (e->kind == DsKind::SkipList) opt.max_level = uint32_t(e->aux);
  opt.mv_free_delay = e->aux2;
  opt.auto_lock = writer;
  return construct(rt, e->kind, ds_id, opt, /*fresh=*/false, writer);
}

namespace impl {

// --- stack ---------------------------------------------------------------

StackImpl::StackImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh)
    : StackQueue(rt, DsKind::Stack, id, opt) {
  if (fresh) {
    ensure_lock(0);
    hdr_ = rt_.alloc(16);
    rt_.stage_write(hdr_, Bytes(16, 0));
    settle_creation(rt_, id_);
    rt_.root_write(opt_.root_slot, hdr_);
  } else {
    hdr_ = rt_.root_read(opt_.root_slot);
  }
}

void StackImpl::push(uint64_t value) {
  ensure_lock(0);
  uint64_t old_top = rt_.gather_u64(hdr_);
  uint64_t count = rt_.gather_u64(hdr_ + 8);
  uint64_t node = rt_.alloc(16);
  Bytes nb;
  put_u64(nb, value);
  put_u64(nb, old_top);
  rt_.stage_write(node, nb);  // matches params bytes -> flag=1 reference
  rt_.stage_write_u64(hdr_, node);
  rt_.stage_write_u64(hdr_ + 8, count + 1);
  rt_.op_persist(kOpPush, id_, nb);
}

std::optional<uint64_t> StackImpl::pop() {
  ensure_lock(0);
  uint64_t top = rt_.gather_u64(hdr_);
  if (top == 0) throw PopEmpty();
  Bytes node = rt_.gather(top, 16);
  uint64_t value = load_u64(node.data());
  rt_.stage_write_u64(hdr_, load_u64(node.data() + 8));
  rt_.stage_write_u64(hdr_ + 8, rt_.gather_u64(hdr_ + 8) - 1);
  rt_.free(top, 16);
  rt_.op_persist(kOpPop, id_, Bytes{});
  return value;
}

uint64_t StackImpl::size() { return rt_.gather_u64(hdr_ + 8); }
void StackImpl::insert(uint64_t, uint64_t value) { push(value); }
std::optional<uint64_t> StackImpl::find(uint64_t) { return std::nullopt; }
bool StackImpl::erase(uint64_t) {
  pop();
  return true;
}

std::vector<uint64_t> StackImpl::keys() {
  std::vector<uint64_t> out;
  for (uint64_t n = rt_.gather_u64(hdr_); n != 0;) {
    Bytes b = rt_.gather(n, 16);
    out.push_back(load_u64(b.data()));
    n = load_u64(b.data() + 8);
  }
  return out;
}

std::vector<uint64_t> StackImpl::reachable_blocks() {
  std::set<uint64_t> s{owning_block(hdr_)};
  for (uint64_t n = rt_.gather_u64(hdr_); n != 0;
       n = load_u64(rt_.gather(n, 16).data() + 8))
    s.insert(owning_block(n));
  return {s.begin(), s.end()};
}

void StackImpl::apply_logged(uint16_t opcode, const Bytes& params) {
  if (opcode == kOpPush)
    push(load_u64(params.data()));
  else if (opcode == kOpPop)
    pop();
  else
    DataStructure::apply_logged(opcode, params);
}

// --- queue ---------------------------------------------------------------

QueueImpl::QueueImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh)
    : StackQueue(rt, DsKind::Queue, id, opt) {
  if (fresh) {
    ensure_lock(0);
    hdr_ = rt_.alloc(24);
    rt_.stage_write(hdr_, Bytes(24, 0));
    settle_creation(rt_, id_);
    rt_.root_write(opt_.root_slot, hdr_);
  } else {
    hdr_ = rt_.root_read(opt_.root_slot);
  }
}

void QueueImpl::push(uint64_t value) {
  ensure_lock(0);
  uint64_t tail = rt_.gather_u64(hdr_ + 8);
  uint64_t count = rt_.gather_u64(hdr_ + 16);
  uint64_t node = rt_.alloc(16);
  Bytes nb;
  put_u64(nb, value);
  put_u64(nb, 0);
  rt_.stage_write(node, nb);
  if (tail != 0)
    rt_.stage_write_u64(tail + 8, node);
  else
    rt_.stage_write_u64(hdr_, node);
  rt_.stage_write_u64(hdr_ + 8, node);
  rt_.stage_write_u64(hdr_ + 16, count + 1);
  Bytes params;
  put_u64(params, value);
  rt_.op_persist(kOpEnqueue, id_, params);
}

std::optional<uint64_t> QueueImpl::pop() {
  ensure_lock(0);
  uint64_t head = rt_.gather_u64(hdr_);
  if (head == 0) throw PopEmpty();
  Bytes node = rt_.gather(head, 16);
  uint64_t value = load_u64(node.data());
  uint64_t next = load_u64(node.data() + 8);
  rt_.stage_write_u64(hdr_, next);
  if (next == 0) rt_.stage_write_u64(hdr_ + 8, 0);
  rt_.stage_write_u64(hdr_ + 16, rt_.gather_u64(hdr_ + 16) - 1);
  rt_.free(head, 16);
  rt_.op_persist(kOpDequeue, id_, Bytes{});
  return value;
}

uint64_t QueueImpl::size() { return rt_.gather_u64(hdr_ + 16); }
void QueueImpl::insert(uint64_t, uint64_t value) { push(value); }
std::optional<uint64_t> QueueImpl::find(uint64_t) { return std::nullopt; }
bool QueueImpl::erase(uint64_t) {
  pop();
  return true;
}

std::vector<uint64_t> QueueImpl::keys() {
  std::vector<uint64_t> out;
  for (uint64_t n = rt_.gather_u64(hdr_); n != 0;) {
    Bytes b = rt_.gather(n, 16);
    out.push_back(load_u64(b.data()));
    n = load_u64(b.data() + 8);
  }
  return out;
}

std::vector<uint64_t> QueueImpl::reachable_blocks() {
  std::set<uint64_t> s{owning_block(hdr_)};
  for (uint64_t n = rt_.gather_u64(hdr_); n != 0;
       n = load_u64(rt_.gather(n, 16).data() + 8))
    s.insert(owning_block(n));
  return {s.begin(), s.end()};
}

void QueueImpl::apply_logged(uint16_t opcode, const Bytes& params) {
  if (opcode == kOpEnqueue)
    push(load_u64(params.data()));
  else if (opcode == kOpDequeue)
    pop();
  else
    DataStructure::apply_logged(opcode, params);
}

// --- hash table ----------------------------------------------------------

HashImpl::HashImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh)
    : DataStructure(rt, DsKind::HashTable, id, opt) {
  base_.resize(opt_.partitions);
  if (fresh) {
    for (uint32_t p = 0; p < opt_.partitions; p++) {
      ensure_lock(p);
      base_[p] = rt_.alloc(uint32_t(opt_.buckets * 8));
      rt_.stage_write(base_[p], Bytes(opt_.buckets * 8, 0));
    }
    settle_creation(rt_, id_);
    for (uint32_t p = 0; p < opt_.partitions; p++)
      rt_.root_write(opt_.root_slot + p, base_[p]);
  } else {
    for (uint32_t p = 0; p < opt_.partitions; p++)
      base_[p] = rt_.root_read(opt_.root_slot + p);
  }
}

uint64_t HashImpl::bucket_addr(uint64_t key) const {
  uint32_t p = route(key);
  return base_[p] + 8 * (mix64(key ^ 0xB0CCu) % opt_.buckets);
}

void HashImpl::insert(uint64_t key, uint64_t value) {
  ensure_lock(route(key));
  uint64_t bucket = bucket_addr(key);
  uint64_t head = rt_.gather_u64(bucket);
  Bytes params;
  put_u64(params, key);
  put_u64(params, value);
  for (uint64_t cur = head; cur != 0;) {
    Bytes b = rt_.gather(cur, 24);
    if (load_u64(b.data()) == key) {
      rt_.stage_write_u64(cur + 8, value);
      rt_.op_persist(kOpInsert, id_, params);
      return;
    }
    cur = load_u64(b.data() + 16);
  }
  uint64_t node = rt_.alloc(24);
  rt_.stage_write(node, params);  // key|value in one extent -> flag=1 ref
  rt_.stage_write_u64(node + 16, head);
  rt_.stage_write_u64(bucket, node);
  rt_.op_persist(kOpInsert, id_, params);
}

std::optional<uint64_t> HashImpl::find(uint64_t key) {
  for (uint64_t cur = rt_.gather_u64(bucket_addr(key)); cur != 0;) {
    Bytes b = rt_.gather(cur, 24);
    if (load_u64(b.data()) == key) return load_u64(b.data() + 8);
    cur = load_u64(b.data() + 16);
  }
  return std::nullopt;
}

bool HashImpl::erase(uint64_t key) {
  ensure_lock(route(key));
  uint64_t bucket = bucket_addr(key);
  uint64_t prev = 0;
  for (uint64_t cur = rt_.gather_u64(bucket); cur != 0;) {
    Bytes b = rt_.gather(cur, 24);
    uint64_t next = load_u64(b.data() + 16);
    if (load_u64(b.data()) == key) {
      rt_.stage_write_u64(prev == 0 ? bucket : prev + 16, next);
      rt_.free(cur, 24);
      Bytes params;
      put_u64(params, key);
      rt_.op_persist(kOpErase, id_, params);
      return true;
    }
    prev = cur;
    cur = next;
  }
  return false;
}

std::vector<uint64_t> HashImpl::keys() {
  std::vector<uint64_t> out;
  for (uint32_t p = 0; p < opt_.partitions; p++)
    for (uint64_t b = 0; b < opt_.buckets; b++)
      for (uint64_t cur = rt_.gather_u64(base_[p] + 8 * b); cur != 0;) {
        Bytes n = rt_.gather(cur, 24);
        out.push_back(load_u64(n.data()));
        cur = load_u64(n.data() + 16);
      }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<uint64_t> HashImpl::reachable_blocks() {
  std::set<uint64_t> s;
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    for (uint64_t off = 0; off < opt_.buckets * 8; off += rt_.geom().cfg.block_size)
      s.insert(owning_block(base_[p] + off));
    for (uint64_t b = 0; b < opt_.buckets; b++)
      for (uint64_t cur = rt_.gather_u64(base_[p] + 8 * b); cur != 0;
           cur = load_u64(rt_.gather(cur, 24).data() + 16))
        s.insert(owning_block(cur));
  }
  return {s.begin(), s.end()};
}

// --- skip list -----------------------------------------------------------

uint32_t SkipListImpl::height_of(uint64_t key, uint32_t max_level) {
  uint64_t h = mix64(key ^ 0x51EE7u);
  uint32_t lvl = 1;
  while ((h & 1) && lvl < max_level) {
    lvl++;
    h >>= 1;
  }
  return lvl;
}

SkipListImpl::SkipListImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt,
                           bool fresh)
    : DataStructure(rt, DsKind::SkipList, id, opt) {
  hdr_.resize(opt_.partitions);
  if (fresh) {
    for (uint32_t p = 0; p < opt_.partitions; p++) {
      ensure_lock(p);
      hdr_[p] = rt_.alloc(8 * opt_.max_level);
      rt_.stage_write(hdr_[p], Bytes(8 * opt_.max_level, 0));
    }
    settle_creation(rt_, id_);
    for (uint32_t p = 0; p < opt_.partitions; p++)
      rt_.root_write(opt_.root_slot + p, hdr_[p]);
  } else {
    for (uint32_t p = 0; p < opt_.partitions; p++)
      hdr_[p] = rt_.root_read(opt_.root_slot + p);
  }
}

uint64_t SkipListImpl::node_next(uint64_t node, uint32_t lvl) {
  return rt_.gather_u64(node + 24 + 8ull * lvl);
}

void SkipListImpl::insert(uint64_t key, uint64_t value) {
  uint32_t part = route(key);
  ensure_lock(part);
  uint64_t hdr = hdr_[part];
  std::vector<uint64_t> pred_addr(opt_.max_level);  // address of pointer to patch
  uint64_t cur = 0;  // 0 = header
  for (int lvl = int(opt_.max_level) - 1; lvl >= 0; lvl--) {
    for (;;) {
      uint64_t next = cur == 0 ? rt_.gather_u64(hdr + 8ull * lvl)
                               : node_next(cur, uint32_t(lvl));
      if (next == 0 || rt_.gather_u64(next) >= key) break;
      cur = next;
    }
    pred_addr[lvl] = cur == 0 ? hdr + 8ull * lvl : cur + 24 + 8ull * lvl;
  }
  uint64_t at = rt_.gather_u64(pred_addr[0]);
  Bytes params;
  put_u64(params, key);
  put_u64(params, value);
  if (at != 0 && rt_.gather_u64(at) == key) {
    rt_.stage_write_u64(at + 8, value);
    rt_.op_persist(kOpInsert, id_, params);
    return;
  }
  uint32_t h = height_of(key, opt_.max_level);
  uint64_t node = rt_.alloc(24 + 8 * h);
  // The node is fully initialized before any predecessor points at it, and
  // level pointers are published bottom-up.
  rt_.stage_write(node, params);  // key|value
  rt_.stage_write_u64(node + 16, h);
  for (uint32_t l = 0; l < h; l++)
    rt_.stage_write_u64(node + 24 + 8ull * l, rt_.gather_u64(pred_addr[l]));
  for (uint32_t l = 0; l < h; l++) rt_.stage_write_u64(pred_addr[l], node);
  rt_.op_persist(kOpInsert, id_, params);
}

std::optional<uint64_t> SkipListImpl::find(uint64_t key) {
  uint32_t part = route(key);
  uint64_t hdr = hdr_[part];
  uint64_t cur = 0;
  for (int lvl = int(opt_.max_level) - 1; lvl >= 0; lvl--) {
    for (;;) {
      uint64_t next = cur == 0 ? rt_.gather_u64(hdr + 8ull * lvl)
                               : node_next(cur, uint32_t(lvl));
      if (next == 0 || rt_.gather_u64(next) > key) break;
      if (rt_.gather_u64(next) == key) return rt_.gather_u64(next + 8);
      cur = next;
    }
  }
  return std::nullopt;
}

bool SkipListImpl::erase(uint64_t key) {
  uint32_t part = route(key);
  ensure_lock(part);
  uint64_t hdr = hdr_[part];
  std::vector<uint64_t> pred_addr(opt_.max_level);
  uint64_t cur = 0;
  for (int lvl = int(opt_.max_level) - 1; lvl >= 0; lvl--) {
    for (;;) {
      uint64_t next = cur == 0 ? rt_.gather_u64(hdr + 8ull * lvl)
                               : node_next(cur, uint32_t(lvl));
      if (next == 0 || rt_.gather_u64(next) >= key) break;
      cur = next;
    }
    pred_addr[lvl] = cur == 0 ? hdr + 8ull * lvl : cur + 24 + 8ull * lvl;
  }
  uint64_t victim = rt_.gather_u64(pred_addr[0]);
  if (victim == 0 || rt_.gather_u64(victim) != key) return false;
  uint32_t h = uint32_t(rt_.gather_u64(victim + 16));
  // Unlink top-down so a concurrent reader never finds a dangling level.
  for (int l = int(h) - 1; l >= 0; l--)
    if (rt_.gather_u64(pred_addr[l]) == victim)
      rt_.stage_write_u64(pred_addr[l], node_next(victim, uint32_t(l)));
  rt_.free(victim, 24 + 8 * h);
  Bytes params;
  put_u64(params, key);
  rt_.op_persist(kOpErase, id_, params);
  return true;
}

std::vector<uint64_t> SkipListImpl::keys() {
  std::vector<uint64_t> out;
  for (uint32_t p = 0; p < opt_.partitions; p++)
    for (uint64_t cur = rt_.gather_u64(hdr_[p]); cur != 0;
         cur = rt_.gather_u64(cur + 24))
      out.push_back(rt_.gather_u64(cur));
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<uint64_t> SkipListImpl::reachable_blocks() {
  std::set<uint64_t> s;
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    s.insert(owning_block(hdr_[p]));
    for (uint64_t cur = rt_.gather_u64(hdr_[p]); cur != 0;
         cur = rt_.gather_u64(cur + 24))
      s.insert(owning_block(cur));
  }
  return {s.begin(), s.end()};
}

}  // namespace impl
}  // namespace nvf::ds
