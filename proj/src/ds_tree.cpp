#include <algorithm>
#include <functional>

#include "ds_impl.hpp"

namespace nvf::ds::impl {

// --- plain BST -----------------------------------------------------------
// Node extent: key u64 | value u64 | left u64 | right u64.

BstImpl::BstImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh)
    : TreeLike(rt, DsKind::Bst, id, opt) {
  hdr_.resize(opt_.partitions);
  if (fresh) {
    for (uint32_t p = 0; p < opt_.partitions; p++) {
      ensure_lock(p);
      hdr_[p] = rt_.alloc(8);
      rt_.stage_write_u64(hdr_[p], 0);
    }
    settle_creation(rt_, id_);
    for (uint32_t p = 0; p < opt_.partitions; p++)
      rt_.root_write(opt_.root_slot + p, hdr_[p]);
  } else {
    for (uint32_t p = 0; p < opt_.partitions; p++)
      hdr_[p] = rt_.root_read(opt_.root_slot + p);
  }
}

Bytes BstImpl::read_node(uint64_t off, uint32_t depth) {
  // Tree cache policy: only the top N levels go through the page cache.
  return rt_.gather(off, 32, depth < level_n_);
}

uint64_t BstImpl::make_node(uint64_t key, uint64_t value, uint64_t l, uint64_t r) {
  uint64_t off = rt_.alloc(32);
  Bytes kv;
  put_u64(kv, key);
  put_u64(kv, value);
  rt_.stage_write(off, kv);  // key|value in one extent -> flag=1 ref
  rt_.stage_write_u64(off + 16, l);
  rt_.stage_write_u64(off + 24, r);
  return off;
}

void BstImpl::insert_core(uint32_t part, uint64_t key, uint64_t value) {
  uint64_t ptr = hdr_[part];  // address of the pointer to the current subtree
  uint32_t depth = 0;
  for (;;) {
    uint64_t cur = rt_.gather_u64(ptr, depth <= level_n_);
    if (cur == 0) {
      rt_.stage_write_u64(ptr, make_node(key, value, 0, 0));
      return;
    }
    Bytes b = read_node(cur, depth);
    uint64_t k = load_u64(b.data());
    if (k == key) {
      rt_.stage_write_u64(cur + 8, value);
      return;
    }
    ptr = key < k ? cur + 16 : cur + 24;
    depth++;
  }
}

void BstImpl::insert(uint64_t key, uint64_t value) {
  uint32_t part = route(key);
  ensure_lock(part);
  insert_core(part, key, value);
  Bytes params;
  put_u64(params, key);
  put_u64(params, value);
  rt_.op_persist(kOpInsert, id_, params);
}

std::optional<uint64_t> BstImpl::find(uint64_t key) {
  uint32_t part = route(key);
  uint64_t cur = rt_.gather_u64(hdr_[part]);
  uint32_t depth = 0;
  while (cur != 0) {
    Bytes b = read_node(cur, depth++);
    uint64_t k = load_u64(b.data());
    if (k == key) return load_u64(b.data() + 8);
    cur = load_u64(b.data() + (key < k ? 16 : 24));
  }
  return std::nullopt;
}

uint64_t BstImpl::erase_node(uint64_t parent_ptr_addr, uint64_t off, uint64_t key,
                             uint32_t depth, bool* erased) {
  if (off == 0) return 0;
  Bytes b = read_node(off, depth);
  uint64_t k = load_u64(b.data());
  uint64_t l = load_u64(b.data() + 16), r = load_u64(b.data() + 24);
  if (key < k) {
    erase_node(off + 16, l, key, depth + 1, erased);
    return off;
  }
  if (key > k) {
    erase_node(off + 24, r, key, depth + 1, erased);
    return off;
  }
  *erased = true;
  if (l == 0 || r == 0) {
    uint64_t child = l == 0 ? r : l;
    rt_.stage_write_u64(parent_ptr_addr, child);
    rt_.free(off, 32);
    return child;
  }
  // Two children: splice the successor (leftmost of the right subtree) in.
  uint64_t sp = off + 24, s = r;
  uint32_t sd = depth + 1;
  for (;;) {
    Bytes sb = read_node(s, sd);
    uint64_t sl = load_u64(sb.data() + 16);
    if (sl == 0) {
      Bytes kv(sb.begin(), sb.begin() + 16);
      rt_.stage_write(off, kv);
      rt_.stage_write_u64(sp, load_u64(sb.data() + 24));
      rt_.free(s, 32);
      return off;
    }
    sp = s + 16;
    s = sl;
    sd++;
  }
}

bool BstImpl::erase(uint64_t key) {
  uint32_t part = route(key);
  ensure_lock(part);
  bool erased = false;
  erase_node(hdr_[part], rt_.gather_u64(hdr_[part]), key, 0, &erased);
  if (!erased) return false;
  Bytes params;
  put_u64(params, key);
  rt_.op_persist(kOpErase, id_, params);
  return true;
}

uint64_t BstImpl::create_sub_tree(
    const std::vector<std::pair<uint64_t, uint64_t>>& kvs, size_t lo, size_t hi) {
  if (lo >= hi) return 0;
  size_t mid = lo + (hi - lo) / 2;
  uint64_t l = create_sub_tree(kvs, lo, mid);
  uint64_t r = create_sub_tree(kvs, mid + 1, hi);
  return make_node(kvs[mid].first, kvs[mid].second, l, r);
}

void BstImpl::descend_vec(uint64_t node, uint32_t depth,
                          const std::vector<std::pair<uint64_t, uint64_t>>& kvs,
                          size_t lo, size_t hi) {
  if (lo >= hi) return;
  Bytes b = read_node(node, depth);
  uint64_t k = load_u64(b.data());
  // Partition the still-sorted range around this node's key; each node on the
  // path is read once for the whole batch.
  size_t split = lo;
  while (split < hi && kvs[split].first < k) split++;
  bool eq = split < hi && kvs[split].first == k;
  if (eq) rt_.stage_write_u64(node + 8, kvs[split].second);
  if (lo < split) {
    uint64_t l = load_u64(b.data() + 16);
    if (l == 0)
      rt_.stage_write_u64(node + 16, create_sub_tree(kvs, lo, split));
    else
      descend_vec(l, depth + 1, kvs, lo, split);
  }
  size_t rlo = split + (eq ? 1 : 0);
  if (rlo < hi) {
    uint64_t r = load_u64(b.data() + 24);
    if (r == 0)
      rt_.stage_write_u64(node + 24, create_sub_tree(kvs, rlo, hi));
    else
      descend_vec(r, depth + 1, kvs, rlo, hi);
  }
}

void BstImpl::vector_insert(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) {
  check_sorted(kvs);
  if (kvs.empty()) return;
  std::vector<std::vector<std::pair<uint64_t, uint64_t>>> per(opt_.partitions);
  for (auto& kv : kvs) per[route(kv.first)].push_back(kv);
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    if (per[p].empty()) continue;
    ensure_lock(p);
    uint64_t root = rt_.gather_u64(hdr_[p]);
    if (root == 0)
      rt_.stage_write_u64(hdr_[p], create_sub_tree(per[p], 0, per[p].size()));
    else
      descend_vec(root, 0, per[p], 0, per[p].size());
  }
  rt_.op_persist(kOpVecInsert, id_, encode_vec_params(kvs));
}

void BstImpl::apply_logged(uint16_t opcode, const Bytes& params) {
  if (opcode == kOpVecInsert)
    vector_insert(decode_vec_params(params));
  else
    DataStructure::apply_logged(opcode, params);
}

std::vector<uint64_t> BstImpl::keys() {
  std::vector<uint64_t> out;
  std::function<void(uint64_t, uint32_t)> walk = [&](uint64_t off, uint32_t d) {
    if (off == 0) return;
    Bytes b = read_node(off, d);
    walk(load_u64(b.data() + 16), d + 1);
    out.push_back(load_u64(b.data()));
    walk(load_u64(b.data() + 24), d + 1);
  };
  for (uint32_t p = 0; p < opt_.partitions; p++) walk(rt_.gather_u64(hdr_[p]), 0);
  if (opt_.partitions > 1) std::sort(out.begin(), out.end());
  return out;
}

std::vector<uint64_t> BstImpl::reachable_blocks() {
  std::set<uint64_t> s;
  std::function<void(uint64_t, uint32_t)> walk = [&](uint64_t off, uint32_t d) {
    if (off == 0) return;
    s.insert(owning_block(off));
    Bytes b = read_node(off, d);
    walk(load_u64(b.data() + 16), d + 1);
    walk(load_u64(b.data() + 24), d + 1);
  };
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    s.insert(owning_block(hdr_[p]));
    walk(rt_.gather_u64(hdr_[p]), 0);
  }
  return {s.begin(), s.end()};
}

// --- B+tree --------------------------------------------------------------
// Node = whole block. Header word: count<<16 | is_leaf.

namespace {

Bytes encode_bpt(const BptLayout& lay, const BptNode& n) {
  Bytes b(lay.block, 0);
  store_u64(b.data(), uint64_t(n.keys.size()) << 16 | (n.leaf ? 1 : 0));
  for (size_t i = 0; i < n.keys.size(); i++)
    store_u64(b.data() + lay.key_off(uint32_t(i)), n.keys[i]);
  if (n.leaf) {
    for (size_t i = 0; i < n.vals.size(); i++)
      store_u64(b.data() + lay.val_off(uint32_t(i)), n.vals[i]);
    store_u64(b.data() + lay.next_off(), n.next);
  } else {
    for (size_t i = 0; i < n.children.size(); i++)
      store_u64(b.data() + lay.child_off(uint32_t(i)), n.children[i]);
  }
  return b;
}

BptNode decode_bpt(const BptLayout& lay, const Bytes& b) {
  BptNode n;
  uint64_t hdr = load_u64(b.data());
  n.leaf = (hdr & 1) != 0;
  size_t count = size_t(hdr >> 16);
  n.keys.resize(count);
  for (size_t i = 0; i < count; i++)
    n.keys[i] = load_u64(b.data() + lay.key_off(uint32_t(i)));
  if (n.leaf) {
    n.vals.resize(count);
    for (size_t i = 0; i < count; i++)
      n.vals[i] = load_u64(b.data() + lay.val_off(uint32_t(i)));
    n.next = load_u64(b.data() + lay.next_off());
  } else {
    n.children.resize(count + 1);
    for (size_t i = 0; i <= count; i++)
      n.children[i] = load_u64(b.data() + lay.child_off(uint32_t(i)));
  }
  return n;
}

size_t child_index(const std::vector<uint64_t>& seps, uint64_t key) {
  return size_t(std::upper_bound(seps.begin(), seps.end(), key) - seps.begin());
}

}  // namespace

BptImpl::BptImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh)
    : TreeLike(rt, DsKind::Bpt, id, opt), lay_(rt.geom().cfg.block_size) {
  hdr_.resize(opt_.partitions);
  if (fresh) {
    for (uint32_t p = 0; p < opt_.partitions; p++) {
      ensure_lock(p);
      hdr_[p] = rt_.alloc(8);
      uint64_t root = rt_.alloc_block();
      store(root, BptNode{});  // empty leaf
      rt_.stage_write_u64(hdr_[p], root);
    }
    settle_creation(rt_, id_);
    for (uint32_t p = 0; p < opt_.partitions; p++)
      rt_.root_write(opt_.root_slot + p, hdr_[p]);
  } else {
    for (uint32_t p = 0; p < opt_.partitions; p++)
      hdr_[p] = rt_.root_read(opt_.root_slot + p);
  }
}

uint64_t BptImpl::root_of(uint32_t part) { return rt_.gather_u64(hdr_[part]); }

BptNode BptImpl::load(uint64_t off, uint32_t depth) {
  if (batch_memo_) {
    auto it = batch_memo_->find(off);
    if (it != batch_memo_->end()) return it->second;
  }
  BptNode n = decode_bpt(lay_, rt_.gather(off, lay_.block, depth < level_n_));
  if (batch_memo_) batch_memo_->emplace(off, n);
  return n;
}

void BptImpl::store(uint64_t off, const BptNode& n) {
  if (batch_memo_) (*batch_memo_)[off] = n;
  rt_.stage_write(off, encode_bpt(lay_, n));
}

BptImpl::SplitResult BptImpl::insert_rec(uint64_t off, uint32_t depth,
                                         uint64_t key, uint64_t value) {
  BptNode n = load(off, depth);
  if (n.leaf) {
    auto it = std::lower_bound(n.keys.begin(), n.keys.end(), key);
    size_t pos = size_t(it - n.keys.begin());
    if (it != n.keys.end() && *it == key) {
      n.vals[pos] = value;
      store(off, n);
      return {};
    }
    n.keys.insert(it, key);
    n.vals.insert(n.vals.begin() + long(pos), value);
    if (n.keys.size() <= lay_.leaf_fanout) {
      store(off, n);
      return {};
    }
    size_t mid = n.keys.size() / 2;
    BptNode right;
    right.keys.assign(n.keys.begin() + long(mid), n.keys.end());
    right.vals.assign(n.vals.begin() + long(mid), n.vals.end());
    right.next = n.next;
    n.keys.resize(mid);
    n.vals.resize(mid);
    uint64_t rb = rt_.alloc_block();
    n.next = rb;
    store(rb, right);
    store(off, n);
    return {true, right.keys.front(), rb};
  }
  size_t idx = child_index(n.keys, key);
  SplitResult r = insert_rec(n.children[idx], depth + 1, key, value);
  if (!r.split) return {};
  n.keys.insert(n.keys.begin() + long(idx), r.sep);
  n.children.insert(n.children.begin() + long(idx) + 1, r.right);
  if (n.keys.size() <= lay_.int_fanout) {
    store(off, n);
    return {};
  }
  size_t mid = n.keys.size() / 2;
  uint64_t up = n.keys[mid];
  BptNode right;
  right.leaf = false;
  right.keys.assign(n.keys.begin() + long(mid) + 1, n.keys.end());
  right.children.assign(n.children.begin() + long(mid) + 1, n.children.end());
  n.keys.resize(mid);
  n.children.resize(mid + 1);
  uint64_t rb = rt_.alloc_block();
  store(rb, right);
  store(off, n);
  return {true, up, rb};
}

void BptImpl::insert_one(uint32_t part, uint64_t key, uint64_t value) {
  uint64_t root = root_of(part);
  SplitResult r = insert_rec(root, 0, key, value);
  if (r.split) {
    BptNode nr;
    nr.leaf = false;
    nr.keys = {r.sep};
    nr.children = {root, r.right};
    uint64_t nb = rt_.alloc_block();
    store(nb, nr);
    rt_.stage_write_u64(hdr_[part], nb);
  }
}

void BptImpl::insert(uint64_t key, uint64_t value) {
  uint32_t part = route(key);
  ensure_lock(part);
  insert_one(part, key, value);
  Bytes params;
  put_u64(params, key);
  put_u64(params, value);
  rt_.op_persist(kOpInsert, id_, params);
}

std::optional<uint64_t> BptImpl::find(uint64_t key) {
  uint64_t off = root_of(route(key));
  uint32_t depth = 0;
  for (;;) {
    BptNode n = load(off, depth++);
    if (n.leaf) {
      auto it = std::lower_bound(n.keys.begin(), n.keys.end(), key);
      if (it != n.keys.end() && *it == key)
        return n.vals[size_t(it - n.keys.begin())];
      return std::nullopt;
    }
    off = n.children[child_index(n.keys, key)];
  }
}

// Fixes an underflowed child by borrowing from a sibling or merging; stores
// every node it touches. `depth` is the children's depth.
void BptImpl::rebalance_child(BptNode& n, uint32_t depth, size_t idx) {
  uint32_t minc = lay_.leaf_fanout / 2;
  uint64_t coff = n.children[idx];
  BptNode c = load(coff, depth);
  if (idx > 0) {
    uint64_t loff = n.children[idx - 1];
    BptNode l = load(loff, depth);
    if (l.keys.size() > minc) {
      if (c.leaf) {
        c.keys.insert(c.keys.begin(), l.keys.back());
        c.vals.insert(c.vals.begin(), l.vals.back());
        l.keys.pop_back();
        l.vals.pop_back();
        n.keys[idx - 1] = c.keys.front();
      } else {
        c.keys.insert(c.keys.begin(), n.keys[idx - 1]);
        c.children.insert(c.children.begin(), l.children.back());
        n.keys[idx - 1] = l.keys.back();
        l.keys.pop_back();
        l.children.pop_back();
      }
      store(loff, l);
      store(coff, c);
      return;
    }
  }
  if (idx + 1 < n.children.size()) {
    uint64_t roff = n.children[idx + 1];
    BptNode r = load(roff, depth);
    if (r.keys.size() > minc) {
      if (c.leaf) {
        c.keys.push_back(r.keys.front());
        c.vals.push_back(r.vals.front());
        r.keys.erase(r.keys.begin());
        r.vals.erase(r.vals.begin());
        n.keys[idx] = r.keys.front();
      } else {
        c.keys.push_back(n.keys[idx]);
        c.children.push_back(r.children.front());
        n.keys[idx] = r.keys.front();
        r.keys.erase(r.keys.begin());
        r.children.erase(r.children.begin());
      }
      store(roff, r);
      store(coff, c);
      return;
    }
  }
  // Merge with the left sibling if there is one, else pull the right one in.
  size_t li = idx > 0 ? idx - 1 : idx;
  uint64_t loff = n.children[li], roff = n.children[li + 1];
  BptNode l = load(loff, depth), r = load(roff, depth);
  if (l.leaf) {
    l.keys.insert(l.keys.end(), r.keys.begin(), r.keys.end());
    l.vals.insert(l.vals.end(), r.vals.begin(), r.vals.end());
    l.next = r.next;
  } else {
    l.keys.push_back(n.keys[li]);
    l.keys.insert(l.keys.end(), r.keys.begin(), r.keys.end());
    l.children.insert(l.children.end(), r.children.begin(), r.children.end());
  }
  n.keys.erase(n.keys.begin() + long(li));
  n.children.erase(n.children.begin() + long(li) + 1);
  store(loff, l);
  rt_.free_block(roff);
}

bool BptImpl::erase_rec(uint64_t off, uint32_t depth, uint64_t key,
                        bool* underflow) {
  uint32_t minc = lay_.leaf_fanout / 2;
  BptNode n = load(off, depth);
  if (n.leaf) {
    auto it = std::lower_bound(n.keys.begin(), n.keys.end(), key);
    if (it == n.keys.end() || *it != key) return false;
    n.vals.erase(n.vals.begin() + (it - n.keys.begin()));
    n.keys.erase(it);
    store(off, n);
    *underflow = n.keys.size() < minc;
    return true;
  }
  size_t idx = child_index(n.keys, key);
  bool cu = false;
  if (!erase_rec(n.children[idx], depth + 1, key, &cu)) return false;
  if (cu) {
    rebalance_child(n, depth + 1, idx);
    store(off, n);
    *underflow = n.keys.size() < minc;
  }
  return true;
}

bool BptImpl::erase(uint64_t key) {
  uint32_t part = route(key);
  ensure_lock(part);
  uint64_t root = root_of(part);
  bool underflow = false;
  if (!erase_rec(root, 0, key, &underflow)) return false;
  BptNode n = load(root, 0);
  if (!n.leaf && n.keys.empty()) {
    rt_.stage_write_u64(hdr_[part], n.children[0]);
    rt_.free_block(root);
  }
  Bytes params;
  put_u64(params, key);
  rt_.op_persist(kOpErase, id_, params);
  return true;
}

void BptImpl::vector_insert(const std::vector<std::pair<uint64_t, uint64_t>>& kvs) {
  check_sorted(kvs);
  if (kvs.empty()) return;
  // One pass for the whole sorted batch: the root reference is fetched once
  // per partition and every node once at most, instead of a full descent
  // (root reference included) per key.
  std::unordered_map<uint64_t, BptNode> memo;
  struct MemoGuard {
    BptImpl* self;
    ~MemoGuard() { self->batch_memo_ = nullptr; }
  } guard{this};
  batch_memo_ = &memo;
  std::vector<std::vector<std::pair<uint64_t, uint64_t>>> per(opt_.partitions);
  for (auto& kv : kvs) per[route(kv.first)].push_back(kv);
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    if (per[p].empty()) continue;
    ensure_lock(p);
    uint64_t root = root_of(p);
    for (auto& [k, v] : per[p]) {
      SplitResult r = insert_rec(root, 0, k, v);
      if (r.split) {
        BptNode nr;
        nr.leaf = false;
        nr.keys = {r.sep};
        nr.children = {root, r.right};
        uint64_t nb = rt_.alloc_block();
        store(nb, nr);
        rt_.stage_write_u64(hdr_[p], nb);
        root = nb;
      }
    }
  }
  rt_.op_persist(kOpVecInsert, id_, encode_vec_params(kvs));
}

void BptImpl::apply_logged(uint16_t opcode, const Bytes& params) {
  if (opcode == kOpVecInsert)
    vector_insert(decode_vec_params(params));
  else
    DataStructure::apply_logged(opcode, params);
}

void BptImpl::collect(uint64_t off, std::vector<uint64_t>* out, bool blocks) {
  std::function<void(uint64_t, uint32_t)> walk = [&](uint64_t o, uint32_t d) {
    if (blocks) out->push_back(o);
    BptNode n = load(o, d);
    if (n.leaf) {
      if (!blocks) out->insert(out->end(), n.keys.begin(), n.keys.end());
      return;
    }
    for (uint64_t c : n.children) walk(c, d + 1);
  };
  walk(off, 0);
}

std::vector<uint64_t> BptImpl::keys() {
  std::vector<uint64_t> out;
  for (uint32_t p = 0; p < opt_.partitions; p++) collect(root_of(p), &out, false);
  if (opt_.partitions > 1) std::sort(out.begin(), out.end());
  return out;
}

std::vector<uint64_t> BptImpl::reachable_blocks() {
  std::vector<uint64_t> out;
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    out.push_back(owning_block(hdr_[p]));
    collect(root_of(p), &out, true);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void BptImpl::check_invariants() {
  uint32_t minc = lay_.leaf_fanout / 2;
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    int leaf_depth = -1;
    std::function<void(uint64_t, uint32_t, std::optional<uint64_t>,
                       std::optional<uint64_t>)>
        walk = [&](uint64_t off, uint32_t d, std::optional<uint64_t> lo,
                   std::optional<uint64_t> hi) {
          BptNode n = load(off, d);
          if (!std::is_sorted(n.keys.begin(), n.keys.end()) ||
              std::adjacent_find(n.keys.begin(), n.keys.end()) != n.keys.end())
            throw std::logic_error("keys not strictly sorted");
          for (uint64_t k : n.keys) {
            if ((lo && k < *lo) || (hi && k >= *hi))
              throw std::logic_error("key outside separator bounds");
          }
          if (d > 0 && n.keys.size() < minc)
            throw std::logic_error("node underflow");
          if (n.leaf) {
            if (leaf_depth < 0) leaf_depth = int(d);
            if (leaf_depth != int(d)) throw std::logic_error("uneven leaf depth");
            return;
          }
          if (n.keys.size() > lay_.int_fanout)
            throw std::logic_error("node overflow");
          for (size_t i = 0; i < n.children.size(); i++) {
            auto clo = i == 0 ? lo : std::optional<uint64_t>(n.keys[i - 1]);
            auto chi = i == n.keys.size() ? hi : std::optional<uint64_t>(n.keys[i]);
            walk(n.children[i], d + 1, clo, chi);
          }
        };
    walk(root_of(p), 0, std::nullopt, std::nullopt);
  }
}

// --- multi-version BST ---------------------------------------------------
// Node = one block: key u64 | value u64 | left u64 | right u64. Mutations
// copy the path into fresh blocks; the root reference swaps by CAS only
// after the batch's memory logs are replayed, so readers always see either
// the old or the new version in full.

MvBstImpl::MvBstImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh,
                     bool writer)
    : TreeLike(rt, DsKind::MvBst, id, opt), writer_(writer) {
  cur_root_.assign(opt_.partitions, 0);
  committed_.assign(opt_.partitions, 0);
  if (!fresh) {
    for (uint32_t p = 0; p < opt_.partitions; p++)
      cur_root_[p] = committed_[p] = rt_.root_read(opt_.root_slot + p);
  }
  // Fresh: empty tree, root refs stay zero; nothing to persist yet.
}

MvBstImpl::Node MvBstImpl::load(uint64_t off) {
  Bytes b = rt_.gather(off, 32, writer_);
  return {load_u64(b.data()), load_u64(b.data() + 8), load_u64(b.data() + 16),
          load_u64(b.data() + 24)};
}

uint64_t MvBstImpl::put_node(const Node& n) {
  uint64_t off = rt_.alloc_block();
  Bytes kv;
  put_u64(kv, n.key);
  put_u64(kv, n.value);
  rt_.stage_write(off, kv);
  rt_.stage_write_u64(off + 16, n.left);
  rt_.stage_write_u64(off + 24, n.right);
  fresh_.insert(off);
  return off;
}

uint64_t MvBstImpl::modify(uint64_t off, const Node& n) {
  if (fresh_.count(off)) {
    Bytes kv;
    put_u64(kv, n.key);
    put_u64(kv, n.value);
    rt_.stage_write(off, kv);
    rt_.stage_write_u64(off + 16, n.left);
    rt_.stage_write_u64(off + 24, n.right);
    return off;
  }
  replaced_.push_back(off);
  return put_node(n);
}

void MvBstImpl::retire(uint64_t off) {
  if (fresh_.erase(off))
    rt_.free_block(off);  // never published; safe to free immediately
  else
    replaced_.push_back(off);
}

uint64_t MvBstImpl::insert_rec(uint64_t off, uint64_t key, uint64_t value) {
  if (off == 0) return put_node({key, value, 0, 0});
  Node n = load(off);
  if (key == n.key)
    n.value = value;
  else if (key < n.key)
    n.left = insert_rec(n.left, key, value);
  else
    n.right = insert_rec(n.right, key, value);
  return modify(off, n);
}

uint64_t MvBstImpl::pop_min(uint64_t off, Node* out_min) {
  Node n = load(off);
  if (n.left == 0) {
    *out_min = n;
    retire(off);
    return n.right;
  }
  n.left = pop_min(n.left, out_min);
  return modify(off, n);
}

uint64_t MvBstImpl::erase_rec(uint64_t off, uint64_t key, bool* erased) {
  if (off == 0) return 0;
  Node n = load(off);
  if (key < n.key) {
    uint64_t nl = erase_rec(n.left, key, erased);
    if (!*erased) return off;
    n.left = nl;
    return modify(off, n);
  }
  if (key > n.key) {
    uint64_t nr = erase_rec(n.right, key, erased);
    if (!*erased) return off;
    n.right = nr;
    return modify(off, n);
  }
  *erased = true;
  if (n.left == 0 || n.right == 0) {
    uint64_t child = n.left == 0 ? n.right : n.left;
    retire(off);
    return child;
  }
  Node m;
  n.right = pop_min(n.right, &m);
  n.key = m.key;
  n.value = m.value;
  return modify(off, n);
}

void MvBstImpl::stage_root(uint32_t part) {
  // The root ref is staged like any other byte range, so publication lands in
  // the same durable record as the version bytes: replaying the record is
  // what publishes, and recovery can never observe a version without its root
  // or a root without its version.
  rt_.stage_write_u64(backend::kOffRootRefs + 8ull * (opt_.root_slot + part),
                      cur_root_[part]);
}

void MvBstImpl::maybe_finalize() {
  if (rt_.pending_op_count() != 0) return;
  if (fresh_.empty() && replaced_.empty() && cur_root_ == committed_) return;
  // The batch is flushed; once replay covers its last op the roots are live.
  rt_.wait_durable_opn(batch_last_opn_);
  committed_ = cur_root_;
  for (uint64_t b : replaced_) rt_.deferred_free_block(b, opt_.mv_free_delay);
  replaced_.clear();
  fresh_.clear();
}

void MvBstImpl::insert(uint64_t key, uint64_t value) {
  uint32_t part = route(key);
  ensure_lock(part);
  cur_root_[part] = insert_rec(cur_root_[part], key, value);
  stage_root(part);
  Bytes params;
  put_u64(params, key);
  put_u64(params, value);
  batch_last_opn_ = rt_.op_persist(kOpInsert, id_, params);
  maybe_finalize();
}

bool MvBstImpl::erase(uint64_t key) {
  uint32_t part = route(key);
  ensure_lock(part);
  bool erased = false;
  uint64_t nr = erase_rec(cur_root_[part], key, &erased);
  if (!erased) return false;
  cur_root_[part] = nr;
  stage_root(part);
  Bytes params;
  put_u64(params, key);
  batch_last_opn_ = rt_.op_persist(kOpErase, id_, params);
  maybe_finalize();
  return true;
}

void MvBstImpl::vector_insert(
    const std::vector<std::pair<uint64_t, uint64_t>>& kvs) {
  check_sorted(kvs);
  if (kvs.empty()) return;
  for (auto& [k, v] : kvs) {
    uint32_t part = route(k);
    ensure_lock(part);
    cur_root_[part] = insert_rec(cur_root_[part], k, v);
    stage_root(part);
  }
  batch_last_opn_ = rt_.op_persist(kOpVecInsert, id_, encode_vec_params(kvs));
  maybe_finalize();
}

std::optional<uint64_t> MvBstImpl::find(uint64_t key) {
  uint32_t part = route(key);
  uint64_t cur =
      writer_ ? cur_root_[part] : rt_.root_read(opt_.root_slot + part);
  while (cur != 0) {
    Node n = load(cur);
    if (n.key == key) return n.value;
    cur = key < n.key ? n.left : n.right;
  }
  return std::nullopt;
}

void MvBstImpl::fence() {
  rt_.persistent_fence();
  maybe_finalize();
}

std::vector<uint64_t> MvBstImpl::keys_at(uint64_t root) {
  std::vector<uint64_t> out;
  std::function<void(uint64_t)> walk = [&](uint64_t off) {
    if (off == 0) return;
    Node n = load(off);
    walk(n.left);
    out.push_back(n.key);
    walk(n.right);
  };
  walk(root);
  return out;
}

std::vector<uint64_t> MvBstImpl::keys() {
  std::vector<uint64_t> out;
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    uint64_t root =
        writer_ ? cur_root_[p] : rt_.root_read(opt_.root_slot + p);
    auto part = keys_at(root);
    out.insert(out.end(), part.begin(), part.end());
  }
  if (opt_.partitions > 1) std::sort(out.begin(), out.end());
  return out;
}

std::vector<uint64_t> MvBstImpl::reachable_blocks() {
  std::set<uint64_t> s;
  std::function<void(uint64_t)> walk = [&](uint64_t off) {
    if (off == 0) return;
    s.insert(owning_block(off));
    Node n = load(off);
    walk(n.left);
    walk(n.right);
  };
  for (uint32_t p = 0; p < opt_.partitions; p++)
    walk(rt_.root_read(opt_.root_slot + p));
  return {s.begin(), s.end()};
}

void MvBstImpl::apply_logged(uint16_t opcode, const Bytes& params) {
  if (opcode == kOpVecInsert)
    vector_insert(decode_vec_params(params));
  else
    DataStructure::apply_logged(opcode, params);
}

// --- multi-version B+tree ------------------------------------------------
// Copy-on-write over whole-block nodes; deletes are lazy (no rebalance), so
// a version change touches exactly one root-to-leaf path.

MvBptImpl::MvBptImpl(FrontendRuntime& rt, uint32_t id, DsOptions opt, bool fresh,
                     bool writer)
    : TreeLike(rt, DsKind::MvBpt, id, opt),
      lay_(rt.geom().cfg.block_size),
      writer_(writer) {
  cur_root_.assign(opt_.partitions, 0);
  committed_.assign(opt_.partitions, 0);
  if (fresh) {
    for (uint32_t p = 0; p < opt_.partitions; p++) {
      ensure_lock(p);
      cur_root_[p] = committed_[p] = put_node(BptNode{});  // empty leaf
    }
    settle_creation(rt_, id_);
    for (uint32_t p = 0; p < opt_.partitions; p++)
      rt_.root_write(opt_.root_slot + p, cur_root_[p]);
    fresh_.clear();
  } else {
    for (uint32_t p = 0; p < opt_.partitions; p++)
      cur_root_[p] = committed_[p] = rt_.root_read(opt_.root_slot + p);
  }
}

BptNode MvBptImpl::load(uint64_t off) {
  return decode_bpt(lay_, rt_.gather(off, lay_.block, writer_));
}

void MvBptImpl::store(uint64_t off, const BptNode& n) {
  rt_.stage_write(off, encode_bpt(lay_, n));
}

uint64_t MvBptImpl::put_node(const BptNode& n) {
  uint64_t off = rt_.alloc_block();
  store(off, n);
  fresh_.insert(off);
  return off;
}

uint64_t MvBptImpl::modify(uint64_t off, const BptNode& n) {
  if (fresh_.count(off)) {
    store(off, n);
    return off;
  }
  replaced_.push_back(off);
  return put_node(n);
}

void MvBptImpl::retire(uint64_t off) {
  if (fresh_.erase(off))
    rt_.free_block(off);
  else
    replaced_.push_back(off);
}

MvBptImpl::Ins MvBptImpl::insert_rec(uint64_t off, uint64_t key, uint64_t value) {
  BptNode n = load(off);
  if (n.leaf) {
    auto it = std::lower_bound(n.keys.begin(), n.keys.end(), key);
    size_t pos = size_t(it - n.keys.begin());
    if (it != n.keys.end() && *it == key) {
      n.vals[pos] = value;
      return {modify(off, n)};
    }
    n.keys.insert(it, key);
    n.vals.insert(n.vals.begin() + long(pos), value);
    if (n.keys.size() <= lay_.leaf_fanout) return {modify(off, n)};
    size_t mid = n.keys.size() / 2;
    BptNode right;
    right.keys.assign(n.keys.begin() + long(mid), n.keys.end());
    right.vals.assign(n.vals.begin() + long(mid), n.vals.end());
    right.next = n.next;
    n.keys.resize(mid);
    n.vals.resize(mid);
    uint64_t rb = put_node(right);
    n.next = rb;
    return {modify(off, n), true, right.keys.front(), rb};
  }
  size_t idx = child_index(n.keys, key);
  Ins r = insert_rec(n.children[idx], key, value);
  n.children[idx] = r.node;
  if (r.split) {
    n.keys.insert(n.keys.begin() + long(idx), r.sep);
    n.children.insert(n.children.begin() + long(idx) + 1, r.right);
    if (n.keys.size() > lay_.int_fanout) {
      size_t mid = n.keys.size() / 2;
      uint64_t up = n.keys[mid];
      BptNode right;
      right.leaf = false;
      right.keys.assign(n.keys.begin() + long(mid) + 1, n.keys.end());
      right.children.assign(n.children.begin() + long(mid) + 1, n.children.end());
      n.keys.resize(mid);
      n.children.resize(mid + 1);
      uint64_t rb = put_node(right);
      return {modify(off, n), true, up, rb};
    }
  }
  return {modify(off, n)};
}

uint64_t MvBptImpl::erase_rec(uint64_t off, uint64_t key, bool* erased) {
  BptNode n = load(off);
  if (n.leaf) {
    auto it = std::lower_bound(n.keys.begin(), n.keys.end(), key);
    if (it == n.keys.end() || *it != key) return off;
    n.vals.erase(n.vals.begin() + (it - n.keys.begin()));
    n.keys.erase(it);
    *erased = true;
    return modify(off, n);
  }
  size_t idx = child_index(n.keys, key);
  uint64_t nc = erase_rec(n.children[idx], key, erased);
  if (!*erased) return off;
  n.children[idx] = nc;
  return modify(off, n);
}

void MvBptImpl::stage_root(uint32_t part) {
  rt_.stage_write_u64(backend::kOffRootRefs + 8ull * (opt_.root_slot + part),
                      cur_root_[part]);
}

void MvBptImpl::maybe_finalize() {
  if (rt_.pending_op_count() != 0) return;
  if (fresh_.empty() && replaced_.empty() && cur_root_ == committed_) return;
  rt_.wait_durable_opn(batch_last_opn_);
  committed_ = cur_root_;
  for (uint64_t b : replaced_) rt_.deferred_free_block(b, opt_.mv_free_delay);
  replaced_.clear();
  fresh_.clear();
}

void MvBptImpl::insert(uint64_t key, uint64_t value) {
  uint32_t part = route(key);
  ensure_lock(part);
  Ins r = insert_rec(cur_root_[part], key, value);
  if (r.split) {
    BptNode nr;
    nr.leaf = false;
    nr.keys = {r.sep};
    nr.children = {r.node, r.right};
    cur_root_[part] = put_node(nr);
  } else {
    cur_root_[part] = r.node;
  }
  stage_root(part);
  Bytes params;
  put_u64(params, key);
  put_u64(params, value);
  batch_last_opn_ = rt_.op_persist(kOpInsert, id_, params);
  maybe_finalize();
}

bool MvBptImpl::erase(uint64_t key) {
  uint32_t part = route(key);
  ensure_lock(part);
  bool erased = false;
  uint64_t nr = erase_rec(cur_root_[part], key, &erased);
  if (!erased) return false;
  cur_root_[part] = nr;
  stage_root(part);
  Bytes params;
  put_u64(params, key);
  batch_last_opn_ = rt_.op_persist(kOpErase, id_, params);
  maybe_finalize();
  return true;
}

void MvBptImpl::vector_insert(
    const std::vector<std::pair<uint64_t, uint64_t>>& kvs) {
  check_sorted(kvs);
  if (kvs.empty()) return;
  for (auto& [k, v] : kvs) {
    uint32_t part = route(k);
    ensure_lock(part);
    Ins r = insert_rec(cur_root_[part], k, v);
    if (r.split) {
      BptNode nr;
      nr.leaf = false;
      nr.keys = {r.sep};
      nr.children = {r.node, r.right};
      cur_root_[part] = put_node(nr);
    } else {
      cur_root_[part] = r.node;
    }
    stage_root(part);
  }
  batch_last_opn_ = rt_.op_persist(kOpVecInsert, id_, encode_vec_params(kvs));
  maybe_finalize();
}

std::optional<uint64_t> MvBptImpl::find(uint64_t key) {
  uint32_t part = route(key);
  uint64_t off = writer_ ? cur_root_[part] : rt_.root_read(opt_.root_slot + part);
  if (off == 0) return std::nullopt;
  for (;;) {
    BptNode n = load(off);
    if (n.leaf) {
      auto it = std::lower_bound(n.keys.begin(), n.keys.end(), key);
      if (it != n.keys.end() && *it == key)
        return n.vals[size_t(it - n.keys.begin())];
      return std::nullopt;
    }
    off = n.children[child_index(n.keys, key)];
  }
}

void MvBptImpl::fence() {
  rt_.persistent_fence();
  maybe_finalize();
}

void MvBptImpl::collect(uint64_t off, std::vector<uint64_t>* keys_out,
                        std::vector<uint64_t>* blocks_out) {
  if (off == 0) return;
  BptNode n = load(off);
  if (blocks_out) blocks_out->push_back(owning_block(off));
  if (n.leaf) {
    if (keys_out) keys_out->insert(keys_out->end(), n.keys.begin(), n.keys.end());
    return;
  }
  for (uint64_t c : n.children) collect(c, keys_out, blocks_out);
}

std::vector<uint64_t> MvBptImpl::keys_at(uint64_t root) {
  std::vector<uint64_t> out;
  collect(root, &out, nullptr);
  return out;
}

std::vector<uint64_t> MvBptImpl::keys() {
  std::vector<uint64_t> out;
  for (uint32_t p = 0; p < opt_.partitions; p++) {
    uint64_t root = writer_ ? cur_root_[p] : rt_.root_read(opt_.root_slot + p);
    collect(root, &out, nullptr);
  }
  if (opt_.partitions > 1) std::sort(out.begin(), out.end());
  return out;
}

std::vector<uint64_t> MvBptImpl::reachable_blocks() {
  std::vector<uint64_t> out;
  for (uint32_t p = 0; p < opt_.partitions; p++)
    collect(rt_.root_read(opt_.root_slot + p), nullptr, &out);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void MvBptImpl::apply_logged(uint16_t opcode, const Bytes& params) {
  if (opcode == kOpVecInsert)
    vector_insert(decode_vec_params(params));
  else
    DataStructure::apply_logged(opcode, params);
}

}  // namespace nvf::ds::impl
