#include "nvf/backend/node.hpp"

#include <algorithm>
#include <cassert>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "nvf/crc32c.hpp"

namespace nvf::backend {

using sim::Channel;

BackendNode::BackendNode(sim::Fabric& fab, sim::NodeId self)
    : fab_(fab), self_(self), g_(read_geometry(fab.region_data(self))) {}

void BackendNode::format(sim::Fabric& fab, sim::NodeId node, const RegionConfig& cfg) {
  RegionGeometry g = compute_geometry(cfg);
  if (fab.region_capacity(node) < g.total)
    throw std::runtime_error("region too small for requested geometry");
  format_region(fab.region_data(node), g);
}

void BackendNode::start() {
  g_ = read_geometry(mem());
  last_req_seq_.assign(g_.cfg.num_frontends, 0);
  for (uint32_t i = 0; i < g_.cfg.num_frontends; i++)
    last_req_seq_[i] = load_u64(mem() + g_.mail_resp_off(i));
  first_free_hint_ = 0;
  active_deferred_.clear();
  for (uint32_t s = 0; s < g_.cfg.deferred_slots; s++) {
    if (load_u64(mem() + g_.deferred_off + uint64_t(s) * kDeferredSlotSize + 8) != 0)
      active_deferred_.push_back(s);
  }
  fab_.set_write_hook(self_, [this](uint64_t addr, std::span<const uint8_t> payload) {
    if (mirror_ && addr < g_.data_off) replicate(addr, payload.size());
  });
}

void BackendNode::attach_mirror(MirrorConfig m) { mirror_ = m; }

void BackendNode::replicate(uint64_t off, uint64_t len) {
  if (!mirror_) return;
  try {
    fab_.verb_write(self_, mirror_->node, off, {mem() + off, len},
                    Channel::Replication);
  } catch (const sim::DestinationUnreachable&) {
    // Mirror crash (Case 5): drop it from the replication group and continue.
    mirror_.reset();
  }
}

void BackendNode::replicate_data(uint64_t off, uint64_t len) {
  if (mirror_ && !mirror_->replays) replicate(off, len);
}

void BackendNode::run_service_task() {
  auto& sched = fab_.sched();
  while (!sched.stop_requested() && fab_.alive(self_)) {
    service_once();
    sched.sleep(poll_interval_ns_);
  }
}

void BackendNode::service_once() {
  handle_mailboxes();
  replay_step();
  process_deferred();
}

// --- replay -------------------------------------------------------------

uint64_t BackendNode::seqno() const { return load_u64(mem() + kOffSeqno); }

uint64_t BackendNode::lpn(uint32_t desc) const {
  return load_u64(mem() + g_.desc_off(desc) + kDescLpn);
}

uint64_t BackendNode::opn(uint32_t desc) const {
  return load_u64(mem() + g_.desc_off(desc) + kDescOpn);
}

void BackendNode::bump_seqno() {
  store_u64(mem() + kOffSeqno, seqno() + 1);
  replicate_data(kOffSeqno, 8);
}

size_t BackendNode::replay_step() {
  size_t applied = 0;
  for (uint32_t d = 0; d < g_.cfg.num_frontends; d++) {
    uint8_t* desc = mem() + g_.desc_off(d);
    uint64_t log_off = load_u64(desc + kDescLogOff);
    uint64_t log_len = load_u64(desc + kDescLogLen);
    for (;;) {
      uint64_t pos = load_u64(desc + kDescLpn);
      std::span<const uint8_t> area{mem() + log_off + pos, log_len - pos};
      TxRecord rec;
      uint32_t size = 0;
      RecordStatus st = parse_tx_record(area, &rec, &size);
      if (st == RecordStatus::Wrap) {
        store_u64(desc + kDescLpn, 0);
        replicate_data(g_.desc_off(d) + kDescLpn, 8);
        continue;
      }
      if (st != RecordStatus::Valid) break;  // Empty, or Torn awaiting recovery

      bump_seqno();  // SN odd: record application in progress
      for (const auto& e : rec.entries) {
        fab_.sched().sleep(fab_.latency().nvm_write_ns);
        // Writable through the log: the data area, plus the root-ref slots so
        // version publication can ride in the same record as the version
        // bytes (applied last within the record, in address order the roots
        // come first -- but a record is re-applied from scratch if interrupted,
        // so ordering inside one record is not observable after recovery).
        bool in_data = e.address >= g_.data_off && e.address + e.length <= g_.total;
        bool in_roots = e.address >= kOffRootRefs &&
                        e.address + e.length <= kOffRootRefs + 8ull * kRootSlots;
        if (!in_data && !in_roots)
          throw std::logic_error("memory log entry outside writable areas");
        const uint8_t* src;
        if (e.flag == 0) {
          src = e.payload.data();
        } else {
          uint64_t entry_off = oplog_ref_entry(e.ref);
          src = mem() + entry_off + 16 + oplog_ref_param(e.ref);
        }
        std::memcpy(mem() + e.address, src, e.length);
        replicate_data(e.address, e.length);
      }
      bump_seqno();  // SN even: idle

      store_u64(desc + kDescLpn, pos + size);
      if (rec.covered_opn > load_u64(desc + kDescOpn)) {
        store_u64(desc + kDescOpn, rec.covered_opn);
        advance_oplog_scan(d, rec.covered_opn);
      }
      replicate_data(g_.desc_off(d), kDescSize);
      applied++;
      work_units_++;
    }
  }
  return applied;
}

void BackendNode::advance_oplog_scan(uint32_t desc, uint64_t covered_opn) {
  uint8_t* d = mem() + g_.desc_off(desc);
  uint64_t off = load_u64(d + kDescOpLogOff);
  uint64_t len = load_u64(d + kDescOpLogLen);
  uint64_t pos = load_u64(d + kDescOpLogScan);
  for (;;) {
    OpLogEntry e;
    uint32_t size = 0;
    RecordStatus st = parse_oplog_entry({mem() + off + pos, len - pos}, &e, &size);
    if (st == RecordStatus::Wrap) {
      pos = 0;
      continue;
    }
    if (st != RecordStatus::Valid || e.opn > covered_opn) break;
    pos += size;
  }
  store_u64(d + kDescOpLogScan, pos);
}

TailState BackendNode::validate_last_tx(uint32_t desc) {
  const uint8_t* d = mem() + g_.desc_off(desc);
  uint64_t off = load_u64(d + kDescLogOff);
  uint64_t len = load_u64(d + kDescLogLen);
  uint64_t pos = load_u64(d + kDescLpn);
  bool wrapped = false, any = false;
  for (;;) {
    uint32_t size = 0;
    RecordStatus st = parse_tx_record({mem() + off + pos, len - pos}, nullptr, &size);
    switch (st) {
      case RecordStatus::Valid:
        any = true;
        pos += size;
        break;
      case RecordStatus::Wrap:
        if (wrapped) return any ? TailState::Consistent : TailState::Empty;
        wrapped = true;
        pos = 0;
        break;
      case RecordStatus::Empty:
        return any ? TailState::Consistent : TailState::Empty;
      case RecordStatus::Torn:
        return TailState::Inconsistent;
    }
  }
}

void BackendNode::truncate_torn_tails(uint32_t desc) {
  uint8_t* d = mem() + g_.desc_off(desc);
  // Memory log: after replay, LPN points at Empty or the torn tail.
  {
    uint64_t off = load_u64(d + kDescLogOff);
    uint64_t len = load_u64(d + kDescLogLen);
    uint64_t pos = load_u64(d + kDescLpn);
    bool wrapped = false;
    for (;;) {
      uint32_t size = 0;
      RecordStatus st = parse_tx_record({mem() + off + pos, len - pos}, nullptr, &size);
      if (st == RecordStatus::Wrap && !wrapped) {
        wrapped = true;
        pos = 0;
        continue;
      }
      if (st == RecordStatus::Torn) {
        std::memset(mem() + off + pos, 0, len - pos);
        replicate(off + pos, len - pos);
      }
      break;
    }
  }
  // Operation log: walk past valid pending entries, zero a torn suffix.
  {
    uint64_t off = load_u64(d + kDescOpLogOff);
    uint64_t len = load_u64(d + kDescOpLogLen);
    uint64_t pos = load_u64(d + kDescOpLogScan);
    bool wrapped = false;
    for (;;) {
      uint32_t size = 0;
      RecordStatus st = parse_oplog_entry({mem() + off + pos, len - pos}, nullptr, &size);
      if (st == RecordStatus::Valid) {
        pos += size;
        continue;
      }
      if (st == RecordStatus::Wrap && !wrapped) {
        wrapped = true;
        pos = 0;
        continue;
      }
      if (st == RecordStatus::Torn) {
        std::memset(mem() + off + pos, 0, len - pos);
        replicate(off + pos, len - pos);
      }
      break;
    }
  }
}

// --- allocator ----------------------------------------------------------

bool BackendNode::block_allocated(uint64_t block_off) const {
  uint64_t idx = g_.block_index(block_off);
  return (mem()[g_.bitmap_off + idx / 8] >> (idx % 8)) & 1;
}

uint8_t BackendNode::block_owner(uint64_t block_off) const {
  return mem()[g_.owner_off + g_.block_index(block_off)];
}

void BackendNode::set_block_owner(uint64_t block_off, uint8_t owner) {
  uint64_t idx = g_.block_index(block_off);
  mem()[g_.owner_off + idx] = owner;
  replicate(g_.owner_off + idx, 1);
}

uint64_t BackendNode::allocated_count() const {
  uint64_t n = 0;
  for (uint64_t i = 0; i < g_.cfg.n_blocks; i++)
    n += (mem()[g_.bitmap_off + i / 8] >> (i % 8)) & 1;
  return n;
}

std::vector<uint64_t> BackendNode::alloc_blocks(uint32_t count, bool contiguous,
                                                uint8_t owner) {
  std::vector<uint64_t> out;
  const uint64_t n = g_.cfg.n_blocks;
  auto bit = [&](uint64_t i) { return (mem()[g_.bitmap_off + i / 8] >> (i % 8)) & 1; };
  if (contiguous) {
    uint64_t run = 0, start = 0;
    for (uint64_t i = 0; i < n; i++) {
      if (!bit(i)) {
        if (run == 0) start = i;
        if (++run == count) {
          for (uint64_t j = start; j < start + count; j++) out.push_back(g_.block_off(j));
          break;
        }
      } else {
        run = 0;
      }
    }
  } else {
    for (uint64_t i = first_free_hint_; i < n && out.size() < count; i++)
      if (!bit(i)) out.push_back(g_.block_off(i));
  }
  if (out.size() < count) return {};  // out of memory; no state change
  for (uint64_t off : out) {
    uint64_t idx = g_.block_index(off);
    mem()[g_.bitmap_off + idx / 8] |= uint8_t(1u << (idx % 8));
    mem()[g_.owner_off + idx] = owner;
    replicate(g_.bitmap_off + idx / 8, 1);
    replicate(g_.owner_off + idx, 1);
  }
  if (!contiguous) first_free_hint_ = g_.block_index(out.front());
  return out;
}

uint32_t BackendNode::free_blocks(const std::vector<uint64_t>& offs) {
  uint32_t double_frees = 0;
  for (uint64_t off : offs) {
    uint64_t idx = g_.block_index(off);
    if (!block_allocated(off)) {
      double_frees++;  // signaled and ignored: the bit is already clear
      continue;
    }
    mem()[g_.bitmap_off + idx / 8] &= uint8_t(~(1u << (idx % 8)));
    mem()[g_.owner_off + idx] = 0;
    replicate(g_.bitmap_off + idx / 8, 1);
    replicate(g_.owner_off + idx, 1);
    first_free_hint_ = std::min(first_free_hint_, idx);
  }
  return double_frees;
}

void BackendNode::clear_block(uint64_t block_off) {
  free_blocks({block_off});
}

void BackendNode::deferred_free(uint64_t block_off, sim::SimTime delay_ns) {
  if (delay_ns == 0) {
    free_blocks({block_off});
    return;
  }
  for (uint32_t s = 0; s < g_.cfg.deferred_slots; s++) {
    uint8_t* slot = mem() + g_.deferred_off + uint64_t(s) * kDeferredSlotSize;
    if (load_u64(slot + 8) == 0) {
      store_u64(slot, fab_.now() + delay_ns);
      store_u64(slot + 8, block_off);
      replicate(g_.deferred_off + uint64_t(s) * kDeferredSlotSize, kDeferredSlotSize);
      active_deferred_.push_back(s);
      return;
    }
  }
  // Queue exhausted: fall back to immediate reclamation.
  free_blocks({block_off});
}

void BackendNode::process_deferred() {
  for (size_t i = 0; i < active_deferred_.size();) {
    uint32_t s = active_deferred_[i];
    uint8_t* slot = mem() + g_.deferred_off + uint64_t(s) * kDeferredSlotSize;
    uint64_t due = load_u64(slot);
    uint64_t block = load_u64(slot + 8);
    if (block != 0 && due <= fab_.now()) {
      free_blocks({block});
      store_u64(slot, 0);
      store_u64(slot + 8, 0);
      replicate(g_.deferred_off + uint64_t(s) * kDeferredSlotSize, kDeferredSlotSize);
      active_deferred_[i] = active_deferred_.back();
      active_deferred_.pop_back();
    } else {
      i++;
    }
  }
}

std::vector<uint64_t> BackendNode::deferred_pending() const {
  std::vector<uint64_t> out;
  for (uint32_t s = 0; s < g_.cfg.deferred_slots; s++) {
    uint64_t block = load_u64(mem() + g_.deferred_off + uint64_t(s) * kDeferredSlotSize + 8);
    if (block != 0) out.push_back(block);
  }
  return out;
}

// --- mailbox ------------------------------------------------------------

void BackendNode::handle_mailboxes() {
  for (uint32_t d = 0; d < g_.cfg.num_frontends; d++) handle_request(d);
}

void BackendNode::handle_request(uint32_t d) {
  uint8_t* req = mem() + g_.mail_req_off(d);
  uint64_t seq = load_u64(req);
  if (seq == 0 || seq == last_req_seq_[d]) return;
  if (crc32c({req, 56}) != load_u32(req + 56)) return;  // torn request write
  uint32_t opcode = load_u32(req + 8);
  uint64_t p[5];
  for (int i = 0; i < 5; i++) p[i] = load_u64(req + 16 + 8 * i);

  uint8_t* resp = mem() + g_.mail_resp_off(d);
  std::memset(resp, 0, kMailRespSize);
  uint32_t status = kMailStatusOk;
  uint32_t count = 0;
  auto put_data = [&](uint32_t i, uint64_t v) { store_u64(resp + 16 + 8 * i, v); };

  switch (opcode) {
    case kMailMalloc: {
      uint32_t want = uint32_t(std::min<uint64_t>(p[0], 30));
      auto blocks = alloc_blocks(want, p[1] != 0, uint8_t(d + 1));
      if (blocks.empty() && want > 0) {
        status = kMailStatusOom;
      } else {
        count = uint32_t(blocks.size());
        for (uint32_t i = 0; i < count; i++) put_data(i, blocks[i]);
      }
      break;
    }
    case kMailFree: {
      uint32_t n = uint32_t(std::min<uint64_t>(p[0], 4));
      std::vector<uint64_t> offs(p + 1, p + 1 + n);
      if (free_blocks(offs) > 0) status = kMailStatusDoubleFree;
      break;
    }
    case kMailDeferredFree: {
      uint32_t n = uint32_t(std::min<uint64_t>(p[1], 3));
      for (uint32_t i = 0; i < n; i++) deferred_free(p[2 + i], p[0]);
      break;
    }
    case kMailRecoveryStatus: {
      replay_step();
      put_data(0, uint64_t(validate_last_tx(d)));
      put_data(1, lpn(d));
      put_data(2, opn(d));
      put_data(3, load_u64(mem() + g_.desc_off(d) + kDescOpLogScan));
      count = 4;
      break;
    }
    case kMailTruncateTail: {
      replay_step();
      truncate_torn_tails(d);
      break;
    }
    default:
      status = kMailStatusBadRequest;
  }
  store_u64(resp, seq);
  store_u32(resp + 8, status);
  store_u32(resp + 12, count);
  replicate(g_.mail_resp_off(d), kMailRespSize);
  last_req_seq_[d] = seq;
  work_units_++;
}

// --- snapshots ----------------------------------------------------------

void save_region(const sim::Fabric& fab, sim::NodeId node, const std::string& path) {
  Bytes b = fab.region_snapshot(node);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path);
  f.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

void load_region(sim::Fabric& fab, sim::NodeId node, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  Bytes b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  fab.region_restore(node, b);
}

}  // namespace nvf::backend
