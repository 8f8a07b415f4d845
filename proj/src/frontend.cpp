#include "nvf/fe/runtime.hpp"

#include <algorithm>
#include <cstring>

#include "nvf/crc32c.hpp"

namespace nvf::fe {

using namespace nvf::backend;
using sim::Channel;

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::Naive: return "naive";
    case Mode::R: return "replay";
    case Mode::RC: return "replay+cache";
    case Mode::RCB: return "replay+cache+batch";
  }
  return "?";
}

FrontendRuntime::FrontendRuntime(sim::Fabric& fab, sim::NodeId self, sim::NodeId be,
                                 uint32_t desc, FrontendConfig cfg)
    : fab_(fab),
      self_(self),
      be_(be),
      desc_(desc),
      cfg_(cfg),
      cache_(cached() ? cfg.cache_capacity : 0, cfg.rr_set_size,
             cfg.cache_seed ^ (uint64_t(self) << 32)),
      slab_(
          cfg.slab_size, cfg.reclaim_threshold,
          [this](uint32_t bytes) {
            uint32_t blocks =
                (bytes + g_.cfg.block_size - 1) / g_.cfg.block_size;
            if (blocks > 30)
              throw std::invalid_argument("allocation above mailbox block limit");
            Bytes r = mailbox_call(kMailMalloc, {blocks, blocks > 1 ? 1ull : 0ull});
            return load_u64(r.data() + 16);
          },
          [this](uint64_t base, uint32_t bytes) {
            uint32_t blocks =
                (bytes + g_.cfg.block_size - 1) / g_.cfg.block_size;
            for (uint32_t i = 0; i < blocks; i += 4) {
              std::vector<uint64_t> p{std::min(4u, blocks - i)};
              for (uint32_t j = i; j < std::min(i + 4, blocks); j++)
                p.push_back(base + uint64_t(j) * g_.cfg.block_size);
              mailbox_call(kMailFree, std::move(p));
            }
          }) {}

void FrontendRuntime::connect() {
  Bytes head = fab_.verb_read(self_, be_, 0, uint32_t(kOffDescTable), Channel::Meta);
  if (load_u64(head.data() + kOffMagic) != kMagic)
    throw std::runtime_error("back-end region not formatted");
  uint32_t ndesc = load_u32(head.data() + kOffNumDesc);
  Bytes descs = fab_.verb_read(self_, be_, kOffDescTable, ndesc * kDescSize,
                               Channel::Meta);
  Bytes naming = head;
  put_bytes(naming, descs);
  g_ = read_geometry(naming.data());
  const uint8_t* d = naming.data() + g_.desc_off(desc_);
  log_tail_ = load_u64(d + kDescLpn);
  oplog_tail_ = load_u64(d + kDescOpLogScan);
  next_opn_ = load_u64(d + kDescOpn) + 1;
  mail_seq_ = fab_.verb_atomic_read64(self_, be_, g_.mail_resp_off(desc_),
                                      Channel::Mailbox);
  writeset_.clear();
  flushed_overlay_.clear();
  op_buffer_.clear();
  curop_touched_.clear();
  cache_.clear();
}

// --- reads ---------------------------------------------------------------

Bytes FrontendRuntime::read_base(uint64_t addr, uint32_t len, bool cached_hint) {
  if (!(cached() && cached_hint && cfg_.cache_capacity > 0))
    return fab_.verb_read(self_, be_, addr, len, Channel::Data);
  Bytes out(len);
  uint64_t ps = cfg_.page_size;
  uint64_t first = addr / ps * ps;
  for (uint64_t p = first; p < addr + len; p += ps) {
    const Bytes* page = cache_.lookup(p);
    if (page) {
      hits_++;
    } else {
      misses_++;
      uint32_t plen = uint32_t(std::min<uint64_t>(ps, g_.total - p));
      Bytes fetched = fab_.verb_read(self_, be_, p, plen, Channel::Data);
      cache_.insert(p, std::move(fetched));
      page = cache_.lookup(p);
    }
    uint64_t lo = std::max(addr, p);
    uint64_t hi = std::min<uint64_t>(addr + len, p + page->size());
    std::memcpy(out.data() + (lo - addr), page->data() + (lo - p), hi - lo);
  }
  return out;
}

void FrontendRuntime::overlay_writeset(uint64_t addr, Bytes& out) const {
  uint64_t end = addr + out.size();
  for (const ExtentMap* m : {&flushed_overlay_, &writeset_}) {
    auto it = m->upper_bound(addr);
    if (it != m->begin()) --it;
    for (; it != m->end() && it->first < end; ++it) {
      uint64_t wlo = it->first, whi = it->first + it->second.bytes.size();
      uint64_t lo = std::max(addr, wlo), hi = std::min(end, whi);
      if (lo >= hi) continue;
      std::memcpy(out.data() + (lo - addr), it->second.bytes.data() + (lo - wlo),
                  hi - lo);
    }
  }
}

bool FrontendRuntime::fully_covered(uint64_t addr, uint32_t len) const {
  // True when the write set plus the flushed overlay together contain every
  // byte of [addr, addr+len); such a gather needs no remote read at all.
  uint64_t pos = addr, end = addr + len;
  while (pos < end) {
    uint64_t best = pos;
    for (const ExtentMap* m : {&flushed_overlay_, &writeset_}) {
      auto it = m->upper_bound(pos);
      if (it != m->begin()) {
        auto p = std::prev(it);
        uint64_t hi = p->first + p->second.bytes.size();
        if (p->first <= pos && hi > best) best = hi;
      }
    }
    if (best == pos) return false;
    pos = best;
  }
  return true;
}

Bytes FrontendRuntime::gather(uint64_t addr, uint32_t len, bool cached_hint) {
  if (logged() && fully_covered(addr, len)) {
    Bytes out(len, 0);
    overlay_writeset(addr, out);
    return out;
  }
  Bytes out = read_base(addr, len, cached_hint);
  if (logged()) overlay_writeset(addr, out);
  return out;
}

uint64_t FrontendRuntime::gather_u64(uint64_t addr, bool cached_hint) {
  return load_u64(gather(addr, 8, cached_hint).data());
}

// --- writes --------------------------------------------------------------

void FrontendRuntime::extent_put(ExtentMap& m, uint64_t addr, WriteExtent e) {
  uint64_t end = addr + e.bytes.size();
  auto it = m.lower_bound(addr);
  if (it != m.begin()) {
    auto prev = std::prev(it);
    uint64_t pend = prev->first + prev->second.bytes.size();
    if (pend > addr) {
      // Trim the previous extent's tail; a piece beyond our end survives.
      WriteExtent& pe = prev->second;
      if (pend > end) {
        WriteExtent tail;
        tail.bytes.assign(pe.bytes.begin() + (end - prev->first), pe.bytes.end());
        tail.opn = pe.opn;
        m.emplace(end, std::move(tail));
      }
      pe.bytes.resize(addr - prev->first);
      pe.oplog_ref.reset();
    }
  }
  while (it != m.end() && it->first < end) {
    uint64_t ihi = it->first + it->second.bytes.size();
    if (ihi > end) {
      WriteExtent tail;
      tail.bytes.assign(it->second.bytes.begin() + (end - it->first),
                        it->second.bytes.end());
      tail.opn = it->second.opn;
      m.erase(it);
      m.emplace(end, std::move(tail));
      break;
    }
    it = m.erase(it);
  }
  m.emplace(addr, std::move(e));
}

void FrontendRuntime::writeset_put(uint64_t addr, Bytes bytes,
                                   std::optional<uint64_t> ref) {
  WriteExtent e;
  e.bytes = std::move(bytes);
  e.oplog_ref = ref;
  extent_put(writeset_, addr, std::move(e));
}

void FrontendRuntime::retire_to_overlay(uint64_t opn) {
  for (auto& [addr, e] : writeset_) {
    WriteExtent f;
    f.bytes = e.bytes;
    f.opn = opn;
    extent_put(flushed_overlay_, addr, std::move(f));
  }
  writeset_.clear();
  if (flushed_overlay_.size() > 512) prune_overlay();
}

void FrontendRuntime::prune_overlay() {
  uint64_t durable = fab_.verb_atomic_read64(
      self_, be_, g_.desc_off(desc_) + kDescOpn, Channel::Meta);
  for (auto it = flushed_overlay_.begin(); it != flushed_overlay_.end();)
    it = it->second.opn <= durable ? flushed_overlay_.erase(it) : std::next(it);
}

void FrontendRuntime::stage_write(uint64_t addr, std::span<const uint8_t> data) {
  if (!logged()) {
    // No log, no replay: the write must be remotely durable and ordered by
    // itself, so each one pays a flush read after the write.
    fab_.verb_write(self_, be_, addr, data, Channel::Data);
    fab_.verb_read(self_, be_, addr, uint32_t(std::min<size_t>(8, data.size())),
                   Channel::Data);
    return;
  }
  writeset_put(addr, Bytes(data.begin(), data.end()), std::nullopt);
  if (cached()) cache_.update(addr, data, cfg_.page_size);
  curop_touched_.push_back(addr);
  staged_bytes_ += data.size() + 13;
}

void FrontendRuntime::stage_write_u64(uint64_t addr, uint64_t value) {
  stage_write(addr, to_bytes_u64(value));
}

// --- log rings -----------------------------------------------------------

uint64_t FrontendRuntime::ring_occupied(bool oplog) {
  uint64_t field = oplog ? kDescOpLogScan : kDescLpn;
  uint64_t len = oplog ? g_.cfg.oplog_area_len : g_.cfg.log_area_len;
  uint64_t tail = oplog ? oplog_tail_ : log_tail_;
  uint64_t head = fab_.verb_atomic_read64(self_, be_, g_.desc_off(desc_) + field,
                                          Channel::Meta);
  return (tail + len - head) % len;
}

void FrontendRuntime::wait_ring_space(uint64_t need, bool oplog) {
  uint64_t len = oplog ? g_.cfg.oplog_area_len : g_.cfg.log_area_len;
  if (need + 8 > len) throw std::runtime_error("record larger than log ring");
  while (len - ring_occupied(oplog) < need + 8)
    fab_.sched().sleep(fab_.latency().rtt_ns);
}

uint64_t FrontendRuntime::area_off(bool oplog) const {
  return oplog ? g_.oplog_off + uint64_t(desc_) * g_.cfg.oplog_area_len
               : g_.log_off + uint64_t(desc_) * g_.cfg.log_area_len;
}

void FrontendRuntime::write_record_bytes(uint64_t area, const Bytes& bytes,
                                         bool split_commit) {
  // The record plus its 4-byte zero terminator, durable at area + log_tail_.
  // split_commit publishes the trailing commit mark + checksum as a second
  // verb; otherwise chunks of at most the payload cap go out in order and
  // the record only becomes valid with the final chunk (it carries the crc).
  uint64_t base = area + log_tail_;
  Bytes body = bytes;
  put_u32(body, 0);
  if (split_commit) {
    uint64_t head = bytes.size() - 5;
    fab_.verb_write(self_, be_, base, std::span(body).subspan(0, head),
                    Channel::TxEntries);
    fab_.verb_write(self_, be_, base + head, std::span(body).subspan(head),
                    Channel::TxCommit);
  } else {
    for (uint64_t p = 0; p < body.size(); p += cfg_.verb_payload_cap) {
      uint64_t n = std::min<uint64_t>(cfg_.verb_payload_cap, body.size() - p);
      fab_.verb_write(self_, be_, base + p, std::span(body).subspan(p, n),
                      Channel::TxEntries);
    }
  }
  log_tail_ += bytes.size();
}

void FrontendRuntime::append_log_record(const TxRecord& rec, bool split_commit) {
  Bytes bytes = encode_tx_record(rec);
  uint64_t len = g_.cfg.log_area_len;
  uint64_t area = area_off(false);
  if (log_tail_ + bytes.size() + 4 > len) {
    // Wrap: wait for a full drain, put the record at offset 0, then publish
    // the wrap marker at the old tail so stale bytes are never reachable.
    while (ring_occupied(false) != 0) fab_.sched().sleep(fab_.latency().rtt_ns);
    uint64_t old_tail = log_tail_;
    log_tail_ = 0;
    write_record_bytes(area, bytes, split_commit);
    Bytes mark;
    put_u32(mark, kWrapMark);
    fab_.verb_write(self_, be_, area + old_tail, mark, Channel::TxEntries);
  } else {
    wait_ring_space(bytes.size() + 4, false);
    write_record_bytes(area, bytes, split_commit);
  }
}

uint64_t FrontendRuntime::append_oplog(const Bytes& entry) {
  uint64_t len = g_.cfg.oplog_area_len;
  uint64_t area = area_off(true);
  if (oplog_tail_ + entry.size() + 4 > len) {
    // Pending memory logs reference these entries; flush them out before any
    // entry can be overwritten, then wait for replay to cover the ring.
    flush_batch();
    while (ring_occupied(true) != 0) fab_.sched().sleep(fab_.latency().rtt_ns);
    uint64_t old_tail = oplog_tail_;
    oplog_tail_ = 0;
    Bytes body = entry;
    put_u16(body, 0);
    fab_.verb_write(self_, be_, area, body, Channel::OpLog);
    Bytes mark;
    put_u16(mark, kOpWrap);
    fab_.verb_write(self_, be_, area + old_tail, mark, Channel::OpLog);
    oplog_tail_ = entry.size();
    return area;
  }
  wait_ring_space(entry.size() + 4, true);
  uint64_t off = area + oplog_tail_;
  Bytes body = entry;
  put_u16(body, 0);
  fab_.verb_write(self_, be_, off, body, Channel::OpLog);
  oplog_tail_ += entry.size();
  return off;
}

// --- operations ----------------------------------------------------------

uint64_t FrontendRuntime::op_persist(uint16_t opcode, uint32_t ds_id,
                                     std::span<const uint8_t> params) {
  if (!logged()) {
    curop_touched_.clear();
    return 0;
  }
  uint64_t opn = next_opn_++;
  if (!batched()) {
    // Memory-log-only mode: one record per operation, entry verb plus a
    // separate commit verb.
    TxRecord rec;
    rec.covered_opn = opn;
    for (auto& [addr, e] : writeset_)
      rec.entries.push_back({0, addr, uint32_t(e.bytes.size()), e.bytes, 0});
    append_log_record(rec, /*split_commit=*/true);
    retire_to_overlay(opn);
    staged_bytes_ = 0;
    curop_touched_.clear();
    (void)opcode;
    (void)ds_id;
    return opn;
  }
  // Fast path: exactly one write verb makes the op durable. Re-executed ops
  // already have durable entries and skip the append.
  Bytes pbytes(params.begin(), params.end());
  if (!reexec_) {
    OpLogEntry e;
    e.opcode = opcode;
    e.ds_id = ds_id;
    e.opn = opn;
    e.params = pbytes;
    uint64_t entry_off = append_oplog(encode_oplog_entry(e));
    // Extents whose bytes are contained in the durable params can be flushed
    // as references instead of inline payloads.
    for (uint64_t addr : curop_touched_) {
      auto it = writeset_.find(addr);
      if (it == writeset_.end() || it->second.bytes.empty()) continue;
      const Bytes& b = it->second.bytes;
      auto pos = std::search(pbytes.begin(), pbytes.end(), b.begin(), b.end());
      if (pos != pbytes.end())
        it->second.oplog_ref =
            pack_oplog_ref(entry_off, uint16_t(pos - pbytes.begin()));
    }
  }
  curop_touched_.clear();
  op_buffer_.push_back({opcode, ds_id, opn, std::move(pbytes)});
  last_pending_opn_ = opn;
  if (!reexec_ &&
      (op_buffer_.size() >= cfg_.batch_size || staged_bytes_ >= cfg_.flush_bytes_cap))
    flush_batch();
  return opn;
}

void FrontendRuntime::flush_batch() {
  if (!batched() || (op_buffer_.empty() && writeset_.empty())) return;
  try {
    // Coalesced entries, address order. Oversized batches split into several
    // records; only the last one advances the covered OPN so a crash between
    // pieces keeps every pending op re-executable.
    uint64_t budget = g_.cfg.log_area_len / 2;
    auto it = writeset_.begin();
    while (true) {
      TxRecord rec;
      uint64_t sz = 21;
      while (it != writeset_.end()) {
        uint64_t esz = 13 + (it->second.oplog_ref ? 8 : it->second.bytes.size());
        if (sz + esz > budget && !rec.entries.empty()) break;
        if (it->second.oplog_ref)
          rec.entries.push_back({1, it->first, uint32_t(it->second.bytes.size()),
                                 {}, *it->second.oplog_ref});
        else
          rec.entries.push_back(
              {0, it->first, uint32_t(it->second.bytes.size()), it->second.bytes, 0});
        sz += esz;
        ++it;
      }
      bool last = it == writeset_.end();
      rec.covered_opn = last ? last_pending_opn_ : 0;
      if (!rec.entries.empty() || last) append_log_record(rec, false);
      if (last) break;
    }
    retire_to_overlay(last_pending_opn_);
    op_buffer_.clear();
    staged_bytes_ = 0;
  } catch (const sim::DestinationUnreachable&) {
    // Abort: drop cached pages, keep the buffers for a retry after recovery.
    cache_.clear();
    throw;
  }
}

void FrontendRuntime::persistent_fence() { flush_batch(); }

uint64_t FrontendRuntime::durable_opn() {
  return fab_.verb_atomic_read64(self_, be_, g_.desc_off(desc_) + kDescOpn,
                                 Channel::Meta);
}

void FrontendRuntime::wait_durable_opn(uint64_t opn) {
  while (durable_opn() < opn) fab_.sched().sleep(fab_.latency().rtt_ns);
}

// --- mailbox -------------------------------------------------------------

Bytes FrontendRuntime::mailbox_call(uint32_t opcode, std::vector<uint64_t> p) {
  uint64_t seq = ++mail_seq_;
  Bytes req(kMailReqSize, 0);
  store_u64(req.data(), seq);
  store_u32(req.data() + 8, opcode);
  p.resize(5, 0);
  for (int i = 0; i < 5; i++) store_u64(req.data() + 16 + 8 * i, p[i]);
  store_u32(req.data() + 56, crc32c({req.data(), 56}));
  fab_.verb_write(self_, be_, g_.mail_req_off(desc_), req, Channel::Mailbox);
  for (;;) {
    Bytes resp = fab_.verb_read(self_, be_, g_.mail_resp_off(desc_), kMailRespSize,
                                Channel::Mailbox);
    if (load_u64(resp.data()) == seq) {
      uint32_t status = load_u32(resp.data() + 8);
      if (status == kMailStatusOom) throw AllocatorOom();
      if (status == kMailStatusBadRequest)
        throw std::logic_error("mailbox bad request");
      return resp;
    }
    fab_.sched().sleep(1000);
  }
}

uint64_t FrontendRuntime::alloc(uint32_t size) { return slab_.alloc(size); }
void FrontendRuntime::free(uint64_t off, uint32_t size) { slab_.free(off, size); }

uint64_t FrontendRuntime::alloc_block() {
  Bytes r = mailbox_call(kMailMalloc, {1, 0});
  return load_u64(r.data() + 16);
}

void FrontendRuntime::free_block(uint64_t off) { mailbox_call(kMailFree, {1, off}); }

void FrontendRuntime::deferred_free_block(uint64_t off, sim::SimTime delay_ns) {
  mailbox_call(kMailDeferredFree, {delay_ns, 1, off});
}

// --- naming area ---------------------------------------------------------

uint64_t FrontendRuntime::root_read(uint32_t slot) {
  return fab_.verb_atomic_read64(self_, be_, kOffRootRefs + 8ull * slot,
                                 Channel::Meta);
}

bool FrontendRuntime::root_cas(uint32_t slot, uint64_t expected, uint64_t desired) {
  return fab_.verb_cas64(self_, be_, kOffRootRefs + 8ull * slot, expected, desired,
                         Channel::Meta) == expected;
}

void FrontendRuntime::root_write(uint32_t slot, uint64_t value) {
  fab_.verb_write(self_, be_, kOffRootRefs + 8ull * slot, to_bytes_u64(value),
                  Channel::Meta);
}

void FrontendRuntime::catalog_write(uint32_t slot, std::span<const uint8_t> entry32) {
  fab_.verb_write(self_, be_, kOffCatalog + uint64_t(slot) * kCatalogEntrySize,
                  entry32, Channel::Meta);
}

Bytes FrontendRuntime::catalog_read(uint32_t slot) {
  return fab_.verb_read(self_, be_, kOffCatalog + uint64_t(slot) * kCatalogEntrySize,
                        kCatalogEntrySize, Channel::Meta);
}

// --- locks ---------------------------------------------------------------

void FrontendRuntime::lock_journal_write(uint32_t slot, uint32_t intent) {
  Bytes rec(kLockJournalEntrySize, 0);
  store_u64(rec.data(), lock_owner_tag());
  store_u32(rec.data() + 8, intent);
  store_u32(rec.data() + 12, ++journal_seq_);
  store_u32(rec.data() + 16, crc32c({rec.data(), 16}));
  fab_.verb_write(self_, be_,
                  kOffLockJournal + uint64_t(slot) * kLockJournalEntrySize, rec,
                  Channel::Lock);
}

void FrontendRuntime::writer_lock(uint32_t slot) {
  if (held_locks_.count(slot)) throw std::logic_error("re-entrant lock");
  uint64_t addr = kOffLockWords + 8ull * slot;
  sim::SimTime backoff = 1000;
  while (fab_.verb_cas64(self_, be_, addr, 0, lock_owner_tag(), Channel::Lock) != 0) {
    fab_.sched().sleep(backoff);
    backoff = std::min<sim::SimTime>(backoff * 2, 16000);
  }
  // Durable intent before any log append under this lock, then the LPN.
  lock_journal_write(slot, kIntentAcquire);
  fab_.verb_atomic_read64(self_, be_, g_.desc_off(desc_) + kDescLpn, Channel::Meta);
  held_locks_.insert(slot);
}

void FrontendRuntime::writer_unlock(uint32_t slot) {
  if (!held_locks_.count(slot)) throw NotOwner();
  persistent_fence();  // no batching across lock sessions
  lock_journal_write(slot, kIntentRelease);
  fab_.verb_write(self_, be_, kOffLockWords + 8ull * slot, to_bytes_u64(0),
                  Channel::Lock);
  held_locks_.erase(slot);
}

uint64_t FrontendRuntime::reader_lock() {
  sim::SimTime backoff = 1000;
  for (;;) {
    uint64_t sn = fab_.verb_atomic_read64(self_, be_, kOffSeqno, Channel::Meta);
    if (sn % 2 == 0) return sn;
    fab_.sched().sleep(backoff);
    backoff = std::min<sim::SimTime>(backoff * 2, 16000);
  }
}

ReadResult FrontendRuntime::reader_unlock(uint64_t start_sn) {
  uint64_t sn = fab_.verb_atomic_read64(self_, be_, kOffSeqno, Channel::Meta);
  return sn == start_sn ? ReadResult::Consistent : ReadResult::Retry;
}

size_t FrontendRuntime::adopt_orphan_locks() {
  size_t adopted = 0;
  for (uint32_t slot = 0; slot < kLockSlots; slot++) {
    if (held_locks_.count(slot)) continue;
    uint64_t word = fab_.verb_atomic_read64(self_, be_, kOffLockWords + 8ull * slot,
                                            Channel::Lock);
    if (word == lock_owner_tag()) {
      held_locks_.insert(slot);
      adopted++;
    }
  }
  return adopted;
}

}  // namespace nvf::fe
