#include "nvf/backend/layout.hpp"

#include <cstring>
#include <stdexcept>

#include "nvf/crc32c.hpp"

namespace nvf::backend {

Bytes encode_tx_record(const TxRecord& rec) {
  Bytes b;
  put_u32(b, 0);  // total_size, patched below
  put_u32(b, uint32_t(rec.entries.size()));
  put_u64(b, rec.covered_opn);
  for (const auto& e : rec.entries) {
    put_u8(b, e.flag);
    put_u64(b, e.address);
    put_u32(b, e.length);
    if (e.flag == 0) {
      if (e.payload.size() != e.length)
        throw std::logic_error("inline entry payload/length mismatch");
      put_bytes(b, e.payload);
    } else {
      put_u64(b, e.ref);
    }
  }
  put_u8(b, kCommitMark);
  store_u32(b.data(), uint32_t(b.size() + 4));
  put_u32(b, crc32c({b.data(), b.size()}));
  return b;
}

RecordStatus parse_tx_record(std::span<const uint8_t> area, TxRecord* out,
                             uint32_t* size) {
  if (area.size() < 4) return RecordStatus::Torn;
  uint32_t total = load_u32(area.data());
  if (total == 0) return RecordStatus::Empty;
  if (total == kWrapMark) {
    if (size) *size = 4;
    return RecordStatus::Wrap;
  }
  if (total < 21 || total > area.size()) return RecordStatus::Torn;
  uint32_t stored = load_u32(area.data() + total - 4);
  if (crc32c(area.subspan(0, total - 4)) != stored) return RecordStatus::Torn;
  if (area[total - 5] != kCommitMark) return RecordStatus::Torn;
  if (size) *size = total;
  if (!out) return RecordStatus::Valid;

  out->entries.clear();
  uint32_t count = load_u32(area.data() + 4);
  out->covered_opn = load_u64(area.data() + 8);
  size_t p = 16;
  for (uint32_t i = 0; i < count; i++) {
    if (p + 13 > total - 5) return RecordStatus::Torn;
    MemoryLogEntry e;
    e.flag = area[p];
    e.address = load_u64(area.data() + p + 1);
    e.length = load_u32(area.data() + p + 9);
    p += 13;
    size_t body = e.flag == 0 ? e.length : 8;
    if (p + body > total - 5) return RecordStatus::Torn;
    if (e.flag == 0)
      e.payload.assign(area.begin() + p, area.begin() + p + body);
    else
      e.ref = load_u64(area.data() + p);
    p += body;
    out->entries.push_back(std::move(e));
  }
  if (p != total - 5) return RecordStatus::Torn;
  return RecordStatus::Valid;
}

Bytes encode_oplog_entry(const OpLogEntry& e) {
  Bytes b;
  put_u16(b, e.opcode);
  put_u16(b, uint16_t(e.params.size()));
  put_u32(b, e.ds_id);
  put_u64(b, e.opn);
  put_bytes(b, e.params);
  put_u32(b, crc32c({b.data(), b.size()}));
  return b;
}

RecordStatus parse_oplog_entry(std::span<const uint8_t> area, OpLogEntry* out,
                               uint32_t* size) {
  if (area.size() < 4) return RecordStatus::Torn;
  uint16_t opcode = load_u16(area.data());
  if (opcode == 0) return RecordStatus::Empty;
  if (opcode == kOpWrap) {
    if (size) *size = 2;
    return RecordStatus::Wrap;
  }
  if (area.size() < 16) return RecordStatus::Torn;
  uint16_t plen = load_u16(area.data() + 2);
  uint32_t total = 16 + uint32_t(plen) + 4;
  if (total > area.size()) return RecordStatus::Torn;
  uint32_t stored = load_u32(area.data() + total - 4);
  if (crc32c(area.subspan(0, total - 4)) != stored) return RecordStatus::Torn;
  if (size) *size = total;
  if (out) {
    out->opcode = opcode;
    out->ds_id = load_u32(area.data() + 4);
    out->opn = load_u64(area.data() + 8);
    out->params.assign(area.begin() + 16, area.begin() + 16 + plen);
  }
  return RecordStatus::Valid;
}

RegionGeometry compute_geometry(const RegionConfig& cfg) {
  RegionGeometry g;
  g.cfg = cfg;
  uint64_t p = kOffDescTable + uint64_t(cfg.num_frontends) * kDescSize;
  g.mailbox_off = p;
  p += uint64_t(cfg.num_frontends) * (kMailReqSize + kMailRespSize);
  g.log_off = p;
  p += uint64_t(cfg.num_frontends) * cfg.log_area_len;
  g.oplog_off = p;
  p += uint64_t(cfg.num_frontends) * cfg.oplog_area_len;
  g.bitmap_off = p;
  p += (cfg.n_blocks + 7) / 8;
  g.owner_off = p;
  p += cfg.n_blocks;
  g.deferred_off = (p + 7) & ~7ull;
  p = g.deferred_off + cfg.deferred_slots * kDeferredSlotSize;
  g.data_off = (p + cfg.block_size - 1) / cfg.block_size * cfg.block_size;
  g.data_len = cfg.n_blocks * uint64_t(cfg.block_size);
  g.total = g.data_off + g.data_len;
  return g;
}

void format_region(uint8_t* r, const RegionGeometry& g) {
  store_u64(r + kOffMagic, kMagic);
  store_u32(r + kOffVersion, kLayoutVersion);
  store_u32(r + kOffBlockSize, g.cfg.block_size);
  store_u64(r + kOffCapacity, g.total);
  store_u64(r + kOffDataOff, g.data_off);
  store_u64(r + kOffDataLen, g.data_len);
  store_u64(r + kOffBitmapOff, g.bitmap_off);
  store_u64(r + kOffNumBlocks, g.cfg.n_blocks);
  store_u64(r + kOffSeqno, 0);
  store_u64(r + kOffOwnerMap, g.owner_off);
  store_u64(r + kOffDeferredOff, g.deferred_off);
  store_u64(r + kOffDeferredCap, g.cfg.deferred_slots);
  store_u32(r + kOffNumDesc, g.cfg.num_frontends);
  for (uint32_t i = 0; i < g.cfg.num_frontends; i++) {
    uint8_t* d = r + g.desc_off(i);
    store_u64(d + kDescLogOff, g.log_off + uint64_t(i) * g.cfg.log_area_len);
    store_u64(d + kDescLogLen, g.cfg.log_area_len);
    store_u64(d + kDescOpLogOff, g.oplog_off + uint64_t(i) * g.cfg.oplog_area_len);
    store_u64(d + kDescOpLogLen, g.cfg.oplog_area_len);
    store_u64(d + kDescLpn, 0);
    store_u64(d + kDescOpn, 0);
    store_u64(d + kDescOpLogScan, 0);
  }
}

RegionGeometry read_geometry(const uint8_t* r) {
  if (load_u64(r + kOffMagic) != kMagic)
    throw std::runtime_error("bad region magic");
  RegionGeometry g;
  g.cfg.block_size = load_u32(r + kOffBlockSize);
  g.cfg.n_blocks = load_u64(r + kOffNumBlocks);
  g.cfg.num_frontends = load_u32(r + kOffNumDesc);
  g.cfg.deferred_slots = load_u64(r + kOffDeferredCap);
  g.total = load_u64(r + kOffCapacity);
  g.data_off = load_u64(r + kOffDataOff);
  g.data_len = load_u64(r + kOffDataLen);
  g.bitmap_off = load_u64(r + kOffBitmapOff);
  g.owner_off = load_u64(r + kOffOwnerMap);
  g.deferred_off = load_u64(r + kOffDeferredOff);
  if (g.cfg.num_frontends > 0) {
    const uint8_t* d0 = r + g.desc_off(0);
    g.log_off = load_u64(d0 + kDescLogOff);
    g.cfg.log_area_len = load_u64(d0 + kDescLogLen);
    g.oplog_off = load_u64(d0 + kDescOpLogOff);
    g.cfg.oplog_area_len = load_u64(d0 + kDescOpLogLen);
  }
  g.mailbox_off = kOffDescTable + uint64_t(g.cfg.num_frontends) * kDescSize;
  return g;
}

}  // namespace nvf::backend
