#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "nvf/bytes.hpp"

namespace nvf::backend {

// Durable region layout. Everything is discoverable from offset 0; all fields
// front-ends mutate remotely are either 8-byte-atomic or covered by a
// checksummed record. Byte-exact description in docs/format.md.
//
//   [naming header | root refs | lock words | lock journal | catalog |
//    descriptors | mailboxes | log areas | oplog areas | bitmap | owner map |
//    deferred queue | data area]

inline constexpr uint64_t kMagic = 0x314252464D564E41ull;  // "ANVMFRB1"
inline constexpr uint32_t kLayoutVersion = 1;

inline constexpr uint32_t kRootSlots = 32;
inline constexpr uint32_t kLockSlots = 32;
inline constexpr uint32_t kCatalogSlots = 64;

// Naming header offsets.
inline constexpr uint64_t kOffMagic = 0x00;
inline constexpr uint64_t kOffVersion = 0x08;
inline constexpr uint64_t kOffBlockSize = 0x0C;
inline constexpr uint64_t kOffCapacity = 0x10;
inline constexpr uint64_t kOffDataOff = 0x18;
inline constexpr uint64_t kOffDataLen = 0x20;
inline constexpr uint64_t kOffBitmapOff = 0x28;
inline constexpr uint64_t kOffNumBlocks = 0x30;
inline constexpr uint64_t kOffSeqno = 0x38;
inline constexpr uint64_t kOffOwnerMap = 0x40;
inline constexpr uint64_t kOffDeferredOff = 0x48;
inline constexpr uint64_t kOffDeferredCap = 0x50;
inline constexpr uint64_t kOffNumDesc = 0x58;
inline constexpr uint64_t kOffRootRefs = 0x60;
inline constexpr uint64_t kOffLockWords = kOffRootRefs + 8 * kRootSlots;       // 0x160
inline constexpr uint64_t kOffLockJournal = kOffLockWords + 8 * kLockSlots;    // 0x260

// Lock journal: one 32-byte slot per lock word, overwritten in place.
//   owner u64 | intent u32 (1=acquire 2=release) | seq u32 | crc u32 | pad
inline constexpr uint32_t kLockJournalEntrySize = 32;
inline constexpr uint32_t kIntentAcquire = 1;
inline constexpr uint32_t kIntentRelease = 2;

inline constexpr uint64_t kOffCatalog = kOffLockJournal + kLockJournalEntrySize * kLockSlots;

// Catalog: one 32-byte slot per data structure, written once at creation.
//   kind u8 | partitions u8 | root_slot u8 | lock_slot u8 | ds_id u32 |
//   aux u64 | aux2 u64 | crc u32 | pad u32
inline constexpr uint32_t kCatalogEntrySize = 32;

inline constexpr uint64_t kOffDescTable = kOffCatalog + kCatalogEntrySize * kCatalogSlots;

// Per-front-end descriptor (0x80 bytes):
inline constexpr uint32_t kDescSize = 0x80;
inline constexpr uint64_t kDescLogOff = 0x00;
inline constexpr uint64_t kDescLogLen = 0x08;
inline constexpr uint64_t kDescOpLogOff = 0x10;
inline constexpr uint64_t kDescOpLogLen = 0x18;
inline constexpr uint64_t kDescLpn = 0x20;       // ring offset of next record to replay
inline constexpr uint64_t kDescOpn = 0x28;       // last opn whose memory logs are replayed
inline constexpr uint64_t kDescOpLogScan = 0x30; // ring offset of first op with opn > Opn

// Mailbox per descriptor: request 64 B, response 256 B.
inline constexpr uint32_t kMailReqSize = 64;
inline constexpr uint32_t kMailRespSize = 256;

// Mailbox opcodes.
inline constexpr uint32_t kMailMalloc = 1;        // p0=count, p1=contiguous flag
inline constexpr uint32_t kMailFree = 2;          // p0=count, p1..=block offsets
inline constexpr uint32_t kMailDeferredFree = 3;  // p0=delay_ns, p1=count, p2..=blocks
inline constexpr uint32_t kMailRecoveryStatus = 4;
inline constexpr uint32_t kMailTruncateTail = 5;
inline constexpr uint32_t kMailStatusOk = 0;
inline constexpr uint32_t kMailStatusOom = 1;
inline constexpr uint32_t kMailStatusDoubleFree = 2;
inline constexpr uint32_t kMailStatusBadRequest = 3;

// Deferred-free queue slot: due_time u64 | block_off u64 (0 = empty).
inline constexpr uint32_t kDeferredSlotSize = 16;

// --- Record codecs ------------------------------------------------------

// One redo record: flag 0 = inline payload, flag 1 = payload is an 8-byte
// reference into the operation log (low 48 bits: region offset of the entry,
// high 16 bits: byte offset into its params).
struct MemoryLogEntry {
  uint8_t flag = 0;
  uint64_t address = 0;
  uint32_t length = 0;
  Bytes payload;     // inline bytes (flag 0)
  uint64_t ref = 0;  // packed reference (flag 1)
};

inline uint64_t pack_oplog_ref(uint64_t entry_off, uint16_t param_off) {
  return (uint64_t(param_off) << 48) | (entry_off & 0xFFFFFFFFFFFFull);
}
inline uint64_t oplog_ref_entry(uint64_t ref) { return ref & 0xFFFFFFFFFFFFull; }
inline uint16_t oplog_ref_param(uint64_t ref) { return uint16_t(ref >> 48); }

struct TxRecord {
  std::vector<MemoryLogEntry> entries;
  uint64_t covered_opn = 0;
};

inline constexpr uint8_t kCommitMark = 0xC7;
inline constexpr uint32_t kWrapMark = 0xFFFFFFFFu;

// Wire format:
//   u32 total_size | u32 entry_count | u64 covered_opn
//   per entry: u8 flag | u64 address | u32 length | payload (length or 8 bytes)
//   u8 commit_mark | u32 crc32c over everything before the crc
Bytes encode_tx_record(const TxRecord& rec);

enum class RecordStatus { Valid, Empty, Torn, Wrap };

RecordStatus parse_tx_record(std::span<const uint8_t> area, TxRecord* out,
                             uint32_t* size);

// Operation log entry:
//   u16 opcode | u16 param_len | u32 ds_id | u64 opn | params |
//   u32 crc32c over everything before the crc
// opcode 0 = empty, 0xFFFF = wrap marker.
struct OpLogEntry {
  uint16_t opcode = 0;
  uint32_t ds_id = 0;
  uint64_t opn = 0;
  Bytes params;
};

inline constexpr uint16_t kOpWrap = 0xFFFF;

Bytes encode_oplog_entry(const OpLogEntry& e);
RecordStatus parse_oplog_entry(std::span<const uint8_t> area, OpLogEntry* out,
                               uint32_t* size);

// --- Region geometry ----------------------------------------------------

struct RegionConfig {
  uint32_t block_size = 1024;
  uint64_t n_blocks = 4096;
  uint32_t num_frontends = 2;
  uint64_t log_area_len = 256 * 1024;
  uint64_t oplog_area_len = 256 * 1024;
  uint64_t deferred_slots = 4096;
};

struct RegionGeometry {
  RegionConfig cfg;
  uint64_t mailbox_off = 0;
  uint64_t log_off = 0;     // first descriptor's log area
  uint64_t oplog_off = 0;   // first descriptor's oplog area
  uint64_t bitmap_off = 0;
  uint64_t owner_off = 0;
  uint64_t deferred_off = 0;
  uint64_t data_off = 0;
  uint64_t data_len = 0;
  uint64_t total = 0;

  uint64_t desc_off(uint32_t i) const { return kOffDescTable + uint64_t(i) * kDescSize; }
  uint64_t mail_req_off(uint32_t i) const {
    return mailbox_off + uint64_t(i) * (kMailReqSize + kMailRespSize);
  }
  uint64_t mail_resp_off(uint32_t i) const { return mail_req_off(i) + kMailReqSize; }
  uint64_t block_off(uint64_t idx) const { return data_off + idx * cfg.block_size; }
  uint64_t block_index(uint64_t off) const { return (off - data_off) / cfg.block_size; }
};

RegionGeometry compute_geometry(const RegionConfig& cfg);

// Writes the naming area of a fresh region image (host-side formatting).
void format_region(uint8_t* region, const RegionGeometry& g);

// Reads geometry back from a formatted region (recovery: everything
// discoverable from offset 0).
RegionGeometry read_geometry(const uint8_t* region);

}  // namespace nvf::backend
