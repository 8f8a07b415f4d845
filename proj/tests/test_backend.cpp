#include <cstring>
#include <numeric>

#include "doctest.h"
#include "nvf/backend/node.hpp"
#include "nvf/crc32c.hpp"
#include "nvf/sim/fabric.hpp"

using namespace nvf;
using namespace nvf::backend;
using namespace nvf::sim;

namespace {

struct BackendFixture {
  Scheduler sched;
  Fabric fab;
  NodeId fe, be;
  RegionConfig cfg;

  explicit BackendFixture(RegionConfig c = small_cfg(), uint64_t seed = 1)
      : fab(sched, {}, seed), cfg(c) {
    fe = fab.add_node("fe");
    be = fab.add_node("be", compute_geometry(cfg).total);
    BackendNode::format(fab, be, cfg);
  }

  static RegionConfig small_cfg() {
    RegionConfig c;
    c.block_size = 64;
    c.n_blocks = 64;
    c.num_frontends = 2;
    c.log_area_len = 2048;
    c.oplog_area_len = 2048;
    c.deferred_slots = 16;
    return c;
  }
};

// Minimal front-end-side ring writer used as the test driver: appends a
// record (or oplog entry) over the fabric, wrapping when the tail would not
// fit the record plus the 4-byte terminator/wrap marker.
struct RingWriter {
  Fabric& fab;
  NodeId fe, be;
  uint64_t area_off, area_len;
  uint64_t tail = 0;

  void append(const Bytes& rec, bool oplog) {
    uint64_t need = rec.size() + 4;
    if (tail + need > area_len) {
      Bytes mark;
      if (oplog)
        put_u16(mark, kOpWrap);
      else
        put_u32(mark, kWrapMark);
      // Record lands at offset 0 first; the wrap marker is published last so
      // a reader never follows the marker to a stale or missing record.
      Bytes body = rec;
      put_u32(body, 0);
      fab.verb_write(fe, be, area_off, body, Channel::TxEntries);
      fab.verb_write(fe, be, area_off + tail, mark, Channel::TxEntries);
      tail = rec.size();
    } else {
      Bytes body = rec;
      put_u32(body, 0);
      fab.verb_write(fe, be, area_off + tail, body, Channel::TxEntries);
      tail += rec.size();
    }
  }
};

Bytes make_mail_request(uint64_t seq, uint32_t opcode, std::vector<uint64_t> p) {
  Bytes b(kMailReqSize, 0);
  store_u64(b.data(), seq);
  store_u32(b.data() + 8, opcode);
  p.resize(5, 0);
  for (int i = 0; i < 5; i++) store_u64(b.data() + 16 + 8 * i, p[i]);
  store_u32(b.data() + 56, crc32c({b.data(), 56}));
  return b;
}

}  // namespace

TEST_CASE("tx record codec: round trip and independently computed bytes") {
  TxRecord rec;
  rec.covered_opn = 7;
  rec.entries.push_back({0, 0x1000, 4, {0xDE, 0xAD, 0xBE, 0xEF}, 0});
  rec.entries.push_back({1, 0x2000, 16, {}, pack_oplog_ref(0x340, 12)});
  Bytes b = encode_tx_record(rec);

  // Independent byte-level oracle.
  Bytes exp;
  put_u32(exp, 0);
  put_u32(exp, 2);
  put_u64(exp, 7);
  put_u8(exp, 0);
  put_u64(exp, 0x1000);
  put_u32(exp, 4);
  put_bytes(exp, Bytes{0xDE, 0xAD, 0xBE, 0xEF});
  put_u8(exp, 1);
  put_u64(exp, 0x2000);
  put_u32(exp, 16);
  put_u64(exp, (uint64_t(12) << 48) | 0x340);
  put_u8(exp, 0xC7);
  store_u32(exp.data(), uint32_t(exp.size() + 4));
  put_u32(exp, crc32c({exp.data(), exp.size()}));
  CHECK(b == exp);

  TxRecord back;
  uint32_t size = 0;
  CHECK(parse_tx_record(b, &back, &size) == RecordStatus::Valid);
  CHECK(size == b.size());
  CHECK(back.covered_opn == 7);
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].payload == Bytes{0xDE, 0xAD, 0xBE, 0xEF});
  CHECK(back.entries[1].flag == 1);
  CHECK(oplog_ref_entry(back.entries[1].ref) == 0x340);
  CHECK(oplog_ref_param(back.entries[1].ref) == 12);

  // Any single flipped byte is rejected.
  for (size_t i = 0; i < b.size(); i += 7) {
    Bytes bad = b;
    bad[i] ^= 0x40;
    CHECK(parse_tx_record(bad, nullptr, nullptr) != RecordStatus::Valid);
  }
  // Truncation at every length short of full is Torn or Empty, never Valid.
  for (size_t cut = 0; cut < b.size(); cut++) {
    Bytes t(b.begin(), b.begin() + cut);
    t.resize(b.size(), 0);
    CHECK(parse_tx_record(t, nullptr, nullptr) != RecordStatus::Valid);
  }
}

TEST_CASE("oplog entry codec round trip") {
  OpLogEntry e;
  e.opcode = 0x11;
  e.ds_id = 3;
  e.opn = 42;
  e.params = {1, 2, 3, 4, 5};
  Bytes b = encode_oplog_entry(e);
  CHECK(b.size() == 16 + 5 + 4);
  OpLogEntry back;
  uint32_t size = 0;
  CHECK(parse_oplog_entry(b, &back, &size) == RecordStatus::Valid);
  CHECK(back.opcode == 0x11);
  CHECK(back.ds_id == 3);
  CHECK(back.opn == 42);
  CHECK(back.params == e.params);
  Bytes bad = b;
  bad.back() ^= 1;
  CHECK(parse_oplog_entry(bad, nullptr, nullptr) == RecordStatus::Torn);
}

TEST_CASE("geometry survives format/read round trip and is self-describing") {
  BackendFixture fx;
  RegionGeometry g = compute_geometry(fx.cfg);
  RegionGeometry r = read_geometry(fx.fab.region_data(fx.be));
  CHECK(r.data_off == g.data_off);
  CHECK(r.bitmap_off == g.bitmap_off);
  CHECK(r.owner_off == g.owner_off);
  CHECK(r.deferred_off == g.deferred_off);
  CHECK(r.total == g.total);
  CHECK(r.cfg.block_size == fx.cfg.block_size);
  CHECK(r.cfg.num_frontends == 2);
  CHECK(g.data_off % fx.cfg.block_size == 0);
  // Distinct areas never overlap.
  CHECK(g.mailbox_off >= kOffDescTable + 2 * kDescSize);
  CHECK(g.log_off >= g.mailbox_off + 2 * (kMailReqSize + kMailRespSize));
  CHECK(g.bitmap_off >= g.oplog_off + 2 * fx.cfg.oplog_area_len);
  CHECK(g.data_off >= g.deferred_off + fx.cfg.deferred_slots * kDeferredSlotSize);
}

TEST_CASE("replay applies appended records; matches a reference interpreter") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  const auto& g = node.geom();
  Bytes ref(g.total, 0);  // reference image of the data area

  fx.sched.run([&] {
    RingWriter w{fx.fab, fx.fe, fx.be, g.log_off, fx.cfg.log_area_len};
    Rng rng(99);
    uint64_t opn = 0;
    size_t applied_total = 0;
    for (int r = 0; r < 40; r++) {
      TxRecord rec;
      int n = 1 + int(rng.below(3));
      for (int i = 0; i < n; i++) {
        MemoryLogEntry e;
        e.address = g.data_off + (rng.below(g.data_len - 32) & ~7ull);
        e.length = 8 + uint32_t(rng.below(3)) * 8;
        for (uint32_t k = 0; k < e.length; k++)
          e.payload.push_back(uint8_t(rng.next()));
        std::memcpy(ref.data() + e.address, e.payload.data(), e.length);
        rec.entries.push_back(std::move(e));
      }
      rec.covered_opn = ++opn;
      w.append(encode_tx_record(rec), false);
      applied_total += node.replay_step();
    }
    CHECK(applied_total == 40);
    CHECK(node.opn(0) == 40);
    CHECK(node.seqno() == 2 * 40);  // two bumps per record, even when idle
    CHECK(node.seqno() % 2 == 0);
    CHECK(std::memcmp(fx.fab.region_data(fx.be) + g.data_off,
                      ref.data() + g.data_off, g.data_len) == 0);
    // Replay is idempotent: nothing pending, nothing reapplied.
    CHECK(node.replay_step() == 0);
    CHECK(node.validate_last_tx(0) == TailState::Empty);
  });
}

TEST_CASE("flag=1 entries resolve payload bytes out of the operation log") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  const auto& g = node.geom();

  fx.sched.run([&] {
    // Durable op first, then the record that references its params.
    OpLogEntry op;
    op.opcode = 5;
    op.ds_id = 1;
    op.opn = 1;
    op.params = {9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
    Bytes ob = encode_oplog_entry(op);
    fx.fab.verb_write(fx.fe, fx.be, g.oplog_off, ob, Channel::OpLog);

    TxRecord rec;
    rec.covered_opn = 1;
    MemoryLogEntry e;
    e.flag = 1;
    e.address = g.data_off + 128;
    e.length = 6;
    e.ref = pack_oplog_ref(g.oplog_off, 2);  // params[2..8)
    rec.entries.push_back(e);
    RingWriter w{fx.fab, fx.fe, fx.be, g.log_off, fx.cfg.log_area_len};
    w.append(encode_tx_record(rec), false);

    CHECK(node.replay_step() == 1);
    Bytes got(node.mem() + g.data_off + 128, node.mem() + g.data_off + 134);
    CHECK(got == Bytes{7, 6, 5, 4, 3, 2});
    // Equivalent inline record produces identical bytes.
    TxRecord inl;
    inl.covered_opn = 2;
    inl.entries.push_back({0, g.data_off + 256, 6, {7, 6, 5, 4, 3, 2}, 0});
    w.append(encode_tx_record(inl), false);
    CHECK(node.replay_step() == 1);
    CHECK(std::memcmp(node.mem() + g.data_off + 128, node.mem() + g.data_off + 256, 6) == 0);
  });
}

TEST_CASE("log ring wraps and stays live indefinitely") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  const auto& g = node.geom();
  fx.sched.run([&] {
    RingWriter w{fx.fab, fx.fe, fx.be, g.log_off, fx.cfg.log_area_len};
    // 200 records of ~120 bytes through a 2048-byte ring: many wraps.
    for (uint64_t r = 1; r <= 200; r++) {
      TxRecord rec;
      rec.covered_opn = r;
      Bytes payload(96, uint8_t(r));
      rec.entries.push_back({0, g.data_off, 96, payload, 0});
      w.append(encode_tx_record(rec), false);
      CHECK(node.replay_step() == 1);
      CHECK(node.mem()[g.data_off] == uint8_t(r));
    }
    CHECK(node.opn(0) == 200);
    CHECK(node.validate_last_tx(0) == TailState::Empty);
  });
}

TEST_CASE("torn tail detection and truncation") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  const auto& g = node.geom();
  fx.sched.run([&] {
    RingWriter w{fx.fab, fx.fe, fx.be, g.log_off, fx.cfg.log_area_len};
    TxRecord rec;
    rec.covered_opn = 1;
    rec.entries.push_back({0, g.data_off, 8, Bytes(8, 0xAA), 0});
    w.append(encode_tx_record(rec), false);
    CHECK(node.validate_last_tx(0) == TailState::Consistent);

    // A committed record followed by a torn one: corrupt the second record's
    // checksum in place, exactly what a prefix-durable crash leaves behind.
    TxRecord rec2;
    rec2.covered_opn = 2;
    rec2.entries.push_back({0, g.data_off + 64, 8, Bytes(8, 0xBB), 0});
    uint64_t tail_before = w.tail;
    w.append(encode_tx_record(rec2), false);
    node.mem()[g.log_off + w.tail - 1] ^= 0xFF;
    CHECK(node.validate_last_tx(0) == TailState::Inconsistent);

    // Replay stops before the torn record; the good one still applies.
    CHECK(node.replay_step() == 1);
    CHECK(node.mem()[g.data_off] == 0xAA);
    CHECK(node.mem()[g.data_off + 64] != 0xBB);
    CHECK(node.lpn(0) == tail_before);

    // Truncation zeroes the torn suffix; the log is clean again.
    Bytes req = make_mail_request(1, kMailTruncateTail, {});
    fx.fab.verb_write(fx.fe, fx.be, g.mail_req_off(0), req, Channel::Mailbox);
    node.service_once();
    CHECK(node.validate_last_tx(0) == TailState::Empty);
    CHECK(load_u64(node.mem() + g.mail_resp_off(0)) == 1);
    CHECK(load_u32(node.mem() + g.mail_resp_off(0) + 8) == kMailStatusOk);

    // The ring is usable after truncation at the old tail position.
    w.tail = tail_before;
    TxRecord rec3;
    rec3.covered_opn = 2;
    rec3.entries.push_back({0, g.data_off + 64, 8, Bytes(8, 0xCC), 0});
    w.append(encode_tx_record(rec3), false);
    CHECK(node.replay_step() == 1);
    CHECK(node.mem()[g.data_off + 64] == 0xCC);
  });
}

TEST_CASE("torn tail from an injected crash is never replayed") {
  BackendFixture fx(BackendFixture::small_cfg(), 21);
  BackendNode node(fx.fab, fx.be);
  node.start();
  const auto& g = node.geom();
  fx.sched.run([&] {
    RingWriter w{fx.fab, fx.fe, fx.be, g.log_off, fx.cfg.log_area_len};
    TxRecord rec;
    rec.covered_opn = 1;
    rec.entries.push_back({0, g.data_off, 64, Bytes(64, 0xEE), 0});
    fx.fab.schedule_crash({.node = fx.be, .at_event_count = fx.fab.total_events() + 1});
    CHECK_THROWS_AS(w.append(encode_tx_record(rec), false), DestinationUnreachable);
    fx.fab.revive(fx.be);
    node.start();
    // Whatever prefix survived, it must not apply as a committed record.
    CHECK(node.replay_step() == 0);
    CHECK(node.opn(0) == 0);
    for (int i = 0; i < 64; i++) CHECK(node.mem()[g.data_off + i] == 0);
    node.truncate_torn_tails(0);
    CHECK(node.validate_last_tx(0) == TailState::Empty);
  });
}

TEST_CASE("allocator: lowest-first, contiguous runs, OOM, double free") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  const auto& g = node.geom();
  fx.sched.run([&] {
    auto a = node.alloc_blocks(3, false, 1);
    REQUIRE(a.size() == 3);
    CHECK(a[0] == g.block_off(0));
    CHECK(a[1] == g.block_off(1));
    CHECK(a[2] == g.block_off(2));
    CHECK(node.block_owner(a[0]) == 1);
    CHECK(node.allocated_count() == 3);

    // Free the middle block; the next single alloc reuses it (lowest free).
    CHECK(node.free_blocks({a[1]}) == 0);
    auto b = node.alloc_blocks(1, false, 2);
    REQUIRE(b.size() == 1);
    CHECK(b[0] == g.block_off(1));
    CHECK(node.block_owner(b[0]) == 2);

    // Contiguous allocation skips the fragmented prefix.
    CHECK(node.free_blocks({a[0]}) == 0);
    auto c = node.alloc_blocks(4, true, 1);
    REQUIRE(c.size() == 4);
    for (int i = 1; i < 4; i++) CHECK(c[i] == c[i - 1] + g.cfg.block_size);
    CHECK(c[0] == g.block_off(3));

    // Double free reports and leaves the map consistent.
    CHECK(node.free_blocks({a[0]}) == 1);
    CHECK(node.allocated_count() == 6);

    // Exhaustion fails whole-request with no partial side effects.
    uint64_t before = node.allocated_count();
    auto big = node.alloc_blocks(uint32_t(g.cfg.n_blocks), false, 1);
    CHECK(big.empty());
    CHECK(node.allocated_count() == before);
    auto rest = node.alloc_blocks(uint32_t(g.cfg.n_blocks - before), false, 1);
    CHECK(rest.size() == g.cfg.n_blocks - before);
    CHECK(node.alloc_blocks(1, false, 1).empty());
  });
}

TEST_CASE("deferred free reclaims only after the delay elapses") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  fx.sched.run([&] {
    auto a = node.alloc_blocks(2, false, 1);
    REQUIRE(a.size() == 2);
    node.deferred_free(a[0], 5000);
    node.process_deferred();
    CHECK(node.block_allocated(a[0]));
    CHECK(node.deferred_pending() == std::vector<uint64_t>{a[0]});
    fx.sched.sleep(4999);
    node.process_deferred();
    CHECK(node.block_allocated(a[0]));
    fx.sched.sleep(1);
    node.process_deferred();
    CHECK_FALSE(node.block_allocated(a[0]));
    CHECK(node.deferred_pending().empty());
    // Zero delay frees immediately.
    node.deferred_free(a[1], 0);
    CHECK_FALSE(node.block_allocated(a[1]));
  });
}

TEST_CASE("deferred queue survives restart: pending frees still happen") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  fx.sched.run([&] {
    auto a = node.alloc_blocks(1, false, 1);
    node.deferred_free(a[0], 3000);
    fx.fab.inject_crash_now(fx.be);
    fx.fab.revive(fx.be);
    BackendNode revived(fx.fab, fx.be);
    revived.start();  // rebuilds the volatile index from the durable queue
    CHECK(revived.deferred_pending() == std::vector<uint64_t>{a[0]});
    fx.sched.sleep(3000);
    revived.process_deferred();
    CHECK_FALSE(revived.block_allocated(a[0]));
  });
}

TEST_CASE("mailbox RPC over the fabric: malloc, free, duplicate suppression") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  const auto& g = node.geom();
  fx.sched.run([&] {
    fx.sched.spawn("be-svc", [&] { node.run_service_task(); }, /*daemon=*/true);

    auto rpc = [&](uint64_t seq, uint32_t opcode, std::vector<uint64_t> p) {
      Bytes req = make_mail_request(seq, opcode, std::move(p));
      fx.fab.verb_write(fx.fe, fx.be, g.mail_req_off(1), req, Channel::Mailbox);
      for (;;) {
        Bytes resp = fx.fab.verb_read(fx.fe, fx.be, g.mail_resp_off(1),
                                      kMailRespSize, Channel::Mailbox);
        if (load_u64(resp.data()) == seq) return resp;
        fx.sched.sleep(1000);
      }
    };

    Bytes r = rpc(1, kMailMalloc, {2, 0});
    CHECK(load_u32(r.data() + 8) == kMailStatusOk);
    REQUIRE(load_u32(r.data() + 12) == 2);
    uint64_t b0 = load_u64(r.data() + 16);
    uint64_t b1 = load_u64(r.data() + 24);
    CHECK(b0 == g.block_off(0));
    CHECK(b1 == g.block_off(1));
    CHECK(node.block_owner(b0) == 2);  // owner byte = descriptor index + 1

    r = rpc(2, kMailFree, {1, b0});
    CHECK(load_u32(r.data() + 8) == kMailStatusOk);
    r = rpc(3, kMailFree, {1, b0});
    CHECK(load_u32(r.data() + 8) == kMailStatusDoubleFree);

    // A re-polled response for an already-served request is not re-executed.
    uint64_t allocs = node.allocated_count();
    fx.sched.sleep(5000);
    CHECK(node.allocated_count() == allocs);

    r = rpc(4, kMailDeferredFree, {2000, 1, b1});
    CHECK(load_u32(r.data() + 8) == kMailStatusOk);
    CHECK(node.block_allocated(b1));
    fx.sched.sleep(4000);  // service loop runs process_deferred
    CHECK_FALSE(node.block_allocated(b1));

    r = rpc(5, 77, {});
    CHECK(load_u32(r.data() + 8) == kMailStatusBadRequest);

    r = rpc(6, kMailRecoveryStatus, {});
    CHECK(load_u32(r.data() + 12) == 4);
    CHECK(load_u64(r.data() + 16) == uint64_t(TailState::Empty));
  });
}

TEST_CASE("mirror replication keeps a byte-identical copy") {
  BackendFixture fx;
  NodeId mir = fx.fab.add_node("mirror", fx.fab.region_capacity(fx.be));
  fx.fab.region_restore(mir, fx.fab.region_snapshot(fx.be));
  BackendNode node(fx.fab, fx.be);
  node.start();
  node.attach_mirror({.node = mir, .replays = false});
  const auto& g = node.geom();
  fx.sched.run([&] {
    RingWriter w{fx.fab, fx.fe, fx.be, g.log_off, fx.cfg.log_area_len};
    Rng rng(5);
    for (uint64_t r = 1; r <= 20; r++) {
      TxRecord rec;
      rec.covered_opn = r;
      Bytes payload(24, uint8_t(rng.next()));
      rec.entries.push_back(
          {0, g.data_off + (rng.below(g.data_len - 32) & ~7ull), 24, payload, 0});
      w.append(encode_tx_record(rec), false);
      node.replay_step();
    }
    auto blocks = node.alloc_blocks(3, false, 1);
    node.free_blocks({blocks[1]});
    node.deferred_free(blocks[2], 1000);
    CHECK(fx.fab.region_snapshot(fx.be) == fx.fab.region_snapshot(mir));
    CHECK(fx.fab.channel_counter(fx.be, Channel::Replication).count > 0);

    // Mirror crash detaches it (Case: replica loss) without failing the node.
    fx.fab.inject_crash_now(mir);
    auto more = node.alloc_blocks(1, false, 1);
    CHECK(!more.empty());
    CHECK_FALSE(node.mirror().has_value());
  });
}

TEST_CASE("region save/load round trip") {
  BackendFixture fx;
  BackendNode node(fx.fab, fx.be);
  node.start();
  fx.sched.run([&] { node.alloc_blocks(5, false, 1); });
  std::string path = "/tmp/nvf_region_test.bin";
  save_region(fx.fab, fx.be, path);
  Bytes before = fx.fab.region_snapshot(fx.be);
  fx.fab.region_restore(fx.be, Bytes(before.size(), 0));
  load_region(fx.fab, fx.be, path);
  CHECK(fx.fab.region_snapshot(fx.be) == before);
}
