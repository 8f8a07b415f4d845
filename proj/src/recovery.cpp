#include "nvf/recovery/recovery.hpp"

#include <algorithm>
#include <deque>
#include <set>

#include "nvf/rng.hpp"

namespace nvf::recovery {

using backend::OpLogEntry;
using backend::RecordStatus;
using backend::TailState;
using sim::Channel;

// --- leases ----------------------------------------------------------------

std::vector<sim::NodeId> LeaseTable::expired_nodes(sim::SimTime now) const {
  std::vector<sim::NodeId> out;
  for (auto& [n, t] : last_)
    if (now - t > lease_ns_) out.push_back(n);
  return out;
}

void spawn_lease_renewer(sim::Fabric& fab, LeaseTable& table, sim::NodeId node,
                         sim::SimTime interval_ns) {
  fab.sched().spawn(
      "lease-" + std::to_string(node),
      [&fab, &table, node, interval_ns] {
        auto& sched = fab.sched();
        while (!sched.stop_requested()) {
          fab.poll_triggers();
          if (fab.alive(node)) table.renew(node, fab.now());
          sched.sleep(interval_ns);
        }
      },
      /*daemon=*/true);
}

// --- front-end restart -------------------------------------------------------

FrontendRecoveryReport recover_front_end(fe::FrontendRuntime& fe) {
  FrontendRecoveryReport rep;
  fe.connect();
  rep.locks_adopted = fe.adopt_orphan_locks();

  // Drain every committed record, then look at the memory-log tail.
  Bytes st = fe.mailbox_call(backend::kMailRecoveryStatus, {});
  rep.tail = TailState(load_u64(st.data() + 16));
  if (rep.tail == TailState::Inconsistent) {
    // Torn record: the flush was never acknowledged, so the op-log entries it
    // covered are re-executed below and a fresh record will be emitted.
    fe.mailbox_call(backend::kMailTruncateTail, {});
    rep.truncated = true;
    st = fe.mailbox_call(backend::kMailRecoveryStatus, {});
  }
  uint64_t lpn = load_u64(st.data() + 24);
  uint64_t durable = load_u64(st.data() + 32);
  uint64_t scan = load_u64(st.data() + 40);

  // Acknowledged fast-path ops whose memory-log records died with the
  // previous incarnation sit in the op-log ring past the scan pointer, in
  // operation-number order. Walk one snapshot of the ring.
  const auto& g = fe.geom();
  uint64_t area_len = g.cfg.oplog_area_len;
  uint64_t area = g.oplog_off + uint64_t(fe.desc()) * area_len;
  Bytes ring = fe.gather(area, uint32_t(area_len), /*cached=*/false);

  std::vector<OpLogEntry> orphans;
  uint64_t pos = scan;
  uint64_t expected = durable + 1;
  bool wrapped = false;
  bool torn_entry = false;
  for (;;) {
    OpLogEntry e;
    uint32_t size = 0;
    RecordStatus s = backend::parse_oplog_entry(
        {ring.data() + pos, size_t(area_len - pos)}, &e, &size);
    if (s == RecordStatus::Wrap) {
      if (wrapped) break;
      wrapped = true;
      pos = 0;
      continue;
    }
    if (s == RecordStatus::Empty) break;
    if (s == RecordStatus::Torn) {
      torn_entry = true;  // never acknowledged; zero it below
      break;
    }
    if (e.opn != expected) break;  // stale bytes from an earlier ring lap
    orphans.push_back(std::move(e));
    expected++;
    pos += size;
  }
  if (torn_entry && !rep.truncated) {
    fe.mailbox_call(backend::kMailTruncateTail, {});
    rep.truncated = true;
  }

  fe.set_positions(lpn, pos, durable + 1);

  if (!orphans.empty()) {
    uint64_t last_opn = orphans.back().opn;
    bool skipped = false;
    fe.begin_reexec();
    std::map<uint32_t, std::unique_ptr<ds::DataStructure>> handles;
    for (auto& e : orphans) {
      // A creation marker is only ever the last orphan (creation completes
      // before anything else runs); its staged bytes were lost with the
      // session and the catalog slot was never published, so skip it and let
      // the sweep reclaim its blocks.
      if (e.opcode == ds::kOpCreate) {
        skipped = true;
        continue;
      }
      if (e.opn != fe.next_opn())
        throw std::logic_error("orphan op-log entry out of sequence");
      auto it = handles.find(e.ds_id);
      if (it == handles.end())
        it = handles
                 .emplace(e.ds_id,
                          ds::DataStructure::open(fe, e.ds_id, /*writer=*/true))
                 .first;
      it->second->apply_logged(e.opcode, e.params);
      rep.reexecuted++;
    }
    fe.end_reexec();
    for (auto& [id, h] : handles) h->fence();
    if (rep.reexecuted > 0) fe.wait_durable_opn(durable + rep.reexecuted);
    if (skipped) fe.set_positions(fe.log_tail(), fe.oplog_tail(), last_opn + 1);
  }

  // The session state is durable again; leave the region lock-clean.
  for (uint32_t s = 0; s < backend::kLockSlots; s++)
    if (fe.holds_lock(s)) fe.writer_unlock(s);

  rep.resumed_opn = fe.next_opn();
  return rep;
}

// --- back-end restart --------------------------------------------------------

BackendRecoveryReport recover_back_end(backend::BackendNode& be) {
  BackendRecoveryReport rep;
  be.start();
  rep.records_replayed = be.replay_step();
  for (uint32_t d = 0; d < be.geom().cfg.num_frontends; d++)
    rep.tails.push_back(be.validate_last_tx(d));
  return rep;
}

// --- mirror promotion --------------------------------------------------------

void promote_mirror(backend::BackendNode& mirror,
                    const std::vector<fe::FrontendRuntime*>& fes) {
  mirror.start();
  mirror.replay_step();
  for (auto* f : fes) {
    if (!f) continue;
    f->rebind_backend(mirror.id());
    f->purge_cache();
  }
}

// --- orphaned-memory sweep -----------------------------------------------------

SweepReport orphan_sweep(sim::Fabric& fab, fe::FrontendRuntime& fe) {
  SweepReport rep;
  const auto& g = fe.geom();

  std::set<uint64_t> live;
  // Durable state of every cataloged structure.
  for (uint32_t slot = 0; slot < backend::kCatalogSlots; slot++) {
    auto entry = ds::parse_catalog(fe.catalog_read(slot));
    if (!entry) continue;
    auto h = ds::DataStructure::open(fe, entry->ds_id, /*writer=*/false);
    for (uint64_t b : h->reachable_blocks()) live.insert(b);
  }
  // Spans the front tier still owns (including empty slabs).
  for (auto [base, len] : fe.slab().owned_spans())
    for (uint64_t off = base; off < base + len; off += g.cfg.block_size)
      live.insert(g.block_off(g.block_index(off)));
  // Blocks already queued for deferred reclamation.
  Bytes dq = fab.verb_read(fe.node(), fe.backend(), g.deferred_off,
                           uint32_t(g.cfg.deferred_slots * backend::kDeferredSlotSize),
                           Channel::Meta);
  for (uint64_t s = 0; s < g.cfg.deferred_slots; s++) {
    uint64_t block = load_u64(dq.data() + s * backend::kDeferredSlotSize + 8);
    if (block != 0) live.insert(block);
  }

  uint64_t nb = g.cfg.n_blocks;
  Bytes bitmap = fab.verb_read(fe.node(), fe.backend(), g.bitmap_off,
                               uint32_t((nb + 7) / 8), Channel::Meta);
  Bytes owners =
      fab.verb_read(fe.node(), fe.backend(), g.owner_off, uint32_t(nb), Channel::Meta);
  uint8_t tag = uint8_t(fe.desc() + 1);
  std::vector<uint64_t> leaked;
  for (uint64_t i = 0; i < nb; i++) {
    rep.scanned++;
    bool allocated = (bitmap[i / 8] >> (i % 8)) & 1;
    if (!allocated || owners[i] != tag) continue;
    uint64_t off = g.block_off(i);
    if (!live.count(off)) leaked.push_back(off);
  }
  for (size_t i = 0; i < leaked.size(); i += 4) {
    uint64_t n = std::min<uint64_t>(4, leaked.size() - i);
    std::vector<uint64_t> p;
    p.push_back(n);
    for (uint64_t j = 0; j < n; j++) p.push_back(leaked[i + j]);
    fe.mailbox_call(backend::kMailFree, std::move(p));
  }
  rep.freed = std::move(leaked);
  return rep;
}

// --- cluster harness ------------------------------------------------------------

Cluster::Cluster(ClusterConfig cfg)
    : fab(sched, cfg.latency, cfg.seed), leases(cfg.lease_ns), cfg_(cfg) {
  auto g = backend::compute_geometry(cfg_.region);
  be_node_ = fab.add_node("be", g.total);
  backend::BackendNode::format(fab, be_node_, cfg_.region);
  be_ = std::make_unique<backend::BackendNode>(fab, be_node_);
  if (cfg_.with_mirror) {
    mirror_node_ = fab.add_node("mirror", g.total);
    // The standby starts as a byte copy of the freshly formatted primary;
    // from here on the replication hook keeps it current.
    fab.region_restore(mirror_node_, fab.region_snapshot(be_node_));
    mirror_ = std::make_unique<backend::BackendNode>(fab, mirror_node_);
    be_->attach_mirror({mirror_node_, cfg_.mirror_replays});
  }
  be_->start();
  active_be_ = be_node_;
  for (uint32_t i = 0; i < cfg_.frontends; i++) {
    sim::NodeId n = fab.add_node("fe" + std::to_string(i));
    fe_nodes_.push_back(n);
    fes_.push_back(
        std::make_unique<fe::FrontendRuntime>(fab, n, be_node_, i, cfg_.fe));
  }
}

void Cluster::spawn_backend_service(backend::BackendNode* node) {
  sched.spawn("be-svc-" + std::to_string(node->id()),
              [node] { node->run_service_task(); }, /*daemon=*/true);
}

void Cluster::start_services() {
  spawn_backend_service(be_.get());
  if (cfg_.lease_renewers) {
    spawn_lease_renewer(fab, leases, be_node_, cfg_.lease_renew_ns);
    for (auto n : fe_nodes_) spawn_lease_renewer(fab, leases, n, cfg_.lease_renew_ns);
  }
}

void Cluster::connect_all() {
  for (auto& f : fes_) f->connect();
}

BackendRecoveryReport Cluster::revive_backend() {
  fab.revive(be_node_);
  auto rep = recover_back_end(*be_);
  spawn_backend_service(be_.get());
  return rep;
}

void Cluster::crash_frontend(uint32_t i) {
  fab.inject_crash_now(fe_nodes_.at(i));
  fes_.at(i).reset();
}

FrontendRecoveryReport Cluster::restart_frontend(uint32_t i) {
  fab.revive(fe_nodes_.at(i));
  fes_.at(i) = std::make_unique<fe::FrontendRuntime>(fab, fe_nodes_.at(i),
                                                     active_be_, i, cfg_.fe);
  return recover_front_end(*fes_.at(i));
}

void Cluster::promote() {
  std::vector<fe::FrontendRuntime*> ptrs;
  for (auto& f : fes_) ptrs.push_back(f.get());
  promote_mirror(*mirror_, ptrs);
  active_be_ = mirror_node_;
  spawn_backend_service(mirror_.get());
}

// --- crash matrix -----------------------------------------------------------------

namespace {

// Reference model shared by all kinds: ordered map for keyed kinds, sequence
// for stack/queue (front of the vector = top/front, matching keys()).
struct Model {
  ds::DsKind kind;
  std::map<uint64_t, uint64_t> map;
  std::deque<uint64_t> seq;

  bool keyed() const {
    return kind != ds::DsKind::Stack && kind != ds::DsKind::Queue;
  }
  std::vector<uint64_t> keys() const {
    if (keyed()) {
      std::vector<uint64_t> out;
      for (auto& [k, v] : map) out.push_back(k);
      return out;
    }
    return {seq.begin(), seq.end()};
  }
};

enum class OpType { Insert, Erase, Find, Push, Pop };

struct PlannedOp {
  OpType type{};
  uint64_t key = 0, value = 0;
};

// Draws the next op and computes the model it would leave behind, without
// touching the structure; execution (which may die mid-flight) is separate,
// so both sides of an interrupted op are known.
PlannedOp plan_op(const Model& m, Rng& rng, Model* next) {
  PlannedOp op;
  *next = m;
  if (m.keyed()) {
    op.key = 1 + rng.below(48);
    uint32_t dice = uint32_t(rng.below(100));
    if (dice < 60) {
      op.type = OpType::Insert;
      op.value = op.key * 1000 + rng.below(1000);
      next->map[op.key] = op.value;
    } else if (dice < 85) {
      op.type = OpType::Erase;
      next->map.erase(op.key);
    } else {
      op.type = OpType::Find;
    }
  } else if (m.seq.empty() || rng.below(100) < 65) {
    op.type = OpType::Push;
    op.value = 1 + rng.below(100000);
    if (m.kind == ds::DsKind::Stack)
      next->seq.push_front(op.value);
    else
      next->seq.push_back(op.value);
  } else {
    op.type = OpType::Pop;
    next->seq.pop_front();
  }
  return op;
}

// Runs the planned op; acknowledgements must match the pre-op model.
void exec_op(ds::DataStructure& h, const Model& m, const PlannedOp& op) {
  switch (op.type) {
    case OpType::Insert:
      h.insert(op.key, op.value);
      break;
    case OpType::Erase: {
      bool erased = h.erase(op.key);
      if (erased != (m.map.count(op.key) != 0))
        throw std::logic_error("erase ack mismatch");
      break;
    }
    case OpType::Find: {
      auto got = h.find(op.key);
      auto it = m.map.find(op.key);
      bool match = it == m.map.end() ? !got.has_value()
                                     : (got.has_value() && *got == it->second);
      if (!match) throw std::logic_error("find mismatch before crash");
      break;
    }
    case OpType::Push:
      ds::as_stack_queue(h).push(op.value);
      break;
    case OpType::Pop: {
      auto got = ds::as_stack_queue(h).pop();
      if (!got || *got != m.seq.front()) throw std::logic_error("pop mismatch");
      break;
    }
  }
}

bool matches(ds::DataStructure& h, const Model& m, std::string* why) {
  auto actual = h.keys();
  if (actual != m.keys()) {
    *why = "key list mismatch";
    return false;
  }
  if (m.keyed()) {
    for (auto& [k, v] : m.map) {
      auto got = h.find(k);
      if (!got || *got != v) {
        *why = "value mismatch at key " + std::to_string(k);
        return false;
      }
    }
  }
  return true;
}

struct PointResult {
  bool ok = true;
  bool ambiguous = false;
  bool truncated = false;
  uint64_t reexecuted = 0;
  std::string why;
};

PointResult run_point(uint32_t index, const CrashMatrixConfig& cfg,
                      bool crash_backend) {
  static const ds::DsKind kKinds[] = {
      ds::DsKind::Stack,    ds::DsKind::Queue, ds::DsKind::HashTable,
      ds::DsKind::SkipList, ds::DsKind::Bst,   ds::DsKind::Bpt,
      ds::DsKind::MvBst,    ds::DsKind::MvBpt};
  static const fe::Mode kModes[] = {fe::Mode::R, fe::Mode::RC, fe::Mode::RCB};

  Rng rng(cfg.seed ^ ds::mix64(index + 1));
  ds::DsKind kind = kKinds[index % 8];
  fe::Mode mode = kModes[(index / 8) % 3];

  ClusterConfig cc;
  cc.region.block_size = 256;
  cc.region.n_blocks = 512;
  cc.region.num_frontends = 1;
  cc.region.log_area_len = 16 * 1024;
  cc.region.oplog_area_len = 16 * 1024;
  cc.region.deferred_slots = 128;
  cc.fe.mode = mode;
  cc.fe.batch_size = 8;
  cc.fe.page_size = 256;
  cc.fe.cache_capacity = 16;
  cc.fe.slab_size = 1024;
  cc.frontends = 1;
  cc.seed = cfg.seed + index;

  PointResult res;
  Cluster cl(cc);
  cl.sched.run([&] {
    cl.start_services();
    cl.connect_all();

    ds::DsOptions opt;
    opt.buckets = 8;
    opt.max_level = 4;
    opt.mv_free_delay = 20000;
    auto h = ds::DataStructure::create(cl.fe(), kind, 1, opt);

    Model model{kind, {}, {}};
    uint32_t fe_crash_at =
        crash_backend ? UINT32_MAX : uint32_t(rng.below(cfg.ops_per_run));
    // Every front-end verb targets the back end, so a count trigger is
    // guaranteed to surface as an exception on some verb; keep issuing ops
    // until it does.
    uint32_t max_ops = crash_backend ? 100000 : cfg.ops_per_run;
    if (crash_backend) {
      sim::CrashTrigger t;
      t.node = cl.backend_node();
      t.at_event_count = cl.fab.total_events() + 1 + rng.below(600);
      cl.fab.schedule_crash(t);
    }

    Model pre = model;  // model without the mid-flight op
    for (uint32_t j = 0; j < max_ops; j++) {
      Model next;
      PlannedOp op = plan_op(model, rng, &next);
      try {
        exec_op(*h, model, op);
        pre = model = next;
      } catch (const sim::DestinationUnreachable&) {
        // Mid-flight crash: the interrupted op may or may not have reached
        // the durable op log. Accept either side.
        res.ambiguous = true;
        pre = model;
        model = next;
        break;
      }
      if (j == fe_crash_at) break;
    }
    h.reset();

    if (crash_backend && cl.fab.alive(cl.backend_node()))
      throw std::logic_error("scheduled back-end crash never fired");
    if (!cl.fab.alive(cl.backend_node())) {
      auto brep = cl.revive_backend();
      for (auto t : brep.tails)
        if (t == TailState::Inconsistent) res.truncated = true;
    }
    cl.crash_frontend(0);
    auto frep = cl.restart_frontend(0);
    res.truncated = res.truncated || frep.truncated;
    res.reexecuted = frep.reexecuted;

    auto reopened = ds::DataStructure::open(cl.fe(), 1, /*writer=*/true);
    std::string why_post, why_pre;
    bool ok = matches(*reopened, model, &why_post) ||
              (res.ambiguous && matches(*reopened, pre, &why_pre));
    if (!ok) {
      res.ok = false;
      res.why = "point " + std::to_string(index) + " (" +
                ds::ds_kind_name(kind) + ", " + fe::mode_name(mode) +
                "): " + why_post;
    }
    reopened->release_locks();
  });
  return res;
}

}  // namespace

CrashMatrixReport run_crash_matrix(const CrashMatrixConfig& cfg) {
  CrashMatrixReport rep;
  for (uint32_t i = 0; i < cfg.points; i++) {
    bool crash_backend = (ds::mix64(cfg.seed ^ (i * 2654435761u)) & 1) != 0;
    PointResult r = run_point(i, cfg, crash_backend);
    rep.runs++;
    if (crash_backend)
      rep.backend_crashes++;
    else
      rep.frontend_crashes++;
    if (r.ambiguous) rep.midflight_ambiguous++;
    if (r.truncated) rep.truncations++;
    rep.reexecuted += r.reexecuted;
    if (!r.ok) {
      rep.failures++;
      if (rep.first_failure.empty()) rep.first_failure = r.why;
    }
  }
  return rep;
}

}  // namespace nvf::recovery
