#include "nvf/bench/bench.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "nvf/rng.hpp"

namespace nvf::bench {

using ds::DataStructure;
using ds::DsKind;
using recovery::Cluster;
using recovery::ClusterConfig;
using sim::Channel;
using sim::VerbKind;

namespace {

bool block_based(DsKind k) {
  return k == DsKind::Bpt || k == DsKind::MvBst || k == DsKind::MvBpt;
}

bool keyed(DsKind k) { return k != DsKind::Stack && k != DsKind::Queue; }

ClusterConfig cluster_for(const WorkloadSpec& spec) {
  ClusterConfig cc;
  cc.region.block_size = 256;
  cc.region.n_blocks = 8192;
  cc.region.num_frontends = 1;
  cc.region.log_area_len = 64 * 1024;
  cc.region.oplog_area_len = 64 * 1024;
  cc.region.deferred_slots = 1024;
  cc.fe.mode = spec.mode;
  cc.fe.batch_size = spec.batch;
  cc.fe.page_size = 256;
  cc.fe.slab_size = 1024;
  cc.fe.rr_set_size = spec.rr_set;
  uint32_t pages = spec.cache_pages;
  if (pages == 0) {
    uint64_t footprint =
        spec.preload * (block_based(spec.kind) ? cc.region.block_size : 32);
    pages = uint32_t(std::max<uint64_t>(2, footprint / 10 / cc.fe.page_size));
  }
  cc.fe.cache_capacity = pages;
  cc.seed = spec.seed;
  cc.with_mirror = spec.mirror;
  return cc;
}

ds::DsOptions options_for(const WorkloadSpec& spec) {
  ds::DsOptions opt;
  opt.partitions = spec.partitions;
  opt.buckets = std::max<uint64_t>(16, spec.key_space / 8);
  opt.max_level = 8;
  return opt;
}

void preload(DataStructure& h, const WorkloadSpec& spec) {
  if (keyed(spec.kind)) {
    // Shuffled order: an ascending preload would degenerate the BST.
    std::vector<uint64_t> ks(spec.preload);
    std::iota(ks.begin(), ks.end(), 0);
    std::mt19937_64 g(spec.seed ^ 0x9E37);
    std::shuffle(ks.begin(), ks.end(), g);
    for (uint64_t k : ks) h.insert(k, k + 1);
  } else {
    auto& sq = ds::as_stack_queue(h);
    for (uint64_t k = 0; k < spec.preload; k++) sq.push(k + 1);
  }
  h.fence();
}

struct KeyDraw {
  Rng rng;
  Zipfian zipf;
  bool zipfian;
  uint64_t space;
  KeyDraw(const WorkloadSpec& s, uint64_t salt)
      : rng(s.seed ^ salt),
        zipf(s.key_space, s.zipf_s, s.seed ^ salt ^ 0x5A1Full),
        zipfian(s.zipfian),
        space(s.key_space) {}
  uint64_t key() { return zipfian ? zipf.next() : rng.below(space); }
  bool is_put(uint32_t put_pct) { return rng.below(100) < put_pct; }
};

void one_op(DataStructure& h, const WorkloadSpec& spec, KeyDraw& d) {
  if (keyed(spec.kind)) {
    uint64_t k = d.key();
    if (d.is_put(spec.put_pct))
      h.insert(k, d.rng.next());
    else
      (void)h.find(k);
  } else {
    auto& sq = ds::as_stack_queue(h);
    if (sq.size() == 0 || d.is_put(spec.put_pct))
      sq.push(d.rng.next());
    else
      (void)sq.pop();
  }
}

void fill_counters(RunReport& r, Cluster& cl, sim::NodeId fe_node) {
  r.reads = cl.fab.counter(fe_node, VerbKind::ReadVerb).count;
  r.read_bytes = cl.fab.counter(fe_node, VerbKind::ReadVerb).bytes;
  r.writes = cl.fab.counter(fe_node, VerbKind::WriteVerb).count;
  r.write_bytes = cl.fab.counter(fe_node, VerbKind::WriteVerb).bytes;
  r.cas = cl.fab.counter(fe_node, VerbKind::CompareAndSwap64).count;
  r.atomics = cl.fab.counter(fe_node, VerbKind::AtomicRead64).count;
  r.oplog_verbs = cl.fab.channel_counter(fe_node, Channel::OpLog).count;
  r.tx_entry_verbs = cl.fab.channel_counter(fe_node, Channel::TxEntries).count;
  r.tx_commit_verbs = cl.fab.channel_counter(fe_node, Channel::TxCommit).count;
  r.data_verbs = cl.fab.channel_counter(fe_node, Channel::Data).count;
}

}  // namespace

std::vector<fe::Mode> modes_for(DsKind kind) {
  if (kind == DsKind::Stack || kind == DsKind::Queue)
    return {fe::Mode::Naive, fe::Mode::R, fe::Mode::RCB};
  return {fe::Mode::Naive, fe::Mode::R, fe::Mode::RC, fe::Mode::RCB};
}

const char* put_get_label(uint32_t put_pct) {
  switch (put_pct) {
    case 100: return "100put";
    case 50: return "50put50get";
    case 25: return "25put75get";
    case 10: return "10put90get";
    case 0: return "100get";
  }
  return "custom";
}

RunReport run_workload(const WorkloadSpec& spec) {
  RunReport r;
  r.spec = spec;
  Cluster cl(cluster_for(spec));
  cl.sched.run([&] {
    cl.start_services();
    cl.connect_all();
    auto h = DataStructure::create(cl.fe(), spec.kind, 1, options_for(spec));
    preload(*h, spec);
    // Quiesce before the timed window so preload replay does not pollute it.
    cl.sched.sleep(2'000'000);
    cl.fe().trim_overlay();
    cl.fe().purge_cache();
    cl.fe().reset_cache_stats();
    cl.fab.reset_counters();

    KeyDraw draw(spec, 0xBE7C4);
    sim::SimTime t0 = cl.fab.now();
    for (uint64_t i = 0; i < spec.ops; i++) one_op(*h, spec, draw);
    h->fence();
    r.sim_ns = cl.fab.now() - t0;
    fill_counters(r, cl, cl.frontend_node());
    r.cache_miss_ratio = cl.fe().miss_ratio();
    r.final_keys = h->keys().size();
    h->release_locks();
  });
  if (r.sim_ns > 0) r.ops_per_sec = double(spec.ops) * 1e9 / double(r.sim_ns);
  return r;
}

RunReport run_partitioned(WorkloadSpec spec, uint32_t writers) {
  spec.partitions = writers;
  RunReport r;
  r.spec = spec;
  ClusterConfig cc = cluster_for(spec);
  cc.region.num_frontends = writers;
  cc.frontends = writers;
  Cluster cl(cc);
  uint32_t done = 0;
  cl.sched.run([&] {
    cl.start_services();
    cl.connect_all();
    {
      auto h = DataStructure::create(cl.fe(0), spec.kind, 1, options_for(spec));
      preload(*h, spec);
      h->release_locks();
    }
    cl.sched.sleep(2'000'000);
    cl.fab.reset_counters();
    uint64_t per_writer = spec.ops / writers;
    sim::SimTime t0 = cl.fab.now();
    for (uint32_t w = 0; w < writers; w++) {
      cl.sched.spawn("bench-writer" + std::to_string(w), [&, w] {
        auto h = DataStructure::open(cl.fe(w), 1, /*writer=*/true);
        KeyDraw draw(spec, 0xD00D + w);
        for (uint64_t i = 0; i < per_writer; i++) {
          // Each writer owns exactly one partition of the key space.
          uint64_t k;
          do {
            k = draw.key();
          } while (ds::partition_route(k, writers) != w);
          if (draw.is_put(spec.put_pct))
            h->insert(k, draw.rng.next());
          else
            (void)h->find(k);
        }
        h->fence();
        h->release_locks();
        done++;
      });
    }
    while (done < writers) cl.sched.sleep(10000);
    r.sim_ns = cl.fab.now() - t0;
    for (uint32_t w = 0; w < writers; w++) {
      RunReport one;
      fill_counters(one, cl, cl.frontend_node(w));
      r.reads += one.reads;
      r.read_bytes += one.read_bytes;
      r.writes += one.writes;
      r.write_bytes += one.write_bytes;
      r.cas += one.cas;
      r.atomics += one.atomics;
      r.oplog_verbs += one.oplog_verbs;
      r.tx_entry_verbs += one.tx_entry_verbs;
      r.tx_commit_verbs += one.tx_commit_verbs;
      r.data_verbs += one.data_verbs;
    }
    auto h = DataStructure::open(cl.fe(0), 1, /*writer=*/false);
    r.final_keys = h->keys().size();
  });
  if (r.sim_ns > 0) r.ops_per_sec = double(spec.ops) * 1e9 / double(r.sim_ns);
  return r;
}

RunReport run_readers(WorkloadSpec spec, uint32_t readers) {
  if (!block_based(spec.kind)) spec.kind = DsKind::MvBst;  // wait-free readers
  RunReport r;
  r.spec = spec;
  ClusterConfig cc = cluster_for(spec);
  cc.region.num_frontends = 1 + readers;
  cc.frontends = 1 + readers;
  Cluster cl(cc);
  uint32_t done = 0;
  uint64_t reader_ops = 0;
  bool stop_writer = false;
  cl.sched.run([&] {
    cl.start_services();
    cl.connect_all();
    auto h = DataStructure::create(cl.fe(0), spec.kind, 1, options_for(spec));
    preload(*h, spec);
    cl.sched.sleep(2'000'000);
    uint64_t per_reader = spec.ops / std::max(1u, readers);
    sim::SimTime t0 = cl.fab.now();
    cl.sched.spawn("bench-writer", [&] {
      KeyDraw draw(spec, 0xF00D);
      while (!stop_writer) {
        h->insert(draw.key(), draw.rng.next());
        h->fence();
        cl.sched.sleep(5000);
      }
    });
    for (uint32_t i = 0; i < readers; i++) {
      cl.sched.spawn("bench-reader" + std::to_string(i), [&, i] {
        auto rh = DataStructure::open(cl.fe(1 + i), 1, /*writer=*/false);
        KeyDraw draw(spec, 0xCAFE + i);
        for (uint64_t j = 0; j < per_reader; j++) {
          (void)rh->find(draw.key());
          reader_ops++;
        }
        done++;
      });
    }
    while (done < readers) cl.sched.sleep(10000);
    stop_writer = true;
    r.sim_ns = cl.fab.now() - t0;
    for (uint32_t i = 0; i < readers; i++) {
      RunReport one;
      fill_counters(one, cl, cl.frontend_node(1 + i));
      r.reads += one.reads;
      r.read_bytes += one.read_bytes;
      r.atomics += one.atomics;
      r.data_verbs += one.data_verbs;
    }
    r.final_keys = h->keys().size();
    h->release_locks();
  });
  if (r.sim_ns > 0)
    r.ops_per_sec = double(reader_ops) * 1e9 / double(r.sim_ns);
  return r;
}

BankReport run_bank(const BankSpec& spec) {
  BankReport rep;
  WorkloadSpec ws;  // reuse the cluster shape
  ws.kind = spec.bpt_index ? DsKind::Bpt : DsKind::HashTable;
  ws.mode = spec.mode;
  ws.batch = spec.batch;
  ws.seed = spec.seed;
  ws.preload = spec.accounts;
  Cluster cl(cluster_for(ws));
  cl.sched.run([&] {
    cl.start_services();
    cl.connect_all();
    ds::DsOptions opt;
    opt.buckets = std::max<uint64_t>(16, spec.accounts);
    auto h = DataStructure::create(cl.fe(), ws.kind, 1, opt);
    std::map<uint64_t, uint64_t> model;  // acked updates, individually
    for (uint64_t a = 1; a <= spec.accounts; a++) {
      h->insert(a, spec.initial_balance);
      model[a] = spec.initial_balance;
    }
    h->fence();
    cl.sched.sleep(1'000'000);

    Rng rng(spec.seed ^ 0xBA4Bull);
    if (spec.crash) {
      sim::CrashTrigger t;
      t.node = cl.backend_node();
      t.at_event_count = cl.fab.total_events() + 1 + rng.below(spec.transfers * 4);
      cl.fab.schedule_crash(t);
    }

    // The mid-flight update when a crash interrupts a transfer: recovery may
    // land on either side of it.
    bool ambiguous = false;
    uint64_t amb_key = 0, amb_value = 0;
    sim::SimTime t0 = cl.fab.now();
    try {
      for (uint64_t i = 0; i < spec.transfers; i++) {
        uint64_t a = 1 + rng.below(spec.accounts);
        uint64_t b = 1 + rng.below(spec.accounts);
        if (a == b) b = a % spec.accounts + 1;
        uint64_t amount = rng.below(model[a] + 1);
        // Session: two reads, two writes, flush on release.
        auto ra = h->find(a);
        auto rb = h->find(b);
        if (!ra || *ra != model[a] || !rb || *rb != model[b])
          throw std::logic_error("bank read does not match ledger");
        amb_key = a;
        amb_value = model[a] - amount;
        h->insert(a, amb_value);
        model[a] -= amount;
        amb_key = b;
        amb_value = model[b] + amount;
        h->insert(b, amb_value);
        model[b] += amount;
        h->release_locks();
        rep.committed++;
      }
    } catch (const sim::DestinationUnreachable&) {
      rep.crashed = true;
      ambiguous = true;
      h.reset();
      cl.revive_backend();
      cl.crash_frontend(0);
      cl.restart_frontend(0);
      h = DataStructure::open(cl.fe(), 1, /*writer=*/true);
    }
    rep.sim_ns = cl.fab.now() - t0;

    // Verify the index against the acked-update ledger.
    std::map<uint64_t, uint64_t> alt = model;
    if (ambiguous) alt[amb_key] = amb_value;
    auto check = [&](const std::map<uint64_t, uint64_t>& m) {
      for (auto& [k, v] : m) {
        auto got = h->find(k);
        if (!got || *got != v) return false;
      }
      return true;
    };
    rep.state_matches = check(model) || (ambiguous && check(alt));
    uint64_t sum = 0;
    for (uint64_t a = 1; a <= spec.accounts; a++) {
      auto got = h->find(a);
      if (got) sum += *got;
    }
    uint64_t total = spec.accounts * spec.initial_balance;
    uint64_t alt_sum = 0;
    for (auto& [k, v] : alt) alt_sum += v;
    // Without a crash the books balance exactly; with an interrupted transfer
    // the state must still equal one of the two admissible ledgers.
    rep.conserved = sum == total || (ambiguous && rep.state_matches);
    h->release_locks();
  });
  return rep;
}

std::string report_json(const RunReport& r) {
  nlohmann::json j;
  j["kind"] = ds::ds_kind_name(r.spec.kind);
  j["mode"] = fe::mode_name(r.spec.mode);
  j["mix"] = put_get_label(r.spec.put_pct);
  j["dist"] = r.spec.zipfian ? "zipfian" : "uniform";
  j["ops"] = r.spec.ops;
  j["key_space"] = r.spec.key_space;
  j["batch"] = r.spec.batch;
  j["partitions"] = r.spec.partitions;
  j["seed"] = r.spec.seed;
  j["sim_ns"] = r.sim_ns;
  j["ops_per_sec"] = r.ops_per_sec;
  j["verbs"] = {{"read", r.reads},
                {"write", r.writes},
                {"cas", r.cas},
                {"atomic_read", r.atomics}};
  j["bytes"] = {{"read", r.read_bytes}, {"write", r.write_bytes}};
  j["channels"] = {{"oplog", r.oplog_verbs},
                   {"tx_entries", r.tx_entry_verbs},
                   {"tx_commit", r.tx_commit_verbs},
                   {"data", r.data_verbs}};
  j["cache_miss_ratio"] = r.cache_miss_ratio;
  j["final_keys"] = r.final_keys;
  return j.dump();
}

std::string bank_json(const BankReport& r) {
  nlohmann::json j;
  j["committed"] = r.committed;
  j["conserved"] = r.conserved;
  j["state_matches"] = r.state_matches;
  j["crashed"] = r.crashed;
  j["sim_ns"] = r.sim_ns;
  return j.dump();
}

}  // namespace nvf::bench
