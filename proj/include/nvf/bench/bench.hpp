#pragma once

#include <string>
#include <vector>

#include "nvf/ds/ds.hpp"
#include "nvf/recovery/recovery.hpp"

namespace nvf::bench {

// One benchmark run: a seeded put/get mix against a single structure on a
// fresh cluster, measured entirely in simulated time.
struct WorkloadSpec {
  ds::DsKind kind = ds::DsKind::Bst;
  fe::Mode mode = fe::Mode::RCB;
  uint32_t put_pct = 50;      // {100, 50, 25, 10, 0}
  bool zipfian = false;
  double zipf_s = 0.99;
  uint64_t ops = 10000;
  uint64_t key_space = 1024;
  uint64_t preload = 512;     // keys inserted before the timed window
  uint32_t batch = 64;
  uint32_t partitions = 1;
  uint32_t cache_pages = 0;   // 0 = ~10% of the preloaded footprint
  uint32_t rr_set = 32;
  uint64_t seed = 1;
  bool mirror = false;
};

struct RunReport {
  WorkloadSpec spec;
  uint64_t sim_ns = 0;        // timed window, simulated
  double ops_per_sec = 0;     // ops / simulated second
  uint64_t reads = 0, writes = 0, cas = 0, atomics = 0;  // front-end verbs
  uint64_t read_bytes = 0, write_bytes = 0;
  uint64_t oplog_verbs = 0, tx_entry_verbs = 0, tx_commit_verbs = 0,
           data_verbs = 0;
  double cache_miss_ratio = 0;
  uint64_t final_keys = 0;    // structure size after the run (sanity anchor)
};

RunReport run_workload(const WorkloadSpec& spec);

// Multi-writer variant: `writers` front ends, one partition each, keys
// filtered by the deterministic router. Aggregate simulated throughput.
RunReport run_partitioned(WorkloadSpec spec, uint32_t writers);

// Read-scaling variant: one writer plus `readers` wait-free MV readers;
// reports aggregate reader throughput (writer traffic excluded).
RunReport run_readers(WorkloadSpec spec, uint32_t readers);

// Modes that apply to a kind: O(1) structures have no separate cache step.
std::vector<fe::Mode> modes_for(ds::DsKind kind);

// Reduced bank benchmark: fixed accounts in a hash-table or B+tree index;
// each transfer is two reads and two writes inside one lock session.
struct BankSpec {
  bool bpt_index = false;
  uint32_t accounts = 64;
  uint64_t transfers = 10000;
  uint64_t initial_balance = 1000;
  fe::Mode mode = fe::Mode::RCB;
  uint32_t batch = 8;
  uint64_t seed = 1;
  bool crash = false;  // inject one back-end crash mid-run, then recover
};

struct BankReport {
  uint64_t committed = 0;       // transfers with both updates acknowledged
  bool conserved = false;       // model balances sum to the initial total
  bool state_matches = false;   // recovered state equals the acked-op model
  bool crashed = false;
  uint64_t sim_ns = 0;
};

BankReport run_bank(const BankSpec& spec);

// One LDJSON line per report.
std::string report_json(const RunReport& r);
std::string bank_json(const BankReport& r);

const char* put_get_label(uint32_t put_pct);

}  // namespace nvf::bench
