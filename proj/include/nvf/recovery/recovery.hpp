#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nvf/backend/node.hpp"
#include "nvf/ds/ds.hpp"
#include "nvf/fe/runtime.hpp"

namespace nvf::recovery {

// --- failure detection ---------------------------------------------------

// Lease-based liveness view. Each participating node runs a renewer task;
// a node whose lease has not been renewed within the window is presumed
// crashed and its recovery procedure may begin.
class LeaseTable {
 public:
  // Default lease window: 10 ms simulated; renewers run at half-life.
  explicit LeaseTable(sim::SimTime lease_ns = 10'000'000) : lease_ns_(lease_ns) {}

  void renew(sim::NodeId n, sim::SimTime now) { last_[n] = now; }
  bool expired(sim::NodeId n, sim::SimTime now) const {
    auto it = last_.find(n);
    return it == last_.end() || now - it->second > lease_ns_;
  }
  std::vector<sim::NodeId> expired_nodes(sim::SimTime now) const;
  sim::SimTime lease_ns() const { return lease_ns_; }

 private:
  sim::SimTime lease_ns_;
  std::map<sim::NodeId, sim::SimTime> last_;
};

// Daemon heartbeat for `node`: renews while the node is alive.
void spawn_lease_renewer(sim::Fabric& fab, LeaseTable& table, sim::NodeId node,
                         sim::SimTime interval_ns);

// --- front-end restart ---------------------------------------------------

struct FrontendRecoveryReport {
  backend::TailState tail = backend::TailState::Empty;
  bool truncated = false;       // a torn, unacknowledged tail was zeroed
  size_t locks_adopted = 0;     // lock words still carrying this node's tag
  size_t reexecuted = 0;        // acked fast-path ops run again
  uint64_t resumed_opn = 0;     // next operation number after recovery
};

// Resumes a front-end session after the previous incarnation crashed.
// The region itself is the recovery log: the back-end drains every committed
// record, a torn (never acknowledged) tail is truncated, and acknowledged
// operation-log entries newer than the replayed horizon are re-executed
// exactly once through the normal code path. Orphaned lock words are adopted
// for the re-execution and released at the end.
FrontendRecoveryReport recover_front_end(fe::FrontendRuntime& fe);

// --- back-end restart ----------------------------------------------------

struct BackendRecoveryReport {
  size_t records_replayed = 0;
  std::vector<backend::TailState> tails;  // per descriptor, after replay
};

// Revived back end: rebuild volatile indexes from the region and drain the
// rings. A torn tail is left in place: a surviving front end retries the
// interrupted flush at the unchanged tail position and overwrites it;
// truncation happens only through a restarting front end's own recovery.
BackendRecoveryReport recover_back_end(backend::BackendNode& be);

// --- mirror promotion ----------------------------------------------------

// Fails over to the mirror: it replays its replica of the rings to catch up,
// then every front end rebinds to it and drops stale cached pages.
void promote_mirror(backend::BackendNode& mirror,
                    const std::vector<fe::FrontendRuntime*>& fes);

// --- orphaned-memory sweep -----------------------------------------------

struct SweepReport {
  uint64_t scanned = 0;            // blocks examined
  std::vector<uint64_t> freed;     // leaked block offsets returned
};

// Frees blocks owned by `fe`'s descriptor that are reachable from nothing:
// not part of any cataloged structure's durable state, not in a slab span the
// front tier still owns, and not queued for deferred reclamation. Run it on a
// quiesced, recovered session (re-execution done, batch flushed).
SweepReport orphan_sweep(sim::Fabric& fab, fe::FrontendRuntime& fe);

// --- cluster harness ------------------------------------------------------

struct ClusterConfig {
  backend::RegionConfig region{};
  fe::FrontendConfig fe{};
  uint32_t frontends = 1;
  bool with_mirror = false;
  bool mirror_replays = true;
  bool lease_renewers = false;
  sim::LatencyConfig latency{};
  uint64_t seed = 1;
  sim::SimTime lease_ns = 10'000'000;
  sim::SimTime lease_renew_ns = 5'000'000;
};

// One back end (optionally mirrored) plus its front ends over a shared
// fabric, with crash/revive choreography. Construction is verb-free; call
// start_services() and connect_all() from inside the scheduler run.
class Cluster {
 public:
  explicit Cluster(ClusterConfig cfg);

  void start_services();
  void connect_all();

  fe::FrontendRuntime& fe(uint32_t i = 0) { return *fes_.at(i); }
  backend::BackendNode& be() { return *be_; }
  backend::BackendNode& mirror_be() { return *mirror_; }
  bool has_mirror() const { return mirror_ != nullptr; }
  sim::NodeId backend_node() const { return be_node_; }
  sim::NodeId mirror_node() const { return mirror_node_; }
  sim::NodeId frontend_node(uint32_t i = 0) const { return fe_nodes_.at(i); }
  sim::NodeId active_backend() const { return active_be_; }

  void crash_backend() { fab.inject_crash_now(be_node_); }
  BackendRecoveryReport revive_backend();  // revive + recover + restart service
  void crash_frontend(uint32_t i);         // volatile session state is gone
  FrontendRecoveryReport restart_frontend(uint32_t i);
  void promote();                          // mirror becomes the active back end

  sim::Scheduler sched;
  sim::Fabric fab;
  LeaseTable leases;

 private:
  void spawn_backend_service(backend::BackendNode* node);

  ClusterConfig cfg_;
  sim::NodeId be_node_ = 0;
  sim::NodeId mirror_node_ = 0;
  sim::NodeId active_be_ = 0;
  std::vector<sim::NodeId> fe_nodes_;
  std::unique_ptr<backend::BackendNode> be_, mirror_;
  std::vector<std::unique_ptr<fe::FrontendRuntime>> fes_;
};

// --- crash matrix ---------------------------------------------------------

// Randomized crash/recovery sweep: each point runs a fresh cluster, drives a
// random workload on one structure kind, injects a back-end or front-end
// crash, recovers everything, and checks the recovered contents against the
// acknowledged-operation model (a mid-flight operation may legitimately land
// on either side of the crash).
struct CrashMatrixConfig {
  uint32_t points = 1000;
  uint64_t seed = 7;
  uint32_t ops_per_run = 32;
};

struct CrashMatrixReport {
  uint32_t runs = 0;
  uint32_t backend_crashes = 0;
  uint32_t frontend_crashes = 0;
  uint32_t midflight_ambiguous = 0;  // runs where an op failed mid-flight
  uint32_t truncations = 0;          // recoveries that zeroed a torn tail
  uint64_t reexecuted = 0;           // total re-executed fast-path ops
  uint32_t failures = 0;
  std::string first_failure;
};

CrashMatrixReport run_crash_matrix(const CrashMatrixConfig& cfg);

}  // namespace nvf::recovery
