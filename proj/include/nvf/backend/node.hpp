#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nvf/backend/layout.hpp"
#include "nvf/sim/fabric.hpp"

namespace nvf::backend {

enum class TailState : uint8_t { Empty, Consistent, Inconsistent };

struct MirrorConfig {
  sim::NodeId node = 0;
  bool replays = true;  // NVM-equipped mirrors run their own replay
};

// The passive NVM node. All remote interaction happens through verbs issued
// by front-ends; the only verbs this node ever issues carry the mirror
// replication stream. Volatile state here is only an index over durable
// structures and is rebuilt by recover().
class BackendNode {
 public:
  BackendNode(sim::Fabric& fab, sim::NodeId self);

  // Formats a fresh region image on `node` (host-side initialization).
  static void format(sim::Fabric& fab, sim::NodeId node, const RegionConfig& cfg);

  // Installs the remote-write replication hook and rebuilds volatile indexes.
  // Called both on first start and when reviving after a crash.
  void start();

  void attach_mirror(MirrorConfig m);
  const std::optional<MirrorConfig>& mirror() const { return mirror_; }

  // Daemon loop: mailbox service, replay, deferred reclamation.
  void run_service_task();

  // One service pass; exposed for tests that single-step the node.
  void service_once();

  // Replays every currently valid record across all descriptors; returns the
  // number of records applied.
  size_t replay_step();

  TailState validate_last_tx(uint32_t desc);

  // Zeroes torn suffixes in both rings; call after replay has drained all
  // committed records. Also reachable remotely via the mailbox.
  void truncate_torn_tails(uint32_t desc);

  const RegionGeometry& geom() const { return g_; }
  sim::NodeId id() const { return self_; }
  uint64_t seqno() const;
  uint64_t lpn(uint32_t desc) const;
  uint64_t opn(uint32_t desc) const;
  uint64_t work_units() const { return work_units_; }
  sim::SimTime poll_interval() const { return poll_interval_ns_; }

  // Local allocator entry points (also used by the recovery sweep).
  std::vector<uint64_t> alloc_blocks(uint32_t count, bool contiguous, uint8_t owner);
  // Returns the count of double frees detected (signaled and ignored).
  uint32_t free_blocks(const std::vector<uint64_t>& offs);
  void deferred_free(uint64_t block_off, sim::SimTime delay_ns);
  void process_deferred();
  bool block_allocated(uint64_t block_off) const;
  uint8_t block_owner(uint64_t block_off) const;
  void set_block_owner(uint64_t block_off, uint8_t owner);
  uint64_t allocated_count() const;
  std::vector<uint64_t> deferred_pending() const;
  void clear_block(uint64_t block_off);  // sweep: clear bit + owner

  uint8_t* mem() { return fab_.region_data(self_); }
  const uint8_t* mem() const { return fab_.region_data(self_); }

 private:
  void handle_mailboxes();
  void handle_request(uint32_t desc);
  void bump_seqno();
  void advance_oplog_scan(uint32_t desc, uint64_t covered_opn);
  void replicate(uint64_t off, uint64_t len);       // both mirror kinds
  void replicate_data(uint64_t off, uint64_t len);  // non-replaying mirrors only

  sim::Fabric& fab_;
  sim::NodeId self_;
  RegionGeometry g_;
  std::optional<MirrorConfig> mirror_;
  sim::SimTime poll_interval_ns_ = 1000;
  uint64_t work_units_ = 0;
  // volatile indexes
  std::vector<uint64_t> last_req_seq_;
  uint64_t first_free_hint_ = 0;
  std::vector<uint32_t> active_deferred_;
};

// Region snapshot to a file, for recovery tests and offline inspection.
void save_region(const sim::Fabric& fab, sim::NodeId node, const std::string& path);
void load_region(sim::Fabric& fab, sim::NodeId node, const std::string& path);

}  // namespace nvf::backend
