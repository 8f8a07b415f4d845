#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvf/bytes.hpp"
#include "nvf/rng.hpp"
#include "nvf/sim/sched.hpp"

namespace nvf::sim {

using NodeId = uint32_t;

enum class VerbKind : uint8_t { ReadVerb, WriteVerb, CompareAndSwap64, AtomicRead64 };

// Why a verb was issued; used by tests and reports to attribute traffic to a
// channel (fast-path op logs vs. batch flush vs. control traffic).
enum class Channel : uint8_t {
  Data,        // direct data-area reads/writes
  OpLog,       // operation-log fast path
  TxEntries,   // memory-log record body
  TxCommit,    // separate commit verb (memory-log-only mode)
  Lock,        // lock words + lock-ahead records
  Mailbox,     // request/response polling
  Replication, // back-end -> mirror stream
  Meta,        // naming area, root refs, LPN reads
};

const char* verb_kind_name(VerbKind k);
const char* channel_name(Channel c);

struct LatencyConfig {
  SimTime rtt_ns = 2000;      // one verb round trip
  SimTime nvm_write_ns = 200; // charged at the destination before durability
  SimTime dram_read_ns = 0;
};

enum class Outcome : uint8_t { Ok, Unreachable, Torn, CasFailed };

struct FabricEvent {
  SimTime issue_time = 0;
  SimTime complete_time = 0;
  NodeId src = 0;
  NodeId dst = 0;
  VerbKind kind{};
  Channel channel{};
  uint64_t address = 0;
  uint32_t length = 0;
  Outcome outcome = Outcome::Ok;
};

struct VerbCounter {
  uint64_t count = 0;
  uint64_t bytes = 0;
};

struct DestinationUnreachable : std::runtime_error {
  explicit DestinationUnreachable(NodeId n)
      : std::runtime_error("destination unreachable: node " + std::to_string(n)) {}
};
struct MisalignedAtomic : std::runtime_error {
  MisalignedAtomic() : std::runtime_error("atomic verb requires 8-byte alignment") {}
};
struct NodeCrashed : std::runtime_error {
  explicit NodeCrashed(NodeId n)
      : std::runtime_error("node crashed: " + std::to_string(n)) {}
};

// Crash trigger: fires either at a simulated time or when the global verb
// count reaches a value. A count trigger takes effect on that verb itself
// (a write in flight to the dying node is torn).
struct CrashTrigger {
  NodeId node = 0;
  std::optional<SimTime> at_time;
  std::optional<uint64_t> at_event_count;
  bool fired = false;
};

// Deterministic one-sided-verb fabric over the cooperative scheduler.
// Registered regions are durable: they survive crash/revive. Volatile node
// state lives in the objects that model each node and is discarded by their
// owners on crash.
class Fabric {
 public:
  Fabric(Scheduler& sched, LatencyConfig lat, uint64_t seed)
      : sched_(sched), lat_(lat), torn_rng_(seed ^ 0x7061796Cull) {}

  Scheduler& sched() { return sched_; }
  SimTime now() const { return sched_.now(); }
  const LatencyConfig& latency() const { return lat_; }

  NodeId add_node(std::string name, uint64_t region_capacity = 0);
  bool alive(NodeId n) const { return nodes_.at(n).alive; }
  uint64_t region_capacity(NodeId n) const { return nodes_.at(n).region.size(); }

  // Direct durable access for the node's own (local) logic and for test
  // oracles. Local access issues no verbs.
  uint8_t* region_data(NodeId n) { return nodes_.at(n).region.data(); }
  const uint8_t* region_data(NodeId n) const { return nodes_.at(n).region.data(); }
  Bytes region_snapshot(NodeId n) const { return nodes_.at(n).region; }
  void region_restore(NodeId n, const Bytes& b) { nodes_.at(n).region = b; }

  // One-sided verbs; callable only from task context. Each advances the
  // simulated clock by the RTT (plus NVM write latency for writes).
  Bytes verb_read(NodeId src, NodeId dst, uint64_t address, uint32_t length,
                  Channel ch = Channel::Data);
  void verb_write(NodeId src, NodeId dst, uint64_t address,
                  std::span<const uint8_t> payload, Channel ch = Channel::Data);
  uint64_t verb_cas64(NodeId src, NodeId dst, uint64_t address, uint64_t expected,
                      uint64_t swap, Channel ch = Channel::Lock);
  uint64_t verb_atomic_read64(NodeId src, NodeId dst, uint64_t address,
                              Channel ch = Channel::Meta);

  // Crash injection / revival.
  // Applies any due time-based triggers; verb paths call this implicitly, a
  // monitoring task that only inspects liveness must call it itself.
  void poll_triggers() { check_time_triggers(); }
  void inject_crash_now(NodeId n);
  void schedule_crash(CrashTrigger t) { triggers_.push_back(t); }
  void revive(NodeId n);

  // Called by a node's write path at completion of a remote write into its
  // region; used for mirror replication. Runs in the issuing task's context.
  using WriteHook = std::function<void(uint64_t address, std::span<const uint8_t>)>;
  void set_write_hook(NodeId n, WriteHook h) { nodes_.at(n).write_hook = std::move(h); }
  void clear_write_hook(NodeId n) { nodes_.at(n).write_hook = nullptr; }

  // Counters and trace.
  const VerbCounter& counter(NodeId src, VerbKind k) const;
  const VerbCounter& channel_counter(NodeId src, Channel c) const;
  uint64_t total_events() const { return event_count_; }
  void reset_counters();

  void enable_trace(bool on) { trace_enabled_ = on; }
  const std::vector<FabricEvent>& trace() const { return trace_; }
  void clear_trace() { trace_.clear(); }

 private:
  struct Node {
    std::string name;
    bool alive = true;
    Bytes region;  // durable; empty for pure front-ends
    WriteHook write_hook;
  };

  void check_time_triggers();
  // Returns true if a trigger kills `dst` during this very verb.
  bool consume_midflight_trigger(NodeId dst);
  void check_bounds(NodeId dst, uint64_t address, uint64_t length) const;
  void record(const FabricEvent& ev);
  void count(NodeId src, VerbKind k, Channel ch, uint64_t bytes);

  Scheduler& sched_;
  LatencyConfig lat_;
  Rng torn_rng_;
  std::vector<Node> nodes_;
  std::vector<CrashTrigger> triggers_;
  uint64_t event_count_ = 0;
  std::map<std::pair<NodeId, uint8_t>, VerbCounter> counters_;
  std::map<std::pair<NodeId, uint8_t>, VerbCounter> channel_counters_;
  bool trace_enabled_ = false;
  std::vector<FabricEvent> trace_;
};

}  // namespace nvf::sim
