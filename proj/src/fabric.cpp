#include "nvf/sim/fabric.hpp"

#include <cassert>
#include <cstring>

namespace nvf::sim {

const char* verb_kind_name(VerbKind k) {
  switch (k) {
    case VerbKind::ReadVerb: return "read";
    case VerbKind::WriteVerb: return "write";
    case VerbKind::CompareAndSwap64: return "cas64";
    case VerbKind::AtomicRead64: return "aread64";
  }
  return "?";
}

const char* channel_name(Channel c) {
  switch (c) {
    case Channel::Data: return "data";
    case Channel::OpLog: return "oplog";
    case Channel::TxEntries: return "tx_entries";
    case Channel::TxCommit: return "tx_commit";
    case Channel::Lock: return "lock";
    case Channel::Mailbox: return "mailbox";
    case Channel::Replication: return "replication";
    case Channel::Meta: return "meta";
  }
  return "?";
}

NodeId Fabric::add_node(std::string name, uint64_t region_capacity) {
  Node n;
  n.name = std::move(name);
  n.region.assign(region_capacity, 0);
  nodes_.push_back(std::move(n));
  return NodeId(nodes_.size() - 1);
}

void Fabric::check_time_triggers() {
  for (auto& t : triggers_) {
    if (!t.fired && t.at_time && *t.at_time <= sched_.now()) {
      t.fired = true;
      inject_crash_now(t.node);
    }
  }
}

bool Fabric::consume_midflight_trigger(NodeId dst) {
  for (auto& t : triggers_) {
    if (t.fired) continue;
    if (t.at_event_count && *t.at_event_count == event_count_) {
      t.fired = true;
      if (t.node == dst) return true;
      inject_crash_now(t.node);
    }
  }
  return false;
}

void Fabric::check_bounds(NodeId dst, uint64_t address, uint64_t length) const {
  const Node& n = nodes_.at(dst);
  if (address + length > n.region.size())
    throw std::out_of_range("verb outside registered region of node " + n.name);
}

void Fabric::record(const FabricEvent& ev) {
  if (trace_enabled_) trace_.push_back(ev);
}

void Fabric::count(NodeId src, VerbKind k, Channel ch, uint64_t bytes) {
  auto& c = counters_[{src, uint8_t(k)}];
  c.count++;
  c.bytes += bytes;
  auto& cc = channel_counters_[{src, uint8_t(ch)}];
  cc.count++;
  cc.bytes += bytes;
}

const VerbCounter& Fabric::counter(NodeId src, VerbKind k) const {
  static const VerbCounter zero{};
  auto it = counters_.find({src, uint8_t(k)});
  return it == counters_.end() ? zero : it->second;
}

const VerbCounter& Fabric::channel_counter(NodeId src, Channel c) const {
  static const VerbCounter zero{};
  auto it = channel_counters_.find({src, uint8_t(c)});
  return it == channel_counters_.end() ? zero : it->second;
}

void Fabric::reset_counters() {
  counters_.clear();
  channel_counters_.clear();
}

Bytes Fabric::verb_read(NodeId src, NodeId dst, uint64_t address, uint32_t length,
                        Channel ch) {
  if (!nodes_.at(src).alive) throw NodeCrashed(src);
  check_time_triggers();
  check_bounds(dst, address, length);
  event_count_++;
  count(src, VerbKind::ReadVerb, ch, length);
  FabricEvent ev{sched_.now(), 0, src, dst, VerbKind::ReadVerb, ch, address, length};
  bool midflight = consume_midflight_trigger(dst);
  sched_.sleep(lat_.rtt_ns);
  check_time_triggers();
  ev.complete_time = sched_.now();
  if (midflight) inject_crash_now(dst);
  if (!nodes_.at(dst).alive) {
    ev.outcome = Outcome::Unreachable;
    record(ev);
    throw DestinationUnreachable(dst);
  }
  record(ev);
  const Node& n = nodes_.at(dst);
  return Bytes(n.region.begin() + address, n.region.begin() + address + length);
}

void Fabric::verb_write(NodeId src, NodeId dst, uint64_t address,
                        std::span<const uint8_t> payload, Channel ch) {
  if (!nodes_.at(src).alive) throw NodeCrashed(src);
  check_time_triggers();
  check_bounds(dst, address, payload.size());
  event_count_++;
  count(src, VerbKind::WriteVerb, ch, payload.size());
  FabricEvent ev{sched_.now(), 0, src, dst, VerbKind::WriteVerb, ch,
                 address, uint32_t(payload.size())};
  SimTime t0 = sched_.now();
  SimTime t1 = t0 + lat_.rtt_ns + lat_.nvm_write_ns;

  bool torn = consume_midflight_trigger(dst);
  if (!torn) {
    for (auto& t : triggers_) {
      if (!t.fired && t.node == dst && t.at_time && *t.at_time > t0 && *t.at_time <= t1) {
        t.fired = true;
        torn = true;
      }
    }
  }
  if (!nodes_.at(dst).alive) {
    sched_.sleep(lat_.rtt_ns);
    ev.complete_time = sched_.now();
    ev.outcome = Outcome::Unreachable;
    record(ev);
    throw DestinationUnreachable(dst);
  }
  if (torn) {
    // A crash between issue and completion leaves a seeded pseudo-random
    // prefix of the payload durable.
    uint64_t prefix = payload.empty() ? 0 : torn_rng_.below(payload.size());
    if (prefix > 0)
      std::memcpy(nodes_.at(dst).region.data() + address, payload.data(), prefix);
    inject_crash_now(dst);
    sched_.sleep(lat_.rtt_ns);
    ev.complete_time = sched_.now();
    ev.outcome = Outcome::Torn;
    record(ev);
    throw DestinationUnreachable(dst);
  }
  sched_.sleep(t1 - t0);
  check_time_triggers();
  ev.complete_time = sched_.now();
  record(ev);
  Node& n = nodes_.at(dst);
  std::memcpy(n.region.data() + address, payload.data(), payload.size());
  if (n.write_hook) n.write_hook(address, payload);
}

uint64_t Fabric::verb_cas64(NodeId src, NodeId dst, uint64_t address,
                            uint64_t expected, uint64_t swap, Channel ch) {
  if (!nodes_.at(src).alive) throw NodeCrashed(src);
  check_time_triggers();
  if (address % 8 != 0) throw MisalignedAtomic();
  check_bounds(dst, address, 8);
  event_count_++;
  count(src, VerbKind::CompareAndSwap64, ch, 8);
  FabricEvent ev{sched_.now(), 0, src, dst, VerbKind::CompareAndSwap64, ch, address, 8};
  bool midflight = consume_midflight_trigger(dst);
  sched_.sleep(lat_.rtt_ns);
  check_time_triggers();
  ev.complete_time = sched_.now();
  if (midflight) inject_crash_now(dst);
  if (!nodes_.at(dst).alive) {
    ev.outcome = Outcome::Unreachable;
    record(ev);
    throw DestinationUnreachable(dst);
  }
  Node& n = nodes_.at(dst);
  uint64_t prev = load_u64(n.region.data() + address);
  if (prev == expected) {
    store_u64(n.region.data() + address, swap);
    Bytes b = to_bytes_u64(swap);
    if (n.write_hook) n.write_hook(address, b);
  } else {
    ev.outcome = Outcome::CasFailed;
  }
  record(ev);
  return prev;
}

uint64_t Fabric::verb_atomic_read64(NodeId src, NodeId dst, uint64_t address,
                                    Channel ch) {
  if (!nodes_.at(src).alive) throw NodeCrashed(src);
  check_time_triggers();
  if (address % 8 != 0) throw MisalignedAtomic();
  check_bounds(dst, address, 8);
  event_count_++;
  count(src, VerbKind::AtomicRead64, ch, 8);
  FabricEvent ev{sched_.now(), 0, src, dst, VerbKind::AtomicRead64, ch, address, 8};
  bool midflight = consume_midflight_trigger(dst);
  sched_.sleep(lat_.rtt_ns);
  check_time_triggers();
  ev.complete_time = sched_.now();
  if (midflight) inject_crash_now(dst);
  if (!nodes_.at(dst).alive) {
    ev.outcome = Outcome::Unreachable;
    record(ev);
    throw DestinationUnreachable(dst);
  }
  record(ev);
  return load_u64(nodes_.at(dst).region.data() + address);
}

void Fabric::inject_crash_now(NodeId n) {
  Node& node = nodes_.at(n);
  node.alive = false;
  node.write_hook = nullptr;  // volatile state of the node's logic is gone
}

void Fabric::revive(NodeId n) { nodes_.at(n).alive = true; }

}  // namespace nvf::sim
