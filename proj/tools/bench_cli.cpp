// nvfabric-bench: workload driver for the simulated disaggregated-NVM stack.
//
// Subcommands:
//   run          one seeded workload, one structure, one mode
//   sweep        vary one parameter over a list of values
//   crash-matrix randomized crash/recovery sweep with model validation
//   bank         reduced account-transfer benchmark (conservation checks)
//
// Every result is printed as one line-delimited JSON record on stdout plus a
// human-readable table; the exit code is nonzero if any invariant check
// (crash-matrix failures, bank conservation, bank state match) is violated.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nvf/bench/bench.hpp"

using namespace nvf;
using bench::BankSpec;
using bench::RunReport;
using bench::WorkloadSpec;

namespace {

const std::map<std::string, ds::DsKind> kKinds = {
    {"stack", ds::DsKind::Stack},     {"queue", ds::DsKind::Queue},
    {"hash", ds::DsKind::HashTable},  {"skiplist", ds::DsKind::SkipList},
    {"bst", ds::DsKind::Bst},         {"bpt", ds::DsKind::Bpt},
    {"mvbst", ds::DsKind::MvBst},     {"mvbpt", ds::DsKind::MvBpt}};

const std::map<std::string, fe::Mode> kModes = {{"naive", fe::Mode::Naive},
                                                {"r", fe::Mode::R},
                                                {"rc", fe::Mode::RC},
                                                {"rcb", fe::Mode::RCB}};

void add_workload_flags(CLI::App* cmd, WorkloadSpec& spec) {
  cmd->add_option("--kind", spec.kind, "data structure")
      ->transform(CLI::CheckedTransformer(kKinds, CLI::ignore_case));
  cmd->add_option("--mode", spec.mode, "front-end mode (naive|r|rc|rcb)")
      ->transform(CLI::CheckedTransformer(kModes, CLI::ignore_case));
  cmd->add_option("--put-pct", spec.put_pct, "write percentage (100/50/25/10/0)")
      ->check(CLI::Range(0, 100));
  cmd->add_flag("--zipfian", spec.zipfian, "Zipfian key popularity");
  cmd->add_option("--zipf-s", spec.zipf_s, "Zipfian skew parameter");
  cmd->add_option("--ops", spec.ops, "operations in the timed window");
  cmd->add_option("--key-space", spec.key_space, "distinct keys");
  cmd->add_option("--preload", spec.preload, "keys inserted before timing");
  cmd->add_option("--batch", spec.batch, "flush batch size")
      ->check(CLI::Range(1, 4096));
  cmd->add_option("--partitions", spec.partitions, "key-space partitions");
  cmd->add_option("--cache-pages", spec.cache_pages,
                  "page-cache capacity (0 = 10% of data footprint)");
  cmd->add_option("--rr-set", spec.rr_set, "random-replacement set size");
  cmd->add_option("--seed", spec.seed, "run seed");
  cmd->add_flag("--mirror", spec.mirror, "attach a replicating mirror");
}

void print_header() {
  std::printf("%-9s %-6s %-11s %-8s %10s %12s %12s %8s\n", "kind", "mode",
              "mix", "dist", "ops", "sim_ms", "ops/sec", "miss");
}

void print_row(const RunReport& r) {
  std::printf("%-9s %-6s %-11s %-8s %10llu %12.3f %12.0f %7.1f%%\n",
              ds::ds_kind_name(r.spec.kind), fe::mode_name(r.spec.mode),
              bench::put_get_label(r.spec.put_pct),
              r.spec.zipfian ? "zipfian" : "uniform",
              (unsigned long long)r.spec.ops, double(r.sim_ns) / 1e6,
              r.ops_per_sec, r.cache_miss_ratio * 100.0);
}

int cmd_run(const WorkloadSpec& spec, uint32_t writers, uint32_t readers) {
  RunReport r;
  if (writers > 1)
    r = bench::run_partitioned(spec, writers);
  else if (readers > 0)
    r = bench::run_readers(spec, readers);
  else
    r = bench::run_workload(spec);
  std::printf("%s\n", bench::report_json(r).c_str());
  print_header();
  print_row(r);
  return 0;
}

int cmd_sweep(WorkloadSpec spec, const std::string& param,
              std::vector<uint64_t> values) {
  if (values.empty()) {
    if (param == "batch_size")
      values = {1, 4, 16, 64, 256, 1024, 4096};
    else if (param == "cache_capacity")
      values = {4, 16, 64, 256};
    else if (param == "rr_set_size")
      values = {4, 8, 16, 32, 64};
    else if (param == "partitions" || param == "readers")
      values = {1, 2, 4, 8};
  }
  std::vector<RunReport> rows;
  for (uint64_t v : values) {
    WorkloadSpec s = spec;
    uint32_t writers = 1, readers = 0;
    if (param == "batch_size")
      s.batch = uint32_t(v);
    else if (param == "cache_capacity")
      s.cache_pages = uint32_t(v);
    else if (param == "rr_set_size")
      s.rr_set = uint32_t(v);
    else if (param == "partitions")
      writers = uint32_t(v);
    else if (param == "readers")
      readers = uint32_t(v);
    else {
      std::fprintf(stderr,
                   "unknown sweep parameter '%s' (batch_size, cache_capacity, "
                   "rr_set_size, partitions, readers)\n",
                   param.c_str());
      return 2;
    }
    RunReport r = writers > 1  ? bench::run_partitioned(s, writers)
                  : readers > 0 ? bench::run_readers(s, readers)
                                : bench::run_workload(s);
    std::printf("%s\n", bench::report_json(r).c_str());
    rows.push_back(r);
  }
  std::printf("sweep over %s:\n", param.c_str());
  print_header();
  for (size_t i = 0; i < rows.size(); i++) {
    std::printf("%s=%llu\n  ", param.c_str(), (unsigned long long)values[i]);
    print_row(rows[i]);
  }
  return 0;
}

int cmd_crash_matrix(const recovery::CrashMatrixConfig& cfg) {
  recovery::CrashMatrixReport rep = recovery::run_crash_matrix(cfg);
  std::printf(
      "{\"runs\":%u,\"backend_crashes\":%u,\"frontend_crashes\":%u,"
      "\"midflight_ambiguous\":%u,\"truncations\":%u,\"reexecuted\":%llu,"
      "\"failures\":%u}\n",
      rep.runs, rep.backend_crashes, rep.frontend_crashes,
      rep.midflight_ambiguous, rep.truncations,
      (unsigned long long)rep.reexecuted, rep.failures);
  std::printf("crash matrix: %u runs, %u be / %u fe crashes, %u ambiguous, "
              "%u truncations, %llu re-executed, %u failures\n",
              rep.runs, rep.backend_crashes, rep.frontend_crashes,
              rep.midflight_ambiguous, rep.truncations,
              (unsigned long long)rep.reexecuted, rep.failures);
  if (rep.failures) {
    std::fprintf(stderr, "first failure: %s\n", rep.first_failure.c_str());
    return 1;
  }
  return 0;
}

int cmd_bank(const BankSpec& spec) {
  bench::BankReport rep = bench::run_bank(spec);
  std::printf("%s\n", bench::bank_json(rep).c_str());
  std::printf("bank: %llu committed, crashed=%s, conserved=%s, state=%s, "
              "%.3f sim ms\n",
              (unsigned long long)rep.committed, rep.crashed ? "yes" : "no",
              rep.conserved ? "ok" : "VIOLATED",
              rep.state_matches ? "ok" : "MISMATCH", double(rep.sim_ns) / 1e6);
  return (rep.conserved && rep.state_matches) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Benchmark driver for the simulated disaggregated-NVM stack"};
  app.require_subcommand(1);

  WorkloadSpec spec;
  uint32_t writers = 1, readers = 0;
  auto* run = app.add_subcommand("run", "one seeded workload");
  add_workload_flags(run, spec);
  run->add_option("--writers", writers, "partitioned writers (each its own FE)");
  run->add_option("--readers", readers, "wait-free MV readers (1 writer)");

  WorkloadSpec sweep_spec;
  std::string sweep_param = "batch_size";
  std::vector<uint64_t> sweep_values;
  auto* sweep = app.add_subcommand("sweep", "vary one parameter");
  add_workload_flags(sweep, sweep_spec);
  sweep->add_option("--param", sweep_param,
                    "batch_size|cache_capacity|rr_set_size|partitions|readers");
  sweep->add_option("--values", sweep_values, "explicit value list");

  recovery::CrashMatrixConfig mcfg;
  auto* matrix = app.add_subcommand("crash-matrix", "randomized crash sweep");
  matrix->add_option("--points", mcfg.points, "crash points");
  matrix->add_option("--seed", mcfg.seed, "matrix seed");
  matrix->add_option("--ops", mcfg.ops_per_run, "ops per point");

  BankSpec bank;
  auto* bankcmd = app.add_subcommand("bank", "account-transfer benchmark");
  bankcmd->add_flag("--bpt", bank.bpt_index, "use the B+tree index (default hash)");
  bankcmd->add_option("--accounts", bank.accounts, "account count");
  bankcmd->add_option("--transfers", bank.transfers, "transfer count");
  bankcmd->add_option("--balance", bank.initial_balance, "initial balance");
  bankcmd->add_option("--mode", bank.mode, "front-end mode")
      ->transform(CLI::CheckedTransformer(kModes, CLI::ignore_case));
  bankcmd->add_option("--batch", bank.batch, "flush batch size");
  bankcmd->add_option("--seed", bank.seed, "run seed");
  bankcmd->add_flag("--crash", bank.crash, "inject a back-end crash mid-run");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return cmd_run(spec, writers, readers);
  if (sweep->parsed()) return cmd_sweep(sweep_spec, sweep_param, sweep_values);
  if (matrix->parsed()) return cmd_crash_matrix(mcfg);
  return cmd_bank(bank);
}
