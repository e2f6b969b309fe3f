#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mmdistill/report.hpp"
#include "mmdistill/sweep.hpp"
#include "oracles.hpp"

using Catch::Matchers::ContainsSubstring;
using mmd::json;
namespace fs = std::filesystem;

namespace {

struct RunOut {
  int exit_code = -1;
  std::string output;
};

RunOut run(const std::string& args) {
  std::string cmd = std::string(MMDISTILL_BIN) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  RunOut r;
  char buf[512];
  while (fgets(buf, sizeof(buf), p)) r.output += buf;
  int st = pclose(p);
  r.exit_code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

fs::path work_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("mmd_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

const std::string kGenArgs =
    "--classes 3 --size 16 --caption-dim 4 --train-per-class 20 --test-per-class 8 "
    "--clutter distractors --seed 1";

}  // namespace

TEST_CASE("gen-data: identical seeds give identical artifact bytes", "[cli]") {
  auto dir = work_dir("gen");
  REQUIRE(run("gen-data " + kGenArgs + " --out " + (dir / "a").string()).exit_code == 0);
  REQUIRE(run("gen-data " + kGenArgs + " --out " + (dir / "b").string()).exit_code == 0);
  for (const char* f : {"manifest.json", "train.f64.bin", "train.u8.bin", "test.f64.bin",
                        "test.u8.bin"}) {
    INFO(f);
    REQUIRE(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
}

TEST_CASE("distill: unknown method exits nonzero and lists valid methods", "[cli]") {
  auto dir = work_dir("badmethod");
  REQUIRE(run("gen-data " + kGenArgs + " --out " + (dir / "d").string()).exit_code == 0);
  RunOut r = run("distill --data " + (dir / "d").string() + " --method foo --out " +
                 (dir / "o").string());
  REQUIRE(r.exit_code != 0);
  REQUIRE_THAT(r.output, ContainsSubstring("dc") && ContainsSubstring("masked_dm") &&
                             ContainsSubstring("cap_match"));
}

TEST_CASE("distill: missing dataset path exits nonzero naming the path", "[cli]") {
  auto dir = work_dir("missing");
  RunOut r = run("distill --data " + (dir / "nope").string() + " --method dc --out " +
                 (dir / "o").string());
  REQUIRE(r.exit_code != 0);
  REQUIRE_THAT(r.output, ContainsSubstring((dir / "nope").string()));
}

TEST_CASE("config files: unknown keys are rejected", "[cli]") {
  auto dir = work_dir("badkey");
  std::ofstream(dir / "cfg.json") << R"({"method":"dc","iteratiosn":5})";
  REQUIRE(run("gen-data " + kGenArgs + " --out " + (dir / "d").string()).exit_code == 0);
  RunOut r = run("distill --data " + (dir / "d").string() + " --config " +
                 (dir / "cfg.json").string() + " --out " + (dir / "o").string());
  REQUIRE(r.exit_code != 0);
  REQUIRE_THAT(r.output, ContainsSubstring("iteratiosn"));
}

TEST_CASE("distill: rerunning from the echoed config reproduces artifacts bitwise", "[cli]") {
  auto dir = work_dir("echo");
  REQUIRE(run("gen-data " + kGenArgs + " --out " + (dir / "d").string()).exit_code == 0);
  std::string flags = "--method masked_dm --ipc 1 --iters 5 --nb 4 --net-width 8 "
                      "--net-depth 2 --seed 3";
  REQUIRE(run("distill --data " + (dir / "d").string() + " " + flags + " --out " +
              (dir / "r1").string())
              .exit_code == 0);
  REQUIRE(run("distill --config " + (dir / "r1" / "config.json").string() + " --out " +
              (dir / "r2").string())
              .exit_code == 0);
  for (const char* f : {"distilled/syn.f64.bin", "distilled/syn.u8.bin",
                        "distilled/manifest.json", "loss_trace.csv"}) {
    INFO(f);
    REQUIRE(slurp(dir / "r1" / f) == slurp(dir / "r2" / f));
  }
}

TEST_CASE("sweep: cell grid, aggregate recomputation, resume", "[cli][slow]") {
  auto dir = work_dir("sweep");
  REQUIRE(run("gen-data " + kGenArgs + " --out " + (dir / "d").string()).exit_code == 0);
  json cfg = {
      {"datasets", {(dir / "d").string()}},
      {"methods", {"dc", "dm"}},
      {"seeds", {1, 2}},
      {"distill",
       {{"ipc", 1}, {"iterations", 5}, {"batch_nb", 4}, {"net_width", 8}, {"net_depth", 2}}},
      {"eval",
       {{"epochs", 20}, {"num_seeds", 2}, {"baselines", false}, {"net_width", 8},
        {"net_depth", 2}}}};
  std::ofstream(dir / "sweep.json") << cfg.dump(2);

  RunOut r1 = run("sweep --config " + (dir / "sweep.json").string() + " --out " +
                  (dir / "out").string() + " --workers 2");
  INFO(r1.output);
  REQUIRE(r1.exit_code == 0);
  REQUIRE_THAT(r1.output, ContainsSubstring("4 cells"));

  // aggregate rows: one per (method, dataset)
  auto agg = mmd::parse_csv(dir / "out" / "aggregate.csv");
  REQUIRE(agg.size() == 3);  // header + dc + dm
  REQUIRE(agg[0] == std::vector<std::string>{"method", "dataset", "mean", "std"});

  // recomputation oracle: aggregate means equal hand-computed means from
  // the per-cell CSVs
  for (std::size_t row = 1; row < agg.size(); ++row) {
    const std::string& method = agg[row][0];
    std::vector<double> cell_accs;
    for (const auto& entry : fs::directory_iterator(dir / "out" / "cells")) {
      auto cfg_rows = mmd::parse_csv(entry.path() / "aggregate.csv");
      std::ifstream in(entry.path() / "config.json");
      json c;
      in >> c;
      if (c["distill"]["method"] != method) continue;
      for (std::size_t i = 1; i < cfg_rows.size(); ++i) {
        if (cfg_rows[i][1] == "convnet") {
          cell_accs.push_back(std::stod(cfg_rows[i][2]));
          break;
        }
      }
    }
    auto [m, s] = oracle::mean_std(cell_accs);
    REQUIRE(std::stod(agg[row][2]) == m);
    REQUIRE(std::stod(agg[row][3]) == s);
  }

  // resume: nothing recomputed, cell outputs untouched
  std::map<std::string, fs::file_time_type> mtimes;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "out" / "cells"))
    if (entry.is_regular_file())
      mtimes[entry.path().string()] = fs::last_write_time(entry.path());
  RunOut r2 = run("sweep --config " + (dir / "sweep.json").string() + " --out " +
                  (dir / "out").string() + " --resume --workers 2");
  REQUIRE(r2.exit_code == 0);
  REQUIRE_THAT(r2.output, ContainsSubstring("4 skipped"));
  for (const auto& [path, t] : mtimes) REQUIRE(fs::last_write_time(fs::path(path)) == t);
}

TEST_CASE("masked method on a clutterless dataset warns but proceeds", "[cli]") {
  auto dir = work_dir("warn");
  REQUIRE(run("gen-data --classes 3 --size 16 --caption-dim 4 --train-per-class 12 "
              "--test-per-class 4 --clutter none --seed 1 --out " +
              (dir / "d").string())
              .exit_code == 0);
  RunOut r = run("distill --data " + (dir / "d").string() +
                 " --method masked_dc --ipc 1 --iters 3 --nb 4 --net-width 8 --net-depth 2 "
                 "--out " +
                 (dir / "o").string());
  REQUIRE(r.exit_code == 0);
  REQUIRE_THAT(r.output, ContainsSubstring("warning") && ContainsSubstring("clutterless"));
}

TEST_CASE("MMDISTILL_WORKERS caps the sweep worker pool", "[cli]") {
  setenv("MMDISTILL_WORKERS", "1", 1);
  REQUIRE(mmd::sweep_worker_count(0, 8) == 1);
  setenv("MMDISTILL_WORKERS", "3", 1);
  REQUIRE(mmd::sweep_worker_count(0, 8) == 3);
  REQUIRE(mmd::sweep_worker_count(0, 2) == 2);  // never more workers than cells
  unsetenv("MMDISTILL_WORKERS");
  REQUIRE(mmd::sweep_worker_count(2, 8) == 2);
}

TEST_CASE("csv outputs parse under rfc-4180 with consistent column counts", "[cli]") {
  auto dir = work_dir("csv");
  REQUIRE(run("gen-data " + kGenArgs + " --out " + (dir / "d").string()).exit_code == 0);
  REQUIRE(run("distill --data " + (dir / "d").string() +
              " --method dc --ipc 1 --iters 4 --nb 4 --net-width 8 --net-depth 2 --out " +
              (dir / "r").string())
              .exit_code == 0);
  REQUIRE(run("eval --data " + (dir / "d").string() + " --distilled " +
              (dir / "r" / "distilled").string() +
              " --archs convnet --seeds 1 --epochs 10 --net-width 8 --net-depth 2 "
              "--no-baselines --out " +
              (dir / "e").string())
              .exit_code == 0);
  for (const char* f : {"r/loss_trace.csv", "e/per_seed.csv", "e/aggregate.csv"}) {
    auto rows = mmd::parse_csv(dir / f);
    INFO(f);
    REQUIRE(rows.size() >= 2);
    for (const auto& row : rows) REQUIRE(row.size() == rows[0].size());
  }
}
