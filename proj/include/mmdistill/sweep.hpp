#pragma once
// Sweep runner: (method x dataset x seed x lambda-grid) cells on a bounded
// worker pool, config-hash-keyed resume, consolidated CSV/markdown/SVG.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "mmdistill/distill.hpp"
#include "mmdistill/eval.hpp"
#include "mmdistill/report.hpp"

namespace mmd {

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline json distill_config_json(const DistillConfig& c) {
  return json{{"method", method_name(c.method)},
              {"ipc", c.ipc},
              {"iterations", c.iterations},
              {"batch_nb", c.batch_nb},
              {"lambda1", c.lambda1},
              {"lambda2", c.lambda2},
              {"grad_distance", grad_distance_name(c.grad_distance)},
              {"masked_grad_distance", grad_distance_name(c.masked_grad_distance)},
              {"image_lr", c.image_lr},
              {"net_refresh_every", c.net_refresh_every},
              {"inner_steps", c.inner_steps},
              {"net_lr", c.net_lr},
              {"net_momentum", c.net_momentum},
              {"masked_full_term", c.masked_full_term},
              {"encoder_steps", c.encoder_steps},
              {"encoder_batch", c.encoder_batch},
              {"encoder_lr", c.encoder_lr},
              {"encoder_momentum", c.encoder_momentum},
              {"seed", c.seed},
              {"net_width", c.net_width},
              {"net_depth", c.net_depth}};
}

inline json eval_config_json(const EvalConfig& c) {
  return json{{"archs", c.archs},       {"epochs", c.epochs},
              {"lr", c.lr},             {"momentum", c.momentum},
              {"batch", c.batch},       {"num_seeds", c.num_seeds},
              {"use_captions", c.use_captions}, {"baselines", c.baselines},
              {"ceiling_epochs", c.ceiling_epochs}, {"net_width", c.net_width},
              {"net_depth", c.net_depth}, {"seed", c.seed}};
}

struct SweepConfig {
  std::vector<std::string> datasets;  // dataset directories
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  std::vector<double> lambda1{1.0};
  std::vector<double> lambda2{0.1};
  DistillConfig distill_base;
  EvalConfig eval_base;
  int workers = 0;  // 0: MMDISTILL_WORKERS or hardware_concurrency
};

struct SweepCell {
  std::string dataset_dir;
  std::string dataset_name;
  Method method = Method::dc;
  std::uint64_t seed = 0;
  double l1 = 1.0, l2 = 0.1;
  std::string hash;
  std::filesystem::path dir;
  bool done = false;
  bool skipped = false;  // satisfied by resume
  std::string error;
  double accuracy = 0.0;  // first-arch accuracy of this cell
};

struct SweepResult {
  std::vector<SweepCell> cells;
  int failures = 0;
  int skipped = 0;
};

inline int sweep_worker_count(int requested, std::size_t cells) {
  int n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("MMDISTILL_WORKERS")) n = std::atoi(env);
  }
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  return static_cast<int>(std::min<std::size_t>(n, std::max<std::size_t>(cells, 1)));
}

namespace detail {

inline json cell_config_json(const SweepCell& cell, const SweepConfig& sweep) {
  DistillConfig d = sweep.distill_base;
  d.method = cell.method;
  d.seed = cell.seed;
  d.lambda1 = cell.l1;
  d.lambda2 = cell.l2;
  json j;
  j["dataset"] = cell.dataset_name;
  j["distill"] = distill_config_json(d);
  j["eval"] = eval_config_json(sweep.eval_base);
  return j;
}

}  // namespace detail

// Runs every cell (parallel, deterministic per cell), writes per-cell
// artifacts, and a consolidated aggregate. Failed cells are recorded and the
// sweep continues.
inline SweepResult run_sweep(const SweepConfig& sweep, const std::filesystem::path& out_dir,
                             bool resume) {
  namespace fs = std::filesystem;
  check(!sweep.datasets.empty(), "sweep: no datasets");
  check(!sweep.methods.empty(), "sweep: no methods");
  check(!sweep.seeds.empty(), "sweep: no seeds");
  fs::create_directories(out_dir / "cells");

  // preload datasets once; loaded datasets are immutable and shared
  std::map<std::string, Dataset> datasets;
  for (const auto& dpath : sweep.datasets) {
    Dataset ds = load(dpath);
    datasets.emplace(dpath, std::move(ds));
  }

  // one calibrated encoder per dataset, shared across cap_match cells
  std::map<std::string, CalibrationResult> encoders;
  bool any_cap_match = false;
  for (const auto& m : sweep.methods) any_cap_match |= method_parse(m) == Method::cap_match;
  if (any_cap_match) {
    for (auto& [dpath, ds] : datasets)
      if (!ds.train.captions.empty())
        encoders.emplace(dpath, calibrate_encoder(ds, derive_seed(ds.manifest.seed, 0x656e63),
                                                  sweep.distill_base));
  }

  SweepResult result;
  for (const auto& dpath : sweep.datasets)
    for (const auto& mname : sweep.methods)
      for (double l1 : sweep.lambda1)
        for (double l2 : sweep.lambda2)
          for (std::uint64_t seed : sweep.seeds) {
            SweepCell cell;
            cell.dataset_dir = dpath;
            cell.dataset_name = datasets.at(dpath).manifest.name;
            cell.method = method_parse(mname);
            cell.seed = seed;
            cell.l1 = l1;
            cell.l2 = l2;
            cell.hash = fnv1a_hex(detail::cell_config_json(cell, sweep).dump());
            cell.dir = out_dir / "cells" /
                       (std::string(method_name(cell.method)) + "-" + cell.dataset_name +
                        "-s" + std::to_string(seed) + "-" + cell.hash.substr(0, 8));
            result.cells.push_back(std::move(cell));
          }

  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto run_cell = [&](SweepCell& cell) {
    json cell_cfg = detail::cell_config_json(cell, sweep);
    fs::path done_file = cell.dir / "done.json";
    if (resume && fs::exists(done_file)) {
      std::ifstream in(done_file);
      json j;
      in >> j;
      if (j.value("hash", "") == cell.hash) {
        cell.accuracy = j.value("accuracy", 0.0);
        cell.done = true;
        cell.skipped = true;
        return;
      }
    }
    fs::create_directories(cell.dir);
    const Dataset& ds = datasets.at(cell.dataset_dir);
    DistillConfig dc = sweep.distill_base;
    dc.method = cell.method;
    dc.seed = cell.seed;
    dc.lambda1 = cell.l1;
    dc.lambda2 = cell.l2;
    const CaptionEncoder* enc = nullptr;
    auto eit = encoders.find(cell.dataset_dir);
    if (eit != encoders.end()) enc = &eit->second.encoder;

    DistillResult dr = distill(ds, dc, enc);
    save_synthetic(cell.dir / "distilled", dr.synthetic, ds.manifest, cell_cfg);

    {
      std::vector<std::vector<std::string>> rows{{"iteration", "loss"}};
      for (std::size_t i = 0; i < dr.loss_trace.size(); ++i)
        rows.push_back({std::to_string(i), fmt_double(dr.loss_trace[i])});
      write_csv(cell.dir / "loss_trace.csv", rows);
    }

    EvalConfig ec = sweep.eval_base;
    ec.use_captions = cell.method == Method::cap_cat;
    EvalReport rep = run_protocol(ds, dr.synthetic, ec);

    std::vector<SeedRow> seed_rows;
    std::vector<AggregateRow> agg_rows;
    for (const auto& row : rep.rows) {
      for (std::size_t s = 0; s < row.accuracies.size(); ++s)
        seed_rows.push_back(
            {method_name(cell.method), row.name, static_cast<int>(s), row.accuracies[s]});
      agg_rows.push_back({method_name(cell.method), row.name, row.mean, row.stdev});
    }
    write_per_seed_csv(cell.dir / "per_seed.csv", seed_rows);
    write_aggregate_csv(cell.dir / "aggregate.csv", agg_rows);
    write_summary_text(cell.dir / "summary.txt", method_name(cell.method), rep);

    cell.accuracy = rep.rows[0].mean;
    {
      std::ofstream out(cell.dir / "config.json", std::ios::trunc);
      out << cell_cfg.dump(2) << "\n";
    }
    json done = {{"hash", cell.hash}, {"accuracy", cell.accuracy}};
    std::ofstream out(done_file, std::ios::trunc);
    out << done.dump(2) << "\n";
    cell.done = true;
  };

  int workers = sweep_worker_count(sweep.workers, result.cells.size());
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        std::size_t i = next.fetch_add(1);
        if (i >= result.cells.size()) break;
        SweepCell& cell = result.cells[i];
        try {
          run_cell(cell);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lk(log_mutex);
          cell.error = e.what();
        }
      }
    });
  }
  for (auto& t : pool) t.join();

  for (const auto& c : result.cells) {
    if (!c.done) ++result.failures;
    if (c.skipped) ++result.skipped;
  }
  return result;
}

// Consolidates per-cell outputs under sweep_dir into aggregate.csv, table.md
// and traces.svg. Reads only the per-cell CSVs, so it doubles as an
// independent recomputation path.
inline void write_sweep_report(const std::filesystem::path& sweep_dir) {
  namespace fs = std::filesystem;
  fs::path cells_dir = sweep_dir / "cells";
  check(fs::exists(cells_dir), "report: no cells directory under " + sweep_dir.string());

  struct Key {
    std::string method, dataset;
    bool operator<(const Key& o) const {
      return method != o.method ? method < o.method : dataset < o.dataset;
    }
  };
  std::map<Key, std::vector<double>> accs;
  std::map<Key, std::vector<double>> traces;  // first-seen trace per key
  for (const auto& entry : fs::directory_iterator(cells_dir)) {
    if (!entry.is_directory()) continue;
    fs::path cfg_file = entry.path() / "config.json";
    fs::path agg_file = entry.path() / "aggregate.csv";
    if (!fs::exists(cfg_file) || !fs::exists(agg_file)) continue;
    json cfg;
    {
      std::ifstream in(cfg_file);
      in >> cfg;
    }
    Key key{cfg["distill"]["method"].get<std::string>(), cfg["dataset"].get<std::string>()};
    auto rows = parse_csv(agg_file);
    check(!rows.empty() && rows[0] == std::vector<std::string>{"method", "arch", "mean", "std"},
          "report: malformed aggregate csv in " + entry.path().string());
    // first non-baseline row is the primary-arch result for this cell
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r[1] == "random_real_ipc" || r[1] == "noise_init" || r[1] == "full_data_ceiling")
        continue;
      accs[key].push_back(std::stod(r[2]));
      break;
    }
    if (!traces.count(key) && fs::exists(entry.path() / "loss_trace.csv")) {
      auto trows = parse_csv(entry.path() / "loss_trace.csv");
      std::vector<double> t;
      for (std::size_t i = 1; i < trows.size(); ++i) t.push_back(std::stod(trows[i][1]));
      traces[key] = std::move(t);
    }
  }

  std::vector<std::vector<std::string>> agg_rows{{"method", "dataset", "mean", "std"}};
  std::vector<std::string> datasets, methods;
  std::map<Key, std::pair<double, double>> stats;
  for (const auto& [key, values] : accs) {
    stats[key] = aggregate_mean_std(values);
    agg_rows.push_back({key.method, key.dataset, fmt_double(stats[key].first),
                        fmt_double(stats[key].second)});
    if (std::find(datasets.begin(), datasets.end(), key.dataset) == datasets.end())
      datasets.push_back(key.dataset);
    if (std::find(methods.begin(), methods.end(), key.method) == methods.end())
      methods.push_back(key.method);
  }
  write_csv(sweep_dir / "aggregate.csv", agg_rows);

  std::vector<std::vector<std::string>> cells(methods.size(),
                                              std::vector<std::string>(datasets.size(), "-"));
  for (const auto& [key, ms] : stats) {
    auto mi = std::find(methods.begin(), methods.end(), key.method) - methods.begin();
    auto di = std::find(datasets.begin(), datasets.end(), key.dataset) - datasets.begin();
    cells[mi][di] = pct(ms.first) + "+/-" + pct(ms.second);
  }
  write_markdown_table(sweep_dir / "table.md", datasets, methods, cells);

  std::vector<ChartSeries> series;
  for (const auto& [key, t] : traces)
    series.push_back({key.method + "/" + key.dataset, t});
  write_svg_chart(sweep_dir / "traces.svg", series, "distillation loss traces");
}

}  // namespace mmd
