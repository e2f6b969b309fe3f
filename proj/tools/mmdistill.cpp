// Command-line entry point: dataset generation, distillation, evaluation,
// sweeps, and report consolidation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "mmdistill/dataio.hpp"
#include "mmdistill/distill.hpp"
#include "mmdistill/eval.hpp"
#include "mmdistill/report.hpp"
#include "mmdistill/sweep.hpp"

namespace fs = std::filesystem;
using namespace mmd;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open config file " + path);
  json j;
  in >> j;
  return j;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    check(known.count(it.key()) > 0, "unknown key \"" + it.key() + "\" in " + where);
}

void echo_config(const fs::path& out_dir, const json& resolved) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "config.json", std::ios::trunc);
  out << resolved.dump(2) << "\n";
}

void require_dataset_dir(const std::string& path) {
  check(fs::exists(fs::path(path) / "manifest.json"),
        "dataset path " + path + " does not contain a manifest.json");
}

// ---- gen-data ----

const std::set<std::string> kGenKeys = {
    "name",        "classes",        "size",          "train_per_class",
    "test_per_class", "clutter",     "clutter_density", "caption_dim",
    "caption_noise", "seed"};

GenSpec genspec_from_json(const json& j) {
  reject_unknown_keys(j, kGenKeys, "gen-data config");
  GenSpec s;
  s.name = j.value("name", s.name);
  s.num_classes = j.value("classes", s.num_classes);
  s.size = j.value("size", s.size);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  if (j.contains("clutter")) {
    std::string c = j["clutter"].get<std::string>();
    check(c == "none" || c == "distractors", "clutter must be none or distractors");
    s.clutter = c == "none" ? GenSpec::Clutter::none : GenSpec::Clutter::distractors;
  }
  s.clutter_density = j.value("clutter_density", s.clutter_density);
  s.caption_dim = j.value("caption_dim", s.caption_dim);
  s.caption_noise = j.value("caption_noise", s.caption_noise);
  s.seed = j.value("seed", s.seed);
  return s;
}

json genspec_to_json(const GenSpec& s) {
  return json{{"name", s.name},
              {"classes", s.num_classes},
              {"size", s.size},
              {"train_per_class", s.train_per_class},
              {"test_per_class", s.test_per_class},
              {"clutter", s.clutter == GenSpec::Clutter::none ? "none" : "distractors"},
              {"clutter_density", s.clutter_density},
              {"caption_dim", s.caption_dim},
              {"caption_noise", s.caption_noise},
              {"seed", s.seed}};
}

// ---- distill ----

const std::set<std::string> kDistillKeys = {
    "method",        "ipc",           "iterations",          "batch_nb",
    "lambda1",       "lambda2",       "grad_distance",       "masked_grad_distance",
    "image_lr",      "net_refresh_every", "inner_steps",     "net_lr",
    "net_momentum",  "masked_full_term", "encoder_steps",    "encoder_batch",
    "encoder_lr",    "encoder_momentum", "seed",             "net_width",
    "net_depth",     "data"};  // "data": echoed configs are directly re-runnable

DistillConfig distill_from_json(const json& j) {
  reject_unknown_keys(j, kDistillKeys, "distill config");
  DistillConfig c;
  if (j.contains("method")) c.method = method_parse(j["method"].get<std::string>());
  c.ipc = j.value("ipc", c.ipc);
  c.iterations = j.value("iterations", c.iterations);
  c.batch_nb = j.value("batch_nb", c.batch_nb);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  if (j.contains("grad_distance"))
    c.grad_distance = grad_distance_parse(j["grad_distance"].get<std::string>());
  if (j.contains("masked_grad_distance"))
    c.masked_grad_distance = grad_distance_parse(j["masked_grad_distance"].get<std::string>());
  c.image_lr = j.value("image_lr", c.image_lr);
  c.net_refresh_every = j.value("net_refresh_every", c.net_refresh_every);
  c.inner_steps = j.value("inner_steps", c.inner_steps);
  c.net_lr = j.value("net_lr", c.net_lr);
  c.net_momentum = j.value("net_momentum", c.net_momentum);
  c.masked_full_term = j.value("masked_full_term", c.masked_full_term);
  c.encoder_steps = j.value("encoder_steps", c.encoder_steps);
  c.encoder_batch = j.value("encoder_batch", c.encoder_batch);
  c.encoder_lr = j.value("encoder_lr", c.encoder_lr);
  c.encoder_momentum = j.value("encoder_momentum", c.encoder_momentum);
  c.seed = j.value("seed", c.seed);
  c.net_width = j.value("net_width", c.net_width);
  c.net_depth = j.value("net_depth", c.net_depth);
  return c;
}

// ---- eval ----

const std::set<std::string> kEvalKeys = {
    "archs", "epochs", "lr", "momentum", "batch", "num_seeds", "use_captions",
    "baselines", "ceiling_epochs", "net_width", "net_depth", "seed"};

EvalConfig eval_from_json(const json& j) {
  reject_unknown_keys(j, kEvalKeys, "eval config");
  EvalConfig c;
  if (j.contains("archs")) c.archs = j["archs"].get<std::vector<std::string>>();
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.batch = j.value("batch", c.batch);
  c.num_seeds = j.value("num_seeds", c.num_seeds);
  c.use_captions = j.value("use_captions", c.use_captions);
  c.baselines = j.value("baselines", c.baselines);
  c.ceiling_epochs = j.value("ceiling_epochs", c.ceiling_epochs);
  c.net_width = j.value("net_width", c.net_width);
  c.net_depth = j.value("net_depth", c.net_depth);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-modal dataset distillation toolkit"};
  app.require_subcommand(1);

  // ---------------- gen-data ----------------
  auto* gen = app.add_subcommand("gen-data", "generate a toy multi-modal dataset");
  std::string gen_config, gen_out, gen_clutter, gen_name;
  int gen_classes = -1, gen_size = -1, gen_train = -1, gen_test = -1, gen_capdim = -1;
  double gen_density = -1.0, gen_noise = -1.0;
  long long gen_seed = -1;
  gen->add_option("--config", gen_config, "JSON config file");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--name", gen_name, "dataset name");
  gen->add_option("--classes", gen_classes, "number of classes");
  gen->add_option("--size", gen_size, "image height/width");
  gen->add_option("--train-per-class", gen_train, "train samples per class");
  gen->add_option("--test-per-class", gen_test, "test samples per class");
  gen->add_option("--clutter", gen_clutter, "none|distractors");
  gen->add_option("--clutter-density", gen_density, "distractor density in [0,1]");
  gen->add_option("--caption-dim", gen_capdim, "caption embedding dimension");
  gen->add_option("--caption-noise", gen_noise, "caption noise sigma");
  gen->add_option("--seed", gen_seed, "generator seed");

  // ---------------- distill ----------------
  auto* dst = app.add_subcommand("distill", "distill a synthetic set from a dataset");
  std::string dst_config, dst_data, dst_out, dst_method, dst_gd, dst_mgd, dst_full_term;
  int dst_ipc = -1, dst_iters = -1, dst_nb = -1, dst_refresh = -1, dst_inner = -1,
      dst_width = -1, dst_depth = -1;
  double dst_l1 = -1, dst_l2 = -1, dst_imglr = -1, dst_netlr = -1, dst_netmom = -1;
  long long dst_seed = -1;
  dst->add_option("--config", dst_config, "JSON config file");
  dst->add_option("--data", dst_data, "dataset directory (or \"data\" key in --config)");
  dst->add_option("--out", dst_out, "output directory")->required();
  dst->add_option("--method", dst_method, "dc|dm|cap_cat|cap_match|masked_dc|masked_dm");
  dst->add_option("--ipc", dst_ipc, "images per class");
  dst->add_option("--iters", dst_iters, "outer-loop iterations");
  dst->add_option("--nb", dst_nb, "real batch size per class");
  dst->add_option("--lambda1", dst_l1, "matching-loss weight");
  dst->add_option("--lambda2", dst_l2, "auxiliary-loss weight");
  dst->add_option("--grad-distance", dst_gd, "channel_cosine|l2sq");
  dst->add_option("--masked-grad-distance", dst_mgd, "channel_cosine|l2sq");
  dst->add_option("--masked-full-term", dst_full_term, "on|off");
  dst->add_option("--image-lr", dst_imglr, "synthetic pixel learning rate");
  dst->add_option("--refresh-every", dst_refresh, "network refresh interval");
  dst->add_option("--inner-steps", dst_inner, "inner SGD steps on the synthetic set");
  dst->add_option("--net-lr", dst_netlr, "inner network learning rate");
  dst->add_option("--net-momentum", dst_netmom, "inner network momentum");
  dst->add_option("--net-width", dst_width, "distillation convnet width");
  dst->add_option("--net-depth", dst_depth, "distillation convnet depth");
  dst->add_option("--seed", dst_seed, "run seed");

  // ---------------- eval ----------------
  auto* ev = app.add_subcommand("eval", "evaluate a distilled set");
  std::string ev_config, ev_data, ev_distilled, ev_out, ev_archs;
  int ev_epochs = -1, ev_batch = -1, ev_seeds = -1, ev_ceiling = -1, ev_width = -1,
      ev_depth = -1;
  double ev_lr = -1, ev_mom = -1;
  long long ev_seed = -1;
  bool ev_use_captions = false, ev_no_baselines = false;
  ev->add_option("--config", ev_config, "JSON config file");
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--distilled", ev_distilled, "distilled-set directory")->required();
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_option("--archs", ev_archs, "comma-separated: convnet,mlp,minivgg");
  ev->add_option("--epochs", ev_epochs, "downstream training epochs");
  ev->add_option("--lr", ev_lr, "downstream learning rate");
  ev->add_option("--momentum", ev_mom, "downstream momentum");
  ev->add_option("--batch", ev_batch, "downstream batch size");
  ev->add_option("--seeds", ev_seeds, "number of repeated seeds");
  ev->add_flag("--use-captions", ev_use_captions, "feed caption embeddings to the head");
  ev->add_flag("--no-baselines", ev_no_baselines, "skip the three baselines");
  ev->add_option("--ceiling-epochs", ev_ceiling, "full-data baseline epochs");
  ev->add_option("--net-width", ev_width, "convnet width");
  ev->add_option("--net-depth", ev_depth, "convnet depth");
  ev->add_option("--seed", ev_seed, "evaluation seed base");

  // ---------------- sweep ----------------
  auto* sw = app.add_subcommand("sweep", "run a method x dataset x seed grid");
  std::string sw_config, sw_out;
  bool sw_resume = false;
  int sw_workers = 0;
  sw->add_option("--config", sw_config, "sweep JSON config")->required();
  sw->add_option("--out", sw_out, "output directory")->required();
  sw->add_flag("--resume", sw_resume, "skip cells already completed with matching config");
  sw->add_option("--workers", sw_workers, "worker pool size (0: MMDISTILL_WORKERS or cores)");

  // ---------------- report ----------------
  auto* rp = app.add_subcommand("report", "rebuild aggregate outputs from sweep cells");
  std::string rp_dir;
  rp->add_option("--sweep", rp_dir, "sweep output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      GenSpec spec = gen_config.empty() ? GenSpec{} : genspec_from_json(load_json_file(gen_config));
      if (!gen_name.empty()) spec.name = gen_name;
      if (gen_classes >= 0) spec.num_classes = gen_classes;
      if (gen_size >= 0) spec.size = gen_size;
      if (gen_train >= 0) spec.train_per_class = gen_train;
      if (gen_test >= 0) spec.test_per_class = gen_test;
      if (!gen_clutter.empty()) {
        check(gen_clutter == "none" || gen_clutter == "distractors",
              "clutter must be none or distractors, got \"" + gen_clutter + "\"");
        spec.clutter = gen_clutter == "none" ? GenSpec::Clutter::none
                                             : GenSpec::Clutter::distractors;
      }
      if (gen_density >= 0) spec.clutter_density = gen_density;
      if (gen_capdim >= 0) spec.caption_dim = gen_capdim;
      if (gen_noise >= 0) spec.caption_noise = gen_noise;
      if (gen_seed >= 0) spec.seed = static_cast<std::uint64_t>(gen_seed);
      generate(spec, gen_out);
      echo_config(gen_out, genspec_to_json(spec));
      std::printf("gen-data: wrote %s\n", gen_out.c_str());
    } else if (*dst) {
      json dst_json = dst_config.empty() ? json::object() : load_json_file(dst_config);
      if (dst_data.empty() && dst_json.contains("data"))
        dst_data = dst_json["data"].get<std::string>();
      check(!dst_data.empty(), "distill: no dataset given (--data or \"data\" config key)");
      require_dataset_dir(dst_data);
      DistillConfig cfg = distill_from_json(dst_json);
      if (!dst_method.empty()) cfg.method = method_parse(dst_method);
      if (dst_ipc >= 0) cfg.ipc = dst_ipc;
      if (dst_iters >= 0) cfg.iterations = dst_iters;
      if (dst_nb >= 0) cfg.batch_nb = dst_nb;
      if (dst_l1 >= 0) cfg.lambda1 = dst_l1;
      if (dst_l2 >= 0) cfg.lambda2 = dst_l2;
      if (!dst_gd.empty()) cfg.grad_distance = grad_distance_parse(dst_gd);
      if (!dst_mgd.empty()) cfg.masked_grad_distance = grad_distance_parse(dst_mgd);
      if (!dst_full_term.empty()) {
        check(dst_full_term == "on" || dst_full_term == "off",
              "--masked-full-term must be on or off");
        cfg.masked_full_term = dst_full_term == "on";
      }
      if (dst_imglr >= 0) cfg.image_lr = dst_imglr;
      if (dst_refresh >= 0) cfg.net_refresh_every = dst_refresh;
      if (dst_inner >= 0) cfg.inner_steps = dst_inner;
      if (dst_netlr >= 0) cfg.net_lr = dst_netlr;
      if (dst_netmom >= 0) cfg.net_momentum = dst_netmom;
      if (dst_width >= 0) cfg.net_width = dst_width;
      if (dst_depth >= 0) cfg.net_depth = dst_depth;
      if (dst_seed >= 0) cfg.seed = static_cast<std::uint64_t>(dst_seed);
      cfg.validate();

      Dataset ds = load(dst_data);
      if ((cfg.method == Method::masked_dc || cfg.method == Method::masked_dm) &&
          ds.manifest.extra.is_object() && ds.manifest.extra.value("clutter", "") == "none")
        std::fprintf(stderr,
                     "warning: masked method on a clutterless dataset; masks carry little "
                     "extra signal\n");
      DistillResult r = distill(ds, cfg);
      json resolved = distill_config_json(cfg);
      resolved["data"] = dst_data;
      save_synthetic(fs::path(dst_out) / "distilled", r.synthetic, ds.manifest, resolved);
      std::vector<std::vector<std::string>> rows{{"iteration", "loss"}};
      for (std::size_t i = 0; i < r.loss_trace.size(); ++i)
        rows.push_back({std::to_string(i), fmt_double(r.loss_trace[i])});
      write_csv(fs::path(dst_out) / "loss_trace.csv", rows);
      write_svg_chart(fs::path(dst_out) / "loss_trace.svg",
                      {{method_name(cfg.method), r.loss_trace}}, "distillation loss");
      echo_config(dst_out, resolved);
      std::printf("distill: %s done, final loss %.6g\n", method_name(cfg.method),
                  r.loss_trace.back());
    } else if (*ev) {
      require_dataset_dir(ev_data);
      check(fs::exists(fs::path(ev_distilled) / "manifest.json"),
            "distilled path " + ev_distilled + " does not contain a manifest.json");
      EvalConfig cfg = ev_config.empty() ? EvalConfig{} : eval_from_json(load_json_file(ev_config));
      if (!ev_archs.empty()) cfg.archs = split_csv_list(ev_archs);
      if (ev_epochs >= 0) cfg.epochs = ev_epochs;
      if (ev_lr >= 0) cfg.lr = ev_lr;
      if (ev_mom >= 0) cfg.momentum = ev_mom;
      if (ev_batch >= 0) cfg.batch = ev_batch;
      if (ev_seeds >= 0) cfg.num_seeds = ev_seeds;
      if (ev_use_captions) cfg.use_captions = true;
      if (ev_no_baselines) cfg.baselines = false;
      if (ev_ceiling >= 0) cfg.ceiling_epochs = ev_ceiling;
      if (ev_width >= 0) cfg.net_width = ev_width;
      if (ev_depth >= 0) cfg.net_depth = ev_depth;
      if (ev_seed >= 0) cfg.seed = static_cast<std::uint64_t>(ev_seed);
      for (const auto& a : cfg.archs) arch_parse(a);  // validates, lists names on error
      cfg.validate();

      Dataset ds = load(ev_data);
      json echo;
      SyntheticSet syn = load_synthetic(fs::path(ev_distilled), &echo);
      std::string method = echo.is_object() && echo.contains("method")
                               ? echo["method"].get<std::string>()
                               : (echo.is_object() && echo.contains("distill")
                                      ? echo["distill"]["method"].get<std::string>()
                                      : "distilled");
      EvalReport rep = run_protocol(ds, syn, cfg);

      fs::create_directories(ev_out);
      std::vector<SeedRow> seed_rows;
      std::vector<AggregateRow> agg_rows;
      for (const auto& row : rep.rows) {
        for (std::size_t s = 0; s < row.accuracies.size(); ++s)
          seed_rows.push_back({method, row.name, static_cast<int>(s), row.accuracies[s]});
        agg_rows.push_back({method, row.name, row.mean, row.stdev});
      }
      write_per_seed_csv(fs::path(ev_out) / "per_seed.csv", seed_rows);
      write_aggregate_csv(fs::path(ev_out) / "aggregate.csv", agg_rows);
      write_summary_text(fs::path(ev_out) / "summary.txt", method, rep);
      json resolved = eval_config_json(cfg);
      resolved["data"] = ev_data;
      resolved["distilled"] = ev_distilled;
      echo_config(ev_out, resolved);
      std::printf("eval: %s\n", (fs::path(ev_out) / "summary.txt").c_str());
    } else if (*sw) {
      json j = load_json_file(sw_config);
      reject_unknown_keys(j,
                          {"datasets", "methods", "seeds", "lambda1", "lambda2", "distill",
                           "eval", "workers"},
                          "sweep config");
      SweepConfig sc;
      sc.datasets = j.at("datasets").get<std::vector<std::string>>();
      sc.methods = j.at("methods").get<std::vector<std::string>>();
      sc.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
      if (j.contains("lambda1")) sc.lambda1 = j["lambda1"].get<std::vector<double>>();
      if (j.contains("lambda2")) sc.lambda2 = j["lambda2"].get<std::vector<double>>();
      if (j.contains("distill")) sc.distill_base = distill_from_json(j["distill"]);
      if (j.contains("eval")) sc.eval_base = eval_from_json(j["eval"]);
      if (j.contains("workers")) sc.workers = j["workers"].get<int>();
      if (sw_workers > 0) sc.workers = sw_workers;
      for (const auto& m : sc.methods) method_parse(m);
      for (const auto& d : sc.datasets) require_dataset_dir(d);

      SweepResult r = run_sweep(sc, sw_out, sw_resume);
      write_sweep_report(sw_out);
      json resolved{{"datasets", sc.datasets}, {"methods", sc.methods},
                    {"seeds", sc.seeds},       {"lambda1", sc.lambda1},
                    {"lambda2", sc.lambda2},   {"distill", distill_config_json(sc.distill_base)},
                    {"eval", eval_config_json(sc.eval_base)}, {"workers", sc.workers}};
      echo_config(sw_out, resolved);
      std::printf("sweep: %zu cells, %d skipped, %d failed\n", r.cells.size(), r.skipped,
                  r.failures);
      for (const auto& c : r.cells)
        if (!c.done)
          std::fprintf(stderr, "error: cell %s failed: %s\n", c.dir.filename().c_str(),
                       c.error.c_str());
      return r.failures == 0 ? 0 : 1;
    } else if (*rp) {
      write_sweep_report(rp_dir);
      std::printf("report: wrote %s\n", (fs::path(rp_dir) / "aggregate.csv").c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
