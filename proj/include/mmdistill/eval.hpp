#pragma once
// Downstream evaluation: train classifiers from scratch on a distilled set,
// measure held-out test accuracy across architectures and repeated seeds, and
// compare against naive baselines.

#include <random>
#include <string>
#include <vector>

#include "mmdistill/dataio.hpp"
#include "mmdistill/distill.hpp"
#include "mmdistill/nn.hpp"

namespace mmd {

struct EvalConfig {
  std::vector<std::string> archs = {"convnet"};
  int epochs = 300;
  double lr = 0.01;
  double momentum = 0.9;
  int batch = 64;
  int num_seeds = 5;
  bool use_captions = false;  // feed caption embeddings to the convnet head
  bool baselines = true;
  int ceiling_epochs = 5;  // the full-data baseline converges in a few passes
  int net_width = 64;
  int net_depth = 3;
  std::uint64_t seed = 1;

  void validate() const {
    check(num_seeds >= 1, "eval: num_seeds must be >= 1");
    check(epochs >= 1, "eval: epochs must be >= 1");
    check(!archs.empty(), "eval: no architectures requested");
    check(batch >= 1, "eval: batch must be >= 1");
  }
};

// one training job: images + labels (+ captions when the head uses them)
struct TrainSet {
  Tensor images;
  std::vector<int> labels;
  Tensor captions;  // undefined when not used
};

inline TrainSet trainset_from_synthetic(const SyntheticSet& syn, bool with_captions) {
  TrainSet t;
  t.images = syn.images.detach();
  t.labels = syn.labels;
  if (with_captions) {
    check(syn.captions.defined(), "eval: use_captions requested but the synthetic set "
                                  "carries no caption embeddings");
    t.captions = syn.captions;
  }
  return t;
}

inline TrainSet trainset_from_indices(const Dataset& ds, const std::vector<int>& idx,
                                      bool with_captions) {
  TrainSet t;
  t.images = images_tensor(ds, ds.train, idx);
  for (int i : idx) t.labels.push_back(ds.train.labels[i]);
  if (with_captions) t.captions = captions_tensor(ds, ds.train, idx);
  return t;
}

struct TrainResult {
  Model model;
  double first_epoch_loss = 0.0;
  double last_epoch_loss = 0.0;
};

// cfg.epochs full passes of minibatch SGD over the training set
inline TrainResult train_on_distilled(const TrainSet& ts, const std::string& arch,
                                      const EvalConfig& cfg, const Dataset& ds,
                                      std::uint64_t seed) {
  check(!ts.labels.empty(), "train_on_distilled: empty training set");
  ConvNetConfig nc;
  nc.depth = cfg.net_depth;
  nc.width = cfg.net_width;
  nc.in_channels = ds.channels();
  nc.image_hw = ds.height();
  nc.num_classes = ds.classes();

  bool caption_head = cfg.use_captions && arch == "convnet";
  std::mt19937_64 init_rng = make_rng(seed, 0x696e69);
  TrainResult res{caption_head ? Model::make_convnet(nc, ds.caption_dim(), init_rng)
                               : make_transfer_arch(arch, nc, init_rng)};
  if (caption_head)
    check(ts.captions.defined(), "train_on_distilled: caption head needs embeddings");

  Model& m = res.model;
  SgdState st;
  std::mt19937_64 shuffle_rng = make_rng(seed, 0x736675);
  int n = static_cast<int>(ts.labels.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::size_t im = ds.image_numel();
  int d = ts.captions.defined() ? ts.captions.shape()[1] : 0;

  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    int steps = 0;
    for (int b0 = 0; b0 < n; b0 += cfg.batch) {
      int b1 = std::min(n, b0 + cfg.batch);
      std::vector<double> batch_px(static_cast<std::size_t>(b1 - b0) * im);
      std::vector<double> batch_cap(static_cast<std::size_t>(b1 - b0) * d);
      std::vector<int> batch_labels;
      for (int k = b0; k < b1; ++k) {
        int i = order[k];
        std::copy_n(ts.images.data().begin() + i * im, im,
                    batch_px.begin() + static_cast<std::size_t>(k - b0) * im);
        if (d > 0)
          std::copy_n(ts.captions.data().begin() + static_cast<std::size_t>(i) * d, d,
                      batch_cap.begin() + static_cast<std::size_t>(k - b0) * d);
        batch_labels.push_back(ts.labels[i]);
      }
      Tensor images = Tensor::constant(
          {b1 - b0, ds.channels(), ds.height(), ds.width()}, std::move(batch_px));
      Tensor logits = caption_head
                          ? m.classify(images, Tensor::constant({b1 - b0, d}, std::move(batch_cap)))
                          : m.classify(images);
      Tensor loss = softmax_cross_entropy(logits, batch_labels);
      double lv = loss.item();
      check(std::isfinite(lv), "train_on_distilled: non-finite loss at epoch " +
                                   std::to_string(e) + " (arch " + arch + ")");
      epoch_loss += lv;
      ++steps;
      GradMap g = backward(loss, m.params.tensors);
      sgd_step(m.params.tensors, g, st, cfg.lr, cfg.momentum, &m.params.names);
    }
    epoch_loss /= steps;
    if (e == 0) res.first_epoch_loss = epoch_loss;
    res.last_epoch_loss = epoch_loss;
  }
  return res;
}

// argmax-logit accuracy on the test split
inline double test_accuracy(const Model& m, const Dataset& ds, bool use_captions) {
  check(ds.test.count > 0, "test_accuracy: empty test split");
  bool caption_head = use_captions && m.caption_dim > 0;
  NoGradGuard ng;
  long correct = 0;
  for (int b0 = 0; b0 < ds.test.count; b0 += 128) {
    std::vector<int> idx;
    for (int i = b0; i < std::min(ds.test.count, b0 + 128); ++i) idx.push_back(i);
    Tensor images = images_tensor(ds, ds.test, idx);
    Tensor logits = caption_head ? m.classify(images, captions_tensor(ds, ds.test, idx))
                                 : m.classify(images);
    int c = logits.shape()[1];
    for (std::size_t r = 0; r < idx.size(); ++r) {
      int best = 0;
      for (int j = 1; j < c; ++j)
        if (logits.data()[r * c + j] > logits.data()[r * c + best]) best = j;
      if (best == ds.test.labels[idx[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / ds.test.count;
}

// two-pass sample statistics in seed order; std of a single run is 0
inline std::pair<double, double> aggregate_mean_std(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0.0};
  double acc = 0.0;
  for (double x : xs) acc += (x - m) * (x - m);
  return {m, std::sqrt(acc / static_cast<double>(xs.size() - 1))};
}

struct ArchResult {
  std::string name;
  double mean = 0.0;
  double stdev = 0.0;
  std::vector<double> accuracies;  // one per seed
};

struct EvalReport {
  std::vector<ArchResult> rows;  // archs first, then baselines

  const ArchResult& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    fail("EvalReport: no row named \"" + name + "\"");
  }
};

// arch x seed grid over the synthetic set, plus the three baselines
inline EvalReport run_protocol(const Dataset& ds, const SyntheticSet& syn,
                               const EvalConfig& cfg) {
  cfg.validate();
  EvalReport report;

  auto run_cell = [&](const TrainSet& ts, const std::string& arch, std::uint64_t seed,
                      int epochs) {
    EvalConfig cell_cfg = cfg;
    cell_cfg.epochs = epochs;
    TrainResult tr = train_on_distilled(ts, arch, cell_cfg, ds, seed);
    return test_accuracy(tr.model, ds, cfg.use_captions);
  };

  for (std::size_t a = 0; a < cfg.archs.size(); ++a) {
    ArchResult r;
    r.name = cfg.archs[a];
    TrainSet ts = trainset_from_synthetic(syn, cfg.use_captions && cfg.archs[a] == "convnet");
    for (int s = 0; s < cfg.num_seeds; ++s)
      r.accuracies.push_back(
          run_cell(ts, cfg.archs[a], derive_seed(cfg.seed, a * 1000 + s), cfg.epochs));
    std::tie(r.mean, r.stdev) = aggregate_mean_std(r.accuracies);
    report.rows.push_back(std::move(r));
  }

  if (cfg.baselines) {
    // random_real_ipc: IPC randomly chosen real images per class
    ArchResult rr;
    rr.name = "random_real_ipc";
    for (int s = 0; s < cfg.num_seeds; ++s) {
      auto rng = make_rng(cfg.seed, 0xbb00 + s);
      std::vector<int> idx;
      for (int c = 0; c < ds.classes(); ++c)
        for (int i : sample_class_batch(ds, c, syn.ipc, rng)) idx.push_back(i);
      EvalConfig plain = cfg;
      plain.use_captions = false;
      TrainSet ts = trainset_from_indices(ds, idx, false);
      TrainResult tr =
          train_on_distilled(ts, "convnet", plain, ds, derive_seed(cfg.seed, 0xbb0000 + s));
      rr.accuracies.push_back(test_accuracy(tr.model, ds, false));
    }
    std::tie(rr.mean, rr.stdev) = aggregate_mean_std(rr.accuracies);
    report.rows.push_back(std::move(rr));

    // noise_init: uniform-noise images, balanced labels
    ArchResult nz;
    nz.name = "noise_init";
    for (int s = 0; s < cfg.num_seeds; ++s) {
      auto rng = make_rng(cfg.seed, 0xcc00 + s);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      int n = syn.ipc * ds.classes();
      std::vector<double> px(n * ds.image_numel());
      for (double& v : px) v = unit(rng);
      TrainSet ts;
      ts.images = Tensor::constant({n, ds.channels(), ds.height(), ds.width()}, std::move(px));
      for (int c = 0; c < ds.classes(); ++c)
        for (int k = 0; k < syn.ipc; ++k) ts.labels.push_back(c);
      EvalConfig plain = cfg;
      plain.use_captions = false;
      TrainResult tr =
          train_on_distilled(ts, "convnet", plain, ds, derive_seed(cfg.seed, 0xcc0000 + s));
      nz.accuracies.push_back(test_accuracy(tr.model, ds, false));
    }
    std::tie(nz.mean, nz.stdev) = aggregate_mean_std(nz.accuracies);
    report.rows.push_back(std::move(nz));

    // full_data_ceiling: the whole real train split, convnet only
    ArchResult fd;
    fd.name = "full_data_ceiling";
    for (int s = 0; s < cfg.num_seeds; ++s) {
      std::vector<int> idx(ds.train.count);
      for (int i = 0; i < ds.train.count; ++i) idx[i] = i;
      EvalConfig plain = cfg;
      plain.use_captions = false;
      plain.epochs = cfg.ceiling_epochs;
      TrainSet ts = trainset_from_indices(ds, idx, false);
      TrainResult tr =
          train_on_distilled(ts, "convnet", plain, ds, derive_seed(cfg.seed, 0xdd0000 + s));
      fd.accuracies.push_back(test_accuracy(tr.model, ds, false));
    }
    std::tie(fd.mean, fd.stdev) = aggregate_mean_std(fd.accuracies);
    report.rows.push_back(std::move(fd));
  }
  return report;
}

}  // namespace mmd
