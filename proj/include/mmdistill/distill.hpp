#pragma once
// The distillation outer loop and its objectives: gradient matching (full and
// background-masked), all-pairs feature distribution matching (full and
// masked), caption-concat gradient matching, and caption matching.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mmdistill/dataio.hpp"
#include "mmdistill/nn.hpp"
#include "mmdistill/tensor.hpp"

namespace mmd {

enum class Method { dc, dm, cap_cat, cap_match, masked_dc, masked_dm };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::dc: return "dc";
    case Method::dm: return "dm";
    case Method::cap_cat: return "cap_cat";
    case Method::cap_match: return "cap_match";
    case Method::masked_dc: return "masked_dc";
    case Method::masked_dm: return "masked_dm";
  }
  return "?";
}

inline Method method_parse(const std::string& s) {
  if (s == "dc") return Method::dc;
  if (s == "dm") return Method::dm;
  if (s == "cap_cat") return Method::cap_cat;
  if (s == "cap_match") return Method::cap_match;
  if (s == "masked_dc") return Method::masked_dc;
  if (s == "masked_dm") return Method::masked_dm;
  fail("unknown method \"" + s + "\" (valid: dc, dm, cap_cat, cap_match, masked_dc, masked_dm)");
}

enum class GradDistance { channel_cosine, l2sq };

inline const char* grad_distance_name(GradDistance d) {
  return d == GradDistance::channel_cosine ? "channel_cosine" : "l2sq";
}

inline GradDistance grad_distance_parse(const std::string& s) {
  if (s == "channel_cosine") return GradDistance::channel_cosine;
  if (s == "l2sq") return GradDistance::l2sq;
  fail("unknown grad distance \"" + s + "\" (valid: channel_cosine, l2sq)");
}

struct DistillConfig {
  Method method = Method::dc;
  int ipc = 1;
  int iterations = 1000;
  int batch_nb = 64;  // N_B, real images per class per iteration
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  GradDistance grad_distance = GradDistance::channel_cosine;
  GradDistance masked_grad_distance = GradDistance::l2sq;  // Eq-2 literal form
  double image_lr = 0.1;
  int net_refresh_every = 50;
  int inner_steps = 1;
  double net_lr = 0.01;
  double net_momentum = 0.5;
  bool masked_full_term = true;  // masked_dc: keep the full-image term
  int encoder_steps = 500;
  int encoder_batch = 64;
  double encoder_lr = 0.01;
  double encoder_momentum = 0.5;
  std::uint64_t seed = 1;
  int net_width = 64;
  int net_depth = 3;

  void validate() const {
    check(lambda1 >= 0.0 && lambda2 >= 0.0, "config: lambda weights must be >= 0");
    check(lambda1 > 0.0 || lambda2 > 0.0, "config: lambda1 and lambda2 cannot both be 0");
    check(iterations > 0, "config: iterations must be > 0");
    check(ipc >= 1, "config: ipc must be >= 1");
    check(batch_nb >= 1, "config: batch size must be >= 1");
    check(image_lr > 0.0, "config: image_lr must be > 0");
    check(net_refresh_every >= 1, "config: net_refresh_every must be >= 1");
    check(inner_steps >= 0, "config: inner_steps must be >= 0");
  }
};

// the distillation target S: learnable images, everything else frozen
struct SyntheticSet {
  Tensor images;            // [C*ipc, Cch, H, W] leaf, requires_grad
  std::vector<int> labels;  // class-major, ipc per class
  Tensor masks;             // [C*ipc, H, W] constant, inherited at init
  Tensor captions;          // [C*ipc, d] constant, class means
  int ipc = 1;
  int classes = 0;

  int count() const { return ipc * classes; }
};

// each image starts as a copy of a random real image of its class; mask is
// inherited from that image, the caption embedding is the class mean
inline SyntheticSet init_synthetic(const Dataset& ds, int ipc, std::mt19937_64& rng) {
  check(ipc >= 1, "init_synthetic: ipc must be >= 1");
  SyntheticSet s;
  s.ipc = ipc;
  s.classes = ds.classes();
  int n = ipc * s.classes;
  std::size_t im = ds.image_numel();
  std::size_t hw = static_cast<std::size_t>(ds.height()) * ds.width();
  int d = ds.caption_dim();
  std::vector<double> images(n * im);
  std::vector<double> masks(n * hw);
  std::vector<double> captions(static_cast<std::size_t>(n) * std::max(1, d), 0.0);
  for (int c = 0; c < s.classes; ++c) {
    std::vector<int> picks = sample_class_batch(ds, c, ipc, rng);
    std::vector<double> mean;
    if (d > 0 && !ds.train.captions.empty()) mean = ds.class_mean_caption(c);
    for (int k = 0; k < ipc; ++k) {
      int row = c * ipc + k;
      int src = picks[k];
      std::copy_n(ds.train.images.data() + src * im, im, images.data() + row * im);
      if (!ds.train.masks.empty())
        for (std::size_t j = 0; j < hw; ++j)
          masks[row * hw + j] = ds.train.masks[src * hw + j];
      if (!mean.empty())
        std::copy(mean.begin(), mean.end(), captions.data() + static_cast<std::size_t>(row) * d);
      s.labels.push_back(c);
    }
  }
  s.images = Tensor::leaf({n, ds.channels(), ds.height(), ds.width()}, std::move(images), true);
  s.masks = Tensor::constant({n, ds.height(), ds.width()}, std::move(masks));
  if (d > 0)
    s.captions = Tensor::constant({n, d}, std::move(captions));
  return s;
}

// ---------------------------------------------------------------------------
// gradient distance
// ---------------------------------------------------------------------------

// l2sq: sum over params of squared L2 of the difference.
// channel_cosine: sum over params and output-channel slices of (1 - cos);
// slices with an exactly zero norm on either side contribute 0.
inline Tensor grad_distance(const GradMap& real, const GradMap& syn, GradDistance mode) {
  check(real.size() == syn.size(), "grad_distance: key sets differ (" +
                                       std::to_string(real.size()) + " vs " +
                                       std::to_string(syn.size()) + " entries)");
  Tensor total;
  auto accumulate = [&total](Tensor term) {
    total = total.defined() ? add(total, term) : term;
  };
  for (std::size_t i = 0; i < real.size(); ++i) {
    const auto& [rid, rg] = real.items()[i];
    const auto& [sid, sg] = syn.items()[i];
    check(rid == sid, "grad_distance: key mismatch at entry " + std::to_string(i));
    check(rg.shape() == sg.shape(), "grad_distance: shape mismatch " + shape_str(rg.shape()) +
                                        " vs " + shape_str(sg.shape()));
    if (mode == GradDistance::l2sq) {
      Tensor d = sub(rg, sg);
      accumulate(sum(mul(d, d)));
      continue;
    }
    // channel slices: dim0 of >=2-d params, whole vector otherwise
    int rows = rg.shape().size() >= 2 ? rg.shape()[0] : 1;
    int cols = static_cast<int>(rg.numel()) / rows;
    Tensor r2 = rows > 1 ? reshape(rg, {rows, cols}) : reshape(rg, {1, cols});
    Tensor s2 = rows > 1 ? reshape(sg, {rows, cols}) : reshape(sg, {1, cols});
    for (int ch = 0; ch < rows; ++ch) {
      Tensor a = rows > 1 ? slice_rows(r2, ch, ch + 1) : r2;
      Tensor b = rows > 1 ? slice_rows(s2, ch, ch + 1) : s2;
      Tensor ssa = sum(mul(a, a));
      Tensor ssb = sum(mul(b, b));
      if (ssa.item() == 0.0 || ssb.item() == 0.0) continue;
      Tensor cos = mul(sum(mul(a, b)), recip(sqrt(mul(ssa, ssb))));
      accumulate(add_scalar(neg(cos), 1.0));
    }
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

// ---------------------------------------------------------------------------
// per-class real batches
// ---------------------------------------------------------------------------

struct ClassBatch {
  Tensor images;            // [NB,C,H,W]
  Tensor masks;             // [NB,H,W] (undefined when the dataset has none)
  Tensor captions;          // [NB,d]   (undefined when the dataset has none)
  std::vector<int> labels;  // all equal to the class id
};

inline std::vector<ClassBatch> sample_real_batches(const Dataset& ds, int nb,
                                                   std::mt19937_64& rng, bool need_masks,
                                                   bool need_captions) {
  std::vector<ClassBatch> out;
  for (int c = 0; c < ds.classes(); ++c) {
    std::vector<int> idx = sample_class_batch(ds, c, nb, rng);
    ClassBatch b;
    b.images = images_tensor(ds, ds.train, idx);
    if (need_masks) {
      check(!ds.train.masks.empty(), "distill: method needs masks but dataset \"" +
                                         ds.manifest.name + "\" has none");
      b.masks = masks_tensor(ds, ds.train, idx);
    }
    if (need_captions) {
      check(!ds.train.captions.empty(), "distill: method needs caption embeddings but "
                                        "dataset \"" + ds.manifest.name + "\" has none");
      b.captions = captions_tensor(ds, ds.train, idx);
    }
    b.labels.assign(idx.size(), c);
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor class_slice_images(const SyntheticSet& syn, int c) {
  const Shape& s = syn.images.shape();
  int per = syn.ipc;
  Tensor flat = reshape(syn.images, {syn.count(), s[1] * s[2] * s[3]});
  Tensor rows = slice_rows(flat, c * per, (c + 1) * per);
  return reshape(rows, {per, s[1], s[2], s[3]});
}

inline Tensor class_slice_rows(const Tensor& t, int c, int per) {
  return slice_rows(t, c * per, (c + 1) * per);
}

inline Tensor class_slice_masks(const SyntheticSet& syn, int c) {
  const Shape& s = syn.masks.shape();
  Tensor flat = reshape(syn.masks, {s[0], s[1] * s[2]});
  return reshape(class_slice_rows(flat, c, syn.ipc), {syn.ipc, s[1], s[2]});
}

inline Tensor net_loss(const Model& net, const Tensor& images, const std::vector<int>& labels,
                       const Tensor& captions) {
  Tensor logits = net.caption_dim > 0 ? net.classify(images, captions) : net.classify(images);
  return softmax_cross_entropy(logits, labels);
}

// model-parameter gradients of the classification loss; real side detached,
// synthetic side carries the graph (create_graph)
inline GradMap loss_grads(const Model& net, const Tensor& images,
                          const std::vector<int>& labels, const Tensor& captions,
                          bool create_graph) {
  Tensor loss = net_loss(net, images, labels, captions);
  return backward(loss, net.params.tensors, create_graph);
}

}  // namespace detail

// Gradient-matching loss. Per class: D(grad(real_c), grad(syn_c)); with
// masked=true an additional term on background-masked images (Eq-2 style),
// using cfg.masked_grad_distance; cfg.masked_full_term keeps or drops the
// full-image term.
inline Tensor dc_loss(const Model& net, const SyntheticSet& syn,
                      const std::vector<ClassBatch>& real, bool masked,
                      const DistillConfig& cfg) {
  check(static_cast<int>(real.size()) == syn.classes, "dc_loss: need one real batch per class");
  Tensor total;
  for (int c = 0; c < syn.classes; ++c) {
    const ClassBatch& rb = real[c];
    std::vector<int> syn_labels(syn.ipc, c);
    Tensor syn_images = detail::class_slice_images(syn, c);
    Tensor syn_caps =
        net.caption_dim > 0 ? detail::class_slice_rows(syn.captions, c, syn.ipc) : Tensor{};

    Tensor term;
    if (!masked || cfg.masked_full_term) {
      GradMap g_real = detail::loss_grads(net, rb.images, rb.labels, rb.captions, false);
      // barrier: the full-image branch hands one pre-summed gradient to the
      // class slice, mirroring how the masked branch funnels through mask_mul
      GradMap g_syn = detail::loss_grads(net, barrier(syn_images), syn_labels, syn_caps, true);
      term = grad_distance(g_real, g_syn, cfg.grad_distance);
    }
    if (masked) {
      check(rb.masks.defined(), "dc_loss: masked term requested but real batch has no masks");
      Tensor m_real = mask_mul(rb.images, rb.masks);
      Tensor m_syn = mask_mul(syn_images, detail::class_slice_masks(syn, c));
      GradMap g_real = detail::loss_grads(net, m_real, rb.labels, rb.captions, false);
      GradMap g_syn = detail::loss_grads(net, m_syn, syn_labels, syn_caps, true);
      Tensor masked_term = grad_distance(g_real, g_syn, cfg.masked_grad_distance);
      term = term.defined() ? add(term, masked_term) : masked_term;
    }
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// Eq-3 aggregation for one class: (1/N_B) * sum_i sum_j ||f_real_i - f_syn_j||^2,
// the literal double sum over all (real, synthetic) pairs.
inline Tensor dm_pairwise(const Tensor& f_real, const Tensor& f_syn) {
  check(f_real.shape().size() == 2 && f_syn.shape().size() == 2 &&
            f_real.shape()[1] == f_syn.shape()[1],
        "dm_pairwise: feature shapes " + shape_str(f_real.shape()) + " vs " +
            shape_str(f_syn.shape()));
  int nb = f_real.shape()[0];
  int ipc = f_syn.shape()[0];
  int dim = f_real.shape()[1];
  Tensor acc;
  for (int i = 0; i < nb; ++i) {
    Tensor fr = Tensor::constant(
        {1, dim}, std::vector<double>(f_real.data().begin() + static_cast<std::size_t>(i) * dim,
                                      f_real.data().begin() + static_cast<std::size_t>(i + 1) * dim));
    for (int j = 0; j < ipc; ++j) {
      Tensor d = sub(fr, slice_rows(f_syn, j, j + 1));
      Tensor pair = sum(mul(d, d));
      acc = acc.defined() ? add(acc, pair) : pair;
    }
  }
  return div_scalar(acc, static_cast<double>(nb));
}

// All-pairs feature MSE (the exact double sum, divided by N_B), summed over
// classes. masked=true applies background masks to both sides before the
// feature extractor.
inline Tensor dm_loss(const Model& net, const SyntheticSet& syn,
                      const std::vector<ClassBatch>& real, bool masked) {
  check(static_cast<int>(real.size()) == syn.classes, "dm_loss: need one real batch per class");
  Tensor total;
  for (int c = 0; c < syn.classes; ++c) {
    const ClassBatch& rb = real[c];
    Tensor real_images = rb.images;
    Tensor syn_images = detail::class_slice_images(syn, c);
    if (masked) {
      check(rb.masks.defined(), "dm_loss: masked matching requested but real batch has no masks");
      real_images = mask_mul(real_images, rb.masks);
      syn_images = mask_mul(syn_images, detail::class_slice_masks(syn, c));
    }
    Tensor f_real;
    {
      NoGradGuard ng;
      f_real = net.features(real_images);
    }
    Tensor f_syn = net.features(syn_images);
    Tensor term = dm_pairwise(f_real, f_syn);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// squared L2 between a synthetic embedding mean [1,d] and a fixed real mean
inline Tensor caption_mean_sq_diff(const Tensor& syn_mean, std::vector<double> real_mean) {
  Tensor diff = sub(syn_mean, Tensor::constant(syn_mean.shape(), std::move(real_mean)));
  return sum(mul(diff, diff));
}

// Squared L2 between the mean synthetic-encoder embedding and the mean real
// caption embedding, per class, summed.
inline Tensor caption_match_loss(const CaptionEncoder& encoder, const SyntheticSet& syn,
                                 const std::vector<ClassBatch>& real) {
  check(encoder.frozen(), "caption_match_loss: encoder must be frozen during distillation");
  check(static_cast<int>(real.size()) == syn.classes,
        "caption_match_loss: need one real batch per class");
  Tensor total;
  for (int c = 0; c < syn.classes; ++c) {
    const ClassBatch& rb = real[c];
    check(rb.captions.defined(), "caption_match_loss: real batch has no caption embeddings");
    int d = rb.captions.shape()[1];
    check(d == encoder.caption_dim(),
          "caption_match_loss: embedding dim mismatch, dataset " + std::to_string(d) +
              " vs encoder " + std::to_string(encoder.caption_dim()));
    Tensor syn_emb = encoder.embed(detail::class_slice_images(syn, c));  // [ipc,d]
    Tensor syn_mean = mul_scalar(matmul(Tensor::full({1, syn.ipc}, 1.0), syn_emb),
                                 1.0 / static_cast<double>(syn.ipc));
    int nb = rb.captions.shape()[0];
    std::vector<double> mean(d, 0.0);
    for (int i = 0; i < nb; ++i)
      for (int k = 0; k < d; ++k) mean[k] += rb.captions.data()[static_cast<std::size_t>(i) * d + k];
    for (double& v : mean) v /= static_cast<double>(nb);
    Tensor term = caption_mean_sq_diff(syn_mean, std::move(mean));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// surrogate caption encoder calibration
// ---------------------------------------------------------------------------

struct CalibrationResult {
  CaptionEncoder encoder;
  double initial_mse = 0.0;
  double final_mse = 0.0;
};

// Fits the encoder to regress each image's caption embedding (MSE) for a
// fixed small budget, then freezes it. The seed stream is independent of the
// distillation seed so one encoder serves a dataset across runs.
inline CalibrationResult calibrate_encoder(const Dataset& ds, std::uint64_t seed,
                                           const DistillConfig& cfg = {}) {
  check(!ds.train.captions.empty(),
        "calibrate_encoder: dataset \"" + ds.manifest.name + "\" has no caption embeddings");
  CalibrationResult res{
      CaptionEncoder::make(ds.channels(), ds.height(), ds.caption_dim(), seed)};
  CaptionEncoder& enc = res.encoder;
  auto rng = make_rng(seed, 0x63616c);
  SgdState st;
  int nb = std::min(cfg.encoder_batch, ds.train.count);
  std::uniform_int_distribution<int> pick(0, ds.train.count - 1);
  for (int step = 0; step < cfg.encoder_steps; ++step) {
    std::vector<int> idx(nb);
    for (int& v : idx) v = pick(rng);
    Tensor images = images_tensor(ds, ds.train, idx);
    Tensor target = captions_tensor(ds, ds.train, idx);
    Tensor diff = sub(enc.embed(images), target);
    Tensor loss = mean(mul(diff, diff));
    double lv = loss.item();
    check(std::isfinite(lv), "calibrate_encoder: loss diverged at step " + std::to_string(step));
    if (step == 0) res.initial_mse = lv;
    res.final_mse = lv;
    GradMap g = backward(loss, enc.net().params.tensors);
    sgd_step(enc.net().params.tensors, g, st, cfg.encoder_lr, cfg.encoder_momentum,
             &enc.net().params.names);
  }
  enc.freeze();
  return res;
}

// ---------------------------------------------------------------------------
// the outer loop
// ---------------------------------------------------------------------------

struct DistillResult {
  SyntheticSet synthetic;
  std::vector<double> loss_trace;  // one entry per iteration
};

namespace detail {

inline bool method_needs_masks(Method m) {
  return m == Method::masked_dc || m == Method::masked_dm;
}

inline bool method_needs_captions(Method m, double lambda2) {
  return m == Method::cap_cat || (m == Method::cap_match && lambda2 > 0.0);
}

}  // namespace detail

// One distillation run. Network schedule: refresh the matching ConvNet from a
// fresh seed every net_refresh_every iterations, and advance it inner_steps
// SGD steps on the current synthetic set after every synthetic update.
inline DistillResult distill(const Dataset& ds, const DistillConfig& cfg,
                             const CaptionEncoder* precalibrated = nullptr) {
  cfg.validate();
  bool needs_masks = detail::method_needs_masks(cfg.method);
  bool needs_caps = detail::method_needs_captions(cfg.method, cfg.lambda2);
  if (needs_masks)
    check(!ds.train.masks.empty(), "distill: method " + std::string(method_name(cfg.method)) +
                                       " needs masks but dataset \"" + ds.manifest.name +
                                       "\" has none");
  if (needs_caps)
    check(!ds.train.captions.empty(),
          "distill: method " + std::string(method_name(cfg.method)) +
              " needs caption embeddings but dataset \"" + ds.manifest.name + "\" has none");

  // independent deterministic streams
  auto rng_init = make_rng(cfg.seed, 1);
  auto rng_batch = make_rng(cfg.seed, 2);

  DistillResult res;
  res.synthetic = init_synthetic(ds, cfg.ipc, rng_init);
  SyntheticSet& syn = res.synthetic;

  int cap_dim = cfg.method == Method::cap_cat ? ds.caption_dim() : 0;
  ConvNetConfig net_cfg;
  net_cfg.depth = cfg.net_depth;
  net_cfg.width = cfg.net_width;
  net_cfg.in_channels = ds.channels();
  net_cfg.image_hw = ds.height();
  net_cfg.num_classes = ds.classes();

  CaptionEncoder local_encoder;
  const CaptionEncoder* encoder = precalibrated;
  if (cfg.method == Method::cap_match && cfg.lambda2 > 0.0 && encoder == nullptr) {
    local_encoder =
        calibrate_encoder(ds, derive_seed(ds.manifest.seed, 0x656e63), cfg).encoder;
    encoder = &local_encoder;
  }

  Model net;
  SgdState net_state;
  SgdState image_state;
  std::vector<Tensor> image_params{syn.images};
  std::vector<std::string> image_names{"synthetic.images"};

  for (int it = 0; it < cfg.iterations; ++it) {
    if (it % cfg.net_refresh_every == 0) {
      auto net_rng = make_rng(cfg.seed, 1000 + static_cast<std::uint64_t>(it / cfg.net_refresh_every));
      net = Model::make_convnet(net_cfg, cap_dim, net_rng);
      net_state = SgdState{};
    }

    std::vector<ClassBatch> real =
        sample_real_batches(ds, cfg.batch_nb, rng_batch, needs_masks,
                            cap_dim > 0 || needs_caps);

    Tensor loss;
    switch (cfg.method) {
      case Method::dc:
      case Method::cap_cat:
        loss = mul_scalar(dc_loss(net, syn, real, false, cfg), cfg.lambda1);
        break;
      case Method::cap_match: {
        loss = mul_scalar(dc_loss(net, syn, real, false, cfg), cfg.lambda1);
        if (cfg.lambda2 > 0.0)
          loss = add(loss, mul_scalar(caption_match_loss(*encoder, syn, real), cfg.lambda2));
        break;
      }
      case Method::masked_dc:
        loss = mul_scalar(dc_loss(net, syn, real, true, cfg), cfg.lambda1);
        break;
      case Method::dm:
        loss = mul_scalar(dm_loss(net, syn, real, false), cfg.lambda1);
        break;
      case Method::masked_dm:
        loss = add(mul_scalar(dc_loss(net, syn, real, false, cfg), cfg.lambda1),
                   mul_scalar(dm_loss(net, syn, real, true), cfg.lambda2));
        break;
    }

    double lv = loss.item();
    if (!std::isfinite(lv))
      fail("distill: non-finite loss at iteration " + std::to_string(it) + " (method " +
           method_name(cfg.method) + ")");
    res.loss_trace.push_back(lv);

    GradMap g = backward(loss, image_params);
    sgd_step(image_params, g, image_state, cfg.image_lr, 0.0, &image_names);

    double* px = syn.images.data_mut();
    for (std::size_t i = 0; i < syn.images.numel(); ++i)
      px[i] = std::clamp(px[i], 0.0, 1.0);

    // advance the matching network on the current synthetic set
    for (int s = 0; s < cfg.inner_steps; ++s) {
      Tensor images = syn.images.detach();
      Tensor inner_loss =
          detail::net_loss(net, images, syn.labels, cap_dim > 0 ? syn.captions : Tensor{});
      GradMap ng = backward(inner_loss, net.params.tensors);
      sgd_step(net.params.tensors, ng, net_state, cfg.net_lr, cfg.net_momentum,
               &net.params.names);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// distilled-set container io
// ---------------------------------------------------------------------------

inline void save_synthetic(const std::filesystem::path& dir, const SyntheticSet& syn,
                           const Manifest& source, const json& run_config) {
  Manifest m;
  m.name = source.name + ".distilled";
  m.classes = syn.classes;
  m.split_counts = {{"syn", syn.ipc}};
  m.image_shape = {syn.images.shape()[1], syn.images.shape()[2], syn.images.shape()[3]};
  m.caption_dim = syn.captions.defined() ? syn.captions.shape()[1] : 0;
  m.seed = source.seed;
  m.extra = run_config;

  std::vector<NamedArray> arrays;
  NamedArray images{"syn.images", syn.images.shape(), Dtype::f64, "syn.f64.bin"};
  images.f64.assign(syn.images.data().begin(), syn.images.data().end());
  arrays.push_back(std::move(images));
  if (syn.captions.defined()) {
    NamedArray caps{"syn.captions", syn.captions.shape(), Dtype::f64, "syn.f64.bin"};
    caps.f64.assign(syn.captions.data().begin(), syn.captions.data().end());
    arrays.push_back(std::move(caps));
  }
  NamedArray labels{"syn.labels", Shape{syn.count()}, Dtype::u8, "syn.u8.bin"};
  for (int l : syn.labels) labels.u8.push_back(static_cast<std::uint8_t>(l));
  arrays.push_back(std::move(labels));
  NamedArray masks{"syn.masks", syn.masks.shape(), Dtype::u8, "syn.u8.bin"};
  for (double v : syn.masks.data()) masks.u8.push_back(v != 0.0 ? 1 : 0);
  arrays.push_back(std::move(masks));
  write_container(dir, m, arrays);
}

inline SyntheticSet load_synthetic(const std::filesystem::path& dir, json* run_config = nullptr) {
  Manifest m = read_manifest(dir);
  SyntheticSet s;
  NamedArray images = read_tensor(dir, m, "syn.images");
  NamedArray labels = read_tensor(dir, m, "syn.labels");
  NamedArray masks = read_tensor(dir, m, "syn.masks");
  s.classes = m.classes;
  s.ipc = images.shape[0] / m.classes;
  s.images = Tensor::leaf(images.shape, std::move(images.f64), true);
  for (auto v : labels.u8) s.labels.push_back(v);
  std::vector<double> mv(masks.u8.begin(), masks.u8.end());
  s.masks = Tensor::constant(masks.shape, std::move(mv));
  if (m.has_tensor("syn.captions")) {
    NamedArray caps = read_tensor(dir, m, "syn.captions");
    s.captions = Tensor::constant(caps.shape, std::move(caps.f64));
  }
  if (run_config) *run_config = m.extra;
  return s;
}

}  // namespace mmd
