#pragma once
// The networks: a ConvNet feature extractor with an optional caption-concat
// classification head, MLP and mini-VGG transfer architectures, and the
// frozen surrogate caption encoder.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmdistill/common.hpp"
#include "mmdistill/dataio.hpp"
#include "mmdistill/tensor.hpp"

namespace mmd {

// ---------------------------------------------------------------------------
// init + shared layers
// ---------------------------------------------------------------------------

inline Tensor kaiming_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> d(numel(shape));
  for (double& v : d) v = dist(rng);
  return Tensor::leaf(std::move(shape), std::move(d), true);
}

// [C] -> [N,C,H,W], every (n,h,w) cell carrying v[c]
inline Tensor channel_broadcast(const Tensor& v, int n, int h, int w) {
  int c = v.shape()[0];
  Tensor tiled = matmul(Tensor::full({n, 1}, 1.0), reshape(v, {1, c}));  // [N,C]
  Tensor planes = matmul(reshape(tiled, {n * c, 1}), Tensor::full({1, h * w}, 1.0));
  return reshape(planes, {n, c, h, w});
}

inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         int groups, double eps = 1e-5) {
  check(x.shape().size() == 4, "group_norm: expected 4-d, got " + shape_str(x.shape()));
  int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  check(c % groups == 0, "group_norm: channels " + std::to_string(c) +
                             " not divisible by groups " + std::to_string(groups));
  int m = (c / groups) * h * w;
  Tensor x2 = reshape(x, {n * groups, m});
  Tensor ones_col = Tensor::full({m, 1}, 1.0);
  Tensor ones_row = Tensor::full({1, m}, 1.0);
  Tensor mu = mul_scalar(matmul(x2, ones_col), 1.0 / m);           // [NG,1]
  Tensor xc = sub(x2, matmul(mu, ones_row));                       // [NG,M]
  Tensor var = mul_scalar(matmul(mul(xc, xc), ones_col), 1.0 / m); // [NG,1]
  Tensor inv = recip(sqrt(add_scalar(var, eps)));
  Tensor xn = reshape(mul(xc, matmul(inv, ones_row)), x.shape());
  return add(mul(xn, channel_broadcast(gamma, n, h, w)), channel_broadcast(beta, n, h, w));
}

// ---------------------------------------------------------------------------
// parameter container
// ---------------------------------------------------------------------------

struct ModelParams {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  void add(std::string name, Tensor t) {
    for (const auto& n : names)
      check(n != name, "ModelParams: duplicate parameter name \"" + name + "\"");
    names.push_back(std::move(name));
    tensors.push_back(std::move(t));
  }
  Tensor& operator[](const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    fail("ModelParams: no parameter named \"" + name + "\"");
  }
  const Tensor& at(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    fail("ModelParams: no parameter named \"" + name + "\"");
  }
  std::size_t size() const { return tensors.size(); }
};

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

struct ConvNetConfig {
  int depth = 3;
  int width = 64;
  int in_channels = 3;
  int image_hw = 32;
  int num_classes = 6;
  bool groupnorm = true;  // norm: {none, groupnorm}
  int groups = 4;
};

enum class Arch { convnet, mlp, minivgg };

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::convnet: return "convnet";
    case Arch::mlp: return "mlp";
    case Arch::minivgg: return "minivgg";
  }
  return "?";
}

inline Arch arch_parse(const std::string& s) {
  if (s == "convnet") return Arch::convnet;
  if (s == "mlp") return Arch::mlp;
  if (s == "minivgg") return Arch::minivgg;
  fail("unknown architecture \"" + s + "\" (valid: convnet, mlp, minivgg)");
}

constexpr int kMlpHidden = 256;
constexpr int kMiniVggWidth = 16;

class Model {
 public:
  Arch arch = Arch::convnet;
  ConvNetConfig cfg;
  int caption_dim = 0;  // >0: caption embeddings concatenated before the head
  ModelParams params;

  static Model make_convnet(const ConvNetConfig& cfg, int caption_dim,
                            std::mt19937_64& rng) {
    check(cfg.image_hw % (1 << cfg.depth) == 0,
          "convnet: image size " + std::to_string(cfg.image_hw) +
              " not divisible by 2^depth");
    check(!cfg.groupnorm || cfg.width % cfg.groups == 0,
          "convnet: width not divisible by groups");
    check(caption_dim >= 0, "convnet: caption_dim must be >= 0");
    Model m;
    m.arch = Arch::convnet;
    m.cfg = cfg;
    m.caption_dim = caption_dim;
    int cin = cfg.in_channels;
    for (int b = 1; b <= cfg.depth; ++b) {
      std::string p = "block" + std::to_string(b);
      m.params.add(p + ".conv.w", kaiming_uniform({cfg.width, cin, 3, 3}, cin * 9, rng));
      if (cfg.groupnorm) {
        // no conv bias under groupnorm: mean subtraction cancels it exactly,
        // leaving a structurally zero gradient; beta provides the shift
        m.params.add(p + ".gn.gamma", Tensor::full({cfg.width}, 1.0, true));
        m.params.add(p + ".gn.beta", Tensor::zeros({cfg.width}, true));
      } else {
        m.params.add(p + ".conv.b", Tensor::zeros({cfg.width}, true));
      }
      cin = cfg.width;
    }
    int f = m.feature_dim();
    m.params.add("head.w",
                 kaiming_uniform({cfg.num_classes, f + caption_dim}, f + caption_dim, rng));
    m.params.add("head.b", Tensor::zeros({cfg.num_classes}, true));
    return m;
  }

  static Model make_mlp(const ConvNetConfig& cfg, std::mt19937_64& rng) {
    Model m;
    m.arch = Arch::mlp;
    m.cfg = cfg;
    int in = cfg.in_channels * cfg.image_hw * cfg.image_hw;
    m.params.add("fc1.w", kaiming_uniform({kMlpHidden, in}, in, rng));
    m.params.add("fc1.b", Tensor::zeros({kMlpHidden}, true));
    m.params.add("fc2.w", kaiming_uniform({kMlpHidden, kMlpHidden}, kMlpHidden, rng));
    m.params.add("fc2.b", Tensor::zeros({kMlpHidden}, true));
    m.params.add("head.w", kaiming_uniform({cfg.num_classes, kMlpHidden}, kMlpHidden, rng));
    m.params.add("head.b", Tensor::zeros({cfg.num_classes}, true));
    return m;
  }

  static Model make_minivgg(const ConvNetConfig& cfg, std::mt19937_64& rng) {
    check(cfg.image_hw % 4 == 0, "minivgg: image size must be divisible by 4");
    Model m;
    m.arch = Arch::minivgg;
    m.cfg = cfg;
    int w = kMiniVggWidth;
    int cin = cfg.in_channels;
    for (int s = 1; s <= 2; ++s) {
      std::string p = "stack" + std::to_string(s);
      m.params.add(p + ".conv1.w", kaiming_uniform({w, cin, 3, 3}, cin * 9, rng));
      m.params.add(p + ".conv1.b", Tensor::zeros({w}, true));
      m.params.add(p + ".conv2.w", kaiming_uniform({w, w, 3, 3}, w * 9, rng));
      m.params.add(p + ".conv2.b", Tensor::zeros({w}, true));
      cin = w;
    }
    int f = w * (cfg.image_hw / 4) * (cfg.image_hw / 4);
    m.params.add("head.w", kaiming_uniform({cfg.num_classes, f}, f, rng));
    m.params.add("head.b", Tensor::zeros({cfg.num_classes}, true));
    return m;
  }

  int feature_dim() const {
    int hw = cfg.image_hw;
    switch (arch) {
      case Arch::convnet:
        return cfg.width * (hw >> cfg.depth) * (hw >> cfg.depth);
      case Arch::mlp:
        return kMlpHidden;
      case Arch::minivgg:
        return kMiniVggWidth * (hw / 4) * (hw / 4);
    }
    return 0;
  }

  // penultimate representation (post final pool / hidden layer), [N,F]
  Tensor features(const Tensor& images) const {
    switch (arch) {
      case Arch::convnet: {
        check_images(images);
        Tensor h = images;
        for (int b = 1; b <= cfg.depth; ++b) {
          std::string p = "block" + std::to_string(b);
          h = conv2d(h, params.at(p + ".conv.w"), 1, 1);
          if (cfg.groupnorm)
            h = group_norm(h, params.at(p + ".gn.gamma"), params.at(p + ".gn.beta"),
                           cfg.groups);
          else
            h = add(h, channel_broadcast(params.at(p + ".conv.b"), h.shape()[0], h.shape()[2],
                                         h.shape()[3]));
          h = relu(h);
          h = avgpool2d(h, 2);
        }
        return flatten(h);
      }
      case Arch::mlp: {
        check_images(images);
        Tensor h = relu(linear(flatten(images), params.at("fc1.w"), params.at("fc1.b")));
        return relu(linear(h, params.at("fc2.w"), params.at("fc2.b")));
      }
      case Arch::minivgg: {
        check_images(images);
        Tensor h = images;
        for (int s = 1; s <= 2; ++s) {
          std::string p = "stack" + std::to_string(s);
          h = conv2d(h, params.at(p + ".conv1.w"), 1, 1);
          h = add(h, channel_broadcast(params.at(p + ".conv1.b"), h.shape()[0], h.shape()[2],
                                       h.shape()[3]));
          h = relu(h);
          h = conv2d(h, params.at(p + ".conv2.w"), 1, 1);
          h = add(h, channel_broadcast(params.at(p + ".conv2.b"), h.shape()[0], h.shape()[2],
                                       h.shape()[3]));
          h = relu(h);
          h = avgpool2d(h, 2);
        }
        return flatten(h);
      }
    }
    fail("features: bad arch");
  }

  Tensor classify(const Tensor& images) const {
    check(caption_dim == 0,
          "classify: model has a caption head (dim " + std::to_string(caption_dim) +
              ") but no embeddings were supplied");
    return linear(features(images), params.at("head.w"), params.at("head.b"));
  }

  Tensor classify(const Tensor& images, const Tensor& caption_embeddings) const {
    check(caption_dim > 0, "classify: caption embeddings supplied to a model without a "
                           "caption head");
    check(caption_embeddings.shape().size() == 2 &&
              caption_embeddings.shape()[1] == caption_dim &&
              caption_embeddings.shape()[0] == images.shape()[0],
          "classify: embeddings " + shape_str(caption_embeddings.shape()) +
              " incompatible with caption_dim " + std::to_string(caption_dim));
    Tensor fused = concat_cols({features(images), caption_embeddings});
    return linear(fused, params.at("head.w"), params.at("head.b"));
  }

 private:
  void check_images(const Tensor& images) const {
    check(images.shape().size() == 4 && images.shape()[1] == cfg.in_channels &&
              images.shape()[2] == cfg.image_hw && images.shape()[3] == cfg.image_hw,
          std::string("model: images ") + shape_str(images.shape()) + " do not match input " +
              shape_str({-1, cfg.in_channels, cfg.image_hw, cfg.image_hw}));
  }
};

// freshly initialized trainable model of a named architecture
inline Model make_transfer_arch(const std::string& name, const ConvNetConfig& cfg,
                                std::mt19937_64& rng) {
  switch (arch_parse(name)) {
    case Arch::convnet: return Model::make_convnet(cfg, 0, rng);
    case Arch::mlp: return Model::make_mlp(cfg, rng);
    case Arch::minivgg: return Model::make_minivgg(cfg, rng);
  }
  fail("make_transfer_arch: bad arch");
}

// ---------------------------------------------------------------------------
// surrogate caption encoder: 2-block ConvNet projecting to d dims
// ---------------------------------------------------------------------------

class CaptionEncoder {
 public:
  static constexpr int kWidth = 32;

  static CaptionEncoder make(int in_channels, int image_hw, int caption_dim,
                             std::uint64_t seed) {
    CaptionEncoder e;
    e.cfg_.depth = 2;
    e.cfg_.width = kWidth;
    e.cfg_.in_channels = in_channels;
    e.cfg_.image_hw = image_hw;
    e.cfg_.num_classes = caption_dim;  // head projects to embedding space
    std::mt19937_64 rng = make_rng(seed, 0x656e63);
    e.net_ = Model::make_convnet(e.cfg_, 0, rng);
    e.caption_dim_ = caption_dim;
    return e;
  }

  // [N,d]; differentiable w.r.t. image pixels (and params while unfrozen)
  Tensor embed(const Tensor& images) const { return net_.classify(images); }

  void freeze() {
    for (Tensor& t : net_.params.tensors) t.set_requires_grad(false);
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }
  int caption_dim() const { return caption_dim_; }
  Model& net() { return net_; }
  const Model& net() const { return net_; }

 private:
  ConvNetConfig cfg_;
  Model net_;
  int caption_dim_ = 0;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// checkpoints: dataio container with tensors keyed by parameter name
// ---------------------------------------------------------------------------

inline void save_params(const std::filesystem::path& dir, const ModelParams& p,
                        const std::string& name = "checkpoint") {
  Manifest m;
  m.name = name;
  std::vector<NamedArray> arrays;
  for (std::size_t i = 0; i < p.size(); ++i) {
    NamedArray a;
    a.name = p.names[i];
    a.shape = p.tensors[i].shape();
    a.dtype = Dtype::f64;
    a.file = "params.f64.bin";
    a.f64.assign(p.tensors[i].data().begin(), p.tensors[i].data().end());
    arrays.push_back(std::move(a));
  }
  write_container(dir, m, arrays);
}

inline void load_params(const std::filesystem::path& dir, ModelParams& p) {
  Manifest m = read_manifest(dir);
  for (std::size_t i = 0; i < p.size(); ++i) {
    NamedArray a = read_tensor(dir, m, p.names[i]);
    check(a.shape == p.tensors[i].shape(),
          "load_params: \"" + p.names[i] + "\" has shape " + shape_str(a.shape) +
              ", model expects " + shape_str(p.tensors[i].shape()));
    std::copy(a.f64.begin(), a.f64.end(), p.tensors[i].data_mut());
  }
}

}  // namespace mmd
