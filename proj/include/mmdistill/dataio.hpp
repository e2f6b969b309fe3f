#pragma once
// Multi-modal dataset container: one JSON manifest plus raw little-endian
// binary blobs, offset-addressed. Also the deterministic toy-scene generator
// (images + exact foreground masks + caption embeddings) and class-wise batch
// sampling.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmdistill/common.hpp"
#include "mmdistill/tensor.hpp"

namespace mmd {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// container
// ---------------------------------------------------------------------------

enum class Dtype { f64, u8 };

inline std::size_t dtype_size(Dtype d) { return d == Dtype::f64 ? 8 : 1; }

inline std::string dtype_str(Dtype d) { return d == Dtype::f64 ? "f64" : "u8"; }

inline Dtype dtype_parse(const std::string& s) {
  if (s == "f64") return Dtype::f64;
  if (s == "u8") return Dtype::u8;
  fail("manifest: unknown dtype \"" + s + "\"");
}

struct TensorEntry {
  std::string name;
  Shape shape;
  Dtype dtype = Dtype::f64;
  std::string file;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct Manifest {
  std::string name;
  int classes = 0;
  std::map<std::string, int> split_counts;  // split -> samples per class
  Shape image_shape;                        // [C,H,W]
  int caption_dim = 0;
  std::uint64_t seed = 0;
  std::vector<TensorEntry> tensors;
  json extra;  // e.g. echo of the run config that produced a distilled set

  const TensorEntry& entry(const std::string& tname) const {
    for (const auto& t : tensors)
      if (t.name == tname) return t;
    fail("manifest: no tensor named \"" + tname + "\"");
  }

  bool has_tensor(const std::string& tname) const {
    for (const auto& t : tensors)
      if (t.name == tname) return true;
    return false;
  }
};

inline json manifest_to_json(const Manifest& m) {
  json j;
  j["name"] = m.name;
  j["classes"] = m.classes;
  j["splits"] = m.split_counts;
  j["shape"] = m.image_shape;
  j["caption_dim"] = m.caption_dim;
  j["seed"] = m.seed;
  json ts = json::array();
  for (const auto& t : m.tensors) {
    ts.push_back({{"name", t.name},
                  {"shape", t.shape},
                  {"dtype", dtype_str(t.dtype)},
                  {"file", t.file},
                  {"offset", t.offset},
                  {"length", t.length}});
  }
  j["tensors"] = ts;
  if (!m.extra.is_null()) j["run_config"] = m.extra;
  return j;
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.name = j.at("name").get<std::string>();
  m.classes = j.at("classes").get<int>();
  m.split_counts = j.at("splits").get<std::map<std::string, int>>();
  m.image_shape = j.at("shape").get<Shape>();
  m.caption_dim = j.at("caption_dim").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& tj : j.at("tensors")) {
    TensorEntry t;
    t.name = tj.at("name").get<std::string>();
    t.shape = tj.at("shape").get<Shape>();
    t.dtype = dtype_parse(tj.at("dtype").get<std::string>());
    t.file = tj.at("file").get<std::string>();
    t.offset = tj.at("offset").get<std::uint64_t>();
    t.length = tj.at("length").get<std::uint64_t>();
    m.tensors.push_back(std::move(t));
  }
  if (j.contains("run_config")) m.extra = j.at("run_config");
  return m;
}

// One in-memory array destined for (or loaded from) a container file.
struct NamedArray {
  std::string name;
  Shape shape;
  Dtype dtype = Dtype::f64;
  std::string file;  // target blob file within the container directory
  std::vector<double> f64;
  std::vector<std::uint8_t> u8;

  std::size_t byte_length() const {
    return dtype == Dtype::f64 ? f64.size() * 8 : u8.size();
  }
};

// Writes blobs (offsets assigned in array order per file) plus manifest.json.
inline void write_container(const std::filesystem::path& dir, Manifest manifest,
                            std::vector<NamedArray>& arrays) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  check(!ec || std::filesystem::exists(dir), "write_container: cannot create " + dir.string());

  std::map<std::string, std::uint64_t> file_offsets;
  manifest.tensors.clear();
  for (auto& a : arrays) {
    std::size_t n = numel(a.shape);
    std::size_t elems = a.dtype == Dtype::f64 ? a.f64.size() : a.u8.size();
    check(n == elems, "write_container: tensor \"" + a.name + "\" shape " +
                          shape_str(a.shape) + " does not match data length " +
                          std::to_string(elems));
    TensorEntry t;
    t.name = a.name;
    t.shape = a.shape;
    t.dtype = a.dtype;
    t.file = a.file;
    t.offset = file_offsets[a.file];
    t.length = a.byte_length();
    file_offsets[a.file] += t.length;
    manifest.tensors.push_back(std::move(t));
  }

  // group arrays by file, write sequentially
  for (const auto& [fname, total] : file_offsets) {
    std::ofstream out(dir / fname, std::ios::binary | std::ios::trunc);
    check(out.good(), "write_container: cannot open " + (dir / fname).string());
    for (const auto& a : arrays) {
      if (a.file != fname) continue;
      if (a.dtype == Dtype::f64)
        out.write(reinterpret_cast<const char*>(a.f64.data()),
                  static_cast<std::streamsize>(a.f64.size() * 8));
      else
        out.write(reinterpret_cast<const char*>(a.u8.data()),
                  static_cast<std::streamsize>(a.u8.size()));
    }
    check(out.good(), "write_container: short write to " + (dir / fname).string());
  }

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  check(mf.good(), "write_container: cannot open " + (dir / "manifest.json").string());
  mf << manifest_to_json(manifest).dump(2) << "\n";
}

inline NamedArray read_tensor(const std::filesystem::path& dir, const Manifest& m,
                              const std::string& name) {
  const TensorEntry& t = m.entry(name);
  std::size_t want = numel(t.shape) * dtype_size(t.dtype);
  check(want == t.length, "container: tensor \"" + t.name + "\" declares shape " +
                              shape_str(t.shape) + " but length " + std::to_string(t.length));
  auto path = dir / t.file;
  std::error_code ec;
  std::uint64_t fsize = std::filesystem::file_size(path, ec);
  check(!ec, "container: missing blob file " + path.string() + " (tensor \"" + t.name + "\")");
  check(t.offset + t.length <= fsize,
        "container: file " + t.file + " truncated: tensor \"" + t.name + "\" needs bytes [" +
            std::to_string(t.offset) + "," + std::to_string(t.offset + t.length) +
            ") but file has " + std::to_string(fsize));
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "container: cannot open " + path.string());
  in.seekg(static_cast<std::streamoff>(t.offset));
  NamedArray a;
  a.name = t.name;
  a.shape = t.shape;
  a.dtype = t.dtype;
  a.file = t.file;
  if (t.dtype == Dtype::f64) {
    a.f64.resize(numel(t.shape));
    in.read(reinterpret_cast<char*>(a.f64.data()), static_cast<std::streamsize>(t.length));
  } else {
    a.u8.resize(numel(t.shape));
    in.read(reinterpret_cast<char*>(a.u8.data()), static_cast<std::streamsize>(t.length));
  }
  check(in.gcount() == static_cast<std::streamsize>(t.length),
        "container: short read of tensor \"" + t.name + "\" from " + t.file);
  return a;
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  check(in.good(), "container: cannot open " + (dir / "manifest.json").string());
  json j;
  in >> j;
  Manifest m = manifest_from_json(j);
  // byte-size consistency for every declared file
  std::map<std::string, std::uint64_t> extent;
  for (const auto& t : m.tensors) {
    check(numel(t.shape) * dtype_size(t.dtype) == t.length,
          "container: tensor \"" + t.name + "\" declares shape " + shape_str(t.shape) +
              " (dtype " + dtype_str(t.dtype) + ") but length " + std::to_string(t.length));
    extent[t.file] = std::max(extent[t.file], t.offset + t.length);
  }
  for (const auto& [fname, ext] : extent) {
    std::error_code ec;
    std::uint64_t fsize = std::filesystem::file_size(dir / fname, ec);
    check(!ec, "container: missing blob file " + fname);
    check(fsize == ext, "container: file " + fname + " has " + std::to_string(fsize) +
                            " bytes, manifest declares " + std::to_string(ext));
  }
  return m;
}

// ---------------------------------------------------------------------------
// toy dataset generation
// ---------------------------------------------------------------------------

struct GenSpec {
  std::string name = "toy";
  int num_classes = 6;
  int channels = 3;
  int size = 32;
  int train_per_class = 500;
  int test_per_class = 200;
  enum class Clutter { none, distractors } clutter = Clutter::none;
  double clutter_density = 0.3;
  int caption_dim = 16;
  double caption_noise = 0.1;
  std::uint64_t seed = 1;
};

namespace detail {

constexpr int kNumShapes = 6;  // circle, square, triangle, cross, ring, bar

inline const double* palette(int i) {
  static const double colors[6][3] = {
      {0.95, 0.15, 0.15}, {0.15, 0.90, 0.20}, {0.20, 0.35, 0.95},
      {0.95, 0.90, 0.15}, {0.90, 0.20, 0.90}, {0.15, 0.90, 0.90}};
  return colors[i % 6];
}

inline void raster_shape(int shape_id, double cy, double cx, double r, int H, int W,
                         std::vector<std::uint8_t>& out) {
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double dy = y - cy, dx = x - cx;
      bool in = false;
      switch (shape_id % kNumShapes) {
        case 0:  // circle
          in = dy * dy + dx * dx <= r * r;
          break;
        case 1:  // square
          in = std::abs(dy) <= r * 0.85 && std::abs(dx) <= r * 0.85;
          break;
        case 2: {  // upward triangle
          double t = dy + r;  // 0 at apex .. 2r at base
          in = t >= 0.0 && t <= 2.0 * r && std::abs(dx) <= t * 0.5;
          break;
        }
        case 3:  // cross
          in = (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) ||
               (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
          break;
        case 4: {  // ring
          double d2 = dy * dy + dx * dx;
          in = d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
          break;
        }
        case 5:  // horizontal bar
          in = std::abs(dy) <= r * 0.4 && std::abs(dx) <= r;
          break;
      }
      if (in) out[static_cast<std::size_t>(y) * W + x] = 1;
    }
  }
}

inline void paint(std::vector<double>& img, const std::vector<std::uint8_t>& mask,
                  const double* color, int C, int H, int W) {
  for (int c = 0; c < C; ++c) {
    double* plane = img.data() + static_cast<std::size_t>(c) * H * W;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) plane[i] = color[c % 3];
  }
}

}  // namespace detail

struct RenderedSample {
  std::vector<double> image;        // [C,H,W]
  std::vector<std::uint8_t> mask;   // [H,W], exact foreground raster
  std::vector<double> background;   // [C,H,W], scene without the foreground
  std::vector<double> caption;      // [d]
};

// Pure function of (spec, split_tag, class, index); generate() is a loop over it.
inline RenderedSample render_sample(const GenSpec& spec, int split_tag, int cls, int idx) {
  int H = spec.size, W = spec.size, C = spec.channels;
  std::mt19937_64 rng = make_rng(spec.seed, (static_cast<std::uint64_t>(split_tag) << 44) ^
                                                (static_cast<std::uint64_t>(cls) << 24) ^
                                                static_cast<std::uint64_t>(idx));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  RenderedSample s;
  s.image.assign(static_cast<std::size_t>(C) * H * W, 0.0);

  // smooth background: coarse grid, bilinear upsample
  constexpr int G = 4;
  for (int c = 0; c < C; ++c) {
    double grid[G][G];
    for (int gy = 0; gy < G; ++gy)
      for (int gx = 0; gx < G; ++gx) grid[gy][gx] = 0.15 + 0.4 * unit(rng);
    double* plane = s.image.data() + static_cast<std::size_t>(c) * H * W;
    for (int y = 0; y < H; ++y) {
      double fy = static_cast<double>(y) * (G - 1) / (H - 1);
      int y0 = static_cast<int>(fy);
      int y1 = std::min(y0 + 1, G - 1);
      double ty = fy - y0;
      for (int x = 0; x < W; ++x) {
        double fx = static_cast<double>(x) * (G - 1) / (W - 1);
        int x0 = static_cast<int>(fx);
        int x1 = std::min(x0 + 1, G - 1);
        double tx = fx - x0;
        double v = (1 - ty) * ((1 - tx) * grid[y0][x0] + tx * grid[y0][x1]) +
                   ty * ((1 - tx) * grid[y1][x0] + tx * grid[y1][x1]);
        plane[static_cast<std::size_t>(y) * W + x] = v;
      }
    }
  }

  // distractors: same shape vocabulary, random colors, never the class's own
  // (shape,color) pair, drawn into the background layer
  if (spec.clutter == GenSpec::Clutter::distractors) {
    std::bernoulli_distribution extra(spec.clutter_density);
    int count = 1 + (extra(rng) ? 1 : 0) + (extra(rng) ? 1 : 0);
    std::uniform_int_distribution<int> pick(0, detail::kNumShapes - 1);
    for (int k = 0; k < count; ++k) {
      int ds, dc;
      do {
        ds = pick(rng);
        dc = pick(rng);
      } while (ds == cls % detail::kNumShapes && dc == cls % detail::kNumShapes);
      double cy = (0.15 + 0.7 * unit(rng)) * H;
      double cx = (0.15 + 0.7 * unit(rng)) * W;
      double r = (0.10 + (0.06 + 0.10 * spec.clutter_density) * unit(rng)) * spec.size;
      std::vector<std::uint8_t> dm(static_cast<std::size_t>(H) * W, 0);
      detail::raster_shape(ds, cy, cx, r, H, W, dm);
      detail::paint(s.image, dm, detail::palette(dc), C, H, W);
    }
  }

  s.background = s.image;

  // foreground: class shape in class color, jittered position and scale
  double cy = (0.32 + 0.36 * unit(rng)) * H;
  double cx = (0.32 + 0.36 * unit(rng)) * W;
  double r = (0.16 + 0.10 * unit(rng)) * spec.size;
  s.mask.assign(static_cast<std::size_t>(H) * W, 0);
  detail::raster_shape(cls % detail::kNumShapes, cy, cx, r, H, W, s.mask);
  detail::paint(s.image, s.mask, detail::palette(cls % 6), C, H, W);

  // caption embedding: orthogonal (one-hot) class prototype plus noise
  s.caption.assign(spec.caption_dim, 0.0);
  s.caption[cls] = 1.0;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int i = 0; i < spec.caption_dim; ++i) s.caption[i] += spec.caption_noise * noise(rng);
  return s;
}

inline Manifest generate(const GenSpec& spec, const std::filesystem::path& out_dir) {
  check(spec.num_classes > 0 && spec.train_per_class > 0 && spec.test_per_class > 0,
        "generate: counts must be positive");
  check(spec.caption_dim >= spec.num_classes,
        "generate: caption_dim " + std::to_string(spec.caption_dim) +
            " < num_classes " + std::to_string(spec.num_classes) +
            " (orthogonal prototypes need d >= C)");
  check(spec.size >= 16, "generate: image size must be >= 16");
  check(spec.clutter_density >= 0.0 && spec.clutter_density <= 1.0,
        "generate: clutter_density must be in [0,1]");

  int H = spec.size, W = spec.size, C = spec.channels, d = spec.caption_dim;
  Manifest m;
  m.name = spec.name;
  m.classes = spec.num_classes;
  m.split_counts = {{"train", spec.train_per_class}, {"test", spec.test_per_class}};
  m.image_shape = {C, H, W};
  m.caption_dim = d;
  m.seed = spec.seed;
  m.extra = {{"clutter", spec.clutter == GenSpec::Clutter::none ? "none" : "distractors"},
             {"clutter_density", spec.clutter_density},
             {"caption_noise", spec.caption_noise}};

  std::vector<NamedArray> arrays;
  int split_tag = 0;
  for (const char* split : {"train", "test"}) {
    int per = split_tag == 0 ? spec.train_per_class : spec.test_per_class;
    int n = per * spec.num_classes;
    NamedArray images{std::string(split) + ".images", Shape{n, C, H, W}, Dtype::f64,
                      std::string(split) + ".f64.bin"};
    NamedArray captions{std::string(split) + ".captions", Shape{n, d}, Dtype::f64,
                        std::string(split) + ".f64.bin"};
    NamedArray labels{std::string(split) + ".labels", Shape{n}, Dtype::u8,
                      std::string(split) + ".u8.bin"};
    NamedArray masks{std::string(split) + ".masks", Shape{n, H, W}, Dtype::u8,
                     std::string(split) + ".u8.bin"};
    images.f64.reserve(static_cast<std::size_t>(n) * C * H * W);
    captions.f64.reserve(static_cast<std::size_t>(n) * d);
    labels.u8.reserve(n);
    masks.u8.reserve(static_cast<std::size_t>(n) * H * W);
    for (int cls = 0; cls < spec.num_classes; ++cls) {
      for (int idx = 0; idx < per; ++idx) {
        RenderedSample s = render_sample(spec, split_tag, cls, idx);
        std::size_t area = 0;
        for (auto v : s.mask) area += v;
        check(area > 0 && area * 2 < static_cast<std::size_t>(H) * W,
              "generate: foreground mask degenerate (area " + std::to_string(area) + ")");
        images.f64.insert(images.f64.end(), s.image.begin(), s.image.end());
        captions.f64.insert(captions.f64.end(), s.caption.begin(), s.caption.end());
        labels.u8.push_back(static_cast<std::uint8_t>(cls));
        masks.u8.insert(masks.u8.end(), s.mask.begin(), s.mask.end());
      }
    }
    arrays.push_back(std::move(images));
    arrays.push_back(std::move(captions));
    arrays.push_back(std::move(labels));
    arrays.push_back(std::move(masks));
    ++split_tag;
  }
  write_container(out_dir, m, arrays);
  return m;
}

// ---------------------------------------------------------------------------
// loaded dataset
// ---------------------------------------------------------------------------

struct Split {
  int count = 0;  // total samples
  std::vector<double> images;         // [n,C,H,W]
  std::vector<std::uint8_t> labels;   // [n]
  std::vector<std::uint8_t> masks;    // [n,H,W]
  std::vector<double> captions;       // [n,d]
};

struct Dataset {
  Manifest manifest;
  Split train, test;
  std::vector<std::vector<int>> train_by_class;

  int classes() const { return manifest.classes; }
  int channels() const { return manifest.image_shape[0]; }
  int height() const { return manifest.image_shape[1]; }
  int width() const { return manifest.image_shape[2]; }
  int caption_dim() const { return manifest.caption_dim; }
  std::size_t image_numel() const {
    return static_cast<std::size_t>(channels()) * height() * width();
  }

  // class-mean caption embedding over the train split
  std::vector<double> class_mean_caption(int cls) const {
    int d = caption_dim();
    std::vector<double> mean(d, 0.0);
    long n = 0;
    for (int i = 0; i < train.count; ++i) {
      if (train.labels[i] != cls) continue;
      for (int k = 0; k < d; ++k) mean[k] += train.captions[static_cast<std::size_t>(i) * d + k];
      ++n;
    }
    check(n > 0, "dataset: class " + std::to_string(cls) + " has no train samples");
    for (double& v : mean) v /= static_cast<double>(n);
    return mean;
  }
};

inline Split load_split(const std::filesystem::path& dir, const Manifest& m,
                        const std::string& split) {
  Split s;
  NamedArray images = read_tensor(dir, m, split + ".images");
  NamedArray labels = read_tensor(dir, m, split + ".labels");
  s.count = images.shape[0];
  s.images = std::move(images.f64);
  s.labels = std::move(labels.u8);
  // masks and captions are optional annotations; methods that need them
  // validate their presence at the point of use
  if (m.has_tensor(split + ".masks")) {
    s.masks = read_tensor(dir, m, split + ".masks").u8;
    for (std::uint8_t v : s.masks)
      check(v <= 1, "dataset: mask byte " + std::to_string(int(v)) + " outside {0,1} in split " +
                        split);
  }
  if (m.has_tensor(split + ".captions")) {
    s.captions = read_tensor(dir, m, split + ".captions").f64;
    for (double v : s.captions)
      check(std::isfinite(v), "dataset: non-finite caption embedding entry in split " + split);
  }
  for (int i = 0; i < s.count; ++i)
    check(s.labels[i] < m.classes, "dataset: label " + std::to_string(int(s.labels[i])) +
                                       " out of range in split " + split);
  return s;
}

inline Dataset load(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir);
  ds.train = load_split(dir, ds.manifest, "train");
  ds.test = load_split(dir, ds.manifest, "test");
  ds.train_by_class.assign(ds.manifest.classes, {});
  for (int i = 0; i < ds.train.count; ++i)
    ds.train_by_class[ds.train.labels[i]].push_back(i);
  return ds;
}

// N_B distinct samples of class c, order determined by the rng
inline std::vector<int> sample_class_batch(const Dataset& ds, int cls, int nb,
                                           std::mt19937_64& rng) {
  check(cls >= 0 && cls < ds.classes(), "sample_class_batch: class out of range");
  const std::vector<int>& pool = ds.train_by_class[cls];
  check(nb >= 1 && nb <= static_cast<int>(pool.size()),
        "sample_class_batch: requested " + std::to_string(nb) + " samples but class " +
            std::to_string(cls) + " has " + std::to_string(pool.size()));
  std::vector<int> idx = pool;  // partial Fisher-Yates
  for (int i = 0; i < nb; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(idx.size()) - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(nb);
  return idx;
}

// ---- batch materialization ----

inline Tensor images_tensor(const Dataset& ds, const Split& split, const std::vector<int>& idx) {
  std::size_t im = ds.image_numel();
  std::vector<double> v(idx.size() * im);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(split.images.data() + static_cast<std::size_t>(idx[i]) * im, im,
                v.data() + i * im);
  return Tensor::constant(Shape{(int)idx.size(), ds.channels(), ds.height(), ds.width()},
                          std::move(v));
}

inline Tensor masks_tensor(const Dataset& ds, const Split& split, const std::vector<int>& idx) {
  std::size_t hw = static_cast<std::size_t>(ds.height()) * ds.width();
  std::vector<double> v(idx.size() * hw);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t k = 0; k < hw; ++k)
      v[i * hw + k] = split.masks[static_cast<std::size_t>(idx[i]) * hw + k];
  return Tensor::constant(Shape{(int)idx.size(), ds.height(), ds.width()}, std::move(v));
}

inline Tensor captions_tensor(const Dataset& ds, const Split& split, const std::vector<int>& idx) {
  int d = ds.caption_dim();
  std::vector<double> v(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(split.captions.data() + static_cast<std::size_t>(idx[i]) * d, d,
                v.data() + i * static_cast<std::size_t>(d));
  return Tensor::constant(Shape{(int)idx.size(), d}, std::move(v));
}

// ---------------------------------------------------------------------------
// linear separability probe (ridge least squares on raw pixels, one pass)
// ---------------------------------------------------------------------------

inline double linear_probe_accuracy(const Dataset& ds, double ridge = 10.0) {
  int D = static_cast<int>(ds.image_numel()) + 1;  // bias column
  int C = ds.classes();
  int n = ds.train.count;
  std::vector<double> xtx(static_cast<std::size_t>(D) * D, 0.0);
  std::vector<double> xty(static_cast<std::size_t>(D) * C, 0.0);
  std::vector<double> row(D);
  for (int i = 0; i < n; ++i) {
    std::copy_n(ds.train.images.data() + i * ds.image_numel(), D - 1, row.data());
    row[D - 1] = 1.0;
    int y = ds.train.labels[i];
    for (int a = 0; a < D; ++a) {
      double ra = row[a];
      if (ra == 0.0) continue;
      double* xr = xtx.data() + static_cast<std::size_t>(a) * D;
      for (int b = a; b < D; ++b) xr[b] += ra * row[b];
      xty[static_cast<std::size_t>(a) * C + y] += ra;
    }
  }
  for (int a = 0; a < D; ++a) {
    for (int b = 0; b < a; ++b)
      xtx[static_cast<std::size_t>(a) * D + b] = xtx[static_cast<std::size_t>(b) * D + a];
    xtx[static_cast<std::size_t>(a) * D + a] += ridge;
  }
  // in-place Cholesky
  for (int a = 0; a < D; ++a) {
    double* ra = xtx.data() + static_cast<std::size_t>(a) * D;
    for (int b = 0; b < a; ++b) {
      const double* rb = xtx.data() + static_cast<std::size_t>(b) * D;
      double s = ra[b];
      for (int k = 0; k < b; ++k) s -= ra[k] * rb[k];
      ra[b] = s / rb[b];
    }
    double s = ra[a];
    for (int k = 0; k < a; ++k) s -= ra[k] * ra[k];
    check(s > 0.0, "linear_probe: matrix not positive definite");
    ra[a] = std::sqrt(s);
  }
  // solve L L^T W = X^T Y  (forward then backward substitution, per class)
  std::vector<double> w(static_cast<std::size_t>(D) * C);
  for (int c = 0; c < C; ++c) {
    std::vector<double> z(D);
    for (int a = 0; a < D; ++a) {
      const double* ra = xtx.data() + static_cast<std::size_t>(a) * D;
      double s = xty[static_cast<std::size_t>(a) * C + c];
      for (int k = 0; k < a; ++k) s -= ra[k] * z[k];
      z[a] = s / ra[a];
    }
    for (int a = D - 1; a >= 0; --a) {
      double s = z[a];
      for (int k = a + 1; k < D; ++k) s -= xtx[static_cast<std::size_t>(k) * D + a] * w[static_cast<std::size_t>(k) * C + c];
      w[static_cast<std::size_t>(a) * C + c] = s / xtx[static_cast<std::size_t>(a) * D + a];
    }
  }
  // accuracy on the test split
  long correct = 0;
  for (int i = 0; i < ds.test.count; ++i) {
    std::copy_n(ds.test.images.data() + i * ds.image_numel(), D - 1, row.data());
    row[D - 1] = 1.0;
    int best = 0;
    double best_v = -1e300;
    for (int c = 0; c < C; ++c) {
      double v = 0.0;
      for (int a = 0; a < D; ++a) v += row[a] * w[static_cast<std::size_t>(a) * C + c];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    if (best == ds.test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / ds.test.count;
}

// fraction of samples whose caption embedding is nearest its own class prototype
inline double caption_prototype_accuracy(const Dataset& ds) {
  int d = ds.caption_dim();
  long correct = 0;
  for (int i = 0; i < ds.train.count; ++i) {
    const double* e = ds.train.captions.data() + static_cast<std::size_t>(i) * d;
    int best = 0;
    double best_v = 1e300;
    for (int c = 0; c < ds.classes(); ++c) {
      double dist = 0.0;
      for (int k = 0; k < d; ++k) {
        double diff = e[k] - (k == c ? 1.0 : 0.0);
        dist += diff * diff;
      }
      if (dist < best_v) {
        best_v = dist;
        best = c;
      }
    }
    if (best == ds.train.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / ds.train.count;
}

}  // namespace mmd
