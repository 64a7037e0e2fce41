#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vlpseg/backbones.hpp"
#include "vlpseg/errors.hpp"
#include "vlpseg/image.hpp"
#include "vlpseg/rng.hpp"

namespace vlpseg {

namespace seeds {
constexpr std::uint64_t kEpisode = 31;
constexpr std::uint64_t kTestPairs = 32;
constexpr std::uint64_t kTrainStream = 33;
}  // namespace seeds

// One few-shot task: segment the class_id object in target_image given the
// annotated reference and the text label.
struct Episode {
  Image target_image;
  Image reference_image;
  BinaryMask reference_mask;  // image resolution
  int class_id = -1;
  std::string text_label;
  BinaryMask gt_mask;  // image resolution
  std::uint64_t seed = 0;  // generation seed, kept for diagnostics
};

struct GeneratorParams {
  int image_size = 64;
  int max_distractors = 2;
  double min_size = 9.0;
  double max_size = 19.0;
  double distractor_min_size = 7.0;
  double distractor_max_size = 12.0;
};

// ---------------------------------------------------------------------------
// Shape rendering. Pixel centers are tested against rotated solid shapes;
// colors come straight off the vocabulary palette (already 8-bit quantized),
// so images survive PPM round-trips exactly.
// ---------------------------------------------------------------------------

namespace detail {

inline bool point_in_shape(int kind, double x, double y, double s) {
  double ax = std::fabs(x), ay = std::fabs(y);
  switch (kind % OracleVocabulary::kShapeKinds) {
    case 0:  // circle
      return x * x + y * y <= s * s;
    case 1:  // square
      return std::max(ax, ay) <= 0.886 * s;
    case 2: {  // equilateral triangle, circumradius 1.2 s
      double r = 1.2 * s;
      // vertices at angles 90, 210, 330 degrees; inside = same side of all edges
      for (int i = 0; i < 3; ++i) {
        double a0 = (90.0 + 120.0 * i) * M_PI / 180.0;
        double a1 = (90.0 + 120.0 * (i + 1)) * M_PI / 180.0;
        double x0 = r * std::cos(a0), y0 = r * std::sin(a0);
        double x1 = r * std::cos(a1), y1 = r * std::sin(a1);
        double cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if (cross < 0) return false;
      }
      return true;
    }
    case 3:  // diamond
      return ax + ay <= 1.2 * s;
    case 4:  // plus
      return (ax <= 0.45 * s && ay <= s) || (ay <= 0.45 * s && ax <= s);
    default: {  // regular hexagon, circumradius s, vertices at (+-s, 0)
      double q = 0.866025403784;  // sqrt(3)/2
      return ay <= q * s && q * ax + 0.5 * ay <= q * s;
    }
  }
}

struct ShapeInstance {
  int class_id;
  int kind;
  double cx, cy, size, angle;
};

inline void stamp(Image& im, std::vector<std::uint8_t>& index_mask, const ShapeInstance& sh,
                  const std::array<double, 3>& color) {
  double ca = std::cos(-sh.angle), sa = std::sin(-sh.angle);
  // conservative bounding box around the rotated shape
  int lo_x = std::max(0, static_cast<int>(std::floor(sh.cx - 1.5 * sh.size)));
  int hi_x = std::min(im.w - 1, static_cast<int>(std::ceil(sh.cx + 1.5 * sh.size)));
  int lo_y = std::max(0, static_cast<int>(std::floor(sh.cy - 1.5 * sh.size)));
  int hi_y = std::min(im.h - 1, static_cast<int>(std::ceil(sh.cy + 1.5 * sh.size)));
  for (int y = lo_y; y <= hi_y; ++y)
    for (int x = lo_x; x <= hi_x; ++x) {
      double dx = (x + 0.5) - sh.cx, dy = (y + 0.5) - sh.cy;
      double rx = dx * ca - dy * sa, ry = dx * sa + dy * ca;
      if (point_in_shape(sh.kind, rx, ry, sh.size)) {
        double* px = im.px(y, x);
        px[0] = color[0];
        px[1] = color[1];
        px[2] = color[2];
        index_mask[static_cast<std::size_t>(y) * im.w + x] = static_cast<std::uint8_t>(sh.class_id + 1);
      }
    }
}

struct Scene {
  Image image;
  std::vector<std::uint8_t> index_mask;  // class_id + 1, 0 = background
  BinaryMask target_mask;                // footprint of the main instance
};

inline Scene render_scene(const OracleVocabulary& vocab, std::mt19937_64& rng, int class_id,
                          const GeneratorParams& p) {
  const auto& bg = OracleVocabulary::kBackgroundColor;
  Scene sc;
  sc.image = Image::filled(p.image_size, p.image_size, bg[0], bg[1], bg[2]);
  sc.index_mask.assign(static_cast<std::size_t>(p.image_size) * p.image_size, 0);

  auto place = [&](int cid, double min_s, double max_s) {
    ShapeInstance sh;
    sh.class_id = cid;
    sh.kind = vocab.cls(cid).shape_kind;
    sh.size = std::uniform_real_distribution<double>(min_s, max_s)(rng);
    double margin = 1.5 * sh.size + 1.0;
    double lo = margin, hi = p.image_size - margin;
    if (hi <= lo) { lo = p.image_size / 2.0 - 1; hi = p.image_size / 2.0 + 1; }
    sh.cx = std::uniform_real_distribution<double>(lo, hi)(rng);
    sh.cy = std::uniform_real_distribution<double>(lo, hi)(rng);
    sh.angle = std::uniform_real_distribution<double>(0.0, 2.0 * M_PI)(rng);
    return sh;
  };

  int n_distractors = std::uniform_int_distribution<int>(0, std::max(0, p.max_distractors))(rng);
  for (int d = 0; d < n_distractors; ++d) {
    if (vocab.n_classes() < 2) break;
    int other;
    do {
      other = std::uniform_int_distribution<int>(0, vocab.n_classes() - 1)(rng);
    } while (other == class_id);
    ShapeInstance sh = place(other, p.distractor_min_size, p.distractor_max_size);
    stamp(sc.image, sc.index_mask, sh, vocab.cls(other).color);
  }

  // main instance drawn last so its mask is its exact visible footprint
  ShapeInstance main_sh = place(class_id, p.min_size, p.max_size);
  stamp(sc.image, sc.index_mask, main_sh, vocab.cls(class_id).color);

  sc.target_mask = BinaryMask::zeros(p.image_size, p.image_size);
  for (std::size_t i = 0; i < sc.index_mask.size(); ++i)
    if (sc.index_mask[i] == static_cast<std::uint8_t>(class_id + 1)) sc.target_mask.v[i] = 1;
  return sc;
}

}  // namespace detail

// Deterministic: a fixed (seed, class_id, params) always yields the same
// episode. Reference and target are two independent instances of the class.
inline Episode generate_episode(const OracleVocabulary& vocab, std::uint64_t seed, int class_id,
                                const GeneratorParams& params = {}) {
  if (class_id < 0 || class_id >= vocab.n_classes())
    throw UnknownLabelError("generate_episode: class id " + std::to_string(class_id) + " not in vocabulary");
  std::mt19937_64 rng(mix_seed(seed, seeds::kEpisode));
  detail::Scene ref = detail::render_scene(vocab, rng, class_id, params);
  detail::Scene tgt = detail::render_scene(vocab, rng, class_id, params);
  Episode e;
  e.reference_image = std::move(ref.image);
  e.reference_mask = std::move(ref.target_mask);
  e.target_image = std::move(tgt.image);
  e.gt_mask = std::move(tgt.target_mask);
  e.class_id = class_id;
  e.text_label = vocab.text_for(class_id);
  e.seed = seed;
  return e;
}

// ---------------------------------------------------------------------------
// Fold protocol: class-disjoint train/test splits.
// ---------------------------------------------------------------------------

struct FoldSpec {
  int fold_index = 0;
  std::vector<int> train_classes;
  std::vector<int> test_classes;
};

inline std::vector<FoldSpec> make_folds(const std::vector<int>& class_ids, int n_folds = 4) {
  if (n_folds < 2) throw ConfigError("make_folds: need at least 2 folds");
  if (class_ids.empty() || static_cast<int>(class_ids.size()) % n_folds != 0)
    throw ConfigError("make_folds: class count " + std::to_string(class_ids.size()) +
                      " not divisible by " + std::to_string(n_folds) +
                      " folds; choose a class count divisible by the fold count");
  std::vector<FoldSpec> folds(static_cast<std::size_t>(n_folds));
  for (int f = 0; f < n_folds; ++f) {
    folds[static_cast<std::size_t>(f)].fold_index = f;
    for (int id : class_ids) {
      if (id % n_folds == f)
        folds[static_cast<std::size_t>(f)].test_classes.push_back(id);
      else
        folds[static_cast<std::size_t>(f)].train_classes.push_back(id);
    }
  }
  return folds;
}

inline std::vector<int> iota_classes(int n) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

// n episodes over the fold's test classes, cycled uniformly. Pure function
// of (fold, n, seed).
inline std::vector<Episode> sample_test_pairs(const OracleVocabulary& vocab, const FoldSpec& fold, int n,
                                              std::uint64_t seed, const GeneratorParams& params = {}) {
  if (fold.test_classes.empty()) throw ConfigError("sample_test_pairs: fold has no test classes");
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    int cid = fold.test_classes[static_cast<std::size_t>(k) % fold.test_classes.size()];
    out.push_back(generate_episode(vocab, mix_seed(seed, seeds::kTestPairs, static_cast<std::uint64_t>(k)),
                                   cid, params));
  }
  return out;
}

// Deterministic infinite training stream: episode i is a pure function of
// (base seed, i), with classes drawn uniformly from the fold's train set.
class SyntheticTrainSource {
 public:
  SyntheticTrainSource(const OracleVocabulary& vocab, std::vector<int> train_classes, std::uint64_t seed,
                       GeneratorParams params = {})
      : vocab_(vocab), classes_(std::move(train_classes)), seed_(seed), params_(params) {
    if (classes_.empty()) throw ConfigError("training source: empty train class set");
  }

  Episode episode(std::uint64_t index) const {
    std::uint64_t s = mix_seed(seed_, seeds::kTrainStream, index);
    std::mt19937_64 rng(s);
    int cid = classes_[std::uniform_int_distribution<std::size_t>(0, classes_.size() - 1)(rng)];
    return generate_episode(vocab_, s, cid, params_);
  }

 private:
  const OracleVocabulary& vocab_;
  std::vector<int> classes_;
  std::uint64_t seed_;
  GeneratorParams params_;
};

// ---------------------------------------------------------------------------
// On-disk dataset: "vlpseg-manifest v1". Entry rows are
//   <image path>\t<mask path>\t<class id>
// followed by vocabulary rows
//   class\t<id>\t<label>
// Mask files are index images storing class_id + 1 (0 = background) so that
// class 0 stays distinguishable from background.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string image_path;
  std::string mask_path;
  int class_id = -1;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  std::map<int, std::string> vocabulary;
};

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path.string());
  out << "vlpseg-manifest v1\n";
  for (const auto& e : m.entries) out << e.image_path << "\t" << e.mask_path << "\t" << e.class_id << "\n";
  for (const auto& [id, label] : m.vocabulary) out << "class\t" << id << "\t" << label << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  if (!std::getline(in, line) || line != "vlpseg-manifest v1")
    throw DataError("manifest " + path.string() + ": bad or missing header (expected 'vlpseg-manifest v1')");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 3)
      throw DataError("manifest " + path.string() + ": line " + std::to_string(lineno) +
                      ": expected 3 tab-separated fields");
    try {
      if (fields[0] == "class") {
        m.vocabulary[std::stoi(fields[1])] = fields[2];
      } else {
        m.entries.push_back(ManifestEntry{fields[0], fields[1], std::stoi(fields[2])});
      }
    } catch (const std::exception&) {
      throw DataError("manifest " + path.string() + ": line " + std::to_string(lineno) + ": bad integer field");
    }
  }
  for (const auto& e : m.entries) {
    if (!std::filesystem::exists(m.root / e.image_path))
      throw DataError("manifest: missing image file " + (m.root / e.image_path).string());
    if (!std::filesystem::exists(m.root / e.mask_path))
      throw DataError("manifest: missing mask file " + (m.root / e.mask_path).string());
  }
  return m;
}

inline BinaryMask binarize_index_mask(const std::vector<std::uint8_t>& index_mask, int h, int w,
                                      int class_id) {
  BinaryMask out = BinaryMask::zeros(h, w);
  for (std::size_t i = 0; i < index_mask.size(); ++i)
    if (index_mask[i] == static_cast<std::uint8_t>(class_id + 1)) out.v[i] = 1;
  return out;
}

inline Episode episode_from_manifest(const DatasetManifest& m, std::size_t ref_idx, std::size_t tgt_idx,
                                     int class_id) {
  if (ref_idx >= m.entries.size() || tgt_idx >= m.entries.size())
    throw DataError("episode_from_manifest: entry index out of range");
  auto voc = m.vocabulary.find(class_id);
  if (voc == m.vocabulary.end())
    throw DataError("episode_from_manifest: class " + std::to_string(class_id) + " not in manifest vocabulary");

  auto load = [&](const ManifestEntry& e, Image& img, BinaryMask& mask) {
    img = read_ppm(m.root / e.image_path);
    int h = 0, w = 0;
    auto idx = read_pgm(m.root / e.mask_path, h, w);
    if (h != img.h || w != img.w) throw DataError("episode_from_manifest: mask/image size mismatch for " + e.image_path);
    mask = binarize_index_mask(idx, h, w, class_id);
    if (mask.empty())
      throw DataError("episode_from_manifest: class " + std::to_string(class_id) + " absent in mask " +
                      e.mask_path);
  };

  Episode e;
  load(m.entries[ref_idx], e.reference_image, e.reference_mask);
  load(m.entries[tgt_idx], e.target_image, e.gt_mask);
  e.class_id = class_id;
  e.text_label = "a photo of a " + voc->second;
  return e;
}

}  // namespace vlpseg
