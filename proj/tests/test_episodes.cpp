#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "vlpseg/episodes.hpp"

using namespace vlpseg;
namespace fs = std::filesystem;

namespace {

const OracleVocabulary& vocab20() {
  static OracleVocabulary v(20, 32, 7);
  return v;
}

}  // namespace

TEST_CASE("episode generation is deterministic") {
  Episode a = generate_episode(vocab20(), 123, 4);
  Episode b = generate_episode(vocab20(), 123, 4);
  REQUIRE(a.target_image.rgb == b.target_image.rgb);
  REQUIRE(a.reference_image.rgb == b.reference_image.rgb);
  REQUIRE(a.reference_mask.v == b.reference_mask.v);
  REQUIRE(a.gt_mask.v == b.gt_mask.v);
  REQUIRE(a.class_id == 4);
  REQUIRE(a.text_label == "a photo of a class4");

  Episode c = generate_episode(vocab20(), 124, 4);
  REQUIRE(a.target_image.rgb != c.target_image.rgb);
}

TEST_CASE("gt mask matches the rendered class pixels exactly") {
  // The main instance is drawn last, so its mask must equal the set of
  // pixels carrying the exact class color.
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    Episode e = generate_episode(vocab20(), seed, 9);
    const auto& color = vocab20().cls(9).color;
    REQUIRE(!e.gt_mask.empty());
    for (int y = 0; y < e.target_image.h; ++y)
      for (int x = 0; x < e.target_image.w; ++x) {
        const double* px = e.target_image.px(y, x);
        bool is_class_color =
            px[0] == color[0] && px[1] == color[1] && px[2] == color[2];
        REQUIRE(static_cast<bool>(e.gt_mask.at(y, x)) == is_class_color);
      }
  }
}

TEST_CASE("foreground fraction stays within generator bounds over 1000 episodes") {
  int n_px = 64 * 64;
  for (int k = 0; k < 1000; ++k) {
    Episode e = generate_episode(vocab20(), 10000 + static_cast<std::uint64_t>(k), k % 20);
    double frac_gt = static_cast<double>(e.gt_mask.count()) / n_px;
    double frac_ref = static_cast<double>(e.reference_mask.count()) / n_px;
    REQUIRE(frac_gt >= 0.01);
    REQUIRE(frac_gt <= 0.60);
    REQUIRE(frac_ref >= 0.01);
    REQUIRE(frac_ref <= 0.60);
  }
}

TEST_CASE("episode pixel values live on the 8-bit grid") {
  Episode e = generate_episode(vocab20(), 77, 2);
  for (double v : e.target_image.rgb) {
    double q = std::round(v * 255.0) / 255.0;
    REQUIRE(v == q);
  }
}

TEST_CASE("folds partition the vocabulary") {
  auto folds = make_folds(iota_classes(20), 4);
  REQUIRE(folds.size() == 4);

  REQUIRE(folds[0].test_classes == std::vector<int>{0, 4, 8, 12, 16});
  REQUIRE(folds[0].train_classes.size() == 15);
  REQUIRE(folds[0].test_classes.size() == 5);

  std::set<int> seen;
  for (const auto& f : folds) {
    for (int id : f.test_classes) {
      REQUIRE(!seen.count(id));
      seen.insert(id);
    }
    std::set<int> train(f.train_classes.begin(), f.train_classes.end());
    for (int id : f.test_classes) REQUIRE(!train.count(id));
    REQUIRE(f.train_classes.size() + f.test_classes.size() == 20);
  }
  REQUIRE(seen.size() == 20);
}

TEST_CASE("80-class folds have 20 test classes each") {
  auto folds = make_folds(iota_classes(80), 4);
  for (const auto& f : folds) {
    REQUIRE(f.test_classes.size() == 20);
    REQUIRE(f.train_classes.size() == 60);
  }
}

TEST_CASE("fold divisibility error is actionable") {
  REQUIRE_THROWS_WITH(make_folds(iota_classes(7), 4),
                      Catch::Matchers::ContainsSubstring("divisible"));
}

TEST_CASE("sample_test_pairs cycles classes uniformly and deterministically") {
  auto folds = make_folds(iota_classes(20), 4);
  auto pairs = sample_test_pairs(vocab20(), folds[0], 1000, 55);
  REQUIRE(pairs.size() == 1000);

  std::map<int, int> counts;
  std::set<int> train(folds[0].train_classes.begin(), folds[0].train_classes.end());
  for (const auto& e : pairs) {
    counts[e.class_id]++;
    REQUIRE(!train.count(e.class_id));
  }
  for (int cid : folds[0].test_classes) REQUIRE(counts[cid] == 200);

  auto pairs2 = sample_test_pairs(vocab20(), folds[0], 10, 55);
  for (int i = 0; i < 10; ++i) {
    REQUIRE(pairs2[static_cast<std::size_t>(i)].target_image.rgb ==
            pairs[static_cast<std::size_t>(i)].target_image.rgb);
  }
}

TEST_CASE("manifest round trip is pixelwise exact") {
  fs::path dir = fs::temp_directory_path() / "vlpseg_manifest_test";
  fs::create_directories(dir);

  DatasetManifest m;
  m.root = dir;
  for (int k = 0; k < 3; ++k) {
    Episode e = generate_episode(vocab20(), 200 + static_cast<std::uint64_t>(k), k);
    std::string img = "img_" + std::to_string(k) + ".ppm";
    std::string msk = "mask_" + std::to_string(k) + ".pgm";
    write_ppm(dir / img, e.target_image);
    std::vector<std::uint8_t> index(e.gt_mask.v.size(), 0);
    for (std::size_t i = 0; i < index.size(); ++i)
      if (e.gt_mask.v[i]) index[i] = static_cast<std::uint8_t>(k + 1);
    write_pgm(dir / msk, index, 64, 64);
    m.entries.push_back(ManifestEntry{img, msk, k});
    m.vocabulary[k] = vocab20().cls(k).label;
  }
  write_manifest(dir / "data.manifest", m);

  DatasetManifest loaded = load_manifest(dir / "data.manifest");
  REQUIRE(loaded.entries.size() == 3);
  REQUIRE(loaded.vocabulary.size() == 3);

  Episode orig = generate_episode(vocab20(), 200, 0);
  Episode round = episode_from_manifest(loaded, 0, 0, 0);
  REQUIRE(round.target_image.rgb == orig.target_image.rgb);
  REQUIRE(round.gt_mask.v == orig.gt_mask.v);
  REQUIRE(round.text_label == "a photo of a class0");

  // class 2 exists only in entry 2's mask
  REQUIRE_THROWS_WITH(episode_from_manifest(loaded, 0, 1, 2),
                      Catch::Matchers::ContainsSubstring("absent"));
  REQUIRE_THROWS_AS(episode_from_manifest(loaded, 0, 9, 0), DataError);

  fs::remove_all(dir);
}

TEST_CASE("manifest parser rejects garbage") {
  fs::path dir = fs::temp_directory_path() / "vlpseg_manifest_bad";
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "bad.manifest");
    out << "not a manifest\n";
  }
  REQUIRE_THROWS_AS(load_manifest(dir / "bad.manifest"), DataError);
  {
    std::ofstream out(dir / "bad2.manifest");
    out << "vlpseg-manifest v1\n";
    out << "only_two_fields\there\n";
  }
  REQUIRE_THROWS_WITH(load_manifest(dir / "bad2.manifest"), Catch::Matchers::ContainsSubstring("line 2"));
  fs::remove_all(dir);
}

TEST_CASE("synthetic train source draws only train classes") {
  auto folds = make_folds(iota_classes(20), 4);
  SyntheticTrainSource src(vocab20(), folds[1].train_classes, 42);
  std::set<int> train(folds[1].train_classes.begin(), folds[1].train_classes.end());
  for (std::uint64_t i = 0; i < 64; ++i) {
    Episode e = src.episode(i);
    REQUIRE(train.count(e.class_id));
    Episode e2 = src.episode(i);
    REQUIRE(e.target_image.rgb == e2.target_image.rgb);
  }
}
