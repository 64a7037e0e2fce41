#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "vlpseg/objectives.hpp"

using namespace vlpseg;
namespace fs = std::filesystem;

namespace {

BinaryMask mask_from(std::initializer_list<int> bits, int h, int w) {
  BinaryMask m = BinaryMask::zeros(h, w);
  std::size_t i = 0;
  for (int b : bits) m.v[i++] = static_cast<std::uint8_t>(b);
  return m;
}

MaskLogits logits_from(std::vector<double> v, int h, int w) { return MaskLogits{h, w, std::move(v)}; }

}  // namespace

TEST_CASE("bce closed forms") {
  // perfect prediction, clamped
  std::vector<double> y{1, 0, 1, 0};
  REQUIRE(bce_loss(y, y) <= 1e-6);

  // p = 0.5 everywhere -> ln 2 for any labels
  std::vector<double> half(9, 0.5);
  std::vector<double> labels{1, 0, 0, 1, 1, 0, 1, 0, 0};
  REQUIRE(bce_loss(half, labels) == Catch::Approx(std::log(2.0)).margin(1e-6));
}

TEST_CASE("bce matches explicit per-pixel loop on random 3x3") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> dp(0.01, 0.99);
  std::bernoulli_distribution dy(0.5);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> p(9), y(9);
    for (auto& v : p) v = dp(rng);
    for (auto& v : y) v = dy(rng) ? 1.0 : 0.0;
    double acc = 0;
    for (int i = 0; i < 9; ++i) acc += y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
    REQUIRE(bce_loss(p, y) == Catch::Approx(-acc / 9).margin(1e-12));
  }
}

TEST_CASE("dice closed forms") {
  std::vector<double> ones(4, 1.0), zeros(4, 0.0);
  REQUIRE(dice_loss(ones, ones) == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(dice_loss(zeros, zeros) == Catch::Approx(0.0).margin(1e-12));

  std::vector<double> p{1, 0}, y{1, 1};
  REQUIRE(dice_loss(p, y) == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("dice stays in [0,1] on random inputs") {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> p(16), y(16);
    for (auto& v : p) v = d(rng);
    for (auto& v : y) v = d(rng) > 0.5 ? 1.0 : 0.0;
    double dl = dice_loss(p, y);
    REQUIRE(dl >= 0.0);
    REQUIRE(dl <= 1.0);
  }
}

TEST_CASE("total loss equals bce plus dice and saturates correctly") {
  BinaryMask gt = mask_from({1, 0, 0, 1}, 2, 2);
  MaskLogits sat = logits_from({40, -40, -40, 40}, 2, 2);
  LossValue lv = total_loss(sat, gt);
  REQUIRE(lv.total < 1e-6);
  REQUIRE(lv.total == lv.bce + lv.dice);

  MaskLogits mild = logits_from({0.3, -0.2, 0.8, -0.5}, 2, 2);
  LossValue lv2 = total_loss(mild, gt);
  REQUIRE(lv2.total == lv2.bce + lv2.dice);
  REQUIRE(lv2.bce >= 0.0);
  REQUIRE(lv2.dice >= 0.0);
  REQUIRE(lv2.dice <= 1.0);
}

TEST_CASE("total loss gradient matches central finite differences on 4x4") {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  BinaryMask gt = BinaryMask::zeros(4, 4);
  for (auto& v : gt.v) v = d(rng) > 0 ? 1 : 0;
  Tensor logits = Tensor::zeros({4, 4});
  for (auto& v : logits.data) v = d(rng);

  ad::Graph g;
  ad::Val l = g.input(logits);
  LossVals lv = total_loss_g(g, l, gt);
  g.backward(lv.total);
  Tensor analytic = g.grad(l);

  auto eval = [&](const Tensor& x) {
    ad::Graph g2;
    ad::Val l2 = g2.input(x);
    return g2.value(total_loss_g(g2, l2, gt).total).data[0];
  };

  double h = 1e-5;
  for (std::size_t k = 0; k < logits.data.size(); ++k) {
    Tensor plus = logits, minus = logits;
    plus.data[k] += h;
    minus.data[k] -= h;
    double fd = (eval(plus) - eval(minus)) / (2 * h);
    double re = std::fabs(analytic.data[k] - fd) / std::max(1.0, std::fabs(analytic.data[k]) + std::fabs(fd));
    REQUIRE(re < 1e-4);
  }
}

TEST_CASE("loss decreases monotonically toward the target") {
  std::mt19937_64 rng(34);
  std::uniform_real_distribution<double> dp(0.02, 0.98);
  std::bernoulli_distribution dy(0.5);
  for (int rep = 0; rep < 40; ++rep) {
    std::vector<double> p(25), y(25);
    for (auto& v : p) v = dp(rng);
    for (auto& v : y) v = dy(rng) ? 1.0 : 0.0;
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 0; step <= 4; ++step) {
      double t = step / 4.0;
      std::vector<double> pt(25);
      for (int i = 0; i < 25; ++i) pt[static_cast<std::size_t>(i)] =
          p[static_cast<std::size_t>(i)] + t * (y[static_cast<std::size_t>(i)] - p[static_cast<std::size_t>(i)]);
      double loss = bce_loss(pt, y) + dice_loss(pt, y);
      REQUIRE(loss <= prev + 1e-12);
      prev = loss;
    }
  }
}

TEST_CASE("episode iou cases") {
  BinaryMask gt = mask_from({1, 1, 0, 0}, 2, 2);
  REQUIRE(episode_iou(logits_from({5, 5, -5, -5}, 2, 2), gt) == 1.0);

  // prediction covers exactly half of gt, no false positives
  REQUIRE(episode_iou(logits_from({5, -5, -5, -5}, 2, 2), gt) == 0.5);

  // disjoint nonempty
  REQUIRE(episode_iou(logits_from({-5, -5, 5, 5}, 2, 2), gt) == 0.0);

  // both empty
  BinaryMask empty = BinaryMask::zeros(2, 2);
  REQUIRE(episode_iou(logits_from({-5, -5, -5, -5}, 2, 2), empty) == 1.0);

  REQUIRE_THROWS_AS(episode_iou(logits_from({0, 0}, 1, 2), gt), ShapeError);
}

TEST_CASE("iou is symmetric for binary masks") {
  std::mt19937_64 rng(35);
  std::bernoulli_distribution d(0.4);
  for (int rep = 0; rep < 100; ++rep) {
    BinaryMask a = BinaryMask::zeros(5, 5), b = BinaryMask::zeros(5, 5);
    for (auto& v : a.v) v = d(rng);
    for (auto& v : b.v) v = d(rng);
    REQUIRE(mask_iou(a, b) == mask_iou(b, a));
  }
}

TEST_CASE("fold miou aggregates per class then per fold") {
  std::vector<EpisodeResult> all_perfect;
  for (int k = 0; k < 10; ++k) all_perfect.push_back({k % 2, 1.0});
  REQUIRE(fold_miou(all_perfect).miou == 1.0);

  // class 1: three episodes with mean 0.4; class 2: one episode at 0.8
  std::vector<EpisodeResult> mixed{{1, 0.5}, {1, 0.3}, {1, 0.4}, {2, 0.8}};
  IoUReport rep = fold_miou(mixed);
  REQUIRE(rep.miou == Catch::Approx(0.6).margin(1e-12));
  REQUIRE(rep.per_class.at(1).count == 3);
  REQUIRE(rep.per_class.at(2).count == 1);

  std::vector<EpisodeResult> single{{7, 0.25}, {7, 0.75}};
  REQUIRE(fold_miou(single).miou == Catch::Approx(0.5).margin(1e-12));

  REQUIRE_THROWS_AS(fold_miou({}), DataError);
}

TEST_CASE("report files round trip and reject malformed rows") {
  fs::path dir = fs::temp_directory_path() / "vlpseg_report_test";
  fs::create_directories(dir);

  IoUReport rep;
  rep.per_class[0] = {0.53125, 200};
  rep.per_class[4] = {0.7109375, 200};
  rep.miou = (0.53125 + 0.7109375) / 2;
  rep.n_episodes = 400;
  rep.n_skipped = 3;
  ReportMeta meta{"with-text", 0, 1234};
  write_report(dir / "r.tsv", rep, meta);

  ParsedReport pr = parse_report(dir / "r.tsv");
  REQUIRE(pr.report.miou == rep.miou);
  REQUIRE(pr.report.per_class.at(0).mean_iou == rep.per_class.at(0).mean_iou);
  REQUIRE(pr.report.per_class.at(4).count == 200);
  REQUIRE(pr.meta.mode == "with-text");
  REQUIRE(pr.meta.fold == 0);
  REQUIRE(pr.report.n_skipped == 3);

  {
    std::ofstream out(dir / "bad.tsv");
    out << "# vlpseg-report v1\n";
    out << "0\t0.5\t200\n";
    out << "oops this is not a row\n";
  }
  REQUIRE_THROWS_WITH(parse_report(dir / "bad.tsv"), Catch::Matchers::ContainsSubstring("line 3"));

  fs::remove_all(dir);
}
