#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "vlpseg/backbones.hpp"
#include "vlpseg/episodes.hpp"
#include "vlpseg/rng.hpp"

using namespace vlpseg;

namespace {

BackboneConfig toy_config() {
  BackboneConfig bc;
  bc.seed = 7;
  bc.n_classes = 20;
  return bc;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  return dot(a, b) / (na * nb + 1e-12);
}

std::vector<double> patch_embedding(const FeatureMap& f, int y, int x) {
  std::vector<double> e(static_cast<std::size_t>(f.c));
  for (int c = 0; c < f.c; ++c) e[static_cast<std::size_t>(c)] = f.at(c, y, x);
  return e;
}

}  // namespace

TEST_CASE("vocabulary embeddings are pairwise separated") {
  OracleVocabulary vocab(20, 32, 7);
  REQUIRE(vocab.n_classes() == 20);
  std::vector<const std::vector<double>*> all;
  all.push_back(&vocab.background());
  for (const auto& cs : vocab.all()) all.push_back(&cs.embedding);
  for (std::size_t i = 0; i < all.size(); ++i) {
    REQUIRE(std::fabs(std::sqrt(dot(*all[i], *all[i])) - 1.0) < 1e-9);
    for (std::size_t j = i + 1; j < all.size(); ++j)
      REQUIRE(std::fabs(dot(*all[i], *all[j])) < OracleVocabulary::kMaxPairwiseCos);
  }
}

TEST_CASE("vlm image encoder shape contract and determinism") {
  auto bundle = make_backbones(toy_config());
  Image zero = Image::filled(64, 64, 0.0, 0.0, 0.0);
  FeatureMap f = bundle->vlm_encode_image(zero);
  REQUIRE(f.c == 32);
  REQUIRE(f.h == 8);
  REQUIRE(f.w == 8);
  REQUIRE(f.all_finite());

  FeatureMap f2 = bundle->vlm_encode_image(zero);
  REQUIRE(f.v == f2.v);  // bit-identical
}

TEST_CASE("vlm image encoder rejects image not divisible by patch size") {
  auto bundle = make_backbones(toy_config());
  Image bad = Image::filled(60, 60, 0.0, 0.0, 0.0);
  REQUIRE_THROWS_AS(bundle->vlm_encode_image(bad), ShapeError);
  REQUIRE_THROWS_AS(bundle->sam_encode_image(bad), ShapeError);
}

TEST_CASE("oracle separability: class-3 object patches match class-3 text") {
  auto bundle = make_backbones(toy_config());
  const auto& vocab = bundle->vocabulary();
  Episode ep = generate_episode(vocab, 99, 3);
  FeatureMap f = bundle->vlm_encode_image(ep.target_image);
  TextEmbedding text = bundle->vlm_encode_text("a photo of a class3");

  int ps = bundle->config().patch_size;
  int checked_fg = 0, checked_bg = 0;
  for (int gy = 0; gy < f.h; ++gy)
    for (int gx = 0; gx < f.w; ++gx) {
      int fg = 0;
      for (int py = 0; py < ps; ++py)
        for (int px = 0; px < ps; ++px) fg += ep.gt_mask.at(gy * ps + py, gx * ps + px) ? 1 : 0;
      double cos = cosine(patch_embedding(f, gy, gx), text.v);
      bool any_other = false;  // distractor pixels would break the pure-background expectation
      for (int py = 0; py < ps && !any_other; ++py)
        for (int px = 0; px < ps && !any_other; ++px) {
          const double* rgb = ep.target_image.px(gy * ps + py, gx * ps + px);
          int id = vocab.classify_color(rgb[0], rgb[1], rgb[2]);
          if (id >= 0 && id != 3) any_other = true;
        }
      if (fg == ps * ps) {
        REQUIRE(cos > 0.9);
        ++checked_fg;
      } else if (fg == 0 && !any_other) {
        REQUIRE(cos < 0.3);
        ++checked_bg;
      }
    }
  REQUIRE(checked_fg > 0);
  REQUIRE(checked_bg > 0);
}

TEST_CASE("text encoder lookup, determinism, separation, errors") {
  auto bundle = make_backbones(toy_config());
  const auto& vocab = bundle->vocabulary();

  TextEmbedding t3 = bundle->vlm_encode_text("a photo of a class3");
  REQUIRE(t3.v == vocab.cls(3).embedding);

  TextEmbedding t3b = bundle->vlm_encode_text("a photo of a class3");
  REQUIRE(t3.v == t3b.v);

  TextEmbedding bare = bundle->vlm_encode_text("class3");
  REQUIRE(bare.v == t3.v);

  TextEmbedding t5 = bundle->vlm_encode_text("a photo of a class5");
  REQUIRE(std::fabs(cosine(t3.v, t5.v)) < 0.2);

  REQUIRE_THROWS_AS(bundle->vlm_encode_text("a photo of a giraffe"), UnknownLabelError);
  REQUIRE_THROWS_AS(bundle->vlm_encode_text(""), InvalidInputError);
}

TEST_CASE("sam encoder shape, non-constancy, freeze") {
  auto bundle = make_backbones(toy_config());
  const auto& vocab = bundle->vocabulary();

  Episode a = generate_episode(vocab, 1, 2);
  Episode b = generate_episode(vocab, 2, 2);
  SamImageEmbedding ea = bundle->sam_encode_image(a.target_image);
  REQUIRE(ea.c == 64);
  REQUIRE(ea.h == 8);
  REQUIRE(ea.w == 8);

  SamImageEmbedding eb = bundle->sam_encode_image(b.target_image);
  REQUIRE(fnv1a64(ea.v) != fnv1a64(eb.v));

  SamImageEmbedding ea2 = bundle->sam_encode_image(a.target_image);
  REQUIRE(ea.v == ea2.v);

  BackboneFingerprints fp = bundle->fingerprints();
  REQUIRE(fp == bundle->fingerprints());
  REQUIRE(bundle->frozen().all());
}

TEST_CASE("sam mask decoder shape contract and prompt sensitivity") {
  auto bundle = make_backbones(toy_config());
  Episode ep = generate_episode(bundle->vocabulary(), 5, 0);
  SamImageEmbedding emb = bundle->sam_encode_image(ep.target_image);

  std::mt19937_64 rng(11);
  Tensor prompts = Tensor::zeros({50, 64});
  std::normal_distribution<double> d(0.0, 0.5);
  for (auto& v : prompts.data) v = d(rng);

  MaskLogits logits = bundle->sam_decode_mask(emb, prompts);
  REQUIRE(logits.h == 64);
  REQUIRE(logits.w == 64);
  for (double v : logits.v) REQUIRE(std::isfinite(v));

  MaskLogits zero_logits = bundle->sam_decode_mask(emb, Tensor::zeros({50, 64}));
  REQUIRE(logits.v != zero_logits.v);

  Tensor bad = Tensor::zeros({50, 32});
  REQUIRE_THROWS_AS(bundle->sam_decode_mask(emb, bad), ShapeError);
}

TEST_CASE("sam mask decoder gradient w.r.t. prompts matches finite differences") {
  BackboneConfig bc = toy_config();
  bc.n_classes = 4;
  bc.c_vlm = 8;
  bc.c_sam = 8;
  auto bundle = make_backbones(bc);
  GeneratorParams gp;
  gp.image_size = 16;
  gp.min_size = 4;
  gp.max_size = 6;
  Episode ep = generate_episode(bundle->vocabulary(), 3, 1, gp);
  SamImageEmbedding emb = bundle->sam_encode_image(ep.target_image);

  std::mt19937_64 rng(13);
  Tensor prompts = Tensor::zeros({4, 8});
  std::normal_distribution<double> d(0.0, 0.5);
  for (auto& v : prompts.data) v = d(rng);

  auto loss_of = [&](const Tensor& p) {
    MaskLogits l = bundle->sam_decode_mask(emb, p);
    double s = 0;
    for (double v : l.v) s += v;
    return s;
  };

  vlpseg::ad::Graph g;
  vlpseg::ad::Val pv = g.input(prompts);
  vlpseg::ad::Val logits = bundle->decode_mask_graph(g, emb, pv);
  vlpseg::ad::Val s = g.sum(logits);
  g.backward(s);
  const Tensor analytic = g.grad(pv);

  double h = 1e-5;
  for (std::size_t k = 0; k < prompts.data.size(); ++k) {
    Tensor plus = prompts, minus = prompts;
    plus.data[k] += h;
    minus.data[k] -= h;
    double fd = (loss_of(plus) - loss_of(minus)) / (2 * h);
    double re = std::fabs(analytic.data[k] - fd) / std::max(1.0, std::fabs(analytic.data[k]) + std::fabs(fd));
    REQUIRE(re < 1e-4);
  }
}

TEST_CASE("backbone factory kinds") {
  REQUIRE_NOTHROW(make_backbones(toy_config()));

  BackboneConfig ext = toy_config();
  ext.kind = "external";
  REQUIRE_THROWS_AS(make_backbones(ext), NotImplementedError);

  BackboneConfig bad = toy_config();
  bad.kind = "resnet";
  REQUIRE_THROWS_AS(make_backbones(bad), ConfigError);
}

TEST_CASE("vocabulary construction fails loudly when separation is infeasible") {
  REQUIRE_THROWS_AS(OracleVocabulary(80, 8, 3), ConfigError);
}
