#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vlpseg/autodiff.hpp"
#include "vlpseg/errors.hpp"
#include "vlpseg/image.hpp"
#include "vlpseg/rng.hpp"
#include "vlpseg/tensor.hpp"

namespace vlpseg {

namespace seeds {
// Stream tags for deriving independent RNG streams from one base seed.
constexpr std::uint64_t kVocabulary = 11;
constexpr std::uint64_t kVlmNoise = 12;
constexpr std::uint64_t kSamEncoder = 13;
constexpr std::uint64_t kSamDecoder = 14;
}  // namespace seeds

// ---------------------------------------------------------------------------
// Class-signature vocabulary shared by the toy backbones and the synthetic
// episode generator. Each class owns a text label, a unit embedding in the
// VLM latent space, a render color, and a shape kind. Embeddings are
// re-sampled until all pairwise cosines (background included) stay below
// kMaxPairwiseCos, which is what makes pixel-text matching separable.
// ---------------------------------------------------------------------------

struct ClassSignature {
  int id = 0;
  std::string label;              // "class<i>"
  std::vector<double> embedding;  // unit vector, c_vlm dims
  std::array<double, 3> color{};  // exact render color, on the 8-bit grid
  int shape_kind = 0;
};

class OracleVocabulary {
 public:
  static constexpr double kMaxPairwiseCos = 0.2;
  static constexpr int kResampleBudget = 20000;
  static constexpr std::array<double, 3> kBackgroundColor = {10.0 / 255.0, 10.0 / 255.0, 12.0 / 255.0};
  static constexpr int kShapeKinds = 6;

  OracleVocabulary() = default;

  OracleVocabulary(int n_classes, int c_vlm, std::uint64_t seed) : c_vlm_(c_vlm), seed_(seed) {
    if (n_classes < 1) throw ConfigError("vocabulary: need at least one class");
    if (c_vlm < 2) throw ConfigError("vocabulary: c_vlm must be >= 2");
    std::mt19937_64 rng(mix_seed(seed, seeds::kVocabulary));
    background_ = sample_separated(rng, {});
    std::vector<std::vector<double>> accepted{background_};
    classes_.reserve(static_cast<std::size_t>(n_classes));
    for (int i = 0; i < n_classes; ++i) {
      ClassSignature cs;
      cs.id = i;
      cs.label = "class" + std::to_string(i);
      cs.embedding = sample_separated(rng, accepted);
      accepted.push_back(cs.embedding);
      cs.color = class_color(i, n_classes);
      cs.shape_kind = i % kShapeKinds;
      classes_.push_back(std::move(cs));
    }
  }

  int n_classes() const { return static_cast<int>(classes_.size()); }
  int c_vlm() const { return c_vlm_; }
  std::uint64_t seed() const { return seed_; }

  const ClassSignature& cls(int id) const {
    if (id < 0 || id >= n_classes())
      throw UnknownLabelError("vocabulary: class id out of range: " + std::to_string(id));
    return classes_[static_cast<std::size_t>(id)];
  }
  const std::vector<ClassSignature>& all() const { return classes_; }
  const std::vector<double>& background() const { return background_; }

  std::string text_for(int id) const { return "a photo of a " + cls(id).label; }

  // -1 = background. Rendered pixels carry exact signature colors, so the
  // nearest candidate wins with a wide margin on generated data.
  int classify_color(double r, double g, double b) const {
    int best = -1;
    double best_d = sq(r - kBackgroundColor[0]) + sq(g - kBackgroundColor[1]) + sq(b - kBackgroundColor[2]);
    for (const auto& cs : classes_) {
      double d = sq(r - cs.color[0]) + sq(g - cs.color[1]) + sq(b - cs.color[2]);
      if (d < best_d) {
        best_d = d;
        best = cs.id;
      }
    }
    return best;
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64(background_);
    for (const auto& cs : classes_) {
      h = fnv1a64(cs.embedding, h);
      h = fnv1a64(cs.color.data(), sizeof(cs.color), h);
      h = fnv1a64(cs.label.data(), cs.label.size(), h);
    }
    return h;
  }

  // Deterministic, well-separated palette: evenly spaced hues with
  // alternating value/saturation, quantized to the 8-bit grid used on disk.
  static std::array<double, 3> class_color(int id, int n_classes) {
    double hue = 360.0 * id / std::max(1, n_classes);
    double value = (id % 2 == 0) ? 1.0 : 0.70;
    double sat = (id % 4 < 2) ? 1.0 : 0.55;
    auto rgb = hsv_to_rgb(hue, sat, value);
    for (auto& v : rgb) v = std::round(v * 255.0) / 255.0;
    return rgb;
  }

  static std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    double c = v * s;
    double hp = h / 60.0;
    double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    double m = v - c;
    return {r + m, g + m, b + m};
  }

  struct Raw {
    int c_vlm = 0;
    std::uint64_t seed = 0;
    std::vector<double> background;
    std::vector<ClassSignature> classes;
  };
  Raw raw() const { return Raw{c_vlm_, seed_, background_, classes_}; }
  static OracleVocabulary from_raw(Raw r) {
    OracleVocabulary v;
    v.c_vlm_ = r.c_vlm;
    v.seed_ = r.seed;
    v.background_ = std::move(r.background);
    v.classes_ = std::move(r.classes);
    return v;
  }

 private:
  static double sq(double x) { return x * x; }

  std::vector<double> sample_separated(std::mt19937_64& rng,
                                       const std::vector<std::vector<double>>& accepted) const {
    for (int attempt = 0; attempt < kResampleBudget; ++attempt) {
      std::vector<double> cand = unit_vector(rng, static_cast<std::size_t>(c_vlm_));
      double worst = 0.0;
      for (const auto& e : accepted) worst = std::max(worst, std::fabs(dot(cand, e)));
      if (worst < kMaxPairwiseCos) return cand;
    }
    throw ConfigError("vocabulary: could not sample " + std::to_string(accepted.size() + 1) +
                      " embeddings with pairwise |cos| < 0.2 in " + std::to_string(c_vlm_) +
                      " dims; raise backbone.c_vlm or lower the class count");
  }

  int c_vlm_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<double> background_;
  std::vector<ClassSignature> classes_;
};

// ---------------------------------------------------------------------------
// Backbone configuration and the frozen bundle interface.
// ---------------------------------------------------------------------------

struct BackboneConfig {
  std::string kind = "toy-oracle";  // "toy-oracle" | "external"
  std::uint64_t seed = 7;
  int patch_size = 8;
  int c_vlm = 32;
  int c_sam = 64;
  int n_classes = 20;
};

struct BackboneFingerprints {
  std::uint64_t vlm_image = 0;
  std::uint64_t vlm_text = 0;
  std::uint64_t sam_image = 0;
  std::uint64_t sam_decoder = 0;

  bool operator==(const BackboneFingerprints&) const = default;
  std::uint64_t combined() const {
    std::uint64_t parts[4] = {vlm_image, vlm_text, sam_image, sam_decoder};
    return fnv1a64(parts, sizeof(parts));
  }
};

struct FrozenFlags {
  bool vlm_image_encoder = true;
  bool vlm_text_encoder = true;
  bool sam_image_encoder = true;
  bool sam_mask_decoder = true;
  bool all() const { return vlm_image_encoder && vlm_text_encoder && sam_image_encoder && sam_mask_decoder; }
};

// Frozen encoder/decoder bundle. All calls are pure functions of
// (construction-time weights, input); none participate in training updates.
// decode_mask_graph is the one differentiable surface: gradients flow from
// the mask logits back into the prompt embeddings.
class BackboneBundle {
 public:
  virtual ~BackboneBundle() = default;

  virtual FeatureMap vlm_encode_image(const Image& image) const = 0;
  virtual TextEmbedding vlm_encode_text(const std::string& text) const = 0;
  virtual SamImageEmbedding sam_encode_image(const Image& image) const = 0;
  virtual ad::Val decode_mask_graph(ad::Graph& g, const SamImageEmbedding& emb, ad::Val prompts) const = 0;

  MaskLogits sam_decode_mask(const SamImageEmbedding& emb, const Tensor& prompts) const {
    ad::Graph g;
    ad::Val p = g.input(prompts);
    ad::Val logits = decode_mask_graph(g, emb, p);
    const Tensor& t = g.value(logits);
    MaskLogits out;
    out.h = t.rows();
    out.w = t.cols();
    out.v = t.data;
    return out;
  }

  virtual BackboneFingerprints fingerprints() const = 0;
  virtual const BackboneConfig& config() const = 0;
  virtual const OracleVocabulary& vocabulary() const = 0;
  FrozenFlags frozen() const { return FrozenFlags{}; }
};

// ---------------------------------------------------------------------------
// Toy oracle backbones.
// ---------------------------------------------------------------------------

class ToyBackboneBundle final : public BackboneBundle {
 public:
  ToyBackboneBundle(BackboneConfig cfg, OracleVocabulary vocab)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    if (cfg_.c_vlm != vocab_.c_vlm()) throw ConfigError("backbones: c_vlm does not match vocabulary");
    std::mt19937_64 rng_enc(mix_seed(cfg_.seed, seeds::kSamEncoder));
    double sigma = 1.0 / std::sqrt(static_cast<double>(cfg_.c_vlm));
    sam_proj_ = Tensor::zeros({cfg_.c_vlm, cfg_.c_sam});
    for (auto& v : sam_proj_.data) v = std::normal_distribution<double>(0.0, sigma)(rng_enc);

    std::mt19937_64 rng_dec(mix_seed(cfg_.seed, seeds::kSamDecoder));
    double dsigma = 1.0 / std::sqrt(static_cast<double>(cfg_.c_sam));
    auto mk = [&](Tensor& t) {
      t = Tensor::zeros({cfg_.c_sam, cfg_.c_sam});
      for (auto& v : t.data) v = std::normal_distribution<double>(0.0, dsigma)(rng_dec);
    };
    mk(dec_.p2i_wq); mk(dec_.p2i_wk); mk(dec_.p2i_wv); mk(dec_.p2i_wo);
    mk(dec_.i2p_wq); mk(dec_.i2p_wk); mk(dec_.i2p_wv); mk(dec_.i2p_wo);
  }

  // Per-patch mean of per-pixel class embeddings plus Gaussian noise. The
  // per-pixel noise (sigma 0.1) enters through its patch mean, drawn directly
  // as sigma/sqrt(pixels_per_patch). Noise is a pure function of
  // (seed, image bytes), so identical inputs produce bit-identical maps.
  FeatureMap vlm_encode_image(const Image& image) const override {
    image.validate(cfg_.patch_size);
    int ps = cfg_.patch_size;
    int gh = image.h / ps, gw = image.w / ps;
    int c = cfg_.c_vlm;
    FeatureMap out = FeatureMap::zeros(c, gh, gw);

    std::mt19937_64 noise_rng(mix_seed(mix_seed(cfg_.seed, seeds::kVlmNoise), image_hash(image)));
    std::normal_distribution<double> noise(0.0, kPixelNoiseSigma / std::sqrt(static_cast<double>(ps) * ps));

    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px) {
            const double* rgb = image.px(gy * ps + py, gx * ps + px);
            int id = vocab_.classify_color(rgb[0], rgb[1], rgb[2]);
            const std::vector<double>& e = id < 0 ? vocab_.background() : vocab_.cls(id).embedding;
            for (int ci = 0; ci < c; ++ci) mean[static_cast<std::size_t>(ci)] += e[static_cast<std::size_t>(ci)];
          }
        double inv = 1.0 / (static_cast<double>(ps) * ps);
        for (int ci = 0; ci < c; ++ci)
          out.at(ci, gy, gx) = mean[static_cast<std::size_t>(ci)] * inv + noise(noise_rng);
      }
    return out;
  }

  // Accepts either the full prompt template ("a photo of a class3") or the
  // bare label ("class3").
  TextEmbedding vlm_encode_text(const std::string& text) const override {
    if (text.empty()) throw InvalidInputError("vlm_encode_text: empty text");
    ++text_encode_calls_;
    static const std::string prefix = "a photo of a ";
    std::string label = text;
    if (text.rfind(prefix, 0) == 0) label = text.substr(prefix.size());
    for (const auto& cs : vocab_.all())
      if (cs.label == label) return TextEmbedding{cs.embedding};
    throw UnknownLabelError("vlm_encode_text: unknown label '" + text + "'");
  }

  // Fixed linear map of the per-patch mean class embedding (no noise). Both
  // image encoders read the same signature dictionary, mirroring how real
  // SAM and VLM features correlate through the visual world; this is what
  // lets content-matched prompts transfer to classes unseen in training.
  SamImageEmbedding sam_encode_image(const Image& image) const override {
    image.validate(cfg_.patch_size);
    int ps = cfg_.patch_size;
    int gh = image.h / ps, gw = image.w / ps;
    SamImageEmbedding out;
    out.c = cfg_.c_sam;
    out.h = gh;
    out.w = gw;
    out.v.assign(static_cast<std::size_t>(out.c) * gh * gw, 0.0);
    std::vector<double> mean(static_cast<std::size_t>(cfg_.c_vlm));
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        std::fill(mean.begin(), mean.end(), 0.0);
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px) {
            const double* rgb = image.px(gy * ps + py, gx * ps + px);
            int id = vocab_.classify_color(rgb[0], rgb[1], rgb[2]);
            const std::vector<double>& e = id < 0 ? vocab_.background() : vocab_.cls(id).embedding;
            for (int ci = 0; ci < cfg_.c_vlm; ++ci) mean[static_cast<std::size_t>(ci)] += e[static_cast<std::size_t>(ci)];
          }
        double inv = 1.0 / (static_cast<double>(ps) * ps);
        for (int co = 0; co < cfg_.c_sam; ++co) {
          double acc = 0.0;
          for (int ci = 0; ci < cfg_.c_vlm; ++ci) acc += mean[static_cast<std::size_t>(ci)] * inv * sam_proj_.at(ci, co);
          out.v[(static_cast<std::size_t>(co) * gh + gy) * gw + gx] = acc;
        }
      }
    return out;
  }

  // Smallest decoder that keeps the interface: prompts attend to image
  // tokens, image tokens attend to prompts, then a per-position dot product
  // with the mean prompt token, bilinearly upsampled to image resolution.
  // Decoder weights are frozen; only the prompt input carries gradients.
  ad::Val decode_mask_graph(ad::Graph& g, const SamImageEmbedding& emb, ad::Val prompts) const override {
    if (emb.c != cfg_.c_sam) throw ShapeError("sam_decode_mask: embedding channels != c_sam");
    int n_prompts = g.value(prompts).rows();
    int prompt_dim = g.value(prompts).cols();
    if (prompt_dim != cfg_.c_sam)
      throw ShapeError("sam_decode_mask: prompt channel dim " + std::to_string(prompt_dim) +
                       " != c_sam " + std::to_string(cfg_.c_sam));
    ad::Val img = g.constant(emb.tokens());
    ad::Val unit_gamma = g.constant(Tensor::full({1, cfg_.c_sam}, 1.0));
    ad::Val zero_beta = g.constant(Tensor::zeros({1, cfg_.c_sam}));
    double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.c_sam));

    auto attn = [&](ad::Val q_in, ad::Val kv, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                    const Tensor& wo) {
      ad::Val qn = g.layernorm_rows(q_in, unit_gamma, zero_beta);
      ad::Val q = g.matmul(qn, g.constant(wq));
      ad::Val k = g.matmul(kv, g.constant(wk));
      ad::Val v = g.matmul(kv, g.constant(wv));
      ad::Val scores = g.scale(g.matmul(q, g.transpose(k)), scale);
      ad::Val attnw = g.row_softmax(scores);
      return g.add(q_in, g.matmul(g.matmul(attnw, v), g.constant(wo)));
    };

    ad::Val p = attn(prompts, img, dec_.p2i_wq, dec_.p2i_wk, dec_.p2i_wv, dec_.p2i_wo);
    ad::Val t = attn(img, p, dec_.i2p_wq, dec_.i2p_wk, dec_.i2p_wv, dec_.i2p_wo);

    ad::Val mean_prompt = g.matmul(g.constant(Tensor::full({1, n_prompts}, 1.0 / n_prompts)), p);
    ad::Val logits_flat = g.scale(g.matmul(t, g.transpose(mean_prompt)), scale);  // tokens x 1
    ad::Val logits_grid = g.reshape(logits_flat, {emb.h, emb.w});
    return g.upsample_bilinear(logits_grid, cfg_.patch_size);
  }

  BackboneFingerprints fingerprints() const override {
    BackboneFingerprints fp;
    std::uint64_t vocab_fp = vocab_.fingerprint();
    double sigma = kPixelNoiseSigma;
    fp.vlm_image = fnv1a64(&sigma, sizeof(sigma), vocab_fp);
    fp.vlm_text = vocab_fp;
    fp.sam_image = fnv1a64(sam_proj_.data, vocab_fp);
    std::uint64_t h = fnv1a64(dec_.p2i_wq.data);
    h = fnv1a64(dec_.p2i_wk.data, h);
    h = fnv1a64(dec_.p2i_wv.data, h);
    h = fnv1a64(dec_.p2i_wo.data, h);
    h = fnv1a64(dec_.i2p_wq.data, h);
    h = fnv1a64(dec_.i2p_wk.data, h);
    h = fnv1a64(dec_.i2p_wv.data, h);
    h = fnv1a64(dec_.i2p_wo.data, h);
    fp.sam_decoder = h;
    return fp;
  }

  const BackboneConfig& config() const override { return cfg_; }
  const OracleVocabulary& vocabulary() const override { return vocab_; }

  std::uint64_t text_encode_calls() const { return text_encode_calls_.load(); }
  void reset_text_encode_calls() const { text_encode_calls_.store(0); }

  static constexpr double kPixelNoiseSigma = 0.1;

 private:
  static std::uint64_t image_hash(const Image& image) {
    std::vector<unsigned char> q(image.rgb.size());
    for (std::size_t i = 0; i < image.rgb.size(); ++i)
      q[i] = static_cast<unsigned char>(std::lround(std::min(std::max(image.rgb[i], 0.0), 1.0) * 255.0));
    std::uint64_t h = fnv1a64(q.data(), q.size());
    int dims[2] = {image.h, image.w};
    return fnv1a64(dims, sizeof(dims), h);
  }

  struct DecoderWeights {
    Tensor p2i_wq, p2i_wk, p2i_wv, p2i_wo;  // prompts attend to image tokens
    Tensor i2p_wq, i2p_wk, i2p_wv, i2p_wo;  // image tokens attend to prompts
  };

  BackboneConfig cfg_;
  OracleVocabulary vocab_;
  Tensor sam_proj_;  // c_vlm x c_sam
  DecoderWeights dec_;
  mutable std::atomic<std::uint64_t> text_encode_calls_{0};
};

// Factory keyed by BackboneConfig::kind. "external" is the adapter seam for
// real pretrained weights; an adapter must subclass BackboneBundle and
// implement the four encode/decode methods plus fingerprints().
inline std::shared_ptr<const BackboneBundle> make_backbones(const BackboneConfig& cfg) {
  if (cfg.kind == "toy-oracle") {
    OracleVocabulary vocab(cfg.n_classes, cfg.c_vlm, cfg.seed);
    return std::make_shared<ToyBackboneBundle>(cfg, std::move(vocab));
  }
  if (cfg.kind == "external") {
    throw NotImplementedError(
        "backbone kind 'external' has no bundled implementation; provide a BackboneBundle subclass with\n"
        "  FeatureMap vlm_encode_image(const Image&) const\n"
        "  TextEmbedding vlm_encode_text(const std::string&) const\n"
        "  SamImageEmbedding sam_encode_image(const Image&) const\n"
        "  ad::Val decode_mask_graph(ad::Graph&, const SamImageEmbedding&, ad::Val prompts) const\n"
        "  BackboneFingerprints fingerprints() const\n"
        "and construct it in place of make_backbones().");
  }
  throw ConfigError("unknown backbone kind '" + cfg.kind + "' (expected toy-oracle or external)");
}

inline std::shared_ptr<const BackboneBundle> make_backbones_from_vocab(const BackboneConfig& cfg,
                                                                       OracleVocabulary vocab) {
  if (cfg.kind != "toy-oracle") throw ConfigError("make_backbones_from_vocab: only toy-oracle supported");
  return std::make_shared<ToyBackboneBundle>(cfg, std::move(vocab));
}

}  // namespace vlpseg
