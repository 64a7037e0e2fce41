#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vlpseg/autodiff.hpp"
#include "vlpseg/backbones.hpp"
#include "vlpseg/errors.hpp"
#include "vlpseg/image.hpp"
#include "vlpseg/rng.hpp"
#include "vlpseg/tensor.hpp"

namespace vlpseg {

inline constexpr double kCosineEps = 1e-8;

enum class Mode { WithText, TextFree };

inline std::string mode_name(Mode m) { return m == Mode::WithText ? "with-text" : "text-free"; }
inline Mode parse_mode(const std::string& s) {
  if (s == "with-text") return Mode::WithText;
  if (s == "text-free") return Mode::TextFree;
  throw ConfigError("unknown mode '" + s + "' (expected with-text or text-free)");
}

struct ModelConfig {
  int n_queries = 50;
  int c = 64;
  int heads = 8;
  Mode mode = Mode::WithText;
};

// ---------------------------------------------------------------------------
// Trainable parameters. Everything the optimizer can touch lives in this
// named-tensor map; the backbones stay outside it by construction.
// ---------------------------------------------------------------------------

struct VlpParams {
  ModelConfig model;
  int c_vlm = 0;
  int c_sam = 0;
  std::map<std::string, Tensor> tensors;

  static int enhance_in_channels(const ModelConfig& m) {
    // with-text: [F | P | F_text | m | m_attn], text-free: [F | P | m]
    return m.mode == Mode::WithText ? 3 * m.c + 2 : 2 * m.c + 1;
  }

  static VlpParams init(const ModelConfig& model, int c_vlm, int c_sam, std::uint64_t seed) {
    VlpParams p;
    p.model = model;
    p.c_vlm = c_vlm;
    p.c_sam = c_sam;
    std::mt19937_64 rng(mix_seed(seed, 21));

    auto xavier = [&](int rows, int cols) {
      double sigma = std::sqrt(2.0 / (rows + cols));
      Tensor t = Tensor::zeros({rows, cols});
      std::normal_distribution<double> d(0.0, sigma);
      for (auto& v : t.data) v = d(rng);
      return t;
    };
    auto zeros_row = [](int n) { return Tensor::zeros({1, n}); };
    auto ones_row = [](int n) { return Tensor::full({1, n}, 1.0); };

    int c = model.c;
    p.tensors["input_proj.w"] = xavier(c_vlm, c);
    p.tensors["input_proj.b"] = zeros_row(c);

    int enh_in = enhance_in_channels(model);
    p.tensors["enhance_ref.w"] = xavier(enh_in, c);
    p.tensors["enhance_ref.b"] = zeros_row(c);
    p.tensors["enhance_tgt.w"] = xavier(enh_in, c);
    p.tensors["enhance_tgt.b"] = zeros_row(c);

    {
      Tensor q = Tensor::zeros({model.n_queries, c});
      std::normal_distribution<double> d(0.0, 0.02);
      for (auto& v : q.data) v = d(rng);
      p.tensors["queries"] = std::move(q);
    }

    for (const std::string& blk : {std::string("attend_ref"), std::string("attend_tgt")}) {
      auto attn_params = [&](const std::string& sub) {
        p.tensors[blk + "." + sub + ".wq"] = xavier(c, c);
        p.tensors[blk + "." + sub + ".bq"] = zeros_row(c);
        p.tensors[blk + "." + sub + ".wk"] = xavier(c, c);
        p.tensors[blk + "." + sub + ".bk"] = zeros_row(c);
        p.tensors[blk + "." + sub + ".wv"] = xavier(c, c);
        p.tensors[blk + "." + sub + ".bv"] = zeros_row(c);
        p.tensors[blk + "." + sub + ".wo"] = xavier(c, c);
        p.tensors[blk + "." + sub + ".bo"] = zeros_row(c);
      };
      auto ln_params = [&](const std::string& sub) {
        p.tensors[blk + "." + sub + ".gamma"] = ones_row(c);
        p.tensors[blk + "." + sub + ".beta"] = zeros_row(c);
      };
      auto ffn_params = [&](const std::string& sub) {
        p.tensors[blk + "." + sub + ".w1"] = xavier(c, 4 * c);
        p.tensors[blk + "." + sub + ".b1"] = zeros_row(4 * c);
        p.tensors[blk + "." + sub + ".w2"] = xavier(4 * c, c);
        p.tensors[blk + "." + sub + ".b2"] = zeros_row(c);
      };
      ln_params("ln_cross_q");
      ln_params("ln_cross_kv");
      attn_params("cross");
      ln_params("ln_ffn_cross");
      ffn_params("ffn_cross");
      ln_params("ln_self");
      attn_params("self");
      ln_params("ln_ffn_self");
      ffn_params("ffn_self");
    }

    p.tensors["output_proj.w"] = xavier(c, c_sam);
    p.tensors["output_proj.b"] = zeros_row(c_sam);
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += t.numel();
    return n;
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : tensors) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(t.data, h);
    }
    return h;
  }
};

// Graph handles for every parameter tensor, plus the gradient read-back.
struct ParamVals {
  ad::Graph* g = nullptr;
  std::map<std::string, ad::Val> vals;

  static ParamVals lift(ad::Graph& g, const VlpParams& p) {
    ParamVals pv;
    pv.g = &g;
    for (const auto& [name, t] : p.tensors) pv.vals[name] = g.input(t);
    return pv;
  }

  ad::Val at(const std::string& name) const {
    auto it = vals.find(name);
    if (it == vals.end()) throw Error("ParamVals: unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Tensor> grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : vals) out[name] = g->grad(v);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Graph-level operations (differentiable path).
// ---------------------------------------------------------------------------

// Per-pixel linear map: tokens (HW x C_in) * w (C_in x C_out) + b.
inline ad::Val project_tokens(ad::Graph& g, ad::Val tokens, ad::Val w, ad::Val b) {
  return g.add_row_broadcast(g.matmul(tokens, w), b);
}

inline std::vector<double> mask_selector(const BinaryMask& m) {
  std::vector<double> sel(m.v.size(), 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.v.size(); ++i)
    if (m.v[i]) {
      sel[i] = 1.0;
      ++n;
    }
  if (n == 0) throw EmptyMaskError("mask is empty at feature resolution");
  for (auto& v : sel) v /= static_cast<double>(n);
  return sel;
}

// Masked average over foreground tokens -> 1 x C prototype.
inline ad::Val mask_avg_pool_g(ad::Graph& g, ad::Val tokens, const BinaryMask& feat_mask) {
  if (static_cast<int>(feat_mask.v.size()) != g.value(tokens).rows())
    throw ShapeError("mask_avg_pool: mask size != token count");
  std::vector<double> sel = mask_selector(feat_mask);
  ad::Val selv = g.constant(Tensor({1, static_cast<int>(sel.size())}, sel));
  return g.matmul(selv, tokens);
}

// S[p,q] = cos(ft[p], fr[q]) over rows of two (HW x C) token matrices.
inline ad::Val similarity_matrix_g(ad::Graph& g, ad::Val ft_tokens, ad::Val fr_tokens) {
  if (g.value(ft_tokens).cols() != g.value(fr_tokens).cols())
    throw ShapeError("similarity_matrix: channel dims differ");
  ad::Val a = g.row_l2_normalize(ft_tokens, kCosineEps);
  ad::Val b = g.row_l2_normalize(fr_tokens, kCosineEps);
  return g.matmul(a, g.transpose(b));
}

// Mean similarity over reference foreground columns, min-max normalized.
inline ad::Val pseudo_mask_g(ad::Graph& g, ad::Val similarity, const BinaryMask& ref_feat_mask) {
  if (static_cast<int>(ref_feat_mask.v.size()) != g.value(similarity).cols())
    throw ShapeError("pseudo_mask: mask size != similarity columns");
  std::vector<double> sel = mask_selector(ref_feat_mask);
  ad::Val selv = g.constant(Tensor({static_cast<int>(sel.size()), 1}, sel));
  return g.minmax_normalize(g.matmul(similarity, selv));
}

// Per-token cosine with a text embedding (1 x C), min-max normalized.
inline ad::Val attention_mask_g(ad::Graph& g, ad::Val tokens, ad::Val text) {
  const Tensor& tx = g.value(text);
  if (tx.rows() != 1 || tx.cols() != g.value(tokens).cols())
    throw ShapeError("attention_mask: text embedding must be 1 x C with matching C");
  double norm = 0.0;
  for (double v : tx.data) norm += v * v;
  if (std::sqrt(norm) < 1e-12) throw InvalidInputError("attention_mask: zero-norm text embedding");
  ad::Val a = g.row_l2_normalize(tokens, kCosineEps);
  ad::Val b = g.row_l2_normalize(text, kCosineEps);
  return g.minmax_normalize(g.matmul(a, g.transpose(b)));
}

// Channel concat [F | P | F_text | m1 | m2] (text-free: [F | P | m1])
// followed by a 1x1 conv back to C channels.
inline ad::Val enhance_g(ad::Graph& g, ad::Val f_tokens, ad::Val proto, std::optional<ad::Val> text,
                         ad::Val m1, std::optional<ad::Val> m2, ad::Val w, ad::Val b) {
  int rows = g.value(f_tokens).rows();
  std::vector<ad::Val> parts;
  parts.push_back(f_tokens);
  parts.push_back(g.tile_rows(proto, rows));
  if (text) parts.push_back(g.tile_rows(*text, rows));
  parts.push_back(m1);
  if (m2) parts.push_back(*m2);
  ad::Val cat = g.concat_cols(parts);
  if (g.value(cat).cols() != g.value(w).rows())
    throw ShapeError("enhance: concat channels " + std::to_string(g.value(cat).cols()) +
                     " != conv input " + std::to_string(g.value(w).rows()));
  return project_tokens(g, cat, w, b);
}

struct AttnWeights {
  ad::Val wq, bq, wk, bk, wv, bv, wo, bo;
};

// Standard multi-head attention; q/k/v are already normalized by the caller.
inline ad::Val multihead_attention(ad::Graph& g, ad::Val q_tokens, ad::Val k_tokens, ad::Val v_tokens,
                                   const AttnWeights& w, int heads) {
  int c = g.value(q_tokens).cols();
  if (c % heads != 0) throw ShapeError("attention: C not divisible by heads");
  int dh = c / heads;
  ad::Val q = g.add_row_broadcast(g.matmul(q_tokens, w.wq), w.bq);
  ad::Val k = g.add_row_broadcast(g.matmul(k_tokens, w.wk), w.bk);
  ad::Val v = g.add_row_broadcast(g.matmul(v_tokens, w.wv), w.bv);
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Val> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    ad::Val qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    ad::Val kh = g.slice_cols(k, h * dh, (h + 1) * dh);
    ad::Val vh = g.slice_cols(v, h * dh, (h + 1) * dh);
    ad::Val scores = g.scale(g.matmul(qh, g.transpose(kh)), scale);
    head_outs.push_back(g.matmul(g.row_softmax(scores), vh));
  }
  ad::Val merged = heads == 1 ? head_outs[0] : g.concat_cols(head_outs);
  return g.add_row_broadcast(g.matmul(merged, w.wo), w.bo);
}

namespace detail {

inline AttnWeights attn_weights(const ParamVals& pv, const std::string& prefix) {
  return AttnWeights{pv.at(prefix + ".wq"), pv.at(prefix + ".bq"), pv.at(prefix + ".wk"),
                     pv.at(prefix + ".bk"), pv.at(prefix + ".wv"), pv.at(prefix + ".bv"),
                     pv.at(prefix + ".wo"), pv.at(prefix + ".bo")};
}

inline ad::Val layernorm(ad::Graph& g, const ParamVals& pv, const std::string& prefix, ad::Val x) {
  return g.layernorm_rows(x, pv.at(prefix + ".gamma"), pv.at(prefix + ".beta"));
}

inline ad::Val ffn(ad::Graph& g, const ParamVals& pv, const std::string& prefix, ad::Val x) {
  ad::Val h = g.gelu(g.add_row_broadcast(g.matmul(x, pv.at(prefix + ".w1")), pv.at(prefix + ".b1")));
  return g.add_row_broadcast(g.matmul(h, pv.at(prefix + ".w2")), pv.at(prefix + ".b2"));
}

}  // namespace detail

// One attend application: pre-norm cross-attention over the feature tokens,
// then pre-norm self-attention over the queries, each followed by its own
// feed-forward sublayer, all residual. No positional encoding is added, so
// the result is invariant to key token order.
inline ad::Val attend_block(ad::Graph& g, const ParamVals& pv, const std::string& blk, ad::Val x,
                            ad::Val kv_tokens, int heads) {
  ad::Val qn = detail::layernorm(g, pv, blk + ".ln_cross_q", x);
  ad::Val kvn = detail::layernorm(g, pv, blk + ".ln_cross_kv", kv_tokens);
  x = g.add(x, multihead_attention(g, qn, kvn, kvn, detail::attn_weights(pv, blk + ".cross"), heads));
  x = g.add(x, detail::ffn(g, pv, blk + ".ffn_cross", detail::layernorm(g, pv, blk + ".ln_ffn_cross", x)));
  ad::Val sn = detail::layernorm(g, pv, blk + ".ln_self", x);
  x = g.add(x, multihead_attention(g, sn, sn, sn, detail::attn_weights(pv, blk + ".self"), heads));
  x = g.add(x, detail::ffn(g, pv, blk + ".ffn_self", detail::layernorm(g, pv, blk + ".ln_ffn_self", x)));
  return x;
}

// Q'_r from the reference features, Q'_t from the target features, then the
// output projection into the mask decoder's prompt space.
inline ad::Val encode_prompts_g(ad::Graph& g, const ParamVals& pv, ad::Val f_ref_tokens,
                                ad::Val f_tgt_tokens, int heads) {
  ad::Val q_ref = attend_block(g, pv, "attend_ref", pv.at("queries"), f_ref_tokens, heads);
  ad::Val q_tgt = attend_block(g, pv, "attend_tgt", q_ref, f_tgt_tokens, heads);
  return g.add_row_broadcast(g.matmul(q_tgt, pv.at("output_proj.w")), pv.at("output_proj.b"));
}

// ---------------------------------------------------------------------------
// Plain-value wrappers over the graph ops. These are the operation-level
// entry points used by tests and tools; training always goes through the
// graph builders above.
// ---------------------------------------------------------------------------

inline FeatureMap project_vlm_features(const FeatureMap& raw, const Tensor& w, const Tensor& b) {
  if (w.rows() != raw.c)
    throw ShapeError("project_vlm_features: weight rows " + std::to_string(w.rows()) +
                     " != input channels " + std::to_string(raw.c));
  ad::Graph g;
  ad::Val out = project_tokens(g, g.constant(raw.tokens()), g.constant(w), g.constant(b));
  return FeatureMap::from_tokens(g.value(out), raw.h, raw.w);
}

// Prototype as a C-vector (Eq. 1's masked average), mask at feature resolution.
inline std::vector<double> mask_avg_pool(const FeatureMap& f, const BinaryMask& feat_mask) {
  if (feat_mask.h != f.h || feat_mask.w != f.w)
    throw ShapeError("mask_avg_pool: mask resolution != feature resolution");
  ad::Graph g;
  ad::Val out = mask_avg_pool_g(g, g.constant(f.tokens()), feat_mask);
  return g.value(out).data;
}

inline Tensor similarity_matrix(const FeatureMap& ft, const FeatureMap& fr) {
  if (ft.c != fr.c || ft.h != fr.h || ft.w != fr.w)
    throw ShapeError("similarity_matrix: feature maps must share C, H, W");
  ad::Graph g;
  ad::Val out = similarity_matrix_g(g, g.constant(ft.tokens()), g.constant(fr.tokens()));
  return g.value(out);
}

inline SoftMask pseudo_mask(const Tensor& similarity, const BinaryMask& ref_feat_mask) {
  ad::Graph g;
  ad::Val out = pseudo_mask_g(g, g.constant(similarity), ref_feat_mask);
  return SoftMask{ref_feat_mask.h, ref_feat_mask.w, g.value(out).data};
}

inline SoftMask attention_mask(const FeatureMap& f, const TextEmbedding& text) {
  ad::Graph g;
  ad::Val out = attention_mask_g(g, g.constant(f.tokens()),
                                 g.constant(Tensor({1, static_cast<int>(text.v.size())}, text.v)));
  return SoftMask{f.h, f.w, g.value(out).data};
}

inline FeatureMap enhance_features(const FeatureMap& f, const std::vector<double>& prototype,
                                   const std::vector<double>* text, const SoftMask& m1,
                                   const SoftMask* m2, const Tensor& w, const Tensor& b) {
  ad::Graph g;
  ad::Val proto = g.constant(Tensor({1, static_cast<int>(prototype.size())}, prototype));
  std::optional<ad::Val> text_v;
  if (text) text_v = g.constant(Tensor({1, static_cast<int>(text->size())}, *text));
  ad::Val m1v = g.constant(Tensor({m1.h * m1.w, 1}, m1.v));
  std::optional<ad::Val> m2v;
  if (m2) m2v = g.constant(Tensor({m2->h * m2->w, 1}, m2->v));
  ad::Val out = enhance_g(g, g.constant(f.tokens()), proto, text_v, m1v, m2v, g.constant(w), g.constant(b));
  return FeatureMap::from_tokens(g.value(out), f.h, f.w);
}

inline Tensor attend(const Tensor& q_in, const FeatureMap& f, const VlpParams& params,
                     const std::string& block) {
  ad::Graph g;
  ParamVals pv = ParamVals::lift(g, params);
  ad::Val out = attend_block(g, pv, block, g.constant(q_in), g.constant(f.tokens()), params.model.heads);
  return g.value(out);
}

}  // namespace vlpseg
