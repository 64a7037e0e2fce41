#pragma once

#include <optional>

#include "vlpseg/backbones.hpp"
#include "vlpseg/episodes.hpp"
#include "vlpseg/objectives.hpp"
#include "vlpseg/vlp_encoder.hpp"

namespace vlpseg {

// Graph handles for every intermediate of one episode forward pass. Tests
// reach into these; the trainer only needs logits (and loss via objectives).
struct ForwardTrace {
  ad::Val f_ref;        // projected reference tokens, HW x C
  ad::Val f_tgt;        // projected target tokens
  ad::Val prototype;    // 1 x C
  ad::Val text;         // 1 x C (with-text only)
  ad::Val similarity;   // HW x HW
  ad::Val pseudo;       // HW x 1
  ad::Val attn_ref;     // HW x 1 (with-text only)
  ad::Val attn_tgt;     // HW x 1 (with-text only)
  ad::Val f_ref_enh;    // HW x C
  ad::Val f_tgt_enh;    // HW x C
  ad::Val prompts;      // N x C_sam
  ad::Val logits;       // H_img x W_img
  int feat_h = 0, feat_w = 0;
};

// Full pipeline: encode -> project -> prototype / pseudo mask / attention
// masks -> enhancement -> prompt refinement -> frozen mask decoder.
// Text-free mode never touches the text encoder or the attention masks.
inline ForwardTrace forward(ad::Graph& g, const ParamVals& pv, const Episode& episode,
                            const BackboneBundle& bundle, const ModelConfig& model) {
  const BackboneConfig& bc = bundle.config();
  episode.target_image.validate(bc.patch_size);
  episode.reference_image.validate(bc.patch_size);
  if (episode.reference_mask.h != episode.reference_image.h ||
      episode.reference_mask.w != episode.reference_image.w)
    throw ShapeError("forward: reference mask resolution != reference image");

  ForwardTrace tr;
  FeatureMap fr_raw = bundle.vlm_encode_image(episode.reference_image);
  FeatureMap ft_raw = bundle.vlm_encode_image(episode.target_image);
  tr.feat_h = fr_raw.h;
  tr.feat_w = fr_raw.w;

  ad::Val w_in = pv.at("input_proj.w");
  ad::Val b_in = pv.at("input_proj.b");
  tr.f_ref = project_tokens(g, g.constant(fr_raw.tokens()), w_in, b_in);
  tr.f_tgt = project_tokens(g, g.constant(ft_raw.tokens()), w_in, b_in);

  BinaryMask ref_feat = downsample_mask_nn(episode.reference_mask, bc.patch_size);
  tr.prototype = mask_avg_pool_g(g, tr.f_ref, ref_feat);

  tr.similarity = similarity_matrix_g(g, tr.f_tgt, tr.f_ref);
  tr.pseudo = pseudo_mask_g(g, tr.similarity, ref_feat);

  ad::Val ref_mask_col = g.constant(mask_to_tensor(ref_feat));

  if (model.mode == Mode::WithText) {
    TextEmbedding text_raw = bundle.vlm_encode_text(episode.text_label);
    ad::Val text_tok = g.constant(Tensor({1, static_cast<int>(text_raw.v.size())}, text_raw.v));
    tr.text = project_tokens(g, text_tok, w_in, b_in);
    tr.attn_ref = attention_mask_g(g, tr.f_ref, tr.text);
    tr.attn_tgt = attention_mask_g(g, tr.f_tgt, tr.text);
    tr.f_ref_enh = enhance_g(g, tr.f_ref, tr.prototype, tr.text, ref_mask_col, tr.attn_ref,
                             pv.at("enhance_ref.w"), pv.at("enhance_ref.b"));
    tr.f_tgt_enh = enhance_g(g, tr.f_tgt, tr.prototype, tr.text, tr.pseudo, tr.attn_tgt,
                             pv.at("enhance_tgt.w"), pv.at("enhance_tgt.b"));
  } else {
    tr.f_ref_enh = enhance_g(g, tr.f_ref, tr.prototype, std::nullopt, ref_mask_col, std::nullopt,
                             pv.at("enhance_ref.w"), pv.at("enhance_ref.b"));
    tr.f_tgt_enh = enhance_g(g, tr.f_tgt, tr.prototype, std::nullopt, tr.pseudo, std::nullopt,
                             pv.at("enhance_tgt.w"), pv.at("enhance_tgt.b"));
  }

  tr.prompts = encode_prompts_g(g, pv, tr.f_ref_enh, tr.f_tgt_enh, model.heads);

  SamImageEmbedding sam_emb = bundle.sam_encode_image(episode.target_image);
  tr.logits = bundle.decode_mask_graph(g, sam_emb, tr.prompts);
  return tr;
}

// Inference-only convenience: fresh graph, returns plain logits.
inline MaskLogits predict_logits(const VlpParams& params, const Episode& episode,
                                 const BackboneBundle& bundle) {
  ad::Graph g;
  ParamVals pv = ParamVals::lift(g, params);
  ForwardTrace tr = forward(g, pv, episode, bundle, params.model);
  const Tensor& t = g.value(tr.logits);
  return MaskLogits{t.rows(), t.cols(), t.data};
}

}  // namespace vlpseg
