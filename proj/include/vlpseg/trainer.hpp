#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vlpseg/backbones.hpp"
#include "vlpseg/episodes.hpp"
#include "vlpseg/objectives.hpp"
#include "vlpseg/pipeline.hpp"
#include "vlpseg/vlp_encoder.hpp"

namespace vlpseg {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  int batch_size = 8;
  int epochs = 20;
  int episodes_per_epoch = 512;
  int fold_index = 0;
  std::uint64_t seed = 1;
  int eval_interval = 0;  // steps between mid-run evals; 0 disables
  int eval_pairs = 50;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("train: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1 || episodes_per_epoch < 1) throw ConfigError("train: epochs and episodes_per_epoch must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Train log: append-only, line-delimited JSON when a sink path is set.
// ---------------------------------------------------------------------------

struct TrainLog {
  struct Step {
    int step = 0;
    double total = 0, bce = 0, dice = 0;
  };
  struct Eval {
    int step = 0;
    IoUReport report;
  };
  std::vector<Step> steps;
  std::vector<Eval> evals;
  int skipped_episodes = 0;

  void open_sink(const std::filesystem::path& path) {
    sink_.open(path);
    if (!sink_) throw DataError("cannot write train log: " + path.string());
  }

  void record_step(int step, double total, double bce, double dice) {
    steps.push_back(Step{step, total, bce, dice});
    if (sink_) {
      nlohmann::json j{{"kind", "step"}, {"step", step}, {"total", total}, {"bce", bce}, {"dice", dice}};
      sink_ << j.dump() << "\n";
    }
  }

  void record_eval(int step, const IoUReport& rep) {
    evals.push_back(Eval{step, rep});
    if (sink_) {
      nlohmann::json per;
      for (const auto& [cid, pc] : rep.per_class)
        per[std::to_string(cid)] = {{"mean_iou", pc.mean_iou}, {"count", pc.count}};
      nlohmann::json j{{"kind", "eval"}, {"step", step}, {"miou", rep.miou}, {"per_class", per},
                       {"skipped", rep.n_skipped}};
      sink_ << j.dump() << "\n";
    }
  }

  void record_abort(int step, const std::vector<std::uint64_t>& episode_seeds, const std::string& why) {
    if (sink_) {
      nlohmann::json j{{"kind", "abort"}, {"step", step}, {"episode_seeds", episode_seeds}, {"reason", why}};
      sink_ << j.dump() << "\n";
      sink_.flush();
    }
  }

  void flush() {
    if (sink_) sink_.flush();
  }

 private:
  std::ofstream sink_;
};

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay), default moment coefficients.
// ---------------------------------------------------------------------------

struct AdamWState {
  std::map<std::string, Tensor> m, v;
  long t = 0;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
};

inline void adamw_step(VlpParams& params, const std::map<std::string, Tensor>& grads, AdamWState& st,
                       double lr, double weight_decay) {
  ++st.t;
  double bc1 = 1.0 - std::pow(AdamWState::kBeta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(AdamWState::kBeta2, static_cast<double>(st.t));
  for (auto& [name, theta] : params.tensors) {
    const Tensor& g = grads.at(name);
    Tensor& m = st.m.try_emplace(name, Tensor::zeros(theta.shape)).first->second;
    Tensor& v = st.v.try_emplace(name, Tensor::zeros(theta.shape)).first->second;
    for (std::size_t i = 0; i < theta.data.size(); ++i) {
      double gi = g.data[i];
      m.data[i] = AdamWState::kBeta1 * m.data[i] + (1.0 - AdamWState::kBeta1) * gi;
      v.data[i] = AdamWState::kBeta2 * v.data[i] + (1.0 - AdamWState::kBeta2) * gi * gi;
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      theta.data[i] -= lr * (mhat / (std::sqrt(vhat) + AdamWState::kEps) + weight_decay * theta.data[i]);
    }
  }
}

inline double global_grad_norm(const std::map<std::string, Tensor>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data) s += v * v;
  return std::sqrt(s);
}

inline void clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
  if (max_norm <= 0) return;
  double n = global_grad_norm(grads);
  if (n <= max_norm || n == 0.0) return;
  double f = max_norm / n;
  for (auto& [name, g] : grads)
    for (double& v : g.data) v *= f;
}

// ---------------------------------------------------------------------------
// Evaluation: forward-only over sampled test pairs, class-balanced mIoU.
// Degenerate episodes (empty mask at feature resolution) are skipped and
// counted. Purely functional, so worker parallelism keeps determinism.
// ---------------------------------------------------------------------------

inline IoUReport evaluate(const VlpParams& params, const BackboneBundle& bundle, const FoldSpec& fold,
                          int n_pairs, std::uint64_t seed, const GeneratorParams& gen = {},
                          int workers = 1) {
  std::vector<Episode> pairs = sample_test_pairs(bundle.vocabulary(), fold, n_pairs, seed, gen);
  std::vector<double> ious(pairs.size(), -1.0);  // -1 marks skipped
  auto run_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      try {
        MaskLogits logits = predict_logits(params, pairs[i], bundle);
        ious[i] = episode_iou(logits, pairs[i].gt_mask);
      } catch (const EmptyMaskError&) {
        ious[i] = -1.0;
      }
    }
  };
  if (workers <= 1) {
    run_range(0, pairs.size());
  } else {
    std::vector<std::thread> pool;
    std::size_t chunk = (pairs.size() + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      std::size_t lo = static_cast<std::size_t>(w) * chunk;
      std::size_t hi = std::min(pairs.size(), lo + chunk);
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& t : pool) t.join();
  }
  std::vector<EpisodeResult> results;
  int skipped = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (ious[i] < 0) {
      ++skipped;
      continue;
    }
    results.push_back(EpisodeResult{pairs[i].class_id, ious[i]});
  }
  if (results.empty()) throw DataError("evaluate: every sampled episode was degenerate");
  return fold_miou(results, skipped);
}

// ---------------------------------------------------------------------------
// Training loop. Only VlpParams move; backbone fingerprints are asserted
// unchanged every epoch and at completion.
// ---------------------------------------------------------------------------

using EpisodeFn = std::function<Episode(std::uint64_t)>;

struct TrainResult {
  VlpParams params;
  AdamWState opt;
  int steps_done = 0;
  std::uint64_t episodes_consumed = 0;
};

inline TrainResult train(const TrainConfig& tc, const ModelConfig& mc, const EpisodeFn& source,
                         const BackboneBundle& bundle, TrainLog& log,
                         std::optional<VlpParams> initial = std::nullopt,
                         std::optional<FoldSpec> eval_fold = std::nullopt) {
  tc.validate();
  const BackboneConfig& bc = bundle.config();
  TrainResult res;
  res.params = initial ? std::move(*initial) : VlpParams::init(mc, bc.c_vlm, bc.c_sam, tc.seed);

  BackboneFingerprints fp0 = bundle.fingerprints();
  int steps_per_epoch = std::max(1, tc.episodes_per_epoch / tc.batch_size);
  std::uint64_t cursor = res.episodes_consumed;
  int step = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int s = 0; s < steps_per_epoch; ++s) {
      ++step;
      std::map<std::string, Tensor> grad_acc;
      for (const auto& [name, t] : res.params.tensors) grad_acc[name] = Tensor::zeros(t.shape);
      double sum_total = 0, sum_bce = 0, sum_dice = 0;
      int effective = 0;
      std::vector<std::uint64_t> batch_seeds;

      for (int b = 0; b < tc.batch_size; ++b) {
        Episode ep = source(cursor++);
        batch_seeds.push_back(ep.seed);
        try {
          ad::Graph g;
          ParamVals pv = ParamVals::lift(g, res.params);
          ForwardTrace tr = forward(g, pv, ep, bundle, mc);
          LossVals lv = total_loss_g(g, tr.logits, ep.gt_mask);
          g.backward(lv.total);
          sum_total += g.value(lv.total).data[0];
          sum_bce += g.value(lv.bce).data[0];
          sum_dice += g.value(lv.dice).data[0];
          for (auto& [name, acc] : grad_acc) acc += g.grad(pv.at(name));
          ++effective;
        } catch (const EmptyMaskError&) {
          ++log.skipped_episodes;
        }
      }
      if (effective == 0) continue;  // fully degenerate batch

      double inv = 1.0 / effective;
      for (auto& [name, acc] : grad_acc)
        for (double& v : acc.data) v *= inv;
      double mean_total = sum_total * inv;

      if (!std::isfinite(mean_total)) {
        log.record_abort(step, batch_seeds, "non-finite loss");
        std::string seeds_str;
        for (auto sd : batch_seeds) seeds_str += std::to_string(sd) + " ";
        throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                           "; batch episode seeds: " + seeds_str);
      }

      clip_global_norm(grad_acc, tc.clip_norm);
      adamw_step(res.params, grad_acc, res.opt, tc.learning_rate, tc.weight_decay);
      log.record_step(step, mean_total, sum_bce * inv, sum_dice * inv);

      if (tc.eval_interval > 0 && eval_fold && step % tc.eval_interval == 0) {
        IoUReport rep = evaluate(res.params, bundle, *eval_fold, tc.eval_pairs,
                                 mix_seed(tc.seed, 77, static_cast<std::uint64_t>(step)));
        log.record_eval(step, rep);
      }
    }
    if (bundle.fingerprints() != fp0)
      throw Error("train: frozen backbone parameters changed during epoch " + std::to_string(epoch));
  }

  if (bundle.fingerprints() != fp0) throw Error("train: frozen backbone parameters changed");
  res.steps_done = step;
  res.episodes_consumed = cursor;
  log.flush();
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned CBOR container. Doubles are stored as IEEE binary64
// so round-trips are bit-exact. The oracle vocabulary rides along so that
// evaluation rebuilds the exact train-time backbones.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "vlpseg-checkpoint";

struct Checkpoint {
  int version = kCheckpointVersion;
  Mode mode = Mode::WithText;
  int fold_index = 0;
  int step = 0;
  std::uint64_t episodes_consumed = 0;
  ModelConfig model;
  BackboneConfig backbone;
  BackboneFingerprints fingerprints;
  OracleVocabulary::Raw vocabulary;
  VlpParams params;
  AdamWState opt;
  std::map<std::string, std::string> config_snapshot;
};

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape}, {"data", t.data}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  Tensor t;
  t.shape = j.at("shape").get<std::vector<int>>();
  t.data = j.at("data").get<std::vector<double>>();
  if (Tensor::numel_of(t.shape) != t.data.size()) throw CheckpointError("checkpoint: tensor shape/data mismatch");
  return t;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json j;
  j["magic"] = kCheckpointMagic;
  j["version"] = ck.version;
  j["mode"] = mode_name(ck.mode);
  j["fold_index"] = ck.fold_index;
  j["step"] = ck.step;
  j["episodes_consumed"] = ck.episodes_consumed;
  j["model"] = {{"n_queries", ck.model.n_queries}, {"c", ck.model.c}, {"heads", ck.model.heads},
                {"mode", mode_name(ck.model.mode)}};
  j["backbone"] = {{"kind", ck.backbone.kind},       {"seed", ck.backbone.seed},
                   {"patch_size", ck.backbone.patch_size}, {"c_vlm", ck.backbone.c_vlm},
                   {"c_sam", ck.backbone.c_sam},     {"n_classes", ck.backbone.n_classes}};
  j["fingerprints"] = {{"vlm_image", ck.fingerprints.vlm_image}, {"vlm_text", ck.fingerprints.vlm_text},
                       {"sam_image", ck.fingerprints.sam_image}, {"sam_decoder", ck.fingerprints.sam_decoder}};
  {
    nlohmann::json voc;
    voc["c_vlm"] = ck.vocabulary.c_vlm;
    voc["seed"] = ck.vocabulary.seed;
    voc["background"] = ck.vocabulary.background;
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& cs : ck.vocabulary.classes) {
      classes.push_back({{"id", cs.id}, {"label", cs.label}, {"embedding", cs.embedding},
                         {"color", std::vector<double>{cs.color[0], cs.color[1], cs.color[2]}},
                         {"shape_kind", cs.shape_kind}});
    }
    voc["classes"] = std::move(classes);
    j["vocabulary"] = std::move(voc);
  }
  {
    nlohmann::json params;
    for (const auto& [name, t] : ck.params.tensors) params[name] = detail::tensor_to_json(t);
    j["params"] = std::move(params);
    j["params_meta"] = {{"c_vlm", ck.params.c_vlm}, {"c_sam", ck.params.c_sam}};
  }
  {
    nlohmann::json m, v;
    for (const auto& [name, t] : ck.opt.m) m[name] = detail::tensor_to_json(t);
    for (const auto& [name, t] : ck.opt.v) v[name] = detail::tensor_to_json(t);
    j["opt"] = {{"m", std::move(m)}, {"v", std::move(v)}, {"t", ck.opt.t}};
  }
  j["config_snapshot"] = ck.config_snapshot;

  std::vector<std::uint8_t> bytes = nlohmann::json::to_cbor(j);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes);
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  try {
    if (j.value("magic", std::string()) != kCheckpointMagic)
      throw CheckpointError("not a vlpseg checkpoint: " + path.string());
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw CheckpointError("checkpoint version " + std::to_string(j.at("version").get<int>()) +
                            " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    ck.version = j.at("version").get<int>();
    ck.mode = parse_mode(j.at("mode").get<std::string>());
    ck.fold_index = j.at("fold_index").get<int>();
    ck.step = j.at("step").get<int>();
    ck.episodes_consumed = j.at("episodes_consumed").get<std::uint64_t>();
    ck.model.n_queries = j.at("model").at("n_queries").get<int>();
    ck.model.c = j.at("model").at("c").get<int>();
    ck.model.heads = j.at("model").at("heads").get<int>();
    ck.model.mode = parse_mode(j.at("model").at("mode").get<std::string>());
    ck.backbone.kind = j.at("backbone").at("kind").get<std::string>();
    ck.backbone.seed = j.at("backbone").at("seed").get<std::uint64_t>();
    ck.backbone.patch_size = j.at("backbone").at("patch_size").get<int>();
    ck.backbone.c_vlm = j.at("backbone").at("c_vlm").get<int>();
    ck.backbone.c_sam = j.at("backbone").at("c_sam").get<int>();
    ck.backbone.n_classes = j.at("backbone").at("n_classes").get<int>();
    ck.fingerprints.vlm_image = j.at("fingerprints").at("vlm_image").get<std::uint64_t>();
    ck.fingerprints.vlm_text = j.at("fingerprints").at("vlm_text").get<std::uint64_t>();
    ck.fingerprints.sam_image = j.at("fingerprints").at("sam_image").get<std::uint64_t>();
    ck.fingerprints.sam_decoder = j.at("fingerprints").at("sam_decoder").get<std::uint64_t>();
    const auto& voc = j.at("vocabulary");
    ck.vocabulary.c_vlm = voc.at("c_vlm").get<int>();
    ck.vocabulary.seed = voc.at("seed").get<std::uint64_t>();
    ck.vocabulary.background = voc.at("background").get<std::vector<double>>();
    for (const auto& cj : voc.at("classes")) {
      ClassSignature cs;
      cs.id = cj.at("id").get<int>();
      cs.label = cj.at("label").get<std::string>();
      cs.embedding = cj.at("embedding").get<std::vector<double>>();
      auto col = cj.at("color").get<std::vector<double>>();
      if (col.size() != 3) throw CheckpointError("checkpoint: bad color entry");
      cs.color = {col[0], col[1], col[2]};
      cs.shape_kind = cj.at("shape_kind").get<int>();
      ck.vocabulary.classes.push_back(std::move(cs));
    }
    ck.params.model = ck.model;
    ck.params.c_vlm = j.at("params_meta").at("c_vlm").get<int>();
    ck.params.c_sam = j.at("params_meta").at("c_sam").get<int>();
    for (const auto& [name, tj] : j.at("params").items()) ck.params.tensors[name] = detail::tensor_from_json(tj);
    for (const auto& [name, tj] : j.at("opt").at("m").items()) ck.opt.m[name] = detail::tensor_from_json(tj);
    for (const auto& [name, tj] : j.at("opt").at("v").items()) ck.opt.v[name] = detail::tensor_from_json(tj);
    ck.opt.t = j.at("opt").at("t").get<long>();
    ck.config_snapshot = j.at("config_snapshot").get<std::map<std::string, std::string>>();
    return ck;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
}

// Rebuilds the frozen backbones recorded in a checkpoint and verifies their
// fingerprints, so evaluation runs against the exact train-time encoders.
inline std::shared_ptr<const BackboneBundle> rebuild_bundle(const Checkpoint& ck) {
  auto bundle = make_backbones_from_vocab(ck.backbone, OracleVocabulary::from_raw(ck.vocabulary));
  if (!(bundle->fingerprints() == ck.fingerprints))
    throw CheckpointError("checkpoint backbone fingerprints do not match the rebuilt bundle");
  return bundle;
}

inline void verify_bundle(const Checkpoint& ck, const BackboneBundle& bundle) {
  if (!(bundle.fingerprints() == ck.fingerprints))
    throw CheckpointError("checkpoint was trained against different frozen backbones (fingerprint mismatch)");
}

inline void require_mode(const Checkpoint& ck, Mode requested) {
  if (ck.mode != requested)
    throw CheckpointError("checkpoint mode is '" + mode_name(ck.mode) + "' but '" + mode_name(requested) +
                          "' was requested");
}

}  // namespace vlpseg
