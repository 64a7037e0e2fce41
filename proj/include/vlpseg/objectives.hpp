#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vlpseg/autodiff.hpp"
#include "vlpseg/errors.hpp"
#include "vlpseg/image.hpp"
#include "vlpseg/tensor.hpp"

namespace vlpseg {

inline constexpr double kBceClamp = 1e-7;

struct LossValue {
  double total = 0.0;
  double bce = 0.0;
  double dice = 0.0;
};

struct LossVals {
  ad::Val total, bce, dice;
};

inline Tensor mask_to_tensor(const BinaryMask& m) {
  Tensor t = Tensor::zeros({m.h * m.w, 1});
  for (std::size_t i = 0; i < m.v.size(); ++i) t.data[i] = m.v[i] ? 1.0 : 0.0;
  return t;
}

// BCE over probabilities with clamped logs plus Dice with +1 smoothing, on
// the sigmoid of the mask logits. Dice uses the unclamped probabilities.
inline LossVals total_loss_g(ad::Graph& g, ad::Val logits, const BinaryMask& gt) {
  const Tensor& lv = g.value(logits);
  if (lv.rows() != gt.h || lv.cols() != gt.w)
    throw ShapeError("total_loss: logits " + shape_str(lv.shape) + " vs mask " + std::to_string(gt.h) +
                     "x" + std::to_string(gt.w));
  int n = gt.h * gt.w;
  ad::Val flat = g.reshape(logits, {n, 1});
  ad::Val p = g.sigmoid(flat);
  ad::Val y = g.constant(mask_to_tensor(gt));
  ad::Val one = g.constant(Tensor::full({n, 1}, 1.0));

  ad::Val pc = g.clamp(p, kBceClamp, 1.0 - kBceClamp);
  ad::Val term_pos = g.mul(y, g.log(pc));
  ad::Val term_neg = g.mul(g.sub(one, y), g.log(g.sub(one, pc)));
  ad::Val bce = g.scale(g.mean(g.add(term_pos, term_neg)), -1.0);

  ad::Val inter = g.sum(g.mul(p, y));
  ad::Val num = g.add_scalar(g.scale(inter, 2.0), 1.0);
  ad::Val den = g.add_scalar(g.add(g.sum(p), g.sum(y)), 1.0);
  ad::Val dice = g.sub(g.scalar(1.0), g.div(num, den));

  return LossVals{g.add(bce, dice), bce, dice};
}

// ---- plain (non-graph) evaluations, used by tests and metrics ----

inline void require_same_dims(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": size mismatch");
}

inline double bce_loss(const std::vector<double>& p, const std::vector<double>& y) {
  require_same_dims(p.size(), y.size(), "bce_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pi = std::min(std::max(p[i], kBceClamp), 1.0 - kBceClamp);
    acc += y[i] * std::log(pi) + (1.0 - y[i]) * std::log(1.0 - pi);
  }
  return -acc / static_cast<double>(p.size());
}

inline double dice_loss(const std::vector<double>& p, const std::vector<double>& y) {
  require_same_dims(p.size(), y.size(), "dice_loss");
  double inter = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * y[i];
    sp += p[i];
    sy += y[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + sy + 1.0);
}

inline LossValue total_loss(const MaskLogits& logits, const BinaryMask& gt) {
  ad::Graph g;
  ad::Val l = g.input(Tensor({logits.h, logits.w}, logits.v));
  LossVals lv = total_loss_g(g, l, gt);
  return LossValue{g.value(lv.total).data[0], g.value(lv.bce).data[0], g.value(lv.dice).data[0]};
}

// ---- IoU ----

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a.v.size(), b.v.size(), "mask_iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    bool pa = a.v[i] != 0, pb = b.v[i] != 0;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
  }
  if (uni == 0) return 1.0;  // both empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline BinaryMask binarize_logits(const MaskLogits& logits, double prob_threshold = 0.5) {
  BinaryMask m = BinaryMask::zeros(logits.h, logits.w);
  double logit_th = std::log(prob_threshold / (1.0 - prob_threshold));
  for (std::size_t i = 0; i < logits.v.size(); ++i) m.v[i] = logits.v[i] > logit_th ? 1 : 0;
  return m;
}

inline double episode_iou(const MaskLogits& pred, const BinaryMask& gt, double prob_threshold = 0.5) {
  if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("episode_iou: resolution mismatch");
  return mask_iou(binarize_logits(pred, prob_threshold), gt);
}

// ---- fold aggregation ----

struct IoUReport {
  struct PerClass {
    double mean_iou = 0.0;
    int count = 0;
  };
  std::map<int, PerClass> per_class;
  double miou = 0.0;
  int n_episodes = 0;
  int n_skipped = 0;
};

struct EpisodeResult {
  int class_id = -1;
  double iou = 0.0;
};

// Class-balanced: average inside each class first, then across classes.
inline IoUReport fold_miou(const std::vector<EpisodeResult>& results, int n_skipped = 0) {
  if (results.empty()) throw DataError("fold_miou: no episode results");
  IoUReport rep;
  std::map<int, std::pair<double, int>> acc;
  for (const auto& r : results) {
    auto& a = acc[r.class_id];
    a.first += r.iou;
    a.second += 1;
  }
  double total = 0.0;
  for (const auto& [cid, a] : acc) {
    IoUReport::PerClass pc;
    pc.mean_iou = a.first / a.second;
    pc.count = a.second;
    rep.per_class[cid] = pc;
    total += pc.mean_iou;
  }
  rep.miou = total / static_cast<double>(acc.size());
  rep.n_episodes = static_cast<int>(results.size());
  rep.n_skipped = n_skipped;
  return rep;
}

// ---- report files ----
// Data rows: <class_id>\t<mean_iou>\t<count>, final row: miou\t<value>.
// '#' lines carry run metadata and are ignored by the parser's math.

struct ReportMeta {
  std::string mode;
  int fold = -1;
  std::uint64_t seed = 0;
};

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_report(const std::filesystem::path& path, const IoUReport& rep, const ReportMeta& meta) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report: " + path.string());
  out << "# vlpseg-report v1\n";
  out << "# mode: " << meta.mode << "\n";
  out << "# fold: " << meta.fold << "\n";
  out << "# seed: " << meta.seed << "\n";
  out << "# episodes: " << rep.n_episodes << "\n";
  out << "# skipped: " << rep.n_skipped << "\n";
  for (const auto& [cid, pc] : rep.per_class)
    out << cid << "\t" << fmt_double(pc.mean_iou) << "\t" << pc.count << "\n";
  out << "miou\t" << fmt_double(rep.miou) << "\n";
}

struct ParsedReport {
  IoUReport report;
  ReportMeta meta;
};

inline ParsedReport parse_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report: " + path.string());
  ParsedReport pr;
  std::string line;
  int lineno = 0;
  bool saw_miou = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto grab = [&](const std::string& key) -> std::string {
        std::string tag = "# " + key + ": ";
        return line.rfind(tag, 0) == 0 ? line.substr(tag.size()) : std::string();
      };
      if (auto v = grab("mode"); !v.empty()) pr.meta.mode = v;
      if (auto v = grab("fold"); !v.empty()) pr.meta.fold = std::stoi(v);
      if (auto v = grab("skipped"); !v.empty()) pr.report.n_skipped = std::stoi(v);
      if (auto v = grab("episodes"); !v.empty()) pr.report.n_episodes = std::stoi(v);
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    try {
      if (fields.size() == 2 && fields[0] == "miou") {
        pr.report.miou = std::stod(fields[1]);
        saw_miou = true;
      } else if (fields.size() == 3) {
        IoUReport::PerClass pc;
        pc.mean_iou = std::stod(fields[1]);
        pc.count = std::stoi(fields[2]);
        pr.report.per_class[std::stoi(fields[0])] = pc;
      } else {
        throw std::invalid_argument("field count");
      }
    } catch (const std::exception&) {
      throw DataError("report " + path.string() + ": line " + std::to_string(lineno) + ": malformed row");
    }
  }
  if (!saw_miou)
    throw DataError("report " + path.string() + ": line " + std::to_string(lineno) + ": missing final miou row");
  return pr;
}

}  // namespace vlpseg
