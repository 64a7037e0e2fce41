#pragma once

// Independent brute-force reference implementations for the equation-oracle
// suite. Everything here is straight-loop double arithmetic with no use of
// the autodiff graph, so a match is evidence for both routes.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;  // row-major

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat random_mat(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1.0,
                      double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Mat m = zeros(r, c);
  for (auto& row : m)
    for (auto& v : row) v = d(rng);
  return m;
}

// per-pixel linear map: out[p] = in[p] * w + b, w is (Cin x Cout)
inline Mat project(const Mat& tokens, const Mat& w, const std::vector<double>& b) {
  Mat out = zeros(tokens.size(), b.size());
  for (std::size_t p = 0; p < tokens.size(); ++p)
    for (std::size_t o = 0; o < b.size(); ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < tokens[p].size(); ++i) acc += tokens[p][i] * w[i][o];
      out[p][o] = acc;
    }
  return out;
}

inline std::vector<double> masked_mean(const Mat& tokens, const std::vector<int>& mask) {
  std::size_t c = tokens.empty() ? 0 : tokens[0].size();
  std::vector<double> out(c, 0.0);
  double n = 0;
  for (std::size_t p = 0; p < tokens.size(); ++p)
    if (mask[p]) {
      for (std::size_t i = 0; i < c; ++i) out[i] += tokens[p][i];
      n += 1;
    }
  for (auto& v : out) v /= n;
  return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b, double eps = 1e-8) {
  double na = 0, nb = 0, d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
    d += a[i] * b[i];
  }
  return d / ((std::sqrt(na) + eps) * (std::sqrt(nb) + eps));
}

inline Mat cosine_matrix(const Mat& ta, const Mat& tb) {
  Mat s = zeros(ta.size(), tb.size());
  for (std::size_t p = 0; p < ta.size(); ++p)
    for (std::size_t q = 0; q < tb.size(); ++q) s[p][q] = cosine(ta[p], tb[q]);
  return s;
}

inline std::vector<double> minmax(const std::vector<double>& raw) {
  double lo = raw[0], hi = raw[0];
  for (double v : raw) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<double> out(raw.size());
  if (hi - lo < 1e-12) {
    for (auto& v : out) v = 0.5;
    return out;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - lo) / (hi - lo);
  return out;
}

inline std::vector<double> pseudo(const Mat& similarity, const std::vector<int>& ref_mask) {
  std::vector<double> raw(similarity.size(), 0.0);
  double n = 0;
  for (std::size_t q = 0; q < ref_mask.size(); ++q) n += ref_mask[q] ? 1 : 0;
  for (std::size_t p = 0; p < similarity.size(); ++p) {
    double acc = 0;
    for (std::size_t q = 0; q < ref_mask.size(); ++q)
      if (ref_mask[q]) acc += similarity[p][q];
    raw[p] = acc / n;
  }
  return minmax(raw);
}

inline std::vector<double> attention(const Mat& tokens, const std::vector<double>& text) {
  std::vector<double> raw(tokens.size());
  for (std::size_t p = 0; p < tokens.size(); ++p) raw[p] = cosine(tokens[p], text);
  return minmax(raw);
}

// concat [tokens | proto | text | m1 | m2] then project; text/m2 optional
inline Mat enhance(const Mat& tokens, const std::vector<double>& proto, const std::vector<double>* text,
                   const std::vector<double>& m1, const std::vector<double>* m2, const Mat& w,
                   const std::vector<double>& b) {
  Mat cat = zeros(tokens.size(), 0);
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    cat[p] = tokens[p];
    cat[p].insert(cat[p].end(), proto.begin(), proto.end());
    if (text) cat[p].insert(cat[p].end(), text->begin(), text->end());
    cat[p].push_back(m1[p]);
    if (m2) cat[p].push_back((*m2)[p]);
  }
  return project(cat, w, b);
}

// ---- attention block pieces ----

inline std::vector<double> layernorm_row(const std::vector<double>& x, const std::vector<double>& gamma,
                                         const std::vector<double>& beta, double eps = 1e-5) {
  double mu = 0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = (x[i] - mu) / std::sqrt(var + eps) * gamma[i] + beta[i];
  return out;
}

inline Mat layernorm(const Mat& x, const std::vector<double>& gamma, const std::vector<double>& beta) {
  Mat out = x;
  for (auto& row : out) row = layernorm_row(row, gamma, beta);
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::exp(x[i] - mx);
    s += e[i];
  }
  for (auto& v : e) v /= s;
  return e;
}

struct AttnW {
  Mat wq, wk, wv, wo;
  std::vector<double> bq, bk, bv, bo;
};

inline Mat mha(const Mat& q_in, const Mat& kv, const AttnW& w, int heads) {
  std::size_t c = q_in[0].size();
  std::size_t dh = c / static_cast<std::size_t>(heads);
  Mat q = project(q_in, w.wq, w.bq);
  Mat k = project(kv, w.wk, w.bk);
  Mat v = project(kv, w.wv, w.bv);
  Mat merged = zeros(q.size(), c);
  for (int h = 0; h < heads; ++h) {
    std::size_t off = static_cast<std::size_t>(h) * dh;
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> scores(k.size());
      for (std::size_t j = 0; j < k.size(); ++j) {
        double s = 0;
        for (std::size_t d = 0; d < dh; ++d) s += q[i][off + d] * k[j][off + d];
        scores[j] = s / std::sqrt(static_cast<double>(dh));
      }
      std::vector<double> a = softmax(scores);
      for (std::size_t d = 0; d < dh; ++d) {
        double acc = 0;
        for (std::size_t j = 0; j < k.size(); ++j) acc += a[j] * v[j][off + d];
        merged[i][off + d] = acc;
      }
    }
  }
  return project(merged, w.wo, w.bo);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

struct FfnW {
  Mat w1, w2;
  std::vector<double> b1, b2;
};

inline Mat ffn(const Mat& x, const FfnW& w) {
  Mat h = project(x, w.w1, w.b1);
  for (auto& row : h)
    for (auto& v : row) v = gelu(v);
  return project(h, w.w2, w.b2);
}

struct LnW {
  std::vector<double> gamma, beta;
};

struct AttendBlockW {
  LnW ln_cross_q, ln_cross_kv, ln_ffn_cross, ln_self, ln_ffn_self;
  AttnW cross, self;
  FfnW ffn_cross, ffn_self;
};

inline Mat add(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] += b[i][j];
  return out;
}

// Mirrors one attend application: pre-norm cross-attention + FFN, pre-norm
// self-attention + FFN, all residual.
inline Mat attend_block(const Mat& x0, const Mat& kv, const AttendBlockW& w, int heads) {
  Mat x = x0;
  Mat qn = layernorm(x, w.ln_cross_q.gamma, w.ln_cross_q.beta);
  Mat kvn = layernorm(kv, w.ln_cross_kv.gamma, w.ln_cross_kv.beta);
  x = add(x, mha(qn, kvn, w.cross, heads));
  x = add(x, ffn(layernorm(x, w.ln_ffn_cross.gamma, w.ln_ffn_cross.beta), w.ffn_cross));
  Mat sn = layernorm(x, w.ln_self.gamma, w.ln_self.beta);
  x = add(x, mha(sn, sn, w.self, heads));
  x = add(x, ffn(layernorm(x, w.ln_ffn_self.gamma, w.ln_ffn_self.beta), w.ffn_self));
  return x;
}

// ---- losses ----

inline double bce(const std::vector<double>& p, const std::vector<double>& y, double clamp = 1e-7) {
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pi = std::min(std::max(p[i], clamp), 1.0 - clamp);
    acc += y[i] * std::log(pi) + (1 - y[i]) * std::log(1 - pi);
  }
  return -acc / static_cast<double>(p.size());
}

inline double dice(const std::vector<double>& p, const std::vector<double>& y) {
  double inter = 0, sp = 0, sy = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * y[i];
    sp += p[i];
    sy += y[i];
  }
  return 1.0 - (2 * inter + 1) / (sp + sy + 1);
}

}  // namespace oracle
