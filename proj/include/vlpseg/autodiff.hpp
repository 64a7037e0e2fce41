#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "vlpseg/errors.hpp"
#include "vlpseg/tensor.hpp"

namespace vlpseg::ad {

// Reverse-mode autodiff over a tape of Tensor-valued nodes. Everything runs
// in double precision so analytic gradients can be held to the 1e-4 relative
// tolerance of central finite differences with step 1e-5.
//
// A Graph is built per forward pass and discarded afterwards. Nodes never
// move once created (indices are stable), and backward() walks the tape in
// reverse creation order, which is a valid topological order by construction.

struct Val {
  int i = -1;
  bool ok() const { return i >= 0; }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Val input(Tensor v) { return push(std::move(v)); }
  Val constant(Tensor v) { return push(std::move(v)); }
  Val scalar(double v) { return push(Tensor({1, 1}, {v})); }

  const Tensor& value(Val v) const { return nodes_[check(v)].val; }
  const Tensor& grad(Val v) const { return nodes_[check(v)].grad; }

  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Val add(Val a, Val b) {
    require_same(a, b, "add");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
    return push(std::move(out), [this, a, b](const Tensor& g) {
      accumulate(a, g.data);
      accumulate(b, g.data);
    });
  }

  Val sub(Val a, Val b) {
    require_same(a, b, "sub");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
    return push(std::move(out), [this, a, b](const Tensor& g) {
      accumulate(a, g.data);
      accumulate_neg(b, g.data);
    });
  }

  Val mul(Val a, Val b) {
    require_same(a, b, "mul");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
    return push(std::move(out), [this, a, b](const Tensor& g) {
      const Tensor& va = value(a);
      const Tensor& vb2 = value(b);
      Tensor& ga = mutable_grad(a);
      Tensor& gb = mutable_grad(b);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i] * vb2.data[i];
        gb.data[i] += g.data[i] * va.data[i];
      }
    });
  }

  // Elementwise division; used on scalar (1x1) nodes for loss ratios.
  Val div(Val a, Val b) {
    require_same(a, b, "div");
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] /= vb.data[i];
    return push(std::move(out), [this, a, b](const Tensor& g) {
      const Tensor& va = value(a);
      const Tensor& vb2 = value(b);
      Tensor& ga = mutable_grad(a);
      Tensor& gb = mutable_grad(b);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i] / vb2.data[i];
        gb.data[i] -= g.data[i] * va.data[i] / (vb2.data[i] * vb2.data[i]);
      }
    });
  }

  Val scale(Val a, double s) {
    Tensor out = value(a);
    for (auto& v : out.data) v *= s;
    return push(std::move(out), [this, a, s](const Tensor& g) {
      Tensor& ga = mutable_grad(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
    });
  }

  Val add_scalar(Val a, double s) {
    Tensor out = value(a);
    for (auto& v : out.data) v += s;
    return push(std::move(out), [this, a](const Tensor& g) { accumulate(a, g.data); });
  }

  Val gelu(Val a) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    Tensor out = value(a);
    for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    return push(std::move(out), [this, a](const Tensor& g) {
      const Tensor& x = value(a);
      Tensor& ga = mutable_grad(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        double xi = x.data[i];
        double phi = 0.5 * (1.0 + std::erf(xi * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * xi * xi);
        ga.data[i] += g.data[i] * (phi + xi * pdf);
      }
    });
  }

  Val sigmoid(Val a) {
    Tensor out = value(a);
    for (auto& v : out.data) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    Val r = push(std::move(out));
    rebind(r, [this, a, r](const Tensor& g) {
      const Tensor& y = value(r);
      Tensor& ga = mutable_grad(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
    });
    return r;
  }

  Val log(Val a) {
    Tensor out = value(a);
    for (auto& v : out.data) v = std::log(v);
    return push(std::move(out), [this, a](const Tensor& g) {
      const Tensor& x = value(a);
      Tensor& ga = mutable_grad(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / x.data[i];
    });
  }

  // Gradient is passed through only on the interior of [lo, hi].
  Val clamp(Val a, double lo, double hi) {
    Tensor out = value(a);
    for (auto& v : out.data) v = v < lo ? lo : (v > hi ? hi : v);
    return push(std::move(out), [this, a, lo, hi](const Tensor& g) {
      const Tensor& x = value(a);
      Tensor& ga = mutable_grad(a);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        if (x.data[i] > lo && x.data[i] < hi) ga.data[i] += g.data[i];
    });
  }

  // ---- linear algebra ----

  Val matmul(Val a, Val b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.shape.size() != 2 || vb.shape.size() != 2 || va.cols() != vb.rows())
      throw ShapeError("matmul: incompatible shapes " + shape_str(va.shape) + " * " + shape_str(vb.shape));
    int m = va.rows(), k = va.cols(), n = vb.cols();
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
      for (int l = 0; l < k; ++l) {
        double aval = va.at(i, l);
        if (aval == 0.0) continue;
        const double* brow = &vb.data[static_cast<std::size_t>(l) * n];
        double* orow = &out.data[static_cast<std::size_t>(i) * n];
        for (int j = 0; j < n; ++j) orow[j] += aval * brow[j];
      }
    return push(std::move(out), [this, a, b, m, k, n](const Tensor& g) {
      const Tensor& va2 = value(a);
      const Tensor& vb2 = value(b);
      Tensor& ga = mutable_grad(a);
      Tensor& gb = mutable_grad(b);
      // ga += g * b^T
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          double s = 0.0;
          const double* grow = &g.data[static_cast<std::size_t>(i) * n];
          const double* brow = &vb2.data[static_cast<std::size_t>(l) * n];
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga.data[static_cast<std::size_t>(i) * k + l] += s;
        }
      // gb += a^T * g
      for (int l = 0; l < k; ++l)
        for (int i = 0; i < m; ++i) {
          double aval = va2.at(i, l);
          if (aval == 0.0) continue;
          const double* grow = &g.data[static_cast<std::size_t>(i) * n];
          double* gbrow = &gb.data[static_cast<std::size_t>(l) * n];
          for (int j = 0; j < n; ++j) gbrow[j] += aval * grow[j];
        }
    });
  }

  Val transpose(Val a) {
    const Tensor& va = value(a);
    int m = va.rows(), n = va.cols();
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(j, i) = va.at(i, j);
    return push(std::move(out), [this, a, m, n](const Tensor& g) {
      Tensor& ga = mutable_grad(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
    });
  }

  // rows(a) x cols(b) with b a 1 x cols row vector added to every row.
  Val add_row_broadcast(Val a, Val b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (vb.rows() != 1 || vb.cols() != va.cols()) throw ShapeError("add_row_broadcast: bias must be 1 x cols");
    Tensor out = va;
    int m = va.rows(), n = va.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(i, j) += vb.at(0, j);
    return push(std::move(out), [this, a, b, m, n](const Tensor& g) {
      accumulate(a, g.data);
      Tensor& gb = mutable_grad(b);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb.at(0, j) += g.at(i, j);
    });
  }

  // Tile a 1 x c row vector to m rows.
  Val tile_rows(Val a, int m) {
    const Tensor& va = value(a);
    if (va.rows() != 1) throw ShapeError("tile_rows: expected 1 x c input");
    int n = va.cols();
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(i, j) = va.at(0, j);
    return push(std::move(out), [this, a, m, n](const Tensor& g) {
      Tensor& ga = mutable_grad(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.at(0, j) += g.at(i, j);
    });
  }

  Val concat_cols(const std::vector<Val>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input");
    int m = value(xs[0]).rows();
    int total = 0;
    for (Val x : xs) {
      if (value(x).rows() != m) throw ShapeError("concat_cols: row mismatch");
      total += value(x).cols();
    }
    Tensor out = Tensor::zeros({m, total});
    int off = 0;
    for (Val x : xs) {
      const Tensor& vx = value(x);
      int n = vx.cols();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, off + j) = vx.at(i, j);
      off += n;
    }
    return push(std::move(out), [this, xs, m](const Tensor& g) {
      int off2 = 0;
      for (Val x : xs) {
        Tensor& gx = mutable_grad(x);
        int n = gx.cols();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gx.at(i, j) += g.at(i, off2 + j);
        off2 += n;
      }
    });
  }

  Val slice_cols(Val a, int c0, int c1) {
    const Tensor& va = value(a);
    if (c0 < 0 || c1 > va.cols() || c0 >= c1) throw ShapeError("slice_cols: bad range");
    int m = va.rows(), n = c1 - c0;
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(i, j) = va.at(i, c0 + j);
    return push(std::move(out), [this, a, c0, m, n](const Tensor& g) {
      Tensor& ga = mutable_grad(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.at(i, c0 + j) += g.at(i, j);
    });
  }

  Val reshape(Val a, std::vector<int> shape) {
    const Tensor& va = value(a);
    if (Tensor::numel_of(shape) != va.numel()) throw ShapeError("reshape: element count mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.data = va.data;
    return push(std::move(out), [this, a](const Tensor& g) { accumulate(a, g.data); });
  }

  // ---- reductions ----

  Val sum(Val a) {
    const Tensor& va = value(a);
    double s = 0.0;
    for (double v : va.data) s += v;
    return push(Tensor({1, 1}, {s}), [this, a](const Tensor& g) {
      Tensor& ga = mutable_grad(a);
      for (auto& v : ga.data) v += g.data[0];
    });
  }

  Val mean(Val a) {
    const Tensor& va = value(a);
    double n = static_cast<double>(va.numel());
    double s = 0.0;
    for (double v : va.data) s += v;
    return push(Tensor({1, 1}, {s / n}), [this, a, n](const Tensor& g) {
      Tensor& ga = mutable_grad(a);
      for (auto& v : ga.data) v += g.data[0] / n;
    });
  }

  // ---- normalizations ----

  Val row_softmax(Val a) {
    const Tensor& va = value(a);
    int m = va.rows(), n = va.cols();
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
      double mx = va.at(i, 0);
      for (int j = 1; j < n; ++j) mx = std::max(mx, va.at(i, j));
      double s = 0.0;
      for (int j = 0; j < n; ++j) {
        double e = std::exp(va.at(i, j) - mx);
        out.at(i, j) = e;
        s += e;
      }
      for (int j = 0; j < n; ++j) out.at(i, j) /= s;
    }
    Val r = push(std::move(out));
    rebind(r, [this, a, r, m, n](const Tensor& g) {
      const Tensor& y = value(r);
      Tensor& ga = mutable_grad(a);
      for (int i = 0; i < m; ++i) {
        double dotgy = 0.0;
        for (int j = 0; j < n; ++j) dotgy += g.at(i, j) * y.at(i, j);
        for (int j = 0; j < n; ++j) ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dotgy);
      }
    });
    return r;
  }

  // Per-row y = x / (||x|| + eps). eps keeps zero rows harmless.
  Val row_l2_normalize(Val a, double eps) {
    const Tensor& va = value(a);
    int m = va.rows(), n = va.cols();
    Tensor out = Tensor::zeros({m, n});
    std::vector<double> norms(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += va.at(i, j) * va.at(i, j);
      double nrm = std::sqrt(s);
      norms[static_cast<std::size_t>(i)] = nrm;
      double denom = nrm + eps;
      for (int j = 0; j < n; ++j) out.at(i, j) = va.at(i, j) / denom;
    }
    return push(std::move(out), [this, a, m, n, eps, norms](const Tensor& g) {
      const Tensor& x = value(a);
      Tensor& ga = mutable_grad(a);
      for (int i = 0; i < m; ++i) {
        double nrm = norms[static_cast<std::size_t>(i)];
        double denom = nrm + eps;
        double gx = 0.0;
        for (int j = 0; j < n; ++j) gx += g.at(i, j) * x.at(i, j);
        for (int j = 0; j < n; ++j) {
          double d = g.at(i, j) / denom;
          if (nrm > 1e-300) d -= x.at(i, j) * gx / (nrm * denom * denom);
          ga.at(i, j) += d;
        }
      }
    });
  }

  // Standard per-row layer norm with affine parameters (gamma, beta are 1 x n).
  Val layernorm_rows(Val a, Val gamma, Val beta, double eps = 1e-5) {
    const Tensor& va = value(a);
    const Tensor& vg = value(gamma);
    const Tensor& vb = value(beta);
    int m = va.rows(), n = va.cols();
    if (vg.rows() != 1 || vg.cols() != n || vb.rows() != 1 || vb.cols() != n)
      throw ShapeError("layernorm_rows: affine params must be 1 x cols");
    Tensor out = Tensor::zeros({m, n});
    std::vector<double> mus(static_cast<std::size_t>(m)), istds(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      double mu = 0.0;
      for (int j = 0; j < n; ++j) mu += va.at(i, j);
      mu /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) {
        double d = va.at(i, j) - mu;
        var += d * d;
      }
      var /= n;
      double istd = 1.0 / std::sqrt(var + eps);
      mus[static_cast<std::size_t>(i)] = mu;
      istds[static_cast<std::size_t>(i)] = istd;
      for (int j = 0; j < n; ++j) out.at(i, j) = (va.at(i, j) - mu) * istd * vg.at(0, j) + vb.at(0, j);
    }
    return push(std::move(out), [this, a, gamma, beta, m, n, mus, istds](const Tensor& g) {
      const Tensor& x = value(a);
      const Tensor& vg2 = value(gamma);
      Tensor& ga = mutable_grad(a);
      Tensor& gg = mutable_grad(gamma);
      Tensor& gb = mutable_grad(beta);
      for (int i = 0; i < m; ++i) {
        double mu = mus[static_cast<std::size_t>(i)];
        double istd = istds[static_cast<std::size_t>(i)];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          double xhat = (x.at(i, j) - mu) * istd;
          double dxhat = g.at(i, j) * vg2.at(0, j);
          gg.at(0, j) += g.at(i, j) * xhat;
          gb.at(0, j) += g.at(i, j);
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        for (int j = 0; j < n; ++j) {
          double xhat = (x.at(i, j) - mu) * istd;
          double dxhat = g.at(i, j) * vg2.at(0, j);
          ga.at(i, j) += istd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
        }
      }
    });
  }

  // Min-max normalize the whole tensor to [0,1]; a constant input maps to the
  // neutral value 0.5 with zero gradient.
  Val minmax_normalize(Val a, double const_tol = 1e-12) {
    const Tensor& va = value(a);
    std::size_t imin = 0, imax = 0;
    for (std::size_t i = 1; i < va.data.size(); ++i) {
      if (va.data[i] < va.data[imin]) imin = i;
      if (va.data[i] > va.data[imax]) imax = i;
    }
    double lo = va.data[imin], hi = va.data[imax];
    double range = hi - lo;
    Tensor out = va;
    if (range < const_tol) {
      for (auto& v : out.data) v = 0.5;
      return push(std::move(out), [](const Tensor&) {});
    }
    for (auto& v : out.data) v = (v - lo) / range;
    Val r = push(std::move(out));
    rebind(r, [this, a, r, imin, imax, range](const Tensor& g) {
      const Tensor& y = value(r);
      Tensor& ga = mutable_grad(a);
      double gsum = 0.0, gysum = 0.0;
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        gsum += g.data[i];
        gysum += g.data[i] * y.data[i];
      }
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / range;
      ga.data[imin] += (gysum - gsum) / range;
      ga.data[imax] -= gysum / range;
    });
    return r;
  }

  // Bilinear upsample of an h x w map to (h*s) x (w*s), half-pixel centers.
  Val upsample_bilinear(Val a, int s) {
    const Tensor& va = value(a);
    int h = va.rows(), w = va.cols();
    int oh = h * s, ow = w * s;
    Tensor out = Tensor::zeros({oh, ow});
    auto corner_indices = [h, w, s](int oy, int ox, int& i00, int& i01, int& i10, int& i11, double& w00,
                                    double& w01, double& w10, double& w11) {
      double sy = (oy + 0.5) / s - 0.5;
      double sx = (ox + 0.5) / s - 0.5;
      int y0 = static_cast<int>(std::floor(sy));
      int x0 = static_cast<int>(std::floor(sx));
      double fy = sy - y0, fx = sx - x0;
      int y0c = std::min(std::max(y0, 0), h - 1);
      int y1c = std::min(std::max(y0 + 1, 0), h - 1);
      int x0c = std::min(std::max(x0, 0), w - 1);
      int x1c = std::min(std::max(x0 + 1, 0), w - 1);
      i00 = y0c * w + x0c;
      i01 = y0c * w + x1c;
      i10 = y1c * w + x0c;
      i11 = y1c * w + x1c;
      w00 = (1 - fy) * (1 - fx);
      w01 = (1 - fy) * fx;
      w10 = fy * (1 - fx);
      w11 = fy * fx;
    };
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int i00, i01, i10, i11;
        double w00, w01, w10, w11;
        corner_indices(oy, ox, i00, i01, i10, i11, w00, w01, w10, w11);
        out.data[static_cast<std::size_t>(oy) * ow + ox] = w00 * va.data[i00] + w01 * va.data[i01] +
                                                           w10 * va.data[i10] + w11 * va.data[i11];
      }
    return push(std::move(out), [this, a, oh, ow, corner_indices](const Tensor& g) {
      Tensor& ga = mutable_grad(a);
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          int i00, i01, i10, i11;
          double w00, w01, w10, w11;
          corner_indices(oy, ox, i00, i01, i10, i11, w00, w01, w10, w11);
          double gv = g.data[static_cast<std::size_t>(oy) * ow + ox];
          ga.data[i00] += w00 * gv;
          ga.data[i01] += w01 * gv;
          ga.data[i10] += w10 * gv;
          ga.data[i11] += w11 * gv;
        }
    });
  }

  // ---- backward ----

  void backward(Val root) {
    const Tensor& vr = value(root);
    if (vr.numel() != 1) throw ShapeError("backward: root must be scalar");
    for (auto& n : nodes_) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    nodes_[check(root)].grad.data[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back) n.back(n.grad);
    }
  }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void(const Tensor&)> back;
  };

  // deque keeps value()/grad() references stable while new nodes are pushed
  std::deque<Node> nodes_;

  std::size_t check(Val v) const {
    if (!v.ok() || static_cast<std::size_t>(v.i) >= nodes_.size()) throw Error("Graph: invalid Val handle");
    return static_cast<std::size_t>(v.i);
  }

  Val push(Tensor v, std::function<void(const Tensor&)> back = nullptr) {
    Node n;
    n.grad = Tensor::zeros(v.shape);
    n.val = std::move(v);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Val{static_cast<int>(nodes_.size()) - 1};
  }

  void rebind(Val v, std::function<void(const Tensor&)> back) { nodes_[check(v)].back = std::move(back); }

  Tensor& mutable_grad(Val v) { return nodes_[check(v)].grad; }

  void accumulate(Val v, const std::vector<double>& g) {
    Tensor& t = mutable_grad(v);
    for (std::size_t i = 0; i < g.size(); ++i) t.data[i] += g[i];
  }

  void accumulate_neg(Val v, const std::vector<double>& g) {
    Tensor& t = mutable_grad(v);
    for (std::size_t i = 0; i < g.size(); ++i) t.data[i] -= g[i];
  }

  void require_same(Val a, Val b, const char* op) const {
    if (!value(a).same_shape(value(b)))
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(value(a).shape) + " vs " +
                       shape_str(value(b).shape));
  }
};

}  // namespace vlpseg::ad
