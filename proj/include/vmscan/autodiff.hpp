#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vmscan/ssm.hpp"
#include "vmscan/tensor.hpp"

namespace vmscan {

/// Handle to a tensor tracked on a Tape.
struct Value {
  long id = -1;
};

/// Reverse-mode tape over a fixed primitive whitelist. Nodes are recorded in
/// forward order, so the reverse sweep is already topological; gradients
/// accumulate additively at fan-out. A tape is confined to one worker.
class Tape {
 public:
  Value leaf(Tensor t, bool requires_grad = false) {
    return push(std::move(t), requires_grad, nullptr);
  }

  const Tensor& value(Value v) const { return values_.at(static_cast<size_t>(v.id)); }

  /// Gradient of the last backward() w.r.t. v; empty tensor when untouched.
  const Tensor& grad(Value v) const { return grads_.at(static_cast<size_t>(v.id)); }

  bool requires_grad(Value v) const { return requires_grad_.at(static_cast<size_t>(v.id)); }

  // ---- primitives -------------------------------------------------------

  /// y = x w + b with x:[M,din], w:[din,dout], b:[dout].
  Value linear(Value xv, Value wv, Value bv) {
    const Tensor& x = value(xv);
    const Tensor& w = value(wv);
    const Tensor& b = value(bv);
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.size() != w.dim(1))
      throw std::invalid_argument("linear: shape mismatch " + shape_string(x.shape()) + " x " +
                                  shape_string(w.shape()) + " + " + shape_string(b.shape()));
    const long M = x.dim(0), din = x.dim(1), dout = w.dim(1);
    Tensor y({M, dout});
    for (long m = 0; m < M; ++m) {
      const double* xm = x.data() + m * din;
      double* ym = y.data() + m * dout;
      for (long o = 0; o < dout; ++o) ym[o] = b[o];
      for (long i = 0; i < din; ++i) {
        const double xi = xm[i];
        const double* wi = w.data() + i * dout;
        for (long o = 0; o < dout; ++o) ym[o] += xi * wi[o];
      }
    }
    bool rg = requires_grad(xv) || requires_grad(wv) || requires_grad(bv);
    return push(std::move(y), rg, [=](Tape& t, Value out) {
      const Tensor& dy = t.grad(out);
      const Tensor& xx = t.value(xv);
      const Tensor& ww = t.value(wv);
      if (t.requires_grad(xv)) {
        Tensor& dx = t.grad_buffer(xv);
        for (long m = 0; m < M; ++m)
          for (long i = 0; i < din; ++i) {
            double acc = 0.0;
            const double* dym = dy.data() + m * dout;
            const double* wi = ww.data() + i * dout;
            for (long o = 0; o < dout; ++o) acc += dym[o] * wi[o];
            dx[m * din + i] += acc;
          }
      }
      if (t.requires_grad(wv)) {
        Tensor& dw = t.grad_buffer(wv);
        for (long m = 0; m < M; ++m) {
          const double* xm = xx.data() + m * din;
          const double* dym = dy.data() + m * dout;
          for (long i = 0; i < din; ++i) {
            const double xi = xm[i];
            double* dwi = dw.data() + i * dout;
            for (long o = 0; o < dout; ++o) dwi[o] += xi * dym[o];
          }
        }
      }
      if (t.requires_grad(bv)) {
        Tensor& db = t.grad_buffer(bv);
        for (long m = 0; m < M; ++m) {
          const double* dym = dy.data() + m * dout;
          for (long o = 0; o < dout; ++o) db[o] += dym[o];
        }
      }
    });
  }

  /// Depthwise 3x3 convolution over a token grid, zero padding 1.
  /// x:[R*C,d], k:[9,d].
  Value dwconv3x3(Value xv, Value kv, long rows, long cols) {
    const Tensor& x = value(xv);
    const Tensor& k = value(kv);
    if (x.rank() != 2 || x.dim(0) != rows * cols)
      throw std::invalid_argument("dwconv3x3: token count does not match grid");
    const long d = x.dim(1);
    if (k.rank() != 2 || k.dim(0) != 9 || k.dim(1) != d)
      throw std::invalid_argument("dwconv3x3: kernel must be [9," + std::to_string(d) + "]");
    Tensor y({rows * cols, d});
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        double* yo = y.data() + (r * cols + c) * d;
        for (long u = -1; u <= 1; ++u) {
          if (r + u < 0 || r + u >= rows) continue;
          for (long v = -1; v <= 1; ++v) {
            if (c + v < 0 || c + v >= cols) continue;
            const double* xi = x.data() + ((r + u) * cols + (c + v)) * d;
            const double* kw = k.data() + ((u + 1) * 3 + (v + 1)) * d;
            for (long ch = 0; ch < d; ++ch) yo[ch] += kw[ch] * xi[ch];
          }
        }
      }
    bool rg = requires_grad(xv) || requires_grad(kv);
    return push(std::move(y), rg, [=](Tape& t, Value out) {
      const Tensor& dy = t.grad(out);
      const Tensor& xx = t.value(xv);
      const Tensor& kk = t.value(kv);
      const bool need_dx = t.requires_grad(xv);
      const bool need_dk = t.requires_grad(kv);
      Tensor* dx = need_dx ? &t.grad_buffer(xv) : nullptr;
      Tensor* dk = need_dk ? &t.grad_buffer(kv) : nullptr;
      for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) {
          const double* dyo = dy.data() + (r * cols + c) * d;
          for (long u = -1; u <= 1; ++u) {
            if (r + u < 0 || r + u >= rows) continue;
            for (long v = -1; v <= 1; ++v) {
              if (c + v < 0 || c + v >= cols) continue;
              const long in = ((r + u) * cols + (c + v)) * d;
              const long kn = ((u + 1) * 3 + (v + 1)) * d;
              if (need_dx) {
                double* dxi = dx->data() + in;
                const double* kw = kk.data() + kn;
                for (long ch = 0; ch < d; ++ch) dxi[ch] += kw[ch] * dyo[ch];
              }
              if (need_dk) {
                double* dkw = dk->data() + kn;
                const double* xi = xx.data() + in;
                for (long ch = 0; ch < d; ++ch) dkw[ch] += xi[ch] * dyo[ch];
              }
            }
          }
        }
    });
  }

  Value silu(Value xv) {
    const Tensor& x = value(xv);
    Tensor y(x.shape());
    for (long i = 0; i < x.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      y[i] = x[i] * s;
    }
    return push(std::move(y), requires_grad(xv), [=](Tape& t, Value out) {
      if (!t.requires_grad(xv)) return;
      const Tensor& dy = t.grad(out);
      const Tensor& xx = t.value(xv);
      Tensor& dx = t.grad_buffer(xv);
      for (long i = 0; i < xx.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-xx[i]));
        dx[i] += dy[i] * s * (1.0 + xx[i] * (1.0 - s));
      }
    });
  }

  /// Per-row normalization of x:[M,d] with learned gain/shift.
  Value layer_norm(Value xv, Value gv, Value bv, double eps = 1e-5) {
    const Tensor& x = value(xv);
    const Tensor& g = value(gv);
    const Tensor& b = value(bv);
    if (x.rank() != 2 || g.size() != x.dim(1) || b.size() != x.dim(1))
      throw std::invalid_argument("layer_norm: shape mismatch");
    const long M = x.dim(0), d = x.dim(1);
    Tensor y({M, d});
    Tensor xhat({M, d});
    std::vector<double> inv(static_cast<size_t>(M));
    for (long m = 0; m < M; ++m) {
      const double* xm = x.data() + m * d;
      double mu = 0.0;
      for (long i = 0; i < d; ++i) mu += xm[i];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (long i = 0; i < d; ++i) var += (xm[i] - mu) * (xm[i] - mu);
      var /= static_cast<double>(d);
      const double is = 1.0 / std::sqrt(var + eps);
      inv[static_cast<size_t>(m)] = is;
      double* xh = xhat.data() + m * d;
      double* ym = y.data() + m * d;
      for (long i = 0; i < d; ++i) {
        xh[i] = (xm[i] - mu) * is;
        ym[i] = g[i] * xh[i] + b[i];
      }
    }
    bool rg = requires_grad(xv) || requires_grad(gv) || requires_grad(bv);
    return push(std::move(y), rg,
                [=, xhat = std::move(xhat), inv = std::move(inv)](Tape& t, Value out) {
      const Tensor& dy = t.grad(out);
      const Tensor& gg = t.value(gv);
      if (t.requires_grad(gv)) {
        Tensor& dg = t.grad_buffer(gv);
        for (long m = 0; m < M; ++m)
          for (long i = 0; i < d; ++i) dg[i] += dy[m * d + i] * xhat[m * d + i];
      }
      if (t.requires_grad(bv)) {
        Tensor& db = t.grad_buffer(bv);
        for (long m = 0; m < M; ++m)
          for (long i = 0; i < d; ++i) db[i] += dy[m * d + i];
      }
      if (t.requires_grad(xv)) {
        Tensor& dx = t.grad_buffer(xv);
        for (long m = 0; m < M; ++m) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (long i = 0; i < d; ++i) {
            const double dxh = dy[m * d + i] * gg[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[m * d + i];
          }
          mean_dxh /= static_cast<double>(d);
          mean_dxh_xh /= static_cast<double>(d);
          const double is = inv[static_cast<size_t>(m)];
          for (long i = 0; i < d; ++i) {
            const double dxh = dy[m * d + i] * gg[i];
            dx[m * d + i] += is * (dxh - mean_dxh - xhat[m * d + i] * mean_dxh_xh);
          }
        }
      }
    });
  }

  Value add(Value av, Value bv) {
    const Tensor& a = value(av);
    const Tensor& b = value(bv);
    if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch");
    Tensor y(a.shape());
    for (long i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    bool rg = requires_grad(av) || requires_grad(bv);
    return push(std::move(y), rg, [=](Tape& t, Value out) {
      const Tensor& dy = t.grad(out);
      if (t.requires_grad(av)) {
        Tensor& da = t.grad_buffer(av);
        for (long i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (t.requires_grad(bv)) {
        Tensor& db = t.grad_buffer(bv);
        for (long i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }

  Value multiply(Value av, Value bv) {
    const Tensor& a = value(av);
    const Tensor& b = value(bv);
    if (!a.same_shape(b)) throw std::invalid_argument("multiply: shape mismatch");
    Tensor y(a.shape());
    for (long i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
    bool rg = requires_grad(av) || requires_grad(bv);
    return push(std::move(y), rg, [=](Tape& t, Value out) {
      const Tensor& dy = t.grad(out);
      const Tensor& aa = t.value(av);
      const Tensor& bb = t.value(bv);
      if (t.requires_grad(av)) {
        Tensor& da = t.grad_buffer(av);
        for (long i = 0; i < dy.size(); ++i) da[i] += dy[i] * bb[i];
      }
      if (t.requires_grad(bv)) {
        Tensor& db = t.grad_buffer(bv);
        for (long i = 0; i < dy.size(); ++i) db[i] += dy[i] * aa[i];
      }
    });
  }

  Value scale(Value xv, double c) {
    const Tensor& x = value(xv);
    Tensor y(x.shape());
    for (long i = 0; i < x.size(); ++i) y[i] = c * x[i];
    return push(std::move(y), requires_grad(xv), [=](Tape& t, Value out) {
      if (!t.requires_grad(xv)) return;
      const Tensor& dy = t.grad(out);
      Tensor& dx = t.grad_buffer(xv);
      for (long i = 0; i < dy.size(); ++i) dx[i] += c * dy[i];
    });
  }

  Value sum(Value xv) {
    const Tensor& x = value(xv);
    double acc = 0.0;
    for (long i = 0; i < x.size(); ++i) acc += x[i];
    return push(Tensor::scalar(acc), requires_grad(xv), [=](Tape& t, Value out) {
      if (!t.requires_grad(xv)) return;
      const double d = t.grad(out)[0];
      Tensor& dx = t.grad_buffer(xv);
      for (long i = 0; i < dx.size(); ++i) dx[i] += d;
    });
  }

  /// out[i] = x[index[i]] over rows; index must be a bijection or subset.
  Value gather_rows(Value xv, std::vector<long> index) {
    const Tensor& x = value(xv);
    if (x.rank() != 2) throw std::invalid_argument("gather_rows: expects [M,d]");
    const long M = x.dim(0), d = x.dim(1);
    for (long i : index)
      if (i < 0 || i >= M) throw std::invalid_argument("gather_rows: index out of range");
    const long K = static_cast<long>(index.size());
    Tensor y({K, d});
    for (long k = 0; k < K; ++k)
      std::copy_n(x.data() + index[static_cast<size_t>(k)] * d, d, y.data() + k * d);
    return push(std::move(y), requires_grad(xv),
                [=, index = std::move(index)](Tape& t, Value out) {
      if (!t.requires_grad(xv)) return;
      const Tensor& dy = t.grad(out);
      Tensor& dx = t.grad_buffer(xv);
      for (long k = 0; k < K; ++k) {
        double* dst = dx.data() + index[static_cast<size_t>(k)] * d;
        const double* src = dy.data() + k * d;
        for (long i = 0; i < d; ++i) dst[i] += src[i];
      }
    });
  }

  /// Column-wise concatenation of same-row-count matrices.
  Value concat_cols(const std::vector<Value>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    const long M = value(xs[0]).dim(0);
    long total = 0;
    bool rg = false;
    for (Value v : xs) {
      const Tensor& x = value(v);
      if (x.rank() != 2 || x.dim(0) != M)
        throw std::invalid_argument("concat_cols: row count mismatch");
      total += x.dim(1);
      rg = rg || requires_grad(v);
    }
    Tensor y({M, total});
    long off = 0;
    for (Value v : xs) {
      const Tensor& x = value(v);
      const long d = x.dim(1);
      for (long m = 0; m < M; ++m)
        std::copy_n(x.data() + m * d, d, y.data() + m * total + off);
      off += d;
    }
    return push(std::move(y), rg, [=, xs = xs](Tape& t, Value out) {
      const Tensor& dy = t.grad(out);
      long o = 0;
      for (Value v : xs) {
        const long d = t.value(v).dim(1);
        if (t.requires_grad(v)) {
          Tensor& dx = t.grad_buffer(v);
          for (long m = 0; m < M; ++m) {
            const double* src = dy.data() + m * total + o;
            double* dst = dx.data() + m * d;
            for (long i = 0; i < d; ++i) dst[i] += src[i];
          }
        }
        o += d;
      }
    });
  }

  /// Bilinear resize of a token grid [R*C,d] to [R2*C2,d].
  Value upsample_bilinear(Value xv, long rows, long cols, long rows2, long cols2) {
    const Tensor& x = value(xv);
    if (x.rank() != 2 || x.dim(0) != rows * cols)
      throw std::invalid_argument("upsample_bilinear: token count does not match grid");
    const long d = x.dim(1);
    struct Tap {
      long i00, i01, i10, i11;
      double w00, w01, w10, w11;
    };
    std::vector<Tap> taps(static_cast<size_t>(rows2 * cols2));
    auto axis = [](long dst, long src_n, long dst_n) {
      double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_n) /
                     static_cast<double>(dst_n) - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src_n - 1));
      long lo = static_cast<long>(std::floor(s));
      long hi = std::min(lo + 1, src_n - 1);
      return std::tuple<long, long, double>(lo, hi, s - static_cast<double>(lo));
    };
    for (long r = 0; r < rows2; ++r) {
      auto [r0, r1, wr] = axis(r, rows, rows2);
      for (long c = 0; c < cols2; ++c) {
        auto [c0, c1, wc] = axis(c, cols, cols2);
        Tap& tp = taps[static_cast<size_t>(r * cols2 + c)];
        tp.i00 = r0 * cols + c0;
        tp.i01 = r0 * cols + c1;
        tp.i10 = r1 * cols + c0;
        tp.i11 = r1 * cols + c1;
        tp.w00 = (1 - wr) * (1 - wc);
        tp.w01 = (1 - wr) * wc;
        tp.w10 = wr * (1 - wc);
        tp.w11 = wr * wc;
      }
    }
    Tensor y({rows2 * cols2, d});
    for (long o = 0; o < rows2 * cols2; ++o) {
      const Tap& tp = taps[static_cast<size_t>(o)];
      double* yo = y.data() + o * d;
      const double* a = x.data() + tp.i00 * d;
      const double* b = x.data() + tp.i01 * d;
      const double* c = x.data() + tp.i10 * d;
      const double* e = x.data() + tp.i11 * d;
      for (long i = 0; i < d; ++i)
        yo[i] = tp.w00 * a[i] + tp.w01 * b[i] + tp.w10 * c[i] + tp.w11 * e[i];
    }
    return push(std::move(y), requires_grad(xv),
                [=, taps = std::move(taps)](Tape& t, Value out) {
      if (!t.requires_grad(xv)) return;
      const Tensor& dy = t.grad(out);
      Tensor& dx = t.grad_buffer(xv);
      for (long o = 0; o < rows2 * cols2; ++o) {
        const Tap& tp = taps[static_cast<size_t>(o)];
        const double* dyo = dy.data() + o * d;
        for (long i = 0; i < d; ++i) {
          dx[tp.i00 * d + i] += tp.w00 * dyo[i];
          dx[tp.i01 * d + i] += tp.w01 * dyo[i];
          dx[tp.i10 * d + i] += tp.w10 * dyo[i];
          dx[tp.i11 * d + i] += tp.w11 * dyo[i];
        }
      }
    });
  }

  /// 2x2 neighborhood concatenation: [R*C,d] -> [ceil(R/2)*ceil(C/2),4d].
  /// Odd edges are padded by replication.
  Value downsample_concat2x2(Value xv, long rows, long cols) {
    const Tensor& x = value(xv);
    if (x.rank() != 2 || x.dim(0) != rows * cols)
      throw std::invalid_argument("downsample_concat2x2: token count does not match grid");
    const long d = x.dim(1);
    const long R2 = (rows + 1) / 2, C2 = (cols + 1) / 2;
    Tensor y({R2 * C2, 4 * d});
    auto src = [&](long r, long c) {
      return (std::min(r, rows - 1) * cols + std::min(c, cols - 1)) * d;
    };
    for (long r = 0; r < R2; ++r)
      for (long c = 0; c < C2; ++c) {
        double* yo = y.data() + (r * C2 + c) * 4 * d;
        const long idx[4] = {src(2 * r, 2 * c), src(2 * r, 2 * c + 1),
                             src(2 * r + 1, 2 * c), src(2 * r + 1, 2 * c + 1)};
        for (int q = 0; q < 4; ++q)
          std::copy_n(x.data() + idx[q], d, yo + q * d);
      }
    return push(std::move(y), requires_grad(xv), [=](Tape& t, Value out) {
      if (!t.requires_grad(xv)) return;
      const Tensor& dy = t.grad(out);
      Tensor& dx = t.grad_buffer(xv);
      auto s = [&](long r, long c) {
        return (std::min(r, rows - 1) * cols + std::min(c, cols - 1)) * d;
      };
      for (long r = 0; r < R2; ++r)
        for (long c = 0; c < C2; ++c) {
          const double* dyo = dy.data() + (r * C2 + c) * 4 * d;
          const long idx[4] = {s(2 * r, 2 * c), s(2 * r, 2 * c + 1),
                               s(2 * r + 1, 2 * c), s(2 * r + 1, 2 * c + 1)};
          for (int q = 0; q < 4; ++q) {
            double* dst = dx.data() + idx[q];
            for (long i = 0; i < d; ++i) dst[i] += dyo[q * d + i];
          }
        }
    });
  }

  /// Flatten sliding patches of a pixel image [H*W,ch] into rows of
  /// [rows*cols, patch*patch*ch]; overlapping patches share pixels.
  Value patch_gather(Value imgv, long H, long W, long patch, long stride) {
    const Tensor& img = value(imgv);
    if (img.rank() != 2 || img.dim(0) != H * W)
      throw std::invalid_argument("patch_gather: pixel count does not match image");
    if (H < patch || W < patch)
      throw std::invalid_argument("patch_gather: image smaller than patch");
    const long ch = img.dim(1);
    const long rows = (H - patch) / stride + 1;
    const long cols = (W - patch) / stride + 1;
    Tensor y({rows * cols, patch * patch * ch});
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        double* yo = y.data() + (r * cols + c) * patch * patch * ch;
        for (long u = 0; u < patch; ++u) {
          const double* row = img.data() + ((r * stride + u) * W + c * stride) * ch;
          std::copy_n(row, patch * ch, yo + u * patch * ch);
        }
      }
    return push(std::move(y), requires_grad(imgv), [=](Tape& t, Value out) {
      if (!t.requires_grad(imgv)) return;
      const Tensor& dy = t.grad(out);
      Tensor& dimg = t.grad_buffer(imgv);
      for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) {
          const double* dyo = dy.data() + (r * cols + c) * patch * patch * ch;
          for (long u = 0; u < patch; ++u) {
            double* row = dimg.data() + ((r * stride + u) * W + c * stride) * ch;
            const double* src = dyo + u * patch * ch;
            for (long i = 0; i < patch * ch; ++i) row[i] += src[i];
          }
        }
    });
  }

  /// Parameter bundle handles for the selective scan primitive.
  struct ScanParamValues {
    Value w_delta, b_delta, wb, bb, wc, bc, a, d;
  };

  /// Selective (S6) scan over x:[L,C]; delegates the math to ssm::.
  Value selective_scan(Value xv, const ScanParamValues& pv, long state) {
    const Tensor& x = value(xv);
    if (x.rank() != 2) throw std::invalid_argument("selective_scan: expects [L,C]");
    const long L = x.dim(0), C = x.dim(1);
    ssm::SelectiveScanParams p = bundle(pv, C, state);
    Tensor y({L, C});
    auto saved = std::make_shared<ssm::ScanSaved>();
    ssm::selective_scan_forward(x.data(), L, p, y.data(), saved.get());
    bool rg = requires_grad(xv) || requires_grad(pv.w_delta) || requires_grad(pv.b_delta) ||
              requires_grad(pv.wb) || requires_grad(pv.bb) || requires_grad(pv.wc) ||
              requires_grad(pv.bc) || requires_grad(pv.a) || requires_grad(pv.d);
    return push(std::move(y), rg, [=](Tape& t, Value out) {
      const Tensor& dy = t.grad(out);
      ssm::SelectiveScanParams pp = t.bundle(pv, C, state);
      auto g = ssm::selective_scan_backward(*saved, pp, dy.data());
      auto accumulate = [&t](Value v, const std::vector<double>& src) {
        if (!t.requires_grad(v)) return;
        Tensor& dst = t.grad_buffer(v);
        for (size_t i = 0; i < src.size(); ++i) dst[static_cast<long>(i)] += src[i];
      };
      accumulate(xv, g.dx);
      accumulate(pv.w_delta, g.dw_delta);
      accumulate(pv.b_delta, g.db_delta);
      accumulate(pv.wb, g.dwb);
      accumulate(pv.bb, g.dbb);
      accumulate(pv.wc, g.dwc);
      accumulate(pv.bc, g.dbc);
      accumulate(pv.a, g.da);
      accumulate(pv.d, g.dd);
    });
  }

  /// Mean cross entropy over rows of logits:[M,K]; rows whose label equals
  /// ignore_index are skipped. Returns a scalar.
  Value softmax_cross_entropy(Value logitv, std::vector<int> labels, int ignore_index = -1) {
    const Tensor& logits = value(logitv);
    if (logits.rank() != 2 || logits.dim(0) != static_cast<long>(labels.size()))
      throw std::invalid_argument("softmax_cross_entropy: logits/labels mismatch");
    const long M = logits.dim(0), K = logits.dim(1);
    auto probs = std::make_shared<Tensor>(std::vector<long>{M, K});
    long scored = 0;
    double loss = 0.0;
    for (long m = 0; m < M; ++m) {
      const int lbl = labels[static_cast<size_t>(m)];
      const double* lm = logits.data() + m * K;
      double mx = lm[0];
      for (long k = 1; k < K; ++k) mx = std::max(mx, lm[k]);
      double z = 0.0;
      for (long k = 0; k < K; ++k) z += std::exp(lm[k] - mx);
      const double logz = std::log(z) + mx;
      double* pm = probs->data() + m * K;
      for (long k = 0; k < K; ++k) pm[k] = std::exp(lm[k] - logz);
      if (lbl == ignore_index) continue;
      if (lbl < 0 || lbl >= K)
        throw std::invalid_argument("softmax_cross_entropy: label out of range");
      loss += logz - lm[lbl];
      ++scored;
    }
    if (scored > 0) loss /= static_cast<double>(scored);
    if (!std::isfinite(loss))
      throw std::runtime_error("softmax_cross_entropy: non-finite loss");
    return push(Tensor::scalar(loss), requires_grad(logitv),
                [=, labels = std::move(labels)](Tape& t, Value out) {
      if (!t.requires_grad(logitv)) return;
      const double dscale = t.grad(out)[0] / std::max<long>(scored, 1);
      Tensor& dl = t.grad_buffer(logitv);
      for (long m = 0; m < M; ++m) {
        const int lbl = labels[static_cast<size_t>(m)];
        if (lbl == ignore_index) continue;
        const double* pm = probs->data() + m * K;
        double* dm = dl.data() + m * K;
        for (long k = 0; k < K; ++k)
          dm[k] += dscale * (pm[k] - (k == lbl ? 1.0 : 0.0));
      }
    });
  }

  // ---- backward ----------------------------------------------------------

  /// Reverse sweep from a scalar loss. Gradients of every requires_grad
  /// tensor reachable from the loss are accumulated; running it twice on
  /// the same tape is an error.
  void backward(Value loss) {
    if (loss.id < 0 || loss.id >= static_cast<long>(values_.size()))
      throw std::invalid_argument("backward: unknown value");
    if (value(loss).size() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    if (!requires_grad(loss))
      throw std::invalid_argument("backward: loss is detached from tracked tensors");
    if (backward_done_)
      throw std::logic_error("backward: already run on this tape; re-run the forward pass");
    backward_done_ = true;
    grad_buffer(loss)[0] = 1.0;
    for (long i = static_cast<long>(nodes_.size()) - 1; i >= 0; --i) {
      const Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.backward || !requires_grad_[static_cast<size_t>(n.out)]) continue;
      if (grads_[static_cast<size_t>(n.out)].size() == 0) continue;  // off the loss path
      n.backward(*this, Value{n.out});
    }
  }

  /// Gradient accumulation buffer, allocated on first touch.
  Tensor& grad_buffer(Value v) {
    Tensor& g = grads_.at(static_cast<size_t>(v.id));
    if (g.size() == 0) g = Tensor(value(v).shape());
    return g;
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    long out;
    std::function<void(Tape&, Value)> backward;
  };

  ssm::SelectiveScanParams bundle(const ScanParamValues& pv, long C, long N) const {
    ssm::SelectiveScanParams p;
    p.channels = C;
    p.state = N;
    auto vec = [this](Value v) {
      const Tensor& t = value(v);
      return std::vector<double>(t.data(), t.data() + t.size());
    };
    p.w_delta = vec(pv.w_delta);
    p.b_delta = vec(pv.b_delta);
    p.wb = vec(pv.wb);
    p.bb = vec(pv.bb);
    p.wc = vec(pv.wc);
    p.bc = vec(pv.bc);
    p.a = vec(pv.a);
    p.d = vec(pv.d);
    p.check();
    return p;
  }

  Value push(Tensor t, bool requires_grad, std::function<void(Tape&, Value)> back) {
    values_.push_back(std::move(t));
    grads_.emplace_back();
    requires_grad_.push_back(requires_grad);
    const long id = static_cast<long>(values_.size()) - 1;
    if (back && requires_grad) nodes_.push_back(Node{id, std::move(back)});
    return Value{id};
  }

  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::vector<bool> requires_grad_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Max relative error between the tape gradient of f at x and central
/// finite differences with step eps.
inline double finite_diff_check(const std::function<Value(Tape&, Value)>& f,
                                const Tensor& x, double eps) {
  Tape tape;
  Value vx = tape.leaf(x, true);
  Value loss = f(tape, vx);
  tape.backward(loss);
  const Tensor& analytic = tape.grad(vx);

  double worst = 0.0;
  Tensor probe = x;
  for (long i = 0; i < x.size(); ++i) {
    const double keep = probe[i];
    probe[i] = keep + eps;
    Tape up;
    const double lu = up.value(f(up, up.leaf(probe))) [0];
    probe[i] = keep - eps;
    Tape dn;
    const double ld = dn.value(f(dn, dn.leaf(probe))) [0];
    probe[i] = keep;
    const double fd = (lu - ld) / (2 * eps);
    const double ga = analytic.size() ? analytic[i] : 0.0;
    worst = std::max(worst, std::fabs(ga - fd) / std::max(1e-8, std::fabs(fd)));
  }
  return worst;
}

}  // namespace vmscan
