#include "qpm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "qpm/error.hpp"

namespace qpm::ops {

namespace {

constexpr double kCosineEps = 1e-8;

/// Gradient buffer of input `i`, or nullptr when it needs none.
Tensor* target(Node& self, std::size_t i) {
  Node* in = self.inputs[i].get();
  return (in && in->requires_grad) ? &in->grad_buffer() : nullptr;
}

void require_rank(const Var& v, int rank, const char* what) {
  if (!v.defined() || v.value().rank() != rank) {
    throw ConfigError(std::string(what) + ": expected rank " + std::to_string(rank) +
                      " tensor, got " + (v.defined() ? shape_str(v.shape()) : "undefined"));
  }
}

void require_shape(const Var& v, const Shape& shape, const char* what) {
  if (!v.defined() || v.shape() != shape) {
    throw ConfigError(std::string(what) + ": expected shape " + shape_str(shape) + ", got " +
                      (v.defined() ? shape_str(v.shape()) : "undefined"));
  }
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Column layout: row r = (c*kh + i)*kw + j, column = offset + oy*wo + ox.
void im2col(const double* img, int channels, int height, int width, int kh, int kw, int stride,
            int pad, int ho, int wo, double* cols, std::size_t ld, std::size_t offset) {
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        double* row = cols + static_cast<std::size_t>((c * kh + i) * kw + j) * ld + offset;
        for (int oy = 0; oy < ho; ++oy) {
          const int y = oy * stride - pad + i;
          double* out = row + static_cast<std::size_t>(oy) * wo;
          if (y < 0 || y >= height) {
            std::fill(out, out + wo, 0.0);
            continue;
          }
          const double* src = img + (static_cast<std::size_t>(c) * height + y) * width;
          for (int ox = 0; ox < wo; ++ox) {
            const int x = ox * stride - pad + j;
            out[ox] = (x >= 0 && x < width) ? src[x] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t ld, std::size_t offset, int channels, int height,
            int width, int kh, int kw, int stride, int pad, int ho, int wo, double* img) {
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const double* row = cols + static_cast<std::size_t>((c * kh + i) * kw + j) * ld + offset;
        for (int oy = 0; oy < ho; ++oy) {
          const int y = oy * stride - pad + i;
          if (y < 0 || y >= height) continue;
          double* dst = img + (static_cast<std::size_t>(c) * height + y) * width;
          const double* in = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int x = ox * stride - pad + j;
            if (x >= 0 && x < width) dst[x] += in[ox];
          }
        }
      }
    }
  }
}

// Row block k of a [N,K,C] tensor viewed as an N x C matrix.
ConstStridedMatMap part_rows(const Tensor& t, int k) {
  const int n = t.dim(0), parts = t.dim(1), c = t.dim(2);
  return ConstStridedMatMap(t.data() + static_cast<std::size_t>(k) * c, n, c,
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(parts) * c));
}
StridedMatMap part_rows(Tensor& t, int k) {
  const int n = t.dim(0), parts = t.dim(1), c = t.dim(2);
  return StridedMatMap(t.data() + static_cast<std::size_t>(k) * c, n, c,
                       Eigen::OuterStride<>(static_cast<Eigen::Index>(parts) * c));
}

/// Cosine-distance block for the rows of x: norms, Gram matrix, denominators.
struct CosineBlock {
  Eigen::VectorXd norms;
  Eigen::MatrixXd gram;
  Eigen::MatrixXd denom;

  template <typename Rows>
  explicit CosineBlock(const Rows& x) {
    gram = x * x.transpose();
    norms = gram.diagonal().cwiseMax(0.0).cwiseSqrt();
    denom = (norms * norms.transpose()).array() + kCosineEps;
  }

  Eigen::MatrixXd distances() const {
    return (1.0 - (gram.array() / denom.array())).matrix();
  }

  /// Accumulates into dx the gradient of sum(grad_sim (.) cos) w.r.t. x.
  template <typename Rows, typename Out>
  void backward(const Rows& x, const Eigen::MatrixXd& grad_sim, Out&& dx) const {
    const Eigen::MatrixXd a = (grad_sim.array() / denom.array()).matrix();
    dx.noalias() += (a + a.transpose()) * x;
    const Eigen::MatrixXd b =
        (grad_sim.array() * gram.array() / denom.array().square()).matrix();
    const Eigen::VectorXd coef = (b + b.transpose()) * norms;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      if (norms[r] > 0.0) dx.row(r) -= (coef[r] / norms[r]) * x.row(r);
    }
  }
};

}  // namespace

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return Var::from_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (Tensor* g = target(self, i)) {
        for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j];
      }
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return Var::from_op(std::move(out), {x}, [factor](Node& self) {
    if (Tensor* g = target(self, 0)) {
      for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += factor * self.grad[j];
    }
  });
}

Var sum_scalars(std::span<const Var> terms) {
  std::vector<Var> inputs;
  double total = 0.0;
  for (const Var& t : terms) {
    if (!t.defined()) continue;
    total += t.item();
    inputs.push_back(t);
  }
  return Var::from_op(Tensor({1}, total), inputs, [](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      if (Tensor* g = target(self, i)) (*g)[0] += self.grad[0];
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return Var::from_op(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = target(self, 0)) {
      for (std::size_t j = 0; j < g->size(); ++j) {
        if (self.value[j] > 0.0) (*g)[j] += self.grad[j];
      }
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = stable_sigmoid(v);
  return Var::from_op(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = target(self, 0)) {
      for (std::size_t j = 0; j < g->size(); ++j) {
        const double s = self.value[j];
        (*g)[j] += self.grad[j] * s * (1.0 - s);
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return Var::from_op(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = target(self, 0)) {
      for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j];
    }
  });
}

Var select_rows(const Var& x, std::span<const int> indices) {
  require_rank(x, 2, "select_rows input");
  const int m = x.dim(0), c = x.dim(1);
  const int r = static_cast<int>(indices.size());
  std::vector<int> rows(indices.begin(), indices.end());
  for (int i : rows) {
    if (i < 0 || i >= m) throw ConfigError("select_rows: index out of range");
  }
  Tensor out({r, c});
  for (int i = 0; i < r; ++i) {
    std::copy_n(x.value().data() + static_cast<std::size_t>(rows[i]) * c, c,
                out.data() + static_cast<std::size_t>(i) * c);
  }
  return Var::from_op(std::move(out), {x}, [=, rows = std::move(rows)](Node& self) {
    Tensor* g = target(self, 0);
    if (!g) return;
    for (int i = 0; i < r; ++i) {
      double* dst = g->data() + static_cast<std::size_t>(rows[i]) * c;
      const double* src = self.grad.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) {
    throw ConfigError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                      " input channels, got " + std::to_string(cin));
  }
  if (bias.defined()) require_shape(bias, {cout}, "conv2d bias");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: invalid stride/padding");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ConfigError("conv2d: kernel larger than padded input");

  const int ck = cin * kh * kw;
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  const std::size_t in_stride = static_cast<std::size_t>(cin) * h * w;
  const std::size_t out_stride = static_cast<std::size_t>(cout) * hw_out;
  // Images per GEMM, bounded so the column buffer stays around 32 MB.
  const std::size_t budget = std::size_t{1} << 22;
  const int group = static_cast<int>(std::clamp<std::size_t>(
      budget / std::max<std::size_t>(1, static_cast<std::size_t>(ck) * hw_out), 1, n));

  Tensor out({n, cout, ho, wo});
  {
    const ConstMatMap wmat = weight.value().matrix(cout, ck);
    std::vector<double, Eigen::aligned_allocator<double>> cols;
    MatrixRM y;
    for (int n0 = 0; n0 < n; n0 += group) {
      const int g = std::min(group, n - n0);
      const std::size_t ld = hw_out * g;
      cols.resize(static_cast<std::size_t>(ck) * ld);
      for (int i = 0; i < g; ++i) {
        im2col(x.value().data() + (n0 + i) * in_stride, cin, h, w, kh, kw, stride, pad, ho, wo,
               cols.data(), ld, i * hw_out);
      }
      y.noalias() = wmat * ConstMatMap(cols.data(), ck, static_cast<Eigen::Index>(ld));
      for (int i = 0; i < g; ++i) {
        MatMap dst = out.matrix(cout, static_cast<int>(hw_out), (n0 + i) * out_stride);
        dst = y.middleCols(static_cast<Eigen::Index>(i * hw_out), hw_out);
        if (bias.defined()) {
          for (int c = 0; c < cout; ++c) dst.row(c).array() += bias.value()[c];
        }
      }
    }
  }

  return Var::from_op(
      std::move(out), {x, weight, bias},
      [=](Node& self) {
        Tensor* gx = target(self, 0);
        Tensor* gw = target(self, 1);
        Tensor* gb = target(self, 2);
        const Tensor& xin = self.inputs[0]->value;
        const Tensor& wv = self.inputs[1]->value;
        const ConstMatMap wmat = wv.matrix(cout, ck);
        std::vector<double, Eigen::aligned_allocator<double>> cols;
        MatrixRM dy;
        MatrixRM dcols;
        for (int n0 = 0; n0 < n; n0 += group) {
          const int g = std::min(group, n - n0);
          const std::size_t ld = hw_out * g;
          dy.resize(cout, static_cast<Eigen::Index>(ld));
          for (int i = 0; i < g; ++i) {
            dy.middleCols(static_cast<Eigen::Index>(i * hw_out), hw_out) =
                self.grad.matrix(cout, static_cast<int>(hw_out), (n0 + i) * out_stride);
          }
          if (gb) {
            VecMap(gb->data(), cout) += dy.rowwise().sum();
          }
          if (gw) {
            cols.resize(static_cast<std::size_t>(ck) * ld);
            for (int i = 0; i < g; ++i) {
              im2col(xin.data() + (n0 + i) * in_stride, cin, h, w, kh, kw, stride, pad, ho, wo,
                     cols.data(), ld, i * hw_out);
            }
            gw->matrix(cout, ck).noalias() +=
                dy * ConstMatMap(cols.data(), ck, static_cast<Eigen::Index>(ld)).transpose();
          }
          if (gx) {
            dcols.noalias() = wmat.transpose() * dy;
            for (int i = 0; i < g; ++i) {
              col2im(dcols.data(), ld, i * hw_out, cin, h, w, kh, kw, stride, pad, ho, wo,
                     gx->data() + (n0 + i) * in_stride);
            }
          }
        }
      });
}

Var max_pool2d(const Var& x, int kernel, int stride, int pad) {
  require_rank(x, 4, "max_pool2d input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = (h + 2 * pad - kernel) / stride + 1;
  const int wo = (w + 2 * pad - kernel) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ConfigError("max_pool2d: window larger than padded input");
  Tensor out({n, c, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  const double* src = x.value().data();
  std::size_t o = 0;
  for (int b = 0; b < n * c; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = base;
        for (int i = 0; i < kernel; ++i) {
          const int y = oy * stride - pad + i;
          if (y < 0 || y >= h) continue;
          for (int j = 0; j < kernel; ++j) {
            const int xx = ox * stride - pad + j;
            if (xx < 0 || xx >= w) continue;
            const std::size_t idx = base + static_cast<std::size_t>(y) * w + xx;
            if (src[idx] > best) {
              best = src[idx];
              best_i = idx;
            }
          }
        }
        out[o] = best;
        argmax[o] = best_i;
      }
    }
  }
  return Var::from_op(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    if (Tensor* g = target(self, 0)) {
      for (std::size_t o = 0; o < argmax.size(); ++o) (*g)[argmax[o]] += self.grad[o];
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
  if (!x.defined() || (x.value().rank() != 2 && x.value().rank() != 4)) {
    throw ConfigError("batch_norm: expected [N,C] or [N,C,H,W] input");
  }
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.value().rank() == 4 ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1;
  require_shape(gamma, {c}, "batch_norm gamma");
  require_shape(beta, {c}, "batch_norm beta");
  if (running_mean.shape() != Shape{c} || running_var.shape() != Shape{c}) {
    throw ConfigError("batch_norm: running statistics have wrong shape");
  }
  const std::size_t count = static_cast<std::size_t>(n) * spatial;
  const double* xv = x.value().data();
  auto at = [c, spatial](int b, int ch) { return (static_cast<std::size_t>(b) * c + ch) * spatial; };

  std::vector<double> mean(c), inv_std(c);
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* p = xv + at(b, ch);
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* p = xv + at(b, ch);
        for (std::size_t i = 0; i < spatial; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * m;
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }

  Tensor xhat(x.shape());
  Tensor out(x.shape());
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t o = at(b, ch);
      const double gm = gamma.value()[ch], bt = beta.value()[ch];
      for (std::size_t i = 0; i < spatial; ++i) {
        const double v = (xv[o + i] - mean[ch]) * inv_std[ch];
        xhat[o + i] = v;
        out[o + i] = gm * v + bt;
      }
    }
  }

  return Var::from_op(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Tensor* gx = target(self, 0);
        Tensor* gg = target(self, 1);
        Tensor* gbeta = target(self, 2);
        const Tensor& gm = self.inputs[1]->value;
        for (int ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int b = 0; b < n; ++b) {
            const std::size_t o = at(b, ch);
            for (std::size_t i = 0; i < spatial; ++i) {
              sum_dy += self.grad[o + i];
              sum_dy_xhat += self.grad[o + i] * xhat[o + i];
            }
          }
          if (gg) (*gg)[ch] += sum_dy_xhat;
          if (gbeta) (*gbeta)[ch] += sum_dy;
          if (!gx) continue;
          const double k = gm[ch] * inv_std[ch];
          const double m = static_cast<double>(count);
          for (int b = 0; b < n; ++b) {
            const std::size_t o = at(b, ch);
            for (std::size_t i = 0; i < spatial; ++i) {
              if (training) {
                (*gx)[o + i] +=
                    k * (self.grad[o + i] - sum_dy / m - xhat[o + i] * sum_dy_xhat / m);
              } else {
                (*gx)[o + i] += k * self.grad[o + i];
              }
            }
          }
        }
      });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const int n = x.dim(0), in = x.dim(1), outd = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ConfigError("linear: weight " + shape_str(weight.shape()) + " does not accept input " +
                      shape_str(x.shape()));
  }
  if (bias.defined()) require_shape(bias, {outd}, "linear bias");
  Tensor out({n, outd});
  out.matrix(n, outd).noalias() = x.value().matrix(n, in) * weight.value().matrix(outd, in).transpose();
  if (bias.defined()) {
    out.matrix(n, outd).rowwise() += ConstVecMap(bias.value().data(), outd).transpose();
  }
  return Var::from_op(std::move(out), {x, weight, bias}, [=](Node& self) {
    const auto dy = self.grad.matrix(n, outd);
    if (Tensor* gx = target(self, 0)) {
      gx->matrix(n, in).noalias() += dy * self.inputs[1]->value.matrix(outd, in);
    }
    if (Tensor* gw = target(self, 1)) {
      gw->matrix(outd, in).noalias() += dy.transpose() * self.inputs[0]->value.matrix(n, in);
    }
    if (Tensor* gb = target(self, 2)) {
      VecMap(gb->data(), outd) += dy.colwise().sum().transpose();
    }
  });
}

Var part_linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 3, "part_linear input");
  require_rank(weight, 3, "part_linear weight");
  const int n = x.dim(0), parts = x.dim(1), in = x.dim(2);
  const int outd = weight.dim(1);
  if (weight.dim(0) != parts || weight.dim(2) != in) {
    throw ConfigError("part_linear: weight " + shape_str(weight.shape()) +
                      " does not accept input " + shape_str(x.shape()));
  }
  if (bias.defined()) require_shape(bias, {parts, outd}, "part_linear bias");
  Tensor out({n, parts, outd});
  for (int k = 0; k < parts; ++k) {
    const ConstMatMap wk = weight.value().matrix(outd, in, static_cast<std::size_t>(k) * outd * in);
    auto yk = part_rows(out, k);
    yk.noalias() = part_rows(x.value(), k) * wk.transpose();
    if (bias.defined()) {
      yk.rowwise() += ConstVecMap(bias.value().data() + k * outd, outd).transpose();
    }
  }
  return Var::from_op(std::move(out), {x, weight, bias}, [=](Node& self) {
    Tensor* gx = target(self, 0);
    Tensor* gw = target(self, 1);
    Tensor* gb = target(self, 2);
    for (int k = 0; k < parts; ++k) {
      const auto dy = part_rows(self.grad, k);
      const std::size_t woff = static_cast<std::size_t>(k) * outd * in;
      if (gx) {
        part_rows(*gx, k).noalias() += dy * self.inputs[1]->value.matrix(outd, in, woff);
      }
      if (gw) {
        gw->matrix(outd, in, woff).noalias() += dy.transpose() * part_rows(self.inputs[0]->value, k);
      }
      if (gb) {
        VecMap(gb->data() + k * outd, outd) += dy.colwise().sum().transpose();
      }
    }
  });
}

Var stripe_pool(const Var& x, int parts) {
  require_rank(x, 4, "stripe_pool input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (parts < 1 || h % parts != 0) {
    throw ConfigError("stripe_pool: height " + std::to_string(h) + " not divisible into " +
                      std::to_string(parts) + " stripes");
  }
  const int rows = h / parts;
  const double inv = 1.0 / (static_cast<double>(rows) * w);
  Tensor out({n, parts, c});
  const double* src = x.value().data();
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = src + (static_cast<std::size_t>(b) * c + ch) * h * w;
      for (int k = 0; k < parts; ++k) {
        double s = 0.0;
        const double* p = plane + static_cast<std::size_t>(k) * rows * w;
        for (int i = 0; i < rows * w; ++i) s += p[i];
        out[(static_cast<std::size_t>(b) * parts + k) * c + ch] = s * inv;
      }
    }
  }
  return Var::from_op(std::move(out), {x}, [=](Node& self) {
    Tensor* g = target(self, 0);
    if (!g) return;
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        double* plane = g->data() + (static_cast<std::size_t>(b) * c + ch) * h * w;
        for (int k = 0; k < parts; ++k) {
          const double v = self.grad[(static_cast<std::size_t>(b) * parts + k) * c + ch] * inv;
          double* p = plane + static_cast<std::size_t>(k) * rows * w;
          for (int i = 0; i < rows * w; ++i) p[i] += v;
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool input");
  const int n = x.dim(0), c = x.dim(1);
  return reshape(stripe_pool(x, 1), {n, c});
}

Var cross_entropy(const Var& logits, std::span<const int> labels, double divisor) {
  require_rank(logits, 2, "cross_entropy logits");
  const int m = logits.dim(0), classes = logits.dim(1);
  if (static_cast<int>(labels.size()) != m) {
    throw ConfigError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(m) + " rows");
  }
  if (!(divisor > 0.0)) throw ConfigError("cross_entropy: divisor must be positive");
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ConfigError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                        std::to_string(classes) + ")");
    }
  }
  Tensor probs({m, classes});
  double total = 0.0;
  for (int r = 0; r < m; ++r) {
    const double* z = logits.value().data() + static_cast<std::size_t>(r) * classes;
    double* p = probs.data() + static_cast<std::size_t>(r) * classes;
    const double zmax = *std::max_element(z, z + classes);
    double s = 0.0;
    for (int j = 0; j < classes; ++j) {
      p[j] = std::exp(z[j] - zmax);
      s += p[j];
    }
    for (int j = 0; j < classes; ++j) p[j] /= s;
    total += -(z[labels[r]] - zmax - std::log(s));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return Var::from_op(Tensor({1}, total / divisor), {logits},
                      [=, probs = std::move(probs), ys = std::move(ys)](Node& self) {
                        Tensor* g = target(self, 0);
                        if (!g) return;
                        const double k = self.grad[0] / divisor;
                        for (int r = 0; r < m; ++r) {
                          const std::size_t o = static_cast<std::size_t>(r) * classes;
                          for (int j = 0; j < classes; ++j) {
                            (*g)[o + j] += k * (probs[o + j] - (j == ys[r] ? 1.0 : 0.0));
                          }
                        }
                      });
}

Var quality_weighted_distances(const Var& f, const Var& q) {
  require_rank(f, 3, "quality_weighted_distances features");
  const int n = f.dim(0), parts = f.dim(1);
  require_shape(q, {n, parts}, "quality_weighted_distances qualities");
  const ConstMatMap qm = q.value().matrix(n, parts);

  std::vector<Eigen::MatrixXd> dist(parts);
  Eigen::MatrixXd num = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd wsum = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < parts; ++k) {
    dist[k] = CosineBlock(part_rows(f.value(), k)).distances();
    const Eigen::MatrixXd wk = qm.col(k) * qm.col(k).transpose();
    num.array() += wk.array() * dist[k].array();
    wsum += wk;
  }
  const Eigen::MatrixXd denom = (wsum.array() + kCosineEps).matrix();
  const Eigen::MatrixXd d = (num.array() / denom.array()).matrix();
  Tensor out({n, n});
  out.matrix(n, n) = d;

  return Var::from_op(
      std::move(out), {f, q},
      [=, dist = std::move(dist)](Node& self) {
        Tensor* gf = target(self, 0);
        Tensor* gq = target(self, 1);
        const Eigen::MatrixXd g = self.grad.matrix(n, n);
        const Tensor& fv = self.inputs[0]->value;
        const ConstMatMap qv = std::as_const(self.inputs[1]->value).matrix(n, parts);
        for (int k = 0; k < parts; ++k) {
          const Eigen::MatrixXd wk = qv.col(k) * qv.col(k).transpose();
          if (gq) {
            const Eigen::MatrixXd gw =
                (g.array() * (dist[k] - d).array() / denom.array()).matrix();
            gq->matrix(n, parts).col(k) += (gw + gw.transpose()) * qv.col(k);
          }
          if (gf) {
            const auto fk = part_rows(fv, k);
            const Eigen::MatrixXd grad_sim = -(g.array() * wk.array() / denom.array()).matrix();
            CosineBlock(fk).backward(fk, grad_sim, part_rows(*gf, k));
          }
        }
      });
}

Var cosine_distance_matrix(const Var& x) {
  require_rank(x, 2, "cosine_distance_matrix input");
  const int n = x.dim(0), c = x.dim(1);
  Tensor out({n, n});
  out.matrix(n, n) = CosineBlock(x.value().matrix(n, c)).distances();
  return Var::from_op(std::move(out), {x}, [=](Node& self) {
    Tensor* g = target(self, 0);
    if (!g) return;
    const auto xv = self.inputs[0]->value.matrix(n, c);
    const Eigen::MatrixXd grad_sim = -Eigen::MatrixXd(self.grad.matrix(n, n));
    CosineBlock(xv).backward(xv, grad_sim, g->matrix(n, c));
  });
}

Var batch_hard_triplet(const Var& dist, std::span<const int> labels, double margin) {
  require_rank(dist, 2, "batch_hard_triplet distances");
  const int n = dist.dim(0);
  if (dist.dim(1) != n || static_cast<int>(labels.size()) != n) {
    throw ConfigError("batch_hard_triplet: distance matrix and labels disagree");
  }
  const Tensor& dv = dist.value();
  struct Triplet {
    int anchor, positive, negative;
  };
  std::vector<Triplet> violators;
  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    int pos = -1, neg = -1;
    for (int b = 0; b < n; ++b) {
      if (b == a) continue;
      const double v = dv[static_cast<std::size_t>(a) * n + b];
      if (labels[b] == labels[a]) {
        if (pos < 0 || v > dv[static_cast<std::size_t>(a) * n + pos]) pos = b;
      } else if (neg < 0 || v < dv[static_cast<std::size_t>(a) * n + neg]) {
        neg = b;
      }
    }
    if (pos < 0 || neg < 0) {
      throw SamplingError("batch_hard_triplet: anchor " + std::to_string(a) +
                          " lacks a positive or a negative");
    }
    const double hinge = margin + dv[static_cast<std::size_t>(a) * n + pos] -
                         dv[static_cast<std::size_t>(a) * n + neg];
    if (hinge > 0.0) {
      total += hinge;
      violators.push_back({a, pos, neg});
    }
  }
  const double count = static_cast<double>(violators.size());
  const double loss = violators.empty() ? 0.0 : total / count;
  return Var::from_op(Tensor({1}, loss), {dist},
                      [=, violators = std::move(violators)](Node& self) {
                        Tensor* g = target(self, 0);
                        if (!g || violators.empty()) return;
                        const double k = self.grad[0] / count;
                        for (const Triplet& t : violators) {
                          (*g)[static_cast<std::size_t>(t.anchor) * n + t.positive] += k;
                          (*g)[static_cast<std::size_t>(t.anchor) * n + t.negative] -= k;
                        }
                      });
}

Var quality_weighted_pool(const Var& g, const Var& q) {
  require_rank(g, 3, "quality_weighted_pool parts");
  const int n = g.dim(0), parts = g.dim(1), c = g.dim(2);
  require_shape(q, {n, parts}, "quality_weighted_pool qualities");
  Tensor out({n, c});
  for (int b = 0; b < n; ++b) {
    const ConstMatMap gb = g.value().matrix(parts, c, static_cast<std::size_t>(b) * parts * c);
    const ConstVecMap qb(q.value().data() + static_cast<std::size_t>(b) * parts, parts);
    out.matrix(1, c, static_cast<std::size_t>(b) * c).noalias() =
        (qb / qb.sum()).transpose() * gb;
  }
  return Var::from_op(std::move(out), {g, q}, [=](Node& self) {
    Tensor* gg = target(self, 0);
    Tensor* gq = target(self, 1);
    const Tensor& gv = self.inputs[0]->value;
    const Tensor& qv = self.inputs[1]->value;
    for (int b = 0; b < n; ++b) {
      const ConstVecMap qb(qv.data() + static_cast<std::size_t>(b) * parts, parts);
      const double total = qb.sum();
      const Eigen::VectorXd qhat = qb / total;
      const Eigen::RowVectorXd dh = self.grad.matrix(1, c, static_cast<std::size_t>(b) * c);
      if (gg) {
        gg->matrix(parts, c, static_cast<std::size_t>(b) * parts * c).noalias() += qhat * dh;
      }
      if (gq) {
        const Eigen::VectorXd dqhat =
            gv.matrix(parts, c, static_cast<std::size_t>(b) * parts * c) * dh.transpose();
        const double mix = qhat.dot(dqhat);
        VecMap(gq->data() + static_cast<std::size_t>(b) * parts, parts) +=
            ((dqhat.array() - mix) / total).matrix();
      }
    }
  });
}

Var pixel_attention(const Var& maps, const Var& h) {
  require_rank(maps, 4, "pixel_attention maps");
  const int n = maps.dim(0), c = maps.dim(1), hh = maps.dim(2), ww = maps.dim(3);
  require_shape(h, {n, c}, "pixel_attention vector");
  const int hw = hh * ww;
  Tensor out({n, hh, ww});
  for (int b = 0; b < n; ++b) {
    const ConstMatMap gb = maps.value().matrix(c, hw, static_cast<std::size_t>(b) * c * hw);
    MatMap mb = out.matrix(1, hw, static_cast<std::size_t>(b) * hw);
    mb.noalias() = h.value().matrix(1, c, static_cast<std::size_t>(b) * c) * gb;
    for (int p = 0; p < hw; ++p) mb(0, p) = stable_sigmoid(mb(0, p));
  }
  return Var::from_op(std::move(out), {maps, h}, [=](Node& self) {
    Tensor* gg = target(self, 0);
    Tensor* gh = target(self, 1);
    for (int b = 0; b < n; ++b) {
      Eigen::RowVectorXd s(hw);
      for (int p = 0; p < hw; ++p) {
        const std::size_t i = static_cast<std::size_t>(b) * hw + p;
        s[p] = self.grad[i] * self.value[i] * (1.0 - self.value[i]);
      }
      const std::size_t goff = static_cast<std::size_t>(b) * c * hw;
      if (gg) {
        gg->matrix(c, hw, goff).noalias() +=
            self.inputs[1]->value.matrix(1, c, static_cast<std::size_t>(b) * c).transpose() * s;
      }
      if (gh) {
        gh->matrix(1, c, static_cast<std::size_t>(b) * c).noalias() +=
            s * self.inputs[0]->value.matrix(c, hw, goff).transpose();
      }
    }
  });
}

Var apply_attention(const Var& maps, const Var& attention) {
  require_rank(maps, 4, "apply_attention maps");
  const int n = maps.dim(0), c = maps.dim(1), hh = maps.dim(2), ww = maps.dim(3);
  require_shape(attention, {n, hh, ww}, "apply_attention map");
  const std::size_t hw = static_cast<std::size_t>(hh) * ww;
  Tensor out(maps.shape());
  const double* g = maps.value().data();
  const double* m = attention.value().data();
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t o = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) out[o + p] = m[b * hw + p] * g[o + p] + g[o + p];
    }
  }
  return Var::from_op(std::move(out), {maps, attention}, [=](Node& self) {
    Tensor* gg = target(self, 0);
    Tensor* gm = target(self, 1);
    const double* gv = self.inputs[0]->value.data();
    const double* mv = self.inputs[1]->value.data();
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t o = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const double dy = self.grad[o + p];
          if (gg) (*gg)[o + p] += dy * (1.0 + mv[b * hw + p]);
          if (gm) (*gm)[b * hw + p] += dy * gv[o + p];
        }
      }
    }
  });
}

Var pair_weights(const Var& q) {
  require_rank(q, 2, "pair_weights qualities");
  const int n = q.dim(0), parts = q.dim(1);
  const double* qv = q.value().data();
  Tensor out({n, n, parts});
  std::vector<double> sums(static_cast<std::size_t>(n) * n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      double* w = out.data() + (static_cast<std::size_t>(a) * n + b) * parts;
      double s = 0.0;
      for (int k = 0; k < parts; ++k) {
        w[k] = qv[a * parts + k] * qv[b * parts + k];
        s += w[k];
      }
      s = std::max(s, std::numeric_limits<double>::min());
      for (int k = 0; k < parts; ++k) w[k] /= s;
      sums[static_cast<std::size_t>(a) * n + b] = s;
    }
  }
  return Var::from_op(std::move(out), {q}, [=, sums = std::move(sums)](Node& self) {
    Tensor* g = target(self, 0);
    if (!g) return;
    const double* qv = self.inputs[0]->value.data();
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) {
        const std::size_t o = (static_cast<std::size_t>(a) * n + b) * parts;
        double mix = 0.0;
        for (int k = 0; k < parts; ++k) mix += self.grad[o + k] * self.value[o + k];
        const double s = sums[static_cast<std::size_t>(a) * n + b];
        for (int k = 0; k < parts; ++k) {
          const double dp = (self.grad[o + k] - mix) / s;
          (*g)[a * parts + k] += dp * qv[b * parts + k];
          (*g)[b * parts + k] += dp * qv[a * parts + k];
        }
      }
    }
  });
}

Var pairwise_global(const Var& parts, const Var& weights) {
  require_rank(parts, 3, "pairwise_global parts");
  const int n = parts.dim(0), k = parts.dim(1), c = parts.dim(2);
  require_shape(weights, {n, n, k}, "pairwise_global weights");
  Tensor out({n, n, c});
  for (int a = 0; a < n; ++a) {
    out.matrix(n, c, static_cast<std::size_t>(a) * n * c).noalias() =
        weights.value().matrix(n, k, static_cast<std::size_t>(a) * n * k) *
        parts.value().matrix(k, c, static_cast<std::size_t>(a) * k * c);
  }
  return Var::from_op(std::move(out), {parts, weights}, [=](Node& self) {
    Tensor* gp = target(self, 0);
    Tensor* gw = target(self, 1);
    for (int a = 0; a < n; ++a) {
      const auto dh = self.grad.matrix(n, c, static_cast<std::size_t>(a) * n * c);
      const std::size_t poff = static_cast<std::size_t>(a) * k * c;
      const std::size_t woff = static_cast<std::size_t>(a) * n * k;
      if (gp) {
        gp->matrix(k, c, poff).noalias() +=
            self.inputs[1]->value.matrix(n, k, woff).transpose() * dh;
      }
      if (gw) {
        gw->matrix(n, k, woff).noalias() +=
            dh * self.inputs[0]->value.matrix(k, c, poff).transpose();
      }
    }
  });
}

Var pair_cosine_distances(const Var& h) {
  require_rank(h, 3, "pair_cosine_distances features");
  const int n = h.dim(0), c = h.dim(2);
  if (h.dim(1) != n) throw ConfigError("pair_cosine_distances: expected [N,N,C] input");
  auto row = [n, c](const Tensor& t, int a, int b) {
    return ConstVecMap(t.data() + (static_cast<std::size_t>(a) * n + b) * c, c);
  };
  Tensor out({n, n});
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      const auto u = row(h.value(), a, b);
      const auto v = row(h.value(), b, a);
      out[static_cast<std::size_t>(a) * n + b] = 1.0 - u.dot(v) / (u.norm() * v.norm() + kCosineEps);
    }
  }
  return Var::from_op(std::move(out), {h}, [=](Node& self) {
    Tensor* g = target(self, 0);
    if (!g) return;
    const Tensor& hv = self.inputs[0]->value;
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) {
        const double gd = self.grad[static_cast<std::size_t>(a) * n + b];
        if (gd == 0.0) continue;
        const auto u = row(hv, a, b);
        const auto v = row(hv, b, a);
        const double nu = u.norm(), nv = v.norm();
        const double den = nu * nv + kCosineEps;
        const double dot = u.dot(v);
        // D = 1 - dot/den
        VecMap du(g->data() + (static_cast<std::size_t>(a) * n + b) * c, c);
        VecMap dv(g->data() + (static_cast<std::size_t>(b) * n + a) * c, c);
        du -= gd * (v / den);
        dv -= gd * (u / den);
        if (nu > 0.0) du += gd * (dot * nv / (den * den * nu)) * u;
        if (nv > 0.0) dv += gd * (dot * nu / (den * den * nv)) * v;
      }
    }
  });
}

}  // namespace qpm::ops
