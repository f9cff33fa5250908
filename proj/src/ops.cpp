#include "dodnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace dodnet {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

std::int64_t spatial_size(const Shape& s, std::size_t from) {
  std::int64_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void mark_output(Tensor<T>& out) {
  out.set_requires_grad(true);
}

// Geometry shared by the im2col / col2im passes of one convolution.
struct ConvGeom {
  std::int64_t cin, d, h, w;
  std::int64_t kd, kh, kw;
  std::int64_t od, oh, ow;
  int sd, sh, sw;
  int pd, ph, pw;

  std::int64_t rows() const { return cin * kd * kh * kw; }
  std::int64_t plane() const { return oh * ow; }
  bool pointwise() const {
    return kd == 1 && kh == 1 && kw == 1 && sd == 1 && sh == 1 && sw == 1 && pd == 0 && ph == 0 &&
           pw == 0;
  }
};

// Output depth planes handled per GEMM so the column buffer stays bounded.
std::int64_t planes_per_chunk(const ConvGeom& g) {
  constexpr std::int64_t kBudget = std::int64_t{1} << 22;
  const std::int64_t per_plane = std::max<std::int64_t>(1, g.rows() * g.plane());
  return std::clamp<std::int64_t>(kBudget / per_plane, 1, g.od);
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, std::int64_t od0, std::int64_t od1, T* col) {
  const std::int64_t pc = (od1 - od0) * g.plane();
  std::int64_t r = 0;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.d * g.h * g.w;
    for (std::int64_t kz = 0; kz < g.kd; ++kz) {
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        for (std::int64_t kx = 0; kx < g.kw; ++kx, ++r) {
          T* dst = col + r * pc;
          for (std::int64_t oz = od0; oz < od1; ++oz) {
            const std::int64_t iz = oz * g.sd - g.pd + kz;
            for (std::int64_t oy = 0; oy < g.oh; ++oy, dst += g.ow) {
              const std::int64_t iy = oy * g.sh - g.ph + ky;
              if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                std::fill(dst, dst + g.ow, T{});
                continue;
              }
              const T* row = xc + (iz * g.h + iy) * g.w;
              for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                const std::int64_t ix = ox * g.sw - g.pw + kx;
                dst[ox] = (ix >= 0 && ix < g.w) ? row[ix] : T{};
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, std::int64_t od0, std::int64_t od1, T* dx) {
  const std::int64_t pc = (od1 - od0) * g.plane();
  std::int64_t r = 0;
  for (std::int64_t c = 0; c < g.cin; ++c) {
    T* xc = dx + c * g.d * g.h * g.w;
    for (std::int64_t kz = 0; kz < g.kd; ++kz) {
      for (std::int64_t ky = 0; ky < g.kh; ++ky) {
        for (std::int64_t kx = 0; kx < g.kw; ++kx, ++r) {
          const T* src = col + r * pc;
          for (std::int64_t oz = od0; oz < od1; ++oz) {
            const std::int64_t iz = oz * g.sd - g.pd + kz;
            for (std::int64_t oy = 0; oy < g.oh; ++oy, src += g.ow) {
              const std::int64_t iy = oy * g.sh - g.ph + ky;
              if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) continue;
              T* row = xc + (iz * g.h + iy) * g.w;
              for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                const std::int64_t ix = ox * g.sw - g.pw + kx;
                if (ix >= 0 && ix < g.w) row[ix] += src[ox];
              }
            }
          }
        }
      }
    }
  }
}

// Shared by group norm and weight standardization: given normalized values
// xhat = (x - mean) * inv_std over a block and upstream g, accumulates
// dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)).
template <typename T>
void normalize_backward_block(const T* xhat, const T* g, std::int64_t n, double inv_std, T* dx) {
  double mg = 0.0, mgx = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    mg += g[i];
    mgx += static_cast<double>(g[i]) * xhat[i];
  }
  mg /= static_cast<double>(n);
  mgx /= static_cast<double>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    dx[i] += static_cast<T>(inv_std * (g[i] - mg - xhat[i] * mgx));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv3d

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv3dOptions& opt) {
  require(input.defined() && input.rank() == 5,
          "conv3d: input must be [N,Cin,D,H,W], got " +
              (input.defined() ? to_string(input.shape()) : std::string("<undefined>")));
  require(weight.defined() && weight.rank() == 5,
          "conv3d: weight must be [Cout,Cin,kd,kh,kw]");
  require(input.dim(1) == weight.dim(1), "conv3d: input channels " + std::to_string(input.dim(1)) +
                                             " do not match weight " + to_string(weight.shape()));
  const std::int64_t cout = weight.dim(0);
  if (bias.defined()) {
    require(bias.size() == cout, "conv3d: bias " + to_string(bias.shape()) +
                                     " does not match output channels " + std::to_string(cout));
  }
  ConvGeom g{};
  g.cin = input.dim(1);
  g.d = input.dim(2);
  g.h = input.dim(3);
  g.w = input.dim(4);
  g.kd = weight.dim(2);
  g.kh = weight.dim(3);
  g.kw = weight.dim(4);
  g.sd = opt.stride[0];
  g.sh = opt.stride[1];
  g.sw = opt.stride[2];
  g.pd = opt.padding[0];
  g.ph = opt.padding[1];
  g.pw = opt.padding[2];
  require(g.sd >= 1 && g.sh >= 1 && g.sw >= 1, "conv3d: stride components must be >= 1");
  require(g.pd >= 0 && g.ph >= 0 && g.pw >= 0, "conv3d: padding must be non-negative");
  require(g.kd <= g.d + 2 * g.pd && g.kh <= g.h + 2 * g.ph && g.kw <= g.w + 2 * g.pw,
          "conv3d: kernel " + to_string(weight.shape()) + " exceeds padded input " +
              to_string(input.shape()));
  g.od = (g.d + 2 * g.pd - g.kd) / g.sd + 1;
  g.oh = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
  g.ow = (g.w + 2 * g.pw - g.kw) / g.sw + 1;

  const std::int64_t n_batch = input.dim(0);
  const std::int64_t in_vol = g.cin * g.d * g.h * g.w;
  const std::int64_t p = g.od * g.plane();
  const std::int64_t k = g.rows();
  Tensor<T> out(Shape{n_batch, cout, g.od, g.oh, g.ow});

  const T* x = input.data().data();
  const T* wp = weight.data().data();
  T* y = out.data().data();
  CMapR<T> wmat(wp, cout, k, Eigen::OuterStride<>(k));
  const std::int64_t chunk = planes_per_chunk(g);
  std::vector<T> col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(k * chunk * g.plane()));

  for (std::int64_t n = 0; n < n_batch; ++n) {
    const T* xn = x + n * in_vol;
    T* yn = y + n * cout * p;
    if (g.pointwise()) {
      CMapR<T> xm(xn, k, p, Eigen::OuterStride<>(p));
      MapR<T> ym(yn, cout, p, Eigen::OuterStride<>(p));
      ym.noalias() = wmat * xm;
    } else {
      for (std::int64_t od0 = 0; od0 < g.od; od0 += chunk) {
        const std::int64_t od1 = std::min(g.od, od0 + chunk);
        const std::int64_t pc = (od1 - od0) * g.plane();
        im2col(xn, g, od0, od1, col.data());
        CMapR<T> cm(col.data(), k, pc, Eigen::OuterStride<>(pc));
        MapR<T> ym(yn + od0 * g.plane(), cout, pc, Eigen::OuterStride<>(p));
        ym.noalias() = wmat * cm;
      }
    }
    if (bias.defined()) {
      for (std::int64_t c = 0; c < cout; ++c) {
        const T b = bias[c];
        T* row = yn + c * p;
        for (std::int64_t i = 0; i < p; ++i) row[i] += b;
      }
    }
  }

  if (detail::should_record<T>({&input, &weight, &bias})) {
    mark_output(out);
    auto xs = input.storage();
    auto ws = weight.storage();
    auto bs = bias.defined() ? bias.storage() : nullptr;
    active_tape<T>()->record("conv3d", out, [xs, ws, bs, g, n_batch, cout, p, k, chunk,
                                             in_vol](const std::vector<T>& gy) {
      T* dx = detail::grad_target(xs);
      T* dw = detail::grad_target(ws);
      T* db = detail::grad_target(bs);
      CMapR<T> wmat(ws->data.data(), cout, k, Eigen::OuterStride<>(k));
      std::vector<T> col, dcol;
      if (!g.pointwise()) {
        col.resize(static_cast<std::size_t>(k * chunk * g.plane()));
        dcol.resize(col.size());
      }
      MatR<T> dw_acc = MatR<T>::Zero(cout, k);
      for (std::int64_t n = 0; n < n_batch; ++n) {
        const T* xn = xs->data.data() + n * in_vol;
        const T* gn = gy.data() + n * cout * p;
        if (db) {
          for (std::int64_t c = 0; c < cout; ++c) {
            double acc = 0.0;
            const T* row = gn + c * p;
            for (std::int64_t i = 0; i < p; ++i) acc += row[i];
            db[c] += static_cast<T>(acc);
          }
        }
        if (g.pointwise()) {
          CMapR<T> gm(gn, cout, p, Eigen::OuterStride<>(p));
          CMapR<T> xm(xn, k, p, Eigen::OuterStride<>(p));
          if (dw) dw_acc.noalias() += gm * xm.transpose();
          if (dx) {
            MapR<T> dxm(dx + n * in_vol, k, p, Eigen::OuterStride<>(p));
            dxm.noalias() += wmat.transpose() * gm;
          }
          continue;
        }
        for (std::int64_t od0 = 0; od0 < g.od; od0 += chunk) {
          const std::int64_t od1 = std::min(g.od, od0 + chunk);
          const std::int64_t pc = (od1 - od0) * g.plane();
          CMapR<T> gm(gn + od0 * g.plane(), cout, pc, Eigen::OuterStride<>(p));
          if (dw) {
            im2col(xn, g, od0, od1, col.data());
            CMapR<T> cm(col.data(), k, pc, Eigen::OuterStride<>(pc));
            dw_acc.noalias() += gm * cm.transpose();
          }
          if (dx) {
            MapR<T> dcm(dcol.data(), k, pc, Eigen::OuterStride<>(pc));
            dcm.noalias() = wmat.transpose() * gm;
            col2im(dcol.data(), g, od0, od1, dx + n * in_vol);
          }
        }
      }
      if (dw) {
        const T* src = dw_acc.data();
        for (std::int64_t i = 0; i < cout * k; ++i) dw[i] += src[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pointwise_conv_per_sample

template <typename T>
Tensor<T> pointwise_conv_per_sample(const Tensor<T>& input, const Tensor<T>& weight,
                                    const Tensor<T>& bias) {
  require(input.defined() && input.rank() >= 2, "pointwise_conv_per_sample: input rank < 2");
  const std::int64_t n_batch = input.dim(0);
  const std::int64_t cin = input.dim(1);
  require(weight.defined() && weight.rank() == 3 && weight.dim(0) == n_batch &&
              weight.dim(2) == cin,
          "pointwise_conv_per_sample: weight " +
              (weight.defined() ? to_string(weight.shape()) : std::string("<undefined>")) +
              " incompatible with input " + to_string(input.shape()));
  const std::int64_t cout = weight.dim(1);
  require(bias.defined() && bias.rank() == 2 && bias.dim(0) == n_batch && bias.dim(1) == cout,
          "pointwise_conv_per_sample: bias must be [N,Cout]");
  const std::int64_t p = spatial_size(input.shape(), 2);
  Shape out_shape = input.shape();
  out_shape[1] = cout;
  Tensor<T> out(out_shape);
  for (std::int64_t n = 0; n < n_batch; ++n) {
    CMapR<T> wm(weight.data().data() + n * cout * cin, cout, cin, Eigen::OuterStride<>(cin));
    CMapR<T> xm(input.data().data() + n * cin * p, cin, p, Eigen::OuterStride<>(p));
    MapR<T> ym(out.data().data() + n * cout * p, cout, p, Eigen::OuterStride<>(p));
    ym.noalias() = wm * xm;
    for (std::int64_t c = 0; c < cout; ++c) {
      const T b = bias[n * cout + c];
      T* row = out.data().data() + (n * cout + c) * p;
      for (std::int64_t i = 0; i < p; ++i) row[i] += b;
    }
  }
  if (detail::should_record<T>({&input, &weight, &bias})) {
    mark_output(out);
    auto xs = input.storage();
    auto ws = weight.storage();
    auto bs = bias.storage();
    active_tape<T>()->record("pointwise_conv_per_sample", out,
                             [xs, ws, bs, n_batch, cin, cout, p](const std::vector<T>& gy) {
      T* dx = detail::grad_target(xs);
      T* dw = detail::grad_target(ws);
      T* db = detail::grad_target(bs);
      for (std::int64_t n = 0; n < n_batch; ++n) {
        CMapR<T> gm(gy.data() + n * cout * p, cout, p, Eigen::OuterStride<>(p));
        if (dw) {
          CMapR<T> xm(xs->data.data() + n * cin * p, cin, p, Eigen::OuterStride<>(p));
          MapR<T> dwm(dw + n * cout * cin, cout, cin, Eigen::OuterStride<>(cin));
          dwm.noalias() += gm * xm.transpose();
        }
        if (dx) {
          CMapR<T> wm(ws->data.data() + n * cout * cin, cout, cin, Eigen::OuterStride<>(cin));
          MapR<T> dxm(dx + n * cin * p, cin, p, Eigen::OuterStride<>(p));
          dxm.noalias() += wm.transpose() * gm;
        }
        if (db) {
          for (std::int64_t c = 0; c < cout; ++c) {
            double acc = 0.0;
            const T* row = gy.data() + (n * cout + c) * p;
            for (std::int64_t i = 0; i < p; ++i) acc += row[i];
            db[n * cout + c] += static_cast<T>(acc);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// group_norm

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  require(x.defined() && x.rank() >= 2, "group_norm: input rank must be >= 2");
  const std::int64_t n_batch = x.dim(0);
  const std::int64_t channels = x.dim(1);
  require(groups >= 1 && channels % groups == 0,
          "group_norm: " + std::to_string(channels) + " channels not divisible by " +
              std::to_string(groups) + " groups");
  require(!gamma.defined() || gamma.size() == channels, "group_norm: gamma must be [C]");
  require(!beta.defined() || beta.size() == channels, "group_norm: beta must be [C]");
  const std::int64_t s = spatial_size(x.shape(), 2);
  const std::int64_t cpg = channels / groups;
  const std::int64_t block = cpg * s;

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.data().size());
  std::vector<double> inv_std(static_cast<std::size_t>(n_batch * groups));
  const T* xp = x.data().data();
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const std::int64_t off = (n * channels + gi * cpg) * s;
      double mean = 0.0;
      for (std::int64_t i = 0; i < block; ++i) mean += xp[off + i];
      mean /= static_cast<double>(block);
      double var = 0.0;
      for (std::int64_t i = 0; i < block; ++i) {
        const double d = xp[off + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(block);
      const double r = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n * groups + gi)] = r;
      for (std::int64_t i = 0; i < block; ++i) {
        xhat[static_cast<std::size_t>(off + i)] = static_cast<T>((xp[off + i] - mean) * r);
      }
    }
    for (std::int64_t c = 0; c < channels; ++c) {
      const T ga = gamma.defined() ? gamma[c] : T{1};
      const T be = beta.defined() ? beta[c] : T{0};
      const std::int64_t off = (n * channels + c) * s;
      for (std::int64_t i = 0; i < s; ++i) out[off + i] = xhat[static_cast<std::size_t>(off + i)] * ga + be;
    }
  }

  if (detail::should_record<T>({&x, &gamma, &beta})) {
    mark_output(out);
    auto xs = x.storage();
    auto gs = gamma.defined() ? gamma.storage() : nullptr;
    auto bs = beta.defined() ? beta.storage() : nullptr;
    active_tape<T>()->record(
        "group_norm", out,
        [xs, gs, bs, xhat = std::move(xhat), inv_std = std::move(inv_std), n_batch, channels,
         groups, s, cpg, block](const std::vector<T>& gy) {
          T* dx = detail::grad_target(xs);
          T* dg = detail::grad_target(gs);
          T* db = detail::grad_target(bs);
          for (std::int64_t n = 0; n < n_batch; ++n) {
            for (std::int64_t c = 0; c < channels; ++c) {
              const std::int64_t off = (n * channels + c) * s;
              if (dg) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < s; ++i) acc += static_cast<double>(gy[off + i]) * xhat[off + i];
                dg[c] += static_cast<T>(acc);
              }
              if (db) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < s; ++i) acc += gy[off + i];
                db[c] += static_cast<T>(acc);
              }
            }
            if (!dx) continue;
            std::vector<T> gh(static_cast<std::size_t>(block));
            for (std::int64_t gi = 0; gi < groups; ++gi) {
              const std::int64_t off = (n * channels + gi * cpg) * s;
              for (std::int64_t cc = 0; cc < cpg; ++cc) {
                const T ga = gs ? gs->data[static_cast<std::size_t>(gi * cpg + cc)] : T{1};
                for (std::int64_t i = 0; i < s; ++i) {
                  gh[static_cast<std::size_t>(cc * s + i)] = gy[off + cc * s + i] * ga;
                }
              }
              normalize_backward_block(xhat.data() + off, gh.data(), block,
                                       inv_std[static_cast<std::size_t>(n * groups + gi)],
                                       dx + off);
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// weight_standardize

template <typename T>
Tensor<T> weight_standardize(const Tensor<T>& weight, double eps) {
  require(weight.defined() && weight.rank() >= 1 && weight.dim(0) > 0,
          "weight_standardize: weight must have an output-channel axis");
  const std::int64_t cout = weight.dim(0);
  const std::int64_t fan = weight.size() / cout;
  Tensor<T> out(weight.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(cout));
  const T* w = weight.data().data();
  for (std::int64_t o = 0; o < cout; ++o) {
    const T* row = w + o * fan;
    double mean = 0.0;
    for (std::int64_t i = 0; i < fan; ++i) mean += row[i];
    mean /= static_cast<double>(fan);
    double var = 0.0;
    for (std::int64_t i = 0; i < fan; ++i) {
      const double d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(fan);
    const double r = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(o)] = r;
    for (std::int64_t i = 0; i < fan; ++i) out[o * fan + i] = static_cast<T>((row[i] - mean) * r);
  }
  if (detail::should_record<T>({&weight})) {
    mark_output(out);
    auto ws = weight.storage();
    auto os = out.storage();
    active_tape<T>()->record("weight_standardize", out,
                             [ws, os, inv_std = std::move(inv_std), cout, fan](const std::vector<T>& gy) {
      T* dw = detail::grad_target(ws);
      if (!dw) return;
      for (std::int64_t o = 0; o < cout; ++o) {
        normalize_backward_block(os->data.data() + o * fan, gy.data() + o * fan, fan,
                                 inv_std[static_cast<std::size_t>(o)], dw + o * fan);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// upsample_trilinear2x

namespace detail {

std::vector<UpsampleTap> upsample_taps(std::int64_t in_extent) {
  std::vector<UpsampleTap> taps(static_cast<std::size_t>(2 * in_extent));
  for (std::int64_t o = 0; o < 2 * in_extent; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    lo = std::min(lo, in_extent - 1);
    const std::int64_t hi = std::min(lo + 1, in_extent - 1);
    taps[static_cast<std::size_t>(o)] = UpsampleTap{lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_trilinear2x(const Tensor<T>& x) {
  require(x.defined() && x.rank() == 5, "upsample_trilinear2x: input must be [N,C,D,H,W]");
  const std::int64_t nc = x.dim(0) * x.dim(1);
  const std::int64_t d = x.dim(2), h = x.dim(3), w = x.dim(4);
  const auto tz = detail::upsample_taps(d);
  const auto ty = detail::upsample_taps(h);
  const auto tx = detail::upsample_taps(w);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), 2 * d, 2 * h, 2 * w});
  const std::int64_t in_vol = d * h * w;
  const std::int64_t out_vol = 8 * in_vol;
  const T* xp = x.data().data();
  T* yp = out.data().data();
  for (std::int64_t b = 0; b < nc; ++b) {
    const T* src = xp + b * in_vol;
    T* dst = yp + b * out_vol;
    for (std::int64_t oz = 0; oz < 2 * d; ++oz) {
      const auto& az = tz[static_cast<std::size_t>(oz)];
      for (std::int64_t oy = 0; oy < 2 * h; ++oy) {
        const auto& ay = ty[static_cast<std::size_t>(oy)];
        const T* r00 = src + (az.lo * h + ay.lo) * w;
        const T* r01 = src + (az.lo * h + ay.hi) * w;
        const T* r10 = src + (az.hi * h + ay.lo) * w;
        const T* r11 = src + (az.hi * h + ay.hi) * w;
        const T wz1 = static_cast<T>(az.w), wz0 = T{1} - wz1;
        const T wy1 = static_cast<T>(ay.w), wy0 = T{1} - wy1;
        T* row = dst + (oz * 2 * h + oy) * 2 * w;
        for (std::int64_t ox = 0; ox < 2 * w; ++ox) {
          const auto& ax = tx[static_cast<std::size_t>(ox)];
          const T wx1 = static_cast<T>(ax.w), wx0 = T{1} - wx1;
          const T v0 = wy0 * (wx0 * r00[ax.lo] + wx1 * r00[ax.hi]) +
                       wy1 * (wx0 * r01[ax.lo] + wx1 * r01[ax.hi]);
          const T v1 = wy0 * (wx0 * r10[ax.lo] + wx1 * r10[ax.hi]) +
                       wy1 * (wx0 * r11[ax.lo] + wx1 * r11[ax.hi]);
          row[ox] = wz0 * v0 + wz1 * v1;
        }
      }
    }
  }
  if (detail::should_record<T>({&x})) {
    mark_output(out);
    auto xs = x.storage();
    active_tape<T>()->record("upsample_trilinear2x", out,
                             [xs, tz, ty, tx, nc, d, h, w](const std::vector<T>& gy) {
      T* dx = detail::grad_target(xs);
      if (!dx) return;
      const std::int64_t in_vol = d * h * w;
      for (std::int64_t b = 0; b < nc; ++b) {
        T* dst = dx + b * in_vol;
        const T* src = gy.data() + b * 8 * in_vol;
        for (std::int64_t oz = 0; oz < 2 * d; ++oz) {
          const auto& az = tz[static_cast<std::size_t>(oz)];
          for (std::int64_t oy = 0; oy < 2 * h; ++oy) {
            const auto& ay = ty[static_cast<std::size_t>(oy)];
            T* r00 = dst + (az.lo * h + ay.lo) * w;
            T* r01 = dst + (az.lo * h + ay.hi) * w;
            T* r10 = dst + (az.hi * h + ay.lo) * w;
            T* r11 = dst + (az.hi * h + ay.hi) * w;
            const T wz1 = static_cast<T>(az.w), wz0 = T{1} - wz1;
            const T wy1 = static_cast<T>(ay.w), wy0 = T{1} - wy1;
            const T* row = src + (oz * 2 * h + oy) * 2 * w;
            for (std::int64_t ox = 0; ox < 2 * w; ++ox) {
              const auto& ax = tx[static_cast<std::size_t>(ox)];
              const T wx1 = static_cast<T>(ax.w), wx0 = T{1} - wx1;
              const T gv = row[ox];
              r00[ax.lo] += wz0 * wy0 * wx0 * gv;
              r00[ax.hi] += wz0 * wy0 * wx1 * gv;
              r01[ax.lo] += wz0 * wy1 * wx0 * gv;
              r01[ax.hi] += wz0 * wy1 * wx1 * gv;
              r10[ax.lo] += wz1 * wy0 * wx0 * gv;
              r10[ax.hi] += wz1 * wy0 * wx1 * gv;
              r11[ax.lo] += wz1 * wy1 * wx0 * gv;
              r11[ax.hi] += wz1 * wy1 * wx1 * gv;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// global_avg_pool

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require(x.defined() && x.rank() >= 3, "global_avg_pool: input must be [N,C,spatial...]");
  const std::int64_t nc = x.dim(0) * x.dim(1);
  const std::int64_t s = spatial_size(x.shape(), 2);
  require(s >= 1, "global_avg_pool: empty spatial extent");
  Tensor<T> out(Shape{x.dim(0), x.dim(1)});
  for (std::int64_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    const T* row = x.data().data() + i * s;
    for (std::int64_t j = 0; j < s; ++j) acc += row[j];
    out[i] = static_cast<T>(acc / static_cast<double>(s));
  }
  if (detail::should_record<T>({&x})) {
    mark_output(out);
    auto xs = x.storage();
    active_tape<T>()->record("global_avg_pool", out, [xs, nc, s](const std::vector<T>& gy) {
      T* dx = detail::grad_target(xs);
      if (!dx) return;
      const T inv = static_cast<T>(1.0 / static_cast<double>(s));
      for (std::int64_t i = 0; i < nc; ++i) {
        const T gv = gy[static_cast<std::size_t>(i)] * inv;
        for (std::int64_t j = 0; j < s; ++j) dx[i * s + j] += gv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] < T{0} ? T{0} : in[i];  // NaN passes through
  if (detail::should_record<T>({&x})) {
    mark_output(out);
    auto xs = x.storage();
    active_tape<T>()->record("relu", out, [xs](const std::vector<T>& gy) {
      T* dx = detail::grad_target(xs);
      if (!dx) return;
      const auto& v = xs->data;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] > T{0}) dx[i] += gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    if (v >= T{0}) {
      o[i] = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      o[i] = e / (T{1} + e);
    }
  }
  if (detail::should_record<T>({&x})) {
    mark_output(out);
    auto xs = x.storage();
    auto os = out.storage();
    active_tape<T>()->record("sigmoid", out, [xs, os](const std::vector<T>& gy) {
      T* dx = detail::grad_target(xs);
      if (!dx) return;
      const auto& s = os->data;
      for (std::size_t i = 0; i < s.size(); ++i) dx[i] += gy[i] * s[i] * (T{1} - s[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          "add: shape mismatch " + (a.defined() ? to_string(a.shape()) : std::string("?")) +
              " vs " + (b.defined() ? to_string(b.shape()) : std::string("?")));
  Tensor<T> out(a.shape());
  const auto pa = a.data();
  const auto pb = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) o[i] = pa[i] + pb[i];
  if (detail::should_record<T>({&a, &b})) {
    mark_output(out);
    auto as = a.storage();
    auto bs = b.storage();
    active_tape<T>()->record("add", out, [as, bs](const std::vector<T>& gy) {
      if (T* da = detail::grad_target(as)) {
        for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i];
      }
      if (T* db = detail::grad_target(bs)) {
        for (std::size_t i = 0; i < gy.size(); ++i) db[i] += gy[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.defined() && b.defined() && a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  if (detail::should_record<T>({&a, &b})) {
    mark_output(out);
    auto as = a.storage();
    auto bs = b.storage();
    active_tape<T>()->record("mul", out, [as, bs](const std::vector<T>& gy) {
      if (T* da = detail::grad_target(as)) {
        for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i] * bs->data[i];
      }
      if (T* db = detail::grad_target(bs)) {
        for (std::size_t i = 0; i < gy.size(); ++i) db[i] += gy[i] * as->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  if (detail::should_record<T>({&x})) {
    mark_output(out);
    auto xs = x.storage();
    active_tape<T>()->record("scale", out, [xs, factor](const std::vector<T>& gy) {
      if (T* dx = detail::grad_target(xs)) {
        for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += gy[i] * factor;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (const T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (detail::should_record<T>({&x})) {
    mark_output(out);
    auto xs = x.storage();
    active_tape<T>()->record("sum", out, [xs](const std::vector<T>& gy) {
      if (T* dx = detail::grad_target(xs)) {
        for (std::size_t i = 0; i < xs->data.size(); ++i) dx[i] += gy[0];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structural

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  require(axis < ref.size(), "concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& t : parts) {
    require(t.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis) {
        require(t.dim(i) == ref[i], "concat: extent mismatch " + to_string(t.shape()) + " vs " +
                                        to_string(ref) + " on axis " + std::to_string(i));
      }
    }
    out_shape[axis] += t.dim(axis);
  }
  std::int64_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  const std::int64_t inner = spatial_size(ref, axis + 1);
  const std::int64_t out_row = out_shape[axis] * inner;
  Tensor<T> out(out_shape);
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& t : parts) {
    offsets.push_back(off);
    const std::int64_t row = t.dim(axis) * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(t.data().data() + o * row, row, out.data().data() + o * out_row + off);
    }
    off += row;
  }
  bool record = false;
  for (const auto& t : parts) record = record || detail::should_record<T>({&t});
  if (record) {
    mark_output(out);
    std::vector<std::shared_ptr<TensorStorage<T>>> ss;
    std::vector<std::int64_t> rows;
    for (const auto& t : parts) {
      ss.push_back(t.storage());
      rows.push_back(t.dim(axis) * inner);
    }
    active_tape<T>()->record("concat", out, [ss, rows, offsets, outer, out_row](const std::vector<T>& gy) {
      for (std::size_t k = 0; k < ss.size(); ++k) {
        T* dx = detail::grad_target(ss[k]);
        if (!dx) continue;
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* src = gy.data() + o * out_row + offsets[k];
          T* dst = dx + o * rows[k];
          for (std::int64_t i = 0; i < rows[k]; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::int64_t start, std::int64_t length) {
  require(axis < x.rank(), "narrow: axis out of range");
  require(start >= 0 && length >= 0 && start + length <= x.dim(axis),
          "narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
              ") outside extent " + std::to_string(x.dim(axis)));
  std::int64_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  const std::int64_t inner = spatial_size(x.shape(), axis + 1);
  const std::int64_t in_row = x.dim(axis) * inner;
  const std::int64_t row = length * inner;
  const std::int64_t off = start * inner;
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + off, row, out.data().data() + o * row);
  }
  if (detail::should_record<T>({&x})) {
    mark_output(out);
    auto xs = x.storage();
    active_tape<T>()->record("narrow", out, [xs, outer, in_row, row, off](const std::vector<T>& gy) {
      T* dx = detail::grad_target(xs);
      if (!dx) return;
      for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = gy.data() + o * row;
        T* dst = dx + o * in_row + off;
        for (std::int64_t i = 0; i < row; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.size(),
          "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (detail::should_record<T>({&x})) {
    mark_output(out);
    auto xs = x.storage();
    active_tape<T>()->record("reshape", out, [xs](const std::vector<T>& gy) {
      if (T* dx = detail::grad_target(xs)) {
        for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += gy[i];
      }
    });
  }
  return out;
}

#define DODNET_INSTANTIATE_OPS(T)                                                                 \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                            const Conv3dOptions&);                                                \
  template Tensor<T> pointwise_conv_per_sample(const Tensor<T>&, const Tensor<T>&,                \
                                               const Tensor<T>&);                                 \
  template Tensor<T> group_norm(const Tensor<T>&, int, const Tensor<T>&, const Tensor<T>&,        \
                                double);                                                          \
  template Tensor<T> weight_standardize(const Tensor<T>&, double);                                \
  template Tensor<T> upsample_trilinear2x(const Tensor<T>&);                                      \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                           \
  template Tensor<T> relu(const Tensor<T>&);                                                      \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                          \
  template Tensor<T> narrow(const Tensor<T>&, std::size_t, std::int64_t, std::int64_t);           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);

DODNET_INSTANTIATE_OPS(float)
DODNET_INSTANTIATE_OPS(double)

}  // namespace dodnet
