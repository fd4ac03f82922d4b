#pragma once

// 2D feature path: a small convolutional encoder over the depth crop, a
// pinhole + bilinear projection of the resulting feature map onto the 3D
// super points, and the per-point feature fusion. Feature maps are stored
// H x W x C row-major so conv and sampling outputs feed matmul directly.

#include <vector>

#include "handdagt/camera.hpp"
#include "handdagt/layers.hpp"
#include "handdagt/numcore.hpp"

namespace hdagt {

// ------------------------------------------------------------ conv pieces

// Unfolds kxk patches (zero padded) into rows ordered (ky, kx, c), one row
// per output pixel.
template <typename T>
Var<T> im2col(Var<T> x, int ksize, int stride, int pad) {
  Tape<T>& t = *x.tape;
  const Shape s = x.shape();
  if (s.size() != 3) {
    throw DimensionError("im2col: expected HxWxC input, got " + shape_str(s));
  }
  const int h = s[0], w = s[1], c = s[2];
  const int oh = (h + 2 * pad - ksize) / stride + 1;
  const int ow = (w + 2 * pad - ksize) / stride + 1;
  if (oh < 1 || ow < 1) {
    throw DimensionError("im2col: kernel does not fit input " + shape_str(s));
  }
  const int row_w = ksize * ksize * c;
  const std::vector<T>& v = t.value(x.id);
  std::vector<T> out(static_cast<std::size_t>(oh) * ow * row_w, T(0));
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* row = out.data() + (static_cast<std::size_t>(oy) * ow + ox) * row_w;
      for (int ky = 0; ky < ksize; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < ksize; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          std::memcpy(row + (ky * ksize + kx) * c,
                      v.data() + (static_cast<std::size_t>(iy) * w + ix) * c,
                      sizeof(T) * static_cast<std::size_t>(c));
        }
      }
    }
  }
  const int xid = x.id;
  int id = t.emit(
      {oh * ow, row_w}, std::move(out), t.needs_grad(x.id),
      [xid, h, w, c, oh, ow, ksize, stride, pad, row_w](Tape<T>& tp, int self) {
        T* dx = tp.grad_data(xid);
        if (!dx) return;
        const T* dy = tp.grad(self).data();
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const T* row =
                dy + (static_cast<std::size_t>(oy) * ow + ox) * row_w;
            for (int ky = 0; ky < ksize; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < ksize; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= w) continue;
                const T* src = row + (ky * ksize + kx) * c;
                T* dst = dx + (static_cast<std::size_t>(iy) * w + ix) * c;
                for (int i = 0; i < c; ++i) dst[i] += src[i];
              }
            }
          }
        }
      });
  return {&t, id};
}

// Nearest-neighbour 2x upsampling; backward folds each 2x2 block.
template <typename T>
Var<T> upsample2(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Shape s = x.shape();
  if (s.size() != 3) {
    throw DimensionError("upsample2: expected HxWxC input, got " +
                         shape_str(s));
  }
  const int h = s[0], w = s[1], c = s[2];
  const std::vector<T>& v = t.value(x.id);
  std::vector<T> out(static_cast<std::size_t>(4) * h * w * c);
  for (int y = 0; y < 2 * h; ++y) {
    for (int x2 = 0; x2 < 2 * w; ++x2) {
      std::memcpy(
          out.data() + (static_cast<std::size_t>(y) * 2 * w + x2) * c,
          v.data() + (static_cast<std::size_t>(y / 2) * w + x2 / 2) * c,
          sizeof(T) * static_cast<std::size_t>(c));
    }
  }
  const int xid = x.id;
  int id = t.emit({2 * h, 2 * w, c}, std::move(out), t.needs_grad(x.id),
                  [xid, h, w, c](Tape<T>& tp, int self) {
                    T* dx = tp.grad_data(xid);
                    if (!dx) return;
                    const T* dy = tp.grad(self).data();
                    for (int y = 0; y < 2 * h; ++y) {
                      for (int x2 = 0; x2 < 2 * w; ++x2) {
                        const T* src =
                            dy + (static_cast<std::size_t>(y) * 2 * w + x2) * c;
                        T* dst =
                            dx +
                            (static_cast<std::size_t>(y / 2) * w + x2 / 2) * c;
                        for (int i = 0; i < c; ++i) dst[i] += src[i];
                      }
                    }
                  });
  return {&t, id};
}

template <typename T>
struct Conv2d {
  Param<T> w;  // [k*k*cin, cout]
  Param<T> b;  // [cout]
  int ksize = 3;
  int stride = 1;
  int pad = 1;

  void init(const std::string& name, int cin, int cout, int k, int s,
            RandomStream& rng) {
    ksize = k;
    stride = s;
    pad = k / 2;
    const double bound = std::sqrt(6.0 / (k * k * cin));
    w.init_uniform(name + ".w", {k * k * cin, cout}, bound, rng);
    b.init_uniform(name + ".b", {cout}, bound, rng);
  }

  Var<T> operator()(Var<T> x) const {
    Tape<T>& t = *x.tape;
    const Shape s = x.shape();
    const int oh = (s[0] + 2 * pad - ksize) / stride + 1;
    const int ow = (s[1] + 2 * pad - ksize) / stride + 1;
    Var<T> col = im2col(x, ksize, stride, pad);
    Var<T> y = add(matmul(col, t.leaf(const_cast<Param<T>&>(w))),
                   t.leaf(const_cast<Param<T>&>(b)));
    return reshape(y, {oh, ow, w.shape[1]});
  }

  void collect(ParamList<T>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// ------------------------------------------------------------ the encoder

// Four conv stages (two stride-2) followed by a nearest x2 upsampler and a
// 1x1 mix, producing an (H/2)x(W/2)xd_2d map from an HxWx1 depth crop.
template <typename T>
struct DepthEncoder {
  Conv2d<T> conv1, conv2, conv3, conv4;
  Linear<T> mix;  // 1x1 conv over channels
  int h = 128, w = 128, d2d = 64;

  void init(const std::string& name, int H, int W, int d_2d, int c1, int c2,
            int c3, RandomStream& rng) {
    h = H;
    w = W;
    d2d = d_2d;
    conv1.init(name + ".conv1", 1, c1, 3, 2, rng);
    conv2.init(name + ".conv2", c1, c2, 3, 2, rng);
    conv3.init(name + ".conv3", c2, c3, 3, 1, rng);
    conv4.init(name + ".conv4", c3, d_2d, 3, 1, rng);
    mix.init(name + ".mix", d_2d, d_2d, rng);
  }

  // img: H x W x 1 -> H/2 x W/2 x d2d
  Var<T> operator()(Var<T> img) const {
    const Shape s = img.shape();
    if (s.size() != 3 || s[0] != h || s[1] != w || s[2] != 1) {
      throw DimensionError("encode_2d: expected " + shape_str({h, w, 1}) +
                           " input, got " + shape_str(s));
    }
    Var<T> x = relu(conv1(img));
    x = relu(conv2(x));
    x = relu(conv3(x));
    x = relu(conv4(x));
    x = upsample2(x);
    return mix(x);
  }

  void collect(ParamList<T>& out) {
    conv1.collect(out);
    conv2.collect(out);
    conv3.collect(out);
    conv4.collect(out);
    mix.collect(out);
  }
};

// -------------------------------------------------------------- projection

struct SampleCoord {
  double x = 0.0;  // feature-map coordinates
  double y = 0.0;
  bool in_bounds = false;
};

// Pinhole-projects normalized 3D points into the feature map plane. Points
// behind the camera or outside the map are flagged out of bounds.
template <typename T>
std::vector<SampleCoord> project_to_feature_map(
    const std::vector<T>& points_norm, int m, const CropTransform& crop,
    const CameraIntrinsics& cam, int img_h, int img_w, int fm_h, int fm_w) {
  std::vector<SampleCoord> out(m);
  const double sx = static_cast<double>(fm_w) / img_w;
  const double sy = static_cast<double>(fm_h) / img_h;
  for (int i = 0; i < m; ++i) {
    double p[3] = {static_cast<double>(points_norm[3 * i]),
                   static_cast<double>(points_norm[3 * i + 1]),
                   static_cast<double>(points_norm[3 * i + 2])};
    const auto c = crop.to_camera(p);
    if (c[2] <= 0.0) continue;  // behind the camera: stays out of bounds
    double u, v;
    project_pixel(cam, c[0], c[1], c[2], u, v);
    SampleCoord& sc = out[i];
    sc.x = u * sx;
    sc.y = v * sy;
    sc.in_bounds = sc.x >= 0.0 && sc.x <= fm_w - 1 && sc.y >= 0.0 &&
                   sc.y <= fm_h - 1;
  }
  return out;
}

// Bilinear feature lookup, differentiable w.r.t. the feature map only; the
// sample locations are detached. Out-of-bounds samples yield zero rows.
template <typename T>
Var<T> bilinear_sample(Var<T> fm, const std::vector<SampleCoord>& coords) {
  Tape<T>& t = *fm.tape;
  const Shape s = fm.shape();
  if (s.size() != 3) {
    throw DimensionError("bilinear_sample: expected HxWxC map, got " +
                         shape_str(s));
  }
  const int h = s[0], w = s[1], c = s[2];
  const int m = static_cast<int>(coords.size());

  struct Tap {
    std::int64_t pix;
    T weight;
  };
  std::vector<std::vector<Tap>> taps(m);
  for (int i = 0; i < m; ++i) {
    const SampleCoord& sc = coords[i];
    if (!sc.in_bounds) continue;
    const int x0 = std::min(static_cast<int>(sc.x), w - 1);
    const int y0 = std::min(static_cast<int>(sc.y), h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const T fx = static_cast<T>(sc.x - x0);
    const T fy = static_cast<T>(sc.y - y0);
    taps[i] = {{std::int64_t(y0) * w + x0, (1 - fx) * (1 - fy)},
               {std::int64_t(y0) * w + x1, fx * (1 - fy)},
               {std::int64_t(y1) * w + x0, (1 - fx) * fy},
               {std::int64_t(y1) * w + x1, fx * fy}};
  }

  const std::vector<T>& v = t.value(fm.id);
  std::vector<T> out(static_cast<std::size_t>(m) * c, T(0));
  for (int i = 0; i < m; ++i) {
    T* row = out.data() + static_cast<std::size_t>(i) * c;
    for (const Tap& tap : taps[i]) {
      const T* src = v.data() + tap.pix * c;
      for (int a = 0; a < c; ++a) row[a] += tap.weight * src[a];
    }
  }
  const int fid = fm.id;
  int id = t.emit({m, c}, std::move(out), t.needs_grad(fm.id),
                  [fid, c, taps = std::move(taps)](Tape<T>& tp, int self) {
                    T* dfm = tp.grad_data(fid);
                    if (!dfm) return;
                    const T* dy = tp.grad(self).data();
                    for (std::size_t i = 0; i < taps.size(); ++i) {
                      const T* row = dy + i * c;
                      for (const Tap& tap : taps[i]) {
                        T* dst = dfm + tap.pix * c;
                        for (int a = 0; a < c; ++a) {
                          dst[a] += tap.weight * row[a];
                        }
                      }
                    }
                  });
  return {&t, id};
}

// Concatenates 3D and projected 2D features per super point.
template <typename T>
Var<T> fuse_features(Var<T> f3d, Var<T> f2d3d) {
  const Shape& a = f3d.shape();
  const Shape& b = f2d3d.shape();
  if (a.size() != 2 || b.size() != 2 || a[0] != b[0]) {
    throw DimensionError("fuse_features: row counts differ, " + shape_str(a) +
                         " vs " + shape_str(b));
  }
  return concat<T>({f3d, f2d3d}, 1);
}

}  // namespace hdagt
