#pragma once

// Shared trainable building blocks: affine layers and small MLPs applied
// row-wise over the trailing axis.

#include <cmath>
#include <string>
#include <vector>

#include "handdagt/numcore.hpp"

namespace hdagt {

template <typename T>
struct Linear {
  Param<T> w;  // [in, out]
  Param<T> b;  // [out]
  bool has_bias = true;

  void init(const std::string& name, int in, int out, RandomStream& rng,
            bool bias = true) {
    const double bound = std::sqrt(6.0 / in);
    w.init_uniform(name + ".w", {in, out}, bound, rng);
    has_bias = bias;
    if (bias) {
      b.init_uniform(name + ".b", {out}, 1.0 / std::sqrt(double(in)), rng);
    }
  }

  // x: [..., in] -> [..., out]
  Var<T> operator()(Var<T> x) const {
    Tape<T>& t = *x.tape;
    const Shape s = x.shape();  // copy: emitting nodes may relocate the tape
    const int in = s.back();
    const int out = w.shape[1];
    const std::int64_t rows = numel(s) / in;
    Var<T> flat = reshape(x, {static_cast<int>(rows), in});
    Var<T> y = matmul(flat, t.leaf(const_cast<Param<T>&>(w)));
    if (has_bias) y = add(y, t.leaf(const_cast<Param<T>&>(b)));
    Shape out_shape = s;
    out_shape.back() = out;
    return reshape(y, out_shape);
  }

  void collect(ParamList<T>& out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
  }

  std::int64_t param_count() const {
    return w.size() + (has_bias ? b.size() : 0);
  }
};

// Stack of affine layers with ReLU between them (none after the last).
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  void init(const std::string& name, int in, const std::vector<int>& widths,
            RandomStream& rng) {
    layers.clear();
    int d = in;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      Linear<T> l;
      l.init(name + ".l" + std::to_string(i), d, widths[i], rng);
      d = widths[i];
      layers.push_back(std::move(l));
    }
  }

  Var<T> operator()(Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }

  int out_width() const { return layers.back().w.shape[1]; }

  void collect(ParamList<T>& out) {
    for (auto& l : layers) l.collect(out);
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }
};

}  // namespace hdagt
