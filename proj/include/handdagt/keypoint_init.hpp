#pragma once

// Initial keypoint embeddings and patch positions: a two-stage set-conv
// global encoder, three bias-induced layers applied to the replicated global
// vector, and a linear projection of embeddings into 3D.

#include <string>
#include <vector>

#include "handdagt/pointops.hpp"

namespace hdagt {

// Affine layer with a shared weight and one bias row per keypoint; the bias
// acts as a learnable positional embedding.
template <typename T>
struct BiasInducedLayer {
  Param<T> w;       // [in, out]
  Param<T> biases;  // [J, out]

  void init(const std::string& name, int in, int out, int keypoints,
            RandomStream& rng) {
    const double bound = std::sqrt(6.0 / in);
    w.init_uniform(name + ".w", {in, out}, bound, rng);
    // small per-keypoint noise so keypoint symmetry is broken at step 0
    biases.init_uniform(name + ".biases", {keypoints, out}, 0.01, rng);
  }

  // x: J x in -> J x out; bias row j applies only to keypoint j
  Var<T> operator()(Var<T> x) const {
    const Shape& s = x.shape();
    if (s.size() != 2 || s[0] != biases.shape[0]) {
      throw DimensionError("bias_induced_layer: expected " +
                           std::to_string(biases.shape[0]) + " keypoint rows, got " +
                           shape_str(s));
    }
    Tape<T>& t = *x.tape;
    return add(matmul(x, t.leaf(const_cast<Param<T>&>(w))),
               t.leaf(const_cast<Param<T>&>(biases)));
  }

  void collect(ParamList<T>& out) {
    out.push_back(&w);
    out.push_back(&biases);
  }

  std::int64_t param_count() const { return w.size() + biases.size(); }
};

template <typename T>
struct KeypointInit {
  Mlp<T> glob1, glob2;  // the two global set-conv stages
  BiasInducedLayer<T> bil1, bil2, bil3;
  Linear<T> to_pos;
  int keypoints = 0;
  int d_g = 256;
  int d_hid = 128;
  int group_k = 16;  // neighbour count of the first global stage

  void init(const std::string& name, int J, int feature_width, int dg,
            int dhid, int k, RandomStream& rng) {
    keypoints = J;
    d_g = dg;
    d_hid = dhid;
    group_k = k;
    glob1.init(name + ".glob1", 3 + feature_width, {dhid, dhid}, rng);
    glob2.init(name + ".glob2", 3 + dhid, {dg, dg}, rng);
    bil1.init(name + ".bil1", dg, dg, J, rng);
    bil2.init(name + ".bil2", dg, dg, J, rng);
    bil3.init(name + ".bil3", dg, dhid, J, rng);
    to_pos.init(name + ".to_pos", dhid, 3, rng);
  }

  // Two set-conv stages M -> M/4 -> 1 over the super points.
  Var<T> global_encode(Tape<T>& tape, const std::vector<T>& pts, int m,
                       Var<T> feats, int seed_index = 0) const {
    if (m < 2) throw DomainError("global_encode: needs at least 2 points");
    const int m1 = std::max(1, m / 4);
    auto s1 = set_conv(tape, pts, m, feats, m1, std::min(group_k, m), glob1,
                       seed_index);
    auto s2 = set_conv(tape, s1.points, m1, s1.features, 1, m1, glob2, 0);
    return reshape(s2.features, {d_g});
  }

  // Replicates the global vector J times and runs the three BILs with ReLU
  // between them.
  Var<T> init_embeddings(Var<T> g) const {
    Var<T> rows = expand(reshape(g, {d_g}), 0, keypoints);  // J x d_g
    Var<T> e = relu(bil1(rows));
    e = relu(bil2(e));
    return bil3(e);
  }

  // Single linear map to 3D, no activation.
  Var<T> embed_to_position(Var<T> e) const { return to_pos(e); }

  void collect(ParamList<T>& out) {
    glob1.collect(out);
    glob2.collect(out);
    bil1.collect(out);
    bil2.collect(out);
    bil3.collect(out);
    to_pos.collect(out);
  }
};

}  // namespace hdagt
