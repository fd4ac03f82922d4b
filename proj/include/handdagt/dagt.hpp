#pragma once

// Adaptive graph transformer decoder. Each stack evolves the keypoint
// embeddings through a channel-wise graph convolution, builds queries from
// the local patch and keys from the pooled patch, gates both the local
// features and the evolved embeddings with sigmoid Hadamard attention
// scores, aggregates the gated values with a residual max-pool, and
// regresses 3D positions. Stacks run with independent parameters; positions
// regressed by stack s group the patches of stack s+1.

#include <string>
#include <vector>

#include "handdagt/pointops.hpp"

namespace hdagt {

enum class AttentionMode { kSigmoid, kConventional, kNone };

inline const char* attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::kSigmoid: return "sigmoid";
    case AttentionMode::kConventional: return "conventional";
    case AttentionMode::kNone: return "none";
  }
  return "?";
}

struct DecoderConfig {
  int stacks = 3;
  int patch_size = 64;
  AttentionMode attention = AttentionMode::kSigmoid;
  bool enhanced_qk = true;
  bool use_att_local = true;
  bool use_att_g = true;
  int d_hid = 128;
  int mlp_hidden = 64;
  bool skeleton_graph_init = true;
};

// Learnable channel-wise keypoint adjacency plus the embedding transform.
template <typename T>
struct KinematicGraph {
  Param<T> adjacency;  // J x J x d_hid
  Param<T> transform;  // d_hid x d_hid

  // Skeleton-seeded init: every channel slice starts from the row-normalized
  // (bone adjacency + identity) matrix plus small noise. With
  // skeleton_seeded=false the slices are pure noise.
  void init(const std::string& name, int keypoints, int d_hid,
            const std::vector<std::pair<int, int>>& bones, bool skeleton_seeded,
            RandomStream& rng) {
    const int J = keypoints;
    adjacency.init(name + ".adjacency", {J, J, d_hid});
    transform.init_uniform(name + ".transform", {d_hid, d_hid},
                           std::sqrt(6.0 / (2.0 * d_hid)), rng);
    std::vector<double> base(static_cast<std::size_t>(J) * J, 0.0);
    if (skeleton_seeded) {
      for (int j = 0; j < J; ++j) base[static_cast<std::size_t>(j) * J + j] = 1.0;
      for (auto [a, b] : bones) {
        base[static_cast<std::size_t>(a) * J + b] = 1.0;
        base[static_cast<std::size_t>(b) * J + a] = 1.0;
      }
      for (int j = 0; j < J; ++j) {
        double row = 0.0;
        for (int i = 0; i < J; ++i) row += base[static_cast<std::size_t>(j) * J + i];
        for (int i = 0; i < J; ++i) base[static_cast<std::size_t>(j) * J + i] /= row;
      }
    }
    for (int j = 0; j < J; ++j) {
      for (int i = 0; i < J; ++i) {
        for (int c = 0; c < d_hid; ++c) {
          adjacency.value[(static_cast<std::size_t>(j) * J + i) * d_hid + c] =
              static_cast<T>(base[static_cast<std::size_t>(j) * J + i] +
                             rng.uniform(-0.01, 0.01));
        }
      }
    }
  }

  void collect(ParamList<T>& out) {
    out.push_back(&adjacency);
    out.push_back(&transform);
  }

  std::int64_t param_count() const {
    return adjacency.size() + transform.size();
  }
};

// out[j,c] = sum_i A[j,i,c] * x[i,c] — the channel-wise adjacency mix.
template <typename T>
Var<T> channel_adj_mix(Var<T> adjacency, Var<T> x) {
  detail::check_same_tape(adjacency, x, "channel_adj_mix");
  Tape<T>& t = *adjacency.tape;
  const Shape sa = adjacency.shape();
  const Shape sx = x.shape();
  if (sa.size() != 3 || sx.size() != 2 || sa[0] != sa[1] || sa[0] != sx[0] ||
      sa[2] != sx[1]) {
    throw DimensionError("channel_adj_mix: incompatible shapes " +
                         shape_str(sa) + " and " + shape_str(sx));
  }
  const int J = sa[0], d = sa[2];
  const std::vector<T>& av = t.value(adjacency.id);
  const std::vector<T>& xv = t.value(x.id);
  std::vector<T> out(static_cast<std::size_t>(J) * d, T(0));
  for (int j = 0; j < J; ++j) {
    for (int i = 0; i < J; ++i) {
      const T* arow = av.data() + (static_cast<std::size_t>(j) * J + i) * d;
      const T* xrow = xv.data() + static_cast<std::size_t>(i) * d;
      T* orow = out.data() + static_cast<std::size_t>(j) * d;
      for (int c = 0; c < d; ++c) orow[c] += arow[c] * xrow[c];
    }
  }
  const int aid = adjacency.id, xid = x.id;
  const bool ng = t.needs_grad(aid) || t.needs_grad(xid);
  int id = t.emit({J, d}, std::move(out), ng, [aid, xid, J, d](Tape<T>& tp,
                                                               int self) {
    const T* dy = tp.grad(self).data();
    const T* av2 = tp.value(aid).data();
    const T* xv2 = tp.value(xid).data();
    T* da = tp.grad_data(aid);
    T* dx = tp.grad_data(xid);
    for (int j = 0; j < J; ++j) {
      const T* dyrow = dy + static_cast<std::size_t>(j) * d;
      for (int i = 0; i < J; ++i) {
        const std::size_t a_off = (static_cast<std::size_t>(j) * J + i) * d;
        const T* xrow = xv2 + static_cast<std::size_t>(i) * d;
        if (da) {
          for (int c = 0; c < d; ++c) da[a_off + c] += dyrow[c] * xrow[c];
        }
        if (dx) {
          T* dxrow = dx + static_cast<std::size_t>(i) * d;
          for (int c = 0; c < d; ++c) dxrow[c] += av2[a_off + c] * dyrow[c];
        }
      }
    }
  });
  return {&t, id};
}

template <typename T>
Var<T> gcn_evolve(Var<T> embeddings, const KinematicGraph<T>& g) {
  Tape<T>& t = *embeddings.tape;
  Var<T> ew = matmul(embeddings, t.leaf(const_cast<Param<T>&>(g.transform)));
  return relu(channel_adj_mix(
      Var<T>{t.leaf(const_cast<Param<T>&>(g.adjacency))}, ew));
}

// One transformer stack.
template <typename T>
struct DecoderStack {
  DecoderConfig cfg;
  int keypoints = 0;
  KinematicGraph<T> graph;
  Linear<T> patch_proj;  // [3 + fused width] -> d_hid
  Mlp<T> mlp_q;
  Mlp<T> mlp_k;  // per-point key MLP, max-pooled over the patch
  Mlp<T> mlp_v;
  Mlp<T> mlp_f;  // feed-forward set conv
  Linear<T> regress;

  bool has_attention() const { return cfg.attention != AttentionMode::kNone; }

  void init(const std::string& name, int J, int fused_width,
            const DecoderConfig& c,
            const std::vector<std::pair<int, int>>& bones, RandomStream& rng) {
    cfg = c;
    keypoints = J;
    const int dh = cfg.d_hid;
    const int d_att = 2 * dh;
    const int hid = cfg.mlp_hidden;
    patch_proj.init(name + ".patch_proj", 3 + fused_width, dh, rng);
    if (has_attention()) {
      graph.init(name + ".graph", J, dh, bones, cfg.skeleton_graph_init, rng);
      mlp_q.init(name + ".mlp_q", cfg.enhanced_qk ? 2 * dh : dh, {hid, d_att},
                 rng);
      mlp_k.init(name + ".mlp_k", cfg.enhanced_qk ? 2 * dh : dh, {hid, d_att},
                 rng);
      mlp_v.init(name + ".mlp_v", 2 * dh, {hid, dh}, rng);
    }
    mlp_f.init(name + ".mlp_f", dh, {hid, dh}, rng);
    regress.init(name + ".regress", dh, 3, rng);
  }

  struct Output {
    Var<T> positions;   // J x 3
    Var<T> embeddings;  // J x d_hid (the updated embedding)
    std::vector<T> att_g_mean;  // per-keypoint mean graph gate, diagnostics
  };

  // Patch rows are assumed grouped already; embeddings are the incoming E.
  Output run_patch(Tape<T>& tape, const PatchSet<T>& patch,
                   Var<T> embeddings) const {
    const int J = keypoints;
    const int K = patch.rel.shape()[1];
    const int dh = cfg.d_hid;
    const int d_att = 2 * dh;
    const int fused = patch.features.shape().back();

    Var<T> rows = concat<T>({reshape(patch.rel, {J * K, 3}),
                             reshape(patch.features, {J * K, fused})},
                            1);
    Var<T> fk = reshape(patch_proj(rows), {J, K, dh});

    Output out;
    Var<T> residual_in;
    if (!has_attention()) {
      residual_in = fk;  // feed-forward module only
    } else {
      Var<T> evolved = gcn_evolve(embeddings, graph);
      Var<T> e_rep = expand(evolved, 1, K);  // J x K x d_hid

      Var<T> q_in = cfg.enhanced_qk ? concat<T>({e_rep, fk}, 2) : fk;
      Var<T> q = mlp_q(q_in);  // J x K x d_att

      Var<T> key;  // J x d_att
      if (cfg.enhanced_qk) {
        Var<T> k_rows = mlp_k(concat<T>({e_rep, fk}, 2));
        key = reduce_max(k_rows, 1);
      } else {
        key = mlp_k(evolved);
      }

      Var<T> att_local, att_g;
      if (cfg.attention == AttentionMode::kSigmoid) {
        Var<T> gates = sigmoid(mul(q, expand(key, 1, K)));
        att_local = slice(gates, 2, 0, dh);   // local-feature gate first
        att_g = slice(gates, 2, dh, dh);      // then the graph gate
      } else {
        // conventional: scalar per-neighbour softmax of scaled dot products
        Var<T> prod = mul(q, expand(key, 1, K));
        Var<T> dots = scale(reduce_mean(prod, 2),
                            static_cast<T>(std::sqrt(double(d_att))));
        Var<T> weights = softmax(dots, 1);  // J x K
        att_local = expand(weights, 2, dh);
        att_g = expand(weights, 2, dh);
      }
      if (!cfg.use_att_local) {
        att_local = tape.constant(
            {J, K, dh}, std::vector<T>(static_cast<std::size_t>(J) * K * dh,
                                       T(1)));
      }
      if (!cfg.use_att_g) {
        att_g = tape.constant(
            {J, K, dh}, std::vector<T>(static_cast<std::size_t>(J) * K * dh,
                                       T(1)));
      }

      // mean graph gate per keypoint, kept as plain values for analysis
      {
        const std::vector<T>& gv = att_g.value();
        out.att_g_mean.assign(J, T(0));
        for (int j = 0; j < J; ++j) {
          T acc = T(0);
          const T* base = gv.data() + static_cast<std::size_t>(j) * K * dh;
          for (int i = 0; i < K * dh; ++i) acc += base[i];
          out.att_g_mean[j] = acc / static_cast<T>(K * dh);
        }
      }

      Var<T> v_in = concat<T>({mul(e_rep, att_g), mul(fk, att_local)}, 2);
      Var<T> values = mlp_v(v_in);  // J x K x d_hid
      residual_in = add(values, fk);
    }

    Var<T> pooled_ff = reduce_max(mlp_f(residual_in), 1);
    Var<T> pooled_res = reduce_max(residual_in, 1);
    out.embeddings = add(pooled_ff, pooled_res);
    out.positions = regress(out.embeddings);
    return out;
  }

  Output run(Tape<T>& tape, const std::vector<T>& sp_points, int m,
             Var<T> sp_features, Var<T> embeddings, Var<T> centers) const {
    PatchSet<T> patch =
        group_patches(tape, sp_points, m, sp_features, centers, cfg.patch_size);
    return run_patch(tape, patch, embeddings);
  }

  void collect(ParamList<T>& out) {
    patch_proj.collect(out);
    if (has_attention()) {
      graph.collect(out);
      mlp_q.collect(out);
      mlp_k.collect(out);
      mlp_v.collect(out);
    }
    mlp_f.collect(out);
    regress.collect(out);
  }

  std::int64_t param_count() const {
    std::int64_t n = patch_proj.param_count() + mlp_f.param_count() +
                     regress.param_count();
    if (has_attention()) {
      n += graph.param_count() + mlp_q.param_count() + mlp_k.param_count() +
           mlp_v.param_count();
    }
    return n;
  }
};

template <typename T>
struct DecodeResult {
  std::vector<Var<T>> stack_positions;        // one J x 3 entry per stack
  Var<T> final_embeddings;                    // J x d_hid
  std::vector<std::vector<T>> att_g_mean;     // per stack, per keypoint
};

// Runs the stacks in order. The first stack groups at `initial_positions`
// (already noised during training); later stacks group at the previous
// stack's regressed positions. Updated embeddings carry forward.
template <typename T>
DecodeResult<T> decode(Tape<T>& tape,
                       const std::vector<DecoderStack<T>>& stacks,
                       const std::vector<T>& sp_points, int m,
                       Var<T> sp_features, Var<T> embeddings,
                       Var<T> initial_positions) {
  if (stacks.empty()) throw DomainError("decode: no stacks");
  DecodeResult<T> res;
  Var<T> positions = initial_positions;
  Var<T> e = embeddings;
  for (const auto& stack : stacks) {
    auto out = stack.run(tape, sp_points, m, sp_features, e, positions);
    res.stack_positions.push_back(out.positions);
    res.att_g_mean.push_back(std::move(out.att_g_mean));
    positions = out.positions;
    e = out.embeddings;
  }
  res.final_embeddings = e;
  return res;
}

}  // namespace hdagt
