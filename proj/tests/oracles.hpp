#pragma once

// Brute-force reference implementations used by tests only. These stay
// independent of the tape/op implementations they check: plain loops over
// raw buffers, recomputing everything from definitions.

#include <algorithm>
#include <cmath>
#include <vector>

#include "handdagt/layers.hpp"

namespace oracle {

inline double o_dist2(const double* a, const double* b) {
  double s = 0;
  for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// exhaustive sort per query
inline std::vector<int> knn(const std::vector<double>& query, int q,
                            const std::vector<double>& ref, int m, int k) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(q) * k);
  for (int qi = 0; qi < q; ++qi) {
    std::vector<std::pair<double, int>> all(m);
    for (int ri = 0; ri < m; ++ri) {
      all[ri] = {o_dist2(&query[3 * qi], &ref[3 * ri]), ri};
    }
    std::sort(all.begin(), all.end());
    for (int i = 0; i < k; ++i) out.push_back(all[i].second);
  }
  return out;
}

// greedy max-min selection recomputed from scratch at every step
inline std::vector<int> fps(const std::vector<double>& pts, int n, int m,
                            int seed) {
  std::vector<int> chosen{seed};
  while (static_cast<int>(chosen.size()) < m) {
    int best_idx = -1;
    double best_d = -1.0;
    for (int cand = 0; cand < n; ++cand) {
      double dmin = std::numeric_limits<double>::max();
      for (int c : chosen) {
        dmin = std::min(dmin, o_dist2(&pts[3 * cand], &pts[3 * c]));
      }
      if (dmin > best_d) {
        best_d = dmin;
        best_idx = cand;
      }
    }
    chosen.push_back(best_idx);
  }
  return chosen;
}

// plain affine + relu chain over one row, reading layer params directly
inline std::vector<double> mlp_row(const hdagt::Mlp<double>& mlp,
                                   std::vector<double> row) {
  for (std::size_t li = 0; li < mlp.layers.size(); ++li) {
    const auto& l = mlp.layers[li];
    const int in = l.w.shape[0];
    const int out = l.w.shape[1];
    std::vector<double> next(out, 0.0);
    for (int o = 0; o < out; ++o) {
      double acc = l.has_bias ? l.b.value[o] : 0.0;
      for (int i = 0; i < in; ++i) acc += row[i] * l.w.value[i * out + o];
      next[o] = acc;
    }
    if (li + 1 < mlp.layers.size()) {
      for (auto& v : next) v = std::max(0.0, v);
    }
    row = std::move(next);
  }
  return row;
}

// set convolution from its definition: fps centroids, per-centroid knn
// groups, mlp over [rel, feat] rows, elementwise max over the group
inline std::vector<double> set_conv(const std::vector<double>& pts, int n,
                                    const std::vector<double>& feats, int d,
                                    int m_out, int k,
                                    const hdagt::Mlp<double>& mlp, int seed) {
  std::vector<int> sel = fps(pts, n, m_out, seed);
  const int w = mlp.layers.back().w.shape[1];
  std::vector<double> out(static_cast<std::size_t>(m_out) * w,
                          -std::numeric_limits<double>::max());
  for (int i = 0; i < m_out; ++i) {
    std::vector<double> centroid(3);
    for (int a = 0; a < 3; ++a) centroid[a] = pts[3 * sel[i] + a];
    std::vector<int> nbr = knn(centroid, 1, pts, n, k);
    for (int j = 0; j < k; ++j) {
      std::vector<double> row(3 + d);
      for (int a = 0; a < 3; ++a) {
        row[a] = pts[3 * nbr[j] + a] - centroid[a];
      }
      for (int a = 0; a < d; ++a) {
        row[3 + a] = feats[static_cast<std::size_t>(nbr[j]) * d + a];
      }
      std::vector<double> h = mlp_row(mlp, row);
      for (int a = 0; a < w; ++a) {
        out[static_cast<std::size_t>(i) * w + a] =
            std::max(out[static_cast<std::size_t>(i) * w + a], h[a]);
      }
    }
  }
  return out;
}

// channel-wise graph mix from its definition:
// out[j,c] = relu( sum_i A[j,i,c] * (E W)[i,c] )
inline std::vector<double> gcn_evolve(const std::vector<double>& A,
                                      const std::vector<double>& E,
                                      const std::vector<double>& W, int J,
                                      int d) {
  std::vector<double> ew(static_cast<std::size_t>(J) * d, 0.0);
  for (int i = 0; i < J; ++i) {
    for (int c = 0; c < d; ++c) {
      double acc = 0;
      for (int x = 0; x < d; ++x) {
        acc += E[static_cast<std::size_t>(i) * d + x] *
               W[static_cast<std::size_t>(x) * d + c];
      }
      ew[static_cast<std::size_t>(i) * d + c] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(J) * d, 0.0);
  for (int j = 0; j < J; ++j) {
    for (int c = 0; c < d; ++c) {
      double acc = 0;
      for (int i = 0; i < J; ++i) {
        acc += A[(static_cast<std::size_t>(j) * J + i) * d + c] *
               ew[static_cast<std::size_t>(i) * d + c];
      }
      out[static_cast<std::size_t>(j) * d + c] = std::max(0.0, acc);
    }
  }
  return out;
}

}  // namespace oracle
