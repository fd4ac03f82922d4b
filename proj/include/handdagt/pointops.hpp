#pragma once

// Geometric kernels over flat row-major N x 3 coordinate buffers: farthest
// point sampling, k-nearest-neighbour queries (exhaustive, with an optional
// grid-accelerated path that must return identical indices), the point set
// convolution (group + shared MLP + max-pool), and patch grouping around
// keypoint positions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "handdagt/layers.hpp"
#include "handdagt/numcore.hpp"

namespace hdagt {

template <typename T>
inline T dist2(const T* a, const T* b) {
  const T dx = a[0] - b[0];
  const T dy = a[1] - b[1];
  const T dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Greedy max-min selection. First pick is seed_index; ties go to the lowest
// index so results are reproducible.
template <typename T>
std::vector<int> farthest_point_sample(const std::vector<T>& pts, int n, int m,
                                       int seed_index = 0) {
  if (n < 1 || static_cast<std::int64_t>(pts.size()) < 3LL * n) {
    throw DomainError("farthest_point_sample: bad point count");
  }
  if (m < 1 || m > n) {
    throw DomainError("farthest_point_sample: m=" + std::to_string(m) +
                      " out of range for n=" + std::to_string(n));
  }
  if (seed_index < 0 || seed_index >= n) {
    throw DomainError("farthest_point_sample: seed index out of range");
  }
  std::vector<int> chosen;
  chosen.reserve(m);
  chosen.push_back(seed_index);
  std::vector<T> best(n);
  for (int i = 0; i < n; ++i) {
    best[i] = dist2(&pts[3 * i], &pts[3 * seed_index]);
  }
  for (int step = 1; step < m; ++step) {
    int arg = 0;
    T far = best[0];
    for (int i = 1; i < n; ++i) {
      if (best[i] > far) {
        far = best[i];
        arg = i;
      }
    }
    chosen.push_back(arg);
    for (int i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist2(&pts[3 * i], &pts[3 * arg]));
    }
  }
  return chosen;
}

namespace detail {

template <typename T>
struct Neighbour {
  T d2;
  int idx;
  bool operator<(const Neighbour& o) const {
    return d2 < o.d2 || (d2 == o.d2 && idx < o.idx);
  }
};

// Keeps the k best (distance, index) pairs seen so far.
template <typename T>
struct BestK {
  explicit BestK(int k) : k(k) { heap.reserve(k + 1); }
  int k;
  std::vector<Neighbour<T>> heap;  // max-heap on operator<

  void offer(T d2, int idx) {
    Neighbour<T> nb{d2, idx};
    if (static_cast<int>(heap.size()) < k) {
      heap.push_back(nb);
      std::push_heap(heap.begin(), heap.end());
    } else if (nb < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = nb;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  T worst() const {
    return static_cast<int>(heap.size()) < k
               ? std::numeric_limits<T>::max()
               : heap.front().d2;
  }

  void emit(int* out) {
    std::sort_heap(heap.begin(), heap.end());
    for (std::size_t i = 0; i < heap.size(); ++i) out[i] = heap[i].idx;
  }
};

}  // namespace detail

// Per query the k nearest reference indices, ascending by distance, ties by
// lowest index. use_grid toggles a uniform-grid accelerated search that must
// produce exactly the same indices as the exhaustive scan.
template <typename T>
std::vector<int> knn(const std::vector<T>& query, int q,
                     const std::vector<T>& ref, int m, int k,
                     bool use_grid = false) {
  if (k < 1 || k > m) {
    throw DomainError("knn: k=" + std::to_string(k) +
                      " out of range for reference count " + std::to_string(m));
  }
  std::vector<int> out(static_cast<std::size_t>(q) * k);
  if (!use_grid) {
    for (int qi = 0; qi < q; ++qi) {
      detail::BestK<T> best(k);
      for (int ri = 0; ri < m; ++ri) {
        best.offer(dist2(&query[3 * qi], &ref[3 * ri]), ri);
      }
      best.emit(&out[static_cast<std::size_t>(qi) * k]);
    }
    return out;
  }

  // grid path: bucket references into a uniform lattice, then search
  // outward shell by shell until the kth distance bounds the next shell
  std::array<T, 3> lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    lo[a] = hi[a] = ref[a];
  }
  for (int ri = 1; ri < m; ++ri) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], ref[3 * ri + a]);
      hi[a] = std::max(hi[a], ref[3 * ri + a]);
    }
  }
  const int cells = std::max(
      1, std::min(32, static_cast<int>(std::cbrt(double(m) / 2.0))));
  std::array<T, 3> cell_size{};
  for (int a = 0; a < 3; ++a) {
    cell_size[a] = std::max(static_cast<T>((hi[a] - lo[a]) / cells),
                            std::numeric_limits<T>::epsilon());
  }
  auto cell_of = [&](const T* p, int a) {
    int c = static_cast<int>((p[a] - lo[a]) / cell_size[a]);
    return std::clamp(c, 0, cells - 1);
  };
  std::vector<std::vector<int>> buckets(
      static_cast<std::size_t>(cells) * cells * cells);
  for (int ri = 0; ri < m; ++ri) {
    const int cx = cell_of(&ref[3 * ri], 0);
    const int cy = cell_of(&ref[3 * ri], 1);
    const int cz = cell_of(&ref[3 * ri], 2);
    buckets[(static_cast<std::size_t>(cx) * cells + cy) * cells + cz]
        .push_back(ri);
  }
  const T min_cell = std::min({cell_size[0], cell_size[1], cell_size[2]});
  for (int qi = 0; qi < q; ++qi) {
    const T* qp = &query[3 * qi];
    const int qx = cell_of(qp, 0), qy = cell_of(qp, 1), qz = cell_of(qp, 2);
    detail::BestK<T> best(k);
    for (int radius = 0; radius < cells; ++radius) {
      // shell at Chebyshev distance `radius` from the query cell
      for (int cx = std::max(0, qx - radius);
           cx <= std::min(cells - 1, qx + radius); ++cx) {
        for (int cy = std::max(0, qy - radius);
             cy <= std::min(cells - 1, qy + radius); ++cy) {
          for (int cz = std::max(0, qz - radius);
               cz <= std::min(cells - 1, qz + radius); ++cz) {
            if (std::max({std::abs(cx - qx), std::abs(cy - qy),
                          std::abs(cz - qz)}) != radius) {
              continue;
            }
            for (int ri :
                 buckets[(static_cast<std::size_t>(cx) * cells + cy) * cells +
                         cz]) {
              best.offer(dist2(qp, &ref[3 * ri]), ri);
            }
          }
        }
      }
      // any point in a farther shell is at least `radius` cells away
      const T safe = static_cast<T>(radius) * min_cell;
      if (static_cast<int>(best.heap.size()) == k &&
          best.worst() < safe * safe) {
        break;
      }
      if (qx - radius < 0 && qx + radius >= cells && qy - radius < 0 &&
          qy + radius >= cells && qz - radius < 0 && qz + radius >= cells) {
        break;  // grid exhausted
      }
    }
    best.emit(&out[static_cast<std::size_t>(qi) * k]);
  }
  return out;
}

// ------------------------------------------------------------- set_conv

template <typename T>
struct SetConvResult {
  std::vector<T> points;      // m_out x 3 centroid coordinates
  std::vector<int> selected;  // centroid indices into the input cloud
  Var<T> features;            // m_out x width
};

// PointNet++-style set abstraction: FPS-select centroids, group k nearest
// neighbours, run a shared MLP over [rel_coord, neighbour_feature] rows and
// max-pool each group. `feats` may be invalid, in which case the MLP sees
// relative coordinates only.
template <typename T>
SetConvResult<T> set_conv(Tape<T>& tape, const std::vector<T>& pts, int n,
                          Var<T> feats, int m_out, int k, const Mlp<T>& mlp,
                          int seed_index = 0) {
  if (m_out > n) {
    throw DomainError("set_conv: m_out=" + std::to_string(m_out) +
                      " exceeds point count " + std::to_string(n));
  }
  SetConvResult<T> res;
  res.selected = farthest_point_sample(pts, n, m_out, seed_index);
  res.points.resize(static_cast<std::size_t>(m_out) * 3);
  for (int i = 0; i < m_out; ++i) {
    for (int a = 0; a < 3; ++a) {
      res.points[3 * i + a] = pts[3 * res.selected[i] + a];
    }
  }
  std::vector<int> nbr = knn(res.points, m_out, pts, n, k);

  std::vector<T> rel(static_cast<std::size_t>(m_out) * k * 3);
  for (int i = 0; i < m_out; ++i) {
    for (int j = 0; j < k; ++j) {
      const int r = nbr[static_cast<std::size_t>(i) * k + j];
      for (int a = 0; a < 3; ++a) {
        rel[(static_cast<std::size_t>(i) * k + j) * 3 + a] =
            pts[3 * r + a] - res.points[3 * i + a];
      }
    }
  }
  Var<T> rel_v = tape.constant({m_out * k, 3}, std::move(rel));
  Var<T> rows;
  if (feats.valid()) {
    const int d = feats.shape().back();
    Var<T> gathered = index_rows(feats, nbr);
    rows = concat<T>({rel_v, reshape(gathered, {m_out * k, d})}, 1);
  } else {
    rows = rel_v;
  }
  Var<T> h = mlp(rows);
  const int w = mlp.out_width();
  res.features = reduce_max(reshape(h, {m_out, k, w}), 1);
  return res;
}

// --------------------------------------------------------- patch grouping

template <typename T>
struct PatchSet {
  std::vector<int> indices;  // J*k neighbour indices into the super points
  Var<T> rel;                // J x K x 3, differentiable w.r.t. the centers
  Var<T> features;           // J x K x d gathered super-point features
};

// Groups the k nearest super points around each center. Neighbour selection
// is detached; position gradients flow only through the rel-coordinate
// subtraction.
template <typename T>
PatchSet<T> group_patches(Tape<T>& tape, const std::vector<T>& sp_points,
                          int m, Var<T> sp_features, Var<T> centers, int k) {
  const Shape& cs = centers.shape();
  if (cs.size() != 2 || cs[1] != 3) {
    throw DimensionError("group_patches: centers must be Jx3, got " +
                         shape_str(cs));
  }
  const int J = cs[0];
  PatchSet<T> res;
  res.indices = knn(centers.value(), J, sp_points, m, k);

  std::vector<T> gathered(static_cast<std::size_t>(J) * k * 3);
  for (int i = 0; i < J * k; ++i) {
    for (int a = 0; a < 3; ++a) {
      gathered[3 * i + a] = sp_points[3 * res.indices[i] + a];
    }
  }
  Var<T> nb_pts = tape.constant({J, k, 3}, std::move(gathered));
  res.rel = sub(nb_pts, expand(centers, 1, k));

  const int d = sp_features.shape().back();
  res.features = reshape(index_rows(sp_features, res.indices), {J, k, d});
  return res;
}

}  // namespace hdagt
