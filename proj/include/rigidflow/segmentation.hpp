#pragma once

// Motion segmentation: K-means over bottleneck vectors, and the object-code
// baseline built on weighted Kabsch alignment. Instance metrics at IoU 0.5.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "rigidflow/error.hpp"
#include "rigidflow/geometry.hpp"
#include "rigidflow/networks.hpp"
#include "rigidflow/training.hpp"
#include "rigidflow/transport.hpp"

namespace rigidflow {

// ---------------------------------------------------------------------------
// K-means.

struct KMeansResult {
  std::vector<int> ids;
  Matrix centers;  // D x C
  int iterations = 0;
};

namespace detail {
inline int nearest_center(const Matrix& x, Eigen::Index i, const Matrix& centers, double* dist = nullptr) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.cols(); ++c) {
    const double d = (x.col(i) - centers.col(c)).squaredNorm();
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist) *dist = best_d;
  return best;
}
}  // namespace detail

/// Features are columns. k-means++ seeding, then Lloyd iterations until the
/// assignment stops changing or max_iters is reached.
inline KMeansResult kmeans(const Matrix& features, int clusters, std::uint64_t seed, int max_iters = 300) {
  const Eigen::Index n = features.cols();
  if (clusters < 1) throw Error(ErrorKind::Config, "cluster count must be >= 1");
  if (clusters > n) throw Error(ErrorKind::Config, "more clusters than particles");
  if (!features.allFinite()) throw Error(ErrorKind::InvalidInput, "non-finite grouping features");

  std::mt19937_64 rng(seed);
  KMeansResult r;
  r.centers.resize(features.rows(), clusters);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  r.centers.col(0) = features.col(first(rng));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (int c = 1; c < clusters; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int k = 0; k < c; ++k) best = std::min(best, (features.col(i) - r.centers.col(k)).squaredNorm());
      d2[static_cast<std::size_t>(i)] = best;
      total += best;
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (acc > target) {
          pick = i;
          break;
        }
      }
    }
    r.centers.col(c) = features.col(pick);
  }

  r.ids.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    std::vector<double> dist(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const int id = detail::nearest_center(features, i, r.centers, &dist[static_cast<std::size_t>(i)]);
      if (id != r.ids[static_cast<std::size_t>(i)]) changed = true;
      r.ids[static_cast<std::size_t>(i)] = id;
    }
    r.iterations = it + 1;
    if (!changed && it > 0) break;

    Matrix sums = Matrix::Zero(features.rows(), clusters);
    std::vector<int> counts(static_cast<std::size_t>(clusters), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.col(r.ids[static_cast<std::size_t>(i)]) += features.col(i);
      ++counts[static_cast<std::size_t>(r.ids[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < clusters; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        r.centers.col(c) = sums.col(c) / counts[static_cast<std::size_t>(c)];
        continue;
      }
      // Empty cluster: take the point farthest from its own center.
      Eigen::Index far = 0;
      for (Eigen::Index i = 1; i < n; ++i)
        if (dist[static_cast<std::size_t>(i)] > dist[static_cast<std::size_t>(far)]) far = i;
      r.centers.col(c) = features.col(far);
      dist[static_cast<std::size_t>(far)] = 0.0;
    }
  }
  return r;
}

/// Columns h ⊕ λ p0 for every particle.
inline Matrix grouping_features(const Matrix& h, const Matrix& p0, double lambda) {
  if (h.cols() != p0.cols()) throw Error(ErrorKind::InvalidInput, "h and p0 column counts differ");
  Matrix f(h.rows() + 3, h.cols());
  f.topRows(h.rows()) = h;
  f.bottomRows(3) = lambda * p0;
  return f;
}

/// Groups particles by their bottleneck vectors. `canonical` is in the model frame.
inline std::vector<int> group_by_physics(const Model& m, const Matrix& canonical, double lambda, int clusters,
                                         std::uint64_t seed) {
  if (!m.neck_block().present()) throw Error(ErrorKind::Config, "model has no bottleneck network");
  const auto idx = iota_indices(static_cast<int>(canonical.cols()));
  const Matrix h = bottleneck(m, physics_codes(m, canonical, idx));
  return kmeans(grouping_features(h, canonical, lambda), clusters, seed).ids;
}

/// Velocity at `samples` uniform times in [0, 1] at each particle's deformed position.
/// Result: one 3 x samples matrix per particle.
inline std::vector<Matrix> trajectory_signature(const Model& m, const Matrix& canonical, int samples = 10) {
  if (samples < 1) throw Error(ErrorKind::InvalidInput, "need at least one sample");
  const auto idx = iota_indices(static_cast<int>(canonical.cols()));
  const KernelSet base = canonical_kernels(m, canonical);
  const Matrix z = base.codes();
  const Matrix h = bottleneck(m, z);
  std::vector<Matrix> out(static_cast<std::size_t>(canonical.cols()), Matrix(3, samples));
  for (int j = 0; j < samples; ++j) {
    const double t = samples == 1 ? 0.0 : static_cast<double>(j) / (samples - 1);
    const Matrix p = m.ablation().no_deform_field ? canonical : deform_to(base, t, m).positions();
    const Matrix v = velocity_batch(m, z, h, p, t);
    for (Eigen::Index i = 0; i < canonical.cols(); ++i) out[static_cast<std::size_t>(i)].col(j) = v.col(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighted Kabsch.

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Matrix apply(const Matrix& p) const { return (rotation * p).colwise() + translation; }
};

/// Intermediate quantities kept for differentiation.
struct KabschState {
  RigidTransform transform;
  Vec3 p_mean, q_mean;
  double weight_sum = 0.0;
  Mat3 covariance;  // sum w (q - q_mean)(p - p_mean)^T
};

inline constexpr double kRankTolerance = 1e-12;

/// argmin over (R, t) of sum w_i |R p_i + t - q_i|^2.
inline KabschState weighted_kabsch_state(const Matrix& p, const Matrix& q, std::span<const double> w) {
  const Eigen::Index n = p.cols();
  if (q.cols() != n || static_cast<Eigen::Index>(w.size()) != n || p.rows() != 3 || q.rows() != 3)
    throw Error(ErrorKind::InvalidInput, "weighted_kabsch: shape mismatch");
  KabschState s;
  s.p_mean.setZero();
  s.q_mean.setZero();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double wi = w[static_cast<std::size_t>(i)];
    if (!(wi >= 0.0) || !std::isfinite(wi)) throw Error(ErrorKind::InvalidInput, "weights must be finite and >= 0");
    s.weight_sum += wi;
    s.p_mean += wi * p.col(i);
    s.q_mean += wi * q.col(i);
  }
  if (!(s.weight_sum > 0.0)) throw Error(ErrorKind::InvalidInput, "weights sum to zero");
  s.p_mean /= s.weight_sum;
  s.q_mean /= s.weight_sum;
  s.covariance.setZero();
  for (Eigen::Index i = 0; i < n; ++i)
    s.covariance += w[static_cast<std::size_t>(i)] * (q.col(i) - s.q_mean) * (p.col(i) - s.p_mean).transpose();

  Eigen::JacobiSVD<Mat3> svd(s.covariance, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sigma = svd.singularValues();
  if (!(sigma[1] > kRankTolerance * sigma[0]))
    throw Error(ErrorKind::DegenerateConfiguration, "weighted point sets are collinear or coincident");
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  s.transform.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  s.transform.translation = s.q_mean - s.transform.rotation * s.p_mean;
  return s;
}

inline RigidTransform weighted_kabsch(const Matrix& p, const Matrix& q, std::span<const double> w) {
  return weighted_kabsch_state(p, q, w).transform;
}

/// Pulls dL/dR and dL/dt back onto the weights through the optimal alignment.
inline std::vector<double> kabsch_weight_gradient(const KabschState& s, const Matrix& p, const Matrix& q,
                                                  const Mat3& d_rotation, const Vec3& d_translation) {
  const Mat3& R = s.transform.rotation;
  // t = q_mean - R p_mean, so R also receives -d_t p_mean^T.
  const Mat3 G = d_rotation - d_translation * s.p_mean.transpose();
  Mat3 dM;
  try {
    dM = rotation_projection_backward(s.covariance, R, G);
  } catch (const Error&) {
    throw Error(ErrorKind::DegenerateConfiguration, "alignment is not differentiable here");
  }
  const Vec3 dq_mean = d_translation;
  const Vec3 dp_mean = -R.transpose() * d_translation;

  std::vector<double> out(static_cast<std::size_t>(p.cols()));
  for (Eigen::Index i = 0; i < p.cols(); ++i) {
    const Vec3 pc = p.col(i) - s.p_mean;
    const Vec3 qc = q.col(i) - s.q_mean;
    out[static_cast<std::size_t>(i)] =
        qc.dot(dM * pc) + (dq_mean.dot(qc) + dp_mean.dot(pc)) / s.weight_sum;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Object-code losses. Codes are N x K_obj, rows on the simplex.

struct LossAndGradient {
  double value = 0.0;
  Matrix grad;  // same shape as the codes
};

/// (1/N) sum_p | sum_k o_pk (T_k p) - q_p |, T_k from weighted Kabsch with weights o_.k.
inline LossAndGradient ogc_dynamic_loss(const Matrix& p, const Matrix& q, const Matrix& codes, bool with_grad = false) {
  const Eigen::Index n = p.cols();
  const Eigen::Index K = codes.cols();
  if (codes.rows() != n || q.cols() != n) throw Error(ErrorKind::InvalidInput, "ogc_dynamic_loss: shape mismatch");
  std::vector<KabschState> states;
  std::vector<Matrix> moved;
  states.reserve(static_cast<std::size_t>(K));
  for (Eigen::Index k = 0; k < K; ++k) {
    const Vector w = codes.col(k);
    if (w.sum() <= 0.0) {
      states.push_back({});  // unused group: identity, contributes nothing
      moved.push_back(p);
      continue;
    }
    states.push_back(weighted_kabsch_state(p, q, std::span<const double>(w.data(), static_cast<std::size_t>(n))));
    moved.push_back(states.back().transform.apply(p));
  }

  LossAndGradient out;
  Matrix unit = Matrix::Zero(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec3 blend = Vec3::Zero();
    for (Eigen::Index k = 0; k < K; ++k) blend += codes(i, k) * moved[static_cast<std::size_t>(k)].col(i);
    const Vec3 r = blend - q.col(i);
    const double len = r.norm();
    out.value += len;
    if (len > 0.0) unit.col(i) = r / len;
  }
  out.value /= static_cast<double>(n);
  if (!with_grad) return out;

  const double inv_n = 1.0 / static_cast<double>(n);
  out.grad = Matrix::Zero(n, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    for (Eigen::Index i = 0; i < n; ++i)
      out.grad(i, k) += inv_n * unit.col(i).dot(moved[static_cast<std::size_t>(k)].col(i));
    if (codes.col(k).sum() <= 0.0) continue;
    Mat3 dR = Mat3::Zero();
    Vec3 dt = Vec3::Zero();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec3 g = inv_n * codes(i, k) * unit.col(i);
      dR += g * p.col(i).transpose();
      dt += g;
    }
    const std::vector<double> dw = kabsch_weight_gradient(states[static_cast<std::size_t>(k)], p, q, dR, dt);
    for (Eigen::Index i = 0; i < n; ++i) out.grad(i, k) += dw[static_cast<std::size_t>(i)];
  }
  return out;
}

/// Indices of the H nearest other points for each point (brute force, ties by index).
inline std::vector<std::vector<int>> nearest_neighbors(const Matrix& p, int H) {
  const Eigen::Index n = p.cols();
  if (H < 1) throw Error(ErrorKind::Config, "neighbor count must be >= 1");
  if (H >= n) throw Error(ErrorKind::Config, "neighbor count must be below the particle count");
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  std::vector<std::pair<double, int>> d(static_cast<std::size_t>(n - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) d[c++] = {(p.col(i) - p.col(j)).squaredNorm(), static_cast<int>(j)};
    std::partial_sort(d.begin(), d.begin() + H, d.end());
    auto& row = out[static_cast<std::size_t>(i)];
    for (int h = 0; h < H; ++h) row.push_back(d[static_cast<std::size_t>(h)].second);
  }
  return out;
}

/// (1/N) sum_p (1/H) sum_h |o_p - o_{p_h}|_1.
inline LossAndGradient ogc_smooth_loss(const Matrix& codes, const std::vector<std::vector<int>>& neighbors,
                                       bool with_grad = false) {
  const Eigen::Index n = codes.rows();
  if (static_cast<Eigen::Index>(neighbors.size()) != n) throw Error(ErrorKind::InvalidInput, "neighbor list size mismatch");
  LossAndGradient out;
  if (with_grad) out.grad = Matrix::Zero(n, codes.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& nb = neighbors[static_cast<std::size_t>(i)];
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(nb.size()));
    for (int j : nb) {
      const Eigen::RowVectorXd diff = codes.row(i) - codes.row(j);
      out.value += scale * diff.cwiseAbs().sum();
      if (with_grad) {
        const Eigen::RowVectorXd sgn = diff.array().sign().matrix();
        out.grad.row(i) += scale * sgn;
        out.grad.row(j) -= scale * sgn;
      }
    }
  }
  return out;
}

inline LossAndGradient ogc_smooth_loss(const Matrix& p, const Matrix& codes, int H, bool with_grad = false) {
  return ogc_smooth_loss(codes, nearest_neighbors(p, H), with_grad);
}

struct ObjectCodes {
  Matrix logits;  // N x K_obj

  Matrix probabilities() const {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const Eigen::RowVectorXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp().matrix();
      out.row(i) = e / e.sum();
    }
    return out;
  }

  std::vector<int> hard_ids() const {
    std::vector<int> ids(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index best;
      logits.row(i).maxCoeff(&best);
      ids[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return ids;
  }
};

struct ObjectCodeConfig {
  int objects = 8;
  double learning_rate = 0.01;
  int iterations = 1000;
  int neighbors = 8;
  double smooth_weight = 1.0;
  std::uint64_t seed = 0;
};

/// Adam on mean-over-frames dynamic loss plus smoothness, over softmax logits.
inline ObjectCodes optimize_object_codes(const Matrix& p0, const std::vector<Matrix>& frames, const ObjectCodeConfig& cfg) {
  if (cfg.objects < 1) throw Error(ErrorKind::Config, "object count must be >= 1");
  if (frames.empty()) throw Error(ErrorKind::InvalidInput, "need at least one target frame");
  const Eigen::Index n = p0.cols();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> init(0.0, 1.0);
  ObjectCodes codes;
  codes.logits.resize(n, cfg.objects);
  for (Eigen::Index i = 0; i < codes.logits.size(); ++i) codes.logits.data()[i] = init(rng);

  const auto nb = nearest_neighbors(p0, cfg.neighbors);
  Adam adam(codes.logits.size());
  Vector flat(codes.logits.size());
  for (int it = 0; it < cfg.iterations; ++it) {
    const Matrix o = codes.probabilities();
    Matrix g = Matrix::Zero(n, cfg.objects);
    for (const Matrix& q : frames) g += ogc_dynamic_loss(p0, q, o, true).grad / static_cast<double>(frames.size());
    if (cfg.smooth_weight > 0.0) g += cfg.smooth_weight * ogc_smooth_loss(o, nb, true).grad;
    // Softmax backward, row by row.
    Matrix dl(n, cfg.objects);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double dot = o.row(i).dot(g.row(i));
      dl.row(i) = o.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
    Eigen::Map<Vector>(flat.data(), flat.size()) = Eigen::Map<const Vector>(codes.logits.data(), codes.logits.size());
    adam.step(flat, Eigen::Map<const Vector>(dl.data(), dl.size()), cfg.learning_rate);
    Eigen::Map<Vector>(codes.logits.data(), codes.logits.size()) = flat;
  }
  return codes;
}

// ---------------------------------------------------------------------------
// Metrics.

struct SegmentationMetrics {
  double ap = 0.0, pq = 0.0, f1 = 0.0, precision = 0.0, recall = 0.0, miou = 0.0;
  int tp = 0, fp = 0, fn = 0;
};

inline constexpr double kMatchThreshold = 0.5;

/// Instance metrics between predicted and ground-truth particle groupings.
/// A pair matches when IoU > 0.5, which makes the matching unique.
inline SegmentationMetrics segmentation_metrics(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw Error(ErrorKind::InvalidInput, "prediction and ground truth sizes differ");
  SegmentationMetrics m;
  if (pred.empty()) return m;

  std::map<int, int> pred_index, gt_index;
  for (int v : pred) pred_index.emplace(v, 0);
  for (int v : gt) gt_index.emplace(v, 0);
  int c = 0;
  for (auto& [k, v] : pred_index) v = c++;
  c = 0;
  for (auto& [k, v] : gt_index) v = c++;
  const int P = static_cast<int>(pred_index.size()), G = static_cast<int>(gt_index.size());

  Eigen::MatrixXi inter = Eigen::MatrixXi::Zero(P, G);
  std::vector<int> psize(static_cast<std::size_t>(P), 0), gsize(static_cast<std::size_t>(G), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int a = pred_index[pred[i]], b = gt_index[gt[i]];
    ++inter(a, b);
    ++psize[static_cast<std::size_t>(a)];
    ++gsize[static_cast<std::size_t>(b)];
  }
  Matrix iou(P, G);
  for (int a = 0; a < P; ++a)
    for (int b = 0; b < G; ++b)
      iou(a, b) = static_cast<double>(inter(a, b)) /
                  static_cast<double>(psize[static_cast<std::size_t>(a)] + gsize[static_cast<std::size_t>(b)] - inter(a, b));

  std::vector<int> match(static_cast<std::size_t>(P), -1);
  double matched_iou = 0.0;
  for (int a = 0; a < P; ++a)
    for (int b = 0; b < G; ++b)
      if (iou(a, b) > kMatchThreshold) {
        match[static_cast<std::size_t>(a)] = b;
        matched_iou += iou(a, b);
        ++m.tp;
      }
  m.fp = P - m.tp;
  m.fn = G - m.tp;
  m.precision = 100.0 * m.tp / P;
  m.recall = 100.0 * m.tp / G;
  m.f1 = m.tp ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.pq = 100.0 * matched_iou / (m.tp + 0.5 * m.fp + 0.5 * m.fn);

  // AP: predictions ranked by size, equal sizes entering together.
  std::vector<int> order(static_cast<std::size_t>(P));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) { return psize[static_cast<std::size_t>(x)] > psize[static_cast<std::size_t>(y)]; });
  int seen = 0, hits = 0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && psize[static_cast<std::size_t>(order[j])] == psize[static_cast<std::size_t>(order[i])]) {
      if (match[static_cast<std::size_t>(order[j])] >= 0) ++hits;
      ++seen;
      ++j;
    }
    const double rec = static_cast<double>(hits) / G;
    m.ap += (static_cast<double>(hits) / seen) * (rec - prev_recall);
    prev_recall = rec;
    i = j;
  }
  m.ap *= 100.0;

  for (int b = 0; b < G; ++b) m.miou += iou.col(b).maxCoeff();
  m.miou *= 100.0 / G;
  return m;
}

}  // namespace rigidflow
