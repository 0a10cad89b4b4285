#include "mmsc/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>

namespace mmsc {

Matrix fuse_coefficients(std::span<const Matrix> omega) {
  if (omega.empty()) throw DimensionError("fuse_coefficients: empty coefficient group");
  Matrix total = Matrix::Zero(omega.front().rows(), omega.front().cols());
  for (const auto& w : omega) {
    if (w.rows() != total.rows() || w.cols() != total.cols()) {
      throw DimensionError("fuse_coefficients: coefficient matrices differ in shape");
    }
    total += w;
  }
  return total;
}

Matrix build_affinity(const Matrix& w_total, std::size_t keep_top_q) {
  if (w_total.rows() != w_total.cols()) throw DimensionError("build_affinity: coefficient matrix must be square");
  require_finite(w_total, "coefficient matrix");
  Matrix abs = w_total.cwiseAbs();
  abs.diagonal().setZero();
  if (keep_top_q > 0 && keep_top_q < static_cast<std::size_t>(abs.rows())) {
    for (Eigen::Index j = 0; j < abs.cols(); ++j) {
      std::vector<double> col(abs.col(j).data(), abs.col(j).data() + abs.rows());
      std::nth_element(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(keep_top_q - 1), col.end(),
                       std::greater<>());
      const double cutoff = col[keep_top_q - 1];
      std::size_t kept = 0;
      for (Eigen::Index i = 0; i < abs.rows(); ++i) {
        if (abs(i, j) >= cutoff && abs(i, j) > 0.0 && kept < keep_top_q) {
          ++kept;
        } else {
          abs(i, j) = 0.0;
        }
      }
    }
  }
  Matrix a = abs + abs.transpose();
  a.diagonal().setZero();
  return a;
}

bool is_valid_affinity(const Matrix& a) {
  if (a.rows() != a.cols()) return false;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (a(i, i) != 0.0) return false;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (!(a(i, j) >= 0.0) || a(i, j) != a(j, i)) return false;
    }
  }
  return true;
}

namespace {

KMeansResult lloyd(const Matrix& pts, std::size_t k, std::mt19937_64& rng, std::size_t max_iterations) {
  const Eigen::Index n = pts.rows();
  Matrix centers(static_cast<Eigen::Index>(k), pts.cols());

  // k-means++ seeding
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centers.row(0) = pts.row(first(rng));
  Vector d2 = (pts.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        r -= d2(pick);
        if (r <= 0.0) break;
      }
    } else {
      pick = first(rng);
    }
    centers.row(static_cast<Eigen::Index>(c)) = pts.row(pick);
    d2 = d2.cwiseMin((pts.rowwise() - centers.row(static_cast<Eigen::Index>(c))).rowwise().squaredNorm());
  }

  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  double inertia = 0.0;
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = (pts.row(i) - centers.row(static_cast<Eigen::Index>(c))).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      inertia += best_d;
      if (labels[static_cast<std::size_t>(i)] != best) {
        labels[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(k), pts.cols());
    std::vector<std::size_t> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[static_cast<std::size_t>(i)]) += pts.row(i);
      ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    for (std::size_t c = 0; c < k; ++c) {
      // empty clusters keep their previous center
      if (counts[c] > 0) centers.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
    }
  }
  return {labels, inertia};
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t restarts,
                    std::size_t max_iterations) {
  if (k == 0 || static_cast<Eigen::Index>(k) > points.rows()) {
    throw DimensionError("kmeans: need 1 <= k <= number of points");
  }
  std::mt19937_64 rng(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
    KMeansResult res = lloyd(points, k, rng, max_iterations);
    if (res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

std::vector<int> spectral_cluster(const Matrix& affinity, std::size_t clusters, std::uint64_t seed,
                                  const SpectralOptions& options) {
  if (clusters < 2) throw DimensionError("spectral_cluster: need at least 2 clusters");
  if (affinity.rows() != affinity.cols()) throw DimensionError("spectral_cluster: affinity must be square");
  if (static_cast<Eigen::Index>(clusters) > affinity.rows()) {
    throw DimensionError("spectral_cluster: more clusters than samples");
  }
  require_finite(affinity, "affinity");
  if (affinity.cwiseAbs().maxCoeff() == 0.0) {
    throw NumericError("spectral_cluster: affinity is identically zero");
  }

  const Vector degree = affinity.rowwise().sum();
  const Vector inv_sqrt = degree.unaryExpr([](double d) { return d > 0.0 ? 1.0 / std::sqrt(d) : 0.0; });
  const Matrix normalized = inv_sqrt.asDiagonal() * affinity * inv_sqrt.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(normalized);
  if (eig.info() != Eigen::Success) throw NumericError("spectral_cluster: eigendecomposition failed");

  const Eigen::Index n = affinity.rows();
  const Eigen::Index p = static_cast<Eigen::Index>(clusters);
  Matrix embed = eig.eigenvectors().rightCols(p);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = embed.row(i).norm();
    if (norm > 0.0) embed.row(i) /= norm;
  }
  return kmeans(embed, clusters, seed, options.restarts, options.max_iterations).labels;
}

std::vector<std::size_t> hungarian(const Matrix& cost) {
  // Shortest augmenting path formulation with potentials, 1-indexed internally.
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  if (cost.cols() != cost.rows()) throw DimensionError("hungarian: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n, 0);
  for (std::size_t j = 1; j <= n; ++j) {
    if (match[j] != 0) assignment[match[j] - 1] = j - 1;
  }
  return assignment;
}

namespace {

struct Contingency {
  std::vector<int> pred_ids, truth_ids;
  Matrix table;  // pred x truth counts
};

Contingency contingency(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) throw DimensionError("label vectors differ in length");
  if (pred.empty()) throw DimensionError("label vectors are empty");
  Contingency c;
  std::set<int> ps(pred.begin(), pred.end()), ts(truth.begin(), truth.end());
  c.pred_ids.assign(ps.begin(), ps.end());
  c.truth_ids.assign(ts.begin(), ts.end());
  std::map<int, Eigen::Index> pi, ti;
  for (std::size_t i = 0; i < c.pred_ids.size(); ++i) pi[c.pred_ids[i]] = static_cast<Eigen::Index>(i);
  for (std::size_t i = 0; i < c.truth_ids.size(); ++i) ti[c.truth_ids[i]] = static_cast<Eigen::Index>(i);
  c.table = Matrix::Zero(static_cast<Eigen::Index>(c.pred_ids.size()), static_cast<Eigen::Index>(c.truth_ids.size()));
  for (std::size_t i = 0; i < pred.size(); ++i) c.table(pi[pred[i]], ti[truth[i]]) += 1.0;
  return c;
}

// Square padded assignment maximizing matched counts; result[pred index] = truth index or -1.
std::vector<Eigen::Index> match_labels(const Contingency& c) {
  const Eigen::Index m = std::max(c.table.rows(), c.table.cols());
  Matrix cost = Matrix::Zero(m, m);
  cost.topLeftCorner(c.table.rows(), c.table.cols()) = -c.table;
  const auto assign = hungarian(cost);
  std::vector<Eigen::Index> out(static_cast<std::size_t>(c.table.rows()), -1);
  for (Eigen::Index r = 0; r < c.table.rows(); ++r) {
    const auto col = static_cast<Eigen::Index>(assign[static_cast<std::size_t>(r)]);
    out[static_cast<std::size_t>(r)] = col < c.table.cols() ? col : -1;
  }
  return out;
}

}  // namespace

double cluster_accuracy(std::span<const int> pred, std::span<const int> truth) {
  const Contingency c = contingency(pred, truth);
  const auto m = match_labels(c);
  double hits = 0.0;
  for (std::size_t r = 0; r < m.size(); ++r) {
    if (m[r] >= 0) hits += c.table(static_cast<Eigen::Index>(r), m[r]);
  }
  return hits / static_cast<double>(pred.size());
}

std::vector<int> align_labels(std::span<const int> pred, std::span<const int> truth) {
  const Contingency c = contingency(pred, truth);
  const auto m = match_labels(c);
  std::map<int, int> to_truth;
  int spare = c.truth_ids.empty() ? 0 : c.truth_ids.back() + 1;
  for (std::size_t r = 0; r < m.size(); ++r) {
    to_truth[c.pred_ids[r]] = m[r] >= 0 ? c.truth_ids[static_cast<std::size_t>(m[r])] : spare++;
  }
  std::vector<int> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = to_truth[pred[i]];
  return out;
}

AriNmi ari_nmi(std::span<const int> pred, std::span<const int> truth) {
  const Contingency c = contingency(pred, truth);
  const double n = static_cast<double>(pred.size());
  auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };

  const Vector a = c.table.rowwise().sum();
  const Vector b = c.table.colwise().sum().transpose();
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (Eigen::Index i = 0; i < c.table.rows(); ++i)
    for (Eigen::Index j = 0; j < c.table.cols(); ++j) sum_ij += comb2(c.table(i, j));
  for (Eigen::Index i = 0; i < a.size(); ++i) sum_a += comb2(a(i));
  for (Eigen::Index j = 0; j < b.size(); ++j) sum_b += comb2(b(j));
  const double expected = n > 1.0 ? sum_a * sum_b / comb2(n) : 0.0;
  const double max_index = 0.5 * (sum_a + sum_b);
  AriNmi out;
  out.ari = max_index == expected ? 1.0 : (sum_ij - expected) / (max_index - expected);

  double h_pred = 0.0, h_truth = 0.0, mi = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) if (a(i) > 0) h_pred -= a(i) / n * std::log(a(i) / n);
  for (Eigen::Index j = 0; j < b.size(); ++j) if (b(j) > 0) h_truth -= b(j) / n * std::log(b(j) / n);
  for (Eigen::Index i = 0; i < c.table.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.table.cols(); ++j) {
      const double nij = c.table(i, j);
      if (nij > 0) mi += nij / n * std::log(n * nij / (a(i) * b(j)));
    }
  }
  if (c.truth_ids.size() < 2 || c.pred_ids.size() < 2) {
    out.nmi = 0.0;
    out.nmi_degenerate = true;
  } else {
    out.nmi = std::clamp(mi / (0.5 * (h_pred + h_truth)), 0.0, 1.0);
  }
  return out;
}

MetricSet score_labels(std::span<const int> pred, std::span<const int> truth) {
  const AriNmi an = ari_nmi(pred, truth);
  return {cluster_accuracy(pred, truth), an.ari, an.nmi};
}

ClusterSubspaces fit_cluster_subspaces(std::span<const Matrix> features, std::span<const int> labels,
                                       std::optional<std::size_t> dim, double variance_fraction) {
  if (features.empty()) throw DimensionError("fit_cluster_subspaces: no modalities");
  for (const auto& f : features) {
    if (static_cast<std::size_t>(f.rows()) != labels.size()) {
      throw DimensionError("fit_cluster_subspaces: feature rows do not match label count");
    }
  }
  std::set<int> ids(labels.begin(), labels.end());
  ClusterSubspaces out;
  out.cluster_ids.assign(ids.begin(), ids.end());
  for (int id : out.cluster_ids) {
    std::vector<Eigen::Index> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == id) members.push_back(static_cast<Eigen::Index>(i));
    }
    const std::size_t m = members.size();
    const std::size_t needed = dim ? *dim + 1 : 2;
    if (m < needed) {
      throw DimensionError("cluster " + std::to_string(id) + " has " + std::to_string(m) +
                           " members, needs at least " + std::to_string(needed));
    }
    std::vector<ModalitySubspace> per_modality;
    for (const auto& f : features) {
      Matrix x(static_cast<Eigen::Index>(m), f.cols());
      for (std::size_t r = 0; r < m; ++r) x.row(static_cast<Eigen::Index>(r)) = f.row(members[r]);
      ModalitySubspace s;
      s.mean = x.colwise().mean().transpose();
      x.rowwise() -= s.mean.transpose();
      Eigen::BDCSVD<Matrix> svd(x, Eigen::ComputeThinV);
      const Vector sv = svd.singularValues();
      std::size_t d = 0;
      if (dim) {
        d = *dim;
      } else {
        const double total = sv.squaredNorm();
        double acc = 0.0;
        while (d < static_cast<std::size_t>(sv.size()) && (total == 0.0 || acc < variance_fraction * total)) {
          acc += sv(static_cast<Eigen::Index>(d)) * sv(static_cast<Eigen::Index>(d));
          ++d;
        }
        d = std::max<std::size_t>(d, 1);
      }
      d = std::min<std::size_t>(d, static_cast<std::size_t>(svd.matrixV().cols()));
      s.basis = svd.matrixV().leftCols(static_cast<Eigen::Index>(d));
      per_modality.push_back(std::move(s));
    }
    out.clusters.push_back(std::move(per_modality));
  }
  return out;
}

int classify(std::span<const Vector> sample, const ClusterSubspaces& subspaces,
             std::span<const std::size_t> available) {
  if (available.empty()) throw DimensionError("classify: no available modalities");
  if (subspaces.clusters.empty()) throw DimensionError("classify: no fitted clusters");
  const std::size_t T = subspaces.clusters.front().size();
  for (std::size_t t : available) {
    if (t >= T || t >= sample.size()) {
      throw DimensionError("classify: modality index " + std::to_string(t) + " out of range");
    }
  }
  int best = subspaces.cluster_ids.front();
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < subspaces.clusters.size(); ++p) {
    double score = 0.0;
    for (std::size_t t : available) {
      const auto& s = subspaces.clusters[p][t];
      score += (s.basis.transpose() * (sample[t] - s.mean)).squaredNorm();
    }
    if (score > best_score) {  // strict: ties keep the lower id
      best_score = score;
      best = subspaces.cluster_ids[p];
    }
  }
  return best;
}

std::vector<int> classify_all(std::span<const Matrix> features, const ClusterSubspaces& subspaces,
                              std::span<const std::size_t> available) {
  if (features.empty()) throw DimensionError("classify_all: no modalities");
  const Eigen::Index n = features.front().rows();
  std::vector<int> out(static_cast<std::size_t>(n));
  std::vector<Vector> sample(features.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < features.size(); ++t) sample[t] = features[t].row(i).transpose();
    out[static_cast<std::size_t>(i)] = classify(sample, subspaces, available);
  }
  return out;
}

}  // namespace mmsc
