#include "roidiff/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "roidiff/rng.hpp"

namespace roidiff {

Tensor fc_matrix(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("fc_matrix: expected {N,T}");
  const int n = static_cast<int>(x.dim(0));
  const int t = static_cast<int>(x.dim(1));
  if (t < 3) throw std::invalid_argument("fc_matrix: need at least 3 timepoints");

  // rows normalized to zero mean / unit norm in double; FC = Z Z^T
  std::vector<double> z(static_cast<size_t>(n) * t);
  std::vector<uint8_t> degenerate(n, 0);
  for (int r = 0; r < n; ++r) {
    const float* row = x.data() + static_cast<size_t>(r) * t;
    double mean = 0.0;
    for (int a = 0; a < t; ++a) mean += row[a];
    mean /= t;
    double ss = 0.0;
    for (int a = 0; a < t; ++a) {
      double d = row[a] - mean;
      z[static_cast<size_t>(r) * t + a] = d;
      ss += d * d;
    }
    if (ss <= 0.0) {
      degenerate[r] = 1;
      continue;
    }
    double inv = 1.0 / std::sqrt(ss);
    for (int a = 0; a < t; ++a) z[static_cast<size_t>(r) * t + a] *= inv;
  }

  Tensor fc({n, n});
  for (int r = 0; r < n; ++r) {
    fc.at({r, r}) = 1.0f;
    for (int q = r + 1; q < n; ++q) {
      double v = 0.0;
      if (!degenerate[r] && !degenerate[q]) {
        const double* zr = z.data() + static_cast<size_t>(r) * t;
        const double* zq = z.data() + static_cast<size_t>(q) * t;
        for (int a = 0; a < t; ++a) v += zr[a] * zq[a];
        v = std::clamp(v, -1.0, 1.0);
      }
      fc.at({r, q}) = static_cast<float>(v);
      fc.at({q, r}) = static_cast<float>(v);
    }
  }
  return fc;
}

Tensor group_fc(const std::vector<Tensor>& sessions) {
  if (sessions.empty()) throw std::invalid_argument("group_fc: empty cohort");
  Tensor acc = fc_matrix(sessions[0]);
  std::vector<double> sum(acc.numel());
  for (size_t i = 0; i < acc.numel(); ++i) sum[i] = acc.data()[i];
  for (size_t s = 1; s < sessions.size(); ++s) {
    Tensor f = fc_matrix(sessions[s]);
    if (!f.same_shape(acc)) throw std::invalid_argument("group_fc: mismatched ROI counts");
    for (size_t i = 0; i < f.numel(); ++i) sum[i] += f.data()[i];
  }
  double inv = 1.0 / static_cast<double>(sessions.size());
  for (size_t i = 0; i < acc.numel(); ++i) acc.data()[i] = static_cast<float>(sum[i] * inv);
  return acc;
}

FcError fc_error(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || !a.same_shape(b) || a.dim(0) != a.dim(1))
    throw std::invalid_argument("fc_error: expected two equal square matrices");
  const int n = static_cast<int>(a.dim(0));
  double abs_acc = 0.0, sq_acc = 0.0;
  long count = 0;
  for (int r = 0; r < n; ++r)
    for (int q = r + 1; q < n; ++q) {
      double d = static_cast<double>(a.at({r, q})) - b.at({r, q});
      abs_acc += std::abs(d);
      sq_acc += d * d;
      ++count;
    }
  if (count == 0) throw std::invalid_argument("fc_error: matrix too small");
  FcError e;
  e.mae = abs_acc / count;
  e.mse = sq_acc / count;
  e.rmse = std::sqrt(e.mse);
  return e;
}

// ---------------------------------------------------------------------------
// Ridge probe

namespace {

// Cholesky solve of A X = B for symmetric positive definite A (n x n),
// B/X n x m, all double, in place.
void spd_solve(std::vector<double>& a, std::vector<double>& b, int n, int m) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<size_t>(i) * n + j];
      for (int k = 0; k < j; ++k)
        s -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
      if (i == j) {
        if (s <= 0.0) throw std::runtime_error("spd_solve: matrix not positive definite");
        a[static_cast<size_t>(i) * n + j] = std::sqrt(s);
      } else {
        a[static_cast<size_t>(i) * n + j] = s / a[static_cast<size_t>(j) * n + j];
      }
    }
  }
  // forward then backward substitution, column by column
  for (int c = 0; c < m; ++c) {
    for (int i = 0; i < n; ++i) {
      double s = b[static_cast<size_t>(i) * m + c];
      for (int k = 0; k < i; ++k) s -= a[static_cast<size_t>(i) * n + k] * b[static_cast<size_t>(k) * m + c];
      b[static_cast<size_t>(i) * m + c] = s / a[static_cast<size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
      double s = b[static_cast<size_t>(i) * m + c];
      for (int k = i + 1; k < n; ++k) s -= a[static_cast<size_t>(k) * n + i] * b[static_cast<size_t>(k) * m + c];
      b[static_cast<size_t>(i) * m + c] = s / a[static_cast<size_t>(i) * n + i];
    }
  }
}

struct RidgeModel {
  std::vector<double> w;  // D x m
  std::vector<double> feat_mean, feat_std;
  int dim = 0, outputs = 0;
};

// Fits ridge on standardized features. targets: n x m (already centered as
// the caller wants). Uses the primal (D x D) or dual (n x n) normal
// equations, whichever is smaller.
RidgeModel ridge_fit(const float* X, int n, int D, const std::vector<double>& Y, int m,
                     double lambda) {
  RidgeModel model;
  model.dim = D;
  model.outputs = m;
  model.feat_mean.assign(D, 0.0);
  model.feat_std.assign(D, 1.0);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < D; ++d) model.feat_mean[d] += X[static_cast<size_t>(i) * D + d];
  for (int d = 0; d < D; ++d) model.feat_mean[d] /= n;
  std::vector<double> var(D, 0.0);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < D; ++d) {
      double v = X[static_cast<size_t>(i) * D + d] - model.feat_mean[d];
      var[d] += v * v;
    }
  for (int d = 0; d < D; ++d)
    model.feat_std[d] = var[d] > 0.0 ? std::sqrt(var[d] / n) : 1.0;

  std::vector<double> Z(static_cast<size_t>(n) * D);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < D; ++d)
      Z[static_cast<size_t>(i) * D + d] =
          (X[static_cast<size_t>(i) * D + d] - model.feat_mean[d]) / model.feat_std[d];

  model.w.assign(static_cast<size_t>(D) * m, 0.0);
  if (D <= n) {
    // primal: (Z^T Z + lambda I) W = Z^T Y
    std::vector<double> G(static_cast<size_t>(D) * D, 0.0);
    for (int i = 0; i < n; ++i) {
      const double* zi = Z.data() + static_cast<size_t>(i) * D;
      for (int a = 0; a < D; ++a)
        for (int b = 0; b <= a; ++b) G[static_cast<size_t>(a) * D + b] += zi[a] * zi[b];
    }
    for (int a = 0; a < D; ++a) {
      for (int b = a + 1; b < D; ++b)
        G[static_cast<size_t>(a) * D + b] = G[static_cast<size_t>(b) * D + a];
      G[static_cast<size_t>(a) * D + a] += lambda;
    }
    std::vector<double> rhs(static_cast<size_t>(D) * m, 0.0);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < D; ++d)
        for (int c = 0; c < m; ++c)
          rhs[static_cast<size_t>(d) * m + c] += Z[static_cast<size_t>(i) * D + d] * Y[static_cast<size_t>(i) * m + c];
    spd_solve(G, rhs, D, m);
    model.w = std::move(rhs);
  } else {
    // dual: W = Z^T (Z Z^T + lambda I)^{-1} Y
    std::vector<double> K(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) {
        double s = 0.0;
        const double* zi = Z.data() + static_cast<size_t>(i) * D;
        const double* zj = Z.data() + static_cast<size_t>(j) * D;
        for (int d = 0; d < D; ++d) s += zi[d] * zj[d];
        K[static_cast<size_t>(i) * n + j] = s;
        K[static_cast<size_t>(j) * n + i] = s;
      }
    for (int i = 0; i < n; ++i) K[static_cast<size_t>(i) * n + i] += lambda;
    std::vector<double> alpha = Y;  // n x m
    spd_solve(K, alpha, n, m);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < D; ++d) {
        double zi = Z[static_cast<size_t>(i) * D + d];
        for (int c = 0; c < m; ++c)
          model.w[static_cast<size_t>(d) * m + c] += zi * alpha[static_cast<size_t>(i) * m + c];
      }
  }
  return model;
}

void ridge_predict(const RidgeModel& model, const float* X, int n, std::vector<double>& out) {
  out.assign(static_cast<size_t>(n) * model.outputs, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < model.dim; ++d) {
      double z = (X[static_cast<size_t>(i) * model.dim + d] - model.feat_mean[d]) /
                 model.feat_std[d];
      for (int c = 0; c < model.outputs; ++c)
        out[static_cast<size_t>(i) * model.outputs + c] +=
            z * model.w[static_cast<size_t>(d) * model.outputs + c];
    }
  }
}

constexpr double kRidgeGrid[] = {1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3};

struct GatherResult {
  std::vector<float> x;
  std::vector<float> y;
};

GatherResult gather(const Tensor& feats, const std::vector<float>& labels,
                    const std::vector<int>& rows) {
  const int D = static_cast<int>(feats.dim(1));
  GatherResult g;
  g.x.resize(rows.size() * static_cast<size_t>(D));
  g.y.resize(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy(feats.data() + static_cast<size_t>(rows[i]) * D,
              feats.data() + static_cast<size_t>(rows[i] + 1) * D,
              g.x.begin() + static_cast<long>(i) * D);
    g.y[i] = labels[rows[i]];
  }
  return g;
}

double eval_ridge(const float* Xtr, const std::vector<float>& ytr, int ntr, const float* Xte,
                  const std::vector<float>& yte, int nte, int D, TaskKind kind, int n_classes,
                  double lambda) {
  if (kind == TaskKind::Classification) {
    std::vector<double> Y(static_cast<size_t>(ntr) * n_classes, 0.0);
    for (int i = 0; i < ntr; ++i) Y[static_cast<size_t>(i) * n_classes + static_cast<int>(ytr[i])] = 1.0;
    RidgeModel m = ridge_fit(Xtr, ntr, D, Y, n_classes, lambda);
    std::vector<double> pred;
    ridge_predict(m, Xte, nte, pred);
    int correct = 0;
    for (int i = 0; i < nte; ++i) {
      int best = 0;
      for (int c = 1; c < n_classes; ++c)
        if (pred[static_cast<size_t>(i) * n_classes + c] >
            pred[static_cast<size_t>(i) * n_classes + best])
          best = c;
      if (best == static_cast<int>(yte[i])) ++correct;
    }
    return static_cast<double>(correct) / nte;  // higher is better
  }
  // regression: standardized-target MSE (negated so higher is better)
  double mu = 0.0;
  for (int i = 0; i < ntr; ++i) mu += ytr[i];
  mu /= ntr;
  double var = 0.0;
  for (int i = 0; i < ntr; ++i) var += (ytr[i] - mu) * (ytr[i] - mu);
  var /= ntr;
  double sd = var > 0.0 ? std::sqrt(var) : 1.0;
  std::vector<double> Y(ntr);
  for (int i = 0; i < ntr; ++i) Y[i] = (ytr[i] - mu) / sd;
  RidgeModel m = ridge_fit(Xtr, ntr, D, Y, 1, lambda);
  std::vector<double> pred;
  ridge_predict(m, Xte, nte, pred);
  double mse = 0.0;
  for (int i = 0; i < nte; ++i) {
    double d = pred[i] - (yte[i] - mu) / sd;
    mse += d * d;
  }
  return -mse / nte;
}

}  // namespace

std::vector<std::vector<int>> stratified_folds(const std::vector<float>& labels,
                                               const std::vector<int>& groups, TaskKind kind,
                                               int folds, uint64_t seed) {
  const int n = static_cast<int>(labels.size());
  std::vector<int> gid = groups;
  if (gid.empty()) {
    gid.resize(n);
    std::iota(gid.begin(), gid.end(), 0);
  }
  // unique groups with a representative label
  std::map<int, float> group_label;
  std::map<int, std::vector<int>> group_rows;
  for (int i = 0; i < n; ++i) {
    group_rows[gid[i]].push_back(i);
    group_label.emplace(gid[i], labels[i]);
  }
  std::vector<int> gids;
  for (const auto& [g, _] : group_rows) gids.push_back(g);
  Rng rng(derive_seed(seed, 0xf01d));
  for (size_t k = gids.size(); k > 1; --k) std::swap(gids[k - 1], gids[rng.below(k)]);

  std::vector<int> order;
  if (kind == TaskKind::Classification) {
    // deal each class round-robin
    std::map<int, std::vector<int>> per_class;
    for (int g : gids) per_class[static_cast<int>(group_label[g])].push_back(g);
    for (auto& [cls, v] : per_class) order.insert(order.end(), v.begin(), v.end());
  } else {
    // quantile stratification: stable sort shuffled groups by target
    order = gids;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return group_label[a] < group_label[b]; });
  }
  std::vector<std::vector<int>> fold_rows(folds);
  for (size_t k = 0; k < order.size(); ++k) {
    auto& rows = group_rows[order[k]];
    auto& dst = fold_rows[k % folds];
    dst.insert(dst.end(), rows.begin(), rows.end());
  }
  for (auto& rows : fold_rows) std::sort(rows.begin(), rows.end());
  return fold_rows;
}

ProbeResult linear_probe(const Tensor& features, const std::vector<float>& labels,
                         TaskKind kind, int folds, uint64_t seed,
                         const std::vector<int>& groups) {
  if (features.rank() != 2) throw std::invalid_argument("linear_probe: features must be {B,D}");
  const int n = static_cast<int>(features.dim(0));
  const int D = static_cast<int>(features.dim(1));
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("linear_probe: label count mismatch");
  if (folds < 2) throw std::invalid_argument("linear_probe: folds must be >= 2");
  if (!groups.empty() && static_cast<int>(groups.size()) != n)
    throw std::invalid_argument("linear_probe: group count mismatch");

  int n_classes = 0;
  if (kind == TaskKind::Classification) {
    std::set<int> seen;
    for (float v : labels) {
      if (v < 0 || v != std::floor(v))
        throw std::invalid_argument("linear_probe: class labels must be nonnegative integers");
      seen.insert(static_cast<int>(v));
      n_classes = std::max(n_classes, static_cast<int>(v) + 1);
    }
    if (seen.size() < 2)
      throw std::invalid_argument("linear_probe: need at least 2 distinct classes");
  } else {
    float lo = *std::min_element(labels.begin(), labels.end());
    float hi = *std::max_element(labels.begin(), labels.end());
    if (!(hi > lo)) throw std::invalid_argument("linear_probe: constant regression target");
  }

  std::vector<std::vector<int>> fold_rows = stratified_folds(labels, groups, kind, folds, seed);
  ProbeResult res;
  res.kind = kind;
  res.folds = folds;
  res.seed = seed;

  std::vector<double> accs, mses, rs;
  for (int f = 0; f < folds; ++f) {
    std::vector<int> test_rows = fold_rows[f];
    std::vector<int> train_rows;
    for (int g = 0; g < folds; ++g)
      if (g != f) train_rows.insert(train_rows.end(), fold_rows[g].begin(), fold_rows[g].end());
    if (test_rows.empty() || train_rows.empty())
      throw std::invalid_argument("linear_probe: degenerate fold (too few samples)");

    GatherResult tr = gather(features, labels, train_rows);
    GatherResult te = gather(features, labels, test_rows);
    const int ntr = static_cast<int>(train_rows.size());
    const int nte = static_cast<int>(test_rows.size());

    // inner-fold lambda selection on the training part
    double best_lambda = kRidgeGrid[0], best_score = -1e300;
    {
      const int inner = 4;
      auto isplit = stratified_folds(tr.y, {}, kind, inner, derive_seed(seed, 0x1aa, f));
      for (double lambda : kRidgeGrid) {
        double score = 0.0;
        bool usable = true;
        for (int i = 0; i < inner; ++i) {
          std::vector<int> iv = isplit[i], it;
          for (int g = 0; g < inner; ++g)
            if (g != i) it.insert(it.end(), isplit[g].begin(), isplit[g].end());
          if (iv.empty() || it.empty()) {
            usable = false;
            break;
          }
          std::vector<float> xit(it.size() * static_cast<size_t>(D)), xiv(iv.size() * static_cast<size_t>(D));
          std::vector<float> yit(it.size()), yiv(iv.size());
          for (size_t k = 0; k < it.size(); ++k) {
            std::copy(tr.x.begin() + static_cast<long>(it[k]) * D,
                      tr.x.begin() + static_cast<long>(it[k] + 1) * D,
                      xit.begin() + static_cast<long>(k) * D);
            yit[k] = tr.y[it[k]];
          }
          for (size_t k = 0; k < iv.size(); ++k) {
            std::copy(tr.x.begin() + static_cast<long>(iv[k]) * D,
                      tr.x.begin() + static_cast<long>(iv[k] + 1) * D,
                      xiv.begin() + static_cast<long>(k) * D);
            yiv[k] = tr.y[iv[k]];
          }
          score += eval_ridge(xit.data(), yit, static_cast<int>(it.size()), xiv.data(), yiv,
                              static_cast<int>(iv.size()), D, kind, n_classes, lambda);
        }
        if (!usable) continue;
        if (score > best_score + 1e-12) {
          best_score = score;
          best_lambda = lambda;
        }
      }
    }

    if (kind == TaskKind::Classification) {
      std::vector<double> Y(static_cast<size_t>(ntr) * n_classes, 0.0);
      for (int i = 0; i < ntr; ++i)
        Y[static_cast<size_t>(i) * n_classes + static_cast<int>(tr.y[i])] = 1.0;
      RidgeModel m = ridge_fit(tr.x.data(), ntr, D, Y, n_classes, best_lambda);
      std::vector<double> pred;
      ridge_predict(m, te.x.data(), nte, pred);
      int correct = 0;
      for (int i = 0; i < nte; ++i) {
        int best = 0;
        for (int c = 1; c < n_classes; ++c)
          if (pred[static_cast<size_t>(i) * n_classes + c] >
              pred[static_cast<size_t>(i) * n_classes + best])
            best = c;
        if (best == static_cast<int>(te.y[i])) ++correct;
      }
      double acc = static_cast<double>(correct) / nte;
      accs.push_back(acc);
      res.fold_primary.push_back(acc);
    } else {
      double mu = 0.0;
      for (int i = 0; i < ntr; ++i) mu += tr.y[i];
      mu /= ntr;
      double var = 0.0;
      for (int i = 0; i < ntr; ++i) var += (tr.y[i] - mu) * (tr.y[i] - mu);
      var /= ntr;
      double sd = var > 0.0 ? std::sqrt(var) : 1.0;
      std::vector<double> Y(ntr);
      for (int i = 0; i < ntr; ++i) Y[i] = (tr.y[i] - mu) / sd;
      RidgeModel m = ridge_fit(tr.x.data(), ntr, D, Y, 1, best_lambda);
      std::vector<double> pred;
      ridge_predict(m, te.x.data(), nte, pred);
      double mse = 0.0;
      double pm = 0.0, tm = 0.0;
      std::vector<double> tstd(nte);
      for (int i = 0; i < nte; ++i) {
        tstd[i] = (te.y[i] - mu) / sd;
        double d = pred[i] - tstd[i];
        mse += d * d;
        pm += pred[i];
        tm += tstd[i];
      }
      mse /= nte;
      pm /= nte;
      tm /= nte;
      double sxy = 0.0, sxx = 0.0, syy = 0.0;
      for (int i = 0; i < nte; ++i) {
        sxy += (pred[i] - pm) * (tstd[i] - tm);
        sxx += (pred[i] - pm) * (pred[i] - pm);
        syy += (tstd[i] - tm) * (tstd[i] - tm);
      }
      double r = (sxx > 0.0 && syy > 0.0) ? sxy / std::sqrt(sxx * syy) : 0.0;
      mses.push_back(mse);
      rs.push_back(r);
      res.fold_primary.push_back(r);
    }
  }

  auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size()));
  };
  if (kind == TaskKind::Classification) {
    mean_std(accs, res.accuracy_mean, res.accuracy_std);
  } else {
    mean_std(mses, res.mse_mean, res.mse_std);
    mean_std(rs, res.r_mean, res.r_std);
  }
  return res;
}

}  // namespace roidiff
