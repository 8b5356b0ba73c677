#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "cmil/cohort.hpp"
#include "cmil/init.hpp"
#include "cmil/ops.hpp"
#include "cmil/optimizer.hpp"
#include "cmil/rng.hpp"

// Cross-scale adaptive feature disentangling: estimate the slide-preparation
// confounder distribution from thumbnail features via adaptive soft clustering
// and subtract the per-cluster bias from patch features.

namespace cmil {

struct DisentangleConfig {
  std::size_t thumbnail_dim = 0;  // d_f
  std::size_t embed_dim = 0;      // d_t; 0 = max(4, d_f / 2)
  std::size_t k_max = 6;
  double gumbel_temperature = 4.0;
  double kmeans_sharpness = 1.0;  // beta in softmax(-beta * ||t - c||^2)
  int kmeans_iters = 10;
  double active_threshold = 0.1;  // w^k above this counts toward K_effective
  std::size_t bias_sample_count = 64;  // patches sampled per slide for the stats
  int logit_refresh_steps = 300;
  double logit_refresh_lr = 0.1;
  double logit_entropy_weight = 0.25;

  std::size_t effective_embed_dim() const {
    return embed_dim ? embed_dim : std::max<std::size_t>(4, thumbnail_dim / 2);
  }
};

// Projection, learnable cluster logits and the per-epoch clustering state.
// The stored logits are unconstrained; s^k = exp(logit) keeps them positive.
template <typename T>
struct ClusterModel {
  DisentangleConfig cfg;
  Tensor<T>* proj_w = nullptr;        // [d_f, d_t]
  Tensor<T>* proj_b = nullptr;        // [d_t]
  Tensor<T>* cluster_logits = nullptr;  // [k_max]
  // epoch state, refreshed between epochs and frozen inside one
  std::size_t k_effective = 1;
  std::vector<T> centers;  // k_effective x d_t
};

template <typename T>
ClusterModel<T> make_cluster_model(ParamStore<T>& store, const std::string& prefix,
                                   const DisentangleConfig& cfg, Rng rng) {
  if (cfg.thumbnail_dim == 0) fail("cluster model: thumbnail_dim must be set");
  if (cfg.k_max < 1) fail("cluster model: k_max must be >= 1");
  ClusterModel<T> m;
  m.cfg = cfg;
  const std::size_t dt = cfg.effective_embed_dim();
  m.proj_w = &store.add(prefix + ".proj_w", {cfg.thumbnail_dim, dt});
  m.proj_b = &store.add(prefix + ".proj_b", {dt});
  m.cluster_logits = &store.add(prefix + ".cluster_logits", {cfg.k_max});
  init_xavier(*m.proj_w, rng.substream(1));
  return m;  // logits start uniform (all zero)
}

// t = thumbnail * W + b, one embedding row per slide.
template <typename T>
Value<T> project_thumbnails(Tape<T>& tp, Value<T> thumbnails, const ClusterModel<T>& m) {
  if (thumbnails.shape().size() != 2 || thumbnails.shape()[1] != m.cfg.thumbnail_dim)
    fail("project_thumbnails: shape " + shape_str(thumbnails.shape()) +
         " does not match thumbnail_dim " + std::to_string(m.cfg.thumbnail_dim));
  return add_bias_rows(matmul(thumbnails, tp.param(*m.proj_w)), tp.param(*m.proj_b));
}

// --- adaptive cluster count -------------------------------------------------------

template <typename T>
struct ClusterCount {
  Value<T> w;  // gumbel-softmax weights over k_max clusters (on tape)
  std::size_t k_effective = 1;
};

// w = softmax((log s + gumbel) / temperature); K_effective counts entries above
// the activity threshold, clamped to >= 1. The count itself is a detached
// integer; gradients reach the logits only through w.
template <typename T>
ClusterCount<T> effective_cluster_count(Tape<T>& tp, Tensor<T>& cluster_logits,
                                        T temperature, Rng& rng, T threshold = T(0.1)) {
  if (temperature <= T(0)) fail("effective_cluster_count: temperature must be > 0");
  const std::size_t k_max = cluster_logits.size();
  if (k_max < 1) fail("effective_cluster_count: k_max must be >= 1");
  std::vector<T> noise(k_max);
  for (auto& e : noise) e = T(rng.gumbel());
  ClusterCount<T> out;
  Value<T> z = scale(add(tp.param(cluster_logits), tp.constant({k_max}, noise)),
                     T(1) / temperature);
  out.w = softmax_vec(z);
  std::size_t count = 0;
  for (T wk : out.w.data())
    if (wk > threshold) ++count;
  out.k_effective = std::max<std::size_t>(count, 1);
  return out;
}

// --- k-means machinery ---------------------------------------------------------------

// K-means++ seeding (plain data, engine rng).
template <typename T>
std::vector<std::uint32_t> kmeans_pp_indices(const std::vector<T>& data, std::size_t n,
                                             std::size_t dim, std::size_t k, Rng& rng) {
  if (n < k) fail("kmeans_pp_indices: fewer points than clusters");
  auto dist2 = [&](std::size_t a, std::size_t b) {
    double acc = 0.0;
    for (std::size_t q = 0; q < dim; ++q) {
      const double d = double(data[a * dim + q]) - double(data[b * dim + q]);
      acc += d * d;
    }
    return acc;
  };
  std::vector<std::uint32_t> seeds;
  seeds.push_back(std::uint32_t(rng.uniform_int(n)));
  std::vector<double> best(n);
  while (seeds.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = dist2(i, seeds[0]);
      for (std::size_t s = 1; s < seeds.size(); ++s)
        best[i] = std::min(best[i], dist2(i, seeds[s]));
      total += best[i];
    }
    if (total <= 0.0) {
      // all remaining points coincide with chosen seeds; fall back to uniform
      seeds.push_back(std::uint32_t(rng.uniform_int(n)));
      continue;
    }
    double r = rng.uniform() * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      r -= best[i];
      if (r <= 0.0) { pick = i; break; }
    }
    seeds.push_back(std::uint32_t(pick));
  }
  return seeds;
}

// Plain Lloyd's iteration, used for refresh candidates (and as a test oracle).
template <typename T>
std::vector<T> kmeans_hard(const std::vector<T>& data, std::size_t n, std::size_t dim,
                           std::size_t k, Rng rng, int iters = 50) {
  auto seeds = kmeans_pp_indices(data, n, dim, k, rng);
  std::vector<T> centers(k * dim);
  for (std::size_t s = 0; s < k; ++s)
    for (std::size_t q = 0; q < dim; ++q) centers[s * dim + q] = data[seeds[s] * dim + q];
  std::vector<std::uint32_t> assign(n, 0);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      std::uint32_t ba = 0;
      for (std::uint32_t c = 0; c < k; ++c) {
        double acc = 0.0;
        for (std::size_t q = 0; q < dim; ++q) {
          const double d = double(data[i * dim + q]) - double(centers[c * dim + q]);
          acc += d * d;
        }
        if (acc < bd) { bd = acc; ba = c; }
      }
      if (assign[i] != ba) { assign[i] = ba; changed = true; }
    }
    std::vector<double> sums(k * dim, 0.0);
    std::vector<double> counts(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      counts[assign[i]] += 1.0;
      for (std::size_t q = 0; q < dim; ++q) sums[assign[i] * dim + q] += double(data[i * dim + q]);
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] > 0.0)
        for (std::size_t q = 0; q < dim; ++q) centers[c * dim + q] = T(sums[c * dim + q] / counts[c]);
    if (!changed) break;
  }
  return centers;
}

template <typename T>
struct SoftKmeansResult {
  Value<T> assignments;  // N x K, rows sum to 1
  Value<T> centers;      // K x d_t
};

// One soft assignment against fixed centers: softmax(-sharpness * ||t - c||^2).
template <typename T>
Value<T> soft_assign(Tape<T>& tp, Value<T> t_all, Value<T> centers, T sharpness) {
  (void)tp;
  Value<T> cross = scale(matmul_nt(t_all, centers), T(-2));
  Value<T> d2 = add_bias_cols(add_bias_rows(cross, rows_sqnorm(centers)),
                              rows_sqnorm(t_all));
  return softmax_rows(scale(d2, -sharpness));
}

// Differentiable soft k-means: k-means++ seeding from the engine rng, then
// `iters` assignment-weighted center updates, all recorded on the tape. The
// returned assignments are consistent with the returned (final) centers.
template <typename T>
SoftKmeansResult<T> soft_kmeans_assign(Tape<T>& tp, Value<T> t_all, std::size_t k,
                                       int iters, Rng& rng, T sharpness) {
  if (t_all.shape().size() != 2) fail("soft_kmeans_assign: embeddings must be a matrix");
  const std::size_t n = t_all.shape()[0];
  if (n < k) fail("soft_kmeans_assign: fewer embeddings (" + std::to_string(n) +
                  ") than clusters (" + std::to_string(k) + ")");
  if (iters < 1) fail("soft_kmeans_assign: iters must be >= 1");
  auto seeds = kmeans_pp_indices(t_all.data(), n, t_all.shape()[1], k, rng);
  Value<T> centers = gather_rows(t_all, seeds);
  Value<T> p;
  for (int it = 0; it < iters; ++it) {
    p = soft_assign(tp, t_all, centers, sharpness);
    Value<T> weighted = matmul_tn(p, t_all);                  // K x d_t
    Value<T> mass = reduce_sum_axis(p, 0);                    // K
    centers = scale_rows(weighted, reciprocal(mass));
  }
  SoftKmeansResult<T> out;
  out.centers = centers;
  out.assignments = soft_assign(tp, t_all, centers, sharpness);
  return out;
}

// --- confounder statistics ------------------------------------------------------------

template <typename T>
struct BiasModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::size_t sample_count_n = 0;
  std::vector<T> cluster_means;  // T_k, K x d
  std::vector<T> global_mean;    // T_0, d
  std::vector<T> cluster_bias;   // Bias_k = T_k - T_0, K x d (exact identity)
  std::vector<std::uint8_t> degenerate;  // clusters with zero assignment mass

  void rebuild_bias() {
    cluster_bias.assign(k * dim, T(0));
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t q = 0; q < dim; ++q)
        cluster_bias[c * dim + q] = cluster_means[c * dim + q] - global_mean[q];
  }
};

// Per-slide means over min(n, m_i) patches sampled without replacement;
// T_k = assignment-weighted average of slide means, T_0 = unweighted average.
// A cluster with zero assignment mass gets zero bias and a degenerate flag.
template <typename T>
BiasModel<T> estimate_bias(const std::vector<T>& assignments, std::size_t k,
                           const Cohort& cohort, const std::vector<std::size_t>& slide_idx,
                           std::size_t sample_count_n, Rng& rng) {
  const std::size_t n_slides = slide_idx.size();
  if (n_slides == 0) fail("estimate_bias: no slides");
  if (assignments.size() != n_slides * k) fail("estimate_bias: assignment shape mismatch");
  const std::size_t d = cohort.feature_dim;

  std::vector<double> slide_means(n_slides * d, 0.0);
  for (std::size_t i = 0; i < n_slides; ++i) {
    const SlideRecord& s = cohort.slides[slide_idx[i]];
    const std::size_t m = s.num_patches();
    const std::size_t take = std::min(sample_count_n, m);
    Rng sub = rng.substream(0xB1A5 + slide_idx[i]);
    std::vector<std::uint32_t> order(m);
    for (std::uint32_t j = 0; j < m; ++j) order[j] = j;
    for (std::size_t j = 0; j < take; ++j)
      std::swap(order[j], order[j + sub.uniform_int(m - j)]);
    for (std::size_t j = 0; j < take; ++j)
      for (std::size_t q = 0; q < d; ++q)
        slide_means[i * d + q] += double(s.patch_features[order[j] * d + q]);
    for (std::size_t q = 0; q < d; ++q) slide_means[i * d + q] /= double(take);
  }

  BiasModel<T> bm;
  bm.k = k;
  bm.dim = d;
  bm.sample_count_n = sample_count_n;
  bm.global_mean.assign(d, T(0));
  bm.cluster_means.assign(k * d, T(0));
  bm.degenerate.assign(k, 0);

  std::vector<double> global(d, 0.0);
  for (std::size_t i = 0; i < n_slides; ++i)
    for (std::size_t q = 0; q < d; ++q) global[q] += slide_means[i * d + q];
  for (std::size_t q = 0; q < d; ++q) bm.global_mean[q] = T(global[q] / double(n_slides));

  for (std::size_t c = 0; c < k; ++c) {
    double mass = 0.0;
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = 0; i < n_slides; ++i) {
      const double w = double(assignments[i * k + c]);
      mass += w;
      for (std::size_t q = 0; q < d; ++q) acc[q] += w * slide_means[i * d + q];
    }
    if (mass <= 1e-12) {
      bm.degenerate[c] = 1;  // zero bias for empty clusters
      for (std::size_t q = 0; q < d; ++q) bm.cluster_means[c * d + q] = bm.global_mean[q];
    } else {
      for (std::size_t q = 0; q < d; ++q) bm.cluster_means[c * d + q] = T(acc[q] / mass);
    }
  }
  bm.rebuild_bias();
  return bm;
}

// --- bias removal -------------------------------------------------------------------

// v~_j = v_j - sum_k p^k Bias_k, differentiable in all three inputs.
template <typename T>
Value<T> disentangle(Tape<T>& tp, Value<T> patch_features, Value<T> assignment_row,
                     Value<T> cluster_bias) {
  (void)tp;
  if (assignment_row.shape().size() != 1)
    fail("disentangle: assignment row must be a vector");
  const std::size_t k = assignment_row.shape()[0];
  if (cluster_bias.shape().size() != 2 || cluster_bias.shape()[0] != k)
    fail("disentangle: bias shape " + shape_str(cluster_bias.shape()) +
         " does not match assignments [" + std::to_string(k) + "]");
  if (patch_features.shape()[1] != cluster_bias.shape()[1])
    fail("disentangle: feature dim mismatch " + shape_str(patch_features.shape()) +
         " vs " + shape_str(cluster_bias.shape()));
  Value<T> shift =
      reshape(matmul_tn(reshape(assignment_row, {k, 1}), cluster_bias),
              {cluster_bias.shape()[1]});
  return add_bias_rows(patch_features, neg(shift));
}

// --- per-epoch logit calibration --------------------------------------------------------

// The paper leaves the training signal for the cluster logits implicit; here
// they are refreshed once per epoch by a small inner optimization on the
// current (detached) embeddings: a gaussian-mixture negative log-likelihood
// whose mixing weights are the gumbel-softmax w, plus an entropy term that
// prefers fewer active components. Candidate component centers come from a
// hard k-means pass with k_max centers, so redundant components can be
// switched off while real clusters keep their weight.
template <typename T>
void refresh_cluster_logits(ClusterModel<T>& model, const std::vector<T>& embeddings,
                            std::size_t n, Rng rng) {
  const DisentangleConfig& cfg = model.cfg;
  const std::size_t k_max = cfg.k_max;
  const std::size_t dt = cfg.effective_embed_dim();
  if (k_max == 1 || n < k_max) return;  // nothing to calibrate

  std::vector<T> centers =
      kmeans_hard(embeddings, n, dt, k_max, rng.substream(1), 50);

  // -sharpness * squared distance matrix, constant across inner steps
  std::vector<T> neg_bd2(n * k_max);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k_max; ++c) {
      double acc = 0.0;
      for (std::size_t q = 0; q < dt; ++q) {
        const double d = double(embeddings[i * dt + q]) - double(centers[c * dt + q]);
        acc += d * d;
      }
      neg_bd2[i * k_max + c] = T(-cfg.kmeans_sharpness * acc);
    }

  ParamStore<T> local;
  Tensor<T>& logits = local.add("logits", {k_max});
  logits.data = model.cluster_logits->data;
  Adam<T> opt(local, cfg.logit_refresh_lr);
  std::vector<std::uint32_t> all(k_max);
  for (std::uint32_t c = 0; c < k_max; ++c) all[c] = c;

  // inner steps use the mean-field weights softmax(rho / tau); the gumbel
  // draw enters only the k_effective decision itself
  for (int step = 0; step < cfg.logit_refresh_steps; ++step) {
    local.zero_grads();
    Tape<T> tp;
    Value<T> z = scale(tp.param(logits), T(1) / T(cfg.gumbel_temperature));
    Value<T> w = softmax_vec(z);
    Value<T> lw = sub(z, logsumexp_subset(z, all));  // log w, numerically safe
    Value<T> comp = add_bias_rows(tp.constant({n, k_max}, neg_bd2), lw);
    Value<T> nll = neg(mean_all(logsumexp_rows(comp)));
    Value<T> entropy = neg(sum_all(mul(w, lw)));
    tp.backward(add(nll, scale(entropy, T(cfg.logit_entropy_weight))));
    opt.step();
  }
  // keep pruned clusters revivable when the embedding distribution drifts
  for (auto& v : logits.data) v = std::clamp(v, T(-12), T(12));
  model.cluster_logits->data = logits.data;
}

}  // namespace cmil
