#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cmil/cohort.hpp"
#include "cmil/init.hpp"
#include "cmil/ops.hpp"

// Backbone aggregation (graph feature learner, gated pooling, risk head), the
// joint training losses, and survival evaluation metrics.

namespace cmil {

// --- backbone -------------------------------------------------------------------

// Two residual message-passing layers (neighbour mean + linear + GELU),
// gated mean pooling, and a linear risk head. Everything except the risk
// head's bias is bias-free so an all-zero-feature graph pools to exactly the
// zero vector and predicts the head bias. The activation is smooth because
// hard subgraph masks park masked nodes exactly at zero, which a kinked
// activation would turn into a non-differentiable point of the whole loss.
template <typename T>
struct BackboneModel {
  std::size_t dim = 0;
  Tensor<T>* mp_self[2] = {nullptr, nullptr};  // [d, d]
  Tensor<T>* mp_nbr[2] = {nullptr, nullptr};   // [d, d]
  Tensor<T>* gate_w = nullptr;                 // [d, d]
  Tensor<T>* gate_v = nullptr;                 // [d]
  Tensor<T>* value_w = nullptr;                // [d, d]
  Tensor<T>* risk_w = nullptr;                 // [d]
  Tensor<T>* risk_b = nullptr;                 // scalar
};

template <typename T>
BackboneModel<T> make_backbone(ParamStore<T>& store, const std::string& prefix,
                               std::size_t dim, Rng rng) {
  BackboneModel<T> m;
  m.dim = dim;
  for (int l = 0; l < 2; ++l) {
    m.mp_self[l] = &store.add(prefix + ".mp" + std::to_string(l) + "_self", {dim, dim});
    m.mp_nbr[l] = &store.add(prefix + ".mp" + std::to_string(l) + "_nbr", {dim, dim});
    init_xavier(*m.mp_self[l], rng.substream(l * 2));
    init_xavier(*m.mp_nbr[l], rng.substream(l * 2 + 1));
  }
  m.gate_w = &store.add(prefix + ".gate_w", {dim, dim});
  m.gate_v = &store.add(prefix + ".gate_v", {dim});
  m.value_w = &store.add(prefix + ".value_w", {dim, dim});
  m.risk_w = &store.add(prefix + ".risk_w", {dim});
  m.risk_b = &store.add(prefix + ".risk_b", {});
  init_xavier(*m.gate_w, rng.substream(10));
  init_xavier(*m.gate_v, rng.substream(11));
  init_xavier(*m.value_w, rng.substream(12));
  init_xavier(*m.risk_w, rng.substream(13));
  return m;
}

inline std::vector<std::vector<std::uint32_t>> neighbor_groups(const EdgeList& edges,
                                                               std::size_t m) {
  std::vector<std::vector<std::uint32_t>> groups(m);
  for (const auto& [a, b] : edges) groups[a].push_back(b);
  return groups;
}

template <typename T>
struct BackboneOut {
  Value<T> slide_embedding;  // pooled vector Z
  Value<T> risk;             // scalar log-risk
  Value<T> gates;            // per-node pooling gates (attention export)
};

template <typename T>
BackboneOut<T> backbone_forward(Tape<T>& tp, Value<T> features, const EdgeList& edges,
                                const BackboneModel<T>& model) {
  if (features.shape().size() != 2 || features.shape()[1] != model.dim)
    fail("backbone_forward: feature shape " + shape_str(features.shape()) +
         " does not match model dim " + std::to_string(model.dim));
  const std::size_t m = features.shape()[0];
  auto groups = neighbor_groups(edges, m);
  Value<T> h = features;
  for (int l = 0; l < 2; ++l) {
    Value<T> nbr = group_mean_rows(h, groups);
    Value<T> update = gelu(
        add(matmul(h, tp.param(*model.mp_self[l])), matmul(nbr, tp.param(*model.mp_nbr[l]))));
    h = add(h, update);
  }
  BackboneOut<T> out;
  out.gates = sigmoid(matvec(tanh_v(matmul(h, tp.param(*model.gate_w))),
                             tp.param(*model.gate_v)));
  Value<T> values = matmul(h, tp.param(*model.value_w));
  Value<T> num = reduce_sum_axis(scale_rows(values, out.gates), 0);
  Value<T> den = sum_all(out.gates);
  out.slide_embedding = div(num, den);
  out.risk = add(dot(out.slide_embedding, tp.param(*model.risk_w)),
                 tp.param(*model.risk_b));
  return out;
}

// --- losses -----------------------------------------------------------------------

// Negative Cox partial log-likelihood over a batch; the risk set for an event
// at t_i is every sample with t_j >= t_i in the same batch. A batch without
// events contributes zero with a tape note.
template <typename T>
Value<T> cox_loss(Tape<T>& tp, Value<T> risks, const std::vector<SurvivalLabel>& labels) {
  if (risks.shape().size() != 1 || risks.shape()[0] != labels.size())
    fail("cox_loss: risk/label count mismatch");
  for (T r : risks.data())
    if (!std::isfinite(double(r))) fail("cox_loss: non-finite risk");
  std::vector<Value<T>> terms;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i].event) continue;
    std::vector<std::uint32_t> risk_set;
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (labels[j].time >= labels[i].time) risk_set.push_back(std::uint32_t(j));
    terms.push_back(sub(element(risks, i), logsumexp_subset(risks, risk_set)));
  }
  if (terms.empty()) {
    tp.note("cox_loss: no uncensored samples in batch");
    return tp.scalar(T(0));
  }
  return neg(sum_all(stack_scalars(tp, terms)));
}

// Mean over slides of the mean squared gap between the sampler's node
// probabilities on the adjusted and raw graphs.
template <typename T>
Value<T> prob_consistency_loss(Tape<T>& tp, const std::vector<Value<T>>& probs_adjusted,
                               const std::vector<Value<T>>& probs_raw) {
  if (probs_adjusted.size() != probs_raw.size() || probs_adjusted.empty())
    fail("prob_consistency_loss: slide count mismatch");
  std::vector<Value<T>> per_slide;
  for (std::size_t i = 0; i < probs_adjusted.size(); ++i) {
    if (probs_adjusted[i].shape() != probs_raw[i].shape())
      fail("prob_consistency_loss: node count mismatch on slide " + std::to_string(i));
    per_slide.push_back(mean_all(square(sub(probs_adjusted[i], probs_raw[i]))));
  }
  return mean_all(stack_scalars(tp, per_slide));
}

// -mean log( e^{u/nu} / (e^{u/nu} + e^{v/nu}) ) with u = cos(Z_G, Z_C) and
// v = cos(Z_G, Z_S), computed as softplus((v - u)/nu) for stability.
template <typename T>
Value<T> contrastive_loss(Tape<T>& tp, const std::vector<Value<T>>& z_full,
                          const std::vector<Value<T>>& z_causal,
                          const std::vector<Value<T>>& z_complement, T nu) {
  if (z_full.size() != z_causal.size() || z_full.size() != z_complement.size() ||
      z_full.empty())
    fail("contrastive_loss: slide count mismatch");
  if (nu <= T(0)) fail("contrastive_loss: temperature must be > 0");
  std::vector<Value<T>> per_slide;
  for (std::size_t i = 0; i < z_full.size(); ++i) {
    Value<T> u = cosine_sim(z_full[i], z_causal[i]);
    Value<T> v = cosine_sim(z_full[i], z_complement[i]);
    per_slide.push_back(softplus(scale(sub(v, u), T(1) / nu)));
  }
  return mean_all(stack_scalars(tp, per_slide));
}

// (mean over slides of |C_i| / |G_i|)^2; |C_i| is the mask sum (real-valued
// under soft masks).
template <typename T>
Value<T> subgraph_ratio_loss(Tape<T>& tp, const std::vector<Value<T>>& masks) {
  if (masks.empty()) fail("subgraph_ratio_loss: no masks");
  std::vector<Value<T>> ratios;
  for (const auto& mask : masks)
    ratios.push_back(scale(sum_all(mask), T(1) / T(mask.size())));
  return square(mean_all(stack_scalars(tp, ratios)));
}

struct LossWeights {
  double lambda_mse = 0.1;
  double lambda_contrastive = 0.1;
  double lambda_ratio = 0.1;
  double nu = 0.5;
};

// cox_causal + cox_full + l1*mse + l2*contrastive + l3*ratio (both Cox terms
// unweighted).
template <typename T>
Value<T> total_loss(Value<T> cox_causal, Value<T> cox_full, Value<T> mse,
                    Value<T> contrastive, Value<T> ratio, const LossWeights& w) {
  Value<T> out = add(cox_causal, cox_full);
  out = add(out, scale(mse, T(w.lambda_mse)));
  out = add(out, scale(contrastive, T(w.lambda_contrastive)));
  out = add(out, scale(ratio, T(w.lambda_ratio)));
  return out;
}

// --- metrics ------------------------------------------------------------------------

// Harrell's concordance index. Pairs are comparable when the shorter time is
// an observed event (ties with exactly one event count, double events at the
// same time do not); tied risks score 0.5. Returns nullopt when no pair is
// comparable.
inline std::optional<double> c_index(const std::vector<double>& risks,
                                     const std::vector<SurvivalLabel>& labels) {
  if (risks.size() != labels.size()) fail("c_index: risk/label count mismatch");
  double comparable = 0.0, score = 0.0;
  const std::size_t n = risks.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      std::size_t shorter, longer;
      if (labels[i].time < labels[j].time) { shorter = i; longer = j; }
      else if (labels[j].time < labels[i].time) { shorter = j; longer = i; }
      else {
        // tied times: comparable only with exactly one event; the event is
        // the shorter survival
        if (labels[i].event == labels[j].event) continue;
        shorter = labels[i].event ? i : j;
        longer = labels[i].event ? j : i;
        if (!labels[shorter].event) continue;
        comparable += 1.0;
        if (risks[shorter] > risks[longer]) score += 1.0;
        else if (risks[shorter] == risks[longer]) score += 0.5;
        continue;
      }
      if (!labels[shorter].event) continue;  // censored before the other's time
      comparable += 1.0;
      if (risks[shorter] > risks[longer]) score += 1.0;
      else if (risks[shorter] == risks[longer]) score += 0.5;
    }
  }
  if (comparable == 0.0) return std::nullopt;
  return score / comparable;
}

struct KmPoint {
  double time;
  double survival;
};

// Product-limit estimator; one step per distinct event time.
inline std::vector<KmPoint> km_curve(const std::vector<SurvivalLabel>& labels) {
  if (labels.empty()) fail("km_curve: empty group");
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return labels[a].time < labels[b].time;
  });
  std::vector<KmPoint> curve;
  double surv = 1.0;
  double at_risk = double(labels.size());
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = labels[order[i]].time;
    double events = 0.0, leaving = 0.0;
    while (i < order.size() && labels[order[i]].time == t) {
      events += labels[order[i]].event ? 1.0 : 0.0;
      leaving += 1.0;
      ++i;
    }
    if (events > 0.0) {
      surv *= 1.0 - events / at_risk;
      curve.push_back({t, surv});
    }
    at_risk -= leaving;
  }
  return curve;
}

struct LogRankResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Two-group log-rank test: hypergeometric observed-minus-expected events at
// each distinct event time, chi-square with one degree of freedom.
inline LogRankResult log_rank_test(const std::vector<SurvivalLabel>& labels,
                                   const std::vector<int>& group) {
  if (labels.size() != group.size()) fail("log_rank_test: label/group count mismatch");
  bool has0 = false, has1 = false;
  for (int g : group) {
    if (g == 0) has0 = true;
    else if (g == 1) has1 = true;
    else fail("log_rank_test: groups must be 0 or 1");
  }
  if (!has0 || !has1) fail("log_rank_test: both groups must be non-empty");

  std::vector<double> times;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].event) times.push_back(labels[i].time);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  double u = 0.0, var = 0.0;
  for (double t : times) {
    double n_total = 0, n_g1 = 0, d_total = 0, d_g1 = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i].time >= t) {
        n_total += 1.0;
        if (group[i] == 1) n_g1 += 1.0;
      }
      if (labels[i].event && labels[i].time == t) {
        d_total += 1.0;
        if (group[i] == 1) d_g1 += 1.0;
      }
    }
    u += d_g1 - d_total * n_g1 / n_total;
    if (n_total > 1.0)
      var += d_total * (n_g1 / n_total) * (1.0 - n_g1 / n_total) *
             (n_total - d_total) / (n_total - 1.0);
  }
  LogRankResult res;
  if (var <= 0.0) return res;  // no events or no variance: statistic 0, p = 1
  res.statistic = u * u / var;
  res.p_value = std::erfc(std::sqrt(res.statistic / 2.0));
  return res;
}

// Median of the training risks; strictly greater goes to the high-risk group.
inline double median_of(std::vector<double> v) {
  if (v.empty()) fail("median_of: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<int> stratify_by_median(const std::vector<double>& train_risks,
                                           const std::vector<double>& test_risks) {
  const double med = median_of(train_risks);
  std::vector<int> groups(test_risks.size());
  for (std::size_t i = 0; i < test_risks.size(); ++i)
    groups[i] = test_risks[i] > med ? 1 : 0;
  return groups;
}

// Rank-based AUROC with tie midranks (used to score learned node
// probabilities against a planted mask).
inline std::optional<double> auroc(const std::vector<double>& scores,
                                   const std::vector<std::uint8_t>& positives) {
  if (scores.size() != positives.size()) fail("auroc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double n_pos = 0, n_neg = 0, rank_sum = 0;
  std::size_t i = 0;
  double rank = 1.0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = rank + 0.5 * double(j - i - 1);
    for (std::size_t q = i; q < j; ++q)
      if (positives[order[q]]) { rank_sum += mid; n_pos += 1.0; }
      else n_neg += 1.0;
    rank += double(j - i);
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

}  // namespace cmil
