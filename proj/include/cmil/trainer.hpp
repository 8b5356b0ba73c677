#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <type_traits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmil/checkpoint.hpp"
#include "cmil/cohort.hpp"
#include "cmil/disentangle.hpp"
#include "cmil/optimizer.hpp"
#include "cmil/sampler.hpp"
#include "cmil/survival.hpp"

// End-to-end joint optimization: semantic intervention -> causal subgraph
// sampling -> backbone risks, with per-epoch confounder refresh, warm-up,
// cross-validation and checkpointing.

namespace cmil {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  std::size_t warm_up_epochs = 2;
  double learning_rate = 1e-4;
  LossWeights loss;  // lambda_mse, lambda_contrastive, lambda_ratio, nu

  std::size_t k_max = 6;
  double gumbel_temperature = 4.0;
  double kmeans_sharpness = 1.0;
  int kmeans_iters = 10;
  int logit_refresh_steps = 300;
  double logit_refresh_lr = 0.1;
  double logit_entropy_weight = 0.25;
  std::size_t embed_dim = 0;  // d_t, 0 = auto

  std::size_t knn_k = 8;
  std::size_t reduced_dim = 0;  // d', 0 = auto
  std::size_t gt_heads = 2;
  int gt_rw_steps = 2;
  std::size_t gt_pool_hops = 2;
  std::size_t bias_sample_count = 64;

  std::uint64_t seed = 0;
  std::size_t folds = 5;
  double val_fraction = 0.2;           // held-out fraction for plain training
  std::optional<int> ood_institution;  // cv: institution excluded from all folds

  // ablation / baseline switches
  bool disable_cafd = false;      // identity semantic intervention
  bool sampler_probs_one = false; // causal graph = full graph, sampler inactive

  void validate() const {
    if (warm_up_epochs > epochs) fail("config: epochs must be >= warm_up_epochs");
    if (batch_size < 2) fail("config: batch_size must be >= 2 (risk sets need pairs)");
    if (k_max < 1) fail("config: k_max must be >= 1");
    if (learning_rate < 0) fail("config: learning_rate must be >= 0");
    if (loss.nu <= 0) fail("config: nu must be > 0");
    if (folds < 2) fail("config: folds must be >= 2");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
      fail("config: val_fraction must be in [0,1)");
  }

  DisentangleConfig disentangle_config(std::size_t thumbnail_dim) const {
    DisentangleConfig d;
    d.thumbnail_dim = thumbnail_dim;
    d.embed_dim = embed_dim;
    d.k_max = k_max;
    d.gumbel_temperature = gumbel_temperature;
    d.kmeans_sharpness = kmeans_sharpness;
    d.kmeans_iters = kmeans_iters;
    d.bias_sample_count = bias_sample_count;
    d.logit_refresh_steps = logit_refresh_steps;
    d.logit_refresh_lr = logit_refresh_lr;
    d.logit_entropy_weight = logit_entropy_weight;
    return d;
  }

  SamplerConfig sampler_config(std::size_t feature_dim) const {
    SamplerConfig s;
    s.input_dim = feature_dim;
    s.reduced_dim = reduced_dim;
    s.heads = gt_heads;
    s.rw_steps = gt_rw_steps;
    s.pool_hops = gt_pool_hops;
    return s;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"warm_up_epochs", c.warm_up_epochs},
                     {"learning_rate", c.learning_rate},
                     {"lambda_mse", c.loss.lambda_mse},
                     {"lambda_contrastive", c.loss.lambda_contrastive},
                     {"lambda_ratio", c.loss.lambda_ratio},
                     {"nu", c.loss.nu},
                     {"k_max", c.k_max},
                     {"gumbel_temperature", c.gumbel_temperature},
                     {"kmeans_sharpness", c.kmeans_sharpness},
                     {"kmeans_iters", c.kmeans_iters},
                     {"logit_refresh_steps", c.logit_refresh_steps},
                     {"logit_refresh_lr", c.logit_refresh_lr},
                     {"logit_entropy_weight", c.logit_entropy_weight},
                     {"embed_dim", c.embed_dim},
                     {"knn_k", c.knn_k},
                     {"reduced_dim", c.reduced_dim},
                     {"gt_heads", c.gt_heads},
                     {"gt_rw_steps", c.gt_rw_steps},
                     {"gt_pool_hops", c.gt_pool_hops},
                     {"bias_sample_count", c.bias_sample_count},
                     {"seed", c.seed},
                     {"folds", c.folds},
                     {"val_fraction", c.val_fraction},
                     {"ood_institution", c.ood_institution ? nlohmann::json(*c.ood_institution)
                                                           : nlohmann::json()},
                     {"disable_cafd", c.disable_cafd},
                     {"sampler_probs_one", c.sampler_probs_one}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("warm_up_epochs")) j.at("warm_up_epochs").get_to(c.warm_up_epochs);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("lambda_mse")) j.at("lambda_mse").get_to(c.loss.lambda_mse);
  if (j.contains("lambda_contrastive"))
    j.at("lambda_contrastive").get_to(c.loss.lambda_contrastive);
  if (j.contains("lambda_ratio")) j.at("lambda_ratio").get_to(c.loss.lambda_ratio);
  if (j.contains("nu")) j.at("nu").get_to(c.loss.nu);
  if (j.contains("k_max")) j.at("k_max").get_to(c.k_max);
  if (j.contains("gumbel_temperature"))
    j.at("gumbel_temperature").get_to(c.gumbel_temperature);
  if (j.contains("kmeans_sharpness")) j.at("kmeans_sharpness").get_to(c.kmeans_sharpness);
  if (j.contains("kmeans_iters")) j.at("kmeans_iters").get_to(c.kmeans_iters);
  if (j.contains("logit_refresh_steps"))
    j.at("logit_refresh_steps").get_to(c.logit_refresh_steps);
  if (j.contains("logit_refresh_lr")) j.at("logit_refresh_lr").get_to(c.logit_refresh_lr);
  if (j.contains("logit_entropy_weight"))
    j.at("logit_entropy_weight").get_to(c.logit_entropy_weight);
  if (j.contains("embed_dim")) j.at("embed_dim").get_to(c.embed_dim);
  if (j.contains("knn_k")) j.at("knn_k").get_to(c.knn_k);
  if (j.contains("reduced_dim")) j.at("reduced_dim").get_to(c.reduced_dim);
  if (j.contains("gt_heads")) j.at("gt_heads").get_to(c.gt_heads);
  if (j.contains("gt_rw_steps")) j.at("gt_rw_steps").get_to(c.gt_rw_steps);
  if (j.contains("gt_pool_hops")) j.at("gt_pool_hops").get_to(c.gt_pool_hops);
  if (j.contains("bias_sample_count"))
    j.at("bias_sample_count").get_to(c.bias_sample_count);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("folds")) j.at("folds").get_to(c.folds);
  if (j.contains("val_fraction")) j.at("val_fraction").get_to(c.val_fraction);
  if (j.contains("ood_institution") && !j.at("ood_institution").is_null())
    c.ood_institution = j.at("ood_institution").get<int>();
  if (j.contains("disable_cafd")) j.at("disable_cafd").get_to(c.disable_cafd);
  if (j.contains("sampler_probs_one"))
    j.at("sampler_probs_one").get_to(c.sampler_probs_one);
}

// --- model assembly ----------------------------------------------------------------

template <typename T>
struct EngineModel {
  TrainConfig cfg;
  std::size_t feature_dim = 0;
  std::size_t thumbnail_dim = 0;
  ParamStore<T> params;
  ClusterModel<T> cluster;
  SamplerModel<T> sampler;
  BackboneModel<T> backbone;
  BiasModel<T> bias;  // frozen confounder statistics

  EngineModel() = default;
  EngineModel(const EngineModel&) = delete;
  EngineModel& operator=(const EngineModel&) = delete;
};

template <typename T>
void build_engine_model(EngineModel<T>& m, std::size_t feature_dim,
                        std::size_t thumbnail_dim, const TrainConfig& cfg) {
  cfg.validate();
  m.cfg = cfg;
  m.feature_dim = feature_dim;
  m.thumbnail_dim = thumbnail_dim;
  Rng init = Rng(cfg.seed).substream(0xE0);
  m.cluster = make_cluster_model(m.params, "cafd", cfg.disentangle_config(thumbnail_dim),
                                 init.substream(1));
  m.sampler =
      make_sampler_model(m.params, "sampler", cfg.sampler_config(feature_dim),
                         init.substream(2));
  m.backbone = make_backbone(m.params, "backbone", feature_dim, init.substream(3));

  const std::size_t dt = m.cluster.cfg.effective_embed_dim();
  m.cluster.k_effective = 1;
  m.cluster.centers.assign(dt, T(0));
  m.bias.k = 1;
  m.bias.dim = feature_dim;
  m.bias.sample_count_n = cfg.bias_sample_count;
  m.bias.global_mean.assign(feature_dim, T(0));
  m.bias.cluster_means.assign(feature_dim, T(0));
  m.bias.rebuild_bias();
  m.bias.degenerate.assign(1, 0);
}

// --- cached per-slide structures ------------------------------------------------------

template <typename T>
struct SlideContext {
  std::size_t cohort_index = 0;
  std::size_t num_nodes = 0;
  std::vector<T> features;   // m x d
  std::vector<T> thumbnail;  // d_f
  SlideTopology<T> topo;     // knn edges + attention + encoding + hop sets
};

template <typename T>
SlideContext<T> build_slide_context(const Cohort& cohort, std::size_t index,
                                    const TrainConfig& cfg) {
  const SlideRecord& s = cohort.slides[index];
  SlideContext<T> ctx;
  ctx.cohort_index = index;
  ctx.num_nodes = s.num_patches();
  ctx.features.assign(s.patch_features.begin(), s.patch_features.end());
  ctx.thumbnail.assign(s.thumbnail_feature.begin(), s.thumbnail_feature.end());
  EdgeList edges;
  if (ctx.num_nodes > 1) edges = build_knn_graph(s.patch_coords, cfg.knn_k);
  ctx.topo = make_slide_topology<T>(edges, ctx.num_nodes, cfg.sampler_config(cohort.feature_dim));
  return ctx;
}

// --- single-slide forward --------------------------------------------------------------

template <typename T>
struct SlideForward {
  Value<T> risk_full;
  Value<T> risk_causal;
  Value<T> z_full, z_causal, z_complement;
  Value<T> probs_adjusted, probs_raw;
  Value<T> causal_mask;
  bool has_sampler = false;
  bool has_complement = false;
  bool has_raw_probs = false;
};

// Assignment row for one slide against the frozen epoch centers; identity
// (single implicit cluster) when the intervention is disabled.
template <typename T>
Value<T> slide_assignment_row(Tape<T>& tp, const SlideContext<T>& ctx,
                              const EngineModel<T>& m) {
  Value<T> thumb = tp.constant({1, m.thumbnail_dim}, ctx.thumbnail);
  Value<T> t = project_thumbnails(tp, thumb, m.cluster);
  Value<T> centers = tp.constant({m.cluster.k_effective, m.cluster.cfg.effective_embed_dim()},
                                 m.cluster.centers);
  Value<T> p = soft_assign(tp, t, centers, T(m.cluster.cfg.kmeans_sharpness));
  return reshape(p, {m.cluster.k_effective});
}

// Full pipeline for one slide. `frozen` (training only) replays a recorded
// draw and its detach point so finite-difference audits see a smooth,
// deterministic function; `record` captures the draw actually taken.
template <typename T>
SlideForward<T> slide_forward(Tape<T>& tp, const SlideContext<T>& ctx, EngineModel<T>& m,
                              bool training, bool warm_up, Rng* draw_rng,
                              const std::type_identity_t<FrozenDraw<T>>* frozen = nullptr,
                              bool want_raw_probs = true,
                              std::type_identity_t<FrozenDraw<T>>* record = nullptr) {
  SlideForward<T> out;
  const std::size_t n = ctx.num_nodes;
  Value<T> raw = tp.constant({n, m.feature_dim}, ctx.features);

  Value<T> adjusted = raw;
  if (!warm_up && !m.cfg.disable_cafd) {
    Value<T> p_row = slide_assignment_row(tp, ctx, m);
    Value<T> bias = tp.constant({m.bias.k, m.bias.dim}, m.bias.cluster_bias);
    adjusted = disentangle(tp, raw, p_row, bias);
  }

  BackboneOut<T> full = backbone_forward(tp, adjusted, ctx.topo.edges, m.backbone);
  out.risk_full = full.risk;
  out.z_full = full.slide_embedding;

  if (warm_up) {
    out.risk_causal = full.risk;
    return out;
  }

  if (m.cfg.sampler_probs_one) {
    // degenerate causal graph = full graph; the sampler never runs
    out.risk_causal = full.risk;
    out.z_causal = full.slide_embedding;
    return out;
  }

  out.has_sampler = true;
  out.probs_adjusted = node_probabilities(tp, adjusted, ctx.topo, m.sampler);
  if (want_raw_probs) {
    out.probs_raw = node_probabilities(tp, raw, ctx.topo, m.sampler);
    out.has_raw_probs = true;
  }

  SubgraphSample<T> sample;
  if (training) {
    if (frozen) {
      sample = sample_train(tp, adjusted, ctx.topo.edges, out.probs_adjusted,
                            frozen->draw, &frozen->base_probs);
    } else {
      Rng r = draw_rng->substream(ctx.cohort_index);
      auto draw = bernoulli_draw(r, out.probs_adjusted.data());
      if (record) {
        record->draw = draw;
        record->base_probs = out.probs_adjusted.data();
      }
      sample = sample_train(tp, adjusted, ctx.topo.edges, out.probs_adjusted, draw);
    }
  } else {
    sample = mask_eval(tp, adjusted, ctx.topo.edges, out.probs_adjusted);
  }
  out.causal_mask = sample.mask;

  BackboneOut<T> causal =
      backbone_forward(tp, sample.causal_features, sample.causal_edges, m.backbone);
  out.risk_causal = causal.risk;
  out.z_causal = causal.slide_embedding;

  BackboneOut<T> complement = backbone_forward(tp, sample.complement_features,
                                               sample.complement_edges, m.backbone);
  out.z_complement = complement.slide_embedding;
  out.has_complement = true;
  return out;
}

template <typename T>
struct BatchLossParts {
  Value<T> total, cox_full, cox_causal, mse, contrastive, ratio;
};

// Joint objective for one batch (training mode). During warm-up only the
// full-graph Cox term is active and the causal modules stay off the tape.
// `frozen_draws` replays recorded draws; `record_draws` captures them.
template <typename T>
BatchLossParts<T> batch_joint_loss(
    Tape<T>& tp, EngineModel<T>& m, const std::vector<const SlideContext<T>*>& batch,
    const std::vector<SurvivalLabel>& labels, bool warm_up, Rng* draw_rng,
    const std::type_identity_t<std::vector<FrozenDraw<T>>>* frozen_draws = nullptr,
    std::type_identity_t<std::vector<FrozenDraw<T>>>* record_draws = nullptr) {
  const bool want_mse = !warm_up && !m.cfg.sampler_probs_one && m.cfg.loss.lambda_mse != 0.0;
  const bool want_ct =
      !warm_up && !m.cfg.sampler_probs_one && m.cfg.loss.lambda_contrastive != 0.0;
  const bool want_ratio =
      !warm_up && !m.cfg.sampler_probs_one && m.cfg.loss.lambda_ratio != 0.0;

  if (record_draws) record_draws->assign(batch.size(), FrozenDraw<T>{});
  std::vector<Value<T>> risks_full, risks_causal, pa, pr, zg, zc, zs, masks;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const FrozenDraw<T>* frozen = frozen_draws ? &(*frozen_draws)[b] : nullptr;
    SlideForward<T> f =
        slide_forward(tp, *batch[b], m, /*training=*/true, warm_up, draw_rng, frozen,
                      want_mse, record_draws ? &(*record_draws)[b] : nullptr);
    risks_full.push_back(f.risk_full);
    risks_causal.push_back(f.risk_causal);
    if (f.has_sampler) {
      if (want_mse && f.has_raw_probs) {
        pa.push_back(f.probs_adjusted);
        pr.push_back(f.probs_raw);
      }
      if (want_ct && f.has_complement) {
        zg.push_back(f.z_full);
        zc.push_back(f.z_causal);
        zs.push_back(f.z_complement);
      }
      if (want_ratio) masks.push_back(f.causal_mask);
    }
  }

  BatchLossParts<T> parts;
  parts.cox_full = cox_loss(tp, stack_scalars(tp, risks_full), labels);
  if (warm_up) {
    parts.cox_causal = tp.scalar(T(0));
    parts.mse = tp.scalar(T(0));
    parts.contrastive = tp.scalar(T(0));
    parts.ratio = tp.scalar(T(0));
    parts.total = parts.cox_full;
    return parts;
  }
  parts.cox_causal = cox_loss(tp, stack_scalars(tp, risks_causal), labels);
  parts.mse = want_mse && !pa.empty() ? prob_consistency_loss(tp, pa, pr) : tp.scalar(T(0));
  parts.contrastive = want_ct && !zg.empty()
                          ? contrastive_loss(tp, zg, zc, zs, T(m.cfg.loss.nu))
                          : tp.scalar(T(0));
  parts.ratio = want_ratio && !masks.empty() ? subgraph_ratio_loss(tp, masks) : tp.scalar(T(0));
  parts.total = total_loss(parts.cox_causal, parts.cox_full, parts.mse, parts.contrastive,
                           parts.ratio, m.cfg.loss);
  return parts;
}

// --- epoch-level refresh ---------------------------------------------------------------

// (1) recalibrate the cluster logits on current embeddings, (2) draw
// K_effective, (3) re-seed and run soft k-means, (4) rebuild the bias model.
// Everything uses the training split only.
template <typename T>
void refresh_epoch_state(EngineModel<T>& m, const Cohort& cohort,
                         const std::vector<std::size_t>& train_idx,
                         const std::vector<const SlideContext<T>*>& train_ctx,
                         std::size_t epoch, std::vector<T>* assignments_out = nullptr) {
  Rng rng = Rng(m.cfg.seed).substream(0x6E00 + epoch);
  const std::size_t n = train_idx.size();
  const std::size_t dt = m.cluster.cfg.effective_embed_dim();

  // current thumbnail embeddings, detached
  std::vector<T> embeds(n * dt);
  {
    Tape<T> tp;
    tp.set_grad_enabled(false);
    std::vector<T> thumbs(n * m.thumbnail_dim);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t q = 0; q < m.thumbnail_dim; ++q)
        thumbs[i * m.thumbnail_dim + q] = train_ctx[i]->thumbnail[q];
    Value<T> t =
        project_thumbnails(tp, tp.constant({n, m.thumbnail_dim}, thumbs), m.cluster);
    embeds = t.data();
  }

  refresh_cluster_logits(m.cluster, embeds, n, rng.substream(1));

  std::size_t k_eff = 1;
  {
    Tape<T> tp;
    tp.set_grad_enabled(false);
    Rng draw = rng.substream(2);
    auto cc = effective_cluster_count(tp, *m.cluster.cluster_logits,
                                      T(m.cluster.cfg.gumbel_temperature), draw,
                                      T(m.cluster.cfg.active_threshold));
    k_eff = std::min(cc.k_effective, n);  // clustering needs at least k points
  }
  m.cluster.k_effective = k_eff;

  std::vector<T> assignments(n * k_eff, T(1));
  {
    Tape<T> tp;
    tp.set_grad_enabled(false);
    Rng seed_rng = rng.substream(3);
    auto res = soft_kmeans_assign(tp, tp.constant({n, dt}, embeds), k_eff,
                                  m.cluster.cfg.kmeans_iters, seed_rng,
                                  T(m.cluster.cfg.kmeans_sharpness));
    m.cluster.centers = res.centers.data();
    assignments = res.assignments.data();
  }

  Rng bias_rng = rng.substream(4);
  m.bias = estimate_bias(assignments, k_eff, cohort, train_idx,
                         m.cfg.bias_sample_count, bias_rng);
  if (assignments_out) *assignments_out = assignments;
}

// --- evaluation --------------------------------------------------------------------------

struct EvalResult {
  std::vector<std::string> ids;
  std::vector<SurvivalLabel> labels;
  std::vector<double> risks_causal;  // the model's prediction target
  std::vector<double> risks_full;
  std::vector<std::vector<double>> node_probs;
  std::optional<double> c_index_causal;
};

template <typename T>
EvalResult evaluate_slides(EngineModel<T>& m, const Cohort& cohort,
                           const std::vector<std::size_t>& idx,
                           const std::vector<const SlideContext<T>*>& ctxs) {
  EvalResult res;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    Tape<T> tp;
    tp.set_grad_enabled(false);
    SlideForward<T> f = slide_forward(tp, *ctxs[i], m, /*training=*/false,
                                      /*warm_up=*/false, nullptr, nullptr,
                                      /*want_raw_probs=*/false);
    res.ids.push_back(cohort.slides[idx[i]].id);
    res.labels.push_back(cohort.slides[idx[i]].label);
    res.risks_causal.push_back(double(f.risk_causal.item()));
    res.risks_full.push_back(double(f.risk_full.item()));
    if (f.has_sampler) {
      std::vector<double> probs(f.probs_adjusted.data().begin(),
                                f.probs_adjusted.data().end());
      res.node_probs.push_back(std::move(probs));
    } else {
      res.node_probs.emplace_back(ctxs[i]->num_nodes, 1.0);
    }
  }
  res.c_index_causal = c_index(res.risks_causal, res.labels);
  return res;
}

// --- checkpointing -------------------------------------------------------------------------

template <typename T>
CheckpointFile make_checkpoint(const EngineModel<T>& m, std::size_t epoch,
                               double train_median_risk = 0.0) {
  CheckpointFile ck;
  ck.precision_bytes = sizeof(T) == 4 ? 4 : 8;
  nlohmann::json meta;
  meta["config"] = m.cfg;
  meta["feature_dim"] = m.feature_dim;
  meta["thumbnail_dim"] = m.thumbnail_dim;
  meta["epoch"] = epoch;
  meta["k_effective"] = m.cluster.k_effective;
  meta["rng_seed"] = m.cfg.seed;
  meta["bias_sample_count"] = m.bias.sample_count_n;
  meta["bias_degenerate"] = m.bias.degenerate;
  meta["train_median_risk"] = train_median_risk;
  ck.meta = std::move(meta);
  for (const auto& [name, t] : m.params.items()) {
    NamedTensorF64 nt;
    nt.name = name;
    nt.shape = t.shape;
    nt.data.assign(t.data.begin(), t.data.end());
    ck.tensors.push_back(std::move(nt));
  }
  auto push_state = [&](const std::string& name, Shape shape, const std::vector<T>& data) {
    NamedTensorF64 nt;
    nt.name = name;
    nt.shape = std::move(shape);
    nt.data.assign(data.begin(), data.end());
    ck.tensors.push_back(std::move(nt));
  };
  const std::size_t dt = m.cluster.cfg.effective_embed_dim();
  push_state("state.centers", {m.cluster.k_effective, dt}, m.cluster.centers);
  push_state("state.bias_means", {m.bias.k, m.bias.dim}, m.bias.cluster_means);
  push_state("state.bias_global", {m.bias.dim}, m.bias.global_mean);
  return ck;
}

template <typename T>
void restore_engine_model(EngineModel<T>& m, const CheckpointFile& ck) {
  TrainConfig cfg = ck.meta.at("config").get<TrainConfig>();
  build_engine_model(m, ck.meta.at("feature_dim").get<std::size_t>(),
                     ck.meta.at("thumbnail_dim").get<std::size_t>(), cfg);
  for (auto& [name, t] : m.params.items()) {
    const NamedTensorF64* nt = ck.find(name);
    if (!nt) fail("checkpoint: missing tensor " + name);
    if (nt->shape != t.shape) fail("checkpoint: shape mismatch for tensor " + name);
    for (std::size_t q = 0; q < t.data.size(); ++q) t.data[q] = T(nt->data[q]);
  }
  m.cluster.k_effective = ck.meta.at("k_effective").get<std::size_t>();
  const NamedTensorF64* centers = ck.find("state.centers");
  const NamedTensorF64* means = ck.find("state.bias_means");
  const NamedTensorF64* global = ck.find("state.bias_global");
  if (!centers || !means || !global) fail("checkpoint: missing state tensors");
  m.cluster.centers.assign(centers->data.begin(), centers->data.end());
  m.bias.k = means->shape[0];
  m.bias.dim = means->shape[1];
  m.bias.sample_count_n = ck.meta.at("bias_sample_count").get<std::size_t>();
  m.bias.cluster_means.assign(means->data.begin(), means->data.end());
  m.bias.global_mean.assign(global->data.begin(), global->data.end());
  m.bias.degenerate = ck.meta.at("bias_degenerate").get<std::vector<std::uint8_t>>();
  m.bias.rebuild_bias();
}

// --- training loop ----------------------------------------------------------------------------

struct TrainResult {
  CheckpointFile best_checkpoint;
  CheckpointFile final_checkpoint;
  std::size_t best_epoch = 0;
  std::vector<nlohmann::json> history;          // one record per epoch
  std::vector<nlohmann::json> cluster_history;  // assignments + k_effective per epoch
};

template <typename T>
TrainResult train(const Cohort& cohort, const std::vector<std::size_t>& train_idx,
                  const std::vector<std::size_t>& val_idx, const TrainConfig& cfg) {
  cfg.validate();
  if (train_idx.size() < 2) fail("train: need at least two training slides");
  for (std::size_t i : train_idx)
    for (std::size_t j : val_idx)
      if (i == j) fail("train: train/validation splits overlap at slide index " +
                       std::to_string(i));

  EngineModel<T> model;
  build_engine_model(model, cohort.feature_dim, cohort.thumbnail_dim, cfg);

  std::vector<SlideContext<T>> ctx_storage;
  std::map<std::size_t, const SlideContext<T>*> ctx_by_index;
  ctx_storage.reserve(train_idx.size() + val_idx.size());
  for (std::size_t idx : train_idx) {
    ctx_storage.push_back(build_slide_context<T>(cohort, idx, cfg));
  }
  for (std::size_t idx : val_idx) ctx_storage.push_back(build_slide_context<T>(cohort, idx, cfg));
  for (const auto& c : ctx_storage) ctx_by_index[c.cohort_index] = &c;

  std::vector<const SlideContext<T>*> train_ctx, val_ctx;
  for (std::size_t idx : train_idx) train_ctx.push_back(ctx_by_index.at(idx));
  for (std::size_t idx : val_idx) val_ctx.push_back(ctx_by_index.at(idx));

  Adam<T> opt(model.params, cfg.learning_rate);
  Rng master(cfg.seed);

  TrainResult result;
  double best_val = -std::numeric_limits<double>::infinity();
  bool have_best = false;
  double last_train_median = 0.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool warm_up = epoch < cfg.warm_up_epochs;

    std::vector<T> assignments;
    if (!cfg.disable_cafd)
      refresh_epoch_state(model, cohort, train_idx, train_ctx, epoch, &assignments);

    // seeded batch order
    std::vector<std::size_t> order(train_idx.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng = master.substream(0x5F00 + epoch);
    shuffle_rng.shuffle(order);

    Rng draw_rng = master.substream(0xD2A30000ULL + epoch);
    std::vector<std::string> epoch_events;
    double loss_sum = 0, cox_full_sum = 0, cox_causal_sum = 0, mse_sum = 0, ct_sum = 0,
           ratio_sum = 0;
    std::size_t n_batches = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      if (stop - start < 2) break;  // risk sets need pairs; drop trailing singleton
      std::vector<const SlideContext<T>*> batch;
      std::vector<SurvivalLabel> labels;
      for (std::size_t q = start; q < stop; ++q) {
        batch.push_back(train_ctx[order[q]]);
        labels.push_back(cohort.slides[train_idx[order[q]]].label);
      }
      model.params.zero_grads();
      Tape<T> tp;
      tp.set_event_log(&epoch_events);
      BatchLossParts<T> parts;
      try {
        parts = batch_joint_loss(tp, model, batch, labels, warm_up, &draw_rng);
      } catch (const std::runtime_error& e) {
        fail("train: epoch " + std::to_string(epoch) + " batch " +
             std::to_string(n_batches) + ": " + e.what());
      }
      const double total = double(parts.total.item());
      if (!std::isfinite(total))
        fail("train: non-finite loss in epoch " + std::to_string(epoch) + " batch " +
             std::to_string(n_batches));
      tp.backward(parts.total);
      opt.step();
      loss_sum += total;
      cox_full_sum += double(parts.cox_full.item());
      cox_causal_sum += double(parts.cox_causal.item());
      mse_sum += double(parts.mse.item());
      ct_sum += double(parts.contrastive.item());
      ratio_sum += double(parts.ratio.item());
      ++n_batches;
    }

    EvalResult train_eval = evaluate_slides(model, cohort, train_idx, train_ctx);
    const double train_median = median_of(train_eval.risks_causal);
    std::optional<double> val_cindex;
    if (!val_idx.empty()) {
      EvalResult val_eval = evaluate_slides(model, cohort, val_idx, val_ctx);
      val_cindex = val_eval.c_index_causal;
    }

    nlohmann::json rec;
    rec["epoch"] = epoch;
    rec["warm_up"] = warm_up;
    rec["batches"] = n_batches;
    rec["total_loss"] = n_batches ? loss_sum / double(n_batches) : 0.0;
    rec["cox_full"] = n_batches ? cox_full_sum / double(n_batches) : 0.0;
    rec["cox_causal"] = n_batches ? cox_causal_sum / double(n_batches) : 0.0;
    rec["mse"] = n_batches ? mse_sum / double(n_batches) : 0.0;
    rec["contrastive"] = n_batches ? ct_sum / double(n_batches) : 0.0;
    rec["ratio"] = n_batches ? ratio_sum / double(n_batches) : 0.0;
    rec["k_effective"] = model.cluster.k_effective;
    if (train_eval.c_index_causal) rec["train_cindex"] = *train_eval.c_index_causal;
    else rec["train_cindex"] = nullptr;
    if (val_cindex) rec["val_cindex"] = *val_cindex;
    else rec["val_cindex"] = nullptr;
    rec["events"] = epoch_events;
    result.history.push_back(rec);

    nlohmann::json crec;
    crec["epoch"] = epoch;
    crec["k_effective"] = model.cluster.k_effective;
    nlohmann::json assign_json = nlohmann::json::object();
    if (!assignments.empty()) {
      for (std::size_t i = 0; i < train_idx.size(); ++i) {
        std::vector<double> row(assignments.begin() + i * model.cluster.k_effective,
                                assignments.begin() + (i + 1) * model.cluster.k_effective);
        assign_json[cohort.slides[train_idx[i]].id] = row;
      }
    }
    crec["assignments"] = std::move(assign_json);
    result.cluster_history.push_back(crec);

    if (val_cindex && *val_cindex > best_val) {
      best_val = *val_cindex;
      result.best_checkpoint = make_checkpoint(model, epoch, train_median);
      result.best_epoch = epoch;
      have_best = true;
    }
    last_train_median = train_median;
  }

  result.final_checkpoint = make_checkpoint(model, cfg.epochs, last_train_median);
  if (!have_best) {
    result.best_checkpoint = result.final_checkpoint;
    result.best_epoch = cfg.epochs ? cfg.epochs - 1 : 0;
  }
  return result;
}

// Evaluation entry point from a checkpoint (fresh contexts, frozen stats).
template <typename T>
EvalResult evaluate(const CheckpointFile& ck, const Cohort& cohort,
                    const std::vector<std::size_t>& idx) {
  EngineModel<T> model;
  restore_engine_model(model, ck);
  if (model.feature_dim != cohort.feature_dim ||
      model.thumbnail_dim != cohort.thumbnail_dim)
    fail("evaluate: checkpoint dims (" + std::to_string(model.feature_dim) + "," +
         std::to_string(model.thumbnail_dim) + ") do not match cohort (" +
         std::to_string(cohort.feature_dim) + "," + std::to_string(cohort.thumbnail_dim) +
         ")");
  std::vector<SlideContext<T>> ctxs;
  std::vector<const SlideContext<T>*> ptrs;
  ctxs.reserve(idx.size());
  for (std::size_t i : idx) ctxs.push_back(build_slide_context<T>(cohort, i, model.cfg));
  for (const auto& c : ctxs) ptrs.push_back(&c);
  return evaluate_slides(model, cohort, idx, ptrs);
}

// --- cross-validation --------------------------------------------------------------------------

struct CvFoldResult {
  std::size_t fold = 0;
  std::optional<double> val_cindex;
  std::optional<double> ood_cindex;
  std::size_t best_epoch = 0;
  std::vector<std::size_t> val_indices;
  TrainResult train_result;
};

struct CvResult {
  std::vector<CvFoldResult> folds;
  nlohmann::json summary;
};

// Seeded fold assignment; in held-out-institution mode that institution is
// excluded from every fold and scored separately per fold.
template <typename T>
CvResult cross_validate(const Cohort& cohort, const TrainConfig& cfg,
                        std::optional<int> held_out_institution = std::nullopt) {
  cfg.validate();
  std::vector<std::size_t> pool, held_out;
  for (std::size_t i = 0; i < cohort.slides.size(); ++i) {
    if (held_out_institution) {
      if (!cohort.slides[i].planted_institution)
        fail("cross_validate: slide " + cohort.slides[i].id + " has no institution id");
      if (*cohort.slides[i].planted_institution == *held_out_institution) {
        held_out.push_back(i);
        continue;
      }
    }
    pool.push_back(i);
  }
  if (held_out_institution && held_out.empty())
    fail("cross_validate: institution " + std::to_string(*held_out_institution) +
         " absent from cohort");
  if (pool.size() < cfg.folds) fail("cross_validate: fewer slides than folds");

  Rng fold_rng = Rng(cfg.seed).substream(0xF01D);
  fold_rng.shuffle(pool);

  CvResult result;
  std::vector<double> val_scores, ood_scores;
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    std::vector<std::size_t> train_set, val_set;
    for (std::size_t q = 0; q < pool.size(); ++q)
      (q % cfg.folds == f ? val_set : train_set).push_back(pool[q]);

    // leakage guard: the held-out institution never trains
    for (std::size_t i : train_set)
      if (held_out_institution &&
          *cohort.slides[i].planted_institution == *held_out_institution)
        fail("cross_validate: leakage, held-out institution in training split");

    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = Rng(cfg.seed).substream(0xF0000 + f).seed();
    CvFoldResult fr;
    fr.fold = f;
    fr.val_indices = val_set;
    fr.train_result = train<T>(cohort, train_set, val_set, fold_cfg);
    fr.best_epoch = fr.train_result.best_epoch;

    EvalResult val_eval =
        evaluate<T>(fr.train_result.best_checkpoint, cohort, val_set);
    fr.val_cindex = val_eval.c_index_causal;
    if (fr.val_cindex) val_scores.push_back(*fr.val_cindex);

    if (held_out_institution) {
      EvalResult ood_eval =
          evaluate<T>(fr.train_result.best_checkpoint, cohort, held_out);
      fr.ood_cindex = ood_eval.c_index_causal;
      if (fr.ood_cindex) ood_scores.push_back(*fr.ood_cindex);
    }
    result.folds.push_back(std::move(fr));
  }

  auto mean_std = [](const std::vector<double>& v) {
    nlohmann::json j;
    if (v.empty()) {
      j["mean"] = nullptr;
      j["std"] = nullptr;
      return j;
    }
    double mean = 0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    j["mean"] = mean;
    j["std"] = v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0;
    return j;
  };
  nlohmann::json folds_json = nlohmann::json::array();
  for (const auto& fr : result.folds) {
    nlohmann::json fj;
    fj["fold"] = fr.fold;
    fj["val_cindex"] = fr.val_cindex ? nlohmann::json(*fr.val_cindex) : nlohmann::json();
    fj["ood_cindex"] = fr.ood_cindex ? nlohmann::json(*fr.ood_cindex) : nlohmann::json();
    fj["best_epoch"] = fr.best_epoch;
    folds_json.push_back(fj);
  }
  result.summary["folds"] = folds_json;
  result.summary["val"] = mean_std(val_scores);
  if (held_out_institution) result.summary["ood"] = mean_std(ood_scores);
  return result;
}

}  // namespace cmil
