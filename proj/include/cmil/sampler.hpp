#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmil/graph_transformer.hpp"
#include "cmil/ops.hpp"
#include "cmil/rng.hpp"

// Per-node causal inclusion probabilities (linear reduction + two-layer graph
// transformer + scalar head), Bernoulli hard masks with straight-through
// gradients during training, and soft masks at evaluation.

namespace cmil {

struct SamplerConfig {
  std::size_t input_dim = 0;
  std::size_t reduced_dim = 0;  // 0 = derive as max(8, input_dim / 4)
  std::size_t heads = 2;
  int rw_steps = 2;
  std::size_t pool_hops = 2;
  double attn_slope = 0.2;

  std::size_t effective_reduced_dim() const {
    std::size_t d = reduced_dim ? reduced_dim : std::max<std::size_t>(8, input_dim / 4);
    if (d % heads != 0) d += heads - d % heads;  // keep head count dividing width
    return d;
  }
};

template <typename T>
struct SamplerModel {
  SamplerConfig cfg;
  Tensor<T>* reduce_w = nullptr;  // [d, d']
  Tensor<T>* reduce_b = nullptr;  // [d']
  GTLayerWeights<T> gt1, gt2;
  Tensor<T>* pool_gamma = nullptr;  // [pool_hops + 1]
  Tensor<T>* head_w = nullptr;      // [d']
  Tensor<T>* head_b = nullptr;      // scalar
};

template <typename T>
SamplerModel<T> make_sampler_model(ParamStore<T>& store, const std::string& prefix,
                                   const SamplerConfig& cfg, Rng rng) {
  if (cfg.input_dim == 0) fail("sampler: input_dim must be set");
  const std::size_t dr = cfg.effective_reduced_dim();
  SamplerModel<T> m;
  m.cfg = cfg;
  m.reduce_w = &store.add(prefix + ".reduce_w", {cfg.input_dim, dr});
  m.reduce_b = &store.add(prefix + ".reduce_b", {dr});
  init_xavier(*m.reduce_w, rng.substream(1));
  m.gt1 = make_gt_layer(store, prefix + ".gt1", dr, cfg.heads, rng.substream(2));
  m.gt2 = make_gt_layer(store, prefix + ".gt2", dr, cfg.heads, rng.substream(3));
  m.pool_gamma = &store.add(prefix + ".pool_gamma", {cfg.pool_hops + 1});
  for (std::size_t k = 0; k <= cfg.pool_hops; ++k)
    m.pool_gamma->data[k] = T(1) / T(1 << k);
  m.head_w = &store.add(prefix + ".head_w", {dr});
  m.head_b = &store.add(prefix + ".head_b", {});
  init_xavier(*m.head_w, rng.substream(4));
  return m;
}

// Structure constants of one slide graph, reusable across epochs.
template <typename T>
struct SlideTopology {
  std::size_t num_nodes = 0;
  EdgeList edges;
  AttentionTopology at;
  PositionalEncoding<T> enc;
  HopSets hops;
};

template <typename T>
SlideTopology<T> make_slide_topology(const EdgeList& edges, std::size_t m,
                                     const SamplerConfig& cfg) {
  SlideTopology<T> topo;
  topo.num_nodes = m;
  topo.edges = edges;
  topo.at = build_attention_topology(edges, m);
  topo.enc = random_walk_encoding<T>(edges, m, cfg.rw_steps, cfg.effective_reduced_dim());
  topo.hops = build_hop_sets(edges, m, cfg.pool_hops);
  return topo;
}

// p = sigmoid(head(GT2(GT1(reduce(features))))), one probability per node in
// (0,1). Edge attributes are rebuilt from the reduced features before the GT.
template <typename T>
Value<T> node_probabilities(Tape<T>& tp, Value<T> features, const SlideTopology<T>& topo,
                            const SamplerModel<T>& model) {
  if (features.shape().size() != 2 || features.shape()[0] != topo.num_nodes ||
      features.shape()[1] != model.cfg.input_dim)
    fail("node_probabilities: feature shape " + shape_str(features.shape()) +
         " does not match graph/model");
  Value<T> reduced =
      add_bias_rows(matmul(features, tp.param(*model.reduce_w)), tp.param(*model.reduce_b));
  Value<T> attrs = attention_edge_attrs(reduced, topo.at);
  const T slope = T(model.cfg.attn_slope);
  Value<T> h1 = gt_layer(tp, reduced, topo.at, attrs, topo.enc, model.gt1, slope);
  Value<T> h2 = gt_layer(tp, h1, topo.at, attrs, topo.enc, model.gt2, slope);
  Value<T> pooled = khop_pool(tp, h2, topo.hops, *model.pool_gamma);
  Value<T> logits = add_scalar_value(matvec(pooled, tp.param(*model.head_w)),
                                     tp.param(*model.head_b));
  return sigmoid(logits);
}

// Likelihood of a mask under independent per-node Bernoulli probabilities,
// computed in log space with a -1e6 per-node floor for saturated entries.
template <typename T>
T subgraph_likelihood(const std::vector<T>& probs, const std::vector<std::uint8_t>& mask) {
  if (probs.size() != mask.size())
    fail("subgraph_likelihood: length mismatch " + std::to_string(probs.size()) + " vs " +
         std::to_string(mask.size()));
  const T floor = T(-1e6);
  T log_lik = T(0);
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (mask[j] != 0 && mask[j] != 1) fail("subgraph_likelihood: mask entries must be binary");
    const T p = mask[j] ? probs[j] : T(1) - probs[j];
    log_lik += std::max(std::log(p), floor);
  }
  return std::exp(log_lik);
}

// One recorded training draw: the hard sample plus the probabilities at the
// moment of sampling (the STE detach point). Replaying both makes a training
// step a smooth, deterministic function of the parameters.
template <typename T>
struct FrozenDraw {
  std::vector<std::uint8_t> draw;
  std::vector<T> base_probs;
};

template <typename T>
std::vector<std::uint8_t> bernoulli_draw(Rng& rng, const std::vector<T>& probs) {
  std::vector<std::uint8_t> draw(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j)
    draw[j] = rng.uniform() < double(probs[j]) ? 1 : 0;
  return draw;
}

// Causal graph C and complement S produced from one mask application.
template <typename T>
struct SubgraphSample {
  bool training = false;
  Value<T> probs;
  Value<T> mask;             // binary (STE) in training, probs in evaluation
  Value<T> complement_mask;  // 1 - mask
  std::vector<std::uint8_t> draw;  // recorded hard draw (training only)
  Value<T> causal_features;        // mask-scaled node features
  Value<T> complement_features;
  EdgeList causal_edges;     // training: both endpoints selected; eval: all edges
  EdgeList complement_edges;
};

// Training-mode hard sampling: the mask forward equals the recorded draw, the
// backward passes gradients to probs via the straight-through estimator; edges
// keep only pairs whose endpoints are both on the same side of the partition.
// `detached_probs`, when given, replaces the detach point of the STE surrogate
// (finite-difference audits freeze it at the base parameters).
template <typename T>
SubgraphSample<T> sample_train(Tape<T>& tp, Value<T> features, const EdgeList& edges,
                               Value<T> probs, const std::vector<std::uint8_t>& draw,
                               const std::vector<T>* detached_probs = nullptr) {
  const std::size_t m = probs.shape().at(0);
  if (draw.size() != m) fail("sample_train: draw length mismatch");
  SubgraphSample<T> s;
  s.training = true;
  s.probs = probs;
  s.draw = draw;
  std::vector<T> hard(m);
  std::size_t selected = 0;
  for (std::size_t j = 0; j < m; ++j) {
    hard[j] = T(draw[j]);
    selected += draw[j];
  }
  if (selected == 0) tp.note("sample_train: empty causal selection");
  if (selected == m) tp.note("sample_train: empty complement selection");
  s.mask = ste_mask(probs, hard, detached_probs);
  s.complement_mask = affine(s.mask, T(-1), T(1));
  s.causal_features = scale_rows(features, s.mask);
  s.complement_features = scale_rows(features, s.complement_mask);
  for (const auto& [a, b] : edges) {
    if (draw[a] && draw[b]) s.causal_edges.emplace_back(a, b);
    if (!draw[a] && !draw[b]) s.complement_edges.emplace_back(a, b);
  }
  return s;
}

// Evaluation-mode soft masking: deterministic, all edges retained.
template <typename T>
SubgraphSample<T> mask_eval(Tape<T>& tp, Value<T> features, const EdgeList& edges,
                            Value<T> probs) {
  (void)tp;
  SubgraphSample<T> s;
  s.training = false;
  s.probs = probs;
  s.mask = probs;
  s.complement_mask = affine(probs, T(-1), T(1));
  s.causal_features = scale_rows(features, s.mask);
  s.complement_features = scale_rows(features, s.complement_mask);
  s.causal_edges = edges;
  s.complement_edges = edges;
  return s;
}

// Per-slide probability export (node index, coordinate, probability).
template <typename T>
nlohmann::json export_node_probs(const std::string& slide_id,
                                 const std::vector<std::array<std::int32_t, 2>>& coords,
                                 const std::vector<T>& probs) {
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t j = 0; j < probs.size(); ++j)
    nodes.push_back({{"node", j},
                     {"coord", {coords[j][0], coords[j][1]}},
                     {"prob", double(probs[j])}});
  return nlohmann::json{{"id", slide_id}, {"nodes", std::move(nodes)}};
}

}  // namespace cmil
