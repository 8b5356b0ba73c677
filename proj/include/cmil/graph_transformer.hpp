#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmil/cohort.hpp"
#include "cmil/init.hpp"
#include "cmil/ops.hpp"
#include "cmil/tape.hpp"

// Structure-aware graph transformer: multi-head neighbourhood attention with a
// learned edge bias, random-walk positional encoding, residual + layer norm,
// GELU feed-forward (width x4), and K-hop pooled readout.

namespace cmil {

// --- random-walk positional encoding -------------------------------------------

template <typename T>
struct PositionalEncoding {
  std::size_t num_nodes = 0;
  int steps = 0;
  std::vector<T> transition;  // averaged 1..k step transition matrix, rows sum to 1
  std::vector<T> r;           // row-softmax of scaled log transition probabilities
};

// Transition matrix = average of the 1..steps powers of the degree-normalized
// adjacency; an isolated node falls back to a self-loop row. R applies a
// row softmax to log probabilities scaled by 1/sqrt(width), with zero entries
// floored at log(1e-12).
template <typename T>
PositionalEncoding<T> random_walk_encoding(const EdgeList& edges, std::size_t m,
                                           int steps, std::size_t width) {
  if (m == 0) fail("random_walk_encoding: empty graph");
  if (steps < 1) fail("random_walk_encoding: steps must be >= 1");
  std::vector<double> p(m * m, 0.0);
  std::vector<double> degree(m, 0.0);
  for (const auto& [a, b] : edges) {
    p[std::size_t(a) * m + b] += 1.0;
    degree[a] += 1.0;
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (degree[i] == 0.0) {
      p[i * m + i] = 1.0;  // self-loop fallback for isolated nodes
    } else {
      for (std::size_t j = 0; j < m; ++j) p[i * m + j] /= degree[i];
    }
  }

  std::vector<double> acc = p;
  std::vector<double> pk = p;
  std::vector<double> tmp(m * m);
  for (int s = 2; s <= steps; ++s) {
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t q = 0; q < m; ++q) {
        const double v = pk[i * m + q];
        if (v == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) tmp[i * m + j] += v * p[q * m + j];
      }
    pk = tmp;
    for (std::size_t q = 0; q < m * m; ++q) acc[q] += pk[q];
  }
  for (auto& v : acc) v /= double(steps);

  PositionalEncoding<T> enc;
  enc.num_nodes = m;
  enc.steps = steps;
  enc.transition.resize(m * m);
  enc.r.resize(m * m);
  const double scale = 1.0 / std::sqrt(double(width));
  const double log_floor = std::log(1e-12);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> logits(m);
    for (std::size_t j = 0; j < m; ++j) {
      enc.transition[i * m + j] = T(acc[i * m + j]);
      const double lp = acc[i * m + j] > 1e-12 ? std::log(acc[i * m + j]) : log_floor;
      logits[j] = lp * scale;
      mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(logits[j] - mx);
    for (std::size_t j = 0; j < m; ++j)
      enc.r[i * m + j] = T(std::exp(logits[j] - mx) / z);
  }
  return enc;
}

// --- attention topology ----------------------------------------------------------

// Directed attention edges (receiver attends to sender), graph neighbourhoods
// plus a self edge per node, sorted for deterministic summation order.
struct AttentionTopology {
  std::size_t num_nodes = 0;
  std::vector<std::uint32_t> recv;
  std::vector<std::uint32_t> send;
};

inline AttentionTopology build_attention_topology(const EdgeList& edges, std::size_t m) {
  std::vector<std::uint64_t> keys;
  keys.reserve(edges.size() + m);
  for (const auto& [a, b] : edges) keys.push_back((std::uint64_t(a) << 32) | b);
  for (std::uint32_t i = 0; i < m; ++i) keys.push_back((std::uint64_t(i) << 32) | i);
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  AttentionTopology at;
  at.num_nodes = m;
  at.recv.reserve(keys.size());
  at.send.reserve(keys.size());
  for (auto key : keys) {
    at.recv.push_back(std::uint32_t(key >> 32));
    at.send.push_back(std::uint32_t(key & 0xFFFFFFFFu));
  }
  return at;
}

// Edge attribute rows for the attention topology, rebuilt on tape from the
// current node features (endpoint features concatenated).
template <typename T>
Value<T> attention_edge_attrs(Value<T> node_features, const AttentionTopology& at) {
  return concat_cols(gather_rows(node_features, at.recv),
                     gather_rows(node_features, at.send));
}

// --- layer parameters --------------------------------------------------------------

template <typename T>
struct GTLayerWeights {
  std::size_t heads = 0;
  std::vector<Tensor<T>*> wq, wk, wv, wo;   // per head: [d', dh], wo [dh, dh]
  std::vector<Tensor<T>*> edge_w;           // per head: [2d']
  std::vector<Tensor<T>*> edge_b;           // per head: scalar
  Tensor<T>* ffn_w1 = nullptr;              // [d', 4d']
  Tensor<T>* ffn_b1 = nullptr;              // [4d']
  Tensor<T>* ffn_w2 = nullptr;              // [4d', d']
  Tensor<T>* ffn_b2 = nullptr;              // [d']
  Tensor<T>* ln1_g = nullptr;
  Tensor<T>* ln1_b = nullptr;
  Tensor<T>* ln2_g = nullptr;
  Tensor<T>* ln2_b = nullptr;
};

template <typename T>
GTLayerWeights<T> make_gt_layer(ParamStore<T>& store, const std::string& prefix,
                                std::size_t width, std::size_t heads, Rng rng) {
  if (heads == 0 || width % heads != 0)
    fail("make_gt_layer: head count must divide width");
  const std::size_t dh = width / heads;
  GTLayerWeights<T> w;
  w.heads = heads;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    w.wq.push_back(&store.add(hp + ".wq", {width, dh}));
    w.wk.push_back(&store.add(hp + ".wk", {width, dh}));
    w.wv.push_back(&store.add(hp + ".wv", {width, dh}));
    w.wo.push_back(&store.add(hp + ".wo", {dh, dh}));
    w.edge_w.push_back(&store.add(hp + ".edge_w", {2 * width}));
    w.edge_b.push_back(&store.add(hp + ".edge_b", {}));
    init_xavier(*w.wq.back(), rng.substream(h * 8 + 0));
    init_xavier(*w.wk.back(), rng.substream(h * 8 + 1));
    init_xavier(*w.wv.back(), rng.substream(h * 8 + 2));
    init_xavier(*w.wo.back(), rng.substream(h * 8 + 3));
    init_normal(*w.edge_w.back(), rng.substream(h * 8 + 4),
                0.1 / std::sqrt(double(2 * width)));
  }
  w.ffn_w1 = &store.add(prefix + ".ffn_w1", {width, 4 * width});
  w.ffn_b1 = &store.add(prefix + ".ffn_b1", {4 * width});
  w.ffn_w2 = &store.add(prefix + ".ffn_w2", {4 * width, width});
  w.ffn_b2 = &store.add(prefix + ".ffn_b2", {width});
  w.ln1_g = &store.add(prefix + ".ln1_g", {width});
  w.ln1_b = &store.add(prefix + ".ln1_b", {width});
  w.ln2_g = &store.add(prefix + ".ln2_g", {width});
  w.ln2_b = &store.add(prefix + ".ln2_b", {width});
  init_xavier(*w.ffn_w1, rng.substream(101));
  init_xavier(*w.ffn_w2, rng.substream(102));
  init_const(*w.ln1_g, T(1));
  init_const(*w.ln2_g, T(1));
  return w;
}

// --- forward -----------------------------------------------------------------------

// One transformer layer. `edge_attr` rows follow the attention topology order
// (self edges concatenate a node's features with themselves). If `attn_out` is
// given, the per-head neighbourhood attention weights are appended to it.
template <typename T>
Value<T> gt_layer(Tape<T>& tp, Value<T> h_in, const AttentionTopology& at,
                  Value<T> edge_attr, const PositionalEncoding<T>& enc,
                  const GTLayerWeights<T>& w, T attn_slope = T(0.2),
                  std::vector<Value<T>>* attn_out = nullptr) {
  const std::size_t m = at.num_nodes;
  if (h_in.shape().size() != 2 || h_in.shape()[0] != m)
    fail("gt_layer: node feature shape " + shape_str(h_in.shape()) +
         " does not match topology");
  const std::size_t width = h_in.shape()[1];
  const std::size_t dh = width / w.heads;
  const std::size_t n_edges = at.recv.size();
  if (edge_attr.shape()[0] != n_edges || edge_attr.shape()[1] != 2 * width)
    fail("gt_layer: edge attr shape " + shape_str(edge_attr.shape()) +
         " does not match topology");

  // 1 + R per attention edge: attention and encoding-modulated aggregation
  // combine into a single per-edge coefficient ((1 + R) o alpha) V.
  std::vector<T> r_plus_1(n_edges);
  for (std::size_t e = 0; e < n_edges; ++e)
    r_plus_1[e] = T(1) + enc.r[std::size_t(at.recv[e]) * m + at.send[e]];
  Value<T> rp1 = tp.constant({n_edges}, r_plus_1);

  const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));
  Value<T> heads_cat;
  for (std::size_t h = 0; h < w.heads; ++h) {
    Value<T> q = matmul(h_in, tp.param(*w.wq[h]));
    Value<T> k = matmul(h_in, tp.param(*w.wk[h]));
    Value<T> v = matmul(h_in, tp.param(*w.wv[h]));
    Value<T> gq = gather_rows(q, at.recv);
    Value<T> gk = gather_rows(k, at.send);
    Value<T> dots = scale(reduce_sum_axis(mul(gq, gk), 1), inv_sqrt_dh);
    Value<T> phi = add_scalar_value(matvec(edge_attr, tp.param(*w.edge_w[h])),
                                    tp.param(*w.edge_b[h]));
    Value<T> scores = leaky_relu(add(dots, phi), attn_slope);
    Value<T> alpha = segment_softmax(scores, at.recv, m);
    if (attn_out) attn_out->push_back(alpha);
    Value<T> coef = mul(alpha, rp1);
    Value<T> gv = gather_rows(v, at.send);
    Value<T> z = segment_sum_rows(scale_rows(gv, coef), at.recv, m);
    Value<T> out_h = matmul(z, tp.param(*w.wo[h]));
    heads_cat = (h == 0) ? out_h : concat_cols(heads_cat, out_h);
  }

  Value<T> norm1 = layer_norm_rows(add(h_in, heads_cat), tp.param(*w.ln1_g),
                                   tp.param(*w.ln1_b));
  Value<T> ffn =
      add_bias_rows(matmul(gelu(add_bias_rows(matmul(norm1, tp.param(*w.ffn_w1)),
                                              tp.param(*w.ffn_b1))),
                           tp.param(*w.ffn_w2)),
                    tp.param(*w.ffn_b2));
  return layer_norm_rows(add(norm1, ffn), tp.param(*w.ln2_g), tp.param(*w.ln2_b));
}

// --- K-hop pooling -----------------------------------------------------------------

// hop_sets[k][i] = nodes at exactly hop distance k from i (N_0 = {i}).
using HopSets = std::vector<std::vector<std::vector<std::uint32_t>>>;

inline HopSets build_hop_sets(const EdgeList& edges, std::size_t m, std::size_t max_hops) {
  std::vector<std::vector<std::uint32_t>> adj(m);
  for (const auto& [a, b] : edges) adj[a].push_back(b);
  HopSets hops(max_hops + 1,
               std::vector<std::vector<std::uint32_t>>(m));
  std::vector<int> dist(m);
  for (std::uint32_t i = 0; i < m; ++i) {
    std::fill(dist.begin(), dist.end(), -1);
    dist[i] = 0;
    std::vector<std::uint32_t> frontier{i};
    hops[0][i] = {i};
    for (std::size_t k = 1; k <= max_hops && !frontier.empty(); ++k) {
      std::vector<std::uint32_t> next;
      for (auto u : frontier)
        for (auto vtx : adj[u])
          if (dist[vtx] < 0) {
            dist[vtx] = int(k);
            next.push_back(vtx);
          }
      std::sort(next.begin(), next.end());
      hops[k][i] = next;
      frontier = std::move(next);
    }
  }
  return hops;
}

// y_i = sum_k gamma_k * mean({h_j : j at hop k from i}); empty hop sets
// contribute nothing.
template <typename T>
Value<T> khop_pool(Tape<T>& tp, Value<T> h_final, const HopSets& hops, Tensor<T>& gamma) {
  if (gamma.shape != Shape{hops.size()})
    fail("khop_pool: gamma length " + shape_str(gamma.shape) + " != hop count " +
         std::to_string(hops.size()));
  Value<T> g = tp.param(gamma);
  Value<T> acc;
  for (std::size_t k = 0; k < hops.size(); ++k) {
    Value<T> mk = group_mean_rows(h_final, hops[k]);
    Value<T> term = mul(mk, element(g, k));
    acc = (k == 0) ? term : add(acc, term);
  }
  return acc;
}

}  // namespace cmil
