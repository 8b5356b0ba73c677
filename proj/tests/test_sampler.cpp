#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmil/cohort.hpp"
#include "cmil/gradcheck.hpp"
#include "cmil/rng.hpp"
#include "cmil/sampler.hpp"

using namespace cmil;

namespace {

struct TestGraph {
  std::size_t m;
  std::size_t d;
  std::vector<double> feats;
  EdgeList edges;
};

TestGraph random_graph(Rng& rng, std::size_t m, std::size_t d, std::size_t k = 3) {
  TestGraph g;
  g.m = m;
  g.d = d;
  g.feats.resize(m * d);
  for (auto& v : g.feats) v = rng.uniform(-1.5, 1.5);
  if (m > 1) {
    std::vector<std::array<std::int32_t, 2>> coords(m);
    for (auto& c : coords)
      c = {std::int32_t(rng.uniform_int(20)), std::int32_t(rng.uniform_int(20))};
    g.edges = build_knn_graph(coords, k);
  }
  return g;
}

}  // namespace

TEST_CASE("zero head weights give probability 0.5 everywhere") {
  Rng rng(2);
  TestGraph g = random_graph(rng, 7, 8);
  SamplerConfig cfg;
  cfg.input_dim = g.d;
  ParamStore<double> store;
  auto model = make_sampler_model(store, "s", cfg, rng.substream(1));
  for (auto& v : model.head_w->data) v = 0.0;
  model.head_b->data[0] = 0.0;

  auto topo = make_slide_topology<double>(g.edges, g.m, cfg);
  Tape<double> tp;
  auto probs = node_probabilities(tp, tp.constant({g.m, g.d}, g.feats), topo, model);
  for (double p : probs.data()) CHECK(p == doctest::Approx(0.5));
}

TEST_CASE("node probabilities are permutation equivariant") {
  Rng rng(3);
  TestGraph g = random_graph(rng, 9, 8);
  SamplerConfig cfg;
  cfg.input_dim = g.d;
  ParamStore<double> store;
  auto model = make_sampler_model(store, "s", cfg, rng.substream(1));

  auto run = [&](const EdgeList& edges, const std::vector<double>& feats) {
    auto topo = make_slide_topology<double>(edges, g.m, cfg);
    Tape<double> tp;
    tp.set_grad_enabled(false);
    return node_probabilities(tp, tp.constant({g.m, g.d}, feats), topo, model).data();
  };

  auto base = run(g.edges, g.feats);

  std::vector<std::uint32_t> perm(g.m);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<double> pf(g.m * g.d);
  for (std::size_t i = 0; i < g.m; ++i)
    for (std::size_t j = 0; j < g.d; ++j) pf[perm[i] * g.d + j] = g.feats[i * g.d + j];
  EdgeList pe;
  for (auto [a, b] : g.edges) pe.emplace_back(perm[a], perm[b]);
  std::sort(pe.begin(), pe.end());
  auto permuted = run(pe, pf);

  for (std::size_t i = 0; i < g.m; ++i)
    CHECK(permuted[perm[i]] == doctest::Approx(base[i]).epsilon(1e-9));
}

TEST_CASE("single node, no edges: probability matches a scalar recomputation") {
  Rng rng(5);
  const std::size_t d = 4;
  SamplerConfig cfg;
  cfg.input_dim = d;  // reduced dim = 8, heads = 2, head dim = 4
  ParamStore<double> store;
  auto model = make_sampler_model(store, "s", cfg, rng.substream(1));
  const std::size_t dr = cfg.effective_reduced_dim();
  const std::size_t dh = dr / cfg.heads;

  std::vector<double> x(d);
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);

  auto topo = make_slide_topology<double>({}, 1, cfg);
  Tape<double> tp;
  tp.set_grad_enabled(false);
  double got =
      node_probabilities(tp, tp.constant({1, d}, x), topo, model).data()[0];

  // independent plain-loop recomputation
  auto vecmat = [](const std::vector<double>& v, const std::vector<double>& w,
                   std::size_t r, std::size_t c) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += v[i] * w[i * c + j];
    return out;
  };
  auto lnorm = [](std::vector<double> v, const std::vector<double>& gm,
                  const std::vector<double>& bt) {
    double mu = 0, var = 0;
    for (double q : v) mu += q;
    mu /= double(v.size());
    for (double q : v) var += (q - mu) * (q - mu);
    var /= double(v.size());
    for (std::size_t j = 0; j < v.size(); ++j)
      v[j] = gm[j] * (v[j] - mu) / std::sqrt(var + 1e-5) + bt[j];
    return v;
  };
  auto gelu_s = [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); };
  auto lrelu = [](double v, double a) { return v > 0 ? v : a * v; };

  std::vector<double> r = vecmat(x, model.reduce_w->data, d, dr);
  for (std::size_t j = 0; j < dr; ++j) r[j] += model.reduce_b->data[j];
  std::vector<double> attr(2 * dr);
  for (std::size_t j = 0; j < dr; ++j) { attr[j] = r[j]; attr[dr + j] = r[j]; }

  auto layer = [&](const std::vector<double>& h, const GTLayerWeights<double>& w) {
    std::vector<double> cat;
    for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
      auto q = vecmat(h, w.wq[hd]->data, dr, dh);
      auto k = vecmat(h, w.wk[hd]->data, dr, dh);
      auto v = vecmat(h, w.wv[hd]->data, dr, dh);
      double dotqk = 0;
      for (std::size_t j = 0; j < dh; ++j) dotqk += q[j] * k[j];
      double phi = w.edge_b[hd]->data[0];
      for (std::size_t j = 0; j < 2 * dr; ++j) phi += attr[j] * w.edge_w[hd]->data[j];
      (void)lrelu(dotqk / std::sqrt(double(dh)) + phi, 0.2);  // alpha = 1 regardless
      // single self edge: alpha = 1, R = 1, so z = (1 + 1) * v
      std::vector<double> z(dh);
      for (std::size_t j = 0; j < dh; ++j) z[j] = 2.0 * v[j];
      auto oh = vecmat(z, w.wo[hd]->data, dh, dh);
      cat.insert(cat.end(), oh.begin(), oh.end());
    }
    std::vector<double> res(dr);
    for (std::size_t j = 0; j < dr; ++j) res[j] = h[j] + cat[j];
    auto n1 = lnorm(res, w.ln1_g->data, w.ln1_b->data);
    auto f1 = vecmat(n1, w.ffn_w1->data, dr, 4 * dr);
    for (std::size_t j = 0; j < 4 * dr; ++j) f1[j] = gelu_s(f1[j] + w.ffn_b1->data[j]);
    auto f2 = vecmat(f1, w.ffn_w2->data, 4 * dr, dr);
    for (std::size_t j = 0; j < dr; ++j) f2[j] += w.ffn_b2->data[j] + n1[j];
    return lnorm(f2, w.ln2_g->data, w.ln2_b->data);
  };

  auto h2 = layer(layer(r, model.gt1), model.gt2);
  double logit = model.head_b->data[0];
  for (std::size_t j = 0; j < dr; ++j)
    logit += model.pool_gamma->data[0] * h2[j] * model.head_w->data[j];
  const double expect = 1.0 / (1.0 + std::exp(-logit));
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("likelihood closed forms") {
  CHECK(subgraph_likelihood<double>({1.0, 1.0, 1.0}, {1, 1, 1}) == doctest::Approx(1.0));
  const std::size_t m = 6;
  std::vector<double> half(m, 0.5);
  std::vector<std::uint8_t> any(m, 1);
  CHECK(subgraph_likelihood<double>(half, any) == doctest::Approx(std::pow(0.5, double(m))));
  CHECK_THROWS_WITH_AS(subgraph_likelihood<double>({0.5}, {1, 0}),
                       doctest::Contains("length mismatch"), std::runtime_error);
  // contradicting saturated probability: likelihood collapses to ~0, no crash
  CHECK(subgraph_likelihood<double>({0.0}, {1}) <= std::exp(-1e6 + 1.0));
}

TEST_CASE("likelihoods over all masks sum to 1 (m=10, exhaustive)") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = 10;
    std::vector<double> probs(m);
    for (auto& p : probs) p = rng.uniform(0.02, 0.98);
    double total = 0.0;
    for (std::uint32_t mask = 0; mask < (1u << m); ++mask) {
      std::vector<std::uint8_t> bits(m);
      for (std::size_t j = 0; j < m; ++j) bits[j] = (mask >> j) & 1;
      total += subgraph_likelihood(probs, bits);
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("sample_train with degenerate probabilities") {
  Rng rng(9);
  TestGraph g = random_graph(rng, 8, 4);
  Tape<double> tp;
  std::vector<std::string> events;
  tp.set_event_log(&events);
  auto feats = tp.constant({g.m, g.d}, g.feats);

  SUBCASE("all ones keeps the whole graph causal") {
    auto probs = tp.constant({g.m}, std::vector<double>(g.m, 1.0));
    Rng draw_rng = rng.substream(1);
    auto draw = bernoulli_draw(draw_rng, probs.data());
    auto s = sample_train(tp, feats, g.edges, probs, draw);
    CHECK(s.causal_features.data() == g.feats);
    CHECK(s.causal_edges == g.edges);
    CHECK(s.complement_edges.empty());
    for (double v : s.complement_features.data()) CHECK(v == 0.0);
    CHECK(!events.empty());  // empty complement noted
  }
  SUBCASE("all zeros flags the empty causal selection") {
    auto probs = tp.constant({g.m}, std::vector<double>(g.m, 0.0));
    Rng draw_rng = rng.substream(2);
    auto draw = bernoulli_draw(draw_rng, probs.data());
    auto s = sample_train(tp, feats, g.edges, probs, draw);
    for (double v : s.causal_features.data()) CHECK(v == 0.0);
    CHECK(s.complement_features.data() == g.feats);
    CHECK(s.causal_edges.empty());
    CHECK(s.complement_edges == g.edges);
    REQUIRE(!events.empty());
    CHECK(events[0].find("empty causal selection") != std::string::npos);
  }
}

TEST_CASE("training mode partitions nodes between causal and complement") {
  Rng rng(11);
  TestGraph g = random_graph(rng, 30, 4);
  Tape<double> tp;
  auto feats = tp.constant({g.m, g.d}, g.feats);
  std::vector<double> pv(g.m);
  for (auto& p : pv) p = rng.uniform(0.1, 0.9);
  auto probs = tp.constant({g.m}, pv);
  Rng draw_rng = rng.substream(1);
  auto draw = bernoulli_draw(draw_rng, probs.data());
  auto s = sample_train(tp, feats, g.edges, probs, draw);
  for (std::size_t j = 0; j < g.m; ++j) {
    CHECK(s.mask.data()[j] + s.complement_mask.data()[j] == 1.0);
    CHECK((s.mask.data()[j] == 0.0 || s.mask.data()[j] == 1.0));
  }
  for (auto [a, b] : s.causal_edges) { CHECK(draw[a] == 1); CHECK(draw[b] == 1); }
  for (auto [a, b] : s.complement_edges) { CHECK(draw[a] == 0); CHECK(draw[b] == 0); }
}

TEST_CASE("selected fraction concentrates for fair coins (m=1000)") {
  const std::size_t m = 1000;
  std::vector<double> probs(m, 0.5);
  int in_range = 0;
  for (int seed = 0; seed < 200; ++seed) {
    Rng rng(300 + seed);
    auto draw = bernoulli_draw(rng, probs);
    double frac = std::accumulate(draw.begin(), draw.end(), 0.0) / double(m);
    if (frac >= 0.45 && frac <= 0.55) ++in_range;
  }
  CHECK(in_range >= 198);  // P(in range) ~ 0.9984 per draw
}

TEST_CASE("mask_eval identities") {
  Rng rng(13);
  TestGraph g = random_graph(rng, 12, 4);
  Tape<double> tp;
  auto feats = tp.constant({g.m, g.d}, g.feats);

  auto ones = tp.constant({g.m}, std::vector<double>(g.m, 1.0));
  auto s1 = mask_eval(tp, feats, g.edges, ones);
  CHECK(s1.causal_features.data() == g.feats);
  CHECK(s1.causal_edges == g.edges);
  CHECK(s1.complement_edges == g.edges);  // soft mode keeps all edges

  auto half = tp.constant({g.m}, std::vector<double>(g.m, 0.5));
  auto s2 = mask_eval(tp, feats, g.edges, half);
  for (std::size_t q = 0; q < g.feats.size(); ++q)
    CHECK(s2.causal_features.data()[q] == doctest::Approx(0.5 * g.feats[q]));
}

TEST_CASE("hard sampling matches soft masking in expectation") {
  Rng rng(17);
  TestGraph g = random_graph(rng, 10, 3);
  std::vector<double> pv(g.m);
  for (auto& p : pv) p = rng.uniform(0.15, 0.85);

  Tape<double> tp;
  tp.set_grad_enabled(false);
  auto feats = tp.constant({g.m, g.d}, g.feats);
  auto probs = tp.constant({g.m}, pv);
  auto soft = mask_eval(tp, feats, g.edges, probs).causal_features.data();

  const int n_samples = 20000;
  std::vector<double> mean(g.m * g.d, 0.0);
  for (int s = 0; s < n_samples; ++s) {
    Rng draw_rng = rng.substream(1000 + s);
    auto draw = bernoulli_draw(draw_rng, pv);
    for (std::size_t j = 0; j < g.m; ++j)
      if (draw[j])
        for (std::size_t q = 0; q < g.d; ++q)
          mean[j * g.d + q] += g.feats[j * g.d + q];
  }
  for (auto& v : mean) v /= double(n_samples);

  for (std::size_t j = 0; j < g.m; ++j) {
    const double se_mask = std::sqrt(pv[j] * (1 - pv[j]) / double(n_samples));
    for (std::size_t q = 0; q < g.d; ++q) {
      const double se = se_mask * std::abs(g.feats[j * g.d + q]) + 1e-12;
      CHECK(std::abs(mean[j * g.d + q] - soft[j * g.d + q]) <= 3.0 * se);
    }
  }
}

TEST_CASE("ste gradient equals finite differences of the soft path at the draw") {
  Rng rng(19);
  TestGraph g = random_graph(rng, 8, 4);
  std::vector<double> w(g.m * g.d);
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  std::vector<double> pv(g.m);
  for (auto& p : pv) p = rng.uniform(0.2, 0.8);
  Rng draw_rng = rng.substream(5);
  auto draw = bernoulli_draw(draw_rng, pv);

  // analytic gradient through sample_train at arbitrary probs
  Tensor<double> probs_param({g.m}, pv);
  {
    Tape<double> tp;
    auto feats = tp.constant({g.m, g.d}, g.feats);
    auto probs = tp.param(probs_param);
    auto s = sample_train(tp, feats, g.edges, probs, draw);
    auto wv = tp.constant({g.m, g.d}, w);
    tp.backward(sum_all(mul(s.causal_features, wv)));
  }

  // finite differences of the soft path, evaluated at q = draw
  Tensor<double> q({g.m});
  for (std::size_t j = 0; j < g.m; ++j) q.data[j] = double(draw[j]);
  auto soft_loss = [&](Tape<double>& tp) {
    auto feats = tp.constant({g.m, g.d}, g.feats);
    auto s = mask_eval(tp, feats, g.edges, tp.param(q));
    auto wv = tp.constant({g.m, g.d}, w);
    return sum_all(mul(s.causal_features, wv));
  };
  CHECK(grad_check<double>({&q}, soft_loss, 1e-5) <= 1e-4);
  for (std::size_t j = 0; j < g.m; ++j)
    CHECK(probs_param.grad[j] == doctest::Approx(q.grad[j]).epsilon(1e-9));
}

TEST_CASE("sampler gradients through probabilities match finite differences") {
  Rng rng(23);
  TestGraph g = random_graph(rng, 6, 4);
  SamplerConfig cfg;
  cfg.input_dim = g.d;
  ParamStore<double> store;
  auto model = make_sampler_model(store, "s", cfg, rng.substream(1));
  auto topo = make_slide_topology<double>(g.edges, g.m, cfg);

  std::vector<double> w(g.m);
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  std::vector<Tensor<double>*> params;
  for (auto& [name, t] : store.items()) params.push_back(&t);

  auto loss = [&](Tape<double>& tp) {
    auto feats = tp.constant({g.m, g.d}, g.feats);
    auto probs = node_probabilities(tp, feats, topo, model);
    auto wv = tp.constant({g.m}, w);
    return sum_all(mul(probs, wv));
  };
  CHECK(grad_check<double>(params, loss, 1e-5) <= 1e-4);
}

TEST_CASE("zero-edge graphs are allowed") {
  Rng rng(29);
  const std::size_t m = 4, d = 4;
  std::vector<double> feats(m * d);
  for (auto& v : feats) v = rng.uniform(-1.0, 1.0);
  SamplerConfig cfg;
  cfg.input_dim = d;
  ParamStore<double> store;
  auto model = make_sampler_model(store, "s", cfg, rng.substream(1));
  auto topo = make_slide_topology<double>({}, m, cfg);
  Tape<double> tp;
  auto probs = node_probabilities(tp, tp.constant({m, d}, feats), topo, model);
  for (double p : probs.data()) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
}

TEST_CASE("node prob export carries coordinates") {
  std::vector<std::array<std::int32_t, 2>> coords = {{1, 2}, {3, 4}};
  auto j = export_node_probs<double>("s1", coords, {0.25, 0.75});
  CHECK(j["id"] == "s1");
  CHECK(j["nodes"].size() == 2);
  CHECK(j["nodes"][1]["coord"][0] == 3);
  CHECK(j["nodes"][1]["prob"] == doctest::Approx(0.75));
}
