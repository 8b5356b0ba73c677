#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cmil/gradcheck.hpp"
#include "cmil/rng.hpp"
#include "cmil/survival.hpp"

using namespace cmil;

namespace {

std::vector<SurvivalLabel> random_labels(Rng& rng, std::size_t n, double event_prob = 0.7,
                                         bool allow_ties = true) {
  std::vector<SurvivalLabel> labels(n);
  for (auto& l : labels) {
    l.time = allow_ties ? double(1 + rng.uniform_int(8)) : rng.uniform(0.1, 10.0);
    l.event = rng.bernoulli(event_prob);
  }
  return labels;
}

// Independent risk-set enumeration oracle for the Cox partial likelihood.
double cox_oracle(const std::vector<double>& risks, const std::vector<SurvivalLabel>& labels) {
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i].event) continue;
    double mx = -1e300;
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (labels[j].time >= labels[i].time) mx = std::max(mx, risks[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (labels[j].time >= labels[i].time) z += std::exp(risks[j] - mx);
    loss -= risks[i] - (mx + std::log(z));
  }
  return loss;
}

// Independent pair-counting oracle for the concordance index.
std::optional<double> cindex_oracle(const std::vector<double>& risks,
                                    const std::vector<SurvivalLabel>& labels) {
  double num = 0, den = 0;
  const std::size_t n = risks.size();
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      // a plays the role of the earlier event
      bool comparable = false;
      if (labels[a].event && labels[a].time < labels[b].time) comparable = true;
      if (labels[a].event && !labels[b].event && labels[a].time == labels[b].time)
        comparable = true;
      if (!comparable) continue;
      den += 1.0;
      if (risks[a] > risks[b]) num += 1.0;
      else if (risks[a] == risks[b]) num += 0.5;
    }
  if (den == 0) return std::nullopt;
  return num / den;
}

// Independent log-rank oracle: explicit 2x2 event table per distinct event time.
double logrank_oracle(const std::vector<SurvivalLabel>& labels, const std::vector<int>& grp) {
  std::vector<double> times;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].event) times.push_back(labels[i].time);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  double o_minus_e = 0, v = 0;
  for (double t : times) {
    double n1 = 0, n0 = 0, d1 = 0, d0 = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i].time >= t) (grp[i] ? n1 : n0) += 1;
      if (labels[i].event && labels[i].time == t) (grp[i] ? d1 : d0) += 1;
    }
    const double n = n0 + n1, d = d0 + d1;
    o_minus_e += d1 - d * n1 / n;
    if (n > 1) v += (n1 * n0 * d * (n - d)) / (n * n * (n - 1));
  }
  return v > 0 ? o_minus_e * o_minus_e / v : 0.0;
}

}  // namespace

TEST_CASE("backbone: zero weights produce zero risk") {
  Rng rng(3);
  ParamStore<double> store;
  auto model = make_backbone(store, "b", 6, rng);
  for (auto& [name, t] : store.items())
    for (auto& v : t.data) v = 0.0;
  std::vector<double> feats(5 * 6);
  for (auto& v : feats) v = rng.uniform(-1.0, 1.0);
  Tape<double> tp;
  auto out = backbone_forward(tp, tp.constant({5, 6}, feats), {{0, 1}, {1, 0}}, model);
  CHECK(out.risk.item() == 0.0);
}

TEST_CASE("backbone: all-zero features pool to the zero vector and the head bias") {
  Rng rng(5);
  ParamStore<double> store;
  auto model = make_backbone(store, "b", 6, rng);
  model.risk_b->data[0] = 0.37;
  Tape<double> tp;
  auto out = backbone_forward(tp, tp.constant({4, 6}, std::vector<double>(24, 0.0)),
                              {{0, 1}, {1, 0}}, model);
  for (double v : out.slide_embedding.data()) CHECK(v == 0.0);
  CHECK(out.risk.item() == 0.37);
}

TEST_CASE("backbone: single node matches a scalar recomputation") {
  Rng rng(7);
  const std::size_t d = 4;
  ParamStore<double> store;
  auto model = make_backbone(store, "b", d, rng);
  std::vector<double> x(d);
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);

  Tape<double> tp;
  auto out = backbone_forward(tp, tp.constant({1, d}, x), {}, model);

  auto vecmat = [&](const std::vector<double>& v, const std::vector<double>& w) {
    std::vector<double> r(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) r[j] += v[i] * w[i * d + j];
    return r;
  };
  auto gelu_s = [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); };
  std::vector<double> h = x;
  for (int l = 0; l < 2; ++l) {
    auto u = vecmat(h, model.mp_self[l]->data);  // empty neighbourhood: mean = 0
    for (std::size_t j = 0; j < d; ++j) h[j] += gelu_s(u[j]);
  }
  double gs = 0;
  auto gw = vecmat(h, model.gate_w->data);
  for (std::size_t j = 0; j < d; ++j) gs += std::tanh(gw[j]) * model.gate_v->data[j];
  const double gate = 1.0 / (1.0 + std::exp(-gs));
  auto val = vecmat(h, model.value_w->data);
  double risk = model.risk_b->data[0];
  for (std::size_t j = 0; j < d; ++j) {
    const double z = val[j] * gate / gate;  // single node: weighted mean = value row
    CHECK(out.slide_embedding.data()[j] == doctest::Approx(z).epsilon(1e-12));
    risk += z * model.risk_w->data[j];
  }
  CHECK(out.risk.item() == doctest::Approx(risk).epsilon(1e-12));
}

TEST_CASE("backbone: duplicating every node leaves the pooled embedding unchanged") {
  Rng rng(9);
  const std::size_t m = 6, d = 5;
  ParamStore<double> store;
  auto model = make_backbone(store, "b", d, rng);
  std::vector<double> feats(m * d);
  for (auto& v : feats) v = rng.uniform(-1.0, 1.0);
  EdgeList edges = {{0, 1}, {1, 0}, {2, 3}, {3, 2}, {4, 5}, {5, 4}, {1, 2}, {2, 1}};

  Tape<double> tp;
  auto base = backbone_forward(tp, tp.constant({m, d}, feats), edges, model);

  std::vector<double> feats2 = feats;
  feats2.insert(feats2.end(), feats.begin(), feats.end());
  EdgeList edges2 = edges;
  for (auto [a, b] : edges)
    edges2.emplace_back(std::uint32_t(a + m), std::uint32_t(b + m));
  auto dup = backbone_forward(tp, tp.constant({2 * m, d}, feats2), edges2, model);

  for (std::size_t j = 0; j < d; ++j)
    CHECK(dup.slide_embedding.data()[j] ==
          doctest::Approx(base.slide_embedding.data()[j]).epsilon(1e-12));
}

TEST_CASE("cox loss closed forms") {
  SUBCASE("singleton batch with one event is exactly zero") {
    Tape<double> tp;
    auto risks = tp.constant({1}, {1.7});
    CHECK(cox_loss(tp, risks, {{2.0, true}}).item() == 0.0);
  }
  SUBCASE("two uncensored samples, hand formula") {
    const double a = 0.8, b = -0.4;
    Tape<double> tp;
    auto risks = tp.constant({2}, {a, b});
    std::vector<SurvivalLabel> labels = {{1.0, true}, {2.0, true}};
    const double expect = std::log(std::exp(a) + std::exp(b)) - a;
    CHECK(cox_loss(tp, risks, labels).item() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("no uncensored samples: zero loss with a note") {
    Tape<double> tp;
    std::vector<std::string> events;
    tp.set_event_log(&events);
    auto risks = tp.constant({3}, {0.1, 0.2, 0.3});
    std::vector<SurvivalLabel> labels = {{1.0, false}, {2.0, false}, {3.0, false}};
    CHECK(cox_loss(tp, risks, labels).item() == 0.0);
    REQUIRE(events.size() == 1);
    CHECK(events[0].find("no uncensored") != std::string::npos);
  }
  SUBCASE("non-finite risks are rejected") {
    Tape<double> tp;
    auto risks = tp.constant({2}, {0.1, std::numeric_limits<double>::infinity()});
    std::vector<SurvivalLabel> labels = {{1.0, true}, {2.0, true}};
    CHECK_THROWS_WITH_AS(cox_loss(tp, risks, labels), doctest::Contains("non-finite"),
                         std::runtime_error);
  }
}

TEST_CASE("cox loss matches the risk-set enumeration oracle on 1000 batches") {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(31);
    auto labels = random_labels(rng, n);
    std::vector<double> risks(n);
    for (auto& r : risks) r = rng.uniform(-2.0, 2.0);
    Tape<double> tp;
    const double got = cox_loss(tp, tp.constant({n}, risks), labels).item();
    CHECK(std::abs(got - cox_oracle(risks, labels)) <= 1e-10);
  }
}

TEST_CASE("cox loss is invariant to a constant risk shift") {
  Rng rng(13);
  const std::size_t n = 12;
  auto labels = random_labels(rng, n);
  std::vector<double> risks(n), shifted(n);
  for (std::size_t i = 0; i < n; ++i) {
    risks[i] = rng.uniform(-1.5, 1.5);
    shifted[i] = risks[i] + 3.7;
  }
  Tape<double> tp;
  const double a = cox_loss(tp, tp.constant({n}, risks), labels).item();
  const double b = cox_loss(tp, tp.constant({n}, shifted), labels).item();
  CHECK(std::abs(a - b) <= 1e-9);
}

TEST_CASE("probability consistency loss") {
  Tape<double> tp;
  SUBCASE("identical probabilities give zero") {
    std::vector<Value<double>> pa = {tp.constant({3}, {0.2, 0.5, 0.9})};
    CHECK(prob_consistency_loss(tp, pa, pa).item() == 0.0);
  }
  SUBCASE("uniform offset delta gives delta squared") {
    const double delta = 0.07;
    std::vector<Value<double>> pa = {tp.constant({4}, {0.1, 0.3, 0.5, 0.7})};
    std::vector<Value<double>> pb = {
        tp.constant({4}, {0.1 + delta, 0.3 + delta, 0.5 + delta, 0.7 + delta})};
    CHECK(prob_consistency_loss(tp, pa, pb).item() ==
          doctest::Approx(delta * delta).epsilon(1e-12));
  }
  SUBCASE("random pairs match a direct double-mean recomputation") {
    Rng rng(15);
    std::vector<Value<double>> pa, pb;
    double expect = 0.0;
    const std::size_t n_slides = 5;
    for (std::size_t s = 0; s < n_slides; ++s) {
      const std::size_t m = 3 + rng.uniform_int(6);
      std::vector<double> a(m), b(m);
      double acc = 0;
      for (std::size_t j = 0; j < m; ++j) {
        a[j] = rng.uniform(0.0, 1.0);
        b[j] = rng.uniform(0.0, 1.0);
        acc += (a[j] - b[j]) * (a[j] - b[j]);
      }
      expect += acc / double(m);
      pa.push_back(tp.constant({m}, a));
      pb.push_back(tp.constant({m}, b));
    }
    expect /= double(n_slides);
    CHECK(prob_consistency_loss(tp, pa, pb).item() ==
          doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("node count mismatch is rejected") {
    std::vector<Value<double>> pa = {tp.constant({2}, {0.1, 0.2})};
    std::vector<Value<double>> pb = {tp.constant({3}, {0.1, 0.2, 0.3})};
    CHECK_THROWS_WITH_AS(prob_consistency_loss(tp, pa, pb),
                         doctest::Contains("node count mismatch"), std::runtime_error);
  }
}

TEST_CASE("contrastive loss closed forms") {
  Tape<double> tp;
  std::vector<double> zg = {1.0, 0.5, -0.25};
  SUBCASE("u = v gives ln 2 per slide") {
    std::vector<Value<double>> g = {tp.constant({3}, zg)};
    std::vector<Value<double>> c = {tp.constant({3}, {2.0, 1.0, -0.5})};  // same direction
    CHECK(contrastive_loss(tp, g, c, c, 0.5).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("perfect alignment and anti-alignment at nu = 0.1 is near zero") {
    std::vector<Value<double>> g = {tp.constant({3}, zg)};
    std::vector<double> neg_zg = {-1.0, -0.5, 0.25};
    std::vector<Value<double>> s = {tp.constant({3}, neg_zg)};
    const double loss = contrastive_loss(tp, g, g, s, 0.1).item();
    CHECK(loss == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-6));
    CHECK(loss < 1e-8);
  }
  SUBCASE("infinite temperature washes out the similarities") {
    std::vector<Value<double>> g = {tp.constant({3}, zg)};
    std::vector<Value<double>> c = {tp.constant({3}, {0.3, -0.8, 0.1})};
    std::vector<Value<double>> s = {tp.constant({3}, {-0.6, 0.2, 0.9})};
    CHECK(contrastive_loss(tp, g, c, s, 1e9).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-8));
  }
  SUBCASE("zero-norm embedding is flagged, similarity treated as zero") {
    std::vector<std::string> events;
    tp.set_event_log(&events);
    std::vector<Value<double>> g = {tp.constant({3}, zg)};
    std::vector<Value<double>> c = {tp.constant({3}, {0.0, 0.0, 0.0})};
    std::vector<Value<double>> s = {tp.constant({3}, {-0.6, 0.2, 0.9})};
    contrastive_loss(tp, g, c, s, 0.5);
    CHECK(!events.empty());
    tp.set_event_log(nullptr);
  }
  SUBCASE("loss decreases in u and increases in v") {
    auto eval = [&](double u_shift, double v_shift) {
      Tape<double> t2;
      std::vector<Value<double>> g = {t2.constant({2}, {1.0, 0.0})};
      std::vector<Value<double>> c = {
          t2.constant({2}, {std::cos(0.9 - u_shift), std::sin(0.9 - u_shift)})};
      std::vector<Value<double>> s = {
          t2.constant({2}, {std::cos(1.2 - v_shift), std::sin(1.2 - v_shift)})};
      return contrastive_loss(t2, g, c, s, 0.5).item();
    };
    CHECK(eval(0.1, 0.0) < eval(0.0, 0.0));  // larger u (closer angle) lowers loss
    CHECK(eval(0.0, 0.1) > eval(0.0, 0.0));  // larger v raises it
  }
}

TEST_CASE("subgraph ratio loss") {
  Tape<double> tp;
  SUBCASE("all selected gives 1, none gives 0") {
    std::vector<Value<double>> full = {tp.constant({5}, std::vector<double>(5, 1.0))};
    CHECK(subgraph_ratio_loss(tp, full).item() == doctest::Approx(1.0));
    std::vector<Value<double>> none = {tp.constant({5}, std::vector<double>(5, 0.0))};
    CHECK(subgraph_ratio_loss(tp, none).item() == doctest::Approx(0.0));
  }
  SUBCASE("two slides at 0.2 and 0.6 give 0.16") {
    std::vector<Value<double>> masks = {
        tp.constant({5}, {1, 0, 0, 0, 0}),          // 0.2
        tp.constant({5}, {1, 1, 1, 0, 0}),          // 0.6
    };
    CHECK(subgraph_ratio_loss(tp, masks).item() == doctest::Approx(0.16).epsilon(1e-12));
  }
}

TEST_CASE("total loss arithmetic and linearity in the weights") {
  Tape<double> tp;
  auto c1 = tp.constant({}, {1.0});
  auto c2 = tp.constant({}, {2.0});
  auto c3 = tp.constant({}, {3.0});
  auto c4 = tp.constant({}, {4.0});
  auto c5 = tp.constant({}, {5.0});
  LossWeights w;  // 0.1 defaults
  CHECK(total_loss(c1, c2, c3, c4, c5, w).item() == doctest::Approx(4.2).epsilon(1e-12));

  LossWeights zero;
  zero.lambda_mse = zero.lambda_contrastive = zero.lambda_ratio = 0.0;
  CHECK(total_loss(c1, c2, c3, c4, c5, zero).item() == doctest::Approx(3.0));

  auto z = tp.constant({}, {0.0});
  CHECK(total_loss(z, z, z, z, z, w).item() == 0.0);

  LossWeights dbl = w;
  dbl.lambda_mse *= 2;
  dbl.lambda_contrastive *= 2;
  dbl.lambda_ratio *= 2;
  const double base = total_loss(c1, c2, c3, c4, c5, zero).item();
  const double at1 = total_loss(c1, c2, c3, c4, c5, w).item();
  const double at2 = total_loss(c1, c2, c3, c4, c5, dbl).item();
  CHECK(std::abs((at2 - base) - 2.0 * (at1 - base)) <= 1e-12);
}

TEST_CASE("c-index closed forms and oracle equivalence") {
  SUBCASE("risks anti-ordered with times, all events") {
    std::vector<double> risks = {4, 3, 2, 1};
    std::vector<SurvivalLabel> labels = {{1, true}, {2, true}, {3, true}, {4, true}};
    CHECK(*c_index(risks, labels) == 1.0);
  }
  SUBCASE("all risks equal") {
    std::vector<double> risks = {1, 1, 1};
    std::vector<SurvivalLabel> labels = {{1, true}, {2, true}, {3, true}};
    CHECK(*c_index(risks, labels) == 0.5);
  }
  SUBCASE("no comparable pairs is undefined, not zero") {
    std::vector<double> risks = {1, 2};
    std::vector<SurvivalLabel> labels = {{1, false}, {2, false}};
    CHECK(!c_index(risks, labels).has_value());
  }
  SUBCASE("invariant under strictly increasing transforms") {
    Rng rng(17);
    const std::size_t n = 25;
    auto labels = random_labels(rng, n);
    std::vector<double> risks(n), mono(n);
    for (std::size_t i = 0; i < n; ++i) {
      risks[i] = rng.uniform(-2.0, 2.0);
      mono[i] = std::exp(2.0 * risks[i]) + 1.0;
    }
    CHECK(*c_index(risks, labels) == *c_index(mono, labels));
  }
  SUBCASE("matches the exhaustive pair-counting oracle on 1000 cohorts") {
    Rng rng(19);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 2 + rng.uniform_int(49);
      auto labels = random_labels(rng, n, 0.6);
      std::vector<double> risks(n);
      for (auto& r : risks)
        r = rng.bernoulli(0.2) ? 0.5 : rng.uniform(-1.0, 1.0);  // inject risk ties
      auto a = c_index(risks, labels);
      auto b = cindex_oracle(risks, labels);
      CHECK(a.has_value() == b.has_value());
      if (a) CHECK(*a == *b);  // exact
    }
  }
}

TEST_CASE("kaplan-meier closed forms") {
  SUBCASE("no events: flat at 1") {
    auto curve = km_curve({{1, false}, {2, false}});
    CHECK(curve.empty());
  }
  SUBCASE("two subjects with events at 1 and 2") {
    auto curve = km_curve({{1, true}, {2, true}});
    REQUIRE(curve.size() == 2);
    CHECK(curve[0].time == 1.0);
    CHECK(curve[0].survival == doctest::Approx(0.5));
    CHECK(curve[1].time == 2.0);
    CHECK(curve[1].survival == doctest::Approx(0.0));
  }
  SUBCASE("doubling every subject leaves the curve unchanged") {
    Rng rng(21);
    auto labels = random_labels(rng, 15, 0.6);
    auto doubled = labels;
    doubled.insert(doubled.end(), labels.begin(), labels.end());
    auto a = km_curve(labels);
    auto b = km_curve(doubled);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].time == b[i].time);
      CHECK(a[i].survival == doctest::Approx(b[i].survival).epsilon(1e-12));
    }
  }
  SUBCASE("curve is non-increasing and within [0,1]") {
    Rng rng(23);
    for (int t = 0; t < 10; ++t) {
      auto labels = random_labels(rng, 30, 0.5);
      auto curve = km_curve(labels);
      double prev = 1.0;
      for (auto& pt : curve) {
        CHECK(pt.survival <= prev + 1e-12);
        CHECK(pt.survival >= 0.0);
        CHECK(pt.survival <= 1.0);
        prev = pt.survival;
      }
    }
  }
}

TEST_CASE("log-rank test") {
  SUBCASE("identical groups give statistic 0 and p exactly 1") {
    std::vector<SurvivalLabel> labels = {{1, true}, {2, true}, {3, false},
                                         {1, true}, {2, true}, {3, false}};
    std::vector<int> grp = {0, 0, 0, 1, 1, 1};
    auto res = log_rank_test(labels, grp);
    CHECK(res.statistic == 0.0);
    CHECK(res.p_value == 1.0);
  }
  SUBCASE("clearly separated groups give p < 0.01") {
    std::vector<SurvivalLabel> labels;
    std::vector<int> grp;
    for (int i = 0; i < 12; ++i) {
      labels.push_back({1.0 + 0.01 * i, true});
      grp.push_back(0);
      labels.push_back({50.0 + i, false});
      grp.push_back(1);
    }
    auto res = log_rank_test(labels, grp);
    CHECK(res.p_value < 0.01);
  }
  SUBCASE("no events: statistic 0, p = 1") {
    std::vector<SurvivalLabel> labels = {{1, false}, {2, false}};
    auto res = log_rank_test(labels, {0, 1});
    CHECK(res.statistic == 0.0);
    CHECK(res.p_value == 1.0);
  }
  SUBCASE("matches the event-table oracle on small cohorts") {
    Rng rng(25);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 4 + rng.uniform_int(17);
      auto labels = random_labels(rng, n, 0.6);
      std::vector<int> grp(n);
      grp[0] = 0;
      grp[1] = 1;
      for (std::size_t i = 2; i < n; ++i) grp[i] = int(rng.uniform_int(2));
      auto res = log_rank_test(labels, grp);
      CHECK(std::abs(res.statistic - logrank_oracle(labels, grp)) <= 1e-9);
    }
  }
  SUBCASE("chi-square tail: statistic 3.841 gives p near 0.05") {
    // direct check of the p-value mapping via a constructed statistic
    CHECK(std::erfc(std::sqrt(3.841 / 2.0)) == doctest::Approx(0.05).epsilon(2e-3));
  }
}

TEST_CASE("median stratification") {
  SUBCASE("simple split") {
    auto grp = stratify_by_median({-1.0, 0.0, 1.0}, {-1.0, 1.0});
    CHECK(grp == std::vector<int>{0, 1});
  }
  SUBCASE("exactly the median goes low") {
    auto grp = stratify_by_median({0.0, 1.0, 2.0}, {1.0});
    CHECK(grp == std::vector<int>{0});
  }
  SUBCASE("shift invariance") {
    Rng rng(27);
    std::vector<double> train(11), test(7);
    for (auto& v : train) v = rng.uniform(-1, 1);
    for (auto& v : test) v = rng.uniform(-1, 1);
    auto base = stratify_by_median(train, test);
    for (auto& v : train) v += 2.5;
    for (auto& v : test) v += 2.5;
    CHECK(stratify_by_median(train, test) == base);
  }
}

TEST_CASE("auroc sanity") {
  CHECK(*auroc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == doctest::Approx(1.0));
  CHECK(*auroc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == doctest::Approx(0.0));
  CHECK(*auroc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == doctest::Approx(0.5));
  CHECK(!auroc({0.5, 0.6}, {1, 1}).has_value());
}

TEST_CASE("losses are differentiable (finite-difference audit)") {
  Rng rng(29);
  const std::size_t n = 6, d = 4;
  Tensor<double> risks({n});
  init_normal(risks, rng.substream(1), 1.0);
  auto labels = random_labels(rng, n);

  auto cox_f = [&](Tape<double>& tp) { return cox_loss(tp, tp.param(risks), labels); };
  CHECK(grad_check<double>({&risks}, cox_f, 1e-5) <= 1e-6);

  Tensor<double> zg({d}), zc({d}), zs({d});
  init_normal(zg, rng.substream(2), 1.0);
  init_normal(zc, rng.substream(3), 1.0);
  init_normal(zs, rng.substream(4), 1.0);
  auto ct_f = [&](Tape<double>& tp) {
    std::vector<Value<double>> g = {tp.param(zg)}, c = {tp.param(zc)}, s = {tp.param(zs)};
    return contrastive_loss(tp, g, c, s, 0.5);
  };
  CHECK(grad_check<double>({&zg, &zc, &zs}, ct_f, 1e-5) <= 1e-6);

  Tensor<double> mask({5});
  for (auto& v : mask.data) v = rng.uniform(0.1, 0.9);
  auto ratio_f = [&](Tape<double>& tp) {
    std::vector<Value<double>> masks = {tp.param(mask)};
    return subgraph_ratio_loss(tp, masks);
  };
  CHECK(grad_check<double>({&mask}, ratio_f, 1e-5) <= 1e-6);
}

TEST_CASE("backbone gradients match finite differences") {
  Rng rng(31);
  const std::size_t m = 5, d = 4;
  ParamStore<double> store;
  auto model = make_backbone(store, "b", d, rng);
  std::vector<double> feats(m * d);
  for (auto& v : feats) v = rng.uniform(-1.0, 1.0);
  EdgeList edges = {{0, 1}, {1, 0}, {1, 2}, {2, 1}, {3, 4}, {4, 3}};
  auto labels = random_labels(rng, 1);
  labels[0].event = true;

  std::vector<Tensor<double>*> params;
  for (auto& [name, t] : store.items()) params.push_back(&t);
  auto loss = [&](Tape<double>& tp) {
    auto out = backbone_forward(tp, tp.constant({m, d}, feats), edges, model);
    return square(out.risk);
  };
  CHECK(grad_check<double>(params, loss, 1e-5) <= 1e-4);
}
