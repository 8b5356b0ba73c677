#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmil/rng.hpp"
#include "cmil/tensor.hpp"

namespace cmil {

struct SurvivalLabel {
  double time = 0.0;
  bool event = false;
};

// One bag. Features are stored as f32 (the on-disk precision) so save/load
// round-trips are exact.
struct SlideRecord {
  std::string id;
  std::vector<float> thumbnail_feature;                 // d_f
  std::vector<float> patch_features;                    // m x d, row-major
  std::vector<std::array<std::int32_t, 2>> patch_coords;  // m
  SurvivalLabel label;
  std::optional<int> planted_institution;
  std::vector<std::uint8_t> planted_causal_mask;  // empty when absent

  std::size_t num_patches() const { return patch_coords.size(); }
};

using EdgeList = std::vector<std::pair<std::uint32_t, std::uint32_t>>;

// Patch graph. Edge attributes are derived from the current node features on
// demand, so they can never go stale after a feature update.
template <typename T>
struct Graph {
  std::size_t num_nodes = 0;
  std::size_t dim = 0;
  std::vector<T> node_features;  // num_nodes x dim
  EdgeList edges;                // symmetric directed pairs, no self-loops

  std::vector<T> edge_attrs() const {
    std::vector<T> attrs(edges.size() * 2 * dim);
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const auto [a, b] = edges[e];
      for (std::size_t j = 0; j < dim; ++j) {
        attrs[e * 2 * dim + j] = node_features[a * dim + j];
        attrs[e * 2 * dim + dim + j] = node_features[b * dim + j];
      }
    }
    return attrs;
  }

  void validate() const {
    if (node_features.size() != num_nodes * dim) fail("graph: feature size mismatch");
    std::vector<std::uint64_t> keys;
    keys.reserve(edges.size());
    for (const auto& [a, b] : edges) {
      if (a >= num_nodes || b >= num_nodes) fail("graph: edge index out of range");
      if (a == b) fail("graph: self-loop");
      keys.push_back((std::uint64_t(a) << 32) | b);
    }
    std::sort(keys.begin(), keys.end());
    for (const auto& [a, b] : edges) {
      const std::uint64_t rev = (std::uint64_t(b) << 32) | a;
      if (!std::binary_search(keys.begin(), keys.end(), rev))
        fail("graph: edge list not symmetric");
    }
  }
};

// --- KNN graph construction ---------------------------------------------------

// K nearest neighbours under Euclidean distance on patch coordinates,
// symmetrized. Ties break toward the lower node index; m <= k yields the
// complete graph minus self-loops.
inline EdgeList build_knn_graph(const std::vector<std::array<std::int32_t, 2>>& coords,
                                std::size_t k) {
  const std::size_t m = coords.size();
  if (m == 0) fail("build_knn_graph: empty coordinate list");
  if (k == 0) fail("build_knn_graph: k must be >= 1");
  std::vector<std::uint64_t> keys;  // directed edges as packed pairs
  keys.reserve(m * k * 2);
  std::vector<std::pair<double, std::uint32_t>> cand;
  for (std::uint32_t i = 0; i < m; ++i) {
    cand.clear();
    for (std::uint32_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const double dx = double(coords[i][0]) - double(coords[j][0]);
      const double dy = double(coords[i][1]) - double(coords[j][1]);
      cand.emplace_back(dx * dx + dy * dy, j);
    }
    const std::size_t take = std::min(k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + take, cand.end());
    for (std::size_t t = 0; t < take; ++t) {
      const std::uint32_t j = cand[t].second;
      keys.push_back((std::uint64_t(i) << 32) | j);
      keys.push_back((std::uint64_t(j) << 32) | i);
    }
  }
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  EdgeList edges;
  edges.reserve(keys.size());
  for (auto key : keys)
    edges.emplace_back(std::uint32_t(key >> 32), std::uint32_t(key & 0xFFFFFFFFu));
  return edges;
}

// --- synthetic cohort -----------------------------------------------------------

struct GenerationConfig {
  std::size_t num_slides = 100;
  std::size_t patches_min = 40;
  std::size_t patches_max = 80;
  std::size_t feature_dim = 16;
  std::size_t thumbnail_dim = 8;
  std::size_t num_institutions = 2;
  double confounder_strength = 1.0;     // magnitude of per-institution feature bias
  double confounder_outcome_bias = 0.0; // magnitude of per-institution log-hazard offset
  double causal_fraction = 0.25;        // fraction of nodes in the planted causal region
  double causal_signal_base = 1.0;      // |slide-level causal shift| lower bound
  double causal_signal_spread = 0.5;
  double hazard_coef = 1.5;             // planted log-hazard coefficient
  double baseline_hazard = 0.1;
  double censoring_rate = 0.3;          // expected censored fraction
  double feature_noise = 1.0;
  double thumbnail_noise = 0.25;
  std::size_t knn_k = 8;

  void validate() const {
    if (num_slides < 1) fail("generation: num_slides must be >= 1");
    if (patches_min < 1 || patches_min > patches_max)
      fail("generation: invalid patches range");
    if (feature_dim < 1 || thumbnail_dim < 1) fail("generation: dims must be >= 1");
    if (num_institutions < 1) fail("generation: num_institutions must be >= 1");
    if (!(causal_fraction > 0.0) || causal_fraction > 1.0)
      fail("generation: causal_fraction must be in (0,1]");
    if (censoring_rate < 0.0 || censoring_rate >= 1.0)
      fail("generation: censoring_rate must be in [0,1)");
    if (baseline_hazard <= 0.0) fail("generation: baseline_hazard must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const GenerationConfig& c) {
  j = nlohmann::json{{"num_slides", c.num_slides},
                     {"patches_min", c.patches_min},
                     {"patches_max", c.patches_max},
                     {"feature_dim", c.feature_dim},
                     {"thumbnail_dim", c.thumbnail_dim},
                     {"num_institutions", c.num_institutions},
                     {"confounder_strength", c.confounder_strength},
                     {"confounder_outcome_bias", c.confounder_outcome_bias},
                     {"causal_fraction", c.causal_fraction},
                     {"causal_signal_base", c.causal_signal_base},
                     {"causal_signal_spread", c.causal_signal_spread},
                     {"hazard_coef", c.hazard_coef},
                     {"baseline_hazard", c.baseline_hazard},
                     {"censoring_rate", c.censoring_rate},
                     {"feature_noise", c.feature_noise},
                     {"thumbnail_noise", c.thumbnail_noise},
                     {"knn_k", c.knn_k}};
}

inline void from_json(const nlohmann::json& j, GenerationConfig& c) {
  j.at("num_slides").get_to(c.num_slides);
  j.at("patches_min").get_to(c.patches_min);
  j.at("patches_max").get_to(c.patches_max);
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("thumbnail_dim").get_to(c.thumbnail_dim);
  j.at("num_institutions").get_to(c.num_institutions);
  j.at("confounder_strength").get_to(c.confounder_strength);
  j.at("confounder_outcome_bias").get_to(c.confounder_outcome_bias);
  j.at("causal_fraction").get_to(c.causal_fraction);
  j.at("causal_signal_base").get_to(c.causal_signal_base);
  j.at("causal_signal_spread").get_to(c.causal_signal_spread);
  j.at("hazard_coef").get_to(c.hazard_coef);
  j.at("baseline_hazard").get_to(c.baseline_hazard);
  j.at("censoring_rate").get_to(c.censoring_rate);
  j.at("feature_noise").get_to(c.feature_noise);
  j.at("thumbnail_noise").get_to(c.thumbnail_noise);
  j.at("knn_k").get_to(c.knn_k);
}

struct Cohort {
  std::vector<SlideRecord> slides;
  std::size_t feature_dim = 0;
  std::size_t thumbnail_dim = 0;
  std::optional<GenerationConfig> config;

  void validate() const {
    if (slides.empty()) fail("cohort must contain at least one slide");
    for (const auto& s : slides) {
      if (s.num_patches() < 1) fail("cohort: slide " + s.id + " has no patches");
      if (s.patch_features.size() != s.num_patches() * feature_dim)
        fail("cohort: slide " + s.id + " patch feature size mismatch");
      if (s.thumbnail_feature.size() != thumbnail_dim)
        fail("cohort: slide " + s.id + " thumbnail size mismatch");
      if (!(s.label.time > 0.0)) fail("cohort: slide " + s.id + " has non-positive time");
      for (float v : s.patch_features)
        if (!std::isfinite(v)) fail("cohort: slide " + s.id + " has non-finite feature");
    }
  }
};

namespace detail {

// Spatially contiguous region of n_sel nodes grown greedily from a seed:
// repeatedly add the unselected node closest to any selected node.
inline std::vector<std::uint8_t> grow_region(
    const std::vector<std::array<std::int32_t, 2>>& coords, std::size_t n_sel,
    std::uint32_t seed_node) {
  const std::size_t m = coords.size();
  std::vector<std::uint8_t> sel(m, 0);
  std::vector<double> best(m, std::numeric_limits<double>::infinity());
  auto dist2 = [&](std::size_t a, std::size_t b) {
    const double dx = double(coords[a][0]) - double(coords[b][0]);
    const double dy = double(coords[a][1]) - double(coords[b][1]);
    return dx * dx + dy * dy;
  };
  sel[seed_node] = 1;
  for (std::size_t j = 0; j < m; ++j)
    if (!sel[j]) best[j] = dist2(j, seed_node);
  for (std::size_t picked = 1; picked < n_sel; ++picked) {
    std::size_t arg = m;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (!sel[j] && best[j] < bd) { bd = best[j]; arg = j; }
    if (arg == m) break;
    sel[arg] = 1;
    for (std::size_t j = 0; j < m; ++j)
      if (!sel[j]) best[j] = std::min(best[j], dist2(j, arg));
  }
  return sel;
}

inline std::vector<double> unit_direction(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) { x = rng.normal(); norm += x * x; }
  norm = std::sqrt(std::max(norm, 1e-12));
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace detail

// Exponential proportional-hazards cohort with planted institution bias and a
// spatially contiguous causal node subset per slide. Identical (config, seed)
// pairs produce bit-identical cohorts.
inline Cohort generate_synthetic_cohort(const GenerationConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng master(seed);

  // per-institution feature/thumbnail bias directions and outcome offsets
  Rng inst_rng = master.substream(0x1157);
  std::vector<std::vector<double>> inst_bias(cfg.num_institutions);
  std::vector<std::vector<double>> inst_thumb(cfg.num_institutions);
  std::vector<double> inst_hazard(cfg.num_institutions, 0.0);
  for (std::size_t kk = 0; kk < cfg.num_institutions; ++kk) {
    Rng r = inst_rng.substream(kk);
    inst_bias[kk] = detail::unit_direction(r, cfg.feature_dim);
    for (auto& v : inst_bias[kk]) v *= cfg.confounder_strength;
    inst_thumb[kk] = detail::unit_direction(r, cfg.thumbnail_dim);
    for (auto& v : inst_thumb[kk]) v *= cfg.confounder_strength;
    const double eta = cfg.num_institutions > 1
                           ? 2.0 * double(kk) / double(cfg.num_institutions - 1) - 1.0
                           : 0.0;
    inst_hazard[kk] = cfg.confounder_outcome_bias * eta;
  }

  Cohort cohort;
  cohort.feature_dim = cfg.feature_dim;
  cohort.thumbnail_dim = cfg.thumbnail_dim;
  cohort.config = cfg;
  cohort.slides.resize(cfg.num_slides);

  std::vector<double> rates(cfg.num_slides);
  std::vector<double> event_times(cfg.num_slides);

  for (std::size_t i = 0; i < cfg.num_slides; ++i) {
    Rng rng = master.substream(1000 + i);
    SlideRecord& s = cohort.slides[i];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "slide_%05zu", i);
    s.id = buf;
    const int inst = int(i % cfg.num_institutions);
    s.planted_institution = inst;

    const std::size_t m =
        cfg.patches_min + rng.uniform_int(cfg.patches_max - cfg.patches_min + 1);

    // distinct coordinates on a sparse grid
    const std::int32_t side = std::int32_t(std::ceil(std::sqrt(double(m) * 2.0)));
    std::vector<std::uint32_t> cells(std::size_t(side) * std::size_t(side));
    for (std::uint32_t c = 0; c < cells.size(); ++c) cells[c] = c;
    rng.shuffle(cells);
    s.patch_coords.resize(m);
    for (std::size_t j = 0; j < m; ++j)
      s.patch_coords[j] = {std::int32_t(cells[j] % side), std::int32_t(cells[j] / side)};

    // base features + institution bias
    std::vector<double> feats(m * cfg.feature_dim);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t q = 0; q < cfg.feature_dim; ++q)
        feats[j * cfg.feature_dim + q] =
            rng.normal(0.0, cfg.feature_noise) + inst_bias[inst][q];

    // contiguous causal region and slide-level causal shift along axis 0
    const std::size_t n_causal = std::clamp<std::size_t>(
        std::size_t(std::llround(cfg.causal_fraction * double(m))), 1, m);
    const std::uint32_t seed_node = std::uint32_t(rng.uniform_int(m));
    s.planted_causal_mask = detail::grow_region(s.patch_coords, n_causal, seed_node);
    const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const double shift =
        sign * (cfg.causal_signal_base + std::abs(rng.normal()) * cfg.causal_signal_spread);
    for (std::size_t j = 0; j < m; ++j)
      if (s.planted_causal_mask[j]) feats[j * cfg.feature_dim] += shift;

    // quantize to the stored precision before deriving the hazard, so the
    // planted covariate is recoverable exactly from the saved features
    s.patch_features.resize(feats.size());
    for (std::size_t q = 0; q < feats.size(); ++q) s.patch_features[q] = float(feats[q]);

    double causal_mean = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (s.planted_causal_mask[j])
        causal_mean += double(s.patch_features[j * cfg.feature_dim]);
    causal_mean /= double(n_causal);

    const double log_hazard = cfg.hazard_coef * causal_mean + inst_hazard[inst];
    rates[i] = cfg.baseline_hazard * std::exp(log_hazard);
    event_times[i] = std::max(rng.substream(7).exponential(rates[i]), 1e-9);

    s.thumbnail_feature.resize(cfg.thumbnail_dim);
    for (std::size_t q = 0; q < cfg.thumbnail_dim; ++q)
      s.thumbnail_feature[q] =
          float(inst_thumb[inst][q] + rng.normal(0.0, cfg.thumbnail_noise));
  }

  // censoring rate calibrated so the expected event fraction matches config
  if (cfg.censoring_rate > 0.0) {
    const double target_event = 1.0 - cfg.censoring_rate;
    auto mean_event_prob = [&](double rc) {
      double acc = 0.0;
      for (double r : rates) acc += r / (r + rc);
      return acc / double(rates.size());
    };
    double lo = 1e-12, hi = 1e12;
    for (int it = 0; it < 200; ++it) {
      const double mid = std::sqrt(lo * hi);
      if (mean_event_prob(mid) > target_event) lo = mid; else hi = mid;
    }
    const double censor_rate = std::sqrt(lo * hi);
    for (std::size_t i = 0; i < cfg.num_slides; ++i) {
      const double ct = master.substream(5000 + i).exponential(censor_rate);
      auto& lab = cohort.slides[i].label;
      lab.event = event_times[i] <= ct;
      lab.time = std::max(lab.event ? event_times[i] : ct, 1e-9);
    }
  } else {
    for (std::size_t i = 0; i < cfg.num_slides; ++i) {
      cohort.slides[i].label.event = true;
      cohort.slides[i].label.time = event_times[i];
    }
  }

  cohort.validate();
  return cohort;
}

// Patch graph for one slide (features cast to the working precision).
template <typename T>
Graph<T> build_slide_graph(const SlideRecord& s, std::size_t feature_dim, std::size_t knn_k) {
  Graph<T> g;
  g.num_nodes = s.num_patches();
  g.dim = feature_dim;
  g.node_features.resize(g.num_nodes * feature_dim);
  for (std::size_t q = 0; q < g.node_features.size(); ++q)
    g.node_features[q] = T(s.patch_features[q]);
  if (g.num_nodes > 1) g.edges = build_knn_graph(s.patch_coords, knn_k);
  return g;
}

// --- cohort file format -----------------------------------------------------------
//
// A cohort directory holds manifest.json plus one binary file per slide:
//   f32[d_f] thumbnail, f32[m*d] patch features (row-major), i32[m*2] coords,
// all little-endian. labels.csv mirrors (id, time, event) for external tools.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(char(v & 0xFF));
  out.push_back(char((v >> 8) & 0xFF));
  out.push_back(char((v >> 16) & 0xFF));
  out.push_back(char((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t bits = get_u32(p);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline void save_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  cohort.validate();
  std::filesystem::create_directories(dir);

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["feature_dim"] = cohort.feature_dim;
  manifest["thumbnail_dim"] = cohort.thumbnail_dim;
  if (cohort.config) manifest["config"] = *cohort.config;
  else manifest["config"] = nullptr;

  nlohmann::json slides = nlohmann::json::array();
  for (const auto& s : cohort.slides) {
    nlohmann::json rec;
    rec["id"] = s.id;
    rec["num_patches"] = s.num_patches();
    rec["time"] = s.label.time;
    rec["event"] = s.label.event;
    rec["file"] = s.id + ".bin";
    if (s.planted_institution) rec["institution"] = *s.planted_institution;
    else rec["institution"] = nullptr;
    if (!s.planted_causal_mask.empty()) rec["causal_mask"] = s.planted_causal_mask;
    else rec["causal_mask"] = nullptr;
    slides.push_back(std::move(rec));

    std::string blob;
    blob.reserve(4 * (s.thumbnail_feature.size() + s.patch_features.size()) +
                 8 * s.num_patches());
    for (float v : s.thumbnail_feature) detail::put_f32(blob, v);
    for (float v : s.patch_features) detail::put_f32(blob, v);
    for (const auto& c : s.patch_coords) {
      detail::put_u32(blob, std::uint32_t(c[0]));
      detail::put_u32(blob, std::uint32_t(c[1]));
    }
    std::ofstream bin(dir / (s.id + ".bin"), std::ios::binary | std::ios::trunc);
    if (!bin) fail("save_cohort: cannot write " + (dir / (s.id + ".bin")).string());
    bin.write(blob.data(), std::streamsize(blob.size()));
  }
  manifest["slides"] = std::move(slides);

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) fail("save_cohort: cannot write manifest.json");
  mf << manifest.dump(2) << "\n";

  std::ofstream csv(dir / "labels.csv", std::ios::trunc);
  csv << "id,time,event\n";
  csv.precision(17);
  for (const auto& s : cohort.slides)
    csv << s.id << "," << s.label.time << "," << (s.label.event ? 1 : 0) << "\n";
}

inline Cohort load_cohort(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) fail("load_cohort: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail("load_cohort: malformed manifest.json: " + std::string(e.what()));
  }

  Cohort cohort;
  try {
    cohort.feature_dim = manifest.at("feature_dim").get<std::size_t>();
    cohort.thumbnail_dim = manifest.at("thumbnail_dim").get<std::size_t>();
    if (!manifest.at("config").is_null())
      cohort.config = manifest.at("config").get<GenerationConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail("load_cohort: malformed manifest header: " + std::string(e.what()));
  }

  const auto& slides = manifest.at("slides");
  if (!slides.is_array() || slides.empty()) fail("cohort must contain at least one slide");

  for (const auto& rec : slides) {
    SlideRecord s;
    std::string file;
    std::size_t m = 0;
    try {
      s.id = rec.at("id").get<std::string>();
      m = rec.at("num_patches").get<std::size_t>();
      s.label.time = rec.at("time").get<double>();
      s.label.event = rec.at("event").get<bool>();
      file = rec.at("file").get<std::string>();
      if (rec.contains("institution") && !rec.at("institution").is_null())
        s.planted_institution = rec.at("institution").get<int>();
      if (rec.contains("causal_mask") && !rec.at("causal_mask").is_null())
        s.planted_causal_mask = rec.at("causal_mask").get<std::vector<std::uint8_t>>();
    } catch (const nlohmann::json::exception& e) {
      fail("load_cohort: malformed record for slide '" +
           (rec.contains("id") && rec.at("id").is_string() ? rec.at("id").get<std::string>()
                                                           : std::string("<unknown>")) +
           "': " + std::string(e.what()));
    }
    if (!s.planted_causal_mask.empty() && s.planted_causal_mask.size() != m)
      fail("load_cohort: slide " + s.id + ": causal mask length mismatch");

    std::ifstream bin(dir / file, std::ios::binary);
    if (!bin) fail("load_cohort: slide " + s.id + ": missing data file " + file);
    std::string blob((std::istreambuf_iterator<char>(bin)),
                     std::istreambuf_iterator<char>());
    const std::size_t expect =
        4 * (cohort.thumbnail_dim + m * cohort.feature_dim) + 8 * m;
    if (blob.size() != expect)
      fail("load_cohort: slide " + s.id + ": data file has " +
           std::to_string(blob.size()) + " bytes, expected " + std::to_string(expect) +
           " (missing or truncated fields)");
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    s.thumbnail_feature.resize(cohort.thumbnail_dim);
    for (std::size_t q = 0; q < cohort.thumbnail_dim; ++q, p += 4)
      s.thumbnail_feature[q] = detail::get_f32(p);
    s.patch_features.resize(m * cohort.feature_dim);
    for (std::size_t q = 0; q < s.patch_features.size(); ++q, p += 4)
      s.patch_features[q] = detail::get_f32(p);
    s.patch_coords.resize(m);
    for (std::size_t q = 0; q < m; ++q) {
      s.patch_coords[q][0] = std::int32_t(detail::get_u32(p)); p += 4;
      s.patch_coords[q][1] = std::int32_t(detail::get_u32(p)); p += 4;
    }
    cohort.slides.push_back(std::move(s));
  }
  cohort.validate();
  return cohort;
}

}  // namespace cmil
