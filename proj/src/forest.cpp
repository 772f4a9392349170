#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "json.hpp"
#include "kbp/predictors.hpp"

namespace kbp {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::array<StructureId, 6> kDistanceStructures = {StructureId::Larynx, StructureId::Esophagus,
                                                            StructureId::LimPostNeck, StructureId::PTV56,
                                                            StructureId::PTV63, StructureId::PTV70};

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double score = -std::numeric_limits<double>::infinity();
};

class TreeBuilder {
 public:
  TreeBuilder(std::span<const RfFeatures> rows, std::span<const double> targets, const ForestConfig& cfg,
              std::uint64_t seed)
      : rows_(rows), targets_(targets), cfg_(cfg), rng_(seed) {}

  RegressionTree build() {
    const std::size_t n = rows_.size();
    std::vector<std::size_t> sample(n);
    for (auto& s : sample) s = rng_() % n;
    RegressionTree tree;
    struct Pending {
      std::size_t begin, end;
      int node;
    };
    tree.feature.push_back(-1);
    tree.threshold.push_back(0.0);
    tree.left.push_back(-1);
    tree.right.push_back(-1);
    tree.value.push_back(0.0);
    std::vector<Pending> stack{{0, n, 0}};
    while (!stack.empty()) {
      const Pending p = stack.back();
      stack.pop_back();
      const std::span<std::size_t> idx(sample.data() + p.begin, p.end - p.begin);
      double sum = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t i : idx) {
        sum += targets_[i];
        lo = std::min(lo, targets_[i]);
        hi = std::max(hi, targets_[i]);
      }
      const auto node = static_cast<std::size_t>(p.node);
      tree.value[node] = sum / static_cast<double>(idx.size());
      if (idx.size() < static_cast<std::size_t>(cfg_.min_samples_split) || lo == hi) continue;
      const Split s = best_split(idx, sum);
      if (s.feature < 0) continue;
      const auto mid = std::partition(idx.begin(), idx.end(), [&](std::size_t i) {
        return rows_[i][static_cast<std::size_t>(s.feature)] <= s.threshold;
      });
      const std::size_t nl = static_cast<std::size_t>(mid - idx.begin());
      tree.feature[node] = s.feature;
      tree.threshold[node] = s.threshold;
      for (int side = 0; side < 2; ++side) {
        const int child = static_cast<int>(tree.value.size());
        tree.feature.push_back(-1);
        tree.threshold.push_back(0.0);
        tree.left.push_back(-1);
        tree.right.push_back(-1);
        tree.value.push_back(0.0);
        (side == 0 ? tree.left : tree.right)[node] = child;
        stack.push_back(side == 0 ? Pending{p.begin, p.begin + nl, child} : Pending{p.begin + nl, p.end, child});
      }
    }
    return tree;
  }

 private:
  // Features are visited in random order until `features_per_split`
  // non-constant ones have been scored.
  Split best_split(std::span<const std::size_t> idx, double total) {
    std::array<int, kNumRfFeatures> order;
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_() % i]);
    Split best;
    int scored = 0;
    const double n = static_cast<double>(idx.size());
    for (int f : order) {
      if (scored >= cfg_.features_per_split) break;
      pairs_.clear();
      for (std::size_t i : idx) pairs_.emplace_back(rows_[i][static_cast<std::size_t>(f)], targets_[i]);
      std::sort(pairs_.begin(), pairs_.end());
      if (pairs_.front().first == pairs_.back().first) continue;
      ++scored;
      double left = 0.0;
      for (std::size_t k = 0; k + 1 < pairs_.size(); ++k) {
        left += pairs_[k].second;
        if (pairs_[k].first == pairs_[k + 1].first) continue;
        const double nl = static_cast<double>(k + 1), nr = n - nl;
        // SSE reduction up to a constant: sum_L^2/n_L + sum_R^2/n_R
        const double score = left * left / nl + (total - left) * (total - left) / nr;
        if (score > best.score) {
          best.score = score;
          best.feature = f;
          best.threshold = 0.5 * (pairs_[k].first + pairs_[k + 1].first);
          if (best.threshold >= pairs_[k + 1].first) best.threshold = pairs_[k].first;
        }
      }
    }
    return best;
  }

  std::span<const RfFeatures> rows_;
  std::span<const double> targets_;
  const ForestConfig& cfg_;
  std::mt19937_64 rng_;
  std::vector<std::pair<double, double>> pairs_;
};

}  // namespace

std::array<std::string_view, kNumRfFeatures> rf_feature_names() {
  return {"structure_label", "y",         "z",           "dist_larynx",          "dist_esophagus",
          "dist_limpostneck", "dist_ptv56", "dist_ptv63", "dist_ptv70",           "influence_row_sum"};
}

RfFeatureExtractor::RfFeatureExtractor(const Phantom& phantom, const InfluenceMatrix& influence) {
  const VoxelGrid& g = phantom.grid;
  if (influence.num_voxels() != g.size()) {
    throw std::invalid_argument("influence matrix covers " + std::to_string(influence.num_voxels()) +
                                " voxels but the phantom has " + std::to_string(g.size()));
  }
  labels_.assign(g.labels().begin(), g.labels().end());
  coords_.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) coords_.push_back(g.coords(i));
  for (std::size_t k = 0; k < kDistanceStructures.size(); ++k) distance_[k] = distance_to_surface(g, kDistanceStructures[k]);
  row_sums_ = influence.row_sums();
}

RfFeatures RfFeatureExtractor::features(std::size_t v) const {
  if (v >= labels_.size()) throw std::out_of_range("voxel index out of range");
  RfFeatures f{};
  f[0] = static_cast<double>(static_cast<std::uint8_t>(labels_[v]));
  f[1] = coords_[v].y;
  f[2] = coords_[v].z;
  for (std::size_t k = 0; k < 6; ++k) f[3 + k] = distance_[k][v];
  f[9] = row_sums_[v];
  return f;
}

RfFeatures extract_rf_features(const Phantom& phantom, const InfluenceMatrix& influence, std::size_t voxel) {
  return RfFeatureExtractor(phantom, influence).features(voxel);
}

double RegressionTree::predict(const RfFeatures& x) const {
  if (value.empty()) throw std::logic_error("empty regression tree");
  std::size_t node = 0;
  while (feature[node] >= 0) {
    node = static_cast<std::size_t>(x[static_cast<std::size_t>(feature[node])] <= threshold[node] ? left[node]
                                                                                                   : right[node]);
  }
  return value[node];
}

double RandomForest::predict(const RfFeatures& x) const {
  if (trees.empty()) throw std::logic_error("forest has no trees");
  double s = 0.0;
  for (const auto& t : trees) s += t.predict(x);
  return s / static_cast<double>(trees.size());
}

RandomForest rf_train(std::span<const RfFeatures> rows, std::span<const double> targets, const ForestConfig& cfg) {
  if (rows.size() != targets.size()) {
    throw std::invalid_argument("feature rows (" + std::to_string(rows.size()) + ") and targets (" +
                                std::to_string(targets.size()) + ") differ in length");
  }
  if (rows.size() < 2) throw std::invalid_argument("random forest needs at least 2 training rows");
  if (cfg.trees < 1 || cfg.features_per_split < 1 || cfg.features_per_split > kNumRfFeatures) {
    throw std::invalid_argument("invalid forest configuration");
  }
  RandomForest forest;
  forest.trees.resize(static_cast<std::size_t>(cfg.trees));
  auto fit = [&](std::size_t t) {
    forest.trees[t] = TreeBuilder(rows, targets, cfg, splitmix64(cfg.seed + t)).build();
  };
  const auto workers = static_cast<std::size_t>(std::clamp(cfg.threads, 1, cfg.trees));
  if (workers == 1) {
    for (std::size_t t = 0; t < forest.trees.size(); ++t) fit(t);
  } else {
    // trees are seeded by index, so the result does not depend on scheduling
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t t = w; t < forest.trees.size(); t += workers) fit(t);
      });
    }
    for (auto& th : pool) th.join();
  }
  return forest;
}

std::string forest_to_json(const RandomForest& forest) {
  nlohmann::json j;
  j["num_features"] = forest.num_features;
  j["feature_names"] = nlohmann::json::array();
  for (auto n : rf_feature_names()) j["feature_names"].push_back(std::string(n));
  j["trees"] = nlohmann::json::array();
  for (const auto& t : forest.trees) {
    j["trees"].push_back({{"feature", t.feature},
                          {"threshold", t.threshold},
                          {"left", t.left},
                          {"right", t.right},
                          {"value", t.value}});
  }
  return j.dump();
}

RandomForest forest_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  RandomForest f;
  f.num_features = j.at("num_features").get<int>();
  if (f.num_features != kNumRfFeatures) throw std::invalid_argument("forest expects " + std::to_string(f.num_features) + " features");
  for (const auto& jt : j.at("trees")) {
    RegressionTree t;
    t.feature = jt.at("feature").get<std::vector<int>>();
    t.threshold = jt.at("threshold").get<std::vector<double>>();
    t.left = jt.at("left").get<std::vector<int>>();
    t.right = jt.at("right").get<std::vector<int>>();
    t.value = jt.at("value").get<std::vector<double>>();
    const std::size_t n = t.value.size();
    if (n == 0 || t.feature.size() != n || t.threshold.size() != n || t.left.size() != n || t.right.size() != n) {
      throw std::invalid_argument("malformed tree in forest JSON");
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (t.feature[k] >= kNumRfFeatures ||
          (t.feature[k] >= 0 && (t.left[k] <= static_cast<int>(k) || t.right[k] <= static_cast<int>(k) ||
                                 t.left[k] >= static_cast<int>(n) || t.right[k] >= static_cast<int>(n)))) {
        throw std::invalid_argument("malformed tree node in forest JSON");
      }
    }
    f.trees.push_back(std::move(t));
  }
  return f;
}

std::vector<std::size_t> rf_sample_voxels(std::size_t num_voxels, std::size_t cap) {
  std::vector<std::size_t> out;
  if (num_voxels <= cap) {
    out.resize(num_voxels);
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  out.reserve(cap);
  for (std::size_t k = 0; k < cap; ++k) out.push_back((2 * k + 1) * num_voxels / (2 * cap));
  return out;
}

std::vector<double> rf_predict_volume(const RandomForest& forest, const RfFeatureExtractor& features) {
  std::vector<double> out(features.num_voxels());
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = forest.predict(features.features(v));
  return out;
}

}  // namespace kbp
