#pragma once

// Tree-family classifiers built from one CART core: a Gini decision tree,
// bagged random forest with per-split feature subsampling, and first-order
// gradient boosting on variance-criterion regression trees with shrinkage and
// Newton leaf values. Everything is deterministic under the spec seed; splits
// scan features in ascending index and thresholds in ascending order, so ties
// resolve to the first candidate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dallm/util.hpp"

namespace dallm::eval {

enum class ClassifierKind { decision_tree, random_forest, gradient_boosted_trees };

inline std::string to_string(ClassifierKind k) {
    switch (k) {
        case ClassifierKind::decision_tree: return "DecisionTree";
        case ClassifierKind::random_forest: return "RandomForest";
        case ClassifierKind::gradient_boosted_trees: return "GradientBoostedTrees";
    }
    throw Error(ErrorKind::internal, "bad classifier kind");
}

inline std::optional<ClassifierKind> classifier_kind_from_string(std::string_view s) {
    if (s == "DecisionTree" || s == "decision_tree") return ClassifierKind::decision_tree;
    if (s == "RandomForest" || s == "random_forest") return ClassifierKind::random_forest;
    if (s == "GradientBoostedTrees" || s == "gradient_boosted_trees")
        return ClassifierKind::gradient_boosted_trees;
    return std::nullopt;
}

struct ClassifierSpec {
    ClassifierKind kind = ClassifierKind::decision_tree;
    int max_depth = 6;
    int n_trees = 100;             // RF / GBT rounds
    double learning_rate = 0.1;    // GBT, in (0, 1]
    double feature_subsample = 0;  // RF per-split: 0 = sqrt(p); (0,1] fraction; >1 count
    int min_samples_leaf = 1;
    bool bootstrap = true;  // RF bagging
    uint64_t seed = 0;

    void validate() const {
        if (max_depth < 1) throw ConfigError("classifier: max_depth must be >= 1");
        if (min_samples_leaf < 1) throw ConfigError("classifier: min_samples_leaf must be >= 1");
        if (kind != ClassifierKind::decision_tree && n_trees < 1)
            throw ConfigError("classifier: n_trees must be >= 1");
        if (kind == ClassifierKind::gradient_boosted_trees &&
            (learning_rate <= 0.0 || learning_rate > 1.0))
            throw ConfigError("classifier: GBT learning_rate must be in (0,1]");
        if (feature_subsample < 0) throw ConfigError("classifier: feature_subsample must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// CART

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;  // leaf: class fraction (gini) or mean target (variance)
    size_t n = 0;
};

enum class SplitCriterion { gini, variance };

class Cart {
public:
    struct Params {
        int max_depth = 6;
        size_t min_samples_leaf = 1;
        size_t feature_subsample = 0;  // 0 = consider all features at each split
    };

    void fit(const std::vector<std::vector<double>>& rows, const std::vector<double>& targets,
             std::vector<size_t> samples, const Params& params, SplitCriterion criterion,
             std::mt19937_64* rng = nullptr) {
        if (samples.empty()) throw DataError("cart: empty sample set");
        n_features_ = rows.empty() ? 0 : rows[0].size();
        nodes_.clear();
        raw_importance_.assign(n_features_, 0.0);
        root_n_ = samples.size();
        grow(rows, targets, std::move(samples), 0, params, criterion, rng);
    }

    double predict(const std::vector<double>& row) const {
        return nodes_[leaf_index(row)].value;
    }

    size_t leaf_index(const std::vector<double>& row) const {
        size_t i = 0;
        while (nodes_[i].feature >= 0)
            i = row[nodes_[i].feature] <= nodes_[i].threshold
                    ? static_cast<size_t>(nodes_[i].left)
                    : static_cast<size_t>(nodes_[i].right);
        return i;
    }

    const std::vector<TreeNode>& nodes() const { return nodes_; }
    void set_leaf_value(size_t idx, double v) { nodes_[idx].value = v; }
    const std::vector<double>& raw_importance() const { return raw_importance_; }
    bool has_split() const { return !nodes_.empty() && nodes_[0].feature >= 0; }

    static Cart from_nodes(std::vector<TreeNode> nodes, size_t n_features) {
        Cart t;
        t.nodes_ = std::move(nodes);
        t.n_features_ = n_features;
        t.raw_importance_.assign(n_features, 0.0);
        for (const auto& node : t.nodes_)
            if (node.feature >= 0) t.raw_importance_[node.feature] += 1.0;
        return t;
    }

    struct Split {
        bool found = false;
        int feature = -1;
        double threshold = 0.0;
        double gain = -1.0;
    };

    // Best (feature, threshold) by impurity reduction over the given samples;
    // the first candidate wins ties (features ascending, thresholds ascending).
    // Zero-gain boundaries still split: stopping is by purity/depth/size, which
    // is what lets a depth-2 tree solve XOR.
    // Exposed so the exhaustive-enumeration oracle can check it directly.
    static Split best_split(const std::vector<std::vector<double>>& rows,
                            const std::vector<double>& targets,
                            const std::vector<size_t>& samples,
                            const std::vector<size_t>& features, size_t min_samples_leaf,
                            SplitCriterion criterion) {
        Split best;
        size_t n = samples.size();
        if (n < 2 * min_samples_leaf) return best;

        double parent_impurity = impurity(targets, samples, criterion);

        std::vector<std::pair<double, double>> sorted;  // (x, y)
        sorted.reserve(n);
        for (size_t f : features) {
            sorted.clear();
            for (size_t s : samples) sorted.emplace_back(rows[s][f], targets[s]);
            std::sort(sorted.begin(), sorted.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });

            double left_sum = 0.0, left_sq = 0.0;
            double total_sum = 0.0, total_sq = 0.0;
            for (const auto& [x, y] : sorted) {
                total_sum += y;
                total_sq += y * y;
            }
            for (size_t i = 0; i + 1 < n; ++i) {
                left_sum += sorted[i].second;
                left_sq += sorted[i].second * sorted[i].second;
                if (sorted[i].first == sorted[i + 1].first) continue;  // no boundary here
                size_t nl = i + 1, nr = n - nl;
                if (nl < min_samples_leaf || nr < min_samples_leaf) continue;

                double il, ir;
                if (criterion == SplitCriterion::gini) {
                    double pl = left_sum / nl;
                    double pr = (total_sum - left_sum) / nr;
                    il = 2.0 * pl * (1.0 - pl);
                    ir = 2.0 * pr * (1.0 - pr);
                } else {
                    il = left_sq / nl - (left_sum / nl) * (left_sum / nl);
                    double rs = total_sum - left_sum, rq = total_sq - left_sq;
                    ir = rq / nr - (rs / nr) * (rs / nr);
                }
                double gain = parent_impurity -
                              (static_cast<double>(nl) / n) * il -
                              (static_cast<double>(nr) / n) * ir;
                if (gain > best.gain + 1e-12) {
                    best.found = true;
                    best.feature = static_cast<int>(f);
                    best.threshold = (sorted[i].first + sorted[i + 1].first) / 2.0;
                    best.gain = gain;
                }
            }
        }
        return best;
    }

    static double impurity(const std::vector<double>& targets, const std::vector<size_t>& samples,
                           SplitCriterion criterion) {
        double sum = 0.0, sq = 0.0;
        for (size_t s : samples) {
            sum += targets[s];
            sq += targets[s] * targets[s];
        }
        double n = static_cast<double>(samples.size());
        if (criterion == SplitCriterion::gini) {
            double p = sum / n;
            return 2.0 * p * (1.0 - p);  // 1 - p^2 - (1-p)^2
        }
        return sq / n - (sum / n) * (sum / n);
    }

private:
    int grow(const std::vector<std::vector<double>>& rows, const std::vector<double>& targets,
             std::vector<size_t> samples, int depth, const Params& params,
             SplitCriterion criterion, std::mt19937_64* rng) {
        int node_index = static_cast<int>(nodes_.size());
        nodes_.push_back({});
        nodes_[node_index].n = samples.size();

        double mean = 0.0;
        for (size_t s : samples) mean += targets[s];
        mean /= static_cast<double>(samples.size());
        nodes_[node_index].value = mean;

        bool pure = impurity(targets, samples, criterion) <= 1e-15;
        if (depth >= params.max_depth || pure ||
            samples.size() < 2 * params.min_samples_leaf)
            return node_index;

        std::vector<size_t> features(n_features_);
        for (size_t f = 0; f < n_features_; ++f) features[f] = f;
        if (params.feature_subsample > 0 && params.feature_subsample < n_features_ && rng) {
            std::vector<size_t> chosen;
            std::sample(features.begin(), features.end(), std::back_inserter(chosen),
                        params.feature_subsample, *rng);
            features = std::move(chosen);  // std::sample keeps ascending order
        }

        Split split =
            best_split(rows, targets, samples, features, params.min_samples_leaf, criterion);
        if (!split.found) return node_index;

        raw_importance_[split.feature] +=
            (static_cast<double>(samples.size()) / static_cast<double>(root_n_)) *
            std::max(split.gain, 0.0);

        std::vector<size_t> left, right;
        for (size_t s : samples) {
            if (rows[s][split.feature] <= split.threshold) left.push_back(s);
            else right.push_back(s);
        }
        samples.clear();
        samples.shrink_to_fit();

        nodes_[node_index].feature = split.feature;
        nodes_[node_index].threshold = split.threshold;
        int l = grow(rows, targets, std::move(left), depth + 1, params, criterion, rng);
        int r = grow(rows, targets, std::move(right), depth + 1, params, criterion, rng);
        nodes_[node_index].left = l;
        nodes_[node_index].right = r;
        return node_index;
    }

    std::vector<TreeNode> nodes_;
    std::vector<double> raw_importance_;
    size_t n_features_ = 0;
    size_t root_n_ = 0;
};

// ---------------------------------------------------------------------------
// Fitted ensembles

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

class FittedModel {
public:
    ClassifierKind kind = ClassifierKind::decision_tree;
    std::vector<Cart> trees;
    double gbt_base = 0.0;
    double learning_rate = 0.1;
    std::vector<double> gbt_train_loss;    // per-round training logistic loss
    std::vector<double> importances;       // per input column, normalized to sum 1

    // Probability score: leaf class fraction (DT), vote fraction (RF),
    // sigmoid margin (GBT).
    double score(const std::vector<double>& row) const {
        switch (kind) {
            case ClassifierKind::decision_tree:
                return trees[0].predict(row);
            case ClassifierKind::random_forest: {
                double votes = 0.0;
                for (const auto& t : trees) votes += t.predict(row) >= 0.5 ? 1.0 : 0.0;
                return votes / static_cast<double>(trees.size());
            }
            case ClassifierKind::gradient_boosted_trees: {
                double f = gbt_base;
                for (const auto& t : trees) f += learning_rate * t.predict(row);
                return sigmoid(f);
            }
        }
        throw Error(ErrorKind::internal, "bad classifier kind");
    }

    std::vector<double> scores(const std::vector<std::vector<double>>& rows,
                               const std::vector<size_t>& indices) const {
        std::vector<double> out;
        out.reserve(indices.size());
        for (size_t i : indices) out.push_back(score(rows[i]));
        return out;
    }

    void finalize_importances(size_t n_features) {
        std::vector<double> total(n_features, 0.0);
        for (const auto& t : trees) {
            const auto& raw = t.raw_importance();
            double sum = 0.0;
            for (double v : raw) sum += v;
            if (sum <= 0.0) continue;
            for (size_t f = 0; f < n_features; ++f) total[f] += raw[f] / sum;
        }
        double grand = 0.0;
        for (double v : total) grand += v;
        if (grand > 0.0)
            for (double& v : total) v /= grand;
        importances = std::move(total);
    }
};

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    // splitmix64 step keeps per-tree streams decorrelated
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Trains on the given sample indices of an encoded matrix; y must be 0/1.
inline FittedModel fit_model(const ClassifierSpec& spec,
                             const std::vector<std::vector<double>>& rows,
                             const std::vector<double>& y, const std::vector<size_t>& train) {
    spec.validate();
    if (train.empty()) throw DataError("fit_model: empty training split");
    size_t p = rows.empty() ? 0 : rows[0].size();

    double pos = 0.0;
    for (size_t s : train) pos += y[s];
    if (pos == 0.0 || pos == static_cast<double>(train.size()))
        throw DataError("fit_model: single-class training target");

    FittedModel model;
    model.kind = spec.kind;
    model.learning_rate = spec.learning_rate;

    if (spec.kind == ClassifierKind::decision_tree) {
        Cart tree;
        Cart::Params params{spec.max_depth, static_cast<size_t>(spec.min_samples_leaf), 0};
        tree.fit(rows, y, train, params, SplitCriterion::gini);
        model.trees.push_back(std::move(tree));
    } else if (spec.kind == ClassifierKind::random_forest) {
        size_t m;
        if (spec.feature_subsample == 0)
            m = std::max<size_t>(1, static_cast<size_t>(std::lround(std::sqrt(p))));
        else if (spec.feature_subsample <= 1.0)
            m = std::max<size_t>(1, static_cast<size_t>(std::ceil(spec.feature_subsample * p)));
        else
            m = std::min<size_t>(p, static_cast<size_t>(spec.feature_subsample));
        for (int t = 0; t < spec.n_trees; ++t) {
            std::mt19937_64 rng(mix_seed(spec.seed, static_cast<uint64_t>(t)));
            std::vector<size_t> samples;
            if (spec.bootstrap) {
                std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
                samples.reserve(train.size());
                for (size_t i = 0; i < train.size(); ++i) samples.push_back(train[pick(rng)]);
            } else {
                samples = train;
            }
            Cart tree;
            Cart::Params params{spec.max_depth, static_cast<size_t>(spec.min_samples_leaf),
                                m < p ? m : 0};
            tree.fit(rows, y, std::move(samples), params, SplitCriterion::gini, &rng);
            model.trees.push_back(std::move(tree));
        }
    } else {
        // gradient boosting with logistic loss
        double pbar = pos / static_cast<double>(train.size());
        pbar = std::clamp(pbar, 1e-6, 1.0 - 1e-6);
        model.gbt_base = std::log(pbar / (1.0 - pbar));

        std::vector<double> f(rows.size(), model.gbt_base);
        std::vector<double> residual(rows.size(), 0.0);
        auto train_loss = [&] {
            double loss = 0.0;
            for (size_t s : train) {
                double prob = std::clamp(sigmoid(f[s]), 1e-12, 1.0 - 1e-12);
                loss += -(y[s] * std::log(prob) + (1.0 - y[s]) * std::log(1.0 - prob));
            }
            return loss / static_cast<double>(train.size());
        };

        int depth = std::min(spec.max_depth, 3);
        for (int round = 0; round < spec.n_trees; ++round) {
            for (size_t s : train) residual[s] = y[s] - sigmoid(f[s]);
            Cart tree;
            Cart::Params params{depth, static_cast<size_t>(spec.min_samples_leaf), 0};
            tree.fit(rows, residual, train, params, SplitCriterion::variance);

            // Newton leaf values: sum(residual) / sum(p(1-p)) per leaf
            std::map<size_t, std::pair<double, double>> leaf_stats;  // leaf -> (num, den)
            for (size_t s : train) {
                size_t leaf = tree.leaf_index(rows[s]);
                double prob = sigmoid(f[s]);
                leaf_stats[leaf].first += residual[s];
                leaf_stats[leaf].second += prob * (1.0 - prob);
            }
            for (const auto& [leaf, stats] : leaf_stats) {
                double value = stats.first / std::max(stats.second, 1e-12);
                tree.set_leaf_value(leaf, std::clamp(value, -4.0, 4.0));
            }
            for (size_t s : train) f[s] += spec.learning_rate * tree.predict(rows[s]);
            model.trees.push_back(std::move(tree));
            model.gbt_train_loss.push_back(train_loss());
        }
    }

    model.finalize_importances(p);
    return model;
}

}  // namespace dallm::eval
