#pragma once

// Measurement methodology: normalized-MSE tables for generated values against
// ground truth, stratified train/test evaluation of tree-family classifiers
// over feature-set variants, pairwise-rank AUC, and relevant-feature counts.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dallm/core.hpp"
#include "dallm/csv.hpp"
#include "dallm/trees.hpp"
#include "dallm/util.hpp"

namespace dallm::eval {

using core::Dataset;
using core::FeatureKind;
using core::FeatureValue;
using core::Lesion;

// ---------------------------------------------------------------------------
// MSE table (Table-I shape)

struct MseTable {
    std::vector<std::pair<std::string, double>> per_feature;
    double mean = 0.0;
    std::string generator;

    std::string to_csv() const {
        csv::Table t;
        t.header = {"generator"};
        std::vector<std::string> row = {generator};
        for (const auto& [name, mse] : per_feature) {
            t.header.push_back(name);
            row.push_back(util::format_double(mse));
        }
        t.header.push_back("mean");
        row.push_back(util::format_double(mean));
        t.rows.push_back(std::move(row));
        return csv::write(t);
    }
};

// Builds a generated dataset view over the truth rows: the named features take
// their values from the generated map (missing when absent), everything else
// copies the truth.
inline Dataset dataset_from_values(
    const Dataset& truth,
    const std::map<std::string, std::map<std::string, FeatureValue>>& values,
    const std::vector<std::string>& features) {
    Dataset out = truth;
    for (auto& row : out.rows) {
        auto vit = values.find(row.patient.id);
        for (const auto& name : features) {
            const auto* d = out.find_feature(name);
            if (!d) throw DataError("dataset_from_values: unknown feature '" + name + "'");
            // clear, then fill from the generated map
            if (name == "age") row.patient.age.reset();
            else if (auto* slot = core::vital_slot(row.patient, name)) slot->reset();
            else row.values.erase(name);
            if (vit == values.end()) continue;
            auto cit = vit->second.find(name);
            if (cit == vit->second.end()) continue;
            core::check_value_kind(*d, cit->second, "patient " + row.patient.id);
            if (d->kind == FeatureKind::numeric)
                out.set_numeric(row, name, std::get<double>(cit->second));
            else
                row.values[name] = cit->second;
        }
    }
    return out;
}

// Mean squared error per feature in standardized space, using the truth
// statistics for both sides; rows count only where both values are present.
inline MseTable mse_table(const Dataset& generated, const Dataset& truth,
                          const std::vector<std::string>& features,
                          const std::string& generator_descriptor) {
    std::map<std::string, size_t> generated_rows;
    for (size_t i = 0; i < generated.rows.size(); ++i)
        generated_rows[generated.rows[i].patient.id] = i;

    MseTable table;
    table.generator = generator_descriptor;
    double total = 0.0;
    for (const auto& name : features) {
        auto stats = core::feature_stats(truth, name);
        double scale = stats.zero_variance ? 1.0 : stats.std;
        double sum = 0.0;
        size_t n = 0;
        for (const auto& row : truth.rows) {
            auto t = truth.numeric_value(row, name);
            if (!t) continue;
            auto git = generated_rows.find(row.patient.id);
            if (git == generated_rows.end()) continue;
            auto g = generated.numeric_value(generated.rows[git->second], name);
            if (!g) continue;
            double tz = (*t - stats.mean) / scale;
            double gz = (*g - stats.mean) / scale;
            sum += (gz - tz) * (gz - tz);
            ++n;
        }
        if (n == 0)
            throw DataError("mse_table: zero overlapping rows for feature '" + name + "'");
        double mse = sum / static_cast<double>(n);
        table.per_feature.emplace_back(name, mse);
        total += mse;
    }
    table.mean = features.empty() ? 0.0 : total / static_cast<double>(features.size());
    return table;
}

// ---------------------------------------------------------------------------
// Encoding and splitting

struct EncodedData {
    std::vector<std::vector<double>> rows;   // n x p_encoded, imputed, no NaN
    std::vector<double> y;                   // 0/1 target
    std::vector<std::string> columns;        // encoded column names
    std::vector<size_t> parent;              // encoded column -> feature index
    std::vector<std::string> feature_names;  // parent feature names
};

struct SplitIndices {
    std::vector<size_t> train, test;
};

// Stratified split: within each class, a seeded shuffle sends the first
// test_fraction of indices to test. Deterministic in (labels, seed).
inline SplitIndices stratified_split(const std::vector<int>& labels, double test_fraction,
                                     uint64_t seed) {
    if (labels.empty()) throw DataError("stratified_split: empty dataset");
    SplitIndices out;
    for (int cls : {0, 1}) {
        std::vector<size_t> indices;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) indices.push_back(i);
        std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(cls)));
        std::shuffle(indices.begin(), indices.end(), rng);
        size_t n_test = static_cast<size_t>(std::lround(test_fraction * indices.size()));
        if (!indices.empty() && n_test == 0) n_test = indices.size() > 1 ? 1 : 0;
        for (size_t i = 0; i < indices.size(); ++i)
            (i < n_test ? out.test : out.train).push_back(indices[i]);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    if (out.train.empty() || out.test.empty())
        throw DataError("stratified_split: empty train or test split");
    return out;
}

// Stratified k-fold partition for the CV flag; fold f's test set is the f-th
// slice of each class's seeded shuffle.
inline std::vector<SplitIndices> kfold_splits(const std::vector<int>& labels, int folds,
                                              uint64_t seed) {
    if (folds < 2) throw ConfigError("kfold_splits: need at least 2 folds");
    std::vector<std::vector<size_t>> shuffled(2);
    for (int cls : {0, 1}) {
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) shuffled[cls].push_back(i);
        std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(cls)));
        std::shuffle(shuffled[cls].begin(), shuffled[cls].end(), rng);
    }
    std::vector<SplitIndices> out(folds);
    for (int cls : {0, 1}) {
        const auto& pool = shuffled[cls];
        for (size_t i = 0; i < pool.size(); ++i) {
            int fold = static_cast<int>(i % folds);
            for (int f = 0; f < folds; ++f)
                (f == fold ? out[f].test : out[f].train).push_back(pool[i]);
        }
    }
    for (auto& split : out) {
        std::sort(split.train.begin(), split.train.end());
        std::sort(split.test.begin(), split.test.end());
        if (split.train.empty() || split.test.empty())
            throw DataError("kfold_splits: a fold has an empty train or test set");
    }
    return out;
}

namespace detail {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline double median_of(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

}  // namespace detail

// Median imputation for numerics, mode for booleans and categoricals (fit on
// the training rows only), categoricals one-hot over training categories.
inline EncodedData encode_dataset(const Dataset& ds, Lesion target,
                                  const std::vector<size_t>& train) {
    EncodedData out;
    size_t n = ds.rows.size();
    out.y.resize(n);
    for (size_t i = 0; i < n; ++i) out.y[i] = ds.rows[i].patient.labels.at(target) ? 1.0 : 0.0;

    std::set<size_t> train_set(train.begin(), train.end());
    out.rows.assign(n, {});

    for (size_t f = 0; f < ds.schema.size(); ++f) {
        const auto& d = ds.schema[f];
        out.feature_names.push_back(d.name);

        if (d.kind == FeatureKind::numeric || d.kind == FeatureKind::boolean) {
            std::vector<double> raw(n, detail::kMissing);
            std::vector<double> train_values;
            for (size_t i = 0; i < n; ++i) {
                auto v = ds.value_of(ds.rows[i], d.name);
                if (!v) continue;
                double x = d.kind == FeatureKind::numeric ? std::get<double>(*v)
                                                          : (std::get<bool>(*v) ? 1.0 : 0.0);
                raw[i] = x;
                if (train_set.count(i)) train_values.push_back(x);
            }
            double fill;
            if (d.kind == FeatureKind::numeric) {
                fill = detail::median_of(train_values);
            } else {
                size_t ones = 0;
                for (double v : train_values)
                    if (v == 1.0) ++ones;
                fill = ones * 2 > train_values.size() ? 1.0 : 0.0;  // mode, ties -> 0
            }
            out.columns.push_back(d.name);
            out.parent.push_back(f);
            for (size_t i = 0; i < n; ++i)
                out.rows[i].push_back(std::isnan(raw[i]) ? fill : raw[i]);
        } else {
            std::vector<std::optional<std::string>> raw(n);
            std::map<std::string, size_t> train_counts;
            for (size_t i = 0; i < n; ++i) {
                auto v = ds.value_of(ds.rows[i], d.name);
                if (!v) continue;
                raw[i] = std::get<std::string>(*v);
                if (train_set.count(i)) train_counts[*raw[i]]++;
            }
            std::string mode = "missing";
            size_t best = 0;
            for (const auto& [cat, count] : train_counts) {
                if (count > best) {  // ties -> lexicographically smallest (map order)
                    best = count;
                    mode = cat;
                }
            }
            std::set<std::string> categories;
            for (const auto& [cat, count] : train_counts) categories.insert(cat);
            if (categories.empty()) categories.insert(mode);
            for (const auto& cat : categories) {
                out.columns.push_back(d.name + "=" + cat);
                out.parent.push_back(f);
                for (size_t i = 0; i < n; ++i) {
                    const std::string& value = raw[i] ? *raw[i] : mode;
                    out.rows[i].push_back(value == cat ? 1.0 : 0.0);
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

// Pairwise rank statistic via average ranks; ties contribute 0.5. Equals the
// brute-force over all positive-negative pairs.
inline std::optional<double> auc_rank(const std::vector<double>& scores,
                                      const std::vector<int>& labels) {
    size_t n = scores.size();
    size_t n_pos = 0;
    for (int y : labels) n_pos += y == 1 ? 1 : 0;
    size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    std::vector<double> rank(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double pos_rank_sum = 0.0;
    for (size_t k = 0; k < n; ++k)
        if (labels[k] == 1) pos_rank_sum += rank[k];
    double u = pos_rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct MetricsRow {
    double accuracy = 0.0;
    double auc = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double relevant_features = 0.0;
    bool auc_defined = true;
    bool precision_zero_den = false;
    bool recall_zero_den = false;
};

// Number of parent features with strictly positive normalized importance.
inline int relevant_feature_count(const FittedModel& model, const std::vector<size_t>& parent,
                                  size_t n_features) {
    std::vector<double> per_feature(n_features, 0.0);
    for (size_t c = 0; c < model.importances.size(); ++c)
        per_feature[parent[c]] += model.importances[c];
    int count = 0;
    for (double v : per_feature)
        if (v > 1e-6) ++count;
    return count;
}

inline MetricsRow compute_metrics(const FittedModel& model, const EncodedData& data,
                                  const std::vector<size_t>& test) {
    if (test.empty()) throw DataError("compute_metrics: empty test split");
    auto scores = model.scores(data.rows, test);
    std::vector<int> labels;
    labels.reserve(test.size());
    for (size_t i : test) labels.push_back(data.y[i] == 1.0 ? 1 : 0);

    MetricsRow row;
    size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (size_t i = 0; i < test.size(); ++i) {
        bool predicted = scores[i] >= 0.5;
        bool actual = labels[i] == 1;
        if (predicted && actual) ++tp;
        else if (predicted) ++fp;
        else if (actual) ++fn;
        else ++tn;
    }
    row.accuracy = static_cast<double>(tp + tn) / static_cast<double>(test.size());
    if (tp + fp == 0) {
        row.precision = 0.0;
        row.precision_zero_den = true;
    } else {
        row.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    }
    if (tp + fn == 0) {
        row.recall = 0.0;
        row.recall_zero_den = true;
    } else {
        row.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    }
    row.f1 = (row.precision + row.recall) > 0.0
                 ? 2.0 * row.precision * row.recall / (row.precision + row.recall)
                 : 0.0;
    auto auc = auc_rank(scores, labels);
    row.auc_defined = auc.has_value();
    row.auc = auc.value_or(0.0);
    row.relevant_features =
        relevant_feature_count(model, data.parent, data.feature_names.size());
    return row;
}

// ---------------------------------------------------------------------------
// Training entry point

struct TrainedClassifier {
    FittedModel model;
    EncodedData data;
    SplitIndices split;
};

inline MetricsRow average_metrics(const std::vector<MetricsRow>& rows) {
    MetricsRow avg;
    int auc_n = 0;
    for (const auto& m : rows) {
        avg.accuracy += m.accuracy;
        avg.precision += m.precision;
        avg.recall += m.recall;
        avg.f1 += m.f1;
        avg.relevant_features += m.relevant_features;
        avg.precision_zero_den = avg.precision_zero_den || m.precision_zero_den;
        avg.recall_zero_den = avg.recall_zero_den || m.recall_zero_den;
        if (m.auc_defined) {
            avg.auc += m.auc;
            ++auc_n;
        }
    }
    double n = static_cast<double>(rows.size());
    avg.accuracy /= n;
    avg.precision /= n;
    avg.recall /= n;
    avg.f1 /= n;
    avg.relevant_features /= n;
    avg.auc_defined = auc_n > 0;
    avg.auc = auc_n > 0 ? avg.auc / auc_n : 0.0;
    return avg;
}

inline TrainedClassifier train_classifier(const ClassifierSpec& spec, const Dataset& ds,
                                          Lesion target, double test_fraction = 0.2) {
    spec.validate();
    if (ds.rows.empty()) throw DataError("train_classifier: empty dataset");
    std::vector<int> labels;
    labels.reserve(ds.rows.size());
    for (const auto& row : ds.rows) labels.push_back(row.patient.labels.at(target) ? 1 : 0);

    TrainedClassifier out;
    out.split = stratified_split(labels, test_fraction, spec.seed);
    out.data = encode_dataset(ds, target, out.split.train);
    out.model = fit_model(spec, out.data.rows, out.data.y, out.split.train);
    return out;
}

// ---------------------------------------------------------------------------
// Feature-set comparison (Table-II shape)

struct MetricsReport {
    struct Entry {
        std::string feature_set;
        std::string lesion;  // "macro" for the per-feature-set rollup
        std::string classifier;
        MetricsRow metrics;
        int feature_count = 0;
    };
    std::vector<Entry> rows;

    std::string to_csv() const {
        csv::Table t;
        t.header = {"feature_set", "lesion",    "classifier", "n_features", "accuracy",
                    "auc",         "precision", "recall",     "f1",         "rel_features",
                    "flags"};
        for (const auto& e : rows) {
            std::vector<std::string> flags;
            if (!e.metrics.auc_defined) flags.push_back("auc_undefined");
            if (e.metrics.precision_zero_den) flags.push_back("precision_zero_den");
            if (e.metrics.recall_zero_den) flags.push_back("recall_zero_den");
            t.rows.push_back({e.feature_set, e.lesion, e.classifier,
                              std::to_string(e.feature_count),
                              util::format_double(e.metrics.accuracy),
                              e.metrics.auc_defined ? util::format_double(e.metrics.auc) : "NA",
                              util::format_double(e.metrics.precision),
                              util::format_double(e.metrics.recall),
                              util::format_double(e.metrics.f1),
                              util::format_double(e.metrics.relevant_features),
                              util::join(flags, ";")});
        }
        return csv::write(t);
    }

    // Aligned text table with one row group per feature set, macro rows only.
    std::string to_text() const {
        std::ostringstream os;
        os << std::left << std::setw(32) << "Feature set" << std::setw(24) << "Model"
           << std::right << std::setw(10) << "Accuracy" << std::setw(9) << "AUC"
           << std::setw(11) << "Precision" << std::setw(8) << "F-1" << std::setw(9) << "Recall"
           << std::setw(16) << "#Rel. Features" << "\n";
        os << std::string(119, '-') << "\n";
        std::string last_set;
        for (const auto& e : rows) {
            if (e.lesion != "macro") continue;
            std::string set_label;
            if (e.feature_set != last_set) {
                set_label = e.feature_set + " (#feat: " + std::to_string(e.feature_count) + ")";
                last_set = e.feature_set;
            }
            os << std::left << std::setw(32) << set_label << std::setw(24) << e.classifier
               << std::right << std::fixed << std::setprecision(4) << std::setw(10)
               << e.metrics.accuracy << std::setw(9);
            if (e.metrics.auc_defined) os << e.metrics.auc;
            else os << "NA";
            os << std::setw(11) << e.metrics.precision << std::setw(8) << e.metrics.f1
               << std::setw(9) << e.metrics.recall << std::setw(16) << std::setprecision(1)
               << e.metrics.relevant_features << "\n";
            os.unsetf(std::ios_base::fixed);
        }
        return os.str();
    }
};

struct ImportanceReport {
    // (feature_set, lesion, classifier, feature, importance)
    struct Entry {
        std::string feature_set, lesion, classifier, feature;
        double importance;
    };
    std::vector<Entry> rows;

    std::string to_csv() const {
        csv::Table t;
        t.header = {"feature_set", "lesion", "classifier", "feature", "importance"};
        for (const auto& e : rows)
            t.rows.push_back({e.feature_set, e.lesion, e.classifier, e.feature,
                              util::format_double(e.importance)});
        return csv::write(t);
    }
};

struct ComparisonResult {
    MetricsReport metrics;
    ImportanceReport importances;
};

namespace detail {

struct EvalOutcome {
    MetricsRow metrics;
    std::vector<double> importances;  // per parent feature
    std::vector<std::string> feature_names;
};

inline EvalOutcome evaluate_split(const ClassifierSpec& spec, const Dataset& ds, Lesion lesion,
                                  const SplitIndices& split) {
    EvalOutcome out;
    auto data = encode_dataset(ds, lesion, split.train);
    auto model = fit_model(spec, data.rows, data.y, split.train);
    out.metrics = compute_metrics(model, data, split.test);
    out.feature_names = data.feature_names;
    out.importances.assign(data.feature_names.size(), 0.0);
    for (size_t c = 0; c < model.importances.size(); ++c)
        out.importances[data.parent[c]] += model.importances[c];
    return out;
}

}  // namespace detail

// Evaluates every (variant, lesion, classifier) with identical splits across
// variants (labels and seed are shared), then appends macro rollups. With
// cv_folds >= 2 each cell is the average over a stratified k-fold instead of
// the single 80/20 split.
inline ComparisonResult compare_feature_sets(
    const std::vector<std::pair<std::string, Dataset>>& variants,
    const std::vector<Lesion>& lesions, const std::vector<ClassifierSpec>& specs,
    double test_fraction = 0.2, int cv_folds = 0) {
    if (variants.empty()) throw ConfigError("compare_feature_sets: no variants");
    const Dataset& reference = variants.front().second;
    for (const auto& [name, ds] : variants) {
        if (ds.rows.size() != reference.rows.size())
            throw DataError("compare_feature_sets: variant '" + name + "' row count mismatch");
        for (size_t i = 0; i < ds.rows.size(); ++i) {
            if (ds.rows[i].patient.id != reference.rows[i].patient.id)
                throw DataError("compare_feature_sets: variant '" + name +
                                "' patient id mismatch at row " + std::to_string(i));
            if (ds.rows[i].patient.labels != reference.rows[i].patient.labels)
                throw DataError("compare_feature_sets: variant '" + name +
                                "' labels mismatch at row " + std::to_string(i));
        }
    }

    ComparisonResult result;
    for (const auto& [set_name, ds] : variants) {
        std::map<std::string, std::vector<MetricsRow>> macro;  // classifier -> rows
        for (Lesion lesion : lesions) {
            std::vector<int> labels;
            for (const auto& row : ds.rows)
                labels.push_back(row.patient.labels.at(lesion) ? 1 : 0);

            for (const auto& spec : specs) {
                spec.validate();
                std::vector<SplitIndices> splits;
                if (cv_folds >= 2) splits = kfold_splits(labels, cv_folds, spec.seed);
                else splits.push_back(stratified_split(labels, test_fraction, spec.seed));

                std::vector<MetricsRow> fold_metrics;
                std::vector<double> importances;
                std::vector<std::string> feature_names;
                for (const auto& split : splits) {
                    auto outcome = detail::evaluate_split(spec, ds, lesion, split);
                    fold_metrics.push_back(outcome.metrics);
                    if (importances.empty()) {
                        importances = outcome.importances;
                        feature_names = outcome.feature_names;
                    } else {
                        for (size_t f = 0; f < importances.size(); ++f)
                            importances[f] += outcome.importances[f];
                    }
                }
                for (double& v : importances) v /= static_cast<double>(splits.size());
                MetricsRow metrics = average_metrics(fold_metrics);

                result.metrics.rows.push_back({set_name, core::to_string(lesion),
                                               to_string(spec.kind), metrics,
                                               static_cast<int>(ds.schema.size())});
                macro[to_string(spec.kind)].push_back(metrics);
                for (size_t f = 0; f < importances.size(); ++f)
                    result.importances.rows.push_back({set_name, core::to_string(lesion),
                                                       to_string(spec.kind), feature_names[f],
                                                       importances[f]});
            }
        }
        for (const auto& spec : specs) {
            const auto& group = macro[to_string(spec.kind)];
            if (group.empty()) continue;
            result.metrics.rows.push_back({set_name, "macro", to_string(spec.kind),
                                           average_metrics(group),
                                           static_cast<int>(ds.schema.size())});
        }
    }
    return result;
}

}  // namespace dallm::eval
