// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// fails. Each criterion pins its tolerances and runtime budget in code.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "dallm/pipeline.hpp"
#include "testsupport.hpp"

using namespace dallm;
namespace fs = std::filesystem;
using testsupport::LambdaBackend;
using testsupport::TempDir;

namespace {

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check(bool ok, const std::string& message) {
    if (!ok) throw CheckFailure(message);
}

struct Runner {
    int failures = 0;

    void criterion(int id, const std::string& name, double budget_s,
                   const std::function<void()>& fn) {
        auto start = std::chrono::steady_clock::now();
        std::string verdict = "PASS";
        std::string detail;
        try {
            fn();
        } catch (const std::exception& e) {
            verdict = "FAIL";
            detail = e.what();
            ++failures;
        }
        double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (verdict == "PASS" && elapsed > budget_s) {
            verdict = "FAIL";
            detail = "runtime budget exceeded: " + util::format_double(elapsed) + "s > " +
                     util::format_double(budget_s) + "s";
            ++failures;
        }
        std::printf("%s  criterion %d (%5.2fs): %s%s%s\n", verdict.c_str(), id, elapsed,
                    name.c_str(), detail.empty() ? "" : " -- ", detail.c_str());
        std::fflush(stdout);
    }
};

pipeline::PipelineConfig golden_config(const fs::path& outdir) {
    auto cfg =
        pipeline::PipelineConfig::load(testsupport::repo_dir() / "configs" / "golden.json");
    cfg.output_dir = outdir;
    cfg.cache_dir = outdir / "cache" / "llm";
    return cfg;
}

std::vector<std::string> vitals() {
    return {core::vital_names().begin(), core::vital_names().end()};
}

// ---------------------------------------------------------------------------
// Criterion 1: Gaussian-baseline analytic check

void criterion_gaussian_baseline() {
    TempDir tmp("acc1");
    auto truth = testsupport::make_synthetic_dataset(10000, 1001);
    auto dataset_path = tmp.path() / "truth.csv";
    core::save_dataset(truth, dataset_path, core::FileFormat::csv);

    auto cfg = golden_config(tmp.path() / "out");
    cfg.dataset = dataset_path;
    pipeline::cmd_baseline(cfg);

    auto values = pipeline::detail::load_values_artifact(cfg.out("values_baseline.json"),
                                                         core::Dataset::original_schema());
    auto generated = eval::dataset_from_values(truth, values, vitals());
    auto table = eval::mse_table(generated, truth, vitals(), "gaussian");

    for (const auto& [name, mse] : table.per_feature)
        check(mse >= 1.8 && mse <= 2.2,
              "per-feature MSE out of [1.8, 2.2] for " + name + ": " + util::format_double(mse));
    check(std::abs(table.mean - 2.0) <= 0.1,
          "mean MSE " + util::format_double(table.mean) + " not within 2.0 +- 0.1");
}

// ---------------------------------------------------------------------------
// Criterion 2: Oracle-backend MSE check

void criterion_oracle_backend_mse() {
    const size_t n = 2000;
    auto truth = testsupport::make_synthetic_dataset(n, 2002);
    auto targets = vitals();
    std::map<std::string, core::FeatureStats> stats;
    for (const auto& name : targets) stats[name] = core::feature_stats(truth, name);

    prompts::PromptLibrary lib(testsupport::templates_dir());

    for (double sigma : {0.5, 1.0}) {
        auto backend = std::make_shared<LambdaBackend>([&, sigma](const std::string& prompt) {
            auto pos = prompt.find("Synthetic report ");
            check(pos != std::string::npos, "oracle backend could not locate the report marker");
            size_t index = std::stoul(prompt.substr(pos + 17));
            const auto& row = truth.rows[index];
            nlohmann::json out;
            for (size_t f = 0; f < targets.size(); ++f) {
                auto value = truth.numeric_value(row, targets[f]);
                std::mt19937_64 rng(eval::mix_seed(index * 131 + f,
                                                   static_cast<uint64_t>(sigma * 1000)));
                std::normal_distribution<double> noise(0.0, sigma);
                out[targets[f]] = *value + noise(rng) * stats[targets[f]].std;
            }
            return out.dump();
        });
        llm::Client client(backend, llm::CacheMode::live);
        augment::GenerateOptions options;
        options.workers = 4;
        auto out = augment::generate_existing_values(truth, targets, client, lib, options);
        check(out.failed_ids.empty(), "oracle backend run had failures");

        auto generated = eval::dataset_from_values(truth, out.values, targets);
        auto table = eval::mse_table(generated, truth, targets, "oracle");
        double expected = sigma * sigma;
        check(std::abs(table.mean - expected) <= 0.15 * expected,
              "sigma=" + util::format_double(sigma) + ": mean MSE " +
                  util::format_double(table.mean) + " not within 15% of " +
                  util::format_double(expected));
    }
}

// ---------------------------------------------------------------------------
// Criterion 3: retrieval exactness

void criterion_retrieval_exactness() {
    auto embedder = std::make_shared<kstore::LocalHashEmbedder>();
    std::mt19937_64 rng(3003);
    for (int corpus = 0; corpus < 100; ++corpus) {
        size_t count = 20 + rng() % 481;  // up to 500 chunks
        size_t vocab = 8 + rng() % 40;

        std::vector<kstore::KnowledgeChunk> chunks;
        std::vector<std::vector<double>> embedded;
        kstore::VectorIndex index(embedder);
        for (size_t i = 0; i < count; ++i) {
            kstore::KnowledgeChunk c;
            char buf[16];
            std::snprintf(buf, sizeof(buf), "c%05zu", i);
            c.chunk_id = buf;
            c.lesion = core::all_lesions()[rng() % 5];
            c.source_doc = "r";
            size_t len = 2 + rng() % 14;
            for (size_t t = 0; t < len; ++t) {
                if (t) c.text += ' ';
                c.text += "w" + std::to_string(rng() % vocab);
            }
            c.token_span = {0, len};
            index.add(c);
            embedded.push_back(embedder->embed(c.text).values);
            chunks.push_back(std::move(c));
        }
        index.seal();

        std::string query = "w" + std::to_string(rng() % vocab) + " w" +
                            std::to_string(rng() % vocab) + " w" + std::to_string(rng() % vocab);
        auto qv = embedder->embed(query).values;

        // brute-force oracle over precomputed embeddings
        std::vector<std::pair<double, std::string>> ranked;
        for (size_t i = 0; i < chunks.size(); ++i)
            ranked.emplace_back(kstore::cosine(qv, embedded[i]), chunks[i].chunk_id);
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });

        for (int k : {1, 5, 20}) {
            auto hits = index.search(query, k);
            size_t expect = std::min<size_t>(k, chunks.size());
            check(hits.size() == expect, "result size mismatch");
            for (size_t i = 0; i < hits.size(); ++i) {
                check(hits[i].chunk_id == ranked[i].second,
                      "rank " + std::to_string(i) + " disagrees with brute force (corpus " +
                          std::to_string(corpus) + ", k=" + std::to_string(k) + ")");
                check(hits[i].score == ranked[i].first, "score mismatch vs brute force");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: classifier oracles

void criterion_classifier_oracles() {
    // DT splits vs exhaustive enumeration
    std::mt19937_64 rng(4004);
    for (int trial = 0; trial < 50; ++trial) {
        size_t n = 6 + rng() % 45;
        std::vector<std::vector<double>> rows(n, std::vector<double>(5));
        for (auto& row : rows)
            for (auto& x : row) x = static_cast<double>(rng() % 4);
        std::vector<double> y(n);
        for (auto& v : y) v = (rng() % 2) ? 1.0 : 0.0;
        std::vector<size_t> samples(n);
        for (size_t i = 0; i < n; ++i) samples[i] = i;

        auto got = eval::Cart::best_split(rows, y, samples, {0, 1, 2, 3, 4}, 1,
                                          eval::SplitCriterion::gini);

        // oracle: direct counting over every candidate
        eval::Cart::Split want;
        auto gini = [&](const std::vector<size_t>& group) {
            if (group.empty()) return 0.0;
            double pos = 0;
            for (size_t s : group) pos += y[s];
            double p = pos / group.size();
            return 1.0 - p * p - (1.0 - p) * (1.0 - p);
        };
        double parent = gini(samples);
        for (size_t f = 0; f < 5; ++f) {
            std::vector<double> values;
            for (size_t s : samples) values.push_back(rows[s][f]);
            std::sort(values.begin(), values.end());
            values.erase(std::unique(values.begin(), values.end()), values.end());
            for (size_t i = 0; i + 1 < values.size(); ++i) {
                double thr = (values[i] + values[i + 1]) / 2.0;
                std::vector<size_t> left, right;
                for (size_t s : samples) (rows[s][f] <= thr ? left : right).push_back(s);
                double gain = parent - (double(left.size()) / n) * gini(left) -
                              (double(right.size()) / n) * gini(right);
                if (gain > want.gain + 1e-12) {
                    want.found = true;
                    want.feature = static_cast<int>(f);
                    want.threshold = thr;
                    want.gain = gain;
                }
            }
        }
        check(got.found == want.found, "split existence disagrees with oracle");
        if (got.found) {
            check(got.feature == want.feature && got.threshold == want.threshold,
                  "split choice disagrees with oracle at trial " + std::to_string(trial));
            check(std::abs(got.gain - want.gain) < 1e-9, "split gain disagrees with oracle");
        }
    }

    // AUC vs brute force on 100 random score/label vectors
    int tested = 0;
    while (tested < 100) {
        size_t n = 4 + rng() % 60;
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        for (size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(rng() % 10) / 10.0;
            labels[i] = (rng() % 100) < 45 ? 1 : 0;
        }
        auto fast = eval::auc_rank(scores, labels);
        if (!fast) continue;
        double num = 0;
        size_t pairs = 0;
        for (size_t i = 0; i < n; ++i) {
            if (labels[i] != 1) continue;
            for (size_t j = 0; j < n; ++j) {
                if (labels[j] != 0) continue;
                ++pairs;
                if (scores[i] > scores[j]) num += 1.0;
                else if (scores[i] == scores[j]) num += 0.5;
            }
        }
        check(std::abs(*fast - num / pairs) <= 1e-12, "AUC disagrees with brute force");
        ++tested;
    }

    // GBT training loss non-increasing over 50 rounds on 5 fixtures
    for (int fixture = 0; fixture < 5; ++fixture) {
        size_t n = 90;
        std::vector<std::vector<double>> rows(n, std::vector<double>(4));
        std::vector<double> y(n);
        for (size_t i = 0; i < n; ++i) {
            for (auto& x : rows[i]) x = static_cast<double>(rng() % 6);
            double signal = rows[i][0] - 0.7 * rows[i][1] + 0.4 * rows[i][2];
            y[i] = signal + (static_cast<double>(rng() % 100) / 100.0 - 0.5) > 0.9 ? 1.0 : 0.0;
        }
        std::vector<size_t> train(n);
        for (size_t i = 0; i < n; ++i) train[i] = i;
        eval::ClassifierSpec spec;
        spec.kind = eval::ClassifierKind::gradient_boosted_trees;
        spec.n_trees = 50;
        spec.learning_rate = 0.1;
        spec.seed = fixture;
        auto model = eval::fit_model(spec, rows, y, train);
        check(model.gbt_train_loss.size() == 50, "GBT did not run 50 rounds");
        for (size_t r = 1; r < model.gbt_train_loss.size(); ++r)
            check(model.gbt_train_loss[r] <= model.gbt_train_loss[r - 1] + 1e-12,
                  "GBT loss increased at round " + std::to_string(r) + " of fixture " +
                      std::to_string(fixture));
    }
}

// ---------------------------------------------------------------------------
// Criterion 5: planted-signal augmentation benefit

void criterion_planted_signal() {
    auto original = testsupport::make_synthetic_dataset(799, 5005);
    auto augmented =
        testsupport::plant_signal_feature(original, core::Lesion::atelectasis, 0.10, 5006);

    std::vector<eval::ClassifierSpec> specs;
    for (auto kind :
         {eval::ClassifierKind::decision_tree, eval::ClassifierKind::random_forest,
          eval::ClassifierKind::gradient_boosted_trees}) {
        eval::ClassifierSpec spec;
        spec.kind = kind;
        spec.max_depth = kind == eval::ClassifierKind::decision_tree ? 6 : 4;
        spec.n_trees = 60;
        spec.learning_rate = 0.1;
        spec.min_samples_leaf = 2;
        spec.seed = 5007;
        specs.push_back(spec);
    }
    auto result = eval::compare_feature_sets(
        {{"original", original}, {"augmented", augmented}}, {core::Lesion::atelectasis}, specs);

    std::map<std::pair<std::string, std::string>, eval::MetricsRow> rows;
    for (const auto& e : result.metrics.rows)
        if (e.lesion != "macro") rows[{e.feature_set, e.classifier}] = e.metrics;

    for (const auto& spec : specs) {
        auto name = eval::to_string(spec.kind);
        const auto& orig = rows.at({"original", name});
        const auto& aug = rows.at({"augmented", name});
        check(aug.f1 > orig.f1, name + ": F1 did not strictly improve (" +
                                    util::format_double(orig.f1) + " -> " +
                                    util::format_double(aug.f1) + ")");
        check(aug.auc > orig.auc, name + ": AUC did not strictly improve (" +
                                      util::format_double(orig.auc) + " -> " +
                                      util::format_double(aug.auc) + ")");
    }
}

// ---------------------------------------------------------------------------
// Criterion 6: ablation contract

void criterion_ablation_contract() {
    TempDir tmp("acc6");
    auto cfg = golden_config(tmp.path() / "out");
    for (const char* stage : {"ingest", "index", "ack", "discover"})
        check(pipeline::run_command(stage, cfg) == 0, std::string("stage failed: ") + stage);

    auto plain = cfg;
    plain.curation_file.clear();
    check(pipeline::run_command("augment", plain) == 0, "augment (plain) failed");
    check(pipeline::run_command("augment", cfg) == 0, "augment (expert) failed");
    auto ablated = cfg;
    ablated.ablation = true;
    check(pipeline::run_command("augment", ablated) == 0, "augment (ablation) failed");

    auto read_log = [&](const std::string& name) {
        std::map<std::string, std::string> prompts;
        for (const auto& line : util::split(util::read_file(cfg.out(name)), '\n')) {
            if (util::trim(line).empty()) continue;
            auto j = nlohmann::json::parse(line);
            prompts[j.at("id")] = j.at("prompt");
        }
        return prompts;
    };
    auto with_ack = read_log("prompts_augmented_expert.jsonl");
    auto without = read_log("prompts_ablation.jsonl");
    check(with_ack.size() == without.size(), "prompt logs differ in patient coverage");
    for (const auto& [pid, full] : with_ack) {
        auto start = full.find("Clinical knowledge");
        auto end = full.find("Features to generate");
        check(start != std::string::npos && end != std::string::npos && start < end,
              "ACK block not found in non-ablation prompt for " + pid);
        std::string removed = full.substr(0, start) + full.substr(end);
        check(removed == without.at(pid),
              "prompts differ by more than the ACK block for patient " + pid);
    }

    check(pipeline::run_command("eval", cfg) == 0, "eval failed");
    check(pipeline::run_command("report", cfg) == 0, "report failed");
    auto metrics = csv::parse(util::read_file(cfg.out("metrics.csv")));
    std::set<std::string> groups;
    for (const auto& row : metrics.rows) groups.insert(row[0]);
    check(groups == std::set<std::string>{"original", "augmented", "augmented_expert", "ablation"},
          "expected four Table-II row groups, got " + std::to_string(groups.size()));
}

// ---------------------------------------------------------------------------
// Criterion 7: end-to-end determinism

void criterion_determinism() {
    TempDir tmp("acc7");
    auto run_all = [&](const fs::path& out, unsigned workers) {
        auto cfg = golden_config(out);
        cfg.max_concurrent_llm = workers;
        for (const char* stage :
             {"ingest", "index", "ack", "discover", "augment", "baseline", "eval", "report"})
            check(pipeline::run_command(stage, cfg) == 0,
                  std::string("pipeline stage failed: ") + stage);
        std::map<std::string, std::string> hashes;
        for (const auto& e : fs::recursive_directory_iterator(out)) {
            if (!e.is_regular_file()) continue;
            auto rel = fs::relative(e.path(), out).generic_string();
            if (rel.rfind("cache/", 0) == 0) continue;
            hashes[rel] = util::sha256_file(e.path());
        }
        check(hashes.size() >= 20, "pipeline produced too few artifacts");
        return hashes;
    };
    auto first = run_all(tmp.path() / "run1", 1);
    auto second = run_all(tmp.path() / "run2", 1);
    auto wide = run_all(tmp.path() / "run3", 4);
    check(first == second, "rerun produced different artifact hashes");
    check(first == wide, "worker-pool size changed artifact hashes");

    // the 35 ACK entries with mocked discovery and values are part of the contract
    auto ack = augment::Ack::load(tmp.path() / "run1" / "ack.json");
    size_t entries = 0;
    for (const auto& [lesion, list] : ack.entries) entries += list.size();
    check(entries == 35, "golden ACK does not hold 35 entries");
}

// ---------------------------------------------------------------------------
// Criterion 8: parser robustness corpus

void criterion_parser_corpus() {
    auto dir = testsupport::fixtures_dir() / "parser_corpus";
    std::vector<fs::path> cases;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".txt") cases.push_back(e.path());
    std::sort(cases.begin(), cases.end());
    check(cases.size() >= 30, "parser corpus has fewer than 30 cases");

    for (const auto& case_path : cases) {
        auto expected_path = case_path;
        expected_path.replace_extension(".expected.json");
        auto meta = nlohmann::json::parse(util::read_file(expected_path));
        std::string tag = case_path.stem().string();

        llm::Completion completion;
        completion.text = util::read_file(case_path);
        completion.backend = "fixture";
        completion.fingerprint = llm::fingerprint(completion.text, llm::GenerationConfig{});

        if (meta.at("mode") == "values") {
            auto schema = meta.at("schema").get<std::vector<core::FeatureDescriptor>>();
            if (meta.value("error", false)) {
                bool threw = false;
                try {
                    prompts::parse_feature_values(completion, schema);
                } catch (const ParseError&) {
                    threw = true;
                }
                check(threw, tag + ": expected a ParseError");
                continue;
            }
            auto result = prompts::parse_feature_values(completion, schema);
            auto expected = meta.at("expected");
            check(result.values.size() == expected.size(),
                  tag + ": value count mismatch (" + std::to_string(result.values.size()) +
                      " vs " + std::to_string(expected.size()) + ")");
            auto sorted = result.values;
            std::sort(sorted.begin(), sorted.end(),
                      [](const auto& a, const auto& b) { return a.name < b.name; });
            std::vector<nlohmann::json> want(expected.begin(), expected.end());
            std::sort(want.begin(), want.end(),
                      [](const nlohmann::json& a, const nlohmann::json& b) {
                          return a.at("name").get<std::string>() < b.at("name").get<std::string>();
                      });
            for (size_t i = 0; i < sorted.size(); ++i) {
                const auto& got = sorted[i];
                const auto& exp = want[i];
                check(got.name == exp.at("name"), tag + ": name mismatch at " + got.name);
                check(prompts::to_string(got.confidence) == exp.at("confidence"),
                      tag + ": confidence mismatch for " + got.name);
                if (exp.at("value").is_null()) {
                    check(!got.value.has_value(), tag + ": guessed a value for " + got.name);
                } else {
                    check(got.value.has_value(), tag + ": missing value for " + got.name);
                    if (exp.at("value").is_number()) {
                        check(std::holds_alternative<double>(*got.value),
                              tag + ": expected numeric for " + got.name);
                        check(std::abs(std::get<double>(*got.value) -
                                       exp.at("value").get<double>()) < 1e-9,
                              tag + ": numeric mismatch for " + got.name);
                    } else if (exp.at("value").is_boolean()) {
                        check(std::holds_alternative<bool>(*got.value) &&
                                  std::get<bool>(*got.value) == exp.at("value").get<bool>(),
                              tag + ": boolean mismatch for " + got.name);
                    } else {
                        check(std::holds_alternative<std::string>(*got.value) &&
                                  std::get<std::string>(*got.value) ==
                                      exp.at("value").get<std::string>(),
                              tag + ": string mismatch for " + got.name);
                    }
                }
            }
        } else {
            if (meta.value("error", false)) {
                bool threw = false;
                try {
                    prompts::parse_feature_list(completion);
                } catch (const ParseError&) {
                    threw = true;
                }
                check(threw, tag + ": expected a ParseError");
                continue;
            }
            auto result = prompts::parse_feature_list(completion);
            auto expected = meta.at("expected");
            check(result.features.size() == expected.size(), tag + ": feature count mismatch");
            for (size_t i = 0; i < result.features.size(); ++i) {
                const auto& got = result.features[i];
                const auto& exp = expected[i];
                check(got.name == exp.at("name"), tag + ": feature name order mismatch");
                check(core::to_string(got.kind) == exp.at("kind"),
                      tag + ": kind mismatch for " + got.name);
                if (exp.contains("units"))
                    check(got.units == exp.at("units").get<std::string>(),
                          tag + ": units mismatch for " + got.name);
                else
                    check(!got.units.has_value(), tag + ": unexpected units for " + got.name);
                check(got.provenance == core::Provenance::llm_discovered,
                      tag + ": provenance must be llm_discovered");
            }
        }
    }
}

}  // namespace

int main() {
    Runner runner;
    runner.criterion(1, "Gaussian-baseline analytic check (10^4 rows, MSE 2.0 +- 0.1)", 10.0,
                     criterion_gaussian_baseline);
    runner.criterion(2, "oracle-backend MSE tracks sigma^2 within 15% at N=2000", 30.0,
                     criterion_oracle_backend_mse);
    runner.criterion(3, "retrieval equals brute-force cosine ranking on 100 corpora", 20.0,
                     criterion_retrieval_exactness);
    runner.criterion(4, "classifier oracles: DT splits, AUC 1e-12, GBT monotone loss", 60.0,
                     criterion_classifier_oracles);
    runner.criterion(5, "planted-signal augmentation strictly improves F1 and AUC", 60.0,
                     criterion_planted_signal);
    runner.criterion(6, "ablation differs exactly by the ACK block; four row groups", 10.0,
                     criterion_ablation_contract);
    runner.criterion(7, "end-to-end determinism across reruns and pool sizes", 60.0,
                     criterion_determinism);
    runner.criterion(8, "parser robustness corpus: exact outputs, zero guesses", 10.0,
                     criterion_parser_corpus);

    if (runner.failures == 0) {
        std::printf("acceptance: all 8 criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criteria FAILED\n", runner.failures);
    return 1;
}
