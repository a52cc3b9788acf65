#pragma once

// Pipeline commands behind the CLI: each command reads its upstream
// artifacts, writes its own artifact under the output directory with a fixed
// name, and drops a manifest recording the config hash, input hashes, and
// completion fingerprints it consumed. Reruns with unchanged inputs are
// byte-identical. Exit codes: 0 ok, 2 config/input error, 3 upstream artifact
// missing, 4 backend failure, 5 failure rate exceeded.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dallm/augment.hpp"
#include "dallm/core.hpp"
#include "dallm/csv.hpp"
#include "dallm/eval.hpp"
#include "dallm/ingest.hpp"
#include "dallm/kstore.hpp"
#include "dallm/llm.hpp"
#include "dallm/prompts.hpp"
#include "dallm/util.hpp"

namespace dallm::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;
using core::Dataset;
using core::Lesion;

// ---------------------------------------------------------------------------
// Configuration

struct LlmSettings {
    std::string backend = "http";  // "http" | "scripted"
    std::string model = "default";
    fs::path script;  // scripted backend rules file
};

struct EmbedderSettings {
    std::string backend = "local";
    size_t dim = kstore::LocalHashEmbedder::kDefaultDim;
};

struct PipelineConfig {
    fs::path config_dir;  // directory of the config file; relative paths resolve here

    fs::path dataset;
    core::FileFormat dataset_format = core::FileFormat::csv;
    fs::path output_dir = "out";
    std::vector<ingest::Source> sources = {ingest::Source::fixture};
    ingest::Scope scope = ingest::Scope::first_page;
    bool offline = true;
    fs::path fixture_corpus;
    std::string corpus_dirname = "corpus";
    size_t chunk_size = 256;
    size_t chunk_overlap = 32;
    int k = 5;
    LlmSettings llm;
    EmbedderSettings embedder;
    llm::CacheMode cache_mode = llm::CacheMode::strict_replay;
    fs::path cache_dir = "cache/llm";
    double temperature = 0.1;
    int max_tokens = 512;
    uint64_t seed = 42;
    bool ablation = false;
    bool existing_values = false;
    fs::path curation_file;
    fs::path shots_file;
    fs::path templates_dir = "templates";
    unsigned max_concurrent_llm = 4;
    double failure_rate_threshold = 0.05;
    int cv_folds = 0;  // >= 2 switches eval to stratified k-fold CV

    fs::path resolve(const fs::path& p) const {
        if (p.empty() || p.is_absolute()) return p;
        return config_dir / p;
    }
    fs::path out(const std::string& name) const { return resolve(output_dir) / name; }
    fs::path corpus_dir() const { return resolve(output_dir) / corpus_dirname; }

    void validate() const {
        if (temperature < 0) throw ConfigError("config: temperature must be >= 0");
        if (chunk_size == 0 || chunk_overlap >= chunk_size)
            throw ConfigError("config: require 0 <= chunk_overlap < chunk_size");
        if (k < 1) throw ConfigError("config: k must be >= 1");
        if (failure_rate_threshold < 0 || failure_rate_threshold > 1)
            throw ConfigError("config: failure_rate_threshold must be in [0,1]");
        if (cv_folds == 1 || cv_folds < 0)
            throw ConfigError("config: cv_folds must be 0 (off) or >= 2");
        if (dataset.empty()) throw ConfigError("config: dataset path is required");
        if (llm.backend != "http" && llm.backend != "scripted")
            throw ConfigError("config: llm.backend must be 'http' or 'scripted'");
        if (llm.backend == "scripted" && llm.script.empty())
            throw ConfigError("config: scripted llm backend requires llm.script");
        if (embedder.backend != "local")
            throw ConfigError("config: only the 'local' embedder backend is configurable");
        if (offline) {
            for (auto s : sources)
                if (s != ingest::Source::fixture)
                    throw ConfigError("config: offline mode allows only fixture sources");
        }
        for (auto s : sources)
            if (s == ingest::Source::fixture && fixture_corpus.empty())
                throw ConfigError("config: fixture source requires fixture_corpus");
    }

    // Canonical identity of a run. Runtime-only knobs (max_concurrent_llm)
    // and the output location are excluded: they cannot change artifact
    // content, and manifests must agree across pool sizes and output dirs.
    json canonical_json() const {
        json sources_j = json::array();
        for (auto s : sources) sources_j.push_back(ingest::to_string(s));
        return json{{"version", 1},
                    {"dataset", dataset.string()},
                    {"dataset_format", core::to_string(dataset_format)},
                    {"sources", sources_j},
                    {"scope", ingest::to_string(scope)},
                    {"offline", offline},
                    {"fixture_corpus", fixture_corpus.string()},
                    {"chunk_size", chunk_size},
                    {"chunk_overlap", chunk_overlap},
                    {"k", k},
                    {"llm",
                     {{"backend", llm.backend}, {"model", llm.model}, {"script", llm.script.string()}}},
                    {"embedder", {{"backend", embedder.backend}, {"dim", embedder.dim}}},
                    {"cache_mode", llm::to_string(cache_mode)},
                    {"temperature", temperature},
                    {"max_tokens", max_tokens},
                    {"seed", seed},
                    {"ablation", ablation},
                    {"existing_values", existing_values},
                    {"curation_file", curation_file.string()},
                    {"shots_file", shots_file.string()},
                    {"failure_rate_threshold", failure_rate_threshold},
                    {"cv_folds", cv_folds}};
    }
    std::string config_hash() const { return util::sha256_hex(canonical_json().dump()); }

    static PipelineConfig load(const fs::path& path) {
        if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
        json j;
        try {
            j = json::parse(util::read_file(path));
        } catch (const json::exception& e) {
            throw ConfigError("config file unparseable: " + std::string(e.what()));
        }
        PipelineConfig cfg;
        cfg.config_dir = fs::absolute(path).parent_path();
        if (j.value("version", 1) != 1) throw ConfigError("config: unsupported version");

        cfg.dataset = j.value("dataset", std::string{});
        if (j.contains("dataset_format")) {
            std::string f = j["dataset_format"].get<std::string>();
            if (f == "csv") cfg.dataset_format = core::FileFormat::csv;
            else if (f == "jsonlines" || f == "jsonl") cfg.dataset_format = core::FileFormat::jsonlines;
            else throw ConfigError("config: unknown dataset_format '" + f + "'");
        }
        cfg.output_dir = j.value("output_dir", std::string{"out"});
        if (j.contains("sources")) {
            cfg.sources.clear();
            for (const auto& sj : j["sources"]) {
                auto s = ingest::source_from_string(sj.get<std::string>());
                if (!s) throw ConfigError("config: unknown source '" + sj.get<std::string>() + "'");
                cfg.sources.push_back(*s);
            }
        }
        if (j.contains("scope")) {
            auto s = ingest::scope_from_string(j["scope"].get<std::string>());
            if (!s) throw ConfigError("config: unknown scope");
            cfg.scope = *s;
        }
        cfg.offline = j.value("offline", true);
        cfg.fixture_corpus = j.value("fixture_corpus", std::string{});
        cfg.chunk_size = j.value("chunk_size", size_t{256});
        cfg.chunk_overlap = j.value("chunk_overlap", size_t{32});
        cfg.k = j.value("k", 5);
        if (j.contains("llm")) {
            cfg.llm.backend = j["llm"].value("backend", std::string{"http"});
            cfg.llm.model = j["llm"].value("model", std::string{"default"});
            cfg.llm.script = j["llm"].value("script", std::string{});
        }
        if (j.contains("embedder")) {
            cfg.embedder.backend = j["embedder"].value("backend", std::string{"local"});
            cfg.embedder.dim = j["embedder"].value("dim", kstore::LocalHashEmbedder::kDefaultDim);
        }
        if (j.contains("cache_mode")) {
            auto m = llm::cache_mode_from_string(j["cache_mode"].get<std::string>());
            if (!m) throw ConfigError("config: unknown cache_mode");
            cfg.cache_mode = *m;
        }
        cfg.cache_dir = j.value("cache_dir", std::string{"cache/llm"});
        cfg.temperature = j.value("temperature", 0.1);
        cfg.max_tokens = j.value("max_tokens", 512);
        cfg.seed = j.value("seed", uint64_t{42});
        cfg.ablation = j.value("ablation", false);
        cfg.existing_values = j.value("existing_values", false);
        cfg.curation_file = j.value("curation_file", std::string{});
        cfg.shots_file = j.value("shots_file", std::string{});
        cfg.templates_dir = j.value("templates_dir", std::string{"templates"});
        cfg.max_concurrent_llm = j.value("max_concurrent_llm", 4u);
        cfg.failure_rate_threshold = j.value("failure_rate_threshold", 0.05);
        cfg.cv_folds = j.value("cv_folds", 0);
        cfg.validate();
        return cfg;
    }
};

struct Overrides {
    std::optional<bool> ablation, offline, existing_values;
    std::optional<uint64_t> seed;
    std::optional<std::string> cache_mode, scope, output_dir, corpus_dir, dataset;
    std::optional<std::vector<std::string>> sources;
    std::optional<int> k;
    std::optional<unsigned> workers;

    void apply(PipelineConfig& cfg) const {
        if (ablation) cfg.ablation = *ablation;
        if (offline) cfg.offline = *offline;
        if (existing_values) cfg.existing_values = *existing_values;
        if (seed) cfg.seed = *seed;
        if (cache_mode) {
            auto m = llm::cache_mode_from_string(*cache_mode);
            if (!m) throw ConfigError("unknown --cache-mode '" + *cache_mode + "'");
            cfg.cache_mode = *m;
        }
        if (scope) {
            auto s = ingest::scope_from_string(*scope);
            if (!s) throw ConfigError("unknown --scope '" + *scope + "'");
            cfg.scope = *s;
        }
        if (output_dir) cfg.output_dir = *output_dir;
        if (corpus_dir) cfg.corpus_dirname = *corpus_dir;
        if (dataset) cfg.dataset = *dataset;
        if (sources) {
            cfg.sources.clear();
            for (const auto& name : *sources) {
                auto s = ingest::source_from_string(name);
                if (!s) throw ConfigError("unknown source '" + name + "'");
                cfg.sources.push_back(*s);
            }
        }
        if (k) cfg.k = *k;
        if (workers) cfg.max_concurrent_llm = *workers;
        cfg.validate();
    }
};

// ---------------------------------------------------------------------------
// Manifests

class Manifest {
public:
    Manifest(const PipelineConfig& cfg, std::string command)
        : cfg_(cfg), command_(std::move(command)) {}

    void input(const std::string& logical, const fs::path& file) {
        if (!fs::exists(file))
            throw ArtifactError(command_ + ": missing upstream artifact '" + logical + "' (" +
                                file.string() + ")");
        inputs_[logical] = util::sha256_file(file);
    }
    void input_tree(const std::string& prefix, const fs::path& dir) {
        if (!fs::is_directory(dir))
            throw ArtifactError(command_ + ": missing upstream artifact directory '" + prefix +
                                "' (" + dir.string() + ")");
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            inputs_[prefix + "/" + fs::relative(f, dir).generic_string()] = util::sha256_file(f);
    }
    void output(const std::string& logical, const fs::path& file) {
        outputs_[logical] = util::sha256_file(file);
    }
    void output_tree(const std::string& prefix, const fs::path& dir) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            outputs_[prefix + "/" + fs::relative(f, dir).generic_string()] = util::sha256_file(f);
    }
    void fingerprint(const std::string& fp) { fingerprints_.insert(fp); }

    void write() const {
        json j{{"version", 1},
               {"command", command_},
               {"config", cfg_.canonical_json()},
               {"config_sha256", cfg_.config_hash()},
               {"inputs", inputs_},
               {"outputs", outputs_},
               {"fingerprints", std::vector<std::string>(fingerprints_.begin(),
                                                         fingerprints_.end())}};
        util::write_file_atomic(cfg_.out("manifest_" + command_ + ".json"), j.dump(2) + "\n");
    }

private:
    const PipelineConfig& cfg_;
    std::string command_;
    std::map<std::string, std::string> inputs_, outputs_;
    std::set<std::string> fingerprints_;
};

// ---------------------------------------------------------------------------
// Shared construction

inline llm::Client make_llm_client(const PipelineConfig& cfg) {
    fs::path cache = cfg.resolve(cfg.cache_dir);
    if (cfg.cache_mode == llm::CacheMode::strict_replay)
        return llm::Client(nullptr, cfg.cache_mode, cache, cfg.max_concurrent_llm);
    std::shared_ptr<llm::Backend> backend;
    if (cfg.llm.backend == "scripted")
        backend = std::make_shared<llm::ScriptedBackend>(
            llm::ScriptedBackend::from_file(cfg.resolve(cfg.llm.script)));
    else
        backend = std::make_shared<llm::HttpBackend>(cfg.llm.model);
    return llm::Client(backend, cfg.cache_mode, cache, cfg.max_concurrent_llm);
}

inline llm::GenerationConfig make_generation_config(const PipelineConfig& cfg) {
    llm::GenerationConfig gen;
    gen.temperature = cfg.temperature;
    gen.max_tokens = cfg.max_tokens;
    gen.model = cfg.llm.model;
    gen.seed = cfg.seed;
    return gen;
}

inline std::shared_ptr<const kstore::Embedder> make_embedder(const PipelineConfig& cfg) {
    return std::make_shared<kstore::LocalHashEmbedder>(cfg.embedder.dim);
}

inline std::vector<Lesion> lesion_list() {
    return {core::all_lesions().begin(), core::all_lesions().end()};
}

inline Dataset load_input_dataset(const PipelineConfig& cfg, std::vector<std::string>* messages) {
    auto result = core::load_dataset(cfg.resolve(cfg.dataset), cfg.dataset_format);
    if (messages)
        for (auto& m : result.messages) messages->push_back(m);
    return std::move(result.dataset);
}

// Variant name for the augment command's artifacts.
inline std::string augment_variant(const PipelineConfig& cfg) {
    if (cfg.existing_values) return "existing";
    if (cfg.ablation) return "ablation";
    if (!cfg.curation_file.empty()) return "augmented_expert";
    return "augmented";
}

namespace detail {

inline void write_values_artifact(const PipelineConfig& cfg, const std::string& name,
                                  const augment::GenerationOutput& out, Manifest& manifest) {
    json values_j = json::object();
    for (const auto& [pid, cells] : out.values) {
        json row = json::object();
        for (const auto& [feature, value] : cells) row[feature] = core::value_to_json(value);
        values_j[pid] = std::move(row);
    }
    json j{{"version", 1},
           {"values", std::move(values_j)},
           {"fingerprints", out.fingerprints},
           {"failed", out.failed_ids},
           {"warnings", out.warnings}};
    auto path = cfg.out(name);
    util::write_file_atomic(path, j.dump(2) + "\n");
    manifest.output(name, path);
    for (const auto& [pid, fp] : out.fingerprints) manifest.fingerprint(fp);
}

inline void write_prompt_log(const PipelineConfig& cfg, const std::string& name,
                             const std::map<std::string, std::string>& prompts,
                             Manifest& manifest) {
    std::string body;
    for (const auto& [pid, prompt] : prompts) {
        json line{{"id", pid}, {"prompt", prompt}};
        body += line.dump();
        body += '\n';
    }
    auto path = cfg.out(name);
    util::write_file_atomic(path, body);
    manifest.output(name, path);
}

inline std::map<std::string, std::map<std::string, core::FeatureValue>> load_values_artifact(
    const fs::path& path, const std::vector<core::FeatureDescriptor>& schema) {
    json j = json::parse(util::read_file(path));
    std::map<std::string, std::map<std::string, core::FeatureValue>> out;
    for (const auto& [pid, cells] : j.at("values").items()) {
        for (const auto& [name, cell] : cells.items()) {
            const core::FeatureDescriptor* d = nullptr;
            for (const auto& cand : schema)
                if (cand.name == name) d = &cand;
            if (!d) throw ArtifactError("values artifact references unknown feature '" + name + "'");
            if (cell.is_number()) out[pid][name] = cell.get<double>();
            else if (cell.is_boolean()) out[pid][name] = cell.get<bool>();
            else out[pid][name] = cell.get<std::string>();
        }
        if (!out.count(pid)) out[pid] = {};
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

// Phase-I retrieval: fetch documents per lesion and persist the corpus.
inline void cmd_ingest(const PipelineConfig& cfg) {
    cfg.validate();
    ingest::IngestConfig icfg;
    icfg.fixture_corpus_root = cfg.resolve(cfg.fixture_corpus);
    icfg.workers = cfg.max_concurrent_llm;
    std::vector<ingest::SourceQuery> templates;
    for (auto s : cfg.sources) templates.push_back({s, "", cfg.scope});

    auto result = ingest::build_corpus(lesion_list(), templates, icfg);
    for (const auto& w : result.warnings) std::cerr << "[ingest] " << w << "\n";

    auto dir = cfg.corpus_dir();
    std::error_code ec;
    fs::remove_all(dir, ec);
    ingest::save_corpus(result.corpus, dir);

    size_t total = 0;
    for (const auto& [lesion, docs] : result.corpus) total += docs.size();
    std::cerr << "[ingest] " << total << " documents across " << result.corpus.size()
              << " lesions -> " << dir.string() << "\n";

    Manifest manifest(cfg, "ingest");
    for (auto s : cfg.sources)
        if (s == ingest::Source::fixture)
            manifest.input_tree("fixture_corpus", icfg.fixture_corpus_root);
    manifest.output_tree("corpus", dir);
    manifest.write();
}

// Chunk + embed the corpus into the sealed exact-search index.
inline void cmd_index(const PipelineConfig& cfg) {
    cfg.validate();
    Manifest manifest(cfg, "index");
    manifest.input_tree("corpus", cfg.corpus_dir());

    auto corpus = ingest::load_corpus(cfg.corpus_dir());
    auto index = kstore::build_index(corpus, make_embedder(cfg), cfg.chunk_size, cfg.chunk_overlap);
    index.save(cfg.out("index.json"));
    std::cerr << "[index] " << index.size() << " chunks indexed\n";

    manifest.output("index.json", cfg.out("index.json"));
    manifest.write();
}

// Phase-II: the 35-entry Augmented Clinical Knowledge corpus.
inline void cmd_ack(const PipelineConfig& cfg) {
    cfg.validate();
    Manifest manifest(cfg, "ack");
    manifest.input("index.json", cfg.out("index.json"));

    auto index = kstore::VectorIndex::load(cfg.out("index.json"));
    auto lib = prompts::PromptLibrary(cfg.resolve(cfg.templates_dir));
    auto client = make_llm_client(cfg);
    auto ack = augment::build_ack(index, lesion_list(), cfg.k, client, lib,
                                  make_generation_config(cfg));
    ack.save(cfg.out("ack.json"));
    std::cerr << "[ack] " << ack.entries.size() * 7 << " entries\n";

    manifest.output("ack.json", cfg.out("ack.json"));
    for (const auto& [lesion, list] : ack.entries)
        for (const auto& e : list) manifest.fingerprint(e.fingerprint);
    manifest.write();
}

// Phase-III step 1: discover candidate features from the ACK corpus.
inline void cmd_discover(const PipelineConfig& cfg) {
    cfg.validate();
    if (cfg.shots_file.empty())
        throw ConfigError("discover: shots_file is required for few-shot discovery");
    Manifest manifest(cfg, "discover");
    manifest.input("ack.json", cfg.out("ack.json"));
    manifest.input("shots", cfg.resolve(cfg.shots_file));

    auto ack = augment::Ack::load(cfg.out("ack.json"));
    auto shots = prompts::load_shots(cfg.resolve(cfg.shots_file));
    auto lib = prompts::PromptLibrary(cfg.resolve(cfg.templates_dir));
    auto client = make_llm_client(cfg);
    auto result = augment::discover_features(ack, shots, client, lib, make_generation_config(cfg));
    for (const auto& w : result.warnings) std::cerr << "[discover] " << w << "\n";

    json j{{"version", 1}, {"m", result.features.size()}, {"features", result.features}};
    util::write_file_atomic(cfg.out("features.json"), j.dump(2) + "\n");
    std::cerr << "[discover] m = " << result.features.size() << " distinct features\n";

    manifest.output("features.json", cfg.out("features.json"));
    for (const auto& [lesion, fp] : result.fingerprints) manifest.fingerprint(fp);
    manifest.write();
}

// Phase-III step 2: generate per-patient values and merge new columns, or (in
// existing-values mode) regenerate the six vitals from report + demographics.
inline void cmd_augment(const PipelineConfig& cfg) {
    cfg.validate();
    std::string variant = augment_variant(cfg);
    Manifest manifest(cfg, "augment_" + variant);
    manifest.input("dataset", cfg.resolve(cfg.dataset));

    std::vector<std::string> messages;
    Dataset dataset = load_input_dataset(cfg, &messages);
    for (const auto& m : messages) std::cerr << "[augment] " << m << "\n";

    auto lib = prompts::PromptLibrary(cfg.resolve(cfg.templates_dir));
    auto client = make_llm_client(cfg);

    augment::GenerateOptions options;
    options.k = cfg.k;
    options.ablation = cfg.ablation;
    options.failure_rate_threshold = cfg.failure_rate_threshold;
    options.workers = cfg.max_concurrent_llm;
    options.gen = make_generation_config(cfg);

    if (cfg.existing_values) {
        std::vector<std::string> targets(core::vital_names().begin(), core::vital_names().end());
        auto out = augment::generate_existing_values(dataset, targets, client, lib, options);
        for (const auto& w : out.warnings) std::cerr << "[augment] " << w << "\n";
        detail::write_values_artifact(cfg, "values_existing.json", out, manifest);
        detail::write_prompt_log(cfg, "prompts_existing.jsonl", out.prompts, manifest);
        manifest.write();
        std::cerr << "[augment] existing-value generation for " << out.values.size()
                  << " patients\n";
        return;
    }

    manifest.input("index.json", cfg.out("index.json"));
    manifest.input("ack.json", cfg.out("ack.json"));
    manifest.input("features.json", cfg.out("features.json"));

    auto index = kstore::VectorIndex::load(cfg.out("index.json"));
    auto ack = augment::Ack::load(cfg.out("ack.json"));
    json features_j = json::parse(util::read_file(cfg.out("features.json")));
    auto features = features_j.at("features").get<std::vector<core::FeatureDescriptor>>();

    if (!cfg.curation_file.empty()) {
        manifest.input("curation", cfg.resolve(cfg.curation_file));
        features = augment::apply_expert_curation(features, cfg.resolve(cfg.curation_file));
        json cj{{"version", 1}, {"m", features.size()}, {"features", features}};
        util::write_file_atomic(cfg.out("features_curated.json"), cj.dump(2) + "\n");
        manifest.output("features_curated.json", cfg.out("features_curated.json"));
    }

    auto out = augment::generate_values(dataset, features, ack, index, client, lib, options);
    for (const auto& w : out.warnings) std::cerr << "[augment] " << w << "\n";

    Dataset merged = core::merge_augmented(dataset, out.values, features);
    merged.meta.seed = cfg.seed;
    merged.meta.backend = out.backend;
    merged.meta.ablation = cfg.ablation;

    std::string ds_name = variant + ".jsonl";
    core::save_dataset(merged, cfg.out(ds_name), core::FileFormat::jsonlines);
    detail::write_values_artifact(cfg, "values_" + variant + ".json", out, manifest);
    detail::write_prompt_log(cfg, "prompts_" + variant + ".jsonl", out.prompts, manifest);
    manifest.output(ds_name, cfg.out(ds_name));
    manifest.output(ds_name + ".schema.json", core::sidecar_path(cfg.out(ds_name)));
    manifest.write();
    std::cerr << "[augment] variant '" << variant << "': " << features.size()
              << " generated columns over " << merged.rows.size() << " rows\n";
}

// Context-agnostic Gaussian baseline values for the six vitals.
inline void cmd_baseline(const PipelineConfig& cfg) {
    cfg.validate();
    Manifest manifest(cfg, "baseline");
    manifest.input("dataset", cfg.resolve(cfg.dataset));

    Dataset dataset = load_input_dataset(cfg, nullptr);
    std::vector<std::string> vitals(core::vital_names().begin(), core::vital_names().end());
    auto out = augment::gaussian_baseline(dataset, vitals, cfg.seed);
    for (const auto& w : out.warnings) std::cerr << "[baseline] " << w << "\n";

    json values_j = json::object();
    for (const auto& [pid, cells] : out.values) {
        json row = json::object();
        for (const auto& [feature, value] : cells) row[feature] = core::value_to_json(value);
        values_j[pid] = std::move(row);
    }
    json j{{"version", 1}, {"seed", cfg.seed}, {"values", std::move(values_j)},
           {"warnings", out.warnings}};
    util::write_file_atomic(cfg.out("values_baseline.json"), j.dump(2) + "\n");
    std::cerr << "[baseline] seeded Gaussian values for " << out.values.size() << " patients\n";

    manifest.output("values_baseline.json", cfg.out("values_baseline.json"));
    manifest.write();
}

// Table-I-shaped MSE rows plus Table-II-shaped classification metrics over
// whichever variants exist in the output directory.
inline void cmd_eval(const PipelineConfig& cfg) {
    cfg.validate();
    Manifest manifest(cfg, "eval");
    manifest.input("dataset", cfg.resolve(cfg.dataset));
    Dataset truth = load_input_dataset(cfg, nullptr);

    std::vector<std::string> vitals(core::vital_names().begin(), core::vital_names().end());

    // --- MSE table over value artifacts
    std::vector<eval::MseTable> mse_rows;
    auto add_mse = [&](const std::string& artifact, const std::string& generator) {
        auto path = cfg.out(artifact);
        if (!fs::exists(path)) return;
        manifest.input(artifact, path);
        auto values = detail::load_values_artifact(path, Dataset::original_schema());
        auto generated = eval::dataset_from_values(truth, values, vitals);
        mse_rows.push_back(eval::mse_table(generated, truth, vitals, generator));
    };
    add_mse("values_existing.json", "llm_existing");
    add_mse("values_baseline.json", "gaussian_baseline");

    if (!mse_rows.empty()) {
        csv::Table t;
        t.header = {"generator"};
        for (const auto& [name, _] : mse_rows.front().per_feature) t.header.push_back(name);
        t.header.push_back("mean");
        for (const auto& row : mse_rows) {
            std::vector<std::string> cells = {row.generator};
            for (const auto& [_, mse] : row.per_feature) cells.push_back(util::format_double(mse));
            cells.push_back(util::format_double(row.mean));
            t.rows.push_back(std::move(cells));
        }
        util::write_file_atomic(cfg.out("mse_table.csv"), csv::write(t));
        manifest.output("mse_table.csv", cfg.out("mse_table.csv"));
    }

    // --- classification over available variants
    std::vector<std::pair<std::string, Dataset>> variants;
    variants.emplace_back("original", truth);
    for (const std::string name : {"augmented", "augmented_expert", "ablation"}) {
        auto path = cfg.out(name + ".jsonl");
        if (!fs::exists(path)) continue;
        manifest.input(name + ".jsonl", path);
        variants.emplace_back(name, core::load_dataset(path, core::FileFormat::jsonlines).dataset);
    }

    std::vector<eval::ClassifierSpec> specs;
    for (auto kind : {eval::ClassifierKind::decision_tree, eval::ClassifierKind::random_forest,
                      eval::ClassifierKind::gradient_boosted_trees}) {
        eval::ClassifierSpec spec;
        spec.kind = kind;
        spec.max_depth = kind == eval::ClassifierKind::decision_tree ? 6 : 4;
        spec.n_trees = 60;
        spec.learning_rate = 0.1;
        spec.min_samples_leaf = 2;
        spec.seed = cfg.seed;
        specs.push_back(spec);
    }
    auto comparison = eval::compare_feature_sets(variants, lesion_list(), specs, 0.2,
                                                 cfg.cv_folds);
    util::write_file_atomic(cfg.out("metrics.csv"), comparison.metrics.to_csv());
    manifest.output("metrics.csv", cfg.out("metrics.csv"));

    for (const auto& spec : specs) {
        std::string kind = eval::to_string(spec.kind);
        eval::ImportanceReport filtered;
        for (const auto& e : comparison.importances.rows)
            if (e.classifier == kind) filtered.rows.push_back(e);
        std::string name = "importance_" + kind + ".csv";
        util::write_file_atomic(cfg.out(name), filtered.to_csv());
        manifest.output(name, cfg.out(name));
    }
    manifest.write();
    std::cerr << "[eval] " << variants.size() << " variants, " << mse_rows.size()
              << " MSE generators\n";
}

// Renders the plain-text tables from the eval CSV artifacts.
inline void cmd_report(const PipelineConfig& cfg) {
    cfg.validate();
    Manifest manifest(cfg, "report");
    std::string text;

    auto mse_path = cfg.out("mse_table.csv");
    if (fs::exists(mse_path)) {
        manifest.input("mse_table.csv", mse_path);
        auto table = csv::parse(util::read_file(mse_path));
        std::ostringstream os;
        os << "Mean squared error for normalized clinical features\n";
        os << std::string(60, '-') << "\n";
        for (const auto& h : table.header) os << h << "\t";
        os << "\n";
        for (const auto& row : table.rows) {
            for (size_t c = 0; c < row.size(); ++c) {
                if (c == 0) os << row[c] << "\t";
                else {
                    double v = *util::parse_double(row[c]);
                    char buf[32];
                    std::snprintf(buf, sizeof(buf), "%.3f\t", v);
                    os << buf;
                }
            }
            os << "\n";
        }
        text += os.str() + "\n";
    }

    auto metrics_path = cfg.out("metrics.csv");
    if (fs::exists(metrics_path)) {
        manifest.input("metrics.csv", metrics_path);
        auto table = csv::parse(util::read_file(metrics_path));
        eval::MetricsReport report;
        std::map<std::string, size_t> col;
        for (size_t c = 0; c < table.header.size(); ++c) col[table.header[c]] = c;
        for (const auto& row : table.rows) {
            eval::MetricsReport::Entry e;
            e.feature_set = row[col.at("feature_set")];
            e.lesion = row[col.at("lesion")];
            e.classifier = row[col.at("classifier")];
            e.feature_count = static_cast<int>(*util::parse_double(row[col.at("n_features")]));
            e.metrics.accuracy = *util::parse_double(row[col.at("accuracy")]);
            e.metrics.auc_defined = row[col.at("auc")] != "NA";
            e.metrics.auc = e.metrics.auc_defined ? *util::parse_double(row[col.at("auc")]) : 0.0;
            e.metrics.precision = *util::parse_double(row[col.at("precision")]);
            e.metrics.recall = *util::parse_double(row[col.at("recall")]);
            e.metrics.f1 = *util::parse_double(row[col.at("f1")]);
            e.metrics.relevant_features = *util::parse_double(row[col.at("rel_features")]);
            report.rows.push_back(std::move(e));
        }
        text += "Performance of feature sets (macro average over the five lesions)\n";
        text += report.to_text();
    }

    if (text.empty())
        throw ArtifactError("report: no eval artifacts found in " +
                            cfg.resolve(cfg.output_dir).string());
    util::write_file_atomic(cfg.out("report.txt"), text);
    manifest.output("report.txt", cfg.out("report.txt"));
    manifest.write();
    std::cout << text;
}

// ---------------------------------------------------------------------------
// Dispatch

inline int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::config:
        case ErrorKind::data: return 2;
        case ErrorKind::artifact: return 3;
        case ErrorKind::backend:
        case ErrorKind::parse: return 4;
        case ErrorKind::failure_rate: return 5;
        case ErrorKind::internal: return 1;
    }
    return 1;
}

inline int run_command(const std::string& name, const PipelineConfig& cfg) {
    try {
        if (name == "ingest") cmd_ingest(cfg);
        else if (name == "index") cmd_index(cfg);
        else if (name == "ack") cmd_ack(cfg);
        else if (name == "discover") cmd_discover(cfg);
        else if (name == "augment") cmd_augment(cfg);
        else if (name == "baseline") cmd_baseline(cfg);
        else if (name == "eval") cmd_eval(cfg);
        else if (name == "report") cmd_report(cfg);
        else throw ConfigError("unknown command '" + name + "'");
        return 0;
    } catch (const Error& e) {
        std::cerr << "dallm " << name << ": " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "dallm " << name << ": unexpected error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace dallm::pipeline
