#pragma once

// Phase orchestration: building the Augmented Clinical Knowledge corpus
// (retrieve evidence per expert question, complete, store), LLM feature
// discovery with expert curation, per-patient value generation with the
// four-source prompt, and the context-agnostic Gaussian baseline.

#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dallm/core.hpp"
#include "dallm/kstore.hpp"
#include "dallm/llm.hpp"
#include "dallm/prompts.hpp"
#include "dallm/util.hpp"

namespace dallm::augment {

using json = nlohmann::json;
using core::Dataset;
using core::FeatureDescriptor;
using core::FeatureValue;
using core::Lesion;
using prompts::AckEntry;

// ---------------------------------------------------------------------------
// Augmented Clinical Knowledge

struct Ack {
    std::map<Lesion, std::vector<AckEntry>> entries;  // 7 per lesion
    std::string index_descriptor;
    int k = 0;
    std::string backend;

    bool operator==(const Ack&) const = default;

    // Entries for the given lesions (canonical order), or all when empty.
    std::vector<AckEntry> entries_for(const std::vector<Lesion>& lesions) const {
        std::vector<AckEntry> out;
        auto want = lesions;
        if (want.empty())
            want.assign(core::all_lesions().begin(), core::all_lesions().end());
        for (Lesion l : core::all_lesions()) {
            if (std::find(want.begin(), want.end(), l) == want.end()) continue;
            auto it = entries.find(l);
            if (it == entries.end()) continue;
            out.insert(out.end(), it->second.begin(), it->second.end());
        }
        return out;
    }

    json to_json() const {
        json entries_j = json::object();
        for (const auto& [lesion, list] : entries) {
            json arr = json::array();
            for (const auto& e : list) {
                arr.push_back({{"question_id", e.question_id},
                               {"evidence", e.evidence},
                               {"answer", e.answer},
                               {"fingerprint", e.fingerprint}});
            }
            entries_j[core::to_string(lesion)] = std::move(arr);
        }
        return json{{"version", 1},
                    {"k", k},
                    {"backend", backend},
                    {"index", index_descriptor},
                    {"entries", std::move(entries_j)}};
    }

    static Ack from_json(const json& j) {
        if (j.value("version", 0) != 1) throw ArtifactError("ack: unsupported version");
        Ack ack;
        ack.k = j.value("k", 0);
        ack.backend = j.value("backend", "");
        ack.index_descriptor = j.value("index", "");
        for (const auto& [key, arr] : j.at("entries").items()) {
            auto lesion = core::lesion_from_string(key);
            if (!lesion) throw ArtifactError("ack: unknown lesion " + key);
            std::vector<AckEntry> list;
            for (const auto& ej : arr) {
                AckEntry e;
                e.lesion = *lesion;
                e.question_id = ej.at("question_id").get<int>();
                e.evidence = ej.at("evidence").get<std::vector<std::string>>();
                e.answer = ej.at("answer").get<std::string>();
                e.fingerprint = ej.at("fingerprint").get<std::string>();
                list.push_back(std::move(e));
            }
            ack.entries[*lesion] = std::move(list);
        }
        return ack;
    }

    void save(const std::filesystem::path& path) const {
        util::write_file_atomic(path, to_json().dump(2) + "\n");
    }
    static Ack load(const std::filesystem::path& path) {
        if (!std::filesystem::exists(path))
            throw ArtifactError("ack file not found: " + path.string());
        return from_json(json::parse(util::read_file(path)));
    }
};

// For each (lesion, question): retrieve top-k evidence from the lesion
// partition, render the question prompt, complete, and store the entry with
// evidence ids and fingerprint. Deterministic under replay or a scripted
// backend.
inline Ack build_ack(const kstore::VectorIndex& index, const std::vector<Lesion>& lesions, int k,
                     llm::Client& client, const prompts::PromptLibrary& lib,
                     const llm::GenerationConfig& gen) {
    Ack ack;
    ack.index_descriptor = index.embedder_descriptor();
    ack.k = k;

    for (Lesion lesion : lesions) {
        if (!index.has_partition(lesion))
            throw DataError("build_ack: empty index partition for lesion " +
                            core::to_string(lesion));
        auto question_prompts = lib.render_expert_questions(lesion);
        std::vector<AckEntry> list;
        for (const auto& qp : question_prompts) {
            try {
                auto hits = index.search(qp.question, k, lesion);
                std::vector<kstore::KnowledgeChunk> evidence;
                for (const auto& hit : hits) evidence.push_back(*index.find_chunk(hit.chunk_id));
                std::string prompt = lib.complete_question_prompt(qp, evidence);
                auto completion = client.complete(prompt, gen);
                if (ack.backend.empty()) ack.backend = completion.backend;
                AckEntry e;
                e.lesion = lesion;
                e.question_id = qp.id;
                for (const auto& hit : hits) e.evidence.push_back(hit.chunk_id);
                e.answer = completion.text;
                e.fingerprint = completion.fingerprint;
                if (util::trim(e.answer).empty())
                    throw BackendError("empty answer");
                list.push_back(std::move(e));
            } catch (const Error& e) {
                throw Error(e.kind(), "build_ack: lesion " + core::to_string(lesion) +
                                          " question " + std::to_string(qp.id) + ": " + e.what());
            }
        }
        ack.entries[lesion] = std::move(list);
    }
    return ack;
}

// ---------------------------------------------------------------------------
// Feature discovery and curation

struct DiscoveryResult {
    std::vector<FeatureDescriptor> features;  // global union, first occurrence wins
    std::map<Lesion, std::string> fingerprints;
    std::vector<std::string> warnings;
};

inline DiscoveryResult discover_features(const Ack& ack, const std::vector<prompts::Exemplar>& shots,
                                         llm::Client& client, const prompts::PromptLibrary& lib,
                                         const llm::GenerationConfig& gen) {
    DiscoveryResult out;
    std::set<std::string> seen;
    for (Lesion lesion : core::all_lesions()) {
        auto it = ack.entries.find(lesion);
        if (it == ack.entries.end()) continue;
        try {
            std::string prompt = lib.render_feature_discovery_prompt(it->second, shots);
            auto completion = client.complete(prompt, gen);
            out.fingerprints[lesion] = completion.fingerprint;
            auto parsed = prompts::parse_feature_list(completion);
            for (auto& w : parsed.warnings) out.warnings.push_back(std::move(w));
            for (auto& d : parsed.features)
                if (seen.insert(d.name).second) out.features.push_back(std::move(d));
        } catch (const Error& e) {
            throw Error(e.kind(), "discover_features: lesion " + core::to_string(lesion) + ": " +
                                      e.what());
        }
    }
    if (out.features.empty()) throw ParseError("discover_features: zero features discovered");
    return out;
}

// Curation file: JSON array of {"action": "add"|"remove"|"rename", ...}.
// Adds are tagged expert_added; removals and renames must reference known
// features. Output order: survivors in input order, additions appended.
inline std::vector<FeatureDescriptor> apply_expert_curation(
    std::vector<FeatureDescriptor> features, const std::filesystem::path& curation_file) {
    if (!std::filesystem::exists(curation_file))
        throw ArtifactError("curation file not found: " + curation_file.string());
    json j;
    try {
        j = json::parse(util::read_file(curation_file));
    } catch (const json::exception& e) {
        throw ConfigError("curation file unparseable: " + std::string(e.what()));
    }
    if (!j.is_array()) throw ConfigError("curation file must be a JSON array of actions");

    auto find = [&](const std::string& name) {
        return std::find_if(features.begin(), features.end(),
                            [&](const FeatureDescriptor& d) { return d.name == name; });
    };

    for (const auto& action_j : j) {
        std::string action = action_j.value("action", "");
        if (action == "add") {
            FeatureDescriptor d = action_j.at("descriptor").get<FeatureDescriptor>();
            auto name = core::normalize_feature_name(d.name);
            if (!name) throw ConfigError("curation: unnormalizable feature name '" + d.name + "'");
            d.name = *name;
            d.provenance = core::Provenance::expert_added;
            if (find(d.name) != features.end())
                throw DataError("curation: add collides with existing feature '" + d.name + "'");
            features.push_back(std::move(d));
        } else if (action == "remove") {
            std::string name = action_j.at("name").get<std::string>();
            auto it = find(name);
            if (it == features.end())
                throw DataError("curation: remove references unknown feature '" + name + "'");
            features.erase(it);
        } else if (action == "rename") {
            std::string from = action_j.at("from").get<std::string>();
            std::string to_raw = action_j.at("to").get<std::string>();
            auto to = core::normalize_feature_name(to_raw);
            if (!to) throw ConfigError("curation: unnormalizable rename target '" + to_raw + "'");
            auto it = find(from);
            if (it == features.end())
                throw DataError("curation: rename references unknown feature '" + from + "'");
            if (find(*to) != features.end())
                throw DataError("curation: rename target '" + *to + "' collides");
            it->name = *to;
        } else {
            throw ConfigError("curation: unknown action '" + action + "'");
        }
    }
    return features;
}

// ---------------------------------------------------------------------------
// Value generation

struct GenerateOptions {
    int k = 5;                            // evidence chunks per lesion
    bool ablation = false;                // omit the ACK block from prompts
    double failure_rate_threshold = 0.05;
    unsigned workers = 4;
    llm::GenerationConfig gen;
};

struct GenerationOutput {
    std::map<std::string, std::map<std::string, FeatureValue>> values;  // pid -> name -> value
    std::map<std::string, std::string> fingerprints;                    // pid -> fingerprint
    std::map<std::string, std::string> prompts;                         // pid -> issued prompt
    std::string backend;  // descriptor of the backend that produced the completions
    std::vector<std::string> warnings;
    std::vector<std::string> failed_ids;
};

namespace detail {

inline std::vector<Lesion> positive_lesions(const core::PatientCase& p) {
    std::vector<Lesion> out;
    for (Lesion l : core::all_lesions()) {
        auto it = p.labels.find(l);
        if (it != p.labels.end() && it->second) out.push_back(l);
    }
    return out;
}

inline void enforce_failure_rate(GenerationOutput& out, size_t n, double threshold,
                                 const char* what) {
    if (n == 0) return;
    double rate = static_cast<double>(out.failed_ids.size()) / static_cast<double>(n);
    if (rate > threshold) {
        std::string first = out.warnings.empty() ? "" : (" first: " + out.warnings.front());
        throw FailureRateError(std::string(what) + ": " + std::to_string(out.failed_ids.size()) +
                               "/" + std::to_string(n) + " patients failed (threshold " +
                               util::format_double(threshold) + ")" + first);
    }
}

}  // namespace detail

// Per patient: evidence comes from the positive-label partitions (all
// partitions when no label is positive), keyed by the report text; the
// four-source prompt is completed and parsed; unparsed values stay missing.
// Failures are collected, and the run fails only above the threshold.
inline GenerationOutput generate_values(const Dataset& dataset,
                                        const std::vector<FeatureDescriptor>& features,
                                        const Ack& ack, const kstore::VectorIndex& index,
                                        llm::Client& client, const prompts::PromptLibrary& lib,
                                        const GenerateOptions& options) {
    if (features.empty()) throw ConfigError("generate_values: empty feature list");
    size_t n = dataset.rows.size();

    struct Slot {
        std::optional<std::map<std::string, FeatureValue>> values;
        std::string fingerprint, prompt, backend;
        std::vector<std::string> warnings;
        bool failed = false;
    };
    std::vector<Slot> slots(n);

    util::parallel_for(n, options.workers, [&](size_t i) {
        const auto& patient = dataset.rows[i].patient;
        Slot& slot = slots[i];
        try {
            auto lesions = detail::positive_lesions(patient);
            std::string query =
                util::trim(patient.report).empty() ? std::string("clinical features") : patient.report;

            std::vector<kstore::KnowledgeChunk> evidence;
            std::set<std::string> seen;
            if (lesions.empty()) {
                for (const auto& hit : index.search(query, options.k))
                    if (seen.insert(hit.chunk_id).second)
                        evidence.push_back(*index.find_chunk(hit.chunk_id));
            } else {
                for (Lesion l : lesions)
                    for (const auto& hit : index.search(query, options.k, l))
                        if (seen.insert(hit.chunk_id).second)
                            evidence.push_back(*index.find_chunk(hit.chunk_id));
            }

            auto ack_entries = ack.entries_for(lesions);
            std::string prompt = lib.render_value_generation_prompt(ack_entries, features, evidence,
                                                                    patient, options.ablation);
            slot.prompt = prompt;
            auto completion = client.complete(prompt, options.gen);
            slot.fingerprint = completion.fingerprint;
            slot.backend = completion.backend;

            auto parsed = prompts::parse_feature_values(completion, features);
            for (auto& w : parsed.warnings)
                slot.warnings.push_back("patient " + patient.id + ": " + w);
            std::map<std::string, FeatureValue> cells;
            for (auto& v : parsed.values)
                if (v.value) cells[v.name] = *v.value;
            slot.values = std::move(cells);
        } catch (const BackendError& e) {
            slot.failed = true;
            slot.warnings.push_back("patient " + patient.id + " failed: " + e.what());
        } catch (const ParseError& e) {
            slot.failed = true;
            slot.warnings.push_back("patient " + patient.id + " failed: " + e.what());
        } catch (const DataError& e) {
            slot.failed = true;
            slot.warnings.push_back("patient " + patient.id + " failed: " + e.what());
        }
    });

    GenerationOutput out;
    for (size_t i = 0; i < n; ++i) {
        const auto& pid = dataset.rows[i].patient.id;
        Slot& slot = slots[i];
        for (auto& w : slot.warnings) out.warnings.push_back(std::move(w));
        if (slot.failed) {
            out.failed_ids.push_back(pid);
            continue;
        }
        out.values[pid] = std::move(*slot.values);
        out.fingerprints[pid] = std::move(slot.fingerprint);
        out.prompts[pid] = std::move(slot.prompt);
        if (out.backend.empty()) out.backend = slot.backend;
    }
    detail::enforce_failure_rate(out, n, options.failure_rate_threshold, "generate_values");
    return out;
}

// Experiment-I path: ask for existing vitals from report + demographics only
// (no retrieval, no ACK), parse against the original schema.
inline GenerationOutput generate_existing_values(const Dataset& dataset,
                                                 const std::vector<std::string>& targets,
                                                 llm::Client& client,
                                                 const prompts::PromptLibrary& lib,
                                                 const GenerateOptions& options) {
    if (targets.empty()) throw ConfigError("generate_existing_values: empty target list");
    std::vector<FeatureDescriptor> schema;
    for (const auto& d : Dataset::original_schema())
        if (std::find(targets.begin(), targets.end(), d.name) != targets.end())
            schema.push_back(d);
    if (schema.size() != targets.size())
        throw ConfigError("generate_existing_values: targets must be original vitals");

    size_t n = dataset.rows.size();
    struct Slot {
        std::optional<std::map<std::string, FeatureValue>> values;
        std::string fingerprint, prompt, backend;
        std::vector<std::string> warnings;
        bool failed = false;
    };
    std::vector<Slot> slots(n);

    util::parallel_for(n, options.workers, [&](size_t i) {
        const auto& patient = dataset.rows[i].patient;
        Slot& slot = slots[i];
        try {
            std::string prompt = lib.render_existing_value_prompt(patient, targets);
            slot.prompt = prompt;
            auto completion = client.complete(prompt, options.gen);
            slot.fingerprint = completion.fingerprint;
            slot.backend = completion.backend;
            auto parsed = prompts::parse_feature_values(completion, schema);
            for (auto& w : parsed.warnings)
                slot.warnings.push_back("patient " + patient.id + ": " + w);
            std::map<std::string, FeatureValue> cells;
            for (auto& v : parsed.values)
                if (v.value) cells[v.name] = *v.value;
            slot.values = std::move(cells);
        } catch (const BackendError& e) {
            slot.failed = true;
            slot.warnings.push_back("patient " + patient.id + " failed: " + e.what());
        } catch (const ParseError& e) {
            slot.failed = true;
            slot.warnings.push_back("patient " + patient.id + " failed: " + e.what());
        } catch (const DataError& e) {
            slot.failed = true;
            slot.warnings.push_back("patient " + patient.id + " failed: " + e.what());
        }
    });

    GenerationOutput out;
    for (size_t i = 0; i < n; ++i) {
        const auto& pid = dataset.rows[i].patient.id;
        Slot& slot = slots[i];
        for (auto& w : slot.warnings) out.warnings.push_back(std::move(w));
        if (slot.failed) {
            out.failed_ids.push_back(pid);
            continue;
        }
        out.values[pid] = std::move(*slot.values);
        out.fingerprints[pid] = std::move(slot.fingerprint);
        out.prompts[pid] = std::move(slot.prompt);
        if (out.backend.empty()) out.backend = slot.backend;
    }
    detail::enforce_failure_rate(out, n, options.failure_rate_threshold,
                                 "generate_existing_values");
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian baseline

struct BaselineOutput {
    std::map<std::string, std::map<std::string, FeatureValue>> values;
    std::vector<std::string> warnings;  // zero-variance features skipped
};

// Context-agnostic generator: each cell is an i.i.d. standard normal draw in
// standardized space, mapped back through the feature's (mean, std).
inline BaselineOutput gaussian_baseline(const Dataset& dataset,
                                        const std::vector<std::string>& feature_names,
                                        uint64_t seed) {
    BaselineOutput out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> standard_normal(0.0, 1.0);

    for (const auto& name : feature_names) {
        auto stats = core::feature_stats(dataset, name);
        if (stats.zero_variance) {
            out.warnings.push_back("gaussian_baseline: feature '" + name +
                                   "' has zero variance, skipped");
            continue;
        }
        for (const auto& row : dataset.rows) {
            double z = standard_normal(rng);
            out.values[row.patient.id][name] = stats.mean + stats.std * z;
        }
    }
    return out;
}

}  // namespace dallm::augment
