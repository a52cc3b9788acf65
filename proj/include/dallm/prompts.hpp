#pragma once

// Prompt rendering and response parsing. Every prompt the pipeline issues is
// rendered here from versioned template files ({placeholder} syntax) so
// experiment wording can change without rebuilds. Rendering is a pure
// function of its inputs. Parsers are JSON-first with a line-grammar
// fallback and never guess: anything unrecognized comes back unparsed.

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dallm/core.hpp"
#include "dallm/kstore.hpp"
#include "dallm/llm.hpp"
#include "dallm/util.hpp"

namespace dallm::prompts {

using json = nlohmann::json;
using core::FeatureDescriptor;
using core::FeatureKind;
using core::Lesion;
using core::PatientCase;

// ---------------------------------------------------------------------------
// Expert questions

enum class QuestionCategory {
    general_knowledge,
    observational,
    physical,
    laboratory,
    patient_characteristics,
};

inline std::string to_string(QuestionCategory c) {
    switch (c) {
        case QuestionCategory::general_knowledge: return "general_knowledge";
        case QuestionCategory::observational: return "observational";
        case QuestionCategory::physical: return "physical";
        case QuestionCategory::laboratory: return "laboratory";
        case QuestionCategory::patient_characteristics: return "patient_characteristics";
    }
    throw Error(ErrorKind::internal, "bad question category");
}

inline std::optional<QuestionCategory> question_category_from_string(std::string_view s) {
    if (s == "general_knowledge") return QuestionCategory::general_knowledge;
    if (s == "observational") return QuestionCategory::observational;
    if (s == "physical") return QuestionCategory::physical;
    if (s == "laboratory") return QuestionCategory::laboratory;
    if (s == "patient_characteristics") return QuestionCategory::patient_characteristics;
    return std::nullopt;
}

struct ExpertQuestion {
    int id = 0;
    QuestionCategory category = QuestionCategory::general_knowledge;
    std::string template_text;  // contains the literal placeholder {lesion}
};

// A question rendered for one lesion. `prompt` carries the question plus the
// answering instruction and still contains the {evidence} placeholder, filled
// once retrieval has run.
struct QuestionPrompt {
    int id = 0;
    QuestionCategory category = QuestionCategory::general_knowledge;
    std::string question;
    std::string prompt;
};

struct AckEntry {
    Lesion lesion = Lesion::atelectasis;
    int question_id = 0;
    std::vector<std::string> evidence;  // chunk ids, retrieval order
    std::string answer;
    std::string fingerprint;

    bool operator==(const AckEntry&) const = default;
};

// ---------------------------------------------------------------------------
// Few-shot exemplars

struct Exemplar {
    std::string input;
    json features;  // JSON array of {name, kind, units}
};

inline std::vector<Exemplar> load_shots(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw ArtifactError("shots file not found: " + path.string());
    json j;
    try {
        j = json::parse(util::read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("shots file unparseable: " + std::string(e.what()));
    }
    std::vector<Exemplar> shots;
    for (const auto& sj : j) {
        Exemplar shot;
        shot.input = sj.at("input").get<std::string>();
        shot.features = sj.at("features");
        shots.push_back(std::move(shot));
    }
    return shots;
}

// ---------------------------------------------------------------------------
// Template library

class PromptLibrary {
public:
    explicit PromptLibrary(const std::filesystem::path& templates_dir) : dir_(templates_dir) {
        load_questions();
        ack_question_ = load_template("ack_question.txt", {"{question}", "{evidence}"});
        existing_value_ =
            load_template("existing_value.txt",
                          {"{age}", "{gender}", "{report}", "{features}", "{keys}"});
        value_generation_ = load_template(
            "value_generation.txt",
            {"{ack_block}", "{features}", "{evidence}", "{age}", "{gender}", "{report}"});
        ack_block_ = load_template("ack_block.txt", {"{answers}"});
        feature_discovery_ = load_template("feature_discovery.txt", {"{shots}", "{ack}"});
    }

    const std::vector<ExpertQuestion>& questions() const { return questions_; }

    // The seven expert questions for one lesion, in question-id order.
    std::vector<QuestionPrompt> render_expert_questions(Lesion lesion) const {
        std::vector<QuestionPrompt> out;
        out.reserve(questions_.size());
        for (const auto& q : questions_) {
            QuestionPrompt p;
            p.id = q.id;
            p.category = q.category;
            p.question = util::replace_all(q.template_text, "{lesion}", core::lesion_term(lesion));
            p.prompt = util::replace_all(ack_question_, "{question}", p.question);
            out.push_back(std::move(p));
        }
        return out;
    }

    static std::string format_evidence(const std::vector<kstore::KnowledgeChunk>& chunks) {
        if (chunks.empty()) return "(no retrieved context)";
        std::string out;
        for (const auto& c : chunks) {
            if (!out.empty()) out += '\n';
            out += "- [" + c.chunk_id + "] " + c.text;
        }
        return out;
    }

    static std::string format_ack_answers(const std::vector<AckEntry>& entries) {
        std::string out;
        for (const auto& e : entries) {
            if (!out.empty()) out += '\n';
            out += "- [" + core::lesion_term(e.lesion) + " / question " +
                   std::to_string(e.question_id) + "] " + e.answer;
        }
        return out;
    }

    std::string complete_question_prompt(const QuestionPrompt& prompt,
                                         const std::vector<kstore::KnowledgeChunk>& evidence) const {
        return util::replace_all(prompt.prompt, "{evidence}", format_evidence(evidence));
    }

    // Experiment-I prompt: estimate existing vitals from report + demographics.
    // Never contains the stored ground-truth values.
    std::string render_existing_value_prompt(const PatientCase& patient,
                                             const std::vector<std::string>& targets) const {
        if (targets.empty())
            throw ConfigError("render_existing_value_prompt: empty target list");
        if (util::trim(patient.report).empty())
            throw DataError("render_existing_value_prompt: patient " + patient.id +
                            " has an empty report");
        auto original = core::Dataset::original_schema();
        std::string features, keys;
        for (const auto& t : targets) {
            if (!core::is_vital(t))
                throw ConfigError("render_existing_value_prompt: '" + t + "' is not a vital sign");
            const FeatureDescriptor* d = nullptr;
            for (const auto& cand : original)
                if (cand.name == t) d = &cand;
            features += "- " + t + " (" + *d->units + ")\n";
            if (!keys.empty()) keys += ", ";
            keys += t;
        }
        std::string out = existing_value_;
        out = util::replace_all(out, "{age}", patient.age
                                                  ? util::format_double(*patient.age)
                                                  : std::string("unknown"));
        out = util::replace_all(out, "{gender}", core::to_string(patient.gender));
        out = util::replace_all(out, "{report}", patient.report);
        out = util::replace_all(out, "{features}", features);
        out = util::replace_all(out, "{keys}", keys);
        return out;
    }

    // Four-source value-generation prompt, in fixed order: (1) ACK answers,
    // (2) feature list, (3) retrieved chunks, (4) patient report and
    // demographics. With ablation=true the ACK block is omitted entirely, so
    // the two variants differ exactly by that block.
    std::string render_value_generation_prompt(const std::vector<AckEntry>& ack,
                                               const std::vector<FeatureDescriptor>& features,
                                               const std::vector<kstore::KnowledgeChunk>& evidence,
                                               const PatientCase& patient, bool ablation) const {
        if (features.empty())
            throw ConfigError("render_value_generation_prompt: empty feature list");
        std::string ack_block;
        if (!ablation)
            ack_block = util::replace_all(ack_block_, "{answers}", format_ack_answers(ack));

        std::string feature_lines;
        for (const auto& d : features) {
            feature_lines += "- " + d.name + " (" + core::to_string(d.kind);
            if (d.units) feature_lines += ", " + *d.units;
            feature_lines += ")\n";
        }

        std::string out = value_generation_;
        out = util::replace_all(out, "{ack_block}", ack_block);
        out = util::replace_all(out, "{features}", feature_lines);
        out = util::replace_all(out, "{evidence}", format_evidence(evidence));
        out = util::replace_all(out, "{age}", patient.age
                                                  ? util::format_double(*patient.age)
                                                  : std::string("unknown"));
        out = util::replace_all(out, "{gender}", core::to_string(patient.gender));
        out = util::replace_all(out, "{report}", patient.report);
        return out;
    }

    // Renders the ACK block exactly as the value-generation prompt embeds it.
    std::string render_ack_block(const std::vector<AckEntry>& ack) const {
        return util::replace_all(ack_block_, "{answers}", format_ack_answers(ack));
    }

    std::string render_feature_discovery_prompt(const std::vector<AckEntry>& ack,
                                                const std::vector<Exemplar>& shots) const {
        if (shots.empty())
            throw ConfigError("render_feature_discovery_prompt: at least one exemplar required");
        std::string shots_text;
        for (const auto& shot : shots) {
            shots_text += "Example input:\n" + shot.input + "\nExample output:\n" +
                          shot.features.dump() + "\n\n";
        }
        std::string out = feature_discovery_;
        out = util::replace_all(out, "{shots}", shots_text);
        out = util::replace_all(out, "{ack}", format_ack_answers(ack));
        return out;
    }

private:
    std::string load_template(const std::string& name,
                              const std::vector<std::string>& required_placeholders) const {
        auto path = dir_ / name;
        if (!std::filesystem::exists(path))
            throw ConfigError("template file not found: " + path.string());
        std::string text = util::normalize_newlines(util::read_file(path));
        for (const auto& ph : required_placeholders)
            if (text.find(ph) == std::string::npos)
                throw ConfigError("template " + name + " is missing placeholder " + ph);
        return text;
    }

    void load_questions() {
        auto path = dir_ / "expert_questions.json";
        if (!std::filesystem::exists(path))
            throw ConfigError("template file not found: " + path.string());
        json j;
        try {
            j = json::parse(util::read_file(path));
        } catch (const json::exception& e) {
            throw ConfigError("expert_questions.json unparseable: " + std::string(e.what()));
        }
        std::map<QuestionCategory, int> counts;
        for (const auto& qj : j.at("questions")) {
            ExpertQuestion q;
            q.id = qj.at("id").get<int>();
            auto cat = question_category_from_string(qj.at("category").get<std::string>());
            if (!cat) throw ConfigError("expert question has unknown category");
            q.category = *cat;
            q.template_text = qj.at("template").get<std::string>();
            if (q.template_text.find("{lesion}") == std::string::npos)
                throw ConfigError("expert question " + std::to_string(q.id) +
                                  " lacks the {lesion} placeholder");
            counts[q.category]++;
            questions_.push_back(std::move(q));
        }
        if (questions_.size() != 7)
            throw ConfigError("expected exactly 7 expert questions, got " +
                              std::to_string(questions_.size()));
        std::sort(questions_.begin(), questions_.end(),
                  [](const ExpertQuestion& a, const ExpertQuestion& b) { return a.id < b.id; });
        for (size_t i = 0; i < questions_.size(); ++i)
            if (questions_[i].id != static_cast<int>(i) + 1)
                throw ConfigError("expert question ids must be 1..7");
        // category partition 2/1/2/1/1
        if (counts[QuestionCategory::general_knowledge] != 2 ||
            counts[QuestionCategory::observational] != 1 ||
            counts[QuestionCategory::physical] != 2 ||
            counts[QuestionCategory::laboratory] != 1 ||
            counts[QuestionCategory::patient_characteristics] != 1)
            throw ConfigError("expert question categories must partition 2/1/2/1/1");
    }

    std::filesystem::path dir_;
    std::vector<ExpertQuestion> questions_;
    std::string ack_question_, existing_value_, value_generation_, ack_block_, feature_discovery_;
};

// ---------------------------------------------------------------------------
// JSON extraction

namespace detail {

// First balanced JSON value of the wanted type embedded anywhere in the text
// (handles code fences and surrounding prose).
inline std::optional<json> extract_json(const std::string& text, bool want_object) {
    char open = want_object ? '{' : '[';
    char close = want_object ? '}' : ']';
    for (size_t start = 0; start < text.size(); ++start) {
        if (text[start] != open) continue;
        int depth = 0;
        bool in_string = false;
        for (size_t i = start; i < text.size(); ++i) {
            char c = text[i];
            if (in_string) {
                if (c == '\\') ++i;
                else if (c == '"') in_string = false;
                continue;
            }
            if (c == '"') in_string = true;
            else if (c == open) ++depth;
            else if (c == close) {
                --depth;
                if (depth == 0) {
                    auto candidate = text.substr(start, i - start + 1);
                    json parsed = json::parse(candidate, nullptr, /*allow_exceptions=*/false);
                    if (!parsed.is_discarded()) return parsed;
                    break;  // balanced but invalid; try the next start
                }
            }
        }
    }
    return std::nullopt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Feature-list parsing

struct FeatureListResult {
    std::vector<FeatureDescriptor> features;
    std::vector<std::string> warnings;
};

namespace detail {

inline void push_feature(FeatureListResult& out, std::set<std::string>& seen,
                         const std::string& raw_name, std::optional<FeatureKind> kind,
                         std::optional<std::string> units) {
    auto name = core::normalize_feature_name(raw_name);
    if (!name) {
        out.warnings.push_back("feature name '" + raw_name + "' not normalizable, skipped");
        return;
    }
    if (!seen.insert(*name).second) return;  // duplicates keep the first
    FeatureDescriptor d;
    d.name = *name;
    d.kind = kind.value_or(FeatureKind::categorical);
    if (units && !util::trim(*units).empty()) d.units = util::trim(*units);
    d.provenance = core::Provenance::llm_discovered;
    out.features.push_back(std::move(d));
}

}  // namespace detail

// JSON array first; bullet-list fallback accepts `- name (kind, units)`,
// `- name (kind)` and bare `- name` (kind defaults to categorical).
inline FeatureListResult parse_feature_list(const llm::Completion& completion) {
    FeatureListResult out;
    std::set<std::string> seen;

    if (auto arr = detail::extract_json(completion.text, /*want_object=*/false)) {
        for (const auto& item : *arr) {
            if (!item.is_object()) {
                if (item.is_string())
                    detail::push_feature(out, seen, item.get<std::string>(), std::nullopt,
                                         std::nullopt);
                continue;
            }
            if (!item.contains("name") || !item["name"].is_string()) {
                out.warnings.push_back("feature object without a name, skipped");
                continue;
            }
            std::optional<FeatureKind> kind;
            if (item.contains("kind") && item["kind"].is_string()) {
                kind = core::feature_kind_from_string(
                    util::to_lower(item["kind"].get<std::string>()));
                if (!kind) {
                    out.warnings.push_back("feature '" + item["name"].get<std::string>() +
                                           "' has unknown kind, skipped");
                    continue;
                }
            }
            std::optional<std::string> units;
            if (item.contains("units") && item["units"].is_string())
                units = item["units"].get<std::string>();
            detail::push_feature(out, seen, item["name"].get<std::string>(), kind, units);
        }
    } else {
        for (const auto& raw_line : util::split(completion.text, '\n')) {
            std::string line = util::trim(raw_line);
            if (line.empty()) continue;
            if (line[0] == '-' || line[0] == '*') line = util::trim(line.substr(1));
            else if (std::isdigit(static_cast<unsigned char>(line[0]))) {
                size_t dot = line.find('.');
                if (dot == std::string::npos || dot > 3) continue;
                line = util::trim(line.substr(dot + 1));
            } else {
                continue;
            }
            if (line.empty()) continue;

            std::optional<FeatureKind> kind;
            std::optional<std::string> units;
            std::string name_part = line;
            size_t paren = line.find('(');
            if (paren != std::string::npos) {
                size_t close = line.find(')', paren);
                if (close == std::string::npos) continue;
                name_part = util::trim(line.substr(0, paren));
                auto inside = util::split(line.substr(paren + 1, close - paren - 1), ',');
                if (!inside.empty()) {
                    kind = core::feature_kind_from_string(util::to_lower(util::trim(inside[0])));
                    if (!kind) {
                        out.warnings.push_back("bullet '" + line + "' has unknown kind, skipped");
                        continue;
                    }
                }
                if (inside.size() > 1) units = util::trim(inside[1]);
            }
            detail::push_feature(out, seen, name_part, kind, units);
        }
    }

    if (out.features.empty())
        throw ParseError("no features parseable from completion (fingerprint " +
                         completion.fingerprint + ")");
    return out;
}

// ---------------------------------------------------------------------------
// Feature-value parsing

enum class Confidence { parsed_json, parsed_line, unparsed };

inline std::string to_string(Confidence c) {
    switch (c) {
        case Confidence::parsed_json: return "parsed_json";
        case Confidence::parsed_line: return "parsed_line";
        case Confidence::unparsed: return "unparsed";
    }
    throw Error(ErrorKind::internal, "bad confidence");
}

struct ParsedFeatureValue {
    std::string name;
    std::string raw;
    std::optional<core::FeatureValue> value;
    std::optional<std::string> units;
    Confidence confidence = Confidence::unparsed;
};

struct ValueParseResult {
    std::vector<ParsedFeatureValue> values;
    std::vector<std::string> warnings;
};

namespace detail {

inline bool is_unknown_marker(const std::string& s) {
    auto t = util::to_lower(util::trim(s));
    return t.empty() || t == "unknown" || t == "n/a" || t == "na" || t == "none" || t == "null" ||
           t == "?";
}

// Closed mapping; anything else is unparsed.
inline std::optional<bool> parse_boolean_word(const std::string& s) {
    auto t = util::to_lower(util::trim(s));
    if (t == "yes" || t == "true" || t == "present") return true;
    if (t == "no" || t == "false" || t == "absent") return false;
    return std::nullopt;
}

struct NumericParse {
    double value;
    std::optional<std::string> units;
};

// "98.6 F" / "97%" / "120 mmHg" -> number plus unit token. Leading '°' and a
// trailing '.' on the unit are dropped.
inline std::optional<NumericParse> split_number_units(const std::string& s) {
    std::string t = util::trim(s);
    if (t.empty()) return std::nullopt;
    size_t pos = 0;
    if (t[pos] == '+' || t[pos] == '-') ++pos;
    size_t digits_start = pos;
    while (pos < t.size() &&
           (std::isdigit(static_cast<unsigned char>(t[pos])) || t[pos] == '.')) ++pos;
    if (pos == digits_start) return std::nullopt;
    auto value = util::parse_double(t.substr(0, pos));
    if (!value || !std::isfinite(*value)) return std::nullopt;
    std::string unit = util::trim(t.substr(pos));
    while (!unit.empty() && (static_cast<unsigned char>(unit.front()) == 0xC2)) {
        // UTF-8 degree sign starts 0xC2 0xB0
        if (unit.size() >= 2 && static_cast<unsigned char>(unit[1]) == 0xB0) unit = unit.substr(2);
        else break;
    }
    if (!unit.empty() && unit.front() == '\xb0') unit = unit.substr(1);
    while (!unit.empty() && unit.back() == '.') unit.pop_back();
    unit = util::trim(unit);
    NumericParse out{*value, std::nullopt};
    if (!unit.empty()) out.units = unit;
    return out;
}

// Accepts a numeric string if its unit suffix is absent, matches the
// descriptor units, or is Celsius against a Fahrenheit descriptor (converted).
inline std::optional<NumericParse> coerce_numeric(const FeatureDescriptor& d,
                                                  const std::string& raw) {
    auto parsed = split_number_units(raw);
    if (!parsed) return std::nullopt;
    if (!parsed->units) return parsed;

    std::string unit = util::to_lower(*parsed->units);
    std::string want = d.units ? util::to_lower(*d.units) : "";

    auto matches = [&](std::initializer_list<const char*> aliases) {
        for (const char* a : aliases)
            if (unit == a) return true;
        return false;
    };

    if (want == "degrees fahrenheit") {
        if (matches({"f", "fahrenheit", "degf", "degrees fahrenheit"})) return parsed;
        if (matches({"c", "celsius", "degc", "degrees celsius"})) {
            parsed->value = parsed->value * 9.0 / 5.0 + 32.0;  // dataset convention is Fahrenheit
            parsed->units = "degrees Fahrenheit";
            return parsed;
        }
        return std::nullopt;
    }
    if (want == "percent") return matches({"%", "percent", "pct"}) ? parsed : std::nullopt;
    if (want == "mmhg") return matches({"mmhg", "mm hg"}) ? parsed : std::nullopt;
    if (want == "beats per minute")
        return matches({"bpm", "beats/min", "beats per minute", "/min"}) ? parsed : std::nullopt;
    if (want == "breaths per minute")
        return matches({"breaths/min", "breaths per minute", "/min", "bpm"}) ? parsed
                                                                             : std::nullopt;
    if (want == "years") return matches({"years", "yr", "yrs", "y"}) ? parsed : std::nullopt;
    if (!want.empty() && unit == want) return parsed;
    return std::nullopt;  // unit present but unmatched: no guessing
}

inline ParsedFeatureValue coerce(const FeatureDescriptor& d, const json& cell,
                                 Confidence source) {
    ParsedFeatureValue out;
    out.name = d.name;
    out.confidence = Confidence::unparsed;
    out.raw = cell.is_string() ? cell.get<std::string>() : cell.dump();

    switch (d.kind) {
        case FeatureKind::numeric: {
            if (cell.is_number()) {
                double v = cell.get<double>();
                if (std::isfinite(v)) {
                    out.value = core::FeatureValue(v);
                    out.units = d.units;
                    out.confidence = source;
                }
            } else if (cell.is_string() && !is_unknown_marker(cell.get<std::string>())) {
                if (auto num = coerce_numeric(d, cell.get<std::string>())) {
                    out.value = core::FeatureValue(num->value);
                    out.units = num->units ? num->units : d.units;
                    out.confidence = source;
                }
            }
            break;
        }
        case FeatureKind::boolean: {
            if (cell.is_boolean()) {
                out.value = core::FeatureValue(cell.get<bool>());
                out.confidence = source;
            } else if (cell.is_string()) {
                if (auto b = parse_boolean_word(cell.get<std::string>())) {
                    out.value = core::FeatureValue(*b);
                    out.confidence = source;
                }
            }
            break;
        }
        case FeatureKind::categorical: {
            if (cell.is_string() && !is_unknown_marker(cell.get<std::string>())) {
                out.value = core::FeatureValue(util::trim(cell.get<std::string>()));
                out.confidence = source;
            }
            break;
        }
    }
    return out;
}

}  // namespace detail

// JSON object first, `name: value [units]` lines as fallback. Unmatched names
// are ignored with a warning; unparseable values come back with confidence
// unparsed and no value.
inline ValueParseResult parse_feature_values(const llm::Completion& completion,
                                             const std::vector<FeatureDescriptor>& schema) {
    if (schema.empty()) throw ConfigError("parse_feature_values: empty schema");
    ValueParseResult out;

    auto find_descriptor = [&](const std::string& raw_name) -> const FeatureDescriptor* {
        auto name = core::normalize_feature_name(raw_name);
        if (!name) return nullptr;
        for (const auto& d : schema)
            if (d.name == *name) return &d;
        return nullptr;
    };

    if (auto obj = detail::extract_json(completion.text, /*want_object=*/true)) {
        for (const auto& [key, cell] : obj->items()) {
            const auto* d = find_descriptor(key);
            if (!d) {
                out.warnings.push_back("feature '" + key + "' not in schema, ignored");
                continue;
            }
            out.values.push_back(detail::coerce(*d, cell, Confidence::parsed_json));
        }
        return out;
    }

    bool any_line = false;
    for (const auto& raw_line : util::split(completion.text, '\n')) {
        std::string line = util::trim(raw_line);
        if (line.empty()) continue;
        if (line[0] == '-' || line[0] == '*') line = util::trim(line.substr(1));
        size_t colon = line.find(':');
        if (colon == std::string::npos) continue;
        std::string name_part = util::trim(line.substr(0, colon));
        std::string value_part = util::trim(line.substr(colon + 1));
        if (name_part.empty()) continue;
        const auto* d = find_descriptor(name_part);
        if (!d) {
            // only warn for plausible feature-name lines, not prose
            if (name_part.size() <= 40 && name_part.find(' ') == std::string::npos)
                out.warnings.push_back("feature '" + name_part + "' not in schema, ignored");
            continue;
        }
        any_line = true;
        out.values.push_back(detail::coerce(*d, json(value_part), Confidence::parsed_line));
    }

    if (!any_line)
        throw ParseError("completion wholly unparseable (fingerprint " + completion.fingerprint +
                         ")");
    return out;
}

}  // namespace dallm::prompts
