#pragma once

// Canonical clinical dataset model shared by every pipeline stage: patient
// cases with the eight original features plus five lesion ground-truth labels,
// a typed feature schema with provenance, CSV / JSON Lines serialization,
// z-score standardization, and column-merging of generated values.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dallm/csv.hpp"
#include "dallm/util.hpp"

namespace dallm::core {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Enums

enum class Lesion {
    atelectasis,
    consolidation,
    enlarged_cardiac_silhouette,
    pleural_effusion,
    pleural_abnormality,
};

inline const std::array<Lesion, 5>& all_lesions() {
    static constexpr std::array<Lesion, 5> lesions = {
        Lesion::atelectasis, Lesion::consolidation, Lesion::enlarged_cardiac_silhouette,
        Lesion::pleural_effusion, Lesion::pleural_abnormality};
    return lesions;
}

inline std::string to_string(Lesion l) {
    switch (l) {
        case Lesion::atelectasis: return "atelectasis";
        case Lesion::consolidation: return "consolidation";
        case Lesion::enlarged_cardiac_silhouette: return "enlarged_cardiac_silhouette";
        case Lesion::pleural_effusion: return "pleural_effusion";
        case Lesion::pleural_abnormality: return "pleural_abnormality";
    }
    throw Error(ErrorKind::internal, "bad lesion value");
}

// Human-readable form used in prompts and search terms ("pleural effusion").
inline std::string lesion_term(Lesion l) {
    return util::replace_all(to_string(l), "_", " ");
}

inline std::optional<Lesion> lesion_from_string(std::string_view s) {
    for (Lesion l : all_lesions())
        if (to_string(l) == s) return l;
    return std::nullopt;
}

enum class Gender { female, male, unknown };

inline std::string to_string(Gender g) {
    switch (g) {
        case Gender::female: return "female";
        case Gender::male: return "male";
        case Gender::unknown: return "unknown";
    }
    throw Error(ErrorKind::internal, "bad gender value");
}

inline std::optional<Gender> gender_from_string(std::string_view s) {
    if (s == "female") return Gender::female;
    if (s == "male") return Gender::male;
    if (s == "unknown" || s.empty()) return Gender::unknown;
    return std::nullopt;
}

enum class FeatureKind { numeric, boolean, categorical };

inline std::string to_string(FeatureKind k) {
    switch (k) {
        case FeatureKind::numeric: return "numeric";
        case FeatureKind::boolean: return "boolean";
        case FeatureKind::categorical: return "categorical";
    }
    throw Error(ErrorKind::internal, "bad feature kind");
}

inline std::optional<FeatureKind> feature_kind_from_string(std::string_view s) {
    if (s == "numeric") return FeatureKind::numeric;
    if (s == "boolean") return FeatureKind::boolean;
    if (s == "categorical") return FeatureKind::categorical;
    return std::nullopt;
}

enum class Provenance { original, llm_discovered, expert_added };

inline std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::original: return "original";
        case Provenance::llm_discovered: return "llm_discovered";
        case Provenance::expert_added: return "expert_added";
    }
    throw Error(ErrorKind::internal, "bad provenance");
}

inline std::optional<Provenance> provenance_from_string(std::string_view s) {
    if (s == "original") return Provenance::original;
    if (s == "llm_discovered") return Provenance::llm_discovered;
    if (s == "expert_added") return Provenance::expert_added;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Feature schema

inline bool valid_feature_name(std::string_view name) {
    if (name.empty()) return false;
    if (name[0] < 'a' || name[0] > 'z') return false;
    for (char c : name)
        if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_')) return false;
    return true;
}

// Lowercase, spaces/hyphens/slashes to underscores, everything else dropped.
// Returns nullopt when nothing valid remains.
inline std::optional<std::string> normalize_feature_name(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    for (char ch : raw) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            out += static_cast<char>(std::tolower(c));
        } else if (c == ' ' || c == '-' || c == '/' || c == '_' || c == '\t') {
            if (!out.empty() && out.back() != '_') out += '_';
        }
        // anything else dropped
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    size_t b = 0;
    while (b < out.size() && out[b] == '_') ++b;
    out = out.substr(b);
    if (!valid_feature_name(out)) return std::nullopt;
    return out;
}

struct FeatureDescriptor {
    std::string name;
    FeatureKind kind = FeatureKind::numeric;
    std::optional<std::string> units;
    Provenance provenance = Provenance::original;

    bool operator==(const FeatureDescriptor&) const = default;
};

inline void to_json(json& j, const FeatureDescriptor& d) {
    j = json{{"name", d.name}, {"kind", to_string(d.kind)}, {"provenance", to_string(d.provenance)}};
    if (d.units) j["units"] = *d.units;
}

inline void from_json(const json& j, FeatureDescriptor& d) {
    d.name = j.at("name").get<std::string>();
    auto kind = feature_kind_from_string(j.at("kind").get<std::string>());
    if (!kind) throw DataError("unknown feature kind: " + j.at("kind").get<std::string>());
    d.kind = *kind;
    if (j.contains("units") && !j["units"].is_null()) d.units = j["units"].get<std::string>();
    else d.units.reset();
    auto prov = provenance_from_string(j.value("provenance", "original"));
    if (!prov) throw DataError("unknown provenance: " + j.value("provenance", ""));
    d.provenance = *prov;
}

// ---------------------------------------------------------------------------
// Patient cases and datasets

using FeatureValue = std::variant<double, bool, std::string>;

inline json value_to_json(const FeatureValue& v) {
    if (std::holds_alternative<double>(v)) return std::get<double>(v);
    if (std::holds_alternative<bool>(v)) return std::get<bool>(v);
    return std::get<std::string>(v);
}

struct PatientCase {
    std::string id;
    std::optional<double> age;  // integral years >= 0, validated on load
    Gender gender = Gender::unknown;
    std::optional<double> temperature;  // degrees Fahrenheit
    std::optional<double> heartrate;    // beats per minute
    std::optional<double> resprate;     // breaths per minute
    std::optional<double> o2sat;        // percent, 0..100
    std::optional<double> sbp;          // mmHg
    std::optional<double> dbp;          // mmHg
    std::string report;
    std::map<Lesion, bool> labels;  // exactly the five lesion keys

    bool operator==(const PatientCase&) const = default;
};

inline const std::array<std::string, 6>& vital_names() {
    static const std::array<std::string, 6> names = {"temperature", "heartrate", "resprate",
                                                     "o2sat", "sbp", "dbp"};
    return names;
}

inline bool is_vital(std::string_view name) {
    for (const auto& v : vital_names())
        if (v == name) return true;
    return false;
}

inline std::optional<double>* vital_slot(PatientCase& p, std::string_view name) {
    if (name == "temperature") return &p.temperature;
    if (name == "heartrate") return &p.heartrate;
    if (name == "resprate") return &p.resprate;
    if (name == "o2sat") return &p.o2sat;
    if (name == "sbp") return &p.sbp;
    if (name == "dbp") return &p.dbp;
    return nullptr;
}

inline const std::optional<double>* vital_slot(const PatientCase& p, std::string_view name) {
    return vital_slot(const_cast<PatientCase&>(p), name);
}

// Throws DataError when a case violates a type invariant.
inline void validate_case(const PatientCase& p, const std::string& context) {
    if (p.age) {
        if (*p.age < 0 || *p.age != std::floor(*p.age))
            throw DataError(context + ": age must be a non-negative integer, got " +
                            util::format_double(*p.age));
    }
    if (p.o2sat && (*p.o2sat < 0.0 || *p.o2sat > 100.0))
        throw DataError(context + ": o2sat out of range [0,100]: " + util::format_double(*p.o2sat));
    if (p.sbp && p.dbp && *p.sbp < *p.dbp)
        throw DataError(context + ": sbp < dbp (" + util::format_double(*p.sbp) + " < " +
                        util::format_double(*p.dbp) + ")");
    for (const auto& name : vital_names()) {
        const auto* slot = vital_slot(p, name);
        if (*slot && !std::isfinite(**slot))
            throw DataError(context + ": non-finite value for " + name);
    }
    if (p.labels.size() != all_lesions().size())
        throw DataError(context + ": labels must contain exactly the five lesion keys");
}

struct DatasetMeta {
    std::uint64_t seed = 0;
    std::string backend;
    bool ablation = false;

    bool operator==(const DatasetMeta&) const = default;
};

struct DataRow {
    PatientCase patient;
    // Values for features beyond the patient's own fields (generated columns,
    // or a configured extra original column).
    std::map<std::string, FeatureValue> values;

    bool operator==(const DataRow&) const = default;
};

struct Dataset {
    std::vector<FeatureDescriptor> schema;
    std::vector<DataRow> rows;
    DatasetMeta meta;

    bool operator==(const Dataset&) const = default;

    static std::vector<FeatureDescriptor> original_schema() {
        return {
            {"age", FeatureKind::numeric, "years", Provenance::original},
            {"gender", FeatureKind::categorical, std::nullopt, Provenance::original},
            {"temperature", FeatureKind::numeric, "degrees Fahrenheit", Provenance::original},
            {"heartrate", FeatureKind::numeric, "beats per minute", Provenance::original},
            {"resprate", FeatureKind::numeric, "breaths per minute", Provenance::original},
            {"o2sat", FeatureKind::numeric, "percent", Provenance::original},
            {"sbp", FeatureKind::numeric, "mmHg", Provenance::original},
            {"dbp", FeatureKind::numeric, "mmHg", Provenance::original},
        };
    }

    const FeatureDescriptor* find_feature(std::string_view name) const {
        for (const auto& d : schema)
            if (d.name == name) return &d;
        return nullptr;
    }

    // Missing cells come back as nullopt. Original features read from the
    // patient record; everything else from the row's value map.
    std::optional<FeatureValue> value_of(const DataRow& row, const std::string& name) const {
        if (name == "age") {
            if (row.patient.age) return FeatureValue(*row.patient.age);
            return std::nullopt;
        }
        if (name == "gender") return FeatureValue(to_string(row.patient.gender));
        if (const auto* slot = vital_slot(row.patient, name)) {
            if (*slot) return FeatureValue(**slot);
            return std::nullopt;
        }
        auto it = row.values.find(name);
        if (it == row.values.end()) return std::nullopt;
        return it->second;
    }

    std::optional<double> numeric_value(const DataRow& row, const std::string& name) const {
        auto v = value_of(row, name);
        if (!v || !std::holds_alternative<double>(*v)) return std::nullopt;
        return std::get<double>(*v);
    }

    void set_numeric(DataRow& row, const std::string& name, double value) const {
        if (name == "age") {
            row.patient.age = value;
            return;
        }
        if (auto* slot = vital_slot(row.patient, name)) {
            *slot = value;
            return;
        }
        row.values[name] = value;
    }
};

// Column names that can never be used by a generated feature.
inline std::set<std::string> reserved_column_names() {
    std::set<std::string> out = {"id", "report"};
    for (Lesion l : all_lesions()) out.insert(to_string(l));
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

enum class FileFormat { csv, jsonlines };

inline std::string to_string(FileFormat f) {
    return f == FileFormat::csv ? "csv" : "jsonlines";
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& dataset_path) {
    auto p = dataset_path;
    p += ".schema.json";
    return p;
}

namespace detail {

inline std::vector<std::string> column_order(const std::vector<FeatureDescriptor>& schema) {
    std::vector<std::string> cols = {"id"};
    for (const auto& d : schema) cols.push_back(d.name);
    cols.push_back("report");
    for (Lesion l : all_lesions()) cols.push_back(to_string(l));
    return cols;
}

inline std::string cell_for(const Dataset& ds, const DataRow& row, const FeatureDescriptor& d) {
    auto v = ds.value_of(row, d.name);
    if (!v) return "";
    switch (d.kind) {
        case FeatureKind::numeric: return util::format_double(std::get<double>(*v));
        case FeatureKind::boolean: return std::get<bool>(*v) ? "1" : "0";
        case FeatureKind::categorical: return std::get<std::string>(*v);
    }
    return "";
}

inline std::optional<bool> parse_bool_cell(std::string_view raw) {
    std::string s = util::to_lower(util::trim(raw));
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    return std::nullopt;
}

struct CellOutcome {
    std::optional<FeatureValue> value;
    bool warning = false;
    std::string message;
};

// Kind-aware cell parsing. Unparseable numerics degrade to missing with a
// warning; empty means missing.
inline CellOutcome parse_cell(const FeatureDescriptor& d, std::string_view raw,
                              const std::string& context) {
    CellOutcome out;
    std::string s = util::trim(raw);
    if (s.empty()) return out;
    switch (d.kind) {
        case FeatureKind::numeric: {
            auto v = util::parse_double(s);
            if (!v || !std::isfinite(*v)) {
                out.warning = true;
                out.message = context + ": unparseable " + d.name + " value '" + s +
                              "' treated as missing";
            } else {
                out.value = FeatureValue(*v);
            }
            break;
        }
        case FeatureKind::boolean: {
            auto b = parse_bool_cell(s);
            if (!b) {
                out.warning = true;
                out.message = context + ": unparseable boolean " + d.name + " value '" + s +
                              "' treated as missing";
            } else {
                out.value = FeatureValue(*b);
            }
            break;
        }
        case FeatureKind::categorical:
            out.value = FeatureValue(s);
            break;
    }
    return out;
}

}  // namespace detail

inline json schema_sidecar_json(const Dataset& ds, FileFormat format) {
    json j;
    j["version"] = 1;
    j["format"] = to_string(format);
    j["schema"] = ds.schema;
    j["meta"] = {{"seed", ds.meta.seed}, {"backend", ds.meta.backend}, {"ablation", ds.meta.ablation}};
    return j;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path, FileFormat format) {
    std::string body;
    if (format == FileFormat::csv) {
        csv::Table table;
        table.header = detail::column_order(ds.schema);
        for (const auto& row : ds.rows) {
            std::vector<std::string> cells;
            cells.push_back(row.patient.id);
            for (const auto& d : ds.schema) cells.push_back(detail::cell_for(ds, row, d));
            cells.push_back(row.patient.report);
            for (Lesion l : all_lesions()) cells.push_back(row.patient.labels.at(l) ? "1" : "0");
            table.rows.push_back(std::move(cells));
        }
        body = csv::write(table);
    } else {
        for (const auto& row : ds.rows) {
            json obj;
            obj["id"] = row.patient.id;
            for (const auto& d : ds.schema) {
                auto v = ds.value_of(row, d.name);
                if (v) obj[d.name] = value_to_json(*v);
            }
            obj["report"] = row.patient.report;
            for (Lesion l : all_lesions()) obj[to_string(l)] = row.patient.labels.at(l);
            body += obj.dump();
            body += '\n';
        }
    }
    util::write_file_atomic(path, body);
    util::write_file_atomic(sidecar_path(path), schema_sidecar_json(ds, format).dump(2) + "\n");
}

struct LoadResult {
    Dataset dataset;
    int warnings = 0;
    std::vector<std::string> messages;
};

namespace detail {

struct RowAssembler {
    Dataset& ds;
    LoadResult& result;
    std::set<std::string> seen_ids;

    void warn(CellOutcome& oc) {
        if (oc.warning) {
            result.warnings++;
            result.messages.push_back(oc.message);
        }
    }

    void add_row(const std::string& context, const std::string& id, const std::string& report,
                 const std::map<std::string, std::string>* cells_text,
                 const json* cells_json) {
        if (id.empty()) throw DataError(context + ": empty patient id");
        if (!seen_ids.insert(id).second) throw DataError(context + ": duplicate patient id '" + id + "'");
        DataRow row;
        row.patient.id = id;
        row.patient.report = report;

        auto fetch_text = [&](const std::string& name) -> std::optional<std::string> {
            if (cells_text) {
                auto it = cells_text->find(name);
                if (it == cells_text->end() || it->second.empty()) return std::nullopt;
                return it->second;
            }
            return std::nullopt;
        };
        auto fetch_json = [&](const std::string& name) -> const json* {
            if (cells_json && cells_json->contains(name) && !(*cells_json)[name].is_null())
                return &(*cells_json)[name];
            return nullptr;
        };

        for (const auto& d : ds.schema) {
            std::optional<FeatureValue> value;
            if (cells_text) {
                auto raw = fetch_text(d.name);
                if (raw) {
                    auto oc = parse_cell(d, *raw, context);
                    warn(oc);
                    value = oc.value;
                }
            } else {
                const json* cell = fetch_json(d.name);
                if (cell) {
                    if (d.kind == FeatureKind::numeric) {
                        if (cell->is_number()) {
                            double v = cell->get<double>();
                            if (std::isfinite(v)) value = FeatureValue(v);
                        } else if (cell->is_string()) {
                            auto oc = parse_cell(d, cell->get<std::string>(), context);
                            warn(oc);
                            value = oc.value;
                        } else {
                            throw DataError(context + ": feature " + d.name + " has wrong JSON type");
                        }
                    } else if (d.kind == FeatureKind::boolean) {
                        if (cell->is_boolean()) value = FeatureValue(cell->get<bool>());
                        else if (cell->is_string()) {
                            auto oc = parse_cell(d, cell->get<std::string>(), context);
                            warn(oc);
                            value = oc.value;
                        } else {
                            throw DataError(context + ": feature " + d.name + " has wrong JSON type");
                        }
                    } else {
                        if (!cell->is_string())
                            throw DataError(context + ": feature " + d.name + " has wrong JSON type");
                        value = FeatureValue(cell->get<std::string>());
                    }
                }
            }
            if (!value) continue;

            if (d.name == "age") {
                row.patient.age = std::get<double>(*value);
            } else if (d.name == "gender") {
                auto g = gender_from_string(std::get<std::string>(*value));
                if (!g) throw DataError(context + ": unknown gender '" +
                                        std::get<std::string>(*value) + "'");
                row.patient.gender = *g;
            } else if (auto* slot = vital_slot(row.patient, d.name)) {
                *slot = std::get<double>(*value);
            } else {
                row.values[d.name] = *value;
            }
        }

        for (Lesion l : all_lesions()) {
            std::string name = to_string(l);
            std::optional<bool> label;
            if (cells_text) {
                auto raw = fetch_text(name);
                if (raw) label = parse_bool_cell(*raw);
            } else {
                const json* cell = fetch_json(name);
                if (cell) {
                    if (cell->is_boolean()) label = cell->get<bool>();
                    else if (cell->is_number_integer()) {
                        int v = cell->get<int>();
                        if (v == 0 || v == 1) label = (v == 1);
                    } else if (cell->is_string()) {
                        label = parse_bool_cell(cell->get<std::string>());
                    }
                }
            }
            if (!label) throw DataError(context + ": missing or invalid label '" + name + "'");
            row.patient.labels[l] = *label;
        }

        validate_case(row.patient, context);
        ds.rows.push_back(std::move(row));
    }
};

}  // namespace detail

inline LoadResult load_dataset(const std::filesystem::path& path, FileFormat format) {
    if (!std::filesystem::exists(path))
        throw ArtifactError("dataset file not found: " + path.string());

    LoadResult result;
    Dataset& ds = result.dataset;
    ds.schema = Dataset::original_schema();

    auto sidecar = sidecar_path(path);
    if (std::filesystem::exists(sidecar)) {
        json j = json::parse(util::read_file(sidecar));
        ds.schema = j.at("schema").get<std::vector<FeatureDescriptor>>();
        if (j.contains("meta")) {
            ds.meta.seed = j["meta"].value("seed", std::uint64_t{0});
            ds.meta.backend = j["meta"].value("backend", std::string{});
            ds.meta.ablation = j["meta"].value("ablation", false);
        }
    }

    std::string text = util::read_file(path);
    detail::RowAssembler assembler{ds, result, {}};

    if (format == FileFormat::csv) {
        csv::Table table = csv::parse(text);
        auto expected = detail::column_order(ds.schema);
        if (table.header != expected)
            throw DataError("csv header does not match schema; expected [" +
                            util::join(expected, ",") + "] got [" +
                            util::join(table.header, ",") + "]");
        for (size_t r = 0; r < table.rows.size(); ++r) {
            const auto& cells = table.rows[r];
            std::string context = path.filename().string() + " row " +
                                  std::to_string(table.row_lines[r]);
            if (cells.size() != expected.size())
                throw DataError(context + ": expected " + std::to_string(expected.size()) +
                                " fields, got " + std::to_string(cells.size()));
            std::map<std::string, std::string> named;
            for (size_t c = 0; c < cells.size(); ++c) named[expected[c]] = cells[c];
            assembler.add_row(context, named["id"], named["report"], &named, nullptr);
        }
    } else {
        auto lines = util::split(text, '\n');
        size_t lineno = 0;
        for (const auto& line : lines) {
            ++lineno;
            if (util::trim(line).empty()) continue;
            std::string context = path.filename().string() + " line " + std::to_string(lineno);
            json obj;
            try {
                obj = json::parse(line);
            } catch (const json::exception& e) {
                throw DataError(context + ": invalid JSON: " + e.what());
            }
            if (!obj.is_object()) throw DataError(context + ": record is not a JSON object");
            std::string id = obj.value("id", std::string{});
            std::string report = obj.value("report", std::string{});
            assembler.add_row(context, id, report, nullptr, &obj);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Standardization

struct FeatureStats {
    double mean = 0.0;
    double std = 0.0;  // population (divide-by-N) convention
    bool zero_variance = false;

    bool operator==(const FeatureStats&) const = default;
};

struct StandardizeResult {
    Dataset dataset;
    std::map<std::string, FeatureStats> stats;
};

inline FeatureStats feature_stats(const Dataset& ds, const std::string& name) {
    const auto* d = ds.find_feature(name);
    if (!d) throw DataError("standardize: unknown feature '" + name + "'");
    if (d->kind != FeatureKind::numeric)
        throw DataError("standardize: feature '" + name + "' is not numeric");
    double sum = 0.0;
    size_t n = 0;
    for (const auto& row : ds.rows) {
        if (auto v = ds.numeric_value(row, name)) {
            sum += *v;
            ++n;
        }
    }
    if (n == 0) throw DataError("standardize: feature '" + name + "' has no values");
    FeatureStats st;
    st.mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& row : ds.rows) {
        if (auto v = ds.numeric_value(row, name)) {
            double dlt = *v - st.mean;
            ss += dlt * dlt;
        }
    }
    double var = ss / static_cast<double>(n);
    if (var == 0.0) {
        st.zero_variance = true;
        st.std = 0.0;
    } else {
        st.std = std::sqrt(var);
    }
    return st;
}

inline StandardizeResult standardize(const Dataset& ds, const std::vector<std::string>& names) {
    StandardizeResult out;
    out.dataset = ds;
    for (const auto& name : names) {
        FeatureStats st = feature_stats(ds, name);
        out.stats[name] = st;
        if (st.zero_variance) continue;  // left unscaled, flagged
        for (auto& row : out.dataset.rows) {
            if (auto v = out.dataset.numeric_value(row, name))
                out.dataset.set_numeric(row, name, (*v - st.mean) / st.std);
        }
    }
    return out;
}

inline Dataset destandardize(const Dataset& ds, const std::map<std::string, FeatureStats>& stats) {
    Dataset out = ds;
    for (const auto& [name, st] : stats) {
        if (st.zero_variance) continue;
        for (auto& row : out.rows) {
            if (auto v = out.numeric_value(row, name))
                out.set_numeric(row, name, *v * st.std + st.mean);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Merging generated columns

inline void check_value_kind(const FeatureDescriptor& d, const FeatureValue& v,
                             const std::string& context) {
    bool ok = false;
    switch (d.kind) {
        case FeatureKind::numeric:
            ok = std::holds_alternative<double>(v) && std::isfinite(std::get<double>(v));
            break;
        case FeatureKind::boolean: ok = std::holds_alternative<bool>(v); break;
        case FeatureKind::categorical: ok = std::holds_alternative<std::string>(v); break;
    }
    if (!ok)
        throw DataError(context + ": value for '" + d.name + "' conflicts with declared kind " +
                        to_string(d.kind));
}

// Appends generated columns in sorted-name order. A name collision with an
// existing column keeps the original and stores the addition under
// `<name>__generated`. Never touches existing cells, rows, or row order.
inline Dataset merge_augmented(const Dataset& base,
                               const std::map<std::string, std::map<std::string, FeatureValue>>& additions,
                               std::vector<FeatureDescriptor> new_schema) {
    Dataset out = base;

    std::set<std::string> taken = reserved_column_names();
    for (const auto& d : base.schema) taken.insert(d.name);

    std::sort(new_schema.begin(), new_schema.end(),
              [](const FeatureDescriptor& a, const FeatureDescriptor& b) { return a.name < b.name; });

    std::map<std::string, std::string> final_name;  // declared name -> stored name
    std::set<std::string> new_names;
    for (auto& d : new_schema) {
        if (!valid_feature_name(d.name))
            throw DataError("merge: feature name '" + d.name + "' is not normalized");
        if (!new_names.insert(d.name).second)
            throw DataError("merge: duplicate feature '" + d.name + "' in new schema");
        std::string stored = d.name;
        if (taken.count(stored)) {
            stored = d.name + "__generated";
            if (taken.count(stored))
                throw DataError("merge: collision fallback name '" + stored + "' already in use");
        }
        taken.insert(stored);
        final_name[d.name] = stored;
        FeatureDescriptor added = d;
        added.name = stored;
        out.schema.push_back(added);
    }

    std::map<std::string, size_t> row_index;
    for (size_t i = 0; i < out.rows.size(); ++i) row_index[out.rows[i].patient.id] = i;

    std::map<std::string, const FeatureDescriptor*> by_declared;
    for (const auto& d : new_schema) by_declared[d.name] = &d;

    for (const auto& [pid, cells] : additions) {
        auto it = row_index.find(pid);
        if (it == row_index.end()) throw DataError("merge: unknown patient id '" + pid + "'");
        DataRow& row = out.rows[it->second];
        for (const auto& [name, value] : cells) {
            auto dit = by_declared.find(name);
            if (dit == by_declared.end())
                throw DataError("merge: value for undeclared feature '" + name + "'");
            check_value_kind(*dit->second, value, "patient " + pid);
            row.values[final_name.at(name)] = value;
        }
    }
    return out;
}

}  // namespace dallm::core
