#pragma once

// Knowledge ingestion: per-lesion document retrieval from Wikipedia and
// Radiopaedia search (live, opt-in) or from an offline fixture corpus, plus
// the on-disk corpus format consumed by the index builder. All tests run on
// fixture corpora; live fetching is exercised only by the smoke path.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dallm/core.hpp"
#include "dallm/util.hpp"

namespace dallm::ingest {

using json = nlohmann::json;
using core::Lesion;

enum class Source { wikipedia, radiopaedia, fixture };
enum class Scope { top_one, first_page };

inline std::string to_string(Source s) {
    switch (s) {
        case Source::wikipedia: return "wikipedia";
        case Source::radiopaedia: return "radiopaedia";
        case Source::fixture: return "fixture";
    }
    throw Error(ErrorKind::internal, "bad source");
}

inline std::optional<Source> source_from_string(std::string_view s) {
    if (s == "wikipedia") return Source::wikipedia;
    if (s == "radiopaedia") return Source::radiopaedia;
    if (s == "fixture") return Source::fixture;
    return std::nullopt;
}

inline std::string to_string(Scope s) {
    return s == Scope::top_one ? "top_one" : "first_page";
}

inline std::optional<Scope> scope_from_string(std::string_view s) {
    if (s == "top_one") return Scope::top_one;
    if (s == "first_page") return Scope::first_page;
    return std::nullopt;
}

struct SourceQuery {
    Source source = Source::fixture;
    std::string term;
    Scope scope = Scope::first_page;
};

struct RawDocument {
    Source source = Source::fixture;
    std::string term;
    std::string title;
    std::string url_or_id;
    std::string body;
    std::string retrieved_at;  // ISO timestamp for live fetches, empty for fixtures

    bool operator==(const RawDocument&) const = default;
};

struct IngestConfig {
    std::filesystem::path fixture_corpus_root;
    size_t first_page_cap = 25;       // documented cap on "first result page"
    int rate_limit_ms = 500;          // polite delay between live requests
    int http_timeout_s = 15;
    unsigned workers = 2;             // parallelism bound across lesions
};

// ---------------------------------------------------------------------------
// HTML stripping
//
// Rule set (the sources say nothing about cleaning, so it is pinned here):
//   1. <script>/<style>/<head>/<nav>/<footer> blocks and <!-- comments --> are
//      removed with their content.
//   2. Block-level closing tags and <br> become newlines; all remaining
//      well-formed tags are dropped.
//   3. A small fixed entity set is decoded (&amp; &quot; &#39; &apos; &nbsp;
//      &lt; &gt;). Decoding is single-pass: double-encoded entities lose one
//      level per pass.
//   4. Whitespace is collapsed: runs of spaces/tabs to one space, 3+ newlines
//      to a blank line, trailing space trimmed.

namespace detail {

inline void erase_blocks(std::string& s, const std::string& open_prefix,
                         const std::string& close_tag) {
    std::string lower = util::to_lower(s);
    size_t pos = 0;
    std::string result;
    while (pos < s.size()) {
        size_t start = lower.find(open_prefix, pos);
        if (start == std::string::npos) {
            result += s.substr(pos);
            break;
        }
        result += s.substr(pos, start - pos);
        size_t end = lower.find(close_tag, start);
        if (end == std::string::npos) {
            pos = s.size();
            break;
        }
        pos = end + close_tag.size();
    }
    s = std::move(result);
}

inline bool tag_start(const std::string& s, size_t i) {
    if (s[i] != '<' || i + 1 >= s.size()) return false;
    char c = s[i + 1];
    return std::isalpha(static_cast<unsigned char>(c)) || c == '/' || c == '!';
}

}  // namespace detail

inline std::string strip_html(const std::string& html) {
    std::string s = util::normalize_newlines(html);

    for (const char* block : {"script", "style", "head", "nav", "footer"}) {
        detail::erase_blocks(s, std::string("<") + block, std::string("</") + block + ">");
    }
    // comments
    {
        size_t pos;
        while ((pos = s.find("<!--")) != std::string::npos) {
            size_t end = s.find("-->", pos);
            if (end == std::string::npos) {
                s.erase(pos);
                break;
            }
            s.erase(pos, end + 3 - pos);
        }
    }

    std::string text;
    text.reserve(s.size());
    static const std::set<std::string> newline_tags = {"p", "div", "li", "ul", "ol",  "tr",
                                                       "h1", "h2",  "h3", "h4", "br", "table"};
    for (size_t i = 0; i < s.size();) {
        if (detail::tag_start(s, i)) {
            size_t end = s.find('>', i);
            if (end == std::string::npos) break;
            std::string tag = util::to_lower(s.substr(i + 1, end - i - 1));
            if (!tag.empty() && tag[0] == '/') tag = tag.substr(1);
            size_t name_end = 0;
            while (name_end < tag.size() && std::isalnum(static_cast<unsigned char>(tag[name_end])))
                ++name_end;
            if (newline_tags.count(tag.substr(0, name_end))) text += '\n';
            i = end + 1;
        } else {
            text += s[i];
            ++i;
        }
    }

    static const std::vector<std::pair<std::string, std::string>> entities = {
        {"&nbsp;", " "}, {"&quot;", "\""}, {"&#39;", "'"}, {"&apos;", "'"},
        {"&lt;", "<"},   {"&gt;", ">"},    {"&amp;", "&"},
    };
    for (const auto& [from, to] : entities) text = util::replace_all(text, from, to);

    // collapse whitespace
    std::string out;
    out.reserve(text.size());
    int pending_newlines = 0;
    bool pending_space = false;
    for (char c : text) {
        if (c == '\n') {
            ++pending_newlines;
            pending_space = false;
        } else if (c == ' ' || c == '\t') {
            pending_space = true;
        } else {
            if (!out.empty()) {
                if (pending_newlines > 0) out += pending_newlines >= 2 ? "\n\n" : "\n";
                else if (pending_space) out += ' ';
            }
            pending_newlines = 0;
            pending_space = false;
            out += c;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fixture source

inline std::string slugify(std::string_view term) {
    std::string out;
    for (char ch : term) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) out += static_cast<char>(std::tolower(c));
        else if (!out.empty() && out.back() != '_') out += '_';
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

namespace detail {

inline std::vector<RawDocument> fetch_fixture(const SourceQuery& query, const IngestConfig& cfg,
                                              std::vector<std::string>* warnings) {
    if (cfg.fixture_corpus_root.empty())
        throw ConfigError("fixture source requires a corpus path in config");
    auto dir = cfg.fixture_corpus_root / slugify(query.term);
    std::vector<RawDocument> docs;
    if (!std::filesystem::is_directory(dir)) return docs;  // empty result, not an error

    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".txt")
            files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        RawDocument doc;
        doc.source = Source::fixture;
        doc.term = query.term;
        doc.url_or_id = file.stem().string();
        doc.title = doc.url_or_id;
        doc.body = util::normalize_newlines(util::read_file(file));
        if (util::trim(doc.body).empty()) {
            if (warnings)
                warnings->push_back("fixture document " + file.string() + " is empty, skipped");
            continue;
        }
        auto sidecar = file;
        sidecar.replace_extension(".json");
        if (std::filesystem::exists(sidecar)) {
            try {
                json meta = json::parse(util::read_file(sidecar));
                doc.title = meta.value("title", doc.title);
            } catch (const json::exception& e) {
                if (warnings)
                    warnings->push_back("fixture sidecar " + sidecar.string() +
                                        " unparseable, ignored: " + e.what());
            }
        }
        docs.push_back(std::move(doc));
        if (query.scope == Scope::top_one) break;
    }
    return docs;
}

inline std::string url_encode(std::string_view s) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') out += static_cast<char>(c);
        else {
            out += '%';
            out += hex[c >> 4];
            out += hex[c & 0xf];
        }
    }
    return out;
}

inline std::string iso_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string http_get(const std::string& host, const std::string& path, int timeout_s) {
    httplib::Client client(host);
    client.set_connection_timeout(timeout_s);
    client.set_read_timeout(timeout_s);
    client.set_follow_location(true);
    client.set_default_headers({{"User-Agent", "dallm-ingest/1.0 (research pipeline)"}});
    auto res = client.Get(path);
    if (!res)
        throw BackendError("network unreachable: GET " + host + path + " (" +
                               httplib::to_string(res.error()) + ")",
                           /*retryable=*/true);
    if (res->status != 200)
        throw BackendError("GET " + host + path + " -> HTTP " + std::to_string(res->status));
    return res->body;
}

// Hrefs of the form /articles/<slug>, in page order, deduplicated.
inline std::vector<std::string> extract_article_links(const std::string& html) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    size_t pos = 0;
    const std::string needle = "href=\"/articles/";
    while ((pos = html.find(needle, pos)) != std::string::npos) {
        size_t start = pos + 6;  // after href="
        size_t end = html.find('"', start);
        if (end == std::string::npos) break;
        std::string link = html.substr(start, end - start);
        pos = end;
        if (link.find('?') != std::string::npos) link = link.substr(0, link.find('?'));
        if (seen.insert(link).second) out.push_back(link);
    }
    return out;
}

inline std::vector<RawDocument> fetch_live(const SourceQuery& query, const IngestConfig& cfg,
                                           std::vector<std::string>* warnings) {
    std::vector<RawDocument> docs;
    size_t want = query.scope == Scope::top_one ? 1 : cfg.first_page_cap;
    auto polite_pause = [&] {
        if (cfg.rate_limit_ms > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(cfg.rate_limit_ms));
    };

    if (query.source == Source::wikipedia) {
        const std::string host = "https://en.wikipedia.org";
        std::string search_path = "/w/api.php?action=opensearch&format=json&limit=" +
                                  std::to_string(want) + "&search=" + url_encode(query.term);
        json hits;
        try {
            hits = json::parse(http_get(host, search_path, cfg.http_timeout_s));
        } catch (const json::exception& e) {
            throw BackendError(std::string("wikipedia search response unparseable: ") + e.what());
        }
        if (!hits.is_array() || hits.size() < 4 || !hits[1].is_array()) return docs;
        for (const auto& title_j : hits[1]) {
            if (docs.size() >= want) break;
            std::string title = title_j.get<std::string>();
            polite_pause();
            try {
                std::string page = http_get(
                    host, "/api/rest_v1/page/html/" + url_encode(util::replace_all(title, " ", "_")),
                    cfg.http_timeout_s);
                RawDocument doc;
                doc.source = Source::wikipedia;
                doc.term = query.term;
                doc.title = title;
                doc.url_or_id = host + "/wiki/" + url_encode(util::replace_all(title, " ", "_"));
                doc.body = strip_html(page);
                doc.retrieved_at = iso_now();
                if (util::trim(doc.body).empty()) throw DataError("empty after stripping");
                docs.push_back(std::move(doc));
            } catch (const std::exception& e) {
                if (warnings)
                    warnings->push_back("wikipedia page '" + title + "' skipped: " + e.what());
            }
        }
        return docs;
    }

    // Radiopaedia: scrape the first search result page for article links.
    const std::string host = "https://radiopaedia.org";
    std::string html =
        http_get(host, "/search?scope=articles&q=" + url_encode(query.term), cfg.http_timeout_s);
    auto links = extract_article_links(html);
    for (const auto& link : links) {
        if (docs.size() >= want) break;
        polite_pause();
        try {
            std::string page = http_get(host, link, cfg.http_timeout_s);
            RawDocument doc;
            doc.source = Source::radiopaedia;
            doc.term = query.term;
            doc.title = link.substr(link.rfind('/') + 1);
            doc.url_or_id = host + link;
            doc.body = strip_html(page);
            doc.retrieved_at = iso_now();
            if (util::trim(doc.body).empty()) throw DataError("empty after stripping");
            docs.push_back(std::move(doc));
        } catch (const std::exception& e) {
            if (warnings) warnings->push_back("radiopaedia page '" + link + "' skipped: " + e.what());
        }
    }
    return docs;
}

}  // namespace detail

// Fetch documents for one (source, term, scope) query. top_one returns at
// most one document; first_page preserves the source's result order up to the
// configured cap. Empty results are not errors.
inline std::vector<RawDocument> fetch_documents(const SourceQuery& query, const IngestConfig& cfg,
                                                std::vector<std::string>* warnings = nullptr) {
    if (util::trim(query.term).empty()) throw ConfigError("fetch_documents: empty search term");
    if (query.source == Source::fixture) return detail::fetch_fixture(query, cfg, warnings);
    return detail::fetch_live(query, cfg, warnings);
}

// ---------------------------------------------------------------------------
// Corpus building and persistence

using Corpus = std::map<Lesion, std::vector<RawDocument>>;

struct CorpusBuildResult {
    Corpus corpus;
    std::vector<std::string> warnings;
};

// Runs every source query template for every lesion (term = lesion name). A
// source failure is recorded as a warning; the build fails only when a lesion
// ends with zero documents across all sources.
inline CorpusBuildResult build_corpus(const std::vector<Lesion>& lesions,
                                      const std::vector<SourceQuery>& source_templates,
                                      const IngestConfig& cfg) {
    if (source_templates.empty()) throw ConfigError("build_corpus: no sources configured");
    CorpusBuildResult result;
    std::vector<std::vector<RawDocument>> per_lesion(lesions.size());
    std::vector<std::vector<std::string>> per_warnings(lesions.size());

    util::parallel_for(lesions.size(), cfg.workers, [&](size_t i) {
        Lesion lesion = lesions[i];
        std::set<std::pair<Source, std::string>> seen;
        for (const auto& tmpl : source_templates) {
            SourceQuery q = tmpl;
            q.term = core::lesion_term(lesion);
            std::vector<RawDocument> docs;
            try {
                docs = fetch_documents(q, cfg, &per_warnings[i]);
            } catch (const std::exception& e) {
                per_warnings[i].push_back("source " + to_string(q.source) + " failed for lesion " +
                                          core::to_string(lesion) + ": " + e.what());
                continue;
            }
            if (docs.empty()) {
                per_warnings[i].push_back("source " + to_string(q.source) +
                                          " returned no documents for lesion " +
                                          core::to_string(lesion));
                continue;
            }
            for (auto& doc : docs) {
                if (!seen.insert({doc.source, doc.url_or_id}).second) {
                    per_warnings[i].push_back("duplicate document " + doc.url_or_id +
                                              " for lesion " + core::to_string(lesion) +
                                              ", kept first");
                    continue;
                }
                per_lesion[i].push_back(std::move(doc));
            }
        }
    });

    for (size_t i = 0; i < lesions.size(); ++i) {
        for (auto& w : per_warnings[i]) result.warnings.push_back(std::move(w));
        if (per_lesion[i].empty())
            throw DataError("build_corpus: no documents for lesion " +
                            core::to_string(lesions[i]) + " across all sources");
        result.corpus[lesions[i]] = std::move(per_lesion[i]);
    }
    return result;
}

// On-disk layout: one directory per lesion; per document a text file plus a
// JSON metadata sidecar. Rank prefixes keep the retrieval order stable.
inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    for (const auto& [lesion, docs] : corpus) {
        auto lesion_dir = dir / core::to_string(lesion);
        util::ensure_dir(lesion_dir);
        for (size_t i = 0; i < docs.size(); ++i) {
            const auto& doc = docs[i];
            char rank[8];
            std::snprintf(rank, sizeof(rank), "%03zu", i);
            std::string base = std::string(rank) + "_" + slugify(doc.url_or_id);
            util::write_file_atomic(lesion_dir / (base + ".txt"), doc.body);
            json meta = {{"source", to_string(doc.source)},   {"term", doc.term},
                         {"title", doc.title},                {"url_or_id", doc.url_or_id},
                         {"retrieved_at", doc.retrieved_at}};
            util::write_file_atomic(lesion_dir / (base + ".meta.json"), meta.dump(2) + "\n");
        }
    }
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
        throw ArtifactError("corpus directory not found: " + dir.string());
    Corpus corpus;
    for (Lesion lesion : core::all_lesions()) {
        auto lesion_dir = dir / core::to_string(lesion);
        if (!std::filesystem::is_directory(lesion_dir)) continue;
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(lesion_dir))
            if (entry.is_regular_file() && entry.path().extension() == ".txt")
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        std::vector<RawDocument> docs;
        for (const auto& file : files) {
            RawDocument doc;
            doc.body = util::read_file(file);
            auto meta_path = file;
            meta_path.replace_extension(".meta.json");
            if (!std::filesystem::exists(meta_path))
                throw ArtifactError("corpus document missing metadata sidecar: " + file.string());
            json meta = json::parse(util::read_file(meta_path));
            auto source = source_from_string(meta.value("source", ""));
            if (!source) throw ArtifactError("corpus sidecar has unknown source: " + meta_path.string());
            doc.source = *source;
            doc.term = meta.value("term", "");
            doc.title = meta.value("title", "");
            doc.url_or_id = meta.value("url_or_id", "");
            doc.retrieved_at = meta.value("retrieved_at", "");
            docs.push_back(std::move(doc));
        }
        if (!docs.empty()) corpus[lesion] = std::move(docs);
    }
    if (corpus.empty()) throw ArtifactError("corpus directory has no documents: " + dir.string());
    return corpus;
}

}  // namespace dallm::ingest
