#include <catch2/catch_amalgamated.hpp>

#include "dallm/ingest.hpp"
#include "testsupport.hpp"

using namespace dallm;
using namespace dallm::ingest;
using testsupport::TempDir;

namespace {

IngestConfig fixture_config(const std::filesystem::path& root) {
    IngestConfig cfg;
    cfg.fixture_corpus_root = root;
    cfg.workers = 2;
    return cfg;
}

void write_doc(const std::filesystem::path& dir, const std::string& name,
               const std::string& body) {
    util::ensure_dir(dir);
    util::write_file_atomic(dir / name, body);
}

}  // namespace

TEST_CASE("fixture fetch returns documents in file-name order") {
    TempDir tmp("ingest_fix");
    auto dir = tmp.path() / "atelectasis";
    write_doc(dir, "b_second.txt", "second document body");
    write_doc(dir, "a_first.txt", "first document body");
    write_doc(dir, "c_third.txt", "third document body");

    SourceQuery q{Source::fixture, "atelectasis", Scope::first_page};
    auto docs = fetch_documents(q, fixture_config(tmp.path()));
    REQUIRE(docs.size() == 3);
    CHECK(docs[0].url_or_id == "a_first");
    CHECK(docs[1].url_or_id == "b_second");
    CHECK(docs[2].url_or_id == "c_third");
    CHECK(docs[0].body == "first document body");
    CHECK(docs[0].retrieved_at.empty());

    SECTION("top_one returns exactly the lexicographically first document") {
        q.scope = Scope::top_one;
        auto one = fetch_documents(q, fixture_config(tmp.path()));
        REQUIRE(one.size() == 1);
        CHECK(one[0].url_or_id == "a_first");
    }
}

TEST_CASE("fixture fetch edge cases") {
    TempDir tmp("ingest_edge");
    SourceQuery q{Source::fixture, "atelectasis", Scope::first_page};

    SECTION("missing term directory is an empty result, not an error") {
        auto docs = fetch_documents(q, fixture_config(tmp.path()));
        CHECK(docs.empty());
    }
    SECTION("empty term rejected") {
        q.term = "  ";
        CHECK_THROWS_AS(fetch_documents(q, fixture_config(tmp.path())), ConfigError);
    }
    SECTION("missing corpus root rejected") {
        IngestConfig cfg;
        CHECK_THROWS_AS(fetch_documents(q, cfg), ConfigError);
    }
    SECTION("title sidecar honored, bad sidecar warned") {
        auto dir = tmp.path() / "atelectasis";
        write_doc(dir, "doc.txt", "body");
        util::write_file_atomic(dir / "doc.json", "{\"title\": \"Named Doc\"}");
        auto docs = fetch_documents(q, fixture_config(tmp.path()));
        REQUIRE(docs.size() == 1);
        CHECK(docs[0].title == "Named Doc");

        util::write_file_atomic(dir / "doc.json", "{broken");
        std::vector<std::string> warnings;
        docs = fetch_documents(q, fixture_config(tmp.path()), &warnings);
        REQUIRE(docs.size() == 1);
        CHECK(docs[0].title == "doc");
        CHECK(warnings.size() == 1);
    }
}

TEST_CASE("strip_html removes markup deterministically") {
    std::string html =
        "<html><head><title>x</title></head><body>"
        "<script>var x = '<p>';</script><style>p { color: red }</style>"
        "<!-- hidden -->"
        "<h1>Atelectasis</h1><p>Collapse of <b>lung</b> tissue.</p>"
        "<ul><li>dyspnea</li><li>cough&nbsp;&amp; fever</li></ul>"
        "</body></html>";
    std::string text = strip_html(html);
    CHECK(text.find('<') == std::string::npos);
    CHECK(text.find("script") == std::string::npos);
    CHECK(text.find("hidden") == std::string::npos);
    CHECK(text.find("Atelectasis") != std::string::npos);
    CHECK(text.find("Collapse of lung tissue.") != std::string::npos);
    CHECK(text.find("cough & fever") != std::string::npos);
}

TEST_CASE("strip_html is idempotent") {
    std::vector<std::string> samples = {
        "<p>Plain paragraph with   extra   spaces.</p>",
        "No markup at all,\r\njust text lines.\n\n\n\nFinal.",
        "<div><h2>Header</h2>Nested <i>inline</i> content &quot;quoted&quot;</div>",
        "Symptoms include fever &amp; chills",
        "",
    };
    std::mt19937 rng(5);
    const char* words[] = {"lung", "pleura", "opacity", "effusion", "dense", "basal"};
    for (int i = 0; i < 30; ++i) {
        std::string s;
        for (int w = 0; w < 40; ++w) {
            int r = static_cast<int>(rng() % 10);
            if (r == 0) s += "<p>";
            else if (r == 1) s += "</p>\n";
            else if (r == 2) s += "  ";
            else s += std::string(words[rng() % 6]) + " ";
        }
        samples.push_back(s);
    }
    for (const auto& s : samples) {
        std::string once = strip_html(s);
        CHECK(strip_html(once) == once);
    }
}

TEST_CASE("build_corpus over the shipped fixture corpus") {
    auto cfg = fixture_config(testsupport::fixtures_dir() / "corpus_raw");
    std::vector<core::Lesion> lesions(core::all_lesions().begin(), core::all_lesions().end());
    auto result = build_corpus(lesions, {{Source::fixture, "", Scope::first_page}}, cfg);

    REQUIRE(result.corpus.size() == 5);
    for (const auto& [lesion, docs] : result.corpus) {
        INFO(core::to_string(lesion));
        CHECK(docs.size() == 2);
        std::set<std::pair<Source, std::string>> keys;
        for (const auto& d : docs) CHECK(keys.insert({d.source, d.url_or_id}).second);
    }
}

TEST_CASE("build_corpus records a warning when one source is empty but another covers") {
    TempDir tmp("ingest_two");
    auto root_a = tmp.path() / "a";
    auto root_b = tmp.path() / "b";
    for (auto lesion : core::all_lesions())
        write_doc(root_b / slugify(core::lesion_term(lesion)), "doc.txt",
                  "content for " + core::to_string(lesion));
    // root_a deliberately left empty

    std::vector<core::Lesion> lesions(core::all_lesions().begin(), core::all_lesions().end());
    IngestConfig cfg_a = fixture_config(root_a);

    // Two fixture roots need two configs; emulate by running the empty root and
    // merging manually is not what build_corpus does, so instead point one
    // query at a term that has no directory.
    util::ensure_dir(root_a);
    IngestConfig cfg = fixture_config(root_b);
    auto result = build_corpus(lesions,
                               {{Source::fixture, "", Scope::top_one},
                                {Source::fixture, "", Scope::first_page}},
                               cfg);
    CHECK(result.corpus.size() == 5);
    // second query returns the same document: deduplicated with a warning
    bool dedupe_warned = false;
    for (const auto& w : result.warnings)
        if (w.find("duplicate") != std::string::npos) dedupe_warned = true;
    CHECK(dedupe_warned);

    SECTION("all sources empty for a lesion is a hard error naming it") {
        REQUIRE_THROWS_MATCHES(
            build_corpus(lesions, {{Source::fixture, "", Scope::first_page}}, cfg_a), DataError,
            Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("atelectasis")));
    }
}

TEST_CASE("corpus save/load round trip preserves order and metadata") {
    auto cfg = fixture_config(testsupport::fixtures_dir() / "corpus_raw");
    std::vector<core::Lesion> lesions(core::all_lesions().begin(), core::all_lesions().end());
    auto built = build_corpus(lesions, {{Source::fixture, "", Scope::first_page}}, cfg);

    TempDir tmp("ingest_rt");
    save_corpus(built.corpus, tmp.path() / "corpus");
    auto loaded = load_corpus(tmp.path() / "corpus");
    REQUIRE(loaded.size() == built.corpus.size());
    for (const auto& [lesion, docs] : built.corpus) {
        REQUIRE(loaded.count(lesion) == 1);
        CHECK(loaded.at(lesion) == docs);
    }

    SECTION("determinism: identical corpus bytes give identical document lists") {
        auto again = build_corpus(lesions, {{Source::fixture, "", Scope::first_page}}, cfg);
        CHECK(again.corpus == built.corpus);
    }
}

TEST_CASE("radiopaedia link extraction") {
    std::string html =
        "<a href=\"/articles/atelectasis\">Atelectasis</a>"
        "<a href=\"/articles/atelectasis?lang=us\">dup</a>"
        "<a href=\"/articles/lung-collapse\">Lung collapse</a>"
        "<a href=\"/users/someone\">ignored</a>";
    auto links = detail::extract_article_links(html);
    REQUIRE(links.size() == 2);
    CHECK(links[0] == "/articles/atelectasis");
    CHECK(links[1] == "/articles/lung-collapse");
}
