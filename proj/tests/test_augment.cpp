#include <catch2/catch_amalgamated.hpp>

#include "dallm/augment.hpp"
#include "dallm/ingest.hpp"
#include "testsupport.hpp"

using namespace dallm;
using namespace dallm::augment;
using core::FeatureDescriptor;
using core::FeatureKind;
using core::Lesion;
using testsupport::LambdaBackend;
using testsupport::TempDir;

namespace {

kstore::VectorIndex fixture_index() {
    ingest::IngestConfig cfg;
    cfg.fixture_corpus_root = testsupport::fixtures_dir() / "corpus_raw";
    std::vector<Lesion> lesions(core::all_lesions().begin(), core::all_lesions().end());
    auto built = ingest::build_corpus(
        lesions, {{ingest::Source::fixture, "", ingest::Scope::first_page}}, cfg);
    return kstore::build_index(built.corpus, std::make_shared<kstore::LocalHashEmbedder>(), 64, 8);
}

prompts::PromptLibrary library() {
    return prompts::PromptLibrary(testsupport::templates_dir());
}

llm::Client lambda_client(std::function<std::string(const std::string&)> fn) {
    return llm::Client(std::make_shared<LambdaBackend>(std::move(fn)), llm::CacheMode::live);
}

std::string lesion_answer_backend(const std::string& prompt) {
    for (Lesion l : core::all_lesions()) {
        if (prompt.find(core::lesion_term(l)) != std::string::npos)
            return "Answer about " + core::lesion_term(l) + ".";
    }
    return "Generic answer.";
}

std::vector<Lesion> all_lesions_vec() {
    return {core::all_lesions().begin(), core::all_lesions().end()};
}

}  // namespace

TEST_CASE("build_ack produces 7 entries per lesion, 35 total") {
    auto index = fixture_index();
    auto lib = library();
    auto client = lambda_client(lesion_answer_backend);

    auto ack = build_ack(index, all_lesions_vec(), 3, client, lib, llm::GenerationConfig{});
    REQUIRE(ack.entries.size() == 5);
    size_t total = 0;
    for (const auto& [lesion, list] : ack.entries) {
        CHECK(list.size() == 7);
        total += list.size();
        for (const auto& e : list) {
            CHECK(!e.evidence.empty());
            CHECK(!e.answer.empty());
            CHECK(!e.fingerprint.empty());
            CHECK(e.lesion == lesion);
        }
    }
    CHECK(total == 35);

    SECTION("serialization round-trips and reruns byte-identically") {
        TempDir tmp("ack");
        ack.save(tmp.path() / "ack.json");
        auto loaded = Ack::load(tmp.path() / "ack.json");
        CHECK(loaded == ack);

        auto client2 = lambda_client(lesion_answer_backend);
        auto again = build_ack(index, all_lesions_vec(), 3, client2, lib, llm::GenerationConfig{});
        again.save(tmp.path() / "ack2.json");
        CHECK(util::read_file(tmp.path() / "ack.json") == util::read_file(tmp.path() / "ack2.json"));
    }
}

TEST_CASE("build_ack names the lesion with an empty partition") {
    // corpus covering only two lesions
    ingest::IngestConfig cfg;
    cfg.fixture_corpus_root = testsupport::fixtures_dir() / "corpus_raw";
    auto built = ingest::build_corpus({Lesion::atelectasis, Lesion::consolidation},
                                      {{ingest::Source::fixture, "", ingest::Scope::first_page}},
                                      cfg);
    auto index =
        kstore::build_index(built.corpus, std::make_shared<kstore::LocalHashEmbedder>(), 64, 8);
    auto lib = library();
    auto client = lambda_client(lesion_answer_backend);

    REQUIRE_THROWS_MATCHES(
        build_ack(index, all_lesions_vec(), 3, client, lib, llm::GenerationConfig{}), DataError,
        Catch::Matchers::MessageMatches(
            Catch::Matchers::ContainsSubstring("enlarged_cardiac_silhouette")));
}

TEST_CASE("build_ack propagates cache misses naming lesion and question") {
    auto index = fixture_index();
    auto lib = library();
    TempDir tmp("ack_replay");
    llm::Client replay(nullptr, llm::CacheMode::strict_replay, tmp.path());

    try {
        build_ack(index, all_lesions_vec(), 3, replay, lib, llm::GenerationConfig{});
        FAIL("expected cache-miss error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::backend);
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("atelectasis"));
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("question 1"));
        CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("cache miss"));
    }
}

TEST_CASE("discover_features unions per-lesion results") {
    Ack ack;
    for (Lesion l : {Lesion::atelectasis, Lesion::consolidation}) {
        std::vector<prompts::AckEntry> list;
        for (int q = 1; q <= 7; ++q)
            list.push_back({l, q, {"c"}, "knowledge about " + core::lesion_term(l), "fp"});
        ack.entries[l] = list;
    }
    auto shots = prompts::load_shots(testsupport::fixtures_dir() / "shots/discovery_shots.json");
    auto lib = library();

    auto client = lambda_client([](const std::string& prompt) -> std::string {
        if (prompt.find("knowledge about atelectasis") != std::string::npos)
            return R"([{"name":"dyspnea","kind":"boolean"},{"name":"cough","kind":"boolean"}])";
        return R"([{"name":"cough","kind":"boolean"},{"name":"edema","kind":"boolean"}])";
    });
    auto result = discover_features(ack, shots, client, lib, llm::GenerationConfig{});
    REQUIRE(result.features.size() == 3);  // union of {dyspnea, cough} and {cough, edema}
    CHECK(result.features[0].name == "dyspnea");
    CHECK(result.features[1].name == "cough");
    CHECK(result.features[2].name == "edema");
    CHECK(result.fingerprints.size() == 2);

    SECTION("zero-feature discovery is a hard error") {
        auto bad = lambda_client([](const std::string&) { return std::string("nothing here"); });
        CHECK_THROWS_AS(discover_features(ack, shots, bad, lib, llm::GenerationConfig{}), Error);
    }
}

TEST_CASE("apply_expert_curation") {
    TempDir tmp("curation");
    std::vector<FeatureDescriptor> features;
    for (int i = 0; i < 78; ++i)
        features.push_back({"feature_" + std::to_string(i), FeatureKind::numeric, std::nullopt,
                            core::Provenance::llm_discovered});

    SECTION("adding 13 expert features to 78 yields 91") {
        nlohmann::json actions = nlohmann::json::array();
        for (int i = 0; i < 13; ++i)
            actions.push_back({{"action", "add"},
                               {"descriptor",
                                {{"name", "Expert Feature " + std::to_string(i)},
                                 {"kind", "boolean"},
                                 {"provenance", "expert_added"}}}});
        auto path = tmp.path() / "curation.json";
        util::write_file_atomic(path, actions.dump(2));
        auto curated = apply_expert_curation(features, path);
        REQUIRE(curated.size() == 91);
        for (size_t i = 78; i < 91; ++i) {
            CHECK(curated[i].provenance == core::Provenance::expert_added);
            CHECK(core::valid_feature_name(curated[i].name));
        }
    }
    SECTION("empty curation file is identity") {
        auto path = tmp.path() / "empty.json";
        util::write_file_atomic(path, "[]");
        CHECK(apply_expert_curation(features, path) == features);
    }
    SECTION("remove and rename honored") {
        nlohmann::json actions = {
            {{"action", "remove"}, {"name", "feature_0"}},
            {{"action", "rename"}, {"from", "feature_1"}, {"to", "renamed_feature"}}};
        auto path = tmp.path() / "c.json";
        util::write_file_atomic(path, actions.dump());
        auto curated = apply_expert_curation(features, path);
        REQUIRE(curated.size() == 77);
        CHECK(curated[0].name == "renamed_feature");
    }
    SECTION("error paths") {
        nlohmann::json bad1 = {{{"action", "remove"}, {"name", "ghost"}}};
        auto p1 = tmp.path() / "b1.json";
        util::write_file_atomic(p1, bad1.dump());
        CHECK_THROWS_AS(apply_expert_curation(features, p1), DataError);

        nlohmann::json bad2 = {{{"action", "rename"}, {"from", "feature_2"}, {"to", "feature_3"}}};
        auto p2 = tmp.path() / "b2.json";
        util::write_file_atomic(p2, bad2.dump());
        CHECK_THROWS_AS(apply_expert_curation(features, p2), DataError);

        CHECK_THROWS_AS(apply_expert_curation(features, tmp.path() / "missing.json"),
                        ArtifactError);
    }
}

TEST_CASE("generate_values lands scripted values and records provenance") {
    auto index = fixture_index();
    auto lib = library();
    auto dataset = testsupport::make_small_dataset();
    auto client = lambda_client(lesion_answer_backend);
    auto ack = build_ack(index, all_lesions_vec(), 3, client, lib, llm::GenerationConfig{});

    std::vector<FeatureDescriptor> features = {
        {"dyspnea", FeatureKind::boolean, std::nullopt, core::Provenance::llm_discovered},
        {"bnp", FeatureKind::numeric, "pg/mL", core::Provenance::llm_discovered},
    };

    auto value_backend = [](const std::string& prompt) -> std::string {
        if (prompt.find("Bibasilar opacities") != std::string::npos)
            return R"({"dyspnea": true, "bnp": 150.5})";
        if (prompt.find("Right lower lobe consolidation") != std::string::npos)
            return R"({"dyspnea": false, "bnp": "unknown"})";
        return R"({"dyspnea": "no", "bnp": 42})";
    };
    auto vclient = lambda_client(value_backend);
    GenerateOptions options;
    options.k = 2;
    auto out = generate_values(dataset, features, ack, index, vclient, lib, options);

    REQUIRE(out.failed_ids.empty());
    REQUIRE(out.values.size() == 3);
    CHECK(std::get<bool>(out.values.at("p1").at("dyspnea")) == true);
    CHECK(std::get<double>(out.values.at("p1").at("bnp")) == 150.5);
    CHECK(out.values.at("p2").count("bnp") == 0);  // unknown stays missing
    CHECK(std::get<double>(out.values.at("p3").at("bnp")) == 42.0);
    for (const auto& [pid, fp] : out.fingerprints) CHECK(fp.size() == 64);

    SECTION("worker count does not change the result") {
        GenerateOptions serial = options;
        serial.workers = 1;
        GenerateOptions wide = options;
        wide.workers = 8;
        auto a = generate_values(dataset, features, ack, index, vclient, lib, serial);
        auto b = generate_values(dataset, features, ack, index, vclient, lib, wide);
        CHECK(a.values == b.values);
        CHECK(a.prompts == b.prompts);
        CHECK(a.fingerprints == b.fingerprints);
    }

    SECTION("all-negative patient draws evidence from all partitions and succeeds") {
        // p3 has no positive labels; its prompt saw evidence and parsed fine
        REQUIRE(out.prompts.count("p3") == 1);
        CHECK(out.prompts.at("p3").find("(no retrieved context)") == std::string::npos);
        CHECK(out.values.at("p3").size() == 2);
    }

    SECTION("ablation prompts lack the ACK block") {
        GenerateOptions ablated = options;
        ablated.ablation = true;
        auto ab = generate_values(dataset, features, ack, index, vclient, lib, ablated);
        for (const auto& [pid, prompt] : ab.prompts) {
            CHECK(prompt.find("Clinical knowledge") == std::string::npos);
            // removing the ACK block from the non-ablated prompt gives this one
            const auto& full = out.prompts.at(pid);
            auto block_start = full.find("Clinical knowledge");
            REQUIRE(block_start != std::string::npos);
            auto block_end = full.find("Features to generate");
            std::string removed = full.substr(0, block_start) + full.substr(block_end);
            CHECK(removed == prompt);
        }
    }
}

TEST_CASE("generate_values failure-rate threshold") {
    auto index = fixture_index();
    auto lib = library();
    auto dataset = testsupport::make_small_dataset();
    auto client = lambda_client(lesion_answer_backend);
    auto ack = build_ack(index, all_lesions_vec(), 2, client, lib, llm::GenerationConfig{});
    std::vector<FeatureDescriptor> features = {
        {"dyspnea", FeatureKind::boolean, std::nullopt, core::Provenance::llm_discovered}};

    auto flaky = lambda_client([](const std::string& prompt) -> std::string {
        if (prompt.find("Bibasilar") != std::string::npos)
            throw BackendError("backend down");
        return R"({"dyspnea": true})";
    });

    GenerateOptions strict;
    strict.failure_rate_threshold = 0.05;  // 1/3 failures exceeds it
    CHECK_THROWS_AS(generate_values(dataset, features, ack, index, flaky, lib, strict),
                    FailureRateError);

    GenerateOptions lenient;
    lenient.failure_rate_threshold = 0.5;
    auto out = generate_values(dataset, features, ack, index, flaky, lib, lenient);
    REQUIRE(out.failed_ids == std::vector<std::string>{"p1"});
    CHECK(out.values.size() == 2);
}

TEST_CASE("generate_existing_values uses the chart-review prompt") {
    auto lib = library();
    auto dataset = testsupport::make_small_dataset();
    auto client = lambda_client([](const std::string& prompt) -> std::string {
        if (prompt.find("Requested vital signs") == std::string::npos)
            throw BackendError("wrong prompt shape");
        return R"({"temperature": 98.2, "o2sat": 95})";
    });
    GenerateOptions options;
    auto out = generate_existing_values(dataset, {"temperature", "o2sat"}, client, lib, options);
    REQUIRE(out.values.size() == 3);
    CHECK(std::get<double>(out.values.at("p2").at("temperature")) == 98.2);

    CHECK_THROWS_AS(generate_existing_values(dataset, {"not_a_vital"}, client, lib, options),
                    ConfigError);
}

TEST_CASE("gaussian_baseline is seeded and reproducible") {
    auto dataset = testsupport::make_small_dataset();
    std::vector<std::string> vitals(core::vital_names().begin(), core::vital_names().end());

    auto a = gaussian_baseline(dataset, vitals, 42);
    auto b = gaussian_baseline(dataset, vitals, 42);
    CHECK(a.values == b.values);

    auto c = gaussian_baseline(dataset, vitals, 43);
    CHECK(a.values != c.values);

    REQUIRE(a.values.size() == 3);
    for (const auto& [pid, cells] : a.values) CHECK(cells.size() == 6);

    SECTION("zero-variance features skipped with a warning") {
        auto flat = dataset;
        for (auto& row : flat.rows) row.patient.o2sat = 95;
        auto out = gaussian_baseline(flat, {"o2sat"}, 1);
        CHECK(out.values.empty());
        REQUIRE(out.warnings.size() == 1);
        CHECK_THAT(out.warnings[0], Catch::Matchers::ContainsSubstring("zero variance"));
    }
}
