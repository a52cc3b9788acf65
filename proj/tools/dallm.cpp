// dallm: retrieval-augmented clinical tabular data augmentation pipeline.
//
// One subcommand per pipeline stage, a shared JSON config file, and flag
// overrides for the experiment knobs. All artifacts land under the config's
// output directory with fixed names plus a manifest per command.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dallm/pipeline.hpp"

using dallm::pipeline::Overrides;
using dallm::pipeline::PipelineConfig;

namespace {

struct CliState {
    std::string config_path;
    Overrides overrides;
};

void add_common_flags(CLI::App* cmd, CliState& state) {
    cmd->add_option("--config", state.config_path, "pipeline config file (JSON)")
        ->required();
    cmd->add_option("--output-dir", [&state](const std::vector<std::string>& v) {
        state.overrides.output_dir = v.back();
        return true;
    }, "override the config output directory")->expected(1);
    cmd->add_option("--seed", [&state](const std::vector<std::string>& v) {
        state.overrides.seed = std::stoull(v.back());
        return true;
    }, "override the run seed")->expected(1);
    cmd->add_option("--cache-mode", [&state](const std::vector<std::string>& v) {
        state.overrides.cache_mode = v.back();
        return true;
    }, "live | record | strict-replay")->expected(1);
    cmd->add_option("--workers", [&state](const std::vector<std::string>& v) {
        state.overrides.workers = static_cast<unsigned>(std::stoul(v.back()));
        return true;
    }, "max concurrent LLM calls / worker pool size")->expected(1);
    cmd->add_flag("--ablation", [&state](int64_t) { state.overrides.ablation = true; },
                  "omit the ACK block from value-generation prompts");
    cmd->add_flag("--offline", [&state](int64_t) { state.overrides.offline = true; },
                  "forbid live sources");
}

int load_and_run(const std::string& command, const CliState& state) {
    try {
        PipelineConfig cfg = PipelineConfig::load(state.config_path);
        state.overrides.apply(cfg);
        return dallm::pipeline::run_command(command, cfg);
    } catch (const dallm::Error& e) {
        std::cerr << "dallm " << command << ": " << e.what() << "\n";
        return dallm::pipeline::exit_code_for(e);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Retrieval-augmented clinical tabular data augmentation pipeline"};
    app.require_subcommand(1);

    CliState state;
    std::string run_command_name;

    auto* ingest = app.add_subcommand("ingest", "fetch knowledge documents per lesion");
    add_common_flags(ingest, state);
    ingest->add_option("--sources", [&state](const std::vector<std::string>& v) {
        state.overrides.sources = v;
        return true;
    }, "sources: wikipedia radiopaedia fixture")->expected(1, 3);
    ingest->add_option("--scope", [&state](const std::vector<std::string>& v) {
        state.overrides.scope = v.back();
        return true;
    }, "top_one | first_page")->expected(1);
    ingest->add_option("--corpus-dir", [&state](const std::vector<std::string>& v) {
        state.overrides.corpus_dir = v.back();
        return true;
    }, "corpus directory name under the output dir")->expected(1);
    ingest->callback([&] { run_command_name = "ingest"; });

    auto* index = app.add_subcommand("index", "build or query the vector index");
    auto* index_build = index->add_subcommand("build", "chunk + embed the corpus");
    add_common_flags(index_build, state);
    index_build->callback([&] { run_command_name = "index"; });

    auto* index_query = index->add_subcommand("query", "search the built index");
    static std::string query_text, query_lesion;
    static int query_k = 5;
    add_common_flags(index_query, state);
    index_query->add_option("--query", query_text, "query text")->required();
    index_query->add_option("--k", query_k, "number of results");
    index_query->add_option("--lesion", query_lesion, "restrict to one lesion partition");
    index_query->callback([&] { run_command_name = "index-query"; });

    for (const char* name : {"ack", "discover", "augment", "baseline", "eval", "report"}) {
        auto* cmd = app.add_subcommand(
            name, std::string("run the ") + name + " stage of the pipeline");
        add_common_flags(cmd, state);
        if (std::string(name) == "augment")
            cmd->add_flag("--existing",
                          [&state](int64_t) { state.overrides.existing_values = true; },
                          "generate values for the existing vitals instead of new features");
        cmd->callback([&, name] { run_command_name = name; });
    }

    CLI11_PARSE(app, argc, argv);

    if (run_command_name == "index-query") {
        try {
            PipelineConfig cfg = PipelineConfig::load(state.config_path);
            state.overrides.apply(cfg);
            auto idx = dallm::kstore::VectorIndex::load(cfg.out("index.json"));
            std::optional<dallm::core::Lesion> lesion;
            if (!query_lesion.empty()) {
                lesion = dallm::core::lesion_from_string(query_lesion);
                if (!lesion) throw dallm::ConfigError("unknown lesion '" + query_lesion + "'");
            }
            for (const auto& hit : idx.search(query_text, query_k, lesion)) {
                const auto* chunk = idx.find_chunk(hit.chunk_id);
                std::cout << hit.chunk_id << "\t" << dallm::util::format_double(hit.score) << "\t"
                          << chunk->text.substr(0, 120) << "\n";
            }
            return 0;
        } catch (const dallm::Error& e) {
            std::cerr << "dallm index query: " << e.what() << "\n";
            return dallm::pipeline::exit_code_for(e);
        }
    }
    return load_and_run(run_command_name, state);
}
