#pragma once

// Uniform completion contract over remote LLM APIs, a scripted mock, and a
// content-addressed record/replay cache. With the cache in strict-replay mode
// every downstream stage becomes a pure function of (dataset, corpus, cache,
// seed); that is the default for tests and CI. Live calls require an explicit
// mode plus credentials.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dallm/util.hpp"

namespace dallm::llm {

using json = nlohmann::json;

struct GenerationConfig {
    double temperature = 0.1;
    int max_tokens = 512;
    std::string model = "default";
    std::optional<uint64_t> seed;
};

enum class CacheStatus { live, replayed, mocked };

inline std::string to_string(CacheStatus s) {
    switch (s) {
        case CacheStatus::live: return "live";
        case CacheStatus::replayed: return "replayed";
        case CacheStatus::mocked: return "mocked";
    }
    throw Error(ErrorKind::internal, "bad cache status");
}

struct Completion {
    std::string text;
    std::string backend;
    std::string fingerprint;
    CacheStatus status = CacheStatus::live;
};

// Content hash over the canonicalized request. Only line endings are
// normalized; whitespace is otherwise significant. The seed is not part of
// the identity: completions are cached per (prompt, sampling config, model).
inline std::string fingerprint(const std::string& prompt, const GenerationConfig& config) {
    std::string canonical = "model=" + config.model + "\n" +
                            "temperature=" + util::format_double(config.temperature) + "\n" +
                            "max_tokens=" + std::to_string(config.max_tokens) + "\n" +
                            "prompt=" + util::normalize_newlines(prompt);
    return util::sha256_hex(canonical);
}

class Backend {
public:
    virtual ~Backend() = default;
    virtual std::string descriptor() const = 0;
    virtual std::string complete(const std::string& prompt, const GenerationConfig& config) = 0;
    virtual CacheStatus status() const { return CacheStatus::live; }
};

// Scripted by exact fingerprint; used by unit tests.
class MockBackend final : public Backend {
public:
    std::string descriptor() const override { return "mock"; }
    CacheStatus status() const override { return CacheStatus::mocked; }

    void script(const std::string& prompt, const GenerationConfig& config, std::string text) {
        responses_[fingerprint(prompt, config)] = std::move(text);
    }
    void script_fingerprint(const std::string& fp, std::string text) {
        responses_[fp] = std::move(text);
    }

    std::string complete(const std::string& prompt, const GenerationConfig& config) override {
        auto it = responses_.find(fingerprint(prompt, config));
        if (it == responses_.end())
            throw BackendError("mock backend has no scripted response for fingerprint " +
                               fingerprint(prompt, config));
        return it->second;
    }

private:
    std::map<std::string, std::string> responses_;
};

// Substring-rule scripted backend driving the offline fixture pipeline.
// Rules file: {"rules": [{"contains": ["a","b"], "response": "..."}, ...],
// "default": "..."}; the first rule whose substrings all occur wins.
class ScriptedBackend final : public Backend {
public:
    struct Rule {
        std::vector<std::string> contains;
        std::string response;
    };

    static ScriptedBackend from_file(const std::filesystem::path& path) {
        if (!std::filesystem::exists(path))
            throw ConfigError("LLM script file not found: " + path.string());
        json j;
        try {
            j = json::parse(util::read_file(path));
        } catch (const json::exception& e) {
            throw ConfigError("LLM script file unparseable: " + std::string(e.what()));
        }
        ScriptedBackend backend;
        backend.name_ = "scripted:" + path.filename().string();
        for (const auto& rj : j.value("rules", json::array())) {
            Rule rule;
            for (const auto& c : rj.at("contains")) rule.contains.push_back(c.get<std::string>());
            rule.response = rj.at("response").get<std::string>();
            backend.rules_.push_back(std::move(rule));
        }
        if (j.contains("default")) backend.default_ = j["default"].get<std::string>();
        return backend;
    }

    std::string descriptor() const override { return name_; }
    CacheStatus status() const override { return CacheStatus::mocked; }

    std::string complete(const std::string& prompt, const GenerationConfig&) override {
        for (const auto& rule : rules_) {
            bool all = true;
            for (const auto& sub : rule.contains) {
                if (prompt.find(sub) == std::string::npos) {
                    all = false;
                    break;
                }
            }
            if (all) return rule.response;
        }
        if (default_) return *default_;
        throw BackendError("scripted backend has no rule matching prompt");
    }

private:
    std::string name_ = "scripted";
    std::vector<Rule> rules_;
    std::optional<std::string> default_;
};

// JSON-over-HTTP chat/completions shape. Endpoint and key come from the
// environment so credentials never land in config files or manifests.
class HttpBackend final : public Backend {
public:
    static constexpr const char* kEndpointVar = "DALLM_LLM_ENDPOINT";
    static constexpr const char* kApiKeyVar = "DALLM_LLM_API_KEY";

    explicit HttpBackend(std::string model_hint = {}) {
        const char* endpoint = std::getenv(kEndpointVar);
        if (!endpoint || !*endpoint)
            throw ConfigError(std::string("http backend requires ") + kEndpointVar);
        endpoint_ = endpoint;
        if (const char* key = std::getenv(kApiKeyVar)) api_key_ = key;
        auto scheme_end = endpoint_.find("://");
        if (scheme_end == std::string::npos)
            throw ConfigError("http backend endpoint must include scheme: " + endpoint_);
        auto path_start = endpoint_.find('/', scheme_end + 3);
        if (path_start == std::string::npos) {
            base_ = endpoint_;
            path_ = "/v1/chat/completions";
        } else {
            base_ = endpoint_.substr(0, path_start);
            path_ = endpoint_.substr(path_start);
        }
        (void)model_hint;
    }

    std::string descriptor() const override { return "http:" + base_; }

    std::string complete(const std::string& prompt, const GenerationConfig& config) override {
        json req = {{"model", config.model},
                    {"temperature", config.temperature},
                    {"max_tokens", config.max_tokens},
                    {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
        if (config.seed) req["seed"] = *config.seed;

        httplib::Client client(base_);
        client.set_connection_timeout(30);
        client.set_read_timeout(120);
        httplib::Headers headers;
        if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
        auto res = client.Post(path_, headers, req.dump(), "application/json");
        if (!res)
            throw BackendError("LLM endpoint unreachable: " + base_ + path_ + " (" +
                                   httplib::to_string(res.error()) + ")",
                               /*retryable=*/true);
        if (res->status == 429 || res->status >= 500)
            throw BackendError("LLM endpoint HTTP " + std::to_string(res->status),
                               /*retryable=*/true);
        if (res->status != 200)
            throw BackendError("LLM endpoint HTTP " + std::to_string(res->status) + ": " +
                               res->body);
        json body;
        try {
            body = json::parse(res->body);
        } catch (const json::exception& e) {
            throw BackendError(std::string("LLM response unparseable: ") + e.what());
        }
        // chat shape first, then legacy completion shapes
        if (body.contains("choices") && !body["choices"].empty()) {
            const auto& choice = body["choices"][0];
            if (choice.contains("message")) return choice["message"].value("content", "");
            if (choice.contains("text")) return choice["text"].get<std::string>();
        }
        if (body.contains("text")) return body["text"].get<std::string>();
        throw BackendError("LLM response has no recognizable completion field");
    }

private:
    std::string endpoint_, base_, path_, api_key_;
};

enum class CacheMode { live, record, strict_replay };

inline std::string to_string(CacheMode m) {
    switch (m) {
        case CacheMode::live: return "live";
        case CacheMode::record: return "record";
        case CacheMode::strict_replay: return "strict_replay";
    }
    throw Error(ErrorKind::internal, "bad cache mode");
}

inline std::optional<CacheMode> cache_mode_from_string(std::string_view s) {
    if (s == "live") return CacheMode::live;
    if (s == "record") return CacheMode::record;
    if (s == "strict-replay" || s == "strict_replay") return CacheMode::strict_replay;
    return std::nullopt;
}

// Completion client: fingerprinting, disk cache, bounded retries, and a
// global in-flight bound. Safe for concurrent use; cache writes are atomic.
class Client {
public:
    Client(std::shared_ptr<Backend> backend, CacheMode mode,
           std::filesystem::path cache_dir = {}, unsigned max_concurrent = 4,
           int max_attempts = 3)
        : backend_(std::move(backend)),
          mode_(mode),
          cache_dir_(std::move(cache_dir)),
          max_attempts_(max_attempts),
          slots_(std::max(1u, max_concurrent)) {
        if (mode_ != CacheMode::live && cache_dir_.empty())
            throw ConfigError("cache mode " + to_string(mode_) + " requires a cache directory");
        if (mode_ != CacheMode::strict_replay && !backend_)
            throw ConfigError("cache mode " + to_string(mode_) + " requires a backend");
    }

    std::string descriptor() const {
        return backend_ ? backend_->descriptor() : "replay-only";
    }

    Completion complete(const std::string& prompt, const GenerationConfig& config) {
        if (prompt.empty()) throw ConfigError("complete: empty prompt");
        std::string fp = fingerprint(prompt, config);

        if (mode_ != CacheMode::live) {
            if (auto cached = read_cache(fp)) {
                std::string origin = cached->backend.empty() ? descriptor() : cached->backend;
                return {cached->text, origin, fp, CacheStatus::replayed};
            }
            if (mode_ == CacheMode::strict_replay)
                throw BackendError("cache miss in strict-replay mode for fingerprint " + fp);
        }

        std::string text = call_with_retries(prompt, config, fp);
        if (mode_ == CacheMode::record) write_cache(fp, prompt, config, text);
        return {text, descriptor(), fp, backend_->status()};
    }

    uint64_t calls_issued() const { return calls_; }

private:
    struct SlotGuard {
        Client& c;
        explicit SlotGuard(Client& client) : c(client) {
            std::unique_lock<std::mutex> lock(c.slot_mu_);
            c.slot_cv_.wait(lock, [&] { return c.in_flight_ < c.slots_; });
            ++c.in_flight_;
        }
        ~SlotGuard() {
            {
                std::lock_guard<std::mutex> lock(c.slot_mu_);
                --c.in_flight_;
            }
            c.slot_cv_.notify_one();
        }
    };

    std::string call_with_retries(const std::string& prompt, const GenerationConfig& config,
                                  const std::string& fp) {
        SlotGuard guard(*this);
        int attempt = 0;
        for (;;) {
            ++attempt;
            ++calls_;
            try {
                return backend_->complete(prompt, config);
            } catch (const BackendError& e) {
                if (!e.retryable || attempt >= max_attempts_)
                    throw BackendError(std::string(e.what()) + " (fingerprint " + fp + ")",
                                       e.retryable);
                std::this_thread::sleep_for(std::chrono::milliseconds(100 << (attempt - 1)));
            }
        }
    }

    std::filesystem::path entry_path(const std::string& fp) const {
        return cache_dir_ / (fp + ".json");
    }

    struct CacheEntry {
        std::string text;
        std::string backend;
    };

    std::optional<CacheEntry> read_cache(const std::string& fp) const {
        auto path = entry_path(fp);
        if (!std::filesystem::exists(path)) return std::nullopt;
        json j;
        try {
            j = json::parse(util::read_file(path));
        } catch (const json::exception& e) {
            throw BackendError("corrupt cache entry " + path.string() + ": " + e.what());
        }
        return CacheEntry{j.at("text").get<std::string>(), j.value("backend", "")};
    }

    void write_cache(const std::string& fp, const std::string& prompt,
                     const GenerationConfig& config, const std::string& text) {
        json j = {{"fingerprint", fp},
                  {"backend", descriptor()},
                  {"model", config.model},
                  {"temperature", config.temperature},
                  {"max_tokens", config.max_tokens},
                  {"prompt", prompt},
                  {"text", text}};
        std::lock_guard<std::mutex> lock(cache_mu_);
        util::write_file_atomic(entry_path(fp), j.dump(2) + "\n");
    }

    std::shared_ptr<Backend> backend_;
    CacheMode mode_;
    std::filesystem::path cache_dir_;
    int max_attempts_;
    unsigned slots_;
    unsigned in_flight_ = 0;
    std::mutex slot_mu_;
    std::condition_variable slot_cv_;
    std::mutex cache_mu_;
    std::atomic<uint64_t> calls_{0};
};

}  // namespace dallm::llm
