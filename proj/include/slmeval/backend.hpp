#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "slmeval/nllstats.hpp"

namespace slmeval::backend {

using json = nlohmann::ordered_json;

enum class BackendKind { HttpGenerate, Mock, ExternalCommand };
std::string_view to_string(BackendKind k);
BackendKind backend_kind_from_string(std::string_view s);

struct BackendParams {
    double temperature = 0.0;
    int max_tokens = 512;
    double timeout_s = 60.0;
    int max_retries = 2;
};

/// Request/response JSON shape for HTTP backends. Endpoint paths and field
/// names are configuration, so OpenAI-style and local-server-style APIs
/// both bind without code changes. Response lookups are dot-paths
/// ("choices.0.text" steps into arrays by numeric segment).
struct WireFields {
    std::string generate_path = "/v1/completions";
    std::string score_path = "/v1/score";
    std::string model_field = "model";
    std::string prompt_field = "prompt";
    std::string temperature_field = "temperature";
    std::string max_tokens_field = "max_tokens";
    std::string continuation_field = "continuation";
    std::string text_path = "text";
    std::string logprobs_path = "logprobs";
    std::string token_ids_path;  // optional; sequential ids when empty
};

struct BackendDescriptor {
    BackendKind kind = BackendKind::Mock;
    /// URL for HttpGenerate, behavior spec for Mock (see MockBackend),
    /// command template for ExternalCommand.
    std::string endpoint;
    std::string model_id;
    BackendParams params;
    WireFields fields;
    std::string bearer_token;
    /// Keys whose values are replaced in the wire log.
    std::vector<std::string> redact_keys = {"authorization", "api_key"};
    /// When set, request/response bodies are appended here as JSON-Lines.
    std::filesystem::path wire_log;

    json to_json() const;
    static BackendDescriptor from_json(const json& j);
};

struct GenerationResult {
    std::string text;
    double latency_s = 0.0;
    std::optional<int> token_count;
    int attempts = 1;  // 1 + number of retried transient failures
};

/// Uniform client over generation/logprob services. Implementations are
/// safe to share across threads; transient failures are retried internally
/// with exponential backoff up to params.max_retries.
class Backend {
public:
    virtual ~Backend() = default;

    /// Completion for a prompt, with client-measured latency.
    virtual GenerationResult generate(const std::string& prompt) = 0;

    /// Teacher-forced logprobs of `continuation` given `prompt`. Throws
    /// CapabilityError when the service cannot score continuations; this
    /// never silently falls back to generation.
    virtual nllstats::TokenLogProbs score_continuation(
        const std::string& prompt, const std::string& continuation) = 0;

    virtual const BackendDescriptor& descriptor() const = 0;
};

std::unique_ptr<Backend> make_backend(const BackendDescriptor& desc);

/// Deterministic in-process backend for tests and dry runs. The endpoint
/// string is a semicolon-separated key=value behavior spec:
///   text=T                generate returns T
///   echo=1                generate returns the prompt
///   score=K               generate returns "SCORE: K"
///   score_map=sub:K,...   generate returns "SCORE: K" for the first
///                         substring match on the prompt ("default" key
///                         matches anything)
///   logprob=-X            score_continuation assigns -X per token
///   table=p t:-X,...      per-token logprob looked up by "<prev> <tok>"
///                         (prompt's last token seeds prev; default -2.0)
///   latency=S             synthetic reported latency (no real sleep)
///   fail_transient=K      first K calls throw TransientError
///   fail_from_call=K      calls numbered >= K throw BackendError
///   unsupported_logprobs=1  score_continuation throws CapabilityError
///   calls_log=PATH        append one line per call for call auditing
/// Tokens are whitespace-split pseudo-tokens.
class MockBackend : public Backend {
public:
    explicit MockBackend(BackendDescriptor desc);

    GenerationResult generate(const std::string& prompt) override;
    nllstats::TokenLogProbs score_continuation(
        const std::string& prompt, const std::string& continuation) override;
    const BackendDescriptor& descriptor() const override { return desc_; }

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
    BackendDescriptor desc_;
};

// ---------------------------------------------------------------------------
// External pipeline stages.
// ---------------------------------------------------------------------------

struct StageResult {
    std::string command;  // after substitution
    int exit_code = 0;
    std::filesystem::path log_path;
};

/// Substitutes {placeholders} in the template from `values` (each value
/// shell-quoted), runs the command, and captures stdout+stderr to
/// `log_path`. An unresolved placeholder throws ConfigError naming it; a
/// nonzero exit throws StageFailedError carrying the log path.
StageResult run_external_stage(
    const std::string& cmd_template,
    const std::map<std::string, std::string>& values,
    const std::filesystem::path& log_path);

/// The substituted command line, without running it (dry runs).
std::string render_stage_command(const std::string& cmd_template,
                                 const std::map<std::string, std::string>& values);

}  // namespace slmeval::backend
