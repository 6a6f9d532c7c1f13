#include "slmeval/backend.hpp"

#include <sys/wait.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "slmeval/errors.hpp"
#include "slmeval/util.hpp"

namespace slmeval::backend {

namespace {

/// Runs fn, retrying TransientError with exponential backoff. attempts_out
/// receives the total number of tries (at most max_retries + 1).
template <class F>
auto with_retries(const BackendParams& params, F&& fn, int* attempts_out) {
    int attempts = 0;
    auto delay = std::chrono::milliseconds(25);
    for (;;) {
        attempts++;
        try {
            auto result = fn();
            if (attempts_out) *attempts_out = attempts;
            return result;
        } catch (const TransientError&) {
            if (attempts > params.max_retries) {
                if (attempts_out) *attempts_out = attempts;
                throw;
            }
            std::this_thread::sleep_for(delay);
            delay = std::min(delay * 2, std::chrono::milliseconds(2000));
        }
    }
}

std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::vector<std::string> tokens;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) tokens.push_back(tok);
    return tokens;
}

std::string excerpt(const std::string& body, std::size_t limit = 200) {
    if (body.size() <= limit) return body;
    return body.substr(0, limit) + "...";
}

}  // namespace

std::string_view to_string(BackendKind k) {
    switch (k) {
        case BackendKind::HttpGenerate: return "HttpGenerate";
        case BackendKind::Mock: return "Mock";
        case BackendKind::ExternalCommand: return "ExternalCommand";
    }
    return "Mock";
}

BackendKind backend_kind_from_string(std::string_view s) {
    if (s == "HttpGenerate") return BackendKind::HttpGenerate;
    if (s == "Mock") return BackendKind::Mock;
    if (s == "ExternalCommand") return BackendKind::ExternalCommand;
    throw ConfigError("unknown backend kind: " + std::string(s));
}

json BackendDescriptor::to_json() const {
    json j;
    j["kind"] = std::string(to_string(kind));
    j["endpoint"] = endpoint;
    j["model_id"] = model_id;
    j["params"] = {{"temperature", params.temperature},
                   {"max_tokens", params.max_tokens},
                   {"timeout_s", params.timeout_s},
                   {"max_retries", params.max_retries}};
    json f;
    f["generate_path"] = fields.generate_path;
    f["score_path"] = fields.score_path;
    f["model_field"] = fields.model_field;
    f["prompt_field"] = fields.prompt_field;
    f["temperature_field"] = fields.temperature_field;
    f["max_tokens_field"] = fields.max_tokens_field;
    f["continuation_field"] = fields.continuation_field;
    f["text_path"] = fields.text_path;
    f["logprobs_path"] = fields.logprobs_path;
    f["token_ids_path"] = fields.token_ids_path;
    j["fields"] = f;
    j["redact_keys"] = redact_keys;
    // The bearer token is a secret and the wire log is machine-local
    // state; neither belongs in a serialized descriptor.
    return j;
}

BackendDescriptor BackendDescriptor::from_json(const json& j) {
    BackendDescriptor d;
    d.kind = backend_kind_from_string(j.at("kind").get<std::string>());
    d.endpoint = j.at("endpoint").get<std::string>();
    d.model_id = j.value("model_id", std::string());
    if (j.contains("params")) {
        const auto& p = j["params"];
        d.params.temperature = p.value("temperature", d.params.temperature);
        d.params.max_tokens = p.value("max_tokens", d.params.max_tokens);
        d.params.timeout_s = p.value("timeout_s", d.params.timeout_s);
        d.params.max_retries = p.value("max_retries", d.params.max_retries);
    }
    if (d.params.timeout_s <= 0) throw ConfigError("backend timeout_s must be > 0");
    if (d.params.temperature < 0) {
        throw ConfigError("backend temperature must be >= 0");
    }
    if (j.contains("fields")) {
        const auto& f = j["fields"];
        d.fields.generate_path = f.value("generate_path", d.fields.generate_path);
        d.fields.score_path = f.value("score_path", d.fields.score_path);
        d.fields.model_field = f.value("model_field", d.fields.model_field);
        d.fields.prompt_field = f.value("prompt_field", d.fields.prompt_field);
        d.fields.temperature_field =
            f.value("temperature_field", d.fields.temperature_field);
        d.fields.max_tokens_field =
            f.value("max_tokens_field", d.fields.max_tokens_field);
        d.fields.continuation_field =
            f.value("continuation_field", d.fields.continuation_field);
        d.fields.text_path = f.value("text_path", d.fields.text_path);
        d.fields.logprobs_path = f.value("logprobs_path", d.fields.logprobs_path);
        d.fields.token_ids_path =
            f.value("token_ids_path", d.fields.token_ids_path);
    }
    if (j.contains("redact_keys")) {
        d.redact_keys = j["redact_keys"].get<std::vector<std::string>>();
    }
    if (j.contains("bearer_token")) {
        d.bearer_token = j["bearer_token"].get<std::string>();
    }
    if (j.contains("wire_log")) {
        d.wire_log = j["wire_log"].get<std::string>();
    }
    return d;
}

// ---------------------------------------------------------------------------
// MockBackend.
// ---------------------------------------------------------------------------

namespace {

int opt_int(const std::map<std::string, std::string>& opts, const std::string& key,
            int fallback) {
    auto it = opts.find(key);
    if (it == opts.end()) return fallback;
    return std::stoi(it->second);
}

double opt_double(const std::map<std::string, std::string>& opts,
                  const std::string& key, double fallback) {
    auto it = opts.find(key);
    if (it == opts.end()) return fallback;
    return std::stod(it->second);
}

std::map<std::string, std::string> parse_mock_spec(const std::string& endpoint) {
    std::map<std::string, std::string> opts;
    std::istringstream in(endpoint);
    std::string part;
    while (std::getline(in, part, ';')) {
        if (part.empty()) continue;
        auto eq = part.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("mock backend spec entry is not key=value: " + part);
        }
        opts[part.substr(0, eq)] = part.substr(eq + 1);
    }
    return opts;
}

}  // namespace

struct MockBackend::Impl {
    std::map<std::string, std::string> opts;
    std::atomic<int> calls{0};
    std::mutex log_mutex;

    /// Bumps the call counter, appends to the call log, and injects the
    /// configured failures. Shared by generate and score paths.
    void enter(const std::string& op, const std::string& payload) {
        int call = ++calls;
        if (auto it = opts.find("calls_log"); it != opts.end()) {
            std::lock_guard<std::mutex> lock(log_mutex);
            std::ofstream out(it->second, std::ios::app);
            out << call << '\t' << op << '\t' << util::fnv1a64_hex(payload)
                << '\n';
        }
        int fail_transient = opt_int(opts, "fail_transient", 0);
        if (call <= fail_transient) {
            throw TransientError("mock: injected transient failure on call " +
                                 std::to_string(call));
        }
        int fail_from = opt_int(opts, "fail_from_call", 0);
        if (fail_from > 0 && call >= fail_from) {
            throw BackendError("mock: injected failure on call " +
                               std::to_string(call));
        }
    }
};

MockBackend::MockBackend(BackendDescriptor desc)
    : impl_(std::make_shared<Impl>()), desc_(std::move(desc)) {
    impl_->opts = parse_mock_spec(desc_.endpoint);
}

GenerationResult MockBackend::generate(const std::string& prompt) {
    int attempts = 1;
    auto result = with_retries(
        desc_.params,
        [&]() -> GenerationResult {
            impl_->enter("generate", prompt);
            GenerationResult r;
            r.latency_s = opt_double(impl_->opts, "latency", 0.0);

            if (opt_int(impl_->opts, "echo", 0) == 1) {
                r.text = prompt;
            } else if (auto it = impl_->opts.find("score_map");
                       it != impl_->opts.end()) {
                std::string fallback;
                bool matched = false;
                std::istringstream entries(it->second);
                std::string entry;
                while (std::getline(entries, entry, ',')) {
                    auto colon = entry.rfind(':');
                    if (colon == std::string::npos) {
                        throw ConfigError("mock score_map entry is not sub:score: " +
                                          entry);
                    }
                    std::string key = entry.substr(0, colon);
                    std::string score = entry.substr(colon + 1);
                    if (key == "default") {
                        fallback = "SCORE: " + score;
                    } else if (!matched && prompt.find(key) != std::string::npos) {
                        r.text = "SCORE: " + score;
                        matched = true;
                    }
                }
                if (!matched) r.text = fallback;
            } else if (auto it2 = impl_->opts.find("score");
                       it2 != impl_->opts.end()) {
                r.text = "SCORE: " + it2->second;
            } else if (auto it3 = impl_->opts.find("text");
                       it3 != impl_->opts.end()) {
                r.text = it3->second;
            }
            r.token_count = static_cast<int>(whitespace_tokens(r.text).size());
            return r;
        },
        &attempts);
    result.attempts = attempts;
    return result;
}

nllstats::TokenLogProbs MockBackend::score_continuation(
    const std::string& prompt, const std::string& continuation) {
    if (opt_int(impl_->opts, "unsupported_logprobs", 0) == 1) {
        throw CapabilityError("mock: logprob scoring disabled");
    }
    return with_retries(
        desc_.params,
        [&]() -> nllstats::TokenLogProbs {
            impl_->enter("score", prompt + "\x1f" + continuation);
            auto tokens = whitespace_tokens(continuation);
            if (tokens.empty()) {
                throw BackendError("mock: empty continuation");
            }
            nllstats::TokenLogProbs tlp;
            auto table_it = impl_->opts.find("table");
            if (table_it != impl_->opts.end()) {
                // Bigram table "prev tok:-X,..."; lookups fall back to -2.0.
                std::map<std::string, double> table;
                std::istringstream entries(table_it->second);
                std::string entry;
                while (std::getline(entries, entry, ',')) {
                    auto colon = entry.rfind(':');
                    if (colon == std::string::npos) {
                        throw ConfigError("mock table entry is not 'prev tok:lp': " +
                                          entry);
                    }
                    table[entry.substr(0, colon)] =
                        std::stod(entry.substr(colon + 1));
                }
                auto prompt_tokens = whitespace_tokens(prompt);
                std::string prev =
                    prompt_tokens.empty() ? "^" : prompt_tokens.back();
                for (std::size_t t = 0; t < tokens.size(); t++) {
                    auto it = table.find(prev + " " + tokens[t]);
                    double lp = it == table.end() ? -2.0 : it->second;
                    tlp.token_ids.push_back(static_cast<std::int64_t>(t));
                    tlp.logprobs.push_back(lp);
                    prev = tokens[t];
                }
            } else {
                double lp = opt_double(impl_->opts, "logprob", -1.0);
                for (std::size_t t = 0; t < tokens.size(); t++) {
                    tlp.token_ids.push_back(static_cast<std::int64_t>(t));
                    tlp.logprobs.push_back(lp);
                }
            }
            return tlp;
        },
        nullptr);
}

// ---------------------------------------------------------------------------
// HttpBackend.
// ---------------------------------------------------------------------------

namespace {

struct ParsedUrl {
    std::string host;
    int port = 80;
    std::string base_path;  // "" or "/prefix"
};

ParsedUrl parse_http_url(const std::string& url) {
    constexpr std::string_view kScheme = "http://";
    if (url.rfind(kScheme, 0) != 0) {
        throw ConfigError("backend endpoint must be an http:// URL: " + url);
    }
    std::string rest = url.substr(kScheme.size());
    ParsedUrl out;
    auto slash = rest.find('/');
    std::string authority = slash == std::string::npos ? rest : rest.substr(0, slash);
    if (slash != std::string::npos) {
        out.base_path = rest.substr(slash);
        if (out.base_path == "/") out.base_path.clear();
    }
    auto colon = authority.find(':');
    if (colon == std::string::npos) {
        out.host = authority;
    } else {
        out.host = authority.substr(0, colon);
        out.port = std::stoi(authority.substr(colon + 1));
    }
    if (out.host.empty()) throw ConfigError("backend endpoint has no host: " + url);
    return out;
}

json redact(const json& doc, const std::vector<std::string>& keys) {
    auto lower = [](std::string s) {
        for (auto& c : s) c = static_cast<char>(std::tolower(c));
        return s;
    };
    if (doc.is_object()) {
        json out = json::object();
        for (auto it = doc.begin(); it != doc.end(); ++it) {
            bool hit = false;
            for (const auto& k : keys) {
                if (lower(it.key()) == lower(k)) hit = true;
            }
            out[it.key()] = hit ? json("[redacted]") : redact(it.value(), keys);
        }
        return out;
    }
    if (doc.is_array()) {
        json out = json::array();
        for (const auto& v : doc) out.push_back(redact(v, keys));
        return out;
    }
    return doc;
}

class HttpBackend : public Backend {
public:
    explicit HttpBackend(BackendDescriptor desc)
        : desc_(std::move(desc)), url_(parse_http_url(desc_.endpoint)) {}

    GenerationResult generate(const std::string& prompt) override {
        const auto& f = desc_.fields;
        json body;
        body[f.model_field] = desc_.model_id;
        body[f.prompt_field] = prompt;
        body[f.temperature_field] = desc_.params.temperature;
        body[f.max_tokens_field] = desc_.params.max_tokens;

        int attempts = 1;
        auto result = with_retries(
            desc_.params,
            [&]() -> GenerationResult {
                auto t0 = std::chrono::steady_clock::now();
                json doc = post_json(f.generate_path, body);
                std::chrono::duration<double> dt =
                    std::chrono::steady_clock::now() - t0;

                const json* text = util::json_at_path(doc, f.text_path);
                if (!text || !text->is_string()) {
                    throw BackendError("generate response has no text at '" +
                                       f.text_path + "': " + excerpt(doc.dump()));
                }
                GenerationResult r;
                r.text = text->get<std::string>();
                r.latency_s = dt.count();
                return r;
            },
            &attempts);
        result.attempts = attempts;
        return result;
    }

    nllstats::TokenLogProbs score_continuation(
        const std::string& prompt, const std::string& continuation) override {
        const auto& f = desc_.fields;
        json body;
        body[f.model_field] = desc_.model_id;
        body[f.prompt_field] = prompt;
        body[f.continuation_field] = continuation;

        return with_retries(
            desc_.params,
            [&]() -> nllstats::TokenLogProbs {
                json doc = post_json(f.score_path, body, /*capability_path=*/true);
                const json* lps = util::json_at_path(doc, f.logprobs_path);
                if (!lps || !lps->is_array()) {
                    throw BackendError("score response has no logprob array at '" +
                                       f.logprobs_path +
                                       "': " + excerpt(doc.dump()));
                }
                nllstats::TokenLogProbs tlp;
                for (const auto& v : *lps) {
                    if (!v.is_number()) {
                        throw BackendError("non-numeric logprob in response");
                    }
                    tlp.logprobs.push_back(v.get<double>());
                }
                if (!f.token_ids_path.empty()) {
                    const json* ids = util::json_at_path(doc, f.token_ids_path);
                    if (ids && ids->is_array()) {
                        for (const auto& v : *ids) {
                            tlp.token_ids.push_back(v.get<std::int64_t>());
                        }
                    }
                }
                if (tlp.token_ids.size() != tlp.logprobs.size()) {
                    tlp.token_ids.resize(tlp.logprobs.size());
                    for (std::size_t i = 0; i < tlp.token_ids.size(); i++) {
                        tlp.token_ids[i] = static_cast<std::int64_t>(i);
                    }
                }
                return tlp;
            },
            nullptr);
    }

    const BackendDescriptor& descriptor() const override { return desc_; }

private:
    /// POSTs a JSON body and returns the parsed JSON response. Maps
    /// transport failures onto the error taxonomy: timeouts -> TimeoutError,
    /// connection-level failures and 5xx -> TransientError (retried),
    /// 404/501 on a scoring path -> CapabilityError, anything else
    /// non-OK or unparsable -> BackendError.
    json post_json(const std::string& path, const json& body,
                   bool capability_path = false) {
        httplib::Client cli(url_.host, url_.port);
        auto timeout = std::chrono::duration<double>(desc_.params.timeout_s);
        auto sec = std::chrono::duration_cast<std::chrono::seconds>(timeout);
        auto usec = std::chrono::duration_cast<std::chrono::microseconds>(
            timeout - sec);
        cli.set_connection_timeout(sec.count(), usec.count());
        cli.set_read_timeout(sec.count(), usec.count());
        cli.set_write_timeout(sec.count(), usec.count());

        httplib::Headers headers;
        if (!desc_.bearer_token.empty()) {
            headers.emplace("Authorization", "Bearer " + desc_.bearer_token);
        }

        std::string full_path = url_.base_path + path;
        log_wire("request", full_path, body, /*status=*/std::nullopt);

        auto res = cli.Post(full_path, headers, body.dump(), "application/json");
        if (!res) {
            switch (res.error()) {
                case httplib::Error::ConnectionTimeout:
                    throw TimeoutError("timeout connecting to " + desc_.endpoint);
                case httplib::Error::Connection:
                case httplib::Error::Read:
                case httplib::Error::Write:
                    throw TransientError("transport failure talking to " +
                                         desc_.endpoint + ": " +
                                         httplib::to_string(res.error()));
                default:
                    throw BackendError("http client failure: " +
                                       std::string(httplib::to_string(res.error())));
            }
        }
        if (res->status >= 500) {
            throw TransientError("server error " + std::to_string(res->status) +
                                 " from " + full_path + ": " + excerpt(res->body));
        }
        if (capability_path && (res->status == 404 || res->status == 501)) {
            throw CapabilityError("backend does not support logprob scoring (" +
                                  std::to_string(res->status) + " on " +
                                  full_path + ")");
        }
        if (res->status != 200) {
            throw BackendError("unexpected status " + std::to_string(res->status) +
                               " from " + full_path + ": " + excerpt(res->body));
        }
        json doc = json::parse(res->body, nullptr, false);
        if (doc.is_discarded()) {
            throw BackendError("malformed response body from " + full_path + ": " +
                               excerpt(res->body));
        }
        log_wire("response", full_path, doc, res->status);
        return doc;
    }

    void log_wire(const char* kind, const std::string& path, const json& body,
                  std::optional<int> status) {
        if (desc_.wire_log.empty()) return;
        json line;
        line["ts"] = util::iso8601_utc_now();
        line["kind"] = kind;
        line["path"] = path;
        if (status) line["status"] = *status;
        line["body"] = redact(body, desc_.redact_keys);
        std::lock_guard<std::mutex> lock(log_mutex_);
        std::ofstream out(desc_.wire_log, std::ios::app);
        out << line.dump() << '\n';
    }

    BackendDescriptor desc_;
    ParsedUrl url_;
    std::mutex log_mutex_;
};

// ---------------------------------------------------------------------------
// ExternalCommandBackend: completion by running a command template. The
// prompt is passed via the {prompt} placeholder, shell-quoted. Scoring is
// not a capability of an opaque command.
// ---------------------------------------------------------------------------

class ExternalCommandBackend : public Backend {
public:
    explicit ExternalCommandBackend(BackendDescriptor desc)
        : desc_(std::move(desc)) {}

    GenerationResult generate(const std::string& prompt) override {
        std::map<std::string, std::string> values = {
            {"prompt", prompt}, {"model_id", desc_.model_id}};
        std::string cmd = render_stage_command(desc_.endpoint, values);

        auto t0 = std::chrono::steady_clock::now();
        FILE* pipe = ::popen(cmd.c_str(), "r");
        if (!pipe) throw BackendError("cannot run command backend: " + cmd);
        std::string out;
        char buf[4096];
        std::size_t got;
        while ((got = ::fread(buf, 1, sizeof(buf), pipe)) > 0) {
            out.append(buf, got);
        }
        int status = ::pclose(pipe);
        std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        if (status != 0) {
            throw BackendError("command backend exited nonzero: " + cmd);
        }
        // Trim one trailing newline; shell tools almost always add it.
        if (!out.empty() && out.back() == '\n') out.pop_back();
        GenerationResult r;
        r.text = out;
        r.latency_s = dt.count();
        return r;
    }

    nllstats::TokenLogProbs score_continuation(const std::string&,
                                               const std::string&) override {
        throw CapabilityError("command backends cannot score continuations");
    }

    const BackendDescriptor& descriptor() const override { return desc_; }

private:
    BackendDescriptor desc_;
};

}  // namespace

std::unique_ptr<Backend> make_backend(const BackendDescriptor& desc) {
    switch (desc.kind) {
        case BackendKind::Mock:
            return std::make_unique<MockBackend>(desc);
        case BackendKind::HttpGenerate:
            return std::make_unique<HttpBackend>(desc);
        case BackendKind::ExternalCommand:
            return std::make_unique<ExternalCommandBackend>(desc);
    }
    throw ConfigError("unknown backend kind");
}

// ---------------------------------------------------------------------------
// External pipeline stages.
// ---------------------------------------------------------------------------

std::string render_stage_command(
    const std::string& cmd_template,
    const std::map<std::string, std::string>& values) {
    std::map<std::string, std::string> quoted;
    for (const auto& [k, v] : values) quoted[k] = util::shell_quote(v);
    return util::substitute_placeholders(cmd_template, quoted);
}

StageResult run_external_stage(const std::string& cmd_template,
                               const std::map<std::string, std::string>& values,
                               const std::filesystem::path& log_path) {
    StageResult result;
    result.command = render_stage_command(cmd_template, values);
    result.log_path = log_path;

    // The log opens with the command itself, then captures both streams.
    util::write_file(log_path, "$ " + result.command + "\n");
    std::string shell_cmd = "{ " + result.command + " ; } >> " +
                            util::shell_quote(log_path.string()) + " 2>&1";
    int status = std::system(shell_cmd.c_str());
    if (status < 0) {
        throw Error("failed to launch stage command: " + result.command);
    }
    if (WIFEXITED(status)) {
        result.exit_code = WEXITSTATUS(status);
    } else if (WIFSIGNALED(status)) {
        result.exit_code = 128 + WTERMSIG(status);
    } else {
        result.exit_code = status;
    }
    if (result.exit_code != 0) {
        throw StageFailedError("stage command failed with exit " +
                                   std::to_string(result.exit_code) + ": " +
                                   result.command,
                               log_path.string());
    }
    return result;
}

}  // namespace slmeval::backend
