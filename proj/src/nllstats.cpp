#include "slmeval/nllstats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include "slmeval/backend.hpp"
#include "slmeval/errors.hpp"
#include "slmeval/util.hpp"

namespace slmeval::nllstats {

double sequence_nll(const TokenLogProbs& tlp) {
    if (tlp.logprobs.empty()) {
        throw Error("sequence_nll: empty logprob sequence");
    }
    double sum = 0.0;
    for (double lp : tlp.logprobs) {
        if (!(lp <= 0.0)) {
            throw Error("sequence_nll: positive logprob from backend: " +
                        std::to_string(lp));
        }
        sum += lp;
    }
    return -sum / static_cast<double>(tlp.logprobs.size());
}

double perplexity(double nll) {
    if (!std::isfinite(nll)) throw Error("perplexity: non-finite nll");
    if (nll < 0.0) throw Error("perplexity: negative nll");
    return std::exp(nll);
}

// ---------------------------------------------------------------------------
// Corpus-level evaluation.
// ---------------------------------------------------------------------------

json NLLReport::to_json() const {
    json j;
    j["model_id"] = model_id;
    j["n"] = n;
    j["nll"] = nll;
    j["ppl"] = ppl;
    j["token_count"] = token_count;
    j["partial"] = partial;
    j["failed_ids"] = failed_ids;
    return j;
}

NLLReport NLLReport::from_json(const json& j) {
    NLLReport r;
    r.model_id = j.at("model_id").get<std::string>();
    r.n = j.at("n").get<int>();
    r.nll = j.at("nll").get<double>();
    r.ppl = j.at("ppl").get<double>();
    r.token_count = j.at("token_count").get<std::int64_t>();
    r.partial = j.at("partial").get<bool>();
    r.failed_ids = j.at("failed_ids").get<std::vector<std::string>>();
    return r;
}

namespace {

struct ExampleScore {
    std::int64_t tokens = 0;
    double sum_nll = 0.0;
};

}  // namespace

NLLReport corpus_nll(backend::Backend& backend, const std::string& model_id,
                     const corpus::CorpusPool& test_set,
                     const CorpusNllOptions& options) {
    if (test_set.pairs.empty()) {
        throw ConfigError("corpus_nll: empty test set");
    }

    // Previously scored examples: {id, token_count, sum_nll} JSON-Lines.
    std::map<std::string, ExampleScore> cache;
    if (!options.cache_path.empty() &&
        std::filesystem::exists(options.cache_path)) {
        std::ifstream in(options.cache_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded()) continue;  // torn tail line from a crash
            ExampleScore s;
            s.tokens = j.at("token_count").get<std::int64_t>();
            s.sum_nll = j.at("sum_nll").get<double>();
            cache[j.at("id").get<std::string>()] = s;
        }
    }

    std::ofstream cache_out;
    if (!options.cache_path.empty()) {
        std::filesystem::create_directories(
            std::filesystem::absolute(options.cache_path).parent_path());
        cache_out.open(options.cache_path, std::ios::app);
        if (!cache_out) {
            throw ConfigError("corpus_nll: cannot open cache file " +
                              options.cache_path.string());
        }
    }

    const auto n_examples = test_set.pairs.size();
    std::vector<std::optional<ExampleScore>> scores(n_examples);
    std::vector<std::string> failed(n_examples);
    std::mutex io_mutex;
    std::exception_ptr fatal;
    std::mutex fatal_mutex;

    util::parallel_for(n_examples, options.concurrency, [&](std::size_t i) {
        {
            std::lock_guard<std::mutex> lock(fatal_mutex);
            if (fatal) return;
        }
        const auto& pair = test_set.pairs[i];
        if (auto it = cache.find(pair.id); it != cache.end()) {
            scores[i] = it->second;
            return;
        }
        std::string prompt = util::substitute_placeholders(
            options.prompt_template, {{"question", pair.question}});
        try {
            auto tlp = backend.score_continuation(prompt, pair.answer);
            double mean = sequence_nll(tlp);  // validates the payload
            ExampleScore s;
            s.tokens = static_cast<std::int64_t>(tlp.logprobs.size());
            s.sum_nll = mean * static_cast<double>(tlp.logprobs.size());
            scores[i] = s;
            if (cache_out.is_open()) {
                json j;
                j["id"] = pair.id;
                j["token_count"] = s.tokens;
                j["sum_nll"] = s.sum_nll;
                std::lock_guard<std::mutex> lock(io_mutex);
                cache_out << j.dump() << '\n' << std::flush;
            }
        } catch (const CapabilityError&) {
            // Structural, not per-example: the backend cannot score at all.
            std::lock_guard<std::mutex> lock(fatal_mutex);
            if (!fatal) fatal = std::current_exception();
        } catch (const BackendError&) {
            failed[i] = pair.id;
        } catch (const Error&) {
            failed[i] = pair.id;
        }
    });
    if (fatal) std::rethrow_exception(fatal);

    NLLReport report;
    report.model_id = model_id;
    std::int64_t total_tokens = 0;
    double total_nll = 0.0;
    for (std::size_t i = 0; i < n_examples; i++) {
        if (scores[i]) {
            total_tokens += scores[i]->tokens;
            total_nll += scores[i]->sum_nll;
            report.per_example_nll.push_back(
                scores[i]->sum_nll / static_cast<double>(scores[i]->tokens));
        } else {
            report.partial = true;
            report.failed_ids.push_back(failed[i]);
        }
    }
    if (total_tokens == 0) {
        throw BackendError("corpus_nll: every example failed");
    }
    report.nll = total_nll / static_cast<double>(total_tokens);
    report.ppl = perplexity(report.nll);
    report.token_count = total_tokens;
    return report;
}

// ---------------------------------------------------------------------------
// Scale curves.
// ---------------------------------------------------------------------------

std::string_view to_string(ScaleStatus s) {
    switch (s) {
        case ScaleStatus::Baseline: return "Baseline";
        case ScaleStatus::Improving: return "Improving";
        case ScaleStatus::Optimal: return "Optimal";
        case ScaleStatus::Overfitting: return "Overfitting";
    }
    return "Baseline";
}

json ScalePoint::to_json() const {
    json j;
    j["n"] = n;
    if (train_loss_final) j["train_loss_final"] = *train_loss_final;
    j["test_nll"] = test_nll;
    j["test_ppl"] = test_ppl;
    if (delta_nll) j["delta_nll"] = *delta_nll;
    j["status"] = std::string(to_string(status));
    return j;
}

json ScaleCurve::to_json() const {
    json j;
    j["points"] = json::array();
    for (const auto& p : points) j["points"].push_back(p.to_json());
    j["optimal_n"] = optimal_n;
    return j;
}

ScaleCurve build_scale_curve(const std::vector<ScaleObservation>& observations) {
    if (observations.empty()) {
        throw ConfigError("scale curve needs at least one point");
    }
    for (std::size_t i = 1; i < observations.size(); i++) {
        if (observations[i].n <= observations[i - 1].n) {
            throw ConfigError("scale curve sizes must be strictly increasing");
        }
    }

    std::size_t opt = 0;
    for (std::size_t i = 1; i < observations.size(); i++) {
        if (observations[i].test_nll < observations[opt].test_nll) opt = i;
    }

    ScaleCurve curve;
    for (std::size_t i = 0; i < observations.size(); i++) {
        ScalePoint p;
        p.n = observations[i].n;
        p.train_loss_final = observations[i].train_loss;
        p.test_nll = observations[i].test_nll;
        p.test_ppl = perplexity(observations[i].test_nll);
        if (i > 0) {
            p.delta_nll = observations[i].test_nll - observations[i - 1].test_nll;
        }

        if (i == opt) {
            p.status = ScaleStatus::Optimal;
        } else if (i == 0) {
            p.status = ScaleStatus::Baseline;
        } else if (i > opt && *p.delta_nll > 0.0 &&
                   p.test_nll > observations[opt].test_nll) {
            p.status = ScaleStatus::Overfitting;
        } else if (*p.delta_nll < 0.0) {
            p.status = ScaleStatus::Improving;
        } else {
            p.status = ScaleStatus::Baseline;
        }
        curve.points.push_back(p);
    }
    curve.optimal_n = observations[opt].n;
    return curve;
}

int select_optimal_scale(const ScaleCurve& curve) {
    if (curve.points.empty()) throw ConfigError("empty scale curve");
    std::size_t opt = 0;
    for (std::size_t i = 1; i < curve.points.size(); i++) {
        if (curve.points[i].test_nll < curve.points[opt].test_nll) opt = i;
    }
    return curve.points[opt].n;
}

double overfit_degradation(const ScaleCurve& curve) {
    if (curve.points.empty()) throw ConfigError("empty scale curve");
    std::size_t opt = 0;
    for (std::size_t i = 1; i < curve.points.size(); i++) {
        if (curve.points[i].test_nll < curve.points[opt].test_nll) opt = i;
    }
    if (opt + 1 == curve.points.size()) {
        throw Error("no overfitting region");
    }
    double worst = curve.points[opt + 1].test_nll;
    for (std::size_t i = opt + 1; i < curve.points.size(); i++) {
        worst = std::max(worst, curve.points[i].test_nll);
    }
    return (worst - curve.points[opt].test_nll) / curve.points[opt].test_nll;
}

}  // namespace slmeval::nllstats
