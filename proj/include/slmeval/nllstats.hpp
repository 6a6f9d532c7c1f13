#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "slmeval/corpus.hpp"

namespace slmeval::backend {
class Backend;
}

namespace slmeval::nllstats {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Per-sequence scoring.
// ---------------------------------------------------------------------------

/// Teacher-forced log probabilities of a continuation: logprobs[t] is the
/// natural-log probability of token t given the prompt and tokens < t.
struct TokenLogProbs {
    std::vector<std::int64_t> token_ids;
    std::vector<double> logprobs;  // each <= 0
};

/// Average per-token negative log likelihood, in nats per token.
/// Throws on an empty sequence or a positive logprob (invalid backend output).
double sequence_nll(const TokenLogProbs& tlp);

/// exp(nll). Throws if nll is negative or not finite.
double perplexity(double nll);

// ---------------------------------------------------------------------------
// Corpus-level evaluation.
// ---------------------------------------------------------------------------

struct NLLReport {
    std::string model_id;
    int n = 0;  // training-set size this evaluation belongs to (0 if n/a)
    double nll = 0.0;
    double ppl = 1.0;
    std::int64_t token_count = 0;
    bool partial = false;
    std::vector<std::string> failed_ids;
    /// Per-example mean NLL for succeeded examples, in pool order.
    /// Diagnostic only; not part of the serialized document.
    std::vector<double> per_example_nll;

    json to_json() const;
    static NLLReport from_json(const json& j);
};

struct CorpusNllOptions {
    /// Text sent as the scoring prompt; {question} is substituted.
    std::string prompt_template = "{question}\n";
    int concurrency = 1;
    /// When set, per-example results are appended here as JSON-Lines of
    /// {id, token_count, sum_nll}; on a rerun, cached examples are not
    /// re-scored, so an interrupted evaluation resumes without repeating
    /// backend calls.
    std::filesystem::path cache_path;
};

/// Scores every answer in the test set under the backend and pools
/// token-weighted: corpus NLL = (sum of all per-token NLLs) / (total
/// tokens), identical to scoring one concatenated sequence. A failing
/// example is recorded in failed_ids and sets the partial flag; a
/// capability failure (backend cannot score at all) propagates.
NLLReport corpus_nll(backend::Backend& backend, const std::string& model_id,
                     const corpus::CorpusPool& test_set,
                     const CorpusNllOptions& options = {});

// ---------------------------------------------------------------------------
// Scale curves.
// ---------------------------------------------------------------------------

enum class ScaleStatus { Baseline, Improving, Optimal, Overfitting };
std::string_view to_string(ScaleStatus s);

struct ScalePoint {
    int n = 0;
    std::optional<double> train_loss_final;
    double test_nll = 0.0;
    double test_ppl = 1.0;
    std::optional<double> delta_nll;  // vs previous point; absent on first
    ScaleStatus status = ScaleStatus::Baseline;

    json to_json() const;
};

struct ScaleCurve {
    std::vector<ScalePoint> points;  // ordered by strictly increasing n
    int optimal_n = 0;               // n of the unique Optimal point

    json to_json() const;
};

struct ScaleObservation {
    int n = 0;
    std::optional<double> train_loss;
    double test_nll = 0.0;
};

/// Labels a measured curve. The global-minimum-NLL point is Optimal
/// (ties go to the smallest n); the first point is Baseline unless it is
/// Optimal; pre-optimum points with falling NLL are Improving; post-optimum
/// points with rising NLL are Overfitting. A point not covered by those
/// rules (a non-monotone bump) keeps Improving when its NLL fell and
/// Baseline otherwise.
ScaleCurve build_scale_curve(const std::vector<ScaleObservation>& observations);

/// n at the minimum test NLL, smallest n on ties.
int select_optimal_scale(const ScaleCurve& curve);

/// Relative NLL rise past the optimum: (max post-optimum NLL − optimal
/// NLL) / optimal NLL. Throws "no overfitting region" when the optimum is
/// the last point.
double overfit_degradation(const ScaleCurve& curve);

}  // namespace slmeval::nllstats
