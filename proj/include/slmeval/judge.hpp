#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "slmeval/backend.hpp"
#include "slmeval/corpus.hpp"
#include "slmeval/errors.hpp"

namespace slmeval::judge {

using json = nlohmann::ordered_json;

/// Judge output with no "SCORE: <int>" line. Retried, then the record is
/// flagged unscored.
class UnparseableScore : public Error {
public:
    using Error::Error;
};

/// Judge produced a score outside 0-3.
class ScoreOutOfRange : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Types.
// ---------------------------------------------------------------------------

/// Grading criteria, one line of text per score 0-3.
struct Rubric {
    std::array<std::string, 4> levels;  // index = score

    static Rubric default_rubric();
    json to_json() const;
    static Rubric from_json(const json& j);  // all four levels required
};

struct EvalRecord {
    std::string question_id;
    std::optional<corpus::Category> category;
    std::string candidate_answer;
    int score = 0;  // 0-3; meaningless when unscored
    std::string judge_raw;
    double latency_s = 0.0;        // candidate generation only
    std::int64_t answer_chars = 0; // Unicode scalar values, not bytes
    bool candidate_failed = false; // generation failed; scored 0 by rule
    bool unscored = false;         // judge failed; excluded from metrics

    json to_json() const;
    static EvalRecord from_json(const json& j);
};

struct EvalRun {
    std::string model_id;
    std::string format_tag;  // e.g. F16, Q4_K_M
    std::vector<EvalRecord> records;  // unique question_ids, question order
    std::string manifest_ref;
};

struct EvalMetrics {
    double avg_score = 0.0;
    double perfect_rate = 0.0;  // percent of records scored 3
    std::array<int, 4> score_dist{};  // score_dist[s] = count of score s
    double avg_latency_s = 0.0;
    double avg_chars = 0.0;

    json to_json() const;
};

struct CategoryCell {
    double mean_score = 0.0;
    int count = 0;
};

struct CategoryMatrix {
    /// Keyed by category name; records without a category group under
    /// "UNSPECIFIED".
    std::map<std::string, CategoryCell> cells;
    std::vector<std::string> warnings;

    json to_json() const;
};

struct JudgeConfig {
    std::string candidate_prompt_template = "{question}\n";
    /// Judge-output parse retries per question, on top of the first try.
    int max_retries = 2;
    /// Shows the reference answer to the judge. Disable for blind judging.
    bool show_reference = true;
    int concurrency = 1;
    std::string format_tag = "F16";
    /// Incremental JSON-Lines persistence; an interrupted run resumes by
    /// question_id, and already-persisted records are never re-evaluated.
    std::filesystem::path records_path;
};

// ---------------------------------------------------------------------------
// Operations.
// ---------------------------------------------------------------------------

/// Deterministic judging prompt embedding the rubric criteria verbatim,
/// the question, the reference answer (when given), the candidate answer,
/// and the instruction to end with "SCORE: <0-3>".
std::string build_judge_prompt(const std::string& question,
                               const std::string& reference_answer,
                               const std::string& candidate_answer,
                               const Rubric& rubric);

/// Extracts the verdict from judge output: the last "SCORE:" marker that
/// is followed by an integer wins. Throws UnparseableScore when no marker
/// parses, ScoreOutOfRange when the integer is outside 0-3.
int parse_judge_score(const std::string& judge_output);

/// Generates and judges an answer for every question. Candidate-backend
/// failure scores the record 0 with a failure flag (no answer counts as
/// wrong); judge failure after retries flags the record unscored. Records
/// are persisted as they complete when config.records_path is set.
EvalRun run_judged_eval(backend::Backend& candidate, backend::Backend& judge,
                        const corpus::CorpusPool& questions,
                        const Rubric& rubric, const JudgeConfig& config);

/// Pure aggregation over the scored records; unscored records are ignored.
/// Throws when nothing was scored.
EvalMetrics aggregate_metrics(const EvalRun& run);

/// Counts per score over scored records; zeros for an empty run.
std::array<int, 4> score_distribution(const EvalRun& run);

/// Per-category mean score and count. Categories come from the question
/// pool; a record whose question is missing one lands in UNSPECIFIED with
/// a warning.
CategoryMatrix category_breakdown(const EvalRun& run,
                                  const corpus::CorpusPool& questions);

/// Companion manifest for a persisted run: model, format tag, backend
/// endpoints, and the config hash.
json eval_run_manifest(const EvalRun& run,
                       const backend::BackendDescriptor& candidate,
                       const backend::BackendDescriptor& judge_backend,
                       const std::string& config_hash);

}  // namespace slmeval::judge
