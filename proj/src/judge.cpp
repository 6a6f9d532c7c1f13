#include "slmeval/judge.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <mutex>
#include <sstream>

#include "slmeval/util.hpp"

namespace slmeval::judge {

// ---------------------------------------------------------------------------
// Rubric.
// ---------------------------------------------------------------------------

Rubric Rubric::default_rubric() {
    Rubric r;
    r.levels[3] =
        "Accurate and specific; names the governing standard, volume, "
        "chapter, or technical term that supports the answer.";
    r.levels[2] = "Correct overall but gives no supporting source or "
                  "concrete detail.";
    r.levels[1] = "Only partially correct, with material errors or gaps.";
    r.levels[0] = "Wrong, irrelevant, or missing entirely.";
    return r;
}

json Rubric::to_json() const {
    json j;
    for (int s = 3; s >= 0; s--) j[std::to_string(s)] = levels[s];
    return j;
}

Rubric Rubric::from_json(const json& j) {
    Rubric r;
    for (int s = 0; s <= 3; s++) {
        auto key = std::to_string(s);
        if (!j.contains(key) || !j[key].is_string() ||
            j[key].get<std::string>().empty()) {
            throw ConfigError("rubric is missing level " + key);
        }
        r.levels[s] = j[key].get<std::string>();
    }
    return r;
}

// ---------------------------------------------------------------------------
// Records.
// ---------------------------------------------------------------------------

json EvalRecord::to_json() const {
    json j;
    j["question_id"] = question_id;
    if (category) j["category"] = std::string(corpus::to_string(*category));
    j["candidate_answer"] = candidate_answer;
    j["score"] = score;
    j["judge_raw"] = judge_raw;
    j["latency_s"] = latency_s;
    j["answer_chars"] = answer_chars;
    j["candidate_failed"] = candidate_failed;
    j["unscored"] = unscored;
    return j;
}

EvalRecord EvalRecord::from_json(const json& j) {
    EvalRecord r;
    r.question_id = j.at("question_id").get<std::string>();
    if (j.contains("category")) {
        r.category = corpus::category_from_string(j["category"].get<std::string>());
    }
    r.candidate_answer = j.at("candidate_answer").get<std::string>();
    r.score = j.at("score").get<int>();
    r.judge_raw = j.at("judge_raw").get<std::string>();
    r.latency_s = j.at("latency_s").get<double>();
    r.answer_chars = j.at("answer_chars").get<std::int64_t>();
    r.candidate_failed = j.value("candidate_failed", false);
    r.unscored = j.value("unscored", false);
    if (!r.unscored && (r.score < 0 || r.score > 3)) {
        throw ConfigError("persisted record has score outside 0-3: " +
                          r.question_id);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Prompt and parsing.
// ---------------------------------------------------------------------------

std::string build_judge_prompt(const std::string& question,
                               const std::string& reference_answer,
                               const std::string& candidate_answer,
                               const Rubric& rubric) {
    if (question.empty() || candidate_answer.empty()) {
        throw ConfigError("judge prompt needs a question and a candidate answer");
    }
    std::ostringstream out;
    out << "You are grading one answer to a technical question.\n\n"
        << "Scoring rubric:\n";
    for (int s = 3; s >= 0; s--) {
        out << s << ": " << rubric.levels[s] << "\n";
    }
    out << "\nQuestion:\n" << question << "\n";
    if (!reference_answer.empty()) {
        out << "\nReference answer:\n" << reference_answer << "\n";
    }
    out << "\nCandidate answer:\n" << candidate_answer << "\n";
    out << "\nJudge the candidate against the rubric. "
           "End your reply with a single line of the form:\nSCORE: <0-3>\n";
    return out.str();
}

int parse_judge_score(const std::string& judge_output) {
    constexpr std::string_view kMarker = "SCORE:";
    bool saw_integer = false;
    long best = 0;
    std::size_t pos = 0;
    while ((pos = judge_output.find(kMarker, pos)) != std::string::npos) {
        std::size_t i = pos + kMarker.size();
        while (i < judge_output.size() &&
               (judge_output[i] == ' ' || judge_output[i] == '\t')) {
            i++;
        }
        std::size_t start = i;
        if (i < judge_output.size() &&
            (judge_output[i] == '-' || judge_output[i] == '+')) {
            i++;
        }
        std::size_t digits = i;
        while (i < judge_output.size() &&
               std::isdigit(static_cast<unsigned char>(judge_output[i]))) {
            i++;
        }
        if (i > digits) {  // the marker is followed by an integer
            best = std::stol(judge_output.substr(start, i - start));
            saw_integer = true;
        }
        pos += kMarker.size();
    }
    if (!saw_integer) {
        throw UnparseableScore("judge output has no SCORE line");
    }
    if (best < 0 || best > 3) {
        throw ScoreOutOfRange("judge score outside 0-3: " + std::to_string(best));
    }
    return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Evaluation loop.
// ---------------------------------------------------------------------------

namespace {

std::map<std::string, EvalRecord> load_records(const std::filesystem::path& path) {
    std::map<std::string, EvalRecord> out;
    if (path.empty() || !std::filesystem::exists(path)) return out;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;  // torn tail line from a kill
        auto rec = EvalRecord::from_json(j);
        out[rec.question_id] = std::move(rec);
    }
    return out;
}

}  // namespace

EvalRun run_judged_eval(backend::Backend& candidate, backend::Backend& judge,
                        const corpus::CorpusPool& questions,
                        const Rubric& rubric, const JudgeConfig& config) {
    if (questions.pairs.empty()) {
        throw ConfigError("judged evaluation over an empty question set");
    }
    {
        std::map<std::string, int> seen;
        for (const auto& q : questions.pairs) {
            if (++seen[q.id] > 1) {
                throw ConfigError("duplicate question id: " + q.id);
            }
        }
    }

    // Records from an earlier (possibly interrupted) run are final,
    // including unscored ones: a rerun never re-spends backend calls on
    // them. Delete the records file to force re-evaluation.
    auto done = load_records(config.records_path);

    std::ofstream persist;
    std::mutex persist_mutex;
    if (!config.records_path.empty()) {
        std::filesystem::create_directories(
            std::filesystem::absolute(config.records_path).parent_path());
        persist.open(config.records_path, std::ios::app);
        if (!persist) {
            throw ConfigError("cannot open records file " +
                              config.records_path.string());
        }
    }

    std::vector<EvalRecord> fresh(questions.pairs.size());
    std::vector<bool> is_fresh(questions.pairs.size(), false);
    std::exception_ptr fatal;
    std::mutex fatal_mutex;

    util::parallel_for(questions.pairs.size(), config.concurrency,
                       [&](std::size_t i) {
        {
            std::lock_guard<std::mutex> lock(fatal_mutex);
            if (fatal) return;
        }
        const auto& q = questions.pairs[i];
        if (done.count(q.id)) return;

        EvalRecord rec;
        rec.question_id = q.id;
        rec.category = q.category;
        try {
            std::string prompt = util::substitute_placeholders(
                config.candidate_prompt_template, {{"question", q.question}});

            bool generated = false;
            try {
                auto gen = candidate.generate(prompt);
                rec.candidate_answer = gen.text;
                rec.latency_s = gen.latency_s;
                rec.answer_chars = util::utf8_codepoints(gen.text);
                generated = true;
            } catch (const BackendError& e) {
                // No answer is a wrong answer: scored 0, flagged.
                rec.candidate_failed = true;
                rec.score = 0;
                rec.judge_raw = std::string("candidate backend failed: ") +
                                e.what();
            }

            if (generated) {
                if (rec.candidate_answer.empty()) {
                    // An empty completion cannot be judged; by the same
                    // no-answer rule it scores 0.
                    rec.candidate_failed = true;
                    rec.score = 0;
                    rec.judge_raw = "candidate returned an empty answer";
                } else {
                    std::string judge_prompt = build_judge_prompt(
                        q.question, config.show_reference ? q.answer : "",
                        rec.candidate_answer, rubric);
                    bool parsed = false;
                    for (int attempt = 0;
                         attempt <= config.max_retries && !parsed; attempt++) {
                        try {
                            auto verdict = judge.generate(judge_prompt);
                            rec.judge_raw = verdict.text;
                            rec.score = parse_judge_score(verdict.text);
                            parsed = true;
                        } catch (const UnparseableScore& e) {
                            rec.judge_raw = e.what();
                        } catch (const ScoreOutOfRange& e) {
                            rec.judge_raw = e.what();
                        } catch (const BackendError& e) {
                            rec.judge_raw =
                                std::string("judge backend failed: ") + e.what();
                        }
                    }
                    if (!parsed) {
                        rec.unscored = true;
                        rec.score = 0;
                    }
                }
            }
        } catch (const ConfigError&) {
            std::lock_guard<std::mutex> lock(fatal_mutex);
            if (!fatal) fatal = std::current_exception();
            return;
        } catch (const CapabilityError&) {
            std::lock_guard<std::mutex> lock(fatal_mutex);
            if (!fatal) fatal = std::current_exception();
            return;
        }

        fresh[i] = rec;
        is_fresh[i] = true;
        if (persist.is_open()) {
            std::lock_guard<std::mutex> lock(persist_mutex);
            persist << rec.to_json().dump() << '\n' << std::flush;
        }
    });
    if (fatal) std::rethrow_exception(fatal);

    EvalRun run;
    run.model_id = candidate.descriptor().model_id;
    run.format_tag = config.format_tag;
    if (!config.records_path.empty()) {
        run.manifest_ref = config.records_path.string();
    }
    for (std::size_t i = 0; i < questions.pairs.size(); i++) {
        const auto& id = questions.pairs[i].id;
        if (auto it = done.find(id); it != done.end()) {
            run.records.push_back(it->second);
        } else if (is_fresh[i]) {
            run.records.push_back(fresh[i]);
        }
    }
    return run;
}

// ---------------------------------------------------------------------------
// Aggregation.
// ---------------------------------------------------------------------------

json EvalMetrics::to_json() const {
    json j;
    j["avg_score"] = avg_score;
    j["perfect_rate"] = perfect_rate;
    json dist;
    for (int s = 3; s >= 0; s--) dist[std::to_string(s)] = score_dist[s];
    j["score_dist"] = dist;
    j["avg_latency_s"] = avg_latency_s;
    j["avg_chars"] = avg_chars;
    return j;
}

EvalMetrics aggregate_metrics(const EvalRun& run) {
    EvalMetrics m;
    std::int64_t n = 0;
    double score_sum = 0, latency_sum = 0, chars_sum = 0;
    for (const auto& r : run.records) {
        if (r.unscored) continue;
        n++;
        score_sum += r.score;
        latency_sum += r.latency_s;
        chars_sum += static_cast<double>(r.answer_chars);
        m.score_dist[r.score]++;
    }
    if (n == 0) throw Error("no scored records to aggregate");
    m.avg_score = score_sum / static_cast<double>(n);
    m.perfect_rate = 100.0 * static_cast<double>(m.score_dist[3]) /
                     static_cast<double>(n);
    m.avg_latency_s = latency_sum / static_cast<double>(n);
    m.avg_chars = chars_sum / static_cast<double>(n);
    return m;
}

std::array<int, 4> score_distribution(const EvalRun& run) {
    std::array<int, 4> dist{};
    for (const auto& r : run.records) {
        if (!r.unscored) dist[r.score]++;
    }
    return dist;
}

json CategoryMatrix::to_json() const {
    json j;
    json rows;
    for (const auto& [name, cell] : cells) {
        rows[name] = {{"mean_score", cell.mean_score}, {"count", cell.count}};
    }
    j["cells"] = rows;
    j["warnings"] = warnings;
    return j;
}

CategoryMatrix category_breakdown(const EvalRun& run,
                                  const corpus::CorpusPool& questions) {
    std::map<std::string, std::optional<corpus::Category>> category_of;
    for (const auto& q : questions.pairs) category_of[q.id] = q.category;

    CategoryMatrix matrix;
    std::map<std::string, std::pair<double, int>> sums;  // name -> (sum, count)
    for (const auto& r : run.records) {
        if (r.unscored) continue;
        std::string name = "UNSPECIFIED";
        auto it = category_of.find(r.question_id);
        if (it == category_of.end()) {
            matrix.warnings.push_back("record " + r.question_id +
                                      " has no question in the pool");
        } else if (!it->second) {
            matrix.warnings.push_back("question " + r.question_id +
                                      " has no category");
        } else {
            name = std::string(corpus::to_string(*it->second));
        }
        auto& [sum, count] = sums[name];
        sum += r.score;
        count++;
    }
    for (const auto& [name, sc] : sums) {
        matrix.cells[name] = {sc.first / sc.second, sc.second};
    }
    return matrix;
}

json eval_run_manifest(const EvalRun& run,
                       const backend::BackendDescriptor& candidate,
                       const backend::BackendDescriptor& judge_backend,
                       const std::string& config_hash) {
    json j;
    j["model_id"] = run.model_id;
    j["format_tag"] = run.format_tag;
    j["candidate_backend"] = candidate.to_json();
    j["judge_backend"] = judge_backend.to_json();
    j["config_hash"] = config_hash;
    j["records"] = run.manifest_ref;
    return j;
}

}  // namespace slmeval::judge
