#pragma once

// Pipeline orchestration: model profiles, quantization A/B comparison,
// architecture-aware quantization recommendations, report emission, run
// manifests, and the three resumable pipeline stages behind the CLI.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "slmeval/errors.hpp"
#include "slmeval/judge.hpp"
#include "slmeval/nllstats.hpp"

namespace slmeval::orchestrator {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Profiles and comparison.
// ---------------------------------------------------------------------------

enum class Architecture { MHA, GQA, MHA_AltTokenizer };
enum class FormatTag { F16, Q4_K_M, Q8_0, HF4bit };
enum class Verdict { Improves, Neutral, Degrades, Blocked };

std::string_view to_string(Architecture a);
std::string_view to_string(FormatTag f);
std::string_view to_string(Verdict v);
/// Parsers return nullopt for unknown names (callers choose whether that
/// is an error or the conservative-default path).
std::optional<Architecture> architecture_from_string(std::string_view s);
std::optional<FormatTag> format_tag_from_string(std::string_view s);

struct ModelProfile {
    std::string model_id;
    Architecture architecture = Architecture::MHA;
    FormatTag format_tag = FormatTag::F16;
    std::optional<double> size_gb;  // must be positive when present

    void validate() const;
    json to_json() const;
    static ModelProfile from_json(const json& j);
};

/// Knobs beyond the neutral band: the deploy-block line (an average-score
/// drop at or past it blocks the quantized build) and the on-disk sizes
/// feeding size_ratio.
struct CompareExtras {
    double deploy_block = 0.1;
    std::optional<double> base_size_gb;
    std::optional<double> quant_size_gb;
};

struct ComparisonReport {
    std::string model_id;
    judge::EvalMetrics base;   // full-precision build
    judge::EvalMetrics quant;  // quantized build
    double delta_score = 0.0;       // quant - base
    double delta_perfect_pp = 0.0;  // percentage points
    double speedup = 0.0;           // base latency / quant latency
    std::optional<double> size_ratio;  // base size / quant size
    Verdict verdict = Verdict::Neutral;

    json to_json() const;
    static ComparisonReport from_json(const json& j);
};

/// Scores a quantized build against its full-precision baseline. Verdict:
/// Blocked when delta_score <= -deploy_block, otherwise Neutral within
/// +/- threshold, Improves above it, Degrades below it. Both metric sets
/// must cover the same number of questions. HF4bit profiles are not
/// comparable (no like-for-like GGUF pair) and are rejected.
ComparisonReport compare_formats(const judge::EvalMetrics& base,
                                 const judge::EvalMetrics& quant,
                                 const ModelProfile& profile,
                                 double threshold = 0.005,
                                 const CompareExtras& extras = {});

struct Recommendation {
    FormatTag format = FormatTag::F16;
    std::optional<FormatTag> alternative;
    std::string rationale;
    bool warning = false;  // conservative fallback taken

    json to_json() const;
};

/// Architecture-based quantization choice: MHA tolerates Q4_K_M (quality
/// improves), GQA should stay at F16 or Q8_0 (Q4 causes degradation),
/// and MHA models with a non-standard tokenizer take the HF 4-bit path
/// (GGUF tokenizer issue). Anything else falls back to F16 with a warning.
Recommendation recommend_quantization(const ModelProfile& profile);
Recommendation recommend_for_architecture(std::optional<Architecture> arch);

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

enum class ReportKind { ScaleCurve, ModelTable, ScoreDist, CategoryHeatmap, QuantTable };

std::string_view to_string(ReportKind k);
std::optional<ReportKind> report_kind_from_string(std::string_view s);

/// In-memory inputs for report emission, loaded from run artifacts.
struct RunArtifacts {
    std::optional<nllstats::ScaleCurve> scale_curve;
    /// (model_id, metrics), in configuration order.
    std::vector<std::pair<std::string, judge::EvalMetrics>> model_metrics;
    std::vector<std::pair<std::string, judge::CategoryMatrix>> categories;
    std::vector<ComparisonReport> comparisons;
    std::vector<std::pair<std::string, Recommendation>> recommendations;
};

/// Writes three files per kind into out_dir: a plain-text table, a JSON
/// document, and a comma-separated plot-data file. Output bytes depend
/// only on the inputs. A missing input names the stage that produces it.
std::vector<std::filesystem::path> emit_report(const RunArtifacts& artifacts,
                                               ReportKind kind,
                                               const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Run directory and manifests.
// ---------------------------------------------------------------------------

enum class Stage { Scale, CompareModels, Quantize };
std::string_view to_string(Stage s);
std::optional<Stage> stage_from_string(std::string_view s);

/// Canonical layout of a run directory: manifest.json plus logs/,
/// artifacts/, and reports/.
struct RunPaths {
    std::filesystem::path run_dir;

    std::filesystem::path manifest() const { return run_dir / "manifest.json"; }
    std::filesystem::path lock() const { return run_dir / ".lock"; }
    std::filesystem::path logs() const { return run_dir / "logs"; }
    std::filesystem::path artifacts() const { return run_dir / "artifacts"; }
    std::filesystem::path reports() const { return run_dir / "reports"; }

    std::filesystem::path ingest_errors() const;
    std::filesystem::path rebalanced_pool() const;
    std::filesystem::path rebalance_report() const;
    std::filesystem::path subset(int n) const;
    std::filesystem::path quality_report() const;
    std::filesystem::path train_marker(int n) const;
    std::filesystem::path train_log(int n) const;
    std::filesystem::path model_dir(int n) const;
    std::filesystem::path nll_cache(int n) const;
    std::filesystem::path nll_report(int n) const;
    std::filesystem::path scale_curve() const;
    std::filesystem::path eval_summary(const std::string& model_id,
                                       const std::string& format_tag) const;
    std::filesystem::path judge_records(const std::string& model_id,
                                        const std::string& format_tag) const;
    std::filesystem::path convert_marker(const std::string& model_id) const;
    std::filesystem::path convert_log(const std::string& model_id) const;
    std::filesystem::path compare_report(const std::string& model_id) const;
};

/// File-name-safe form of a model id (non [A-Za-z0-9._-] become '_').
std::string sanitize_id(const std::string& id);

/// Immutable record of one completed stage: what ran, under which config
/// hash and seeds, over which datasets, against which backends, and what
/// it produced. Re-running a completed stage must leave it byte-identical.
struct StageManifest {
    Stage stage = Stage::Scale;
    std::string config_hash;
    json seeds = json::object();
    std::vector<std::string> dataset_ids;
    json backends = json::object();
    std::string started_at;
    std::string completed_at;  // empty until the stage finishes
    std::vector<std::string> artifacts;
    std::vector<std::string> reports;

    json to_json() const;
    static StageManifest from_json(const json& j);
    /// Content hash of the serialized manifest entry.
    std::string hash() const;
};

// ---------------------------------------------------------------------------
// Configuration and pipeline.
// ---------------------------------------------------------------------------

/// One JSON config file with per-stage sections ("corpus", "scale",
/// "judge", "quantize"). Every stage section carries an explicit integer
/// "seed"; relative paths resolve against the config file's directory.
struct PipelineConfig {
    json raw = json::object();
    std::filesystem::path base_dir = ".";

    static PipelineConfig load(const std::filesystem::path& path);
    static PipelineConfig from_json(const json& doc,
                                    const std::filesystem::path& base_dir);

    const json& section(const std::string& name) const;
    bool has_section(const std::string& name) const;
    std::filesystem::path resolve(const std::string& relative) const;
};

/// Hash of the config sections a stage depends on; recorded in the
/// manifest and used to refuse silent reruns under a changed config.
std::string stage_config_hash(const PipelineConfig& config, Stage stage);

struct RunOptions {
    std::filesystem::path run_dir;
    std::optional<std::uint64_t> seed_override;  // replaces the stage seed
    /// Prints planned external commands and stage steps without executing
    /// anything or writing any artifact.
    bool dry_run = false;
};

/// Executes one pipeline stage end to end under a run-directory lock:
///   Scale          rebalance -> nested subsets -> validation -> optional
///                  training hooks -> per-size corpus NLL -> scale curve
///                  -> ScaleCurve report
///   CompareModels  judged eval per candidate -> metrics, distributions,
///                  category breakdowns -> ModelTable/ScoreDist/
///                  CategoryHeatmap reports
///   Quantize       optional conversion hooks -> judged eval per format
///                  -> compare_formats + recommendation -> QuantTable
/// Every artifact is skipped when it already exists, so an interrupted
/// stage resumes without repeating backend calls; a completed stage is a
/// no-op under the same config hash and an error under a different one.
StageManifest run_pipeline(const PipelineConfig& config, Stage stage,
                           const RunOptions& options);

/// Reads back whatever report inputs exist under the run directory,
/// using the config for model ordering. Missing artifacts simply leave
/// their slot empty; emit_report then names the stage to run.
RunArtifacts load_run_artifacts(const PipelineConfig& config, const RunPaths& paths);

/// Parsed manifest.json ({"stages": {...}}), or an empty skeleton.
json load_manifest(const RunPaths& paths);

}  // namespace slmeval::orchestrator
