/// Command-line front end for the evaluation harness. Every subcommand is a
/// thin wrapper over the library: configuration comes from one JSON file,
/// artifacts and reports live under a run directory, and exit codes are
/// stable for scripting (0 success, 2 configuration error, 3 stage failure,
/// 4 backend failure).

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "slmeval/backend.hpp"
#include "slmeval/corpus.hpp"
#include "slmeval/errors.hpp"
#include "slmeval/judge.hpp"
#include "slmeval/nllstats.hpp"
#include "slmeval/orchestrator.hpp"
#include "slmeval/util.hpp"

namespace fs = std::filesystem;
using namespace slmeval;
using orchestrator::PipelineConfig;
using orchestrator::ReportKind;
using orchestrator::RunOptions;
using orchestrator::RunPaths;
using orchestrator::Stage;
using json = nlohmann::ordered_json;

namespace {

// ---- shared helpers ----

PipelineConfig load_config(const std::string& path) {
    if (path.empty()) throw ConfigError("--config is required");
    return PipelineConfig::load(path);
}

RunPaths run_paths(const std::string& run_dir) {
    if (run_dir.empty()) throw ConfigError("--run-dir is required");
    return RunPaths{fs::path(run_dir)};
}

const json& need(const json& sec, const std::string& key, const std::string& where) {
    auto it = sec.find(key);
    if (it == sec.end()) {
        throw ConfigError("config: " + where + "." + key + " is required");
    }
    return *it;
}

std::vector<int> scale_sizes(const json& scale_sec) {
    const json& arr = need(scale_sec, "sizes", "scale");
    if (!arr.is_array() || arr.empty()) {
        throw ConfigError("config: scale.sizes must be a non-empty array");
    }
    std::vector<int> sizes;
    for (const auto& s : arr) sizes.push_back(s.get<int>());
    return sizes;
}

corpus::IngestResult ingest_from_config(const PipelineConfig& cfg) {
    const json& sec = cfg.section("corpus");
    const json& files_j = need(sec, "files", "corpus");
    if (!files_j.is_array() || files_j.empty()) {
        throw ConfigError("config: corpus.files must be a non-empty array");
    }
    std::vector<fs::path> files;
    for (const auto& f : files_j) files.push_back(cfg.resolve(f.get<std::string>()));
    return corpus::ingest_corpus(files);
}

corpus::CorpusPool load_pool(const fs::path& path, const std::string& missing_hint) {
    if (!fs::exists(path)) {
        throw Error(path.string() + " is missing; " + missing_hint);
    }
    return corpus::ingest_corpus({path}).pool;
}

corpus::CorpusPool load_test_set(const PipelineConfig& cfg, const json& scale_sec) {
    fs::path file =
        cfg.resolve(need(scale_sec, "test_file", "scale").get<std::string>());
    auto res = corpus::ingest_corpus({file});
    if (res.pool.pairs.empty()) {
        throw ConfigError("config: scale.test_file " + file.string() +
                          " contains no usable pairs");
    }
    return res.pool;
}

// ---- subcommand bodies ----

void cmd_ingest(const std::string& config_path, const std::string& run_dir) {
    auto cfg = load_config(config_path);
    auto res = ingest_from_config(cfg);
    if (!run_dir.empty() && !res.errors.empty()) {
        corpus::write_ingest_errors(res.errors, run_paths(run_dir).ingest_errors());
    }
    std::cout << "ingested " << res.pool.size() << " pairs ("
              << res.duplicates_dropped << " duplicates dropped, "
              << res.unknown_relations << " unknown relations, "
              << res.rejected_records << " rejected records)\n";
    auto counts = res.pool.relation_counts();
    for (int r = 0; r < corpus::kRelationTypeCount; r++) {
        if (counts[static_cast<std::size_t>(r)] == 0) continue;
        std::cout << "  " << corpus::to_string(static_cast<corpus::RelationType>(r))
                  << "  " << counts[static_cast<std::size_t>(r)] << "\n";
    }
    if (!run_dir.empty() && !res.errors.empty()) {
        std::cout << "error details: "
                  << run_paths(run_dir).ingest_errors().string() << "\n";
    }
}

void cmd_rebalance(const PipelineConfig& cfg, const RunPaths& paths) {
    const json& sec = cfg.section("corpus");
    util::LockFile lock(paths.lock());
    auto res = ingest_from_config(cfg);
    if (!res.errors.empty()) {
        corpus::write_ingest_errors(res.errors, paths.ingest_errors());
    }
    std::string target = need(sec, "target_relation", "corpus").get<std::string>();
    bool known = false;
    auto relation = corpus::relation_from_string(target, &known);
    if (!known) {
        throw ConfigError("config: corpus.target_relation '" + target +
                          "' is not a known relation");
    }
    corpus::RebalancePolicy policy;
    policy.target_relation = relation;
    policy.retain_fraction = need(sec, "retain_fraction", "corpus").get<double>();
    policy.seed = need(sec, "seed", "corpus").get<std::uint64_t>();
    corpus::RebalanceReport report;
    auto pool = corpus::rebalance(res.pool, policy, &report);
    corpus::write_subset(pool, paths.rebalanced_pool());
    util::write_file(paths.rebalance_report(), report.to_json().dump(2) + "\n");
    std::cout << report.summary() << "\n";
    std::cout << "rebalanced pool: " << paths.rebalanced_pool().string() << "\n";
}

void cmd_subsets(const PipelineConfig& cfg, const RunPaths& paths,
                 std::optional<std::uint64_t> seed_override) {
    const json& sec = cfg.section("scale");
    util::LockFile lock(paths.lock());
    auto pool = load_pool(paths.rebalanced_pool(), "run the rebalance step first");
    corpus::SubsetSpec spec;
    spec.sizes = scale_sizes(sec);
    spec.seed = need(sec, "seed", "scale").get<std::uint64_t>();
    if (seed_override) spec.seed = *seed_override;
    auto subsets = corpus::make_nested_subsets(pool, spec);
    for (std::size_t i = 0; i < subsets.size(); i++) {
        corpus::write_subset(subsets[i], paths.subset(spec.sizes[i]));
        std::cout << "subset n=" << spec.sizes[i] << ": "
                  << paths.subset(spec.sizes[i]).string() << "\n";
    }
    if (subsets.size() >= 2) {
        auto quality = corpus::validate_subsets(subsets);
        util::write_file(paths.quality_report(), quality.to_json().dump(2) + "\n");
        std::cout << (quality.flagged.empty()
                          ? "subset proportions stable across sizes"
                          : "WARNING: subset proportions drift; see quality report")
                  << "\n";
    }
}

void cmd_validate(const PipelineConfig& cfg, const RunPaths& paths) {
    const json& sec = cfg.section("scale");
    util::LockFile lock(paths.lock());
    std::vector<corpus::CorpusPool> subsets;
    for (int n : scale_sizes(sec)) {
        subsets.push_back(
            load_pool(paths.subset(n), "run the subsets step first"));
    }
    auto quality = corpus::validate_subsets(subsets);
    util::write_file(paths.quality_report(), quality.to_json().dump(2) + "\n");
    double worst = 0.0;
    for (double cv : quality.proportion_cv) worst = std::max(worst, cv);
    std::cout << "worst relation-proportion CV: " << worst * 100.0 << "%\n";
    for (const auto& note : quality.notes) std::cout << "  " << note << "\n";
    if (quality.flagged.empty()) {
        std::cout << "all relation proportions within the "
                  << corpus::kProportionCvThreshold * 100.0 << "% threshold\n";
    } else {
        std::cout << "flagged relations:";
        for (auto r : quality.flagged) std::cout << " " << corpus::to_string(r);
        std::cout << "\n";
    }
    std::cout << "quality report: " << paths.quality_report().string() << "\n";
}

void cmd_eval_nll(const PipelineConfig& cfg, const RunPaths& paths) {
    const json& sec = cfg.section("scale");
    need(sec, "seed", "scale");
    util::LockFile lock(paths.lock());
    auto sizes = scale_sizes(sec);
    const json& backends = need(sec, "backends", "scale");

    corpus::CorpusPool test_pool;
    bool test_loaded = false;
    for (int n : sizes) {
        auto it = backends.find(std::to_string(n));
        if (it == backends.end()) {
            throw ConfigError("config: scale.backends has no entry for size " +
                              std::to_string(n));
        }
        auto desc = backend::BackendDescriptor::from_json(*it);
        if (fs::exists(paths.nll_report(n))) {
            std::cout << "n=" << n << ": already evaluated\n";
            continue;
        }
        if (!test_loaded) {
            test_pool = load_test_set(cfg, sec);
            test_loaded = true;
        }
        auto be = backend::make_backend(desc);
        nllstats::CorpusNllOptions opt;
        if (sec.contains("prompt_template")) {
            opt.prompt_template = sec["prompt_template"].get<std::string>();
        }
        if (sec.contains("concurrency")) {
            opt.concurrency = sec["concurrency"].get<int>();
        }
        opt.cache_path = paths.nll_cache(n);
        auto report = nllstats::corpus_nll(*be, desc.model_id, test_pool, opt);
        report.n = n;
        util::write_file(paths.nll_report(n), report.to_json().dump(2) + "\n");
        std::cout << "n=" << n << ": NLL " << report.nll << ", PPL " << report.ppl
                  << (report.partial ? " (partial)" : "") << "\n";
    }

    std::vector<nllstats::ScaleObservation> observations;
    for (int n : sizes) {
        auto report = nllstats::NLLReport::from_json(
            json::parse(util::read_file(paths.nll_report(n))));
        nllstats::ScaleObservation o;
        o.n = n;
        o.test_nll = report.nll;
        if (sec.contains("train_losses") &&
            sec["train_losses"].contains(std::to_string(n))) {
            o.train_loss = sec["train_losses"][std::to_string(n)].get<double>();
        }
        observations.push_back(o);
    }
    auto curve = nllstats::build_scale_curve(observations);
    util::write_file(paths.scale_curve(), curve.to_json().dump(2) + "\n");
    orchestrator::RunArtifacts arts;
    arts.scale_curve = curve;
    emit_report(arts, ReportKind::ScaleCurve, paths.reports());
    std::cout << "optimal n: " << curve.optimal_n << "\n";
    std::cout << "scale-curve report: "
              << (paths.reports() / "scale_curve.txt").string() << "\n";
}

void cmd_recommend(const PipelineConfig& cfg) {
    const json& sec = cfg.section("quantize");
    const json& models = need(sec, "models", "quantize");
    if (!models.is_array() || models.empty()) {
        throw ConfigError("config: quantize.models must be a non-empty array");
    }
    for (const auto& entry : models) {
        std::string model_id =
            need(entry, "model_id", "quantize.models").get<std::string>();
        std::string arch_str =
            need(entry, "architecture", "quantize.models").get<std::string>();
        auto rec = orchestrator::recommend_for_architecture(
            orchestrator::architecture_from_string(arch_str));
        std::cout << model_id << ": " << orchestrator::to_string(rec.format);
        if (rec.alternative) {
            std::cout << " (or " << orchestrator::to_string(*rec.alternative) << ")";
        }
        std::cout << " - " << rec.rationale;
        if (rec.warning) std::cout << " [warning]";
        std::cout << "\n";
    }
}

void cmd_report(const PipelineConfig& cfg, const RunPaths& paths,
                const std::string& stage_name) {
    auto arts = orchestrator::load_run_artifacts(cfg, paths);
    std::vector<ReportKind> kinds;
    if (!stage_name.empty()) {
        auto stage = orchestrator::stage_from_string(stage_name);
        if (!stage) throw ConfigError("unknown stage '" + stage_name + "'");
        switch (*stage) {
            case Stage::Scale:
                kinds = {ReportKind::ScaleCurve};
                break;
            case Stage::CompareModels:
                kinds = {ReportKind::ModelTable, ReportKind::ScoreDist,
                         ReportKind::CategoryHeatmap};
                break;
            case Stage::Quantize:
                kinds = {ReportKind::QuantTable};
                break;
        }
    } else {
        if (arts.scale_curve) kinds.push_back(ReportKind::ScaleCurve);
        if (!arts.model_metrics.empty()) {
            kinds.push_back(ReportKind::ModelTable);
            kinds.push_back(ReportKind::ScoreDist);
        }
        for (const auto& [id, matrix] : arts.categories) {
            if (!matrix.cells.empty()) {
                kinds.push_back(ReportKind::CategoryHeatmap);
                break;
            }
        }
        if (!arts.comparisons.empty()) kinds.push_back(ReportKind::QuantTable);
        if (kinds.empty()) {
            throw Error("no artifacts found in " + paths.run_dir.string() +
                        "; run a stage first");
        }
    }
    for (auto kind : kinds) {
        for (const auto& p : emit_report(arts, kind, paths.reports())) {
            std::cout << p.string() << "\n";
        }
    }
}

void cmd_run(const PipelineConfig& cfg, Stage stage, const RunOptions& options) {
    auto manifest = orchestrator::run_pipeline(cfg, stage, options);
    if (options.dry_run) return;
    std::cout << "stage " << orchestrator::to_string(stage) << " completed in "
              << options.run_dir.string() << "\n";
    for (const auto& r : manifest.reports) {
        std::cout << "  " << (options.run_dir / r).string() << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "slmeval - corpus rebalancing, training-scale selection, judged "
        "evaluation, and quantization comparison for small language models"};
    app.require_subcommand(1);

    std::string config_path, run_dir, stage_name;
    std::uint64_t seed = 0;
    bool dry_run = false;

    auto add_common = [&](CLI::App* sub, bool with_run_dir) {
        sub->add_option("--config", config_path, "pipeline configuration (JSON)")
            ->required();
        if (with_run_dir) {
            sub->add_option("--run-dir", run_dir,
                            "run directory for artifacts, logs, and reports")
                ->required();
        }
        return sub;
    };

    auto* c_ingest = app.add_subcommand("ingest", "read and check the QA corpus");
    c_ingest->add_option("--config", config_path, "pipeline configuration (JSON)")
        ->required();
    c_ingest->add_option("--run-dir", run_dir, "where to write the error report");

    auto* c_rebalance = add_common(
        app.add_subcommand("rebalance", "downsample the dominant relation"), true);
    auto* c_subsets = add_common(
        app.add_subcommand("subsets", "build nested training subsets"), true);
    auto* seed_subsets =
        c_subsets->add_option("--seed", seed, "override the subset sampling seed");
    auto* c_validate = add_common(
        app.add_subcommand("validate", "check subset distribution stability"), true);
    auto* c_eval_nll = add_common(
        app.add_subcommand("eval-nll", "score test-set NLL per training size"), true);
    auto* c_judge = add_common(
        app.add_subcommand("judge", "run the judged model comparison stage"), true);
    auto* seed_judge =
        c_judge->add_option("--seed", seed, "override the stage seed");
    c_judge->add_flag("--dry-run", dry_run, "print the plan without executing");
    auto* c_compare = add_common(
        app.add_subcommand("compare-quant", "run the quantization comparison stage"),
        true);
    auto* seed_compare =
        c_compare->add_option("--seed", seed, "override the stage seed");
    c_compare->add_flag("--dry-run", dry_run, "print the plan without executing");
    auto* c_recommend = app.add_subcommand(
        "recommend", "print the quantization format per architecture");
    c_recommend->add_option("--config", config_path, "pipeline configuration (JSON)")
        ->required();
    auto* c_report = add_common(
        app.add_subcommand("report", "emit reports from existing artifacts"), true);
    c_report->add_option("--stage", stage_name, "limit reports to one stage");
    auto* c_run =
        add_common(app.add_subcommand("run", "run one pipeline stage"), true);
    c_run->add_option("--stage", stage_name, "Scale, CompareModels, or Quantize")
        ->required();
    auto* seed_run = c_run->add_option("--seed", seed, "override the stage seed");
    c_run->add_flag("--dry-run", dry_run, "print the plan without executing");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        auto options = [&](const CLI::Option* seed_opt) {
            RunOptions o;
            o.run_dir = run_dir;
            if (seed_opt->count() > 0) o.seed_override = seed;
            o.dry_run = dry_run;
            return o;
        };
        if (app.got_subcommand(c_ingest)) {
            cmd_ingest(config_path, run_dir);
        } else if (app.got_subcommand(c_rebalance)) {
            cmd_rebalance(load_config(config_path), run_paths(run_dir));
        } else if (app.got_subcommand(c_subsets)) {
            std::optional<std::uint64_t> ov;
            if (seed_subsets->count() > 0) ov = seed;
            cmd_subsets(load_config(config_path), run_paths(run_dir), ov);
        } else if (app.got_subcommand(c_validate)) {
            cmd_validate(load_config(config_path), run_paths(run_dir));
        } else if (app.got_subcommand(c_eval_nll)) {
            cmd_eval_nll(load_config(config_path), run_paths(run_dir));
        } else if (app.got_subcommand(c_judge)) {
            cmd_run(load_config(config_path), Stage::CompareModels,
                    options(seed_judge));
        } else if (app.got_subcommand(c_compare)) {
            cmd_run(load_config(config_path), Stage::Quantize, options(seed_compare));
        } else if (app.got_subcommand(c_recommend)) {
            cmd_recommend(load_config(config_path));
        } else if (app.got_subcommand(c_report)) {
            cmd_report(load_config(config_path), run_paths(run_dir), stage_name);
        } else if (app.got_subcommand(c_run)) {
            auto stage = orchestrator::stage_from_string(stage_name);
            if (!stage) {
                throw ConfigError("unknown stage '" + stage_name +
                                  "'; expected Scale, CompareModels, or Quantize");
            }
            cmd_run(load_config(config_path), *stage, options(seed_run));
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const StageFailedError& e) {
        std::cerr << "stage failed: " << e.what() << "\n";
        std::cerr << "log: " << e.log_path() << "\n";
        return 3;
    } catch (const CapabilityError& e) {
        std::cerr << "backend capability error: " << e.what() << "\n";
        return 4;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
