#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "doctest.h"
#include "slmeval/backend.hpp"
#include "slmeval/errors.hpp"
#include "slmeval/orchestrator.hpp"
#include "slmeval/util.hpp"
#include "support.hpp"

using namespace slmeval;
using namespace slmeval::orchestrator;

namespace {

/// Metrics as the aggregator would produce them from a score distribution
/// given highest-score-first counts (threes, twos, ones, zeros).
judge::EvalMetrics metrics_from(int c3, int c2, int c1, int c0, double latency,
                                double chars) {
    judge::EvalMetrics m;
    int n = c3 + c2 + c1 + c0;
    m.avg_score = static_cast<double>(3 * c3 + 2 * c2 + c1) / n;
    m.perfect_rate = 100.0 * c3 / n;
    m.score_dist = {c0, c1, c2, c3};
    m.avg_latency_s = latency;
    m.avg_chars = chars;
    return m;
}

ModelProfile profile(const std::string& id, Architecture arch,
                     FormatTag tag = FormatTag::F16) {
    ModelProfile p;
    p.model_id = id;
    p.architecture = arch;
    p.format_tag = tag;
    return p;
}

backend::BackendDescriptor mock_desc(const std::string& spec,
                                     const std::string& model) {
    backend::BackendDescriptor d;
    d.kind = backend::BackendKind::Mock;
    d.endpoint = spec;
    d.model_id = model;
    return d;
}

json qa_json(const std::string& id, const std::string& question,
             const std::string& answer, const std::string& relation,
             const char* category = nullptr) {
    json j;
    j["id"] = id;
    j["question"] = question;
    j["answer"] = answer;
    j["relation_type"] = relation;
    if (category) j["category"] = category;
    return j;
}

std::size_t count_lines(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) return 0;
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) n++;
    return n;
}

/// The published five-point training-scale fixture.
nllstats::ScaleCurve reference_curve() {
    std::vector<nllstats::ScaleObservation> obs;
    const int sizes[] = {1000, 2000, 3000, 4000, 5000};
    const double losses[] = {0.8687, 0.8413, 0.7894, 0.7800, 0.7666};
    const double nlls[] = {1.3421, 1.2758, 1.2150, 1.1272, 1.3190};
    for (int i = 0; i < 5; i++) {
        nllstats::ScaleObservation o;
        o.n = sizes[i];
        o.train_loss = losses[i];
        o.test_nll = nlls[i];
        obs.push_back(o);
    }
    return nllstats::build_scale_curve(obs);
}

}  // namespace

// ---------------------------------------------------------------------------
// compare_formats
// ---------------------------------------------------------------------------

TEST_CASE("quantization comparison reproduces the published model deltas") {
    struct Row {
        judge::EvalMetrics base, quant;
        double delta, pp, speedup;
        Verdict verdict;
    };
    const Row rows[] = {
        // 8B instruction model: quantization slightly improves quality.
        {metrics_from(84, 15, 0, 1, 54.3, 310), metrics_from(86, 12, 1, 1, 8.9, 305),
         0.010, 2.0, 6.10, Verdict::Improves},
        // 8B chat model: small quality gain, ~3.3x faster.
        {metrics_from(73, 24, 3, 0, 27.4, 331), metrics_from(78, 17, 5, 0, 8.2, 325),
         0.030, 5.0, 3.34, Verdict::Improves},
        // GQA model: quantization collapses quality past the deploy block.
        {metrics_from(49, 45, 5, 1, 30.4, 677), metrics_from(30, 54, 16, 0, 12.4, 660),
         -0.280, -19.0, 2.45, Verdict::Blocked},
    };
    Architecture archs[] = {Architecture::MHA, Architecture::MHA, Architecture::GQA};
    for (int i = 0; i < 3; i++) {
        const Row& row = rows[i];
        auto r = compare_formats(row.base, row.quant,
                                 profile("m" + std::to_string(i), archs[i]));
        CHECK(r.delta_score == row.quant.avg_score - row.base.avg_score);
        CHECK(std::abs(r.delta_score - row.delta) < 1e-12);
        CHECK(r.delta_perfect_pp == row.pp);
        CHECK(std::abs(r.speedup - row.speedup) < 0.02);
        CHECK(r.verdict == row.verdict);
        CHECK_FALSE(r.size_ratio.has_value());
    }
}

TEST_CASE("identical metrics compare as neutral with unit speedup") {
    auto m = metrics_from(10, 5, 3, 2, 4.0, 200.0);
    auto r = compare_formats(m, m, profile("same", Architecture::MHA));
    CHECK(r.delta_score == 0.0);
    CHECK(r.delta_perfect_pp == 0.0);
    CHECK(r.speedup == 1.0);
    CHECK(r.verdict == Verdict::Neutral);
}

TEST_CASE("speedup times quant latency recovers base latency") {
    std::mt19937_64 rng(2024);
    for (int t = 0; t < 200; t++) {
        double base_lat = 0.5 + 100.0 * util::uniform_unit(rng);
        double quant_lat = 0.5 + 100.0 * util::uniform_unit(rng);
        auto b = metrics_from(5, 5, 0, 0, base_lat, 100);
        auto q = metrics_from(5, 5, 0, 0, quant_lat, 100);
        auto r = compare_formats(b, q, profile("m", Architecture::MHA));
        CHECK(std::abs(r.speedup * q.avg_latency_s - b.avg_latency_s) < 1e-9);
    }
}

TEST_CASE("verdicts partition the delta axis consistently") {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 500; t++) {
        double base_avg = 3.0 * util::uniform_unit(rng);
        double quant_avg = 3.0 * util::uniform_unit(rng);
        auto b = metrics_from(0, 0, 0, 10, 1.0, 10);
        auto q = metrics_from(0, 0, 0, 10, 1.0, 10);
        b.avg_score = base_avg;
        q.avg_score = quant_avg;
        auto r = compare_formats(b, q, profile("m", Architecture::MHA));
        double d = r.delta_score;
        if (r.verdict == Verdict::Blocked) {
            CHECK(d <= -0.1);
            CHECK(d < 0.0);  // always on the degradation side
        } else if (r.verdict == Verdict::Neutral) {
            CHECK(std::abs(d) <= 0.005);
        } else if (r.verdict == Verdict::Improves) {
            CHECK(d > 0.005);
        } else {
            CHECK(d < -0.005);
            CHECK(d > -0.1);
        }
    }
}

TEST_CASE("verdict thresholds sit exactly on their boundaries") {
    auto with_avgs = [](double base_avg, double quant_avg) {
        auto b = metrics_from(0, 0, 0, 4, 1.0, 10);
        auto q = metrics_from(0, 0, 0, 4, 1.0, 10);
        b.avg_score = base_avg;
        q.avg_score = quant_avg;
        return std::pair{b, q};
    };
    // delta exactly at the neutral band edge stays neutral.
    auto [b1, q1] = with_avgs(2.0, 2.25);
    CHECK(compare_formats(b1, q1, profile("m", Architecture::MHA), 0.25).verdict ==
          Verdict::Neutral);
    auto [b2, q2] = with_avgs(2.0, 2.26);
    CHECK(compare_formats(b2, q2, profile("m", Architecture::MHA), 0.25).verdict ==
          Verdict::Improves);
    // delta exactly at the deploy block is blocked, not merely degrading.
    CompareExtras extras;
    extras.deploy_block = 0.5;
    auto [b3, q3] = with_avgs(2.5, 2.0);
    CHECK(compare_formats(b3, q3, profile("m", Architecture::MHA), 0.005, extras)
              .verdict == Verdict::Blocked);
    auto [b4, q4] = with_avgs(2.5, 2.25);
    CHECK(compare_formats(b4, q4, profile("m", Architecture::MHA), 0.005, extras)
              .verdict == Verdict::Degrades);
}

TEST_CASE("comparison rejects mismatched or empty question sets") {
    auto b = metrics_from(10, 0, 0, 0, 1.0, 10);
    auto q = metrics_from(9, 0, 0, 0, 1.0, 10);
    CHECK_THROWS_WITH_AS(compare_formats(b, q, profile("m", Architecture::MHA)),
                         doctest::Contains("equal question sets"), Error);
    auto z = metrics_from(0, 0, 0, 0, 1.0, 10);
    z.score_dist = {0, 0, 0, 0};
    z.avg_score = 0.0;
    z.perfect_rate = 0.0;
    CHECK_THROWS_AS(compare_formats(z, z, profile("m", Architecture::MHA)), Error);
}

TEST_CASE("comparison guards against misconfiguration") {
    auto m = metrics_from(5, 0, 0, 0, 1.0, 10);
    CHECK_THROWS_WITH_AS(
        compare_formats(m, m, profile("m", Architecture::MHA, FormatTag::HF4bit)),
        doctest::Contains("HF4bit"), ConfigError);
    CHECK_THROWS_AS(compare_formats(m, m, profile("m", Architecture::MHA), -0.1),
                    ConfigError);
    auto no_lat = metrics_from(5, 0, 0, 0, 0.0, 10);
    CHECK_THROWS_WITH_AS(compare_formats(no_lat, m, profile("m", Architecture::MHA)),
                         doctest::Contains("latencies"), Error);
    CompareExtras bad;
    bad.base_size_gb = 0.0;
    bad.quant_size_gb = 4.0;
    CHECK_THROWS_AS(compare_formats(m, m, profile("m", Architecture::MHA), 0.005, bad),
                    ConfigError);
}

TEST_CASE("size ratio comes from the model sizes when both are known") {
    auto b = metrics_from(5, 0, 0, 0, 16.0, 10);
    auto q = metrics_from(5, 0, 0, 0, 8.0, 10);
    CompareExtras extras;
    extras.base_size_gb = 16.0;
    extras.quant_size_gb = 4.9;
    auto r = compare_formats(b, q, profile("m", Architecture::MHA), 0.005, extras);
    REQUIRE(r.size_ratio.has_value());
    CHECK(*r.size_ratio == doctest::Approx(16.0 / 4.9));

    CompareExtras half;
    half.base_size_gb = 16.0;
    auto r2 = compare_formats(b, q, profile("m", Architecture::MHA), 0.005, half);
    CHECK_FALSE(r2.size_ratio.has_value());
}

TEST_CASE("comparison reports round-trip through JSON") {
    auto b = metrics_from(84, 15, 0, 1, 54.3, 310);
    auto q = metrics_from(86, 12, 1, 1, 8.9, 305);
    CompareExtras extras;
    extras.base_size_gb = 16.0;
    extras.quant_size_gb = 4.9;
    auto r = compare_formats(b, q, profile("swallow", Architecture::MHA), 0.005,
                             extras);
    auto back = ComparisonReport::from_json(r.to_json());
    CHECK(back.to_json() == r.to_json());
    CHECK(back.model_id == "swallow");
    CHECK(back.verdict == Verdict::Improves);
    CHECK(back.base.score_dist == r.base.score_dist);
    REQUIRE(back.size_ratio.has_value());
    CHECK(*back.size_ratio == *r.size_ratio);
}

// ---------------------------------------------------------------------------
// recommend_quantization
// ---------------------------------------------------------------------------

TEST_CASE("recommendations follow the architecture decision table") {
    auto mha = recommend_quantization(profile("a", Architecture::MHA));
    CHECK(mha.format == FormatTag::Q4_K_M);
    CHECK_FALSE(mha.alternative.has_value());
    CHECK(mha.rationale == "Quality improves");
    CHECK_FALSE(mha.warning);

    auto gqa = recommend_quantization(profile("b", Architecture::GQA));
    CHECK(gqa.format == FormatTag::F16);
    REQUIRE(gqa.alternative.has_value());
    CHECK(*gqa.alternative == FormatTag::Q8_0);
    CHECK(gqa.rationale == "Q4 causes degradation");
    CHECK_FALSE(gqa.warning);

    auto alt = recommend_quantization(profile("c", Architecture::MHA_AltTokenizer));
    CHECK(alt.format == FormatTag::HF4bit);
    CHECK(alt.rationale == "GGUF tokenizer issue");
    CHECK_FALSE(alt.warning);
}

TEST_CASE("unknown architectures fall back to F16 with a warning") {
    auto rec = recommend_for_architecture(std::nullopt);
    CHECK(rec.format == FormatTag::F16);
    CHECK(rec.warning);
    CHECK_FALSE(rec.rationale.empty());

    // An enum value from a future architecture family takes the same path.
    auto future = recommend_quantization(
        profile("d", static_cast<Architecture>(99)));
    CHECK(future.format == FormatTag::F16);
    CHECK(future.warning);
}

TEST_CASE("recommendation JSON carries the alternative only when present") {
    auto gqa = recommend_quantization(profile("b", Architecture::GQA));
    json j = gqa.to_json();
    CHECK(j["format"] == "F16");
    CHECK(j["alternative"] == "Q8_0");
    CHECK(j["warning"] == false);
    auto mha = recommend_quantization(profile("a", Architecture::MHA));
    CHECK_FALSE(mha.to_json().contains("alternative"));
}

// ---------------------------------------------------------------------------
// Enum parsing and profiles
// ---------------------------------------------------------------------------

TEST_CASE("enum names round-trip through their parsers") {
    for (auto a : {Architecture::MHA, Architecture::GQA,
                   Architecture::MHA_AltTokenizer}) {
        CHECK(architecture_from_string(to_string(a)) == a);
    }
    for (auto f : {FormatTag::F16, FormatTag::Q4_K_M, FormatTag::Q8_0,
                   FormatTag::HF4bit}) {
        CHECK(format_tag_from_string(to_string(f)) == f);
    }
    for (auto k : {ReportKind::ScaleCurve, ReportKind::ModelTable,
                   ReportKind::ScoreDist, ReportKind::CategoryHeatmap,
                   ReportKind::QuantTable}) {
        CHECK(report_kind_from_string(to_string(k)) == k);
    }
    for (auto s : {Stage::Scale, Stage::CompareModels, Stage::Quantize}) {
        CHECK(stage_from_string(to_string(s)) == s);
    }
    CHECK_FALSE(architecture_from_string("MQA").has_value());
    CHECK_FALSE(format_tag_from_string("Q5_K").has_value());
    CHECK_FALSE(stage_from_string("Train").has_value());
}

TEST_CASE("model profiles validate and round-trip") {
    auto p = profile("m", Architecture::GQA, FormatTag::Q8_0);
    p.size_gb = 8.5;
    auto back = ModelProfile::from_json(p.to_json());
    CHECK(back.model_id == "m");
    CHECK(back.architecture == Architecture::GQA);
    CHECK(back.format_tag == FormatTag::Q8_0);
    CHECK(back.size_gb == 8.5);

    json bad = p.to_json();
    bad["architecture"] = "RNN";
    CHECK_THROWS_WITH_AS(ModelProfile::from_json(bad),
                         doctest::Contains("architecture"), ConfigError);
    json neg = p.to_json();
    neg["size_gb"] = -1.0;
    CHECK_THROWS_WITH_AS(ModelProfile::from_json(neg),
                         doctest::Contains("size_gb"), ConfigError);
}

TEST_CASE("identifiers sanitize to filesystem-safe names") {
    CHECK(sanitize_id("Llama-3.1_8B") == "Llama-3.1_8B");
    CHECK(sanitize_id("org/model v2") == "org_model_v2");
    CHECK(sanitize_id("") == "_");
}

// ---------------------------------------------------------------------------
// emit_report
// ---------------------------------------------------------------------------

TEST_CASE("scale-curve report reproduces the published five-point table") {
    testsup::TempDir dir;
    RunArtifacts arts;
    arts.scale_curve = reference_curve();
    auto files = emit_report(arts, ReportKind::ScaleCurve, dir.path());
    REQUIRE(files.size() == 3);

    std::string txt = testsup::slurp(dir / "scale_curve.txt");
    for (const char* frag :
         {"1000", "0.8687", "1.3421", "3.83", "Baseline",    //
          "2000", "0.8413", "1.2758", "3.58", "-0.066",      //
          "3000", "0.7894", "1.2150", "3.37", "-0.061",      //
          "4000", "0.7800", "1.1272", "3.09", "-0.088", "Optimal",
          "5000", "0.7666", "1.3190", "3.74", "+0.192", "Overfitting",
          "optimal n: 4000", "17.0%"}) {
        CAPTURE(frag);
        CHECK(txt.find(frag) != std::string::npos);
    }

    json doc = json::parse(testsup::slurp(dir / "scale_curve.json"));
    CHECK(doc["points"].size() == 5);
    CHECK(doc["optimal_n"] == 4000);

    std::string csv = testsup::slurp(dir / "scale_curve.csv");
    CHECK(count_lines(dir / "scale_curve.csv") == 6);
    CHECK(csv.find("4000,0.78,1.1272,") != std::string::npos);
    CHECK(csv.find(",Optimal") != std::string::npos);
}

TEST_CASE("reports are byte-stable across emissions") {
    testsup::TempDir a, b;
    RunArtifacts arts;
    arts.scale_curve = reference_curve();
    arts.model_metrics.emplace_back("swallow", metrics_from(84, 15, 0, 1, 54.3, 310));
    arts.model_metrics.emplace_back("qwen", metrics_from(49, 45, 5, 1, 30.4, 677));
    judge::CategoryMatrix cm;
    cm.cells["Survey"] = {2.5, 4};
    cm.cells["Design"] = {3.0, 2};
    arts.categories.emplace_back("swallow", cm);
    arts.comparisons.push_back(
        compare_formats(metrics_from(84, 15, 0, 1, 54.3, 310),
                        metrics_from(86, 12, 1, 1, 8.9, 305),
                        profile("swallow", Architecture::MHA)));
    arts.recommendations.emplace_back(
        "swallow", recommend_quantization(profile("swallow", Architecture::MHA)));

    for (auto kind : {ReportKind::ScaleCurve, ReportKind::ModelTable,
                      ReportKind::ScoreDist, ReportKind::CategoryHeatmap,
                      ReportKind::QuantTable}) {
        auto fa = emit_report(arts, kind, a.path());
        auto fb = emit_report(arts, kind, b.path());
        REQUIRE(fa.size() == fb.size());
        for (std::size_t i = 0; i < fa.size(); i++) {
            CHECK(testsup::slurp(fa[i]) == testsup::slurp(fb[i]));
        }
    }
}

TEST_CASE("model table and score distribution format the judged metrics") {
    testsup::TempDir dir;
    RunArtifacts arts;
    arts.model_metrics.emplace_back("swallow", metrics_from(84, 15, 0, 1, 54.3, 310));
    arts.model_metrics.emplace_back("qwen", metrics_from(49, 45, 5, 1, 30.4, 677));
    emit_report(arts, ReportKind::ModelTable, dir.path());
    std::string txt = testsup::slurp(dir / "model_table.txt");
    for (const char* frag : {"swallow", "2.820", "84%", "84-15-0-1", "54.3", "310",
                             "qwen", "2.420", "49%", "49-45-5-1"}) {
        CAPTURE(frag);
        CHECK(txt.find(frag) != std::string::npos);
    }

    emit_report(arts, ReportKind::ScoreDist, dir.path());
    std::string csv = testsup::slurp(dir / "score_dist.csv");
    CHECK(csv.find("swallow,3,84") != std::string::npos);
    CHECK(csv.find("qwen,0,1") != std::string::npos);
    json doc = json::parse(testsup::slurp(dir / "score_dist.json"));
    CHECK(doc["models"][0]["dist"]["3"] == 84);
    CHECK(doc["models"][1]["dist"]["2"] == 45);
}

TEST_CASE("quant table formats speedups to two significant figures") {
    testsup::TempDir dir;
    RunArtifacts arts;
    CompareExtras sized;
    sized.base_size_gb = 16.0;
    sized.quant_size_gb = 4.9;
    arts.comparisons.push_back(compare_formats(
        metrics_from(84, 15, 0, 1, 54.3, 310), metrics_from(86, 12, 1, 1, 8.9, 305),
        profile("swallow", Architecture::MHA), 0.005, sized));
    arts.comparisons.push_back(compare_formats(
        metrics_from(73, 24, 3, 0, 27.4, 331), metrics_from(78, 17, 5, 0, 8.2, 325),
        profile("elyza", Architecture::MHA)));
    arts.comparisons.push_back(compare_formats(
        metrics_from(49, 45, 5, 1, 30.4, 677), metrics_from(30, 54, 16, 0, 12.4, 660),
        profile("qwen", Architecture::GQA)));
    arts.recommendations.emplace_back(
        "swallow", recommend_quantization(profile("swallow", Architecture::MHA)));
    arts.recommendations.emplace_back(
        "qwen", recommend_quantization(profile("qwen", Architecture::GQA)));

    emit_report(arts, ReportKind::QuantTable, dir.path());
    std::string txt = testsup::slurp(dir / "quant_table.txt");
    for (const char* frag :
         {"+0.010", "6.1x", "+0.030", "3.3x", "-0.280", "2.5x", "Improves",
          "Blocked", "3.3", "swallow: Q4_K_M - Quality improves",
          "qwen: F16 (or Q8_0) - Q4 causes degradation"}) {
        CAPTURE(frag);
        CHECK(txt.find(frag) != std::string::npos);
    }
    json doc = json::parse(testsup::slurp(dir / "quant_table.json"));
    CHECK(doc["comparisons"].size() == 3);
    // JSON keeps full precision rather than the display rounding.
    CHECK(doc["comparisons"][0]["speedup"].get<double>() ==
          doctest::Approx(54.3 / 8.9).epsilon(1e-12));
}

TEST_CASE("category heatmap lists models as columns with gaps dashed") {
    testsup::TempDir dir;
    RunArtifacts arts;
    judge::CategoryMatrix a, b;
    a.cells["Survey"] = {2.5, 4};
    a.cells["Hazard"] = {1.0, 2};
    b.cells["Survey"] = {3.0, 4};
    arts.categories.emplace_back("alpha", a);
    arts.categories.emplace_back("beta", b);
    emit_report(arts, ReportKind::CategoryHeatmap, dir.path());
    std::string txt = testsup::slurp(dir / "category_heatmap.txt");
    CHECK(txt.find("alpha") != std::string::npos);
    CHECK(txt.find("beta") != std::string::npos);
    CHECK(txt.find("Survey") != std::string::npos);
    CHECK(txt.find("2.50") != std::string::npos);
    CHECK(txt.find("-") != std::string::npos);  // beta has no Hazard cell
    std::string csv = testsup::slurp(dir / "category_heatmap.csv");
    CHECK(csv.find("alpha,Survey,2.5,4") != std::string::npos);
}

TEST_CASE("missing artifacts name the stage that produces them") {
    testsup::TempDir dir;
    RunArtifacts empty;
    CHECK_THROWS_WITH_AS(emit_report(empty, ReportKind::ScaleCurve, dir.path()),
                         doctest::Contains("run scale stage first"), Error);
    CHECK_THROWS_WITH_AS(emit_report(empty, ReportKind::ModelTable, dir.path()),
                         doctest::Contains("run judge stage first"), Error);
    CHECK_THROWS_WITH_AS(emit_report(empty, ReportKind::ScoreDist, dir.path()),
                         doctest::Contains("run judge stage first"), Error);
    CHECK_THROWS_WITH_AS(emit_report(empty, ReportKind::QuantTable, dir.path()),
                         doctest::Contains("run quantize stage first"), Error);

    // A category matrix with no cells is as missing as no matrix at all.
    RunArtifacts hollow;
    hollow.categories.emplace_back("m", judge::CategoryMatrix{});
    CHECK_THROWS_WITH_AS(emit_report(hollow, ReportKind::CategoryHeatmap, dir.path()),
                         doctest::Contains("run judge stage first"), Error);
}

// ---------------------------------------------------------------------------
// Manifests and configuration
// ---------------------------------------------------------------------------

TEST_CASE("stage manifests round-trip and hash their contents") {
    StageManifest m;
    m.stage = Stage::Scale;
    m.config_hash = "abc123";
    m.seeds["corpus"] = 11;
    m.seeds["scale"] = 12;
    m.dataset_ids = {"rebalanced:deadbeef"};
    m.backends["60"] = mock_desc("logprob=-1.0", "m60").to_json();
    m.started_at = "2026-01-01T00:00:00Z";
    m.completed_at = "2026-01-01T00:00:05Z";
    m.artifacts = {"artifacts/rebalanced.jsonl"};
    m.reports = {"reports/scale_curve.txt"};

    auto back = StageManifest::from_json(m.to_json());
    CHECK(back.to_json() == m.to_json());
    CHECK(back.hash() == m.hash());

    back.completed_at = "2026-01-01T00:00:06Z";
    CHECK(back.hash() != m.hash());
}

TEST_CASE("pipeline config resolves paths relative to its own file") {
    testsup::TempDir dir;
    json cfg;
    cfg["corpus"]["files"] = json::array({"data/corpus.jsonl"});
    cfg["corpus"]["seed"] = 1;
    testsup::spit(dir / "run.json", cfg.dump());
    auto loaded = PipelineConfig::load(dir / "run.json");
    CHECK(loaded.resolve("data/corpus.jsonl") == dir.path() / "data/corpus.jsonl");
    CHECK(loaded.resolve("/abs/x.jsonl") == std::filesystem::path("/abs/x.jsonl"));
    CHECK(loaded.has_section("corpus"));
    CHECK_FALSE(loaded.has_section("judge"));
    CHECK_THROWS_WITH_AS(loaded.section("judge"),
                         doctest::Contains("missing section 'judge'"), ConfigError);

    testsup::spit(dir / "broken.json", "{ not json");
    CHECK_THROWS_AS(PipelineConfig::load(dir / "broken.json"), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::load(dir / "absent.json"), ConfigError);
}

TEST_CASE("stage hashes cover exactly the sections a stage reads") {
    json doc;
    doc["corpus"] = {{"seed", 1}};
    doc["scale"] = {{"seed", 2}};
    doc["judge"] = {{"seed", 3}};
    doc["quantize"] = {{"seed", 4}};
    auto a = PipelineConfig::from_json(doc, ".");
    json doc2 = doc;
    doc2["judge"]["seed"] = 30;
    auto b = PipelineConfig::from_json(doc2, ".");
    CHECK(stage_config_hash(a, Stage::Scale) == stage_config_hash(b, Stage::Scale));
    CHECK(stage_config_hash(a, Stage::CompareModels) !=
          stage_config_hash(b, Stage::CompareModels));
    CHECK(stage_config_hash(a, Stage::Quantize) ==
          stage_config_hash(b, Stage::Quantize));
    json doc3 = doc;
    doc3["scale"]["seed"] = 20;
    auto c = PipelineConfig::from_json(doc3, ".");
    CHECK(stage_config_hash(a, Stage::Scale) != stage_config_hash(c, Stage::Scale));
}

// ---------------------------------------------------------------------------
// run_pipeline: Scale
// ---------------------------------------------------------------------------

namespace {

/// Small corpus with every relation represented; 24 pairs per relation.
void write_scale_corpus(const std::filesystem::path& path) {
    const char* relations[] = {"HAS_CHAPTER", "DESCRIBED_IN", "HAS_SECTION",
                               "HAS_ITEM",    "DEFINED_IN",   "SUBJECT_TO",
                               "USED_IN",     "REQUIRES",     "AFFECTS",
                               "MITIGATES",   "PRECEDES"};
    std::string lines;
    int serial = 0;
    for (int i = 0; i < 24; i++) {
        for (const char* rel : relations) {
            std::string id = "c-" + std::to_string(serial++);
            lines += qa_json(id, "What governs " + id + "?",
                             "Clause text for " + id + ".", rel)
                         .dump() +
                     "\n";
        }
    }
    testsup::spit(path, lines);
}

void write_test_set(const std::filesystem::path& path) {
    std::string lines;
    for (int i = 0; i < 6; i++) {
        std::string id = "t-" + std::to_string(i);
        lines += qa_json(id, "Held-out " + id + "?", "alpha beta gamma",
                         "DEFINED_IN")
                     .dump() +
                 "\n";
    }
    testsup::spit(path, lines);
}

json scale_config(const testsup::TempDir& dir, const json& backends) {
    json cfg;
    cfg["corpus"]["files"] = json::array({"corpus.jsonl"});
    cfg["corpus"]["target_relation"] = "HAS_CHAPTER";
    cfg["corpus"]["retain_fraction"] = 0.7;
    cfg["corpus"]["seed"] = 11;
    cfg["scale"]["sizes"] = json::array({60, 120, 180});
    cfg["scale"]["seed"] = 12;
    cfg["scale"]["test_file"] = "test.jsonl";
    cfg["scale"]["backends"] = backends;
    cfg["scale"]["train_losses"] = {{"60", 0.90}, {"120", 0.80}, {"180", 0.75}};
    cfg["scale"]["train_command"] =
        "echo trained-{n} >> " + (dir.path() / "train_counter.txt").string();
    return cfg;
}

json scale_backends(const testsup::TempDir& dir, const std::string& spec180) {
    json backends;
    backends["60"] = mock_desc("logprob=-1.4;calls_log=" +
                                   (dir.path() / "calls60.log").string(),
                               "m60")
                         .to_json();
    backends["120"] = mock_desc("logprob=-1.1;calls_log=" +
                                    (dir.path() / "calls120.log").string(),
                                "m120")
                          .to_json();
    backends["180"] = mock_desc(spec180 + ";calls_log=" +
                                    (dir.path() / "calls180.log").string(),
                                "m180")
                          .to_json();
    return backends;
}

}  // namespace

TEST_CASE("scale stage runs end to end against mock scoring backends") {
    testsup::TempDir dir;
    write_scale_corpus(dir / "corpus.jsonl");
    write_test_set(dir / "test.jsonl");
    auto cfg = PipelineConfig::from_json(
        scale_config(dir, scale_backends(dir, "logprob=-1.3")), dir.path());
    RunOptions opt;
    opt.run_dir = dir / "run";

    auto m = run_pipeline(cfg, Stage::Scale, opt);
    CHECK(m.stage == Stage::Scale);
    CHECK_FALSE(m.completed_at.empty());
    CHECK(m.seeds["corpus"] == 11);
    CHECK(m.seeds["scale"] == 12);

    RunPaths paths{opt.run_dir};
    CHECK(std::filesystem::exists(paths.rebalanced_pool()));
    CHECK(std::filesystem::exists(paths.subset(60)));
    CHECK(std::filesystem::exists(paths.subset(180)));
    CHECK(std::filesystem::exists(paths.quality_report()));
    CHECK(count_lines(paths.subset(120)) == 120);
    CHECK(count_lines(dir / "train_counter.txt") == 3);
    CHECK_FALSE(std::filesystem::exists(paths.lock()));

    // Per-token mock logprobs make the corpus NLL exactly the configured value.
    json curve = json::parse(testsup::slurp(paths.scale_curve()));
    CHECK(curve["optimal_n"] == 120);
    CHECK(curve["points"][0]["test_nll"].get<double>() ==
          doctest::Approx(1.4).epsilon(1e-12));
    CHECK(curve["points"][1]["status"] == "Optimal");
    CHECK(curve["points"][2]["status"] == "Overfitting");
    CHECK(curve["points"][0]["train_loss_final"] == 0.9);

    for (const char* ext : {".txt", ".json", ".csv"}) {
        CHECK(std::filesystem::exists(paths.reports() /
                                      (std::string("scale_curve") + ext)));
    }
    std::string txt = testsup::slurp(paths.reports() / "scale_curve.txt");
    CHECK(txt.find("optimal n: 120") != std::string::npos);

    // Rerunning a completed stage revisits nothing: no new backend calls,
    // no new training invocations, and the stored manifest comes back
    // byte-identical (timestamps included).
    std::size_t calls60 = count_lines(dir / "calls60.log");
    REQUIRE(calls60 > 0);
    auto again = run_pipeline(cfg, Stage::Scale, opt);
    CHECK(again.to_json() == m.to_json());
    CHECK(again.hash() == m.hash());
    CHECK(count_lines(dir / "calls60.log") == calls60);
    CHECK(count_lines(dir / "train_counter.txt") == 3);

    // The same run directory refuses a different config.
    json changed = scale_config(dir, scale_backends(dir, "logprob=-1.3"));
    changed["corpus"]["retain_fraction"] = 0.5;
    CHECK_THROWS_WITH_AS(
        run_pipeline(PipelineConfig::from_json(changed, dir.path()), Stage::Scale,
                     opt),
        doctest::Contains("different config"), ConfigError);
}

TEST_CASE("an interrupted scale stage resumes without repeating calls") {
    testsup::TempDir dir;
    write_scale_corpus(dir / "corpus.jsonl");
    write_test_set(dir / "test.jsonl");
    RunOptions opt;
    opt.run_dir = dir / "run";
    RunPaths paths{opt.run_dir};

    // The size-180 backend cannot score at all, so the stage dies after
    // finishing sizes 60 and 120.
    auto broken = PipelineConfig::from_json(
        scale_config(dir, scale_backends(dir, "unsupported_logprobs=1")),
        dir.path());
    CHECK_THROWS_AS(run_pipeline(broken, Stage::Scale, opt), CapabilityError);
    CHECK(std::filesystem::exists(paths.nll_report(60)));
    CHECK(std::filesystem::exists(paths.nll_report(120)));
    CHECK_FALSE(std::filesystem::exists(paths.nll_report(180)));
    CHECK_FALSE(std::filesystem::exists(paths.manifest()));
    CHECK_FALSE(std::filesystem::exists(paths.lock()));
    std::size_t calls60 = count_lines(dir / "calls60.log");
    std::size_t calls120 = count_lines(dir / "calls120.log");

    // With the backend repaired, only the missing size is evaluated.
    auto fixed = PipelineConfig::from_json(
        scale_config(dir, scale_backends(dir, "logprob=-1.3")), dir.path());
    auto m = run_pipeline(fixed, Stage::Scale, opt);
    CHECK_FALSE(m.completed_at.empty());
    CHECK(count_lines(dir / "calls60.log") == calls60);
    CHECK(count_lines(dir / "calls120.log") == calls120);
    CHECK(count_lines(dir / "calls180.log") > 0);
    json curve = json::parse(testsup::slurp(paths.scale_curve()));
    CHECK(curve["optimal_n"] == 120);
}

TEST_CASE("a held run-directory lock refuses a second stage") {
    testsup::TempDir dir;
    write_scale_corpus(dir / "corpus.jsonl");
    write_test_set(dir / "test.jsonl");
    auto cfg = PipelineConfig::from_json(
        scale_config(dir, scale_backends(dir, "logprob=-1.3")), dir.path());
    RunOptions opt;
    opt.run_dir = dir / "run";
    util::LockFile held((dir / "run") / ".lock");
    CHECK_THROWS_WITH_AS(run_pipeline(cfg, Stage::Scale, opt),
                         doctest::Contains("locked"), ConfigError);
}

TEST_CASE("scale config validation names the missing key") {
    testsup::TempDir dir;
    write_scale_corpus(dir / "corpus.jsonl");
    write_test_set(dir / "test.jsonl");
    RunOptions opt;
    opt.run_dir = dir / "run";

    json cfg = scale_config(dir, scale_backends(dir, "logprob=-1.3"));
    cfg["scale"].erase("seed");
    CHECK_THROWS_WITH_AS(
        run_pipeline(PipelineConfig::from_json(cfg, dir.path()), Stage::Scale, opt),
        doctest::Contains("scale.seed"), ConfigError);

    json no_backend = scale_config(dir, scale_backends(dir, "logprob=-1.3"));
    no_backend["scale"]["backends"].erase("120");
    CHECK_THROWS_WITH_AS(
        run_pipeline(PipelineConfig::from_json(no_backend, dir.path()), Stage::Scale,
                     opt),
        doctest::Contains("no entry for size 120"), ConfigError);

    json bad_rel = scale_config(dir, scale_backends(dir, "logprob=-1.3"));
    bad_rel["corpus"]["target_relation"] = "OWNS";
    CHECK_THROWS_WITH_AS(
        run_pipeline(PipelineConfig::from_json(bad_rel, dir.path()), Stage::Scale,
                     opt),
        doctest::Contains("OWNS"), ConfigError);
}

TEST_CASE("seed overrides replace the stage seed but not the corpus seed") {
    testsup::TempDir dir;
    write_scale_corpus(dir / "corpus.jsonl");
    write_test_set(dir / "test.jsonl");
    auto cfg = PipelineConfig::from_json(
        scale_config(dir, scale_backends(dir, "logprob=-1.3")), dir.path());
    RunOptions opt;
    opt.run_dir = dir / "run";
    opt.seed_override = 99;
    auto m = run_pipeline(cfg, Stage::Scale, opt);
    CHECK(m.seeds["corpus"] == 11);
    CHECK(m.seeds["scale"] == 99);
}

// ---------------------------------------------------------------------------
// run_pipeline: CompareModels
// ---------------------------------------------------------------------------

namespace {

void write_question_set(const std::filesystem::path& path) {
    const char* cats[] = {"Survey", "Design", "Hazard", "Survey"};
    const char* ids[] = {"q-a", "q-b", "q-c", "q-d"};
    std::string lines;
    for (int i = 0; i < 4; i++) {
        lines += qa_json(ids[i], std::string("About ") + ids[i] + "?",
                         std::string("Reference for ") + ids[i] + ".", "REQUIRES",
                         cats[i])
                     .dump() +
                 "\n";
    }
    testsup::spit(path, lines);
}

}  // namespace

TEST_CASE("model-comparison stage judges every candidate and reports") {
    testsup::TempDir dir;
    write_question_set(dir / "questions.jsonl");
    json cfg;
    cfg["judge"]["seed"] = 21;
    cfg["judge"]["questions_file"] = "questions.jsonl";
    cfg["judge"]["judge_backend"] =
        mock_desc("score_map=FIXEDANS:1,q-a:3,default:2;calls_log=" +
                      (dir.path() / "judge_calls.log").string(),
                  "judge-model")
            .to_json();
    json cand_a;
    cand_a["model_id"] = "modelA";
    cand_a["backend"] = mock_desc("echo=1;latency=1.5", "modelA").to_json();
    json cand_b;
    cand_b["model_id"] = "modelB";
    cand_b["backend"] = mock_desc("text=FIXEDANS;latency=3.0", "modelB").to_json();
    cfg["judge"]["candidates"] = json::array({cand_a, cand_b});

    auto config = PipelineConfig::from_json(cfg, dir.path());
    RunOptions opt;
    opt.run_dir = dir / "run";
    auto m = run_pipeline(config, Stage::CompareModels, opt);
    CHECK_FALSE(m.completed_at.empty());

    RunPaths paths{opt.run_dir};
    json a = json::parse(testsup::slurp(paths.eval_summary("modelA", "F16")));
    CHECK(a["metrics"]["avg_score"] == doctest::Approx(2.25));  // 3,2,2,2
    CHECK(a["metrics"]["avg_latency_s"] == doctest::Approx(1.5));
    json b = json::parse(testsup::slurp(paths.eval_summary("modelB", "F16")));
    CHECK(b["metrics"]["avg_score"] == doctest::Approx(1.0));

    for (const char* base : {"model_table", "score_dist", "category_heatmap"}) {
        for (const char* ext : {".txt", ".json", ".csv"}) {
            CAPTURE(base);
            CHECK(std::filesystem::exists(paths.reports() /
                                          (std::string(base) + ext)));
        }
    }
    std::string heat = testsup::slurp(paths.reports() / "category_heatmap.txt");
    CHECK(heat.find("Survey") != std::string::npos);
    CHECK(heat.find("modelA") != std::string::npos);

    // A completed stage resumes for free: no further judge calls.
    std::size_t judged = count_lines(dir / "judge_calls.log");
    auto again = run_pipeline(config, Stage::CompareModels, opt);
    CHECK(again.to_json() == m.to_json());
    CHECK(count_lines(dir / "judge_calls.log") == judged);

    // Artifacts reload for standalone report emission, byte-identically.
    auto arts = load_run_artifacts(config, paths);
    REQUIRE(arts.model_metrics.size() == 2);
    CHECK(arts.model_metrics[0].first == "modelA");
    testsup::TempDir out;
    emit_report(arts, ReportKind::ModelTable, out.path());
    CHECK(testsup::slurp(out / "model_table.txt") ==
          testsup::slurp(paths.reports() / "model_table.txt"));
}

// ---------------------------------------------------------------------------
// run_pipeline: Quantize
// ---------------------------------------------------------------------------

namespace {

json quantize_config(const testsup::TempDir& dir) {
    json cfg;
    cfg["quantize"]["seed"] = 31;
    cfg["quantize"]["questions_file"] = "questions.jsonl";
    cfg["quantize"]["judge_backend"] =
        mock_desc("score_map=ANS_QUANT:3,ANS_BASE:2,M2B:3,M2Q:3,default:0;calls_log=" +
                      (dir.path() / "judge_calls.log").string(),
                  "judge-model")
            .to_json();

    json alpha;
    alpha["model_id"] = "alpha";
    alpha["architecture"] = "MHA";
    alpha["base"]["format_tag"] = "F16";
    alpha["base"]["backend"] =
        mock_desc("text=ANS_BASE;latency=54.3", "alpha-f16").to_json();
    alpha["base"]["size_gb"] = 16.0;
    alpha["quant"]["format_tag"] = "Q4_K_M";
    alpha["quant"]["backend"] =
        mock_desc("text=ANS_QUANT;latency=8.9", "alpha-q4").to_json();
    alpha["quant"]["size_gb"] = 4.9;
    alpha["convert_command"] =
        "echo converted-{model_id} >> " + (dir.path() / "convert_counter.txt").string();

    json beta;
    beta["model_id"] = "beta";
    beta["architecture"] = "GQA";
    beta["base"]["format_tag"] = "F16";
    beta["base"]["backend"] = mock_desc("text=M2B;latency=10.0", "beta-f16").to_json();
    beta["quant"]["format_tag"] = "Q8_0";
    beta["quant"]["backend"] = mock_desc("text=M2Q;latency=5.0", "beta-q8").to_json();

    cfg["quantize"]["models"] = json::array({alpha, beta});
    return cfg;
}

}  // namespace

TEST_CASE("quantize stage compares formats and recommends per architecture") {
    testsup::TempDir dir;
    write_question_set(dir / "questions.jsonl");
    auto config = PipelineConfig::from_json(quantize_config(dir), dir.path());
    RunOptions opt;
    opt.run_dir = dir / "run";

    auto m = run_pipeline(config, Stage::Quantize, opt);
    CHECK_FALSE(m.completed_at.empty());

    RunPaths paths{opt.run_dir};
    CHECK(count_lines(dir / "convert_counter.txt") == 1);  // only alpha converts
    json alpha = json::parse(testsup::slurp(paths.compare_report("alpha")));
    CHECK(alpha["comparison"]["delta_score"] == doctest::Approx(1.0));
    CHECK(alpha["comparison"]["speedup"] ==
          doctest::Approx(54.3 / 8.9).epsilon(1e-12));
    CHECK(alpha["comparison"]["size_ratio"] ==
          doctest::Approx(16.0 / 4.9).epsilon(1e-12));
    CHECK(alpha["comparison"]["verdict"] == "Improves");
    CHECK(alpha["recommendation"]["format"] == "Q4_K_M");

    json beta = json::parse(testsup::slurp(paths.compare_report("beta")));
    CHECK(beta["comparison"]["delta_score"] == 0.0);
    CHECK(beta["comparison"]["verdict"] == "Neutral");
    CHECK(beta["recommendation"]["format"] == "F16");
    CHECK(beta["recommendation"]["alternative"] == "Q8_0");

    std::string txt = testsup::slurp(paths.reports() / "quant_table.txt");
    CHECK(txt.find("6.1x") != std::string::npos);
    CHECK(txt.find("alpha: Q4_K_M - Quality improves") != std::string::npos);

    // Resume is free end to end: no conversions, no judge traffic, and the
    // manifest returns byte-identical.
    std::size_t judged = count_lines(dir / "judge_calls.log");
    auto again = run_pipeline(config, Stage::Quantize, opt);
    CHECK(again.to_json() == m.to_json());
    CHECK(count_lines(dir / "convert_counter.txt") == 1);
    CHECK(count_lines(dir / "judge_calls.log") == judged);

    auto arts = load_run_artifacts(config, paths);
    REQUIRE(arts.comparisons.size() == 2);
    CHECK(arts.comparisons[0].verdict == Verdict::Improves);
    REQUIRE(arts.recommendations.size() == 2);
}

TEST_CASE("quantize stage rejects HF4bit sides up front") {
    testsup::TempDir dir;
    write_question_set(dir / "questions.jsonl");
    json cfg = quantize_config(dir);
    cfg["quantize"]["models"][0]["quant"]["format_tag"] = "HF4bit";
    RunOptions opt;
    opt.run_dir = dir / "run";
    CHECK_THROWS_WITH_AS(
        run_pipeline(PipelineConfig::from_json(cfg, dir.path()), Stage::Quantize, opt),
        doctest::Contains("HF4bit"), ConfigError);
}

// ---------------------------------------------------------------------------
// Dry runs
// ---------------------------------------------------------------------------

TEST_CASE("dry runs print the plan and external commands without writing") {
    testsup::TempDir dir;
    write_question_set(dir / "questions.jsonl");
    auto config = PipelineConfig::from_json(quantize_config(dir), dir.path());
    RunOptions opt;
    opt.run_dir = dir / "fresh-run";
    opt.dry_run = true;

    std::ostringstream captured;
    auto* old = std::cout.rdbuf(captured.rdbuf());
    auto m = run_pipeline(config, Stage::Quantize, opt);
    std::cout.rdbuf(old);

    CHECK(m.completed_at.empty());
    CHECK_FALSE(std::filesystem::exists(opt.run_dir));
    std::string out = captured.str();
    CHECK(out.find("dry-run: stage Quantize") != std::string::npos);
    // Placeholder values are shell-quoted exactly as they would execute.
    CHECK(out.find("would run: echo converted-'alpha'") != std::string::npos);
    CHECK(out.find("plan: judged eval alpha") != std::string::npos);
}

TEST_CASE("scale dry runs render every training command") {
    testsup::TempDir dir;
    write_scale_corpus(dir / "corpus.jsonl");
    write_test_set(dir / "test.jsonl");
    auto cfg = PipelineConfig::from_json(
        scale_config(dir, scale_backends(dir, "logprob=-1.3")), dir.path());
    RunOptions opt;
    opt.run_dir = dir / "fresh-run";
    opt.dry_run = true;

    std::ostringstream captured;
    auto* old = std::cout.rdbuf(captured.rdbuf());
    run_pipeline(cfg, Stage::Scale, opt);
    std::cout.rdbuf(old);

    CHECK_FALSE(std::filesystem::exists(opt.run_dir));
    std::string out = captured.str();
    CHECK(out.find("dry-run: stage Scale") != std::string::npos);
    CHECK(out.find("would run: echo trained-'60'") != std::string::npos);
    CHECK(out.find("would run: echo trained-'180'") != std::string::npos);
    CHECK(out.find("plan: corpus NLL n=120") != std::string::npos);
}
