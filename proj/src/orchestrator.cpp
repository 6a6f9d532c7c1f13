#include "slmeval/orchestrator.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "slmeval/backend.hpp"
#include "slmeval/corpus.hpp"
#include "slmeval/util.hpp"

namespace slmeval::orchestrator {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Enum names.
// ---------------------------------------------------------------------------

std::string_view to_string(Architecture a) {
    switch (a) {
        case Architecture::MHA: return "MHA";
        case Architecture::GQA: return "GQA";
        case Architecture::MHA_AltTokenizer: return "MHA_AltTokenizer";
    }
    return "unknown";
}

std::string_view to_string(FormatTag f) {
    switch (f) {
        case FormatTag::F16: return "F16";
        case FormatTag::Q4_K_M: return "Q4_K_M";
        case FormatTag::Q8_0: return "Q8_0";
        case FormatTag::HF4bit: return "HF4bit";
    }
    return "unknown";
}

std::string_view to_string(Verdict v) {
    switch (v) {
        case Verdict::Improves: return "Improves";
        case Verdict::Neutral: return "Neutral";
        case Verdict::Degrades: return "Degrades";
        case Verdict::Blocked: return "Blocked";
    }
    return "unknown";
}

std::string_view to_string(ReportKind k) {
    switch (k) {
        case ReportKind::ScaleCurve: return "ScaleCurve";
        case ReportKind::ModelTable: return "ModelTable";
        case ReportKind::ScoreDist: return "ScoreDist";
        case ReportKind::CategoryHeatmap: return "CategoryHeatmap";
        case ReportKind::QuantTable: return "QuantTable";
    }
    return "unknown";
}

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::Scale: return "Scale";
        case Stage::CompareModels: return "CompareModels";
        case Stage::Quantize: return "Quantize";
    }
    return "unknown";
}

std::optional<Architecture> architecture_from_string(std::string_view s) {
    if (s == "MHA") return Architecture::MHA;
    if (s == "GQA") return Architecture::GQA;
    if (s == "MHA_AltTokenizer") return Architecture::MHA_AltTokenizer;
    return std::nullopt;
}

std::optional<FormatTag> format_tag_from_string(std::string_view s) {
    if (s == "F16") return FormatTag::F16;
    if (s == "Q4_K_M") return FormatTag::Q4_K_M;
    if (s == "Q8_0") return FormatTag::Q8_0;
    if (s == "HF4bit") return FormatTag::HF4bit;
    return std::nullopt;
}

std::optional<ReportKind> report_kind_from_string(std::string_view s) {
    if (s == "ScaleCurve") return ReportKind::ScaleCurve;
    if (s == "ModelTable") return ReportKind::ModelTable;
    if (s == "ScoreDist") return ReportKind::ScoreDist;
    if (s == "CategoryHeatmap") return ReportKind::CategoryHeatmap;
    if (s == "QuantTable") return ReportKind::QuantTable;
    return std::nullopt;
}

std::optional<Stage> stage_from_string(std::string_view s) {
    if (s == "Scale") return Stage::Scale;
    if (s == "CompareModels") return Stage::CompareModels;
    if (s == "Quantize") return Stage::Quantize;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Small helpers.
// ---------------------------------------------------------------------------

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

/// Two significant figures, matching the "6.1x" style of the text reports.
std::string fmt_sig2(double v) { return fmt("%.2g", v); }

std::string num_csv(double v) { return json(v).dump(); }

std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> widths(header.size());
    for (std::size_t c = 0; c < header.size(); c++) widths[c] = header[c].size();
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); c++) {
            widths[c] = std::max(widths[c], row[c].size());
        }
    }
    auto emit_row = [&](const std::vector<std::string>& row) {
        std::string line;
        for (std::size_t c = 0; c < row.size(); c++) {
            line += row[c];
            if (c + 1 < row.size()) {
                line.append(widths[c] - row[c].size() + 2, ' ');
            }
        }
        return line + "\n";
    };
    std::string out = emit_row(header);
    std::string rule;
    for (std::size_t c = 0; c < header.size(); c++) {
        rule.append(widths[c], '-');
        if (c + 1 < header.size()) rule.append(2, ' ');
    }
    out += rule + "\n";
    for (const auto& row : rows) out += emit_row(row);
    return out;
}

const json& need(const json& sec, const std::string& key, const std::string& where) {
    auto it = sec.find(key);
    if (it == sec.end()) {
        throw ConfigError("config: " + where + "." + key + " is required");
    }
    return *it;
}

std::string need_str(const json& sec, const std::string& key, const std::string& where) {
    const json& v = need(sec, key, where);
    if (!v.is_string()) {
        throw ConfigError("config: " + where + "." + key + " must be a string");
    }
    return v.get<std::string>();
}

std::int64_t need_int(const json& sec, const std::string& key, const std::string& where) {
    const json& v = need(sec, key, where);
    if (!v.is_number_integer()) {
        throw ConfigError("config: " + where + "." + key + " must be an integer");
    }
    return v.get<std::int64_t>();
}

double need_num(const json& sec, const std::string& key, const std::string& where) {
    const json& v = need(sec, key, where);
    if (!v.is_number()) {
        throw ConfigError("config: " + where + "." + key + " must be a number");
    }
    return v.get<double>();
}

std::string opt_str(const json& sec, const std::string& key, std::string def) {
    auto it = sec.find(key);
    return it == sec.end() ? def : it->get<std::string>();
}

int opt_int(const json& sec, const std::string& key, int def) {
    auto it = sec.find(key);
    return it == sec.end() ? def : it->get<int>();
}

double opt_num(const json& sec, const std::string& key, double def) {
    auto it = sec.find(key);
    return it == sec.end() ? def : it->get<double>();
}

bool opt_bool(const json& sec, const std::string& key, bool def) {
    auto it = sec.find(key);
    return it == sec.end() ? def : it->get<bool>();
}

json parse_json_file(const fs::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string("cannot open ") + what + ": " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("malformed ") + what + " " + path.string() +
                          ": " + e.what());
    }
}

judge::EvalMetrics parse_metrics(const json& j) {
    judge::EvalMetrics m;
    m.avg_score = j.at("avg_score").get<double>();
    m.perfect_rate = j.at("perfect_rate").get<double>();
    const json& dist = j.at("score_dist");
    for (int s = 0; s <= 3; s++) {
        m.score_dist[static_cast<std::size_t>(s)] = dist.at(std::to_string(s)).get<int>();
    }
    m.avg_latency_s = j.at("avg_latency_s").get<double>();
    m.avg_chars = j.at("avg_chars").get<double>();
    return m;
}

judge::CategoryMatrix parse_categories(const json& j) {
    judge::CategoryMatrix m;
    for (const auto& [name, cell] : j.at("cells").items()) {
        m.cells[name] = {cell.at("mean_score").get<double>(),
                         cell.at("count").get<int>()};
    }
    for (const auto& w : j.at("warnings")) m.warnings.push_back(w.get<std::string>());
    return m;
}

nllstats::ScaleStatus scale_status_from_string(const std::string& s) {
    using nllstats::ScaleStatus;
    for (auto v : {ScaleStatus::Baseline, ScaleStatus::Improving,
                   ScaleStatus::Optimal, ScaleStatus::Overfitting}) {
        if (s == nllstats::to_string(v)) return v;
    }
    throw ConfigError("unknown scale status '" + s + "'");
}

nllstats::ScaleCurve parse_scale_curve(const json& j) {
    nllstats::ScaleCurve curve;
    for (const auto& pj : j.at("points")) {
        nllstats::ScalePoint p;
        p.n = pj.at("n").get<int>();
        if (pj.contains("train_loss_final")) {
            p.train_loss_final = pj["train_loss_final"].get<double>();
        }
        p.test_nll = pj.at("test_nll").get<double>();
        p.test_ppl = pj.at("test_ppl").get<double>();
        if (pj.contains("delta_nll")) p.delta_nll = pj["delta_nll"].get<double>();
        p.status = scale_status_from_string(pj.at("status").get<std::string>());
        curve.points.push_back(std::move(p));
    }
    curve.optimal_n = j.at("optimal_n").get<int>();
    return curve;
}

Recommendation parse_recommendation(const json& j) {
    Recommendation r;
    r.format = format_tag_from_string(j.at("format").get<std::string>())
                   .value_or(FormatTag::F16);
    if (j.contains("alternative")) {
        r.alternative = format_tag_from_string(j["alternative"].get<std::string>());
    }
    r.rationale = j.at("rationale").get<std::string>();
    r.warning = j.at("warning").get<bool>();
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Profiles.
// ---------------------------------------------------------------------------

void ModelProfile::validate() const {
    if (model_id.empty()) throw ConfigError("model profile needs a model_id");
    if (size_gb && !(*size_gb > 0.0)) {
        throw ConfigError("model " + model_id + ": size_gb must be positive");
    }
}

json ModelProfile::to_json() const {
    json j;
    j["model_id"] = model_id;
    j["architecture"] = std::string(to_string(architecture));
    j["format_tag"] = std::string(to_string(format_tag));
    if (size_gb) j["size_gb"] = *size_gb;
    return j;
}

ModelProfile ModelProfile::from_json(const json& j) {
    ModelProfile p;
    p.model_id = need_str(j, "model_id", "profile");
    std::string arch = need_str(j, "architecture", "profile");
    auto parsed = architecture_from_string(arch);
    if (!parsed) throw ConfigError("profile: unknown architecture '" + arch + "'");
    p.architecture = *parsed;
    if (j.contains("format_tag")) {
        std::string tag = j["format_tag"].get<std::string>();
        auto f = format_tag_from_string(tag);
        if (!f) throw ConfigError("profile: unknown format_tag '" + tag + "'");
        p.format_tag = *f;
    }
    if (j.contains("size_gb")) p.size_gb = j["size_gb"].get<double>();
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// Comparison.
// ---------------------------------------------------------------------------

json ComparisonReport::to_json() const {
    json j;
    j["model_id"] = model_id;
    j["base"] = base.to_json();
    j["quant"] = quant.to_json();
    j["delta_score"] = delta_score;
    j["delta_perfect_pp"] = delta_perfect_pp;
    j["speedup"] = speedup;
    if (size_ratio) j["size_ratio"] = *size_ratio;
    j["verdict"] = std::string(to_string(verdict));
    return j;
}

ComparisonReport ComparisonReport::from_json(const json& j) {
    ComparisonReport r;
    r.model_id = j.at("model_id").get<std::string>();
    r.base = parse_metrics(j.at("base"));
    r.quant = parse_metrics(j.at("quant"));
    r.delta_score = j.at("delta_score").get<double>();
    r.delta_perfect_pp = j.at("delta_perfect_pp").get<double>();
    r.speedup = j.at("speedup").get<double>();
    if (j.contains("size_ratio")) r.size_ratio = j["size_ratio"].get<double>();
    std::string v = j.at("verdict").get<std::string>();
    for (auto cand : {Verdict::Improves, Verdict::Neutral, Verdict::Degrades,
                      Verdict::Blocked}) {
        if (v == to_string(cand)) r.verdict = cand;
    }
    return r;
}

ComparisonReport compare_formats(const judge::EvalMetrics& base,
                                 const judge::EvalMetrics& quant,
                                 const ModelProfile& profile, double threshold,
                                 const CompareExtras& extras) {
    profile.validate();
    if (profile.format_tag == FormatTag::HF4bit) {
        throw ConfigError("model " + profile.model_id +
                          ": HF4bit profiles have no GGUF counterpart and are "
                          "not comparable");
    }
    if (threshold < 0.0) throw ConfigError("neutral-band threshold must be >= 0");
    if (!(extras.deploy_block > 0.0)) {
        throw ConfigError("deploy-block threshold must be positive");
    }
    auto count = [](const judge::EvalMetrics& m) {
        int n = 0;
        for (int c : m.score_dist) n += c;
        return n;
    };
    int nb = count(base), nq = count(quant);
    if (nb != nq) {
        throw Error("comparison needs equal question sets: base scored " +
                    std::to_string(nb) + ", quant scored " + std::to_string(nq));
    }
    if (nb == 0) throw Error("comparison needs at least one scored record");
    if (!(quant.avg_latency_s > 0.0) || !(base.avg_latency_s > 0.0)) {
        throw Error("comparison needs positive average latencies");
    }

    ComparisonReport r;
    r.model_id = profile.model_id;
    r.base = base;
    r.quant = quant;
    r.delta_score = quant.avg_score - base.avg_score;
    r.delta_perfect_pp = quant.perfect_rate - base.perfect_rate;
    r.speedup = base.avg_latency_s / quant.avg_latency_s;
    if (extras.base_size_gb && extras.quant_size_gb) {
        if (!(*extras.base_size_gb > 0.0) || !(*extras.quant_size_gb > 0.0)) {
            throw ConfigError("model sizes must be positive");
        }
        r.size_ratio = *extras.base_size_gb / *extras.quant_size_gb;
    }

    if (r.delta_score <= -extras.deploy_block) {
        r.verdict = Verdict::Blocked;
    } else if (std::abs(r.delta_score) <= threshold) {
        r.verdict = Verdict::Neutral;
    } else if (r.delta_score > 0.0) {
        r.verdict = Verdict::Improves;
    } else {
        r.verdict = Verdict::Degrades;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Recommendations.
// ---------------------------------------------------------------------------

json Recommendation::to_json() const {
    json j;
    j["format"] = std::string(to_string(format));
    if (alternative) j["alternative"] = std::string(to_string(*alternative));
    j["rationale"] = rationale;
    j["warning"] = warning;
    return j;
}

Recommendation recommend_for_architecture(std::optional<Architecture> arch) {
    Recommendation r;
    if (!arch) {
        r.format = FormatTag::F16;
        r.rationale = "Unknown architecture; conservative F16 fallback";
        r.warning = true;
        return r;
    }
    switch (*arch) {
        case Architecture::MHA:
            r.format = FormatTag::Q4_K_M;
            r.rationale = "Quality improves";
            return r;
        case Architecture::GQA:
            r.format = FormatTag::F16;
            r.alternative = FormatTag::Q8_0;
            r.rationale = "Q4 causes degradation";
            return r;
        case Architecture::MHA_AltTokenizer:
            r.format = FormatTag::HF4bit;
            r.rationale = "GGUF tokenizer issue";
            return r;
    }
    r.format = FormatTag::F16;
    r.rationale = "Unknown architecture; conservative F16 fallback";
    r.warning = true;
    return r;
}

Recommendation recommend_quantization(const ModelProfile& profile) {
    switch (profile.architecture) {
        case Architecture::MHA:
        case Architecture::GQA:
        case Architecture::MHA_AltTokenizer:
            return recommend_for_architecture(profile.architecture);
        default:
            return recommend_for_architecture(std::nullopt);
    }
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

namespace {

std::string dist_compact(const std::array<int, 4>& dist) {
    // Highest score first, matching how judged runs are usually quoted.
    return std::to_string(dist[3]) + "-" + std::to_string(dist[2]) + "-" +
           std::to_string(dist[1]) + "-" + std::to_string(dist[0]);
}

struct ReportFiles {
    std::string txt, jsn, csv;
};

ReportFiles build_scale_curve_report(const nllstats::ScaleCurve& curve) {
    ReportFiles out;

    std::vector<std::vector<std::string>> rows;
    for (const auto& p : curve.points) {
        rows.push_back({std::to_string(p.n),
                        p.train_loss_final ? fmt("%.4f", *p.train_loss_final) : "-",
                        fmt("%.4f", p.test_nll), fmt("%.2f", p.test_ppl),
                        p.delta_nll ? fmt("%+.3f", *p.delta_nll) : "-",
                        std::string(nllstats::to_string(p.status))});
    }
    std::string txt = "Training-scale curve\n\n";
    txt += render_table(
        {"n", "train_loss", "test_nll", "test_ppl", "delta_nll", "status"}, rows);
    txt += "\noptimal n: " + std::to_string(curve.optimal_n) + "\n";
    bool overfits = std::any_of(curve.points.begin(), curve.points.end(),
                                [](const nllstats::ScalePoint& p) {
                                    return p.status == nllstats::ScaleStatus::Overfitting;
                                });
    if (overfits) {
        txt += "post-optimum NLL degradation: " +
               fmt("%.1f%%", 100.0 * nllstats::overfit_degradation(curve)) + "\n";
    }
    out.txt = txt;

    out.jsn = curve.to_json().dump(2) + "\n";

    std::string csv = "n,train_loss_final,test_nll,test_ppl,delta_nll,status\n";
    for (const auto& p : curve.points) {
        csv += std::to_string(p.n) + ",";
        csv += (p.train_loss_final ? num_csv(*p.train_loss_final) : "") + ",";
        csv += num_csv(p.test_nll) + "," + num_csv(p.test_ppl) + ",";
        csv += (p.delta_nll ? num_csv(*p.delta_nll) : "") + ",";
        csv += std::string(nllstats::to_string(p.status)) + "\n";
    }
    out.csv = csv;
    return out;
}

ReportFiles build_model_table_report(
    const std::vector<std::pair<std::string, judge::EvalMetrics>>& models) {
    ReportFiles out;
    std::vector<std::vector<std::string>> rows;
    json arr = json::array();
    std::string csv =
        "model_id,avg_score,perfect_rate,score3,score2,score1,score0,"
        "avg_latency_s,avg_chars\n";
    for (const auto& [id, m] : models) {
        rows.push_back({id, fmt("%.3f", m.avg_score), fmt("%.0f%%", m.perfect_rate),
                        dist_compact(m.score_dist), fmt("%.1f", m.avg_latency_s),
                        fmt("%.0f", m.avg_chars)});
        json e;
        e["model_id"] = id;
        e["metrics"] = m.to_json();
        arr.push_back(std::move(e));
        csv += id + "," + num_csv(m.avg_score) + "," + num_csv(m.perfect_rate);
        for (int s = 3; s >= 0; s--) {
            csv += "," + std::to_string(m.score_dist[static_cast<std::size_t>(s)]);
        }
        csv += "," + num_csv(m.avg_latency_s) + "," + num_csv(m.avg_chars) + "\n";
    }
    out.txt = "Model comparison (judged)\n\n" +
              render_table({"model", "avg_score", "perfect", "3-2-1-0",
                            "latency_s", "avg_chars"},
                           rows);
    json doc;
    doc["models"] = std::move(arr);
    out.jsn = doc.dump(2) + "\n";
    out.csv = csv;
    return out;
}

ReportFiles build_score_dist_report(
    const std::vector<std::pair<std::string, judge::EvalMetrics>>& models) {
    ReportFiles out;
    std::vector<std::vector<std::string>> rows;
    json arr = json::array();
    std::string csv = "model_id,score,count\n";
    for (const auto& [id, m] : models) {
        rows.push_back({id, std::to_string(m.score_dist[3]),
                        std::to_string(m.score_dist[2]),
                        std::to_string(m.score_dist[1]),
                        std::to_string(m.score_dist[0])});
        json e;
        e["model_id"] = id;
        json dist;
        for (int s = 3; s >= 0; s--) {
            dist[std::to_string(s)] = m.score_dist[static_cast<std::size_t>(s)];
        }
        e["dist"] = std::move(dist);
        arr.push_back(std::move(e));
        for (int s = 3; s >= 0; s--) {
            csv += id + "," + std::to_string(s) + "," +
                   std::to_string(m.score_dist[static_cast<std::size_t>(s)]) + "\n";
        }
    }
    out.txt = "Score distribution (answers per rubric score)\n\n" +
              render_table({"model", "3", "2", "1", "0"}, rows);
    json doc;
    doc["models"] = std::move(arr);
    out.jsn = doc.dump(2) + "\n";
    out.csv = csv;
    return out;
}

ReportFiles build_category_report(
    const std::vector<std::pair<std::string, judge::CategoryMatrix>>& models) {
    ReportFiles out;
    std::set<std::string> names;
    for (const auto& [id, m] : models) {
        for (const auto& [name, cell] : m.cells) names.insert(name);
    }

    std::vector<std::string> header{"category"};
    for (const auto& [id, m] : models) header.push_back(id);
    std::vector<std::vector<std::string>> rows;
    for (const auto& name : names) {
        std::vector<std::string> row{name};
        for (const auto& [id, m] : models) {
            auto it = m.cells.find(name);
            row.push_back(it == m.cells.end() ? "-" : fmt("%.2f", it->second.mean_score));
        }
        rows.push_back(std::move(row));
    }
    out.txt = "Mean score by question category\n\n" + render_table(header, rows);

    json arr = json::array();
    std::string csv = "model_id,category,mean_score,count\n";
    for (const auto& [id, m] : models) {
        json e;
        e["model_id"] = id;
        e["categories"] = m.to_json();
        arr.push_back(std::move(e));
        for (const auto& [name, cell] : m.cells) {
            csv += id + "," + name + "," + num_csv(cell.mean_score) + "," +
                   std::to_string(cell.count) + "\n";
        }
    }
    json doc;
    doc["models"] = std::move(arr);
    out.jsn = doc.dump(2) + "\n";
    out.csv = csv;
    return out;
}

ReportFiles build_quant_table_report(
    const std::vector<ComparisonReport>& comparisons,
    const std::vector<std::pair<std::string, Recommendation>>& recommendations) {
    ReportFiles out;
    std::vector<std::vector<std::string>> rows;
    json arr = json::array();
    std::string csv =
        "model_id,base_avg_score,quant_avg_score,delta_score,delta_perfect_pp,"
        "speedup,size_ratio,verdict\n";
    for (const auto& c : comparisons) {
        rows.push_back({c.model_id, fmt("%.3f", c.base.avg_score),
                        fmt("%.3f", c.quant.avg_score), fmt("%+.3f", c.delta_score),
                        fmt("%+.0f", c.delta_perfect_pp), fmt_sig2(c.speedup) + "x",
                        c.size_ratio ? fmt("%.1f", *c.size_ratio) : "-",
                        std::string(to_string(c.verdict))});
        arr.push_back(c.to_json());
        csv += c.model_id + "," + num_csv(c.base.avg_score) + "," +
               num_csv(c.quant.avg_score) + "," + num_csv(c.delta_score) + "," +
               num_csv(c.delta_perfect_pp) + "," + num_csv(c.speedup) + ",";
        csv += (c.size_ratio ? num_csv(*c.size_ratio) : "");
        csv += "," + std::string(to_string(c.verdict)) + "\n";
    }
    std::string txt = "Quantized vs. full-precision comparison\n\n";
    txt += render_table({"model", "base", "quant", "delta", "d_pp", "speedup",
                         "size_ratio", "verdict"},
                        rows);
    if (!recommendations.empty()) {
        txt += "\nRecommended formats:\n";
        for (const auto& [id, rec] : recommendations) {
            txt += "  " + id + ": " + std::string(to_string(rec.format));
            if (rec.alternative) {
                txt += " (or " + std::string(to_string(*rec.alternative)) + ")";
            }
            txt += " - " + rec.rationale;
            if (rec.warning) txt += " [warning]";
            txt += "\n";
        }
    }
    out.txt = txt;

    json doc;
    doc["comparisons"] = std::move(arr);
    json recs = json::array();
    for (const auto& [id, rec] : recommendations) {
        json e;
        e["model_id"] = id;
        e["recommendation"] = rec.to_json();
        recs.push_back(std::move(e));
    }
    doc["recommendations"] = std::move(recs);
    out.jsn = doc.dump(2) + "\n";
    out.csv = csv;
    return out;
}

}  // namespace

std::vector<fs::path> emit_report(const RunArtifacts& artifacts, ReportKind kind,
                                  const fs::path& out_dir) {
    ReportFiles files;
    std::string base;
    switch (kind) {
        case ReportKind::ScaleCurve:
            if (!artifacts.scale_curve || artifacts.scale_curve->points.empty()) {
                throw Error("scale curve artifact missing; run scale stage first");
            }
            files = build_scale_curve_report(*artifacts.scale_curve);
            base = "scale_curve";
            break;
        case ReportKind::ModelTable:
            if (artifacts.model_metrics.empty()) {
                throw Error("no judged evaluations; run judge stage first");
            }
            files = build_model_table_report(artifacts.model_metrics);
            base = "model_table";
            break;
        case ReportKind::ScoreDist:
            if (artifacts.model_metrics.empty()) {
                throw Error("no judged evaluations; run judge stage first");
            }
            files = build_score_dist_report(artifacts.model_metrics);
            base = "score_dist";
            break;
        case ReportKind::CategoryHeatmap: {
            bool any_cell = false;
            for (const auto& [id, m] : artifacts.categories) {
                if (!m.cells.empty()) any_cell = true;
            }
            if (!any_cell) {
                throw Error("category matrix is empty; run judge stage first");
            }
            files = build_category_report(artifacts.categories);
            base = "category_heatmap";
            break;
        }
        case ReportKind::QuantTable:
            if (artifacts.comparisons.empty()) {
                throw Error("no format comparisons; run quantize stage first");
            }
            files = build_quant_table_report(artifacts.comparisons,
                                             artifacts.recommendations);
            base = "quant_table";
            break;
    }

    std::vector<fs::path> written;
    auto put = [&](const char* ext, const std::string& content) {
        fs::path p = out_dir / (base + ext);
        util::write_file(p, content);
        written.push_back(p);
    };
    put(".txt", files.txt);
    put(".json", files.jsn);
    put(".csv", files.csv);
    return written;
}

// ---------------------------------------------------------------------------
// Run directory.
// ---------------------------------------------------------------------------

std::string sanitize_id(const std::string& id) {
    std::string out;
    for (char c : id) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                  (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
        out += ok ? c : '_';
    }
    return out.empty() ? "_" : out;
}

fs::path RunPaths::ingest_errors() const { return artifacts() / "ingest_errors.jsonl"; }
fs::path RunPaths::rebalanced_pool() const { return artifacts() / "rebalanced.jsonl"; }
fs::path RunPaths::rebalance_report() const {
    return artifacts() / "rebalance_report.json";
}
fs::path RunPaths::subset(int n) const {
    return artifacts() / "subsets" / ("subset_" + std::to_string(n) + ".jsonl");
}
fs::path RunPaths::quality_report() const { return artifacts() / "quality_report.json"; }
fs::path RunPaths::train_marker(int n) const {
    return artifacts() / ("train_" + std::to_string(n) + ".done");
}
fs::path RunPaths::train_log(int n) const {
    return logs() / ("train_" + std::to_string(n) + ".log");
}
fs::path RunPaths::model_dir(int n) const {
    return artifacts() / "models" / std::to_string(n);
}
fs::path RunPaths::nll_cache(int n) const {
    return artifacts() / ("nll_cache_" + std::to_string(n) + ".jsonl");
}
fs::path RunPaths::nll_report(int n) const {
    return artifacts() / ("nll_" + std::to_string(n) + ".json");
}
fs::path RunPaths::scale_curve() const { return artifacts() / "scale_curve.json"; }
fs::path RunPaths::eval_summary(const std::string& model_id,
                                const std::string& format_tag) const {
    return artifacts() /
           ("eval_" + sanitize_id(model_id) + "_" + sanitize_id(format_tag) + ".json");
}
fs::path RunPaths::judge_records(const std::string& model_id,
                                 const std::string& format_tag) const {
    return artifacts() / ("judge_records_" + sanitize_id(model_id) + "_" +
                          sanitize_id(format_tag) + ".jsonl");
}
fs::path RunPaths::convert_marker(const std::string& model_id) const {
    return artifacts() / ("convert_" + sanitize_id(model_id) + ".done");
}
fs::path RunPaths::convert_log(const std::string& model_id) const {
    return logs() / ("convert_" + sanitize_id(model_id) + ".log");
}
fs::path RunPaths::compare_report(const std::string& model_id) const {
    return artifacts() / ("compare_" + sanitize_id(model_id) + ".json");
}

// ---------------------------------------------------------------------------
// Manifests.
// ---------------------------------------------------------------------------

json StageManifest::to_json() const {
    json j;
    j["stage"] = std::string(to_string(stage));
    j["config_hash"] = config_hash;
    j["seeds"] = seeds;
    j["dataset_ids"] = dataset_ids;
    j["backends"] = backends;
    j["started_at"] = started_at;
    j["completed_at"] = completed_at;
    j["artifacts"] = artifacts;
    j["reports"] = reports;
    return j;
}

StageManifest StageManifest::from_json(const json& j) {
    StageManifest m;
    auto s = stage_from_string(j.at("stage").get<std::string>());
    if (!s) throw ConfigError("manifest: unknown stage name");
    m.stage = *s;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seeds = j.at("seeds");
    for (const auto& d : j.at("dataset_ids")) m.dataset_ids.push_back(d.get<std::string>());
    m.backends = j.at("backends");
    m.started_at = j.at("started_at").get<std::string>();
    m.completed_at = j.at("completed_at").get<std::string>();
    for (const auto& a : j.at("artifacts")) m.artifacts.push_back(a.get<std::string>());
    for (const auto& r : j.at("reports")) m.reports.push_back(r.get<std::string>());
    return m;
}

std::string StageManifest::hash() const { return util::fnv1a64_hex(to_json().dump()); }

json load_manifest(const RunPaths& paths) {
    if (!fs::exists(paths.manifest())) {
        json doc;
        doc["stages"] = json::object();
        return doc;
    }
    json doc = parse_json_file(paths.manifest(), "manifest");
    if (!doc.contains("stages") || !doc["stages"].is_object()) {
        throw ConfigError("manifest " + paths.manifest().string() +
                          " has no stages object");
    }
    return doc;
}

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

PipelineConfig PipelineConfig::load(const fs::path& path) {
    json doc = parse_json_file(path, "config");
    fs::path dir = path.parent_path();
    return from_json(doc, dir.empty() ? fs::path(".") : dir);
}

PipelineConfig PipelineConfig::from_json(const json& doc, const fs::path& base_dir) {
    if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
    PipelineConfig c;
    c.raw = doc;
    c.base_dir = base_dir;
    return c;
}

const json& PipelineConfig::section(const std::string& name) const {
    auto it = raw.find(name);
    if (it == raw.end() || !it->is_object()) {
        throw ConfigError("config: missing section '" + name + "'");
    }
    return *it;
}

bool PipelineConfig::has_section(const std::string& name) const {
    auto it = raw.find(name);
    return it != raw.end() && it->is_object();
}

fs::path PipelineConfig::resolve(const std::string& relative) const {
    fs::path p(relative);
    return p.is_absolute() ? p : base_dir / p;
}

std::string stage_config_hash(const PipelineConfig& config, Stage stage) {
    json doc;
    switch (stage) {
        case Stage::Scale:
            doc["corpus"] = config.section("corpus");
            doc["scale"] = config.section("scale");
            break;
        case Stage::CompareModels:
            doc["judge"] = config.section("judge");
            break;
        case Stage::Quantize:
            doc["quantize"] = config.section("quantize");
            break;
    }
    return util::fnv1a64_hex(doc.dump());
}

// ---------------------------------------------------------------------------
// Pipeline internals.
// ---------------------------------------------------------------------------

namespace {

std::string rel_to_run(const RunPaths& paths, const fs::path& p) {
    return p.lexically_relative(paths.run_dir).generic_string();
}

corpus::CorpusPool load_pool_file(const fs::path& path) {
    corpus::CorpusPool pool;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open pool file: " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            pool.pairs.push_back(corpus::qa_pair_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw ConfigError("malformed pool line " + std::to_string(lineno) +
                              " in " + path.string() + ": " + e.what());
        }
    }
    pool.provenance.push_back(path.filename().string());
    return pool;
}

std::vector<int> parse_sizes(const json& sec) {
    const json& sizes_j = need(sec, "sizes", "scale");
    if (!sizes_j.is_array() || sizes_j.empty()) {
        throw ConfigError("config: scale.sizes must be a non-empty array");
    }
    std::vector<int> sizes;
    for (const auto& s : sizes_j) {
        if (!s.is_number_integer()) {
            throw ConfigError("config: scale.sizes entries must be integers");
        }
        sizes.push_back(s.get<int>());
    }
    return sizes;
}

std::vector<fs::path> config_files(const PipelineConfig& cfg, const json& sec,
                                   const std::string& key, const std::string& where) {
    const json& arr = need(sec, key, where);
    if (!arr.is_array() || arr.empty()) {
        throw ConfigError("config: " + where + "." + key +
                          " must be a non-empty array of paths");
    }
    std::vector<fs::path> files;
    for (const auto& f : arr) files.push_back(cfg.resolve(f.get<std::string>()));
    return files;
}

corpus::CorpusPool load_questions(const PipelineConfig& cfg, const json& sec,
                                  const std::string& where) {
    fs::path file = cfg.resolve(need_str(sec, "questions_file", where));
    auto res = corpus::ingest_corpus({file});
    if (res.pool.pairs.empty()) {
        throw ConfigError("config: " + where + ".questions_file " + file.string() +
                          " contains no usable questions");
    }
    return res.pool;
}

std::string file_id(const std::string& label, const fs::path& p) {
    return label + ":" + util::fnv1a64_hex(util::read_file(p));
}

judge::JudgeConfig judge_config_from(const json& sec, const std::string& format_tag,
                                     const fs::path& records_path) {
    judge::JudgeConfig jc;
    jc.candidate_prompt_template =
        opt_str(sec, "candidate_prompt_template", jc.candidate_prompt_template);
    jc.max_retries = opt_int(sec, "max_retries", jc.max_retries);
    jc.show_reference = opt_bool(sec, "show_reference", jc.show_reference);
    jc.concurrency = opt_int(sec, "concurrency", jc.concurrency);
    jc.format_tag = format_tag;
    jc.records_path = records_path;
    return jc;
}

/// Judged evaluation with artifact-level resume: when the summary file
/// exists the whole evaluation is skipped (zero backend calls); otherwise
/// run_judged_eval resumes from its own records file.
json ensure_eval(const RunPaths& paths, const json& stage_sec,
                 const corpus::CorpusPool& questions, const judge::Rubric& rubric,
                 const backend::BackendDescriptor& judge_desc,
                 std::unique_ptr<backend::Backend>& judge_be,
                 const backend::BackendDescriptor& cand_desc,
                 const std::string& model_id, const std::string& format_tag) {
    fs::path summary = paths.eval_summary(model_id, format_tag);
    if (fs::exists(summary)) return parse_json_file(summary, "eval summary");

    if (!judge_be) judge_be = backend::make_backend(judge_desc);
    auto cand_be = backend::make_backend(cand_desc);
    auto jc = judge_config_from(stage_sec, format_tag,
                                paths.judge_records(model_id, format_tag));
    auto run = judge::run_judged_eval(*cand_be, *judge_be, questions, rubric, jc);
    run.model_id = model_id;
    auto metrics = judge::aggregate_metrics(run);
    auto cats = judge::category_breakdown(run, questions);

    json sj;
    sj["model_id"] = model_id;
    sj["format_tag"] = format_tag;
    sj["metrics"] = metrics.to_json();
    sj["categories"] = cats.to_json();
    sj["records"] = rel_to_run(paths, jc.records_path);
    util::write_file(summary, sj.dump(2) + "\n");
    return sj;
}

judge::Rubric rubric_from(const json& sec) {
    return sec.contains("rubric") ? judge::Rubric::from_json(sec["rubric"])
                                  : judge::Rubric::default_rubric();
}

// ---- Scale stage ----

void run_scale(const PipelineConfig& cfg, const RunOptions& opt, const RunPaths& paths,
               StageManifest& m) {
    const json& corpus_sec = cfg.section("corpus");
    const json& scale_sec = cfg.section("scale");
    std::int64_t corpus_seed = need_int(corpus_sec, "seed", "corpus");
    std::int64_t scale_seed = need_int(scale_sec, "seed", "scale");
    if (opt.seed_override) scale_seed = static_cast<std::int64_t>(*opt.seed_override);
    std::vector<int> sizes = parse_sizes(scale_sec);
    m.seeds["corpus"] = corpus_seed;
    m.seeds["scale"] = scale_seed;

    // The whole stage config is checked before any work or external call,
    // so a typo cannot surface halfway through an expensive run.
    std::string target = need_str(corpus_sec, "target_relation", "corpus");
    bool known = false;
    auto rel = corpus::relation_from_string(target, &known);
    if (!known) {
        throw ConfigError("config: corpus.target_relation '" + target +
                          "' is not a known relation");
    }
    double retain = need_num(corpus_sec, "retain_fraction", "corpus");
    fs::path test_file = cfg.resolve(need_str(scale_sec, "test_file", "scale"));
    const json& backends = need(scale_sec, "backends", "scale");
    if (!backends.is_object()) {
        throw ConfigError("config: scale.backends must map sizes to backends");
    }
    std::map<int, backend::BackendDescriptor> descs;
    for (int n : sizes) {
        auto it = backends.find(std::to_string(n));
        if (it == backends.end()) {
            throw ConfigError("config: scale.backends has no entry for size " +
                              std::to_string(n));
        }
        descs.emplace(n, backend::BackendDescriptor::from_json(*it));
        m.backends[std::to_string(n)] = descs.at(n).to_json();
    }

    // Rebalanced pool.
    corpus::CorpusPool pool;
    if (!fs::exists(paths.rebalanced_pool())) {
        auto files = config_files(cfg, corpus_sec, "files", "corpus");
        auto res = corpus::ingest_corpus(files);
        if (!res.errors.empty()) {
            corpus::write_ingest_errors(res.errors, paths.ingest_errors());
        }
        corpus::RebalancePolicy policy;
        policy.target_relation = rel;
        policy.retain_fraction = retain;
        policy.seed = static_cast<std::uint64_t>(corpus_seed);
        corpus::RebalanceReport report;
        pool = corpus::rebalance(res.pool, policy, &report);
        corpus::write_subset(pool, paths.rebalanced_pool());
        util::write_file(paths.rebalance_report(), report.to_json().dump(2) + "\n");
    } else {
        pool = load_pool_file(paths.rebalanced_pool());
    }
    m.artifacts.push_back(rel_to_run(paths, paths.rebalanced_pool()));
    if (fs::exists(paths.rebalance_report())) {
        m.artifacts.push_back(rel_to_run(paths, paths.rebalance_report()));
    }

    // Nested subsets + quality validation.
    bool subsets_missing = false;
    for (int n : sizes) {
        if (!fs::exists(paths.subset(n))) subsets_missing = true;
    }
    bool quality_missing = sizes.size() >= 2 && !fs::exists(paths.quality_report());
    if (subsets_missing || quality_missing) {
        corpus::SubsetSpec spec;
        spec.sizes = sizes;
        spec.seed = static_cast<std::uint64_t>(scale_seed);
        auto subsets = corpus::make_nested_subsets(pool, spec);
        for (std::size_t i = 0; i < sizes.size(); i++) {
            if (!fs::exists(paths.subset(sizes[i]))) {
                corpus::write_subset(subsets[i], paths.subset(sizes[i]));
            }
        }
        if (quality_missing) {
            auto quality = corpus::validate_subsets(subsets);
            util::write_file(paths.quality_report(), quality.to_json().dump(2) + "\n");
        }
    }
    for (int n : sizes) m.artifacts.push_back(rel_to_run(paths, paths.subset(n)));
    if (fs::exists(paths.quality_report())) {
        m.artifacts.push_back(rel_to_run(paths, paths.quality_report()));
    }

    // Optional external training hooks, one per size.
    if (scale_sec.contains("train_command")) {
        std::string tmpl = scale_sec["train_command"].get<std::string>();
        for (int n : sizes) {
            if (fs::exists(paths.train_marker(n))) continue;
            fs::create_directories(paths.model_dir(n));
            std::map<std::string, std::string> vars{
                {"n", std::to_string(n)},
                {"train_file", paths.subset(n).string()},
                {"model_dir", paths.model_dir(n).string()},
                {"run_dir", paths.run_dir.string()},
            };
            auto result = backend::run_external_stage(tmpl, vars, paths.train_log(n));
            util::write_file(paths.train_marker(n), result.command + "\n");
        }
        for (int n : sizes) m.artifacts.push_back(rel_to_run(paths, paths.train_marker(n)));
    }

    // Per-size corpus NLL over the held-out test set.
    corpus::CorpusPool test_pool;
    bool test_loaded = false;
    for (int n : sizes) {
        const auto& desc = descs.at(n);
        if (fs::exists(paths.nll_report(n))) continue;
        if (!test_loaded) {
            auto res = corpus::ingest_corpus({test_file});
            if (res.pool.pairs.empty()) {
                throw ConfigError("config: scale.test_file " + test_file.string() +
                                  " contains no usable pairs");
            }
            test_pool = std::move(res.pool);
            test_loaded = true;
        }
        auto be = backend::make_backend(desc);
        nllstats::CorpusNllOptions nopt;
        nopt.prompt_template = opt_str(scale_sec, "prompt_template", nopt.prompt_template);
        nopt.concurrency = opt_int(scale_sec, "concurrency", nopt.concurrency);
        nopt.cache_path = paths.nll_cache(n);
        auto report = nllstats::corpus_nll(*be, desc.model_id, test_pool, nopt);
        report.n = n;
        util::write_file(paths.nll_report(n), report.to_json().dump(2) + "\n");
    }
    for (int n : sizes) m.artifacts.push_back(rel_to_run(paths, paths.nll_report(n)));

    // Scale curve.
    if (!fs::exists(paths.scale_curve())) {
        std::vector<nllstats::ScaleObservation> obs;
        const json* losses = scale_sec.contains("train_losses")
                                 ? &scale_sec["train_losses"]
                                 : nullptr;
        for (int n : sizes) {
            auto report = nllstats::NLLReport::from_json(
                parse_json_file(paths.nll_report(n), "NLL report"));
            nllstats::ScaleObservation o;
            o.n = n;
            o.test_nll = report.nll;
            if (losses && losses->contains(std::to_string(n))) {
                o.train_loss = (*losses)[std::to_string(n)].get<double>();
            }
            obs.push_back(o);
        }
        auto curve = nllstats::build_scale_curve(obs);
        util::write_file(paths.scale_curve(), curve.to_json().dump(2) + "\n");
    }
    m.artifacts.push_back(rel_to_run(paths, paths.scale_curve()));

    // Report.
    RunArtifacts arts;
    arts.scale_curve =
        parse_scale_curve(parse_json_file(paths.scale_curve(), "scale curve"));
    for (const auto& p : emit_report(arts, ReportKind::ScaleCurve, paths.reports())) {
        m.reports.push_back(rel_to_run(paths, p));
    }

    m.dataset_ids.push_back(file_id("rebalanced", paths.rebalanced_pool()));
    for (int n : sizes) {
        m.dataset_ids.push_back(
            file_id("subset_" + std::to_string(n), paths.subset(n)));
    }
    m.dataset_ids.push_back(file_id("test", test_file));
}

// ---- CompareModels stage ----

void run_compare_models(const PipelineConfig& cfg, const RunOptions& opt,
                        const RunPaths& paths, StageManifest& m) {
    const json& sec = cfg.section("judge");
    std::int64_t seed = need_int(sec, "seed", "judge");
    if (opt.seed_override) seed = static_cast<std::int64_t>(*opt.seed_override);
    m.seeds["judge"] = seed;

    fs::path questions_file = cfg.resolve(need_str(sec, "questions_file", "judge"));
    auto questions = load_questions(cfg, sec, "judge");
    auto rubric = rubric_from(sec);
    auto judge_desc = backend::BackendDescriptor::from_json(
        need(sec, "judge_backend", "judge"));
    m.backends["judge"] = judge_desc.to_json();

    const json& candidates = need(sec, "candidates", "judge");
    if (!candidates.is_array() || candidates.empty()) {
        throw ConfigError("config: judge.candidates must be a non-empty array");
    }

    std::unique_ptr<backend::Backend> judge_be;
    RunArtifacts arts;
    for (const auto& cand : candidates) {
        std::string model_id = need_str(cand, "model_id", "judge.candidates");
        std::string tag = opt_str(cand, "format_tag", "F16");
        auto desc =
            backend::BackendDescriptor::from_json(need(cand, "backend", "judge.candidates"));
        m.backends[model_id] = desc.to_json();
        json sj = ensure_eval(paths, sec, questions, rubric, judge_desc, judge_be,
                              desc, model_id, tag);
        arts.model_metrics.emplace_back(model_id, parse_metrics(sj.at("metrics")));
        arts.categories.emplace_back(model_id, parse_categories(sj.at("categories")));
        m.artifacts.push_back(rel_to_run(paths, paths.eval_summary(model_id, tag)));
    }

    std::vector<ReportKind> kinds{ReportKind::ModelTable, ReportKind::ScoreDist};
    bool any_cells = false;
    for (const auto& [id, mat] : arts.categories) {
        if (!mat.cells.empty()) any_cells = true;
    }
    // A corpus without category labels yields no heatmap rather than a failure.
    if (any_cells) kinds.push_back(ReportKind::CategoryHeatmap);
    for (auto kind : kinds) {
        for (const auto& p : emit_report(arts, kind, paths.reports())) {
            m.reports.push_back(rel_to_run(paths, p));
        }
    }
    m.dataset_ids.push_back(file_id("questions", questions_file));
}

// ---- Quantize stage ----

struct QuantSide {
    std::string tag;
    backend::BackendDescriptor desc;
    std::optional<double> size_gb;
};

QuantSide parse_quant_side(const json& entry, const char* side,
                           const std::string& model_id) {
    const std::string where = "quantize.models[" + model_id + "]." + side;
    const json& j = need(entry, side, "quantize.models[" + model_id + "]");
    QuantSide s;
    s.tag = need_str(j, "format_tag", where);
    auto parsed = format_tag_from_string(s.tag);
    if (!parsed) {
        throw ConfigError("config: " + where + ".format_tag '" + s.tag +
                          "' is not a known format");
    }
    if (*parsed == FormatTag::HF4bit) {
        throw ConfigError("config: " + where +
                          ": HF4bit builds are not comparable against GGUF "
                          "formats; remove this model from the quantize stage");
    }
    s.desc = backend::BackendDescriptor::from_json(need(j, "backend", where));
    if (j.contains("size_gb")) s.size_gb = j["size_gb"].get<double>();
    return s;
}

void run_quantize(const PipelineConfig& cfg, const RunOptions& opt,
                  const RunPaths& paths, StageManifest& m) {
    const json& sec = cfg.section("quantize");
    std::int64_t seed = need_int(sec, "seed", "quantize");
    if (opt.seed_override) seed = static_cast<std::int64_t>(*opt.seed_override);
    m.seeds["quantize"] = seed;

    fs::path questions_file = cfg.resolve(need_str(sec, "questions_file", "quantize"));
    auto questions = load_questions(cfg, sec, "quantize");
    auto rubric = rubric_from(sec);
    auto judge_desc = backend::BackendDescriptor::from_json(
        need(sec, "judge_backend", "quantize"));
    m.backends["judge"] = judge_desc.to_json();
    double neutral_band = opt_num(sec, "neutral_band", 0.005);
    double deploy_block = opt_num(sec, "deploy_block", 0.1);

    const json& models = need(sec, "models", "quantize");
    if (!models.is_array() || models.empty()) {
        throw ConfigError("config: quantize.models must be a non-empty array");
    }

    std::unique_ptr<backend::Backend> judge_be;
    RunArtifacts arts;
    for (const auto& entry : models) {
        std::string model_id = need_str(entry, "model_id", "quantize.models");
        std::string arch_str =
            need_str(entry, "architecture", "quantize.models[" + model_id + "]");
        auto arch = architecture_from_string(arch_str);
        if (!arch) {
            throw ConfigError("config: quantize.models[" + model_id +
                              "].architecture '" + arch_str + "' is unknown");
        }
        QuantSide base = parse_quant_side(entry, "base", model_id);
        QuantSide quant = parse_quant_side(entry, "quant", model_id);
        m.backends[model_id + ":" + base.tag] = base.desc.to_json();
        m.backends[model_id + ":" + quant.tag] = quant.desc.to_json();

        if (entry.contains("convert_command") &&
            !fs::exists(paths.convert_marker(model_id))) {
            fs::path out_dir = paths.artifacts() / "models" / sanitize_id(model_id);
            fs::create_directories(out_dir);
            std::map<std::string, std::string> vars{
                {"model_id", model_id},
                {"model_dir", out_dir.string()},
                {"run_dir", paths.run_dir.string()},
            };
            auto result = backend::run_external_stage(
                entry["convert_command"].get<std::string>(), vars,
                paths.convert_log(model_id));
            util::write_file(paths.convert_marker(model_id), result.command + "\n");
        }

        json base_summary = ensure_eval(paths, sec, questions, rubric, judge_desc,
                                        judge_be, base.desc, model_id, base.tag);
        json quant_summary = ensure_eval(paths, sec, questions, rubric, judge_desc,
                                         judge_be, quant.desc, model_id, quant.tag);
        m.artifacts.push_back(rel_to_run(paths, paths.eval_summary(model_id, base.tag)));
        m.artifacts.push_back(rel_to_run(paths, paths.eval_summary(model_id, quant.tag)));

        fs::path cmp_path = paths.compare_report(model_id);
        json cmp_doc;
        if (fs::exists(cmp_path)) {
            cmp_doc = parse_json_file(cmp_path, "comparison");
        } else {
            ModelProfile profile;
            profile.model_id = model_id;
            profile.architecture = *arch;
            profile.format_tag = *format_tag_from_string(base.tag);
            profile.size_gb = base.size_gb;
            CompareExtras extras;
            extras.deploy_block = deploy_block;
            extras.base_size_gb = base.size_gb;
            extras.quant_size_gb = quant.size_gb;
            auto report =
                compare_formats(parse_metrics(base_summary.at("metrics")),
                                parse_metrics(quant_summary.at("metrics")), profile,
                                neutral_band, extras);
            auto rec = recommend_quantization(profile);
            cmp_doc["comparison"] = report.to_json();
            cmp_doc["recommendation"] = rec.to_json();
            util::write_file(cmp_path, cmp_doc.dump(2) + "\n");
        }
        arts.comparisons.push_back(ComparisonReport::from_json(cmp_doc.at("comparison")));
        arts.recommendations.emplace_back(
            model_id, parse_recommendation(cmp_doc.at("recommendation")));
        m.artifacts.push_back(rel_to_run(paths, cmp_path));
    }

    for (const auto& p : emit_report(arts, ReportKind::QuantTable, paths.reports())) {
        m.reports.push_back(rel_to_run(paths, p));
    }
    m.dataset_ids.push_back(file_id("questions", questions_file));
}

// ---- dry run ----

void dry_run_stage(const PipelineConfig& cfg, Stage stage, const RunPaths& paths) {
    std::ostream& out = std::cout;
    out << "dry-run: stage " << to_string(stage) << " in " << paths.run_dir.string()
        << "\n";
    switch (stage) {
        case Stage::Scale: {
            const json& corpus_sec = cfg.section("corpus");
            const json& scale_sec = cfg.section("scale");
            need_int(corpus_sec, "seed", "corpus");
            need_int(scale_sec, "seed", "scale");
            auto sizes = parse_sizes(scale_sec);
            out << "plan: rebalance corpus (target "
                << need_str(corpus_sec, "target_relation", "corpus") << ", retain "
                << fmt("%.2f", need_num(corpus_sec, "retain_fraction", "corpus"))
                << ") -> " << rel_to_run(paths, paths.rebalanced_pool()) << "\n";
            std::string size_list;
            for (std::size_t i = 0; i < sizes.size(); i++) {
                size_list += (i ? "," : "") + std::to_string(sizes[i]);
            }
            out << "plan: nested subsets n=" << size_list << "\n";
            if (sizes.size() >= 2) {
                out << "plan: validate subsets -> "
                    << rel_to_run(paths, paths.quality_report()) << "\n";
            }
            if (scale_sec.contains("train_command")) {
                for (int n : sizes) {
                    std::map<std::string, std::string> vars{
                        {"n", std::to_string(n)},
                        {"train_file", paths.subset(n).string()},
                        {"model_dir", paths.model_dir(n).string()},
                        {"run_dir", paths.run_dir.string()},
                    };
                    out << "would run: "
                        << backend::render_stage_command(
                               scale_sec["train_command"].get<std::string>(), vars)
                        << "\n";
                }
            }
            const json& backends = need(scale_sec, "backends", "scale");
            for (int n : sizes) {
                auto it = backends.find(std::to_string(n));
                if (it == backends.end()) {
                    throw ConfigError("config: scale.backends has no entry for size " +
                                      std::to_string(n));
                }
                auto desc = backend::BackendDescriptor::from_json(*it);
                out << "plan: corpus NLL n=" << n << " via " << to_string(desc.kind)
                    << " backend model '" << desc.model_id << "' -> "
                    << rel_to_run(paths, paths.nll_report(n)) << "\n";
            }
            out << "plan: scale curve -> " << rel_to_run(paths, paths.scale_curve())
                << " + reports/scale_curve.{txt,json,csv}\n";
            break;
        }
        case Stage::CompareModels: {
            const json& sec = cfg.section("judge");
            need_int(sec, "seed", "judge");
            need_str(sec, "questions_file", "judge");
            backend::BackendDescriptor::from_json(need(sec, "judge_backend", "judge"));
            const json& candidates = need(sec, "candidates", "judge");
            for (const auto& cand : candidates) {
                std::string model_id = need_str(cand, "model_id", "judge.candidates");
                std::string tag = opt_str(cand, "format_tag", "F16");
                out << "plan: judged eval " << model_id << " [" << tag << "] -> "
                    << rel_to_run(paths, paths.eval_summary(model_id, tag)) << "\n";
            }
            out << "plan: reports model_table, score_dist, category_heatmap\n";
            break;
        }
        case Stage::Quantize: {
            const json& sec = cfg.section("quantize");
            need_int(sec, "seed", "quantize");
            need_str(sec, "questions_file", "quantize");
            backend::BackendDescriptor::from_json(need(sec, "judge_backend", "quantize"));
            const json& models = need(sec, "models", "quantize");
            for (const auto& entry : models) {
                std::string model_id = need_str(entry, "model_id", "quantize.models");
                QuantSide base = parse_quant_side(entry, "base", model_id);
                QuantSide quant = parse_quant_side(entry, "quant", model_id);
                if (entry.contains("convert_command")) {
                    std::map<std::string, std::string> vars{
                        {"model_id", model_id},
                        {"model_dir",
                         (paths.artifacts() / "models" / sanitize_id(model_id)).string()},
                        {"run_dir", paths.run_dir.string()},
                    };
                    out << "would run: "
                        << backend::render_stage_command(
                               entry["convert_command"].get<std::string>(), vars)
                        << "\n";
                }
                out << "plan: judged eval " << model_id << " [" << base.tag << "] and ["
                    << quant.tag << "], then compare -> "
                    << rel_to_run(paths, paths.compare_report(model_id)) << "\n";
            }
            out << "plan: report quant_table\n";
            break;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Pipeline entry points.
// ---------------------------------------------------------------------------

StageManifest run_pipeline(const PipelineConfig& config, Stage stage,
                           const RunOptions& options) {
    if (options.run_dir.empty()) {
        throw ConfigError("a run directory is required (--run-dir)");
    }
    RunPaths paths{options.run_dir};
    std::string hash = stage_config_hash(config, stage);

    if (options.dry_run) {
        dry_run_stage(config, stage, paths);
        StageManifest m;
        m.stage = stage;
        m.config_hash = hash;
        return m;
    }

    fs::create_directories(paths.artifacts());
    fs::create_directories(paths.logs());
    fs::create_directories(paths.reports());
    util::LockFile lock(paths.lock());

    json manifest_doc = load_manifest(paths);
    std::string key{to_string(stage)};
    if (manifest_doc["stages"].contains(key)) {
        auto prior = StageManifest::from_json(manifest_doc["stages"][key]);
        if (!prior.completed_at.empty()) {
            if (prior.config_hash == hash) return prior;
            throw ConfigError("stage " + key +
                              " already completed under a different config; use a "
                              "fresh run directory");
        }
    }

    StageManifest m;
    m.stage = stage;
    m.config_hash = hash;
    m.started_at = util::iso8601_utc_now();
    switch (stage) {
        case Stage::Scale:
            run_scale(config, options, paths, m);
            break;
        case Stage::CompareModels:
            run_compare_models(config, options, paths, m);
            break;
        case Stage::Quantize:
            run_quantize(config, options, paths, m);
            break;
    }
    m.completed_at = util::iso8601_utc_now();
    manifest_doc["stages"][key] = m.to_json();
    util::write_file(paths.manifest(), manifest_doc.dump(2) + "\n");
    return m;
}

RunArtifacts load_run_artifacts(const PipelineConfig& config, const RunPaths& paths) {
    RunArtifacts arts;
    if (fs::exists(paths.scale_curve())) {
        arts.scale_curve =
            parse_scale_curve(parse_json_file(paths.scale_curve(), "scale curve"));
    }
    if (config.has_section("judge")) {
        const json& sec = config.section("judge");
        if (sec.contains("candidates") && sec["candidates"].is_array()) {
            for (const auto& cand : sec["candidates"]) {
                if (!cand.contains("model_id")) continue;
                std::string model_id = cand["model_id"].get<std::string>();
                std::string tag = opt_str(cand, "format_tag", "F16");
                fs::path summary = paths.eval_summary(model_id, tag);
                if (!fs::exists(summary)) continue;
                json sj = parse_json_file(summary, "eval summary");
                arts.model_metrics.emplace_back(model_id, parse_metrics(sj.at("metrics")));
                arts.categories.emplace_back(model_id,
                                             parse_categories(sj.at("categories")));
            }
        }
    }
    if (config.has_section("quantize")) {
        const json& sec = config.section("quantize");
        if (sec.contains("models") && sec["models"].is_array()) {
            for (const auto& entry : sec["models"]) {
                if (!entry.contains("model_id")) continue;
                std::string model_id = entry["model_id"].get<std::string>();
                fs::path cmp = paths.compare_report(model_id);
                if (!fs::exists(cmp)) continue;
                json doc = parse_json_file(cmp, "comparison");
                arts.comparisons.push_back(
                    ComparisonReport::from_json(doc.at("comparison")));
                arts.recommendations.emplace_back(
                    model_id, parse_recommendation(doc.at("recommendation")));
            }
        }
    }
    return arts;
}

}  // namespace slmeval::orchestrator
