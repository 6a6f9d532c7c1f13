#include "slmeval/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "slmeval/errors.hpp"
#include "slmeval/util.hpp"

namespace slmeval::corpus {

namespace {

struct RelationName {
    RelationType type;
    std::string_view name;
};

constexpr std::array<RelationName, kRelationTypeCount> kRelationNames = {{
    {RelationType::HasChapter, "HAS_CHAPTER"},
    {RelationType::DescribedIn, "DESCRIBED_IN"},
    {RelationType::HasSection, "HAS_SECTION"},
    {RelationType::HasItem, "HAS_ITEM"},
    {RelationType::DefinedIn, "DEFINED_IN"},
    {RelationType::SubjectTo, "SUBJECT_TO"},
    {RelationType::UsedIn, "USED_IN"},
    {RelationType::Requires, "REQUIRES"},
    {RelationType::Affects, "AFFECTS"},
    {RelationType::Mitigates, "MITIGATES"},
    {RelationType::Precedes, "PRECEDES"},
    {RelationType::Other, "OTHER"},
}};

struct CategoryName {
    Category cat;
    std::string_view name;
};

constexpr std::array<CategoryName, kCategoryCount> kCategoryNames = {{
    {Category::Survey, "Survey"},
    {Category::Planning, "Planning"},
    {Category::Design, "Design"},
    {Category::MaintenanceRiver, "Maintenance-River"},
    {Category::MaintenanceDam, "Maintenance-Dam"},
    {Category::MaintenanceSabo, "Maintenance-Sabo"},
    {Category::Hazard, "Hazard"},
    {Category::Comparative, "Comparative"},
}};

}  // namespace

std::string_view to_string(RelationType r) {
    return kRelationNames[static_cast<int>(r)].name;
}

RelationType relation_from_string(std::string_view s, bool* known) {
    for (const auto& entry : kRelationNames) {
        if (entry.name == s) {
            if (known) *known = true;
            return entry.type;
        }
    }
    if (known) *known = false;
    return RelationType::Other;
}

std::string_view to_string(Category c) {
    return kCategoryNames[static_cast<int>(c)].name;
}

std::optional<Category> category_from_string(std::string_view s) {
    for (const auto& entry : kCategoryNames) {
        if (entry.name == s) return entry.cat;
    }
    return std::nullopt;
}

std::array<std::size_t, kRelationTypeCount> CorpusPool::relation_counts() const {
    std::array<std::size_t, kRelationTypeCount> counts{};
    for (const auto& p : pairs) counts[static_cast<int>(p.relation_type)]++;
    return counts;
}

// ---------------------------------------------------------------------------
// Ingestion.
// ---------------------------------------------------------------------------

IngestResult ingest_corpus(const std::vector<std::filesystem::path>& files) {
    IngestResult result;
    // Keyed on question + answer; the separator byte cannot occur in JSON
    // string content, so concatenation is unambiguous.
    std::set<std::string> seen;

    for (const auto& file : files) {
        std::ifstream in(file);
        if (!in) {
            throw ConfigError("cannot open corpus file: " + file.string());
        }
        result.pool.provenance.push_back(file.filename().string());

        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            line_no++;
            // Skip blank lines silently; they are common at end of file.
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

            json j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object()) {
                result.errors.push_back({file.string(), line_no, "invalid JSON object"});
                result.rejected_records++;
                continue;
            }

            std::string missing;
            for (const char* key : {"id", "question", "answer", "relation_type"}) {
                if (!j.contains(key) || !j[key].is_string() ||
                    j[key].get<std::string>().empty()) {
                    missing = key;
                    break;
                }
            }
            if (!missing.empty()) {
                result.errors.push_back(
                    {file.string(), line_no, "missing or empty field: " + missing});
                result.rejected_records++;
                continue;
            }

            QAPair p;
            p.id = j["id"].get<std::string>();
            p.question = j["question"].get<std::string>();
            p.answer = j["answer"].get<std::string>();

            bool known = false;
            p.relation_type =
                relation_from_string(j["relation_type"].get<std::string>(), &known);
            if (!known) result.unknown_relations++;

            if (j.contains("category")) {
                if (!j["category"].is_string()) {
                    result.errors.push_back(
                        {file.string(), line_no, "category must be a string"});
                    result.rejected_records++;
                    continue;
                }
                auto cat = category_from_string(j["category"].get<std::string>());
                if (!cat) {
                    result.errors.push_back(
                        {file.string(), line_no,
                         "unknown category: " + j["category"].get<std::string>()});
                    result.rejected_records++;
                    continue;
                }
                p.category = *cat;
            }
            if (j.contains("source_version")) {
                if (!j["source_version"].is_string()) {
                    result.errors.push_back(
                        {file.string(), line_no, "source_version must be a string"});
                    result.rejected_records++;
                    continue;
                }
                p.source_version = j["source_version"].get<std::string>();
            }

            std::string key = p.question + '\x1f' + p.answer;
            if (!seen.insert(std::move(key)).second) {
                result.duplicates_dropped++;
                continue;
            }
            result.pool.pairs.push_back(std::move(p));
        }
    }
    return result;
}

void write_ingest_errors(const std::vector<IngestError>& errors,
                         const std::filesystem::path& path) {
    std::ostringstream out;
    for (const auto& e : errors) {
        json j;
        j["file"] = e.file;
        j["line"] = e.line;
        j["reason"] = e.reason;
        out << j.dump() << '\n';
    }
    util::write_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Rebalancing.
// ---------------------------------------------------------------------------

std::int64_t retain_count(std::int64_t n, double fraction) {
    if (n < 0) throw ConfigError("retain_count: negative count");
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ConfigError("retain fraction must be in [0, 1]");
    }
    // Snap the fraction to 9 decimal digits and round the product half away
    // from zero, all in integers: a fraction written as 0.7 then behaves as
    // exactly 0.7 even though the double closest to it is slightly below.
    const std::int64_t kScale = 1'000'000'000;
    auto f9 = std::llround(fraction * static_cast<double>(kScale));
    return (n * f9 + kScale / 2) / kScale;
}

std::string RebalanceReport::summary() const {
    std::ostringstream out;
    out << "rebalance " << to_string(target) << ": ";
    if (target_absent) {
        out << "target relation absent, pool unchanged (" << pool_before << " pairs)";
        return out.str();
    }
    out << target_before << " -> " << target_retained << " pairs; pool "
        << pool_before << " -> " << pool_after << "; target share "
        << std::fixed << std::setprecision(1) << share_of_original * 100.0
        << "% of original pool, " << share_of_rebalanced * 100.0
        << "% of rebalanced pool";
    return out.str();
}

json RebalanceReport::to_json() const {
    json j;
    j["target"] = std::string(to_string(target));
    j["pool_before"] = pool_before;
    j["pool_after"] = pool_after;
    j["target_before"] = target_before;
    j["target_retained"] = target_retained;
    j["target_absent"] = target_absent;
    j["share_of_original"] = share_of_original;
    j["share_of_rebalanced"] = share_of_rebalanced;
    j["summary"] = summary();
    return j;
}

CorpusPool rebalance(const CorpusPool& pool, const RebalancePolicy& policy,
                     RebalanceReport* report) {
    RebalanceReport local;
    RebalanceReport& rep = report ? *report : local;
    rep = RebalanceReport{};
    rep.target = policy.target_relation;
    rep.pool_before = pool.size();

    std::vector<std::size_t> target_idx;
    for (std::size_t i = 0; i < pool.pairs.size(); i++) {
        if (pool.pairs[i].relation_type == policy.target_relation) {
            target_idx.push_back(i);
        }
    }
    rep.target_before = target_idx.size();

    if (target_idx.empty()) {
        rep.target_absent = true;
        rep.pool_after = pool.size();
        return pool;
    }

    auto keep = static_cast<std::size_t>(retain_count(
        static_cast<std::int64_t>(target_idx.size()), policy.retain_fraction));
    std::mt19937_64 rng(policy.seed);
    auto chosen = util::sample_without_replacement(rng, target_idx.size(), keep);

    std::vector<bool> keep_target(pool.pairs.size(), false);
    for (auto c : chosen) keep_target[target_idx[c]] = true;

    CorpusPool out;
    out.provenance = pool.provenance;
    out.pairs.reserve(pool.pairs.size() - target_idx.size() + keep);
    for (std::size_t i = 0; i < pool.pairs.size(); i++) {
        if (pool.pairs[i].relation_type != policy.target_relation || keep_target[i]) {
            out.pairs.push_back(pool.pairs[i]);
        }
    }

    rep.target_retained = keep;
    rep.pool_after = out.size();
    rep.share_of_original =
        static_cast<double>(keep) / static_cast<double>(pool.size());
    rep.share_of_rebalanced =
        static_cast<double>(keep) / static_cast<double>(out.size());
    return out;
}

// ---------------------------------------------------------------------------
// Nested subsets.
// ---------------------------------------------------------------------------

std::vector<int> largest_remainder_apportion(const std::vector<std::size_t>& counts,
                                             int size) {
    auto total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    if (total == 0) throw ConfigError("apportionment over an empty pool");
    if (size < 0 || static_cast<std::size_t>(size) > total) {
        throw ConfigError("subset size out of range");
    }

    std::vector<int> quota(counts.size(), 0);
    std::vector<std::pair<double, std::size_t>> remainders;  // (-remainder, index)
    int assigned = 0;
    for (std::size_t i = 0; i < counts.size(); i++) {
        double exact = static_cast<double>(size) * static_cast<double>(counts[i]) /
                       static_cast<double>(total);
        quota[i] = static_cast<int>(std::floor(exact));
        assigned += quota[i];
        remainders.emplace_back(-(exact - std::floor(exact)), i);
    }
    // Stable tie-break: larger remainder first, then lower index.
    std::sort(remainders.begin(), remainders.end());

    int leftover = size - assigned;
    for (auto& [neg_rem, idx] : remainders) {
        if (leftover == 0) break;
        if (quota[idx] < static_cast<int>(counts[idx])) {
            quota[idx]++;
            leftover--;
        }
    }
    // If some strata were saturated, spill remaining seats to any stratum
    // with capacity, in remainder order.
    for (auto& [neg_rem, idx] : remainders) {
        if (leftover == 0) break;
        while (leftover > 0 && quota[idx] < static_cast<int>(counts[idx])) {
            quota[idx]++;
            leftover--;
        }
    }
    if (leftover != 0) throw ConfigError("apportionment failed to place all seats");
    return quota;
}

std::vector<CorpusPool> make_nested_subsets(const CorpusPool& pool,
                                            const SubsetSpec& spec) {
    if (spec.sizes.empty()) throw ConfigError("subset spec has no sizes");
    for (std::size_t i = 0; i < spec.sizes.size(); i++) {
        if (spec.sizes[i] <= 0 ||
            static_cast<std::size_t>(spec.sizes[i]) > pool.size()) {
            throw ConfigError("subset size out of range: " +
                              std::to_string(spec.sizes[i]));
        }
        if (i > 0 && spec.sizes[i] <= spec.sizes[i - 1]) {
            throw ConfigError("subset sizes must be strictly increasing");
        }
    }

    // Stratum member indices, in pool order, per relation type.
    std::array<std::vector<std::size_t>, kRelationTypeCount> strata;
    for (std::size_t i = 0; i < pool.pairs.size(); i++) {
        strata[static_cast<int>(pool.pairs[i].relation_type)].push_back(i);
    }
    std::vector<std::size_t> counts(kRelationTypeCount);
    for (int r = 0; r < kRelationTypeCount; r++) counts[r] = strata[r].size();

    // Per-size quotas, each within one of exact proportionality. Largest
    // remainder can momentarily shrink a stratum as the size grows (the
    // Alabama paradox); repair by shifting a seat from the stratum whose
    // quota grew most beyond its floor, keeping the +/-1 bound intact.
    std::vector<std::vector<int>> quotas;
    for (int size : spec.sizes) {
        quotas.push_back(largest_remainder_apportion(counts, size));
    }
    auto total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    for (std::size_t s = 1; s < quotas.size(); s++) {
        auto& prev = quotas[s - 1];
        auto& cur = quotas[s];
        for (int r = 0; r < kRelationTypeCount; r++) {
            while (cur[r] < prev[r]) {
                // Take a seat from a stratum that (a) grew, (b) stays >= its
                // previous quota after giving one up, and (c) stays within
                // one seat of its exact share.
                int donor = -1;
                for (int d = 0; d < kRelationTypeCount; d++) {
                    if (d == r || cur[d] <= prev[d]) continue;
                    double exact = static_cast<double>(spec.sizes[s]) *
                                   static_cast<double>(counts[d]) /
                                   static_cast<double>(total);
                    if (cur[d] - 1 >= static_cast<int>(std::floor(exact)) - 1 &&
                        cur[d] - 1 >= prev[d]) {
                        donor = d;
                        break;
                    }
                }
                if (donor < 0) {
                    throw ConfigError("nested apportionment is infeasible");
                }
                cur[donor]--;
                cur[r]++;
            }
        }
    }

    // Draw the growth for each stratum with one generator, in fixed
    // stratum order, so the whole family is a function of (pool, spec).
    std::mt19937_64 rng(spec.seed);
    std::array<std::vector<std::size_t>, kRelationTypeCount> chosen;  // pool indices
    std::array<std::vector<std::size_t>, kRelationTypeCount> remaining = strata;
    std::vector<std::vector<std::size_t>> subsets_members(spec.sizes.size());

    std::vector<int> have(kRelationTypeCount, 0);
    for (std::size_t s = 0; s < spec.sizes.size(); s++) {
        for (int r = 0; r < kRelationTypeCount; r++) {
            int need = quotas[s][r] - have[r];
            if (need < 0) throw ConfigError("internal: quota shrank after repair");
            if (need == 0) continue;
            auto picks = util::sample_without_replacement(
                rng, remaining[r].size(), static_cast<std::size_t>(need));
            // Remove picked members from the remaining list; picks are sorted.
            std::vector<std::size_t> next_remaining;
            next_remaining.reserve(remaining[r].size() - picks.size());
            std::size_t pi = 0;
            for (std::size_t i = 0; i < remaining[r].size(); i++) {
                if (pi < picks.size() && picks[pi] == i) {
                    chosen[r].push_back(remaining[r][i]);
                    pi++;
                } else {
                    next_remaining.push_back(remaining[r][i]);
                }
            }
            remaining[r] = std::move(next_remaining);
            have[r] = quotas[s][r];
        }
        std::vector<std::size_t> members;
        for (int r = 0; r < kRelationTypeCount; r++) {
            members.insert(members.end(), chosen[r].begin(), chosen[r].end());
        }
        std::sort(members.begin(), members.end());
        subsets_members[s] = std::move(members);
    }

    std::vector<CorpusPool> out;
    for (std::size_t s = 0; s < spec.sizes.size(); s++) {
        CorpusPool sub;
        sub.provenance = pool.provenance;
        sub.pairs.reserve(subsets_members[s].size());
        for (auto idx : subsets_members[s]) sub.pairs.push_back(pool.pairs[idx]);
        out.push_back(std::move(sub));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Validation.
// ---------------------------------------------------------------------------

namespace {

// Population CV: stddev (dividing by N) over mean. Zero mean -> 0.
double population_cv(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double mean = std::accumulate(xs.begin(), xs.end(), 0.0) /
                  static_cast<double>(xs.size());
    if (mean == 0.0) return 0.0;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    return std::sqrt(var) / mean;
}

}  // namespace

json QualityReport::to_json() const {
    json j;
    j["proportions"] = json::array();
    for (const auto& row : proportions) {
        json obj;
        for (int r = 0; r < kRelationTypeCount; r++) {
            obj[std::string(to_string(static_cast<RelationType>(r)))] = row[r];
        }
        j["proportions"].push_back(obj);
    }
    json cv;
    for (int r = 0; r < kRelationTypeCount; r++) {
        cv[std::string(to_string(static_cast<RelationType>(r)))] = proportion_cv[r];
    }
    j["proportion_cv"] = cv;
    j["answer_length_mean"] = answer_length_mean;
    j["answer_length_cv"] = answer_length_cv;
    j["flagged"] = json::array();
    for (auto r : flagged) j["flagged"].push_back(std::string(to_string(r)));
    j["notes"] = notes;
    return j;
}

QualityReport validate_subsets(const std::vector<CorpusPool>& subsets) {
    if (subsets.size() < 2) {
        throw ConfigError("validation needs at least two subsets");
    }
    QualityReport rep;
    for (const auto& sub : subsets) {
        if (sub.pairs.empty()) throw ConfigError("validation over an empty subset");
        auto counts = sub.relation_counts();
        std::array<double, kRelationTypeCount> row{};
        for (int r = 0; r < kRelationTypeCount; r++) {
            row[r] = static_cast<double>(counts[r]) /
                     static_cast<double>(sub.pairs.size());
        }
        rep.proportions.push_back(row);

        double sum_len = 0.0;
        for (const auto& p : sub.pairs) {
            sum_len += static_cast<double>(util::utf8_codepoints(p.answer));
        }
        rep.answer_length_mean.push_back(sum_len /
                                         static_cast<double>(sub.pairs.size()));
    }

    for (int r = 0; r < kRelationTypeCount; r++) {
        std::vector<double> col;
        col.reserve(rep.proportions.size());
        bool all_zero = true;
        for (const auto& row : rep.proportions) {
            col.push_back(row[r]);
            if (row[r] != 0.0) all_zero = false;
        }
        if (all_zero) {
            rep.proportion_cv[r] = 0.0;
            continue;  // relation absent everywhere; nothing to flag
        }
        rep.proportion_cv[r] = population_cv(col);
        if (rep.proportion_cv[r] >= kProportionCvThreshold) {
            rep.flagged.push_back(static_cast<RelationType>(r));
            rep.notes.push_back("proportion drift in " +
                                std::string(to_string(static_cast<RelationType>(r))));
        }
    }
    rep.answer_length_cv = population_cv(rep.answer_length_mean);
    return rep;
}

// ---------------------------------------------------------------------------
// Serialization.
// ---------------------------------------------------------------------------

json to_json(const QAPair& p) {
    json j;
    j["id"] = p.id;
    j["question"] = p.question;
    j["answer"] = p.answer;
    j["relation_type"] = std::string(to_string(p.relation_type));
    if (p.category) j["category"] = std::string(to_string(*p.category));
    if (p.source_version) j["source_version"] = *p.source_version;
    return j;
}

QAPair qa_pair_from_json(const json& j) {
    QAPair p;
    p.id = j.at("id").get<std::string>();
    p.question = j.at("question").get<std::string>();
    p.answer = j.at("answer").get<std::string>();
    p.relation_type = relation_from_string(j.at("relation_type").get<std::string>());
    if (j.contains("category")) {
        p.category = category_from_string(j["category"].get<std::string>());
    }
    if (j.contains("source_version")) {
        p.source_version = j["source_version"].get<std::string>();
    }
    return p;
}

void write_subset(const CorpusPool& pool, const std::filesystem::path& path) {
    std::ostringstream out;
    for (const auto& p : pool.pairs) out << to_json(p).dump() << '\n';
    util::write_file(path, out.str());
}

}  // namespace slmeval::corpus
