#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace slmeval::corpus {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Domain types.
// ---------------------------------------------------------------------------

/// The 11 knowledge-graph relation types a QA pair can originate from,
/// plus Other for anything unrecognized at ingestion.
enum class RelationType {
    HasChapter,
    DescribedIn,
    HasSection,
    HasItem,
    DefinedIn,
    SubjectTo,
    UsedIn,
    Requires,
    Affects,
    Mitigates,
    Precedes,
    Other,
};
inline constexpr int kRelationTypeCount = 12;

std::string_view to_string(RelationType r);
/// Parses "HAS_CHAPTER" etc. Unknown strings map to Other; *known is set
/// to false in that case.
RelationType relation_from_string(std::string_view s, bool* known = nullptr);

/// The eight technical evaluation categories.
enum class Category {
    Survey,
    Planning,
    Design,
    MaintenanceRiver,
    MaintenanceDam,
    MaintenanceSabo,
    Hazard,
    Comparative,
};
inline constexpr int kCategoryCount = 8;

std::string_view to_string(Category c);
std::optional<Category> category_from_string(std::string_view s);

struct QAPair {
    std::string id;
    std::string question;
    std::string answer;
    RelationType relation_type = RelationType::Other;
    std::optional<Category> category;
    std::optional<std::string> source_version;
};

struct CorpusPool {
    std::vector<QAPair> pairs;
    std::vector<std::string> provenance;  // source file names, in ingestion order

    std::size_t size() const { return pairs.size(); }
    /// Pair counts per relation type, indexed by enum value.
    std::array<std::size_t, kRelationTypeCount> relation_counts() const;
};

struct RebalancePolicy {
    RelationType target_relation = RelationType::HasChapter;
    double retain_fraction = 1.0;  // in [0, 1]
    std::uint64_t seed = 0;
};

struct SubsetSpec {
    std::vector<int> sizes;  // strictly increasing, each <= pool size
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Ingestion.
// ---------------------------------------------------------------------------

struct IngestError {
    std::string file;
    int line = 0;
    std::string reason;
};

struct IngestResult {
    CorpusPool pool;
    std::vector<IngestError> errors;  // malformed and rejected records
    int duplicates_dropped = 0;       // exact (question, answer) duplicates
    int unknown_relations = 0;        // relation strings mapped to Other
    int rejected_records = 0;
};

/// Reads JSON-Lines QA files into one pool. Exact (question, answer)
/// duplicates keep the first occurrence. An unreadable file is fatal;
/// malformed lines are reported and skipped.
IngestResult ingest_corpus(const std::vector<std::filesystem::path>& files);

/// Writes the error report as JSON-Lines of {file, line, reason}.
void write_ingest_errors(const std::vector<IngestError>& errors,
                         const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Rebalancing and nested subsets.
// ---------------------------------------------------------------------------

struct RebalanceReport {
    RelationType target = RelationType::HasChapter;
    std::size_t pool_before = 0;
    std::size_t pool_after = 0;
    std::size_t target_before = 0;
    std::size_t target_retained = 0;
    bool target_absent = false;
    /// Retained-target share of the original pool and of the rebalanced
    /// pool. The two denominators give different percentages; both are
    /// reported.
    double share_of_original = 0.0;
    double share_of_rebalanced = 0.0;

    std::string summary() const;
    json to_json() const;
};

/// Number of pairs retained when a count of n is thinned by `fraction`.
/// The fraction is snapped to 9 decimal digits and the product rounded
/// half away from zero in integer arithmetic, so decimal fractions behave
/// as written (1365 x 0.7 -> 956) regardless of binary representation.
std::int64_t retain_count(std::int64_t n, double fraction);

/// Keeps exactly retain_count(|target|, f) pairs of the target relation,
/// chosen by seeded sampling without replacement; every other pair is
/// untouched and pool order is preserved. A missing target relation
/// returns the pool unchanged (report.target_absent is set).
CorpusPool rebalance(const CorpusPool& pool, const RebalancePolicy& policy,
                     RebalanceReport* report = nullptr);

/// Builds strictly nested subsets of the requested sizes, stratified by
/// relation type with largest-remainder apportionment of the pool's
/// proportions. Growth between consecutive sizes is drawn by seeded
/// sampling within each stratum. Every stratum count is within one pair
/// of exact proportionality.
std::vector<CorpusPool> make_nested_subsets(const CorpusPool& pool,
                                            const SubsetSpec& spec);

/// Largest-remainder apportionment of `size` among the given counts.
/// Exposed for tests.
std::vector<int> largest_remainder_apportion(const std::vector<std::size_t>& counts,
                                             int size);

// ---------------------------------------------------------------------------
// Subset quality validation.
// ---------------------------------------------------------------------------

struct QualityReport {
    /// proportions[s][r] = share of relation r in subset s; each row sums to 1.
    std::vector<std::array<double, kRelationTypeCount>> proportions;
    /// Population coefficient of variation of each relation's proportion
    /// across subsets.
    std::array<double, kRelationTypeCount> proportion_cv{};
    /// Mean answer length (Unicode scalar values) per subset, and the CV
    /// of those means across subsets.
    std::vector<double> answer_length_mean;
    double answer_length_cv = 0.0;
    /// Relations whose proportion CV is >= the 3% threshold.
    std::vector<RelationType> flagged;
    std::vector<std::string> notes;

    json to_json() const;
};

inline constexpr double kProportionCvThreshold = 0.03;

/// Computes cross-subset distribution stability. Requires >= 2 subsets.
QualityReport validate_subsets(const std::vector<CorpusPool>& subsets);

// ---------------------------------------------------------------------------
// Serialization.
// ---------------------------------------------------------------------------

json to_json(const QAPair& p);
QAPair qa_pair_from_json(const json& j);

/// Writes one JSON object per line with stable field order; byte-identical
/// across runs for the same pool.
void write_subset(const CorpusPool& pool, const std::filesystem::path& path);

}  // namespace slmeval::corpus
