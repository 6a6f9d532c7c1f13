#pragma once

// Shared fixtures for the test suites: a synthetic QA pool with the
// reference relation-type distribution, plus small filesystem helpers.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "slmeval/corpus.hpp"

namespace testsup {

namespace fs = std::filesystem;

/// Relation-type counts of the reference extraction corpus (5578 pairs).
inline const std::vector<std::pair<slmeval::corpus::RelationType, int>>&
reference_counts() {
    using R = slmeval::corpus::RelationType;
    static const std::vector<std::pair<R, int>> counts = {
        {R::HasChapter, 1365}, {R::DescribedIn, 676}, {R::HasSection, 648},
        {R::HasItem, 501},     {R::DefinedIn, 452},   {R::SubjectTo, 436},
        {R::UsedIn, 408},      {R::Requires, 402},    {R::Affects, 301},
        {R::Mitigates, 280},   {R::Precedes, 109},
    };
    return counts;
}

/// Builds a pool with the reference distribution. Pairs are interleaved
/// round-robin across relation types so strata are spread through the pool
/// rather than contiguous.
inline slmeval::corpus::CorpusPool make_reference_pool() {
    using namespace slmeval::corpus;
    CorpusPool pool;
    std::vector<std::pair<RelationType, int>> todo = reference_counts();
    int serial = 0;
    bool any = true;
    while (any) {
        any = false;
        for (auto& [rel, left] : todo) {
            if (left == 0) continue;
            any = true;
            left--;
            QAPair p;
            p.id = "qa-" + std::to_string(serial++);
            p.question = "Which clause governs item " + p.id + "?";
            p.answer = "Clause " + std::to_string(serial % 97) +
                       " of the governing standard covers it.";
            p.relation_type = rel;
            p.category = static_cast<Category>(serial % kCategoryCount);
            pool.pairs.push_back(std::move(p));
        }
    }
    pool.provenance.push_back("synthetic");
    return pool;
}

/// Unique scratch directory under the system temp dir; removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = fs::temp_directory_path() /
                ("slmeval-test-" + std::to_string(rng()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
}

inline void spit(const fs::path& p, const std::string& content) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << content;
}

}  // namespace testsup
