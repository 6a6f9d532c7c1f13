#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace slmeval::util {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Deterministic sampling.
//
// All seeded sampling in the harness goes through these helpers so runs
// replicate bit-for-bit across platforms. std::mt19937_64 has a
// standard-specified output sequence, but std::shuffle and the std
// distributions do not, so the bounded draw, the partial Fisher-Yates
// selection and the normal variate are implemented here. The algorithm id
// recorded in run manifests is kPrngAlgorithm.
// ---------------------------------------------------------------------------

inline constexpr const char* kPrngAlgorithm = "mt19937_64/fisher-yates/v1";

/// Unbiased uniform draw in [0, n) via rejection sampling.
std::uint64_t bounded_uniform(std::mt19937_64& rng, std::uint64_t n);

/// Uniform double in the open interval (0, 1).
double uniform_unit(std::mt19937_64& rng);

/// Standard normal variate (Box-Muller, two uniform draws per call).
double standard_normal(std::mt19937_64& rng);

/// Draws k distinct indices from [0, population) by partial Fisher-Yates
/// and returns them sorted ascending.
std::vector<std::size_t> sample_without_replacement(std::mt19937_64& rng,
                                                    std::size_t population,
                                                    std::size_t k);

// ---------------------------------------------------------------------------
// Small utilities.
// ---------------------------------------------------------------------------

/// Number of Unicode scalar values in a UTF-8 string.
std::int64_t utf8_codepoints(std::string_view s);

/// FNV-1a 64-bit hash (non-cryptographic; used for config hashes and
/// call-log keys).
std::uint64_t fnv1a64(std::string_view s);
std::string fnv1a64_hex(std::string_view s);

/// Current wall-clock time as an ISO-8601 UTC string.
std::string iso8601_utc_now();

/// Replaces every "{name}" placeholder using the map; throws ConfigError
/// naming the placeholder if a name has no value.
std::string substitute_placeholders(
    const std::string& tmpl,
    const std::function<const std::string*(const std::string&)>& lookup);
std::string substitute_placeholders(
    const std::string& tmpl,
    const std::map<std::string, std::string>& vars);

/// Single-quote shell quoting for POSIX sh.
std::string shell_quote(std::string_view s);

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::string_view contents);

/// Walks a dotted path ("choices.0.text") through a JSON document.
/// Numeric segments index arrays. Returns nullptr when any step is missing.
const json* json_at_path(const json& doc, std::string_view path);

/// Runs fn(0..count-1) on up to `concurrency` worker threads. fn must
/// handle its own exceptions; an escaping exception terminates.
void parallel_for(std::size_t count, int concurrency,
                  const std::function<void(std::size_t)>& fn);

/// Exclusive lock file; throws ConfigError if the lock is already held.
class LockFile {
public:
    explicit LockFile(const std::filesystem::path& path);
    ~LockFile();
    LockFile(const LockFile&) = delete;
    LockFile& operator=(const LockFile&) = delete;

private:
    std::filesystem::path path_;
};

}  // namespace slmeval::util
