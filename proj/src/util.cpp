#include "slmeval/util.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <thread>

#include <fcntl.h>
#include <unistd.h>

#include "slmeval/errors.hpp"

namespace slmeval::util {

std::uint64_t bounded_uniform(std::mt19937_64& rng, std::uint64_t n) {
    if (n == 0) throw Error("bounded_uniform: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = rng();
    while (v >= limit) v = rng();
    return v % n;
}

double uniform_unit(std::mt19937_64& rng) {
    // 53 random bits, offset by half an ulp so the result is never 0 or 1.
    return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

double standard_normal(std::mt19937_64& rng) {
    const double u1 = uniform_unit(rng);
    const double u2 = uniform_unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> sample_without_replacement(std::mt19937_64& rng,
                                                    std::size_t population,
                                                    std::size_t k) {
    if (k > population)
        throw Error("sample_without_replacement: k exceeds population");
    std::vector<std::size_t> idx(population);
    for (std::size_t i = 0; i < population; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j =
            i + static_cast<std::size_t>(bounded_uniform(rng, population - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::int64_t utf8_codepoints(std::string_view s) {
    std::int64_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++n;
    return n;
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string fnv1a64_hex(std::string_view s) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(s)));
    return buf;
}

std::string iso8601_utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string substitute_placeholders(
    const std::string& tmpl,
    const std::function<const std::string*(const std::string&)>& lookup) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const std::size_t close = tmpl.find('}', i + 1);
            if (close != std::string::npos) {
                const std::string name = tmpl.substr(i + 1, close - i - 1);
                const std::string* value = lookup(name);
                if (value == nullptr)
                    throw ConfigError("unresolved placeholder {" + name +
                                      "} in template: " + tmpl);
                out += *value;
                i = close + 1;
                continue;
            }
        }
        out += tmpl[i++];
    }
    return out;
}

std::string substitute_placeholders(
    const std::string& tmpl, const std::map<std::string, std::string>& vars) {
    return substitute_placeholders(tmpl, [&](const std::string& name) {
        auto it = vars.find(name);
        return it == vars.end() ? nullptr : &it->second;
    });
}

std::string shell_quote(std::string_view s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'')
            out += "'\\''";
        else
            out += c;
    }
    out += "'";
    return out;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read file: " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& p, std::string_view contents) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write file: " + p.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("write failed: " + p.string());
}

const json* json_at_path(const json& doc, std::string_view path) {
    const json* cur = &doc;
    std::size_t start = 0;
    while (start <= path.size()) {
        const std::size_t dot = path.find('.', start);
        const std::string_view seg =
            path.substr(start, dot == std::string_view::npos ? std::string_view::npos
                                                             : dot - start);
        if (seg.empty()) return nullptr;
        if (cur->is_array()) {
            std::size_t n = 0;
            for (char c : seg) {
                if (c < '0' || c > '9') return nullptr;
                n = n * 10 + static_cast<std::size_t>(c - '0');
            }
            if (n >= cur->size()) return nullptr;
            cur = &(*cur)[n];
        } else if (cur->is_object()) {
            auto it = cur->find(std::string(seg));
            if (it == cur->end()) return nullptr;
            cur = &*it;
        } else {
            return nullptr;
        }
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    return cur;
}

void parallel_for(std::size_t count, int concurrency,
                  const std::function<void(std::size_t)>& fn) {
    if (concurrency <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(concurrency), count);
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                fn(i);
            }
        });
    }
    for (auto& t : threads) t.join();
}

LockFile::LockFile(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    const int fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw ConfigError("run directory is locked by another stage (" +
                          path.string() + "); remove the file if stale");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

LockFile::~LockFile() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
}

}  // namespace slmeval::util
