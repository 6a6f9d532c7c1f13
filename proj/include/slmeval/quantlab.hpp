#pragma once

// Desk-scale numerics: LoRA forward/merge, blockwise codebook quantization
// with an NF4 and a simulated 4-bit K-quant profile, and an MHA/GQA
// attention kernel for quantization-noise perturbation studies.
//
// Everything here is pure and reentrant. Dense types are templated on the
// scalar; the entry points are free functions over Eigen expressions, and
// Eigen is the only math dependency.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "slmeval/errors.hpp"
#include "slmeval/util.hpp"

namespace slmeval::quantlab {

using json = nlohmann::ordered_json;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// LoRA.
// ---------------------------------------------------------------------------

/// Low-rank adapter over a d x k base: an r x k down-projection A, a d x r
/// up-projection B, and the scaling alpha applied as alpha / r.
template <typename Scalar>
struct LoraAdapter {
    Mat<Scalar> A;
    Mat<Scalar> B;
    Scalar alpha = Scalar(1);
    int r = 0;
};

namespace detail {

template <typename Scalar>
void check_adapter_shapes(Eigen::Index d, Eigen::Index k,
                          const LoraAdapter<Scalar>& adapter) {
    if (adapter.r <= 0 || adapter.A.rows() != adapter.r ||
        adapter.B.cols() != adapter.r) {
        throw Error("adapter rank r=" + std::to_string(adapter.r) +
                    " does not match A rows " + std::to_string(adapter.A.rows()) +
                    " / B cols " + std::to_string(adapter.B.cols()));
    }
    if (adapter.A.cols() != k) {
        throw Error("adapter A has " + std::to_string(adapter.A.cols()) +
                    " cols but the base has " + std::to_string(k) + " cols");
    }
    if (adapter.B.rows() != d) {
        throw Error("adapter B has " + std::to_string(adapter.B.rows()) +
                    " rows but the base has " + std::to_string(d) + " rows");
    }
    if (adapter.r > std::min(d, k)) {
        throw Error("adapter rank " + std::to_string(adapter.r) +
                    " exceeds min(d, k) = " +
                    std::to_string(std::min(d, k)));
    }
    if (!(adapter.alpha > Scalar(0))) {
        throw Error("adapter alpha must be positive");
    }
}

}  // namespace detail

/// h = W0 x + (alpha / r) B (A x).
template <typename DerivedW, typename DerivedX>
Vec<typename DerivedW::Scalar> lora_forward(
    const Eigen::MatrixBase<DerivedW>& W0,
    const LoraAdapter<typename DerivedW::Scalar>& adapter,
    const Eigen::MatrixBase<DerivedX>& x) {
    using Scalar = typename DerivedW::Scalar;
    detail::check_adapter_shapes<Scalar>(W0.rows(), W0.cols(), adapter);
    if (x.cols() != 1 || x.rows() != W0.cols()) {
        throw Error("input x has " + std::to_string(x.rows()) +
                    " rows but the base has " + std::to_string(W0.cols()) +
                    " cols");
    }
    Scalar scaling = adapter.alpha / Scalar(adapter.r);
    return W0 * x + scaling * (adapter.B * (adapter.A * x));
}

/// W0 + (alpha / r) B A, folding the adapter into the base weights.
template <typename DerivedW>
Mat<typename DerivedW::Scalar> merge_adapter(
    const Eigen::MatrixBase<DerivedW>& W0,
    const LoraAdapter<typename DerivedW::Scalar>& adapter) {
    using Scalar = typename DerivedW::Scalar;
    detail::check_adapter_shapes<Scalar>(W0.rows(), W0.cols(), adapter);
    Scalar scaling = adapter.alpha / Scalar(adapter.r);
    return W0 + scaling * (adapter.B * adapter.A);
}

// ---------------------------------------------------------------------------
// Blockwise codebook quantization.
// ---------------------------------------------------------------------------

namespace detail {

/// Inverse standard-normal CDF for p in (0, 1): bisection on std::erf
/// with Newton polish. Plenty accurate for building 16-entry codebooks.
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw Error("normal_quantile: p outside (0,1)");
    auto cdf = [](double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); };
    double lo = -10.0, hi = 10.0;
    for (int i = 0; i < 80; i++) {
        double mid = 0.5 * (lo + hi);
        (cdf(mid) < p ? lo : hi) = mid;
    }
    double x = 0.5 * (lo + hi);
    for (int i = 0; i < 4; i++) {  // Newton: phi(x) is the CDF derivative
        double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        if (pdf < 1e-300) break;
        x -= (cdf(x) - p) / pdf;
    }
    return x;
}

}  // namespace detail

/// The 16 NF4 levels: standard-normal quantiles of evenly spaced
/// probabilities (8 positive, 7 negative, and 0), rescaled so the extreme
/// levels are exactly -1 and +1. Ideal for normally distributed weights.
template <typename Scalar = double>
std::array<Scalar, 16> nf4_codebook() {
    const double offset = 0.5 * ((1.0 - 1.0 / (2.0 * 15.0)) +
                                 (1.0 - 1.0 / (2.0 * 16.0)));
    std::vector<double> levels;
    for (int i = 0; i < 8; i++) {  // linspace(offset, 0.5, 9), last dropped
        double p = offset + (0.5 - offset) * i / 8.0;
        levels.push_back(detail::normal_quantile(p));
    }
    levels.push_back(0.0);
    for (int i = 0; i < 7; i++) {  // linspace(offset, 0.5, 8), last dropped
        double p = offset + (0.5 - offset) * i / 7.0;
        levels.push_back(-detail::normal_quantile(p));
    }
    std::sort(levels.begin(), levels.end());
    double max_abs = levels.back();
    std::array<Scalar, 16> out;
    for (int i = 0; i < 16; i++) {
        out[i] = static_cast<Scalar>(levels[i] / max_abs);
    }
    return out;
}

/// Uniform 16-level grid k/8 for k in [-8, 7]: evenly spaced, contains 0
/// and -1; the top level is 7/8, like a signed 4-bit integer grid.
template <typename Scalar = double>
std::array<Scalar, 16> uniform_q4_codebook() {
    std::array<Scalar, 16> out;
    for (int k = -8; k <= 7; k++) {
        out[static_cast<std::size_t>(k + 8)] = Scalar(k) / Scalar(8);
    }
    return out;
}

/// Worst-case |u - nearest_level(u)| over u in [-1, 1]: the larger of half
/// the widest interior gap and the uncovered margins at either end (zero
/// for codebooks that reach -1 and +1).
template <typename Scalar>
Scalar max_unit_roundtrip_error(const std::array<Scalar, 16>& codebook) {
    Scalar worst = std::max<Scalar>(Scalar(1) + codebook.front(),
                                    Scalar(1) - codebook.back());
    for (std::size_t i = 0; i + 1 < codebook.size(); i++) {
        worst = std::max(worst, (codebook[i + 1] - codebook[i]) / Scalar(2));
    }
    return worst;
}

template <typename Scalar>
struct QuantSpec {
    int block_size = 64;
    std::array<Scalar, 16> codebook = nf4_codebook<Scalar>();
    /// 16 keeps block scales exact; 6 re-quantizes them onto a 6-bit
    /// uniform grid of the per-tensor maximum at dequantize time.
    int scale_bits = 16;
};

template <typename Scalar>
struct QuantizedTensor {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    int block_size = 1;
    int scale_bits = 16;
    std::array<Scalar, 16> codebook{};
    /// 4-bit codebook indices, one per entry, in row-major entry order.
    std::vector<std::uint8_t> codes;
    /// Raw absmax per block of block_size consecutive row-major entries.
    std::vector<Scalar> block_scales;
};

namespace detail {

template <typename Scalar>
void check_quant_spec(const QuantSpec<Scalar>& spec) {
    if (spec.block_size < 1) throw Error("block_size must be >= 1");
    if (spec.scale_bits != 16 && spec.scale_bits != 6) {
        throw Error("scale_bits must be 16 (exact) or 6 (K-quant simulation)");
    }
    bool has_zero = false;
    for (std::size_t i = 0; i < spec.codebook.size(); i++) {
        if (spec.codebook[i] == Scalar(0)) has_zero = true;
        if (i > 0 && !(spec.codebook[i] > spec.codebook[i - 1])) {
            throw Error("codebook levels must be strictly increasing");
        }
        if (spec.codebook[i] < Scalar(-1) || spec.codebook[i] > Scalar(1)) {
            throw Error("codebook levels must lie in [-1, 1]");
        }
    }
    if (!has_zero) throw Error("codebook must contain the 0 level");
}

/// Index of the level nearest to u; exact ties go to the level of smaller
/// magnitude (attenuation bias). Never ambiguous: 0 is a level, so two
/// equidistant candidates cannot share a magnitude.
template <typename Scalar>
std::uint8_t nearest_level(const std::array<Scalar, 16>& codebook, Scalar u) {
    auto it = std::lower_bound(codebook.begin(), codebook.end(), u);
    std::size_t hi = static_cast<std::size_t>(it - codebook.begin());
    if (hi == 0) return 0;
    if (hi == codebook.size()) return static_cast<std::uint8_t>(hi - 1);
    std::size_t lo = hi - 1;
    Scalar d_lo = u - codebook[lo];
    Scalar d_hi = codebook[hi] - u;
    if (d_lo < d_hi) return static_cast<std::uint8_t>(lo);
    if (d_hi < d_lo) return static_cast<std::uint8_t>(hi);
    bool lo_smaller = std::abs(codebook[lo]) < std::abs(codebook[hi]);
    return static_cast<std::uint8_t>(lo_smaller ? lo : hi);
}

}  // namespace detail

/// Encodes W block by block: each block of block_size consecutive
/// row-major entries is normalized by its absmax and mapped to the nearest
/// codebook level. An all-zero block keeps scale 0 with every code at the
/// 0 level.
template <typename DerivedW>
QuantizedTensor<typename DerivedW::Scalar> quantize_blockwise(
    const Eigen::MatrixBase<DerivedW>& W,
    const QuantSpec<typename DerivedW::Scalar>& spec) {
    using Scalar = typename DerivedW::Scalar;
    detail::check_quant_spec(spec);

    QuantizedTensor<Scalar> q;
    q.rows = W.rows();
    q.cols = W.cols();
    q.block_size = spec.block_size;
    q.scale_bits = spec.scale_bits;
    q.codebook = spec.codebook;

    const auto total = static_cast<std::size_t>(W.size());
    q.codes.resize(total);
    const std::uint8_t zero_code = detail::nearest_level(spec.codebook, Scalar(0));

    Mat<Scalar> dense = W;  // flatten once; row-major entry order below
    auto entry = [&](std::size_t idx) -> Scalar {
        auto r = static_cast<Eigen::Index>(idx) / dense.cols();
        auto c = static_cast<Eigen::Index>(idx) % dense.cols();
        return dense(r, c);
    };

    for (std::size_t start = 0; start < total;
         start += static_cast<std::size_t>(spec.block_size)) {
        std::size_t end =
            std::min(total, start + static_cast<std::size_t>(spec.block_size));
        Scalar scale = 0;
        for (std::size_t i = start; i < end; i++) {
            Scalar a = std::abs(entry(i));
            if (!std::isfinite(static_cast<double>(a))) {
                throw Error("cannot quantize non-finite entries");
            }
            scale = std::max(scale, a);
        }
        q.block_scales.push_back(scale);
        for (std::size_t i = start; i < end; i++) {
            q.codes[i] = scale == Scalar(0)
                             ? zero_code
                             : detail::nearest_level(spec.codebook,
                                                     entry(i) / scale);
        }
    }
    return q;
}

/// Reconstructs entries as block_scale x codebook[code]. With scale_bits
/// = 6 the stored absmax scales are first snapped onto a 63-step uniform
/// grid of the per-tensor maximum scale, mimicking K-quant's quantized
/// super-block scales.
template <typename Scalar>
Mat<Scalar> dequantize(const QuantizedTensor<Scalar>& q) {
    std::vector<Scalar> scales = q.block_scales;
    if (q.scale_bits < 16 && !scales.empty()) {
        Scalar smax = *std::max_element(scales.begin(), scales.end());
        if (smax > Scalar(0)) {
            const Scalar steps = Scalar((1 << q.scale_bits) - 1);
            for (auto& s : scales) {
                s = std::round(s / smax * steps) * smax / steps;
            }
        }
    }

    Mat<Scalar> out(q.rows, q.cols);
    const auto total = static_cast<std::size_t>(q.rows * q.cols);
    for (std::size_t idx = 0; idx < total; idx++) {
        auto r = static_cast<Eigen::Index>(idx) / q.cols;
        auto c = static_cast<Eigen::Index>(idx) % q.cols;
        Scalar scale = scales[idx / static_cast<std::size_t>(q.block_size)];
        out(r, c) = scale * q.codebook[q.codes[idx]];
    }
    return out;
}

/// Behavioral 4-bit K-quant profile (not bit-exact GGUF): 32-entry blocks,
/// the uniform signed grid, and 6-bit block scales.
template <typename DerivedW>
QuantizedTensor<typename DerivedW::Scalar> simulate_kquant_q4(
    const Eigen::MatrixBase<DerivedW>& W) {
    using Scalar = typename DerivedW::Scalar;
    QuantSpec<Scalar> spec;
    spec.block_size = 32;
    spec.codebook = uniform_q4_codebook<Scalar>();
    spec.scale_bits = 6;
    return quantize_blockwise(W, spec);
}

// ---------------------------------------------------------------------------
// Attention.
// ---------------------------------------------------------------------------

struct AttentionConfig {
    int n_heads = 1;
    int n_kv_groups = 1;  // must divide n_heads
    int head_dim = 1;
};

inline void validate(const AttentionConfig& cfg) {
    if (cfg.n_heads < 1 || cfg.n_kv_groups < 1 || cfg.head_dim < 1) {
        throw Error("attention dimensions must be positive");
    }
    if (cfg.n_heads % cfg.n_kv_groups != 0) {
        throw Error("n_kv_groups " + std::to_string(cfg.n_kv_groups) +
                    " does not divide n_heads " + std::to_string(cfg.n_heads));
    }
}

template <typename Scalar>
struct AttentionWeights {
    Mat<Scalar> Wq;  // (n_heads x head_dim) rows, d_model cols
    Mat<Scalar> Wk;  // (n_kv_groups x head_dim) rows
    Mat<Scalar> Wv;  // (n_kv_groups x head_dim) rows
    Mat<Scalar> Wo;  // d_model rows, (n_heads x head_dim) cols
};

/// Causal scaled dot-product attention over X (columns are positions).
/// Query head h reads the key/value group h / (n_heads / n_kv_groups);
/// with n_kv_groups == n_heads this is plain multi-head attention.
template <typename Scalar, typename DerivedX>
Mat<Scalar> attention_forward(const AttentionConfig& cfg,
                              const AttentionWeights<Scalar>& w,
                              const Eigen::MatrixBase<DerivedX>& X) {
    validate(cfg);
    const Eigen::Index d_model = X.rows();
    const Eigen::Index T = X.cols();
    const Eigen::Index hd = cfg.head_dim;
    if (w.Wq.rows() != cfg.n_heads * hd || w.Wq.cols() != d_model) {
        throw Error("Wq must be (n_heads x head_dim) x d_model, got " +
                    std::to_string(w.Wq.rows()) + "x" +
                    std::to_string(w.Wq.cols()));
    }
    for (const auto* m : {&w.Wk, &w.Wv}) {
        if (m->rows() != cfg.n_kv_groups * hd || m->cols() != d_model) {
            throw Error("Wk/Wv must be (n_kv_groups x head_dim) x d_model, got " +
                        std::to_string(m->rows()) + "x" +
                        std::to_string(m->cols()));
        }
    }
    if (w.Wo.cols() != cfg.n_heads * hd || w.Wo.rows() != d_model) {
        throw Error("Wo must be d_model x (n_heads x head_dim), got " +
                    std::to_string(w.Wo.rows()) + "x" +
                    std::to_string(w.Wo.cols()));
    }

    Mat<Scalar> Q = w.Wq * X;  // (n_heads*hd) x T
    Mat<Scalar> K = w.Wk * X;  // (n_kv_groups*hd) x T
    Mat<Scalar> V = w.Wv * X;

    const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(Scalar(hd));
    const int heads_per_group = cfg.n_heads / cfg.n_kv_groups;

    Mat<Scalar> concat(cfg.n_heads * hd, T);
    for (int h = 0; h < cfg.n_heads; h++) {
        const int g = h / heads_per_group;
        auto Qh = Q.middleRows(h * hd, hd);
        auto Kg = K.middleRows(g * hd, hd);
        auto Vg = V.middleRows(g * hd, hd);
        for (Eigen::Index t = 0; t < T; t++) {
            // Scores over the causal window [0, t], stable softmax.
            Vec<Scalar> scores(t + 1);
            for (Eigen::Index s = 0; s <= t; s++) {
                scores(s) = Qh.col(t).dot(Kg.col(s)) * inv_sqrt_d;
            }
            Scalar peak = scores.maxCoeff();
            Vec<Scalar> weights = (scores.array() - peak).exp();
            weights /= weights.sum();
            concat.block(h * hd, t, hd, 1) = Vg.leftCols(t + 1) * weights;
        }
    }
    return w.Wo * concat;
}

// ---------------------------------------------------------------------------
// Perturbation study.
// ---------------------------------------------------------------------------

struct ArchDeviation {
    double mean_rel_dev = 0.0;
    double max_rel_dev = 0.0;
};

struct PerturbationReport {
    int trials = 0;
    ArchDeviation mha;
    ArchDeviation gqa;

    json to_json() const {
        json j;
        j["trials"] = trials;
        j["per_arch"] = {
            {"mha",
             {{"mean_rel_dev", mha.mean_rel_dev}, {"max_rel_dev", mha.max_rel_dev}}},
            {"gqa",
             {{"mean_rel_dev", gqa.mean_rel_dev}, {"max_rel_dev", gqa.max_rel_dev}}},
        };
        return j;
    }
};

struct PerturbationOptions {
    int seq_len = 8;
    /// Skips the quantization round trip (control: deviations must be 0).
    bool bypass_quantization = false;
};

namespace detail {

template <typename Scalar>
Mat<Scalar> random_matrix(std::mt19937_64& rng, Eigen::Index rows,
                          Eigen::Index cols) {
    Mat<Scalar> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; r++) {
        for (Eigen::Index c = 0; c < cols; c++) {
            m(r, c) = static_cast<Scalar>(util::standard_normal(rng));
        }
    }
    return m;
}

/// One architecture's relative output deviation under K-quant noise on
/// the key/value projections, with weights and inputs drawn from `rng`.
template <typename Scalar>
double one_trial(const AttentionConfig& cfg, std::mt19937_64& rng,
                 const PerturbationOptions& opts) {
    const Eigen::Index d_model =
        static_cast<Eigen::Index>(cfg.n_heads) * cfg.head_dim;
    AttentionWeights<Scalar> w;
    w.Wq = random_matrix<Scalar>(rng, cfg.n_heads * cfg.head_dim, d_model);
    w.Wk = random_matrix<Scalar>(rng, cfg.n_kv_groups * cfg.head_dim, d_model);
    w.Wv = random_matrix<Scalar>(rng, cfg.n_kv_groups * cfg.head_dim, d_model);
    w.Wo = random_matrix<Scalar>(rng, d_model, cfg.n_heads * cfg.head_dim);
    Mat<Scalar> X = random_matrix<Scalar>(rng, d_model, opts.seq_len);

    Mat<Scalar> base = attention_forward(cfg, w, X);

    AttentionWeights<Scalar> wq = w;
    if (!opts.bypass_quantization) {
        wq.Wk = dequantize(simulate_kquant_q4(w.Wk));
        wq.Wv = dequantize(simulate_kquant_q4(w.Wv));
    }
    Mat<Scalar> noisy = attention_forward(cfg, wq, X);

    double base_norm = static_cast<double>(base.norm());
    if (base_norm == 0.0) return 0.0;
    return static_cast<double>((noisy - base).norm()) / base_norm;
}

}  // namespace detail

/// Runs `trials` paired perturbation trials. Both architectures reseed
/// from the same per-trial seed, so when their shapes coincide
/// (n_kv_groups == n_heads) they see identical weights and must report
/// identical deviations. No directional claim is made; this measures.
template <typename Scalar = double>
PerturbationReport quant_perturbation_study(const AttentionConfig& cfg_mha,
                                            const AttentionConfig& cfg_gqa,
                                            std::uint64_t seed, int trials,
                                            const PerturbationOptions& opts = {}) {
    validate(cfg_mha);
    validate(cfg_gqa);
    if (trials < 1) throw Error("perturbation study needs trials >= 1");
    if (static_cast<long>(cfg_mha.n_heads) * cfg_mha.head_dim !=
        static_cast<long>(cfg_gqa.n_heads) * cfg_gqa.head_dim) {
        throw Error("architectures must share n_heads x head_dim");
    }

    PerturbationReport report;
    report.trials = trials;
    double mha_sum = 0, gqa_sum = 0;
    for (int t = 0; t < trials; t++) {
        std::uint64_t trial_seed =
            seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(t + 1);
        std::mt19937_64 rng_m(trial_seed);
        double dev_m = detail::one_trial<Scalar>(cfg_mha, rng_m, opts);
        std::mt19937_64 rng_g(trial_seed);
        double dev_g = detail::one_trial<Scalar>(cfg_gqa, rng_g, opts);
        mha_sum += dev_m;
        gqa_sum += dev_g;
        report.mha.max_rel_dev = std::max(report.mha.max_rel_dev, dev_m);
        report.gqa.max_rel_dev = std::max(report.gqa.max_rel_dev, dev_g);
    }
    report.mha.mean_rel_dev = mha_sum / trials;
    report.gqa.mean_rel_dev = gqa_sum / trials;
    return report;
}

// ---------------------------------------------------------------------------
// Fixture IO.
// ---------------------------------------------------------------------------

/// Reads a plain-text numeric grid: one matrix row per line, entries
/// whitespace-separated, every row the same length.
inline Mat<double> read_matrix_text(std::istream& in) {
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream fields(line);
        std::vector<double> row;
        double v;
        while (fields >> v) row.push_back(v);
        if (!fields.eof()) {
            throw Error("matrix text has a non-numeric entry on line " +
                        std::to_string(rows.size() + 1));
        }
        if (!rows.empty() && row.size() != rows.front().size()) {
            throw Error("matrix text has ragged rows: line " +
                        std::to_string(rows.size() + 1) + " has " +
                        std::to_string(row.size()) + " entries, expected " +
                        std::to_string(rows.front().size()));
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw Error("matrix text is empty");
    Mat<double> m(static_cast<Eigen::Index>(rows.size()),
                  static_cast<Eigen::Index>(rows.front().size()));
    for (Eigen::Index r = 0; r < m.rows(); r++) {
        for (Eigen::Index c = 0; c < m.cols(); c++) {
            m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        }
    }
    return m;
}

inline Mat<double> read_matrix_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open matrix file: " + path.string());
    return read_matrix_text(in);
}

}  // namespace slmeval::quantlab
