#ifndef CHORDGRAM_COMMON_HPP
#define CHORDGRAM_COMMON_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace chordgram {

/// Error carrying a short machine-readable kind ("invalid_argument",
/// "io", "parse", "numeric", ...) next to the human message.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

inline Error invalid_argument(const std::string& message) {
    return Error("invalid_argument", message);
}

using SymbolId = int;
using Sequence = std::vector<SymbolId>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kRowSumTolerance = 1e-9;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double value = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, value) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double sum(std::span<const double> values) {
    return std::accumulate(values.begin(), values.end(), 0.0);
}

inline bool is_distribution(std::span<const double> values, double tol = kRowSumTolerance) {
    for (double v : values)
        if (!(v >= 0.0) || !std::isfinite(v)) return false;
    return std::abs(sum(values) - 1.0) <= tol;
}

/// Scales `values` to sum to one. Returns false (and leaves the values
/// untouched) when the total is zero.
inline bool normalize(std::span<double> values) {
    const double total = sum(values);
    if (!(total > 0.0)) return false;
    for (double& v : values) v /= total;
    return true;
}

inline void fill_uniform(std::span<double> values) {
    if (values.empty()) return;
    std::fill(values.begin(), values.end(), 1.0 / static_cast<double>(values.size()));
}

inline double log_sum_exp(std::span<const double> logs) {
    double hi = kNegInf;
    for (double v : logs) hi = std::max(hi, v);
    if (hi == kNegInf) return kNegInf;
    double acc = 0.0;
    for (double v : logs) acc += std::exp(v - hi);
    return hi + std::log(acc);
}

/// exp(-sum p ln p) with 0 ln 0 := 0.
inline double perplexity_of(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return std::exp(h);
}

/// Seeded random source. Every randomized operation takes one of these (or a
/// seed that constructs one), so results are pure functions of the seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    /// Natural log of a Gamma(shape, 1) draw. Small shapes go through the
    /// Gamma(a + 1) * U^(1/a) identity in log space so they never underflow.
    double log_gamma_draw(double shape) {
        if (shape >= 1.0) return std::log(std::gamma_distribution<double>(shape, 1.0)(engine_));
        const double g = std::gamma_distribution<double>(shape + 1.0, 1.0)(engine_);
        double u = uniform();
        while (u == 0.0) u = uniform();
        return std::log(g) + std::log(u) / shape;
    }

    /// Draw from Dirichlet(alpha) into `out`. Entries of alpha must be > 0.
    void dirichlet(std::span<const double> alpha, std::span<double> out) {
        std::vector<double> logs(alpha.size());
        for (std::size_t i = 0; i < alpha.size(); ++i) logs[i] = log_gamma_draw(alpha[i]);
        const double total = log_sum_exp(logs);
        for (std::size_t i = 0; i < alpha.size(); ++i) out[i] = std::exp(logs[i] - total);
        normalize(out);
    }

    /// Index drawn proportionally to non-negative weights (need not sum to 1).
    std::size_t categorical(std::span<const double> weights) {
        const double total = sum(weights);
        if (!(total > 0.0)) throw Error("numeric", "categorical draw from all-zero weights");
        double target = uniform() * total;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] <= 0.0) continue;
            last_positive = i;
            if (target < weights[i]) return i;
            target -= weights[i];
        }
        return last_positive;
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

/// Deterministic Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// splitmix64 finalizer, used to derive independent seeds from coordinates.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Shortest decimal rendering of a double that parses back to the same value.
inline std::string format_double(double v) {
    char buf[32];
    for (int precision = 1; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof buf, "%.*g", precision, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace chordgram

#endif  // CHORDGRAM_COMMON_HPP
