#ifndef CHORDGRAM_MARKOV_HPP
#define CHORDGRAM_MARKOV_HPP

// k-th order Markov models over encoded symbol sequences.
//
// A model holds k initial tables (table j gives P(x_j | x_1..x_{j-1}) for the
// first k positions) and one transition table P(x_n | x_{n-k}..x_{n-1}).
// Contexts are stored densely: a context of length m over an alphabet of
// size V is the base-V number formed by its ids, oldest first.

#include <array>
#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "chordgram/common.hpp"
#include "chordgram/corpus.hpp"
#include "chordgram/model_io.hpp"

namespace chordgram {

struct Smoothing {
    enum class Kind { additive, kn, mkn };

    Kind kind = Kind::mkn;
    double epsilon = 0.1;  // additive only

    static Smoothing additive(double eps = 0.1) { return {Kind::additive, eps}; }
    static Smoothing kneser_ney() { return {Kind::kn, 0.0}; }
    static Smoothing modified_kneser_ney() { return {Kind::mkn, 0.0}; }

    std::string tag() const {
        switch (kind) {
        case Kind::additive: return "additive " + format_double(epsilon);
        case Kind::kn: return "kn";
        case Kind::mkn: return "mkn";
        }
        return "?";
    }

    /// Accepts "kn", "mkn", "additive" (epsilon 0.1) or "additive <eps>".
    static Smoothing parse(const std::string& text) {
        if (text == "kn") return kneser_ney();
        if (text == "mkn") return modified_kneser_ney();
        if (text == "additive") return additive();
        if (text.rfind("additive ", 0) == 0) {
            double eps = 0.0;
            try {
                eps = std::stod(text.substr(9));
            } catch (const std::exception&) {
                throw invalid_argument("bad additive epsilon in '" + text + "'");
            }
            return additive(eps);
        }
        throw invalid_argument("unknown smoothing '" + text + "' (expected additive, kn or mkn)");
    }

    friend bool operator==(const Smoothing&, const Smoothing&) = default;
};

namespace detail {

inline std::size_t ipow(std::size_t base, std::size_t exp) {
    std::size_t r = 1;
    while (exp--) r *= base;
    return r;
}

inline std::size_t context_index(std::span<const SymbolId> ids, std::size_t vocab_size) {
    std::size_t idx = 0;
    for (SymbolId id : ids) idx = idx * vocab_size + static_cast<std::size_t>(id);
    return idx;
}

}  // namespace detail

class MarkovModel {
public:
    MarkovModel() = default;

    MarkovModel(std::size_t order, std::size_t vocab_size, Smoothing smoothing,
                std::vector<Matrix> initial, Matrix transition)
        : order_(order),
          vocab_size_(vocab_size),
          smoothing_(smoothing),
          initial_(std::move(initial)),
          transition_(std::move(transition)) {
        if (order_ < 1) throw invalid_argument("Markov order must be >= 1");
        if (initial_.size() != order_) throw invalid_argument("Markov model needs one initial table per order");
        for (std::size_t j = 0; j < order_; ++j)
            if (initial_[j].rows() != detail::ipow(vocab_size_, j) || initial_[j].cols() != vocab_size_)
                throw invalid_argument("Markov initial table has the wrong shape");
        if (transition_.rows() != detail::ipow(vocab_size_, order_) || transition_.cols() != vocab_size_)
            throw invalid_argument("Markov transition table has the wrong shape");
    }

    std::size_t order() const noexcept { return order_; }
    std::size_t vocab_size() const noexcept { return vocab_size_; }
    const Smoothing& smoothing() const noexcept { return smoothing_; }

    /// Table j (1-based) of the initial probabilities.
    const Matrix& initial(std::size_t j) const { return initial_.at(j - 1); }
    const Matrix& transition() const noexcept { return transition_; }

    /// Probability of seq[pos] given its history; uses the initial tables for
    /// the first `order` positions (pos is 0-based).
    double conditional(std::span<const SymbolId> seq, std::size_t pos) const {
        const auto x = static_cast<std::size_t>(seq[pos]);
        if (pos < order_) return initial_[pos](detail::context_index(seq.subspan(0, pos), vocab_size_), x);
        return transition_(detail::context_index(seq.subspan(pos - order_, order_), vocab_size_), x);
    }

    double log_evidence(std::span<const SymbolId> seq) const {
        check(seq);
        double total = 0.0;
        for (std::size_t pos = 0; pos < seq.size(); ++pos) total += std::log(conditional(seq, pos));
        return total;
    }

    /// P(x_n = y | rest of the sequence) for every y; n is 0-based. Only the
    /// factors whose context window covers position n depend on y.
    std::vector<double> predict_distribution(std::span<const SymbolId> seq, std::size_t n) const {
        check(seq);
        if (n >= seq.size()) throw invalid_argument("prediction position out of range");
        Sequence work(seq.begin(), seq.end());
        const std::size_t last = std::min(n + order_, seq.size() - 1);
        std::vector<double> logp(vocab_size_, 0.0);
        for (std::size_t y = 0; y < vocab_size_; ++y) {
            work[n] = static_cast<SymbolId>(y);
            for (std::size_t pos = n; pos <= last; ++pos) logp[y] += std::log(conditional(work, pos));
        }
        const double norm = log_sum_exp(logp);
        std::vector<double> out(vocab_size_);
        for (std::size_t y = 0; y < vocab_size_; ++y) out[y] = std::exp(logp[y] - norm);
        return out;
    }

    Sequence sample_sequence(std::size_t length, Rng& rng) const {
        if (length < 1) throw invalid_argument("sample length must be >= 1");
        Sequence seq;
        seq.reserve(length);
        for (std::size_t pos = 0; pos < length; ++pos) {
            const Matrix& table = pos < order_ ? initial_[pos] : transition_;
            const std::size_t ctx = pos < order_
                                        ? detail::context_index(seq, vocab_size_)
                                        : detail::context_index(std::span(seq).subspan(pos - order_), vocab_size_);
            seq.push_back(static_cast<SymbolId>(rng.categorical(table.row(ctx))));
        }
        return seq;
    }

    void write(std::ostream& os, std::uint64_t vocab_hash) const {
        ModelWriter w(os);
        w.begin("markov", vocab_hash);
        w.field("vocab-size", vocab_size_);
        w.field("order", order_);
        w.field("smoothing", smoothing_.tag());
        for (std::size_t j = 0; j < order_; ++j) w.table("initial-" + std::to_string(j + 1), initial_[j]);
        w.table("transition", transition_);
        w.end();
    }

    /// Reads the body after `ModelReader::begin()` returned "markov".
    static MarkovModel read_body(ModelReader& r) {
        const std::size_t v = r.size_field("vocab-size");
        const std::size_t k = r.size_field("order");
        if (k < 1 || v < 1) throw Error("parse", "Markov model needs order >= 1 and vocab-size >= 1");
        const Smoothing s = Smoothing::parse(r.field("smoothing"));
        std::vector<Matrix> initial;
        for (std::size_t j = 0; j < k; ++j)
            initial.push_back(r.table("initial-" + std::to_string(j + 1), detail::ipow(v, j), v));
        Matrix trans = r.table("transition", detail::ipow(v, k), v);
        r.end();
        return MarkovModel(k, v, s, std::move(initial), std::move(trans));
    }

    friend bool operator==(const MarkovModel&, const MarkovModel&) = default;

private:
    void check(std::span<const SymbolId> seq) const {
        if (seq.empty()) throw invalid_argument("sequence must be non-empty");
        for (SymbolId id : seq)
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_)
                throw invalid_argument("symbol id " + std::to_string(id) + " outside vocabulary");
    }

    std::size_t order_ = 1;
    std::size_t vocab_size_ = 1;
    Smoothing smoothing_;
    std::vector<Matrix> initial_;
    Matrix transition_;
};

namespace detail {

/// Absolute discounts for counts 1, 2 and 3+.
struct Discounts {
    std::array<double, 3> d{};

    double operator()(double count) const {
        if (count <= 0.0) return 0.0;
        if (count < 1.5) return d[0];
        if (count < 2.5) return d[1];
        return d[2];
    }
};

/// Chen-Goodman discount estimates from count-of-counts. Returns nothing when
/// the statistics are degenerate (no singletons), in which case the caller
/// falls back to additive smoothing.
inline std::optional<Discounts> estimate_discounts(const std::vector<double>& counts, Smoothing::Kind kind) {
    std::array<double, 5> n{};
    for (double c : counts) {
        const auto r = static_cast<std::size_t>(std::llround(c));
        if (r >= 1 && r <= 4) n[r] += 1.0;
    }
    if (n[1] == 0.0) return std::nullopt;
    const double y = n[1] / (n[1] + 2.0 * n[2]);
    Discounts out{{y, y, y}};
    if (kind == Smoothing::Kind::mkn && n[2] > 0.0 && n[3] > 0.0) {
        out.d[0] = 1.0 - 2.0 * y * n[2] / n[1];
        out.d[1] = 2.0 - 3.0 * y * n[3] / n[2];
        out.d[2] = 3.0 - 4.0 * y * n[4] / n[3];
        // Large n3 or n4 can push D2/D3 non-positive; keep every discount
        // positive so each row still reserves mass for unseen continuations.
        for (double& d : out.d)
            if (!(d > 0.0)) d = y;
    }
    return out;
}

/// Interpolates one level: rows of `counts` (contexts x V) discounted and
/// mixed with `lower(row, w)`.
template <class Lower>
Matrix interpolate(const std::vector<double>& counts, std::size_t rows, std::size_t vocab_size,
                   const Discounts& disc, Lower&& lower) {
    Matrix out(rows, vocab_size);
    for (std::size_t h = 0; h < rows; ++h) {
        const double* c = counts.data() + h * vocab_size;
        double total = 0.0, reserved = 0.0;
        for (std::size_t w = 0; w < vocab_size; ++w) {
            total += c[w];
            reserved += disc(c[w]);
        }
        for (std::size_t w = 0; w < vocab_size; ++w) {
            if (total > 0.0)
                out(h, w) = std::max(c[w] - disc(c[w]), 0.0) / total + reserved / total * lower(h, w);
            else
                out(h, w) = lower(h, w);
        }
    }
    return out;
}

}  // namespace detail

/// Fits a k-th order model. Additive: (C(ctx x) + eps) / (C(ctx) + eps V) for
/// both initial and transition tables. KN/MKN: interpolated absolute
/// discounting down to the unigram level and then the uniform distribution;
/// lower levels use continuation counts. Initial table j interpolates the
/// sequence-prefix counts with the level-j distribution for the same context.
/// When the discount statistics are degenerate the model is fit with additive
/// epsilon 0.1 instead, and its smoothing() reports that.
inline MarkovModel fit_markov(const EncodedDataset& train, std::size_t order, Smoothing smoothing) {
    using detail::ipow;
    if (order < 1) throw invalid_argument("Markov order must be >= 1");
    if (train.empty()) throw invalid_argument("cannot fit a Markov model on empty training data");
    const std::size_t v = train.vocab_size;
    if (v < 1) throw invalid_argument("training data has an empty vocabulary");
    if (smoothing.kind == Smoothing::Kind::additive && !(smoothing.epsilon > 0.0))
        throw invalid_argument("additive smoothing needs epsilon > 0");
    for (const auto& seq : train.sequences)
        for (SymbolId id : seq)
            if (id < 0 || static_cast<std::size_t>(id) >= v)
                throw invalid_argument("training symbol id outside vocabulary");

    // ngram[m]: counts of every m-gram (m = 1..order+1) at every position.
    // prefix[j]: counts of length-j sequence prefixes (j = 1..order).
    std::vector<std::vector<double>> ngram(order + 2), prefix(order + 1);
    for (std::size_t m = 1; m <= order + 1; ++m) ngram[m].assign(ipow(v, m), 0.0);
    for (std::size_t j = 1; j <= order; ++j) prefix[j].assign(ipow(v, j), 0.0);
    for (const auto& seq : train.sequences) {
        const std::span<const SymbolId> s(seq);
        for (std::size_t m = 1; m <= order + 1; ++m)
            for (std::size_t end = m; end <= s.size(); ++end)
                ngram[m][detail::context_index(s.subspan(end - m, m), v)] += 1.0;
        for (std::size_t j = 1; j <= order && j <= s.size(); ++j)
            prefix[j][detail::context_index(s.subspan(0, j), v)] += 1.0;
    }

    auto fit_additive = [&](double eps) {
        auto additive_table = [&](const std::vector<double>& counts, std::size_t rows) {
            Matrix t(rows, v);
            for (std::size_t h = 0; h < rows; ++h) {
                double total = 0.0;
                for (std::size_t w = 0; w < v; ++w) total += counts[h * v + w];
                for (std::size_t w = 0; w < v; ++w)
                    t(h, w) = (counts[h * v + w] + eps) / (total + eps * static_cast<double>(v));
            }
            return t;
        };
        std::vector<Matrix> initial;
        for (std::size_t j = 1; j <= order; ++j) initial.push_back(additive_table(prefix[j], ipow(v, j - 1)));
        Matrix trans = additive_table(ngram[order + 1], ipow(v, order));
        return MarkovModel(order, v, Smoothing::additive(eps), std::move(initial), std::move(trans));
    };

    if (smoothing.kind == Smoothing::Kind::additive) return fit_additive(smoothing.epsilon);

    // Level m models P(w | m-1 previous symbols). The top level uses raw
    // counts; lower levels use continuation counts N1+(. h w).
    std::vector<std::vector<double>> level_counts(order + 2);
    level_counts[order + 1] = ngram[order + 1];
    for (std::size_t m = 1; m <= order; ++m) {
        auto& cont = level_counts[m];
        cont.assign(ipow(v, m), 0.0);
        const std::size_t span = ipow(v, m);
        for (std::size_t idx = 0; idx < ngram[m + 1].size(); ++idx)
            if (ngram[m + 1][idx] > 0.0) cont[idx % span] += 1.0;
    }
    std::vector<detail::Discounts> discounts(order + 2);
    for (std::size_t m = 1; m <= order + 1; ++m) {
        auto d = detail::estimate_discounts(level_counts[m], smoothing.kind);
        if (!d) return fit_additive(0.1);
        discounts[m] = *d;
    }

    // dist[m]: level-m conditional table with ipow(v, m-1) context rows.
    std::vector<Matrix> dist(order + 2);
    const double uniform = 1.0 / static_cast<double>(v);
    dist[1] = detail::interpolate(level_counts[1], 1, v, discounts[1],
                                  [&](std::size_t, std::size_t) { return uniform; });
    for (std::size_t m = 2; m <= order + 1; ++m) {
        const std::size_t lower_rows = ipow(v, m - 2);
        const Matrix& lower = dist[m - 1];
        dist[m] = detail::interpolate(level_counts[m], ipow(v, m - 1), v, discounts[m],
                                      [&](std::size_t h, std::size_t w) { return lower(h % lower_rows, w); });
    }

    std::vector<Matrix> initial;
    for (std::size_t j = 1; j <= order; ++j) {
        auto d = detail::estimate_discounts(prefix[j], smoothing.kind);
        const Matrix& backoff = dist[j];
        initial.push_back(detail::interpolate(prefix[j], ipow(v, j - 1), v, d ? *d : discounts[j],
                                              [&](std::size_t h, std::size_t w) { return backoff(h, w); }));
    }
    return MarkovModel(order, v, smoothing, std::move(initial), std::move(dist[order + 1]));
}

}  // namespace chordgram

#endif  // CHORDGRAM_MARKOV_HPP
