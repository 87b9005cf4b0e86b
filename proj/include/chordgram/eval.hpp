#ifndef CHORDGRAM_EVAL_HPP
#define CHORDGRAM_EVAL_HPP

// Predictive-power evaluation shared by all model families: test-data
// perplexity, symbol-wise error rate and RMRR (harmonic mean rank of the
// true symbol), plus free-parameter counts.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "chordgram/corpus.hpp"
#include "chordgram/hmm.hpp"
#include "chordgram/markov.hpp"
#include "chordgram/pcfg.hpp"

namespace chordgram {

/// Anything that scores whole sequences (natural-log evidence normalized
/// over sequences of the same length) and predicts single symbols from the
/// rest of their sequence.
template <class M>
concept SequenceModel = requires(const M& m, std::span<const SymbolId> seq, std::size_t n) {
    { m.log_evidence(seq) } -> std::convertible_to<double>;
    { m.predict_distribution(seq, n) } -> std::same_as<std::vector<double>>;
};

/// Models that can produce every position's prediction in one pass.
template <class M>
concept BatchPredictor = SequenceModel<M> && requires(const M& m, std::span<const SymbolId> seq) {
    { m.predict_all(seq) } -> std::same_as<std::vector<std::vector<double>>>;
};

class MarkovScorer {
public:
    explicit MarkovScorer(const MarkovModel& m) : m_(m) {}
    double log_evidence(std::span<const SymbolId> seq) const { return m_.log_evidence(seq); }
    std::vector<double> predict_distribution(std::span<const SymbolId> seq, std::size_t n) const {
        return m_.predict_distribution(seq, n);
    }

private:
    const MarkovModel& m_;
};

class HmmScorer {
public:
    explicit HmmScorer(const HmmParams& p) : p_(p) {}
    double log_evidence(std::span<const SymbolId> seq) const { return chordgram::log_evidence(p_, seq); }
    std::vector<double> predict_distribution(std::span<const SymbolId> seq, std::size_t n) const {
        return chordgram::predict_distribution(p_, seq, n);
    }

    /// One normalized forward and one normalized backward sweep serve every
    /// position.
    std::vector<std::vector<double>> predict_all(std::span<const SymbolId> seq) const {
        detail::check_sequence(p_, seq);
        const std::size_t s = p_.n_states(), v = p_.vocab_size(), len = seq.size();
        // ahead[n] ∝ P(z_n, x_{1:n-1}); back[n] ∝ P(x_{n+1:N} | z_n).
        Matrix ahead(len, s), back(len, s);
        std::vector<bool> ok(len, true);
        std::vector<double> f(s);
        std::copy(p_.initial.begin(), p_.initial.end(), ahead.row(0).begin());
        bool alive = true;
        for (std::size_t n = 1; n < len; ++n) {
            const auto x = static_cast<std::size_t>(seq[n - 1]);
            for (std::size_t z = 0; z < s; ++z) f[z] = ahead(n - 1, z) * p_.output(z, x);
            alive = alive && normalize(f);
            ok[n] = alive;
            if (!alive) continue;
            for (std::size_t z = 0; z < s; ++z) {
                double a = 0.0;
                for (std::size_t w = 0; w < s; ++w) a += f[w] * p_.transition(w, z);
                ahead(n, z) = a;
            }
        }
        for (std::size_t z = 0; z < s; ++z) back(len - 1, z) = 1.0;
        alive = true;
        for (std::size_t n = len - 1; n-- > 0;) {
            const auto x = static_cast<std::size_t>(seq[n + 1]);
            for (std::size_t z = 0; z < s; ++z) {
                double b = 0.0;
                for (std::size_t w = 0; w < s; ++w) b += p_.transition(z, w) * p_.output(w, x) * back(n + 1, w);
                back(n, z) = b;
            }
            alive = alive && normalize(back.row(n));
            ok[n] = ok[n] && alive;
        }
        std::vector<std::vector<double>> out(len, std::vector<double>(v, 0.0));
        for (std::size_t n = 0; n < len; ++n) {
            auto& dist = out[n];
            if (ok[n]) {
                for (std::size_t z = 0; z < s; ++z) {
                    const double w = ahead(n, z) * back(n, z);
                    if (w == 0.0) continue;
                    for (std::size_t y = 0; y < v; ++y) dist[y] += w * p_.output(z, y);
                }
            }
            if (!normalize(dist)) fill_uniform(dist);
        }
        return out;
    }

private:
    const HmmParams& p_;
};

/// PCFG scores use the length-normalized evidence so they compare with the
/// other families; predictions for impossible contexts fall back to uniform.
class PcfgScorer {
public:
    explicit PcfgScorer(const PcfgParams& p) : p_(p) {}

    double log_evidence(std::span<const SymbolId> seq) const {
        const double lp = log_length_probability(p_, seq.size());
        if (lp == kNegInf) return kNegInf;
        return chordgram::log_evidence(p_, seq) - lp;
    }

    std::vector<double> predict_distribution(std::span<const SymbolId> seq, std::size_t n) const {
        std::vector<double> u(p_.vocab_size());
        fill_uniform(u);
        if (seq.size() < 2) return u;
        try {
            return chordgram::predict_distribution(p_, seq, n);
        } catch (const Error& e) {
            if (e.kind() != "numeric") throw;
            return u;
        }
    }

    std::vector<std::vector<double>> predict_all(std::span<const SymbolId> seq) const {
        const std::size_t v = p_.vocab_size();
        std::vector<std::vector<double>> out(seq.size(), std::vector<double>(v, 0.0));
        if (seq.size() < 2) {
            for (auto& d : out) fill_uniform(d);
            return out;
        }
        const Charts c = inside_outside(p_, seq);
        for (std::size_t n = 0; n < seq.size(); ++n) {
            const auto a = c.outside(n, n);
            for (std::size_t z = 0; z < p_.n_nonterminals(); ++z) {
                if (a[z] == 0.0) continue;
                for (std::size_t y = 0; y < v; ++y) out[n][y] += a[z] * p_.terminal(z, y);
            }
            if (!normalize(out[n])) fill_uniform(out[n]);
        }
        return out;
    }

private:
    const PcfgParams& p_;
};

template <SequenceModel M>
std::vector<std::vector<double>> predictions(const M& model, std::span<const SymbolId> seq) {
    if constexpr (BatchPredictor<M>) {
        return model.predict_all(seq);
    } else {
        std::vector<std::vector<double>> out;
        out.reserve(seq.size());
        for (std::size_t n = 0; n < seq.size(); ++n) out.push_back(model.predict_distribution(seq, n));
        return out;
    }
}

/// Index of the largest entry; ties go to the lowest id.
inline std::size_t argmax(std::span<const double> dist) {
    std::size_t best = 0;
    for (std::size_t y = 1; y < dist.size(); ++y)
        if (dist[y] > dist[best]) best = y;
    return best;
}

/// 1-based rank of `truth` under descending probability; equal
/// probabilities rank lower ids first.
inline std::size_t rank_of(std::span<const double> dist, std::size_t truth) {
    std::size_t rank = 1;
    for (std::size_t y = 0; y < dist.size(); ++y)
        if (dist[y] > dist[truth] || (dist[y] == dist[truth] && y < truth)) ++rank;
    return rank;
}

inline void require_test(const EncodedDataset& test) {
    if (test.empty() || test.symbol_count() == 0) throw invalid_argument("evaluation needs non-empty test data");
}

/// exp(-(1/|X|) sum ln P(x)), |X| the number of symbols. Any zero-probability
/// sequence makes the result +inf.
template <SequenceModel M>
double perplexity(const M& model, const EncodedDataset& test) {
    require_test(test);
    double total = 0.0;
    for (const auto& seq : test.sequences) {
        const double l = model.log_evidence(seq);
        if (l == kNegInf) return std::numeric_limits<double>::infinity();
        total += l;
    }
    return std::exp(-total / static_cast<double>(test.symbol_count()));
}

template <SequenceModel M>
double error_rate(const M& model, const EncodedDataset& test) {
    require_test(test);
    std::size_t wrong = 0;
    for (const auto& seq : test.sequences) {
        const auto preds = predictions(model, seq);
        for (std::size_t n = 0; n < seq.size(); ++n)
            if (argmax(preds[n]) != static_cast<std::size_t>(seq[n])) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(test.symbol_count());
}

template <SequenceModel M>
double rmrr(const M& model, const EncodedDataset& test) {
    require_test(test);
    double reciprocal = 0.0;
    for (const auto& seq : test.sequences) {
        const auto preds = predictions(model, seq);
        for (std::size_t n = 0; n < seq.size(); ++n)
            reciprocal += 1.0 / static_cast<double>(rank_of(preds[n], static_cast<std::size_t>(seq[n])));
    }
    return static_cast<double>(test.symbol_count()) / reciprocal;
}

struct EvalReport {
    double perplexity = 0.0;
    double error_rate = 0.0;
    double rmrr = 0.0;
    std::size_t n_symbols = 0;
};

/// All three metrics, sharing one prediction pass per sequence.
template <SequenceModel M>
EvalReport evaluate(const M& model, const EncodedDataset& test) {
    require_test(test);
    EvalReport r;
    r.n_symbols = test.symbol_count();
    r.perplexity = perplexity(model, test);
    std::size_t wrong = 0;
    double reciprocal = 0.0;
    for (const auto& seq : test.sequences) {
        const auto preds = predictions(model, seq);
        for (std::size_t n = 0; n < seq.size(); ++n) {
            const auto truth = static_cast<std::size_t>(seq[n]);
            if (argmax(preds[n]) != truth) ++wrong;
            reciprocal += 1.0 / static_cast<double>(rank_of(preds[n], truth));
        }
    }
    r.error_rate = static_cast<double>(wrong) / static_cast<double>(r.n_symbols);
    r.rmrr = static_cast<double>(r.n_symbols) / reciprocal;
    return r;
}

inline void write_eval_csv_header(std::ostream& os) { os << "model,size,dataset,n_symbols,perplexity,error_rate,rmrr\n"; }

inline void write_eval_csv_row(std::ostream& os, const std::string& model, std::size_t size,
                               const std::string& dataset, const EvalReport& r) {
    os << model << ',' << size << ',' << dataset << ',' << r.n_symbols << ',' << format_double(r.perplexity) << ','
       << format_double(r.error_rate) << ',' << format_double(r.rmrr) << '\n';
}

enum class ModelKind { markov, hmm, pcfg };

inline std::string to_string(ModelKind k) {
    switch (k) {
    case ModelKind::markov: return "markov";
    case ModelKind::hmm: return "hmm";
    case ModelKind::pcfg: return "pcfg";
    }
    return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "markov") return ModelKind::markov;
    if (s == "hmm") return ModelKind::hmm;
    if (s == "pcfg") return ModelKind::pcfg;
    throw invalid_argument("unknown model kind '" + s + "' (expected markov, hmm or pcfg)");
}

/// Free parameters after normalization. `size` is the Markov order, the
/// number of HMM states or the number of PCFG nonterminals (start_terminal
/// fixed to zero).
inline std::uint64_t param_count(ModelKind kind, std::uint64_t size, std::uint64_t vocab_size) {
    if (size < 1) throw invalid_argument("model size must be >= 1");
    switch (kind) {
    case ModelKind::markov: {
        std::uint64_t contexts = 0, power = 1;
        for (std::uint64_t j = 0; j <= size; ++j) {
            contexts += power;
            power *= vocab_size;
        }
        return contexts * (vocab_size - 1);
    }
    case ModelKind::hmm: return (1 + size) * (size - 1) + size * (vocab_size - 1);
    case ModelKind::pcfg: return (1 + size) * (size * size - 1) + size * vocab_size;
    }
    return 0;
}

}  // namespace chordgram

#endif  // CHORDGRAM_EVAL_HPP
