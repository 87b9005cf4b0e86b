#ifndef CHORDGRAM_HMM_HPP
#define CHORDGRAM_HMM_HPP

// First-order hidden Markov models: scaled forward-backward, Baum-Welch EM,
// blocked Gibbs sampling with EM polish, symbol-wise prediction, the Markov
// embedding and stationary-distribution based structure measures.

#include <cmath>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "chordgram/common.hpp"
#include "chordgram/corpus.hpp"
#include "chordgram/markov.hpp"
#include "chordgram/model_io.hpp"

namespace chordgram {

struct HmmParams {
    std::vector<double> initial;  // pi_ini, size n_states
    Matrix transition;            // pi, n_states x n_states
    Matrix output;                // phi, n_states x vocab_size

    HmmParams() = default;
    HmmParams(std::size_t n_states, std::size_t vocab_size)
        : initial(n_states, 0.0), transition(n_states, n_states), output(n_states, vocab_size) {}

    std::size_t n_states() const noexcept { return initial.size(); }
    std::size_t vocab_size() const noexcept { return output.cols(); }

    /// Throws unless the shapes agree and every row is a distribution.
    void validate(double tol = kRowSumTolerance) const {
        const std::size_t s = n_states();
        if (s < 1 || transition.rows() != s || transition.cols() != s || output.rows() != s || output.cols() < 1)
            throw invalid_argument("HMM parameter tables have inconsistent shapes");
        if (!is_distribution(initial, tol)) throw invalid_argument("HMM initial probabilities do not sum to 1");
        for (std::size_t z = 0; z < s; ++z) {
            if (!is_distribution(transition.row(z), tol))
                throw invalid_argument("HMM transition row " + std::to_string(z) + " is not a distribution");
            if (!is_distribution(output.row(z), tol))
                throw invalid_argument("HMM output row " + std::to_string(z) + " is not a distribution");
        }
    }

    void write(std::ostream& os, std::uint64_t vocab_hash) const {
        ModelWriter w(os);
        w.begin("hmm", vocab_hash);
        w.field("vocab-size", vocab_size());
        w.field("states", n_states());
        w.table("initial", initial);
        w.table("transition", transition);
        w.table("output", output);
        w.end();
    }

    static HmmParams read_body(ModelReader& r) {
        const std::size_t v = r.size_field("vocab-size");
        const std::size_t s = r.size_field("states");
        if (s < 1 || v < 1) throw Error("parse", "HMM needs states >= 1 and vocab-size >= 1");
        HmmParams p;
        p.initial = r.vector_table("initial", s);
        p.transition = r.table("transition", s, s);
        p.output = r.table("output", s, v);
        r.end();
        p.validate(1e-6);
        return p;
    }

    friend bool operator==(const HmmParams&, const HmmParams&) = default;
};

/// Dirichlet hyperparameters for the three HMM distributions.
struct HmmHyper {
    std::vector<double> initial;
    Matrix transition;
    Matrix output;

    static HmmHyper symmetric(std::size_t n_states, std::size_t vocab_size, double alpha = 0.1) {
        if (!(alpha > 0.0)) throw invalid_argument("Dirichlet parameters must be > 0");
        return {std::vector<double>(n_states, alpha), Matrix(n_states, n_states, alpha),
                Matrix(n_states, vocab_size, alpha)};
    }
};

/// Each row drawn from a symmetric Dirichlet(1).
inline HmmParams init_random_hmm(std::size_t n_states, std::size_t vocab_size, std::uint64_t seed) {
    if (n_states < 1 || vocab_size < 1) throw invalid_argument("HMM sizes must be >= 1");
    Rng rng(seed);
    HmmParams p(n_states, vocab_size);
    const std::vector<double> ones_s(n_states, 1.0), ones_v(vocab_size, 1.0);
    rng.dirichlet(ones_s, p.initial);
    for (std::size_t z = 0; z < n_states; ++z) rng.dirichlet(ones_s, p.transition.row(z));
    for (std::size_t z = 0; z < n_states; ++z) rng.dirichlet(ones_v, p.output.row(z));
    return p;
}

/// Scaled forward-backward tables. alpha(n, z) * prod_{m<=n} scale[m] is the
/// forward variable P(z_n, x_{1:n}); beta(n, z) * prod_{m>n} scale[m] is the
/// backward variable P(x_{n+1:N} | z_n).
struct FbTables {
    Matrix alpha;
    Matrix beta;
    std::vector<double> scale;
    double log_evidence = kNegInf;

    bool possible() const noexcept { return log_evidence != kNegInf; }

    /// P(z_n = z | x).
    double posterior(std::size_t n, std::size_t z) const { return alpha(n, z) * beta(n, z); }

    double log_forward(std::size_t n, std::size_t z) const {
        double s = std::log(alpha(n, z));
        for (std::size_t m = 0; m <= n; ++m) s += std::log(scale[m]);
        return s;
    }

    double log_backward(std::size_t n, std::size_t z) const {
        double s = std::log(beta(n, z));
        for (std::size_t m = n + 1; m < scale.size(); ++m) s += std::log(scale[m]);
        return s;
    }
};

namespace detail {

inline void check_sequence(const HmmParams& p, std::span<const SymbolId> seq) {
    if (seq.empty()) throw invalid_argument("sequence must be non-empty");
    for (SymbolId id : seq)
        if (id < 0 || static_cast<std::size_t>(id) >= p.vocab_size())
            throw invalid_argument("symbol id " + std::to_string(id) + " outside HMM vocabulary");
}

/// Scaled forward pass into `alpha`/`scale`; returns the log evidence
/// (-inf as soon as a prefix becomes impossible).
inline double forward_pass(const HmmParams& p, std::span<const SymbolId> seq, Matrix& alpha,
                           std::vector<double>& scale) {
    const std::size_t s = p.n_states(), len = seq.size();
    alpha = Matrix(len, s);
    scale.assign(len, 0.0);
    double log_ev = 0.0;
    for (std::size_t n = 0; n < len; ++n) {
        const auto x = static_cast<std::size_t>(seq[n]);
        double c = 0.0;
        for (std::size_t z = 0; z < s; ++z) {
            double a = 0.0;
            if (n == 0) {
                a = p.initial[z];
            } else {
                for (std::size_t w = 0; w < s; ++w) a += alpha(n - 1, w) * p.transition(w, z);
            }
            a *= p.output(z, x);
            alpha(n, z) = a;
            c += a;
        }
        if (!(c > 0.0)) return kNegInf;
        scale[n] = c;
        for (std::size_t z = 0; z < s; ++z) alpha(n, z) /= c;
        log_ev += std::log(c);
    }
    return log_ev;
}

}  // namespace detail

inline FbTables forward_backward(const HmmParams& p, std::span<const SymbolId> seq) {
    detail::check_sequence(p, seq);
    FbTables t;
    t.log_evidence = detail::forward_pass(p, seq, t.alpha, t.scale);
    const std::size_t s = p.n_states(), len = seq.size();
    t.beta = Matrix(len, s);
    if (!t.possible()) return t;
    for (std::size_t z = 0; z < s; ++z) t.beta(len - 1, z) = 1.0;
    for (std::size_t n = len - 1; n-- > 0;) {
        const auto x = static_cast<std::size_t>(seq[n + 1]);
        for (std::size_t z = 0; z < s; ++z) {
            double b = 0.0;
            for (std::size_t w = 0; w < s; ++w) b += p.transition(z, w) * p.output(w, x) * t.beta(n + 1, w);
            t.beta(n, z) = b / t.scale[n + 1];
        }
    }
    return t;
}

inline double log_evidence(const HmmParams& p, std::span<const SymbolId> seq) {
    detail::check_sequence(p, seq);
    Matrix alpha;
    std::vector<double> scale;
    return detail::forward_pass(p, seq, alpha, scale);
}

inline double log_evidence(const HmmParams& p, const EncodedDataset& data) {
    double total = 0.0;
    for (const auto& seq : data.sequences) total += log_evidence(p, seq);
    return total;
}

/// Expected (or sampled) sufficient statistics.
struct HmmCounts {
    std::vector<double> initial;
    Matrix transition;
    Matrix output;

    HmmCounts(std::size_t n_states, std::size_t vocab_size)
        : initial(n_states, 0.0), transition(n_states, n_states), output(n_states, vocab_size) {}
};

namespace detail {

inline void normalize_or_uniform(std::span<double> row) {
    if (!normalize(row)) fill_uniform(row);
}

/// Maximum-likelihood parameters from counts; rows without counts become
/// uniform.
inline HmmParams hmm_from_counts(HmmCounts counts) {
    HmmParams p;
    p.initial = std::move(counts.initial);
    p.transition = std::move(counts.transition);
    p.output = std::move(counts.output);
    normalize_or_uniform(p.initial);
    for (std::size_t z = 0; z < p.n_states(); ++z) {
        normalize_or_uniform(p.transition.row(z));
        normalize_or_uniform(p.output.row(z));
    }
    return p;
}

/// E-step for one sequence; returns its log evidence.
inline double accumulate_expected(const HmmParams& p, std::span<const SymbolId> seq, HmmCounts& acc) {
    const FbTables t = forward_backward(p, seq);
    if (!t.possible()) return kNegInf;
    const std::size_t s = p.n_states(), len = seq.size();
    for (std::size_t z = 0; z < s; ++z) acc.initial[z] += t.posterior(0, z);
    for (std::size_t n = 0; n < len; ++n)
        for (std::size_t z = 0; z < s; ++z)
            acc.output(z, static_cast<std::size_t>(seq[n])) += t.posterior(n, z);
    for (std::size_t n = 0; n + 1 < len; ++n) {
        const auto x = static_cast<std::size_t>(seq[n + 1]);
        for (std::size_t z = 0; z < s; ++z)
            for (std::size_t w = 0; w < s; ++w)
                acc.transition(z, w) +=
                    t.alpha(n, z) * p.transition(z, w) * p.output(w, x) * t.beta(n + 1, w) / t.scale[n + 1];
    }
    return t.log_evidence;
}

}  // namespace detail

struct EmConfig {
    std::size_t max_iter = 500;
    double rel_tol = 1e-5;
};

struct EmResult {
    HmmParams params;
    /// Training log-likelihood of the initial parameters followed by that of
    /// each updated parameter set; the last entry belongs to `params`.
    std::vector<double> trace;
};

/// Baum-Welch over all training sequences. Stops after max_iter updates or
/// when the relative change of the log-likelihood falls below rel_tol.
inline EmResult em_fit(HmmParams params, const EncodedDataset& train, const EmConfig& config = {}) {
    if (train.empty()) throw invalid_argument("cannot train an HMM on empty data");
    params.validate();
    EmResult result;
    for (std::size_t iter = 0;; ++iter) {
        HmmCounts acc(params.n_states(), params.vocab_size());
        double ll = 0.0;
        for (std::size_t i = 0; i < train.sequences.size(); ++i) {
            const double l = detail::accumulate_expected(params, train.sequences[i], acc);
            if (l == kNegInf)
                throw Error("numeric", "training sequence " + std::to_string(i) + " has zero probability");
            ll += l;
        }
        result.trace.push_back(ll);
        const std::size_t k = result.trace.size();
        if (k >= 2 && std::abs(ll - result.trace[k - 2]) < config.rel_tol * std::abs(result.trace[k - 2])) break;
        if (iter == config.max_iter) break;
        params = detail::hmm_from_counts(std::move(acc));
    }
    result.params = std::move(params);
    return result;
}

struct GibbsConfig {
    std::size_t n_samples = 500;
    std::size_t polish_iters = 50;
    double rel_tol = 1e-5;
    std::uint64_t seed = 0;
};

struct HmmGibbsResult {
    HmmParams params;                   // after EM polish
    std::vector<double> sample_trace;   // training log-evidence of every sampled parameter set
    std::size_t best_sample = 0;        // index into sample_trace
    std::vector<double> polish_trace;   // EM trace started from the best sample
};

/// Samples a state path from P(z | x, params) by forward filtering and
/// backward sampling.
inline std::vector<std::size_t> sample_states(const HmmParams& p, std::span<const SymbolId> seq, Rng& rng) {
    detail::check_sequence(p, seq);
    Matrix alpha;
    std::vector<double> scale;
    if (detail::forward_pass(p, seq, alpha, scale) == kNegInf)
        throw Error("numeric", "cannot sample states for a zero-probability sequence");
    const std::size_t s = p.n_states(), len = seq.size();
    std::vector<std::size_t> z(len);
    z[len - 1] = rng.categorical(alpha.row(len - 1));
    std::vector<double> w(s);
    for (std::size_t n = len - 1; n-- > 0;) {
        for (std::size_t k = 0; k < s; ++k) w[k] = alpha(n, k) * p.transition(k, z[n + 1]);
        z[n] = rng.categorical(w);
    }
    return z;
}

/// Alternates blocked state sampling and Dirichlet-posterior parameter
/// sampling, keeps the sampled parameters with the highest training
/// evidence and polishes them with EM.
inline HmmGibbsResult gibbs_fit(HmmParams params, const EncodedDataset& train, const HmmHyper& hyper,
                                const GibbsConfig& config = {}) {
    if (train.empty()) throw invalid_argument("cannot train an HMM on empty data");
    params.validate();
    const std::size_t s = params.n_states(), v = params.vocab_size();
    if (hyper.initial.size() != s || hyper.transition.rows() != s || hyper.transition.cols() != s ||
        hyper.output.rows() != s || hyper.output.cols() != v)
        throw invalid_argument("HMM hyperparameters do not match the model shape");
    Rng rng(config.seed);
    HmmGibbsResult result;
    HmmParams best = params;
    double best_ll = kNegInf;
    std::vector<double> alpha(std::max(s, v));
    for (std::size_t it = 0; it < config.n_samples; ++it) {
        HmmCounts counts(s, v);
        for (const auto& seq : train.sequences) {
            const auto z = sample_states(params, seq, rng);
            counts.initial[z[0]] += 1.0;
            for (std::size_t n = 0; n < seq.size(); ++n) {
                counts.output(z[n], static_cast<std::size_t>(seq[n])) += 1.0;
                if (n + 1 < seq.size()) counts.transition(z[n], z[n + 1]) += 1.0;
            }
        }
        auto draw = [&](std::span<const double> prior, std::span<const double> c, std::span<double> out) {
            for (std::size_t i = 0; i < prior.size(); ++i) alpha[i] = prior[i] + c[i];
            rng.dirichlet(std::span<const double>(alpha.data(), prior.size()), out);
        };
        draw(hyper.initial, counts.initial, params.initial);
        for (std::size_t z = 0; z < s; ++z) {
            draw(hyper.transition.row(z), counts.transition.row(z), params.transition.row(z));
            draw(hyper.output.row(z), counts.output.row(z), params.output.row(z));
        }
        const double ll = log_evidence(params, train);
        result.sample_trace.push_back(ll);
        if (ll > best_ll || result.sample_trace.size() == 1) {
            best_ll = ll;
            best = params;
            result.best_sample = it;
        }
    }
    auto polished = em_fit(std::move(best), train, {config.polish_iters, config.rel_tol});
    result.params = std::move(polished.params);
    result.polish_trace = std::move(polished.trace);
    return result;
}

/// P(x_n = y | all other symbols) for every y; n is 0-based. Uses a forward
/// pass over x_{1:n-1} and a backward pass over x_{n+1:N}, neither of which
/// touches x_n. Returns the uniform vector when the context itself has zero
/// probability.
inline std::vector<double> predict_distribution(const HmmParams& p, std::span<const SymbolId> seq,
                                                std::size_t n) {
    detail::check_sequence(p, seq);
    if (n >= seq.size()) throw invalid_argument("prediction position out of range");
    const std::size_t s = p.n_states(), v = p.vocab_size();
    std::vector<double> ahead(p.initial), fwd(s), back(s, 1.0), tmp(s);
    std::vector<double> out(v, 0.0);
    auto fail = [&] {
        fill_uniform(out);
        return out;
    };
    // ahead(z) ∝ P(z_n = z, x_{1:n-1})
    if (n > 0) {
        for (std::size_t m = 0; m < n; ++m) {
            const auto x = static_cast<std::size_t>(seq[m]);
            for (std::size_t z = 0; z < s; ++z) fwd[z] = ahead[z] * p.output(z, x);
            if (!normalize(fwd)) return fail();
            for (std::size_t z = 0; z < s; ++z) {
                double a = 0.0;
                for (std::size_t w = 0; w < s; ++w) a += fwd[w] * p.transition(w, z);
                ahead[z] = a;
            }
        }
    }
    // back(z) ∝ P(x_{n+1:N} | z_n = z)
    for (std::size_t m = seq.size() - 1; m > n; --m) {
        const auto x = static_cast<std::size_t>(seq[m]);
        for (std::size_t z = 0; z < s; ++z) {
            double b = 0.0;
            for (std::size_t w = 0; w < s; ++w) b += p.transition(z, w) * p.output(w, x) * back[w];
            tmp[z] = b;
        }
        if (!normalize(tmp)) return fail();
        back.swap(tmp);
    }
    for (std::size_t z = 0; z < s; ++z) {
        const double weight = ahead[z] * back[z];
        if (weight == 0.0) continue;
        for (std::size_t y = 0; y < v; ++y) out[y] += weight * p.output(z, y);
    }
    if (!normalize(out)) return fail();
    return out;
}

/// HMM that reproduces a first-order Markov model: one state per symbol
/// with identity output.
inline HmmParams from_markov(const MarkovModel& m) {
    if (m.order() != 1) throw invalid_argument("only first-order Markov models embed into an HMM");
    const std::size_t v = m.vocab_size();
    HmmParams p(v, v);
    for (std::size_t z = 0; z < v; ++z) {
        p.initial[z] = m.initial(1)(0, z);
        for (std::size_t w = 0; w < v; ++w) p.transition(z, w) = m.transition()(z, w);
        p.output(z, z) = 1.0;
    }
    return p;
}

/// Fixed point of the latent transition matrix by power iteration from the
/// uniform vector (L1 residual < 1e-12, at most 10^6 iterations).
inline std::vector<double> stationary_distribution(const HmmParams& p, double tol = 1e-12,
                                                   std::size_t max_iter = 1'000'000) {
    const std::size_t s = p.n_states();
    std::vector<double> cur(s, 1.0 / static_cast<double>(s)), next(s);
    double residual = 0.0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        for (std::size_t z = 0; z < s; ++z) {
            double a = 0.0;
            for (std::size_t w = 0; w < s; ++w) a += cur[w] * p.transition(w, z);
            next[z] = a;
        }
        normalize(next);
        residual = 0.0;
        for (std::size_t z = 0; z < s; ++z) residual += std::abs(next[z] - cur[z]);
        cur.swap(next);
        if (residual < tol) return cur;
    }
    throw Error("numeric", "stationary distribution did not converge (residual " + format_double(residual) + ")");
}

struct InfoMeasures {
    double stationary_perplexity = 1.0;  // effective number of states in use
    double output_perplexity = 1.0;      // symbols per state
    double association_variety = 1.0;    // states per symbol
    double transition_perplexity = 1.0;  // reachable states per state
};

inline InfoMeasures info_measures(const HmmParams& p) {
    const auto stat = stationary_distribution(p);
    const std::size_t s = p.n_states(), v = p.vocab_size();
    InfoMeasures m;
    m.stationary_perplexity = perplexity_of(stat);
    double h_out = 0.0, h_trans = 0.0;
    for (std::size_t z = 0; z < s; ++z) {
        h_out += stat[z] * std::log(perplexity_of(p.output.row(z)));
        h_trans += stat[z] * std::log(perplexity_of(p.transition.row(z)));
    }
    m.output_perplexity = std::exp(h_out);
    m.transition_perplexity = std::exp(h_trans);
    double h_assoc = 0.0;
    std::vector<double> joint(s);
    for (std::size_t x = 0; x < v; ++x) {
        double marginal = 0.0;
        for (std::size_t z = 0; z < s; ++z) {
            joint[z] = stat[z] * p.output(z, x);
            marginal += joint[z];
        }
        if (!(marginal > 0.0)) continue;
        for (std::size_t z = 0; z < s; ++z) joint[z] /= marginal;
        h_assoc += marginal * std::log(perplexity_of(joint));
    }
    m.association_variety = std::exp(h_assoc);
    return m;
}

/// Ancestral sampling of states and symbols.
inline Sequence sample_sequence(const HmmParams& p, std::size_t length, Rng& rng) {
    if (length < 1) throw invalid_argument("sample length must be >= 1");
    Sequence out;
    out.reserve(length);
    std::size_t z = rng.categorical(p.initial);
    for (std::size_t n = 0; n < length; ++n) {
        if (n > 0) z = rng.categorical(p.transition.row(z));
        out.push_back(static_cast<SymbolId>(rng.categorical(p.output.row(z))));
    }
    return out;
}

}  // namespace chordgram

#endif  // CHORDGRAM_HMM_HPP
