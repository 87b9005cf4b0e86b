#ifndef CHORDGRAM_PCFG_HPP
#define CHORDGRAM_PCFG_HPP

// PCFGs with binary nonterminal productions, terminal emissions and a
// dedicated start symbol S outside the nonterminal set:
//
//   S -> zL zR  (start_binary)     S -> x  (start_terminal)
//   z -> zL zR  (binary)           z -> x  (terminal)
//
// Each nonterminal's binary and terminal rules share one normalization.
// Charts are kept in linear space; every span carries its own log scale so
// long sequences neither underflow nor overflow.

#include <cmath>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "chordgram/common.hpp"
#include "chordgram/corpus.hpp"
#include "chordgram/hmm.hpp"
#include "chordgram/model_io.hpp"

namespace chordgram {

struct PcfgParams {
    Matrix start_binary;                // theta_S, N x N (rows: left child, cols: right child)
    std::vector<double> start_terminal; // psi_S, size V
    Matrix binary;                      // theta_z, N x N^2, column = left * N + right
    Matrix terminal;                    // psi_z, N x V
    /// True only for grammars that may emit length-1 sequences directly from
    /// S. Training rejects such grammars; the start_terminal row stays zero
    /// otherwise.
    bool terminal_start = false;

    PcfgParams() = default;
    PcfgParams(std::size_t n_nonterminals, std::size_t vocab_size)
        : start_binary(n_nonterminals, n_nonterminals),
          start_terminal(vocab_size, 0.0),
          binary(n_nonterminals, n_nonterminals * n_nonterminals),
          terminal(n_nonterminals, vocab_size) {}

    std::size_t n_nonterminals() const noexcept { return start_binary.rows(); }
    std::size_t vocab_size() const noexcept { return terminal.cols(); }

    double rule(std::size_t z, std::size_t left, std::size_t right) const {
        return binary(z, left * n_nonterminals() + right);
    }
    double& rule(std::size_t z, std::size_t left, std::size_t right) {
        return binary(z, left * n_nonterminals() + right);
    }

    void validate(double tol = kRowSumTolerance) const {
        const std::size_t n = n_nonterminals(), v = vocab_size();
        if (n < 1 || v < 1 || start_binary.cols() != n || start_terminal.size() != v || binary.rows() != n ||
            binary.cols() != n * n || terminal.rows() != n)
            throw invalid_argument("PCFG parameter tables have inconsistent shapes");
        auto check_row = [&](std::span<const double> a, std::span<const double> b, const std::string& what) {
            double total = 0.0;
            for (double x : a) {
                if (!(x >= 0.0) || !std::isfinite(x)) throw invalid_argument(what + " has an invalid entry");
                total += x;
            }
            for (double x : b) {
                if (!(x >= 0.0) || !std::isfinite(x)) throw invalid_argument(what + " has an invalid entry");
                total += x;
            }
            if (std::abs(total - 1.0) > tol) throw invalid_argument(what + " does not sum to 1");
        };
        check_row(start_binary.data(), start_terminal, "start symbol row");
        for (std::size_t z = 0; z < n; ++z)
            check_row(binary.row(z), terminal.row(z), "nonterminal row " + std::to_string(z));
        if (!terminal_start)
            for (double x : start_terminal)
                if (x != 0.0) throw invalid_argument("start_terminal must be zero unless terminal_start is set");
    }

    void write(std::ostream& os, std::uint64_t vocab_hash) const {
        ModelWriter w(os);
        w.begin("pcfg", vocab_hash);
        w.field("vocab-size", vocab_size());
        w.field("nonterminals", n_nonterminals());
        w.field("terminal-start", std::string(terminal_start ? "1" : "0"));
        w.table("start-binary", start_binary);
        w.table("start-terminal", start_terminal);
        w.table("binary", binary);
        w.table("terminal", terminal);
        w.end();
    }

    static PcfgParams read_body(ModelReader& r) {
        const std::size_t v = r.size_field("vocab-size");
        const std::size_t n = r.size_field("nonterminals");
        if (n < 1 || v < 1) throw Error("parse", "PCFG needs nonterminals >= 1 and vocab-size >= 1");
        PcfgParams p;
        p.terminal_start = r.size_field("terminal-start") != 0;
        p.start_binary = r.table("start-binary", n, n);
        p.start_terminal = r.vector_table("start-terminal", v);
        p.binary = r.table("binary", n, n * n);
        p.terminal = r.table("terminal", n, v);
        r.end();
        p.validate(1e-6);
        return p;
    }

    friend bool operator==(const PcfgParams&, const PcfgParams&) = default;
};

/// Dirichlet hyperparameters. Each nonterminal's binary and terminal
/// parameters are drawn jointly from Dir(binary row ++ terminal row).
struct PcfgHyper {
    Matrix start_binary;
    std::vector<double> start_terminal;
    Matrix binary;
    Matrix terminal;

    static PcfgHyper symmetric(std::size_t n, std::size_t v, double alpha = 0.1) {
        if (!(alpha > 0.0)) throw invalid_argument("Dirichlet parameters must be > 0");
        return {Matrix(n, n, alpha), std::vector<double>(v, alpha), Matrix(n, n * n, alpha), Matrix(n, v, alpha)};
    }
};

/// Random grammar with start_terminal = 0: the start row is drawn from
/// Dirichlet(1) over the N^2 binary cells, each nonterminal row from
/// Dirichlet(1) over N^2 + V cells.
inline PcfgParams init_random_pcfg(std::size_t n, std::size_t v, std::uint64_t seed) {
    if (n < 1 || v < 1) throw invalid_argument("PCFG sizes must be >= 1");
    Rng rng(seed);
    PcfgParams p(n, v);
    rng.dirichlet(std::vector<double>(n * n, 1.0), p.start_binary.data());
    std::vector<double> ones(n * n + v, 1.0), row(n * n + v);
    for (std::size_t z = 0; z < n; ++z) {
        rng.dirichlet(ones, row);
        std::copy(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n * n), p.binary.row(z).begin());
        std::copy(row.begin() + static_cast<std::ptrdiff_t>(n * n), row.end(), p.terminal.row(z).begin());
    }
    return p;
}

/// Mean yield length of the HMM-initialized grammar with eta = 0 is
/// 2k / (2k - 1); this inverts it.
inline double kappa_for_mean_length(double mean_length) {
    if (!(mean_length >= 2.0))
        throw invalid_argument("mean length " + format_double(mean_length) + " < 2 admits no kappa in (1/2, 1]");
    return mean_length / (2.0 * (mean_length - 1.0));
}

inline double expected_length(double kappa) {
    if (!(kappa > 0.5)) throw invalid_argument("expected length is finite only for kappa > 1/2");
    return 2.0 * kappa / (2.0 * kappa - 1.0);
}

/// Approximate linear-chain embedding of an HMM used as a PCFG starting
/// point: S -> zL zR with pi_ini(zL) pi(zL, zR); z -> z zR with
/// pi(z, zR)(1 - kappa), plus eta on every binary cell; z -> x with
/// phi(z, x) kappa; each nonterminal row renormalized.
inline PcfgParams init_from_hmm(const HmmParams& hmm, double kappa, double eta) {
    if (!(kappa > 0.5 && kappa <= 1.0))
        throw invalid_argument("kappa must lie in (1/2, 1]; smaller values give a non-terminating grammar");
    if (!(eta >= 0.0)) throw invalid_argument("eta must be >= 0");
    hmm.validate();
    const std::size_t n = hmm.n_states(), v = hmm.vocab_size();
    PcfgParams p(n, v);
    for (std::size_t l = 0; l < n; ++l)
        for (std::size_t r = 0; r < n; ++r) p.start_binary(l, r) = hmm.initial[l] * hmm.transition(l, r);
    for (std::size_t z = 0; z < n; ++z) {
        double total = 0.0;
        for (std::size_t l = 0; l < n; ++l)
            for (std::size_t r = 0; r < n; ++r) {
                const double val = (l == z ? hmm.transition(z, r) * (1.0 - kappa) : 0.0) + eta;
                p.rule(z, l, r) = val;
                total += val;
            }
        for (std::size_t x = 0; x < v; ++x) {
            p.terminal(z, x) = hmm.output(z, x) * kappa;
            total += p.terminal(z, x);
        }
        if (eta > 0.0) {
            for (double& val : p.binary.row(z)) val /= total;
            for (double& val : p.terminal.row(z)) val /= total;
        }
    }
    return p;
}

/// Rescales an HMM's transitions to pi'(z, w) = pi(z, w)(1 - end(z)), the
/// form strict_embed_hmm expects.
inline HmmParams with_end_probability(HmmParams hmm, std::span<const double> end) {
    if (end.size() != hmm.n_states()) throw invalid_argument("one end probability per state is required");
    for (std::size_t z = 0; z < hmm.n_states(); ++z)
        for (double& p : hmm.transition.row(z)) p *= 1.0 - end[z];
    return hmm;
}

/// Exact embedding of an HMM with an explicit end state. `hmm.transition`
/// holds the sub-stochastic pi' (see with_end_probability) and
/// sum_w pi'(z, w) + end(z) must be 1. Nonterminals 0..N-1 are the states z,
/// N..2N-1 their emitting twins z~.
inline PcfgParams strict_embed_hmm(const HmmParams& hmm, std::span<const double> end) {
    const std::size_t s = hmm.n_states(), v = hmm.vocab_size();
    if (end.size() != s) throw invalid_argument("one end probability per state is required");
    if (!is_distribution(hmm.initial)) throw invalid_argument("HMM initial probabilities do not sum to 1");
    for (std::size_t z = 0; z < s; ++z) {
        double total = end[z];
        for (std::size_t w = 0; w < s; ++w) total += hmm.transition(z, w);
        if (!(end[z] >= 0.0) || std::abs(total - 1.0) > kRowSumTolerance)
            throw invalid_argument("state " + std::to_string(z) + ": transitions plus end probability must sum to 1");
        if (!is_distribution(hmm.output.row(z))) throw invalid_argument("HMM output row is not a distribution");
    }
    PcfgParams p(2 * s, v);
    p.terminal_start = true;
    for (std::size_t z = 0; z < s; ++z) {
        for (std::size_t w = 0; w < s; ++w) {
            p.start_binary(s + z, w) = hmm.initial[z] * hmm.transition(z, w);
            p.rule(z, s + z, w) = hmm.transition(z, w);
        }
        for (std::size_t x = 0; x < v; ++x) {
            p.start_terminal[x] += hmm.initial[z] * end[z] * hmm.output(z, x);
            p.terminal(z, x) = end[z] * hmm.output(z, x);
            p.terminal(s + z, x) = hmm.output(z, x);
        }
    }
    return p;
}

/// Inside/outside charts for one sequence. Span (i, j) is 0-based and
/// inclusive. True values are the stored scaled values times exp(log scale):
///   inside(i, j, z)  = P(z =>* x_i..x_j)
///   outside(i, j, z) = P(S =>* x_0..x_{i-1} z x_{j+1}..x_{N-1})
///   pair(i, j, l, r) = sum_k inside(i, k, l) inside(k + 1, j, r)
class Charts {
public:
    Charts(std::size_t length, std::size_t n)
        : len_(length),
          n_(n),
          inside_(length * length * n, 0.0),
          inside_scale_(length * length, kNegInf),
          pair_(length * length * n * n, 0.0),
          pair_scale_(length * length, kNegInf) {}

    std::size_t length() const noexcept { return len_; }
    std::size_t n_nonterminals() const noexcept { return n_; }
    double log_evidence() const noexcept { return log_evidence_; }
    bool possible() const noexcept { return log_evidence_ != kNegInf; }
    bool has_outside() const noexcept { return !outside_.empty(); }

    std::span<double> inside(std::size_t i, std::size_t j) { return {&inside_[cell(i, j) * n_], n_}; }
    std::span<const double> inside(std::size_t i, std::size_t j) const { return {&inside_[cell(i, j) * n_], n_}; }
    double& inside_scale(std::size_t i, std::size_t j) { return inside_scale_[cell(i, j)]; }
    double inside_scale(std::size_t i, std::size_t j) const { return inside_scale_[cell(i, j)]; }

    std::span<double> pair(std::size_t i, std::size_t j) { return {&pair_[cell(i, j) * n_ * n_], n_ * n_}; }
    std::span<const double> pair(std::size_t i, std::size_t j) const {
        return {&pair_[cell(i, j) * n_ * n_], n_ * n_};
    }
    double& pair_scale(std::size_t i, std::size_t j) { return pair_scale_[cell(i, j)]; }
    double pair_scale(std::size_t i, std::size_t j) const { return pair_scale_[cell(i, j)]; }

    std::span<double> outside(std::size_t i, std::size_t j) { return {&outside_[cell(i, j) * n_], n_}; }
    std::span<const double> outside(std::size_t i, std::size_t j) const { return {&outside_[cell(i, j) * n_], n_}; }
    double& outside_scale(std::size_t i, std::size_t j) { return outside_scale_[cell(i, j)]; }
    double outside_scale(std::size_t i, std::size_t j) const { return outside_scale_[cell(i, j)]; }

    double log_inside(std::size_t i, std::size_t j, std::size_t z) const {
        return std::log(inside(i, j)[z]) + inside_scale(i, j);
    }
    double log_outside(std::size_t i, std::size_t j, std::size_t z) const {
        return std::log(outside(i, j)[z]) + outside_scale(i, j);
    }

    void set_log_evidence(double v) noexcept { log_evidence_ = v; }

    /// Allocates zeroed outside cells (log scale -inf).
    void reset_outside() {
        outside_.assign(len_ * len_ * n_, 0.0);
        outside_scale_.assign(len_ * len_, kNegInf);
    }

private:
    std::size_t cell(std::size_t i, std::size_t j) const { return i * len_ + j; }

    std::size_t len_, n_;
    std::vector<double> inside_, inside_scale_, pair_, pair_scale_, outside_, outside_scale_;
    double log_evidence_ = kNegInf;
};

namespace detail {

/// Divides `values` by their maximum; returns ln(max) or -inf if all zero.
inline double rescale(std::span<double> values) {
    double hi = 0.0;
    for (double v : values) hi = std::max(hi, v);
    if (!(hi > 0.0)) {
        std::fill(values.begin(), values.end(), 0.0);
        return kNegInf;
    }
    for (double& v : values) v /= hi;
    return std::log(hi);
}

inline void check_sequence(const PcfgParams& p, std::span<const SymbolId> seq) {
    if (seq.empty()) throw invalid_argument("sequence must be non-empty");
    for (SymbolId id : seq)
        if (id < 0 || static_cast<std::size_t>(id) >= p.vocab_size())
            throw invalid_argument("symbol id " + std::to_string(id) + " outside PCFG vocabulary");
}

}  // namespace detail

/// Inside pass, O(N^3 |D|^2 + N^2 |D|^3).
inline Charts inside(const PcfgParams& p, std::span<const SymbolId> seq) {
    detail::check_sequence(p, seq);
    const std::size_t len = seq.size(), n = p.n_nonterminals(), nn = n * n;
    Charts c(len, n);
    for (std::size_t i = 0; i < len; ++i) {
        auto cell = c.inside(i, i);
        for (std::size_t z = 0; z < n; ++z) cell[z] = p.terminal(z, static_cast<std::size_t>(seq[i]));
        c.inside_scale(i, i) = detail::rescale(cell);
    }
    std::vector<double> weight(len);
    for (std::size_t width = 2; width <= len; ++width) {
        for (std::size_t i = 0; i + width <= len; ++i) {
            const std::size_t j = i + width - 1;
            double top = kNegInf;
            for (std::size_t k = i; k < j; ++k) {
                weight[k] = c.inside_scale(i, k) + c.inside_scale(k + 1, j);
                top = std::max(top, weight[k]);
            }
            if (top == kNegInf) continue;  // span impossible; cells stay zero
            auto m = c.pair(i, j);
            for (std::size_t k = i; k < j; ++k) {
                if (weight[k] == kNegInf) continue;
                const double f = std::exp(weight[k] - top);
                const auto left = c.inside(i, k), right = c.inside(k + 1, j);
                for (std::size_t l = 0; l < n; ++l) {
                    const double fl = f * left[l];
                    if (fl == 0.0) continue;
                    for (std::size_t r = 0; r < n; ++r) m[l * n + r] += fl * right[r];
                }
            }
            const double pair_scale = detail::rescale(m);
            if (pair_scale == kNegInf) continue;
            c.pair_scale(i, j) = top + pair_scale;
            auto cell = c.inside(i, j);
            for (std::size_t z = 0; z < n; ++z) {
                const auto rules = p.binary.row(z);
                double acc = 0.0;
                for (std::size_t lr = 0; lr < nn; ++lr) acc += rules[lr] * m[lr];
                cell[z] = acc;
            }
            c.inside_scale(i, j) = c.pair_scale(i, j) + detail::rescale(cell);
        }
    }
    if (len == 1) {
        const double e = p.start_terminal[static_cast<std::size_t>(seq[0])];
        c.set_log_evidence(e > 0.0 ? std::log(e) : kNegInf);
    } else if (c.pair_scale(0, len - 1) != kNegInf) {
        const auto m = c.pair(0, len - 1);
        double acc = 0.0;
        for (std::size_t lr = 0; lr < nn; ++lr) acc += p.start_binary.data()[lr] * m[lr];
        c.set_log_evidence(acc > 0.0 ? std::log(acc) + c.pair_scale(0, len - 1) : kNegInf);
    }
    return c;
}

/// Outside pass over charts produced by inside() for the same sequence.
/// The whole-sentence span has no nonterminal outside weight (S is not in
/// the nonterminal set); S acts as its parent with rule weights start_binary.
inline void outside(const PcfgParams& p, std::span<const SymbolId> seq, Charts& c) {
    const std::size_t len = seq.size(), n = p.n_nonterminals(), nn = n * n;
    if (c.length() != len || c.n_nonterminals() != n) throw invalid_argument("charts do not match the sequence");
    c.reset_outside();
    // parent[i, j](l, r): sum_z outside(i, j, z) binary(z, l, r), scaled.
    std::vector<double> parent(len * len * nn, 0.0), parent_scale(len * len, kNegInf);
    auto parent_of = [&](std::size_t i, std::size_t j) { return std::span<double>(&parent[(i * len + j) * nn], nn); };
    if (len >= 2) {
        auto top = parent_of(0, len - 1);
        std::copy(p.start_binary.data().begin(), p.start_binary.data().end(), top.begin());
        parent_scale[len - 1] = detail::rescale(top);
    }
    std::vector<double> acc(n);
    for (std::size_t width = len; width >= 1; --width) {
        for (std::size_t i = 0; i + width <= len; ++i) {
            const std::size_t j = i + width - 1;
            if (width == len) continue;
            // Contributions: (i, j) as left child of (i, q), q > j, and as
            // right child of (q, j), q < i.
            double hi = kNegInf;
            for (std::size_t q = j + 1; q < len; ++q)
                hi = std::max(hi, parent_scale[i * len + q] + c.inside_scale(j + 1, q));
            for (std::size_t q = 0; q < i; ++q)
                hi = std::max(hi, parent_scale[q * len + j] + c.inside_scale(q, i - 1));
            if (hi == kNegInf) continue;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t q = j + 1; q < len; ++q) {
                const double e = parent_scale[i * len + q] + c.inside_scale(j + 1, q);
                if (e == kNegInf) continue;
                const double f = std::exp(e - hi);
                const auto g = parent_of(i, q);
                const auto sib = c.inside(j + 1, q);
                for (std::size_t l = 0; l < n; ++l) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < n; ++r) s += g[l * n + r] * sib[r];
                    acc[l] += f * s;
                }
            }
            for (std::size_t q = 0; q < i; ++q) {
                const double e = parent_scale[q * len + j] + c.inside_scale(q, i - 1);
                if (e == kNegInf) continue;
                const double f = std::exp(e - hi);
                const auto g = parent_of(q, j);
                const auto sib = c.inside(q, i - 1);
                for (std::size_t l = 0; l < n; ++l) {
                    if (sib[l] == 0.0) continue;
                    const double fl = f * sib[l];
                    for (std::size_t r = 0; r < n; ++r) acc[r] += fl * g[l * n + r];
                }
            }
            auto out = c.outside(i, j);
            std::copy(acc.begin(), acc.end(), out.begin());
            const double s = detail::rescale(out);
            if (s == kNegInf) continue;
            c.outside_scale(i, j) = hi + s;
            if (width < 2) continue;
            auto g = parent_of(i, j);
            for (std::size_t z = 0; z < n; ++z) {
                if (out[z] == 0.0) continue;
                const auto rules = p.binary.row(z);
                for (std::size_t lr = 0; lr < nn; ++lr) g[lr] += out[z] * rules[lr];
            }
            const double gs = detail::rescale(g);
            parent_scale[i * len + j] = gs == kNegInf ? kNegInf : c.outside_scale(i, j) + gs;
        }
        if (width == 1) break;
    }
}

inline Charts inside_outside(const PcfgParams& p, std::span<const SymbolId> seq) {
    Charts c = inside(p, seq);
    outside(p, seq, c);
    return c;
}

inline double log_evidence(const PcfgParams& p, std::span<const SymbolId> seq) { return inside(p, seq).log_evidence(); }

/// ln P(N): probability that the grammar yields some string of length N,
/// from the inside recursion with every terminal cell summed over symbols.
inline double log_length_probability(const PcfgParams& p, std::size_t length) {
    if (length < 1) throw invalid_argument("length must be >= 1");
    if (length == 1) {
        const double s = sum(p.start_terminal);
        return s > 0.0 ? std::log(s) : kNegInf;
    }
    const std::size_t n = p.n_nonterminals(), nn = n * n;
    // b[l]: scaled modified inside vector for spans of length l.
    std::vector<std::vector<double>> b(length, std::vector<double>(n, 0.0));
    std::vector<double> scale(length, kNegInf), m(nn);
    auto pair_for = [&](std::size_t l) {
        std::fill(m.begin(), m.end(), 0.0);
        double hi = kNegInf;
        for (std::size_t k = 1; k < l; ++k) hi = std::max(hi, scale[k] + scale[l - k]);
        if (hi == kNegInf) return kNegInf;
        for (std::size_t k = 1; k < l; ++k) {
            const double e = scale[k] + scale[l - k];
            if (e == kNegInf) continue;
            const double f = std::exp(e - hi);
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t r = 0; r < n; ++r) m[a * n + r] += f * b[k][a] * b[l - k][r];
        }
        return hi + detail::rescale(m);
    };
    for (std::size_t z = 0; z < n; ++z) b[1][z] = sum(p.terminal.row(z));
    scale[1] = detail::rescale(b[1]);
    for (std::size_t l = 2; l < length; ++l) {
        const double ps = pair_for(l);
        if (ps == kNegInf) continue;
        for (std::size_t z = 0; z < n; ++z) {
            const auto rules = p.binary.row(z);
            double a = 0.0;
            for (std::size_t lr = 0; lr < nn; ++lr) a += rules[lr] * m[lr];
            b[l][z] = a;
        }
        const double s = detail::rescale(b[l]);
        scale[l] = s == kNegInf ? kNegInf : ps + s;
    }
    const double ps = pair_for(length);
    if (ps == kNegInf) return kNegInf;
    double a = 0.0;
    for (std::size_t lr = 0; lr < nn; ++lr) a += p.start_binary.data()[lr] * m[lr];
    return a > 0.0 ? std::log(a) + ps : kNegInf;
}

inline double length_probability(const PcfgParams& p, std::size_t length) {
    return std::exp(log_length_probability(p, length));
}

/// ln P(x) - ln P(N(x)): evidence normalized over strings of the same length.
inline double normalized_log_evidence(const PcfgParams& p, std::span<const SymbolId> seq) {
    detail::check_sequence(p, seq);
    const double lp = log_length_probability(p, seq.size());
    if (lp == kNegInf)
        throw Error("numeric", "grammar assigns zero probability to length " + std::to_string(seq.size()));
    return log_evidence(p, seq) - lp;
}

/// P(x_n = y | other symbols) ∝ sum_z terminal(z, y) outside(n, n, z); n is
/// 0-based and the sequence needs at least two symbols.
inline std::vector<double> predict_distribution(const PcfgParams& p, std::span<const SymbolId> seq, std::size_t n) {
    detail::check_sequence(p, seq);
    if (seq.size() < 2) throw invalid_argument("PCFG prediction needs sequences of length >= 2");
    if (n >= seq.size()) throw invalid_argument("prediction position out of range");
    const Charts c = inside_outside(p, seq);
    const auto out = c.outside(n, n);
    std::vector<double> dist(p.vocab_size(), 0.0);
    for (std::size_t z = 0; z < p.n_nonterminals(); ++z) {
        if (out[z] == 0.0) continue;
        for (std::size_t y = 0; y < dist.size(); ++y) dist[y] += out[z] * p.terminal(z, y);
    }
    if (!normalize(dist)) throw Error("numeric", "grammar cannot complete the context at position " + std::to_string(n));
    return dist;
}

/// Derivation tree. Node 0 is the root (label kStart). A node either has two
/// children or emits one terminal symbol.
struct DerivationTree {
    static constexpr int kStart = -1;

    struct Node {
        int label = kStart;  // kStart or nonterminal index
        int left = -1, right = -1;
        SymbolId symbol = -1;  // set on emitting nodes
    };

    std::vector<Node> nodes;

    Sequence yield() const {
        Sequence out;
        if (nodes.empty()) return out;
        std::vector<int> stack{0};
        while (!stack.empty()) {
            const Node& node = nodes[static_cast<std::size_t>(stack.back())];
            stack.pop_back();
            if (node.symbol >= 0) {
                out.push_back(node.symbol);
            } else {
                stack.push_back(node.right);
                stack.push_back(node.left);
            }
        }
        return out;
    }

    /// Bracketed form "(S (z1 C) (z2 (z2 F) (z3 G)))"; nonterminals are named
    /// z1..zN and symbols via `name`.
    std::string bracketed(const std::function<std::string(SymbolId)>& name) const {
        std::string out;
        std::function<void(int)> visit = [&](int idx) {
            const Node& node = nodes[static_cast<std::size_t>(idx)];
            out += '(';
            out += node.label == kStart ? std::string("S") : "z" + std::to_string(node.label + 1);
            out += ' ';
            if (node.symbol >= 0) {
                out += name(node.symbol);
            } else {
                visit(node.left);
                out += ' ';
                visit(node.right);
            }
            out += ')';
        };
        if (!nodes.empty()) visit(0);
        return out;
    }
};

/// Rule-usage counts (expected or from sampled trees).
struct PcfgCounts {
    Matrix start_binary;
    std::vector<double> start_terminal;
    Matrix binary;
    Matrix terminal;

    PcfgCounts(std::size_t n, std::size_t v)
        : start_binary(n, n), start_terminal(v, 0.0), binary(n, n * n), terminal(n, v) {}

    void add(const DerivationTree& tree) {
        const std::size_t n = start_binary.rows();
        for (const auto& node : tree.nodes) {
            if (node.symbol >= 0) {
                const auto x = static_cast<std::size_t>(node.symbol);
                if (node.label == DerivationTree::kStart)
                    start_terminal[x] += 1.0;
                else
                    terminal(static_cast<std::size_t>(node.label), x) += 1.0;
                continue;
            }
            const auto l = static_cast<std::size_t>(tree.nodes[static_cast<std::size_t>(node.left)].label);
            const auto r = static_cast<std::size_t>(tree.nodes[static_cast<std::size_t>(node.right)].label);
            if (node.label == DerivationTree::kStart)
                start_binary(l, r) += 1.0;
            else
                binary(static_cast<std::size_t>(node.label), l * n + r) += 1.0;
        }
    }
};

/// Samples a derivation of `seq` from P(T | x, params) top-down over the
/// inside chart.
inline DerivationTree sample_posterior_tree(const PcfgParams& p, std::span<const SymbolId> seq, const Charts& c,
                                            Rng& rng) {
    if (!c.possible()) throw Error("numeric", "cannot sample a tree for a zero-probability sequence");
    const std::size_t len = seq.size(), n = p.n_nonterminals(), nn = n * n;
    DerivationTree tree;
    tree.nodes.push_back({});
    if (len == 1) {
        tree.nodes[0].symbol = seq[0];
        return tree;
    }
    struct Pending {
        int node;
        std::size_t i, j;
    };
    std::vector<Pending> stack{{0, 0, len - 1}};
    std::vector<double> weights, exps;
    while (!stack.empty()) {
        const Pending cur = stack.back();
        stack.pop_back();
        const int label = tree.nodes[static_cast<std::size_t>(cur.node)].label;
        if (cur.i == cur.j) {
            tree.nodes[static_cast<std::size_t>(cur.node)].symbol = seq[cur.i];
            continue;
        }
        const std::span<const double> rules =
            label == DerivationTree::kStart ? std::span<const double>(p.start_binary.data())
                                            : p.binary.row(static_cast<std::size_t>(label));
        const std::size_t splits = cur.j - cur.i;
        exps.assign(splits, kNegInf);
        double hi = kNegInf;
        for (std::size_t s = 0; s < splits; ++s) {
            const std::size_t k = cur.i + s;
            exps[s] = c.inside_scale(cur.i, k) + c.inside_scale(k + 1, cur.j);
            hi = std::max(hi, exps[s]);
        }
        weights.assign(splits * nn, 0.0);
        for (std::size_t s = 0; s < splits; ++s) {
            if (exps[s] == kNegInf) continue;
            const std::size_t k = cur.i + s;
            const double f = std::exp(exps[s] - hi);
            const auto left = c.inside(cur.i, k), right = c.inside(k + 1, cur.j);
            for (std::size_t l = 0; l < n; ++l)
                for (std::size_t r = 0; r < n; ++r)
                    weights[s * nn + l * n + r] = f * rules[l * n + r] * left[l] * right[r];
        }
        const std::size_t pick = rng.categorical(weights);
        const std::size_t k = cur.i + pick / nn;
        const auto l = static_cast<int>((pick % nn) / n), r = static_cast<int>(pick % n);
        const int li = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({l, -1, -1, -1});
        tree.nodes.push_back({r, -1, -1, -1});
        tree.nodes[static_cast<std::size_t>(cur.node)].left = li;
        tree.nodes[static_cast<std::size_t>(cur.node)].right = li + 1;
        stack.push_back({li + 1, k + 1, cur.j});
        stack.push_back({li, cur.i, k});
    }
    return tree;
}

/// Ancestral sampling from S. Throws after `max_expansions` rule
/// applications (non-terminating parameters).
inline DerivationTree sample_tree(const PcfgParams& p, Rng& rng, std::size_t max_expansions = 10'000) {
    const std::size_t n = p.n_nonterminals(), nn = n * n, v = p.vocab_size();
    DerivationTree tree;
    tree.nodes.push_back({});
    std::vector<int> stack{0};
    std::vector<double> row(nn + v);
    std::size_t expansions = 0;
    while (!stack.empty()) {
        if (++expansions > max_expansions)
            throw Error("numeric", "tree sampling exceeded " + std::to_string(max_expansions) + " expansions");
        const int idx = stack.back();
        stack.pop_back();
        const int label = tree.nodes[static_cast<std::size_t>(idx)].label;
        const auto bin = label == DerivationTree::kStart ? std::span<const double>(p.start_binary.data())
                                                         : p.binary.row(static_cast<std::size_t>(label));
        const auto term = label == DerivationTree::kStart ? std::span<const double>(p.start_terminal)
                                                          : p.terminal.row(static_cast<std::size_t>(label));
        std::copy(bin.begin(), bin.end(), row.begin());
        std::copy(term.begin(), term.end(), row.begin() + static_cast<std::ptrdiff_t>(nn));
        const std::size_t pick = rng.categorical(row);
        if (pick >= nn) {
            tree.nodes[static_cast<std::size_t>(idx)].symbol = static_cast<SymbolId>(pick - nn);
            continue;
        }
        const int li = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({static_cast<int>(pick / n), -1, -1, -1});
        tree.nodes.push_back({static_cast<int>(pick % n), -1, -1, -1});
        tree.nodes[static_cast<std::size_t>(idx)].left = li;
        tree.nodes[static_cast<std::size_t>(idx)].right = li + 1;
        stack.push_back(li + 1);
        stack.push_back(li);
    }
    return tree;
}

namespace detail {

/// Adds posterior expected rule counts for one sequence; returns its log
/// evidence.
inline double accumulate_expected(const PcfgParams& p, std::span<const SymbolId> seq, PcfgCounts& acc) {
    Charts c = inside(p, seq);
    if (!c.possible()) return kNegInf;
    const std::size_t len = seq.size(), n = p.n_nonterminals(), nn = n * n;
    const double log_z = c.log_evidence();
    if (len == 1) {
        acc.start_terminal[static_cast<std::size_t>(seq[0])] += 1.0;
        return log_z;
    }
    outside(p, seq, c);
    for (std::size_t i = 0; i < len; ++i) {
        const double e = c.outside_scale(i, i) + c.inside_scale(i, i) - log_z;
        if (e == kNegInf) continue;
        const double f = std::exp(e);
        const auto out = c.outside(i, i), in = c.inside(i, i);
        for (std::size_t z = 0; z < n; ++z) acc.terminal(z, static_cast<std::size_t>(seq[i])) += f * out[z] * in[z];
    }
    for (std::size_t width = 2; width < len; ++width)
        for (std::size_t i = 0; i + width <= len; ++i) {
            const std::size_t j = i + width - 1;
            const double e = c.outside_scale(i, j) + c.pair_scale(i, j) - log_z;
            if (e == kNegInf) continue;
            const double f = std::exp(e);
            const auto out = c.outside(i, j), m = c.pair(i, j);
            for (std::size_t z = 0; z < n; ++z) {
                if (out[z] == 0.0) continue;
                const double fz = f * out[z];
                const auto rules = p.binary.row(z);
                auto dst = acc.binary.row(z);
                for (std::size_t lr = 0; lr < nn; ++lr) dst[lr] += fz * rules[lr] * m[lr];
            }
        }
    const double f = std::exp(c.pair_scale(0, len - 1) - log_z);
    const auto m = c.pair(0, len - 1);
    for (std::size_t lr = 0; lr < nn; ++lr) acc.start_binary.data()[lr] += f * p.start_binary.data()[lr] * m[lr];
    return log_z;
}

/// Maximum-likelihood grammar from rule counts (start_terminal stays zero);
/// rows without counts become uniform over their cells.
inline PcfgParams pcfg_from_counts(const PcfgCounts& counts) {
    const std::size_t n = counts.start_binary.rows(), v = counts.terminal.cols();
    PcfgParams p(n, v);
    p.start_binary = counts.start_binary;
    if (!normalize(p.start_binary.data())) fill_uniform(p.start_binary.data());
    for (std::size_t z = 0; z < n; ++z) {
        double total = sum(counts.binary.row(z)) + sum(counts.terminal.row(z));
        if (total > 0.0) {
            for (std::size_t k = 0; k < n * n; ++k) p.binary(z, k) = counts.binary(z, k) / total;
            for (std::size_t x = 0; x < v; ++x) p.terminal(z, x) = counts.terminal(z, x) / total;
        } else {
            const double u = 1.0 / static_cast<double>(n * n + v);
            for (double& val : p.binary.row(z)) val = u;
            for (double& val : p.terminal.row(z)) val = u;
        }
    }
    return p;
}

inline void check_trainable(const PcfgParams& p, const EncodedDataset& train) {
    if (train.empty()) throw invalid_argument("cannot train a PCFG on empty data");
    if (p.terminal_start) throw invalid_argument("training requires a grammar with start_terminal = 0");
    p.validate();
    for (std::size_t i = 0; i < train.sequences.size(); ++i)
        if (train.sequences[i].size() < 2)
            throw invalid_argument("training sequence " + std::to_string(i) + " is shorter than 2 symbols");
}

}  // namespace detail

struct PcfgEmConfig {
    std::size_t max_iter = 200;
    double rel_tol = 1e-5;
};

struct PcfgEmResult {
    PcfgParams params;
    std::vector<double> trace;  // as EmResult::trace
};

/// Inside-outside EM.
inline PcfgEmResult em_fit(PcfgParams params, const EncodedDataset& train, const PcfgEmConfig& config = {}) {
    detail::check_trainable(params, train);
    PcfgEmResult result;
    for (std::size_t iter = 0;; ++iter) {
        PcfgCounts acc(params.n_nonterminals(), params.vocab_size());
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
        params = detail::pcfg_from_counts(acc);
    }
    result.params = std::move(params);
    return result;
}

struct PcfgGibbsConfig {
    std::size_t n_samples = 200;
    std::size_t polish_iters = 50;
    double rel_tol = 1e-5;
    std::uint64_t seed = 0;
};

struct PcfgGibbsResult {
    PcfgParams params;
    std::vector<double> sample_trace;
    std::size_t best_sample = 0;
    std::vector<double> polish_trace;
};

inline double log_evidence(const PcfgParams& p, const EncodedDataset& data) {
    double total = 0.0;
    for (const auto& seq : data.sequences) total += log_evidence(p, seq);
    return total;
}

/// Alternates exact per-sequence tree sampling and Dirichlet-posterior
/// parameter sampling; keeps the sampled grammar with the highest training
/// evidence and polishes it with EM.
inline PcfgGibbsResult gibbs_fit(PcfgParams params, const EncodedDataset& train, const PcfgHyper& hyper,
                                 const PcfgGibbsConfig& config = {}) {
    detail::check_trainable(params, train);
    const std::size_t n = params.n_nonterminals(), nn = n * n, v = params.vocab_size();
    if (hyper.start_binary.rows() != n || hyper.start_binary.cols() != n || hyper.binary.rows() != n ||
        hyper.binary.cols() != nn || hyper.terminal.rows() != n || hyper.terminal.cols() != v)
        throw invalid_argument("PCFG hyperparameters do not match the grammar shape");
    Rng rng(config.seed);
    PcfgGibbsResult result;
    PcfgParams best = params;
    double best_ll = kNegInf;
    std::vector<double> alpha(nn + v), row(nn + v);
    for (std::size_t it = 0; it < config.n_samples; ++it) {
        PcfgCounts counts(n, v);
        for (std::size_t i = 0; i < train.sequences.size(); ++i) {
            const auto& seq = train.sequences[i];
            const Charts c = inside(params, seq);
            if (!c.possible())
                throw Error("numeric", "training sequence " + std::to_string(i) + " has zero probability");
            counts.add(sample_posterior_tree(params, seq, c, rng));
        }
        for (std::size_t k = 0; k < nn; ++k) alpha[k] = hyper.start_binary.data()[k] + counts.start_binary.data()[k];
        rng.dirichlet(std::span<const double>(alpha.data(), nn), params.start_binary.data());
        for (std::size_t z = 0; z < n; ++z) {
            for (std::size_t k = 0; k < nn; ++k) alpha[k] = hyper.binary(z, k) + counts.binary(z, k);
            for (std::size_t x = 0; x < v; ++x) alpha[nn + x] = hyper.terminal(z, x) + counts.terminal(z, x);
            rng.dirichlet(alpha, row);
            std::copy(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(nn), params.binary.row(z).begin());
            std::copy(row.begin() + static_cast<std::ptrdiff_t>(nn), row.end(), params.terminal.row(z).begin());
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

}  // namespace chordgram

#endif  // CHORDGRAM_PCFG_HPP
