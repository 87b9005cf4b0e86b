#ifndef CHORDGRAM_TESTS_ORACLES_HPP
#define CHORDGRAM_TESTS_ORACLES_HPP

// Brute-force reference computations used only by the tests. Nothing here
// calls the dynamic programs it is compared against.

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "chordgram/hmm.hpp"
#include "chordgram/pcfg.hpp"

namespace oracle {

using chordgram::HmmParams;
using chordgram::PcfgParams;
using chordgram::Sequence;

/// Calls f(path) for every state path of the given length.
inline void for_each_path(std::size_t n_states, std::size_t length, const std::function<void(const std::vector<std::size_t>&)>& f) {
    std::vector<std::size_t> path(length, 0);
    while (true) {
        f(path);
        std::size_t k = 0;
        while (k < length && ++path[k] == n_states) path[k++] = 0;
        if (k == length) return;
    }
}

/// P(x) = sum over all state paths of the complete-data probability.
inline double hmm_evidence(const HmmParams& p, const Sequence& x) {
    double total = 0.0;
    for_each_path(p.n_states(), x.size(), [&](const std::vector<std::size_t>& z) {
        double prob = p.initial[z[0]] * p.output(z[0], static_cast<std::size_t>(x[0]));
        for (std::size_t n = 1; n < x.size(); ++n)
            prob *= p.transition(z[n - 1], z[n]) * p.output(z[n], static_cast<std::size_t>(x[n]));
        total += prob;
    });
    return total;
}

/// P(x end) for an HMM whose `transition` holds the sub-stochastic pi'.
inline double hmm_evidence_with_end(const HmmParams& p, const std::vector<double>& end, const Sequence& x) {
    double total = 0.0;
    for_each_path(p.n_states(), x.size(), [&](const std::vector<std::size_t>& z) {
        double prob = p.initial[z[0]] * p.output(z[0], static_cast<std::size_t>(x[0]));
        for (std::size_t n = 1; n < x.size(); ++n)
            prob *= p.transition(z[n - 1], z[n]) * p.output(z[n], static_cast<std::size_t>(x[n]));
        total += prob * end[z.back()];
    });
    return total;
}

/// Calls f(seq) for every sequence of `length` over `vocab` symbols.
inline void for_each_sequence(std::size_t vocab, std::size_t length, const std::function<void(const Sequence&)>& f) {
    for_each_path(vocab, length, [&](const std::vector<std::size_t>& ids) {
        Sequence s(ids.begin(), ids.end());
        f(s);
    });
}

/// Binary tree shape over leaves [lo, hi].
struct Shape {
    std::size_t lo = 0, hi = 0;
    std::shared_ptr<Shape> left, right;
};

inline std::vector<std::shared_ptr<Shape>> shapes(std::size_t lo, std::size_t hi) {
    std::vector<std::shared_ptr<Shape>> out;
    if (lo == hi) {
        out.push_back(std::make_shared<Shape>(Shape{lo, hi, nullptr, nullptr}));
        return out;
    }
    for (std::size_t k = lo; k < hi; ++k)
        for (auto& l : shapes(lo, k))
            for (auto& r : shapes(k + 1, hi)) out.push_back(std::make_shared<Shape>(Shape{lo, hi, l, r}));
    return out;
}

inline void collect(const std::shared_ptr<Shape>& s, std::vector<const Shape*>& nodes) {
    nodes.push_back(s.get());
    if (s->left) {
        collect(s->left, nodes);
        collect(s->right, nodes);
    }
}

/// Leaf item of a tree frontier: a terminal symbol emitted by a preterminal,
/// or a fixed nonterminal that stays unexpanded (weight 1).
struct Item {
    bool hole = false;
    std::size_t value = 0;  // symbol id, or the hole's nonterminal
};

/// Sums the probability of every labeled derivation S =>* items, enumerating
/// shapes and then all nonterminal labelings explicitly.
inline double derivation_sum(const PcfgParams& p, const std::vector<Item>& items) {
    const std::size_t n = p.n_nonterminals();
    if (items.size() == 1) {
        if (items[0].hole) return 0.0;  // S is not a nonterminal of the set
        return p.start_terminal[items[0].value];
    }
    double total = 0.0;
    for (const auto& shape : shapes(0, items.size() - 1)) {
        std::vector<const Shape*> nodes;
        collect(shape, nodes);
        // nodes[0] is the root (S); every other node gets a label, except a
        // hole leaf whose label is fixed.
        std::vector<std::size_t> label(nodes.size(), 0);
        std::vector<std::size_t> free;
        for (std::size_t i = 1; i < nodes.size(); ++i) {
            const bool leaf = !nodes[i]->left;
            if (leaf && items[nodes[i]->lo].hole)
                label[i] = items[nodes[i]->lo].value;
            else
                free.push_back(i);
        }
        for_each_path(n, free.size(), [&](const std::vector<std::size_t>& assign) {
            for (std::size_t k = 0; k < free.size(); ++k) label[free[k]] = assign[k];
            auto label_of = [&](const Shape* s) {
                for (std::size_t i = 0; i < nodes.size(); ++i)
                    if (nodes[i] == s) return label[i];
                return std::size_t{0};
            };
            double prob = p.start_binary(label_of(nodes[0]->left.get()), label_of(nodes[0]->right.get()));
            for (std::size_t i = 1; i < nodes.size() && prob > 0.0; ++i) {
                const Shape* s = nodes[i];
                if (s->left) {
                    prob *= p.rule(label[i], label_of(s->left.get()), label_of(s->right.get()));
                } else if (!items[s->lo].hole) {
                    prob *= p.terminal(label[i], items[s->lo].value);
                }
            }
            total += prob;
        });
    }
    return total;
}

inline double pcfg_evidence(const PcfgParams& p, const Sequence& x) {
    std::vector<Item> items;
    for (auto id : x) items.push_back({false, static_cast<std::size_t>(id)});
    return derivation_sum(p, items);
}

/// P(S =>* x_0..x_{i-1} z x_{j+1}..x_{N-1}) by enumeration.
inline double pcfg_outside(const PcfgParams& p, const Sequence& x, std::size_t i, std::size_t j, std::size_t z) {
    std::vector<Item> items;
    for (std::size_t k = 0; k < i; ++k) items.push_back({false, static_cast<std::size_t>(x[k])});
    items.push_back({true, z});
    for (std::size_t k = j + 1; k < x.size(); ++k) items.push_back({false, static_cast<std::size_t>(x[k])});
    return derivation_sum(p, items);
}

/// P(x_n = y | rest) from full-evidence ratios over every y.
template <class Evidence>
std::vector<double> evidence_ratio(const Sequence& x, std::size_t n, std::size_t vocab, Evidence&& evidence) {
    std::vector<double> out(vocab);
    Sequence work = x;
    double total = 0.0;
    for (std::size_t y = 0; y < vocab; ++y) {
        work[n] = static_cast<chordgram::SymbolId>(y);
        out[y] = evidence(work);
        total += out[y];
    }
    for (double& v : out) v /= total;
    return out;
}

inline double rel_diff(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace oracle

#endif  // CHORDGRAM_TESTS_ORACLES_HPP
