// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Tolerances and runtime limits are fixed here.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "chordgram/experiment.hpp"
#include "oracles.hpp"

using namespace chordgram;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

/// Tracks the worst value of some error measure against a bound.
struct Worst {
    double value = 0.0;
    void add(double v) { value = std::max(value, std::isnan(v) ? std::numeric_limits<double>::infinity() : v); }
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

EncodedDataset sample_dataset(const HmmParams& p, std::size_t count, std::size_t min_len, std::size_t max_len, Rng& rng) {
    EncodedDataset d;
    d.vocab_size = p.vocab_size();
    for (std::size_t i = 0; i < count; ++i)
        d.sequences.push_back(sample_sequence(p, min_len + rng.below(max_len - min_len + 1), rng));
    return d;
}

Sequence random_sequence(std::size_t len, std::size_t vocab, Rng& rng) {
    Sequence s(len);
    for (auto& x : s) x = static_cast<SymbolId>(rng.below(vocab));
    return s;
}

// 1. Embedding equalities.
Outcome embeddings() {
    Worst markov, strict;
    Rng rng(101);
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
        const auto data = sample_dataset(init_random_hmm(2, 3, 200 + trial), 40, 1, 8, rng);
        const Smoothing sm[] = {Smoothing::additive(0.1), Smoothing::kneser_ney(), Smoothing::modified_kneser_ney()};
        const auto m = fit_markov(data, 1, sm[trial]);
        const auto h = from_markov(m);
        for (std::size_t len = 1; len <= 4; ++len)
            oracle::for_each_sequence(3, len, [&](const Sequence& s) {
                markov.add(oracle::rel_diff(log_evidence(h, s), m.log_evidence(s)));
            });
    }
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
        const std::vector<double> end{0.05 + 0.9 * rng.uniform(), 0.05 + 0.9 * rng.uniform()};
        const auto h = with_end_probability(init_random_hmm(2, 3, 300 + trial), end);
        const auto p = strict_embed_hmm(h, end);
        for (std::size_t len = 1; len <= 5; ++len)
            oracle::for_each_sequence(3, len, [&](const Sequence& s) {
                strict.add(oracle::rel_diff(std::exp(log_evidence(p, s)), oracle::hmm_evidence_with_end(h, end, s)));
            });
    }
    return {markov.value <= 1e-12 && strict.value <= 1e-9,
            "markov->hmm max rel " + fmt(markov.value) + " (<=1e-12), hmm->pcfg max rel " + fmt(strict.value) +
                " (<=1e-9)"};
}

// 2. Dynamic programs against brute-force enumeration.
Outcome oracle_equivalence() {
    Worst fb, inside;
    Rng rng(102);
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const std::size_t s = 1 + rng.below(3), v = 2 + rng.below(3), len = 1 + rng.below(6);
        const auto p = init_random_hmm(s, v, 400 + trial);
        const auto x = random_sequence(len, v, rng);
        fb.add(oracle::rel_diff(std::exp(forward_backward(p, x).log_evidence), oracle::hmm_evidence(p, x)));
    }
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(3), v = 2 + rng.below(2), len = 2 + rng.below(4);
        const auto p = init_random_pcfg(n, v, 500 + trial);
        const auto x = random_sequence(len, v, rng);
        inside.add(oracle::rel_diff(std::exp(log_evidence(p, x)), oracle::pcfg_evidence(p, x)));
    }
    return {fb.value <= 1e-12 && inside.value <= 1e-12,
            "forward-backward max rel " + fmt(fb.value) + ", inside max rel " + fmt(inside.value) + " (<=1e-12)"};
}

// 3. Symbol-wise predictions against evidence ratios.
Outcome prediction_oracle() {
    Worst markov, hmm, pcfg;
    Rng rng(103);
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        const std::size_t v = 2 + rng.below(3);
        const auto gen = init_random_hmm(2, v, 600 + trial);
        const auto data = sample_dataset(gen, 30, 1, 8, rng);
        const Smoothing sm[] = {Smoothing::additive(0.1), Smoothing::kneser_ney(), Smoothing::modified_kneser_ney()};
        const auto m = fit_markov(data, 1 + trial % 3, sm[trial % 3]);
        const auto h = init_random_hmm(1 + rng.below(3), v, 700 + trial);
        const auto g = init_random_pcfg(1 + rng.below(3), v, 800 + trial);
        const auto x = random_sequence(2 + rng.below(4), v, rng);
        for (std::size_t n = 0; n < x.size(); ++n) {
            const auto check = [&](Worst& w, const std::vector<double>& got, const std::vector<double>& want) {
                for (std::size_t y = 0; y < v; ++y) w.add(std::abs(got[y] - want[y]));
            };
            check(markov, m.predict_distribution(x, n),
                  oracle::evidence_ratio(x, n, v, [&](const Sequence& s) { return std::exp(m.log_evidence(s)); }));
            check(hmm, predict_distribution(h, x, n),
                  oracle::evidence_ratio(x, n, v, [&](const Sequence& s) { return oracle::hmm_evidence(h, s); }));
            check(pcfg, predict_distribution(g, x, n),
                  oracle::evidence_ratio(x, n, v, [&](const Sequence& s) { return oracle::pcfg_evidence(g, s); }));
        }
    }
    const double worst = std::max({markov.value, hmm.value, pcfg.value});
    return {worst <= 1e-9, "max abs entry diff markov " + fmt(markov.value) + ", hmm " + fmt(hmm.value) + ", pcfg " +
                               fmt(pcfg.value) + " (<=1e-9)"};
}

// 4. Length distribution and length-normalized evidence.
Outcome length_normalization() {
    const auto g = init_random_pcfg(2, 2, 104);
    Worst norm, length;
    for (std::size_t len = 2; len <= 4; ++len) {
        double total = 0.0;
        oracle::for_each_sequence(2, len, [&](const Sequence& s) { total += std::exp(normalized_log_evidence(g, s)); });
        norm.add(std::abs(total - 1.0));
    }
    for (std::size_t len = 1; len <= 5; ++len) {
        double total = 0.0;
        oracle::for_each_sequence(2, len, [&](const Sequence& s) { total += oracle::pcfg_evidence(g, s); });
        length.add(std::abs(length_probability(g, len) - total));
    }
    return {norm.value <= 1e-9 && length.value <= 1e-9,
            "normalized sum max err " + fmt(norm.value) + ", P(N) max err " + fmt(length.value) + " (<=1e-9)"};
}

// 5. EM never decreases the training log-likelihood.
Outcome em_monotone() {
    Rng rng(105);
    std::size_t runs = 0, violations = 0;
    double worst = 0.0;
    auto scan = [&](const std::vector<double>& trace) {
        ++runs;
        bool bad = false;
        for (std::size_t i = 1; i < trace.size(); ++i) {
            const double drop = (trace[i - 1] - trace[i]) / std::abs(trace[i - 1]);
            worst = std::max(worst, drop);
            bad = bad || drop > 1e-9;
        }
        violations += bad ? 1 : 0;
    };
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const std::size_t s = 1 + rng.below(4), v = 2 + rng.below(5);
        const auto data = sample_dataset(init_random_hmm(s, v, 900 + trial), 15, 1, 12, rng);
        scan(em_fit(init_random_hmm(1 + rng.below(4), v, 1000 + trial), data, {100, 1e-8}).trace);
    }
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const std::size_t v = 2 + rng.below(3);
        const auto data = sample_dataset(init_random_hmm(2, v, 1100 + trial), 8, 2, 7, rng);
        scan(em_fit(init_random_pcfg(1 + rng.below(3), v, 1200 + trial), data, {40, 1e-8}).trace);
    }
    return {runs == 100 && violations == 0, std::to_string(runs) + " runs, " + std::to_string(violations) +
                                                " with a relative drop > 1e-9 (largest " + fmt(worst) + ")"};
}

// 6. Mean sampled yield length of the HMM-initialized grammar.
Outcome mean_length() {
    const auto h = init_random_hmm(3, 4, 106);
    Rng rng(106);
    auto mean = [&](double kappa) {
        const auto g = init_from_hmm(h, kappa, 0.0);
        double total = 0.0;
        for (int i = 0; i < 100000; ++i) total += static_cast<double>(sample_tree(g, rng).yield().size());
        return total / 100000.0;
    };
    const double a = mean(0.6), b = mean(0.5416);
    return {a >= 5.9 && a <= 6.1 && b >= 12.5 && b <= 13.5,
            "kappa 0.6 mean " + fmt(a) + " in [5.9, 6.1], kappa 0.5416 mean " + fmt(b) + " in [12.5, 13.5]"};
}

/// Four states with disjoint emission sets over 11 symbols and sparse
/// transitions.
HmmParams planted_hmm() {
    HmmParams p(4, 11);
    p.initial = {0.25, 0.25, 0.25, 0.25};
    const double trans[4][4] = {{0.1, 0.6, 0.3, 0.0}, {0.0, 0.1, 0.5, 0.4}, {0.4, 0.0, 0.0, 0.6}, {0.7, 0.3, 0.0, 0.0}};
    for (std::size_t z = 0; z < 4; ++z)
        for (std::size_t w = 0; w < 4; ++w) p.transition(z, w) = trans[z][w];
    const std::vector<std::vector<std::pair<std::size_t, double>>> emit{
        {{0, 0.5}, {1, 0.3}, {2, 0.2}}, {{3, 0.4}, {4, 0.4}, {5, 0.2}}, {{6, 0.6}, {7, 0.25}, {8, 0.15}}, {{9, 0.6}, {10, 0.4}}};
    for (std::size_t z = 0; z < 4; ++z)
        for (auto [x, prob] : emit[z]) p.output(z, x) = prob;
    return p;
}

// 7. Gibbs-trained HMM against the planted model and a Markov baseline.
Outcome synthetic_recovery() {
    const auto planted = planted_hmm();
    Rng rng(107);
    const auto train = sample_dataset(planted, 30, 20, 20, rng);
    const auto test = sample_dataset(planted, 200, 20, 20, rng);
    HmmParams best;
    double best_ll = kNegInf;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto r = gibbs_fit(init_random_hmm(4, 11, seed), train, HmmHyper::symmetric(4, 11, 0.1),
                           {500, 50, 1e-5, mix_seed(seed, 1)});
        const double ll = log_evidence(r.params, train);
        if (ll > best_ll) {
            best_ll = ll;
            best = std::move(r.params);
        }
    }
    const double truth = perplexity(HmmScorer(planted), test);
    const double learned = perplexity(HmmScorer(best), test);
    const auto markov = fit_markov(train, 1, Smoothing::modified_kneser_ney());
    const double baseline = perplexity(MarkovScorer(markov), test);
    const double gap = std::abs(learned / truth - 1.0);
    return {gap <= 0.05 && learned < baseline,
            "test perplexity planted " + fmt(truth) + ", GS HMM " + fmt(learned) + " (gap " + fmt(100 * gap) +
                "% <= 5%), MKN Markov " + fmt(baseline)};
}

// 8. Information measures.
Outcome information_measures() {
    Worst exact;
    HmmParams u(3, 4);
    u.initial = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    for (std::size_t z = 0; z < 3; ++z) {
        for (std::size_t w = 0; w < 3; ++w) u.transition(z, w) = 1.0 / 3;
        for (std::size_t x = 0; x < 4; ++x) u.output(z, x) = 0.25;
    }
    const auto mu = info_measures(u);
    exact.add(std::abs(mu.stationary_perplexity - 3.0));
    exact.add(std::abs(mu.transition_perplexity - 3.0));
    HmmParams id(3, 3);
    id.initial = {0.2, 0.3, 0.5};
    for (std::size_t z = 0; z < 3; ++z) {
        id.output(z, z) = 1.0;
        for (std::size_t w = 0; w < 3; ++w) id.transition(z, w) = w == (z + 1) % 3 ? 0.8 : 0.1;
    }
    const auto mi = info_measures(id);
    exact.add(std::abs(mi.output_perplexity - 1.0));
    exact.add(std::abs(mi.association_variety - 1.0));

    HmmParams two(2, 2);
    two.initial = {0.5, 0.5};
    two.transition(0, 0) = 0.9;
    two.transition(0, 1) = 0.1;
    two.transition(1, 0) = 0.5;
    two.transition(1, 1) = 0.5;
    two.output(0, 0) = 0.8;
    two.output(0, 1) = 0.2;
    two.output(1, 0) = 0.3;
    two.output(1, 1) = 0.7;
    const double pg = info_measures(two).stationary_perplexity;

    std::size_t out_of_range = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const std::size_t s = 1 + seed % 6, v = 2 + seed % 9;
        const auto m = info_measures(init_random_hmm(s, v, 1300 + seed));
        const double e = 1e-9;
        const bool ok = m.stationary_perplexity >= 1 - e && m.stationary_perplexity <= s + e &&
                        m.output_perplexity >= 1 - e && m.output_perplexity <= v + e &&
                        m.association_variety >= 1 - e && m.association_variety <= s + e &&
                        m.transition_perplexity >= 1 - e && m.transition_perplexity <= s + e;
        out_of_range += ok ? 0 : 1;
    }
    return {exact.value <= 1e-9 && std::abs(pg - 1.5694) <= 1e-3 && out_of_range == 0,
            "forced cases max err " + fmt(exact.value) + ", two-state P_Gamma " + fmt(pg) + ", " +
                std::to_string(out_of_range) + "/100 random models out of range"};
}

// 9. Smoothed Markov models on a 1000-sequence corpus.
Outcome smoothing_sanity() {
    // Sparse generator: each symbol has only two successors, so test
    // sequences drawn uniformly contain many unseen n-grams.
    HmmParams gen(6, 6);
    for (std::size_t z = 0; z < 6; ++z) {
        gen.initial[z] = 1.0 / 6;
        gen.output(z, z) = 1.0;
        gen.transition(z, (z + 1) % 6) = 0.7;
        gen.transition(z, (z + 3) % 6) = 0.3;
    }
    Rng rng(109);
    const auto train = sample_dataset(gen, 1000, 1, 12, rng);
    EncodedDataset test;
    test.vocab_size = 6;
    for (int i = 0; i < 50; ++i) test.sequences.push_back(random_sequence(2 + rng.below(8), 6, rng));
    Worst rows;
    std::size_t non_finite = 0, models = 0;
    for (std::size_t order = 1; order <= 3; ++order)
        for (const auto& sm : {Smoothing::additive(0.1), Smoothing::kneser_ney(), Smoothing::modified_kneser_ney()}) {
            const auto m = fit_markov(train, order, sm);
            ++models;
            for (std::size_t j = 1; j <= order; ++j)
                for (std::size_t r = 0; r < m.initial(j).rows(); ++r) rows.add(std::abs(sum(m.initial(j).row(r)) - 1.0));
            for (std::size_t r = 0; r < m.transition().rows(); ++r) rows.add(std::abs(sum(m.transition().row(r)) - 1.0));
            for (const auto& s : test.sequences) non_finite += std::isfinite(m.log_evidence(s)) ? 0 : 1;
        }
    return {rows.value <= 1e-9 && non_finite == 0,
            std::to_string(models) + " models, max row-sum error " + fmt(rows.value) + ", " +
                std::to_string(non_finite) + " non-finite test log-evidences"};
}

// 10. Repeated sweep cells give byte-identical models and CSV rows.
Outcome determinism() {
    const fs::path dir = fs::temp_directory_path() / "chordgram_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    Rng rng(110);
    const auto gen = planted_hmm();
    std::string corpus;
    const char* names[] = {"C", "G", "Am", "F", "Dm", "Em", "G7", "E7", "Bb", "D", "A7"};
    for (int i = 0; i < 80; ++i) {
        const auto s = sample_sequence(gen, 2 + rng.below(10), rng);
        for (std::size_t n = 0; n < s.size(); ++n) corpus += std::string(n ? " " : "") + names[s[n]];
        corpus += "\n";
    }
    write_file(dir / "corpus.txt", corpus);
    std::size_t cells = 0, files = 0, mismatches = 0;
    for (const char* kind : {"markov", "hmm", "pcfg"}) {
        const Json j = {{"corpus", "corpus.txt"},
                        {"data_dir", "data"},
                        {"test_count", 15},
                        {"train_sizes", {20, 0}},
                        {"model", kind},
                        {"sizes", {1, 3}},
                        {"seeds", {0, 1}},
                        {"markov", {{"smoothing", {"additive 0.1", "kn", "mkn"}}}},
                        {"hmm", {{"em_max_iter", 50}, {"gs_samples", 30}, {"polish_iters", 10}}},
                        {"pcfg", {{"em_max_iter", 15}, {"gs_samples", 10}, {"polish_iters", 5}}}};
        const auto c = parse_config(j, dir);
        const auto data = cmd_prepare(c);
        const auto a = run_sweep(c, data, {1, false, dir / (std::string(kind) + "_a")});
        const auto b = run_sweep(c, data, {2, false, dir / (std::string(kind) + "_b")});
        cells += a.size();
        for (std::size_t i = 0; i < a.size(); ++i)
            mismatches += result_csv_row(a[i]) == result_csv_row(b[i]) && a[i].ok ? 0 : 1;
        for (const auto& e : fs::directory_iterator(dir / (std::string(kind) + "_a"))) {
            ++files;
            const auto other = dir / (std::string(kind) + "_b") / e.path().filename();
            mismatches += fs::exists(other) && read_file(e.path()) == read_file(other) ? 0 : 1;
        }
        // One cell on its own, outside any sweep.
        const auto& cell = a.back().cell;
        ++files;
        const auto alone = model_text(train_cell(c, data, cell).model, data.vocab.hash());
        mismatches += alone == read_file(dir / (std::string(kind) + "_a") / model_file_name(cell)) ? 0 : 1;
    }
    fs::remove_all(dir);
    return {mismatches == 0 && cells == 12 + 16 + 16, std::to_string(cells) + " cells, " + std::to_string(files) +
                                                          " model/log files compared, " + std::to_string(mismatches) +
                                                          " mismatches"};
}

}  // namespace

int main() {
    struct Criterion {
        const char* name;
        double limit_seconds;  // 0: no runtime bound
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {"embedding equalities", 10, embeddings},
        {"oracle equivalence", 30, oracle_equivalence},
        {"symbol-wise predictions", 0, prediction_oracle},
        {"length normalization", 0, length_normalization},
        {"EM monotonicity", 0, em_monotone},
        {"mean yield length", 60, mean_length},
        {"synthetic HMM recovery", 300, synthetic_recovery},
        {"information measures", 0, information_measures},
        {"smoothing sanity", 0, smoothing_sanity},
        {"determinism", 0, determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto& c = criteria[i];
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.limit_seconds > 0 && secs >= c.limit_seconds) {
            o.pass = false;
            o.detail += "; exceeded " + fmt(c.limit_seconds) + " s";
        }
        failed += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << c.name << ": " << o.detail << " ["
                  << fmt(secs) << " s]" << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
              << std::endl;
    return failed == 0 ? 0 : 1;
}
