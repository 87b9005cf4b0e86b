// Samples chord-like data from a hand-made 4-state HMM, fits HMMs with EM
// and Gibbs sampling plus a smoothed bigram model, and prints test metrics
// and the learned state inventory.

#include <iostream>

#include "chordgram/experiment.hpp"

using namespace chordgram;

int main() {
    const std::vector<std::string> names{"C", "F", "G", "Am", "Dm", "Em", "G7", "E7", "Bb"};
    const Vocabulary vocab(names, std::vector<std::size_t>(names.size(), 1), 0);

    // Tonic, subdominant, dominant and a rarely used borrowed-chord state.
    HmmParams planted(4, vocab.size());
    planted.initial = {0.7, 0.1, 0.1, 0.1};
    const double trans[4][4] = {{0.2, 0.5, 0.25, 0.05}, {0.1, 0.2, 0.7, 0.0}, {0.85, 0.05, 0.1, 0.0}, {0.3, 0.3, 0.4, 0.0}};
    const double emit[4][10] = {{0.6, 0, 0, 0.3, 0, 0.1, 0, 0, 0, 0},
                                {0, 0.6, 0, 0, 0.4, 0, 0, 0, 0, 0},
                                {0, 0, 0.55, 0, 0, 0, 0.35, 0.1, 0, 0},
                                {0, 0, 0, 0, 0, 0, 0, 0, 0.7, 0.3}};
    for (std::size_t z = 0; z < 4; ++z) {
        for (std::size_t w = 0; w < 4; ++w) planted.transition(z, w) = trans[z][w];
        for (std::size_t x = 0; x < vocab.size(); ++x) planted.output(z, x) = emit[z][x];
    }

    Rng rng(2024);
    auto draw = [&](std::size_t count) {
        EncodedDataset d;
        d.vocab_size = vocab.size();
        for (std::size_t i = 0; i < count; ++i) d.sequences.push_back(sample_sequence(planted, 8 + rng.below(9), rng));
        return d;
    };
    const auto train = draw(60), test = draw(300);

    const auto em = em_fit(init_random_hmm(4, vocab.size(), 1), train);
    const auto gs = gibbs_fit(init_random_hmm(4, vocab.size(), 1), train, HmmHyper::symmetric(4, vocab.size(), 0.1),
                              {200, 50, 1e-5, 7});
    const auto bigram = fit_markov(train, 1, Smoothing::modified_kneser_ney());

    write_eval_csv_header(std::cout);
    write_eval_csv_row(std::cout, "planted", 4, "test", evaluate(HmmScorer(planted), test));
    write_eval_csv_row(std::cout, "hmm-em", 4, "test", evaluate(HmmScorer(em.params), test));
    write_eval_csv_row(std::cout, "hmm-gs", 4, "test", evaluate(HmmScorer(gs.params), test));
    write_eval_csv_row(std::cout, "markov-mkn", 1, "test", evaluate(MarkovScorer(bigram), test));

    std::cout << "\nEM iterations: " << em.trace.size() - 1 << ", final log-likelihood "
              << format_double(em.trace.back()) << '\n';
    std::cout << "\nGibbs-trained states:\n" << analyze_model(gs.params, vocab, 4).dump(2) << '\n';
}
