#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "chordgram/markov.hpp"
#include "oracles.hpp"

using namespace chordgram;

namespace {

EncodedDataset dataset(std::size_t v, std::vector<Sequence> seqs) {
    EncodedDataset d;
    d.vocab_size = v;
    d.sequences = std::move(seqs);
    return d;
}

EncodedDataset random_corpus(std::size_t v, std::size_t count, std::size_t max_len, std::uint64_t seed) {
    Rng rng(seed);
    EncodedDataset d;
    d.vocab_size = v;
    for (std::size_t i = 0; i < count; ++i) {
        Sequence s(1 + rng.below(max_len));
        // Skewed symbol law so the count-of-counts statistics are non-trivial.
        for (auto& x : s) x = static_cast<SymbolId>(std::min(rng.below(v), rng.below(v)));
        d.sequences.push_back(s);
    }
    return d;
}

void expect_rows_normalized(const MarkovModel& m) {
    for (std::size_t j = 1; j <= m.order(); ++j)
        for (std::size_t h = 0; h < m.initial(j).rows(); ++h) EXPECT_NEAR(sum(m.initial(j).row(h)), 1.0, 1e-9);
    for (std::size_t h = 0; h < m.transition().rows(); ++h) {
        EXPECT_NEAR(sum(m.transition().row(h)), 1.0, 1e-9);
        for (double p : m.transition().row(h)) EXPECT_GT(p, 0.0);
    }
}

// a = 0, b = 1
const EncodedDataset kToy = dataset(2, {{0, 1, 1}, {0, 1}});

}  // namespace

TEST(MarkovFit, AdditiveHandCounts) {
    const auto m = fit_markov(kToy, 1, Smoothing::additive(0.1));
    EXPECT_NEAR(m.initial(1)(0, 0), 2.1 / 2.2, 1e-12);
    EXPECT_NEAR(m.transition()(0, 1), 2.1 / 2.2, 1e-12);
    EXPECT_NEAR(m.transition()(1, 1), 1.1 / 1.2, 1e-12);
    EXPECT_NEAR(m.initial(1)(0, 0), 0.95455, 1e-5);
    EXPECT_NEAR(m.transition()(1, 1), 0.91667, 1e-5);
}

TEST(MarkovFit, AdditiveEvidence) {
    const auto m = fit_markov(kToy, 1, Smoothing::additive(0.1));
    const Sequence ab{0, 1};
    EXPECT_NEAR(m.log_evidence(ab), std::log((2.1 / 2.2) * (2.1 / 2.2)), 1e-12);
    EXPECT_NEAR(std::exp(m.log_evidence(ab)), 0.91116, 1e-5);
    const Sequence a{0};
    EXPECT_DOUBLE_EQ(m.log_evidence(a), std::log(m.initial(1)(0, 0)));
}

TEST(MarkovFit, RowsNormalizedForAllSmoothings) {
    const auto data = random_corpus(4, 200, 8, 3);
    for (auto s : {Smoothing::additive(0.1), Smoothing::kneser_ney(), Smoothing::modified_kneser_ney()})
        for (std::size_t k = 1; k <= 3; ++k) {
            SCOPED_TRACE(s.tag() + " k=" + std::to_string(k));
            expect_rows_normalized(fit_markov(data, k, s));
        }
}

TEST(MarkovFit, KneserNeyGivesUnseenBigramsMass) {
    // "b a" never occurs; bigram counts 1, 2, 3 keep every discount defined.
    const auto data = dataset(2, {{0, 1, 1, 1}, {0, 0, 1}, {0, 1}});
    for (auto s : {Smoothing::kneser_ney(), Smoothing::modified_kneser_ney()}) {
        const auto m = fit_markov(data, 1, s);
        EXPECT_EQ(m.smoothing(), s);
        EXPECT_GT(m.transition()(1, 0), 0.0);
        const Sequence unseen{1, 0, 1, 0};
        EXPECT_TRUE(std::isfinite(m.log_evidence(unseen)));
    }
}

TEST(MarkovFit, DegenerateStatisticsFallBackToAdditive) {
    // Every bigram occurs twice: no singletons at the top level.
    const auto data = dataset(2, {{0, 1, 0, 1, 0}});
    const auto m = fit_markov(data, 1, Smoothing::kneser_ney());
    EXPECT_EQ(m.smoothing(), Smoothing::additive(0.1));
    expect_rows_normalized(m);
}

TEST(MarkovFit, RejectsBadInput) {
    EXPECT_THROW(fit_markov(dataset(2, {}), 1, Smoothing::additive()), Error);
    EXPECT_THROW(fit_markov(kToy, 0, Smoothing::additive()), Error);
    EXPECT_THROW(fit_markov(kToy, 1, Smoothing::additive(0.0)), Error);
}

TEST(MarkovFit, HigherOrderFitsTrainingDataAtLeastAsWell) {
    const auto data = random_corpus(3, 400, 12, 17);
    double previous = INFINITY;
    for (std::size_t k = 1; k <= 3; ++k) {
        const auto m = fit_markov(data, k, Smoothing::additive(1e-6));
        double total = 0.0;
        for (const auto& s : data.sequences) total += m.log_evidence(s);
        const double ppl = std::exp(-total / static_cast<double>(data.symbol_count()));
        EXPECT_LE(ppl, previous * (1 + 1e-9)) << "k=" << k;
        previous = ppl;
    }
}

TEST(MarkovFit, ShortSequencesUseOnlyInitialTables) {
    const auto data = random_corpus(3, 50, 6, 5);
    const auto m = fit_markov(data, 3, Smoothing::modified_kneser_ney());
    const Sequence s{2, 0};
    EXPECT_NEAR(m.log_evidence(s), std::log(m.initial(1)(0, 2)) + std::log(m.initial(2)(2, 0)), 1e-12);
}

TEST(MarkovFit, ForcedModelEvidenceIsHeadProbability) {
    Matrix t(2, 2);
    t(0, 1) = 1.0;
    t(1, 0) = 1.0;
    Matrix ini(1, 2);
    ini(0, 0) = 0.3;
    ini(0, 1) = 0.7;
    const MarkovModel m(1, 2, Smoothing::additive(), {ini}, t);
    const Sequence forced{1, 0, 1, 0};
    EXPECT_DOUBLE_EQ(m.log_evidence(forced), std::log(0.7));
}

TEST(MarkovPredict, FirstOrderInteriorAndLast) {
    const auto m = fit_markov(random_corpus(3, 100, 8, 11), 1, Smoothing::modified_kneser_ney());
    const Sequence s{0, 2, 1, 1};
    const auto p = m.predict_distribution(s, 2);
    std::vector<double> expect(3);
    for (std::size_t y = 0; y < 3; ++y) expect[y] = m.transition()(2, y) * m.transition()(y, 1);
    normalize(expect);
    for (std::size_t y = 0; y < 3; ++y) EXPECT_NEAR(p[y], expect[y], 1e-12);
    const auto last = m.predict_distribution(s, 3);
    for (std::size_t y = 0; y < 3; ++y) EXPECT_NEAR(last[y], m.transition()(1, y), 1e-12);
}

TEST(MarkovPredict, MatchesEvidenceRatioExhaustively) {
    const std::size_t v = 3;
    for (std::size_t k = 1; k <= 3; ++k) {
        const auto m = fit_markov(random_corpus(v, 60, 7, 100 + k), k, Smoothing::modified_kneser_ney());
        for (std::size_t len = 1; len <= 4; ++len)
            oracle::for_each_sequence(v, len, [&](const Sequence& s) {
                for (std::size_t n = 0; n < len; ++n) {
                    const auto got = m.predict_distribution(s, n);
                    const auto want = oracle::evidence_ratio(
                        s, n, v, [&](const Sequence& w) { return std::exp(m.log_evidence(w)); });
                    for (std::size_t y = 0; y < v; ++y) ASSERT_NEAR(got[y], want[y], 1e-9);
                }
            });
    }
}

TEST(MarkovModel, SerializationRoundTrip) {
    const auto m = fit_markov(random_corpus(3, 40, 6, 8), 2, Smoothing::kneser_ney());
    std::stringstream ss;
    m.write(ss, 0xabcdef);
    ModelReader r(ss);
    ASSERT_EQ(r.begin(), "markov");
    EXPECT_EQ(r.hash_field(), 0xabcdefu);
    EXPECT_EQ(MarkovModel::read_body(r), m);
}

TEST(MarkovModel, SamplingIsSeedDeterministic) {
    const auto m = fit_markov(random_corpus(3, 40, 6, 8), 2, Smoothing::kneser_ney());
    Rng a(5), b(5);
    EXPECT_EQ(m.sample_sequence(20, a), m.sample_sequence(20, b));
}

TEST(Smoothing, ParseAndTag) {
    EXPECT_EQ(Smoothing::parse("mkn"), Smoothing::modified_kneser_ney());
    EXPECT_EQ(Smoothing::parse("additive 0.5"), Smoothing::additive(0.5));
    EXPECT_EQ(Smoothing::parse(Smoothing::additive(0.25).tag()), Smoothing::additive(0.25));
    EXPECT_THROW(Smoothing::parse("katz"), Error);
}
