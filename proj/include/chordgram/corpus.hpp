#ifndef CHORDGRAM_CORPUS_HPP
#define CHORDGRAM_CORPUS_HPP

// Corpus ingestion: raw chord text -> vocabulary -> encoded, split datasets.

#include <algorithm>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "chordgram/common.hpp"

namespace chordgram {

using ChordSequence = std::vector<std::string>;

inline constexpr std::string_view kOtherSymbol = "Other";

/// One sequence per non-blank line, whitespace-separated tokens.
inline std::vector<ChordSequence> parse_corpus(std::string_view text) {
    std::vector<ChordSequence> out;
    std::istringstream lines{std::string(text)};
    std::string line;
    while (std::getline(lines, line)) {
        std::istringstream tokens(line);
        ChordSequence seq;
        for (std::string tok; tokens >> tok;) seq.push_back(std::move(tok));
        if (!seq.empty()) out.push_back(std::move(seq));
    }
    return out;
}

/// Bijection between the retained symbols plus `Other` and dense ids.
/// `Other` always has the last id.
class Vocabulary {
public:
    Vocabulary() : Vocabulary(std::vector<std::string>{}, std::vector<std::size_t>{}, 0) {}

    /// `symbols` excludes `Other`; counts align with symbols.
    Vocabulary(std::vector<std::string> symbols, std::vector<std::size_t> counts,
               std::size_t other_count)
        : symbols_(std::move(symbols)), counts_(std::move(counts)) {
        if (counts_.size() != symbols_.size())
            throw invalid_argument("vocabulary symbol and count lists differ in length");
        for (std::size_t i = 0; i < symbols_.size(); ++i) {
            if (symbols_[i].empty() || symbols_[i] == kOtherSymbol)
                throw invalid_argument("vocabulary symbol '" + symbols_[i] + "' is reserved or empty");
            if (!index_.emplace(symbols_[i], static_cast<SymbolId>(i)).second)
                throw invalid_argument("duplicate vocabulary symbol '" + symbols_[i] + "'");
        }
        symbols_.emplace_back(kOtherSymbol);
        counts_.push_back(other_count);
        other_id_ = static_cast<SymbolId>(symbols_.size() - 1);
        index_.emplace(std::string(kOtherSymbol), other_id_);
    }

    std::size_t size() const noexcept { return symbols_.size(); }
    SymbolId other_id() const noexcept { return other_id_; }
    const std::string& symbol(SymbolId id) const { return symbols_.at(static_cast<std::size_t>(id)); }
    std::size_t count(SymbolId id) const { return counts_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& symbols() const noexcept { return symbols_; }

    SymbolId id_of(const std::string& symbol) const {
        auto it = index_.find(symbol);
        return it == index_.end() ? other_id_ : it->second;
    }

    bool contains(const std::string& symbol) const { return index_.count(symbol) != 0; }

    /// Hash of the ordered symbol list; model files carry it so a model is
    /// never decoded with a different vocabulary.
    std::uint64_t hash() const {
        std::uint64_t h = fnv1a("chordgram-vocab");
        for (const auto& s : symbols_) h = fnv1a(s + '\n', h);
        return h;
    }

    void write(std::ostream& os) const {
        os << "# chordgram-vocab 1\n";
        for (std::size_t i = 0; i < symbols_.size(); ++i)
            os << i << '\t' << symbols_[i] << '\t' << counts_[i] << '\n';
    }

    static Vocabulary read(std::istream& is) {
        std::string line;
        if (!std::getline(is, line) || line != "# chordgram-vocab 1")
            throw Error("parse", "vocabulary file lacks the '# chordgram-vocab 1' header");
        std::vector<std::string> symbols;
        std::vector<std::size_t> counts;
        std::size_t other_count = 0;
        bool saw_other = false;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            if (saw_other) throw Error("parse", "vocabulary entries after 'Other'");
            std::istringstream fields(line);
            std::size_t id = 0, count = 0;
            std::string symbol;
            if (!(fields >> id) || fields.get() != '\t' || !std::getline(fields, symbol, '\t') ||
                !(fields >> count))
                throw Error("parse", "malformed vocabulary line: " + line);
            if (id != symbols.size())
                throw Error("parse", "vocabulary ids are not dense: " + line);
            if (symbol == kOtherSymbol) {
                saw_other = true;
                other_count = count;
            } else {
                symbols.push_back(symbol);
                counts.push_back(count);
            }
        }
        if (!saw_other) throw Error("parse", "vocabulary file has no 'Other' entry");
        return Vocabulary(std::move(symbols), std::move(counts), other_count);
    }

private:
    std::vector<std::string> symbols_;
    std::vector<std::size_t> counts_;
    std::unordered_map<std::string, SymbolId> index_;
    SymbolId other_id_ = 0;
};

/// Keeps the K most frequent symbols (ties: lexicographic) and folds the
/// rest into `Other`. A literal `Other` token in the corpus is the reserved
/// symbol, never a candidate.
inline Vocabulary build_vocabulary(const std::vector<ChordSequence>& sequences, std::size_t k) {
    if (k < 1) throw invalid_argument("vocabulary size K must be >= 1");
    std::map<std::string, std::size_t> counts;
    std::size_t total = 0;
    for (const auto& seq : sequences)
        for (const auto& tok : seq) {
            ++counts[tok];
            ++total;
        }
    std::vector<std::pair<std::string, std::size_t>> ranked;
    for (auto& [sym, c] : counts)
        if (sym != kOtherSymbol) ranked.emplace_back(sym, c);
    // std::map iteration is already lexicographic, so a stable sort on count
    // leaves ties in lexicographic order.
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (ranked.size() > k) ranked.resize(k);
    std::vector<std::string> symbols;
    std::vector<std::size_t> kept;
    std::size_t kept_total = 0;
    for (auto& [sym, c] : ranked) {
        symbols.push_back(sym);
        kept.push_back(c);
        kept_total += c;
    }
    return Vocabulary(std::move(symbols), std::move(kept), total - kept_total);
}

struct EncodedDataset {
    std::size_t vocab_size = 0;
    std::vector<Sequence> sequences;

    std::size_t size() const noexcept { return sequences.size(); }
    bool empty() const noexcept { return sequences.empty(); }

    std::size_t symbol_count() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.size();
        return n;
    }

    double mean_length() const {
        return sequences.empty() ? 0.0
                                 : static_cast<double>(symbol_count()) / static_cast<double>(size());
    }

    friend bool operator==(const EncodedDataset&, const EncodedDataset&) = default;
};

inline EncodedDataset encode(const std::vector<ChordSequence>& sequences, const Vocabulary& vocab) {
    EncodedDataset out;
    out.vocab_size = vocab.size();
    out.sequences.reserve(sequences.size());
    for (const auto& seq : sequences) {
        Sequence ids;
        ids.reserve(seq.size());
        for (const auto& tok : seq) ids.push_back(vocab.id_of(tok));
        out.sequences.push_back(std::move(ids));
    }
    return out;
}

inline ChordSequence decode(const Sequence& seq, const Vocabulary& vocab) {
    ChordSequence out;
    out.reserve(seq.size());
    for (SymbolId id : seq) out.push_back(vocab.symbol(id));
    return out;
}

namespace detail {
inline EncodedDataset pick(const EncodedDataset& data, std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end());
    EncodedDataset out;
    out.vocab_size = data.vocab_size;
    out.sequences.reserve(idx.size());
    for (std::size_t i : idx) out.sequences.push_back(data.sequences[i]);
    return out;
}
}  // namespace detail

struct TrainTestSplit {
    EncodedDataset train;
    EncodedDataset test;
};

/// Random disjoint split; both halves keep the original sequence order.
inline TrainTestSplit split(const EncodedDataset& data, std::size_t test_count, std::uint64_t seed) {
    if (test_count > data.size())
        throw invalid_argument("test_count " + std::to_string(test_count) + " exceeds dataset size " +
                               std::to_string(data.size()));
    Rng rng(mix_seed(seed, 0x5e11));
    const auto order = permutation(data.size(), rng);
    std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_count));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(test_count), order.end());
    return {detail::pick(data, std::move(train_idx)), detail::pick(data, std::move(test_idx))};
}

/// Uniform subset of `count` sequences. Subsets for one seed are nested: the
/// result for a smaller count is contained in the result for a larger one.
inline EncodedDataset subsample(const EncodedDataset& train, std::size_t count, std::uint64_t seed) {
    if (count < 1 || count > train.size())
        throw invalid_argument("subsample size " + std::to_string(count) + " outside [1, " +
                               std::to_string(train.size()) + "]");
    Rng rng(mix_seed(seed, 0x5ab5));
    const auto order = permutation(train.size(), rng);
    return detail::pick(train, {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count)});
}

inline void write_encoded(std::ostream& os, const EncodedDataset& data) {
    for (const auto& seq : data.sequences) {
        for (std::size_t i = 0; i < seq.size(); ++i) os << (i ? " " : "") << seq[i];
        os << '\n';
    }
}

inline EncodedDataset read_encoded(std::istream& is, std::size_t vocab_size) {
    EncodedDataset out;
    out.vocab_size = vocab_size;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream fields(line);
        Sequence seq;
        for (std::string tok; fields >> tok;) {
            std::size_t pos = 0;
            long v = -1;
            try {
                v = std::stol(tok, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos != tok.size() || v < 0 || static_cast<std::size_t>(v) >= vocab_size)
                throw Error("parse", "bad symbol id '" + tok + "' in encoded dataset");
            seq.push_back(static_cast<SymbolId>(v));
        }
        if (!seq.empty()) out.sequences.push_back(std::move(seq));
    }
    return out;
}

}  // namespace chordgram

#endif  // CHORDGRAM_CORPUS_HPP
