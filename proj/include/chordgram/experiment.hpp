#ifndef CHORDGRAM_EXPERIMENT_HPP
#define CHORDGRAM_EXPERIMENT_HPP

// Experiment driver behind the command-line tool: JSON configuration,
// dataset preparation, single training cells, sweeps over model sizes,
// seeds, data sizes and algorithms, structure reports and generation.
//
// A training cell is a pure function of (training config, data, cell
// coordinates). Its random seed mixes a hash of the training-relevant
// config fields with the coordinates, so a cell trained alone reproduces
// the same cell inside any sweep.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "json.hpp"

#include "chordgram/common.hpp"
#include "chordgram/corpus.hpp"
#include "chordgram/eval.hpp"
#include "chordgram/hmm.hpp"
#include "chordgram/markov.hpp"
#include "chordgram/model_io.hpp"
#include "chordgram/pcfg.hpp"

namespace chordgram {

using Json = nlohmann::json;
namespace fs = std::filesystem;

struct MarkovSettings {
    std::vector<Smoothing> smoothings{Smoothing::modified_kneser_ney()};
};

struct HmmSettings {
    std::size_t em_max_iter = 500;
    std::size_t gs_samples = 500;
    std::size_t polish_iters = 50;
    double dirichlet = 0.1;
    double rel_tol = 1e-5;
};

struct PcfgSettings {
    std::size_t em_max_iter = 200;
    std::size_t gs_samples = 200;
    std::size_t polish_iters = 50;
    double dirichlet = 0.1;
    double rel_tol = 1e-5;
    std::optional<double> kappa = 0.5416;  // empty: derive from the mean training length
    std::optional<double> eta;             // empty: 0.01 / N_Delta
    std::string init = "random";           // random | hmm
    std::size_t max_length = 64;           // longer training sequences are skipped
};

inline const std::vector<std::size_t>& default_sizes(ModelKind kind) {
    static const std::vector<std::size_t> markov{1, 2, 3};
    static const std::vector<std::size_t> hmm{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15, 20, 25,
                                              30, 40, 50, 60, 70, 80, 90, 100};
    static const std::vector<std::size_t> pcfg{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15, 20};
    switch (kind) {
    case ModelKind::markov: return markov;
    case ModelKind::hmm: return hmm;
    case ModelKind::pcfg: return pcfg;
    }
    return hmm;
}

struct ExperimentConfig {
    fs::path corpus;
    fs::path data_dir = "data";
    std::size_t vocab_size = 10;  // K; the symbol space has K + 1 entries
    std::size_t test_count = 500;
    std::optional<double> test_fraction;  // overrides test_count when set
    std::size_t min_length = 1;
    std::uint64_t split_seed = 0;
    std::vector<std::size_t> train_sizes{30, 300, 0};  // 0: the whole training split
    ModelKind model = ModelKind::hmm;
    std::vector<std::size_t> sizes;  // empty: default grid for the model kind
    std::vector<std::string> algorithms{"em", "gs"};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    MarkovSettings markov;
    HmmSettings hmm;
    PcfgSettings pcfg;

    const std::vector<std::size_t>& size_grid() const { return sizes.empty() ? default_sizes(model) : sizes; }

    /// Fields that change what a training cell computes. Grids, paths and
    /// seeds lists are excluded so cells stay comparable across sweeps.
    Json training_json() const {
        Json j;
        j["vocab_size"] = vocab_size;
        j["test_count"] = test_count;
        j["test_fraction"] = test_fraction ? Json(*test_fraction) : Json();
        j["min_length"] = min_length;
        j["split_seed"] = split_seed;
        j["model"] = to_string(model);
        Json s = Json::array();
        for (const auto& sm : markov.smoothings) s.push_back(sm.tag());
        j["markov"] = {{"smoothing", s}};
        j["hmm"] = {{"em_max_iter", hmm.em_max_iter},
                    {"gs_samples", hmm.gs_samples},
                    {"polish_iters", hmm.polish_iters},
                    {"dirichlet", hmm.dirichlet},
                    {"rel_tol", hmm.rel_tol}};
        j["pcfg"] = {{"em_max_iter", pcfg.em_max_iter},
                     {"gs_samples", pcfg.gs_samples},
                     {"polish_iters", pcfg.polish_iters},
                     {"dirichlet", pcfg.dirichlet},
                     {"rel_tol", pcfg.rel_tol},
                     {"kappa", pcfg.kappa ? Json(*pcfg.kappa) : Json("auto")},
                     {"eta", pcfg.eta ? Json(*pcfg.eta) : Json()},
                     {"init", pcfg.init},
                     {"max_length", pcfg.max_length}};
        return j;
    }

    std::uint64_t training_hash() const { return fnv1a(training_json().dump()); }

    /// Full effective configuration (every default filled in).
    Json to_json() const {
        Json j = training_json();
        j["corpus"] = corpus.string();
        j["data_dir"] = data_dir.string();
        j["train_sizes"] = train_sizes;
        j["sizes"] = size_grid();
        j["algorithms"] = algorithms;
        j["seeds"] = seeds;
        if (!test_fraction) j.erase("test_fraction");
        if (!pcfg.eta) j["pcfg"].erase("eta");
        return j;
    }
};

namespace detail {

/// Reads typed fields from a JSON object and rejects keys nobody asked for.
class JsonFields {
public:
    JsonFields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw Error("parse", where_ + " must be a JSON object");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }

    const Json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!has(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw Error("parse", where_ + "." + key + " has the wrong type");
        }
    }

    std::size_t count(const std::string& key, std::size_t fallback, std::size_t min = 0) {
        std::size_t v = fallback;
        if (has(key)) {
            const Json& x = j_.at(key);
            if (!x.is_number_integer() || x.get<long long>() < 0)
                throw Error("parse", where_ + "." + key + " must be a non-negative integer");
            v = x.get<std::size_t>();
        }
        if (v < min) throw invalid_argument(where_ + "." + key + " must be >= " + std::to_string(min));
        return v;
    }

    double positive(const std::string& key, double fallback) {
        double v = fallback;
        get(key, v);
        if (!(v > 0.0)) throw invalid_argument(where_ + "." + key + " must be > 0");
        return v;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) throw Error("parse", "unknown config key " + where_ + "." + key);
    }

private:
    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline std::vector<Smoothing> parse_smoothings(const Json& j) {
    std::vector<Smoothing> out;
    auto one = [&](const Json& s) {
        if (!s.is_string()) throw Error("parse", "markov.smoothing entries must be strings");
        out.push_back(Smoothing::parse(s.get<std::string>()));
    };
    if (j.is_array()) {
        for (const auto& s : j) one(s);
    } else {
        one(j);
    }
    if (out.empty()) throw invalid_argument("markov.smoothing must not be empty");
    return out;
}

}  // namespace detail

/// Parses a config document. Relative paths resolve against `base_dir`.
inline ExperimentConfig parse_config(const Json& j, const fs::path& base_dir = {}) {
    ExperimentConfig c;
    detail::JsonFields f(j, "config");
    std::string text;
    if (f.has("corpus")) {
        f.get("corpus", text);
        c.corpus = base_dir / text;
    }
    if (f.has("data_dir")) {
        f.get("data_dir", text);
        c.data_dir = base_dir / text;
    } else {
        c.data_dir = base_dir / c.data_dir;
    }
    c.vocab_size = f.count("vocab_size", c.vocab_size, 1);
    c.test_count = f.count("test_count", c.test_count);
    if (f.has("test_fraction")) {
        double frac = 0.0;
        f.get("test_fraction", frac);
        if (!(frac >= 0.0 && frac < 1.0)) throw invalid_argument("config.test_fraction must lie in [0, 1)");
        c.test_fraction = frac;
    }
    c.min_length = f.count("min_length", c.min_length, 1);
    f.get("split_seed", c.split_seed);
    f.get("train_sizes", c.train_sizes);
    if (f.has("model")) {
        f.get("model", text);
        c.model = parse_model_kind(text);
    }
    f.get("sizes", c.sizes);
    for (auto s : c.sizes)
        if (s < 1) throw invalid_argument("config.sizes entries must be >= 1");
    f.get("algorithms", c.algorithms);
    for (const auto& a : c.algorithms)
        if (a != "em" && a != "gs") throw invalid_argument("unknown algorithm '" + a + "' (expected em or gs)");
    f.get("seeds", c.seeds);
    if (c.seeds.empty() || c.algorithms.empty() || c.train_sizes.empty())
        throw invalid_argument("config.seeds, config.algorithms and config.train_sizes must not be empty");

    if (f.has("markov")) {
        detail::JsonFields m(f.raw("markov"), "config.markov");
        if (m.has("smoothing")) c.markov.smoothings = detail::parse_smoothings(m.raw("smoothing"));
        m.finish();
    }
    if (f.has("hmm")) {
        detail::JsonFields h(f.raw("hmm"), "config.hmm");
        c.hmm.em_max_iter = h.count("em_max_iter", c.hmm.em_max_iter);
        c.hmm.gs_samples = h.count("gs_samples", c.hmm.gs_samples, 1);
        c.hmm.polish_iters = h.count("polish_iters", c.hmm.polish_iters);
        c.hmm.dirichlet = h.positive("dirichlet", c.hmm.dirichlet);
        c.hmm.rel_tol = h.positive("rel_tol", c.hmm.rel_tol);
        h.finish();
    }
    if (f.has("pcfg")) {
        detail::JsonFields p(f.raw("pcfg"), "config.pcfg");
        c.pcfg.em_max_iter = p.count("em_max_iter", c.pcfg.em_max_iter);
        c.pcfg.gs_samples = p.count("gs_samples", c.pcfg.gs_samples, 1);
        c.pcfg.polish_iters = p.count("polish_iters", c.pcfg.polish_iters);
        c.pcfg.dirichlet = p.positive("dirichlet", c.pcfg.dirichlet);
        c.pcfg.rel_tol = p.positive("rel_tol", c.pcfg.rel_tol);
        if (p.has("kappa")) {
            const Json& k = p.raw("kappa");
            if (k.is_string() && k.get<std::string>() == "auto") {
                c.pcfg.kappa.reset();
            } else if (k.is_number()) {
                c.pcfg.kappa = k.get<double>();
                if (!(*c.pcfg.kappa > 0.5 && *c.pcfg.kappa <= 1.0))
                    throw invalid_argument("config.pcfg.kappa must lie in (1/2, 1]");
            } else {
                throw Error("parse", "config.pcfg.kappa must be a number or \"auto\"");
            }
        }
        if (p.has("eta")) {
            double eta = 0.0;
            p.get("eta", eta);
            if (!(eta >= 0.0)) throw invalid_argument("config.pcfg.eta must be >= 0");
            c.pcfg.eta = eta;
        }
        p.get("init", c.pcfg.init);
        if (c.pcfg.init != "random" && c.pcfg.init != "hmm")
            throw invalid_argument("config.pcfg.init must be random or hmm");
        c.pcfg.max_length = p.count("max_length", c.pcfg.max_length, 2);
        p.finish();
    }
    f.finish();
    return c;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("io", "cannot write " + path.string());
    out << bytes;
    if (!out.flush()) throw Error("io", "failed writing " + path.string());
}

inline ExperimentConfig load_config(const fs::path& path) {
    const std::string text = read_file(path);
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error("parse", path.string() + ": " + e.what());
    }
    return parse_config(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Dataset preparation

struct PreparedData {
    Vocabulary vocab;
    EncodedDataset train;
    EncodedDataset test;
    std::map<std::size_t, EncodedDataset> subsets;  // by sequence count

    /// Training subset for a configured size (0 = all).
    const EncodedDataset& train_subset(std::size_t requested) const {
        const std::size_t n = requested == 0 ? train.size() : requested;
        auto it = subsets.find(n);
        if (it == subsets.end())
            throw invalid_argument("training size " + std::to_string(n) + " was not prepared (rerun prepare)");
        return it->second;
    }
};

inline std::size_t resolved_test_count(const ExperimentConfig& c, std::size_t n_sequences) {
    if (c.test_fraction) return static_cast<std::size_t>(std::llround(*c.test_fraction * static_cast<double>(n_sequences)));
    return c.test_count;
}

inline std::size_t resolved_train_size(std::size_t requested, std::size_t train_total) {
    return requested == 0 ? train_total : requested;
}

/// Builds vocabulary, split and nested subsets from corpus text.
inline PreparedData prepare_data(const ExperimentConfig& c, std::string_view corpus_text) {
    auto seqs = parse_corpus(corpus_text);
    std::erase_if(seqs, [&](const ChordSequence& s) { return s.size() < c.min_length; });
    PreparedData out;
    out.vocab = build_vocabulary(seqs, c.vocab_size);
    const auto encoded = encode(seqs, out.vocab);
    auto parts = split(encoded, resolved_test_count(c, encoded.size()), c.split_seed);
    out.train = std::move(parts.train);
    out.test = std::move(parts.test);
    for (std::size_t requested : c.train_sizes) {
        const std::size_t n = resolved_train_size(requested, out.train.size());
        if (n < 1 || n > out.train.size())
            throw invalid_argument("training size " + std::to_string(n) + " outside [1, " +
                                   std::to_string(out.train.size()) + "]");
        out.subsets.emplace(n, subsample(out.train, n, c.split_seed));
    }
    return out;
}

inline Json prepare_summary(const ExperimentConfig& c, const PreparedData& d, std::string_view corpus_text) {
    Json j;
    j["format"] = "chordgram-prepare 1";
    j["corpus_hash"] = hex64(fnv1a(corpus_text));
    j["vocab_size"] = c.vocab_size;
    j["n_symbols"] = d.vocab.size();
    j["vocab_hash"] = hex64(d.vocab.hash());
    j["min_length"] = c.min_length;
    j["split_seed"] = c.split_seed;
    j["n_train"] = d.train.size();
    j["n_test"] = d.test.size();
    j["train_symbols"] = d.train.symbol_count();
    j["test_symbols"] = d.test.symbol_count();
    j["mean_train_length"] = d.train.mean_length();
    Json sizes = Json::array();
    for (const auto& [n, subset] : d.subsets) sizes.push_back(n);
    j["train_sizes"] = sizes;
    return j;
}

inline std::string encoded_text(const EncodedDataset& d) {
    std::ostringstream os;
    write_encoded(os, d);
    return os.str();
}

inline fs::path subset_path(const fs::path& dir, std::size_t n) { return dir / ("train_" + std::to_string(n) + ".txt"); }

/// Writes vocab.tsv, train.txt, test.txt, train_<n>.txt and prepare.json.
/// Outputs depend only on the corpus bytes and the config.
inline PreparedData cmd_prepare(const ExperimentConfig& c) {
    if (c.corpus.empty()) throw invalid_argument("config has no corpus path");
    const std::string text = read_file(c.corpus);
    PreparedData d = prepare_data(c, text);
    fs::create_directories(c.data_dir);
    std::ostringstream vocab;
    d.vocab.write(vocab);
    write_file(c.data_dir / "vocab.tsv", vocab.str());
    write_file(c.data_dir / "train.txt", encoded_text(d.train));
    write_file(c.data_dir / "test.txt", encoded_text(d.test));
    for (const auto& [n, subset] : d.subsets) write_file(subset_path(c.data_dir, n), encoded_text(subset));
    write_file(c.data_dir / "prepare.json", prepare_summary(c, d, text).dump(2) + "\n");
    return d;
}

inline Vocabulary load_vocabulary(const fs::path& path) {
    std::istringstream in(read_file(path));
    return Vocabulary::read(in);
}

inline EncodedDataset load_encoded(const fs::path& path, std::size_t vocab_size) {
    std::istringstream in(read_file(path));
    return read_encoded(in, vocab_size);
}

/// Reads what cmd_prepare wrote and checks it matches the config.
inline PreparedData load_prepared(const ExperimentConfig& c) {
    const fs::path& dir = c.data_dir;
    if (!fs::exists(dir / "prepare.json"))
        throw Error("io", "no prepared data in " + dir.string() + " (run prepare first)");
    Json summary;
    try {
        summary = Json::parse(read_file(dir / "prepare.json"));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error("parse", "prepare.json: " + std::string(e.what()));
    }
    PreparedData d;
    d.vocab = load_vocabulary(dir / "vocab.tsv");
    const std::size_t v = d.vocab.size();
    d.train = load_encoded(dir / "train.txt", v);
    d.test = load_encoded(dir / "test.txt", v);
    if (summary.value("vocab_size", std::size_t{0}) != c.vocab_size ||
        summary.value("split_seed", std::uint64_t{0}) != c.split_seed ||
        summary.value("min_length", std::size_t{0}) != c.min_length ||
        summary.value("vocab_hash", std::string()) != hex64(d.vocab.hash()))
        throw invalid_argument("prepared data in " + dir.string() + " does not match the config (rerun prepare)");
    for (std::size_t requested : c.train_sizes) {
        const std::size_t n = resolved_train_size(requested, d.train.size());
        if (!fs::exists(subset_path(dir, n)))
            throw invalid_argument("training size " + std::to_string(n) + " was not prepared (rerun prepare)");
        d.subsets.emplace(n, load_encoded(subset_path(dir, n), v));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Models

using AnyModel = std::variant<MarkovModel, HmmParams, PcfgParams>;

inline ModelKind kind_of(const AnyModel& m) { return static_cast<ModelKind>(m.index()); }

inline std::size_t size_of(const AnyModel& m) {
    return std::visit(
        [](const auto& x) -> std::size_t {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, MarkovModel>) return x.order();
            else if constexpr (std::is_same_v<T, HmmParams>) return x.n_states();
            else return x.n_nonterminals();
        },
        m);
}

inline std::size_t vocab_size_of(const AnyModel& m) {
    return std::visit([](const auto& x) -> std::size_t { return x.vocab_size(); }, m);
}

inline std::string model_text(const AnyModel& m, std::uint64_t vocab_hash) {
    std::ostringstream os;
    std::visit([&](const auto& x) { x.write(os, vocab_hash); }, m);
    return os.str();
}

struct LoadedModel {
    AnyModel model;
    std::uint64_t vocab_hash = 0;
};

inline LoadedModel read_model(std::istream& is) {
    ModelReader r(is);
    const std::string kind = r.begin();
    const std::uint64_t hash = r.hash_field();
    if (kind == "markov") return {MarkovModel::read_body(r), hash};
    if (kind == "hmm") return {HmmParams::read_body(r), hash};
    if (kind == "pcfg") return {PcfgParams::read_body(r), hash};
    throw Error("parse", "unknown model kind '" + kind + "'");
}

inline LoadedModel load_model(const fs::path& path) {
    std::istringstream in(read_file(path));
    return read_model(in);
}

/// Fails unless the model was trained against `vocab`.
inline void check_vocabulary(const LoadedModel& m, const Vocabulary& vocab) {
    if (m.vocab_hash != vocab.hash() || vocab_size_of(m.model) != vocab.size())
        throw invalid_argument("model was trained with a different vocabulary (hash " + hex64(m.vocab_hash) +
                               ", vocabulary has " + hex64(vocab.hash()) + ")");
}

inline EvalReport evaluate_model(const AnyModel& m, const EncodedDataset& data) {
    return std::visit(
        [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, MarkovModel>) return evaluate(MarkovScorer(x), data);
            else if constexpr (std::is_same_v<T, HmmParams>) return evaluate(HmmScorer(x), data);
            else return evaluate(PcfgScorer(x), data);
        },
        m);
}

inline double model_perplexity(const AnyModel& m, const EncodedDataset& data) {
    return std::visit(
        [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, MarkovModel>) return perplexity(MarkovScorer(x), data);
            else if constexpr (std::is_same_v<T, HmmParams>) return perplexity(HmmScorer(x), data);
            else return perplexity(PcfgScorer(x), data);
        },
        m);
}

// ---------------------------------------------------------------------------
// Training cells

struct CellSpec {
    ModelKind kind = ModelKind::hmm;
    std::size_t size = 1;
    std::size_t train_size = 0;  // resolved sequence count
    std::string algo;            // em | gs, or the smoothing tag for Markov models
    std::optional<std::uint64_t> seed;  // Markov fits are deterministic and have none

    std::string coordinates() const {
        return to_string(kind) + "/" + std::to_string(size) + "/" + std::to_string(train_size) + "/" + algo + "/" +
               (seed ? std::to_string(*seed) : std::string("-"));
    }
};

struct LogRow {
    std::string phase;
    std::size_t iteration = 0;
    double log_likelihood = 0.0;
};

struct TrainedCell {
    AnyModel model;
    std::vector<LogRow> log;
    EncodedDataset train_used;  // after PCFG length filtering
};

inline std::uint64_t cell_seed(const ExperimentConfig& c, const CellSpec& cell) {
    return mix_seed(c.training_hash(), fnv1a(cell.coordinates()));
}

namespace detail {

inline void append_trace(std::vector<LogRow>& log, const std::string& phase, const std::vector<double>& trace) {
    for (std::size_t i = 0; i < trace.size(); ++i) log.push_back({phase, i, trace[i]});
}

inline HmmParams train_hmm(const HmmSettings& s, std::size_t states, const EncodedDataset& train,
                           const std::string& algo, std::uint64_t seed, std::vector<LogRow>& log,
                           const std::string& prefix) {
    HmmParams init = init_random_hmm(states, train.vocab_size, seed);
    if (algo == "em") {
        auto r = em_fit(std::move(init), train, {s.em_max_iter, s.rel_tol});
        append_trace(log, prefix + "em", r.trace);
        return std::move(r.params);
    }
    auto r = gibbs_fit(std::move(init), train, HmmHyper::symmetric(states, train.vocab_size, s.dirichlet),
                       {s.gs_samples, s.polish_iters, s.rel_tol, mix_seed(seed, 1)});
    append_trace(log, prefix + "gs", r.sample_trace);
    append_trace(log, prefix + "polish", r.polish_trace);
    return std::move(r.params);
}

}  // namespace detail

/// Training sequences a PCFG can use: length 2..max_length.
inline EncodedDataset pcfg_training_data(const EncodedDataset& train, std::size_t max_length) {
    EncodedDataset out;
    out.vocab_size = train.vocab_size;
    for (const auto& s : train.sequences)
        if (s.size() >= 2 && s.size() <= max_length) out.sequences.push_back(s);
    if (out.empty())
        throw invalid_argument("no training sequences with length in [2, " + std::to_string(max_length) + "]");
    return out;
}

/// kappa from the config, or derived from the mean training length.
inline double pcfg_kappa(const PcfgSettings& s, const EncodedDataset& full_train) {
    if (s.kappa) return *s.kappa;
    return std::min(1.0, kappa_for_mean_length(full_train.mean_length()));
}

inline TrainedCell train_cell(const ExperimentConfig& c, const PreparedData& data, const CellSpec& cell) {
    const EncodedDataset& train = data.train_subset(cell.train_size);
    TrainedCell out{MarkovModel(), {}, {}};
    switch (cell.kind) {
    case ModelKind::markov: {
        auto m = fit_markov(train, cell.size, Smoothing::parse(cell.algo));
        double ll = 0.0;
        for (const auto& s : train.sequences) ll += m.log_evidence(s);
        out.log.push_back({"fit", 0, ll});
        out.model = std::move(m);
        out.train_used = train;
        break;
    }
    case ModelKind::hmm: {
        if (!cell.seed) throw invalid_argument("HMM training needs a seed");
        out.model = detail::train_hmm(c.hmm, cell.size, train, cell.algo, cell_seed(c, cell), out.log, "");
        out.train_used = train;
        break;
    }
    case ModelKind::pcfg: {
        if (!cell.seed) throw invalid_argument("PCFG training needs a seed");
        const PcfgSettings& s = c.pcfg;
        const std::uint64_t seed = cell_seed(c, cell);
        out.train_used = pcfg_training_data(train, s.max_length);
        const std::size_t n = cell.size, v = train.vocab_size;
        PcfgParams init;
        if (s.init == "hmm") {
            const HmmParams h = detail::train_hmm(c.hmm, n, train, cell.algo, mix_seed(seed, 2), out.log, "hmm_");
            init = init_from_hmm(h, pcfg_kappa(s, data.train), s.eta ? *s.eta : 0.01 / static_cast<double>(n));
        } else {
            init = init_random_pcfg(n, v, seed);
        }
        if (cell.algo == "em") {
            auto r = em_fit(std::move(init), out.train_used, {s.em_max_iter, s.rel_tol});
            detail::append_trace(out.log, "em", r.trace);
            out.model = std::move(r.params);
        } else {
            auto r = gibbs_fit(std::move(init), out.train_used, PcfgHyper::symmetric(n, v, s.dirichlet),
                               {s.gs_samples, s.polish_iters, s.rel_tol, mix_seed(seed, 1)});
            detail::append_trace(out.log, "gs", r.sample_trace);
            detail::append_trace(out.log, "polish", r.polish_trace);
            out.model = std::move(r.params);
        }
        break;
    }
    }
    return out;
}

inline std::string log_csv(const std::vector<LogRow>& log) {
    std::ostringstream os;
    os << "phase,iteration,log_likelihood\n";
    for (const auto& r : log) os << r.phase << ',' << r.iteration << ',' << format_double(r.log_likelihood) << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Sweeps

struct ResultRow {
    CellSpec cell;
    std::uint64_t param_count = 0;
    bool ok = false;
    std::string status;
    double train_perplexity = 0.0;
    double test_perplexity = 0.0;
    double error_rate = 0.0;
    double rmrr = 0.0;
    std::optional<double> wall_time;
    bool best_by_train = false;
    bool best_by_test = false;
};

inline const char* kResultsHeader =
    "model,size,param_count,N_X,seed,algo,train_perplexity,test_perplexity,error_rate,rmrr,wall_time,"
    "best_by_train,best_by_test,status";

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch == '\n' ? ' ' : ch;
    }
    return out + "\"";
}

inline std::string result_csv_row(const ResultRow& r) {
    std::ostringstream os;
    auto metric = [&](double v) { return r.ok ? format_double(v) : std::string("NA"); };
    os << to_string(r.cell.kind) << ',' << r.cell.size << ',' << r.param_count << ',' << r.cell.train_size << ','
       << (r.cell.seed ? std::to_string(*r.cell.seed) : std::string("NA")) << ',' << r.cell.algo << ','
       << metric(r.train_perplexity) << ',' << metric(r.test_perplexity) << ',' << metric(r.error_rate) << ','
       << metric(r.rmrr) << ',' << (r.wall_time ? format_double(*r.wall_time) : std::string("NA")) << ','
       << (r.best_by_train ? 1 : 0) << ',' << (r.best_by_test ? 1 : 0) << ',' << csv_field(r.status);
    return os.str();
}

/// Markov cells: sizes x train sizes x smoothings (no seeds). HMM/PCFG
/// cells: sizes x train sizes x algorithms x seeds. Row order follows that
/// nesting.
inline std::vector<CellSpec> sweep_cells(const ExperimentConfig& c, const PreparedData& data) {
    std::vector<CellSpec> cells;
    std::vector<std::size_t> train_sizes;
    for (std::size_t requested : c.train_sizes) {
        const std::size_t n = resolved_train_size(requested, data.train.size());
        if (std::find(train_sizes.begin(), train_sizes.end(), n) == train_sizes.end()) train_sizes.push_back(n);
    }
    for (std::size_t size : c.size_grid())
        for (std::size_t n : train_sizes) {
            if (c.model == ModelKind::markov) {
                for (const auto& s : c.markov.smoothings) cells.push_back({c.model, size, n, s.tag(), std::nullopt});
                continue;
            }
            for (const auto& algo : c.algorithms)
                for (auto seed : c.seeds) cells.push_back({c.model, size, n, algo, seed});
        }
    return cells;
}

inline fs::path model_file_name(const CellSpec& cell) {
    std::string algo = cell.algo;
    std::replace(algo.begin(), algo.end(), ' ', '-');
    return to_string(cell.kind) + "_" + std::to_string(cell.size) + "_" + std::to_string(cell.train_size) + "_" +
           algo + (cell.seed ? "_" + std::to_string(*cell.seed) : std::string()) + ".txt";
}

struct SweepOptions {
    std::size_t jobs = 1;
    bool timing = false;
    fs::path models_dir;  // empty: models are not written
};

inline ResultRow run_cell(const ExperimentConfig& c, const PreparedData& data, const CellSpec& cell,
                          const SweepOptions& opt) {
    ResultRow row;
    row.cell = cell;
    row.param_count = param_count(cell.kind, cell.size, data.vocab.size());
    const auto start = std::chrono::steady_clock::now();
    try {
        TrainedCell t = train_cell(c, data, cell);
        row.train_perplexity = model_perplexity(t.model, t.train_used);
        const EvalReport test = evaluate_model(t.model, data.test);
        row.test_perplexity = test.perplexity;
        row.error_rate = test.error_rate;
        row.rmrr = test.rmrr;
        if (!opt.models_dir.empty()) {
            write_file(opt.models_dir / model_file_name(cell), model_text(t.model, data.vocab.hash()));
            write_file(opt.models_dir / model_file_name(cell).replace_extension(".log.csv"), log_csv(t.log));
        }
        row.ok = true;
        row.status = "ok";
    } catch (const Error& e) {
        row.status = "error: " + e.kind() + ": " + e.what();
    } catch (const std::exception& e) {
        row.status = std::string("error: internal: ") + e.what();
    }
    if (opt.timing)
        row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return row;
}

/// Flags, per (model, size, N_X, algo), the seed with the lowest training
/// and the lowest test perplexity; ties go to the earlier row.
inline void mark_best(std::vector<ResultRow>& rows) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> best;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i].ok) continue;
        const auto& cell = rows[i].cell;
        const std::string key = to_string(cell.kind) + "/" + std::to_string(cell.size) + "/" +
                                std::to_string(cell.train_size) + "/" + cell.algo;
        auto it = best.find(key);
        if (it == best.end()) {
            best.emplace(key, std::pair{i, i});
            continue;
        }
        if (rows[i].train_perplexity < rows[it->second.first].train_perplexity) it->second.first = i;
        if (rows[i].test_perplexity < rows[it->second.second].test_perplexity) it->second.second = i;
    }
    for (const auto& [key, idx] : best) {
        rows[idx.first].best_by_train = true;
        rows[idx.second].best_by_test = true;
    }
}

inline std::vector<ResultRow> run_sweep(const ExperimentConfig& c, const PreparedData& data,
                                        const SweepOptions& opt = {}) {
    const auto cells = sweep_cells(c, data);
    if (!opt.models_dir.empty()) fs::create_directories(opt.models_dir);
    std::vector<ResultRow> rows(cells.size());
    const std::size_t jobs = std::max<std::size_t>(1, std::min(opt.jobs, cells.size()));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) rows[i] = run_cell(c, data, cells[i], opt);
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    mark_best(rows);
    return rows;
}

inline std::string results_csv(const std::vector<ResultRow>& rows) {
    std::string out = std::string(kResultsHeader) + "\n";
    for (const auto& r : rows) out += result_csv_row(r) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Structure reports and generation

namespace detail {

inline Json top_entries(std::span<const double> probs, const Vocabulary& vocab, std::size_t top) {
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    Json out = Json::array();
    for (std::size_t i = 0; i < std::min(top, order.size()); ++i)
        out.push_back({{"symbol", vocab.symbol(static_cast<SymbolId>(order[i]))}, {"probability", probs[order[i]]}});
    return out;
}

inline std::string nonterminal_name(std::size_t z) { return "z" + std::to_string(z + 1); }

}  // namespace detail

/// JSON report: HMM structure measures and per-state top emissions, or PCFG
/// per-nonterminal top emissions and rules above `threshold`.
inline Json analyze_model(const AnyModel& m, const Vocabulary& vocab, std::size_t top = 12, double threshold = 0.05) {
    Json out;
    if (const auto* h = std::get_if<HmmParams>(&m)) {
        const auto stat = stationary_distribution(*h);
        const auto im = info_measures(*h);
        out["kind"] = "hmm";
        out["states"] = h->n_states();
        out["vocab_size"] = h->vocab_size();
        out["measures"] = {{"stationary_perplexity", im.stationary_perplexity},
                           {"output_perplexity", im.output_perplexity},
                           {"association_variety", im.association_variety},
                           {"transition_perplexity", im.transition_perplexity}};
        Json states = Json::array();
        for (std::size_t z = 0; z < h->n_states(); ++z) {
            Json trans = Json::array();
            for (std::size_t w = 0; w < h->n_states(); ++w)
                if (h->transition(z, w) > threshold)
                    trans.push_back({{"to", w + 1}, {"probability", h->transition(z, w)}});
            states.push_back({{"state", z + 1},
                              {"stationary", stat[z]},
                              {"initial", h->initial[z]},
                              {"top_emissions", detail::top_entries(h->output.row(z), vocab, top)},
                              {"transitions", trans}});
        }
        out["state_details"] = states;
        return out;
    }
    if (const auto* p = std::get_if<PcfgParams>(&m)) {
        const std::size_t n = p->n_nonterminals();
        out["kind"] = "pcfg";
        out["nonterminals"] = n;
        out["vocab_size"] = p->vocab_size();
        out["threshold"] = threshold;
        auto rules_of = [&](std::span<const double> binary, const std::string& lhs) {
            std::vector<std::pair<double, std::size_t>> picked;
            for (std::size_t lr = 0; lr < binary.size(); ++lr)
                if (binary[lr] > threshold) picked.push_back({binary[lr], lr});
            std::stable_sort(picked.begin(), picked.end(), [](auto& a, auto& b) { return a.first > b.first; });
            Json rules = Json::array();
            for (const auto& [prob, lr] : picked)
                rules.push_back({{"rule", lhs + " -> " + detail::nonterminal_name(lr / n) + " " +
                                              detail::nonterminal_name(lr % n)},
                                 {"probability", prob}});
            return rules;
        };
        out["start_rules"] = rules_of(p->start_binary.data(), "S");
        Json nts = Json::array();
        for (std::size_t z = 0; z < n; ++z) {
            const auto term = p->terminal.row(z);
            nts.push_back({{"nonterminal", detail::nonterminal_name(z)},
                           {"emission_probability", sum(term)},
                           {"top_emissions", detail::top_entries(term, vocab, top)},
                           {"rules", rules_of(p->binary.row(z), detail::nonterminal_name(z))}});
        }
        out["nonterminal_details"] = nts;
        return out;
    }
    throw invalid_argument("Markov models have no latent structure to analyze");
}

struct Generated {
    std::vector<std::string> lines;  // decoded sequences
    std::vector<std::string> trees;  // bracketed derivations (PCFG only)
};

/// `count` sequences. HMM and Markov models need `length`; PCFGs decide their
/// own length and reject one.
inline Generated generate(const AnyModel& m, const Vocabulary& vocab, std::size_t count, std::uint64_t seed,
                          std::optional<std::size_t> length) {
    Rng rng(seed);
    Generated out;
    auto line = [&](const Sequence& s) {
        std::string text;
        for (std::size_t i = 0; i < s.size(); ++i) text += (i ? " " : "") + vocab.symbol(s[i]);
        return text;
    };
    const bool pcfg = std::holds_alternative<PcfgParams>(m);
    if (pcfg && length) throw invalid_argument("PCFG sequences terminate on their own; do not pass a length");
    if (!pcfg && !length) throw invalid_argument("Markov and HMM generation needs an explicit length");
    for (std::size_t i = 0; i < count; ++i) {
        if (const auto* p = std::get_if<PcfgParams>(&m)) {
            const auto tree = sample_tree(*p, rng);
            out.lines.push_back(line(tree.yield()));
            out.trees.push_back(tree.bracketed([&](SymbolId id) { return vocab.symbol(id); }));
        } else if (const auto* h = std::get_if<HmmParams>(&m)) {
            out.lines.push_back(line(sample_sequence(*h, *length, rng)));
        } else {
            out.lines.push_back(line(std::get<MarkovModel>(m).sample_sequence(*length, rng)));
        }
    }
    return out;
}

}  // namespace chordgram

#endif  // CHORDGRAM_EXPERIMENT_HPP
