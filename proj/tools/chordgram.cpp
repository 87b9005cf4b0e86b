// chordgram command-line driver: prepare, train, sweep, evaluate, analyze,
// generate. Errors go to stderr as {"error": {"kind": ..., "message": ...}}.

#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "chordgram/experiment.hpp"

using namespace chordgram;

namespace {

/// Command-line flags mirroring ExperimentConfig fields. Values given on the
/// command line replace the config file's.
struct ConfigFlags {
    std::string config;
    std::optional<std::string> corpus, data_dir, model, smoothing, pcfg_init, kappa;
    std::optional<std::size_t> vocab_size, test_count, min_length, max_length, em_max_iter, gs_samples, polish_iters;
    std::optional<std::uint64_t> split_seed;
    std::optional<double> test_fraction, eta, dirichlet, rel_tol;
    std::vector<std::size_t> train_sizes, sizes;
    std::vector<std::string> algorithms;
    std::vector<std::uint64_t> seeds;

    void add_to(CLI::App* cmd) {
        cmd->add_option("-c,--config", config, "JSON experiment config");
        cmd->add_option("--corpus", corpus, "corpus file (one sequence per line)");
        cmd->add_option("--data-dir", data_dir, "directory for prepared data");
        cmd->add_option("--vocab-size", vocab_size, "K most frequent symbols kept; the rest become Other");
        cmd->add_option("--test-count", test_count, "number of test sequences");
        cmd->add_option("--test-fraction", test_fraction, "test share of the corpus (overrides --test-count)");
        cmd->add_option("--min-length", min_length, "drop corpus sequences shorter than this");
        cmd->add_option("--split-seed", split_seed, "seed for the train/test split and subsets");
        cmd->add_option("--train-sizes", train_sizes, "training subset sizes (0 = all)");
        cmd->add_option("--model", model, "markov | hmm | pcfg");
        cmd->add_option("--sizes", sizes, "Markov orders, HMM states or PCFG nonterminals");
        cmd->add_option("--algos", algorithms, "em and/or gs");
        cmd->add_option("--seeds", seeds, "random seeds");
        cmd->add_option("--smoothing", smoothing, "Markov smoothing: additive, \"additive EPS\", kn or mkn");
        cmd->add_option("--em-max-iter", em_max_iter, "EM iteration cap for the selected model");
        cmd->add_option("--gs-samples", gs_samples, "Gibbs samples for the selected model");
        cmd->add_option("--polish-iters", polish_iters, "EM polish iterations after Gibbs sampling");
        cmd->add_option("--dirichlet", dirichlet, "symmetric Dirichlet prior for Gibbs sampling");
        cmd->add_option("--rel-tol", rel_tol, "relative log-likelihood tolerance for EM");
        cmd->add_option("--kappa", kappa, "PCFG emission probability for HMM initialization, or auto");
        cmd->add_option("--eta", eta, "PCFG off-diagonal mass for HMM initialization");
        cmd->add_option("--pcfg-init", pcfg_init, "random | hmm");
        cmd->add_option("--max-length", max_length, "longest sequence used for PCFG training");
    }

    ExperimentConfig resolve() const {
        Json j = Json::object();
        fs::path base = fs::current_path();
        if (!config.empty()) {
            try {
                j = Json::parse(read_file(config));
            } catch (const nlohmann::json::parse_error& e) {
                throw Error("parse", config + ": " + e.what());
            }
            base = fs::absolute(config).parent_path();
        }
        if (!j.is_object()) throw Error("parse", "config must be a JSON object");
        auto section = [&]() -> Json& {
            const std::string kind = model ? *model : j.value("model", std::string("hmm"));
            return j[kind == "pcfg" ? "pcfg" : "hmm"];
        };
        if (corpus) j["corpus"] = fs::absolute(*corpus).string();
        if (data_dir) j["data_dir"] = fs::absolute(*data_dir).string();
        if (vocab_size) j["vocab_size"] = *vocab_size;
        if (test_count) j["test_count"] = *test_count;
        if (test_fraction) j["test_fraction"] = *test_fraction;
        if (min_length) j["min_length"] = *min_length;
        if (split_seed) j["split_seed"] = *split_seed;
        if (!train_sizes.empty()) j["train_sizes"] = train_sizes;
        if (model) j["model"] = *model;
        if (!sizes.empty()) j["sizes"] = sizes;
        if (!algorithms.empty()) j["algorithms"] = algorithms;
        if (!seeds.empty()) j["seeds"] = seeds;
        if (smoothing) j["markov"]["smoothing"] = *smoothing;
        if (em_max_iter) section()["em_max_iter"] = *em_max_iter;
        if (gs_samples) section()["gs_samples"] = *gs_samples;
        if (polish_iters) section()["polish_iters"] = *polish_iters;
        if (dirichlet) section()["dirichlet"] = *dirichlet;
        if (rel_tol) section()["rel_tol"] = *rel_tol;
        if (kappa) {
            if (*kappa == "auto") {
                j["pcfg"]["kappa"] = "auto";
            } else {
                try {
                    j["pcfg"]["kappa"] = std::stod(*kappa);
                } catch (const std::exception&) {
                    throw invalid_argument("--kappa must be a number or auto");
                }
            }
        }
        if (eta) j["pcfg"]["eta"] = *eta;
        if (pcfg_init) j["pcfg"]["init"] = *pcfg_init;
        if (max_length) j["pcfg"]["max_length"] = *max_length;
        return parse_config(j, base);
    }
};

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        write_file(path, text);
    }
}

void print_error(const std::string& kind, const std::string& message) {
    std::cerr << Json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Train, compare and inspect Markov, HMM and PCFG models of symbol sequences"};
    app.require_subcommand(1);

    ConfigFlags prep_flags, train_flags, sweep_flags, eval_flags;

    auto* prepare = app.add_subcommand("prepare", "build vocabulary, train/test split and training subsets");
    prep_flags.add_to(prepare);
    bool show_config = false;
    prepare->add_flag("--show-config", show_config, "print the effective config as JSON");

    auto* train = app.add_subcommand("train", "train one model");
    train_flags.add_to(train);
    std::size_t train_size = 0, size = 0;
    std::uint64_t seed = 0;
    std::string algo = "em", out, log_path;
    train->add_option("--size", size, "model size (order, states or nonterminals)")->required();
    train->add_option("--seed", seed, "random seed");
    train->add_option("--algo", algo, "em | gs (Markov models: smoothing tag, defaults to the config's first)");
    train->add_option("--train-size", train_size, "training subset size (0 = all)");
    train->add_option("-o,--out", out, "model file")->required();
    train->add_option("--log", log_path, "training log CSV (phase,iteration,log_likelihood)");

    auto* sweep = app.add_subcommand("sweep", "train and evaluate every cell of the configured grid");
    sweep_flags.add_to(sweep);
    std::string results = "-", models_dir;
    std::size_t jobs = 1;
    bool timing = false;
    sweep->add_option("-o,--out", results, "results CSV (default stdout)");
    sweep->add_option("-j,--jobs", jobs, "cells trained in parallel")->check(CLI::PositiveNumber);
    sweep->add_flag("--timing", timing, "record wall time per cell (otherwise NA)");
    sweep->add_option("--models-dir", models_dir, "also write each trained model and its log here");

    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a model file on prepared data");
    eval_flags.add_to(evaluate_cmd);
    std::string eval_model, dataset = "test";
    evaluate_cmd->add_option("model_file", eval_model, "model file")->required();
    evaluate_cmd->add_option("--dataset", dataset, "test | train")->check(CLI::IsMember({"test", "train"}));

    auto* analyze = app.add_subcommand("analyze", "report the learned categories of an HMM or PCFG");
    std::string analyze_model_path, analyze_vocab;
    std::size_t top = 12;
    double threshold = 0.05;
    analyze->add_option("model_file", analyze_model_path, "model file")->required();
    analyze->add_option("--vocab", analyze_vocab, "vocabulary file from prepare")->required();
    analyze->add_option("--top", top, "emitted symbols listed per category");
    analyze->add_option("--threshold", threshold, "smallest rule probability listed");

    auto* gen = app.add_subcommand("generate", "sample sequences from a model");
    std::string gen_model, gen_vocab;
    std::size_t count = 10;
    std::uint64_t gen_seed = 0;
    std::optional<std::size_t> length;
    bool trees = false;
    gen->add_option("model_file", gen_model, "model file")->required();
    gen->add_option("--vocab", gen_vocab, "vocabulary file from prepare")->required();
    gen->add_option("-n,--count", count, "number of sequences");
    gen->add_option("--seed", gen_seed, "random seed");
    gen->add_option("--length", length, "sequence length (Markov and HMM only)");
    gen->add_flag("--trees", trees, "print PCFG derivations instead of plain sequences");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }

    try {
        if (*prepare) {
            const auto cfg = prep_flags.resolve();
            const auto data = cmd_prepare(cfg);
            if (show_config) std::cout << cfg.to_json().dump(2) << '\n';
            std::cerr << "prepared " << data.train.size() << " training and " << data.test.size()
                      << " test sequences over " << data.vocab.size() << " symbols in " << cfg.data_dir.string()
                      << '\n';
        } else if (*train) {
            const auto cfg = train_flags.resolve();
            const auto data = load_prepared(cfg);
            CellSpec cell{cfg.model, size, resolved_train_size(train_size, data.train.size()), algo, seed};
            if (cfg.model == ModelKind::markov) {
                cell.seed.reset();
                if (train->count("--algo") == 0) cell.algo = cfg.markov.smoothings.front().tag();
                cell.algo = Smoothing::parse(cell.algo).tag();
            } else if (algo != "em" && algo != "gs") {
                throw invalid_argument("--algo must be em or gs");
            }
            if (size < 1) throw invalid_argument("--size must be >= 1");
            const auto t = train_cell(cfg, data, cell);
            write_file(out, model_text(t.model, data.vocab.hash()));
            if (!log_path.empty()) write_file(log_path, log_csv(t.log));
        } else if (*sweep) {
            const auto cfg = sweep_flags.resolve();
            const auto data = load_prepared(cfg);
            const auto rows = run_sweep(cfg, data, {jobs, timing, models_dir});
            write_output(results, results_csv(rows));
            std::size_t failed = 0;
            for (const auto& r : rows) failed += r.ok ? 0 : 1;
            if (failed) std::cerr << failed << " of " << rows.size() << " cells failed; see the status column\n";
        } else if (*evaluate_cmd) {
            const auto cfg = eval_flags.resolve();
            const auto data = load_prepared(cfg);
            const auto m = load_model(eval_model);
            check_vocabulary(m, data.vocab);
            const auto report = evaluate_model(m.model, dataset == "test" ? data.test : data.train);
            write_eval_csv_header(std::cout);
            write_eval_csv_row(std::cout, to_string(kind_of(m.model)), size_of(m.model), dataset, report);
        } else if (*analyze) {
            const auto m = load_model(analyze_model_path);
            const auto vocab = load_vocabulary(analyze_vocab);
            check_vocabulary(m, vocab);
            std::cout << analyze_model(m.model, vocab, top, threshold).dump(2) << '\n';
        } else if (*gen) {
            const auto m = load_model(gen_model);
            const auto vocab = load_vocabulary(gen_vocab);
            check_vocabulary(m, vocab);
            if (trees && !std::holds_alternative<PcfgParams>(m.model))
                throw invalid_argument("--trees needs a PCFG model");
            const auto g = generate(m.model, vocab, count, gen_seed, length);
            for (const auto& line : trees ? g.trees : g.lines) std::cout << line << '\n';
        }
    } catch (const Error& e) {
        print_error(e.kind(), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 0;
}
