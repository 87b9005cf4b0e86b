#ifndef CHORDGRAM_MODEL_IO_HPP
#define CHORDGRAM_MODEL_IO_HPP

// Versioned plain-text model files. Layout:
//
//   chordgram-model 1
//   kind <markov|hmm|pcfg>
//   vocab-hash <16 hex digits>
//   <key> <value>            (kind-specific header fields)
//   table <name> <rows> <cols>
//   <rows lines of cols decimal probabilities>
//   ...
//   end
//
// Probabilities are written with 17 significant digits so a write/read
// cycle reproduces every double exactly.

#include <cmath>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "chordgram/common.hpp"

namespace chordgram {

inline constexpr std::string_view kModelMagic = "chordgram-model 1";

class ModelWriter {
public:
    explicit ModelWriter(std::ostream& os) : os_(os) {}

    void begin(std::string_view kind, std::uint64_t vocab_hash) {
        os_ << kModelMagic << '\n' << "kind " << kind << '\n' << "vocab-hash " << hex64(vocab_hash) << '\n';
    }

    void field(std::string_view key, const std::string& value) { os_ << key << ' ' << value << '\n'; }
    void field(std::string_view key, std::size_t value) { field(key, std::to_string(value)); }

    void table(std::string_view name, const Matrix& m) {
        os_ << "table " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
        for (std::size_t r = 0; r < m.rows(); ++r) {
            for (std::size_t c = 0; c < m.cols(); ++c) os_ << (c ? " " : "") << format_double(m(r, c));
            os_ << '\n';
        }
    }

    void table(std::string_view name, const std::vector<double>& v) {
        Matrix m(1, v.size());
        m.data() = v;
        table(name, m);
    }

    void end() { os_ << "end\n"; }

private:
    std::ostream& os_;
};

class ModelReader {
public:
    explicit ModelReader(std::istream& is) : is_(is) {}

    /// Reads the magic line and returns the model kind.
    std::string begin() {
        if (next_line() != kModelMagic) throw Error("parse", "not a chordgram model file (bad magic line)");
        return field("kind");
    }

    std::string field(std::string_view key) {
        const std::string line = next_line();
        const auto space = line.find(' ');
        if (line.substr(0, space) != key || space == std::string::npos)
            throw Error("parse", "expected model field '" + std::string(key) + "', got '" + line + "'");
        return line.substr(space + 1);
    }

    std::size_t size_field(std::string_view key) {
        const std::string v = field(key);
        std::size_t pos = 0;
        unsigned long long n = 0;
        try {
            n = std::stoull(v, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != v.size() || v.empty()) throw Error("parse", "field '" + std::string(key) + "' is not an integer");
        return static_cast<std::size_t>(n);
    }

    std::uint64_t hash_field() {
        const std::string v = field("vocab-hash");
        try {
            return std::stoull(v, nullptr, 16);
        } catch (const std::exception&) {
            throw Error("parse", "bad vocab-hash '" + v + "'");
        }
    }

    Matrix table(std::string_view name, std::size_t rows, std::size_t cols) {
        std::istringstream head(next_line());
        std::string word, got_name;
        std::size_t r = 0, c = 0;
        if (!(head >> word >> got_name >> r >> c) || word != "table" || got_name != name)
            throw Error("parse", "expected table '" + std::string(name) + "'");
        if (r != rows || c != cols)
            throw Error("parse", "table '" + std::string(name) + "' has shape " + std::to_string(r) + "x" +
                                     std::to_string(c) + ", expected " + std::to_string(rows) + "x" +
                                     std::to_string(cols));
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < rows; ++i) {
            std::istringstream line(next_line());
            for (std::size_t j = 0; j < cols; ++j) {
                std::string tok;
                if (!(line >> tok)) throw Error("parse", "short row in table '" + std::string(name) + "'");
                // strtod rather than stod: tiny subnormal probabilities are
                // valid values, not range errors.
                char* end = nullptr;
                m(i, j) = std::strtod(tok.c_str(), &end);
                if (end != tok.c_str() + tok.size() || !(m(i, j) >= 0.0) || !std::isfinite(m(i, j)))
                    throw Error("parse", "bad number '" + tok + "' in table '" + std::string(name) + "'");
            }
        }
        return m;
    }

    std::vector<double> vector_table(std::string_view name, std::size_t size) {
        return table(name, 1, size).data();
    }

    void end() {
        if (next_line() != "end") throw Error("parse", "model file missing 'end' marker");
    }

private:
    std::string next_line() {
        std::string line;
        while (std::getline(is_, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) return line;
        }
        throw Error("parse", "unexpected end of model file");
    }

    std::istream& is_;
};

}  // namespace chordgram

#endif  // CHORDGRAM_MODEL_IO_HPP
