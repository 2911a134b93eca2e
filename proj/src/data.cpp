#include "kvprune/data.hpp"

#include "kvprune/errors.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace kvprune {

std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) {
        out.push_back((int) (unsigned char) c);
    }
    return out;
}

std::string decode(const std::vector<int> & tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t >= kVocabSize) {
            throw IndexError("token " + std::to_string(t) + " is not a byte");
        }
        out.push_back((char) (unsigned char) t);
    }
    return out;
}

const char * split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::calibration: return "calibration";
        case Split::eval: return "eval";
    }
    return "?";
}

Split split_from_name(const std::string & name) {
    if (name == "train") return Split::train;
    if (name == "calibration" || name == "calib") return Split::calibration;
    if (name == "eval") return Split::eval;
    throw ConfigError("unknown split '" + name + "'");
}

const TokenRange & Corpus::range(Split s) const {
    switch (s) {
        case Split::train: return train;
        case Split::calibration: return calibration;
        case Split::eval: return eval;
    }
    return train;
}

namespace {

size_t fraction_count(double f, size_t n) {
    return (size_t) std::floor(f * (double) n + 1e-9);
}

} // namespace

Corpus make_corpus(std::string name, std::vector<int> tokens, SplitFractions fr, uint64_t seed) {
    if (!(fr.train > 0.0) || !(fr.calibration > 0.0) || !(fr.eval > 0.0)) {
        throw ConfigError("split fractions must be positive");
    }
    if (fr.train + fr.calibration + fr.eval > 1.0 + 1e-12) {
        throw ConfigError("split fractions sum to " + std::to_string(fr.train + fr.calibration + fr.eval) + " > 1");
    }
    if (tokens.empty()) {
        throw IoError("corpus '" + name + "' is empty");
    }
    const size_t n = tokens.size();
    const size_t n_train = fraction_count(fr.train, n);
    const size_t n_cal = fraction_count(fr.calibration, n);
    const size_t n_eval = fraction_count(fr.eval, n);
    const size_t slack = n - (n_train + n_cal + n_eval);

    Rng rng(seed, 0x5e11);
    const size_t start = slack ? (size_t) rng.below(slack + 1) : 0;

    Corpus c;
    c.name = std::move(name);
    c.tokens = std::move(tokens);
    c.seed = seed;
    c.train = {start, start + n_train};
    c.calibration = {c.train.end, c.train.end + n_cal};
    c.eval = {c.calibration.end, c.calibration.end + n_eval};
    return c;
}

Corpus load_corpus(const std::string & path, SplitFractions fractions, uint64_t seed) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open corpus '" + path + "'");
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) {
        throw IoError("corpus '" + path + "' is empty");
    }
    std::string name = path;
    if (auto slash = name.find_last_of('/'); slash != std::string::npos) {
        name = name.substr(slash + 1);
    }
    Corpus c = make_corpus(name, encode(bytes), fractions, seed);
    c.source_path = path;
    return c;
}

namespace {

std::vector<size_t> window_starts(const Corpus & corpus, Split split, size_t seq_len) {
    if (seq_len < 2) {
        throw ConfigError("seq_len must be at least 2");
    }
    const TokenRange & r = corpus.range(split);
    if (r.size() < seq_len + 1) {
        throw DataError(std::string(split_name(split)) + " split has " + std::to_string(r.size()) +
                        " tokens, need at least " + std::to_string(seq_len + 1));
    }
    const size_t n_windows = (r.size() - 1) / seq_len;
    std::vector<size_t> starts(n_windows);
    for (size_t w = 0; w < n_windows; ++w) {
        starts[w] = r.begin + w * seq_len;
    }
    return starts;
}

std::vector<Batch> group(const Corpus & corpus, const std::vector<size_t> & starts, size_t batch_size, size_t seq_len) {
    if (batch_size == 0) {
        throw ConfigError("batch_size must be at least 1");
    }
    std::vector<Batch> out;
    for (size_t i = 0; i < starts.size(); i += batch_size) {
        Batch b;
        b.batch_size = std::min(batch_size, starts.size() - i);
        b.seq_len = seq_len;
        b.inputs.reserve(b.batch_size * seq_len);
        b.targets.reserve(b.batch_size * seq_len);
        for (size_t j = 0; j < b.batch_size; ++j) {
            const size_t s = starts[i + j];
            b.offsets.push_back(s);
            b.inputs.insert(b.inputs.end(), corpus.tokens.begin() + (ptrdiff_t) s,
                            corpus.tokens.begin() + (ptrdiff_t) (s + seq_len));
            b.targets.insert(b.targets.end(), corpus.tokens.begin() + (ptrdiff_t) (s + 1),
                             corpus.tokens.begin() + (ptrdiff_t) (s + 1 + seq_len));
        }
        out.push_back(std::move(b));
    }
    return out;
}

} // namespace

std::vector<Batch> batches(const Corpus & corpus, Split split, size_t batch_size, size_t seq_len, uint64_t seed) {
    std::vector<size_t> starts = window_starts(corpus, split, seq_len);
    Rng rng(seed, 0xba7c);
    for (size_t i = starts.size(); i > 1; --i) {
        std::swap(starts[i - 1], starts[rng.below(i)]);
    }
    return group(corpus, starts, batch_size, seq_len);
}

std::vector<Batch> sequential_batches(const Corpus & corpus, Split split, size_t batch_size, size_t seq_len) {
    return group(corpus, window_starts(corpus, split, seq_len), batch_size, seq_len);
}

Batch random_batch(const Corpus & corpus, Split split, size_t batch_size, size_t seq_len, Rng & rng) {
    if (seq_len < 2) {
        throw ConfigError("seq_len must be at least 2");
    }
    const TokenRange & r = corpus.range(split);
    if (r.size() < seq_len + 1) {
        throw DataError(std::string(split_name(split)) + " split too short for seq_len " + std::to_string(seq_len));
    }
    const size_t span = r.size() - seq_len; // valid starts: [begin, begin + span)
    std::vector<size_t> starts(batch_size);
    for (auto & s : starts) {
        s = r.begin + (size_t) rng.below(span);
    }
    return group(corpus, starts, batch_size, seq_len).front();
}

} // namespace kvprune
