#pragma once

#include "kvprune/numerics.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace kvprune {

constexpr int kVocabSize = 256;

std::vector<int> encode(std::string_view text);
std::string decode(const std::vector<int> & tokens);

enum class Split { train, calibration, eval };

const char * split_name(Split s);
Split split_from_name(const std::string & name);

struct SplitFractions {
    double train = 0.85;
    double calibration = 0.05;
    double eval = 0.10;
};

struct TokenRange {
    size_t begin = 0;
    size_t end = 0;
    size_t size() const noexcept { return end - begin; }
};

// Byte-tokenized text with three contiguous, disjoint, ordered regions.
// Tokens not covered by any region (when fractions sum below 1) are unused;
// the seed picks how much of that slack precedes the train region.
struct Corpus {
    std::string name;
    std::string source_path;
    std::vector<int> tokens;
    TokenRange train;
    TokenRange calibration;
    TokenRange eval;
    uint64_t seed = 0;

    const TokenRange & range(Split s) const;
};

Corpus make_corpus(std::string name, std::vector<int> tokens, SplitFractions fractions, uint64_t seed);
Corpus load_corpus(const std::string & path, SplitFractions fractions, uint64_t seed);

// Rows of (seq_len) inputs; targets are the inputs shifted by one within the corpus stream.
struct Batch {
    size_t batch_size = 0;
    size_t seq_len = 0;
    std::vector<int> inputs;   // batch_size * seq_len, row-major
    std::vector<int> targets;  // batch_size * seq_len, row-major
    std::vector<size_t> offsets; // corpus offset of inputs[b][0]

    std::span<const int> input_row(size_t b) const { return {inputs.data() + b * seq_len, seq_len}; }
    std::span<const int> target_row(size_t b) const { return {targets.data() + b * seq_len, seq_len}; }
};

// Partitions the split into non-overlapping windows of seq_len + 1 tokens
// (stride seq_len), shuffles window order by seed, and groups them into
// batches. The last batch may be smaller than batch_size.
std::vector<Batch> batches(const Corpus & corpus, Split split, size_t batch_size, size_t seq_len, uint64_t seed);

// Same windows in corpus order, no shuffling.
std::vector<Batch> sequential_batches(const Corpus & corpus, Split split, size_t batch_size, size_t seq_len);

// batch_size windows at uniformly random offsets inside the split.
Batch random_batch(const Corpus & corpus, Split split, size_t batch_size, size_t seq_len, Rng & rng);

} // namespace kvprune
