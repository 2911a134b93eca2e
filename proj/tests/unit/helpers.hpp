#pragma once

#include "kvprune/data.hpp"
#include "kvprune/model.hpp"
#include "kvprune/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace kvtest {

using namespace kvprune;

inline std::string source_path(const std::string & rel) { return std::string(KVPRUNE_SOURCE_DIR) + "/" + rel; }

inline Matrix random_matrix(size_t r, size_t c, Rng & rng, double scale = 1.0) {
    Matrix m(r, c);
    for (double & v : m.values()) {
        v = rng.normal() * scale;
    }
    return m;
}

inline ModelConfig tiny_config(size_t blocks = 2, size_t d = 16, size_t heads = 2, size_t seq = 16) {
    ModelConfig c;
    c.d_model = d;
    c.n_blocks = blocks;
    c.n_heads = heads;
    c.base_head_dim = d / heads;
    c.ffn_hidden = 2 * d;
    c.max_seq_len = seq;
    return c;
}

// Freshly initialized model with norm gains and embeddings jittered so no tensor is trivially uniform.
inline Checkpoint tiny_model(uint64_t seed = 1, const ModelConfig & cfg = tiny_config()) {
    Checkpoint ck = init_checkpoint(cfg, seed);
    Rng rng(seed, 99);
    auto jitter = [&](Matrix & m, double s) {
        for (double & v : m.values()) {
            v += rng.normal() * s;
        }
    };
    for (auto & b : ck.weights.blocks) {
        jitter(b.attn_norm, 0.1);
        jitter(b.ffn_norm, 0.1);
        jitter(b.wq, 0.2);
        jitter(b.wk, 0.2);
    }
    jitter(ck.weights.final_norm, 0.1);
    jitter(ck.weights.head, 0.1);
    return ck;
}

inline std::vector<int> random_tokens(size_t n, Rng & rng, size_t vocab = kVocabSize) {
    std::vector<int> t(n);
    for (int & x : t) {
        x = (int) rng.below(vocab);
    }
    return t;
}

inline Batch random_batch_of(size_t batch, size_t seq, Rng & rng) {
    Batch b;
    b.batch_size = batch;
    b.seq_len = seq;
    b.inputs = random_tokens(batch * seq, rng);
    b.targets = random_tokens(batch * seq, rng);
    b.offsets.assign(batch, 0);
    return b;
}

inline Corpus bundled_corpus(uint64_t seed = 0) {
    return load_corpus(source_path("data/alice.txt"), {0.8, 0.08, 0.12}, seed);
}

inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

} // namespace kvtest
