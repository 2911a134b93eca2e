#pragma once

#include "kvprune/data.hpp"
#include "kvprune/numerics.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace kvprune {

// fixed_original keeps the attention scale at base_head_dim^-1/2 after pruning,
// recomputed uses the current per-head channel count.
enum class ScaleMode { fixed_original, recomputed };

const char * scale_mode_name(ScaleMode m);
ScaleMode scale_mode_from_name(const std::string & name);

struct ModelConfig {
    size_t vocab_size = kVocabSize;
    size_t d_model = 64;
    size_t n_blocks = 2;
    size_t n_heads = 2;
    size_t base_head_dim = 32;
    size_t ffn_hidden = 256;
    size_t max_seq_len = 128;
    ScaleMode scale_mode = ScaleMode::fixed_original;

    // Pre-surgery shape rules: d_model == n_heads * base_head_dim, all dims >= 1.
    void validate() const;
};

// One decoder block. Attention channel i is row i of wq/wk/wv and column i of wo;
// channel_heads[i] is the head it belongs to (sorted ascending).
struct BlockWeights {
    Matrix wq;        // c x d_model
    Matrix wk;        // c x d_model
    Matrix wv;        // c x d_model
    Matrix wo;        // d_model x c
    Matrix w_up;      // ffn_hidden x d_model
    Matrix w_down;    // d_model x ffn_hidden
    Matrix attn_norm; // 1 x d_model
    Matrix ffn_norm;  // 1 x d_model
    std::vector<int> channel_heads;

    size_t channels() const noexcept { return wq.rows(); }
    // head h owns channels [offsets[h], offsets[h + 1])
    std::vector<size_t> head_offsets(size_t n_heads) const;
};

struct Weights {
    Matrix tok_emb;    // vocab x d_model
    Matrix pos_emb;    // max_seq_len x d_model
    std::vector<BlockWeights> blocks;
    Matrix final_norm; // 1 x d_model
    Matrix head;       // vocab x d_model
};

// Visits every tensor with its stable name, in serialization order.
template <typename W, typename F>
void for_each_tensor(W & w, F && f) {
    f(std::string("tok_emb"), w.tok_emb);
    f(std::string("pos_emb"), w.pos_emb);
    for (size_t i = 0; i < w.blocks.size(); ++i) {
        auto & b = w.blocks[i];
        const std::string p = "blocks." + std::to_string(i) + ".";
        f(p + "wq", b.wq);
        f(p + "wk", b.wk);
        f(p + "wv", b.wv);
        f(p + "wo", b.wo);
        f(p + "w_up", b.w_up);
        f(p + "w_down", b.w_down);
        f(p + "attn_norm", b.attn_norm);
        f(p + "ffn_norm", b.ffn_norm);
    }
    f(std::string("final_norm"), w.final_norm);
    f(std::string("head"), w.head);
}

std::vector<Matrix *> tensor_ptrs(Weights & w);
std::vector<const Matrix *> tensor_ptrs(const Weights & w);

// Same shapes and channel maps, all zeros.
Weights zeros_like(const Weights & w);

struct TrainingMeta {
    uint64_t steps = 0;
    uint64_t seed = 0;
    double final_loss = 0.0;
    std::string note;
};

struct Checkpoint {
    ModelConfig config;
    Weights weights;
    TrainingMeta meta;

    size_t parameter_count() const;
    // Checks tensor shapes against config and channel maps; throws SchemaError.
    void validate() const;
};

Checkpoint init_checkpoint(const ModelConfig & config, uint64_t seed);

// Projection matrices inside a block that can carry a low-rank term.
enum class Proj { wq, wk, wv, wo, w_up, w_down };

const char * proj_name(Proj p);
Proj proj_from_name(const std::string & name);
Matrix & block_proj(BlockWeights & b, Proj p);
const Matrix & block_proj(const BlockWeights & b, Proj p);

// Adds scale * A * B to the named projection without materializing it.
struct LowRankTerm {
    size_t block = 0;
    Proj proj = Proj::wq;
    const Matrix * a = nullptr; // out x r
    const Matrix * b = nullptr; // r x in
    double scale = 1.0;
};

struct ForwardOptions {
    // Blocks whose attention sub-layer output is replaced by zero (residual passes through).
    std::vector<bool> ablate_attention;
    std::vector<LowRankTerm> low_rank;
};

// Logits for every position: row b * seq_len + t, vocab columns.
Matrix forward(const Checkpoint & ckpt, std::span<const int> inputs, size_t batch, size_t seq_len,
               const ForwardOptions & opts = {});
Matrix forward(const Checkpoint & ckpt, const Batch & batch, const ForwardOptions & opts = {});

struct NllSum {
    double total = 0.0;
    size_t count = 0;
    double mean() const { return total / (double) count; }
};

// Summed token NLL over the batches (pure forward).
NllSum batch_nll(const Checkpoint & ckpt, std::span<const Batch> batches, const ForwardOptions & opts = {});

struct GradientSet {
    double loss = 0.0;
    Weights grads;
};

// Gradient of the mean over batches of each batch's mean cross-entropy.
GradientSet loss_and_grads(const Checkpoint & ckpt, std::span<const Batch> batches);

// Lower-level entry used by the trainers: accumulates scale * dLoss/dW into grads
// and returns the batch mean loss.
double accumulate_grads(const ModelConfig & config, const Weights & weights, const Batch & batch, Weights & grads,
                        double scale);

// Greedy decoding, argmax ties toward the lower token id. All prompts must share a length.
std::vector<std::vector<int>> generate(const Checkpoint & ckpt, const std::vector<std::vector<int>> & prompts,
                                       size_t n_new, bool use_cache);
std::vector<int> generate(const Checkpoint & ckpt, const std::vector<int> & prompt, size_t n_new, bool use_cache);

size_t argmax_lowest(std::span<const double> row);

// Adam moments over a Weights-shaped parameter set.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    void step(std::span<Matrix * const> params, std::span<const Matrix * const> grads, double lr);
};

// L2 norm over all tensors; rescales grads in place when above max_norm.
double clip_grad_norm(std::span<Matrix * const> grads, double max_norm);

struct TrainOptions {
    size_t steps = 200;
    double lr = 3e-3;
    uint64_t seed = 0;
    size_t batch_size = 8;
    size_t seq_len = 64;
    size_t warmup_steps = 20;
    double grad_clip = 1.0;
    std::function<void(size_t step, double loss)> on_step;
};

// Adam on the train split; stops with TrainingError on a non-finite loss.
Checkpoint train(const Checkpoint & ckpt, const Corpus & corpus, const TrainOptions & opts);

double lr_at(const TrainOptions & opts, size_t step);

} // namespace kvprune
