#include "kvprune/model.hpp"

#include "kvprune/errors.hpp"

#include "eigen_view.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace kvprune {

using detail::EMat;
using detail::view;

const char * scale_mode_name(ScaleMode m) {
    return m == ScaleMode::fixed_original ? "fixed-original" : "recomputed";
}

ScaleMode scale_mode_from_name(const std::string & name) {
    if (name == "fixed-original") return ScaleMode::fixed_original;
    if (name == "recomputed") return ScaleMode::recomputed;
    throw ConfigError("unknown attention_scale_mode '" + name + "'");
}

void ModelConfig::validate() const {
    if (vocab_size != (size_t) kVocabSize) {
        throw ConfigError("vocab_size must be 256 for the byte vocabulary");
    }
    if (d_model == 0 || n_blocks == 0 || n_heads == 0 || base_head_dim == 0 || ffn_hidden == 0 || max_seq_len == 0) {
        throw ConfigError("all model dimensions must be >= 1");
    }
    if (d_model != n_heads * base_head_dim) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") != n_heads * base_head_dim (" +
                          std::to_string(n_heads) + " * " + std::to_string(base_head_dim) + ")");
    }
}

const char * proj_name(Proj p) {
    switch (p) {
        case Proj::wq: return "wq";
        case Proj::wk: return "wk";
        case Proj::wv: return "wv";
        case Proj::wo: return "wo";
        case Proj::w_up: return "w_up";
        case Proj::w_down: return "w_down";
    }
    return "?";
}

Proj proj_from_name(const std::string & name) {
    for (Proj p : {Proj::wq, Proj::wk, Proj::wv, Proj::wo, Proj::w_up, Proj::w_down}) {
        if (name == proj_name(p)) {
            return p;
        }
    }
    throw ConfigError("unknown projection '" + name + "'");
}

Matrix & block_proj(BlockWeights & b, Proj p) {
    switch (p) {
        case Proj::wq: return b.wq;
        case Proj::wk: return b.wk;
        case Proj::wv: return b.wv;
        case Proj::wo: return b.wo;
        case Proj::w_up: return b.w_up;
        case Proj::w_down: return b.w_down;
    }
    return b.wq;
}

const Matrix & block_proj(const BlockWeights & b, Proj p) { return block_proj(const_cast<BlockWeights &>(b), p); }

std::vector<size_t> BlockWeights::head_offsets(size_t n_heads) const {
    std::vector<size_t> off(n_heads + 1, 0);
    for (int h : channel_heads) {
        off[(size_t) h + 1]++;
    }
    for (size_t h = 0; h < n_heads; ++h) {
        off[h + 1] += off[h];
    }
    return off;
}

std::vector<Matrix *> tensor_ptrs(Weights & w) {
    std::vector<Matrix *> out;
    for_each_tensor(w, [&](const std::string &, Matrix & m) { out.push_back(&m); });
    return out;
}

std::vector<const Matrix *> tensor_ptrs(const Weights & w) {
    std::vector<const Matrix *> out;
    for_each_tensor(w, [&](const std::string &, const Matrix & m) { out.push_back(&m); });
    return out;
}

Weights zeros_like(const Weights & w) {
    Weights z = w;
    for_each_tensor(z, [](const std::string &, Matrix & m) { m.fill(0.0); });
    return z;
}

size_t Checkpoint::parameter_count() const {
    size_t n = 0;
    for_each_tensor(weights, [&](const std::string &, const Matrix & m) { n += m.size(); });
    return n;
}

void Checkpoint::validate() const {
    const auto & c = config;
    auto expect = [](const Matrix & m, size_t r, size_t cols, const std::string & name) {
        if (m.rows() != r || m.cols() != cols) {
            throw SchemaError("tensor " + name + " has shape " + m.shape_str() + ", expected (" + std::to_string(r) +
                              "x" + std::to_string(cols) + ")");
        }
    };
    expect(weights.tok_emb, c.vocab_size, c.d_model, "tok_emb");
    expect(weights.pos_emb, c.max_seq_len, c.d_model, "pos_emb");
    expect(weights.final_norm, 1, c.d_model, "final_norm");
    expect(weights.head, c.vocab_size, c.d_model, "head");
    if (weights.blocks.size() != c.n_blocks) {
        throw SchemaError("checkpoint has " + std::to_string(weights.blocks.size()) + " blocks, config says " +
                          std::to_string(c.n_blocks));
    }
    for (size_t i = 0; i < weights.blocks.size(); ++i) {
        const auto & b = weights.blocks[i];
        const std::string p = "blocks." + std::to_string(i) + ".";
        const size_t ch = b.wq.rows();
        expect(b.wq, ch, c.d_model, p + "wq");
        expect(b.wk, ch, c.d_model, p + "wk");
        expect(b.wv, ch, c.d_model, p + "wv");
        expect(b.wo, c.d_model, ch, p + "wo");
        expect(b.w_up, c.ffn_hidden, c.d_model, p + "w_up");
        expect(b.w_down, c.d_model, c.ffn_hidden, p + "w_down");
        expect(b.attn_norm, 1, c.d_model, p + "attn_norm");
        expect(b.ffn_norm, 1, c.d_model, p + "ffn_norm");
        if (b.channel_heads.size() != ch) {
            throw SchemaError(p + "channel_map has " + std::to_string(b.channel_heads.size()) + " entries for " +
                              std::to_string(ch) + " channels");
        }
        for (size_t j = 0; j < ch; ++j) {
            const int h = b.channel_heads[j];
            if (h < 0 || (size_t) h >= c.n_heads) {
                throw SchemaError(p + "channel_map entry " + std::to_string(j) + " names head " + std::to_string(h));
            }
            if (j > 0 && h < b.channel_heads[j - 1]) {
                throw SchemaError(p + "channel_map is not sorted by head");
            }
        }
    }
}

Checkpoint init_checkpoint(const ModelConfig & config, uint64_t seed) {
    config.validate();
    Rng rng(seed, 0x1417);
    auto randn = [&](size_t r, size_t c, double std) {
        Matrix m(r, c);
        for (double & v : m.values()) {
            v = rng.normal() * std;
        }
        return m;
    };
    const size_t d = config.d_model;
    const double proj_std = 1.0 / std::sqrt((double) d);
    const double out_std = proj_std / std::sqrt(2.0 * (double) config.n_blocks);

    Checkpoint ck;
    ck.config = config;
    ck.meta.seed = seed;
    auto & w = ck.weights;
    w.tok_emb = randn(config.vocab_size, d, 0.1);
    w.pos_emb = randn(config.max_seq_len, d, 0.02);
    for (size_t i = 0; i < config.n_blocks; ++i) {
        BlockWeights b;
        b.wq = randn(d, d, proj_std);
        b.wk = randn(d, d, proj_std);
        b.wv = randn(d, d, proj_std);
        b.wo = randn(d, d, out_std);
        b.w_up = randn(config.ffn_hidden, d, proj_std);
        b.w_down = randn(d, config.ffn_hidden, out_std / std::sqrt((double) config.ffn_hidden / (double) d));
        b.attn_norm = Matrix(1, d, 1.0);
        b.ffn_norm = Matrix(1, d, 1.0);
        b.channel_heads.resize(d);
        for (size_t j = 0; j < d; ++j) {
            b.channel_heads[j] = (int) (j / config.base_head_dim);
        }
        w.blocks.push_back(std::move(b));
    }
    w.final_norm = Matrix(1, d, 1.0);
    w.head = randn(config.vocab_size, d, proj_std);
    return ck;
}

namespace {

constexpr double kNormEps = 1e-5;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5));
    const double pdf = std::exp(-0.5 * x * x) * (0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

void rmsnorm_forward(const Matrix & x, const Matrix & gain, Matrix & out, std::vector<double> & inv_rms) {
    const size_t n = x.rows(), d = x.cols();
    out = Matrix(n, d);
    inv_rms.resize(n);
    for (size_t r = 0; r < n; ++r) {
        auto xr = x.row(r);
        double ss = 0.0;
        for (double v : xr) {
            ss += v * v;
        }
        const double inv = 1.0 / std::sqrt(ss / (double) d + kNormEps);
        inv_rms[r] = inv;
        auto o = out.row(r);
        for (size_t j = 0; j < d; ++j) {
            o[j] = xr[j] * inv * gain.data()[j];
        }
    }
}

void rmsnorm_backward(const Matrix & x, const Matrix & gain, const std::vector<double> & inv_rms, const Matrix & dout,
                      Matrix & dx, Matrix & dgain) {
    const size_t n = x.rows(), d = x.cols();
    for (size_t r = 0; r < n; ++r) {
        auto xr = x.row(r);
        auto dy = dout.row(r);
        auto dxr = dx.row(r);
        const double inv = inv_rms[r];
        double dot = 0.0;
        for (size_t j = 0; j < d; ++j) {
            const double dyg = dy[j] * gain.data()[j];
            dot += dyg * xr[j];
            dgain.data()[j] += dy[j] * xr[j] * inv;
        }
        const double coef = inv * inv * inv * dot / (double) d;
        for (size_t j = 0; j < d; ++j) {
            dxr[j] += inv * dy[j] * gain.data()[j] - coef * xr[j];
        }
    }
}

double attention_scale(const ModelConfig & cfg, size_t head_channels) {
    const size_t dim = cfg.scale_mode == ScaleMode::fixed_original ? cfg.base_head_dim : head_channels;
    return 1.0 / std::sqrt((double) std::max<size_t>(dim, 1));
}

struct BlockCache {
    bool ablated = false;
    Matrix x_in;
    std::vector<double> r1;
    Matrix h1;
    Matrix q, k, v;
    std::vector<EMat> probs; // (b * n_heads + h), T x T
    Matrix attn;
    Matrix x_mid;
    std::vector<double> r2;
    Matrix h2;
    Matrix u;
    Matrix g;
};

struct ForwardCache {
    size_t batch = 0;
    size_t seq = 0;
    std::vector<BlockCache> blocks;
    Matrix x_final;
    std::vector<double> rf;
    Matrix hf;
    Matrix logits;
};

void check_inputs(const ModelConfig & cfg, std::span<const int> inputs, size_t batch, size_t seq_len) {
    if (seq_len == 0 || seq_len > cfg.max_seq_len) {
        throw ConfigError("sequence length " + std::to_string(seq_len) + " outside [1, max_seq_len=" +
                          std::to_string(cfg.max_seq_len) + "]");
    }
    if (inputs.size() != batch * seq_len) {
        throw DimensionError("got " + std::to_string(inputs.size()) + " tokens for batch " + std::to_string(batch) +
                             " x seq " + std::to_string(seq_len));
    }
    for (int t : inputs) {
        if (t < 0 || (size_t) t >= cfg.vocab_size) {
            throw IndexError("input token " + std::to_string(t) + " outside vocab");
        }
    }
}

// Causal multi-head attention over each head's own channel range.
void attention_forward(const ModelConfig & cfg, const BlockWeights & bw, size_t B, size_t T, const Matrix & q,
                       const Matrix & k, const Matrix & v, Matrix & attn, std::vector<EMat> * probs) {
    const size_t c = bw.channels();
    attn = Matrix(B * T, c);
    if (probs) {
        probs->assign(B * cfg.n_heads, EMat());
    }
    const auto off = bw.head_offsets(cfg.n_heads);
    auto Q = view(q);
    auto K = view(k);
    auto V = view(v);
    auto A = view(attn);
    for (size_t b = 0; b < B; ++b) {
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const size_t s = off[h], n = off[h + 1] - off[h];
            if (n == 0) {
                continue;
            }
            const auto row0 = (Eigen::Index) (b * T);
            EMat S = Q.block(row0, (Eigen::Index) s, (Eigen::Index) T, (Eigen::Index) n) *
                     K.block(row0, (Eigen::Index) s, (Eigen::Index) T, (Eigen::Index) n).transpose();
            S *= attention_scale(cfg, n);
            for (size_t i = 0; i < T; ++i) {
                double * r = S.data() + i * T;
                softmax_inplace(std::span<double>(r, i + 1));
                std::fill(r + i + 1, r + T, 0.0);
            }
            A.block(row0, (Eigen::Index) s, (Eigen::Index) T, (Eigen::Index) n).noalias() =
                S * V.block(row0, (Eigen::Index) s, (Eigen::Index) T, (Eigen::Index) n);
            if (probs) {
                (*probs)[b * cfg.n_heads + h] = std::move(S);
            }
        }
    }
}

// x * W^T plus any low-rank terms registered for (block, proj).
Matrix project(const Matrix & x, const BlockWeights & bw, size_t block, Proj p, const ForwardOptions * opts) {
    Matrix y = matmul_nt(x, block_proj(bw, p));
    if (opts) {
        for (const auto & t : opts->low_rank) {
            if (t.block == block && t.proj == p) {
                Matrix low = matmul_nt(matmul_nt(x, *t.b), *t.a);
                low *= t.scale;
                y += low;
            }
        }
    }
    return y;
}

void ffn_forward(const BlockWeights & bw, size_t block, const ForwardOptions * opts, const Matrix & h2, Matrix & u,
                 Matrix & g) {
    u = project(h2, bw, block, Proj::w_up, opts);
    g = u;
    for (double & x : g.values()) {
        x = gelu(x);
    }
}

void run_forward(const ModelConfig & cfg, const Weights & w, std::span<const int> inputs, size_t B, size_t T,
                 const ForwardOptions & opts, ForwardCache & fc, bool keep) {
    const size_t d = cfg.d_model;
    fc.batch = B;
    fc.seq = T;
    Matrix x(B * T, d);
    for (size_t b = 0; b < B; ++b) {
        for (size_t t = 0; t < T; ++t) {
            auto xr = x.row(b * T + t);
            auto te = w.tok_emb.row((size_t) inputs[b * T + t]);
            auto pe = w.pos_emb.row(t);
            for (size_t j = 0; j < d; ++j) {
                xr[j] = te[j] + pe[j];
            }
        }
    }
    fc.blocks.assign(w.blocks.size(), BlockCache());
    const ForwardOptions * lr = opts.low_rank.empty() ? nullptr : &opts;
    for (size_t i = 0; i < w.blocks.size(); ++i) {
        const auto & bw = w.blocks[i];
        auto & bc = fc.blocks[i];
        bc.ablated = i < opts.ablate_attention.size() && opts.ablate_attention[i];
        if (keep) {
            bc.x_in = x;
        }
        if (!bc.ablated) {
            rmsnorm_forward(x, bw.attn_norm, bc.h1, bc.r1);
            bc.q = project(bc.h1, bw, i, Proj::wq, lr);
            bc.k = project(bc.h1, bw, i, Proj::wk, lr);
            bc.v = project(bc.h1, bw, i, Proj::wv, lr);
            attention_forward(cfg, bw, B, T, bc.q, bc.k, bc.v, bc.attn, keep ? &bc.probs : nullptr);
            x += project(bc.attn, bw, i, Proj::wo, lr);
        }
        if (keep) {
            bc.x_mid = x;
        }
        rmsnorm_forward(x, bw.ffn_norm, bc.h2, bc.r2);
        ffn_forward(bw, i, lr, bc.h2, bc.u, bc.g);
        x += project(bc.g, bw, i, Proj::w_down, lr);
        if (!keep) {
            bc = BlockCache();
        }
    }
    fc.x_final = std::move(x);
    rmsnorm_forward(fc.x_final, w.final_norm, fc.hf, fc.rf);
    fc.logits = matmul_nt(fc.hf, w.head);
}

// dlogits = (softmax - onehot) * scale / rows; returns mean CE.
double logits_grad(const Matrix & logits, std::span<const int> targets, double scale, Matrix & dlogits) {
    const size_t n = logits.rows();
    dlogits = logits;
    double loss = 0.0;
    for (size_t r = 0; r < n; ++r) {
        auto row = dlogits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double & v : row) {
            v = std::exp(v - mx);
            sum += v;
        }
        const int t = targets[r];
        if (t < 0 || (size_t) t >= logits.cols()) {
            throw IndexError("target " + std::to_string(t) + " outside vocab");
        }
        loss += std::log(sum) + mx - logits(r, (size_t) t);
        const double k = scale / (double) n / sum;
        for (double & v : row) {
            v *= k;
        }
        row[(size_t) t] -= scale / (double) n;
    }
    return loss / (double) n;
}

void attention_backward(const ModelConfig & cfg, const BlockWeights & bw, const BlockCache & bc, size_t B, size_t T,
                        const Matrix & dattn, Matrix & dq, Matrix & dk, Matrix & dv) {
    const size_t c = bw.channels();
    dq = Matrix(B * T, c);
    dk = Matrix(B * T, c);
    dv = Matrix(B * T, c);
    const auto off = bw.head_offsets(cfg.n_heads);
    auto Q = view(bc.q);
    auto K = view(bc.k);
    auto V = view(bc.v);
    auto dA = view(dattn);
    auto dQ = view(dq);
    auto dK = view(dk);
    auto dV = view(dv);
    for (size_t b = 0; b < B; ++b) {
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const Eigen::Index s = (Eigen::Index) off[h], n = (Eigen::Index) (off[h + 1] - off[h]);
            if (n == 0) {
                continue;
            }
            const auto r0 = (Eigen::Index) (b * T), tt = (Eigen::Index) T;
            const EMat & P = bc.probs[b * cfg.n_heads + h];
            auto dout = dA.block(r0, s, tt, n);
            dV.block(r0, s, tt, n).noalias() = P.transpose() * dout;
            EMat dP = dout * V.block(r0, s, tt, n).transpose();
            // softmax backward per row over the causal prefix
            for (Eigen::Index i = 0; i < tt; ++i) {
                double dot = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    dot += dP(i, j) * P(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) {
                    dP(i, j) = P(i, j) * (dP(i, j) - dot);
                }
                for (Eigen::Index j = i + 1; j < tt; ++j) {
                    dP(i, j) = 0.0;
                }
            }
            dP *= attention_scale(cfg, (size_t) n);
            dQ.block(r0, s, tt, n).noalias() = dP * K.block(r0, s, tt, n);
            dK.block(r0, s, tt, n).noalias() = dP.transpose() * Q.block(r0, s, tt, n);
        }
    }
}

double run_backward(const ModelConfig & cfg, const Weights & w, std::span<const int> inputs,
                    std::span<const int> targets, ForwardCache & fc, Weights & gw, double scale) {
    const size_t B = fc.batch, T = fc.seq, d = cfg.d_model;
    Matrix dlogits;
    const double loss = logits_grad(fc.logits, targets, scale, dlogits);
    matmul_tn_acc(dlogits, fc.hf, gw.head);
    Matrix dhf = matmul(dlogits, w.head);
    Matrix dx(B * T, d);
    rmsnorm_backward(fc.x_final, w.final_norm, fc.rf, dhf, dx, gw.final_norm);

    for (size_t ii = w.blocks.size(); ii-- > 0;) {
        const auto & bw = w.blocks[ii];
        auto & gb = gw.blocks[ii];
        auto & bc = fc.blocks[ii];
        // FFN
        Matrix dg = matmul(dx, bw.w_down);
        matmul_tn_acc(dx, bc.g, gb.w_down);
        for (size_t j = 0; j < dg.size(); ++j) {
            dg.values()[j] *= gelu_grad(bc.u.values()[j]);
        }
        matmul_tn_acc(dg, bc.h2, gb.w_up);
        Matrix dh2 = matmul(dg, bw.w_up);
        rmsnorm_backward(bc.x_mid, bw.ffn_norm, bc.r2, dh2, dx, gb.ffn_norm);
        // attention
        if (!bc.ablated) {
            Matrix dattn = matmul(dx, bw.wo);
            matmul_tn_acc(dx, bc.attn, gb.wo);
            Matrix dq, dk, dv;
            attention_backward(cfg, bw, bc, B, T, dattn, dq, dk, dv);
            matmul_tn_acc(dq, bc.h1, gb.wq);
            matmul_tn_acc(dk, bc.h1, gb.wk);
            matmul_tn_acc(dv, bc.h1, gb.wv);
            Matrix dh1 = matmul(dq, bw.wq);
            dh1 += matmul(dk, bw.wk);
            dh1 += matmul(dv, bw.wv);
            rmsnorm_backward(bc.x_in, bw.attn_norm, bc.r1, dh1, dx, gb.attn_norm);
        }
        bc = BlockCache();
    }
    for (size_t b = 0; b < B; ++b) {
        for (size_t t = 0; t < T; ++t) {
            auto g = dx.row(b * T + t);
            auto te = gw.tok_emb.row((size_t) inputs[b * T + t]);
            auto pe = gw.pos_emb.row(t);
            for (size_t j = 0; j < d; ++j) {
                te[j] += g[j];
                pe[j] += g[j];
            }
        }
    }
    return loss;
}

} // namespace

Matrix forward(const Checkpoint & ckpt, std::span<const int> inputs, size_t batch, size_t seq_len,
               const ForwardOptions & opts) {
    check_inputs(ckpt.config, inputs, batch, seq_len);
    ForwardCache fc;
    run_forward(ckpt.config, ckpt.weights, inputs, batch, seq_len, opts, fc, false);
    return std::move(fc.logits);
}

Matrix forward(const Checkpoint & ckpt, const Batch & batch, const ForwardOptions & opts) {
    return forward(ckpt, batch.inputs, batch.batch_size, batch.seq_len, opts);
}

NllSum batch_nll(const Checkpoint & ckpt, std::span<const Batch> batches, const ForwardOptions & opts) {
    NllSum s;
    for (const auto & b : batches) {
        const Matrix logits = forward(ckpt, b, opts);
        s.total += cross_entropy(logits, b.targets) * (double) logits.rows();
        s.count += logits.rows();
    }
    return s;
}

double accumulate_grads(const ModelConfig & config, const Weights & weights, const Batch & batch, Weights & grads,
                        double scale) {
    check_inputs(config, batch.inputs, batch.batch_size, batch.seq_len);
    ForwardCache fc;
    run_forward(config, weights, batch.inputs, batch.batch_size, batch.seq_len, {}, fc, true);
    return run_backward(config, weights, batch.inputs, batch.targets, fc, grads, scale);
}

GradientSet loss_and_grads(const Checkpoint & ckpt, std::span<const Batch> batches) {
    if (batches.empty()) {
        throw DataError("loss_and_grads needs at least one batch");
    }
    GradientSet gs;
    gs.grads = zeros_like(ckpt.weights);
    const double scale = 1.0 / (double) batches.size();
    double total = 0.0;
    for (const auto & b : batches) {
        total += accumulate_grads(ckpt.config, ckpt.weights, b, gs.grads, scale);
    }
    gs.loss = total * scale;
    return gs;
}

size_t argmax_lowest(std::span<const double> row) {
    size_t best = 0;
    for (size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) {
            best = i;
        }
    }
    return best;
}

namespace {

// Per-block K/V activations for every sequence, each with the block's own channel count.
struct KvCache {
    size_t batch = 0;
    size_t capacity = 0;
    size_t length = 0;
    std::vector<Matrix> k; // (batch * capacity) x channels_b
    std::vector<Matrix> v;
};

// Runs n new tokens per sequence (positions length .. length + n - 1) through the
// model, appending their K/V to the cache. Returns logits for the last new position.
Matrix cached_step(const Checkpoint & ckpt, KvCache & cache, const std::vector<int> & tokens, size_t n) {
    const auto & cfg = ckpt.config;
    const auto & w = ckpt.weights;
    const size_t B = cache.batch, d = cfg.d_model, p0 = cache.length;
    Matrix x(B * n, d);
    for (size_t b = 0; b < B; ++b) {
        for (size_t i = 0; i < n; ++i) {
            auto xr = x.row(b * n + i);
            auto te = w.tok_emb.row((size_t) tokens[b * n + i]);
            auto pe = w.pos_emb.row(p0 + i);
            for (size_t j = 0; j < d; ++j) {
                xr[j] = te[j] + pe[j];
            }
        }
    }
    std::vector<double> r;
    Matrix h;
    for (size_t bi = 0; bi < w.blocks.size(); ++bi) {
        const auto & bw = w.blocks[bi];
        const size_t c = bw.channels();
        rmsnorm_forward(x, bw.attn_norm, h, r);
        const Matrix q = matmul_nt(h, bw.wq);
        const Matrix k = matmul_nt(h, bw.wk);
        const Matrix v = matmul_nt(h, bw.wv);
        Matrix & kc = cache.k[bi];
        Matrix & vc = cache.v[bi];
        for (size_t b = 0; b < B; ++b) {
            for (size_t i = 0; i < n; ++i) {
                std::copy_n(k.row(b * n + i).data(), c, kc.row(b * cache.capacity + p0 + i).data());
                std::copy_n(v.row(b * n + i).data(), c, vc.row(b * cache.capacity + p0 + i).data());
            }
        }
        Matrix attn(B * n, c);
        const auto off = bw.head_offsets(cfg.n_heads);
        auto Q = view(q);
        auto Kc = view(kc);
        auto Vc = view(vc);
        auto A = view(attn);
        const auto total = (Eigen::Index) (p0 + n);
        for (size_t b = 0; b < B; ++b) {
            for (size_t hh = 0; hh < cfg.n_heads; ++hh) {
                const auto s = (Eigen::Index) off[hh], nc = (Eigen::Index) (off[hh + 1] - off[hh]);
                if (nc == 0) {
                    continue;
                }
                const auto kr0 = (Eigen::Index) (b * cache.capacity);
                EMat S = Q.block((Eigen::Index) (b * n), s, (Eigen::Index) n, nc) * Kc.block(kr0, s, total, nc).transpose();
                S *= attention_scale(cfg, (size_t) nc);
                for (size_t i = 0; i < n; ++i) {
                    double * row = S.data() + i * (size_t) total;
                    const size_t visible = p0 + i + 1;
                    softmax_inplace(std::span<double>(row, visible));
                    std::fill(row + visible, row + total, 0.0);
                }
                A.block((Eigen::Index) (b * n), s, (Eigen::Index) n, nc).noalias() = S * Vc.block(kr0, s, total, nc);
            }
        }
        x += matmul_nt(attn, bw.wo);
        Matrix u, g;
        rmsnorm_forward(x, bw.ffn_norm, h, r);
        ffn_forward(bw, bi, nullptr, h, u, g);
        x += matmul_nt(g, bw.w_down);
    }
    cache.length += n;
    Matrix last(B, d);
    for (size_t b = 0; b < B; ++b) {
        std::copy_n(x.row(b * n + n - 1).data(), d, last.row(b).data());
    }
    rmsnorm_forward(last, w.final_norm, h, r);
    return matmul_nt(h, w.head);
}

} // namespace

std::vector<std::vector<int>> generate(const Checkpoint & ckpt, const std::vector<std::vector<int>> & prompts,
                                       size_t n_new, bool use_cache) {
    const auto & cfg = ckpt.config;
    if (prompts.empty()) {
        return {};
    }
    const size_t B = prompts.size(), P = prompts[0].size();
    for (const auto & p : prompts) {
        if (p.size() != P) {
            throw ConfigError("all prompts in a generation batch must have the same length");
        }
    }
    if (P == 0) {
        throw ConfigError("prompt must contain at least one token");
    }
    for (const auto & p : prompts) {
        check_inputs(cfg, p, 1, p.size());
    }
    if (P + n_new > cfg.max_seq_len) {
        throw ConfigError("prompt length " + std::to_string(P) + " + n_new " + std::to_string(n_new) +
                          " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    std::vector<std::vector<int>> seqs = prompts;
    if (n_new == 0) {
        return seqs;
    }
    auto append_argmax = [&](const Matrix & logits, size_t row_stride, size_t row_offset) {
        for (size_t b = 0; b < B; ++b) {
            seqs[b].push_back((int) argmax_lowest(logits.row(b * row_stride + row_offset)));
        }
    };
    if (!use_cache) {
        for (size_t step = 0; step < n_new; ++step) {
            const size_t T = seqs[0].size();
            std::vector<int> flat;
            flat.reserve(B * T);
            for (const auto & s : seqs) {
                flat.insert(flat.end(), s.begin(), s.end());
            }
            const Matrix logits = forward(ckpt, flat, B, T);
            append_argmax(logits, T, T - 1);
        }
        return seqs;
    }
    KvCache cache;
    cache.batch = B;
    cache.capacity = P + n_new;
    for (const auto & bw : ckpt.weights.blocks) {
        cache.k.emplace_back(B * cache.capacity, bw.channels());
        cache.v.emplace_back(B * cache.capacity, bw.channels());
    }
    std::vector<int> flat;
    for (const auto & s : seqs) {
        flat.insert(flat.end(), s.begin(), s.end());
    }
    Matrix logits = cached_step(ckpt, cache, flat, P);
    append_argmax(logits, 1, 0);
    for (size_t step = 1; step < n_new; ++step) {
        std::vector<int> last(B);
        for (size_t b = 0; b < B; ++b) {
            last[b] = seqs[b].back();
        }
        logits = cached_step(ckpt, cache, last, 1);
        append_argmax(logits, 1, 0);
    }
    return seqs;
}

std::vector<int> generate(const Checkpoint & ckpt, const std::vector<int> & prompt, size_t n_new, bool use_cache) {
    return generate(ckpt, std::vector<std::vector<int>>{prompt}, n_new, use_cache).front();
}

void AdamState::step(std::span<Matrix * const> params, std::span<const Matrix * const> grads, double lr) {
    if (m.empty()) {
        for (const Matrix * p : params) {
            m.emplace_back(p->size(), 0.0);
            v.emplace_back(p->size(), 0.0);
        }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, (double) t);
    const double bc2 = 1.0 - std::pow(beta2, (double) t);
    for (size_t i = 0; i < params.size(); ++i) {
        auto & pv = params[i]->values();
        const auto & gv = grads[i]->values();
        auto & mi = m[i];
        auto & vi = v[i];
        for (size_t j = 0; j < pv.size(); ++j) {
            mi[j] = beta1 * mi[j] + (1.0 - beta1) * gv[j];
            vi[j] = beta2 * vi[j] + (1.0 - beta2) * gv[j] * gv[j];
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            pv[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

double clip_grad_norm(std::span<Matrix * const> grads, double max_norm) {
    double ss = 0.0;
    for (const Matrix * g : grads) {
        for (double v : g->values()) {
            ss += v * v;
        }
    }
    const double norm = std::sqrt(ss);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (Matrix * g : grads) {
            *g *= s;
        }
    }
    return norm;
}

double lr_at(const TrainOptions & opts, size_t step) {
    if (opts.warmup_steps > 0 && step < opts.warmup_steps) {
        return opts.lr * (double) (step + 1) / (double) opts.warmup_steps;
    }
    return opts.lr;
}

Checkpoint train(const Checkpoint & ckpt, const Corpus & corpus, const TrainOptions & opts) {
    if (opts.steps == 0) {
        throw ConfigError("train needs steps >= 1");
    }
    if (opts.seq_len > ckpt.config.max_seq_len) {
        throw ConfigError("train seq_len exceeds max_seq_len");
    }
    Checkpoint out = ckpt;
    Weights grads = zeros_like(out.weights);
    auto params = tensor_ptrs(out.weights);
    auto gptrs = tensor_ptrs(grads);
    std::vector<const Matrix *> cgptrs(gptrs.begin(), gptrs.end());
    AdamState adam;
    Rng rng(opts.seed, 0x7a1);
    double loss = 0.0;
    for (size_t step = 0; step < opts.steps; ++step) {
        for (Matrix * g : gptrs) {
            g->fill(0.0);
        }
        const Batch batch = random_batch(corpus, Split::train, opts.batch_size, opts.seq_len, rng);
        loss = accumulate_grads(out.config, out.weights, batch, grads, 1.0);
        if (!std::isfinite(loss)) {
            throw TrainingError("loss became non-finite at step " + std::to_string(step + 1));
        }
        clip_grad_norm(gptrs, opts.grad_clip);
        adam.step(params, cgptrs, lr_at(opts, step));
        if (opts.on_step) {
            opts.on_step(step + 1, loss);
        }
    }
    out.meta.steps += opts.steps;
    out.meta.seed = opts.seed;
    out.meta.final_loss = loss;
    return out;
}

} // namespace kvprune
