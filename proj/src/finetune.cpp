#include "kvprune/finetune.hpp"

#include "kvprune/errors.hpp"

#include <algorithm>
#include <cmath>

namespace kvprune {

std::vector<Proj> default_adapter_targets() {
    return {Proj::wq, Proj::wk, Proj::wv, Proj::wo, Proj::w_up, Proj::w_down};
}

std::vector<LowRankTerm> AdapterSet::terms() const {
    std::vector<LowRankTerm> out;
    for (const auto & a : adapters) {
        out.push_back({a.block, a.proj, &a.a, &a.b, scale(a)});
    }
    return out;
}

AdapterSet attach(const Checkpoint & ckpt, const AttachOptions & opts) {
    if (opts.rank == 0) {
        throw ConfigError("adapter rank must be >= 1");
    }
    AdapterSet set;
    set.rank = opts.rank;
    set.alpha = opts.alpha;
    Rng rng(opts.seed, 0xada);
    const double std = 1.0 / std::sqrt((double) opts.rank);
    for (size_t bi = 0; bi < ckpt.weights.blocks.size(); ++bi) {
        for (Proj p : opts.targets) {
            const Matrix & w = block_proj(ckpt.weights.blocks[bi], p);
            const size_t min_dim = std::min(w.rows(), w.cols());
            if (min_dim == 0) {
                continue;
            }
            size_t r = opts.rank;
            if (r > min_dim) {
                if (!opts.clamp_rank) {
                    throw ConfigError("adapter rank " + std::to_string(r) + " exceeds min dimension " +
                                      std::to_string(min_dim) + " of blocks." + std::to_string(bi) + "." +
                                      proj_name(p));
                }
                r = min_dim;
            }
            Adapter a;
            a.block = bi;
            a.proj = p;
            a.rank = r;
            a.a = Matrix(w.rows(), r);
            for (double & v : a.a.values()) {
                v = rng.normal() * std;
            }
            a.b = Matrix(r, w.cols());
            set.adapters.push_back(std::move(a));
        }
    }
    return set;
}

Matrix forward_with_adapters(const Checkpoint & ckpt, const AdapterSet & adapters, const Batch & batch) {
    ForwardOptions opts;
    opts.low_rank = adapters.terms();
    return forward(ckpt, batch, opts);
}

namespace {

void check_adapter(const Checkpoint & ckpt, const Adapter & a) {
    if (a.block >= ckpt.weights.blocks.size()) {
        throw SchemaError("adapter " + a.target() + " names a missing block");
    }
    const Matrix & w = block_proj(ckpt.weights.blocks[a.block], a.proj);
    if (a.a.rows() != w.rows() || a.b.cols() != w.cols() || a.a.cols() != a.rank || a.b.rows() != a.rank) {
        throw SchemaError("adapter " + a.target() + " factors " + a.a.shape_str() + " * " + a.b.shape_str() +
                          " do not fit weight " + w.shape_str());
    }
}

void merge_into(Weights & w, const AdapterSet & set) {
    for (const auto & a : set.adapters) {
        Matrix delta = matmul(a.a, a.b);
        delta *= set.scale(a);
        block_proj(w.blocks[a.block], a.proj) += delta;
    }
}

} // namespace

Checkpoint merge(const Checkpoint & ckpt, const AdapterSet & adapters) {
    for (const auto & a : adapters.adapters) {
        check_adapter(ckpt, a);
    }
    Checkpoint out = ckpt;
    merge_into(out.weights, adapters);
    return out;
}

RecoveryResult recover(const Checkpoint & ckpt, const AdapterSet & adapters, const Corpus & corpus,
                       const RecoverOptions & opts) {
    if (opts.steps == 0) {
        throw ConfigError("recover needs steps >= 1");
    }
    for (const auto & a : adapters.adapters) {
        check_adapter(ckpt, a);
    }
    RecoveryResult res;
    res.adapters = adapters;
    AdapterSet & set = res.adapters;

    std::vector<Matrix *> params;
    std::vector<Matrix> grads;
    for (auto & a : set.adapters) {
        params.push_back(&a.a);
        params.push_back(&a.b);
        grads.emplace_back(a.a.rows(), a.a.cols());
        grads.emplace_back(a.b.rows(), a.b.cols());
    }
    std::vector<Matrix *> gptrs;
    for (auto & g : grads) {
        gptrs.push_back(&g);
    }
    std::vector<const Matrix *> cg(gptrs.begin(), gptrs.end());

    AdamState adam;
    Rng rng(opts.seed, 0x4ec);
    Weights wgrad = zeros_like(ckpt.weights);
    for (size_t step = 0; step < opts.steps; ++step) {
        Weights eff = ckpt.weights;
        merge_into(eff, set);
        for (Matrix * m : tensor_ptrs(wgrad)) {
            m->fill(0.0);
        }
        const Batch batch = random_batch(corpus, Split::train, opts.batch_size, opts.seq_len, rng);
        const double loss = accumulate_grads(ckpt.config, eff, batch, wgrad, 1.0);
        if (!std::isfinite(loss)) {
            throw TrainingError("recovery loss became non-finite at step " + std::to_string(step + 1));
        }
        // dL/dA = s G Bᵀ, dL/dB = s Aᵀ G with G = dL/dW_eff
        for (size_t i = 0; i < set.adapters.size(); ++i) {
            const auto & a = set.adapters[i];
            const Matrix & g = block_proj(wgrad.blocks[a.block], a.proj);
            const double s = set.scale(a);
            grads[2 * i] = matmul_nt(g, a.b);
            grads[2 * i] *= s;
            grads[2 * i + 1] = matmul_tn(a.a, g);
            grads[2 * i + 1] *= s;
        }
        clip_grad_norm(gptrs, opts.grad_clip);
        adam.step(params, cg, opts.lr);
        res.losses.push_back(loss);
        if (opts.on_step) {
            opts.on_step(step + 1, loss);
        }
    }
    return res;
}

Checkpoint recover_full(const Checkpoint & ckpt, const Corpus & corpus, const RecoverOptions & opts) {
    TrainOptions t;
    t.steps = opts.steps;
    t.lr = opts.lr;
    t.seed = opts.seed;
    t.batch_size = opts.batch_size;
    t.seq_len = opts.seq_len;
    t.grad_clip = opts.grad_clip;
    t.warmup_steps = 0;
    t.on_step = opts.on_step;
    return train(ckpt, corpus, t);
}

} // namespace kvprune
