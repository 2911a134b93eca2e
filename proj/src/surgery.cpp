#include "kvprune/surgery.hpp"

#include "kvprune/checkpoint_io.hpp"
#include "kvprune/errors.hpp"

#include <algorithm>

namespace kvprune {

uint64_t kv_bytes(const Checkpoint & ckpt, size_t batch, size_t seq_len, size_t bytes_per_element) {
    uint64_t total = 0;
    for (const auto & b : ckpt.weights.blocks) {
        const uint64_t kc = b.wk.rows(), vc = b.wv.rows();
        total += (kc + vc) * seq_len * batch * bytes_per_element;
    }
    return total;
}

namespace {

std::vector<bool> keep_flags(const BlockMask & bm, size_t channels, size_t block) {
    std::vector<bool> keep(channels, true);
    for (size_t j = 0; j < bm.removed.size(); ++j) {
        const size_t idx = bm.removed[j];
        if (idx >= channels) {
            throw SchemaError("mask for block " + std::to_string(block) + " removes channel " + std::to_string(idx) +
                              " of " + std::to_string(channels));
        }
        if (j > 0 && idx <= bm.removed[j - 1]) {
            throw SchemaError("mask for block " + std::to_string(block) + " is not sorted and unique");
        }
        keep[idx] = false;
    }
    return keep;
}

Matrix keep_rows(const Matrix & m, const std::vector<bool> & keep) {
    std::vector<double> data;
    size_t n = 0;
    for (size_t r = 0; r < m.rows(); ++r) {
        if (keep[r]) {
            auto row = m.row(r);
            data.insert(data.end(), row.begin(), row.end());
            ++n;
        }
    }
    return Matrix(n, m.cols(), std::move(data));
}

Matrix keep_cols(const Matrix & m, const std::vector<bool> & keep) {
    const size_t n = (size_t) std::count(keep.begin(), keep.end(), true);
    Matrix out(m.rows(), n);
    for (size_t r = 0; r < m.rows(); ++r) {
        size_t j = 0;
        for (size_t c = 0; c < m.cols(); ++c) {
            if (keep[c]) {
                out(r, j++) = m(r, c);
            }
        }
    }
    return out;
}

size_t ref_seq(const Checkpoint & c, const KvReference & ref) { return ref.seq_len ? ref.seq_len : c.config.max_seq_len; }

} // namespace

std::pair<Checkpoint, SurgeryRecord> apply_mask(const Checkpoint & ckpt, const PruneMask & mask, const KvReference & ref) {
    const size_t n = ckpt.weights.blocks.size();
    if (mask.blocks.size() != n) {
        throw SchemaError("mask covers " + std::to_string(mask.blocks.size()) + " blocks, checkpoint has " +
                          std::to_string(n));
    }
    SurgeryRecord rec;
    rec.source_hash = checkpoint_hash(ckpt);
    rec.mask = mask;
    rec.params_before = ckpt.parameter_count();
    rec.kv_reference = ref;
    rec.kv_bytes_before = kv_bytes(ckpt, ref.batch, ref_seq(ckpt, ref), ref.bytes_per_element);

    Checkpoint out = ckpt;
    for (size_t i = 0; i < n; ++i) {
        auto & b = out.weights.blocks[i];
        const size_t c = b.channels();
        const auto & bm = mask.blocks[i];
        if (bm.channels_before != c) {
            throw SchemaError("mask for block " + std::to_string(i) + " expects " + std::to_string(bm.channels_before) +
                              " channels, block has " + std::to_string(c));
        }
        const auto keep = keep_flags(bm, c, i);
        rec.channels_before.push_back(c);
        if (!bm.removed.empty()) {
            b.wq = keep_rows(b.wq, keep);
            b.wk = keep_rows(b.wk, keep);
            b.wv = keep_rows(b.wv, keep);
            b.wo = keep_cols(b.wo, keep);
            std::vector<int> heads;
            for (size_t j = 0; j < c; ++j) {
                if (keep[j]) {
                    heads.push_back(b.channel_heads[j]);
                }
            }
            b.channel_heads = std::move(heads);
        }
        rec.channels_after.push_back(b.channels());
        const auto off = b.head_offsets(out.config.n_heads);
        std::vector<size_t> per_head;
        for (size_t h = 0; h < out.config.n_heads; ++h) {
            per_head.push_back(off[h + 1] - off[h]);
        }
        rec.head_channels_after.push_back(std::move(per_head));
    }
    rec.params_after = out.parameter_count();
    rec.kv_bytes_after = kv_bytes(out, ref.batch, ref_seq(out, ref), ref.bytes_per_element);
    return {std::move(out), std::move(rec)};
}

VerificationReport verify(const Checkpoint & before, const Checkpoint & after, const SurgeryRecord & rec) {
    VerificationReport v;
    auto fail = [&](std::string msg) {
        v.passed = false;
        v.failures.push_back(std::move(msg));
    };
    try {
        after.validate();
    } catch (const std::exception & e) {
        fail(std::string("after checkpoint invalid: ") + e.what());
    }
    const size_t n = before.weights.blocks.size();
    if (after.weights.blocks.size() != n) {
        fail("block count changed");
        return v;
    }
    if (rec.mask.blocks.size() != n || rec.channels_before.size() != n || rec.channels_after.size() != n) {
        fail("record does not cover every block");
        return v;
    }
    size_t removed_total = 0;
    for (size_t i = 0; i < n; ++i) {
        const size_t cb = before.weights.blocks[i].channels(), ca = after.weights.blocks[i].channels();
        const size_t m = rec.mask.blocks[i].removed.size();
        removed_total += m;
        if (rec.channels_before[i] != cb) {
            fail("channels_before[" + std::to_string(i) + "] = " + std::to_string(rec.channels_before[i]) +
                 ", checkpoint has " + std::to_string(cb));
        }
        if (rec.channels_after[i] != ca) {
            fail("channels_after[" + std::to_string(i) + "] = " + std::to_string(rec.channels_after[i]) +
                 ", checkpoint has " + std::to_string(ca));
        }
        if (rec.channels_after[i] + m != rec.channels_before[i]) {
            fail("channels_after[" + std::to_string(i) + "] != channels_before - |mask|");
        }
    }
    if (rec.params_before != before.parameter_count()) {
        fail("params_before = " + std::to_string(rec.params_before) + ", checkpoint has " +
             std::to_string(before.parameter_count()));
    }
    if (rec.params_after != after.parameter_count()) {
        fail("params_after = " + std::to_string(rec.params_after) + ", checkpoint has " +
             std::to_string(after.parameter_count()));
    }
    const size_t expected_delta = removed_total * 4 * before.config.d_model;
    if (rec.params_before < rec.params_after || rec.params_before - rec.params_after != expected_delta) {
        fail("params delta is not |mask| * 4 * d_model = " + std::to_string(expected_delta));
    }
    const auto & ref = rec.kv_reference;
    if (rec.kv_bytes_before != kv_bytes(before, ref.batch, ref_seq(before, ref), ref.bytes_per_element)) {
        fail("kv_bytes_before does not match the source checkpoint");
    }
    if (rec.kv_bytes_after != kv_bytes(after, ref.batch, ref_seq(after, ref), ref.bytes_per_element)) {
        fail("kv_bytes_after does not match the pruned checkpoint");
    }
    for_each_tensor(after.weights, [&](const std::string & name, const Matrix & m) {
        if (!m.all_finite()) {
            fail("tensor " + name + " contains non-finite values");
        }
    });
    if (v.passed) {
        try {
            const size_t T = std::min<size_t>(8, after.config.max_seq_len);
            std::vector<int> probe(T);
            for (size_t t = 0; t < T; ++t) {
                probe[t] = (int) ((t * 37 + 11) % after.config.vocab_size);
            }
            if (!forward(after, probe, 1, T).all_finite()) {
                fail("probe forward produced non-finite logits");
            }
        } catch (const std::exception & e) {
            fail(std::string("probe forward failed: ") + e.what());
        }
    }
    return v;
}

ojson to_json(const SurgeryRecord & r) {
    ojson j;
    j["source_hash"] = r.source_hash;
    j["mask"] = to_json(r.mask);
    j["channels_before"] = r.channels_before;
    j["channels_after"] = r.channels_after;
    j["head_channels_after"] = r.head_channels_after;
    j["params_before"] = r.params_before;
    j["params_after"] = r.params_after;
    j["kv_reference"] = {{"batch", r.kv_reference.batch},
                         {"seq_len", r.kv_reference.seq_len},
                         {"bytes_per_element", r.kv_reference.bytes_per_element}};
    j["kv_bytes_before"] = r.kv_bytes_before;
    j["kv_bytes_after"] = r.kv_bytes_after;
    return j;
}

SurgeryRecord surgery_record_from_json(const ojson & j) {
    try {
        SurgeryRecord r;
        r.source_hash = j.at("source_hash").get<std::string>();
        r.mask = prune_mask_from_json(j.at("mask"));
        r.channels_before = j.at("channels_before").get<std::vector<size_t>>();
        r.channels_after = j.at("channels_after").get<std::vector<size_t>>();
        r.head_channels_after = j.at("head_channels_after").get<std::vector<std::vector<size_t>>>();
        r.params_before = j.at("params_before").get<size_t>();
        r.params_after = j.at("params_after").get<size_t>();
        const auto & k = j.at("kv_reference");
        r.kv_reference = {k.at("batch").get<size_t>(), k.at("seq_len").get<size_t>(),
                          k.at("bytes_per_element").get<size_t>()};
        r.kv_bytes_before = j.at("kv_bytes_before").get<uint64_t>();
        r.kv_bytes_after = j.at("kv_bytes_after").get<uint64_t>();
        return r;
    } catch (const nlohmann::json::exception & e) {
        throw SchemaError(std::string("surgery record: ") + e.what());
    }
}

} // namespace kvprune
