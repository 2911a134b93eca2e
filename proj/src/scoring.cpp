#include "kvprune/scoring.hpp"

#include "kvprune/checkpoint_io.hpp"
#include "kvprune/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace kvprune {

const char * method_name(ScoreMethod m) {
    switch (m) {
        case ScoreMethod::l1: return "l1";
        case ScoreMethod::l2: return "l2";
        case ScoreMethod::taylor: return "taylor";
    }
    return "?";
}

ScoreMethod method_from_name(const std::string & name) {
    if (name == "l1") return ScoreMethod::l1;
    if (name == "l2") return ScoreMethod::l2;
    if (name == "taylor") return ScoreMethod::taylor;
    throw ConfigError("unknown scoring method '" + name + "'");
}

const char * role_name(Role r) {
    switch (r) {
        case Role::q: return "q";
        case Role::k: return "k";
        case Role::v: return "v";
        case Role::o: return "o";
    }
    return "?";
}

namespace {

const Matrix & role_matrix(const BlockWeights & b, Role r) {
    switch (r) {
        case Role::q: return b.wq;
        case Role::k: return b.wk;
        case Role::v: return b.wv;
        case Role::o: return b.wo;
    }
    return b.wq;
}

// Sums f(w, g) over each channel's slice; g may be null.
std::vector<double> reduce_channels(const Matrix & w, const Matrix * g, bool column_channels,
                                    const std::function<double(double, double)> & f) {
    const size_t n = column_channels ? w.cols() : w.rows();
    std::vector<double> out(n, 0.0);
    for (size_t r = 0; r < w.rows(); ++r) {
        for (size_t c = 0; c < w.cols(); ++c) {
            const double gv = g ? (*g)(r, c) : 0.0;
            out[column_channels ? c : r] += f(w(r, c), gv);
        }
    }
    return out;
}

ChannelScoreTable score_with(const Checkpoint & ckpt, ScoreMethod method, const Weights * grads,
                             const std::function<double(double, double)> & f) {
    ChannelScoreTable t;
    t.method = method;
    for (size_t bi = 0; bi < ckpt.weights.blocks.size(); ++bi) {
        const auto & b = ckpt.weights.blocks[bi];
        BlockScores bs;
        for (Role r : kRoles) {
            const Matrix * g = grads ? &role_matrix(grads->blocks[bi], r) : nullptr;
            bs.roles[(size_t) r] = reduce_channels(role_matrix(b, r), g, r == Role::o, f);
        }
        t.blocks.push_back(std::move(bs));
    }
    average_qkvo(t);
    return t;
}

} // namespace

std::vector<double> channel_slice(const BlockWeights & b, Role role, size_t channel) {
    const Matrix & m = role_matrix(b, role);
    std::vector<double> out;
    if (role == Role::o) {
        for (size_t r = 0; r < m.rows(); ++r) {
            out.push_back(m(r, channel));
        }
    } else {
        auto row = m.row(channel);
        out.assign(row.begin(), row.end());
    }
    return out;
}

size_t BlockScores::channels() const {
    for (const auto & r : roles) {
        if (r) {
            return r->size();
        }
    }
    return average.size();
}

ChannelScoreTable score_l1(const Checkpoint & ckpt) {
    return score_with(ckpt, ScoreMethod::l1, nullptr, [](double w, double) { return std::abs(w); });
}

ChannelScoreTable score_l2(const Checkpoint & ckpt) {
    return score_with(ckpt, ScoreMethod::l2, nullptr, [](double w, double) { return w * w; });
}

ChannelScoreTable score_taylor(const Checkpoint & ckpt, const GradientSet & grads) {
    auto t = score_with(ckpt, ScoreMethod::taylor, &grads.grads, [](double w, double g) { return std::abs(g * w); });
    t.calibration_id = "loss=" + format_double(grads.loss);
    return t;
}

ChannelScoreTable score_taylor(const Checkpoint & ckpt, std::span<const Batch> calibration) {
    if (calibration.empty()) {
        throw DataError("Taylor scoring needs at least one calibration batch");
    }
    auto t = score_taylor(ckpt, loss_and_grads(ckpt, calibration));
    t.calibration_id = checkpoint_hash(ckpt) + ":" + std::to_string(calibration.size()) + "x" +
                       std::to_string(calibration.front().batch_size) + "x" +
                       std::to_string(calibration.front().seq_len) + "@" +
                       std::to_string(calibration.front().offsets.front());
    return t;
}

void average_qkvo(ChannelScoreTable & table) {
    for (size_t bi = 0; bi < table.blocks.size(); ++bi) {
        auto & b = table.blocks[bi];
        for (Role r : kRoles) {
            if (!b.roles[(size_t) r]) {
                throw SchemaError("block " + std::to_string(bi) + " has no " + role_name(r) + " scores for " +
                                  method_name(table.method));
            }
        }
        const size_t n = b.roles[0]->size();
        for (Role r : kRoles) {
            if (b.roles[(size_t) r]->size() != n) {
                throw SchemaError("block " + std::to_string(bi) + " role " + role_name(r) + " has a different channel count");
            }
        }
        b.average.assign(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            b.average[i] = ((*b.roles[0])[i] + (*b.roles[1])[i] + (*b.roles[2])[i] + (*b.roles[3])[i]) / 4.0;
        }
    }
}

std::vector<std::vector<double>> averaged_scores(const ChannelScoreTable & table) {
    std::vector<std::vector<double>> out;
    for (const auto & b : table.blocks) {
        out.push_back(b.average);
    }
    return out;
}

size_t PruneMask::total_removed() const {
    size_t n = 0;
    for (const auto & b : blocks) {
        n += b.removed.size();
    }
    return n;
}

size_t round_half_up_count(double ratio, size_t channels) {
    // tolerance keeps exact halves like 0.35 * 10 from rounding down
    const double k = std::floor(ratio * (double) channels + 0.5 + 1e-9);
    return std::min(channels, (size_t) std::max(0.0, k));
}

PruneMask select_mask(const std::vector<std::vector<double>> & avg_scores, const PruningPlan & plan) {
    if (avg_scores.size() != plan.ratios.size()) {
        throw SchemaError("plan covers " + std::to_string(plan.ratios.size()) + " blocks, scores cover " +
                          std::to_string(avg_scores.size()));
    }
    PruneMask mask;
    for (size_t bi = 0; bi < avg_scores.size(); ++bi) {
        const auto & s = avg_scores[bi];
        const size_t k = round_half_up_count(plan.ratios[bi], s.size());
        std::vector<size_t> order(s.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return s[a] < s[b]; });
        BlockMask bm;
        bm.removed.assign(order.begin(), order.begin() + (ptrdiff_t) k);
        std::sort(bm.removed.begin(), bm.removed.end());
        bm.channels_before = s.size();
        bm.channels_after = s.size() - k;
        mask.blocks.push_back(std::move(bm));
    }
    return mask;
}

ojson to_json(const ChannelScoreTable & t) {
    ojson j;
    j["method"] = method_name(t.method);
    j["calibration_id"] = t.calibration_id;
    ojson blocks = ojson::array();
    for (const auto & b : t.blocks) {
        ojson jb;
        for (Role r : kRoles) {
            if (b.roles[(size_t) r]) {
                jb[role_name(r)] = *b.roles[(size_t) r];
            }
        }
        jb["average"] = b.average;
        blocks.push_back(jb);
    }
    j["blocks"] = blocks;
    return j;
}

ChannelScoreTable score_table_from_json(const ojson & j) {
    try {
        ChannelScoreTable t;
        t.method = method_from_name(j.at("method").get<std::string>());
        t.calibration_id = j.value("calibration_id", std::string());
        for (const auto & jb : j.at("blocks")) {
            BlockScores b;
            for (Role r : kRoles) {
                if (jb.contains(role_name(r))) {
                    b.roles[(size_t) r] = jb.at(role_name(r)).get<std::vector<double>>();
                }
            }
            b.average = jb.value("average", std::vector<double>());
            t.blocks.push_back(std::move(b));
        }
        return t;
    } catch (const nlohmann::json::exception & e) {
        throw SchemaError(std::string("score table: ") + e.what());
    }
}

ojson to_json(const PruneMask & m) {
    ojson blocks = ojson::array();
    for (const auto & b : m.blocks) {
        blocks.push_back(
            {{"removed", b.removed}, {"channels_before", b.channels_before}, {"channels_after", b.channels_after}});
    }
    return {{"blocks", blocks}};
}

PruneMask prune_mask_from_json(const ojson & j) {
    try {
        PruneMask m;
        for (const auto & jb : j.at("blocks")) {
            BlockMask b;
            b.removed = jb.at("removed").get<std::vector<size_t>>();
            b.channels_before = jb.at("channels_before").get<size_t>();
            b.channels_after = jb.at("channels_after").get<size_t>();
            m.blocks.push_back(std::move(b));
        }
        return m;
    } catch (const nlohmann::json::exception & e) {
        throw SchemaError(std::string("prune mask: ") + e.what());
    }
}

} // namespace kvprune
