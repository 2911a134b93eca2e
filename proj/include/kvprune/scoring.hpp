#pragma once

#include "kvprune/json_io.hpp"
#include "kvprune/model.hpp"
#include "kvprune/sensitivity.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kvprune {

enum class ScoreMethod { l1, l2, taylor };
enum class Role { q, k, v, o };

inline constexpr std::array<Role, 4> kRoles = {Role::q, Role::k, Role::v, Role::o};

const char * method_name(ScoreMethod m);
ScoreMethod method_from_name(const std::string & name);
const char * role_name(Role r);

// Channel i's slice: row i of Wq/Wk/Wv, column i of Wo.
std::vector<double> channel_slice(const BlockWeights & b, Role role, size_t channel);

struct BlockScores {
    // per role (q, k, v, o), one score per channel; a missing role is an empty optional
    std::array<std::optional<std::vector<double>>, 4> roles;
    std::vector<double> average;

    size_t channels() const;
};

struct ChannelScoreTable {
    ScoreMethod method = ScoreMethod::l1;
    std::vector<BlockScores> blocks;
    std::string calibration_id; // Taylor only
};

ChannelScoreTable score_l1(const Checkpoint & ckpt);
ChannelScoreTable score_l2(const Checkpoint & ckpt);
// Gradients of the mean calibration loss, taken once on the supplied (dense) model.
ChannelScoreTable score_taylor(const Checkpoint & ckpt, std::span<const Batch> calibration);
// Taylor scores from a precomputed gradient set.
ChannelScoreTable score_taylor(const Checkpoint & ckpt, const GradientSet & grads);

// Fills every block's average = (S_q + S_k + S_v + S_o) / 4. Throws SchemaError on a missing role.
void average_qkvo(ChannelScoreTable & table);
std::vector<std::vector<double>> averaged_scores(const ChannelScoreTable & table);

struct BlockMask {
    std::vector<size_t> removed; // sorted, unique
    size_t channels_before = 0;
    size_t channels_after = 0;
};

struct PruneMask {
    std::vector<BlockMask> blocks;
    size_t total_removed() const;
};

size_t round_half_up_count(double ratio, size_t channels);

// Per block, removes the round-half-up(P_i * C_b) lowest-scored channels (ties: lower index first).
PruneMask select_mask(const std::vector<std::vector<double>> & avg_scores, const PruningPlan & plan);

ojson to_json(const ChannelScoreTable & t);
ChannelScoreTable score_table_from_json(const ojson & j);
ojson to_json(const PruneMask & m);
PruneMask prune_mask_from_json(const ojson & j);

} // namespace kvprune
