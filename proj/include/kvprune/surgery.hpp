#pragma once

#include "kvprune/json_io.hpp"
#include "kvprune/model.hpp"
#include "kvprune/scoring.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kvprune {

struct KvReference {
    size_t batch = 1;
    size_t seq_len = 0; // 0 means the checkpoint's max_seq_len
    size_t bytes_per_element = 2;
};

struct SurgeryRecord {
    std::string source_hash;
    PruneMask mask;
    std::vector<size_t> channels_before;
    std::vector<size_t> channels_after;
    std::vector<std::vector<size_t>> head_channels_after; // per block, per head
    size_t params_before = 0;
    size_t params_after = 0;
    KvReference kv_reference;
    uint64_t kv_bytes_before = 0;
    uint64_t kv_bytes_after = 0;
};

// Sum over blocks of (K + V channels) * seq_len * batch * bytes_per_element.
uint64_t kv_bytes(const Checkpoint & ckpt, size_t batch, size_t seq_len, size_t bytes_per_element);

// Removes masked rows of Wq/Wk/Wv and columns of Wo; heads may shrink to zero channels.
std::pair<Checkpoint, SurgeryRecord> apply_mask(const Checkpoint & ckpt, const PruneMask & mask,
                                                const KvReference & ref = {});

struct VerificationReport {
    bool passed = true;
    std::vector<std::string> failures;
};

// Rechecks record invariants, shapes, and that a probe forward yields finite logits. Never throws.
VerificationReport verify(const Checkpoint & before, const Checkpoint & after, const SurgeryRecord & record);

ojson to_json(const SurgeryRecord & r);
SurgeryRecord surgery_record_from_json(const ojson & j);

} // namespace kvprune
