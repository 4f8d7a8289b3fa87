#pragma once

#include <cstdint>
#include <string>

#include "attnseq/kvtext.hpp"

namespace attnseq {

enum class HeadKind { binary, multilabel, multiclass, per_step_regression, per_step_binary };

HeadKind parse_head_kind(const std::string& name);
std::string head_kind_name(HeadKind kind);
bool is_per_step(HeadKind kind);

struct ModelConfig {
    std::int64_t R = 0;  // input variables per step; must be set
    std::int64_t d = 64;
    std::int64_t h = 3;   // embedding kernel size, odd
    std::int64_t N = 2;   // stacked attention modules
    std::int64_t heads = 8;
    std::int64_t r = 8;   // attention window: past positions per layer
    std::int64_t M = 6;   // interpolation factor
    std::int64_t T_max = 256;
    double dropout_residue = 0.1;
    double dropout_attention = 0.1;
    double dropout_input = 0.1;
    bool include_self = true;
    HeadKind head_kind = HeadKind::binary;
    std::int64_t num_labels = 2;  // K for multilabel, C for multiclass
    bool learn_positional = false;
    std::uint64_t seed = 1;

    void validate() const;  // throws ConfigError with the offending field named
    kv::Map to_kv() const;
    static ModelConfig from_kv(const kv::Map& m);
};

}  // namespace attnseq
