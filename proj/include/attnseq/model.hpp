#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "attnseq/config.hpp"
#include "attnseq/encoder.hpp"
#include "attnseq/heads.hpp"
#include "attnseq/interp.hpp"

namespace attnseq {

struct TaskSpec {
    HeadKind kind = HeadKind::binary;
    std::int64_t num_labels = 2;
};

// Encoder plus one head per task. Single-task models have one head drawn from
// the config; multi-task models share the encoder across all heads.
struct SequenceModel {
    ModelConfig cfg;
    EncoderParams enc;
    std::vector<TaskHeadParams> heads;
    // Input standardization captured at training time and applied before the
    // embedding on every forward; undefined tensors mean raw inputs.
    Tensor norm_mean, norm_std;  // each [R]

    bool normalizes() const { return norm_mean.defined(); }
};

SequenceModel init_model(const ModelConfig& cfg);
SequenceModel init_model(const ModelConfig& cfg, const std::vector<TaskSpec>& tasks);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Parameters the optimizer updates, in a stable order. The positional table
// appears only when the config marks it learnable.
std::vector<NamedTensor> trainable_params(const SequenceModel& model);
// Everything a checkpoint persists: trainables plus the (possibly frozen)
// positional table and the normalization stats when present.
std::vector<NamedTensor> persisted_state(const SequenceModel& model);

// Memoizes interpolation weights per sequence length.
class InterpCache {
public:
    explicit InterpCache(std::int64_t M) : M_(M) {}
    const InterpWeights& get(std::int64_t T);

private:
    std::int64_t M_;
    std::map<std::int64_t, InterpWeights> built_;
};

// [B] mask-per-step matrix: row b is 1 for the first lengths[b] steps, 0 after.
Tensor length_mask(const std::vector<std::int64_t>& lengths, std::int64_t T);

// Standardize (when stats are set) and encode: [B,T,R] -> [B,T,d]. The
// lengths-aware form keeps padded steps at exactly zero through the
// standardization affine; empty lengths treats every row as full length.
Tensor model_encode(const SequenceModel& model, const Tensor& x,
                    const std::vector<std::int64_t>& lengths, const ForwardCtx& ctx);
Tensor model_encode(const SequenceModel& model, const Tensor& x, const ForwardCtx& ctx);

// Collapse per-step representations to fixed-size sequence features
// [B, d*M]. Each sequence is interpolated over its own valid prefix; an empty
// lengths vector means every row spans all T steps.
Tensor collapse_features(const SequenceModel& model, const Tensor& encoded,
                         const std::vector<std::int64_t>& lengths, InterpCache& cache);

// Probabilities for one task in eval mode (no dropout, no tape). Sequence
// heads return [B, num_labels] ([B] squeezed for per-step kinds' [B,T]).
Tensor model_predict(const SequenceModel& model, std::size_t task, const Tensor& x,
                     const std::vector<std::int64_t>& lengths, InterpCache& cache);

// Versioned container: magic, config + task table as key-value text, named
// tensor blobs, and a whole-file checksum.
void save_model(const SequenceModel& model, const std::string& path);
SequenceModel load_model(const std::string& path);

}  // namespace attnseq
