#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnseq/config.hpp"
#include "attnseq/kvtext.hpp"
#include "attnseq/tensor.hpp"

namespace attnseq {

// In-memory dataset: n sequences padded to a common T. Padded steps are zero
// everywhere (x, per-step labels, masks) and excluded from losses, metrics,
// and standardization statistics.
struct Dataset {
    HeadKind task = HeadKind::binary;
    std::int64_t num_labels = 1;  // K (multilabel) or C (multiclass); 1 otherwise
    std::int64_t R = 0;           // channels per step
    std::int64_t T = 0;           // padded length
    // First indicator channel, or -1 when the dataset has none. Channels at or
    // past this index are 0/1 missingness flags and exempt from
    // standardization.
    std::int64_t indicator_from = -1;

    std::vector<std::int64_t> ids;      // [n], unique
    std::vector<std::int64_t> lengths;  // [n], 1..T
    std::vector<double> x;              // [n,T,R] row-major

    // Exactly one of the label containers is populated, by task kind:
    //   binary            labels [n] in {0,1}
    //   multilabel        labels [n,K] in {0,1}
    //   per_step_binary   labels [n,T] in {0,1}, plus label_mask [n,T]
    //   per_step_regression labels [n,T], plus label_mask [n,T]
    //   multiclass        class_labels [n] in [0,C)
    std::vector<double> labels;
    std::vector<std::int64_t> class_labels;
    std::vector<double> label_mask;

    // Multiclass extras for value-scale metrics: per-sample continuous target
    // and the representative value of each of the C buckets.
    std::vector<double> continuous;
    std::vector<double> bucket_values;

    std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
};

// Synthetic generators. All labels follow a closed-form rule over the drawn
// series, so an independent pass over x reproduces them exactly:
//   windowed_mean    binary; fixed length T; label = mean of channel 0 over
//                    the last w steps exceeds the split's (1-skew) quantile.
//   long_range       multilabel, K = R; fixed length T; channel k holds a
//                    +/-3 motif at step 0 and key at step T-1; label_k = signs
//                    agree. Key sign matches the motif with probability skew.
//   leaky_acc        per-step binary; variable lengths; a_t = 0.9 a_{t-1} +
//                    x[t,0]; label_t = a_t exceeds the split's (1-skew)
//                    quantile over valid steps.
//   remaining_length multiclass, C = 10; variable lengths; the count of
//                    remaining steps m = min(29, floor(3 |a_len|)) is bucketed
//                    as min(9, m / 3). skew is ignored.
Dataset generate(const std::string& generator, std::int64_t n, std::int64_t T, std::int64_t R,
                 std::uint64_t seed, double skew, std::int64_t id_offset = 0);

struct SplitSpec {
    std::string generator;
    std::int64_t n_train = 0;
    std::int64_t n_val = 0;
    std::int64_t n_test = 0;
    std::int64_t T = 0;
    std::int64_t R = 0;
    std::uint64_t seed = 0;
    double skew = 0.5;
};

struct SplitData {
    Dataset train, val, test;
    kv::Map manifest;
};

// Three disjoint splits from per-split seeds (seed, seed+1, seed+2) and id
// ranges. The manifest captures every generation input plus informational
// class-balance figures; regenerate(manifest) reproduces all splits bitwise.
SplitData generate_splits(const SplitSpec& spec);
SplitData regenerate(const kv::Map& manifest);

// NDJSON: line 1 is a header record
//   {"format":"attnseq-ndjson","version":1,"task":...,"R":...,"num_labels":...}
// followed by one record per line:
//   {"id":int,"series":[[R numbers-or-null] x T_b],"label":...}
// Nulls impute to 0 and set a companion indicator channel (R -> 2R effective).
// Per-step records may add "label_mask"; multiclass records may add "value".
// Malformed input raises DataError naming the 1-based line.
Dataset load_ndjson(const std::string& path);
void save_ndjson(const Dataset& ds, const std::string& path);

// Flat one-row-per-step CSV for eyeballing; not a load format.
void save_csv(const Dataset& ds, const std::string& path);

// Per-channel standardization statistics, computed on the train split's valid
// steps only. Indicator channels keep (mean 0, std 1) so the transform leaves
// them untouched; stddev is floored at 1e-8.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

NormStats compute_norm_stats(const Dataset& train);
// Pooled statistics over several training splits sharing one channel layout.
NormStats compute_norm_stats(const std::vector<const Dataset*>& splits);
void apply_norm(Dataset& ds, const NormStats& stats);    // x <- (x - mean) / stddev on valid steps
void invert_norm(Dataset& ds, const NormStats& stats);   // x <- x * stddev + mean on valid steps

// Row-subset copy preserving metadata; rows index into [0, size).
Dataset gather(const Dataset& ds, const std::vector<std::int64_t>& rows);

// Tensor views over a contiguous row range [begin, end) for training.
Tensor batch_x(const Dataset& ds, std::int64_t begin, std::int64_t end);                // [b,T,R]
std::vector<std::int64_t> batch_lengths(const Dataset& ds, std::int64_t begin, std::int64_t end);
Tensor batch_labels(const Dataset& ds, std::int64_t begin, std::int64_t end);           // layout by kind
std::vector<std::int64_t> batch_classes(const Dataset& ds, std::int64_t begin, std::int64_t end);
Tensor batch_label_mask(const Dataset& ds, std::int64_t begin, std::int64_t end);       // [b,T] validity

}  // namespace attnseq
