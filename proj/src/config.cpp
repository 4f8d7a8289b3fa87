#include "attnseq/config.hpp"

#include "attnseq/error.hpp"

namespace attnseq {

HeadKind parse_head_kind(const std::string& name) {
    if (name == "binary") return HeadKind::binary;
    if (name == "multilabel") return HeadKind::multilabel;
    if (name == "multiclass") return HeadKind::multiclass;
    if (name == "per-step-regression") return HeadKind::per_step_regression;
    if (name == "per-step-binary") return HeadKind::per_step_binary;
    throw ConfigError("unknown head kind '" + name +
                      "' (expected binary, multilabel, multiclass, per-step-regression, per-step-binary)");
}

std::string head_kind_name(HeadKind kind) {
    switch (kind) {
        case HeadKind::binary: return "binary";
        case HeadKind::multilabel: return "multilabel";
        case HeadKind::multiclass: return "multiclass";
        case HeadKind::per_step_regression: return "per-step-regression";
        case HeadKind::per_step_binary: return "per-step-binary";
    }
    throw ConfigError("invalid head kind value");
}

bool is_per_step(HeadKind kind) {
    return kind == HeadKind::per_step_regression || kind == HeadKind::per_step_binary;
}

void ModelConfig::validate() const {
    if (R < 1) throw ConfigError("ModelConfig.R must be >= 1, got " + std::to_string(R));
    if (d <= R) throw ConfigError("ModelConfig.d must exceed R, got d=" + std::to_string(d) + ", R=" + std::to_string(R));
    if (heads < 1) throw ConfigError("ModelConfig.heads must be >= 1, got " + std::to_string(heads));
    if (d % heads != 0) {
        throw ConfigError("ModelConfig.d must be divisible by heads, got d=" + std::to_string(d) +
                          ", heads=" + std::to_string(heads));
    }
    if (h < 1 || h % 2 == 0) throw ConfigError("ModelConfig.h must be odd and >= 1, got " + std::to_string(h));
    if (N < 1) throw ConfigError("ModelConfig.N must be >= 1, got " + std::to_string(N));
    if (T_max < 1) throw ConfigError("ModelConfig.T_max must be >= 1, got " + std::to_string(T_max));
    if (r < 1 || r > T_max) {
        throw ConfigError("ModelConfig.r must satisfy 1 <= r <= T_max, got r=" + std::to_string(r) +
                          ", T_max=" + std::to_string(T_max));
    }
    if (M < 1 || M > T_max) {
        throw ConfigError("ModelConfig.M must satisfy 1 <= M <= T_max, got M=" + std::to_string(M) +
                          ", T_max=" + std::to_string(T_max));
    }
    for (const auto& [name, p] : {std::pair<const char*, double>{"dropout_residue", dropout_residue},
                                  {"dropout_attention", dropout_attention},
                                  {"dropout_input", dropout_input}}) {
        if (!(p >= 0.0 && p < 1.0)) {
            throw ConfigError(std::string("ModelConfig.") + name + " must be in [0,1), got " + std::to_string(p));
        }
    }
    if (!include_self) {
        throw ConfigError("ModelConfig.include_self=false leaves position 1 with an empty attention window");
    }
    if (head_kind == HeadKind::multiclass && num_labels < 2) {
        throw ConfigError("multiclass head needs num_labels >= 2, got " + std::to_string(num_labels));
    }
    if (num_labels < 1) throw ConfigError("ModelConfig.num_labels must be >= 1, got " + std::to_string(num_labels));
}

kv::Map ModelConfig::to_kv() const {
    kv::Map m;
    m["version"] = "1";
    m["R"] = kv::fmt_i64(R);
    m["d"] = kv::fmt_i64(d);
    m["h"] = kv::fmt_i64(h);
    m["N"] = kv::fmt_i64(N);
    m["heads"] = kv::fmt_i64(heads);
    m["r"] = kv::fmt_i64(r);
    m["M"] = kv::fmt_i64(M);
    m["T_max"] = kv::fmt_i64(T_max);
    m["dropout_residue"] = kv::fmt_f64(dropout_residue);
    m["dropout_attention"] = kv::fmt_f64(dropout_attention);
    m["dropout_input"] = kv::fmt_f64(dropout_input);
    m["include_self"] = kv::fmt_bool(include_self);
    m["head_kind"] = head_kind_name(head_kind);
    m["num_labels"] = kv::fmt_i64(num_labels);
    m["learn_positional"] = kv::fmt_bool(learn_positional);
    m["seed"] = std::to_string(seed);
    return m;
}

ModelConfig ModelConfig::from_kv(const kv::Map& m) {
    const std::int64_t version = kv::get_i64(m, "version", 1);
    if (version != 1) throw ConfigError("unsupported config version " + std::to_string(version));
    ModelConfig c;
    c.R = kv::get_i64(m, "R");
    c.d = kv::get_i64(m, "d", c.d);
    c.h = kv::get_i64(m, "h", c.h);
    c.N = kv::get_i64(m, "N", c.N);
    c.heads = kv::get_i64(m, "heads", c.heads);
    c.r = kv::get_i64(m, "r", c.r);
    c.M = kv::get_i64(m, "M", c.M);
    c.T_max = kv::get_i64(m, "T_max", c.T_max);
    c.dropout_residue = kv::get_f64(m, "dropout_residue", c.dropout_residue);
    c.dropout_attention = kv::get_f64(m, "dropout_attention", c.dropout_attention);
    c.dropout_input = kv::get_f64(m, "dropout_input", c.dropout_input);
    c.include_self = kv::get_bool(m, "include_self", c.include_self);
    c.head_kind = parse_head_kind(kv::get_str(m, "head_kind", head_kind_name(c.head_kind)));
    c.num_labels = kv::get_i64(m, "num_labels", c.num_labels);
    c.learn_positional = kv::get_bool(m, "learn_positional", c.learn_positional);
    c.seed = static_cast<std::uint64_t>(kv::get_i64(m, "seed", static_cast<std::int64_t>(c.seed)));
    return c;
}

}  // namespace attnseq
