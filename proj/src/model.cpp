#include "attnseq/model.hpp"

#include <cstdint>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "attnseq/error.hpp"
#include "attnseq/ops.hpp"

namespace attnseq {

namespace {

std::int64_t head_in_dim(const ModelConfig& cfg, HeadKind kind) {
    return is_per_step(kind) ? cfg.d : cfg.d * cfg.M;
}

// Single walk used for both parameter listings so names and order never
// diverge between the optimizer's view and the checkpoint's.
void collect_state(const SequenceModel& model, bool trainable_only, std::vector<NamedTensor>& out) {
    auto put = [&](std::string name, const Tensor& t, bool trainable) {
        if (trainable_only && !trainable) return;
        out.push_back({std::move(name), t});
    };
    put("embed.w", model.enc.embed_w, true);
    put("embed.b", model.enc.embed_b, true);
    put("pos.table", model.enc.pos.table, !model.enc.pos.frozen);
    for (std::size_t i = 0; i < model.enc.blocks.size(); ++i) {
        const auto& blk = model.enc.blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        for (std::size_t j = 0; j < blk.W_Q.size(); ++j) {
            const std::string s = std::to_string(j);
            put(p + "wq" + s, blk.W_Q[j], true);
            put(p + "wk" + s, blk.W_K[j], true);
            put(p + "wv" + s, blk.W_V[j], true);
        }
        put(p + "wo", blk.W_O, true);
        put(p + "ff1.w", blk.ff_w1, true);
        put(p + "ff1.b", blk.ff_b1, true);
        put(p + "ff2.w", blk.ff_w2, true);
        put(p + "ff2.b", blk.ff_b2, true);
        put(p + "ln1.g", blk.ln1_gamma, true);
        put(p + "ln1.b", blk.ln1_beta, true);
        put(p + "ln2.g", blk.ln2_gamma, true);
        put(p + "ln2.b", blk.ln2_beta, true);
    }
    for (std::size_t k = 0; k < model.heads.size(); ++k) {
        const std::string p = "head" + std::to_string(k) + ".";
        put(p + "w", model.heads[k].W, true);
        put(p + "b", model.heads[k].b, true);
    }
    if (model.normalizes()) {
        put("norm.mean", model.norm_mean, false);
        put("norm.std", model.norm_std, false);
    }
}

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("checkpoint truncated");
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

constexpr char kMagic[8] = {'A', 'T', 'S', 'Q', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

SequenceModel init_model(const ModelConfig& cfg) {
    return init_model(cfg, {TaskSpec{cfg.head_kind, cfg.num_labels}});
}

SequenceModel init_model(const ModelConfig& cfg, const std::vector<TaskSpec>& tasks) {
    cfg.validate();
    if (tasks.empty()) throw ConfigError("a model needs at least one task head");
    SequenceModel model;
    model.cfg = cfg;
    Rng rng(cfg.seed);
    model.enc = init_encoder_params(cfg, rng);
    for (const auto& t : tasks) {
        model.heads.push_back(init_task_head(t.kind, t.num_labels, head_in_dim(cfg, t.kind), rng));
    }
    return model;
}

std::vector<NamedTensor> trainable_params(const SequenceModel& model) {
    std::vector<NamedTensor> out;
    collect_state(model, true, out);
    return out;
}

std::vector<NamedTensor> persisted_state(const SequenceModel& model) {
    std::vector<NamedTensor> out;
    collect_state(model, false, out);
    return out;
}

const InterpWeights& InterpCache::get(std::int64_t T) {
    auto it = built_.find(T);
    if (it == built_.end()) it = built_.emplace(T, build_weights(T, M_)).first;
    return it->second;
}

Tensor length_mask(const std::vector<std::int64_t>& lengths, std::int64_t T) {
    const auto B = static_cast<std::int64_t>(lengths.size());
    std::vector<double> m(static_cast<std::size_t>(B * T), 0.0);
    for (std::int64_t b = 0; b < B; ++b) {
        const std::int64_t len = lengths[static_cast<std::size_t>(b)];
        if (len < 0 || len > T) {
            throw DataError("sequence length " + std::to_string(len) + " outside [0, " + std::to_string(T) + "]");
        }
        for (std::int64_t t = 0; t < len; ++t) m[static_cast<std::size_t>(b * T + t)] = 1.0;
    }
    return Tensor({B, T}, std::move(m));
}

Tensor model_encode(const SequenceModel& model, const Tensor& x,
                    const std::vector<std::int64_t>& lengths, const ForwardCtx& ctx) {
    Tensor in = x;
    if (model.normalizes()) {
        if (x.rank() != 3) throw ShapeError("model_encode expects [B,T,R], got " + shape_str(x.shape()));
        const std::int64_t T = x.dim(1), R = x.dim(2);
        if (!lengths.empty() && static_cast<std::int64_t>(lengths.size()) != x.dim(0)) {
            throw ShapeError("lengths count " + std::to_string(lengths.size()) + " does not match batch " +
                             std::to_string(x.dim(0)));
        }
        // (x - mu) / sigma as x * (1/sigma) + (-mu/sigma), tiled to x's shape
        // because the stats are constant per channel. Padded steps keep scale
        // and shift zero so they stay exactly zero, matching a shorter run.
        const auto& mu = model.norm_mean.data();
        const auto& sd = model.norm_std.data();
        const auto n = static_cast<std::size_t>(x.size());
        std::vector<double> scale(n, 0.0), shift(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto t = static_cast<std::int64_t>(i) / R % T;
            const auto b = static_cast<std::int64_t>(i) / (R * T);
            if (!lengths.empty() && t >= lengths[static_cast<std::size_t>(b)]) continue;
            const std::size_t c = i % mu.size();
            scale[i] = 1.0 / sd[c];
            shift[i] = -mu[c] / sd[c];
        }
        in = add(mul(in, Tensor(x.shape(), std::move(scale))), Tensor(x.shape(), std::move(shift)));
    }
    return encoder_forward(in, model.enc, model.cfg, ctx);
}

Tensor model_encode(const SequenceModel& model, const Tensor& x, const ForwardCtx& ctx) {
    return model_encode(model, x, {}, ctx);
}

Tensor collapse_features(const SequenceModel& model, const Tensor& encoded,
                         const std::vector<std::int64_t>& lengths, InterpCache& cache) {
    if (encoded.rank() != 3) throw ShapeError("collapse_features expects [B,T,d], got " + shape_str(encoded.shape()));
    const std::int64_t B = encoded.dim(0), T = encoded.dim(1);
    if (!lengths.empty() && static_cast<std::int64_t>(lengths.size()) != B) {
        throw ShapeError("lengths count " + std::to_string(lengths.size()) + " does not match batch " +
                         std::to_string(B));
    }
    bool uniform = true;
    for (std::int64_t len : lengths) {
        if (len < 1 || len > T) {
            throw DataError("sequence length " + std::to_string(len) + " outside [1, " + std::to_string(T) + "]");
        }
        // Interpolation to M landmarks needs at least M steps.
        if (len < model.cfg.M) {
            throw DataError("sequence length " + std::to_string(len) + " is shorter than interpolation factor M=" +
                            std::to_string(model.cfg.M));
        }
        uniform = uniform && len == T;
    }
    if (lengths.empty() || uniform) return dense_interpolate(encoded, cache.get(T));

    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
        Tensor prefix = slice(slice(encoded, 0, b, b + 1), 1, 0, lengths[static_cast<std::size_t>(b)]);
        rows.push_back(dense_interpolate(prefix, cache.get(lengths[static_cast<std::size_t>(b)])));
    }
    return concat(rows, 0);
}

Tensor model_predict(const SequenceModel& model, std::size_t task, const Tensor& x,
                     const std::vector<std::int64_t>& lengths, InterpCache& cache) {
    if (task >= model.heads.size()) {
        throw ConfigError("task index " + std::to_string(task) + " out of range for " +
                          std::to_string(model.heads.size()) + " heads");
    }
    NoGradGuard no_grad;
    const TaskHeadParams& head = model.heads[task];
    Tensor encoded = model_encode(model, x, lengths, ForwardCtx{});
    Tensor feats = is_per_step(head.kind) ? encoded : collapse_features(model, encoded, lengths, cache);
    return head_probs(head, head_logits(head, feats));
}

void save_model(const SequenceModel& model, const std::string& path) {
    std::ostringstream body;
    body.write(kMagic, sizeof(kMagic));
    write_u32(body, kVersion);

    kv::Map m = model.cfg.to_kv();
    m["task.count"] = kv::fmt_i64(static_cast<std::int64_t>(model.heads.size()));
    for (std::size_t k = 0; k < model.heads.size(); ++k) {
        const std::string p = "task." + std::to_string(k) + ".";
        m[p + "kind"] = head_kind_name(model.heads[k].kind);
        m[p + "labels"] = kv::fmt_i64(model.heads[k].num_labels);
    }
    m["norm.enabled"] = kv::fmt_bool(model.normalizes());
    const std::string cfg_text = kv::serialize(m);
    write_u32(body, static_cast<std::uint32_t>(cfg_text.size()));
    body.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));

    const std::vector<NamedTensor> state = persisted_state(model);
    write_u32(body, static_cast<std::uint32_t>(state.size()));
    for (const auto& nt : state) {
        write_u32(body, static_cast<std::uint32_t>(nt.name.size()));
        body.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        write_tensor_blob(body, nt.tensor);
    }

    std::string bytes = body.str();
    const std::uint64_t sum = fnv1a(bytes);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>(sum >> (8 * i) & 0xff));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw DataError("failed writing checkpoint: " + path);
}

SequenceModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::ostringstream whole;
    whole << in.rdbuf();
    std::string bytes = whole.str();
    if (bytes.size() < sizeof(kMagic) + 8) throw DataError("checkpoint too short: " + path);

    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) {
        stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[bytes.size() - 8 + i])) << (8 * i);
    }
    bytes.resize(bytes.size() - 8);
    if (fnv1a(bytes) != stored) throw DataError("checkpoint checksum mismatch: " + path);

    std::istringstream body(bytes);
    char magic[sizeof(kMagic)];
    body.read(magic, sizeof(magic));
    if (!body || !std::equal(magic, magic + sizeof(magic), kMagic)) {
        throw DataError("not a checkpoint file: " + path);
    }
    const std::uint32_t version = read_u32(body);
    if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));

    const std::uint32_t cfg_len = read_u32(body);
    std::string cfg_text(cfg_len, '\0');
    body.read(cfg_text.data(), cfg_len);
    if (!body) throw DataError("checkpoint truncated");
    const kv::Map m = kv::parse(cfg_text);

    const ModelConfig cfg = ModelConfig::from_kv(m);
    const std::int64_t task_count = kv::get_i64(m, "task.count");
    if (task_count < 1) throw DataError("checkpoint lists no task heads");
    std::vector<TaskSpec> tasks;
    for (std::int64_t k = 0; k < task_count; ++k) {
        const std::string p = "task." + std::to_string(k) + ".";
        tasks.push_back({parse_head_kind(kv::get_str(m, p + "kind")), kv::get_i64(m, p + "labels")});
    }
    SequenceModel model = init_model(cfg, tasks);
    if (kv::get_bool(m, "norm.enabled", false)) {
        model.norm_mean = Tensor::zeros({cfg.R});
        model.norm_std = Tensor::ones({cfg.R});
    }

    std::unordered_map<std::string, Tensor> by_name;
    for (const auto& nt : persisted_state(model)) by_name.emplace(nt.name, nt.tensor);

    const std::uint32_t count = read_u32(body);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(body);
        std::string name(name_len, '\0');
        body.read(name.data(), name_len);
        if (!body) throw DataError("checkpoint truncated");
        Tensor blob = read_tensor_blob(body);
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint holds unexpected or duplicate tensor '" + name + "'");
        if (blob.shape() != it->second.shape()) {
            throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(blob.shape()) +
                            ", model expects " + shape_str(it->second.shape()));
        }
        it->second.data_mut() = blob.data();
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw DataError("checkpoint is missing tensor '" + by_name.begin()->first + "' and " +
                        std::to_string(by_name.size() - 1) + " other(s)");
    }
    return model;
}

}  // namespace attnseq
