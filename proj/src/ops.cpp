#include "attnseq/ops.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>

namespace attnseq {

namespace {

bool all_finite(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

// Builds the output node, wiring parents and the backward rule only when
// grads are on and an input wants them. In debug builds, finite inputs must
// produce finite outputs.
Tensor make_op(const char* name, Shape shape, std::vector<double> data,
               std::initializer_list<Tensor> inputs, std::function<void(Node&)> backward) {
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
    }
#ifndef NDEBUG
    bool inputs_finite = true;
    for (const Tensor& t : inputs) inputs_finite = inputs_finite && all_finite(t.data());
    if (inputs_finite && !all_finite(data)) {
        throw Error(std::string("op '") + name + "' produced non-finite values from finite inputs");
    }
#endif
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = name;
    node->requires_grad = needs_grad;
    if (needs_grad) {
        for (const Tensor& t : inputs) node->parents.push_back(t.node_ptr());
        node->backward_fn = std::move(backward);
    }
    return Tensor(std::move(node));
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i) {
        if (small[i] != big[off + i]) return false;
    }
    return true;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    if (!is_suffix(b.shape(), a.shape())) {
        throw ShapeError("add: shape " + shape_str(b.shape()) + " is not broadcastable to " + shape_str(a.shape()));
    }
    const auto n = static_cast<std::size_t>(a.size());
    const auto bs = static_cast<std::size_t>(b.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i % bs];
    return make_op("add", a.shape(), std::move(out), {a, b}, [n, bs](Node& node) {
        Node& pa = *node.parents[0];
        Node& pb = *node.parents[1];
        if (pa.requires_grad) pa.accum_grad(node.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) pb.grad[i % bs] += node.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [n](Node& node) {
        Node& pa = *node.parents[0];
        Node& pb = *node.parents[1];
        if (pa.requires_grad) pa.accum_grad(node.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] -= node.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [n](Node& node) {
        Node& pa = *node.parents[0];
        Node& pb = *node.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) pa.grad[i] += node.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] += node.grad[i] * pa.data[i];
        }
    });
}

Tensor neg(const Tensor& a) {
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = -ad[i];
    return make_op("neg", a.shape(), std::move(out), {a}, [n](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pa.grad[i] -= node.grad[i];
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + c;
    return make_op("add_scalar", a.shape(), std::move(out), {a}, [](Node& node) {
        Node& pa = *node.parents[0];
        if (pa.requires_grad) pa.accum_grad(node.grad);
    });
}

Tensor mul_scalar(const Tensor& a, double c) {
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * c;
    return make_op("mul_scalar", a.shape(), std::move(out), {a}, [n, c](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pa.grad[i] += c * node.grad[i];
    });
}

Tensor relu(const Tensor& a) {
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] > 0.0 ? ad[i] : 0.0;
    return make_op("relu", a.shape(), std::move(out), {a}, [n](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            if (pa.data[i] > 0.0) pa.grad[i] += node.grad[i];
        }
    });
}

Tensor sigmoid(const Tensor& a) {
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-ad[i]));
    return make_op("sigmoid", a.shape(), std::move(out), {a}, [n](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const double y = node.data[i];
            pa.grad[i] += node.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor log(const Tensor& a) {
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = std::log(ad[i]);
    return make_op("log", a.shape(), std::move(out), {a}, [n](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pa.grad[i] += node.grad[i] / pa.data[i];
    });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) throw ConfigError("clamp: lo must be <= hi");
    const auto n = static_cast<std::size_t>(a.size());
    std::vector<double> out(n);
    const auto& ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = std::min(std::max(ad[i], lo), hi);
    return make_op("clamp", a.shape(), std::move(out), {a}, [n, lo, hi](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const double x = pa.data[i];
            if (x >= lo && x <= hi) pa.grad[i] += node.grad[i];
        }
    });
}

namespace {

// C[m,n] += A[m,k] * B[k,n]
void mm_acc(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        double* crow = C + i * n;
        const double* arow = A + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = B + kk * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += G[m,n] * B^T, with BT given as [n,k]
void mm_acc_a(const double* G, const double* BT, double* dA, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        double* darow = dA + i * k;
        const double* grow = G + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double gv = grow[j];
            const double* btrow = BT + j * k;
            for (std::int64_t kk = 0; kk < k; ++kk) darow[kk] += gv * btrow[kk];
        }
    }
}

// dB[k,n] += A^T * G, looped as i-k-j so rows stay contiguous
void mm_acc_b(const double* A, const double* G, double* dB, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        const double* grow = G + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            double* dbrow = dB + kk * n;
            for (std::int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    }
}

struct BatchMap {
    Shape batch_shape;
    std::vector<std::int64_t> stride_a;  // per batch dim, in units of one matrix
    std::vector<std::int64_t> stride_b;
    std::int64_t count = 1;

    std::pair<std::int64_t, std::int64_t> offsets(std::int64_t flat) const {
        std::int64_t oa = 0;
        std::int64_t ob = 0;
        for (std::size_t i = batch_shape.size(); i-- > 0;) {
            const std::int64_t idx = flat % batch_shape[i];
            flat /= batch_shape[i];
            oa += idx * stride_a[i];
            ob += idx * stride_b[i];
        }
        return {oa, ob};
    }
};

BatchMap broadcast_batches(const Shape& a, const Shape& b) {
    const std::size_t ra = a.size() - 2;
    const std::size_t rb = b.size() - 2;
    const std::size_t r = std::max(ra, rb);
    BatchMap map;
    map.batch_shape.assign(r, 1);
    map.stride_a.assign(r, 0);
    map.stride_b.assign(r, 0);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        const std::int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("matmul: batch dimensions of " + shape_str(a) + " and " + shape_str(b) +
                             " do not broadcast");
        }
        map.batch_shape[i] = std::max(da, db);
    }
    // Strides in matrix units, row-major over the broadcast shape.
    std::int64_t sa = 1, sb = 1;
    for (std::size_t i = r; i-- > 0;) {
        const std::int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        const std::int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        map.stride_a[i] = da == 1 ? 0 : sa;
        map.stride_b[i] = db == 1 ? 0 : sb;
        sa *= da;
        sb *= db;
    }
    map.count = shape_size(map.batch_shape);
    return map;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: expects rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(a.rank() - 2);
    const std::int64_t k = a.dim(a.rank() - 1);
    const std::int64_t kb = b.dim(b.rank() - 2);
    const std::int64_t n = b.dim(b.rank() - 1);
    if (k != kb) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const BatchMap map = broadcast_batches(a.shape(), b.shape());

    Shape out_shape = map.batch_shape;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(static_cast<std::size_t>(map.count * m * n), 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::int64_t batch = 0; batch < map.count; ++batch) {
        const auto [oa, ob] = map.offsets(batch);
        mm_acc(ad + oa * m * k, bd + ob * k * n, out.data() + batch * m * n, m, k, n);
    }

    return make_op("matmul", std::move(out_shape), std::move(out), {a, b}, [map, m, k, n](Node& node) {
        Node& pa = *node.parents[0];
        Node& pb = *node.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            std::vector<double> bt(static_cast<std::size_t>(k * n));
            for (std::int64_t batch = 0; batch < map.count; ++batch) {
                const auto [oa, ob] = map.offsets(batch);
                const double* bmat = pb.data.data() + ob * k * n;
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    for (std::int64_t j = 0; j < n; ++j) bt[static_cast<std::size_t>(j * k + kk)] = bmat[kk * n + j];
                }
                mm_acc_a(node.grad.data() + batch * m * n, bt.data(), pa.grad.data() + oa * m * k, m, k, n);
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::int64_t batch = 0; batch < map.count; ++batch) {
                const auto [oa, ob] = map.offsets(batch);
                mm_acc_b(pa.data.data() + oa * m * k, node.grad.data() + batch * m * n,
                         pb.grad.data() + ob * k * n, m, k, n);
            }
        }
    });
}

Tensor transpose_last2(const Tensor& a) {
    if (a.rank() < 2) throw ShapeError("transpose_last2: expects rank >= 2, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(a.rank() - 2);
    const std::int64_t n = a.dim(a.rank() - 1);
    const std::int64_t batches = a.size() / (m * n);
    Shape out_shape = a.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    std::vector<double> out(static_cast<std::size_t>(a.size()));
    const double* ad = a.data().data();
    for (std::int64_t batch = 0; batch < batches; ++batch) {
        const double* src = ad + batch * m * n;
        double* dst = out.data() + batch * m * n;
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
        }
    }
    return make_op("transpose", std::move(out_shape), std::move(out), {a}, [m, n, batches](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::int64_t batch = 0; batch < batches; ++batch) {
            const double* g = node.grad.data() + batch * m * n;
            double* dst = pa.grad.data() + batch * m * n;
            for (std::int64_t j = 0; j < n; ++j) {
                for (std::int64_t i = 0; i < m; ++i) dst[i * n + j] += g[j * m + i];
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return make_op("reshape", std::move(shape), a.data(), {a}, [](Node& node) {
        Node& pa = *node.parents[0];
        if (pa.requires_grad) pa.accum_grad(node.grad);
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    const auto rank = static_cast<std::int64_t>(first.size());
    if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
    std::int64_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
        for (std::int64_t i = 0; i < rank; ++i) {
            if (i != axis && p.dim(i) != first[static_cast<std::size_t>(i)]) {
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
            }
        }
        axis_total += p.dim(axis);
    }
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(axis)] = axis_total;

    std::int64_t outer = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= first[static_cast<std::size_t>(i)];
    std::int64_t inner = 1;
    for (std::int64_t i = axis + 1; i < rank; ++i) inner *= first[static_cast<std::size_t>(i)];

    std::vector<double> out(static_cast<std::size_t>(outer * axis_total * inner));
    std::vector<std::int64_t> axis_sizes;
    std::int64_t pos = 0;
    for (const Tensor& p : parts) {
        const std::int64_t an = p.dim(axis);
        axis_sizes.push_back(an);
        const double* src = p.data().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * axis_total + pos) * inner, src + o * an * inner,
                        static_cast<std::size_t>(an * inner) * sizeof(double));
        }
        pos += an;
    }

    // make_op takes an initializer_list; build the node by hand for the
    // variadic-input case.
    bool needs_grad = false;
    if (grad_enabled()) {
        for (const Tensor& p : parts) needs_grad = needs_grad || p.requires_grad();
    }
#ifndef NDEBUG
    bool finite = true;
    for (const Tensor& p : parts) finite = finite && all_finite(p.data());
    if (finite && !all_finite(out)) throw Error("op 'concat' produced non-finite values from finite inputs");
#endif
    auto node = std::make_shared<Node>();
    node->shape = std::move(out_shape);
    node->data = std::move(out);
    node->op = "concat";
    node->requires_grad = needs_grad;
    if (needs_grad) {
        for (const Tensor& p : parts) node->parents.push_back(p.node_ptr());
        node->backward_fn = [outer, inner, axis_total, axis_sizes](Node& n) {
            std::int64_t pos2 = 0;
            for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
                Node& p = *n.parents[pi];
                const std::int64_t an = axis_sizes[pi];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* g = n.grad.data() + (o * axis_total + pos2) * inner;
                        double* dst = p.grad.data() + o * an * inner;
                        for (std::int64_t i = 0; i < an * inner; ++i) dst[i] += g[i];
                    }
                }
                pos2 += an;
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t begin, std::int64_t end) {
    const auto rank = a.rank();
    if (axis < 0 || axis >= rank) throw ShapeError("slice: axis out of range");
    const std::int64_t dim = a.dim(axis);
    if (begin < 0 || end > dim || begin >= end) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for dimension " + std::to_string(dim));
    }
    std::int64_t outer = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= a.dim(i);
    std::int64_t inner = 1;
    for (std::int64_t i = axis + 1; i < rank; ++i) inner *= a.dim(i);
    const std::int64_t an = end - begin;

    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = an;
    std::vector<double> out(static_cast<std::size_t>(outer * an * inner));
    const double* src = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * an * inner, src + (o * dim + begin) * inner,
                    static_cast<std::size_t>(an * inner) * sizeof(double));
    }
    return make_op("slice", std::move(out_shape), std::move(out), {a},
                   [outer, inner, an, dim, begin](Node& node) {
                       Node& pa = *node.parents[0];
                       if (!pa.requires_grad) return;
                       pa.ensure_grad();
                       for (std::int64_t o = 0; o < outer; ++o) {
                           const double* g = node.grad.data() + o * an * inner;
                           double* dst = pa.grad.data() + (o * dim + begin) * inner;
                           for (std::int64_t i = 0; i < an * inner; ++i) dst[i] += g[i];
                       }
                   });
}

Tensor softmax_last(const Tensor& a) {
    if (a.rank() < 1 || a.dim(a.rank() - 1) < 1) {
        throw ShapeError("softmax_last: needs a non-empty last dimension");
    }
    const std::int64_t d = a.dim(a.rank() - 1);
    const std::int64_t rows = a.size() / d;
    std::vector<double> out(static_cast<std::size_t>(a.size()));
    const double* ad = a.data().data();
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = ad + r * d;
        double m = kNegInf;
        for (std::int64_t i = 0; i < d; ++i) m = std::max(m, x[i]);
        if (m == kNegInf) {
            throw NumericError("softmax_last: row " + std::to_string(r) + " is entirely -inf (fully masked)");
        }
        double* y = out.data() + r * d;
        double s = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - m);
            s += y[i];
        }
        const double inv = 1.0 / s;
        for (std::int64_t i = 0; i < d; ++i) y[i] *= inv;
    }
    return make_op("softmax_last", a.shape(), std::move(out), {a}, [rows, d](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = node.data.data() + r * d;
            const double* g = node.grad.data() + r * d;
            double dot = 0.0;
            for (std::int64_t i = 0; i < d; ++i) dot += y[i] * g[i];
            double* dst = pa.grad.data() + r * d;
            for (std::int64_t i = 0; i < d; ++i) dst[i] += y[i] * (g[i] - dot);
        }
    });
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 3) throw ShapeError("conv1d: input must be [B,T,Cin], got " + shape_str(x.shape()));
    if (w.rank() != 3) throw ShapeError("conv1d: weight must be [Cout,Cin,h], got " + shape_str(w.shape()));
    const std::int64_t B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
    const std::int64_t Cout = w.dim(0), h = w.dim(2);
    if (h % 2 == 0) throw ConfigError("conv1d: kernel size must be odd for symmetric padding, got " + std::to_string(h));
    if (w.dim(1) != Cin) {
        throw ShapeError("conv1d: weight channels " + shape_str(w.shape()) + " do not match input " + shape_str(x.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != Cout) {
        throw ShapeError("conv1d: bias must be [Cout], got " + shape_str(bias.shape()));
    }
    const std::int64_t pad = (h - 1) / 2;

    std::vector<double> out(static_cast<std::size_t>(B * T * Cout));
    const double* bd = bias.data().data();
    for (std::int64_t bt = 0; bt < B * T; ++bt) {
        std::memcpy(out.data() + bt * Cout, bd, static_cast<std::size_t>(Cout) * sizeof(double));
    }

    // Per-offset [Cin,Cout] copies of the kernel keep the inner loop contiguous.
    std::vector<double> wt(static_cast<std::size_t>(h * Cin * Cout));
    const double* wd = w.data().data();
    for (std::int64_t c = 0; c < Cout; ++c) {
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
            for (std::int64_t i = 0; i < h; ++i) {
                wt[static_cast<std::size_t>((i * Cin + ci) * Cout + c)] = wd[(c * Cin + ci) * h + i];
            }
        }
    }

    const double* xd = x.data().data();
    for (std::int64_t b = 0; b < B; ++b) {
        const double* xb = xd + b * T * Cin;
        double* yb = out.data() + b * T * Cout;
        for (std::int64_t i = 0; i < h; ++i) {
            const double* wti = wt.data() + i * Cin * Cout;
            const std::int64_t t_lo = std::max<std::int64_t>(0, pad - i);
            const std::int64_t t_hi = std::min(T, T + pad - i);
            for (std::int64_t t = t_lo; t < t_hi; ++t) {
                const double* xrow = xb + (t + i - pad) * Cin;
                double* yrow = yb + t * Cout;
                for (std::int64_t ci = 0; ci < Cin; ++ci) {
                    const double xv = xrow[ci];
                    const double* wrow = wti + ci * Cout;
                    for (std::int64_t c = 0; c < Cout; ++c) yrow[c] += xv * wrow[c];
                }
            }
        }
    }

    return make_op("conv1d", Shape{B, T, Cout}, std::move(out), {x, w, bias},
                   [B, T, Cin, Cout, h, pad](Node& node) {
                       Node& px = *node.parents[0];
                       Node& pw = *node.parents[1];
                       Node& pbias = *node.parents[2];
                       const double* g = node.grad.data();
                       if (pbias.requires_grad) {
                           pbias.ensure_grad();
                           for (std::int64_t bt = 0; bt < B * T; ++bt) {
                               const double* grow = g + bt * Cout;
                               for (std::int64_t c = 0; c < Cout; ++c) pbias.grad[static_cast<std::size_t>(c)] += grow[c];
                           }
                       }
                       if (px.requires_grad) {
                           px.ensure_grad();
                           // Per-offset [Cout,Cin] kernel copy, contiguous over ci.
                           std::vector<double> wi(static_cast<std::size_t>(Cout * Cin));
                           for (std::int64_t i = 0; i < h; ++i) {
                               for (std::int64_t c = 0; c < Cout; ++c) {
                                   for (std::int64_t ci = 0; ci < Cin; ++ci) {
                                       wi[static_cast<std::size_t>(c * Cin + ci)] = pw.data[static_cast<std::size_t>((c * Cin + ci) * h + i)];
                                   }
                               }
                               for (std::int64_t b = 0; b < B; ++b) {
                                   const double* gb = g + b * T * Cout;
                                   double* dxb = px.grad.data() + b * T * Cin;
                                   const std::int64_t t_lo = std::max<std::int64_t>(0, pad - i);
                                   const std::int64_t t_hi = std::min(T, T + pad - i);
                                   for (std::int64_t t = t_lo; t < t_hi; ++t) {
                                       const double* grow = gb + t * Cout;
                                       double* dxrow = dxb + (t + i - pad) * Cin;
                                       for (std::int64_t c = 0; c < Cout; ++c) {
                                           const double gv = grow[c];
                                           const double* wrow = wi.data() + c * Cin;
                                           for (std::int64_t ci = 0; ci < Cin; ++ci) dxrow[ci] += gv * wrow[ci];
                                       }
                                   }
                               }
                           }
                       }
                       if (pw.requires_grad) {
                           pw.ensure_grad();
                           std::vector<double> acc(static_cast<std::size_t>(Cin * Cout));
                           for (std::int64_t i = 0; i < h; ++i) {
                               std::fill(acc.begin(), acc.end(), 0.0);
                               for (std::int64_t b = 0; b < B; ++b) {
                                   const double* xb = px.data.data() + b * T * Cin;
                                   const double* gb = g + b * T * Cout;
                                   const std::int64_t t_lo = std::max<std::int64_t>(0, pad - i);
                                   const std::int64_t t_hi = std::min(T, T + pad - i);
                                   for (std::int64_t t = t_lo; t < t_hi; ++t) {
                                       const double* xrow = xb + (t + i - pad) * Cin;
                                       const double* grow = gb + t * Cout;
                                       for (std::int64_t ci = 0; ci < Cin; ++ci) {
                                           const double xv = xrow[ci];
                                           double* arow = acc.data() + ci * Cout;
                                           for (std::int64_t c = 0; c < Cout; ++c) arow[c] += xv * grow[c];
                                       }
                                   }
                               }
                               for (std::int64_t ci = 0; ci < Cin; ++ci) {
                                   for (std::int64_t c = 0; c < Cout; ++c) {
                                       pw.grad[static_cast<std::size_t>((c * Cin + ci) * h + i)] += acc[static_cast<std::size_t>(ci * Cout + c)];
                                   }
                               }
                           }
                       }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::int64_t d = x.dim(x.rank() - 1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    }
    const std::int64_t rows = x.size() / d;
    std::vector<double> out(static_cast<std::size_t>(x.size()));
    std::vector<double> xhat(static_cast<std::size_t>(x.size()));
    std::vector<double> invstd(static_cast<std::size_t>(rows));
    const double* xd = x.data().data();
    const double* gd = gamma.data().data();
    const double* bd = beta.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = xd + r * d;
        double mu = 0.0;
        for (std::int64_t i = 0; i < d; ++i) mu += xr[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double c = xr[i] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<std::size_t>(r)] = is;
        double* xh = xhat.data() + r * d;
        double* y = out.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) {
            xh[i] = (xr[i] - mu) * is;
            y[i] = xh[i] * gd[i] + bd[i];
        }
    }
    return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                   [rows, d, xhat = std::move(xhat), invstd = std::move(invstd)](Node& node) {
                       Node& px = *node.parents[0];
                       Node& pg = *node.parents[1];
                       Node& pb = *node.parents[2];
                       const double* g = node.grad.data();
                       if (pb.requires_grad) {
                           pb.ensure_grad();
                           for (std::int64_t r = 0; r < rows; ++r) {
                               const double* grow = g + r * d;
                               for (std::int64_t i = 0; i < d; ++i) pb.grad[static_cast<std::size_t>(i)] += grow[i];
                           }
                       }
                       if (pg.requires_grad) {
                           pg.ensure_grad();
                           for (std::int64_t r = 0; r < rows; ++r) {
                               const double* grow = g + r * d;
                               const double* xh = xhat.data() + r * d;
                               for (std::int64_t i = 0; i < d; ++i) pg.grad[static_cast<std::size_t>(i)] += grow[i] * xh[i];
                           }
                       }
                       if (px.requires_grad) {
                           px.ensure_grad();
                           const double invd = 1.0 / static_cast<double>(d);
                           for (std::int64_t r = 0; r < rows; ++r) {
                               const double* grow = g + r * d;
                               const double* xh = xhat.data() + r * d;
                               double sum_a = 0.0, sum_ax = 0.0;
                               for (std::int64_t i = 0; i < d; ++i) {
                                   const double a = grow[i] * pg.data[static_cast<std::size_t>(i)];
                                   sum_a += a;
                                   sum_ax += a * xh[i];
                               }
                               const double is = invstd[static_cast<std::size_t>(r)];
                               double* dst = px.grad.data() + r * d;
                               for (std::int64_t i = 0; i < d; ++i) {
                                   const double a = grow[i] * pg.data[static_cast<std::size_t>(i)];
                                   dst[i] += is * (a - invd * sum_a - xh[i] * invd * sum_ax);
                               }
                           }
                       }
                   });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op("sum", Shape{1}, std::vector<double>{s}, {a}, [](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const double g = node.grad[0];
        for (double& v : pa.grad) v += g;
    });
}

Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double invn = 1.0 / static_cast<double>(a.size());
    return make_op("mean", Shape{1}, std::vector<double>{s * invn}, {a}, [invn](Node& node) {
        Node& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const double g = node.grad[0] * invn;
        for (double& v : pa.grad) v += g;
    });
}

Tensor make_dropout_mask(const Shape& shape, double p, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
    const auto n = static_cast<std::size_t>(shape_size(shape));
    std::vector<double> mask(n);
    for (auto& v : mask) v = rng.uniform() < p ? 0.0 : 1.0;
    return Tensor(shape, std::move(mask), false);
}

Tensor apply_dropout_mask(const Tensor& x, const Tensor& mask, double keep) {
    if (x.shape() != mask.shape()) {
        throw ShapeError("dropout mask shape " + shape_str(mask.shape()) + " does not match " + shape_str(x.shape()));
    }
    if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("dropout keep probability must be in (0,1]");
    const auto n = static_cast<std::size_t>(x.size());
    const double inv = 1.0 / keep;
    std::vector<double> out(n);
    const auto& xd = x.data();
    const auto& md = mask.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = xd[i] * md[i] * inv;
    return make_op("dropout", x.shape(), std::move(out), {x, mask}, [n, inv](Node& node) {
        Node& px = *node.parents[0];
        Node& pm = *node.parents[1];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) px.grad[i] += node.grad[i] * pm.data[i] * inv;
    });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    Tensor mask = make_dropout_mask(x.shape(), p, rng);
    return apply_dropout_mask(x, mask, 1.0 - p);
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("tensor blob: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw DataError("tensor blob: truncated payload");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(u);
}

}  // namespace

void write_tensor_blob(std::ostream& out, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::int64_t i = 0; i < t.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    for (double v : t.data()) put_f64(out, v);
}

Tensor read_tensor_blob(std::istream& in) {
    const std::uint32_t rank = get_u32(in);
    if (rank > 16) throw DataError("tensor blob: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
        d = static_cast<std::int64_t>(get_u32(in));
        if (d <= 0) throw DataError("tensor blob: non-positive dimension");
    }
    const auto n = static_cast<std::size_t>(shape_size(shape));
    std::vector<double> data(n);
    for (auto& v : data) v = get_f64(in);
    return Tensor(std::move(shape), std::move(data), false);
}

}  // namespace attnseq
