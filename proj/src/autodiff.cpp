#include "hrtse/autodiff.hpp"

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace hrtse::ad {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatF>;
using CMapM = Eigen::Map<const MatF>;
using ArrX = Eigen::Map<Eigen::ArrayXf>;
using CArrX = Eigen::Map<const Eigen::ArrayXf>;

namespace {

std::atomic<int64_t> g_live{0};
thread_local bool g_grad = true;

CMapM mat(const Tensor& t, int r, int c) { return CMapM(t.data.data(), r, c); }
MapM mat(Tensor& t, int r, int c) { return MapM(t.data.data(), r, c); }
CArrX arr(const Tensor& t) { return CArrX(t.data.data(), Eigen::Index(t.data.size())); }
ArrX arr(Tensor& t) { return ArrX(t.data.data(), Eigen::Index(t.data.size())); }

Var make(Tensor value, std::vector<Var> parents,
         std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool req = false;
    if (g_grad)
        for (const auto& p : parents)
            if (p && p->requires_grad) req = true;
    n->requires_grad = req;
    if (req) {
        n->parents = std::move(parents);
        n->backprop = std::move(fn);
    }
    return n;
}

int rows_before_last(const Tensor& t) {
    if (t.ndim() < 1) throw ShapeError("op needs at least one dimension");
    int last = t.dim(t.ndim() - 1);
    return int(t.numel() / last);
}

}  // namespace

Node::Node() { ++g_live; }
Node::~Node() { --g_live; }
int64_t live_nodes() { return g_live.load(); }

void Node::accumulate(const Tensor& g) {
    if (!requires_grad) return;
    if (!has_grad) {
        grad = g;
        has_grad = true;
        return;
    }
    check_same_shape(grad, g, "grad accumulate");
    arr(grad) += arr(g);
}

void Node::zero_grad() {
    grad = Tensor::zeros(value.shape);
    has_grad = false;
}

Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

bool grad_enabled() { return g_grad; }
NoGradGuard::NoGradGuard() : prev(g_grad) { g_grad = false; }
NoGradGuard::~NoGradGuard() { g_grad = prev; }

void backward(const Var& root) {
    if (!root) throw ValueError("backward: null root");
    if (root->value.numel() != 1)
        throw ShapeError("backward: root must be scalar, got " +
                         root->value.shape_str());
    if (!root->requires_grad) return;

    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }

    root->accumulate(Tensor::scalar(1.0f));
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->has_grad) n->backprop(*n);
    }
    // Sever edges so ownership chains never unwind recursively, and free
    // interior gradients; leaves keep theirs.
    for (Node* n : topo) {
        n->parents.clear();
        n->backprop = nullptr;
    }
}

// ---- arithmetic ---------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    arr(out) += arr(b->value);
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        a->accumulate(self.grad);
        b->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    arr(out) -= arr(b->value);
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        a->accumulate(self.grad);
        Tensor gb = self.grad;
        arr(gb) = -arr(gb);
        b->accumulate(gb);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    arr(out) *= arr(b->value);
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        Tensor ga = self.grad;
        arr(ga) *= arr(b->value);
        a->accumulate(ga);
        Tensor gb = self.grad;
        arr(gb) *= arr(a->value);
        b->accumulate(gb);
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a->value;
    arr(out) *= float(c);
    return make(std::move(out), {a}, [a, c](Node& self) {
        Tensor g = self.grad;
        arr(g) *= float(c);
        a->accumulate(g);
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor out = a->value;
    arr(out) += float(c);
    return make(std::move(out), {a},
                [a](Node& self) { a->accumulate(self.grad); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var mul_const(const Var& a, const Tensor& c) {
    check_same_shape(a->value, c, "mul_const");
    Tensor out = a->value;
    arr(out) *= arr(c);
    return make(std::move(out), {a}, [a, c](Node& self) {
        Tensor g = self.grad;
        arr(g) *= arr(c);
        a->accumulate(g);
    });
}

Var add_const(const Var& a, const Tensor& c) {
    check_same_shape(a->value, c, "add_const");
    Tensor out = a->value;
    arr(out) += arr(c);
    return make(std::move(out), {a},
                [a](Node& self) { a->accumulate(self.grad); });
}

Var add_bias(const Var& x, const Var& b) {
    int C = int(b->value.numel());
    int R = rows_before_last(x->value);
    if (x->value.dim(x->value.ndim() - 1) != C)
        throw ShapeError("add_bias: trailing dim != bias size");
    Tensor out = x->value;
    MapM(out.data.data(), R, C).rowwise() +=
        Eigen::Map<const Eigen::RowVectorXf>(b->value.data.data(), C);
    return make(std::move(out), {x, b}, [x, b, R, C](Node& self) {
        x->accumulate(self.grad);
        Tensor gb = Tensor::zeros(b->value.shape);
        Eigen::Map<Eigen::RowVectorXf>(gb.data.data(), C) =
            mat(self.grad, R, C).colwise().sum();
        b->accumulate(gb);
    });
}

Var rowwise_mul(const Var& x, const Var& v) {
    int C = int(v->value.numel());
    int R = rows_before_last(x->value);
    if (x->value.dim(x->value.ndim() - 1) != C)
        throw ShapeError("rowwise_mul: trailing dim != vector size");
    Tensor out = x->value;
    MapM(out.data.data(), R, C).array().rowwise() *=
        Eigen::Map<const Eigen::RowVectorXf>(v->value.data.data(), C).array();
    return make(std::move(out), {x, v}, [x, v, R, C](Node& self) {
        Tensor gx = self.grad;
        MapM(gx.data.data(), R, C).array().rowwise() *=
            Eigen::Map<const Eigen::RowVectorXf>(v->value.data.data(), C).array();
        x->accumulate(gx);
        Tensor gv = Tensor::zeros(v->value.shape);
        Eigen::Map<Eigen::RowVectorXf>(gv.data.data(), C) =
            (mat(self.grad, R, C).array() * mat(x->value, R, C).array())
                .colwise()
                .sum();
        v->accumulate(gv);
    });
}

Var colwise_mul(const Var& x, const Var& v) {
    int C = x->value.dim(0);
    if (int(v->value.numel()) != C)
        throw ShapeError("colwise_mul: channel count != vector size");
    int M = int(x->value.numel() / C);
    Tensor out = x->value;
    MapM(out.data.data(), C, M).array().colwise() *=
        Eigen::Map<const Eigen::VectorXf>(v->value.data.data(), C).array();
    return make(std::move(out), {x, v}, [x, v, C, M](Node& self) {
        Tensor gx = self.grad;
        MapM(gx.data.data(), C, M).array().colwise() *=
            Eigen::Map<const Eigen::VectorXf>(v->value.data.data(), C).array();
        x->accumulate(gx);
        Tensor gv = Tensor::zeros(v->value.shape);
        Eigen::Map<Eigen::VectorXf>(gv.data.data(), C) =
            (mat(self.grad, C, M).array() * mat(x->value, C, M).array())
                .rowwise()
                .sum();
        v->accumulate(gv);
    });
}

// ---- shape -----------------------------------------------------------------

Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out;
    out.shape = std::move(shape);
    if (out.numel() != a->value.numel())
        throw ShapeError("reshape: element count mismatch " +
                         a->value.shape_str() + " -> " + out.shape_str());
    out.data = a->value.data;
    std::vector<int> back = a->value.shape;
    return make(std::move(out), {a}, [a, back](Node& self) {
        Tensor g;
        g.shape = back;
        g.data = self.grad.data;
        a->accumulate(g);
    });
}

Var transpose(const Var& a) {
    if (a->value.ndim() != 2) throw ShapeError("transpose: need 2-d");
    int R = a->value.dim(0), C = a->value.dim(1);
    Tensor out = Tensor::zeros({C, R});
    mat(out, C, R) = mat(a->value, R, C).transpose();
    return make(std::move(out), {a}, [a, R, C](Node& self) {
        Tensor g = Tensor::zeros({R, C});
        mat(g, R, C) = mat(self.grad, C, R).transpose();
        a->accumulate(g);
    });
}

namespace {
Tensor permute3_tensor(const Tensor& t, int p0, int p1, int p2) {
    int d[3] = {t.dim(0), t.dim(1), t.dim(2)};
    int perm[3] = {p0, p1, p2};
    Tensor out = Tensor::zeros({d[p0], d[p1], d[p2]});
    int s[3];  // strides of source
    s[2] = 1;
    s[1] = d[2];
    s[0] = d[1] * d[2];
    size_t idx = 0;
    for (int i = 0; i < d[perm[0]]; ++i)
        for (int j = 0; j < d[perm[1]]; ++j)
            for (int k = 0; k < d[perm[2]]; ++k)
                out.data[idx++] =
                    t.data[size_t(i) * s[perm[0]] + size_t(j) * s[perm[1]] +
                           size_t(k) * s[perm[2]]];
    return out;
}
int inverse_of(int p0, int p1, int p2, int axis) {
    int perm[3] = {p0, p1, p2};
    for (int i = 0; i < 3; ++i)
        if (perm[i] == axis) return i;
    throw ShapeError("permute3: bad permutation");
}
}  // namespace

Var permute3(const Var& a, int p0, int p1, int p2) {
    if (a->value.ndim() != 3) throw ShapeError("permute3: need 3-d");
    Tensor out = permute3_tensor(a->value, p0, p1, p2);
    int i0 = inverse_of(p0, p1, p2, 0), i1 = inverse_of(p0, p1, p2, 1),
        i2 = inverse_of(p0, p1, p2, 2);
    return make(std::move(out), {a}, [a, i0, i1, i2](Node& self) {
        a->accumulate(permute3_tensor(self.grad, i0, i1, i2));
    });
}

namespace {
struct AxisSplit {
    int64_t outer, axis_dim, inner;
};
AxisSplit split_at(const Tensor& t, int axis) {
    if (axis < 0 || axis >= t.ndim()) throw ShapeError("bad axis");
    AxisSplit s{1, t.dim(axis), 1};
    for (int i = 0; i < axis; ++i) s.outer *= t.dim(i);
    for (int i = axis + 1; i < t.ndim(); ++i) s.inner *= t.dim(i);
    return s;
}
}  // namespace

Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    std::vector<int> shape = xs[0]->value.shape;
    int total = 0;
    for (const auto& x : xs) {
        if (x->value.ndim() != int(shape.size()))
            throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < int(shape.size()); ++i)
            if (i != axis && x->value.dim(i) != shape[size_t(i)])
                throw ShapeError("concat: off-axis shape mismatch");
        total += x->value.dim(axis);
    }
    shape[size_t(axis)] = total;
    Tensor out;
    out.shape = shape;
    out.data.resize(size_t(out.numel()));
    AxisSplit so = split_at(out, axis);
    int64_t step_out = so.axis_dim * so.inner;
    int64_t off = 0;
    for (const auto& x : xs) {
        AxisSplit sx = split_at(x->value, axis);
        int64_t step_x = sx.axis_dim * sx.inner;
        for (int64_t o = 0; o < so.outer; ++o)
            std::copy_n(x->value.data.data() + o * step_x, step_x,
                        out.data.data() + o * step_out + off);
        off += step_x;
    }
    std::vector<Var> parents = xs;
    return make(std::move(out), parents, [parents, axis](Node& self) {
        AxisSplit so = split_at(self.grad, axis);
        int64_t step_out = so.axis_dim * so.inner;
        int64_t off = 0;
        for (const auto& x : parents) {
            AxisSplit sx = split_at(x->value, axis);
            int64_t step_x = sx.axis_dim * sx.inner;
            Tensor g = Tensor::zeros(x->value.shape);
            for (int64_t o = 0; o < so.outer; ++o)
                std::copy_n(self.grad.data.data() + o * step_out + off, step_x,
                            g.data.data() + o * step_x);
            x->accumulate(g);
            off += step_x;
        }
    });
}

Var slice(const Var& a, int axis, int start, int len) {
    AxisSplit s = split_at(a->value, axis);
    if (start < 0 || len <= 0 || start + len > s.axis_dim)
        throw ShapeError("slice: range out of bounds");
    std::vector<int> shape = a->value.shape;
    shape[size_t(axis)] = len;
    Tensor out;
    out.shape = shape;
    out.data.resize(size_t(out.numel()));
    for (int64_t o = 0; o < s.outer; ++o)
        std::copy_n(
            a->value.data.data() + (o * s.axis_dim + start) * s.inner,
            int64_t(len) * s.inner, out.data.data() + o * len * s.inner);
    return make(std::move(out), {a}, [a, axis, start, len](Node& self) {
        AxisSplit s = split_at(a->value, axis);
        Tensor g = Tensor::zeros(a->value.shape);
        for (int64_t o = 0; o < s.outer; ++o)
            std::copy_n(self.grad.data.data() + o * len * s.inner,
                        int64_t(len) * s.inner,
                        g.data.data() + (o * s.axis_dim + start) * s.inner);
        a->accumulate(g);
    });
}

Var tile_time3(const Var& a, int T) {
    if (a->value.ndim() != 2) throw ShapeError("tile_time3: need [C, F]");
    int C = a->value.dim(0), F = a->value.dim(1);
    Tensor out = Tensor::zeros({C, T, F});
    for (int c = 0; c < C; ++c)
        for (int t = 0; t < T; ++t)
            std::copy_n(a->value.data.data() + size_t(c) * F, F,
                        out.data.data() + (size_t(c) * T + t) * F);
    return make(std::move(out), {a}, [a, C, T, F](Node& self) {
        Tensor g = Tensor::zeros({C, F});
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < T; ++t) {
                const float* src = self.grad.data.data() + (size_t(c) * T + t) * F;
                float* dst = g.data.data() + size_t(c) * F;
                for (int f = 0; f < F; ++f) dst[f] += src[f];
            }
        a->accumulate(g);
    });
}

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a) {
    double acc = 0.0;
    for (float v : a->value.data) acc += v;
    return make(Tensor::scalar(float(acc)), {a}, [a](Node& self) {
        Tensor g = Tensor::full(a->value.shape, self.grad.at(0));
        a->accumulate(g);
    });
}

Var mean(const Var& a) {
    int64_t n = a->value.numel();
    if (n == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / double(n));
}

Var sum_axis(const Var& a, int axis) {
    AxisSplit s = split_at(a->value, axis);
    std::vector<int> shape;
    for (int i = 0; i < a->value.ndim(); ++i)
        if (i != axis) shape.push_back(a->value.dim(i));
    if (shape.empty()) shape.push_back(1);
    Tensor out = Tensor::zeros(shape);
    for (int64_t o = 0; o < s.outer; ++o)
        for (int64_t k = 0; k < s.axis_dim; ++k) {
            const float* src = a->value.data.data() + (o * s.axis_dim + k) * s.inner;
            float* dst = out.data.data() + o * s.inner;
            for (int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
    return make(std::move(out), {a}, [a, axis](Node& self) {
        AxisSplit s = split_at(a->value, axis);
        Tensor g = Tensor::zeros(a->value.shape);
        for (int64_t o = 0; o < s.outer; ++o)
            for (int64_t k = 0; k < s.axis_dim; ++k)
                std::copy_n(self.grad.data.data() + o * s.inner, s.inner,
                            g.data.data() + (o * s.axis_dim + k) * s.inner);
        a->accumulate(g);
    });
}

Var mean_axis(const Var& a, int axis) {
    int n = a->value.dim(axis);
    return scale(sum_axis(a, axis), 1.0 / double(n));
}

// ---- nonlinearities --------------------------------------------------------

namespace {
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
    Tensor out = a->value;
    for (auto& v : out.data) v = f(v);
    Tensor saved = out;  // many derivatives are cheapest from the output
    return make(std::move(out), {a}, [a, saved, df](Node& self) {
        Tensor g = self.grad;
        const size_t n = g.data.size();
        for (size_t i = 0; i < n; ++i)
            g.data[i] *= df(a->value.data[i], saved.data[i]);
        a->accumulate(g);
    });
}
}  // namespace

Var relu(const Var& a) {
    return unary(
        a, [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Var sigmoid(const Var& a) {
    return unary(
        a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
        [](float, float y) { return y * (1.0f - y); });
}

Var tanh_(const Var& a) {
    return unary(
        a, [](float x) { return std::tanh(x); },
        [](float, float y) { return 1.0f - y * y; });
}

Var sqrt_(const Var& a) {
    return unary(
        a, [](float x) { return std::sqrt(x); },
        [](float, float y) { return 0.5f / (y > 1e-20f ? y : 1e-20f); });
}

Var square(const Var& a) {
    return unary(
        a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Var log_(const Var& a) {
    return unary(
        a, [](float x) { return std::log(x); },
        [](float x, float) { return 1.0f / x; });
}

Var pow_const(const Var& a, double e) {
    float fe = float(e);
    return unary(
        a, [fe](float x) { return std::pow(x, fe); },
        [fe](float x, float y) {
            return x > 1e-30f ? fe * y / x : 0.0f;
        });
}

Var softmax_lastdim(const Var& a) {
    int C = a->value.dim(a->value.ndim() - 1);
    int R = rows_before_last(a->value);
    Tensor out = a->value;
    MapM y(out.data.data(), R, C);
    for (int r = 0; r < R; ++r) {
        float m = y.row(r).maxCoeff();
        y.row(r) = (y.row(r).array() - m).exp();
        y.row(r) /= y.row(r).sum();
    }
    Tensor saved = out;
    return make(std::move(out), {a}, [a, saved, R, C](Node& self) {
        Tensor g = self.grad;
        MapM gm(g.data.data(), R, C);
        CMapM ym(saved.data.data(), R, C);
        for (int r = 0; r < R; ++r) {
            float dot = gm.row(r).dot(ym.row(r));
            gm.row(r) = ym.row(r).array() * (gm.row(r).array() - dot);
        }
        a->accumulate(g);
    });
}

Var prelu(const Var& x, const Var& alpha) {
    int C = x->value.dim(0);
    if (int(alpha->value.numel()) != C)
        throw ShapeError("prelu: alpha size != channel count");
    int M = int(x->value.numel() / C);
    Tensor out = x->value;
    for (int c = 0; c < C; ++c) {
        float a = alpha->value.at(c);
        float* p = out.data.data() + size_t(c) * M;
        for (int i = 0; i < M; ++i)
            if (p[i] < 0.0f) p[i] *= a;
    }
    return make(std::move(out), {x, alpha}, [x, alpha, C, M](Node& self) {
        Tensor gx = self.grad;
        Tensor ga = Tensor::zeros(alpha->value.shape);
        for (int c = 0; c < C; ++c) {
            float a = alpha->value.at(c);
            const float* xv = x->value.data.data() + size_t(c) * M;
            float* g = gx.data.data() + size_t(c) * M;
            double acc = 0.0;
            for (int i = 0; i < M; ++i)
                if (xv[i] < 0.0f) {
                    acc += double(g[i]) * xv[i];
                    g[i] *= a;
                }
            ga.at(c) = float(acc);
        }
        x->accumulate(gx);
        alpha->accumulate(ga);
    });
}

Var l2_normalize_rows(const Var& x, double eps) {
    int C = x->value.dim(x->value.ndim() - 1);
    int R = rows_before_last(x->value);
    Tensor out = x->value;
    Tensor inv_n = Tensor::zeros({R});
    MapM y(out.data.data(), R, C);
    for (int r = 0; r < R; ++r) {
        float n = std::sqrt(y.row(r).squaredNorm() + float(eps));
        inv_n.at(r) = 1.0f / n;
        y.row(r) *= inv_n.at(r);
    }
    Tensor saved = out;
    return make(std::move(out), {x}, [x, saved, inv_n, R, C](Node& self) {
        Tensor g = self.grad;
        MapM gm(g.data.data(), R, C);
        CMapM ym(saved.data.data(), R, C);
        for (int r = 0; r < R; ++r) {
            float dot = gm.row(r).dot(ym.row(r));
            gm.row(r) = (gm.row(r) - dot * ym.row(r)) * inv_n.at(r);
        }
        x->accumulate(g);
    });
}

// ---- linear algebra ----------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2)
        throw ShapeError("matmul: need 2-d operands");
    int n = a->value.dim(0), k = a->value.dim(1), m = b->value.dim(1);
    if (b->value.dim(0) != k)
        throw ShapeError("matmul: inner dims " + a->value.shape_str() + " x " +
                         b->value.shape_str());
    Tensor out = Tensor::zeros({n, m});
    mat(out, n, m).noalias() = mat(a->value, n, k) * mat(b->value, k, m);
    return make(std::move(out), {a, b}, [a, b, n, k, m](Node& self) {
        Tensor ga = Tensor::zeros({n, k});
        mat(ga, n, k).noalias() =
            mat(self.grad, n, m) * mat(b->value, k, m).transpose();
        a->accumulate(ga);
        Tensor gb = Tensor::zeros({k, m});
        mat(gb, k, m).noalias() =
            mat(a->value, n, k).transpose() * mat(self.grad, n, m);
        b->accumulate(gb);
    });
}

Var matmul_const(const Var& a, const Tensor& b) {
    if (a->value.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul_const: need 2-d operands");
    int n = a->value.dim(0), k = a->value.dim(1), m = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul_const: inner dims");
    Tensor out = Tensor::zeros({n, m});
    mat(out, n, m).noalias() = mat(a->value, n, k) * mat(b, k, m);
    return make(std::move(out), {a}, [a, b, n, k, m](Node& self) {
        Tensor ga = Tensor::zeros({n, k});
        mat(ga, n, k).noalias() = mat(self.grad, n, m) * mat(b, k, m).transpose();
        a->accumulate(ga);
    });
}

Var bmm(const Var& a, const Var& b) {
    if (a->value.ndim() != 3 || b->value.ndim() != 3)
        throw ShapeError("bmm: need 3-d operands");
    int N = a->value.dim(0), p = a->value.dim(1), q = a->value.dim(2),
        r = b->value.dim(2);
    if (b->value.dim(0) != N || b->value.dim(1) != q)
        throw ShapeError("bmm: shape mismatch " + a->value.shape_str() + " x " +
                         b->value.shape_str());
    Tensor out = Tensor::zeros({N, p, r});
    for (int i = 0; i < N; ++i) {
        CMapM am(a->value.data.data() + size_t(i) * p * q, p, q);
        CMapM bm(b->value.data.data() + size_t(i) * q * r, q, r);
        MapM om(out.data.data() + size_t(i) * p * r, p, r);
        om.noalias() = am * bm;
    }
    return make(std::move(out), {a, b}, [a, b, N, p, q, r](Node& self) {
        Tensor ga = Tensor::zeros(a->value.shape);
        Tensor gb = Tensor::zeros(b->value.shape);
        for (int i = 0; i < N; ++i) {
            CMapM gm(self.grad.data.data() + size_t(i) * p * r, p, r);
            CMapM am(a->value.data.data() + size_t(i) * p * q, p, q);
            CMapM bm(b->value.data.data() + size_t(i) * q * r, q, r);
            MapM gam(ga.data.data() + size_t(i) * p * q, p, q);
            MapM gbm(gb.data.data() + size_t(i) * q * r, q, r);
            gam.noalias() = gm * bm.transpose();
            gbm.noalias() = am.transpose() * gm;
        }
        a->accumulate(ga);
        b->accumulate(gb);
    });
}

// ---- normalization -----------------------------------------------------

namespace {
// Shared forward/backward for normalizing each row of a [R, W] view, with
// either per-position (layernorm) or per-row (channel norm) affine terms.
struct NormCtx {
    Tensor xhat;   // [R, W]
    Tensor inv_s;  // [R]
};

NormCtx norm_forward(const Tensor& x, int R, int W, double eps, Tensor& out) {
    NormCtx ctx;
    ctx.xhat = Tensor::zeros({R, W});
    ctx.inv_s = Tensor::zeros({R});
    out = x;
    for (int r = 0; r < R; ++r) {
        const float* src = x.data.data() + size_t(r) * W;
        double mu = 0.0;
        for (int i = 0; i < W; ++i) mu += src[i];
        mu /= W;
        double var = 0.0;
        for (int i = 0; i < W; ++i) {
            double d = src[i] - mu;
            var += d * d;
        }
        var /= W;
        float inv = float(1.0 / std::sqrt(var + eps));
        ctx.inv_s.at(r) = inv;
        float* xh = ctx.xhat.data.data() + size_t(r) * W;
        for (int i = 0; i < W; ++i) xh[i] = (src[i] - float(mu)) * inv;
    }
    return ctx;
}

// dy is modified in place into dx.
void norm_backward(Tensor& dy, const NormCtx& ctx, int R, int W) {
    for (int r = 0; r < R; ++r) {
        float* g = dy.data.data() + size_t(r) * W;
        const float* xh = ctx.xhat.data.data() + size_t(r) * W;
        double m1 = 0.0, m2 = 0.0;
        for (int i = 0; i < W; ++i) {
            m1 += g[i];
            m2 += double(g[i]) * xh[i];
        }
        m1 /= W;
        m2 /= W;
        float inv = ctx.inv_s.at(r);
        for (int i = 0; i < W; ++i)
            g[i] = (g[i] - float(m1) - xh[i] * float(m2)) * inv;
    }
}
}  // namespace

Var layernorm_lastdim(const Var& x, const Var& gamma, const Var& beta,
                      double eps) {
    int W = x->value.dim(x->value.ndim() - 1);
    int R = rows_before_last(x->value);
    if (int(gamma->value.numel()) != W || int(beta->value.numel()) != W)
        throw ShapeError("layernorm: affine size != normalized width");
    Tensor out;
    NormCtx ctx = norm_forward(x->value, R, W, eps, out);
    for (int r = 0; r < R; ++r) {
        float* o = out.data.data() + size_t(r) * W;
        const float* xh = ctx.xhat.data.data() + size_t(r) * W;
        for (int i = 0; i < W; ++i)
            o[i] = xh[i] * gamma->value.at(i) + beta->value.at(i);
    }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, ctx, R, W](Node& self) {
                    Tensor gg = Tensor::zeros(gamma->value.shape);
                    Tensor gb = Tensor::zeros(beta->value.shape);
                    Tensor dy = self.grad;
                    for (int r = 0; r < R; ++r) {
                        const float* g = self.grad.data.data() + size_t(r) * W;
                        const float* xh = ctx.xhat.data.data() + size_t(r) * W;
                        for (int i = 0; i < W; ++i) {
                            gg.at(i) += g[i] * xh[i];
                            gb.at(i) += g[i];
                        }
                    }
                    for (int r = 0; r < R; ++r) {
                        float* g = dy.data.data() + size_t(r) * W;
                        for (int i = 0; i < W; ++i) g[i] *= gamma->value.at(i);
                    }
                    norm_backward(dy, ctx, R, W);
                    x->accumulate(dy);
                    gamma->accumulate(gg);
                    beta->accumulate(gb);
                });
}

Var channel_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    int C = x->value.dim(0);
    int M = int(x->value.numel() / C);
    if (int(gamma->value.numel()) != C || int(beta->value.numel()) != C)
        throw ShapeError("channel_norm: affine size != channel count");
    Tensor out;
    NormCtx ctx = norm_forward(x->value, C, M, eps, out);
    for (int c = 0; c < C; ++c) {
        float* o = out.data.data() + size_t(c) * M;
        const float* xh = ctx.xhat.data.data() + size_t(c) * M;
        float g = gamma->value.at(c), b = beta->value.at(c);
        for (int i = 0; i < M; ++i) o[i] = xh[i] * g + b;
    }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, ctx, C, M](Node& self) {
                    Tensor gg = Tensor::zeros(gamma->value.shape);
                    Tensor gb = Tensor::zeros(beta->value.shape);
                    Tensor dy = self.grad;
                    for (int c = 0; c < C; ++c) {
                        float* g = dy.data.data() + size_t(c) * M;
                        const float* xh = ctx.xhat.data.data() + size_t(c) * M;
                        double sg = 0.0, sgx = 0.0;
                        for (int i = 0; i < M; ++i) {
                            sg += g[i];
                            sgx += double(g[i]) * xh[i];
                        }
                        gg.at(c) = float(sgx);
                        gb.at(c) = float(sg);
                        float gam = gamma->value.at(c);
                        for (int i = 0; i < M; ++i) g[i] *= gam;
                    }
                    norm_backward(dy, ctx, C, M);
                    x->accumulate(dy);
                    gamma->accumulate(gg);
                    beta->accumulate(gb);
                });
}

// ---- recurrent --------------------------------------------------------

Var lstm(const Var& x, const Var& wx, const Var& wh, const Var& b,
         bool reverse) {
    if (x->value.ndim() != 3) throw ShapeError("lstm: x must be [S,B,I]");
    int S = x->value.dim(0), B = x->value.dim(1), I = x->value.dim(2);
    int H4 = wx->value.dim(1);
    int H = H4 / 4;
    if (wx->value.dim(0) != I || wh->value.dim(0) != H ||
        wh->value.dim(1) != H4 || int(b->value.numel()) != H4 || H * 4 != H4)
        throw ShapeError("lstm: weight shapes inconsistent");

    // Gates and cell states saved per processing step (j), not raw time.
    Tensor gates = Tensor::zeros({S, B, 4 * H});
    Tensor cells = Tensor::zeros({S, B, H});
    Tensor tanhc = Tensor::zeros({S, B, H});
    Tensor out = Tensor::zeros({S, B, H});

    Eigen::RowVectorXf bias = Eigen::Map<const Eigen::RowVectorXf>(
        b->value.data.data(), H4);
    CMapM wxm(wx->value.data.data(), I, H4);
    CMapM whm(wh->value.data.data(), H, H4);
    MatF h_prev = MatF::Zero(B, H);
    MatF c_prev = MatF::Zero(B, H);

    for (int j = 0; j < S; ++j) {
        int s = reverse ? S - 1 - j : j;
        CMapM xt(x->value.data.data() + size_t(s) * B * I, B, I);
        MapM z(gates.data.data() + size_t(j) * B * H4, B, H4);
        z.noalias() = xt * wxm;
        z.noalias() += h_prev * whm;
        z.rowwise() += bias;
        // i, f, o -> sigmoid; g -> tanh
        auto za = z.array();
        z.block(0, 0, B, H) = (1.0f / (1.0f + (-za.block(0, 0, B, H)).exp()));
        z.block(0, H, B, H) = (1.0f / (1.0f + (-za.block(0, H, B, H)).exp()));
        z.block(0, 2 * H, B, H) = za.block(0, 2 * H, B, H).tanh();
        z.block(0, 3 * H, B, H) = (1.0f / (1.0f + (-za.block(0, 3 * H, B, H)).exp()));

        MapM c(cells.data.data() + size_t(j) * B * H, B, H);
        c.array() = z.array().block(0, H, B, H) * c_prev.array() +
                    z.array().block(0, 0, B, H) * z.array().block(0, 2 * H, B, H);
        MapM tc(tanhc.data.data() + size_t(j) * B * H, B, H);
        tc.array() = c.array().tanh();
        MapM h(out.data.data() + size_t(s) * B * H, B, H);
        h.array() = z.array().block(0, 3 * H, B, H) * tc.array();
        h_prev = h;
        c_prev = c;
    }

    return make(
        std::move(out), {x, wx, wh, b},
        [x, wx, wh, b, gates, cells, tanhc, S, B, I, H, reverse](Node& self) {
            int H4 = 4 * H;
            CMapM wxm(wx->value.data.data(), I, H4);
            CMapM whm(wh->value.data.data(), H, H4);
            Tensor gx = Tensor::zeros(x->value.shape);
            MatF gwx = MatF::Zero(I, H4), gwh = MatF::Zero(H, H4);
            Eigen::RowVectorXf gb = Eigen::RowVectorXf::Zero(H4);
            MatF dh_rec = MatF::Zero(B, H), dc = MatF::Zero(B, H);
            MatF dz(B, H4);

            for (int j = S - 1; j >= 0; --j) {
                int s = reverse ? S - 1 - j : j;
                CMapM z(gates.data.data() + size_t(j) * B * H4, B, H4);
                CMapM tc(tanhc.data.data() + size_t(j) * B * H, B, H);
                CMapM gh(self.grad.data.data() + size_t(s) * B * H, B, H);

                MatF dh = gh + dh_rec;
                auto zi = z.array().block(0, 0, B, H);
                auto zf = z.array().block(0, H, B, H);
                auto zg = z.array().block(0, 2 * H, B, H);
                auto zo = z.array().block(0, 3 * H, B, H);

                // through h = o * tanh(c)
                dz.array().block(0, 3 * H, B, H) =
                    dh.array() * tc.array() * zo * (1.0f - zo);
                dc.array() += dh.array() * zo * (1.0f - tc.array().square());

                // c = f * c_prev + i * g
                if (j > 0) {
                    CMapM cp(cells.data.data() + size_t(j - 1) * B * H, B, H);
                    dz.array().block(0, H, B, H) =
                        dc.array() * cp.array() * zf * (1.0f - zf);
                } else {
                    dz.block(0, H, B, H).setZero();  // c_prev is zero
                }
                dz.array().block(0, 0, B, H) = dc.array() * zg * zi * (1.0f - zi);
                dz.array().block(0, 2 * H, B, H) =
                    dc.array() * zi * (1.0f - zg.square());

                CMapM xt(x->value.data.data() + size_t(s) * B * I, B, I);
                gwx.noalias() += xt.transpose() * dz;
                if (j > 0) {
                    int sp = reverse ? S - j : j - 1;  // previous step's time
                    CMapM hp(self.value.data.data() + size_t(sp) * B * H, B, H);
                    gwh.noalias() += hp.transpose() * dz;
                }
                gb += dz.colwise().sum();
                MapM gxt(gx.data.data() + size_t(s) * B * I, B, I);
                gxt.noalias() = dz * wxm.transpose();
                dh_rec.noalias() = dz * whm.transpose();
                dc.array() *= zf;  // carry into c_{prev}
            }
            x->accumulate(gx);
            Tensor twx = Tensor::zeros(wx->value.shape);
            MapM(twx.data.data(), I, H4) = gwx;
            wx->accumulate(twx);
            Tensor twh = Tensor::zeros(wh->value.shape);
            MapM(twh.data.data(), H, H4) = gwh;
            wh->accumulate(twh);
            Tensor tb = Tensor::zeros(b->value.shape);
            Eigen::Map<Eigen::RowVectorXf>(tb.data.data(), H4) = gb;
            b->accumulate(tb);
        });
}

// ---- convolution ---------------------------------------------------------

namespace {

// im2col for conv1d with same-size zero padding.
Tensor im2col_1d(const Tensor& x, int K, int dil) {
    int Cin = x.dim(0), T = x.dim(1);
    int pad = dil * (K - 1) / 2;
    Tensor col = Tensor::zeros({Cin * K, T});
    for (int c = 0; c < Cin; ++c)
        for (int k = 0; k < K; ++k) {
            float* dst = col.data.data() + size_t(c * K + k) * T;
            int off = k * dil - pad;
            int lo = std::max(0, -off), hi = std::min(T, T - off);
            const float* src = x.data.data() + size_t(c) * T + off;
            for (int t = lo; t < hi; ++t) dst[t] = src[t];
        }
    return col;
}

void col2im_1d_add(const Tensor& col, int K, int dil, Tensor& gx) {
    int Cin = gx.dim(0), T = gx.dim(1);
    int pad = dil * (K - 1) / 2;
    for (int c = 0; c < Cin; ++c)
        for (int k = 0; k < K; ++k) {
            const float* src = col.data.data() + size_t(c * K + k) * T;
            int off = k * dil - pad;
            int lo = std::max(0, -off), hi = std::min(T, T - off);
            float* dst = gx.data.data() + size_t(c) * T + off;
            for (int t = lo; t < hi; ++t) dst[t] += src[t];
        }
}

// im2col for the downsampling conv2d: time pad 1 stride 1, freq stride 2.
Tensor im2col_2d(const Tensor& x, int Fout) {
    int Cin = x.dim(0), T = x.dim(1), F = x.dim(2);
    Tensor col = Tensor::zeros({Cin * 9, T * Fout});
    for (int c = 0; c < Cin; ++c)
        for (int kt = 0; kt < 3; ++kt)
            for (int kf = 0; kf < 3; ++kf) {
                float* dst = col.data.data() + size_t((c * 3 + kt) * 3 + kf) * T * Fout;
                for (int t = 0; t < T; ++t) {
                    int ts = t + kt - 1;
                    if (ts < 0 || ts >= T) continue;
                    const float* src = x.data.data() + (size_t(c) * T + ts) * F + kf;
                    float* drow = dst + size_t(t) * Fout;
                    for (int f = 0; f < Fout; ++f) drow[f] = src[2 * f];
                }
            }
    return col;
}

void col2im_2d_add(const Tensor& col, Tensor& gx, int Fout) {
    int Cin = gx.dim(0), T = gx.dim(1), F = gx.dim(2);
    for (int c = 0; c < Cin; ++c)
        for (int kt = 0; kt < 3; ++kt)
            for (int kf = 0; kf < 3; ++kf) {
                const float* src =
                    col.data.data() + size_t((c * 3 + kt) * 3 + kf) * T * Fout;
                for (int t = 0; t < T; ++t) {
                    int ts = t + kt - 1;
                    if (ts < 0 || ts >= T) continue;
                    float* dst = gx.data.data() + (size_t(c) * T + ts) * F + kf;
                    const float* srow = src + size_t(t) * Fout;
                    for (int f = 0; f < Fout; ++f) dst[2 * f] += srow[f];
                }
            }
}

}  // namespace

Var conv1d(const Var& x, const Var& w, const Var& b, int dilation) {
    if (x->value.ndim() != 2 || w->value.ndim() != 3)
        throw ShapeError("conv1d: x must be [C,T], w [Cout,Cin,K]");
    int Cin = x->value.dim(0), T = x->value.dim(1);
    int Cout = w->value.dim(0), K = w->value.dim(2);
    if (w->value.dim(1) != Cin) throw ShapeError("conv1d: channel mismatch");
    if (K % 2 == 0) throw ShapeError("conv1d: kernel must be odd");

    Tensor col = im2col_1d(x->value, K, dilation);
    Tensor out = Tensor::zeros({Cout, T});
    mat(out, Cout, T).noalias() =
        mat(w->value, Cout, Cin * K) * mat(col, Cin * K, T);
    for (int c = 0; c < Cout; ++c) {
        float bv = b->value.at(c);
        float* p = out.data.data() + size_t(c) * T;
        for (int t = 0; t < T; ++t) p[t] += bv;
    }
    return make(std::move(out), {x, w, b},
                [x, w, b, col, Cin, Cout, T, K, dilation](Node& self) {
                    Tensor gw = Tensor::zeros(w->value.shape);
                    mat(gw, Cout, Cin * K).noalias() =
                        mat(self.grad, Cout, T) * mat(col, Cin * K, T).transpose();
                    w->accumulate(gw);
                    Tensor gb = Tensor::zeros(b->value.shape);
                    for (int c = 0; c < Cout; ++c) {
                        const float* p = self.grad.data.data() + size_t(c) * T;
                        double acc = 0.0;
                        for (int t = 0; t < T; ++t) acc += p[t];
                        gb.at(c) = float(acc);
                    }
                    b->accumulate(gb);
                    Tensor gcol = Tensor::zeros({Cin * K, T});
                    mat(gcol, Cin * K, T).noalias() =
                        mat(w->value, Cout, Cin * K).transpose() *
                        mat(self.grad, Cout, T);
                    Tensor gx = Tensor::zeros(x->value.shape);
                    col2im_1d_add(gcol, K, dilation, gx);
                    x->accumulate(gx);
                });
}

Var conv2d_down(const Var& x, const Var& w, const Var& b) {
    if (x->value.ndim() != 3 || w->value.ndim() != 4)
        throw ShapeError("conv2d_down: x must be [C,T,F], w [Cout,Cin,3,3]");
    int Cin = x->value.dim(0), T = x->value.dim(1), F = x->value.dim(2);
    int Cout = w->value.dim(0);
    if (w->value.dim(1) != Cin || w->value.dim(2) != 3 || w->value.dim(3) != 3)
        throw ShapeError("conv2d_down: weight shape");
    if (F < 3) throw ShapeError("conv2d_down: frequency axis too small");
    int Fout = (F - 3) / 2 + 1;

    Tensor col = im2col_2d(x->value, Fout);
    Tensor out = Tensor::zeros({Cout, T, Fout});
    mat(out, Cout, T * Fout).noalias() =
        mat(w->value, Cout, Cin * 9) * mat(col, Cin * 9, T * Fout);
    for (int c = 0; c < Cout; ++c) {
        float bv = b->value.at(c);
        float* p = out.data.data() + size_t(c) * T * Fout;
        for (int i = 0; i < T * Fout; ++i) p[i] += bv;
    }
    return make(std::move(out), {x, w, b},
                [x, w, b, col, Cin, Cout, T, Fout](Node& self) {
                    Tensor gw = Tensor::zeros(w->value.shape);
                    mat(gw, Cout, Cin * 9).noalias() =
                        mat(self.grad, Cout, T * Fout) *
                        mat(col, Cin * 9, T * Fout).transpose();
                    w->accumulate(gw);
                    Tensor gb = Tensor::zeros(b->value.shape);
                    for (int c = 0; c < Cout; ++c) {
                        const float* p = self.grad.data.data() + size_t(c) * T * Fout;
                        double acc = 0.0;
                        for (int i = 0; i < T * Fout; ++i) acc += p[i];
                        gb.at(c) = float(acc);
                    }
                    b->accumulate(gb);
                    Tensor gcol = Tensor::zeros({Cin * 9, T * Fout});
                    mat(gcol, Cin * 9, T * Fout).noalias() =
                        mat(w->value, Cout, Cin * 9).transpose() *
                        mat(self.grad, Cout, T * Fout);
                    Tensor gx = Tensor::zeros(x->value.shape);
                    col2im_2d_add(gcol, gx, Fout);
                    x->accumulate(gx);
                });
}

Var conv_transpose2d_up(const Var& x, const Var& w, const Var& b, int out_pad) {
    if (x->value.ndim() != 3 || w->value.ndim() != 4)
        throw ShapeError("conv_transpose2d_up: x must be [C,T,F], w [Cin,Cout,3,3]");
    int Cin = x->value.dim(0), T = x->value.dim(1), F = x->value.dim(2);
    int Cout = w->value.dim(1);
    if (w->value.dim(0) != Cin || w->value.dim(2) != 3 || w->value.dim(3) != 3)
        throw ShapeError("conv_transpose2d_up: weight shape");
    if (out_pad < 0 || out_pad > 1)
        throw ShapeError("conv_transpose2d_up: out_pad must be 0 or 1");
    int Fout = (F - 1) * 2 + 3 + out_pad;

    // cols[(co*9 + kt*3 + kf), t*F + f] then scatter into the output.
    auto wmat = [&](const Tensor& wt) {
        // reorder [Cin][Cout][3][3] as [Cout*9, Cin]
        Tensor m = Tensor::zeros({Cout * 9, Cin});
        for (int ci = 0; ci < Cin; ++ci)
            for (int co = 0; co < Cout; ++co)
                for (int k = 0; k < 9; ++k)
                    m.at(co * 9 + k, ci) = wt.data[(size_t(ci) * Cout + co) * 9 + k];
        return m;
    };
    Tensor wm = wmat(w->value);
    Tensor cols = Tensor::zeros({Cout * 9, T * F});
    mat(cols, Cout * 9, T * F).noalias() =
        mat(wm, Cout * 9, Cin) * mat(x->value, Cin, T * F);

    Tensor out = Tensor::zeros({Cout, T, Fout});
    for (int co = 0; co < Cout; ++co)
        for (int kt = 0; kt < 3; ++kt)
            for (int kf = 0; kf < 3; ++kf) {
                const float* src =
                    cols.data.data() + size_t((co * 3 + kt) * 3 + kf) * T * F;
                for (int t = 0; t < T; ++t) {
                    int to = t + kt - 1;
                    if (to < 0 || to >= T) continue;
                    float* dst = out.data.data() + (size_t(co) * T + to) * Fout + kf;
                    const float* srow = src + size_t(t) * F;
                    for (int f = 0; f < F; ++f) dst[2 * f] += srow[f];
                }
            }
    for (int c = 0; c < Cout; ++c) {
        float bv = b->value.at(c);
        float* p = out.data.data() + size_t(c) * T * Fout;
        for (int i = 0; i < T * Fout; ++i) p[i] += bv;
    }

    return make(
        std::move(out), {x, w, b},
        [x, w, b, Cin, Cout, T, F, Fout](Node& self) {
            // gather the cotangent with the same geometry
            Tensor gcols = Tensor::zeros({Cout * 9, T * F});
            for (int co = 0; co < Cout; ++co)
                for (int kt = 0; kt < 3; ++kt)
                    for (int kf = 0; kf < 3; ++kf) {
                        float* dst = gcols.data.data() +
                                     size_t((co * 3 + kt) * 3 + kf) * T * F;
                        for (int t = 0; t < T; ++t) {
                            int to = t + kt - 1;
                            if (to < 0 || to >= T) continue;
                            const float* src = self.grad.data.data() +
                                               (size_t(co) * T + to) * Fout + kf;
                            float* drow = dst + size_t(t) * F;
                            for (int f = 0; f < F; ++f) drow[f] = src[2 * f];
                        }
                    }
            Tensor gwm = Tensor::zeros({Cout * 9, Cin});
            mat(gwm, Cout * 9, Cin).noalias() =
                mat(gcols, Cout * 9, T * F) *
                mat(x->value, Cin, T * F).transpose();
            Tensor gw = Tensor::zeros(w->value.shape);
            for (int ci = 0; ci < Cin; ++ci)
                for (int co = 0; co < Cout; ++co)
                    for (int k = 0; k < 9; ++k)
                        gw.data[(size_t(ci) * Cout + co) * 9 + k] =
                            gwm.at(co * 9 + k, ci);
            w->accumulate(gw);

            Tensor wm = Tensor::zeros({Cout * 9, Cin});
            for (int ci = 0; ci < Cin; ++ci)
                for (int co = 0; co < Cout; ++co)
                    for (int k = 0; k < 9; ++k)
                        wm.at(co * 9 + k, ci) =
                            w->value.data[(size_t(ci) * Cout + co) * 9 + k];
            Tensor gx = Tensor::zeros(x->value.shape);
            mat(gx, Cin, T * F).noalias() =
                mat(wm, Cout * 9, Cin).transpose() * mat(gcols, Cout * 9, T * F);
            x->accumulate(gx);

            Tensor gb = Tensor::zeros(b->value.shape);
            for (int c = 0; c < Cout; ++c) {
                const float* p = self.grad.data.data() + size_t(c) * T * Fout;
                double acc = 0.0;
                for (int i = 0; i < T * Fout; ++i) acc += p[i];
                gb.at(c) = float(acc);
            }
            b->accumulate(gb);
        });
}

// ---- framing -------------------------------------------------------------

Var gather_frames(const Var& x, int win, int hop) {
    if (x->value.ndim() != 1) throw ShapeError("gather_frames: need 1-d");
    int N = x->value.dim(0);
    if (N < win) throw ValueError("gather_frames: input shorter than window");
    int T = 1 + (N - win) / hop;
    Tensor out = Tensor::zeros({T, win});
    for (int t = 0; t < T; ++t)
        std::copy_n(x->value.data.data() + size_t(t) * hop, win,
                    out.data.data() + size_t(t) * win);
    return make(std::move(out), {x}, [x, T, win, hop](Node& self) {
        Tensor g = Tensor::zeros(x->value.shape);
        for (int t = 0; t < T; ++t) {
            const float* src = self.grad.data.data() + size_t(t) * win;
            float* dst = g.data.data() + size_t(t) * hop;
            for (int k = 0; k < win; ++k) dst[k] += src[k];
        }
        x->accumulate(g);
    });
}

Var overlap_add(const Var& frames, int hop, int out_len) {
    if (frames->value.ndim() != 2) throw ShapeError("overlap_add: need [T,win]");
    int T = frames->value.dim(0), win = frames->value.dim(1);
    Tensor out = Tensor::zeros({out_len});
    for (int t = 0; t < T; ++t) {
        const float* src = frames->value.data.data() + size_t(t) * win;
        for (int k = 0; k < win; ++k) {
            int idx = t * hop + k;
            if (idx >= 0 && idx < out_len) out.data[size_t(idx)] += src[k];
        }
    }
    return make(std::move(out), {frames}, [frames, T, win, hop, out_len](Node& self) {
        Tensor g = Tensor::zeros(frames->value.shape);
        for (int t = 0; t < T; ++t) {
            float* dst = g.data.data() + size_t(t) * win;
            for (int k = 0; k < win; ++k) {
                int idx = t * hop + k;
                if (idx >= 0 && idx < out_len) dst[k] = self.grad.data[size_t(idx)];
            }
        }
        frames->accumulate(g);
    });
}

// ---- classification head -----------------------------------------------

Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets) {
    if (logits->value.ndim() != 2)
        throw ShapeError("cross_entropy_rows: logits must be [B,K]");
    int B = logits->value.dim(0), K = logits->value.dim(1);
    if (int(targets.size()) != B)
        throw ShapeError("cross_entropy_rows: target count != batch");
    Tensor probs = logits->value;
    MapM p(probs.data.data(), B, K);
    double loss = 0.0;
    for (int r = 0; r < B; ++r) {
        int t = targets[size_t(r)];
        if (t < 0 || t >= K) throw ValueError("cross_entropy_rows: bad target");
        float m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        float z = p.row(r).sum();
        p.row(r) /= z;
        loss -= std::log(std::max(double(p(r, t)), 1e-30));
    }
    loss /= B;
    return make(Tensor::scalar(float(loss)), {logits},
                [logits, probs, targets, B, K](Node& self) {
                    Tensor g = probs;
                    MapM gm(g.data.data(), B, K);
                    for (int r = 0; r < B; ++r) gm(r, targets[size_t(r)]) -= 1.0f;
                    gm *= self.grad.at(0) / float(B);
                    logits->accumulate(g);
                });
}

}  // namespace hrtse::ad
