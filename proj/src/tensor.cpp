#include "mathena/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "mathena/kernels.hpp"

namespace mathena {

namespace {
std::atomic<uint64_t> g_next_id{1};

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<float> data, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->id = g_next_id.fetch_add(1);
    return n;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

void check_finite(const std::vector<float>& v, const char* op) {
    for (float x : v)
        if (!std::isfinite(x)) throw NumericsError(std::string(op) + " produced non-finite value");
}

}  // namespace

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

void TensorNode::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(make_node(shape, std::vector<float>(static_cast<size_t>(numel(shape)), 0.0f),
                            requires_grad));
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
    return Tensor(make_node(shape, std::vector<float>(static_cast<size_t>(numel(shape)), value),
                            requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data, bool requires_grad) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data length");
    for (int d : shape)
        if (d <= 0) throw ShapeError("from_data: non-positive dimension in " + shape_str(shape));
    return Tensor(make_node(shape, std::move(data), requires_grad));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return Tensor(make_node(Shape{1}, std::vector<float>{value}, requires_grad));
}

float Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto root = loss.node();
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::unordered_set<uint64_t> seen;
    std::vector<std::shared_ptr<TensorNode>> stack{root};
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        if (!seen.insert(n->id).second) continue;
        nodes.push_back(n);
        for (auto& p : n->parents) stack.push_back(p);
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });
    root->ensure_grad();
    root->grad[0] += 1.0f;
    for (auto& n : nodes) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------- broadcasting ----------------

namespace {

constexpr int kMaxRank = 4;

struct BcastPlan {
    Shape out;
    int rank = 0;
    int64_t odim[kMaxRank] = {1, 1, 1, 1};
    int64_t sa[kMaxRank] = {0, 0, 0, 0};  // strides into a, 0 on broadcast axes
    int64_t sb[kMaxRank] = {0, 0, 0, 0};
    int64_t n = 1;
    bool same_shape = false;
};

BcastPlan plan_broadcast(const Shape& a, const Shape& b) {
    if (a.size() > kMaxRank || b.size() > kMaxRank)
        throw ShapeError("broadcast: rank > 4 unsupported");
    BcastPlan p;
    p.rank = static_cast<int>(std::max(a.size(), b.size()));
    int64_t stra = 1, strb = 1;
    int64_t sa_full[kMaxRank], sb_full[kMaxRank];
    int da[kMaxRank], db[kMaxRank];
    for (int i = 0; i < p.rank; ++i) {
        int ia = static_cast<int>(a.size()) - 1 - i;
        int ib = static_cast<int>(b.size()) - 1 - i;
        da[i] = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
        db[i] = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
        sa_full[i] = stra;
        sb_full[i] = strb;
        stra *= da[i];
        strb *= db[i];
    }
    p.out.resize(static_cast<size_t>(p.rank));
    p.same_shape = true;
    for (int i = 0; i < p.rank; ++i) {
        int d;
        if (da[i] == db[i])
            d = da[i];
        else if (da[i] == 1)
            d = db[i];
        else if (db[i] == 1)
            d = da[i];
        else
            throw ShapeError("broadcast mismatch at trailing axis " + std::to_string(i));
        if (da[i] != db[i]) p.same_shape = false;
        // store dims most-significant first
        p.out[static_cast<size_t>(p.rank - 1 - i)] = d;
        p.odim[i] = d;
        p.sa[i] = (da[i] == 1 && d != 1) ? 0 : sa_full[i];
        p.sb[i] = (db[i] == 1 && d != 1) ? 0 : sb_full[i];
        p.n *= d;
    }
    return p;
}

template <class F>
Tensor binary_op(const Tensor& a, const Tensor& b, F&& f, const char* name,
                 const std::function<void(const BcastPlan&, TensorNode&, const Tensor&, const Tensor&)>& reg,
                 bool finiteness_check = false) {
    BcastPlan p = plan_broadcast(a.shape(), b.shape());
    std::vector<float> out(static_cast<size_t>(p.n));
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    if (p.same_shape) {
        for (int64_t i = 0; i < p.n; ++i) out[static_cast<size_t>(i)] = f(pa[i], pb[i]);
    } else {
        int64_t idx[kMaxRank] = {0, 0, 0, 0};
        int64_t ia = 0, ib = 0;
        for (int64_t i = 0; i < p.n; ++i) {
            out[static_cast<size_t>(i)] = f(pa[ia], pb[ib]);
            for (int d = 0; d < p.rank; ++d) {
                ++idx[d];
                ia += p.sa[d];
                ib += p.sb[d];
                if (idx[d] < p.odim[d]) break;
                ia -= p.sa[d] * p.odim[d];
                ib -= p.sb[d] * p.odim[d];
                idx[d] = 0;
            }
        }
    }
    if (finiteness_check) check_finite(out, name);
    auto node = make_node(p.out, std::move(out), any_requires_grad({&a, &b}));
    if (node->requires_grad) {
        node->parents = {a.node(), b.node()};
        Tensor result(node);
        reg(p, *node, a, b);
    }
    return Tensor(node);
}

// accumulate gy (out-shaped) into ga through the broadcast plan's a-strides
void reduce_into(const BcastPlan& p, const std::vector<float>& gy_terms, std::vector<float>& ga,
                 const int64_t* strides) {
    if (p.same_shape) {
        for (int64_t i = 0; i < p.n; ++i) ga[static_cast<size_t>(i)] += gy_terms[static_cast<size_t>(i)];
        return;
    }
    int64_t idx[kMaxRank] = {0, 0, 0, 0};
    int64_t ia = 0;
    for (int64_t i = 0; i < p.n; ++i) {
        ga[static_cast<size_t>(ia)] += gy_terms[static_cast<size_t>(i)];
        for (int d = 0; d < p.rank; ++d) {
            ++idx[d];
            ia += strides[d];
            if (idx[d] < p.odim[d]) break;
            ia -= strides[d] * p.odim[d];
            idx[d] = 0;
        }
    }
}

// gather broadcast-expanded values of a parent at each out index
void expand_read(const BcastPlan& p, const std::vector<float>& src, std::vector<float>& dst,
                 const int64_t* strides) {
    dst.resize(static_cast<size_t>(p.n));
    if (p.same_shape) {
        std::copy(src.begin(), src.end(), dst.begin());
        return;
    }
    int64_t idx[kMaxRank] = {0, 0, 0, 0};
    int64_t ia = 0;
    for (int64_t i = 0; i < p.n; ++i) {
        dst[static_cast<size_t>(i)] = src[static_cast<size_t>(ia)];
        for (int d = 0; d < p.rank; ++d) {
            ++idx[d];
            ia += strides[d];
            if (idx[d] < p.odim[d]) break;
            ia -= strides[d] * p.odim[d];
            idx[d] = 0;
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](float x, float y) { return x + y; }, "add",
        [](const BcastPlan& p, TensorNode& node, const Tensor& a, const Tensor& b) {
            auto an = a.node();
            auto bn = b.node();
            node.backward_fn = [p, an, bn](TensorNode& n) {
                if (an->requires_grad) {
                    an->ensure_grad();
                    std::vector<float> terms(n.grad.begin(), n.grad.end());
                    reduce_into(p, terms, an->grad, p.sa);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    std::vector<float> terms(n.grad.begin(), n.grad.end());
                    reduce_into(p, terms, bn->grad, p.sb);
                }
            };
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](float x, float y) { return x - y; }, "sub",
        [](const BcastPlan& p, TensorNode& node, const Tensor& a, const Tensor& b) {
            auto an = a.node();
            auto bn = b.node();
            node.backward_fn = [p, an, bn](TensorNode& n) {
                if (an->requires_grad) {
                    an->ensure_grad();
                    std::vector<float> terms(n.grad.begin(), n.grad.end());
                    reduce_into(p, terms, an->grad, p.sa);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    std::vector<float> terms(n.grad.size());
                    for (size_t i = 0; i < terms.size(); ++i) terms[i] = -n.grad[i];
                    reduce_into(p, terms, bn->grad, p.sb);
                }
            };
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](float x, float y) { return x * y; }, "mul",
        [](const BcastPlan& p, TensorNode& node, const Tensor& a, const Tensor& b) {
            auto an = a.node();
            auto bn = b.node();
            node.backward_fn = [p, an, bn](TensorNode& n) {
                std::vector<float> other;
                if (an->requires_grad) {
                    an->ensure_grad();
                    expand_read(p, bn->data, other, p.sb);
                    std::vector<float> terms(n.grad.size());
                    for (size_t i = 0; i < terms.size(); ++i) terms[i] = n.grad[i] * other[i];
                    reduce_into(p, terms, an->grad, p.sa);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    expand_read(p, an->data, other, p.sa);
                    std::vector<float> terms(n.grad.size());
                    for (size_t i = 0; i < terms.size(); ++i) terms[i] = n.grad[i] * other[i];
                    reduce_into(p, terms, bn->grad, p.sb);
                }
            };
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](float x, float y) { return x / y; }, "div",
        [](const BcastPlan& p, TensorNode& node, const Tensor& a, const Tensor& b) {
            auto an = a.node();
            auto bn = b.node();
            node.backward_fn = [p, an, bn](TensorNode& n) {
                std::vector<float> bex;
                expand_read(p, bn->data, bex, p.sb);
                if (an->requires_grad) {
                    an->ensure_grad();
                    std::vector<float> terms(n.grad.size());
                    for (size_t i = 0; i < terms.size(); ++i) terms[i] = n.grad[i] / bex[i];
                    reduce_into(p, terms, an->grad, p.sa);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    std::vector<float> aex;
                    expand_read(p, an->data, aex, p.sa);
                    std::vector<float> terms(n.grad.size());
                    for (size_t i = 0; i < terms.size(); ++i)
                        terms[i] = -n.grad[i] * aex[i] / (bex[i] * bex[i]);
                    reduce_into(p, terms, bn->grad, p.sb);
                }
            };
        },
        /*finiteness_check=*/true);
}

Tensor vmin(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("vmin: shapes must match");
    return binary_op(
        a, b, [](float x, float y) { return x < y ? x : y; }, "vmin",
        [](const BcastPlan&, TensorNode& node, const Tensor& a, const Tensor& b) {
            auto an = a.node();
            auto bn = b.node();
            node.backward_fn = [an, bn](TensorNode& n) {
                for (size_t i = 0; i < n.grad.size(); ++i) {
                    const bool pick_a = an->data[i] <= bn->data[i];
                    if (pick_a && an->requires_grad) {
                        an->ensure_grad();
                        an->grad[i] += n.grad[i];
                    } else if (!pick_a && bn->requires_grad) {
                        bn->ensure_grad();
                        bn->grad[i] += n.grad[i];
                    }
                }
            };
        });
}

Tensor vmax(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("vmax: shapes must match");
    return binary_op(
        a, b, [](float x, float y) { return x > y ? x : y; }, "vmax",
        [](const BcastPlan&, TensorNode& node, const Tensor& a, const Tensor& b) {
            auto an = a.node();
            auto bn = b.node();
            node.backward_fn = [an, bn](TensorNode& n) {
                for (size_t i = 0; i < n.grad.size(); ++i) {
                    const bool pick_a = an->data[i] >= bn->data[i];
                    if (pick_a && an->requires_grad) {
                        an->ensure_grad();
                        an->grad[i] += n.grad[i];
                    } else if (!pick_a && bn->requires_grad) {
                        bn->ensure_grad();
                        bn->grad[i] += n.grad[i];
                    }
                }
            };
        });
}

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd&& fwd, Bwd&& bwd, const char* name, bool finiteness = false) {
    std::vector<float> out(a.data().begin(), a.data().end());
    for (float& v : out) v = fwd(v);
    if (finiteness) check_finite(out, name);
    auto node = make_node(a.shape(), std::move(out), a.requires_grad());
    if (node->requires_grad) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an, bwd](TensorNode& n) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                an->grad[i] += n.grad[i] * bwd(an->data[i], n.data[i]);
        };
    }
    return Tensor(node);
}

inline float sigmoid_f(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](float x) { return std::exp(x); }, [](float, float y) { return y; }, "exp", true);
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; }, "log",
        true);
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, sigmoid_f, [](float, float y) { return y * (1.0f - y); }, "sigmoid");
}

Tensor silu(const Tensor& a) {
    return unary_op(
        a, [](float x) { return x * sigmoid_f(x); },
        [](float x, float) {
            const float s = sigmoid_f(x);
            return s * (1.0f + x * (1.0f - s));
        },
        "silu");
}

Tensor relu(const Tensor& a) {
    // subgradient at 0 is 0
    return unary_op(
        a, [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; }, "relu");
}

Tensor add_scalar(const Tensor& a, float s) {
    return unary_op(
        a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; }, "add_scalar");
}

Tensor mul_scalar(const Tensor& a, float s) {
    return unary_op(
        a, [s](float x) { return x * s; }, [s](float, float) { return s; }, "mul_scalar");
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

Tensor detach(const Tensor& a) {
    return Tensor(make_node(a.shape(), std::vector<float>(a.data().begin(), a.data().end()), false));
}

Tensor elementwise(EwOp op, const Tensor& a, const std::optional<Tensor>& b) {
    const bool binary = op == EwOp::Add || op == EwOp::Sub || op == EwOp::Mul || op == EwOp::Div;
    if (binary && !b) throw ShapeError("elementwise: binary op requires second operand");
    switch (op) {
        case EwOp::Add: return add(a, *b);
        case EwOp::Sub: return sub(a, *b);
        case EwOp::Mul: return mul(a, *b);
        case EwOp::Div: return div(a, *b);
        case EwOp::Exp: return exp(a);
        case EwOp::Log: return log(a);
        case EwOp::Sigmoid: return sigmoid(a);
        case EwOp::Silu: return silu(a);
        case EwOp::Relu: return relu(a);
    }
    throw ShapeError("elementwise: unknown op");
}

// ---------------- matmul / linear ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: rank-2 tensors required");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dims " + std::to_string(k) + " vs " + std::to_string(k2));
    std::vector<float> out(static_cast<size_t>(m) * n);
    kernels::matmul(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto node = make_node({m, n}, std::move(out), any_requires_grad({&a, &b}));
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        node->parents = {an, bn};
        node->backward_fn = [an, bn, m, k, n](TensorNode& nd) {
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = gY * B^T
                std::vector<float> bt(static_cast<size_t>(n) * k);
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j)
                        bt[static_cast<size_t>(j) * k + p] = bn->data[static_cast<size_t>(p) * n + j];
                std::vector<float> da(static_cast<size_t>(m) * k);
                kernels::matmul(nd.grad.data(), bt.data(), da.data(), m, n, k);
                for (size_t i = 0; i < da.size(); ++i) an->grad[i] += da[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB = A^T * gY
                std::vector<float> at(static_cast<size_t>(k) * m);
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p)
                        at[static_cast<size_t>(p) * m + i] = an->data[static_cast<size_t>(i) * k + p];
                std::vector<float> db(static_cast<size_t>(k) * n);
                kernels::matmul(at.data(), nd.grad.data(), db.data(), k, m, n);
                for (size_t i = 0; i < db.size(); ++i) bn->grad[i] += db[i];
            }
        };
    }
    return Tensor(node);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    return add(matmul(x, w), bias);
}

// ---------------- reductions ----------------

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    auto node = make_node({1}, {static_cast<float>(acc)}, a.requires_grad());
    if (node->requires_grad) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an](TensorNode& n) {
            an->ensure_grad();
            for (float& g : an->grad) g += n.grad[0];
        };
    }
    return Tensor(node);
}

Tensor mean(const Tensor& a) {
    const float inv = 1.0f / static_cast<float>(a.size());
    return mul_scalar(sum(a), inv);
}

// ---------------- shape / indexing ----------------

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto node = make_node(shape, std::vector<float>(a.data().begin(), a.data().end()),
                          a.requires_grad());
    if (node->requires_grad) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an](TensorNode& n) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        };
    }
    return Tensor(node);
}

Tensor chw_to_rows(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("chw_to_rows: CHW tensor required");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int64_t l = static_cast<int64_t>(h) * w;
    std::vector<float> out(static_cast<size_t>(l * c));
    const float* px = x.data().data();
    for (int ci = 0; ci < c; ++ci)
        for (int64_t p = 0; p < l; ++p) out[static_cast<size_t>(p * c + ci)] = px[ci * l + p];
    auto node = make_node({static_cast<int>(l), c}, std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, c, l](TensorNode& n) {
            xn->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int64_t p = 0; p < l; ++p)
                    xn->grad[static_cast<size_t>(ci * l + p)] += n.grad[static_cast<size_t>(p * c + ci)];
        };
    }
    return Tensor(node);
}

Tensor rows_to_chw(const Tensor& x, int h, int w) {
    if (x.rank() != 2) throw ShapeError("rows_to_chw: [L,C] tensor required");
    const int l = x.dim(0), c = x.dim(1);
    if (l != h * w) throw ShapeError("rows_to_chw: L != H*W");
    std::vector<float> out(static_cast<size_t>(l) * c);
    const float* px = x.data().data();
    for (int ci = 0; ci < c; ++ci)
        for (int p = 0; p < l; ++p)
            out[static_cast<size_t>(ci) * l + p] = px[static_cast<size_t>(p) * c + ci];
    auto node = make_node({c, h, w}, std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, c, l](TensorNode& n) {
            xn->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int p = 0; p < l; ++p)
                    xn->grad[static_cast<size_t>(p) * c + ci] += n.grad[static_cast<size_t>(ci) * l + p];
        };
    }
    return Tensor(node);
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
    if (x.rank() != 2) throw ShapeError("gather_rows: [L,C] tensor required");
    const int l = x.dim(0), c = x.dim(1);
    for (int i : idx)
        if (i < 0 || i >= l) throw ShapeError("gather_rows: index out of range");
    std::vector<float> out(idx.size() * static_cast<size_t>(c));
    const float* px = x.data().data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + r * static_cast<size_t>(c),
                    px + static_cast<size_t>(idx[r]) * c, sizeof(float) * static_cast<size_t>(c));
    auto node = make_node({static_cast<int>(idx.size()), c}, std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, idx, c](TensorNode& n) {
            xn->ensure_grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int ci = 0; ci < c; ++ci)
                    xn->grad[static_cast<size_t>(idx[r]) * c + ci] +=
                        n.grad[r * static_cast<size_t>(c) + ci];
        };
    }
    return Tensor(node);
}

Tensor concat_axis0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_axis0: empty input list");
    Shape rest(parts[0].shape().begin() + 1, parts[0].shape().end());
    int total0 = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        Shape r(p.shape().begin() + 1, p.shape().end());
        if (r != rest) throw ShapeError("concat_axis0: trailing shapes differ");
        total0 += p.dim(0);
        rg = rg || p.requires_grad();
    }
    Shape out_shape;
    out_shape.push_back(total0);
    out_shape.insert(out_shape.end(), rest.begin(), rest.end());
    std::vector<float> out;
    out.reserve(static_cast<size_t>(numel(out_shape)));
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    auto node = make_node(out_shape, std::move(out), rg);
    if (rg) {
        std::vector<std::shared_ptr<TensorNode>> pn;
        for (const Tensor& p : parts) pn.push_back(p.node());
        node->parents = pn;
        node->backward_fn = [pn](TensorNode& n) {
            size_t off = 0;
            for (auto& p : pn) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += n.grad[off + i];
                }
                off += p->data.size();
            }
        };
    }
    return Tensor(node);
}

Tensor slice_axis0(const Tensor& x, int start, int len) {
    if (start < 0 || len <= 0 || start + len > x.dim(0))
        throw ShapeError("slice_axis0: range out of bounds");
    Shape out_shape = x.shape();
    out_shape[0] = len;
    const int64_t row = x.size() / x.dim(0);
    std::vector<float> out(x.data().begin() + start * row, x.data().begin() + (start + len) * row);
    auto node = make_node(out_shape, std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, start, row](TensorNode& n) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                xn->grad[static_cast<size_t>(start * row) + i] += n.grad[i];
        };
    }
    return Tensor(node);
}

// ---------------- normalization / pooling ----------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
    const int c = x.dim(x.rank() - 1);
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("layer_norm: gamma/beta must have C entries");
    if (eps <= 0.0f) throw ShapeError("layer_norm: eps must be positive");
    const int64_t rows = x.size() / c;
    std::vector<float> out(static_cast<size_t>(x.size()));
    auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(x.size()));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
    const float* px = x.data().data();
    const float* pg = gamma.data().data();
    const float* pb = beta.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px + r * c;
        double m = 0.0;
        for (int i = 0; i < c; ++i) m += xr[i];
        m /= c;
        double v = 0.0;
        for (int i = 0; i < c; ++i) v += (xr[i] - m) * (xr[i] - m);
        v /= c;
        const float is = static_cast<float>(1.0 / std::sqrt(v + eps));
        (*inv_std)[static_cast<size_t>(r)] = is;
        for (int i = 0; i < c; ++i) {
            const float xh = (xr[i] - static_cast<float>(m)) * is;
            (*xhat)[static_cast<size_t>(r * c + i)] = xh;
            out[static_cast<size_t>(r * c + i)] = xh * pg[i] + pb[i];
        }
    }
    auto node = make_node(x.shape(), std::move(out), any_requires_grad({&x, &gamma, &beta}));
    if (node->requires_grad) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        node->parents = {xn, gn, bn};
        node->backward_fn = [xn, gn, bn, xhat, inv_std, rows, c](TensorNode& n) {
            for (int64_t r = 0; r < rows; ++r) {
                const float* gy = n.grad.data() + r * c;
                const float* xh = xhat->data() + r * c;
                const float is = (*inv_std)[static_cast<size_t>(r)];
                double s1 = 0.0, s2 = 0.0;
                for (int i = 0; i < c; ++i) {
                    const float gg = gy[i] * gn->data[static_cast<size_t>(i)];
                    s1 += gg;
                    s2 += gg * xh[i];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    for (int i = 0; i < c; ++i) {
                        const float gg = gy[i] * gn->data[static_cast<size_t>(i)];
                        xn->grad[static_cast<size_t>(r * c + i)] +=
                            is * (gg - static_cast<float>(s1) / c -
                                  xh[i] * static_cast<float>(s2) / c);
                    }
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int i = 0; i < c; ++i)
                        gn->grad[static_cast<size_t>(i)] += gy[i] * xh[i];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int i = 0; i < c; ++i) bn->grad[static_cast<size_t>(i)] += gy[i];
                }
            }
        };
    }
    return Tensor(node);
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("global_avg_pool: CHW tensor required");
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    std::vector<float> out(static_cast<size_t>(c));
    const float* px = x.data().data();
    for (int ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (int64_t p = 0; p < hw; ++p) acc += px[ci * hw + p];
        out[static_cast<size_t>(ci)] = static_cast<float>(acc / static_cast<double>(hw));
    }
    auto node = make_node({c}, std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, c, hw](TensorNode& n) {
            xn->ensure_grad();
            const float inv = 1.0f / static_cast<float>(hw);
            for (int ci = 0; ci < c; ++ci)
                for (int64_t p = 0; p < hw; ++p)
                    xn->grad[static_cast<size_t>(ci * hw + p)] += n.grad[static_cast<size_t>(ci)] * inv;
        };
    }
    return Tensor(node);
}

Tensor upsample_nearest2(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("upsample_nearest2: CHW tensor required");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int ho = h * 2, wo = w * 2;
    std::vector<float> out(static_cast<size_t>(c) * ho * wo);
    const float* px = x.data().data();
    for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox)
                out[(static_cast<size_t>(ci) * ho + oy) * wo + ox] =
                    px[(static_cast<size_t>(ci) * h + oy / 2) * w + ox / 2];
    auto node = make_node({c, ho, wo}, std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, c, h, w, ho, wo](TensorNode& n) {
            xn->ensure_grad();
            for (int ci = 0; ci < c; ++ci)
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox)
                        xn->grad[(static_cast<size_t>(ci) * h + oy / 2) * w + ox / 2] +=
                            n.grad[(static_cast<size_t>(ci) * ho + oy) * wo + ox];
        };
    }
    return Tensor(node);
}

Tensor maxpool2(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("maxpool2: CHW tensor required");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < 2 || w < 2) throw ShapeError("maxpool2: spatial dims must be >= 2");
    const int ho = h / 2, wo = w / 2;
    std::vector<float> out(static_cast<size_t>(c) * ho * wo);
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const float* px = x.data().data();
    for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                int64_t best = (static_cast<int64_t>(ci) * h + oy * 2) * w + ox * 2;
                float bv = px[best];
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int64_t idx = (static_cast<int64_t>(ci) * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if (px[idx] > bv) {
                            bv = px[idx];
                            best = idx;
                        }
                    }
                const size_t o = (static_cast<size_t>(ci) * ho + oy) * wo + ox;
                out[o] = bv;
                (*argmax)[o] = best;
            }
    auto node = make_node({c, ho, wo}, std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, argmax](TensorNode& n) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                xn->grad[static_cast<size_t>((*argmax)[i])] += n.grad[i];
        };
    }
    return Tensor(node);
}

// ---------------- fused heads ----------------

Tensor log_softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("log_softmax_rows: [L,B] tensor required");
    const int l = x.dim(0), b = x.dim(1);
    std::vector<float> out(static_cast<size_t>(l) * b);
    const float* px = x.data().data();
    for (int r = 0; r < l; ++r) {
        const float* xr = px + static_cast<size_t>(r) * b;
        float mx = xr[0];
        for (int i = 1; i < b; ++i) mx = std::max(mx, xr[i]);
        double z = 0.0;
        for (int i = 0; i < b; ++i) z += std::exp(static_cast<double>(xr[i] - mx));
        const float lz = static_cast<float>(std::log(z)) + mx;
        for (int i = 0; i < b; ++i) out[static_cast<size_t>(r) * b + i] = xr[i] - lz;
    }
    auto node = make_node(x.shape(), std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, l, b](TensorNode& n) {
            xn->ensure_grad();
            for (int r = 0; r < l; ++r) {
                double gsum = 0.0;
                for (int i = 0; i < b; ++i) gsum += n.grad[static_cast<size_t>(r) * b + i];
                for (int i = 0; i < b; ++i) {
                    const float p = std::exp(n.data[static_cast<size_t>(r) * b + i]);
                    xn->grad[static_cast<size_t>(r) * b + i] +=
                        n.grad[static_cast<size_t>(r) * b + i] - p * static_cast<float>(gsum);
                }
            }
        };
    }
    return Tensor(node);
}

Tensor softmax_expect_rows(const Tensor& x, std::span<const float> values) {
    if (x.rank() != 2) throw ShapeError("softmax_expect_rows: [L,B] tensor required");
    const int l = x.dim(0), b = x.dim(1);
    if (static_cast<int>(values.size()) != b)
        throw ShapeError("softmax_expect_rows: values length must equal B");
    std::vector<float> out(static_cast<size_t>(l));
    auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(l) * b);
    const float* px = x.data().data();
    for (int r = 0; r < l; ++r) {
        const float* xr = px + static_cast<size_t>(r) * b;
        float mx = xr[0];
        for (int i = 1; i < b; ++i) mx = std::max(mx, xr[i]);
        double z = 0.0;
        for (int i = 0; i < b; ++i) z += std::exp(static_cast<double>(xr[i] - mx));
        double e = 0.0;
        for (int i = 0; i < b; ++i) {
            const float p = static_cast<float>(std::exp(static_cast<double>(xr[i] - mx)) / z);
            (*probs)[static_cast<size_t>(r) * b + i] = p;
            e += static_cast<double>(p) * values[static_cast<size_t>(i)];
        }
        out[static_cast<size_t>(r)] = static_cast<float>(e);
    }
    std::vector<float> vals(values.begin(), values.end());
    auto node = make_node({l}, std::move(out), x.requires_grad());
    if (node->requires_grad) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, probs, vals, l, b](TensorNode& n) {
            xn->ensure_grad();
            for (int r = 0; r < l; ++r) {
                const float g = n.grad[static_cast<size_t>(r)];
                const float e = n.data[static_cast<size_t>(r)];
                for (int i = 0; i < b; ++i) {
                    const float p = (*probs)[static_cast<size_t>(r) * b + i];
                    xn->grad[static_cast<size_t>(r) * b + i] +=
                        g * p * (vals[static_cast<size_t>(i)] - e);
                }
            }
        };
    }
    return Tensor(node);
}

Tensor bce_with_logits_sum(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape())
        throw ShapeError("bce_with_logits_sum: logits/targets shape mismatch");
    double acc = 0.0;
    const float* pz = logits.data().data();
    const float* pt = targets.data().data();
    const int64_t n = logits.size();
    for (int64_t i = 0; i < n; ++i) {
        const double z = pz[i], t = pt[i];
        acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    auto node = make_node({1}, {static_cast<float>(acc)}, logits.requires_grad());
    if (node->requires_grad) {
        auto zn = logits.node();
        auto tn = targets.node();
        node->parents = {zn, tn};
        node->backward_fn = [zn, tn](TensorNode& nd) {
            zn->ensure_grad();
            for (size_t i = 0; i < zn->data.size(); ++i)
                zn->grad[i] += nd.grad[0] * (sigmoid_f(zn->data[i]) - tn->data[i]);
        };
    }
    return Tensor(node);
}

// ---------------- grad check ----------------

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h, double tol) {
    if (h <= 0.0 || h > 1e-1) throw InputError("grad_check: h must be in (0, 1e-1]");
    // analytic pass
    Tensor xv = Tensor::from_data(x.shape(), std::vector<float>(x.data().begin(), x.data().end()),
                                  true);
    Tensor loss = f(xv);
    if (loss.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    if (!std::isfinite(loss.item())) throw NumericsError("grad_check: non-finite loss");
    backward(loss);
    std::vector<float> analytic(x.size(), 0.0f);
    if (xv.has_grad())
        std::copy(xv.grad().begin(), xv.grad().end(), analytic.begin());

    GradCheckReport rep;
    for (int64_t i = 0; i < x.size(); ++i) {
        std::vector<float> dp(x.data().begin(), x.data().end());
        std::vector<float> dm(x.data().begin(), x.data().end());
        dp[static_cast<size_t>(i)] += static_cast<float>(h);
        dm[static_cast<size_t>(i)] -= static_cast<float>(h);
        const float fp = f(Tensor::from_data(x.shape(), std::move(dp), false)).item();
        const float fm = f(Tensor::from_data(x.shape(), std::move(dm), false)).item();
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericsError("grad_check: non-finite intermediate at coordinate " +
                                std::to_string(i));
        const double numeric = (static_cast<double>(fp) - fm) / (2.0 * h);
        const double a = analytic[static_cast<size_t>(i)];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
        const double rel = std::abs(a - numeric) / denom;
        if (rel > rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst_index = i;
        }
    }
    rep.pass = rep.max_rel_error < tol;
    return rep;
}

}  // namespace mathena
