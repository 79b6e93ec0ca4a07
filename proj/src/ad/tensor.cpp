#include "ad/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "common/error.hpp"

namespace tsyn::ad {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

void Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

void Node::add_grad(const double* g, std::int64_t n) {
    ensure_grad();
    for (std::int64_t i = 0; i < n; ++i) grad[i] += g[i];
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

// A tensor participates in differentiation if it is a param or downstream of one.
bool needs_grad(const Tensor& t) {
    return t.defined() && t.node()->requires_grad;
}

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
               std::function<void(Node&)> bw) {
    auto n = new_node(std::move(shape), std::move(value));
    bool any = false;
    if (g_grad_enabled) {
        for (const auto& t : inputs) any = any || needs_grad(t);
    }
    if (any) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& t : inputs) n->parents.push_back(t.node());
        n->backward = std::move(bw);
    }
    return Tensor(n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        fail_runtime(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor Tensor::zeros(Shape shape) {
    auto n = new_node(shape, std::vector<double>(numel(shape), 0.0));
    return Tensor(n);
}

Tensor Tensor::full(Shape shape, double v) {
    auto n = new_node(shape, std::vector<double>(numel(shape), v));
    return Tensor(n);
}

Tensor Tensor::from_vec(Shape shape, std::vector<double> v) {
    if (static_cast<std::int64_t>(v.size()) != numel(shape))
        fail_runtime("from_vec: size mismatch for shape " + shape_str(shape));
    return Tensor(new_node(std::move(shape), std::move(v)));
}

Tensor Tensor::scalar(double v) { return from_vec({1}, {v}); }

Tensor Tensor::param(Shape shape, std::vector<double> v) {
    Tensor t = from_vec(std::move(shape), std::move(v));
    t.node()->requires_grad = true;
    return t;
}

void Tensor::zero_grad() {
    if (n_) n_->grad.assign(n_->value.size(), 0.0);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) fail_runtime("backward: loss must be a defined scalar");
    Node* root = loss.node().get();
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            Node* p = f.n->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    // Post-order emits parents first; walk backwards so each node fires
    // after its full downstream gradient has accumulated.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) {
            n->ensure_grad();
            n->backward(*n);
        }
    }
}

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& n) {
        const auto sz = static_cast<std::int64_t>(n.value.size());
        if (n.parents[0]->requires_grad) n.parents[0]->add_grad(n.grad.data(), sz);
        if (n.parents[1]->requires_grad) n.parents[1]->add_grad(n.grad.data(), sz);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& n) {
        const auto sz = static_cast<std::int64_t>(n.value.size());
        if (n.parents[0]->requires_grad) n.parents[0]->add_grad(n.grad.data(), sz);
        if (n.parents[1]->requires_grad) {
            Node& p = *n.parents[1];
            p.ensure_grad();
            for (std::int64_t i = 0; i < sz; ++i) p.grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op(a.shape(), std::move(v), {a, b}, [an, bn](Node& n) {
        const auto sz = static_cast<std::int64_t>(n.value.size());
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < sz; ++i) an->grad[i] += n.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::int64_t i = 0; i < sz; ++i) bn->grad[i] += n.grad[i] * an->value[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    std::vector<double> v(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] / b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op(a.shape(), std::move(v), {a, b}, [an, bn](Node& n) {
        const auto sz = static_cast<std::int64_t>(n.value.size());
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < sz; ++i) an->grad[i] += n.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::int64_t i = 0; i < sz; ++i)
                bn->grad[i] -= n.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * c;
    return make_op(a.shape(), std::move(v), {a}, [c](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> v(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] + c;
    return make_op(a.shape(), std::move(v), {a}, [](Node& n) {
        if (n.parents[0]->requires_grad)
            n.parents[0]->add_grad(n.grad.data(), static_cast<std::int64_t>(n.grad.size()));
    });
}

namespace {

template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df) {
    std::vector<double> v(a.size());
    for (std::int64_t i = 0; i < a.size(); ++i) v[i] = f(a.data()[i]);
    auto an = a.node();
    return make_op(a.shape(), std::move(v), {a}, [an, df](Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * df(an->value[i], n.value[i]);
    });
}

}  // namespace

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor tanh_act(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs_t(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor square(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------- reductions / losses ----------------

Tensor sum_all(const Tensor& a) {
    double s = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) s += a.data()[i];
    return make_op({1}, {s}, {a}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double g = n.grad[0];
        for (auto& x : p.grad) x += g;
    });
}

Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) s += a.data()[i];
    return make_op({1}, {s * inv}, {a}, [inv](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double g = n.grad[0] * inv;
        for (auto& x : p.grad) x += g;
    });
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "l1_loss");
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
    auto an = a.node();
    auto bn = b.node();
    return make_op({1}, {s * inv}, {a, b}, [an, bn, inv](Node& n) {
        const double g = n.grad[0] * inv;
        const size_t sz = an->value.size();
        for (size_t i = 0; i < sz; ++i) {
            const double d = an->value[i] - bn->value[i];
            const double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
            if (an->requires_grad) {
                an->ensure_grad();
                an->grad[i] += g * sg;
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                bn->grad[i] -= g * sg;
            }
        }
    });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse_loss");
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op({1}, {s * inv}, {a, b}, [an, bn, inv](Node& n) {
        const double g = n.grad[0] * inv;
        const size_t sz = an->value.size();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (size_t i = 0; i < sz; ++i) {
            const double d = 2.0 * (an->value[i] - bn->value[i]);
            if (an->requires_grad) an->grad[i] += g * d;
            if (bn->requires_grad) bn->grad[i] -= g * d;
        }
    });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape(logits, targets, "bce_with_logits");
    const double inv = 1.0 / static_cast<double>(logits.size());
    double s = 0;
    for (std::int64_t i = 0; i < logits.size(); ++i) {
        const double l = logits.data()[i];
        const double t = targets.data()[i];
        s += std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l))) - l * t;
    }
    auto ln = logits.node();
    auto tn = targets.node();
    return make_op({1}, {s * inv}, {logits, targets}, [ln, tn, inv](Node& n) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const double g = n.grad[0] * inv;
        for (size_t i = 0; i < ln->value.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-ln->value[i]));
            ln->grad[i] += g * (sig - tn->value[i]);
        }
    });
}

// ---------------- shape ops ----------------

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) fail_runtime("reshape: element count mismatch for " + shape_str(shape));
    std::vector<double> v(a.data(), a.data() + a.size());
    return make_op(std::move(shape), std::move(v), {a}, [](Node& n) {
        if (n.parents[0]->requires_grad)
            n.parents[0]->add_grad(n.grad.data(), static_cast<std::int64_t>(n.grad.size()));
    });
}

namespace {

std::vector<std::int64_t> strides_of(const Shape& s) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
    const Shape& in = a.shape();
    if (perm.size() != in.size()) fail_runtime("permute: rank mismatch");
    Shape out(in.size());
    for (size_t i = 0; i < perm.size(); ++i) out[i] = in[perm[i]];
    const auto in_st = strides_of(in);
    const auto out_st = strides_of(out);
    const std::int64_t n = a.size();
    // index map: out flat -> in flat
    auto index_map = std::make_shared<std::vector<std::int64_t>>(n);
    std::vector<std::int64_t> idx(in.size(), 0);
    for (std::int64_t o = 0; o < n; ++o) {
        std::int64_t rem = o;
        std::int64_t src = 0;
        for (size_t d = 0; d < out.size(); ++d) {
            const std::int64_t q = rem / out_st[d];
            rem -= q * out_st[d];
            src += q * in_st[perm[d]];
        }
        (*index_map)[o] = src;
    }
    std::vector<double> v(n);
    for (std::int64_t o = 0; o < n; ++o) v[o] = a.data()[(*index_map)[o]];
    return make_op(std::move(out), std::move(v), {a}, [index_map](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t o = 0; o < nd.grad.size(); ++o) p.grad[(*index_map)[o]] += nd.grad[o];
    });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) fail_runtime("concat: empty input list");
    const Shape& s0 = xs[0].shape();
    Shape out = s0;
    int total = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.size() != s0.size()) fail_runtime("concat: rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != axis && s[d] != s0[d]) fail_runtime("concat: shape mismatch");
        total += s[axis];
    }
    out[axis] = total;

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    std::vector<double> v(numel(out));
    std::vector<std::int64_t> offsets;  // start along axis per input
    int off = 0;
    for (const auto& x : xs) {
        offsets.push_back(off);
        const int ax = x.shape()[axis];
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = x.data() + o * ax * inner;
            double* dst = v.data() + (o * total + off) * inner;
            std::copy(src, src + ax * inner, dst);
        }
        off += ax;
    }
    std::vector<int> axes;
    for (const auto& x : xs) axes.push_back(x.shape()[axis]);
    return make_op(std::move(out), std::move(v), xs, [outer, inner, total, axes](Node& n) {
        int off = 0;
        for (size_t pi = 0; pi < n.parents.size(); ++pi) {
            Node& p = *n.parents[pi];
            const int ax = axes[pi];
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const double* g = n.grad.data() + (o * total + off) * inner;
                    double* dst = p.grad.data() + o * ax * inner;
                    for (std::int64_t i = 0; i < ax * inner; ++i) dst[i] += g[i];
                }
            }
            off += ax;
        }
    });
}

Tensor slice_axis(const Tensor& a, int axis, int from, int to) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()) || from < 0 || to > s[axis] || from >= to)
        fail_runtime("slice_axis: bad range");
    Shape out = s;
    out[axis] = to - from;
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const int ax = s[axis];
    const int w = to - from;
    std::vector<double> v(outer * w * inner);
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(a.data() + (o * ax + from) * inner, a.data() + (o * ax + to) * inner, v.data() + o * w * inner);
    return make_op(std::move(out), std::move(v), {a}, [outer, inner, ax, from, w](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* g = n.grad.data() + o * w * inner;
            double* dst = p.grad.data() + (o * ax + from) * inner;
            for (std::int64_t i = 0; i < w * inner; ++i) dst[i] += g[i];
        }
    });
}

// ---------------- linear algebra ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) fail_runtime("matmul: incompatible shapes");
    const int m = sa[0], k = sa[1], n = sb[1];
    std::vector<double> v(static_cast<size_t>(m) * n);
    MapCM A(a.data(), m, k), B(b.data(), k, n);
    MapM C(v.data(), m, n);
    C.noalias() = A * B;
    auto an = a.node();
    auto bn = b.node();
    return make_op({m, n}, std::move(v), {a, b}, [an, bn, m, k, n](Node& nd) {
        MapCM G(nd.grad.data(), m, n);
        if (an->requires_grad) {
            an->ensure_grad();
            MapM dA(an->grad.data(), m, k);
            MapCM B(bn->value.data(), k, n);
            dA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            MapM dB(bn->grad.data(), k, n);
            MapCM A(an->value.data(), m, k);
            dB.noalias() += A.transpose() * G;
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) fail_runtime("bmm: incompatible shapes");
    const int bs = sa[0], m = sa[1], k = sa[2], n = sb[2];
    std::vector<double> v(static_cast<size_t>(bs) * m * n);
    for (int i = 0; i < bs; ++i) {
        MapCM A(a.data() + static_cast<size_t>(i) * m * k, m, k);
        MapCM B(b.data() + static_cast<size_t>(i) * k * n, k, n);
        MapM C(v.data() + static_cast<size_t>(i) * m * n, m, n);
        C.noalias() = A * B;
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op({bs, m, n}, std::move(v), {a, b}, [an, bn, bs, m, k, n](Node& nd) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int i = 0; i < bs; ++i) {
            MapCM G(nd.grad.data() + static_cast<size_t>(i) * m * n, m, n);
            if (an->requires_grad) {
                MapM dA(an->grad.data() + static_cast<size_t>(i) * m * k, m, k);
                MapCM B(bn->value.data() + static_cast<size_t>(i) * k * n, k, n);
                dA.noalias() += G * B.transpose();
            }
            if (bn->requires_grad) {
                MapM dB(bn->grad.data() + static_cast<size_t>(i) * k * n, k, n);
                MapCM A(an->value.data() + static_cast<size_t>(i) * m * k, m, k);
                dB.noalias() += A.transpose() * G;
            }
        }
    });
}

Tensor softmax_lastdim(const Tensor& a) {
    const Shape& s = a.shape();
    const int t = s.back();
    const std::int64_t rows = a.size() / t;
    std::vector<double> v(a.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = a.data() + r * t;
        double* y = v.data() + r * t;
        double mx = x[0];
        for (int i = 1; i < t; ++i) mx = std::max(mx, x[i]);
        double Z = 0;
        for (int i = 0; i < t; ++i) {
            y[i] = std::exp(x[i] - mx);
            Z += y[i];
        }
        const double inv = 1.0 / Z;
        for (int i = 0; i < t; ++i) y[i] *= inv;
    }
    return make_op(a.shape(), std::move(v), {a}, [t, rows](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * t;
            const double* g = n.grad.data() + r * t;
            double dot = 0;
            for (int i = 0; i < t; ++i) dot += y[i] * g[i];
            double* dx = p.grad.data() + r * t;
            for (int i = 0; i < t; ++i) dx[i] += y[i] * (g[i] - dot);
        }
    });
}

// ---------------- convolution ----------------

namespace {

struct ConvDims {
    int N, Ci, Co, k, stride, pad;
    std::vector<int> in;   // spatial in
    std::vector<int> out;  // spatial out
    std::int64_t in_vox() const {
        std::int64_t p = 1;
        for (int d : in) p *= d;
        return p;
    }
    std::int64_t out_vox() const {
        std::int64_t p = 1;
        for (int d : out) p *= d;
        return p;
    }
};

// cols layout: [Ci*k^D rows, out_vox cols]
void im2col3d(const double* x, const ConvDims& cd, double* cols) {
    const int A = cd.in[0], B = cd.in[1], C = cd.in[2];
    const int Ao = cd.out[0], Bo = cd.out[1], Co_ = cd.out[2];
    const std::int64_t P = cd.out_vox();
    const int k = cd.k;
    for (int ci = 0; ci < cd.Ci; ++ci) {
        const double* xc = x + static_cast<std::int64_t>(ci) * A * B * C;
        for (int ka = 0; ka < k; ++ka)
            for (int kb = 0; kb < k; ++kb)
                for (int kc = 0; kc < k; ++kc) {
                    double* row = cols + ((static_cast<std::int64_t>(ci) * k + ka) * k + kb) * k * P + kc * P;
                    std::int64_t p = 0;
                    for (int oa = 0; oa < Ao; ++oa) {
                        const int ia = oa * cd.stride - cd.pad + ka;
                        const bool oka = ia >= 0 && ia < A;
                        for (int ob = 0; ob < Bo; ++ob) {
                            const int ib = ob * cd.stride - cd.pad + kb;
                            const bool okb = ib >= 0 && ib < B;
                            if (!oka || !okb) {
                                for (int oc = 0; oc < Co_; ++oc) row[p++] = 0.0;
                                continue;
                            }
                            const double* base = xc + (static_cast<std::int64_t>(ia) * B + ib) * C;
                            for (int oc = 0; oc < Co_; ++oc) {
                                const int ic = oc * cd.stride - cd.pad + kc;
                                row[p++] = (ic >= 0 && ic < C) ? base[ic] : 0.0;
                            }
                        }
                    }
                }
    }
}

void col2im3d(const double* cols, const ConvDims& cd, double* dx) {
    const int A = cd.in[0], B = cd.in[1], C = cd.in[2];
    const int Ao = cd.out[0], Bo = cd.out[1], Co_ = cd.out[2];
    const std::int64_t P = cd.out_vox();
    const int k = cd.k;
    for (int ci = 0; ci < cd.Ci; ++ci) {
        double* xc = dx + static_cast<std::int64_t>(ci) * A * B * C;
        for (int ka = 0; ka < k; ++ka)
            for (int kb = 0; kb < k; ++kb)
                for (int kc = 0; kc < k; ++kc) {
                    const double* row = cols + ((static_cast<std::int64_t>(ci) * k + ka) * k + kb) * k * P + kc * P;
                    std::int64_t p = 0;
                    for (int oa = 0; oa < Ao; ++oa) {
                        const int ia = oa * cd.stride - cd.pad + ka;
                        const bool oka = ia >= 0 && ia < A;
                        for (int ob = 0; ob < Bo; ++ob) {
                            const int ib = ob * cd.stride - cd.pad + kb;
                            if (!oka || !(ib >= 0 && ib < B)) {
                                p += Co_;
                                continue;
                            }
                            double* base = xc + (static_cast<std::int64_t>(ia) * B + ib) * C;
                            for (int oc = 0; oc < Co_; ++oc) {
                                const int ic = oc * cd.stride - cd.pad + kc;
                                if (ic >= 0 && ic < C) base[ic] += row[p];
                                ++p;
                            }
                        }
                    }
                }
    }
}

thread_local std::vector<double> g_cols_scratch;

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sx.size() != 5 || sw.size() != 5) fail_runtime("conv3d: expects x[N,Ci,A,B,C], w[Co,Ci,k,k,k]");
    if (sx[1] != sw[1]) fail_runtime("conv3d: channel mismatch");
    if (sw[2] != sw[3] || sw[2] != sw[4]) fail_runtime("conv3d: kernel must be cubic");
    ConvDims cd;
    cd.N = sx[0];
    cd.Ci = sx[1];
    cd.Co = sw[0];
    cd.k = sw[2];
    cd.stride = stride;
    cd.pad = pad;
    cd.in = {sx[2], sx[3], sx[4]};
    for (int d : cd.in) {
        const int o = (d + 2 * pad - cd.k) / stride + 1;
        if (o < 1) fail_runtime("conv3d: output dimension underflow");
        cd.out.push_back(o);
    }
    const std::int64_t P = cd.out_vox();
    const std::int64_t K = static_cast<std::int64_t>(cd.Ci) * cd.k * cd.k * cd.k;
    std::vector<double> v(static_cast<size_t>(cd.N) * cd.Co * P);

    g_cols_scratch.resize(static_cast<size_t>(K) * P);
    for (int n = 0; n < cd.N; ++n) {
        im2col3d(x.data() + static_cast<std::int64_t>(n) * cd.Ci * cd.in_vox(), cd, g_cols_scratch.data());
        MapCM W(w.data(), cd.Co, K);
        MapCM Cols(g_cols_scratch.data(), K, P);
        MapM Y(v.data() + static_cast<std::int64_t>(n) * cd.Co * P, cd.Co, P);
        Y.noalias() = W * Cols;
        if (b.defined()) {
            for (int co = 0; co < cd.Co; ++co) Y.row(co).array() += b.data()[co];
        }
    }

    Shape out_shape = {cd.N, cd.Co, cd.out[0], cd.out[1], cd.out[2]};
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    std::vector<Tensor> inputs = {x, w};
    if (b.defined()) inputs.push_back(b);
    return make_op(std::move(out_shape), std::move(v), std::move(inputs), [xn, wn, bn, cd, P, K](Node& nd) {
        const std::int64_t in_ch_vox = cd.in_vox();
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        std::vector<double> dcols(static_cast<size_t>(K) * P);
        g_cols_scratch.resize(static_cast<size_t>(K) * P);
        for (int n = 0; n < cd.N; ++n) {
            MapCM G(nd.grad.data() + static_cast<std::int64_t>(n) * cd.Co * P, cd.Co, P);
            if (wn->requires_grad) {
                im2col3d(xn->value.data() + static_cast<std::int64_t>(n) * cd.Ci * in_ch_vox, cd,
                         g_cols_scratch.data());
                MapCM Cols(g_cols_scratch.data(), K, P);
                MapM dW(wn->grad.data(), cd.Co, K);
                dW.noalias() += G * Cols.transpose();
            }
            if (bn && bn->requires_grad) {
                for (int co = 0; co < cd.Co; ++co) bn->grad[co] += G.row(co).sum();
            }
            if (xn->requires_grad) {
                MapCM W(wn->value.data(), cd.Co, K);
                MapM dCols(dcols.data(), K, P);
                dCols.noalias() = W.transpose() * G;
                col2im3d(dcols.data(), cd, xn->grad.data() + static_cast<std::int64_t>(n) * cd.Ci * in_ch_vox);
            }
        }
    });
}

namespace {

void im2col2d(const double* x, int Ci, int H, int W, int k, int stride, int pad, int Ho, int Wo, double* cols) {
    const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
    for (int ci = 0; ci < Ci; ++ci) {
        const double* xc = x + static_cast<std::int64_t>(ci) * H * W;
        for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
                double* row = cols + ((static_cast<std::int64_t>(ci) * k + kh) * k + kw) * P;
                std::int64_t p = 0;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + kh;
                    const bool okh = ih >= 0 && ih < H;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kw;
                        row[p++] = (okh && iw >= 0 && iw < W) ? xc[static_cast<std::int64_t>(ih) * W + iw] : 0.0;
                    }
                }
            }
    }
}

void col2im2d(const double* cols, int Ci, int H, int W, int k, int stride, int pad, int Ho, int Wo, double* dx) {
    const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
    for (int ci = 0; ci < Ci; ++ci) {
        double* xc = dx + static_cast<std::int64_t>(ci) * H * W;
        for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
                const double* row = cols + ((static_cast<std::int64_t>(ci) * k + kh) * k + kw) * P;
                std::int64_t p = 0;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) {
                        p += Wo;
                        continue;
                    }
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kw;
                        if (iw >= 0 && iw < W) xc[static_cast<std::int64_t>(ih) * W + iw] += row[p];
                        ++p;
                    }
                }
            }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4) fail_runtime("conv2d: expects x[N,Ci,H,W], w[Co,Ci,k,k]");
    if (sx[1] != sw[1]) fail_runtime("conv2d: channel mismatch");
    const int N = sx[0], Ci = sx[1], H = sx[2], W = sx[3];
    const int Co = sw[0], k = sw[2];
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho < 1 || Wo < 1) fail_runtime("conv2d: output dimension underflow");
    const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
    const std::int64_t K = static_cast<std::int64_t>(Ci) * k * k;
    std::vector<double> v(static_cast<size_t>(N) * Co * P);
    g_cols_scratch.resize(static_cast<size_t>(K) * P);
    for (int n = 0; n < N; ++n) {
        im2col2d(x.data() + static_cast<std::int64_t>(n) * Ci * H * W, Ci, H, W, k, stride, pad, Ho, Wo,
                 g_cols_scratch.data());
        MapCM Wm(w.data(), Co, K);
        MapCM Cols(g_cols_scratch.data(), K, P);
        MapM Y(v.data() + static_cast<std::int64_t>(n) * Co * P, Co, P);
        Y.noalias() = Wm * Cols;
        if (b.defined())
            for (int co = 0; co < Co; ++co) Y.row(co).array() += b.data()[co];
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    std::vector<Tensor> inputs = {x, w};
    if (b.defined()) inputs.push_back(b);
    return make_op({N, Co, Ho, Wo}, std::move(v), std::move(inputs),
                   [xn, wn, bn, N, Ci, H, W, Co, k, stride, pad, Ho, Wo, P, K](Node& nd) {
                       if (xn->requires_grad) xn->ensure_grad();
                       if (wn->requires_grad) wn->ensure_grad();
                       if (bn && bn->requires_grad) bn->ensure_grad();
                       std::vector<double> dcols(static_cast<size_t>(K) * P);
                       g_cols_scratch.resize(static_cast<size_t>(K) * P);
                       for (int n = 0; n < N; ++n) {
                           MapCM G(nd.grad.data() + static_cast<std::int64_t>(n) * Co * P, Co, P);
                           if (wn->requires_grad) {
                               im2col2d(xn->value.data() + static_cast<std::int64_t>(n) * Ci * H * W, Ci, H, W, k,
                                        stride, pad, Ho, Wo, g_cols_scratch.data());
                               MapCM Cols(g_cols_scratch.data(), K, P);
                               MapM dW(wn->grad.data(), Co, K);
                               dW.noalias() += G * Cols.transpose();
                           }
                           if (bn && bn->requires_grad)
                               for (int co = 0; co < Co; ++co) bn->grad[co] += G.row(co).sum();
                           if (xn->requires_grad) {
                               MapCM Wm(wn->value.data(), Co, K);
                               MapM dCols(dcols.data(), K, P);
                               dCols.noalias() = Wm.transpose() * G;
                               col2im2d(dcols.data(), Ci, H, W, k, stride, pad, Ho, Wo,
                                        xn->grad.data() + static_cast<std::int64_t>(n) * Ci * H * W);
                           }
                       }
                   });
}

Tensor upsample_nearest3d(const Tensor& x, int factor) {
    const Shape& s = x.shape();
    if (s.size() != 5) fail_runtime("upsample_nearest3d: expects [N,C,A,B,C]");
    const int N = s[0], C = s[1], A = s[2], B = s[3], Cz = s[4];
    const int Ao = A * factor, Bo = B * factor, Co = Cz * factor;
    std::vector<double> v(static_cast<size_t>(N) * C * Ao * Bo * Co);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = x.data() + (static_cast<std::int64_t>(n) * C + c) * A * B * Cz;
            double* dst = v.data() + (static_cast<std::int64_t>(n) * C + c) * Ao * Bo * Co;
            for (int a = 0; a < Ao; ++a)
                for (int b2 = 0; b2 < Bo; ++b2) {
                    const double* row = src + (static_cast<std::int64_t>(a / factor) * B + b2 / factor) * Cz;
                    double* drow = dst + (static_cast<std::int64_t>(a) * Bo + b2) * Co;
                    for (int c2 = 0; c2 < Co; ++c2) drow[c2] = row[c2 / factor];
                }
        }
    return make_op({N, C, Ao, Bo, Co}, std::move(v), {x}, [N, C, A, B, Cz, factor, Ao, Bo, Co](Node& nd) {
        Node& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double* src = p.grad.data() + (static_cast<std::int64_t>(n) * C + c) * A * B * Cz;
                const double* g = nd.grad.data() + (static_cast<std::int64_t>(n) * C + c) * Ao * Bo * Co;
                for (int a = 0; a < Ao; ++a)
                    for (int b2 = 0; b2 < Bo; ++b2) {
                        double* row = src + (static_cast<std::int64_t>(a / factor) * B + b2 / factor) * Cz;
                        const double* grow = g + (static_cast<std::int64_t>(a) * Bo + b2) * Co;
                        for (int c2 = 0; c2 < Co; ++c2) row[c2 / factor] += grow[c2];
                    }
            }
    });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups, double eps) {
    const Shape& s = x.shape();
    if (s.size() < 2) fail_runtime("group_norm: rank must be >= 2");
    const int N = s[0], C = s[1];
    if (C % groups != 0) fail_runtime("group_norm: channels not divisible by groups");
    std::int64_t spatial = 1;
    for (size_t d = 2; d < s.size(); ++d) spatial *= s[d];
    const int cpg = C / groups;
    const std::int64_t gsz = cpg * spatial;

    std::vector<double> v(x.size());
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * groups * 2);  // mean, invstd
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const double* xp = x.data() + (static_cast<std::int64_t>(n) * C + g * cpg) * spatial;
            double mean = 0;
            for (std::int64_t i = 0; i < gsz; ++i) mean += xp[i];
            mean /= static_cast<double>(gsz);
            double var = 0;
            for (std::int64_t i = 0; i < gsz; ++i) {
                const double d = xp[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(gsz);
            const double invstd = 1.0 / std::sqrt(var + eps);
            (*stats)[(static_cast<size_t>(n) * groups + g) * 2] = mean;
            (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1] = invstd;
            double* yp = v.data() + (static_cast<std::int64_t>(n) * C + g * cpg) * spatial;
            for (int c = 0; c < cpg; ++c) {
                const double ga = gamma.data()[g * cpg + c];
                const double be = beta.data()[g * cpg + c];
                for (std::int64_t i = 0; i < spatial; ++i) {
                    yp[c * spatial + i] = ga * (xp[c * spatial + i] - mean) * invstd + be;
                }
            }
        }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return make_op(x.shape(), std::move(v), {x, gamma, beta},
                   [xn, gn, bn, stats, N, C, groups, cpg, spatial, gsz](Node& nd) {
                       if (xn->requires_grad) xn->ensure_grad();
                       if (gn->requires_grad) gn->ensure_grad();
                       if (bn->requires_grad) bn->ensure_grad();
                       for (int n = 0; n < N; ++n)
                           for (int g = 0; g < groups; ++g) {
                               const double mean = (*stats)[(static_cast<size_t>(n) * groups + g) * 2];
                               const double invstd = (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1];
                               const std::int64_t base = (static_cast<std::int64_t>(n) * C + g * cpg) * spatial;
                               const double* xp = xn->value.data() + base;
                               const double* gp = nd.grad.data() + base;
                               // accumulate dgamma/dbeta and the two group sums
                               double sum_g = 0, sum_gx = 0;  // sums of dL/dy*gamma and dL/dy*gamma*xhat
                               for (int c = 0; c < cpg; ++c) {
                                   const double ga = gn->value[g * cpg + c];
                                   for (std::int64_t i = 0; i < spatial; ++i) {
                                       const double xhat = (xp[c * spatial + i] - mean) * invstd;
                                       const double go = gp[c * spatial + i];
                                       if (gn->requires_grad) gn->grad[g * cpg + c] += go * xhat;
                                       if (bn->requires_grad) bn->grad[g * cpg + c] += go;
                                       sum_g += go * ga;
                                       sum_gx += go * ga * xhat;
                                   }
                               }
                               if (xn->requires_grad) {
                                   const double inv_m = 1.0 / static_cast<double>(gsz);
                                   double* dxp = xn->grad.data() + base;
                                   for (int c = 0; c < cpg; ++c) {
                                       const double ga = gn->value[g * cpg + c];
                                       for (std::int64_t i = 0; i < spatial; ++i) {
                                           const double xhat = (xp[c * spatial + i] - mean) * invstd;
                                           const double go = gp[c * spatial + i] * ga;
                                           dxp[c * spatial + i] +=
                                               invstd * (go - inv_m * sum_g - xhat * inv_m * sum_gx);
                                       }
                                   }
                               }
                           }
                   });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    const Shape& s = x.shape();
    const Shape& sb = bias.shape();
    if (s.size() < 2 || sb.size() != 2 || sb[0] != s[0] || sb[1] != s[1])
        fail_runtime("add_channel_bias: bias must be [N,C]");
    const int N = s[0], C = s[1];
    std::int64_t spatial = 1;
    for (size_t d = 2; d < s.size(); ++d) spatial *= s[d];
    std::vector<double> v(x.size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double bv = bias.data()[n * C + c];
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) v[base + i] = x.data()[base + i] + bv;
        }
    return make_op(x.shape(), std::move(v), {x, bias}, [N, C, spatial](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (px.requires_grad) px.add_grad(nd.grad.data(), static_cast<std::int64_t>(nd.grad.size()));
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * spatial;
                    double s = 0;
                    for (std::int64_t i = 0; i < spatial; ++i) s += nd.grad[base + i];
                    pb.grad[n * C + c] += s;
                }
        }
    });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
    const Shape& s = table.shape();
    if (s.size() != 2) fail_runtime("gather_rows: table must be [K,c]");
    const int K = s[0], c = s[1];
    const int P = static_cast<int>(indices.size());
    std::vector<double> v(static_cast<size_t>(P) * c);
    for (int p = 0; p < P; ++p) {
        const int row = indices[p];
        if (row < 0 || row >= K) fail_runtime("gather_rows: index out of range");
        std::copy(table.data() + static_cast<size_t>(row) * c, table.data() + static_cast<size_t>(row + 1) * c,
                  v.data() + static_cast<size_t>(p) * c);
    }
    auto idx = std::make_shared<std::vector<int>>(indices);
    return make_op({P, c}, std::move(v), {table}, [idx, c](Node& n) {
        Node& t = *n.parents[0];
        if (!t.requires_grad) return;
        t.ensure_grad();
        for (size_t p = 0; p < idx->size(); ++p) {
            const int row = (*idx)[p];
            for (int j = 0; j < c; ++j) t.grad[static_cast<size_t>(row) * c + j] += n.grad[p * c + j];
        }
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    const Shape& s = x.shape();
    const Shape& sb = bias.shape();
    if (s.size() != 2 || sb.size() != 1 || sb[0] != s[1]) fail_runtime("add_row_bias: expects x[R,C], bias[C]");
    const int R = s[0], C = s[1];
    std::vector<double> v(x.size());
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) v[static_cast<size_t>(r) * C + c] = x.data()[static_cast<size_t>(r) * C + c] + bias.data()[c];
    return make_op(x.shape(), std::move(v), {x, bias}, [R, C](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (px.requires_grad) px.add_grad(nd.grad.data(), static_cast<std::int64_t>(nd.grad.size()));
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) pb.grad[c] += nd.grad[static_cast<size_t>(r) * C + c];
        }
    });
}

Tensor detach(const Tensor& a) {
    return Tensor(new_node(a.shape(), std::vector<double>(a.data(), a.data() + a.size())));
}

Tensor straight_through(const std::vector<double>& values, const Tensor& route_to) {
    if (static_cast<std::int64_t>(values.size()) != route_to.size())
        fail_runtime("straight_through: size mismatch");
    return make_op(route_to.shape(), values, {route_to}, [](Node& n) {
        if (n.parents[0]->requires_grad)
            n.parents[0]->add_grad(n.grad.data(), static_cast<std::int64_t>(n.grad.size()));
    });
}

}  // namespace tsyn::ad
