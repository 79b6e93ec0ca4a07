#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tsyn::ad {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
class Tensor;

// Reverse-mode tape node. Values and gradients are double so that
// finite-difference checks are meaningful at tight tolerances.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // accumulates into parents' grad

    void ensure_grad();
    void add_grad(const double* g, std::int64_t n);
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from_vec(Shape shape, std::vector<double> v);
    static Tensor scalar(double v);
    // Leaf with requires_grad set; used for trainable parameters.
    static Tensor param(Shape shape, std::vector<double> v);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::int64_t size() const { return static_cast<std::int64_t>(n_->value.size()); }
    double* data() { return n_->value.data(); }
    const double* data() const { return n_->value.data(); }
    std::vector<double>& vec() { return n_->value; }
    const std::vector<double>& vec() const { return n_->value; }
    double item() const { return n_->value.at(0); }

    bool requires_grad() const { return n_->requires_grad; }
    std::vector<double>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad();

    std::shared_ptr<Node> node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

// Runs reverse-mode accumulation from a scalar loss.
void backward(const Tensor& loss);

// While any guard is alive, newly created ops do not record the graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor tanh_act(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor square(const Tensor& a);

// ---- reductions / losses ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor l1_loss(const Tensor& a, const Tensor& b);
Tensor mse_loss(const Tensor& a, const Tensor& b);
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// ---- shape ops ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
// Concatenate along an axis; all other dims must match.
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice_axis(const Tensor& a, int axis, int from, int to);

// ---- linear algebra ----
// a: [m,k], b: [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [B,m,k], b: [B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);
// softmax over the last axis
Tensor softmax_lastdim(const Tensor& a);

// ---- conv / spatial ----
// x: [N,Ci,A,B,C], w: [Co,Ci,k,k,k], b: [Co] (may be undefined)
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// x: [N,Ci,H,W], w: [Co,Ci,k,k], b: [Co]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest3d(const Tensor& x, int factor);
// x: [N,C,...], gamma/beta: [C]
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups, double eps = 1e-5);
// bias: [N,C] broadcast over spatial dims of x [N,C,...]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
// bias: [C] broadcast over rows of x [R,C]
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

// table: [K, c]; indices into rows -> [P, c]
Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);

// ---- gradient routing ----
// Value copy that blocks gradients (stop-gradient).
Tensor detach(const Tensor& a);
// Straight-through: carries `values` forward but routes the whole incoming
// gradient to `route_to` (shapes must match).
Tensor straight_through(const std::vector<double>& values, const Tensor& route_to);

}  // namespace tsyn::ad
