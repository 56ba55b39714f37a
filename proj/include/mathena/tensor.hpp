#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mathena/errors.hpp"

namespace mathena {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    uint64_t id = 0;  // creation order, backward runs in decreasing id
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad();
};

// Value-semantic handle over a graph node. Data is immutable after creation
// except the grad slot.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, float value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return static_cast<int64_t>(node_->data.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    std::span<const float> data() const { return node_->data; }
    std::span<float> mutable_data() { return node_->data; }  // init-time only
    std::span<const float> grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    float item() const;
    float at(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }

    void zero_grad() { node_->grad.assign(node_->grad.size(), 0.0f); }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
// across repeated calls; zero_grad resets.
void backward(const Tensor& loss);

enum class EwOp { Add, Sub, Mul, Div, Exp, Log, Sigmoid, Silu, Relu };

// ---- elementwise (trailing-dimension broadcast for binary ops) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor vmin(const Tensor& a, const Tensor& b);  // same shape
Tensor vmax(const Tensor& a, const Tensor& b);  // same shape
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor neg(const Tensor& a);
Tensor detach(const Tensor& a);

// Spec-style dispatcher over the named elementwise ops.
Tensor elementwise(EwOp op, const Tensor& a, const std::optional<Tensor>& b = std::nullopt);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);                      // [M,K]x[K,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);  // rows x [C,Cout] + [Cout]

// ---- convolutions (single image, CHW) ----
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);
Tensor conv2d(const Tensor& x, const Tensor& weight, int stride, int padding);
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, int stride, int padding);
Tensor depthwise_separable_conv(const Tensor& x, const Tensor& dw_weight, const Tensor& pw_weight,
                                const Tensor& pw_bias, int stride);
Tensor transposed_conv2d(const Tensor& x, const Tensor& weight, int stride);

// ---- normalization / pooling ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);  // rows [*,C]
Tensor global_avg_pool(const Tensor& x);  // CHW -> [C]
Tensor upsample_nearest2(const Tensor& x);
Tensor maxpool2(const Tensor& x);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- shape / indexing ----
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor chw_to_rows(const Tensor& x);                       // [C,H,W] -> [H*W, C]
Tensor rows_to_chw(const Tensor& x, int h, int w);         // [H*W, C] -> [C,H,W]
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor concat_axis0(const std::vector<Tensor>& parts);
Tensor slice_axis0(const Tensor& x, int start, int len);

// ---- fused losses / heads ----
Tensor log_softmax_rows(const Tensor& x);                         // [L,C] per-row
Tensor softmax_expect_rows(const Tensor& x, std::span<const float> values);  // [L,B] -> [L]
Tensor bce_with_logits_sum(const Tensor& logits, const Tensor& targets);     // scalar

// ---- gradient checking ----
struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
    int64_t worst_index = -1;
};

// f maps the variable tensor to a scalar tensor; x is perturbed coordinate-wise.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double h = 1e-3, double tol = 1e-3);

}  // namespace mathena
