// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace m2r2::ag {

// Every tensor is a row-major matrix. Batched image/sequence data is laid
// out as one sample per row (or one time step per row) and the ops below
// take the extra geometry as arguments.
struct Node {
    int rows = 0;
    int cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    int rows() const { return node_->rows; }
    int cols() const { return node_->cols; }
    std::size_t size() const { return node_->value.size(); }
    bool defined() const { return static_cast<bool>(node_); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    double at(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * cols() + c]; }
    double item() const;

    void zero_grad();
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Gradient recording is on by default; evaluation code disables it with a
// NoGradGuard so that no graph is retained.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Tensor constant(int rows, int cols, std::vector<double> values);
Tensor zeros(int rows, int cols);
Tensor parameter(int rows, int cols, std::vector<double> values);
Tensor detach(const Tensor& x);

// Runs reverse-mode accumulation from a 1x1 tensor.
void backward(const Tensor& loss);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_row(const Tensor& x, const Tensor& row);
// y = x / s with s a learnable 1x1 tensor.
Tensor div_scalar(const Tensor& x, const Tensor& s);

// Row r of x (shape [n*period, d]) is multiplied element-wise by row
// (r % period) of pattern (shape [period, d]).
Tensor mul_tiled(const Tensor& x, const Tensor& pattern);
// Mean of each consecutive block of `group` rows: [n*group, d] -> [n, d].
Tensor group_mean(const Tensor& x, int group);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, int rows, int cols);
Tensor transpose(const Tensor& x);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
// Interleaves k tensors of shape [n, d] into [n*k, d] with row n*k + j taken
// from parts[j].
Tensor interleave_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int begin, int count);
// y[t] = x[t - offset] with zeros where t - offset is out of range.
Tensor shift_rows(const Tensor& x, int offset);
Tensor gather_rows(const Tensor& table, std::span<const int> indices);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Throws std::domain_error when a row has (near) zero norm.
Tensor l2_normalize_rows(const Tensor& x);

// Scaled dot-product self-attention over sequences of length seq_len stored
// as consecutive row blocks of q/k/v ([n*seq_len, d]), split into `heads`.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int seq_len, int heads);

struct Conv2dShape {
    int channels = 1;
    int height = 1;
    int width = 1;
    int kernel = 3;
    int stride = 1;
    int padding = 1;

    int out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
    int out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

// x: [n, C*H*W] (CHW per row); weight: [C_out, C*k*k]; bias: [1, C_out].
// Returns [n, C_out*H_out*W_out].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dShape& shape);

// Truncated squared difference between consecutive rows with the earlier
// row detached, clamped at `clamp` and averaged.
Tensor truncated_smoothing(const Tensor& log_probs, double clamp);

}  // namespace m2r2::ag
