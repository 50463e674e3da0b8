#ifndef TRISR_TENSOR_HPP
#define TRISR_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "trisr/errors.hpp"

namespace trisr {

/// Global kernel thread count. 1 (the default) is reference mode; results
/// are identical for any setting because work is split on disjoint output
/// regions with a fixed accumulation order.
void set_num_threads(int n);
int num_threads();

namespace detail {
int& no_grad_depth();
}

/// RAII guard: ops built inside run forward-only (no recording, no parents).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad; // accumulated d(loss)/d(this); empty until touched
    std::vector<T> flow; // scratch used while a backward pass is in flight
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    std::size_t numel() const { return data.size(); }
};

template <typename T>
class Graph;

/// Value-semantic handle to a node in the differentiation graph.
/// Shape convention for 5-D tensors: (batch N, channels C, D, H, W),
/// row-major with W fastest.
template <typename T>
class Tensor {
public:
    Tensor() : n_(std::make_shared<TensorNode<T>>()) {}
    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, T value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value);

    const std::vector<int>& shape() const { return n_->shape; }
    std::size_t numel() const { return n_->data.size(); }
    std::vector<T>& data() { return n_->data; }
    const std::vector<T>& data() const { return n_->data; }
    std::vector<T>& grad() { return n_->grad; }
    const std::vector<T>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    bool is_leaf() const { return n_->is_leaf; }

    /// Value of a one-element tensor.
    T item() const {
        if (n_->data.size() != 1)
            throw ShapeError("item() requires a one-element tensor");
        return n_->data[0];
    }

    void zero_grad() { n_->grad.clear(); }

    TensorNode<T>& node() { return *n_; }
    const TensorNode<T>& node() const { return *n_; }
    const std::shared_ptr<TensorNode<T>>& ptr() const { return n_; }

private:
    std::shared_ptr<TensorNode<T>> n_;
};

/// Append-only tape of operation nodes. Construction makes the graph
/// current for this thread; ops record onto the innermost live graph.
/// backward() walks nodes in exact reverse insertion order, accumulating
/// (never overwriting) gradients.
template <typename T>
class Graph {
public:
    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* current();

    void record(std::shared_ptr<TensorNode<T>> node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }

    /// Accumulate d(loss)/d(t) into every requires_grad tensor reachable
    /// from loss. Throws ShapeError if loss is not scalar.
    void backward(const Tensor<T>& loss);

    /// Clear gradients of recorded op nodes. Leaf gradients are owned by
    /// their creators (ParameterSet::zero_grad, Tensor::zero_grad).
    void zero_grad();

private:
    std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
    Graph* prev_ = nullptr;
};

template <typename T>
void backward(const Tensor<T>& loss, Graph<T>& graph) {
    graph.backward(loss);
}

// ---- Operators -----------------------------------------------------------

/// 3-D cross-correlation (no kernel flip). x: (N,Cin,D,H,W),
/// weight: (Cout,Cin,k,k,k), bias: (Cout). Output spatial dims follow
/// floor((L + 2*padding - k)/stride) + 1.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

// Elementwise binary ops. The right operand may be a one-element tensor
// (scalar broadcast) or a (C)/(1,C,1,1,1) tensor against a 5-D left
// operand (channel broadcast).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c);

/// Mean over all elements; returns shape {1}.
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Mean absolute difference over all elements; returns shape {1}.
/// Subgradient at ties is 0.
template <typename T>
Tensor<T> l1(const Tensor<T>& x, const Tensor<T>& y);

/// Per-(n,c) standardization over the spatial extent: (x - mean)/sqrt(var + eps).
/// No learned affine.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5));

/// (N, C*r^3, D, H, W) -> (N, C, D*r, H*r, W*r) with
/// out[n,c,d*r+i,h*r+j,w*r+k] = in[n, c*r^3 + i*r^2 + j*r + k, d, h, w].
template <typename T>
Tensor<T> pixel_shuffle3d(const Tensor<T>& x, int r);

/// Exact inverse of pixel_shuffle3d.
template <typename T>
Tensor<T> pixel_unshuffle3d(const Tensor<T>& x, int r);

/// Concatenate along the channel axis of 5-D tensors.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);

/// (N,C,D,H,W) -> (N,C,1,1,1) spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// ln(max(x, floor)); gradient is zero where the clamp engages.
template <typename T>
Tensor<T> log_clamped(const Tensor<T>& x, T floor = T(1e-12));

/// Copying reshape; element count must be preserved.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape);

/// 2x spatial block-average over (D,H,W); even spatial dims required.
template <typename T>
Tensor<T> downsample_half_nc(const Tensor<T>& x);

// ---- Gradient checking ----------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    bool pass = false;
};

/// Central-difference check of d f(x) / d x against the recorded gradient.
/// f must return a one-element tensor. rel err uses denominator
/// max(|fd|, |ad|, 1e-4) so near-zero gradients compare absolutely.
template <typename T, typename F>
GradCheckReport grad_check(F&& f, Tensor<T> x, T h, double tol) {
    GradCheckReport report;
    std::vector<T> ad;
    {
        x.zero_grad();
        Graph<T> g;
        Tensor<T> loss = f(x);
        if (loss.numel() != 1)
            throw ShapeError("grad_check requires a scalar-valued function");
        g.backward(loss);
        ad = x.grad().empty() ? std::vector<T>(x.numel(), T(0)) : x.grad();
    }
    const auto eval = [&](void) -> double {
        NoGradGuard ng;
        return static_cast<double>(f(x).item());
    };
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const T keep = x.data()[i];
        x.data()[i] = keep + h;
        const double up = eval();
        x.data()[i] = keep - h;
        const double down = eval();
        x.data()[i] = keep;
        const double fd = (up - down) / (2.0 * static_cast<double>(h));
        const double got = static_cast<double>(ad[i]);
        const double denom = std::max({std::abs(fd), std::abs(got), 1e-4});
        const double rel = std::abs(fd - got) / denom;
        if (rel > report.max_rel_err)
            report.max_rel_err = rel;
        ++report.checked;
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

} // namespace trisr

#endif
