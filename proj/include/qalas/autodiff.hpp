#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tape records every operation as a node holding its forward value and a
// backward closure. backward() walks the nodes once in reverse order and
// accumulates gradients into each node that needs one; summation order is
// fixed by the tape order, so gradients are reproducible bit for bit.
//
// No broadcasting: binary elementwise ops require identical shapes. Channel
// data is laid out as C x V (channel, voxel).

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "qalas/signal_model.hpp"

namespace qalas::ad {

class NDArray {
public:
    NDArray() = default;
    explicit NDArray(std::vector<int> shape, double fill = 0.0);
    NDArray(std::vector<int> shape, std::vector<double> data);
    static NDArray scalar(double v) { return NDArray({}, std::vector<double>{v}); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[i]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

class Tape;

// Handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const NDArray& value() const;
    const NDArray& grad() const;
    const std::vector<int>& shape() const { return value().shape(); }
};

class Tape {
public:
    // Differentiable leaf: backward() fills its gradient.
    Var leaf(NDArray value);
    // Non-differentiable input.
    Var constant(NDArray value);

    const NDArray& value(int id) const { return nodes_[id].value; }
    // Zero array when nothing flowed into the node.
    const NDArray& grad(int id) const;
    std::size_t size() const { return nodes_.size(); }

    // loss must hold exactly one element.
    void backward(Var loss);

    // For primitive implementations.
    using Backward = std::function<void(Tape&, int self)>;
    Var record(NDArray value, std::vector<int> inputs, Backward backward);
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    // Gradient buffer of an input, allocated (zeroed) on first use.
    NDArray& grad_slot(int id);
    const NDArray& upstream(int id) const { return nodes_[id].grad; }

private:
    struct Node {
        NDArray value;
        NDArray grad;
        std::vector<int> inputs;
        Backward backward;
        bool needs_grad = false;
        bool has_grad = false;
    };
    std::vector<Node> nodes_;
    NDArray empty_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var exp(Var a);
// sin(c * a) and cos(c * a) for a constant c.
Var sin_const(Var a, double c);
Var cos_const(Var a, double c);
// a^p for a constant exponent; a must be positive unless p is an integer.
Var power(Var a, double p);
Var square(Var a);
// scale * a + shift with constants.
Var affine(Var a, double scale, double shift);
Var leaky_relu(Var a, double slope);
Var sigmoid(Var a);
// |a|, with derivative sign(a) and 0 at a = 0.
Var abs_smoothless(Var a);
Var sum(Var a);
Var mean(Var a);

// y = W x + b for x of shape Cin x V, W of shape Cout x Cin, b of shape Cout.
Var matmul_channels(Var w, Var b, Var x);
// In-plane 3x3 convolution with zero padding over an nx * ny slice:
// x is Cin x (ny*nx), W is Cout x Cin x 3 x 3, b is Cout.
Var conv3x3(Var w, Var b, Var x, int nx, int ny);
// Each row of a C x V array normalized to zero mean, unit variance:
// (x - mean) / sqrt(var + eps), variance biased. V = 1 is rejected.
Var instance_norm(Var x, double eps = 1e-5);

// Row r of a C x V array, shape V.
Var row(Var x, int r);
// Forward differences of a V = ny*nx slice along x (axis 0) or y (axis 1).
Var spatial_diff(Var x, int nx, int ny, int axis);

// Custom-gradient node: the five signals of simulate() per voxel, with the
// analytic Jacobian used in the backward pass. Inputs have shape V; b1 has V
// entries.
std::array<Var, 5> signal_model_node(Var t1, Var t2, Var pd, Var ie, std::span<const double> b1,
                                     const SequenceTiming& timing);

// Shared forward kernels (also used by tapeless inference).
namespace kernel {
inline double sigmoid(double x)
{
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
inline double leaky_relu(double x, double slope) { return x > 0.0 ? x : slope * x; }

// y (Cout x V) = W (Cout x Cin) x (Cin x V) + b.
void matmul_channels(const double* w, const double* b, const double* x, double* y, int cout, int cin,
                     std::size_t v);
// Expands Cin x (ny*nx) into (Cin*9) x (ny*nx) shifted copies with zero padding.
void im2col3x3(const double* x, double* col, int cin, int nx, int ny);
void instance_norm(const double* x, double* y, double* inv_std, int c, std::size_t v, double eps);
} // namespace kernel

} // namespace qalas::ad
