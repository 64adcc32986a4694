#include "qalas/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>

#include "qalas/errors.hpp"

namespace qalas::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Plain loop: Eigen's vectorized reductions peel by alignment, which would
// make bias gradients depend on where the buffers landed.
void add_row_sums(const double* g, double* out, int rows, std::size_t cols)
{
    for (int r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t i = 0; i < cols; ++i) acc += g[r * cols + i];
        out[r] += acc;
    }
}

std::size_t product(const std::vector<int>& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

void same_shape(Var a, Var b, const char* op)
{
    if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands live on different tapes");
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Elementwise unary op given f(x) and f'(x) evaluated from (x, y).
template <class F, class D>
Var unary(Var a, F f, D df)
{
    const NDArray& x = a.value();
    NDArray y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    const int in = a.id;
    return a.tape->record(std::move(y), {in}, [in, df](Tape& t, int self) {
        const NDArray& x = t.value(in);
        const NDArray& y = t.value(self);
        const NDArray& g = t.upstream(self);
        NDArray& gx = t.grad_slot(in);
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
    });
}

int rows_of(Var x, const char* op)
{
    if (x.value().rank() != 2) throw ShapeError(std::string(op) + ": expected a C x V array, got " + shape_str(x.shape()));
    return x.value().dim(0);
}

} // namespace

NDArray::NDArray(std::vector<int> shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

NDArray::NDArray(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
{
    if (data_.size() != product(shape_))
        throw ShapeError("array data has " + std::to_string(data_.size()) + " values for shape " + shape_str(shape_));
}

const NDArray& Var::value() const { return tape->value(id); }
const NDArray& Var::grad() const { return tape->grad(id); }

Var Tape::leaf(NDArray value)
{
    Node n;
    n.value = std::move(value);
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(NDArray value)
{
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(NDArray value, std::vector<int> inputs, Backward backward)
{
    Node n;
    n.value = std::move(value);
    for (int i : inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    n.inputs = std::move(inputs);
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

const NDArray& Tape::grad(int id) const
{
    const Node& n = nodes_[id];
    if (n.has_grad) return n.grad;
    auto& self = const_cast<Tape&>(*this);
    self.empty_ = NDArray(n.value.shape());
    return empty_;
}

NDArray& Tape::grad_slot(int id)
{
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = NDArray(n.value.shape());
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::backward(Var loss)
{
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    if (nodes_[loss.id].value.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(nodes_[loss.id].value.shape()));
    for (auto& n : nodes_) {
        n.grad = NDArray();
        n.has_grad = false;
    }
    grad_slot(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.has_grad || !n.backward) continue;
        n.backward(*this, id);
    }
}

Var add(Var a, Var b)
{
    same_shape(a, b, "add");
    NDArray y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
    const int ia = a.id, ib = b.id;
    return a.tape->record(std::move(y), {ia, ib}, [ia, ib](Tape& t, int self) {
        const NDArray& g = t.upstream(self);
        for (int in : {ia, ib}) {
            if (!t.needs_grad(in)) continue;
            NDArray& gx = t.grad_slot(in);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
    });
}

Var sub(Var a, Var b)
{
    same_shape(a, b, "sub");
    NDArray y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
    const int ia = a.id, ib = b.id;
    return a.tape->record(std::move(y), {ia, ib}, [ia, ib](Tape& t, int self) {
        const NDArray& g = t.upstream(self);
        if (t.needs_grad(ia)) {
            NDArray& gx = t.grad_slot(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.needs_grad(ib)) {
            NDArray& gx = t.grad_slot(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b)
{
    same_shape(a, b, "mul");
    NDArray y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
    const int ia = a.id, ib = b.id;
    return a.tape->record(std::move(y), {ia, ib}, [ia, ib](Tape& t, int self) {
        const NDArray& g = t.upstream(self);
        const NDArray& xa = t.value(ia);
        const NDArray& xb = t.value(ib);
        if (t.needs_grad(ia)) {
            NDArray& gx = t.grad_slot(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * xb[i];
        }
        if (t.needs_grad(ib)) {
            NDArray& gx = t.grad_slot(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * xa[i];
        }
    });
}

Var div(Var a, Var b)
{
    same_shape(a, b, "div");
    NDArray y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] / b.value()[i];
    const int ia = a.id, ib = b.id;
    return a.tape->record(std::move(y), {ia, ib}, [ia, ib](Tape& t, int self) {
        const NDArray& g = t.upstream(self);
        const NDArray& xb = t.value(ib);
        const NDArray& y = t.value(self);
        if (t.needs_grad(ia)) {
            NDArray& gx = t.grad_slot(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xb[i];
        }
        if (t.needs_grad(ib)) {
            NDArray& gx = t.grad_slot(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i] * y[i] / xb[i];
        }
    });
}

Var neg(Var a)
{
    return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var exp(Var a)
{
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sin_const(Var a, double c)
{
    return unary(a, [c](double x) { return std::sin(c * x); }, [c](double x, double) { return c * std::cos(c * x); });
}

Var cos_const(Var a, double c)
{
    return unary(a, [c](double x) { return std::cos(c * x); }, [c](double x, double) { return -c * std::sin(c * x); });
}

Var power(Var a, double p)
{
    return unary(
        a, [p](double x) { return std::pow(x, p); }, [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Var square(Var a)
{
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var affine(Var a, double scale, double shift)
{
    return unary(a, [=](double x) { return scale * x + shift; }, [=](double, double) { return scale; });
}

Var leaky_relu(Var a, double slope)
{
    return unary(
        a, [slope](double x) { return kernel::leaky_relu(x, slope); },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var sigmoid(Var a)
{
    return unary(
        a, [](double x) { return kernel::sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

Var abs_smoothless(Var a)
{
    return unary(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sum(Var a)
{
    double acc = 0.0;
    for (double v : a.value().values()) acc += v;
    const int in = a.id;
    return a.tape->record(NDArray::scalar(acc), {in}, [in](Tape& t, int self) {
        const double g = t.upstream(self)[0];
        NDArray& gx = t.grad_slot(in);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

Var mean(Var a)
{
    const std::size_t n = a.value().size();
    if (n == 0) throw ShapeError("mean of an empty array");
    return affine(sum(a), 1.0 / static_cast<double>(n), 0.0);
}

namespace kernel {

void matmul_channels(const double* w, const double* b, const double* x, double* y, int cout, int cin, std::size_t v)
{
    const auto cols = static_cast<Eigen::Index>(v);
    MapMat out(y, cout, cols);
    out.noalias() = ConstMapMat(w, cout, cin) * ConstMapMat(x, cin, cols);
    for (int o = 0; o < cout; ++o) out.row(o).array() += b[o];
}

void im2col3x3(const double* x, double* col, int cin, int nx, int ny)
{
    const std::size_t v = static_cast<std::size_t>(nx) * ny;
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                double* dst = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * v;
                const double* src = x + static_cast<std::size_t>(c) * v;
                for (int y = 0; y < ny; ++y) {
                    const int sy = y + ky - 1;
                    for (int xx = 0; xx < nx; ++xx) {
                        const int sx = xx + kx - 1;
                        dst[static_cast<std::size_t>(y) * nx + xx] =
                            (sy < 0 || sy >= ny || sx < 0 || sx >= nx) ? 0.0 : src[static_cast<std::size_t>(sy) * nx + sx];
                    }
                }
            }
}

void instance_norm(const double* x, double* y, double* inv_std, int c, std::size_t v, double eps)
{
    for (int r = 0; r < c; ++r) {
        const double* xr = x + static_cast<std::size_t>(r) * v;
        double* yr = y + static_cast<std::size_t>(r) * v;
        double m = 0.0;
        for (std::size_t i = 0; i < v; ++i) m += xr[i];
        m /= static_cast<double>(v);
        double var = 0.0;
        for (std::size_t i = 0; i < v; ++i) var += (xr[i] - m) * (xr[i] - m);
        var /= static_cast<double>(v);
        const double s = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < v; ++i) yr[i] = (xr[i] - m) * s;
        if (inv_std) inv_std[r] = s;
    }
}

} // namespace kernel

Var matmul_channels(Var w, Var b, Var x)
{
    const int cin = rows_of(x, "matmul_channels");
    if (w.value().rank() != 2 || w.value().dim(1) != cin)
        throw ShapeError("matmul_channels: weights " + shape_str(w.shape()) + " do not match input " + shape_str(x.shape()));
    const int cout = w.value().dim(0);
    if (b.value().rank() != 1 || b.value().dim(0) != cout)
        throw ShapeError("matmul_channels: bias " + shape_str(b.shape()) + " for " + std::to_string(cout) + " outputs");
    const std::size_t v = static_cast<std::size_t>(x.value().dim(1));
    NDArray y({cout, static_cast<int>(v)});
    kernel::matmul_channels(w.value().data(), b.value().data(), x.value().data(), y.data(), cout, cin, v);
    const int iw = w.id, ib = b.id, ix = x.id;
    return x.tape->record(std::move(y), {iw, ib, ix}, [=](Tape& t, int self) {
        const auto cols = static_cast<Eigen::Index>(v);
        ConstMapMat g(t.upstream(self).data(), cout, cols);
        if (t.needs_grad(iw)) {
            MapMat(t.grad_slot(iw).data(), cout, cin).noalias() += g * ConstMapMat(t.value(ix).data(), cin, cols).transpose();
        }
        if (t.needs_grad(ib)) {
            add_row_sums(t.upstream(self).data(), t.grad_slot(ib).data(), cout, v);
        }
        if (t.needs_grad(ix)) {
            MapMat(t.grad_slot(ix).data(), cin, cols).noalias() += ConstMapMat(t.value(iw).data(), cout, cin).transpose() * g;
        }
    });
}

Var conv3x3(Var w, Var b, Var x, int nx, int ny)
{
    const int cin = rows_of(x, "conv3x3");
    const std::size_t v = static_cast<std::size_t>(nx) * ny;
    if (static_cast<std::size_t>(x.value().dim(1)) != v) throw ShapeError("conv3x3: input is not an nx * ny slice");
    const auto& ws = w.value().shape();
    if (ws.size() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3)
        throw ShapeError("conv3x3: weights " + shape_str(ws) + " for " + std::to_string(cin) + " input channels");
    const int cout = ws[0];
    if (b.value().rank() != 1 || b.value().dim(0) != cout) throw ShapeError("conv3x3: bias shape");

    auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(cin) * 9 * v);
    kernel::im2col3x3(x.value().data(), col->data(), cin, nx, ny);
    NDArray y({cout, static_cast<int>(v)});
    kernel::matmul_channels(w.value().data(), b.value().data(), col->data(), y.data(), cout, cin * 9, v);
    const int iw = w.id, ib = b.id, ix = x.id;
    return x.tape->record(std::move(y), {iw, ib, ix}, [=](Tape& t, int self) {
        const auto cols = static_cast<Eigen::Index>(v);
        const int k = cin * 9;
        ConstMapMat g(t.upstream(self).data(), cout, cols);
        if (t.needs_grad(iw)) MapMat(t.grad_slot(iw).data(), cout, k).noalias() += g * ConstMapMat(col->data(), k, cols).transpose();
        if (t.needs_grad(ib)) add_row_sums(t.upstream(self).data(), t.grad_slot(ib).data(), cout, v);
        if (t.needs_grad(ix)) {
            RowMat dcol = ConstMapMat(t.value(iw).data(), cout, k).transpose() * g;
            NDArray& gx = t.grad_slot(ix);
            // Adjoint of im2col: scatter each shifted copy back.
            for (int c = 0; c < cin; ++c)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const double* src = dcol.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * v;
                        double* dst = gx.data() + static_cast<std::size_t>(c) * v;
                        for (int yy = 0; yy < ny; ++yy) {
                            const int sy = yy + ky - 1;
                            if (sy < 0 || sy >= ny) continue;
                            for (int xx = 0; xx < nx; ++xx) {
                                const int sx = xx + kx - 1;
                                if (sx < 0 || sx >= nx) continue;
                                dst[static_cast<std::size_t>(sy) * nx + sx] += src[static_cast<std::size_t>(yy) * nx + xx];
                            }
                        }
                    }
        }
    });
}

Var instance_norm(Var x, double eps)
{
    const int c = rows_of(x, "instance_norm");
    const std::size_t v = static_cast<std::size_t>(x.value().dim(1));
    if (v < 2) throw DegenerateError("instance_norm needs more than one voxel per channel");
    NDArray y(x.shape());
    auto inv_std = std::make_shared<std::vector<double>>(c);
    kernel::instance_norm(x.value().data(), y.data(), inv_std->data(), c, v, eps);
    const int ix = x.id;
    return x.tape->record(std::move(y), {ix}, [=](Tape& t, int self) {
        const NDArray& y = t.value(self);
        const NDArray& g = t.upstream(self);
        NDArray& gx = t.grad_slot(ix);
        for (int r = 0; r < c; ++r) {
            const std::size_t off = static_cast<std::size_t>(r) * v;
            double mg = 0.0, mgy = 0.0;
            for (std::size_t i = 0; i < v; ++i) {
                mg += g[off + i];
                mgy += g[off + i] * y[off + i];
            }
            mg /= static_cast<double>(v);
            mgy /= static_cast<double>(v);
            const double s = (*inv_std)[r];
            for (std::size_t i = 0; i < v; ++i) gx[off + i] += s * (g[off + i] - mg - y[off + i] * mgy);
        }
    });
}

Var row(Var x, int r)
{
    const int c = rows_of(x, "row");
    if (r < 0 || r >= c) throw ShapeError("row index " + std::to_string(r) + " out of range");
    const int v = x.value().dim(1);
    const std::size_t off = static_cast<std::size_t>(r) * v;
    std::vector<double> data(x.value().data() + off, x.value().data() + off + v);
    const int ix = x.id;
    return x.tape->record(NDArray({v}, std::move(data)), {ix}, [=](Tape& t, int self) {
        const NDArray& g = t.upstream(self);
        NDArray& gx = t.grad_slot(ix);
        for (int i = 0; i < v; ++i) gx[off + i] += g[i];
    });
}

Var spatial_diff(Var x, int nx, int ny, int axis)
{
    if (x.value().size() != static_cast<std::size_t>(nx) * ny) throw ShapeError("spatial_diff: input is not an nx * ny slice");
    if (axis != 0 && axis != 1) throw ShapeError("spatial_diff: axis must be 0 (x) or 1 (y)");
    const int ox = axis == 0 ? nx - 1 : nx;
    const int oy = axis == 1 ? ny - 1 : ny;
    if (ox <= 0 || oy <= 0) throw ShapeError("spatial_diff: slice too small along the difference axis");
    const int step = axis == 0 ? 1 : nx;
    NDArray y({oy * ox});
    const NDArray& xv = x.value();
    for (int j = 0; j < oy; ++j)
        for (int i = 0; i < ox; ++i) {
            const int src = j * nx + i;
            y[static_cast<std::size_t>(j) * ox + i] = xv[src + step] - xv[src];
        }
    const int ix = x.id;
    return x.tape->record(std::move(y), {ix}, [=](Tape& t, int self) {
        const NDArray& g = t.upstream(self);
        NDArray& gx = t.grad_slot(ix);
        for (int j = 0; j < oy; ++j)
            for (int i = 0; i < ox; ++i) {
                const int src = j * nx + i;
                const double gi = g[static_cast<std::size_t>(j) * ox + i];
                gx[src + step] += gi;
                gx[src] -= gi;
            }
    });
}

std::array<Var, 5> signal_model_node(Var t1, Var t2, Var pd, Var ie, std::span<const double> b1,
                                     const SequenceTiming& timing)
{
    const std::size_t v = t1.value().size();
    for (Var p : {t2, pd, ie})
        if (p.value().size() != v || p.tape != t1.tape) throw ShapeError("signal_model_node: parameter sizes differ");
    if (b1.size() != v) throw ShapeError("signal_model_node: B1 has " + std::to_string(b1.size()) + " entries for " +
                                         std::to_string(v) + " voxels");
    const int vi = static_cast<int>(v);
    NDArray s({5, vi});
    auto jac = std::make_shared<std::vector<SignalJacobian>>(v);
    for (std::size_t i = 0; i < v; ++i) {
        const TissueParams tissue{t1.value()[i], t2.value()[i], pd.value()[i], ie.value()[i]};
        const auto r = simulate_with_jacobian(timing, tissue, b1[i]);
        for (int c = 0; c < 5; ++c) s[static_cast<std::size_t>(c) * v + i] = r.signal[c];
        (*jac)[i] = r.jacobian;
    }
    const std::array<int, 4> ins{t1.id, t2.id, pd.id, ie.id};
    Var all = t1.tape->record(std::move(s), {ins.begin(), ins.end()}, [=](Tape& t, int self) {
        const NDArray& g = t.upstream(self);
        for (int p = 0; p < 4; ++p) {
            if (!t.needs_grad(ins[p])) continue;
            NDArray& gp = t.grad_slot(ins[p]);
            for (std::size_t i = 0; i < v; ++i) {
                double acc = 0.0;
                for (int c = 0; c < 5; ++c) acc += g[static_cast<std::size_t>(c) * v + i] * (*jac)[i][c][p];
                gp[i] += acc;
            }
        }
    });
    return {row(all, 0), row(all, 1), row(all, 2), row(all, 3), row(all, 4)};
}

} // namespace qalas::ad
