#pragma once

// Dense n-dimensional double tensors with reverse-mode automatic
// differentiation on an explicit, per-forward-pass tape.
//
// Design notes:
//  - Tensors are cheap value types (shared data buffer + shape).
//  - A Tape records primitive applications when at least one operand is
//    attached (watched) on it. No global implicit graph exists; attach
//    parameters with Tape::watch before the forward pass.
//  - backward() can record its own operations back onto the tape
//    (create_graph), so losses built from first derivatives remain
//    differentiable.
//  - Exact per-parameter second derivatives (Hessian diagonal) come from a
//    second-order directional forward sweep over the recorded tape.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lwdl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ValueError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class Tape;
class Tensor;
enum class Op : std::uint8_t;
struct OpAttrs;
struct NodeInput;
Tensor detail_record(Tape* tape, Op op, std::vector<NodeInput> in, Tensor out, OpAttrs attrs);

// =====================================================================
//  Tensor
// =====================================================================

class Tensor {
public:
    Tensor() : data_(std::make_shared<std::vector<double>>()) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(numel(shape_), fill)) {}

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        if (data_->size() != numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_->size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    std::vector<double>& values() { return *data_; }
    const std::vector<double>& values() const { return *data_; }
    const void* buffer_id() const { return data_.get(); }

    double item() const {
        if (size() != 1) {
            throw ShapeError("item() requires a single-element tensor, got shape " + shape_str(shape_));
        }
        return (*data_)[0];
    }

    double at(std::size_t flat) const { return (*data_)[flat]; }
    double& at(std::size_t flat) { return (*data_)[flat]; }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool on) {
        requires_grad_ = on;
        return *this;
    }

    bool attached() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    // Drop the tape binding on this handle (the buffer is untouched). Needed
    // when a watched parameter outlives the tape of one training step.
    Tensor& detach_from_tape() {
        tape_ = nullptr;
        node_ = -1;
        return *this;
    }

    // Same buffer, no autodiff metadata.
    Tensor detached() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    // Deep copy of the buffer, no autodiff metadata.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    bool all_finite() const {
        for (double v : *data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;
    Tape* tape_ = nullptr;
    int node_ = -1;

    friend class Tape;
    friend Tensor detail_record(Tape* tape, Op op, std::vector<NodeInput> in, Tensor out,
                                OpAttrs attrs);
};

inline void check_finite(const char* op, const Tensor& t) {
    if (!t.all_finite()) {
        throw ValueError(std::string(op) + ": non-finite input value");
    }
}

// =====================================================================
//  Broadcasting and raw kernels
// =====================================================================

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                             " and " + shape_str(b));
        }
        out[rank - 1 - i] = std::max(da, db);
    }
    return out;
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape[i];
    }
    return strides;
}

// Strides of `in` viewed inside the broadcast frame `out` (0 on stretched axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    const auto in_strides = row_major_strides(in);
    for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t out_axis = out.size() - in.size() + i;
        if (in[i] != 1) strides[out_axis] = in_strides[i];
    }
    return strides;
}

template <class F>
void broadcast_binary_kernel(const std::vector<double>& a, const Shape& ash,
                             const std::vector<double>& b, const Shape& bsh,
                             std::vector<double>& out, const Shape& osh, F f) {
    const std::size_t n = numel(osh);
    if (ash == bsh) {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
        return;
    }
    if (numel(ash) == 1) {
        const double av = a[0];
        for (std::size_t i = 0; i < n; ++i) out[i] = f(av, b[i]);
        return;
    }
    if (numel(bsh) == 1) {
        const double bv = b[0];
        for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], bv);
        return;
    }
    const auto sa = broadcast_strides(ash, osh);
    const auto sb = broadcast_strides(bsh, osh);
    std::vector<std::size_t> idx(osh.size(), 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = f(a[ia], b[ib]);
        for (std::size_t ax = osh.size(); ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < osh[ax]) break;
            idx[ax] = 0;
            ia -= sa[ax] * osh[ax];
            ib -= sb[ax] * osh[ax];
        }
    }
}

inline void broadcast_copy_kernel(const std::vector<double>& in, const Shape& ish,
                                  std::vector<double>& out, const Shape& osh) {
    const std::size_t n = numel(osh);
    if (ish == osh) {
        std::copy(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(n), out.begin());
        return;
    }
    if (numel(ish) == 1) {
        std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n), in[0]);
        return;
    }
    const auto si = broadcast_strides(ish, osh);
    std::vector<std::size_t> idx(osh.size(), 0);
    std::size_t ii = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = in[ii];
        for (std::size_t ax = osh.size(); ax-- > 0;) {
            ++idx[ax];
            ii += si[ax];
            if (idx[ax] < osh[ax]) break;
            idx[ax] = 0;
            ii -= si[ax] * osh[ax];
        }
    }
}

// Sum `in` down to `target` (inverse of broadcast). Shapes must be
// broadcast-compatible with `in` as the larger frame.
inline void reduce_sum_to_kernel(const std::vector<double>& in, const Shape& ish,
                                 std::vector<double>& out, const Shape& target) {
    std::fill(out.begin(), out.end(), 0.0);
    if (ish == target) {
        std::copy(in.begin(), in.end(), out.begin());
        return;
    }
    if (numel(target) == 1) {
        double acc = 0.0;
        for (double v : in) acc += v;
        out[0] = acc;
        return;
    }
    const auto st = broadcast_strides(target, ish);
    std::vector<std::size_t> idx(ish.size(), 0);
    std::size_t it = 0;
    const std::size_t n = numel(ish);
    for (std::size_t i = 0; i < n; ++i) {
        out[it] += in[i];
        for (std::size_t ax = ish.size(); ax-- > 0;) {
            ++idx[ax];
            it += st[ax];
            if (idx[ax] < ish[ax]) break;
            idx[ax] = 0;
            it -= st[ax] * ish[ax];
        }
    }
}

inline void matmul_kernel(const std::vector<double>& a, std::size_t m, std::size_t k,
                          const std::vector<double>& b, std::size_t n,
                          std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &b[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

struct ConvDims {
    std::size_t batch, in_ch, in_h, in_w;
    std::size_t out_ch, kh, kw;
    std::size_t stride, padding;
    std::size_t out_h, out_w;
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, std::size_t stride, std::size_t padding) {
    if (x.size() != 4 || w.size() != 4) {
        throw ShapeError("conv2d: expected input [N,C,H,W] and kernel [O,C,kh,kw], got " +
                         shape_str(x) + " and " + shape_str(w));
    }
    if (x[1] != w[1]) {
        throw ShapeError("conv2d: input channels " + shape_str(x) +
                         " do not match kernel channels " + shape_str(w));
    }
    if (stride == 0) throw ValueError("conv2d: stride must be positive");
    ConvDims d{};
    d.batch = x[0];
    d.in_ch = x[1];
    d.in_h = x[2];
    d.in_w = x[3];
    d.out_ch = w[0];
    d.kh = w[2];
    d.kw = w[3];
    d.stride = stride;
    d.padding = padding;
    const std::size_t eff_h = d.in_h + 2 * padding;
    const std::size_t eff_w = d.in_w + 2 * padding;
    if (eff_h < d.kh || eff_w < d.kw) {
        throw ShapeError("conv2d: kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
    }
    d.out_h = (eff_h - d.kh) / stride + 1;
    d.out_w = (eff_w - d.kw) / stride + 1;
    return d;
}

inline void conv_forward_kernel(const std::vector<double>& x, const std::vector<double>& w,
                                std::vector<double>& y, const ConvDims& d) {
    std::fill(y.begin(), y.end(), 0.0);
    const std::size_t xs_c = d.in_h * d.in_w;
    const std::size_t xs_n = d.in_ch * xs_c;
    const std::size_t ws_c = d.kh * d.kw;
    const std::size_t ws_o = d.in_ch * ws_c;
    const std::size_t ys_o = d.out_h * d.out_w;
    const std::size_t ys_n = d.out_ch * ys_o;
    for (std::size_t n = 0; n < d.batch; ++n) {
        for (std::size_t o = 0; o < d.out_ch; ++o) {
            for (std::size_t i = 0; i < d.out_h; ++i) {
                for (std::size_t j = 0; j < d.out_w; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < d.in_ch; ++c) {
                        for (std::size_t p = 0; p < d.kh; ++p) {
                            const std::ptrdiff_t a =
                                static_cast<std::ptrdiff_t>(i * d.stride + p) -
                                static_cast<std::ptrdiff_t>(d.padding);
                            if (a < 0 || a >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
                            for (std::size_t q = 0; q < d.kw; ++q) {
                                const std::ptrdiff_t b =
                                    static_cast<std::ptrdiff_t>(j * d.stride + q) -
                                    static_cast<std::ptrdiff_t>(d.padding);
                                if (b < 0 || b >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                                acc += x[n * xs_n + c * xs_c + a * d.in_w + b] *
                                       w[o * ws_o + c * ws_c + p * d.kw + q];
                            }
                        }
                    }
                    y[n * ys_n + o * ys_o + i * d.out_w + j] = acc;
                }
            }
        }
    }
}

inline void conv_dgrad_kernel(const std::vector<double>& g, const std::vector<double>& w,
                              std::vector<double>& gx, const ConvDims& d) {
    std::fill(gx.begin(), gx.end(), 0.0);
    const std::size_t xs_c = d.in_h * d.in_w;
    const std::size_t xs_n = d.in_ch * xs_c;
    const std::size_t ws_c = d.kh * d.kw;
    const std::size_t ws_o = d.in_ch * ws_c;
    const std::size_t ys_o = d.out_h * d.out_w;
    const std::size_t ys_n = d.out_ch * ys_o;
    for (std::size_t n = 0; n < d.batch; ++n) {
        for (std::size_t o = 0; o < d.out_ch; ++o) {
            for (std::size_t i = 0; i < d.out_h; ++i) {
                for (std::size_t j = 0; j < d.out_w; ++j) {
                    const double gv = g[n * ys_n + o * ys_o + i * d.out_w + j];
                    if (gv == 0.0) continue;
                    for (std::size_t c = 0; c < d.in_ch; ++c) {
                        for (std::size_t p = 0; p < d.kh; ++p) {
                            const std::ptrdiff_t a =
                                static_cast<std::ptrdiff_t>(i * d.stride + p) -
                                static_cast<std::ptrdiff_t>(d.padding);
                            if (a < 0 || a >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
                            for (std::size_t q = 0; q < d.kw; ++q) {
                                const std::ptrdiff_t b =
                                    static_cast<std::ptrdiff_t>(j * d.stride + q) -
                                    static_cast<std::ptrdiff_t>(d.padding);
                                if (b < 0 || b >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                                gx[n * xs_n + c * xs_c + a * d.in_w + b] +=
                                    gv * w[o * ws_o + c * ws_c + p * d.kw + q];
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void conv_wgrad_kernel(const std::vector<double>& x, const std::vector<double>& g,
                              std::vector<double>& gw, const ConvDims& d) {
    std::fill(gw.begin(), gw.end(), 0.0);
    const std::size_t xs_c = d.in_h * d.in_w;
    const std::size_t xs_n = d.in_ch * xs_c;
    const std::size_t ws_c = d.kh * d.kw;
    const std::size_t ws_o = d.in_ch * ws_c;
    const std::size_t ys_o = d.out_h * d.out_w;
    const std::size_t ys_n = d.out_ch * ys_o;
    for (std::size_t n = 0; n < d.batch; ++n) {
        for (std::size_t o = 0; o < d.out_ch; ++o) {
            for (std::size_t i = 0; i < d.out_h; ++i) {
                for (std::size_t j = 0; j < d.out_w; ++j) {
                    const double gv = g[n * ys_n + o * ys_o + i * d.out_w + j];
                    if (gv == 0.0) continue;
                    for (std::size_t c = 0; c < d.in_ch; ++c) {
                        for (std::size_t p = 0; p < d.kh; ++p) {
                            const std::ptrdiff_t a =
                                static_cast<std::ptrdiff_t>(i * d.stride + p) -
                                static_cast<std::ptrdiff_t>(d.padding);
                            if (a < 0 || a >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
                            for (std::size_t q = 0; q < d.kw; ++q) {
                                const std::ptrdiff_t b =
                                    static_cast<std::ptrdiff_t>(j * d.stride + q) -
                                    static_cast<std::ptrdiff_t>(d.padding);
                                if (b < 0 || b >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
                                gw[o * ws_o + c * ws_c + p * d.kw + q] +=
                                    gv * x[n * xs_n + c * xs_c + a * d.in_w + b];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct PoolDims {
    std::size_t batch, ch, in_h, in_w;
    std::size_t kernel, stride;
    std::size_t out_h, out_w;
};

inline PoolDims pool_dims(const Shape& x, std::size_t kernel, std::size_t stride) {
    if (x.size() != 4) {
        throw ShapeError("avg_pool2d: expected input [N,C,H,W], got " + shape_str(x));
    }
    if (kernel == 0 || stride == 0) throw ValueError("avg_pool2d: kernel and stride must be positive");
    if (x[2] < kernel || x[3] < kernel) {
        throw ShapeError("avg_pool2d: window " + std::to_string(kernel) + " larger than input " + shape_str(x));
    }
    PoolDims d{};
    d.batch = x[0];
    d.ch = x[1];
    d.in_h = x[2];
    d.in_w = x[3];
    d.kernel = kernel;
    d.stride = stride;
    d.out_h = (x[2] - kernel) / stride + 1;
    d.out_w = (x[3] - kernel) / stride + 1;
    return d;
}

inline void avg_pool_kernel(const std::vector<double>& x, std::vector<double>& y, const PoolDims& d) {
    const double inv = 1.0 / static_cast<double>(d.kernel * d.kernel);
    const std::size_t xs_c = d.in_h * d.in_w;
    const std::size_t ys_c = d.out_h * d.out_w;
    for (std::size_t nc = 0; nc < d.batch * d.ch; ++nc) {
        for (std::size_t i = 0; i < d.out_h; ++i) {
            for (std::size_t j = 0; j < d.out_w; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < d.kernel; ++p) {
                    for (std::size_t q = 0; q < d.kernel; ++q) {
                        acc += x[nc * xs_c + (i * d.stride + p) * d.in_w + (j * d.stride + q)];
                    }
                }
                y[nc * ys_c + i * d.out_w + j] = acc * inv;
            }
        }
    }
}

inline void avg_unpool_kernel(const std::vector<double>& g, std::vector<double>& gx, const PoolDims& d) {
    std::fill(gx.begin(), gx.end(), 0.0);
    const double inv = 1.0 / static_cast<double>(d.kernel * d.kernel);
    const std::size_t xs_c = d.in_h * d.in_w;
    const std::size_t ys_c = d.out_h * d.out_w;
    for (std::size_t nc = 0; nc < d.batch * d.ch; ++nc) {
        for (std::size_t i = 0; i < d.out_h; ++i) {
            for (std::size_t j = 0; j < d.out_w; ++j) {
                const double gv = g[nc * ys_c + i * d.out_w + j] * inv;
                for (std::size_t p = 0; p < d.kernel; ++p) {
                    for (std::size_t q = 0; q < d.kernel; ++q) {
                        gx[nc * xs_c + (i * d.stride + p) * d.in_w + (j * d.stride + q)] += gv;
                    }
                }
            }
        }
    }
}

inline void softmax_rows_kernel(const std::vector<double>& x, std::vector<double>& y,
                                std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = &x[r * cols];
        double* yi = &y[r * cols];
        double mx = xi[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xi[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yi[c] = std::exp(xi[c] - mx);
            denom += yi[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yi[c] /= denom;
    }
}

inline void log_softmax_rows_kernel(const std::vector<double>& x, std::vector<double>& y,
                                    std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = &x[r * cols];
        double* yi = &y[r * cols];
        double mx = xi[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xi[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < cols; ++c) denom += std::exp(xi[c] - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t c = 0; c < cols; ++c) yi[c] = xi[c] - lse;
    }
}

}  // namespace detail

// =====================================================================
//  Tape
// =====================================================================

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Conv2d,
    Conv2dDataGrad,
    Conv2dWeightGrad,
    Relu,
    Abs,
    AvgPool2d,
    AvgUnpool2d,
    Reshape,
    Broadcast,
    ReduceTo,
    SumAxis,
    Softmax,
    LogSoftmax,
    Exp,
    Log,
    Square,
    SumAll,
    MeanAll,
    SelectClasses,
    ScatterClasses,
    StackScalars,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Conv2d: return "conv2d";
        case Op::Conv2dDataGrad: return "conv2d_data_grad";
        case Op::Conv2dWeightGrad: return "conv2d_weight_grad";
        case Op::Relu: return "relu";
        case Op::Abs: return "abs";
        case Op::AvgPool2d: return "avg_pool2d";
        case Op::AvgUnpool2d: return "avg_unpool2d";
        case Op::Reshape: return "reshape";
        case Op::Broadcast: return "broadcast_to";
        case Op::ReduceTo: return "reduce_sum_to";
        case Op::SumAxis: return "sum_axis";
        case Op::Softmax: return "softmax";
        case Op::LogSoftmax: return "log_softmax";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Square: return "square";
        case Op::SumAll: return "sum";
        case Op::MeanAll: return "mean";
        case Op::SelectClasses: return "select_classes";
        case Op::ScatterClasses: return "scatter_classes";
        case Op::StackScalars: return "stack_scalars";
    }
    return "?";
}

struct OpAttrs {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t kernel = 0;
    std::size_t axis = 0;
    Shape in_shape;  // original input shape for reshape/broadcast/reduce/pool
    std::vector<int> labels;
    std::size_t num_classes = 0;
};

struct NodeInput {
    int id = -1;     // tape node id, -1 for constants
    Tensor value;    // value at record time
};

struct TapeNode {
    Op op = Op::Leaf;
    std::vector<NodeInput> in;
    Tensor out;
    OpAttrs attrs;
};

class GradientMap {
public:
    GradientMap() = default;
    GradientMap(const Tape* tape, std::vector<Tensor> by_node)
        : tape_(tape), by_node_(std::move(by_node)) {}

    // Gradient of the differentiated scalar with respect to a watched tensor.
    // Returns a zero tensor of matching shape when no gradient flowed.
    Tensor wrt(const Tensor& t) const {
        if (!t.attached() || reinterpret_cast<const void*>(t.tape()) != reinterpret_cast<const void*>(tape_)) {
            throw TapeError("gradient lookup: tensor is not attached to the differentiated tape");
        }
        const int id = t.node();
        if (id >= 0 && static_cast<std::size_t>(id) < by_node_.size() && by_node_[id].size() > 0) {
            return by_node_[static_cast<std::size_t>(id)];
        }
        return Tensor(t.shape(), 0.0);
    }

    bool has(const Tensor& t) const {
        return t.attached() && t.node() >= 0 &&
               static_cast<std::size_t>(t.node()) < by_node_.size() &&
               by_node_[static_cast<std::size_t>(t.node())].size() > 0;
    }

private:
    const Tape* tape_ = nullptr;
    std::vector<Tensor> by_node_;
};

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t padding = 0);
Tensor conv2d_data_grad(const Tensor& g, const Tensor& w, std::size_t stride, std::size_t padding,
                        const Shape& input_shape);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, std::size_t stride, std::size_t padding,
                          const Shape& kernel_shape);
Tensor relu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride = 0);
Tensor avg_unpool2d(const Tensor& g, std::size_t kernel, std::size_t stride, const Shape& input_shape);
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);
Tensor broadcast_to(const Tensor& x, Shape shape);
Tensor reduce_sum_to(const Tensor& x, const Shape& shape);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor select_classes(const Tensor& x, const std::vector<int>& labels);
Tensor scatter_classes(const Tensor& v, const std::vector<int>& labels, std::size_t num_classes);
Tensor stack_scalars(const std::vector<Tensor>& xs);

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    const TapeNode& node(std::size_t i) const { return nodes_[i]; }

    // Register a leaf (typically a parameter) on this tape. Idempotent per
    // buffer; the handle's tape metadata is set in place.
    Tensor& watch(Tensor& t) {
        if (t.tape_ == this && t.node_ >= 0) return t;
        if (t.tape_ != nullptr && t.tape_ != this) {
            throw TapeError("watch: tensor is already attached to a different tape");
        }
        auto it = leaf_by_buffer_.find(t.buffer_id());
        if (it != leaf_by_buffer_.end()) {
            t.tape_ = this;
            t.node_ = it->second;
            return t;
        }
        TapeNode n;
        n.op = Op::Leaf;
        n.out = t;
        nodes_.push_back(std::move(n));
        const int id = static_cast<int>(nodes_.size()) - 1;
        nodes_.back().out.tape_ = this;
        nodes_.back().out.node_ = id;
        leaf_by_buffer_[t.buffer_id()] = id;
        t.tape_ = this;
        t.node_ = id;
        return t;
    }

    struct BackwardOptions {
        bool retain = false;
        bool create_graph = false;
    };

    GradientMap backward(const Tensor& loss) { return backward(loss, BackwardOptions{}); }

    // Reverse sweep from a scalar. With create_graph the sweep's own
    // operations are recorded, so returned gradients stay differentiable.
    GradientMap backward(const Tensor& loss, BackwardOptions opts) {
        require_scalar_on_tape("backward", loss);
        if (consumed_) {
            throw TapeError("backward: tape already consumed; pass retain to differentiate again");
        }
        if (!opts.retain && !opts.create_graph) consumed_ = true;

        const std::size_t limit = static_cast<std::size_t>(loss.node()) + 1;
        std::vector<Tensor> adj(limit);
        adj[loss.node()] = Tensor(loss.shape(), 1.0);

        const bool was_recording = recording_;
        recording_ = opts.create_graph;
        try {
            for (std::size_t i = limit; i-- > 0;) {
                if (adj[i].size() == 0) continue;
                backprop_node(static_cast<int>(i), adj);
            }
        } catch (...) {
            recording_ = was_recording;
            throw;
        }
        recording_ = was_recording;
        return GradientMap(this, std::move(adj));
    }

    // Exact Hessian diagonal of a recorded scalar with respect to watched
    // parameters, via one second-order directional sweep per element.
    std::vector<Tensor> hessian_diag(const Tensor& loss, const std::vector<Tensor>& params) {
        require_scalar_on_tape("hessian_diag", loss);
        if (consumed_) {
            throw TapeError("hessian_diag: tape already consumed; run backward with retain first");
        }
        std::vector<Tensor> out;
        out.reserve(params.size());
        for (const Tensor& p : params) {
            JetWorkspace ws = make_jet_workspace(p);
            Tensor h(p.shape(), 0.0);
            for (std::size_t k = 0; k < p.size(); ++k) {
                jet_sweep(ws, k);
                h.at(k) = jet_d2_scalar(ws, loss.node());
            }
            out.push_back(std::move(h));
        }
        return out;
    }

    // Batched flavor: second directional derivative of several recorded
    // scalars along each coordinate of one parameter.
    // Result layout: [scalar][param element].
    std::vector<std::vector<double>> second_directional_batch(const std::vector<Tensor>& scalars,
                                                              const Tensor& param) {
        for (const Tensor& s : scalars) require_scalar_on_tape("second_directional_batch", s);
        if (consumed_) {
            throw TapeError("second_directional_batch: tape already consumed");
        }
        JetWorkspace ws = make_jet_workspace(param);
        std::vector<std::vector<double>> out(scalars.size(), std::vector<double>(param.size(), 0.0));
        for (std::size_t k = 0; k < param.size(); ++k) {
            jet_sweep(ws, k);
            for (std::size_t s = 0; s < scalars.size(); ++s) {
                out[s][k] = jet_d2_scalar(ws, scalars[s].node());
            }
        }
        return out;
    }

private:
    friend Tensor detail_record(Tape* tape, Op op, std::vector<NodeInput> in, Tensor out, OpAttrs attrs);

    struct JetWorkspace {
        int leaf = -1;
        std::vector<char> active;               // node participates in the sweep
        std::vector<char> z1, z2;               // component identically zero for every sweep
        std::vector<std::vector<double>> d1;    // first directional derivative per node
        std::vector<std::vector<double>> d2;    // second directional derivative per node
        std::vector<double> zeros;              // shared all-zero buffer for silent components
        std::size_t last_elem = static_cast<std::size_t>(-1);
    };

    void require_scalar_on_tape(const char* what, const Tensor& t) const {
        if (!t.attached() || t.tape() != this) {
            throw TapeError(std::string(what) + ": tensor is not recorded on this tape");
        }
        if (t.size() != 1) {
            throw ShapeError(std::string(what) + ": expected a scalar, got shape " + shape_str(t.shape()));
        }
    }

    int record(Op op, std::vector<NodeInput> in, const Tensor& out, OpAttrs attrs) {
        TapeNode n;
        n.op = op;
        n.in = std::move(in);
        n.out = out;
        n.attrs = std::move(attrs);
        nodes_.push_back(std::move(n));
        const int id = static_cast<int>(nodes_.size()) - 1;
        nodes_.back().out.tape_ = this;
        nodes_.back().out.node_ = id;
        return id;
    }

    void accumulate(std::vector<Tensor>& adj, int id, const Tensor& contrib) {
        if (id < 0 || static_cast<std::size_t>(id) >= adj.size()) return;
        Tensor& slot = adj[static_cast<std::size_t>(id)];
        if (slot.size() == 0) {
            slot = contrib;
        } else {
            slot = lwdl::add(slot, contrib);
        }
    }

    void backprop_node(int id, std::vector<Tensor>& adj);

    // Precomputes, per node, whether its first/second directional components
    // can ever be nonzero for this seed leaf. Buffers are allocated only for
    // live components; every kernel fully overwrites its output, so nothing
    // needs re-zeroing between sweeps except the seed one-hot itself.
    JetWorkspace make_jet_workspace(const Tensor& param) const {
        if (!param.attached() || param.tape() != this) {
            throw TapeError("second-order sweep: parameter is not watched on this tape");
        }
        JetWorkspace ws;
        ws.leaf = param.node();
        const std::size_t count = nodes_.size();
        ws.active.assign(count, 0);
        ws.z1.assign(count, 1);
        ws.z2.assign(count, 1);
        ws.d1.resize(count);
        ws.d2.resize(count);
        const auto leaf_idx = static_cast<std::size_t>(ws.leaf);
        ws.active[leaf_idx] = 1;
        ws.z1[leaf_idx] = 0;  // the seed direction itself
        for (std::size_t i = 0; i < count; ++i) {
            const TapeNode& n = nodes_[i];
            if (n.op == Op::Leaf) continue;
            bool act = false;
            for (const NodeInput& in : n.in) {
                if (in.id >= 0 && ws.active[static_cast<std::size_t>(in.id)]) act = true;
            }
            if (!act) continue;
            ws.active[i] = 1;
            auto flag1 = [&](const NodeInput& in) {
                return in.id < 0 || ws.z1[static_cast<std::size_t>(in.id)] != 0;
            };
            auto flag2 = [&](const NodeInput& in) {
                return in.id < 0 || ws.z2[static_cast<std::size_t>(in.id)] != 0;
            };
            bool o1 = true, o2 = true;
            switch (n.op) {
                case Op::Mul:
                case Op::Div:
                case Op::MatMul:
                case Op::Conv2d:
                case Op::Conv2dDataGrad:
                case Op::Conv2dWeightGrad:
                    o1 = flag1(n.in[0]) && flag1(n.in[1]);
                    o2 = flag2(n.in[0]) && flag2(n.in[1]) && (flag1(n.in[0]) || flag1(n.in[1]));
                    break;
                case Op::Softmax:
                case Op::LogSoftmax:
                case Op::Exp:
                case Op::Log:
                case Op::Square:
                    o1 = flag1(n.in[0]);
                    o2 = flag1(n.in[0]) && flag2(n.in[0]);
                    break;
                default:
                    // Linear in every input: zero-ness intersects.
                    o1 = o2 = true;
                    for (const NodeInput& in : n.in) {
                        o1 = o1 && flag1(in);
                        o2 = o2 && flag2(in);
                    }
                    break;
            }
            ws.z1[i] = o1 ? 1 : 0;
            ws.z2[i] = o2 ? 1 : 0;
        }
        std::size_t max_size = 1;
        for (std::size_t i = 0; i < count; ++i) {
            max_size = std::max(max_size, nodes_[i].out.size());
            if (!ws.active[i]) continue;
            if (!ws.z1[i]) ws.d1[i].assign(nodes_[i].out.size(), 0.0);
            if (!ws.z2[i]) ws.d2[i].assign(nodes_[i].out.size(), 0.0);
        }
        ws.zeros.assign(max_size, 0.0);
        return ws;
    }

    void jet_sweep(JetWorkspace& ws, std::size_t elem) const;

    // Second directional derivative of a recorded scalar after a sweep;
    // provably-zero components have no buffer.
    static double jet_d2_scalar(const JetWorkspace& ws, int node) {
        const auto i = static_cast<std::size_t>(node);
        if (!ws.active[i] || ws.z2[i]) return 0.0;
        return ws.d2[i][0];
    }

    std::vector<TapeNode> nodes_;
    std::unordered_map<const void*, int> leaf_by_buffer_;
    bool consumed_ = false;
    bool recording_ = true;
};

// =====================================================================
//  Recording helper
// =====================================================================

inline Tensor detail_record(Tape* tape, Op op, std::vector<NodeInput> in, Tensor out, OpAttrs attrs) {
    bool any_rg = false;
    for (const NodeInput& i : in) any_rg = any_rg || i.value.requires_grad();
    if (tape == nullptr || !tape->recording_) {
        if (any_rg) out.set_requires_grad(true);
        return out;
    }
    // Auto-watch requires_grad operands that are not yet on the tape.
    for (NodeInput& i : in) {
        if (i.id < 0 && i.value.requires_grad()) {
            Tensor alias = i.value;
            tape->watch(alias);
            i.id = alias.node();
            i.value = alias;
        }
    }
    out.set_requires_grad(true);
    const int id = tape->record(op, std::move(in), out, std::move(attrs));
    out.tape_ = tape;
    out.node_ = id;
    return out;
}

namespace detail {

inline Tape* common_tape(const char* op, std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->attached()) continue;
        if (tape == nullptr) {
            tape = t->tape();
        } else if (tape != t->tape()) {
            throw TapeError(std::string(op) + ": operands attached to different tapes");
        }
    }
    return tape;
}

inline NodeInput make_input(const Tensor& t, Tape* tape) {
    NodeInput in;
    in.value = t;
    in.id = (tape != nullptr && t.attached() && t.tape() == tape) ? t.node() : -1;
    return in;
}

}  // namespace detail

// =====================================================================
//  Primitives
// =====================================================================

namespace detail {

template <class F>
Tensor elementwise_binary(const char* name, Op op, const Tensor& a, const Tensor& b, F f) {
    check_finite(name, a);
    check_finite(name, b);
    const Shape osh = broadcast_shape(name, a.shape(), b.shape());
    Tensor out(osh);
    broadcast_binary_kernel(a.values(), a.shape(), b.values(), b.shape(), out.values(), osh, f);
    Tape* tape = common_tape(name, {&a, &b});
    return detail_record(tape, op, {make_input(a, tape), make_input(b, tape)}, std::move(out), {});
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary("add", Op::Add, a, b, [](double x, double y) { return x + y; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary("sub", Op::Sub, a, b, [](double x, double y) { return x - y; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary("mul", Op::Mul, a, b, [](double x, double y) { return x * y; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary("div", Op::Div, a, b, [](double x, double y) { return x / y; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check_finite("matmul", a);
    check_finite("matmul", b);
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    Tensor out(Shape{a.dim(0), b.dim(1)});
    detail::matmul_kernel(a.values(), a.dim(0), a.dim(1), b.values(), b.dim(1), out.values());
    Tape* tape = detail::common_tape("matmul", {&a, &b});
    return detail_record(tape, Op::MatMul,
                         {detail::make_input(a, tape), detail::make_input(b, tape)}, std::move(out), {});
}

inline Tensor transpose(const Tensor& a) {
    check_finite("transpose", a);
    if (a.rank() != 2) {
        throw ShapeError("transpose: expected a matrix, got shape " + shape_str(a.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out.at(j * m + i) = a.at(i * n + j);
    }
    Tape* tape = detail::common_tape("transpose", {&a});
    return detail_record(tape, Op::Transpose, {detail::make_input(a, tape)}, std::move(out), {});
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
    check_finite("conv2d", x);
    check_finite("conv2d", w);
    const auto d = detail::conv_dims(x.shape(), w.shape(), stride, padding);
    Tensor out(Shape{d.batch, d.out_ch, d.out_h, d.out_w});
    detail::conv_forward_kernel(x.values(), w.values(), out.values(), d);
    OpAttrs attrs;
    attrs.stride = stride;
    attrs.padding = padding;
    Tape* tape = detail::common_tape("conv2d", {&x, &w});
    return detail_record(tape, Op::Conv2d,
                         {detail::make_input(x, tape), detail::make_input(w, tape)},
                         std::move(out), std::move(attrs));
}

inline Tensor conv2d_data_grad(const Tensor& g, const Tensor& w, std::size_t stride,
                               std::size_t padding, const Shape& input_shape) {
    check_finite("conv2d_data_grad", g);
    check_finite("conv2d_data_grad", w);
    const auto d = detail::conv_dims(input_shape, w.shape(), stride, padding);
    if (g.shape() != Shape{d.batch, d.out_ch, d.out_h, d.out_w}) {
        throw ShapeError("conv2d_data_grad: gradient shape " + shape_str(g.shape()) +
                         " does not match conv output for input " + shape_str(input_shape));
    }
    Tensor out(input_shape);
    detail::conv_dgrad_kernel(g.values(), w.values(), out.values(), d);
    OpAttrs attrs;
    attrs.stride = stride;
    attrs.padding = padding;
    attrs.in_shape = input_shape;
    Tape* tape = detail::common_tape("conv2d_data_grad", {&g, &w});
    return detail_record(tape, Op::Conv2dDataGrad,
                         {detail::make_input(g, tape), detail::make_input(w, tape)},
                         std::move(out), std::move(attrs));
}

inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, std::size_t stride,
                                 std::size_t padding, const Shape& kernel_shape) {
    check_finite("conv2d_weight_grad", x);
    check_finite("conv2d_weight_grad", g);
    const auto d = detail::conv_dims(x.shape(), kernel_shape, stride, padding);
    if (g.shape() != Shape{d.batch, d.out_ch, d.out_h, d.out_w}) {
        throw ShapeError("conv2d_weight_grad: gradient shape " + shape_str(g.shape()) +
                         " does not match conv output for input " + shape_str(x.shape()));
    }
    Tensor out(kernel_shape);
    detail::conv_wgrad_kernel(x.values(), g.values(), out.values(), d);
    OpAttrs attrs;
    attrs.stride = stride;
    attrs.padding = padding;
    attrs.in_shape = kernel_shape;
    Tape* tape = detail::common_tape("conv2d_weight_grad", {&x, &g});
    return detail_record(tape, Op::Conv2dWeightGrad,
                         {detail::make_input(x, tape), detail::make_input(g, tape)},
                         std::move(out), std::move(attrs));
}

inline Tensor relu(const Tensor& x) {
    check_finite("relu", x);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = x.at(i) > 0.0 ? x.at(i) : 0.0;
    Tape* tape = detail::common_tape("relu", {&x});
    return detail_record(tape, Op::Relu, {detail::make_input(x, tape)}, std::move(out), {});
}

inline Tensor abs(const Tensor& x) {
    check_finite("abs", x);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = std::abs(x.at(i));
    Tape* tape = detail::common_tape("abs", {&x});
    return detail_record(tape, Op::Abs, {detail::make_input(x, tape)}, std::move(out), {});
}

inline Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
    check_finite("avg_pool2d", x);
    if (stride == 0) stride = kernel;
    const auto d = detail::pool_dims(x.shape(), kernel, stride);
    Tensor out(Shape{d.batch, d.ch, d.out_h, d.out_w});
    detail::avg_pool_kernel(x.values(), out.values(), d);
    OpAttrs attrs;
    attrs.kernel = kernel;
    attrs.stride = stride;
    attrs.in_shape = x.shape();
    Tape* tape = detail::common_tape("avg_pool2d", {&x});
    return detail_record(tape, Op::AvgPool2d, {detail::make_input(x, tape)}, std::move(out),
                         std::move(attrs));
}

inline Tensor avg_unpool2d(const Tensor& g, std::size_t kernel, std::size_t stride,
                           const Shape& input_shape) {
    check_finite("avg_unpool2d", g);
    const auto d = detail::pool_dims(input_shape, kernel, stride);
    if (g.shape() != Shape{d.batch, d.ch, d.out_h, d.out_w}) {
        throw ShapeError("avg_unpool2d: gradient shape " + shape_str(g.shape()) +
                         " does not match pool output for input " + shape_str(input_shape));
    }
    Tensor out(input_shape);
    detail::avg_unpool_kernel(g.values(), out.values(), d);
    OpAttrs attrs;
    attrs.kernel = kernel;
    attrs.stride = stride;
    attrs.in_shape = input_shape;
    Tape* tape = detail::common_tape("avg_unpool2d", {&g});
    return detail_record(tape, Op::AvgUnpool2d, {detail::make_input(g, tape)}, std::move(out),
                         std::move(attrs));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    check_finite("reshape", x);
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor out(shape, x.values());
    OpAttrs attrs;
    attrs.in_shape = x.shape();
    Tape* tape = detail::common_tape("reshape", {&x});
    return detail_record(tape, Op::Reshape, {detail::make_input(x, tape)}, std::move(out),
                         std::move(attrs));
}

// Collapse all trailing axes, keeping the leading (batch) axis.
inline Tensor flatten(const Tensor& x) {
    if (x.rank() < 1) {
        throw ShapeError("flatten: expected rank >= 1, got shape " + shape_str(x.shape()));
    }
    return reshape(x, Shape{x.dim(0), x.size() / x.dim(0)});
}

inline Tensor broadcast_to(const Tensor& x, Shape shape) {
    check_finite("broadcast_to", x);
    const Shape check = detail::broadcast_shape("broadcast_to", x.shape(), shape);
    if (check != shape) {
        throw ShapeError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
    }
    Tensor out(shape);
    detail::broadcast_copy_kernel(x.values(), x.shape(), out.values(), shape);
    OpAttrs attrs;
    attrs.in_shape = x.shape();
    Tape* tape = detail::common_tape("broadcast_to", {&x});
    return detail_record(tape, Op::Broadcast, {detail::make_input(x, tape)}, std::move(out),
                         std::move(attrs));
}

// Sum the broadcast axes away so the result has exactly `shape`.
// Returns the input unchanged (no tape node) when shapes already match.
inline Tensor reduce_sum_to(const Tensor& x, const Shape& shape) {
    if (x.shape() == shape) return x;
    check_finite("reduce_sum_to", x);
    Tensor out(shape);
    detail::reduce_sum_to_kernel(x.values(), x.shape(), out.values(), shape);
    OpAttrs attrs;
    attrs.in_shape = x.shape();
    Tape* tape = detail::common_tape("reduce_sum_to", {&x});
    return detail_record(tape, Op::ReduceTo, {detail::make_input(x, tape)}, std::move(out),
                         std::move(attrs));
}

// Sum along one axis, keeping it as size 1.
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
    check_finite("sum_axis", x);
    if (axis >= x.rank()) {
        throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
    }
    Shape osh = x.shape();
    osh[axis] = 1;
    Tensor out(osh);
    detail::reduce_sum_to_kernel(x.values(), x.shape(), out.values(), osh);
    OpAttrs attrs;
    attrs.axis = axis;
    attrs.in_shape = x.shape();
    Tape* tape = detail::common_tape("sum_axis", {&x});
    return detail_record(tape, Op::SumAxis, {detail::make_input(x, tape)}, std::move(out),
                         std::move(attrs));
}

inline Tensor softmax(const Tensor& x) {
    check_finite("softmax", x);
    if (x.rank() < 1) {
        throw ShapeError("softmax: expected rank >= 1, got shape " + shape_str(x.shape()));
    }
    const std::size_t cols = x.dim(x.rank() - 1);
    Tensor out(x.shape());
    detail::softmax_rows_kernel(x.values(), out.values(), x.size() / cols, cols);
    Tape* tape = detail::common_tape("softmax", {&x});
    return detail_record(tape, Op::Softmax, {detail::make_input(x, tape)}, std::move(out), {});
}

inline Tensor log_softmax(const Tensor& x) {
    check_finite("log_softmax", x);
    if (x.rank() < 1) {
        throw ShapeError("log_softmax: expected rank >= 1, got shape " + shape_str(x.shape()));
    }
    const std::size_t cols = x.dim(x.rank() - 1);
    Tensor out(x.shape());
    detail::log_softmax_rows_kernel(x.values(), out.values(), x.size() / cols, cols);
    Tape* tape = detail::common_tape("log_softmax", {&x});
    return detail_record(tape, Op::LogSoftmax, {detail::make_input(x, tape)}, std::move(out), {});
}

inline Tensor exp(const Tensor& x) {
    check_finite("exp", x);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = std::exp(x.at(i));
    Tape* tape = detail::common_tape("exp", {&x});
    return detail_record(tape, Op::Exp, {detail::make_input(x, tape)}, std::move(out), {});
}

inline Tensor log(const Tensor& x) {
    check_finite("log", x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.at(i) <= 0.0) {
            throw ValueError("log: non-positive input " + std::to_string(x.at(i)));
        }
    }
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = std::log(x.at(i));
    Tape* tape = detail::common_tape("log", {&x});
    return detail_record(tape, Op::Log, {detail::make_input(x, tape)}, std::move(out), {});
}

inline Tensor square(const Tensor& x) {
    check_finite("square", x);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = x.at(i) * x.at(i);
    Tape* tape = detail::common_tape("square", {&x});
    return detail_record(tape, Op::Square, {detail::make_input(x, tape)}, std::move(out), {});
}

inline Tensor sum(const Tensor& x) {
    check_finite("sum", x);
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.at(i);
    Tensor out = Tensor::scalar(acc);
    OpAttrs attrs;
    attrs.in_shape = x.shape();
    Tape* tape = detail::common_tape("sum", {&x});
    return detail_record(tape, Op::SumAll, {detail::make_input(x, tape)}, std::move(out),
                         std::move(attrs));
}

inline Tensor mean(const Tensor& x) {
    check_finite("mean", x);
    if (x.size() == 0) throw ShapeError("mean: empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.at(i);
    Tensor out = Tensor::scalar(acc / static_cast<double>(x.size()));
    OpAttrs attrs;
    attrs.in_shape = x.shape();
    Tape* tape = detail::common_tape("mean", {&x});
    return detail_record(tape, Op::MeanAll, {detail::make_input(x, tape)}, std::move(out),
                         std::move(attrs));
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
    const double inv = 1.0 / static_cast<double>(x.dim(axis));
    return mul(sum_axis(x, axis), Tensor::scalar(inv));
}

inline Tensor select_classes(const Tensor& x, const std::vector<int>& labels) {
    check_finite("select_classes", x);
    if (x.rank() != 2) {
        throw ShapeError("select_classes: expected [N,C] input, got shape " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (labels.size() != n) {
        throw ShapeError("select_classes: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
    }
    Tensor out(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw ValueError("select_classes: label " + std::to_string(labels[i]) + " at row " +
                             std::to_string(i) + " out of range [0," + std::to_string(c) + ")");
        }
        out.at(i) = x.at(i * c + static_cast<std::size_t>(labels[i]));
    }
    OpAttrs attrs;
    attrs.labels = labels;
    attrs.num_classes = c;
    Tape* tape = detail::common_tape("select_classes", {&x});
    return detail_record(tape, Op::SelectClasses, {detail::make_input(x, tape)}, std::move(out),
                         std::move(attrs));
}

inline Tensor scatter_classes(const Tensor& v, const std::vector<int>& labels, std::size_t num_classes) {
    check_finite("scatter_classes", v);
    if (v.rank() != 1 || v.size() != labels.size()) {
        throw ShapeError("scatter_classes: expected one value per label, got shape " +
                         shape_str(v.shape()) + " for " + std::to_string(labels.size()) + " labels");
    }
    Tensor out(Shape{v.size(), num_classes}, 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
            throw ValueError("scatter_classes: label " + std::to_string(labels[i]) + " at row " +
                             std::to_string(i) + " out of range [0," + std::to_string(num_classes) + ")");
        }
        out.at(i * num_classes + static_cast<std::size_t>(labels[i])) = v.at(i);
    }
    OpAttrs attrs;
    attrs.labels = labels;
    attrs.num_classes = num_classes;
    Tape* tape = detail::common_tape("scatter_classes", {&v});
    return detail_record(tape, Op::ScatterClasses, {detail::make_input(v, tape)}, std::move(out),
                         std::move(attrs));
}

inline Tensor stack_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("stack_scalars: empty input");
    Tensor out(Shape{xs.size()});
    std::vector<NodeInput> in;
    in.reserve(xs.size());
    Tape* tape = nullptr;
    for (const Tensor& x : xs) {
        if (x.size() != 1) {
            throw ShapeError("stack_scalars: expected scalars, got shape " + shape_str(x.shape()));
        }
        check_finite("stack_scalars", x);
        if (x.attached()) {
            if (tape != nullptr && tape != x.tape()) {
                throw TapeError("stack_scalars: operands attached to different tapes");
            }
            tape = x.tape();
        }
    }
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out.at(i) = xs[i].at(0);
        in.push_back(detail::make_input(xs[i], tape));
    }
    return detail_record(tape, Op::StackScalars, std::move(in), std::move(out), {});
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// =====================================================================
//  Backward formulas
// =====================================================================

inline void Tape::backprop_node(int id, std::vector<Tensor>& adj) {
    // By value: with create_graph the formula ops below append to nodes_,
    // which may reallocate and would invalidate a reference.
    const TapeNode n = nodes_[static_cast<std::size_t>(id)];
    const Tensor g = adj[static_cast<std::size_t>(id)];
    switch (n.op) {
        case Op::Leaf:
            return;
        case Op::Add: {
            if (n.in[0].id >= 0) accumulate(adj, n.in[0].id, reduce_sum_to(g, n.in[0].value.shape()));
            if (n.in[1].id >= 0) accumulate(adj, n.in[1].id, reduce_sum_to(g, n.in[1].value.shape()));
            return;
        }
        case Op::Sub: {
            if (n.in[0].id >= 0) accumulate(adj, n.in[0].id, reduce_sum_to(g, n.in[0].value.shape()));
            if (n.in[1].id >= 0) {
                accumulate(adj, n.in[1].id,
                           reduce_sum_to(mul(g, Tensor::scalar(-1.0)), n.in[1].value.shape()));
            }
            return;
        }
        case Op::Mul: {
            if (n.in[0].id >= 0) {
                accumulate(adj, n.in[0].id, reduce_sum_to(mul(g, n.in[1].value), n.in[0].value.shape()));
            }
            if (n.in[1].id >= 0) {
                accumulate(adj, n.in[1].id, reduce_sum_to(mul(g, n.in[0].value), n.in[1].value.shape()));
            }
            return;
        }
        case Op::Div: {
            if (n.in[0].id >= 0) {
                accumulate(adj, n.in[0].id, reduce_sum_to(div(g, n.in[1].value), n.in[0].value.shape()));
            }
            if (n.in[1].id >= 0) {
                Tensor t = mul(mul(g, Tensor::scalar(-1.0)), div(n.out, n.in[1].value));
                accumulate(adj, n.in[1].id, reduce_sum_to(t, n.in[1].value.shape()));
            }
            return;
        }
        case Op::MatMul: {
            if (n.in[0].id >= 0) accumulate(adj, n.in[0].id, matmul(g, transpose(n.in[1].value)));
            if (n.in[1].id >= 0) accumulate(adj, n.in[1].id, matmul(transpose(n.in[0].value), g));
            return;
        }
        case Op::Transpose: {
            accumulate(adj, n.in[0].id, transpose(g));
            return;
        }
        case Op::Conv2d: {
            if (n.in[0].id >= 0) {
                accumulate(adj, n.in[0].id,
                           conv2d_data_grad(g, n.in[1].value, n.attrs.stride, n.attrs.padding,
                                            n.in[0].value.shape()));
            }
            if (n.in[1].id >= 0) {
                accumulate(adj, n.in[1].id,
                           conv2d_weight_grad(n.in[0].value, g, n.attrs.stride, n.attrs.padding,
                                              n.in[1].value.shape()));
            }
            return;
        }
        case Op::Conv2dDataGrad: {
            // Output lives in input space; inputs are (out-grad, kernel).
            if (n.in[0].id >= 0) {
                accumulate(adj, n.in[0].id, conv2d(g, n.in[1].value, n.attrs.stride, n.attrs.padding));
            }
            if (n.in[1].id >= 0) {
                accumulate(adj, n.in[1].id,
                           conv2d_weight_grad(g, n.in[0].value, n.attrs.stride, n.attrs.padding,
                                              n.in[1].value.shape()));
            }
            return;
        }
        case Op::Conv2dWeightGrad: {
            // Output lives in kernel space; inputs are (input, out-grad).
            if (n.in[0].id >= 0) {
                accumulate(adj, n.in[0].id,
                           conv2d_data_grad(n.in[1].value, g, n.attrs.stride, n.attrs.padding,
                                            n.in[0].value.shape()));
            }
            if (n.in[1].id >= 0) {
                accumulate(adj, n.in[1].id, conv2d(n.in[0].value, g, n.attrs.stride, n.attrs.padding));
            }
            return;
        }
        case Op::Relu: {
            Tensor mask(n.in[0].value.shape());
            for (std::size_t i = 0; i < mask.size(); ++i) {
                mask.at(i) = n.in[0].value.at(i) > 0.0 ? 1.0 : 0.0;
            }
            accumulate(adj, n.in[0].id, mul(g, mask));
            return;
        }
        case Op::Abs: {
            Tensor sign(n.in[0].value.shape());
            for (std::size_t i = 0; i < sign.size(); ++i) {
                const double v = n.in[0].value.at(i);
                sign.at(i) = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
            }
            accumulate(adj, n.in[0].id, mul(g, sign));
            return;
        }
        case Op::AvgPool2d: {
            accumulate(adj, n.in[0].id, avg_unpool2d(g, n.attrs.kernel, n.attrs.stride, n.attrs.in_shape));
            return;
        }
        case Op::AvgUnpool2d: {
            accumulate(adj, n.in[0].id, avg_pool2d(g, n.attrs.kernel, n.attrs.stride));
            return;
        }
        case Op::Reshape: {
            accumulate(adj, n.in[0].id, reshape(g, n.attrs.in_shape));
            return;
        }
        case Op::Broadcast: {
            accumulate(adj, n.in[0].id, reduce_sum_to(g, n.attrs.in_shape));
            return;
        }
        case Op::ReduceTo: {
            accumulate(adj, n.in[0].id, broadcast_to(g, n.attrs.in_shape));
            return;
        }
        case Op::SumAxis: {
            accumulate(adj, n.in[0].id, broadcast_to(g, n.attrs.in_shape));
            return;
        }
        case Op::Softmax: {
            const std::size_t last = n.out.rank() - 1;
            Tensor gy = mul(g, n.out);
            accumulate(adj, n.in[0].id, mul(n.out, sub(g, sum_axis(gy, last))));
            return;
        }
        case Op::LogSoftmax: {
            const std::size_t last = n.out.rank() - 1;
            Tensor p = exp(n.out);
            accumulate(adj, n.in[0].id, sub(g, mul(p, sum_axis(g, last))));
            return;
        }
        case Op::Exp: {
            accumulate(adj, n.in[0].id, mul(g, n.out));
            return;
        }
        case Op::Log: {
            accumulate(adj, n.in[0].id, div(g, n.in[0].value));
            return;
        }
        case Op::Square: {
            accumulate(adj, n.in[0].id, mul(mul(g, n.in[0].value), Tensor::scalar(2.0)));
            return;
        }
        case Op::SumAll: {
            accumulate(adj, n.in[0].id, broadcast_to(g, n.attrs.in_shape));
            return;
        }
        case Op::MeanAll: {
            const double inv = 1.0 / static_cast<double>(numel(n.attrs.in_shape));
            accumulate(adj, n.in[0].id, mul(broadcast_to(g, n.attrs.in_shape), Tensor::scalar(inv)));
            return;
        }
        case Op::SelectClasses: {
            accumulate(adj, n.in[0].id, scatter_classes(g, n.attrs.labels, n.attrs.num_classes));
            return;
        }
        case Op::ScatterClasses: {
            accumulate(adj, n.in[0].id, select_classes(g, n.attrs.labels));
            return;
        }
        case Op::StackScalars: {
            for (std::size_t i = 0; i < n.in.size(); ++i) {
                if (n.in[i].id < 0) continue;
                Tensor pick(Shape{n.in.size()}, 0.0);
                pick.at(i) = 1.0;
                accumulate(adj, n.in[i].id, reshape(sum(mul(g, pick)), n.in[i].value.shape()));
            }
            return;
        }
    }
    throw TapeError(std::string("backward: unsupported operation ") + op_name(n.op));
}

// =====================================================================
//  Second-order directional sweep (truncated second-order jets)
// =====================================================================

inline void Tape::jet_sweep(JetWorkspace& ws, std::size_t elem) const {
    // Direction: d/dt theta = e_elem, d2/dt2 theta = 0. Only the seed
    // one-hot needs maintenance; every live buffer is overwritten below.
    auto& seed = ws.d1[static_cast<std::size_t>(ws.leaf)];
    if (ws.last_elem != static_cast<std::size_t>(-1)) seed[ws.last_elem] = 0.0;
    seed[elem] = 1.0;
    ws.last_elem = elem;

    auto live = [&](const NodeInput& in, int which) {
        if (in.id < 0) return false;
        const auto id = static_cast<std::size_t>(in.id);
        if (!ws.active[id]) return false;
        return which == 1 ? ws.z1[id] == 0 : ws.z2[id] == 0;
    };
    auto comp = [&](const NodeInput& in, int which) -> const std::vector<double>& {
        if (!live(in, which)) return ws.zeros;
        return which == 1 ? ws.d1[static_cast<std::size_t>(in.id)]
                          : ws.d2[static_cast<std::size_t>(in.id)];
    };

    for (std::size_t i = static_cast<std::size_t>(ws.leaf) + 1; i < nodes_.size(); ++i) {
        if (!ws.active[i] || (ws.z1[i] && ws.z2[i])) continue;
        const TapeNode& n = nodes_[i];
        const bool want1 = !ws.z1[i];
        const bool want2 = !ws.z2[i];
        std::vector<double>& y1 = want1 ? ws.d1[i] : const_cast<std::vector<double>&>(ws.zeros);
        std::vector<double>& y2 = want2 ? ws.d2[i] : const_cast<std::vector<double>&>(ws.zeros);
        const std::vector<double>& yv = n.out.values();
        const Shape& osh = n.out.shape();
        const std::size_t osize = n.out.size();

        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Add:
            case Op::Sub: {
                const double sgn = n.op == Op::Add ? 1.0 : -1.0;
                if (want1) {
                    detail::broadcast_binary_kernel(comp(n.in[0], 1), n.in[0].value.shape(),
                                                    comp(n.in[1], 1), n.in[1].value.shape(), y1, osh,
                                                    [sgn](double x, double y) { return x + sgn * y; });
                }
                if (want2) {
                    detail::broadcast_binary_kernel(comp(n.in[0], 2), n.in[0].value.shape(),
                                                    comp(n.in[1], 2), n.in[1].value.shape(), y2, osh,
                                                    [sgn](double x, double y) { return x + sgn * y; });
                }
                break;
            }
            case Op::Mul: {
                const Shape& ash = n.in[0].value.shape();
                const Shape& bsh = n.in[1].value.shape();
                const auto& av = n.in[0].value.values();
                const auto& bv = n.in[1].value.values();
                std::vector<double> tmp(osize);
                auto mul_into = [&](const std::vector<double>& xa, const Shape& xash,
                                    const std::vector<double>& xb, const Shape& xbsh,
                                    std::vector<double>& dst) {
                    detail::broadcast_binary_kernel(xa, xash, xb, xbsh, dst, osh,
                                                    [](double x, double y) { return x * y; });
                };
                if (want1) {
                    mul_into(comp(n.in[0], 1), ash, bv, bsh, y1);
                    if (live(n.in[1], 1)) {
                        mul_into(av, ash, comp(n.in[1], 1), bsh, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y1[k] += tmp[k];
                    }
                }
                if (want2) {
                    mul_into(comp(n.in[0], 2), ash, bv, bsh, y2);
                    if (live(n.in[0], 1) && live(n.in[1], 1)) {
                        mul_into(comp(n.in[0], 1), ash, comp(n.in[1], 1), bsh, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y2[k] += 2.0 * tmp[k];
                    }
                    if (live(n.in[1], 2)) {
                        mul_into(av, ash, comp(n.in[1], 2), bsh, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y2[k] += tmp[k];
                    }
                }
                break;
            }
            case Op::Div: {
                // y = a/b:  y1 = (a1 - y*b1)/b,  y2 = (a2 - 2*y1*b1 - y*b2)/b
                const Shape& ash = n.in[0].value.shape();
                const Shape& bsh = n.in[1].value.shape();
                std::vector<double> b1e(osize), b2e(osize), be(osize), a1e(osize), a2e(osize);
                detail::broadcast_copy_kernel(comp(n.in[1], 1), bsh, b1e, osh);
                detail::broadcast_copy_kernel(comp(n.in[1], 2), bsh, b2e, osh);
                detail::broadcast_copy_kernel(n.in[1].value.values(), bsh, be, osh);
                detail::broadcast_copy_kernel(comp(n.in[0], 1), ash, a1e, osh);
                detail::broadcast_copy_kernel(comp(n.in[0], 2), ash, a2e, osh);
                for (std::size_t k = 0; k < osize; ++k) {
                    const double v1 = (a1e[k] - yv[k] * b1e[k]) / be[k];
                    if (want1) y1[k] = v1;
                    if (want2) y2[k] = (a2e[k] - 2.0 * v1 * b1e[k] - yv[k] * b2e[k]) / be[k];
                }
                break;
            }
            case Op::MatMul: {
                const std::size_t m = n.in[0].value.dim(0);
                const std::size_t kk = n.in[0].value.dim(1);
                const std::size_t nn = n.in[1].value.dim(1);
                const auto& av = n.in[0].value.values();
                const auto& bv = n.in[1].value.values();
                const bool a1_live = live(n.in[0], 1);
                const bool b1_live = live(n.in[1], 1);
                // Seed fast path: the weight's direction is a one-hot, so
                // A * e_(u,v) only fills column v with A's column u.
                if (want1 && !want2 && !a1_live && n.in[1].id == ws.leaf) {
                    const std::size_t u = elem / nn, v = elem % nn;
                    std::fill(y1.begin(), y1.end(), 0.0);
                    for (std::size_t r = 0; r < m; ++r) y1[r * nn + v] = av[r * kk + u];
                    break;
                }
                std::vector<double> tmp(osize);
                if (want1) {
                    std::fill(y1.begin(), y1.end(), 0.0);
                    if (a1_live) {
                        detail::matmul_kernel(comp(n.in[0], 1), m, kk, bv, nn, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y1[k] += tmp[k];
                    }
                    if (b1_live) {
                        detail::matmul_kernel(av, m, kk, comp(n.in[1], 1), nn, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y1[k] += tmp[k];
                    }
                }
                if (want2) {
                    std::fill(y2.begin(), y2.end(), 0.0);
                    if (live(n.in[0], 2)) {
                        detail::matmul_kernel(comp(n.in[0], 2), m, kk, bv, nn, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y2[k] += tmp[k];
                    }
                    if (live(n.in[1], 2)) {
                        detail::matmul_kernel(av, m, kk, comp(n.in[1], 2), nn, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y2[k] += tmp[k];
                    }
                    if (a1_live && b1_live) {
                        detail::matmul_kernel(comp(n.in[0], 1), m, kk, comp(n.in[1], 1), nn, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y2[k] += 2.0 * tmp[k];
                    }
                }
                break;
            }
            case Op::Transpose: {
                const std::size_t m = n.in[0].value.dim(0);
                const std::size_t nn = n.in[0].value.dim(1);
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < nn; ++c) {
                        if (want1) y1[c * m + r] = x1[r * nn + c];
                        if (want2) y2[c * m + r] = x2[r * nn + c];
                    }
                }
                break;
            }
            case Op::Conv2d:
            case Op::Conv2dDataGrad:
            case Op::Conv2dWeightGrad: {
                // All three are bilinear contractions of one trilinear form;
                // the jet rule mirrors Mul.
                const auto& av = n.in[0].value.values();
                const auto& bv = n.in[1].value.values();
                auto run = [&](const std::vector<double>& xa, const std::vector<double>& xb,
                               std::vector<double>& dst) {
                    detail::ConvDims d{};
                    switch (n.op) {
                        case Op::Conv2d:
                            d = detail::conv_dims(n.in[0].value.shape(), n.in[1].value.shape(),
                                                  n.attrs.stride, n.attrs.padding);
                            detail::conv_forward_kernel(xa, xb, dst, d);
                            break;
                        case Op::Conv2dDataGrad:
                            d = detail::conv_dims(n.attrs.in_shape, n.in[1].value.shape(),
                                                  n.attrs.stride, n.attrs.padding);
                            detail::conv_dgrad_kernel(xa, xb, dst, d);
                            break;
                        default:
                            d = detail::conv_dims(n.in[0].value.shape(), n.attrs.in_shape,
                                                  n.attrs.stride, n.attrs.padding);
                            detail::conv_wgrad_kernel(xa, xb, dst, d);
                            break;
                    }
                };
                std::vector<double> tmp(osize);
                if (want1) {
                    std::fill(y1.begin(), y1.end(), 0.0);
                    if (live(n.in[0], 1)) {
                        run(comp(n.in[0], 1), bv, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y1[k] += tmp[k];
                    }
                    if (live(n.in[1], 1)) {
                        run(av, comp(n.in[1], 1), tmp);
                        for (std::size_t k = 0; k < osize; ++k) y1[k] += tmp[k];
                    }
                }
                if (want2) {
                    std::fill(y2.begin(), y2.end(), 0.0);
                    if (live(n.in[0], 2)) {
                        run(comp(n.in[0], 2), bv, tmp);
                        for (std::size_t k = 0; k < osize; ++k) y2[k] += tmp[k];
                    }
                    if (live(n.in[1], 2)) {
                        run(av, comp(n.in[1], 2), tmp);
                        for (std::size_t k = 0; k < osize; ++k) y2[k] += tmp[k];
                    }
                    if (live(n.in[0], 1) && live(n.in[1], 1)) {
                        run(comp(n.in[0], 1), comp(n.in[1], 1), tmp);
                        for (std::size_t k = 0; k < osize; ++k) y2[k] += 2.0 * tmp[k];
                    }
                }
                break;
            }
            case Op::Relu: {
                // Second derivative of relu is taken as 0 everywhere.
                const auto& xv = n.in[0].value.values();
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                for (std::size_t k = 0; k < osize; ++k) {
                    const double m = xv[k] > 0.0 ? 1.0 : 0.0;
                    if (want1) y1[k] = m * x1[k];
                    if (want2) y2[k] = m * x2[k];
                }
                break;
            }
            case Op::Abs: {
                const auto& xv = n.in[0].value.values();
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                for (std::size_t k = 0; k < osize; ++k) {
                    const double m = xv[k] > 0.0 ? 1.0 : (xv[k] < 0.0 ? -1.0 : 0.0);
                    if (want1) y1[k] = m * x1[k];
                    if (want2) y2[k] = m * x2[k];
                }
                break;
            }
            case Op::AvgPool2d: {
                const auto d = detail::pool_dims(n.attrs.in_shape, n.attrs.kernel, n.attrs.stride);
                if (want1) detail::avg_pool_kernel(comp(n.in[0], 1), y1, d);
                if (want2) detail::avg_pool_kernel(comp(n.in[0], 2), y2, d);
                break;
            }
            case Op::AvgUnpool2d: {
                const auto d = detail::pool_dims(n.attrs.in_shape, n.attrs.kernel, n.attrs.stride);
                if (want1) detail::avg_unpool_kernel(comp(n.in[0], 1), y1, d);
                if (want2) detail::avg_unpool_kernel(comp(n.in[0], 2), y2, d);
                break;
            }
            case Op::Reshape:
            case Op::Broadcast:
            case Op::ReduceTo:
            case Op::SumAxis: {
                const Shape& ish = n.in[0].value.shape();
                auto pass = [&](const std::vector<double>& src, std::vector<double>& dst) {
                    if (n.op == Op::Reshape) {
                        std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(osize),
                                  dst.begin());
                    } else if (n.op == Op::Broadcast) {
                        detail::broadcast_copy_kernel(src, ish, dst, osh);
                    } else {
                        detail::reduce_sum_to_kernel(src, ish, dst, osh);
                    }
                };
                if (want1) pass(comp(n.in[0], 1), y1);
                if (want2) pass(comp(n.in[0], 2), y2);
                break;
            }
            case Op::Softmax: {
                const std::size_t cols = osh[osh.size() - 1];
                const std::size_t rows = osize / cols;
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                std::vector<double> o1row(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* p = &yv[r * cols];
                    const double* u1 = &x1[r * cols];
                    const double* u2 = &x2[r * cols];
                    double s1 = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) s1 += p[c] * u1[c];
                    for (std::size_t c = 0; c < cols; ++c) o1row[c] = p[c] * (u1[c] - s1);
                    if (want1) {
                        for (std::size_t c = 0; c < cols; ++c) y1[r * cols + c] = o1row[c];
                    }
                    if (want2) {
                        double s2 = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) s2 += o1row[c] * u1[c] + p[c] * u2[c];
                        for (std::size_t c = 0; c < cols; ++c) {
                            y2[r * cols + c] = o1row[c] * (u1[c] - s1) + p[c] * (u2[c] - s2);
                        }
                    }
                }
                break;
            }
            case Op::LogSoftmax: {
                const std::size_t cols = osh[osh.size() - 1];
                const std::size_t rows = osize / cols;
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* u1 = &x1[r * cols];
                    const double* u2 = &x2[r * cols];
                    const double* ylog = &yv[r * cols];
                    double s1 = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) s1 += std::exp(ylog[c]) * u1[c];
                    if (want1) {
                        for (std::size_t c = 0; c < cols; ++c) y1[r * cols + c] = u1[c] - s1;
                    }
                    if (want2) {
                        double s2 = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) {
                            const double p = std::exp(ylog[c]);
                            s2 += p * (u1[c] - s1) * u1[c] + p * u2[c];
                        }
                        for (std::size_t c = 0; c < cols; ++c) y2[r * cols + c] = u2[c] - s2;
                    }
                }
                break;
            }
            case Op::Exp: {
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                for (std::size_t k = 0; k < osize; ++k) {
                    if (want1) y1[k] = yv[k] * x1[k];
                    if (want2) y2[k] = yv[k] * (x2[k] + x1[k] * x1[k]);
                }
                break;
            }
            case Op::Log: {
                const auto& xv = n.in[0].value.values();
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                for (std::size_t k = 0; k < osize; ++k) {
                    const double r = x1[k] / xv[k];
                    if (want1) y1[k] = r;
                    if (want2) y2[k] = x2[k] / xv[k] - r * r;
                }
                break;
            }
            case Op::Square: {
                const auto& xv = n.in[0].value.values();
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                for (std::size_t k = 0; k < osize; ++k) {
                    if (want1) y1[k] = 2.0 * xv[k] * x1[k];
                    if (want2) y2[k] = 2.0 * (x1[k] * x1[k] + xv[k] * x2[k]);
                }
                break;
            }
            case Op::SumAll:
            case Op::MeanAll: {
                const double inv = n.op == Op::MeanAll
                                       ? 1.0 / static_cast<double>(numel(n.attrs.in_shape))
                                       : 1.0;
                if (want1) {
                    const auto& x1 = comp(n.in[0], 1);
                    double s1 = 0.0;
                    for (double v : x1) s1 += v;
                    y1[0] = s1 * inv;
                }
                if (want2) {
                    const auto& x2 = comp(n.in[0], 2);
                    double s2 = 0.0;
                    for (double v : x2) s2 += v;
                    y2[0] = s2 * inv;
                }
                break;
            }
            case Op::SelectClasses: {
                const std::size_t c = n.attrs.num_classes;
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                for (std::size_t r = 0; r < osize; ++r) {
                    const std::size_t off = r * c + static_cast<std::size_t>(n.attrs.labels[r]);
                    if (want1) y1[r] = x1[off];
                    if (want2) y2[r] = x2[off];
                }
                break;
            }
            case Op::ScatterClasses: {
                const std::size_t c = n.attrs.num_classes;
                const auto& x1 = comp(n.in[0], 1);
                const auto& x2 = comp(n.in[0], 2);
                if (want1) std::fill(y1.begin(), y1.end(), 0.0);
                if (want2) std::fill(y2.begin(), y2.end(), 0.0);
                for (std::size_t r = 0; r < n.in[0].value.size(); ++r) {
                    const std::size_t off = r * c + static_cast<std::size_t>(n.attrs.labels[r]);
                    if (want1) y1[off] = x1[r];
                    if (want2) y2[off] = x2[r];
                }
                break;
            }
            case Op::StackScalars: {
                for (std::size_t k = 0; k < n.in.size(); ++k) {
                    if (want1) y1[k] = comp(n.in[k], 1).empty() ? 0.0 : comp(n.in[k], 1)[0];
                    if (want2) y2[k] = comp(n.in[k], 2).empty() ? 0.0 : comp(n.in[k], 2)[0];
                }
                break;
            }
            default:
                throw TapeError(std::string("second-order sweep: unsupported operation ") +
                                op_name(n.op));
        }
    }
}

}  // namespace lwdl
