#include "dts/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dts {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    s += ")";
    return s;
}

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Constant: return "constant";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::MatMul: return "matmul";
        case OpKind::Relu: return "relu";
        case OpKind::Tanh: return "tanh";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::MaxReduce: return "max_reduce";
        case OpKind::Softmax: return "softmax";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::LogSumExp: return "logsumexp";
        case OpKind::Square: return "square";
        case OpKind::Concat: return "concat";
        case OpKind::IndexSelect: return "index_select";
        case OpKind::StopGradient: return "stop_gradient";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_error(OpKind op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch " +
                                shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void shape_error(OpKind op, const Shape& a, const char* why) {
    throw std::invalid_argument(std::string(op_name(op)) + ": bad shape " +
                                shape_str(a) + " (" + why + ")");
}

// Dot product with four accumulators; fixed summation order per build.
double dot(const double* a, const double* b, std::size_t n) {
    double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        acc0 += a[j] * b[j];
        acc1 += a[j + 1] * b[j + 1];
        acc2 += a[j + 2] * b[j + 2];
        acc3 += a[j + 3] * b[j + 3];
    }
    for (; j < n; ++j) acc0 += a[j] * b[j];
    return (acc0 + acc1) + (acc2 + acc3);
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
        throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match buffer of " +
                                    std::to_string(data_.size()) + " elements");
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(Shape shape) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

const Shape& Tensor::shape() const {
    if (tape_) return tape_->node(node_).shape;
    return shape_;
}

const std::vector<double>& Tensor::data() const {
    if (tape_) return tape_->node(node_).value;
    return data_;
}

std::vector<double>& Tensor::mutable_data() {
    if (tape_) throw std::invalid_argument("Tensor: cannot mutate a taped tensor in place");
    return data_;
}

double Tensor::value() const {
    const auto& d = data();
    if (d.size() != 1)
        throw std::invalid_argument("Tensor::value: tensor of shape " + shape_str(shape()) + " is not scalar");
    return d[0];
}

// ---------------------------------------------------------------------------
// Tape basics. Node slots are recycled across clear() calls so a reused
// tape reaches a steady state with no per-op allocation.

TapeNode& Tape::alloc_node(OpKind kind, const Shape& shape, std::initializer_list<int> inputs) {
    if (live_ == nodes_.size()) nodes_.emplace_back();
    TapeNode& n = nodes_[live_++];
    n.kind = kind;
    n.shape.assign(shape.begin(), shape.end());
    n.value.resize(numel(shape));
    n.inputs.assign(inputs.begin(), inputs.end());
    n.aux.clear();
    return n;
}

Tensor Tape::wrap(const TapeNode& n) {
    Tensor t;
    t.tape_ = this;
    // deque blocks are not contiguous; derive the id from the live count
    t.node_ = static_cast<int>(live_) - 1;
    return t;
}

int Tape::ensure_on_tape(const Tensor& t) {
    if (t.on_tape()) {
        if (t.tape() != this)
            throw std::invalid_argument("tensor belongs to a different tape");
        return t.node();
    }
    TapeNode& n = alloc_node(OpKind::Constant, t.shape(), {});
    n.value.assign(t.data().begin(), t.data().end());
    return static_cast<int>(live_) - 1;
}

Tensor Tape::param(const std::string& name, const Tensor& value) {
    auto it = param_index_.find(name);
    if (it != param_index_.end()) {
        Tensor t;
        t.tape_ = this;
        t.node_ = it->second;
        return t;
    }
    TapeNode& n = alloc_node(OpKind::Leaf, value.shape(), {});
    n.value.assign(value.data().begin(), value.data().end());
    int id = static_cast<int>(live_) - 1;
    params_.emplace_back(name, id);
    param_index_.emplace(name, id);
    return wrap(n);
}

Tensor Tape::constant(const Tensor& value) {
    TapeNode& n = alloc_node(OpKind::Constant, value.shape(), {});
    n.value.assign(value.data().begin(), value.data().end());
    return wrap(n);
}

Tensor Tape::constant_scalar(double v) {
    TapeNode& n = alloc_node(OpKind::Constant, Shape{1}, {});
    n.value[0] = v;
    return wrap(n);
}

void Tape::clear() {
    live_ = 0;
    params_.clear();
    param_index_.clear();
    kink_margin_ = 1e300;
}

void Tape::note_margin(double m) {
    if (m < kink_margin_) kink_margin_ = m;
}

// ---------------------------------------------------------------------------
// Elementary ops

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error(OpKind::Add, a.shape(), b.shape());
    if (!a.on_tape() && !b.on_tape()) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
        return Tensor(a.shape(), std::move(out));
    }
    int ia = ensure_on_tape(a), ib = ensure_on_tape(b);
    TapeNode& n = alloc_node(OpKind::Add, node(ia).shape, {ia, ib});
    const auto& av = node(ia).value;
    const auto& bv = node(ib).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = av[i] + bv[i];
    return wrap(n);
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error(OpKind::Sub, a.shape(), b.shape());
    if (!a.on_tape() && !b.on_tape()) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
        return Tensor(a.shape(), std::move(out));
    }
    int ia = ensure_on_tape(a), ib = ensure_on_tape(b);
    TapeNode& n = alloc_node(OpKind::Sub, node(ia).shape, {ia, ib});
    const auto& av = node(ia).value;
    const auto& bv = node(ib).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = av[i] - bv[i];
    return wrap(n);
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error(OpKind::Mul, a.shape(), b.shape());
    if (!a.on_tape() && !b.on_tape()) {
        std::vector<double> out(a.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
        return Tensor(a.shape(), std::move(out));
    }
    int ia = ensure_on_tape(a), ib = ensure_on_tape(b);
    TapeNode& n = alloc_node(OpKind::Mul, node(ia).shape, {ia, ib});
    const auto& av = node(ia).value;
    const auto& bv = node(ib).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = av[i] * bv[i];
    return wrap(n);
}

namespace {

Shape matmul_shape(const Shape& sa, const Shape& sb) {
    if (sa.size() != 2) shape_error(OpKind::MatMul, sa, "lhs must be 2-d");
    if (sb.size() == 1) {
        if (sb[0] != sa[1]) shape_error(OpKind::MatMul, sa, sb);
        return {sa[0]};
    }
    if (sb.size() == 2) {
        if (sb[0] != sa[1]) shape_error(OpKind::MatMul, sa, sb);
        return {sa[0], sb[1]};
    }
    shape_error(OpKind::MatMul, sb, "rhs must be 1-d or 2-d");
}

void matmul_forward(const Shape& sa, const Shape& sb, const double* av, const double* bv, double* out) {
    std::size_t m = sa[0], k = sa[1];
    if (sb.size() == 1) {
        for (std::size_t i = 0; i < m; ++i) out[i] = dot(av + i * k, bv, k);
        return;
    }
    std::size_t nn = sb[1];
    std::fill(out, out + m * nn, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            double aij = av[i * k + j];
            const double* brow = bv + j * nn;
            double* orow = out + i * nn;
            for (std::size_t c = 0; c < nn; ++c) orow[c] += aij * brow[c];
        }
}

} // namespace

// (m,k) x (k,n) -> (m,n), or (m,k) x (k,) -> (m,).
Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    Shape out_shape = matmul_shape(a.shape(), b.shape());
    if (!a.on_tape() && !b.on_tape()) {
        std::vector<double> out(numel(out_shape));
        matmul_forward(a.shape(), b.shape(), a.data().data(), b.data().data(), out.data());
        return Tensor(std::move(out_shape), std::move(out));
    }
    int ia = ensure_on_tape(a), ib = ensure_on_tape(b);
    TapeNode& n = alloc_node(OpKind::MatMul, out_shape, {ia, ib});
    matmul_forward(node(ia).shape, node(ib).shape, node(ia).value.data(), node(ib).value.data(),
                   n.value.data());
    return wrap(n);
}

namespace {

template <typename F>
Tensor unary_constant(const Tensor& x, F&& f) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
    return Tensor(x.shape(), std::move(out));
}

} // namespace

Tensor Tape::relu(const Tensor& x) {
    double margin = std::numeric_limits<double>::infinity();
    for (double v : x.data()) margin = std::min(margin, std::fabs(v));
    if (x.size() > 0) note_margin(margin);
    if (!x.on_tape()) return unary_constant(x, [](double v) { return v > 0.0 ? v : 0.0; });
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::Relu, node(ix).shape, {ix});
    const auto& xv = node(ix).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return wrap(n);
}

Tensor Tape::tanh(const Tensor& x) {
    if (!x.on_tape()) return unary_constant(x, [](double v) { return std::tanh(v); });
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::Tanh, node(ix).shape, {ix});
    const auto& xv = node(ix).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::tanh(xv[i]);
    return wrap(n);
}

Tensor Tape::exp(const Tensor& x) {
    if (!x.on_tape()) return unary_constant(x, [](double v) { return std::exp(v); });
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::Exp, node(ix).shape, {ix});
    const auto& xv = node(ix).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::exp(xv[i]);
    return wrap(n);
}

Tensor Tape::log(const Tensor& x) {
    for (double v : x.data())
        if (!(v > 0.0)) throw std::domain_error("log: non-positive input " + std::to_string(v));
    if (!x.on_tape()) return unary_constant(x, [](double v) { return std::log(v); });
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::Log, node(ix).shape, {ix});
    const auto& xv = node(ix).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::log(xv[i]);
    return wrap(n);
}

Tensor Tape::square(const Tensor& x) {
    if (!x.on_tape()) return unary_constant(x, [](double v) { return v * v; });
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::Square, node(ix).shape, {ix});
    const auto& xv = node(ix).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = xv[i] * xv[i];
    return wrap(n);
}

Tensor Tape::stop_gradient(const Tensor& x) {
    if (!x.on_tape()) return Tensor(x.shape(), x.data());
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::StopGradient, node(ix).shape, {ix});
    n.value.assign(node(ix).value.begin(), node(ix).value.end());
    return wrap(n);
}

Tensor Tape::sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    if (!x.on_tape()) return Tensor::scalar(acc);
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::Sum, Shape{1}, {ix});
    n.value[0] = acc;
    return wrap(n);
}

Tensor Tape::mean(const Tensor& x) {
    if (x.size() == 0) shape_error(OpKind::Mean, x.shape(), "empty");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    acc /= static_cast<double>(x.size());
    if (!x.on_tape()) return Tensor::scalar(acc);
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::Mean, Shape{1}, {ix});
    n.value[0] = acc;
    return wrap(n);
}

Tensor Tape::max_reduce(const Tensor& x) {
    if (x.size() == 0) shape_error(OpKind::MaxReduce, x.shape(), "empty");
    const auto& xv = x.data();
    std::size_t arg = 0;
    for (std::size_t i = 1; i < xv.size(); ++i)
        if (xv[i] > xv[arg]) arg = i;   // strict: ties keep lowest index
    if (xv.size() > 1) {
        double second = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < xv.size(); ++i)
            if (i != arg && xv[i] > second) second = xv[i];
        note_margin(xv[arg] - second);
    }
    if (!x.on_tape()) return Tensor::scalar(xv[arg]);
    double best = xv[arg];
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::MaxReduce, Shape{1}, {ix});
    n.value[0] = best;
    n.aux.push_back(arg);
    return wrap(n);
}

namespace {

// Max-shifted exponentials shared by softmax/log_softmax/logsumexp.
void stable_exp(const std::vector<double>& x, std::vector<double>& e, double& max_x, double& sum_e) {
    max_x = x[0];
    for (double v : x)
        if (v > max_x) max_x = v;
    e.resize(x.size());
    sum_e = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(x[i] - max_x);
        sum_e += e[i];
    }
}

} // namespace

Tensor Tape::softmax(const Tensor& x) {
    if (x.size() == 0) shape_error(OpKind::Softmax, x.shape(), "empty");
    std::vector<double> e;
    double mx, se;
    stable_exp(x.data(), e, mx, se);
    for (double& v : e) v /= se;
    if (!x.on_tape()) return Tensor(x.shape(), std::move(e));
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::Softmax, node(ix).shape, {ix});
    n.value.assign(e.begin(), e.end());
    return wrap(n);
}

Tensor Tape::log_softmax(const Tensor& x) {
    if (x.size() == 0) shape_error(OpKind::LogSoftmax, x.shape(), "empty");
    std::vector<double> e;
    double mx, se;
    stable_exp(x.data(), e, mx, se);
    double lse = mx + std::log(se);
    if (!x.on_tape()) return unary_constant(x, [&](double v) { return v - lse; });
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::LogSoftmax, node(ix).shape, {ix});
    const auto& xv = node(ix).value;
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = xv[i] - lse;
    return wrap(n);
}

Tensor Tape::logsumexp(const Tensor& x) {
    if (x.size() == 0) shape_error(OpKind::LogSumExp, x.shape(), "empty");
    std::vector<double> e;
    double mx, se;
    stable_exp(x.data(), e, mx, se);
    double lse = mx + std::log(se);
    if (!x.on_tape()) return Tensor::scalar(lse);
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::LogSumExp, Shape{1}, {ix});
    n.value[0] = lse;
    return wrap(n);
}

// 1-d concatenation.
Tensor Tape::concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    std::size_t total = 0;
    bool taped = false;
    for (const Tensor& p : parts) {
        if (p.shape().size() != 1) shape_error(OpKind::Concat, p.shape(), "inputs must be 1-d");
        total += p.size();
        taped = taped || p.on_tape();
    }
    if (!taped) {
        std::vector<double> out;
        out.reserve(total);
        for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
        return Tensor(Shape{total}, std::move(out));
    }
    concat_scratch_.clear();
    for (const Tensor& p : parts) concat_scratch_.push_back(ensure_on_tape(p));
    if (live_ == nodes_.size()) nodes_.emplace_back();
    TapeNode& n = nodes_[live_++];
    n.kind = OpKind::Concat;
    n.shape.assign({total});
    n.value.resize(total);
    n.inputs.assign(concat_scratch_.begin(), concat_scratch_.end());
    n.aux.clear();
    std::size_t off = 0;
    for (int id : n.inputs) {
        const auto& pv = node(id).value;
        std::copy(pv.begin(), pv.end(), n.value.begin() + static_cast<std::ptrdiff_t>(off));
        off += pv.size();
    }
    return wrap(n);
}

Tensor Tape::index_select(const Tensor& x, std::span<const std::size_t> indices) {
    if (x.shape().size() != 1) shape_error(OpKind::IndexSelect, x.shape(), "input must be 1-d");
    for (std::size_t idx : indices)
        if (idx >= x.size())
            throw std::invalid_argument("index_select: index " + std::to_string(idx) +
                                        " out of range for " + shape_str(x.shape()));
    if (!x.on_tape()) {
        std::vector<double> out(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) out[i] = x.data()[indices[i]];
        return Tensor(Shape{indices.size()}, std::move(out));
    }
    int ix = x.node();
    TapeNode& n = alloc_node(OpKind::IndexSelect, Shape{indices.size()}, {ix});
    n.aux.assign(indices.begin(), indices.end());
    const auto& xv = node(ix).value;
    for (std::size_t i = 0; i < indices.size(); ++i) n.value[i] = xv[indices[i]];
    return wrap(n);
}

// ---------------------------------------------------------------------------
// Backward

GradientMap Tape::backward(const Tensor& loss) {
    if (!loss.on_tape() || loss.tape() != this)
        throw std::invalid_argument("backward: loss is not on this tape");
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));

    const int top = loss.node();
    for (int i = 0; i <= top; ++i) {
        TapeNode& n = nodes_[static_cast<std::size_t>(i)];
        n.grad.assign(n.value.size(), 0.0);
    }
    nodes_[static_cast<std::size_t>(top)].grad[0] = 1.0;

    for (int id = top; id >= 0; --id) {
        const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
        if (n.inputs.empty()) continue;

        auto in = [&](std::size_t k) -> TapeNode& { return nodes_[static_cast<std::size_t>(n.inputs[k])]; };
        switch (n.kind) {
            case OpKind::Add: {
                TapeNode& a = in(0);
                TapeNode& b = in(1);
                for (std::size_t i = 0; i < n.grad.size(); ++i) {
                    a.grad[i] += n.grad[i];
                    b.grad[i] += n.grad[i];
                }
                break;
            }
            case OpKind::Sub: {
                TapeNode& a = in(0);
                TapeNode& b = in(1);
                for (std::size_t i = 0; i < n.grad.size(); ++i) {
                    a.grad[i] += n.grad[i];
                    b.grad[i] -= n.grad[i];
                }
                break;
            }
            case OpKind::Mul: {
                TapeNode& a = in(0);
                TapeNode& b = in(1);
                for (std::size_t i = 0; i < n.grad.size(); ++i) {
                    a.grad[i] += n.grad[i] * b.value[i];
                    b.grad[i] += n.grad[i] * a.value[i];
                }
                break;
            }
            case OpKind::MatMul: {
                TapeNode& a = in(0);
                TapeNode& b = in(1);
                std::size_t m = a.shape[0], k = a.shape[1];
                if (b.shape.size() == 1) {
                    const double* bv = b.value.data();
                    const double* av = a.value.data();
                    for (std::size_t i = 0; i < m; ++i) {
                        double gi = n.grad[i];
                        if (gi == 0.0) continue;
                        double* arow = a.grad.data() + i * k;
                        const double* aval = av + i * k;
                        double* bg = b.grad.data();
                        for (std::size_t j = 0; j < k; ++j) {
                            arow[j] += gi * bv[j];
                            bg[j] += gi * aval[j];
                        }
                    }
                } else {
                    std::size_t nn = b.shape[1];
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                            double acc = 0.0;
                            for (std::size_t c = 0; c < nn; ++c)
                                acc += n.grad[i * nn + c] * b.value[j * nn + c];
                            a.grad[i * k + j] += acc;
                        }
                    for (std::size_t j = 0; j < k; ++j)
                        for (std::size_t c = 0; c < nn; ++c) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < m; ++i)
                                acc += a.value[i * k + j] * n.grad[i * nn + c];
                            b.grad[j * nn + c] += acc;
                        }
                }
                break;
            }
            case OpKind::Relu: {
                TapeNode& x = in(0);
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    if (x.value[i] > 0.0) x.grad[i] += n.grad[i];
                break;
            }
            case OpKind::Tanh: {
                TapeNode& x = in(0);
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    x.grad[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
                break;
            }
            case OpKind::Exp: {
                TapeNode& x = in(0);
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    x.grad[i] += n.grad[i] * n.value[i];
                break;
            }
            case OpKind::Log: {
                TapeNode& x = in(0);
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    x.grad[i] += n.grad[i] / x.value[i];
                break;
            }
            case OpKind::Sum: {
                TapeNode& x = in(0);
                for (std::size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += n.grad[0];
                break;
            }
            case OpKind::Mean: {
                TapeNode& x = in(0);
                double g = n.grad[0] / static_cast<double>(x.grad.size());
                for (std::size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += g;
                break;
            }
            case OpKind::MaxReduce: {
                TapeNode& x = in(0);
                x.grad[n.aux[0]] += n.grad[0];
                break;
            }
            case OpKind::Softmax: {
                TapeNode& x = in(0);
                double dotp = 0.0;
                for (std::size_t i = 0; i < n.grad.size(); ++i) dotp += n.grad[i] * n.value[i];
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    x.grad[i] += n.value[i] * (n.grad[i] - dotp);
                break;
            }
            case OpKind::LogSoftmax: {
                TapeNode& x = in(0);
                double gsum = 0.0;
                for (double g : n.grad) gsum += g;
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    x.grad[i] += n.grad[i] - std::exp(n.value[i]) * gsum;
                break;
            }
            case OpKind::LogSumExp: {
                TapeNode& x = in(0);
                for (std::size_t i = 0; i < x.grad.size(); ++i)
                    x.grad[i] += n.grad[0] * std::exp(x.value[i] - n.value[0]);
                break;
            }
            case OpKind::Square: {
                TapeNode& x = in(0);
                for (std::size_t i = 0; i < n.grad.size(); ++i)
                    x.grad[i] += n.grad[i] * 2.0 * x.value[i];
                break;
            }
            case OpKind::Concat: {
                std::size_t off = 0;
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    TapeNode& p = in(k);
                    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[off + i];
                    off += p.grad.size();
                }
                break;
            }
            case OpKind::IndexSelect: {
                TapeNode& x = in(0);
                for (std::size_t i = 0; i < n.aux.size(); ++i) x.grad[n.aux[i]] += n.grad[i];
                break;
            }
            case OpKind::StopGradient:
            case OpKind::Leaf:
            case OpKind::Constant:
                break;
        }
    }

    GradientMap grads;
    for (const auto& [name, id] : params_) {
        const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
        if (id <= top && !n.grad.empty())
            grads[name] = n.grad;
        else
            grads[name] = std::vector<double>(n.value.size(), 0.0);
    }
    return grads;
}

std::span<const double> Tape::grad(const std::string& name) const {
    auto it = param_index_.find(name);
    if (it == param_index_.end())
        throw std::invalid_argument("grad: unknown parameter " + name);
    return nodes_[static_cast<std::size_t>(it->second)].grad;
}

} // namespace dts
