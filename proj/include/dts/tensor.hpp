#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dts {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind : std::uint8_t {
    Leaf,        // parameter leaf, named
    Constant,    // constant leaf
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Tanh,
    Exp,
    Log,
    Sum,
    Mean,
    MaxReduce,
    Softmax,
    LogSoftmax,
    LogSumExp,
    Square,
    Concat,
    IndexSelect,
    StopGradient,
};

const char* op_name(OpKind kind);

class Tape;

// Value handle. A Tensor is either a free-standing constant (owns its
// buffer) or a handle to a node on a tape (the node owns the buffer).
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);

    const Shape& shape() const;
    const std::vector<double>& data() const;
    // In-place mutation; only valid for tensors not living on a tape.
    std::vector<double>& mutable_data();
    std::size_t size() const { return numel(shape()); }

    // Scalar convenience; requires size() == 1.
    double value() const;

    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

private:
    friend class Tape;
    Shape shape_;
    std::vector<double> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

// Parameter-name -> gradient buffer, ordered by name for determinism.
using GradientMap = std::map<std::string, std::vector<double>>;

// One recorded operation: forward value plus everything the adjoint needs.
struct TapeNode {
    OpKind kind;
    Shape shape;
    std::vector<double> value;
    std::vector<int> inputs;
    std::vector<std::size_t> aux;   // op-specific (argmax index, selected indices)
    std::vector<double> grad;       // allocated during backward
};

// Append-only record of a dynamically built computation graph. Node ids are
// topologically ordered by construction; backward() sweeps them in strictly
// reverse insertion order. Cleared between training steps; parameters are
// re-registered as leaves each time.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Register a named parameter leaf. Repeated registration of the same
    // name returns the original node.
    Tensor param(const std::string& name, const Tensor& value);

    // Register a constant leaf (participates in the graph, receives no
    // gradient of its own and is not reported in GradientMap).
    Tensor constant(const Tensor& value);
    Tensor constant_scalar(double v);

    // Reverse sweep from a scalar loss. Returns gradients for every
    // registered parameter leaf; parameters not reachable from the loss
    // get zero buffers. May be called repeatedly on a growing tape.
    GradientMap backward(const Tensor& loss);

    // Gradient of one registered parameter after the last backward().
    std::span<const double> grad(const std::string& name) const;

    void clear();
    std::size_t size() const { return live_; }
    const TapeNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    // Smallest distance to a non-smooth point (relu kink, max tie margin)
    // seen since the last clear(). Used by gradient checks to skip
    // finite-difference probes that straddle a kink.
    double kink_margin() const { return kink_margin_; }

    // Elementary ops. Mixed constant/taped inputs are allowed; constants
    // are auto-registered. Ops with only constant inputs return constants.
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor relu(const Tensor& x);
    Tensor tanh(const Tensor& x);
    Tensor exp(const Tensor& x);
    Tensor log(const Tensor& x);
    Tensor sum(const Tensor& x);
    Tensor mean(const Tensor& x);
    Tensor max_reduce(const Tensor& x);
    Tensor softmax(const Tensor& x);
    Tensor log_softmax(const Tensor& x);
    Tensor logsumexp(const Tensor& x);
    Tensor square(const Tensor& x);
    Tensor concat(std::span<const Tensor> parts);
    Tensor index_select(const Tensor& x, std::span<const std::size_t> indices);
    Tensor stop_gradient(const Tensor& x);

private:
    friend class Tensor;
    TapeNode& alloc_node(OpKind kind, const Shape& shape, std::initializer_list<int> inputs);
    int ensure_on_tape(const Tensor& t);
    Tensor wrap(const TapeNode& n);
    void note_margin(double m);

    // deque keeps node references valid as the tape grows; slots beyond
    // live_ are recycled after clear() so reuse allocates nothing
    std::deque<TapeNode> nodes_;
    std::size_t live_ = 0;
    std::vector<int> concat_scratch_;
    std::vector<std::pair<std::string, int>> params_;   // registration order
    std::unordered_map<std::string, int> param_index_;
    double kink_margin_ = 1e300;
};

} // namespace dts
