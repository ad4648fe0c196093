#pragma once

#include "dts/rng.hpp"
#include "dts/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace dts {

// Named fp64 parameter tensors with stable ordering plus per-parameter
// Adam state. Checkpoint round-trips are byte-identical.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        std::vector<double> adam_m, adam_v;
    };

    Tensor& add(const std::string& name, Tensor value);
    bool has(const std::string& name) const;
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    std::vector<std::string> names() const;
    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }

    // Copy of every entry whose name starts with `prefix` (Adam state
    // excluded; the subset is a fresh store).
    ParamStore subset(const std::string& prefix) const;

    // Standard Adam with bias correction, applied in place. Gradients
    // missing from the map are treated as zero; extra keys are ignored.
    // Returns false (and applies nothing) if any gradient is non-finite.
    bool adam_step(const GradientMap& grads, double lr, double beta1, double beta2, double eps);
    std::int64_t adam_steps() const { return adam_step_count_; }

    void save(std::ostream& out) const;
    void save_file(const std::string& path) const;
    static ParamStore load(std::istream& in);
    static ParamStore load_file(const std::string& path);

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::int64_t adam_step_count_ = 0;
};

// target <- alpha * target + (1 - alpha) * online, per parameter.
// Requires identical name sets.
void ema_update(ParamStore& target, const ParamStore& online, double alpha);

// Dense ReLU network. Parameters live in a ParamStore under
// "<prefix>.w<i>" / "<prefix>.b<i>"; forward registers them as tape leaves.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::string prefix, std::vector<std::size_t> widths, bool output_tanh);

    // Weights ~ uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero.
    void init(ParamStore& store, Rng& rng) const;

    Tensor forward(Tape& tape, const ParamStore& store, const Tensor& x,
                   const std::string& param_prefix = "") const;

    std::size_t input_dim() const { return widths_.front(); }
    std::size_t output_dim() const { return widths_.back(); }
    const std::vector<std::size_t>& widths() const { return widths_; }
    const std::string& prefix() const { return prefix_; }

private:
    std::string prefix_;
    std::vector<std::size_t> widths_;
    bool output_tanh_ = false;
};

} // namespace dts
