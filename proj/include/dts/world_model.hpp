#pragma once

#include "dts/nn.hpp"

#include <iosfwd>
#include <span>

namespace dts {

struct WorldModelConfig {
    std::size_t state_dim = 404;
    std::size_t action_count = 4;
    std::size_t latent_dim = 16;
    std::vector<std::size_t> encoder_hidden{64, 64};
    std::vector<std::size_t> transition_hidden{64};
    std::vector<std::size_t> reward_hidden{64};
    std::vector<std::size_t> value_hidden{64};
};

// Encoder/transition/reward/value submodules plus an EMA-lagged target
// encoder. Latents are tanh-normalized, so every component lies in (-1,1).
// Actions enter the transition and reward networks as one-hot concatenation.
class WorldModel {
public:
    WorldModel(const WorldModelConfig& cfg, std::uint64_t seed);

    Tensor encode(Tape& tape, std::span<const double> state) const;
    Tensor transition(Tape& tape, const Tensor& latent, std::size_t action) const;
    Tensor reward(Tape& tape, const Tensor& latent, std::size_t action) const;
    Tensor value(Tape& tape, const Tensor& latent) const;

    // Target-encoder path: uses the EMA parameter copy and wraps the
    // output in stop_gradient.
    Tensor target_encode(Tape& tape, std::span<const double> state) const;

    // Q(s,a) = reward(h,a) + value(transition(h,a)) for every action.
    // Shares the encoded latent and exposes the per-action pieces so
    // auxiliary losses can reuse them.
    struct OneStepLookahead {
        Tensor latent;
        std::vector<Tensor> next_latent;
        std::vector<Tensor> action_reward;
        Tensor q;   // (action_count,)
    };
    OneStepLookahead one_step_q(Tape& tape, std::span<const double> state) const;

    // theta' <- alpha * theta' + (1 - alpha) * theta, encoder only.
    void update_target(double alpha);

    const WorldModelConfig& config() const { return cfg_; }
    std::size_t action_count() const { return cfg_.action_count; }
    std::size_t latent_dim() const { return cfg_.latent_dim; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    ParamStore& target_params() { return target_; }
    const ParamStore& target_params() const { return target_; }

    void save(std::ostream& out) const;
    void save_file(const std::string& path) const;
    static WorldModel load(std::istream& in);
    static WorldModel load_file(const std::string& path);

private:
    WorldModel(const WorldModelConfig& cfg);   // uninitialized, for load()
    Tensor one_hot(Tape& tape, std::size_t action) const;
    Tensor with_action(Tape& tape, const Tensor& latent, std::size_t action) const;

    WorldModelConfig cfg_;
    Mlp encoder_, transition_, reward_, value_;
    ParamStore params_;
    ParamStore target_;   // encoder.* copies
};

} // namespace dts
