#include "dts/world_model.hpp"

#include <fstream>
#include <stdexcept>

namespace dts {

namespace {

std::vector<std::size_t> layer_widths(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
    std::vector<std::size_t> w;
    w.reserve(hidden.size() + 2);
    w.push_back(in);
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(out);
    return w;
}

constexpr char kModelMagic[8] = {'D', 'T', 'S', 'W', 'M', 'D', 'L', '1'};

} // namespace

WorldModel::WorldModel(const WorldModelConfig& cfg)
    : cfg_(cfg),
      encoder_("encoder", layer_widths(cfg.state_dim, cfg.encoder_hidden, cfg.latent_dim), true),
      transition_("transition", layer_widths(cfg.latent_dim + cfg.action_count, cfg.transition_hidden, cfg.latent_dim), true),
      reward_("reward", layer_widths(cfg.latent_dim + cfg.action_count, cfg.reward_hidden, 1), false),
      value_("value", layer_widths(cfg.latent_dim, cfg.value_hidden, 1), false) {}

WorldModel::WorldModel(const WorldModelConfig& cfg, std::uint64_t seed) : WorldModel(cfg) {
    Rng rng(seed);
    Rng enc_rng = rng.stream("encoder");
    Rng tr_rng = rng.stream("transition");
    Rng rw_rng = rng.stream("reward");
    Rng vl_rng = rng.stream("value");
    encoder_.init(params_, enc_rng);
    transition_.init(params_, tr_rng);
    reward_.init(params_, rw_rng);
    value_.init(params_, vl_rng);
    target_ = params_.subset("encoder.");
}

Tensor WorldModel::encode(Tape& tape, std::span<const double> state) const {
    if (state.size() != cfg_.state_dim)
        throw std::invalid_argument("encode: state has " + std::to_string(state.size()) +
                                    " dims, expected " + std::to_string(cfg_.state_dim));
    Tensor x({state.size()}, std::vector<double>(state.begin(), state.end()));
    return encoder_.forward(tape, params_, x);
}

Tensor WorldModel::target_encode(Tape& tape, std::span<const double> state) const {
    if (state.size() != cfg_.state_dim)
        throw std::invalid_argument("target_encode: state has " + std::to_string(state.size()) +
                                    " dims, expected " + std::to_string(cfg_.state_dim));
    Tensor x({state.size()}, std::vector<double>(state.begin(), state.end()));
    Tensor h = encoder_.forward(tape, target_, x, "target.");
    return tape.stop_gradient(h);
}

Tensor WorldModel::one_hot(Tape& tape, std::size_t action) const {
    if (action >= cfg_.action_count)
        throw std::invalid_argument("action " + std::to_string(action) + " out of range (|A|=" +
                                    std::to_string(cfg_.action_count) + ")");
    std::vector<double> v(cfg_.action_count, 0.0);
    v[action] = 1.0;
    return tape.constant(Tensor({cfg_.action_count}, std::move(v)));
}

Tensor WorldModel::with_action(Tape& tape, const Tensor& latent, std::size_t action) const {
    if (latent.shape().size() != 1 || latent.shape()[0] != cfg_.latent_dim)
        throw std::invalid_argument("latent shape " + shape_str(latent.shape()) + " does not match latent_dim " +
                                    std::to_string(cfg_.latent_dim));
    Tensor parts[] = {latent, one_hot(tape, action)};
    return tape.concat(parts);
}

Tensor WorldModel::transition(Tape& tape, const Tensor& latent, std::size_t action) const {
    return transition_.forward(tape, params_, with_action(tape, latent, action));
}

Tensor WorldModel::reward(Tape& tape, const Tensor& latent, std::size_t action) const {
    return reward_.forward(tape, params_, with_action(tape, latent, action));
}

Tensor WorldModel::value(Tape& tape, const Tensor& latent) const {
    return value_.forward(tape, params_, latent);
}

WorldModel::OneStepLookahead WorldModel::one_step_q(Tape& tape, std::span<const double> state) const {
    OneStepLookahead out;
    out.latent = encode(tape, state);
    std::vector<Tensor> qs;
    for (std::size_t a = 0; a < cfg_.action_count; ++a) {
        out.next_latent.push_back(transition(tape, out.latent, a));
        out.action_reward.push_back(reward(tape, out.latent, a));
        qs.push_back(tape.add(out.action_reward.back(), value(tape, out.next_latent.back())));
    }
    out.q = tape.concat(qs);
    return out;
}

void WorldModel::update_target(double alpha) {
    ema_update(target_, params_.subset("encoder."), alpha);
}

void WorldModel::save(std::ostream& out) const {
    out.write(kModelMagic, sizeof kModelMagic);
    auto write_u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
    write_u64(cfg_.state_dim);
    write_u64(cfg_.action_count);
    write_u64(cfg_.latent_dim);
    auto write_widths = [&](const std::vector<std::size_t>& w) {
        write_u64(w.size());
        for (std::size_t d : w) write_u64(d);
    };
    write_widths(cfg_.encoder_hidden);
    write_widths(cfg_.transition_hidden);
    write_widths(cfg_.reward_hidden);
    write_widths(cfg_.value_hidden);
    params_.save(out);
    target_.save(out);
}

WorldModel WorldModel::load(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::string(magic, 8) != std::string(kModelMagic, 8))
        throw std::runtime_error("world model checkpoint: bad magic");
    auto read_u64 = [&]() {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!in) throw std::runtime_error("world model checkpoint: truncated");
        return v;
    };
    WorldModelConfig cfg;
    cfg.state_dim = read_u64();
    cfg.action_count = read_u64();
    cfg.latent_dim = read_u64();
    auto read_widths = [&]() {
        std::vector<std::size_t> w(read_u64());
        for (auto& d : w) d = read_u64();
        return w;
    };
    cfg.encoder_hidden = read_widths();
    cfg.transition_hidden = read_widths();
    cfg.reward_hidden = read_widths();
    cfg.value_hidden = read_widths();
    WorldModel model(cfg);
    model.params_ = ParamStore::load(in);
    model.target_ = ParamStore::load(in);
    return model;
}

void WorldModel::save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    save(out);
}

WorldModel WorldModel::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    return load(in);
}

} // namespace dts
