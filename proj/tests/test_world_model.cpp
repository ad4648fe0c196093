#include "dts/world_model.hpp"
#include "test_util.hpp"

#include "doctest.h"

#include <cmath>
#include <sstream>

using namespace dts;

namespace {

WorldModelConfig tiny_config() {
    WorldModelConfig cfg;
    cfg.state_dim = 5;
    cfg.action_count = 3;
    cfg.latent_dim = 4;
    cfg.encoder_hidden = {8};
    cfg.transition_hidden = {8};
    cfg.reward_hidden = {8};
    cfg.value_hidden = {8};
    return cfg;
}

std::vector<double> random_state(Rng& rng, std::size_t dim) {
    std::vector<double> s(dim);
    for (auto& v : s) v = rng.uniform(-1, 1);
    return s;
}

} // namespace

TEST_CASE("latent range invariant over 1000 random inputs") {
    WorldModel model(tiny_config(), 42);
    Rng rng(1);
    Tape tape;
    for (int i = 0; i < 1000; ++i) {
        tape.clear();
        auto s = random_state(rng, 5);
        Tensor h = model.encode(tape, s);
        for (double v : h.data()) CHECK(std::fabs(v) < 1.0);
        Tensor h2 = model.transition(tape, h, rng.uniform_index(3));
        for (double v : h2.data()) CHECK(std::fabs(v) < 1.0);
        Tensor ht = model.target_encode(tape, s);
        for (double v : ht.data()) CHECK(std::fabs(v) < 1.0);
    }
}

TEST_CASE("encode is deterministic under fixed parameters") {
    WorldModel model(tiny_config(), 7);
    std::vector<double> s{0.1, -0.4, 0.9, 0.0, -0.7};
    Tape t1, t2;
    CHECK(model.encode(t1, s).data() == model.encode(t2, s).data());
}

TEST_CASE("zeroed final encoder layer maps everything to the origin") {
    WorldModel model(tiny_config(), 7);
    for (double& v : model.params().get("encoder.w1").mutable_data()) v = 0.0;
    for (double& v : model.params().get("encoder.b1").mutable_data()) v = 0.0;
    Tape tape;
    Tensor h = model.encode(tape, std::vector<double>{1, 2, 3, 4, 5});
    for (double v : h.data()) CHECK(v == 0.0);
}

TEST_CASE("encode rejects wrong dimensionality") {
    WorldModel model(tiny_config(), 7);
    Tape tape;
    CHECK_THROWS_AS(model.encode(tape, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST_CASE("transition rejects out-of-range actions") {
    WorldModel model(tiny_config(), 7);
    Tape tape;
    Tensor h = model.encode(tape, std::vector<double>{0, 0, 0, 0, 0});
    CHECK_THROWS_AS(model.transition(tape, h, 3), std::invalid_argument);
}

TEST_CASE("distinct actions give distinct successor latents") {
    WorldModel model(tiny_config(), 99);
    Rng rng(2);
    Tape tape;
    Tensor h = model.encode(tape, random_state(rng, 5));
    Tensor a0 = model.transition(tape, h, 0);
    Tensor a1 = model.transition(tape, h, 1);
    CHECK(a0.data() != a1.data());
}

TEST_CASE("reward and value heads: zeroed output layer gives zero") {
    WorldModel model(tiny_config(), 7);
    for (double& v : model.params().get("reward.w1").mutable_data()) v = 0.0;
    for (double& v : model.params().get("value.w1").mutable_data()) v = 0.0;
    Tape tape;
    Tensor h = model.encode(tape, std::vector<double>{0.2, 0.1, -0.3, 0.7, 0.5});
    CHECK(model.reward(tape, h, 1).value() == 0.0);
    CHECK(model.value(tape, h).value() == 0.0);
}

TEST_CASE("submodule gradients match finite differences") {
    WorldModel model(tiny_config(), 12);
    Rng rng(3);
    auto s = random_state(rng, 5);

    auto check = [&](auto build) {
        Tape tape;
        GradientMap autodiff = tape.backward(build(tape, model));
        GradientMap fd = dts::testing::finite_difference(
            model.params(),
            [&](const ParamStore&) {
                Tape t;
                return build(t, model).value();
            },
            1e-5);
        // params absent from the graph are unreachable: gradient zero
        double worst = 0.0;
        for (const auto& [name, gfd] : fd) {
            auto it = autodiff.find(name);
            for (std::size_t i = 0; i < gfd.size(); ++i) {
                double ga = (it == autodiff.end()) ? 0.0 : it->second[i];
                worst = std::max(worst, dts::testing::rel_err(ga, gfd[i]));
            }
        }
        CHECK(worst < 1e-5);
    };

    check([&](Tape& t, const WorldModel& m) { return t.sum(t.square(m.transition(t, m.encode(t, s), 1))); });
    check([&](Tape& t, const WorldModel& m) { return m.reward(t, m.encode(t, s), 2); });
    check([&](Tape& t, const WorldModel& m) { return m.value(t, m.encode(t, s)); });
}

TEST_CASE("one-step lookahead is differentiable end to end") {
    // pick a seed whose graph is comfortably away from relu kinks, so the
    // eps=1e-5 finite-difference probe cannot straddle one
    for (std::uint64_t seed = 21;; ++seed) {
        WorldModel model(tiny_config(), seed);
        Rng rng(4);
        auto s = random_state(rng, 5);
        auto build = [&](Tape& t) {
            auto la = model.one_step_q(t, s);
            return t.sum(t.square(la.q));
        };
        Tape tape;
        GradientMap autodiff = tape.backward(build(tape));
        if (tape.kink_margin() < 1e-3) continue;
        GradientMap fd = dts::testing::finite_difference(
            model.params(), [&](const ParamStore&) { Tape t; return build(t).value(); }, 1e-5);
        CHECK(dts::testing::max_rel_err(autodiff, fd, 1e-5) < 1e-5);
        break;
    }
}

TEST_CASE("target encoder equals online encoder after alpha=0 update") {
    WorldModel model(tiny_config(), 31);
    Rng rng(6);
    // push the online encoder away from the target copy
    for (double& v : model.params().get("encoder.w0").mutable_data()) v += 0.05;
    model.update_target(0.0);
    auto s = random_state(rng, 5);
    Tape tape;
    CHECK(model.encode(tape, s).data() == model.target_encode(tape, s).data());
}

TEST_CASE("no gradient reaches the target encoder path") {
    WorldModel model(tiny_config(), 31);
    Rng rng(8);
    // desynchronize theta and theta' so the consistency-style loss is nonzero
    for (double& v : model.params().get("encoder.w0").mutable_data()) v += 0.1;
    auto s = random_state(rng, 5);
    Tape tape;
    Tensor ht = model.target_encode(tape, s);
    Tensor h = model.encode(tape, s);
    GradientMap g = tape.backward(tape.sum(tape.square(tape.sub(h, ht))));
    for (const auto& [name, grad] : g) {
        if (name.rfind("target.", 0) == 0)
            for (double v : grad) CHECK(v == 0.0);
    }
    // while the online encoder does receive gradient
    double total = 0.0;
    for (double v : g.at("encoder.w0")) total += std::fabs(v);
    CHECK(total > 0.0);
}

TEST_CASE("model checkpoint round trip preserves behaviour") {
    WorldModel model(tiny_config(), 55);
    std::ostringstream out;
    model.save(out);
    std::istringstream in(out.str());
    WorldModel loaded = WorldModel::load(in);
    Rng rng(9);
    auto s = random_state(rng, 5);
    Tape t1, t2;
    CHECK(model.encode(t1, s).data() == loaded.encode(t2, s).data());
    std::ostringstream out2;
    loaded.save(out2);
    CHECK(out.str() == out2.str());
}
