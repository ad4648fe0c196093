#include "dts/losses.hpp"
#include "test_util.hpp"

#include "doctest.h"

#include <cmath>

using namespace dts;

namespace {

WorldModelConfig micro_config(std::size_t actions = 3) {
    WorldModelConfig cfg;
    cfg.state_dim = 2;
    cfg.action_count = actions;
    cfg.latent_dim = 2;
    cfg.encoder_hidden = {4};
    cfg.transition_hidden = {4};
    cfg.reward_hidden = {4};
    cfg.value_hidden = {4};
    return cfg;
}

} // namespace

TEST_CASE("q_loss values and gradient") {
    Tape tape;
    Tensor q = tape.param("q", Tensor({2}, {1.0, 0.0}));
    CHECK(q_loss(tape, q, 0, 1.0).value() == 0.0);
    CHECK(q_loss(tape, q, 1, 2.0).value() == 4.0);
    GradientMap g = tape.backward(q_loss(tape, q, 1, 2.0));
    CHECK(g.at("q")[1] == doctest::Approx(2.0 * (0.0 - 2.0)).epsilon(1e-15));
    CHECK(g.at("q")[0] == 0.0);
}

TEST_CASE("cql_loss values") {
    Tape tape;
    Tensor q0 = tape.constant(Tensor({2}, {0.0, 0.0}));
    CHECK(cql_loss(tape, q0, 0).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Tensor q1 = tape.constant(Tensor({2}, {10.0, -10.0}));
    CHECK(cql_loss(tape, q1, 0).value() == doctest::Approx(0.0).epsilon(3e-9));
    // always nonnegative: logsumexp dominates the selected entry
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> v(4);
        for (auto& x : v) x = rng.uniform(-3, 3);
        Tensor q = tape.constant(Tensor({4}, v));
        CHECK(cql_loss(tape, q, rng.uniform_index(4)).value() >= 0.0);
    }
}

TEST_CASE("transition consistency loss is zero for a hand-set identity model") {
    // 1-dim latent; encoder and transition wired so T(E(s),a) == E'(s_next)
    WorldModelConfig cfg;
    cfg.state_dim = 1;
    cfg.action_count = 1;
    cfg.latent_dim = 1;
    cfg.encoder_hidden = {1};
    cfg.transition_hidden = {1};
    cfg.reward_hidden = {1};
    cfg.value_hidden = {1};
    WorldModel model(cfg, 0);
    auto set = [&](const std::string& name, std::vector<double> v) {
        model.params().get(name).mutable_data() = v;
    };
    // encoder: h = tanh(relu(s)); transition: h' = tanh(relu(h)) with the
    // action input weight zeroed
    set("encoder.w0", {1.0});
    set("encoder.b0", {0.0});
    set("encoder.w1", {1.0});
    set("encoder.b1", {0.0});
    set("transition.w0", {1.0, 0.0});
    set("transition.b0", {0.0});
    set("transition.w1", {1.0});
    set("transition.b1", {0.0});
    model.update_target(0.0);

    // choose s_next so that E'(s_next) = T(E(s), 0) exactly:
    // E(s)=tanh(s) for s>=0; T(h)=tanh(h); need tanh(s_next)=tanh(tanh(s))
    double s = 0.7;
    double s_next = std::tanh(s);
    Tape tape;
    Tensor loss = transition_consistency_loss(tape, model, std::vector<double>{s}, 0,
                                              std::vector<double>{s_next});
    CHECK(loss.value() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("transition consistency loss is nonnefative and ignores target parameters") {
    WorldModel model(micro_config(), 3);
    Rng rng(2);
    std::vector<double> s{0.3, -0.4}, s2{0.1, 0.8};
    Tape tape;
    Tensor loss = transition_consistency_loss(tape, model, s, 1, s2);
    CHECK(loss.value() >= 0.0);
    GradientMap g = tape.backward(loss);
    for (const auto& [name, grad] : g)
        if (name.rfind("target.", 0) == 0)
            for (double v : grad) CHECK(v == 0.0);
}

TEST_CASE("reward prediction loss: exact match, nonnegativity, gradient") {
    Tape tape;
    Tensor pred = tape.param("r", Tensor::scalar(0.25));
    CHECK(reward_prediction_from(tape, pred, 0.25).value() == 0.0);
    CHECK(reward_prediction_from(tape, pred, -1.0).value() > 0.0);
    GradientMap g = tape.backward(reward_prediction_from(tape, pred, -0.75));
    CHECK(g.at("r")[0] == doctest::Approx(2.0 * (0.25 + 0.75)).epsilon(1e-15));
}

TEST_CASE("weight pattern enforcement per method") {
    LossWeights all{1.0, 0.5, 1.0, 1.0};
    CHECK_THROWS_AS(validate_weights(Method::ModelFree, all), std::invalid_argument);
    CHECK_THROWS_AS(validate_weights(Method::TreeQn, all), std::invalid_argument);
    CHECK_NOTHROW(validate_weights(Method::Dts, all));
    CHECK_NOTHROW(validate_weights(Method::DecoupledSearch, all));
    CHECK_NOTHROW(validate_weights(Method::ModelFree, LossWeights{1.0, 0.5, 0.0, 0.0}));
    CHECK_NOTHROW(validate_weights(Method::TreeQn, LossWeights{1.0, 0.5, 0.0, 1.0}));
}

TEST_CASE("combined loss: zero weights give zero") {
    WorldModel model(micro_config(), 4);
    Tape tape;
    std::vector<BatchSample> batch(2);
    batch[0] = {{0.1, 0.2}, {0.3, 0.4}, 0, -0.01, 0.5};
    batch[1] = {{-0.5, 0.2}, {0.0, 0.1}, 2, -0.01, 0.7};
    std::vector<RootEval> evals;
    for (const auto& s : batch) {
        auto la = model.one_step_q(tape, s.state);
        evals.push_back(root_eval_from_lookahead(la));
    }
    Tensor zero = combined_loss(tape, model, Method::Dts, LossWeights{0, 0, 0, 0}, batch, evals);
    CHECK(zero.value() == 0.0);
}

TEST_CASE("combined loss with only the Q term equals mean q_loss") {
    WorldModel model(micro_config(), 5);
    Tape tape;
    std::vector<BatchSample> batch(2);
    batch[0] = {{0.1, 0.2}, {0.3, 0.4}, 0, -0.01, 0.5};
    batch[1] = {{-0.5, 0.2}, {0.0, 0.1}, 2, -0.01, 0.7};
    std::vector<RootEval> evals;
    for (const auto& s : batch) {
        auto la = model.one_step_q(tape, s.state);
        evals.push_back(root_eval_from_lookahead(la));
    }
    Tensor loss = combined_loss(tape, model, Method::Dts, LossWeights{1, 0, 0, 0}, batch, evals);
    double expect = 0.5 * (q_loss(tape, evals[0].root_q, 0, 0.5).value() +
                           q_loss(tape, evals[1].root_q, 2, 0.7).value());
    CHECK(loss.value() == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("combined loss matches manual arithmetic on a 2-sample batch") {
    WorldModel model(micro_config(), 6);
    Tape tape;
    LossWeights w{1.0, 0.5, 1.0, 1.0};
    std::vector<BatchSample> batch(2);
    batch[0] = {{0.4, -0.1}, {0.2, 0.2}, 1, -0.01, 0.42};
    batch[1] = {{-0.2, 0.9}, {0.5, -0.5}, 0, -1.0, -0.3};
    std::vector<RootEval> evals;
    for (const auto& s : batch) {
        auto la = model.one_step_q(tape, s.state);
        evals.push_back(root_eval_from_lookahead(la));
    }
    Tensor loss = combined_loss(tape, model, Method::Dts, w, batch, evals);

    // manual evaluation, plain doubles
    double manual = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& s = batch[i];
        const auto& q = evals[i].root_q.data();
        double lq = (q[s.action] - s.target_q) * (q[s.action] - s.target_q);
        double mx = std::max({q[0], q[1], q[2]});
        double lse = mx + std::log(std::exp(q[0] - mx) + std::exp(q[1] - mx) + std::exp(q[2] - mx));
        double lcql = lse - q[s.action];
        // consistency: mean squared error between predicted and target latents
        Tape t2;
        Tensor target = model.target_encode(t2, s.next_state);
        const auto& pred = evals[i].child_latent[s.action].data();
        double lcons = 0.0;
        for (std::size_t k = 0; k < pred.size(); ++k) {
            double d = pred[k] - target.data()[k];
            lcons += d * d;
        }
        lcons /= static_cast<double>(pred.size());
        double pr = evals[i].child_reward[s.action].value();
        double lrew = (pr - s.reward) * (pr - s.reward);
        manual += w.q * lq + w.cql * lcql + w.consistency * lcons + w.reward * lrew;
    }
    manual /= 2.0;
    CHECK(loss.value() == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("combined loss rejects weight-pattern violations") {
    WorldModel model(micro_config(), 7);
    Tape tape;
    std::vector<BatchSample> batch(1);
    batch[0] = {{0.1, 0.2}, {0.3, 0.4}, 0, -0.01, 0.5};
    std::vector<RootEval> evals;
    auto la = model.one_step_q(tape, batch[0].state);
    evals.push_back(root_eval_from_lookahead(la));
    CHECK_THROWS_AS(combined_loss(tape, model, Method::ModelFree, LossWeights{1, 0.5, 1, 1}, batch, evals),
                    std::invalid_argument);
}

TEST_CASE("score coefficients: T=1 and the telescoping example") {
    CHECK(score_coefficients({0.4}, true) == std::vector<double>{0.4});   // R_1 = L_1 - L_0 = L_1
    // L = [0.5, 0.3]: r = [0.5, -0.2], R = [L_T - L_0, L_T - L_1] = [0.3, -0.2]
    std::vector<double> coefs = score_coefficients({0.5, 0.3}, true);
    CHECK(coefs[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(coefs[1] == doctest::Approx(-0.2).epsilon(1e-15));
    double r1 = 0.5 - 0.0, r2 = 0.3 - 0.5;
    CHECK(r1 + r2 == doctest::Approx(0.3).epsilon(1e-15));   // sum of deltas telescopes to L_T
    std::vector<double> plain = score_coefficients({0.5, 0.3}, false);
    CHECK(plain == std::vector<double>{0.3, 0.3});
}

TEST_CASE("telescoping identity holds on recorded traces") {
    WorldModel model(micro_config(), 8);
    Rng rng(3);
    for (int rep = 0; rep < 50; ++rep) {
        Tape tape;
        std::vector<double> s{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        Rng tree_rng(rng.next_u64());
        SearchResult r = dts_search(model, tape, s, 5, SearchMode::Stochastic, &tree_rng);
        TrialLossTrace trace = make_trial_trace(tape, r, rng.uniform_index(3), rng.uniform(-1, 1),
                                                LossWeights{1.0, 0.5, 1.0, 1.0});
        double lt = trace.losses.back();
        double sum_r = 0.0;
        for (std::size_t t = 0; t < trace.losses.size(); ++t) {
            double prev = t == 0 ? 0.0 : trace.losses[t - 1];
            sum_r += trace.losses[t] - prev;
        }
        CHECK(std::fabs(sum_r - lt) < 1e-12);
        std::vector<double> coefs = score_coefficients(trace.losses, true);
        for (std::size_t t = 0; t < coefs.size(); ++t) {
            double prev = t == 0 ? 0.0 : trace.losses[t - 1];
            CHECK(coefs[t] == doctest::Approx(lt - prev).epsilon(1e-15));
        }
        CHECK(trace.final_loss.value() == lt);
    }
}

TEST_CASE("dts_gradient validates the trace") {
    Tape tape;
    TrialLossTrace empty;
    CHECK_THROWS_AS(dts_gradient(tape, empty, true, true), std::invalid_argument);
    TrialLossTrace bad;
    bad.losses = {0.5, 0.3};
    bad.log_probs = {tape.constant_scalar(0.0)};
    bad.final_loss = tape.constant_scalar(0.3);
    CHECK_THROWS_AS(dts_gradient(tape, bad, true, true), std::invalid_argument);
}

TEST_CASE("score term coefficients act as constants in the gradient") {
    WorldModel model(micro_config(), 9);
    Rng rng(4);
    std::vector<double> s{0.2, -0.6};
    Tape tape;
    Rng tree_rng(11);
    SearchResult r = dts_search(model, tape, s, 3, SearchMode::Stochastic, &tree_rng);
    TrialLossTrace trace = make_trial_trace(tape, r, 1, 0.4, LossWeights{1.0, 0.5, 0, 0});

    GradientMap with = dts_gradient(tape, trace, true, true);
    GradientMap without = dts_gradient(tape, trace, false, true);
    std::vector<double> coefs = score_coefficients(trace.losses, true);

    // grad(with) - grad(without) must equal sum_t coef_t * grad(log pi_t)
    GradientMap score_only;
    {
        Tensor st = score_term(tape, trace.log_probs, coefs);
        score_only = tape.backward(st);
    }
    for (const auto& [name, gw] : with) {
        const auto& go = without.at(name);
        const auto& gs = score_only.at(name);
        for (std::size_t i = 0; i < gw.size(); ++i)
            CHECK(gw[i] - go[i] == doctest::Approx(gs[i]).epsilon(1e-9).scale(1.0));
    }
}

// Exhaustive enumeration over the micro setting: trial 1 expands the root
// (forced), trial 2 picks one of |A| candidates. E[L](theta) and its exact
// gradient follow by summing over the |A| trees.
namespace {

struct MicroCase {
    WorldModel model;
    std::vector<double> state;
    std::size_t action;
    double target_q;
    LossWeights weights;
};

double tree_prob_and_loss(MicroCase& mc, int second_choice, double* loss_out,
                          GradientMap* grad_out, bool weight_by_prob) {
    Tape tape;
    std::vector<int> forced{0, second_choice};
    SearchResult r = dts_search(mc.model, tape, mc.state, 2, SearchMode::Replay, nullptr, forced);
    TrialLossTrace trace = make_trial_trace(tape, r, mc.action, mc.target_q, mc.weights);
    double prob = std::exp(r.tree.trials[0].log_prob.value() + r.tree.trials[1].log_prob.value());
    if (loss_out) *loss_out = trace.losses.back();
    if (grad_out) {
        // d/dtheta [ pi(tau) * L(tau) ] via product rule on the tape:
        // objective = exp(log pi) * L   (both taped)
        Tensor log_pi = tape.add(r.tree.trials[0].log_prob, r.tree.trials[1].log_prob);
        Tensor objective = tape.mul(tape.exp(log_pi), trace.final_loss);
        if (!weight_by_prob) objective = trace.final_loss;
        *grad_out = tape.backward(objective);
    }
    return prob;
}

} // namespace

TEST_CASE("single-sample estimator is unbiased in the enumerable micro setting") {
    MicroCase mc{WorldModel(micro_config(3), 123), {0.4, -0.7}, 1, 0.25, LossWeights{1.0, 0.5, 0, 0}};

    // exact gradient by enumeration: sum_tau grad[ pi(tau) L(tau) ]
    GradientMap exact;
    double prob_sum = 0.0;
    for (int choice = 1; choice <= 3; ++choice) {
        GradientMap g;
        double prob = tree_prob_and_loss(mc, choice, nullptr, &g, true);
        prob_sum += prob;
        for (auto& [name, vec] : g) {
            auto& acc = exact[name];
            if (acc.empty()) acc.assign(vec.size(), 0.0);
            for (std::size_t i = 0; i < vec.size(); ++i) acc[i] += vec[i];
        }
    }
    CHECK(prob_sum == doctest::Approx(1.0).epsilon(1e-12));

    // sampling: mean of single-sample estimates (telescoped) over many seeds
    const int n = 4000;
    GradientMap mean;
    Rng seed_rng(777);
    for (int k = 0; k < n; ++k) {
        Tape tape;
        Rng tree_rng(seed_rng.next_u64());
        SearchResult r = dts_search(mc.model, tape, mc.state, 2, SearchMode::Stochastic, &tree_rng);
        TrialLossTrace trace = make_trial_trace(tape, r, mc.action, mc.target_q, mc.weights);
        GradientMap g = dts_gradient(tape, trace, true, true);
        for (auto& [name, vec] : g) {
            auto& acc = mean[name];
            if (acc.empty()) acc.assign(vec.size(), 0.0);
            for (std::size_t i = 0; i < vec.size(); ++i) acc[i] += vec[i] / n;
        }
    }

    // agreement within a loose monte-carlo tolerance (full 3-SE criterion
    // runs in the acceptance suite)
    double worst = 0.0;
    for (const auto& [name, ex] : exact) {
        const auto& got = mean.at(name);
        for (std::size_t i = 0; i < ex.size(); ++i)
            worst = std::max(worst, std::fabs(ex[i] - got[i]));
    }
    CHECK(worst < 0.05);
}
