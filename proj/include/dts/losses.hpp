#pragma once

#include "dts/tree_search.hpp"

namespace dts {

enum class Method { Dts, ModelFree, TreeQn, DecoupledSearch };

const char* method_name(Method m);
Method method_from_string(const std::string& s);

// lambda1..lambda4: Q regression, CQL, transition consistency, reward.
struct LossWeights {
    double q = 1.0;
    double cql = 0.5;
    double consistency = 1.0;
    double reward = 1.0;
};

// Per-method zero pattern: model-free uses (q, cql); treeqn additionally
// the reward term; dts and decoupled-search use all four.
void validate_weights(Method method, const LossWeights& w);

Tensor q_loss(Tape& tape, const Tensor& pred_q, std::size_t action, double target_q);
Tensor cql_loss(Tape& tape, const Tensor& pred_q, std::size_t action);

// mean over latent dims of (T(E(s),a) - stop_grad(E'(s_next)))^2.
Tensor transition_consistency_loss(Tape& tape, const WorldModel& model,
                                   std::span<const double> state, std::size_t action,
                                   std::span<const double> next_state);
// Same loss with the predicted next latent already computed (reused from a
// search tree's root children).
Tensor transition_consistency_from(Tape& tape, const WorldModel& model,
                                   const Tensor& predicted_next, std::span<const double> next_state);

Tensor reward_prediction_loss(Tape& tape, const WorldModel& model,
                              std::span<const double> state, std::size_t action, double observed_reward);
Tensor reward_prediction_from(Tape& tape, const Tensor& predicted_reward, double observed_reward);

struct BatchSample {
    std::vector<double> state;
    std::vector<double> next_state;
    std::size_t action = 0;
    double reward = 0.0;
    double target_q = 0.0;
};

// Per-sample Q head output plus the root pieces auxiliary losses reuse.
struct RootEval {
    Tensor root_q;                     // (|A|,)
    std::vector<Tensor> child_latent;  // per action, T(E(s),a); may be empty
    std::vector<Tensor> child_reward;  // per action, R(E(s),a); may be empty
};

RootEval root_eval_from_search(const SearchResult& result);
RootEval root_eval_from_lookahead(const WorldModel::OneStepLookahead& la);

// Batch mean of the method's weighted loss.
Tensor combined_loss(Tape& tape, const WorldModel& model, Method method, const LossWeights& w,
                     std::span<const BatchSample> batch, std::span<const RootEval> evals);

// Loss value after every trial (Q-dependent terms only), recorded for the
// score-function gradient. losses[t] are detached numbers; final_loss is
// the taped loss after the last trial.
struct TrialLossTrace {
    std::vector<double> losses;
    std::vector<Tensor> log_probs;
    Tensor final_loss;
};

TrialLossTrace make_trial_trace(Tape& tape, const SearchResult& result, std::size_t action,
                                double target_q, const LossWeights& w);

// coefs[t] for the score term: loss deltas against the running baseline
// (R_t = L_T - L_{t-1}, with L_0 = 0) or the plain final loss.
std::vector<double> score_coefficients(const std::vector<double>& losses, bool use_telescoping);

// sum_t log_prob[t] * coef[t], coefficients entering as constants.
Tensor score_term(Tape& tape, std::span<const Tensor> log_probs, std::span<const double> coefs);

// Gradients of [score term + final loss]; use_reinforce=false drops the
// score term, use_telescoping=false replaces R_t by L_T.
GradientMap dts_gradient(Tape& tape, const TrialLossTrace& trace,
                         bool use_reinforce, bool use_telescoping);

} // namespace dts
