#include "dts/losses.hpp"

#include <stdexcept>

namespace dts {

const char* method_name(Method m) {
    switch (m) {
        case Method::Dts: return "dts";
        case Method::ModelFree: return "model_free";
        case Method::TreeQn: return "treeqn";
        case Method::DecoupledSearch: return "decoupled_search";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    if (s == "dts") return Method::Dts;
    if (s == "model_free") return Method::ModelFree;
    if (s == "treeqn") return Method::TreeQn;
    if (s == "decoupled_search") return Method::DecoupledSearch;
    throw std::invalid_argument("unknown method '" + s + "'");
}

void validate_weights(Method method, const LossWeights& w) {
    if (w.q < 0 || w.cql < 0 || w.consistency < 0 || w.reward < 0)
        throw std::invalid_argument("loss weights must be nonnegative");
    switch (method) {
        case Method::ModelFree:
            if (w.consistency != 0.0 || w.reward != 0.0)
                throw std::invalid_argument("model_free uses only the Q and CQL terms; "
                                            "consistency and reward weights must be zero");
            break;
        case Method::TreeQn:
            if (w.consistency != 0.0)
                throw std::invalid_argument("treeqn does not use the consistency term; "
                                            "its weight must be zero");
            break;
        case Method::Dts:
        case Method::DecoupledSearch:
            break;
    }
}

Tensor q_loss(Tape& tape, const Tensor& pred_q, std::size_t action, double target_q) {
    std::size_t idx[] = {action};
    Tensor picked = tape.index_select(pred_q, idx);
    return tape.square(tape.sub(picked, tape.constant_scalar(target_q)));
}

Tensor cql_loss(Tape& tape, const Tensor& pred_q, std::size_t action) {
    std::size_t idx[] = {action};
    return tape.sub(tape.logsumexp(pred_q), tape.index_select(pred_q, idx));
}

Tensor transition_consistency_from(Tape& tape, const WorldModel& model,
                                   const Tensor& predicted_next, std::span<const double> next_state) {
    Tensor target = model.target_encode(tape, next_state);
    return tape.mean(tape.square(tape.sub(predicted_next, target)));
}

Tensor transition_consistency_loss(Tape& tape, const WorldModel& model,
                                   std::span<const double> state, std::size_t action,
                                   std::span<const double> next_state) {
    Tensor predicted = model.transition(tape, model.encode(tape, state), action);
    return transition_consistency_from(tape, model, predicted, next_state);
}

Tensor reward_prediction_from(Tape& tape, const Tensor& predicted_reward, double observed_reward) {
    return tape.square(tape.sub(predicted_reward, tape.constant_scalar(observed_reward)));
}

Tensor reward_prediction_loss(Tape& tape, const WorldModel& model,
                              std::span<const double> state, std::size_t action, double observed_reward) {
    Tensor predicted = model.reward(tape, model.encode(tape, state), action);
    return reward_prediction_from(tape, predicted, observed_reward);
}

RootEval root_eval_from_search(const SearchResult& result) {
    RootEval out;
    out.root_q = result.root_q;
    const SearchTree& tree = result.tree;
    for (int cid : tree.root().children) {
        const SearchNode& c = tree.nodes[static_cast<std::size_t>(cid)];
        out.child_latent.push_back(c.latent);
        out.child_reward.push_back(c.incoming_reward);
    }
    return out;
}

RootEval root_eval_from_lookahead(const WorldModel::OneStepLookahead& la) {
    return RootEval{la.q, la.next_latent, la.action_reward};
}

Tensor combined_loss(Tape& tape, const WorldModel& model, Method method, const LossWeights& w,
                     std::span<const BatchSample> batch, std::span<const RootEval> evals) {
    validate_weights(method, w);
    if (batch.size() != evals.size())
        throw std::invalid_argument("combined_loss: batch and eval counts differ");
    if (batch.empty()) throw std::invalid_argument("combined_loss: empty batch");

    Tensor total = tape.constant_scalar(0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const BatchSample& s = batch[i];
        const RootEval& e = evals[i];
        Tensor sample = tape.constant_scalar(0.0);
        if (w.q != 0.0)
            sample = tape.add(sample, tape.mul(tape.constant_scalar(w.q),
                                               q_loss(tape, e.root_q, s.action, s.target_q)));
        if (w.cql != 0.0)
            sample = tape.add(sample, tape.mul(tape.constant_scalar(w.cql),
                                               cql_loss(tape, e.root_q, s.action)));
        if (w.consistency != 0.0) {
            if (s.action >= e.child_latent.size())
                throw std::invalid_argument("combined_loss: no predicted next latent for action");
            Tensor c = transition_consistency_from(tape, model, e.child_latent[s.action], s.next_state);
            sample = tape.add(sample, tape.mul(tape.constant_scalar(w.consistency), c));
        }
        if (w.reward != 0.0) {
            if (s.action >= e.child_reward.size())
                throw std::invalid_argument("combined_loss: no predicted reward for action");
            Tensor r = reward_prediction_from(tape, e.child_reward[s.action], s.reward);
            sample = tape.add(sample, tape.mul(tape.constant_scalar(w.reward), r));
        }
        total = tape.add(total, sample);
    }
    return tape.mul(total, tape.constant_scalar(1.0 / static_cast<double>(batch.size())));
}

TrialLossTrace make_trial_trace(Tape& tape, const SearchResult& result, std::size_t action,
                                double target_q, const LossWeights& w) {
    TrialLossTrace trace;
    for (const TrialRecord& t : result.tree.trials) {
        Tensor l = tape.add(tape.mul(tape.constant_scalar(w.q), q_loss(tape, t.root_q, action, target_q)),
                            tape.mul(tape.constant_scalar(w.cql), cql_loss(tape, t.root_q, action)));
        trace.losses.push_back(l.value());
        trace.log_probs.push_back(t.log_prob);
        trace.final_loss = l;
    }
    return trace;
}

std::vector<double> score_coefficients(const std::vector<double>& losses, bool use_telescoping) {
    if (losses.empty()) throw std::invalid_argument("score_coefficients: empty trace");
    const double final_loss = losses.back();
    std::vector<double> coefs(losses.size());
    for (std::size_t t = 0; t < losses.size(); ++t) {
        double prev = (t == 0) ? 0.0 : losses[t - 1];   // L_0 = 0
        coefs[t] = use_telescoping ? final_loss - prev : final_loss;
    }
    return coefs;
}

Tensor score_term(Tape& tape, std::span<const Tensor> log_probs, std::span<const double> coefs) {
    if (log_probs.size() != coefs.size())
        throw std::invalid_argument("score_term: trace and log-prob lengths differ");
    Tensor acc = tape.constant_scalar(0.0);
    for (std::size_t t = 0; t < log_probs.size(); ++t)
        acc = tape.add(acc, tape.mul(log_probs[t], tape.constant_scalar(coefs[t])));
    return acc;
}

GradientMap dts_gradient(Tape& tape, const TrialLossTrace& trace,
                         bool use_reinforce, bool use_telescoping) {
    if (trace.losses.empty()) throw std::invalid_argument("dts_gradient: empty trace");
    if (trace.losses.size() != trace.log_probs.size())
        throw std::invalid_argument("dts_gradient: trace and log-prob lengths differ");
    Tensor objective = trace.final_loss;
    if (use_reinforce) {
        std::vector<double> coefs = score_coefficients(trace.losses, use_telescoping);
        objective = tape.add(score_term(tape, trace.log_probs, coefs), objective);
    }
    return tape.backward(objective);
}

} // namespace dts
