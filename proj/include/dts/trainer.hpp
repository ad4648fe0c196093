#pragma once

#include "dts/gridworld.hpp"
#include "dts/losses.hpp"

#include <iosfwd>
#include <map>
#include <memory>
#include <optional>

namespace dts {

struct ModelSizes {
    std::size_t latent_dim = 16;
    std::vector<std::size_t> encoder_hidden{64, 64};
    std::vector<std::size_t> transition_hidden{64};
    std::vector<std::size_t> reward_hidden{64};
    std::vector<std::size_t> value_hidden{64};
};

struct TrainConfig {
    Method method = Method::Dts;
    int trials = 10;          // search trials (dts, decoupled_search)
    int depth = 2;            // treeqn expansion depth
    LossWeights weights;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double ema_alpha = 0.99;
    int batch_size = 256;
    long steps = 20000;
    long eval_every = 2000;
    int eval_episodes = 200;
    std::uint64_t seed = 0;
    bool no_telescoping = false;
    bool no_reinforce = false;
    bool no_aux = false;
    ModelSizes sizes;
    std::string dataset_path;

    // Set when the user supplied the field explicitly; used to reject
    // settings that do not apply to the chosen method.
    bool depth_explicit = false;
    bool trials_explicit = false;
};

// Applies ablation flags (no_aux zeroes the auxiliary weights), then checks
// method-specific invariants. Throws std::invalid_argument on violations.
void validate_config(TrainConfig& cfg);

// Flat INI round-trip: sections per module, key = value lines.
std::string config_to_ini(const TrainConfig& cfg);
TrainConfig config_from_ini_file(const std::string& path, const TrainConfig& base = {});
void apply_override(TrainConfig& cfg, const std::string& dotted_key, const std::string& value);
std::string config_hash(const TrainConfig& cfg);

std::uint64_t fnv1a(std::string_view bytes);
std::string dataset_hash(const Dataset& ds);

struct EvalPoint {
    long step = 0;
    Variant variant = Variant::TwoExit;
    Metrics metrics;
};

struct RunRecord {
    std::string config_hash;
    std::string dataset_hash;
    std::string method;
    std::uint64_t seed = 0;
    std::vector<EvalPoint> evals;
    std::string checkpoint_path;
    double ms_per_iter = 0.0;
    long steps_completed = 0;
    bool nan_abort = false;
    std::vector<double> step_losses;   // combined loss per completed step
    long training_search_invocations = 0;   // searches run inside training steps (evals excluded)

    // Final one_exit / two_exit metrics, for convenience.
    const Metrics* final_metrics(Variant v) const;
};

// Offline training per the configured method. When out_dir is nonempty the
// run directory receives the effective config, metrics CSV, run record and
// final checkpoint. Returns the populated RunRecord; model_out (optional)
// receives the trained model.
RunRecord train(const TrainConfig& cfg, const Dataset& dataset, const std::string& out_dir,
                std::unique_ptr<WorldModel>* model_out = nullptr);

// Greedy evaluation of a trained model under the method's action rule
// (search for dts/decoupled, full expansion for treeqn, one-step lookahead
// for model_free).
Metrics evaluate_model(const WorldModel& model, Method method, int trials, int depth,
                       Variant variant, int episodes, std::uint64_t seed);

Agent make_agent(const WorldModel& model, Method method, int trials, int depth);

// (mean(agent) - mean(baseline)) / population stdev(baseline).
double z_score(std::span<const double> agent_scores, std::span<const double> baseline_scores);

// Metrics CSV schema shared by train, eval and ablate outputs.
extern const char* kMetricsCsvHeader;
void append_metrics_csv(std::ostream& out, long step, const std::string& method, Variant variant,
                        const Metrics& m, double z, double ms_per_iter);

struct AblationVariant {
    std::string name;
    TrainConfig config;
    RunRecord record;
};

// Trains full DTS and the three ablations on the same dataset and seed.
std::vector<AblationVariant> run_ablation(const TrainConfig& base, const Dataset& dataset,
                                          const std::string& out_dir);

} // namespace dts
