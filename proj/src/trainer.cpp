#include "dts/trainer.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace dts {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

void validate_config(TrainConfig& cfg) {
    if (cfg.batch_size < 1) throw std::invalid_argument("config: batch size must be >= 1");
    if (cfg.steps < 0) throw std::invalid_argument("config: steps must be >= 0");
    if (cfg.trials < 1) throw std::invalid_argument("config: trials must be >= 1");
    if (cfg.depth < 1) throw std::invalid_argument("config: depth must be >= 1");
    if (cfg.eval_episodes < 1) throw std::invalid_argument("config: eval episodes must be >= 1");
    if (cfg.ema_alpha < 0.0 || cfg.ema_alpha > 1.0)
        throw std::invalid_argument("config: ema alpha must be in [0,1]");

    bool is_dts = cfg.method == Method::Dts;
    if ((cfg.no_telescoping || cfg.no_reinforce || cfg.no_aux) && !is_dts)
        throw std::invalid_argument("config: ablation flags apply to the dts method only");
    if (cfg.depth_explicit && cfg.method != Method::TreeQn)
        throw std::invalid_argument("config: depth applies to the treeqn method only");
    if (cfg.trials_explicit && cfg.method != Method::Dts && cfg.method != Method::DecoupledSearch)
        throw std::invalid_argument("config: trials apply to search methods only");

    if (cfg.no_aux) {
        cfg.weights.consistency = 0.0;
        cfg.weights.reward = 0.0;
    }
    if (cfg.method == Method::ModelFree) {
        cfg.weights.consistency = 0.0;
        cfg.weights.reward = 0.0;
    }
    if (cfg.method == Method::TreeQn) cfg.weights.consistency = 0.0;
    validate_weights(cfg.method, cfg.weights);
}

namespace {

std::string widths_to_string(const std::vector<std::size_t>& w) {
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(w[i]);
    }
    return s;
}

std::vector<std::size_t> widths_from_string(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(static_cast<std::size_t>(std::stoul(item)));
    }
    if (out.empty()) throw std::invalid_argument("empty width list");
    return out;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace

std::string config_to_ini(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "[run]\n";
    out << "method = " << method_name(cfg.method) << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "steps = " << cfg.steps << "\n";
    out << "batch = " << cfg.batch_size << "\n";
    out << "dataset = " << cfg.dataset_path << "\n";
    out << "\n[search]\n";
    out << "trials = " << cfg.trials << "\n";
    out << "depth = " << cfg.depth << "\n";
    out << "\n[losses]\n";
    out << "q = " << fmt_double(cfg.weights.q) << "\n";
    out << "cql = " << fmt_double(cfg.weights.cql) << "\n";
    out << "consistency = " << fmt_double(cfg.weights.consistency) << "\n";
    out << "reward = " << fmt_double(cfg.weights.reward) << "\n";
    out << "\n[optim]\n";
    out << "lr = " << fmt_double(cfg.lr) << "\n";
    out << "beta1 = " << fmt_double(cfg.beta1) << "\n";
    out << "beta2 = " << fmt_double(cfg.beta2) << "\n";
    out << "eps = " << fmt_double(cfg.adam_eps) << "\n";
    out << "ema_alpha = " << fmt_double(cfg.ema_alpha) << "\n";
    out << "\n[eval]\n";
    out << "every = " << cfg.eval_every << "\n";
    out << "episodes = " << cfg.eval_episodes << "\n";
    out << "\n[ablation]\n";
    out << "no_telescoping = " << (cfg.no_telescoping ? 1 : 0) << "\n";
    out << "no_reinforce = " << (cfg.no_reinforce ? 1 : 0) << "\n";
    out << "no_aux = " << (cfg.no_aux ? 1 : 0) << "\n";
    out << "\n[model]\n";
    out << "latent_dim = " << cfg.sizes.latent_dim << "\n";
    out << "encoder_hidden = " << widths_to_string(cfg.sizes.encoder_hidden) << "\n";
    out << "transition_hidden = " << widths_to_string(cfg.sizes.transition_hidden) << "\n";
    out << "reward_hidden = " << widths_to_string(cfg.sizes.reward_hidden) << "\n";
    out << "value_hidden = " << widths_to_string(cfg.sizes.value_hidden) << "\n";
    return out.str();
}

void apply_override(TrainConfig& cfg, const std::string& dotted_key, const std::string& value) {
    auto as_bool = [&]() {
        if (value == "1" || value == "true") return true;
        if (value == "0" || value == "false") return false;
        throw std::invalid_argument("config: '" + dotted_key + "' expects a boolean, got '" + value + "'");
    };
    try {
        if (dotted_key == "run.method") cfg.method = method_from_string(value);
        else if (dotted_key == "run.seed") cfg.seed = std::stoull(value);
        else if (dotted_key == "run.steps") cfg.steps = std::stol(value);
        else if (dotted_key == "run.batch") cfg.batch_size = std::stoi(value);
        else if (dotted_key == "run.dataset") cfg.dataset_path = value;
        else if (dotted_key == "search.trials") { cfg.trials = std::stoi(value); cfg.trials_explicit = true; }
        else if (dotted_key == "search.depth") { cfg.depth = std::stoi(value); cfg.depth_explicit = true; }
        else if (dotted_key == "losses.q") cfg.weights.q = std::stod(value);
        else if (dotted_key == "losses.cql") cfg.weights.cql = std::stod(value);
        else if (dotted_key == "losses.consistency") cfg.weights.consistency = std::stod(value);
        else if (dotted_key == "losses.reward") cfg.weights.reward = std::stod(value);
        else if (dotted_key == "optim.lr") cfg.lr = std::stod(value);
        else if (dotted_key == "optim.beta1") cfg.beta1 = std::stod(value);
        else if (dotted_key == "optim.beta2") cfg.beta2 = std::stod(value);
        else if (dotted_key == "optim.eps") cfg.adam_eps = std::stod(value);
        else if (dotted_key == "optim.ema_alpha") cfg.ema_alpha = std::stod(value);
        else if (dotted_key == "eval.every") cfg.eval_every = std::stol(value);
        else if (dotted_key == "eval.episodes") cfg.eval_episodes = std::stoi(value);
        else if (dotted_key == "ablation.no_telescoping") cfg.no_telescoping = as_bool();
        else if (dotted_key == "ablation.no_reinforce") cfg.no_reinforce = as_bool();
        else if (dotted_key == "ablation.no_aux") cfg.no_aux = as_bool();
        else if (dotted_key == "model.latent_dim") cfg.sizes.latent_dim = std::stoul(value);
        else if (dotted_key == "model.encoder_hidden") cfg.sizes.encoder_hidden = widths_from_string(value);
        else if (dotted_key == "model.transition_hidden") cfg.sizes.transition_hidden = widths_from_string(value);
        else if (dotted_key == "model.reward_hidden") cfg.sizes.reward_hidden = widths_from_string(value);
        else if (dotted_key == "model.value_hidden") cfg.sizes.value_hidden = widths_from_string(value);
        else throw std::invalid_argument("config: unknown key '" + dotted_key + "'");
    } catch (const std::invalid_argument&) {
        throw;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad value '" + value + "' for key '" + dotted_key + "'");
    }
}

TrainConfig config_from_ini_file(const std::string& path, const TrainConfig& base) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot read " + path);
    TrainConfig cfg = base;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        auto last = line.find_last_not_of(" \t\r");
        std::string s = line.substr(first, last - first + 1);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[' && s.back() == ']') {
            section = s.substr(1, s.size() - 2);
            continue;
        }
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                        ": expected key = value");
        std::string key = s.substr(0, eq);
        std::string value = s.substr(eq + 1);
        auto trim = [](std::string& t) {
            auto b = t.find_first_not_of(" \t");
            auto e = t.find_last_not_of(" \t");
            t = (b == std::string::npos) ? "" : t.substr(b, e - b + 1);
        };
        trim(key);
        trim(value);
        apply_override(cfg, section.empty() ? key : section + "." + key, value);
    }
    return cfg;
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace

std::string config_hash(const TrainConfig& cfg) { return hex64(fnv1a(config_to_ini(cfg))); }

std::string dataset_hash(const Dataset& ds) { return hex64(fnv1a(serialize_dataset(ds))); }

// ---------------------------------------------------------------------------
// Metrics CSV

const char* kMetricsCsvHeader =
    "step,method,variant,success_rate,collision_rate,timeout_rate,mean_return,z_score,ms_per_iter";

void append_metrics_csv(std::ostream& out, long step, const std::string& method, Variant variant,
                        const Metrics& m, double z, double ms_per_iter) {
    out << step << "," << method << "," << variant_name(variant) << "," << m.success_rate << ","
        << m.collision_rate << "," << m.timeout_rate << "," << m.mean_return << ",";
    if (std::isnan(z))
        out << "nan";
    else
        out << z;
    out << "," << ms_per_iter << "\n";
}

// ---------------------------------------------------------------------------
// Evaluation

Agent make_agent(const WorldModel& model, Method method, int trials, int depth) {
    auto tape = std::make_shared<Tape>();
    return [&model, method, trials, depth, tape](const GridSpec& spec, Pos pos) -> std::size_t {
        tape->clear();
        std::vector<double> state = encode_state(spec, pos);
        switch (method) {
            case Method::ModelFree: {
                auto la = model.one_step_q(*tape, state);
                return act_greedy(la.q.data());
            }
            case Method::TreeQn: {
                SearchResult r = treeqn_search(model, *tape, state, depth);
                return act_greedy(r.root_q.data());
            }
            case Method::Dts:
            case Method::DecoupledSearch: {
                SearchResult r = dts_search(model, *tape, state, trials, SearchMode::Greedy);
                return act_greedy(r.root_q.data());
            }
        }
        throw std::logic_error("make_agent: unhandled method");
    };
}

Metrics evaluate_model(const WorldModel& model, Method method, int trials, int depth,
                       Variant variant, int episodes, std::uint64_t seed) {
    return evaluate_policy(make_agent(model, method, trials, depth), variant, episodes, seed);
}

double z_score(std::span<const double> agent_scores, std::span<const double> baseline_scores) {
    if (agent_scores.empty() || baseline_scores.empty())
        throw std::invalid_argument("z_score: empty score list");
    auto mean = [](std::span<const double> v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    double mu_a = mean(agent_scores);
    double mu_b = mean(baseline_scores);
    double var = 0.0;
    for (double x : baseline_scores) var += (x - mu_b) * (x - mu_b);
    var /= static_cast<double>(baseline_scores.size());
    double sigma = std::sqrt(var);
    if (sigma == 0.0) throw std::domain_error("z_score: baseline has zero standard deviation");
    return (mu_a - mu_b) / sigma;
}

const Metrics* RunRecord::final_metrics(Variant v) const {
    const Metrics* found = nullptr;
    long best_step = -1;
    for (const auto& e : evals)
        if (e.variant == v && e.step >= best_step) {
            best_step = e.step;
            found = &e.metrics;
        }
    return found;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<BatchSample> flatten_dataset(const Dataset& ds) {
    std::vector<BatchSample> samples;
    for (const auto& rec : ds.records) {
        const auto& steps = rec.traj.steps;
        for (std::size_t i = 0; i < steps.size(); ++i) {
            BatchSample s;
            s.state = encode_state(rec.spec, steps[i].pos);
            Pos next = (i + 1 < steps.size()) ? steps[i + 1].pos : rec.traj.final_pos;
            s.next_state = encode_state(rec.spec, next);
            s.action = static_cast<std::size_t>(steps[i].action);
            s.reward = steps[i].reward;
            s.target_q = steps[i].q;
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

void write_run_record_json(const RunRecord& rec, const TrainConfig& cfg, const std::string& path) {
    nlohmann::ordered_json j;
    j["config_hash"] = rec.config_hash;
    j["dataset_hash"] = rec.dataset_hash;
    j["method"] = rec.method;
    j["seed"] = rec.seed;
    j["steps_completed"] = rec.steps_completed;
    j["ms_per_iter"] = rec.ms_per_iter;
    j["nan_abort"] = rec.nan_abort;
    j["checkpoint"] = rec.checkpoint_path;
    j["eval_episodes"] = cfg.eval_episodes;
    j["evals"] = nlohmann::ordered_json::array();
    for (const auto& e : rec.evals) {
        nlohmann::ordered_json je;
        je["step"] = e.step;
        je["variant"] = variant_name(e.variant);
        je["success_rate"] = e.metrics.success_rate;
        je["collision_rate"] = e.metrics.collision_rate;
        je["timeout_rate"] = e.metrics.timeout_rate;
        je["mean_return"] = e.metrics.mean_return;
        j["evals"].push_back(std::move(je));
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

} // namespace

RunRecord train(const TrainConfig& cfg_in, const Dataset& dataset, const std::string& out_dir,
                std::unique_ptr<WorldModel>* model_out) {
    TrainConfig cfg = cfg_in;
    validate_config(cfg);
    if (dataset.variant != Variant::TwoExit)
        throw std::invalid_argument("train: training data must come from the two_exit variant");
    if (dataset.records.empty()) throw std::invalid_argument("train: empty dataset");

    RunRecord rec;
    rec.config_hash = config_hash(cfg);
    rec.dataset_hash = dataset_hash(dataset);
    rec.method = method_name(cfg.method);
    rec.seed = cfg.seed;

    std::ofstream csv;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream ini(fs::path(out_dir) / "effective.ini");
        ini << config_to_ini(cfg);
        csv.open(fs::path(out_dir) / "metrics.csv");
        csv << kMetricsCsvHeader << "\n";
    }

    WorldModelConfig mc;
    mc.state_dim = kStateDim;
    mc.action_count = kActionCount;
    mc.latent_dim = cfg.sizes.latent_dim;
    mc.encoder_hidden = cfg.sizes.encoder_hidden;
    mc.transition_hidden = cfg.sizes.transition_hidden;
    mc.reward_hidden = cfg.sizes.reward_hidden;
    mc.value_hidden = cfg.sizes.value_hidden;
    Rng master(cfg.seed);
    auto model = std::make_unique<WorldModel>(mc, master.stream("model-init").next_u64());

    std::vector<BatchSample> samples = flatten_dataset(dataset);
    Rng shuffle_rng = master.stream("data-shuffle");
    Rng tree_rng = master.stream("tree-sampling");
    Rng eval_seed_rng = master.stream("eval-layouts");
    std::uint64_t eval_seed_base = eval_seed_rng.next_u64();

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto reshuffle = [&]() {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);
    };
    reshuffle();
    std::size_t cursor = 0;

    auto run_eval = [&](long at_step) {
        for (Variant v : {Variant::TwoExit, Variant::OneExit}) {
            std::uint64_t vseed = eval_seed_base ^ (v == Variant::OneExit ? 0x1ULL : 0x2ULL);
            Metrics m = evaluate_model(*model, cfg.method, cfg.trials, cfg.depth, v,
                                       cfg.eval_episodes, vseed);
            rec.evals.push_back({at_step, v, m});
            if (csv.is_open()) {
                append_metrics_csv(csv, at_step, rec.method, v, m,
                                   std::numeric_limits<double>::quiet_NaN(), rec.ms_per_iter);
                csv.flush();
            }
        }
    };

    Tape tape;
    const bool uses_target = cfg.weights.consistency > 0.0;
    double total_ms = 0.0;
    long completed = 0;

    for (long step_i = 0; step_i < cfg.steps; ++step_i) {
        auto t0 = std::chrono::steady_clock::now();
        long searches_before = search_invocations();
        tape.clear();

        std::vector<BatchSample> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                reshuffle();
                cursor = 0;
            }
            batch.push_back(samples[order[cursor++]]);
        }

        std::vector<RootEval> evals;
        evals.reserve(batch.size());
        Tensor surrogate_sum = tape.constant_scalar(0.0);
        for (const BatchSample& s : batch) {
            switch (cfg.method) {
                case Method::Dts: {
                    SearchResult r = dts_search(*model, tape, s.state, cfg.trials,
                                                SearchMode::Stochastic, &tree_rng);
                    TrialLossTrace trace = make_trial_trace(tape, r, s.action, s.target_q, cfg.weights);
                    if (!cfg.no_reinforce) {
                        std::vector<double> coefs = score_coefficients(trace.losses, !cfg.no_telescoping);
                        surrogate_sum = tape.add(surrogate_sum,
                                                 score_term(tape, trace.log_probs, coefs));
                    }
                    evals.push_back(root_eval_from_search(r));
                    break;
                }
                case Method::TreeQn: {
                    SearchResult r = treeqn_search(*model, tape, s.state, cfg.depth);
                    evals.push_back(root_eval_from_search(r));
                    break;
                }
                case Method::ModelFree:
                case Method::DecoupledSearch: {
                    auto la = model->one_step_q(tape, s.state);
                    evals.push_back(root_eval_from_lookahead(la));
                    break;
                }
            }
        }

        Tensor loss = combined_loss(tape, *model, cfg.method, cfg.weights, batch, evals);
        Tensor objective = loss;
        if (cfg.method == Method::Dts && !cfg.no_reinforce) {
            Tensor surrogate_mean = tape.mul(surrogate_sum,
                                             tape.constant_scalar(1.0 / static_cast<double>(batch.size())));
            objective = tape.add(loss, surrogate_mean);
        }

        double loss_value = loss.value();
        bool bad = !std::isfinite(objective.value());
        bool applied = false;
        if (!bad) {
            GradientMap grads = tape.backward(objective);
            applied = model->params().adam_step(grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        }
        if (bad || !applied) {
            rec.nan_abort = true;
            if (!out_dir.empty()) {
                std::string path = (fs::path(out_dir) / "last_good_checkpoint.bin").string();
                model->save_file(path);
                rec.checkpoint_path = path;
            }
            break;
        }
        if (uses_target) model->update_target(cfg.ema_alpha);
        rec.step_losses.push_back(loss_value);
        rec.training_search_invocations += search_invocations() - searches_before;

        auto t1 = std::chrono::steady_clock::now();
        total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
        ++completed;
        rec.ms_per_iter = total_ms / static_cast<double>(completed);

        bool cadence = cfg.eval_every > 0 && completed % cfg.eval_every == 0;
        bool last = step_i + 1 == cfg.steps;
        if (cadence || last) run_eval(completed);
    }
    rec.steps_completed = completed;
    if (cfg.steps == 0) run_eval(0);

    if (!out_dir.empty() && !rec.nan_abort) {
        rec.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();
        model->save_file(rec.checkpoint_path);
    }
    if (!out_dir.empty()) {
        write_run_record_json(rec, cfg, (fs::path(out_dir) / "run_record.json").string());
    }
    if (rec.nan_abort)
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(completed + 1) +
                                 (rec.checkpoint_path.empty()
                                      ? std::string(" (no checkpoint saved)")
                                      : " (last good checkpoint: " + rec.checkpoint_path + ")"));
    if (model_out) *model_out = std::move(model);
    return rec;
}

std::vector<AblationVariant> run_ablation(const TrainConfig& base, const Dataset& dataset,
                                          const std::string& out_dir) {
    if (base.method != Method::Dts)
        throw std::invalid_argument("run_ablation: base config must use the dts method");
    std::vector<AblationVariant> variants;
    auto add = [&](const std::string& name, auto mutate) {
        TrainConfig cfg = base;
        mutate(cfg);
        variants.push_back({name, cfg, {}});
    };
    add("full", [](TrainConfig&) {});
    add("no_telescoping", [](TrainConfig& c) { c.no_telescoping = true; });
    add("no_reinforce", [](TrainConfig& c) { c.no_reinforce = true; });
    add("no_aux", [](TrainConfig& c) { c.no_aux = true; });

    for (auto& v : variants) {
        std::string dir = out_dir.empty() ? "" : (fs::path(out_dir) / v.name).string();
        v.record = train(v.config, dataset, dir);
    }

    if (!out_dir.empty()) {
        std::ofstream csv(fs::path(out_dir) / "ablation.csv");
        csv << "variant," << kMetricsCsvHeader << "\n";
        for (const auto& v : variants)
            for (const auto& e : v.record.evals) {
                csv << v.name << ",";
                append_metrics_csv(csv, e.step, v.record.method, e.variant, e.metrics,
                                   std::numeric_limits<double>::quiet_NaN(), v.record.ms_per_iter);
            }
    }
    return variants;
}

} // namespace dts
