#include "dts/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace dts;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string method;
    std::optional<int> trials;
    std::optional<int> depth;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> ablate;
};

void add_config_flags(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "Config file (INI; sections per module)");
    cmd->add_option("--set", flags.overrides, "Override a config key, e.g. --set optim.lr=0.01");
    cmd->add_option("--method", flags.method, "dts | model_free | treeqn | decoupled_search");
    cmd->add_option("--trials", flags.trials, "Search trials (dts, decoupled_search)");
    cmd->add_option("--depth", flags.depth, "Expansion depth (treeqn)");
    cmd->add_option("--seed", flags.seed, "Master seed");
    cmd->add_option("--ablate", flags.ablate, "Ablation flags: no_telescoping, no_reinforce, no_aux")
        ->delimiter(',');
}

TrainConfig build_config(const CommonFlags& flags) {
    TrainConfig cfg;
    if (!flags.config_path.empty()) cfg = config_from_ini_file(flags.config_path);
    for (const std::string& kv : flags.overrides) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!flags.method.empty()) cfg.method = method_from_string(flags.method);
    if (flags.trials) {
        cfg.trials = *flags.trials;
        cfg.trials_explicit = true;
    }
    if (flags.depth) {
        cfg.depth = *flags.depth;
        cfg.depth_explicit = true;
    }
    if (flags.seed) cfg.seed = *flags.seed;
    for (const std::string& a : flags.ablate) {
        if (a == "no_telescoping") cfg.no_telescoping = true;
        else if (a == "no_reinforce") cfg.no_reinforce = true;
        else if (a == "no_aux") cfg.no_aux = true;
        else throw std::invalid_argument("unknown ablation flag '" + a + "'");
    }
    return cfg;
}

long treeqn_node_count(int depth) {
    long n = 0, level = 1;
    for (int d = 0; d <= depth; ++d) {
        n += level;
        level *= kActionCount;
    }
    return n;
}

int cmd_generate_data(const std::string& variant_str, int n, std::uint64_t seed, const std::string& out) {
    Variant variant = variant_from_string(variant_str);
    Dataset ds = generate_dataset(variant, n, seed);
    save_dataset(ds, out);
    nlohmann::ordered_json meta;
    meta["schema_version"] = ds.schema_version;
    meta["variant"] = variant_name(variant);
    meta["seed"] = seed;
    meta["count"] = ds.records.size();
    meta["hash"] = dataset_hash(ds);
    std::ofstream side(out + ".meta.json");
    side << meta.dump(2) << "\n";
    std::cout << "wrote " << ds.records.size() << " trajectories to " << out << "\n";
    return kExitOk;
}

int cmd_train(TrainConfig cfg, const std::string& dataset_path, const std::string& out) {
    if (!dataset_path.empty()) cfg.dataset_path = dataset_path;
    if (cfg.dataset_path.empty())
        throw std::invalid_argument("train: no dataset given (use --dataset or run.dataset)");
    if (!fs::exists(cfg.dataset_path))
        throw std::invalid_argument("train: dataset not found: " + cfg.dataset_path);
    validate_config(cfg);
    Dataset ds = load_dataset(cfg.dataset_path);
    if (cfg.method == Method::TreeQn)
        std::cout << "treeqn depth " << cfg.depth << ": " << treeqn_node_count(cfg.depth)
                  << " nodes per search\n";
    RunRecord rec = train(cfg, ds, out);
    const Metrics* two = rec.final_metrics(Variant::TwoExit);
    const Metrics* one = rec.final_metrics(Variant::OneExit);
    std::cout << "method " << rec.method << ", " << rec.steps_completed << " steps, "
              << rec.ms_per_iter << " ms/iter\n";
    if (two) std::cout << "  two_exit success " << two->success_rate << " collision " << two->collision_rate << "\n";
    if (one) std::cout << "  one_exit success " << one->success_rate << " collision " << one->collision_rate << "\n";
    std::cout << "run directory: " << out << "\n";
    return kExitOk;
}

std::vector<double> load_returns(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read returns file " + path);
    std::vector<double> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(std::stod(line));
    }
    return out;
}

int cmd_eval(const TrainConfig& cfg, const std::string& checkpoint, const std::string& variant_str,
             int episodes, std::uint64_t seed, const std::string& out_dir, bool expert,
             int dump_trees, const std::string& baseline_returns) {
    if (episodes < 1) throw std::invalid_argument("eval: episodes must be >= 1");
    Variant variant = variant_from_string(variant_str);
    if (!out_dir.empty()) fs::create_directories(out_dir);

    Metrics m;
    std::string method_label;
    std::unique_ptr<WorldModel> model;
    if (expert) {
        method_label = "expert";
        Agent agent = [](const GridSpec& spec, Pos pos) -> std::size_t {
            ValueIterationResult vi = value_iteration(spec);
            return static_cast<std::size_t>(vi.policy[static_cast<std::size_t>(spec.index(pos))]);
        };
        m = evaluate_policy(agent, variant, episodes, seed);
    } else {
        if (checkpoint.empty()) throw std::invalid_argument("eval: --checkpoint or --expert required");
        if (!fs::exists(checkpoint)) throw std::invalid_argument("eval: checkpoint not found: " + checkpoint);
        model = std::make_unique<WorldModel>(WorldModel::load_file(checkpoint));
        method_label = method_name(cfg.method);
        m = evaluate_model(*model, cfg.method, cfg.trials, cfg.depth, variant, episodes, seed);
    }

    if (dump_trees > 0) {
        if (expert || cfg.method == Method::ModelFree)
            throw std::invalid_argument("eval: --dump-trees needs a search method (dts, decoupled_search, treeqn)");
        Rng master(seed);
        for (int i = 0; i < dump_trees; ++i) {
            Rng rng = master.stream("eval-episode", static_cast<std::uint64_t>(i));
            GridSpec spec = random_spec(variant, rng);
            Tape tape;
            SearchResult r = cfg.method == Method::TreeQn
                                 ? treeqn_search(*model, tape, encode_state(spec, spec.start), cfg.depth)
                                 : dts_search(*model, tape, encode_state(spec, spec.start), cfg.trials,
                                              SearchMode::Greedy);
            std::string path = (fs::path(out_dir.empty() ? "." : out_dir) /
                                ("tree_" + std::to_string(i) + ".json")).string();
            std::ofstream f(path);
            dump_tree(r.tree, f);
        }
    }

    double z = std::numeric_limits<double>::quiet_NaN();
    if (!baseline_returns.empty()) z = z_score(m.episode_returns, load_returns(baseline_returns));

    std::ostringstream row;
    row << kMetricsCsvHeader << "\n";
    append_metrics_csv(row, 0, method_label, variant, m, z, 0.0);
    std::cout << row.str();
    if (!out_dir.empty()) {
        std::ofstream csv(fs::path(out_dir) / "eval_metrics.csv");
        csv << row.str();
        std::ofstream rets(fs::path(out_dir) / "returns.csv");
        rets.precision(17);
        for (double r : m.episode_returns) rets << r << "\n";
    }
    return kExitOk;
}

int cmd_ablate(TrainConfig base, const std::string& dataset_path, const std::string& out,
               const std::vector<std::uint64_t>& seeds) {
    if (!dataset_path.empty()) base.dataset_path = dataset_path;
    if (base.dataset_path.empty())
        throw std::invalid_argument("ablate: no dataset given (use --dataset or run.dataset)");
    if (!fs::exists(base.dataset_path))
        throw std::invalid_argument("ablate: dataset not found: " + base.dataset_path);
    base.method = Method::Dts;
    Dataset ds = load_dataset(base.dataset_path);
    std::vector<std::uint64_t> seed_list = seeds.empty() ? std::vector<std::uint64_t>{base.seed} : seeds;
    for (std::uint64_t s : seed_list) {
        TrainConfig cfg = base;
        cfg.seed = s;
        std::string dir = (fs::path(out) / ("seed_" + std::to_string(s))).string();
        std::vector<AblationVariant> variants = run_ablation(cfg, ds, dir);
        for (const auto& v : variants) {
            const Metrics* one = v.record.final_metrics(Variant::OneExit);
            std::cout << "seed " << s << " " << v.name << ": one_exit success "
                      << (one ? one->success_rate : 0.0) << " collision "
                      << (one ? one->collision_rate : 0.0) << "\n";
        }
    }
    std::cout << "ablation runs written to " << out << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Differentiable tree search over a learned world model: dataset generation, "
                 "offline training, evaluation and ablations on grid navigation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate-data", "Generate an expert trajectory dataset");
    std::string gen_variant = "two_exit";
    int gen_n = 1000;
    std::uint64_t gen_seed = 0;
    std::string gen_out = "dataset.jsonl";
    gen->add_option("--variant", gen_variant, "two_exit | one_exit");
    gen->add_option("--n", gen_n, "Number of trajectories")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "Master seed");
    gen->add_option("--out", gen_out, "Output dataset path (JSON lines)");

    auto* tr = app.add_subcommand("train", "Train a method on an expert dataset");
    CommonFlags tr_flags;
    std::string tr_dataset, tr_out = "run";
    add_config_flags(tr, tr_flags);
    tr->add_option("--dataset", tr_dataset, "Dataset file from generate-data");
    tr->add_option("--out", tr_out, "Run directory");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (or the expert) on fresh layouts");
    CommonFlags ev_flags;
    std::string ev_checkpoint, ev_variant = "two_exit", ev_out, ev_baseline;
    int ev_episodes = 200, ev_dump = 0;
    bool ev_expert = false;
    add_config_flags(ev, ev_flags);
    ev->add_option("--checkpoint", ev_checkpoint, "Model checkpoint file");
    ev->add_option("--variant", ev_variant, "two_exit | one_exit");
    ev->add_option("--episodes", ev_episodes, "Evaluation episodes");
    ev->add_option("--out", ev_out, "Output directory for metrics and returns");
    ev->add_flag("--expert", ev_expert, "Evaluate the value-iteration expert instead of a checkpoint");
    ev->add_option("--dump-trees", ev_dump, "Write this many search-tree dumps");
    ev->add_option("--baseline-returns", ev_baseline, "Per-episode returns file; adds a z-score");

    auto* ab = app.add_subcommand("ablate", "Train full DTS plus the three ablation variants");
    CommonFlags ab_flags;
    std::string ab_dataset, ab_out = "ablation";
    std::vector<std::uint64_t> ab_seeds;
    add_config_flags(ab, ab_flags);
    ab->add_option("--dataset", ab_dataset, "Dataset file from generate-data");
    ab->add_option("--out", ab_out, "Output directory");
    ab->add_option("--seeds", ab_seeds, "Seed replicates")->delimiter(',');

    auto* pc = app.add_subcommand("print-config", "Print the effective configuration");
    CommonFlags pc_flags;
    add_config_flags(pc, pc_flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_generate_data(gen_variant, gen_n, gen_seed, gen_out);
        if (tr->parsed()) return cmd_train(build_config(tr_flags), tr_dataset, tr_out);
        if (ev->parsed()) {
            TrainConfig cfg = build_config(ev_flags);
            // --trials / --depth select the eval-time action rule only
            cfg.trials_explicit = false;
            cfg.depth_explicit = false;
            return cmd_eval(cfg, ev_checkpoint, ev_variant, ev_episodes,
                            ev_flags.seed.value_or(0), ev_out, ev_expert, ev_dump, ev_baseline);
        }
        if (ab->parsed()) return cmd_ablate(build_config(ab_flags), ab_dataset, ab_out, ab_seeds);
        if (pc->parsed()) {
            std::cout << config_to_ini(build_config(pc_flags));
            return kExitOk;
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
