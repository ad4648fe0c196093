#include "dts/gridworld.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dts {

namespace {

// Central hall block spans [kHallLo, kHallHi] in both axes; its perimeter
// cells are walls, its interior is the start region.
constexpr int kHallLo = 5;
constexpr int kHallHi = 14;

constexpr int kDx[kActionCount] = {0, 0, -1, 1};   // up, down, left, right
constexpr int kDy[kActionCount] = {-1, 1, 0, 0};

bool in_hall_block(Pos p) {
    return p.x >= kHallLo && p.x <= kHallHi && p.y >= kHallLo && p.y <= kHallHi;
}

bool on_hall_perimeter(Pos p) {
    return in_hall_block(p) && (p.x == kHallLo || p.x == kHallHi || p.y == kHallLo || p.y == kHallHi);
}

} // namespace

const char* variant_name(Variant v) {
    return v == Variant::TwoExit ? "two_exit" : "one_exit";
}

Variant variant_from_string(const std::string& s) {
    if (s == "two_exit") return Variant::TwoExit;
    if (s == "one_exit") return Variant::OneExit;
    throw std::invalid_argument("unknown variant '" + s + "' (expected two_exit or one_exit)");
}

GridSpec random_spec(Variant variant, Rng& rng) {
    GridSpec spec;
    spec.variant = variant;
    spec.walls.assign(static_cast<std::size_t>(spec.width * spec.height), 0);
    for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
            Pos p{x, y};
            bool border = x == 0 || y == 0 || x == spec.width - 1 || y == spec.height - 1;
            if (border || on_hall_perimeter(p)) spec.walls[static_cast<std::size_t>(spec.index(p))] = 1;
        }

    // Exits: kExitWidth-cell gaps on distinct sides, away from block corners.
    int n_exits = variant == Variant::TwoExit ? 2 : 1;
    std::vector<int> sides{0, 1, 2, 3};   // top, bottom, left, right
    for (int i = 0; i < n_exits; ++i) {
        std::size_t si = rng.uniform_index(sides.size());
        int side = sides[si];
        sides.erase(sides.begin() + static_cast<std::ptrdiff_t>(si));
        int max_start = kHallHi - kHallLo - kExitWidth;   // keep the gap off the corners
        int offset = kHallLo + 1 + static_cast<int>(rng.uniform_index(max_start));
        for (int k = 0; k < kExitWidth; ++k) {
            Pos gap;
            switch (side) {
                case 0: gap = {offset + k, kHallLo}; break;
                case 1: gap = {offset + k, kHallHi}; break;
                case 2: gap = {kHallLo, offset + k}; break;
                default: gap = {kHallHi, offset + k}; break;
            }
            spec.walls[static_cast<std::size_t>(spec.index(gap))] = 0;
            spec.exits.push_back(gap);
        }
    }

    int interior = kHallHi - kHallLo - 1;   // 8
    spec.start = {kHallLo + 1 + static_cast<int>(rng.uniform_index(interior)),
                  kHallLo + 1 + static_cast<int>(rng.uniform_index(interior))};

    // Goal: one of the four grid corners (always outside the hall).
    const Pos corners[] = {{1, 1}, {spec.width - 2, 1}, {1, spec.height - 2},
                           {spec.width - 2, spec.height - 2}};
    spec.goal = corners[rng.uniform_index(4)];
    return spec;
}

StepResult step(const GridSpec& spec, Pos pos, int action) {
    if (action < 0 || action >= kActionCount)
        throw std::invalid_argument("step: action " + std::to_string(action) + " out of range");
    Pos next{pos.x + kDx[action], pos.y + kDy[action]};
    if (spec.wall(next)) return {pos, kCollisionReward, StepKind::Collision};
    if (next == spec.goal) return {next, kGoalReward, StepKind::Success};
    return {next, kStepReward, StepKind::Move};
}

ValueIterationResult value_iteration(const GridSpec& spec) {
    const std::size_t n = spec.walls.size();
    ValueIterationResult out;
    out.v.assign(n, 0.0);
    out.policy.assign(n, 0);

    auto cell_backup = [&](Pos p) {
        double best = -1e300;
        int best_a = 0;
        for (int a = 0; a < kActionCount; ++a) {
            StepResult r = step(spec, p, a);
            double q = r.reward;
            if (r.kind == StepKind::Move) q += out.v[static_cast<std::size_t>(spec.index(r.next))];
            if (q > best) {
                best = q;
                best_a = a;
            }
        }
        return std::pair<double, int>{best, best_a};
    };

    const int max_sweeps = 4 * kHorizon;
    for (out.sweeps = 1; out.sweeps <= max_sweeps; ++out.sweeps) {
        double max_change = 0.0;
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x) {
                Pos p{x, y};
                std::size_t i = static_cast<std::size_t>(spec.index(p));
                if (spec.walls[i] || p == spec.goal) continue;
                auto [best, best_a] = cell_backup(p);
                max_change = std::max(max_change, std::fabs(best - out.v[i]));
                out.v[i] = best;
                out.policy[i] = best_a;
            }
        if (max_change < 1e-9) break;
    }
    out.goal_reachable_from_start =
        out.v[static_cast<std::size_t>(spec.index(spec.start))] > kCollisionReward + 0.25;
    return out;
}

Trajectory expert_trajectory(const GridSpec& spec, const ValueIterationResult& vi) {
    Trajectory traj;
    Pos pos = spec.start;
    for (int t = 0; t < kHorizon; ++t) {
        int action = vi.policy[static_cast<std::size_t>(spec.index(pos))];
        StepResult r = step(spec, pos, action);
        traj.steps.push_back({pos, action, r.reward, 0.0});
        if (r.kind != StepKind::Move) {
            traj.terminal = r.kind;
            traj.final_pos = r.next;
            break;
        }
        pos = r.next;
    }
    if (traj.terminal != StepKind::Success)
        throw std::runtime_error("expert_trajectory: expert rollout did not reach the goal");
    double suffix = 0.0;
    for (auto it = traj.steps.rbegin(); it != traj.steps.rend(); ++it) {
        suffix = it->reward + suffix;
        it->q = suffix;
    }
    return traj;
}

Dataset generate_dataset(Variant variant, int n_trajectories, std::uint64_t seed) {
    if (n_trajectories < 1) throw std::invalid_argument("generate_dataset: need at least one trajectory");
    Dataset ds;
    ds.variant = variant;
    ds.seed = seed;
    Rng master(seed);
    Rng rng = master.stream("dataset-layouts");
    for (int i = 0; i < n_trajectories; ++i) {
        GridSpec spec;
        ValueIterationResult vi;
        do {
            spec = random_spec(variant, rng);
            vi = value_iteration(spec);
        } while (!vi.goal_reachable_from_start);   // cannot occur with this geometry; guarded anyway
        ds.records.push_back({spec, expert_trajectory(spec, vi)});
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset io

namespace {

using Json = nlohmann::ordered_json;

std::string walls_string(const GridSpec& spec) {
    std::string s(spec.walls.size(), '0');
    for (std::size_t i = 0; i < spec.walls.size(); ++i)
        if (spec.walls[i]) s[i] = '1';
    return s;
}

Json pos_json(Pos p) { return Json::array({p.x, p.y}); }

Pos pos_from_json(const Json& j) { return Pos{j.at(0).get<int>(), j.at(1).get<int>()}; }

} // namespace

std::string serialize_dataset(const Dataset& ds) {
    std::ostringstream out;
    Json header;
    header["schema_version"] = ds.schema_version;
    header["kind"] = "nav-dataset";
    header["variant"] = variant_name(ds.variant);
    header["seed"] = ds.seed;
    header["count"] = ds.records.size();
    out << header.dump() << "\n";
    for (const auto& rec : ds.records) {
        Json j;
        j["walls"] = walls_string(rec.spec);
        Json exits = Json::array();
        for (Pos e : rec.spec.exits) exits.push_back(pos_json(e));
        j["exits"] = exits;
        j["start"] = pos_json(rec.spec.start);
        j["goal"] = pos_json(rec.spec.goal);
        Json steps = Json::array();
        for (const TrajStep& s : rec.traj.steps)
            steps.push_back(Json::array({s.pos.x, s.pos.y, s.action, s.reward, s.q}));
        j["steps"] = steps;
        j["final"] = pos_json(rec.traj.final_pos);
        j["terminal"] = "success";
        out << j.dump() << "\n";
    }
    return out.str();
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << serialize_dataset(ds);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("dataset " + path + ": empty file");
    Json header = Json::parse(line);
    Dataset ds;
    ds.schema_version = header.at("schema_version").get<int>();
    if (ds.schema_version != 1)
        throw std::runtime_error("dataset " + path + ": unsupported schema version " +
                                 std::to_string(ds.schema_version));
    ds.variant = variant_from_string(header.at("variant").get<std::string>());
    ds.seed = header.at("seed").get<std::uint64_t>();
    std::size_t count = header.at("count").get<std::size_t>();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Json j = Json::parse(line);
        TrajectoryRecord rec;
        rec.spec.variant = ds.variant;
        std::string walls = j.at("walls").get<std::string>();
        if (walls.size() != static_cast<std::size_t>(rec.spec.width * rec.spec.height))
            throw std::runtime_error("dataset " + path + ": bad wall bitmap length");
        rec.spec.walls.resize(walls.size());
        for (std::size_t i = 0; i < walls.size(); ++i) rec.spec.walls[i] = walls[i] == '1';
        for (const auto& e : j.at("exits")) rec.spec.exits.push_back(pos_from_json(e));
        rec.spec.start = pos_from_json(j.at("start"));
        rec.spec.goal = pos_from_json(j.at("goal"));
        for (const auto& s : j.at("steps")) {
            TrajStep ts;
            ts.pos = {s.at(0).get<int>(), s.at(1).get<int>()};
            ts.action = s.at(2).get<int>();
            ts.reward = s.at(3).get<double>();
            ts.q = s.at(4).get<double>();
            rec.traj.steps.push_back(ts);
        }
        rec.traj.final_pos = pos_from_json(j.at("final"));
        rec.traj.terminal = StepKind::Success;
        ds.records.push_back(std::move(rec));
    }
    if (ds.records.size() != count)
        throw std::runtime_error("dataset " + path + ": header count " + std::to_string(count) +
                                 " != " + std::to_string(ds.records.size()) + " records");
    return ds;
}

std::vector<double> encode_state(const GridSpec& spec, Pos pos) {
    std::vector<double> s;
    s.reserve(kStateDim);
    double norm = static_cast<double>(spec.width - 1);
    s.push_back(pos.x / norm);
    s.push_back(pos.y / norm);
    s.push_back(spec.goal.x / norm);
    s.push_back(spec.goal.y / norm);
    s.push_back(spec.wall({pos.x, pos.y - 1}) ? 1.0 : 0.0);
    s.push_back(spec.wall({pos.x, pos.y + 1}) ? 1.0 : 0.0);
    s.push_back(spec.wall({pos.x - 1, pos.y}) ? 1.0 : 0.0);
    s.push_back(spec.wall({pos.x + 1, pos.y}) ? 1.0 : 0.0);
    for (std::uint8_t w : spec.walls) s.push_back(static_cast<double>(w));
    return s;
}

Metrics evaluate_policy(const Agent& agent, Variant variant, int episodes, std::uint64_t seed) {
    if (episodes < 1) throw std::invalid_argument("evaluate_policy: episodes must be >= 1");
    Metrics m;
    int successes = 0, collisions = 0, timeouts = 0;
    Rng master(seed);
    for (int e = 0; e < episodes; ++e) {
        Rng rng = master.stream("eval-episode", static_cast<std::uint64_t>(e));
        GridSpec spec = random_spec(variant, rng);
        Pos pos = spec.start;
        double ret = 0.0;
        StepKind outcome = StepKind::Move;
        for (int t = 0; t < kHorizon; ++t) {
            std::size_t action = agent(spec, pos);
            StepResult r = step(spec, pos, static_cast<int>(action));
            ret += r.reward;
            if (r.kind != StepKind::Move) {
                outcome = r.kind;
                break;
            }
            pos = r.next;
        }
        if (outcome == StepKind::Success)
            ++successes;
        else if (outcome == StepKind::Collision)
            ++collisions;
        else
            ++timeouts;
        m.episode_returns.push_back(ret);
    }
    double n = static_cast<double>(episodes);
    m.success_rate = successes / n;
    m.collision_rate = collisions / n;
    m.timeout_rate = timeouts / n;
    double total = 0.0;
    for (double r : m.episode_returns) total += r;
    m.mean_return = total / n;
    return m;
}

} // namespace dts
