#pragma once

#include "dts/rng.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace dts {

// 20x20 navigation grid with a central 10x10 hall. Walls cover the outer
// boundary and the hall perimeter minus one or two single-cell exits. The
// robot starts inside the hall, the goal lies outside it.
//
// Rewards: step -0.01; reaching the goal +0.99 (terminal); moving into a
// wall -1 (terminal). Episodes cap at 400 steps.

enum class Variant { TwoExit, OneExit };
const char* variant_name(Variant v);
Variant variant_from_string(const std::string& s);

struct Pos {
    int x = 0;
    int y = 0;
    bool operator==(const Pos&) const = default;
};

constexpr int kGridSize = 20;
constexpr int kActionCount = 4;   // up, down, left, right
constexpr int kHorizon = 400;
constexpr double kStepReward = -0.01;
constexpr double kGoalReward = 0.99;
constexpr double kCollisionReward = -1.0;
constexpr int kExitWidth = 3;
// position/goal coordinates, the four adjacent wall bits, then the bitmap
constexpr std::size_t kStateDim = 4 + 4 + kGridSize * kGridSize;

struct GridSpec {
    int width = kGridSize;
    int height = kGridSize;
    std::vector<std::uint8_t> walls;   // row-major, 1 = wall
    std::vector<Pos> exits;            // all gap cells, kExitWidth per exit
    Pos start;
    Pos goal;
    Variant variant = Variant::TwoExit;

    int index(Pos p) const { return p.y * width + p.x; }
    bool wall(Pos p) const {
        if (p.x < 0 || p.y < 0 || p.x >= width || p.y >= height) return true;
        return walls[static_cast<std::size_t>(index(p))] != 0;
    }
};

// Fresh layout: random exit gaps on distinct hall sides, random start
// inside the hall, random goal outside it.
GridSpec random_spec(Variant variant, Rng& rng);

enum class StepKind { Move, Success, Collision };

struct StepResult {
    Pos next;
    double reward = 0.0;
    StepKind kind = StepKind::Move;
};

StepResult step(const GridSpec& spec, Pos pos, int action);

// Exact undiscounted optimal values via Bellman-optimality sweeps
// (convergence threshold 1e-9). Greedy ties resolve in action order
// up, down, left, right.
struct ValueIterationResult {
    std::vector<double> v;        // per cell; walls untouched
    std::vector<int> policy;      // per cell
    int sweeps = 0;
    bool goal_reachable_from_start = false;
};

ValueIterationResult value_iteration(const GridSpec& spec);

struct TrajStep {
    Pos pos;
    int action = 0;
    double reward = 0.0;
    double q = 0.0;    // reward suffix sum
};

struct Trajectory {
    std::vector<TrajStep> steps;
    Pos final_pos;
    StepKind terminal = StepKind::Success;
};

// Greedy rollout of the value-iteration policy; Q targets are reward
// suffix sums.
Trajectory expert_trajectory(const GridSpec& spec, const ValueIterationResult& vi);

struct TrajectoryRecord {
    GridSpec spec;
    Trajectory traj;
};

struct Dataset {
    Variant variant = Variant::TwoExit;
    std::uint64_t seed = 0;
    int schema_version = 1;
    std::vector<TrajectoryRecord> records;
};

// One fresh random layout per trajectory, expert rollout each.
Dataset generate_dataset(Variant variant, int n_trajectories, std::uint64_t seed);

// Newline-delimited JSON, one trajectory per line after a header record.
std::string serialize_dataset(const Dataset& ds);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Model input: normalized (x, y, goal_x, goal_y), the four neighboring wall
// bits (up, down, left, right), then the flattened wall bitmap.
std::vector<double> encode_state(const GridSpec& spec, Pos pos);

using Agent = std::function<std::size_t(const GridSpec&, Pos)>;

struct Metrics {
    double success_rate = 0.0;
    double collision_rate = 0.0;
    double timeout_rate = 0.0;
    double mean_return = 0.0;
    std::vector<double> episode_returns;
};

// Fresh random layouts per episode, derived from `seed`; episodes cap at
// kHorizon steps.
Metrics evaluate_policy(const Agent& agent, Variant variant, int episodes, std::uint64_t seed);

} // namespace dts
