#pragma once

#include "dts/rng.hpp"
#include "dts/world_model.hpp"

#include <iosfwd>
#include <optional>

namespace dts {

// Node of the search tree. Latents, rewards and values are handles into
// the tape the search runs on; the tree must not outlive its tape.
struct SearchNode {
    int id = 0;
    int parent = -1;           // -1 at root
    int action = -1;           // incoming action, -1 at root
    Tensor latent;
    Tensor incoming_reward;    // R(h_parent, action); empty at root
    Tensor path_reward_sum;    // sum of incoming rewards from the root
    Tensor leaf_value;         // V(latent), computed once at creation
    Tensor path_value;         // path_reward_sum + leaf_value
    std::vector<int> children; // per-action ids; empty until expanded
    std::vector<Tensor> q;     // per-action Q once expanded
    Tensor backup_value;       // leaf_value while leaf, max_a q after

    bool is_leaf() const { return children.empty(); }
};

struct TrialRecord {
    int chosen = -1;      // node expanded this trial
    Tensor log_prob;      // log pi(chosen | tree) under the expansion policy
    Tensor root_q;        // (|A|,) root Q snapshot after this trial
};

struct SearchTree {
    const WorldModel* model = nullptr;
    Tape* tape = nullptr;
    std::vector<SearchNode> nodes;
    std::vector<int> open;             // candidate set, ascending ids
    std::vector<TrialRecord> trials;
    int trial_count = 0;

    const SearchNode& root() const { return nodes.front(); }
};

enum class SearchMode { Stochastic, Greedy, Replay };

// Root node from an encoded state; open set = {root}.
SearchTree begin_search(const WorldModel& model, Tape& tape, std::span<const double> state);

// Total path value of a candidate node (root-to-node reward sum plus its
// value estimate). Rejects nodes that are already expanded.
Tensor path_value(const SearchTree& tree, int node);

// Softmax distribution over the candidate set, by ascending node id.
struct PolicyEval {
    std::vector<int> candidates;
    Tensor log_probs;   // (k,)
    std::vector<double> probs;
};
PolicyEval expansion_policy(SearchTree& tree);

// Create all |A| children of a candidate node and update the open set.
void expand(SearchTree& tree, int node);

// Full recursive Bellman backup over the current tree. Leaf values come
// from the value module; internal values are max over actions; reward
// tensors are reused from expansion. root_q is present iff the root has
// been expanded.
struct BackupResult {
    Tensor root_value;
    std::optional<Tensor> root_q;
};
BackupResult backup(SearchTree& tree);

struct SearchResult {
    Tensor root_q;   // (|A|,)
    SearchTree tree;

    std::vector<Tensor> per_trial_root_q() const;
};

// Best-first search: `trials` node expansions, then root Q-values from the
// Bellman backup. Stochastic mode samples expansion nodes from the softmax
// policy (rng required); greedy picks the highest total path value with
// lowest-id tie-break; replay forces the given node sequence.
SearchResult dts_search(const WorldModel& model, Tape& tape, std::span<const double> state,
                        int trials, SearchMode mode, Rng* rng = nullptr,
                        std::span<const int> forced = {});

// Full tree expansion to exact depth d followed by a Bellman backup.
SearchResult treeqn_search(const WorldModel& model, Tape& tape, std::span<const double> state, int depth);

// Argmax with lowest-index tie-break.
std::size_t act_greedy(std::span<const double> root_q);

// Nodes, parents, actions, path values and the chosen trial sequence as JSON.
void dump_tree(const SearchTree& tree, std::ostream& out);

// Process-wide count of search invocations (dts + treeqn), used to verify
// that training paths which must not search actually do not.
long search_invocations();
void reset_search_invocations();

} // namespace dts
