#include "dts/tree_search.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace dts {

namespace {

std::atomic<long> g_search_invocations{0};

bool in_open(const SearchTree& tree, int node) {
    return std::binary_search(tree.open.begin(), tree.open.end(), node);
}

} // namespace

long search_invocations() { return g_search_invocations.load(); }
void reset_search_invocations() { g_search_invocations.store(0); }

SearchTree begin_search(const WorldModel& model, Tape& tape, std::span<const double> state) {
    SearchTree tree;
    tree.model = &model;
    tree.tape = &tape;
    SearchNode root;
    root.id = 0;
    root.latent = model.encode(tape, state);
    root.path_reward_sum = tape.constant_scalar(0.0);
    root.leaf_value = model.value(tape, root.latent);
    root.path_value = tape.add(root.path_reward_sum, root.leaf_value);
    root.backup_value = root.leaf_value;
    tree.nodes.push_back(std::move(root));
    tree.open.push_back(0);
    return tree;
}

Tensor path_value(const SearchTree& tree, int node) {
    if (node < 0 || node >= static_cast<int>(tree.nodes.size()))
        throw std::invalid_argument("path_value: unknown node " + std::to_string(node));
    if (!in_open(tree, node))
        throw std::invalid_argument("path_value: node " + std::to_string(node) + " is already expanded");
    return tree.nodes[static_cast<std::size_t>(node)].path_value;
}

PolicyEval expansion_policy(SearchTree& tree) {
    if (tree.open.empty()) throw std::invalid_argument("expansion_policy: candidate set is empty");
    PolicyEval out;
    out.candidates = tree.open;
    std::vector<Tensor> values;
    values.reserve(out.candidates.size());
    for (int id : out.candidates) values.push_back(tree.nodes[static_cast<std::size_t>(id)].path_value);
    Tensor stacked = tree.tape->concat(values);
    out.log_probs = tree.tape->log_softmax(stacked);
    out.probs.resize(out.candidates.size());
    for (std::size_t i = 0; i < out.probs.size(); ++i) out.probs[i] = std::exp(out.log_probs.data()[i]);
    return out;
}

void expand(SearchTree& tree, int node) {
    auto it = std::lower_bound(tree.open.begin(), tree.open.end(), node);
    if (it == tree.open.end() || *it != node)
        throw std::invalid_argument("expand: node " + std::to_string(node) +
                                    " is not in the candidate set");
    tree.open.erase(it);

    const WorldModel& model = *tree.model;
    Tape& tape = *tree.tape;
    const std::size_t action_count = model.action_count();
    SearchNode& parent = tree.nodes[static_cast<std::size_t>(node)];
    parent.children.reserve(action_count);

    std::vector<int> child_ids;
    child_ids.reserve(action_count);
    for (std::size_t a = 0; a < action_count; ++a) {
        SearchNode child;
        child.id = static_cast<int>(tree.nodes.size());
        child.parent = node;
        child.action = static_cast<int>(a);
        // parent reference may dangle after push_back; fetch fields first
        Tensor parent_latent = tree.nodes[static_cast<std::size_t>(node)].latent;
        Tensor parent_path_sum = tree.nodes[static_cast<std::size_t>(node)].path_reward_sum;
        child.latent = model.transition(tape, parent_latent, a);
        child.incoming_reward = model.reward(tape, parent_latent, a);
        child.path_reward_sum = tape.add(parent_path_sum, child.incoming_reward);
        child.leaf_value = model.value(tape, child.latent);
        child.path_value = tape.add(child.path_reward_sum, child.leaf_value);
        child.backup_value = child.leaf_value;
        child_ids.push_back(child.id);
        tree.nodes.push_back(std::move(child));
    }
    tree.nodes[static_cast<std::size_t>(node)].children = child_ids;
    tree.open.insert(tree.open.end(), child_ids.begin(), child_ids.end());
    ++tree.trial_count;
}

namespace {

// Recompute Q and V along the path from `node` to the root after `node`
// was expanded. Equivalent to a fresh full backup (bitwise: the reused
// subtree tensors are the same operands in the same order) at a cost of
// O(depth * |A|) tape ops per trial.
Tensor backup_path_to_root(SearchTree& tree, int node) {
    Tape& tape = *tree.tape;
    int cur = node;
    while (cur >= 0) {
        SearchNode& n = tree.nodes[static_cast<std::size_t>(cur)];
        std::vector<Tensor> qs;
        qs.reserve(n.children.size());
        n.q.clear();
        for (int cid : n.children) {
            const SearchNode& c = tree.nodes[static_cast<std::size_t>(cid)];
            n.q.push_back(tape.add(c.incoming_reward, c.backup_value));
            qs.push_back(n.q.back());
        }
        n.backup_value = tape.max_reduce(tape.concat(qs));
        cur = n.parent;
    }
    SearchNode& root = tree.nodes.front();
    return tape.concat(root.q);
}

Tensor full_backup_value(SearchTree& tree, int node) {
    SearchNode& n = tree.nodes[static_cast<std::size_t>(node)];
    if (n.is_leaf()) {
        n.backup_value = n.leaf_value;
        return n.leaf_value;
    }
    Tape& tape = *tree.tape;
    std::vector<Tensor> qs;
    qs.reserve(n.children.size());
    n.q.clear();
    for (int cid : n.children) {
        Tensor child_value = full_backup_value(tree, cid);
        const SearchNode& c = tree.nodes[static_cast<std::size_t>(cid)];
        n.q.push_back(tape.add(c.incoming_reward, child_value));
        qs.push_back(n.q.back());
    }
    n.backup_value = tape.max_reduce(tape.concat(qs));
    return n.backup_value;
}

} // namespace

BackupResult backup(SearchTree& tree) {
    if (tree.nodes.empty()) throw std::invalid_argument("backup: empty tree");
    BackupResult out;
    out.root_value = full_backup_value(tree, 0);
    const SearchNode& root = tree.nodes.front();
    if (!root.is_leaf()) out.root_q = tree.tape->concat(root.q);
    return out;
}

std::vector<Tensor> SearchResult::per_trial_root_q() const {
    std::vector<Tensor> out;
    out.reserve(tree.trials.size());
    for (const auto& t : tree.trials) out.push_back(t.root_q);
    return out;
}

SearchResult dts_search(const WorldModel& model, Tape& tape, std::span<const double> state,
                        int trials, SearchMode mode, Rng* rng, std::span<const int> forced) {
    if (trials < 1) throw std::invalid_argument("dts_search: trials must be >= 1");
    if (mode == SearchMode::Stochastic && rng == nullptr)
        throw std::invalid_argument("dts_search: stochastic mode needs an rng");
    if (mode == SearchMode::Replay && static_cast<int>(forced.size()) != trials)
        throw std::invalid_argument("dts_search: replay sequence length must equal trials");
    g_search_invocations.fetch_add(1, std::memory_order_relaxed);

    SearchTree tree = begin_search(model, tape, state);
    for (int t = 0; t < trials; ++t) {
        PolicyEval policy = expansion_policy(tree);
        std::size_t pick = 0;
        switch (mode) {
            case SearchMode::Stochastic:
                pick = rng->sample_discrete(policy.probs);
                break;
            case SearchMode::Greedy: {
                // highest total path value; ties go to the lowest node id
                double best = -1e300;
                for (std::size_t i = 0; i < policy.candidates.size(); ++i) {
                    double v = tree.nodes[static_cast<std::size_t>(policy.candidates[i])].path_value.value();
                    if (v > best) {
                        best = v;
                        pick = i;
                    }
                }
                break;
            }
            case SearchMode::Replay: {
                int want = forced[static_cast<std::size_t>(t)];
                auto it = std::find(policy.candidates.begin(), policy.candidates.end(), want);
                if (it == policy.candidates.end())
                    throw std::invalid_argument("dts_search: replay node " + std::to_string(want) +
                                                " is not a candidate at trial " + std::to_string(t + 1));
                pick = static_cast<std::size_t>(it - policy.candidates.begin());
                break;
            }
        }
        int chosen = policy.candidates[pick];
        std::size_t sel[] = {pick};
        TrialRecord rec;
        rec.chosen = chosen;
        rec.log_prob = tape.index_select(policy.log_probs, sel);
        expand(tree, chosen);
        rec.root_q = backup_path_to_root(tree, chosen);
        tree.trials.push_back(std::move(rec));
    }

    SearchResult result;
    result.root_q = tree.trials.back().root_q;
    result.tree = std::move(tree);
    return result;
}

SearchResult treeqn_search(const WorldModel& model, Tape& tape, std::span<const double> state, int depth) {
    if (depth < 1) throw std::invalid_argument("treeqn_search: depth must be >= 1");
    g_search_invocations.fetch_add(1, std::memory_order_relaxed);

    SearchTree tree = begin_search(model, tape, state);
    std::vector<int> level{0};
    for (int d = 0; d < depth; ++d) {
        std::vector<int> next;
        next.reserve(level.size() * model.action_count());
        for (int id : level) {
            expand(tree, id);
            const auto& children = tree.nodes[static_cast<std::size_t>(id)].children;
            next.insert(next.end(), children.begin(), children.end());
        }
        level = std::move(next);
    }
    BackupResult b = backup(tree);
    SearchResult result;
    result.root_q = *b.root_q;
    result.tree = std::move(tree);
    return result;
}

std::size_t act_greedy(std::span<const double> root_q) {
    if (root_q.empty()) throw std::invalid_argument("act_greedy: empty Q vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < root_q.size(); ++i)
        if (root_q[i] > root_q[best]) best = i;
    return best;
}

void dump_tree(const SearchTree& tree, std::ostream& out) {
    nlohmann::json j;
    j["nodes"] = nlohmann::json::array();
    for (const auto& n : tree.nodes) {
        nlohmann::json jn;
        jn["id"] = n.id;
        jn["parent"] = n.parent;
        jn["action"] = n.action;
        jn["path_value"] = n.path_value.value();
        jn["expanded"] = !n.is_leaf();
        j["nodes"].push_back(std::move(jn));
    }
    j["chosen"] = nlohmann::json::array();
    for (const auto& t : tree.trials) j["chosen"].push_back(t.chosen);
    if (!tree.trials.empty()) j["root_q"] = tree.trials.back().root_q.data();
    out << j.dump(2) << "\n";
}

} // namespace dts
