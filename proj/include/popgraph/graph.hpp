#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "popgraph/errors.hpp"
#include "popgraph/rng.hpp"
#include "popgraph/similarity.hpp"

// Directed k-NN population graphs with the structural quantities Graphormer
// consumes: degrees, capped shortest-path distances, and binned edge
// similarities.
namespace popgraph {

struct PopulationGraph {
    std::vector<std::string> node_ids;
    std::vector<std::vector<std::size_t>> neighbors; // out-edges, most similar first
    std::vector<std::vector<double>> edge_sims;      // aligned with neighbors
    std::vector<std::size_t> in_degree;
    std::vector<std::size_t> out_degree;
    std::vector<int> spd;       // n x n capped hop distances; cap+1 = far/unreachable
    std::vector<int> edge_bins; // n x n; 0 = no edge, 1..n_bins otherwise
    std::size_t n = 0;
    int spd_cap = 5;
    std::size_t n_sim_bins = 8;

    int spd_at(std::size_t i, std::size_t j) const { return spd[i * n + j]; }
    int bin_at(std::size_t i, std::size_t j) const { return edge_bins[i * n + j]; }

    // vocabulary sizes for the embedding tables
    std::size_t spd_vocab() const { return static_cast<std::size_t>(spd_cap) + 2; } // 0..cap, far
    std::size_t edge_bin_vocab() const { return n_sim_bins + 1; }                   // 0 = no edge
};

inline int edge_similarity_bin(double sim, std::size_t n_bins) {
    const auto raw = static_cast<long>(sim * static_cast<double>(n_bins));
    const long capped = std::clamp(raw, 0L, static_cast<long>(n_bins) - 1);
    return 1 + static_cast<int>(capped);
}

inline PopulationGraph knn_graph(const SimilarityMatrix& sim, std::size_t k,
                                 std::vector<std::string> node_ids,
                                 int spd_cap = 5, std::size_t n_sim_bins = 8) {
    const std::size_t n = sim.n;
    if (n < 2) throw ConfigError("knn graph needs at least 2 nodes");
    if (k < 1 || k >= n) throw ConfigError("knn graph needs 1 <= k < n");
    if (node_ids.size() != n) throw ConfigError("node id count does not match similarity matrix");

    PopulationGraph g;
    g.node_ids = std::move(node_ids);
    g.n = n;
    g.spd_cap = spd_cap;
    g.n_sim_bins = n_sim_bins;
    g.neighbors.resize(n);
    g.edge_sims.resize(n);
    g.in_degree.assign(n, 0);
    g.out_degree.assign(n, 0);
    g.edge_bins.assign(n * n, 0);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order.resize(n);
        std::iota(order.begin(), order.end(), 0);
        order.erase(order.begin() + static_cast<long>(i));
        // most similar first; ties broken by lower node index
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (sim.at(i, a) != sim.at(i, b)) return sim.at(i, a) > sim.at(i, b);
            return a < b;
        });
        order.resize(k);
        g.neighbors[i] = order;
        g.out_degree[i] = k;
        for (std::size_t j : order) {
            g.edge_sims[i].push_back(sim.at(i, j));
            g.in_degree[j] += 1;
            g.edge_bins[i * n + j] = edge_similarity_bin(sim.at(i, j), n_sim_bins);
        }
    }

    // undirected support for shortest paths
    std::vector<std::vector<std::size_t>> undirected(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j : g.neighbors[i]) {
            undirected[i].push_back(j);
            undirected[j].push_back(i);
        }
    }
    for (auto& adj : undirected) {
        std::sort(adj.begin(), adj.end());
        adj.erase(std::unique(adj.begin(), adj.end()), adj.end());
    }

    const int far = spd_cap + 1;
    g.spd.assign(n * n, far);
    std::vector<int> dist(n);
    std::deque<std::size_t> queue;
    for (std::size_t src = 0; src < n; ++src) {
        std::fill(dist.begin(), dist.end(), -1);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        while (!queue.empty()) {
            const std::size_t u = queue.front();
            queue.pop_front();
            if (dist[u] >= spd_cap) continue; // deeper nodes stay at the sentinel
            for (std::size_t v : undirected[u]) {
                if (dist[v] < 0) {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            g.spd[src * n + j] = (dist[j] >= 0 && dist[j] <= spd_cap) ? dist[j] : far;
        }
    }
    return g;
}

// Random disjoint groups of at most group_size ids, proportionally
// interleaving the fold's splits so every group sees train, validation, and
// test patients whenever the split sizes allow it.
inline std::vector<std::vector<std::string>> partition_subgraphs(
    const std::vector<std::vector<std::string>>& splits, std::size_t group_size,
    std::uint64_t seed) {
    if (group_size < 2) throw ConfigError("subgraph group size must be >= 2");
    struct Entry {
        double key;
        std::size_t split;
        std::size_t rank;
        const std::string* id;
    };
    std::vector<Entry> entries;
    std::vector<std::vector<std::string>> shuffled(splits.size());
    std::size_t total = 0;
    for (std::size_t s = 0; s < splits.size(); ++s) {
        shuffled[s] = splits[s];
        Rng rng(mix_seed(seed, fnv1a("partition"), s));
        rng.shuffle(shuffled[s]);
        const auto m = static_cast<double>(shuffled[s].size());
        for (std::size_t r = 0; r < shuffled[s].size(); ++r) {
            entries.push_back({(static_cast<double>(r) + 0.5) / m, s, r, &shuffled[s][r]});
        }
        total += shuffled[s].size();
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.key != b.key) return a.key < b.key;
        if (a.split != b.split) return a.split < b.split;
        return a.rank < b.rank;
    });
    std::vector<std::vector<std::string>> groups;
    for (std::size_t pos = 0; pos < total; pos += group_size) {
        const std::size_t end = std::min(pos + group_size, total);
        std::vector<std::string> group;
        group.reserve(end - pos);
        for (std::size_t e = pos; e < end; ++e) group.push_back(*entries[e].id);
        groups.push_back(std::move(group));
    }
    return groups;
}

inline nlohmann::json graph_to_json(const PopulationGraph& g) {
    nlohmann::json j;
    j["node_ids"] = g.node_ids;
    nlohmann::json edges = nlohmann::json::array();
    for (std::size_t i = 0; i < g.n; ++i) {
        for (std::size_t e = 0; e < g.neighbors[i].size(); ++e) {
            const std::size_t dst = g.neighbors[i][e];
            edges.push_back({{"src", i},
                             {"dst", dst},
                             {"similarity", g.edge_sims[i][e]},
                             {"bin", g.bin_at(i, dst)}});
        }
    }
    j["edges"] = std::move(edges);
    j["in_degree"] = g.in_degree;
    j["out_degree"] = g.out_degree;
    nlohmann::json spd = nlohmann::json::array();
    for (std::size_t i = 0; i < g.n; ++i) {
        spd.push_back(std::vector<int>(g.spd.begin() + static_cast<long>(i * g.n),
                                       g.spd.begin() + static_cast<long>((i + 1) * g.n)));
    }
    j["spd"] = std::move(spd);
    return j;
}

} // namespace popgraph
