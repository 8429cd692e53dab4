#pragma once

// Small untrained graphs for fast structural tests.

#include <string>
#include <vector>

#include "flg/graph.hpp"
#include "flg/rng.hpp"

namespace flg::testing {

inline NodeSpec tiny_node(std::string name, int d_model, int n_layers, std::uint64_t seed, int prefix_token) {
  NodeSpec s;
  s.name = std::move(name);
  s.vocab_size = 40;
  s.d_model = d_model;
  s.n_layers = n_layers;
  s.n_heads = 2;
  s.d_ff = 2 * d_model;
  s.max_seq = 12;
  s.seed = seed;
  s.framing_prefix = {prefix_token, prefix_token + 1};
  return s;
}

inline GraphConfig tiny_graph_config(std::uint64_t seed = 3) {
  GraphConfig c;
  c.layer1 = {tiny_node("a", 12, 3, 101, 30), tiny_node("b", 10, 4, 102, 32), tiny_node("c", 14, 3, 103, 34)};
  c.layer2 = {tiny_node("d", 16, 5, 104, 36), tiny_node("e", 18, 6, 105, 38)};
  c.d_s = 8;
  c.seed = seed;
  return c;
}

inline Graph build_graph(const GraphConfig& config) {
  std::vector<TransformerNode> nodes;
  for (const auto* group : {&config.layer1, &config.layer2}) {
    for (const auto& spec : *group) {
      nodes.emplace_back(spec);
      nodes.back().freeze();
    }
  }
  return Graph(config, std::move(nodes));
}

inline Graph tiny_graph(std::uint64_t seed = 3) { return build_graph(tiny_graph_config(seed)); }

inline std::vector<int> random_tokens(Rng& rng, int length = 6) {
  std::vector<int> t(static_cast<std::size_t>(length));
  for (auto& x : t) x = static_cast<int>(uniform_index(rng, 30));
  return t;
}

}  // namespace flg::testing
