#include "flg/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <future>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "flg/checkpoint.hpp"
#include "flg/errors.hpp"
#include "flg/rng.hpp"

namespace flg {

namespace pt = boost::property_tree;

// ---------------------------------------------------------------------------
// Config schema

namespace {

/// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    out.push_back(std::stoi(item, &used));
    if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
  }
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument(s);
}

template <typename T>
T parse_number(const std::string& s) {
  std::size_t used = 0;
  T v;
  if constexpr (std::is_same_v<T, double>) {
    v = std::stod(s, &used);
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
    v = std::stoull(s, &used);
  } else {
    v = static_cast<T>(std::stoi(s, &used));
  }
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Field number(const char* section, const char* key, T RunConfig::*member) {
  return {section, key,
          [member](const RunConfig& c) {
            if constexpr (std::is_same_v<T, double>) return format_double(c.*member);
            else return std::to_string(c.*member);
          },
          [member](RunConfig& c, const std::string& s) { c.*member = parse_number<T>(s); }};
}

template <typename S, typename T>
Field nested(const char* section, const char* key, S RunConfig::*outer, T S::*inner) {
  return {section, key,
          [outer, inner](const RunConfig& c) {
            if constexpr (std::is_same_v<T, double>) return format_double(c.*outer.*inner);
            else if constexpr (std::is_same_v<T, std::vector<int>>) return format_int_list(c.*outer.*inner);
            else return std::to_string(c.*outer.*inner);
          },
          [outer, inner](RunConfig& c, const std::string& s) {
            if constexpr (std::is_same_v<T, std::vector<int>>) c.*outer.*inner = parse_int_list(s);
            else c.*outer.*inner = parse_number<T>(s);
          }};
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      {"run", "name", [](const RunConfig& c) { return c.name; }, [](RunConfig& c, const std::string& s) { c.name = s; }},
      number("run", "seed", &RunConfig::seed),
      nested("task", "num_keys", &RunConfig::task, &TaskConfig::num_keys),
      nested("task", "num_answers", &RunConfig::task, &TaskConfig::num_answers),
      nested("task", "n_shards", &RunConfig::task, &TaskConfig::n_shards),
      nested("task", "shard_coverage", &RunConfig::task, &TaskConfig::shard_coverage),
      nested("task", "dataset_size", &RunConfig::task, &TaskConfig::dataset_size),
      nested("task", "fact_copies", &RunConfig::task, &TaskConfig::fact_copies),
      nested("task", "practice_per_node", &RunConfig::task, &TaskConfig::practice_per_node),
      nested("nodes", "vocab_size", &RunConfig::nodes, &NodeLayout::vocab_size),
      nested("nodes", "max_seq", &RunConfig::nodes, &NodeLayout::max_seq),
      nested("nodes", "prefix_len", &RunConfig::nodes, &NodeLayout::prefix_len),
      nested("nodes", "ff_mult", &RunConfig::nodes, &NodeLayout::ff_mult),
      nested("nodes", "layer1_widths", &RunConfig::nodes, &NodeLayout::layer1_widths),
      nested("nodes", "layer1_layers", &RunConfig::nodes, &NodeLayout::layer1_layers),
      nested("nodes", "layer2_widths", &RunConfig::nodes, &NodeLayout::layer2_widths),
      nested("nodes", "layer2_layers", &RunConfig::nodes, &NodeLayout::layer2_layers),
      nested("nodes", "heads", &RunConfig::nodes, &NodeLayout::heads),
      nested("pretrain", "layer1_steps", &RunConfig::pretrain, &PretrainConfig::layer1_steps),
      nested("pretrain", "layer2_steps", &RunConfig::pretrain, &PretrainConfig::layer2_steps),
      nested("pretrain", "lr", &RunConfig::pretrain, &PretrainConfig::lr),
      nested("pretrain", "batch_size", &RunConfig::pretrain, &PretrainConfig::batch_size),
      nested("pretrain", "warmup_steps", &RunConfig::pretrain, &PretrainConfig::warmup_steps),
      number("graph", "d_s", &RunConfig::d_s),
      number("graph", "alpha", &RunConfig::alpha),
      number("graph", "l_T", &RunConfig::l_T),
      number("graph", "l_S", &RunConfig::l_S),
      {"graph", "inject_positions",
       [](const RunConfig& c) { return std::string(c.inject_positions == InjectPositions::kAll ? "all" : "last"); },
       [](RunConfig& c, const std::string& s) {
         if (s == "all") c.inject_positions = InjectPositions::kAll;
         else if (s == "last") c.inject_positions = InjectPositions::kLast;
         else throw std::invalid_argument(s);
       }},
      number("graph", "output_heads", &RunConfig::output_heads),
      number("graph", "n_classes", &RunConfig::n_classes),
      {"graph", "symmetric_layer2", [](const RunConfig& c) { return std::string(c.symmetric_layer2 ? "true" : "false"); },
       [](RunConfig& c, const std::string& s) { c.symmetric_layer2 = parse_bool(s); }},
      nested("train", "lr_proj", &RunConfig::train, &TrainConfig::lr_proj),
      nested("train", "lr_out", &RunConfig::train, &TrainConfig::lr_out),
      nested("train", "weight_decay", &RunConfig::train, &TrainConfig::weight_decay),
      nested("train", "clip_norm", &RunConfig::train, &TrainConfig::clip_norm),
      nested("train", "batch_size", &RunConfig::train, &TrainConfig::batch_size),
      nested("train", "epochs", &RunConfig::train, &TrainConfig::epochs),
      {"train", "schedule", [](const RunConfig& c) { return to_string(c.train.schedule); },
       [](RunConfig& c, const std::string& s) { c.train.schedule = parse_schedule(s); }},
      nested("train", "warmup_steps", &RunConfig::train, &TrainConfig::warmup_steps),
      nested("train", "eval_every", &RunConfig::train, &TrainConfig::eval_every),
      nested("train", "patience", &RunConfig::train, &TrainConfig::patience),
      nested("train", "min_steps", &RunConfig::train, &TrainConfig::min_steps),
      nested("train", "dead_node_window", &RunConfig::train, &TrainConfig::dead_node_window),
      {"baseline", "enabled", [](const RunConfig& c) { return std::string(c.run_baseline ? "true" : "false"); },
       [](RunConfig& c, const std::string& s) { c.run_baseline = parse_bool(s); }},
  };
  return fields;
}

void check_layout(const RunConfig& c) {
  const auto& n = c.nodes;
  if (n.layer1_widths.size() != kLayer1Nodes || n.layer1_layers.size() != kLayer1Nodes) {
    throw ConfigError("nodes.layer1_widths and nodes.layer1_layers need 3 entries");
  }
  if (n.layer2_widths.size() != kLayer2Nodes || n.layer2_layers.size() != kLayer2Nodes) {
    throw ConfigError("nodes.layer2_widths and nodes.layer2_layers need 2 entries");
  }
  if (n.heads.size() != kEdges) throw ConfigError("nodes.heads needs 5 entries");
  if (n.prefix_len < 0 || n.ff_mult <= 0) throw ConfigError("nodes.prefix_len and nodes.ff_mult are out of range");
  const Vocabulary v{c.task.num_keys, c.task.num_answers};
  if (v.reserved_begin() + kEdges * n.prefix_len > n.vocab_size) {
    throw ConfigError("nodes.vocab_size is too small for the task tokens plus the framing prefixes");
  }
  if (c.task.practice_per_node < 0 || c.task.fact_copies <= 0) throw ConfigError("task corpus sizes out of range");
  if (c.pretrain.layer1_steps < 0 || c.pretrain.layer2_steps < 0) throw ConfigError("pretrain steps must be non-negative");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::set<std::string> known;
  RunConfig c;
  for (const auto& f : schema()) {
    const std::string path = std::string(f.section) + "." + f.key;
    known.insert(path);
    const auto section = tree.get_child_optional(pt::ptree::path_type(f.section, '/'));
    const auto value = section ? section->get_optional<std::string>(pt::ptree::path_type(f.key, '/')) : boost::none;
    if (!value) throw ConfigError("missing required config key '" + path + "'");
    try {
      f.set(c, *value);
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + path + "': " + e.what());
    } catch (const std::exception&) {
      throw ConfigError("config key '" + path + "' has an invalid value '" + *value + "'");
    }
  }
  for (const auto& [section, body] : tree) {
    for (const auto& [key, value] : body) {
      if (!known.count(section + "." + key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
    }
  }
  check_layout(c);
  c.train.validate();
  c.graph_config().validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize_run_config(const RunConfig& config) {
  std::string out;
  std::string current;
  for (const auto& f : schema()) {
    if (current != f.section) {
      if (!current.empty()) out += '\n';
      current = f.section;
      out += "[" + current + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

std::vector<NodeSpec> RunConfig::node_specs() const {
  check_layout(*this);
  const Vocabulary v{task.num_keys, task.num_answers};
  static const char* kNames[kEdges] = {"node1", "node2", "node3", "node4", "node5"};
  std::vector<NodeSpec> specs;
  for (int i = 0; i < kEdges; ++i) {
    const bool first = i < kLayer1Nodes;
    const auto k = static_cast<std::size_t>(first ? i : i - kLayer1Nodes);
    NodeSpec s;
    s.name = kNames[i];
    s.vocab_size = nodes.vocab_size;
    s.d_model = first ? nodes.layer1_widths[k] : nodes.layer2_widths[k];
    s.n_layers = first ? nodes.layer1_layers[k] : nodes.layer2_layers[k];
    s.n_heads = nodes.heads[static_cast<std::size_t>(i)];
    s.d_ff = nodes.ff_mult * s.d_model;
    s.max_seq = nodes.max_seq;
    s.seed = derive_seed(seed, Stream::kNodeInit, static_cast<std::uint64_t>(i));
    for (int p = 0; p < nodes.prefix_len; ++p) s.framing_prefix.push_back(v.reserved_begin() + i * nodes.prefix_len + p);
    s.validate(v.reserved_begin());
    specs.push_back(std::move(s));
  }
  if (symmetric_layer2) {
    const std::string name = specs[4].name;
    specs[4] = specs[3];
    specs[4].name = name;
  }
  return specs;
}

GraphConfig RunConfig::graph_config() const {
  const auto specs = node_specs();
  GraphConfig g;
  g.layer1.assign(specs.begin(), specs.begin() + kLayer1Nodes);
  g.layer2.assign(specs.begin() + kLayer1Nodes, specs.end());
  g.d_s = d_s;
  g.alpha = alpha;
  g.l_T = l_T;
  g.l_S = l_S;
  g.inject_positions = inject_positions;
  g.output_heads = output_heads;
  g.n_classes = n_classes;
  g.seed = seed;
  g.mirror_layer2_edges = symmetric_layer2;
  return g;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

// ---------------------------------------------------------------------------
// Task and nodes

Task make_task(const RunConfig& config) {
  const auto& t = config.task;
  Task task;
  task.table = gen_fact_table(t.num_keys, t.num_answers, derive_seed(config.seed, Stream::kFactTable));
  task.distractor = gen_fact_table(t.num_keys, t.num_answers, derive_seed(config.seed, Stream::kFactTable, 1));
  task.shards = gen_skill_shards(task.table, t.n_shards, t.shard_coverage, derive_seed(config.seed, Stream::kShards));
  if (static_cast<int>(task.shards.size()) != kLayer1Nodes) throw ConfigError("task.n_shards must equal 3, one per layer-1 node");
  task.data = gen_mcq_dataset(task.table, t.dataset_size, derive_seed(config.seed, Stream::kDataset));
  task.data.shards = task.shards;
  return task;
}

std::vector<TokenSeq> node_corpus(const RunConfig& config, const Task& task, int index) {
  const auto seed = derive_seed(config.seed, Stream::kNodeCorpus, static_cast<std::uint64_t>(index));
  const bool layer1 = index < kLayer1Nodes;
  const FactTable& source = layer1 ? task.table : task.distractor;
  const Shard shard = layer1 ? task.shards[static_cast<std::size_t>(index)] : task.distractor.all_keys();
  auto corpus = gen_pretrain_corpus(source, shard, config.task.fact_copies, seed);
  auto practice = gen_mcq_practice(source, shard, config.task.practice_per_node, seed + 1);
  corpus.insert(corpus.end(), practice.begin(), practice.end());
  Rng rng(seed + 2);
  shuffle_in_place(corpus, rng);
  return corpus;
}

PretrainedNodes pretrain_all(const RunConfig& config, const Task& task, const LogFn& log) {
  const auto specs = config.node_specs();
  const int count = config.symmetric_layer2 ? kEdges - 1 : kEdges;
  // Nodes share nothing mutable, so each trains on its own thread; results
  // do not depend on scheduling.
  auto train_one = [&](int i) {
    TransformerNode node(specs[static_cast<std::size_t>(i)]);
    PretrainOptions opts;
    opts.steps = i < kLayer1Nodes ? config.pretrain.layer1_steps : config.pretrain.layer2_steps;
    opts.lr = config.pretrain.lr;
    opts.batch_size = config.pretrain.batch_size;
    opts.warmup_steps = config.pretrain.warmup_steps;
    opts.seed = derive_seed(config.seed, Stream::kNodePretrain, static_cast<std::uint64_t>(i));
    const auto corpus = node_corpus(config, task, i);
    auto curve = pretrain_node(node, corpus, opts);
    node.freeze();
    return std::make_pair(std::move(node), std::move(curve));
  };
  std::vector<std::future<std::pair<TransformerNode, std::vector<double>>>> jobs;
  for (int i = 0; i < count; ++i) jobs.push_back(std::async(std::launch::async, train_one, i));
  PretrainedNodes out;
  for (auto& job : jobs) {
    auto [node, curve] = job.get();
    if (log) {
      log(node.spec().name + ": " + std::to_string(curve.size()) + " steps, final loss " +
          (curve.empty() ? std::string("n/a") : format_double(curve.back())));
    }
    out.nodes.push_back(std::move(node));
    out.loss_curves.push_back(std::move(curve));
  }
  return out;
}

void save_node(const std::filesystem::path& path, const TransformerNode& node) {
  save_checkpoint(path, collect(node.named_parameters()));
}

TransformerNode load_node(const std::filesystem::path& path, const NodeSpec& spec) {
  if (!std::filesystem::exists(path)) {
    throw Error("missing node checkpoint " + path.string() + " (run pretrain-nodes first)");
  }
  TransformerNode node(spec);
  restore(node.named_parameters(), load_checkpoint(path));
  node.freeze();
  return node;
}

std::vector<TransformerNode> graph_nodes(const RunConfig& config, const std::vector<TransformerNode>& pretrained) {
  std::vector<TransformerNode> nodes(pretrained.begin(), pretrained.end());
  if (config.symmetric_layer2) {
    if (nodes.size() != kEdges - 1) throw InvalidInputError("symmetric control expects four pretrained nodes");
    NodeSpec spec = nodes[3].spec();
    spec.name = config.node_specs()[4].name;
    TransformerNode copy(spec);
    restore(copy.named_parameters(), collect(nodes[3].named_parameters()));
    copy.freeze();
    nodes.push_back(std::move(copy));
  }
  if (nodes.size() != kEdges) throw InvalidInputError("graph needs five nodes");
  return nodes;
}

std::vector<NodeAccuracy> layer1_accuracies(const Task& task, const std::vector<TransformerNode>& nodes) {
  std::vector<NodeAccuracy> out;
  const auto& vocab = task.data.vocab;
  for (int i = 0; i < kLayer1Nodes; ++i) {
    const auto& node = nodes[static_cast<std::size_t>(i)];
    const auto& shard = task.shards[static_cast<std::size_t>(i)];
    const std::set<FactKey> in(shard.begin(), shard.end());
    std::vector<McqExample> inside, outside;
    for (const auto& ex : task.data.test) {
      (in.count({ex.question[0], ex.question[1]}) ? inside : outside).push_back(ex);
    }
    out.push_back({node.spec().name, node_greedy_accuracy(node, task.data.test, vocab),
                   node_greedy_accuracy(node, inside, vocab), node_greedy_accuracy(node, outside, vocab)});
  }
  return out;
}

std::vector<NodeAccuracy> node_accuracies(const Task& task, const std::vector<TransformerNode>& nodes) {
  auto out = layer1_accuracies(task, nodes);
  for (std::size_t i = kLayer1Nodes; i < nodes.size(); ++i) {
    const double acc = node_greedy_accuracy(nodes[i], task.data.test, task.data.vocab);
    out.push_back({nodes[i].spec().name, acc, acc, acc});
  }
  return out;
}

Graph make_graph(const RunConfig& config, const std::vector<TransformerNode>& pretrained) {
  return Graph(config.graph_config(), graph_nodes(config, pretrained));
}

RunSummary summarize_run(const RunConfig& config, const Task& task, const std::vector<TransformerNode>& pretrained,
                         const Graph& graph, const TrainResult& result, const LogFn& log) {
  RunSummary s;
  const EvalResult test = evaluate(graph, task.data.test, task.data.vocab);
  s.graph_acc = test.accuracy;
  s.test_count = test.count;
  const int correct = static_cast<int>(std::lround(test.accuracy * static_cast<double>(test.count)));
  s.p_value_vs_chance = binomial_upper_tail(correct, static_cast<int>(test.count), 1.0 / config.n_classes);
  s.graph_parameters = graph.trainable_parameter_count();
  s.steps = result.state.step;
  s.best_step = result.state.best_step;
  s.best_val_acc = result.state.best_val_acc;
  s.nodes = node_accuracies(task, pretrained);
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.nodes.size(); ++i) {
    if (s.nodes[i].test_accuracy > s.nodes[best].test_accuracy) best = i;
  }
  s.best_single_acc = s.nodes[best].test_accuracy;
  s.best_single_node = s.nodes[best].name;
  if (config.run_baseline) {
    if (log) log("training parameter-matched head on " + s.best_single_node);
    const auto head = train_baseline_head(pretrained[best], task.data, s.graph_parameters, config.l_T,
                                          config.train_config(), config.n_classes);
    s.has_head = true;
    s.head_acc = head.test_accuracy;
    s.head_hidden = head.hidden;
    s.head_parameters = head.parameters;
  }
  return s;
}

nlohmann::json summary_json(const RunSummary& s) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : s.nodes) {
    nodes.push_back({{"name", n.name},
                     {"test_acc", n.test_accuracy},
                     {"shard_acc", n.shard_accuracy},
                     {"off_shard_acc", n.off_shard_accuracy}});
  }
  nlohmann::json j{{"graph_acc", s.graph_acc},
                   {"best_single_acc", s.best_single_acc},
                   {"best_single_node", s.best_single_node},
                   {"margin_vs_single", 100.0 * (s.graph_acc - s.best_single_acc)},
                   {"test_count", s.test_count},
                   {"p_value_vs_chance", s.p_value_vs_chance},
                   {"graph_parameters", s.graph_parameters},
                   {"steps", s.steps},
                   {"best_step", s.best_step},
                   {"best_val_acc", s.best_val_acc},
                   {"nodes", nodes}};
  if (s.has_head) {
    j["head_acc"] = s.head_acc;
    j["margin_vs_head"] = 100.0 * (s.graph_acc - s.head_acc);
    j["head_hidden"] = s.head_hidden;
    j["head_parameters"] = s.head_parameters;
  } else {
    j["head_acc"] = nullptr;
    j["margin_vs_head"] = nullptr;
  }
  return j;
}

double binomial_upper_tail(int k, int n, double p) {
  if (k <= 0) return 1.0;
  if (k > n) return 0.0;
  double total = 0.0;
  for (int i = k; i <= n; ++i) {
    const double log_term = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) +
                            i * std::log(p) + (n - i) * std::log1p(-p);
    total += std::exp(log_term);
  }
  return std::min(total, 1.0);
}

}  // namespace flg
