// Command-line driver: pretrain-nodes, train-graph, validate-gradients, eval, report.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "flg/checkpoint.hpp"
#include "flg/diagnostics.hpp"
#include "flg/errors.hpp"
#include "flg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace flg;

namespace {

struct Options {
  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::string resume;
  std::string schedule;
  long stop_after = 0;
};

RunConfig load_config(const Options& o) {
  RunConfig c = load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.schedule.empty()) c.train.schedule = parse_schedule(o.schedule);
  return c;
}

/// Records the effective config in the run directory.
void write_config_copy(const RunConfig& c, const fs::path& out) {
  fs::create_directories(out);
  std::ofstream(out / "config.ini") << serialize_run_config(c);
}

void write_json(const fs::path& path, const nlohmann::json& j) { std::ofstream(path) << j.dump(2) << "\n"; }

int pretrained_count(const RunConfig& c) { return c.symmetric_layer2 ? kEdges - 1 : kEdges; }

std::vector<TransformerNode> load_pretrained(const RunConfig& c, const fs::path& out) {
  const auto specs = c.node_specs();
  std::vector<TransformerNode> nodes;
  for (int i = 0; i < pretrained_count(c); ++i) {
    const auto& spec = specs[static_cast<std::size_t>(i)];
    nodes.push_back(load_node(out / "nodes" / (spec.name + ".flg"), spec));
  }
  return nodes;
}

nlohmann::json accuracy_json(const std::vector<NodeAccuracy>& acc) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& a : acc) {
    j.push_back({{"name", a.name},
                 {"test_acc", a.test_accuracy},
                 {"shard_acc", a.shard_accuracy},
                 {"off_shard_acc", a.off_shard_accuracy}});
  }
  return j;
}

int cmd_pretrain(const Options& o) {
  const RunConfig c = load_config(o);
  const fs::path out = o.out;
  write_config_copy(c, out);
  const Task task = make_task(c);
  write_dataset_jsonl(task.data, out / "dataset.jsonl");
  const auto pre = pretrain_all(c, task, [](const std::string& m) { spdlog::info("{}", m); });
  fs::create_directories(out / "nodes");
  nlohmann::json sums;
  for (const auto& node : pre.nodes) {
    const auto path = out / "nodes" / (node.spec().name + ".flg");
    save_node(path, node);
    sums[node.spec().name] = fmt::format("{:016x}", file_checksum(path));
  }
  std::ofstream curves(out / "pretrain_loss.csv");
  curves << "step";
  for (const auto& node : pre.nodes) curves << "," << node.spec().name;
  curves << "\n";
  std::size_t longest = 0;
  for (const auto& cv : pre.loss_curves) longest = std::max(longest, cv.size());
  for (std::size_t s = 0; s < longest; ++s) {
    curves << s;
    for (const auto& cv : pre.loss_curves) {
      curves << ",";
      if (s < cv.size()) curves << fmt::format("{:.17g}", cv[s]);
    }
    curves << "\n";
  }
  const auto acc = layer1_accuracies(task, pre.nodes);
  for (const auto& a : acc) {
    spdlog::info("{}: test {:.3f}, in-shard {:.3f}, off-shard {:.3f}", a.name, a.test_accuracy, a.shard_accuracy,
                 a.off_shard_accuracy);
  }
  write_json(out / "node_accuracy.json", {{"nodes", accuracy_json(acc)}, {"checksums", sums}});
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig c = load_config(o);
  const fs::path out = o.out;
  const auto pretrained = load_pretrained(c, out);
  write_config_copy(c, out);
  const Task task = make_task(c);
  Graph graph = make_graph(c, pretrained);

  TrainOptions opts;
  if (!o.resume.empty()) {
    opts.resume = decode_train_state(load_checkpoint(o.resume));
    spdlog::info("resuming at step {}", opts.resume->step);
  }
  if (o.stop_after > 0) opts.stop_after = o.stop_after;
  spdlog::info("training {} graph parameters", graph.trainable_parameter_count());
  const TrainResult result = train_graph(graph, task.data, c.train_config(), opts);
  save_checkpoint(out / "train_state.flg", encode_train_state(result.state));
  write_metrics_csv(out / "metrics.csv", result.state.metrics);
  for (const auto& w : result.state.warnings) spdlog::warn("step {}: {}", w.step, w.message);
  if (!result.state.finished) {
    spdlog::info("stopped at step {}; resume with --resume {}", result.state.step, (out / "train_state.flg").string());
    return 0;
  }
  save_checkpoint(out / "graph_best.flg", collect(graph.named_parameters()));

  std::vector<Vector> z1;
  for (const auto& ex : task.data.test) {
    Tape tape;
    z1.push_back(graph_forward(tape, graph, mcq_prompt(ex, task.data.vocab)).z1.vec());
  }
  export_z1_csv(out / "z1_test.csv", z1);

  const RunSummary summary = summarize_run(c, task, pretrained, graph, result,
                                           [](const std::string& m) { spdlog::info("{}", m); });
  const auto j = summary_json(summary);
  write_json(out / "summary.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_validate(const Options& o) {
  const RunConfig c = load_config(o);
  const fs::path out = o.out;
  const auto pretrained = load_pretrained(c, out);
  write_config_copy(c, out);
  const Task task = make_task(c);
  std::vector<TokenSeq> prompts;
  for (const auto& ex : task.data.train) prompts.push_back(mcq_prompt(ex, task.data.vocab));
  TwoNodeConfig tc;
  tc.alpha = c.alpha;
  tc.l_inject = c.l_S;
  tc.l_extract = c.l_T;
  tc.seed = c.seed;
  // Two peer layer-1 nodes with overlapping shards.
  const auto report = two_node_validation(pretrained[0], pretrained[1], prompts, tc);
  auto j = two_node_report_json(report);
  j["source"] = pretrained[0].spec().name;
  j["destination"] = pretrained[1].spec().name;
  write_json(out / "validation.json", j);
  const std::string text = two_node_report_text(j);
  std::ofstream(out / "validation.txt") << text;
  std::cout << text;
  if (report.grad.ratio == 0.0 || report.grad.frozen_grad_detected) {
    spdlog::error("gradient flow check failed");
    return 2;
  }
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig c = load_config(o);
  const fs::path out = o.out;
  const auto pretrained = load_pretrained(c, out);
  const Task task = make_task(c);
  Graph graph = make_graph(c, pretrained);
  const auto ckpt = out / "graph_best.flg";
  if (!fs::exists(ckpt)) throw Error("missing " + ckpt.string() + " (run train-graph first)");
  restore(graph.named_parameters(), load_checkpoint(ckpt));
  nlohmann::json j;
  for (const auto& [name, split] : {std::pair{"val", &task.data.val}, std::pair{"test", &task.data.test}}) {
    const auto r = evaluate(graph, *split, task.data.vocab);
    j[name] = {{"accuracy", r.accuracy},
               {"mean_loss", r.mean_loss},
               {"count", r.count},
               {"attn_node4", r.attention[0]},
               {"attn_node5", r.attention[1]}};
  }
  write_json(out / "eval.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_report(const Options& o) {
  const fs::path out = o.out;
  const RunConfig c = load_run_config(out / "config.ini");
  const TrainState state = decode_train_state(load_checkpoint(out / "train_state.flg"));
  if (state.metrics.empty()) throw Error("no training steps recorded in " + out.string());

  const auto routing = routing_report(state.metrics);
  std::ofstream rcsv(out / "routing.csv");
  rcsv << "step,attn_node4,attn_node5,grad_ratio_w4_w5\n";
  for (std::size_t i = 0; i < routing.steps.size(); ++i) {
    rcsv << fmt::format("{},{:.17g},{:.17g},{:.17g}\n", routing.steps[i], routing.attention[i][0],
                        routing.attention[i][1], routing.grad_ratio[i]);
  }
  std::ofstream gcsv(out / "gradnorm.csv");
  gcsv << "step,gnorm_w1,gnorm_w2,gnorm_w3,gnorm_w4,gnorm_w5\n";
  for (const auto& m : state.metrics) {
    gcsv << m.step;
    for (double g : m.gnorm) gcsv << fmt::format(",{:.17g}", g);
    gcsv << "\n";
  }

  GraphDims desk;
  desk.d_s = c.d_s;
  desk.n_classes = c.n_classes;
  const auto specs = c.node_specs();
  for (int i = 0; i < kEdges; ++i) desk.d_u[static_cast<std::size_t>(i)] = specs[static_cast<std::size_t>(i)].d_model;
  const ParamCount full = count_params(reference_dims());
  const ParamCount small = count_params(desk);
  std::ofstream pcsv(out / "params.csv");
  pcsv << "component,full_scale,desk\n";
  for (int i = 0; i < kEdges; ++i) {
    pcsv << fmt::format("W_{},{},{}\n", i + 1, full.edges[static_cast<std::size_t>(i)],
                        small.edges[static_cast<std::size_t>(i)]);
  }
  pcsv << fmt::format("output node,{},{}\n", full.output, small.output);
  pcsv << fmt::format("total,{},{}\n", full.total, small.total);

  auto j = routing_report_json(routing);
  j["parameters_full_scale"] = full.total;
  j["parameters_desk"] = small.total;
  write_json(out / "routing.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frozen transformer graph experiments"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", o.config, "INI run config")->check(CLI::ExistingFile);
    if (needs_config) opt->required();
    sub->add_option("--out", o.out, "run directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "override the root seed");
    sub->add_option("--schedule", o.schedule, "override the lr schedule")
        ->check(CLI::IsMember({"cosine", "warmup-constant"}));
  };

  auto* pre = app.add_subcommand("pretrain-nodes", "pretrain and freeze the five nodes");
  add_common(pre, true);
  auto* train = app.add_subcommand("train-graph", "train edges and output node");
  add_common(train, true);
  train->add_option("--resume", o.resume, "train_state.flg to continue from")->check(CLI::ExistingFile);
  train->add_option("--stop-after", o.stop_after, "stop after this many total steps and save a resumable state");
  auto* val = app.add_subcommand("validate-gradients", "two-node gradient-flow and alignment report");
  add_common(val, true);
  auto* ev = app.add_subcommand("eval", "evaluate the best graph checkpoint");
  add_common(ev, true);
  auto* rep = app.add_subcommand("report", "routing, gradient-norm, and parameter tables from a run directory");
  rep->add_option("--out", o.out, "run directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (pre->parsed()) return cmd_pretrain(o);
    if (train->parsed()) return cmd_train(o);
    if (val->parsed()) return cmd_validate(o);
    if (ev->parsed()) return cmd_eval(o);
    if (rep->parsed()) return cmd_report(o);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 3;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
