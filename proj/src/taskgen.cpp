#include "flg/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "flg/errors.hpp"

namespace flg {

std::vector<FactKey> FactTable::all_keys() const {
  std::vector<FactKey> keys;
  keys.reserve(size());
  for (int a = 0; a < vocab.num_keys; ++a) {
    for (int b = 0; b < vocab.num_keys; ++b) keys.emplace_back(a, b);
  }
  return keys;
}

FactTable gen_fact_table(int num_keys, int num_answers, std::uint64_t seed) {
  if (num_answers < 4) {
    throw ConfigError("fact table needs at least 4 answers to build 4 distinct choices, got " +
                      std::to_string(num_answers));
  }
  if (num_keys < 1) throw ConfigError("fact table needs at least one key");
  FactTable table;
  table.vocab = Vocabulary{num_keys, num_answers};
  table.seed = seed;
  Rng rng(seed);
  table.answers.resize(static_cast<std::size_t>(num_keys * num_keys));
  for (auto& a : table.answers) a = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(num_answers)));
  return table;
}

std::vector<Shard> gen_skill_shards(const FactTable& table, int n_shards, double coverage, std::uint64_t seed) {
  const double total = n_shards * coverage;
  if (n_shards < 2 || total < 1.0 - 1e-12 || total > 2.0 + 1e-12) {
    throw ConfigError("skill shards need n_shards >= 2 and 1 <= n_shards * coverage <= 2");
  }
  auto keys = table.all_keys();
  Rng rng(seed);
  shuffle_in_place(keys, rng);

  const auto n = keys.size();
  // Double-covered pairs spread over shard pairs, the rest over single shards.
  const auto doubles = static_cast<std::size_t>(std::llround((total - 1.0) * static_cast<double>(n)));
  std::vector<std::pair<int, int>> shard_pairs;
  for (int a = 0; a < n_shards; ++a) {
    for (int b = a + 1; b < n_shards; ++b) shard_pairs.emplace_back(a, b);
  }
  std::vector<Shard> shards(static_cast<std::size_t>(n_shards));
  for (std::size_t i = 0; i < n; ++i) {
    if (i < doubles) {
      const auto [a, b] = shard_pairs[i % shard_pairs.size()];
      shards[static_cast<std::size_t>(a)].push_back(keys[i]);
      shards[static_cast<std::size_t>(b)].push_back(keys[i]);
    } else {
      shards[(i - doubles) % static_cast<std::size_t>(n_shards)].push_back(keys[i]);
    }
  }
  for (auto& s : shards) {
    std::sort(s.begin(), s.end());
    if (s.empty() || s.size() >= n) throw ConfigError("shard is not a strict nonempty subset of the table");
  }
  return shards;
}

std::vector<TokenSeq> gen_pretrain_corpus(const FactTable& table, const Shard& shard, int copies, std::uint64_t seed) {
  if (shard.empty()) throw ConfigError("pretraining shard is empty");
  const auto& v = table.vocab;
  std::vector<TokenSeq> corpus;
  corpus.reserve(shard.size() * static_cast<std::size_t>(copies));
  for (int c = 0; c < copies; ++c) {
    for (const auto& [k1, k2] : shard) corpus.push_back({v.key(k1), v.key(k2), v.sep(), table.answer_token(k1, k2)});
  }
  Rng rng(seed);
  shuffle_in_place(corpus, rng);
  return corpus;
}

TokenSeq mcq_prompt(const McqExample& ex, const Vocabulary& vocab) {
  TokenSeq seq(ex.question.begin(), ex.question.end());
  seq.insert(seq.end(), ex.choices.begin(), ex.choices.end());
  seq.push_back(vocab.ans());
  return seq;
}

McqExample make_mcq(const FactTable& table, FactKey key, Rng& rng) {
  const auto& v = table.vocab;
  const int correct = table.answer_index(key.first, key.second);
  std::vector<int> others;
  for (int a = 0; a < v.num_answers; ++a) {
    if (a != correct) others.push_back(a);
  }
  // Partial Fisher-Yates: the first three entries become the distractors.
  for (std::size_t i = 0; i < 3; ++i) std::swap(others[i], others[i + uniform_index(rng, others.size() - i)]);
  McqExample ex;
  ex.question = {v.key(key.first), v.key(key.second), v.sep()};
  ex.answer = static_cast<int>(uniform_index(rng, 4));
  std::size_t next = 0;
  for (int c = 0; c < 4; ++c) ex.choices[static_cast<std::size_t>(c)] = v.answer(c == ex.answer ? correct : others[next++]);
  return ex;
}

std::vector<TokenSeq> gen_mcq_practice(const FactTable& table, const Shard& shard, int count, std::uint64_t seed) {
  if (shard.empty()) throw ConfigError("practice shard is empty");
  Rng rng(seed);
  std::vector<TokenSeq> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto& key = shard[static_cast<std::size_t>(i) % shard.size()];
    McqExample ex = make_mcq(table, key, rng);
    TokenSeq seq = mcq_prompt(ex, table.vocab);
    seq.push_back(table.vocab.letter(ex.answer));
    out.push_back(std::move(seq));
  }
  shuffle_in_place(out, rng);
  return out;
}

DatasetSplit gen_mcq_dataset(const FactTable& table, int n, std::uint64_t seed) {
  if (n < 20) throw ConfigError("dataset size must be at least 20 for an 80/10/10 split, got " + std::to_string(n));
  Rng rng(seed);
  const auto keys = table.all_keys();
  std::set<std::pair<FactKey, std::array<int, 4>>> seen;
  std::vector<McqExample> all;
  all.reserve(static_cast<std::size_t>(n));
  std::size_t attempts = 0;
  while (all.size() < static_cast<std::size_t>(n)) {
    if (++attempts > static_cast<std::size_t>(n) * 100) throw ConfigError("cannot draw that many distinct questions");
    const auto& key = keys[uniform_index(rng, keys.size())];
    McqExample ex = make_mcq(table, key, rng);
    if (!seen.insert({key, ex.choices}).second) continue;
    all.push_back(ex);
  }
  DatasetSplit split;
  split.seed = seed;
  split.vocab = table.vocab;
  const auto n_train = static_cast<std::size_t>(n) * 8 / 10;
  const auto n_val = static_cast<std::size_t>(n) / 10;
  split.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                   all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), all.end());
  return split;
}

void write_dataset_jsonl(const DatasetSplit& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  auto emit = [&](const std::vector<McqExample>& items, const char* tag) {
    for (const auto& ex : items) {
      nlohmann::json j = {{"split", tag}, {"question", ex.question}, {"choices", ex.choices}, {"answer", ex.answer}};
      out << j.dump() << '\n';
    }
  };
  emit(data.train, "train");
  emit(data.val, "val");
  emit(data.test, "test");
}

DatasetSplit read_dataset_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  DatasetSplit data;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      McqExample ex;
      ex.question = j.at("question").get<std::array<int, 3>>();
      ex.choices = j.at("choices").get<std::array<int, 4>>();
      ex.answer = j.at("answer").get<int>();
      if (ex.answer < 0 || ex.answer > 3) throw FormatError("answer index out of range");
      const auto tag = j.at("split").get<std::string>();
      if (tag == "train") {
        data.train.push_back(ex);
      } else if (tag == "val") {
        data.val.push_back(ex);
      } else if (tag == "test") {
        data.test.push_back(ex);
      } else {
        throw FormatError("unknown split tag '" + tag + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return data;
}

}  // namespace flg
