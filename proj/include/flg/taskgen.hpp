#pragma once

// Synthetic fact-recall tasks: a fact table over key pairs, pretraining
// corpora restricted to shards of the table, and four-choice question sets.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "flg/rng.hpp"

namespace flg {

using TokenSeq = std::vector<int>;

/// Token bands: keys, answers, two markers, four answer letters, then a
/// reserved band for framing prefixes that the generator never emits.
struct Vocabulary {
  int num_keys = 12;
  int num_answers = 12;

  int key(int i) const { return i; }
  int answer(int j) const { return num_keys + j; }
  int sep() const { return num_keys + num_answers; }
  int ans() const { return sep() + 1; }
  int letter(int c) const { return sep() + 2 + c; }
  int reserved_begin() const { return sep() + 6; }

  bool is_key(int t) const { return t >= 0 && t < num_keys; }
  bool is_answer(int t) const { return t >= num_keys && t < num_keys + num_answers; }
  int letter_index(int t) const { return (t >= letter(0) && t <= letter(3)) ? t - letter(0) : -1; }
};

using FactKey = std::pair<int, int>;
using Shard = std::vector<FactKey>;

struct FactTable {
  Vocabulary vocab;
  std::vector<int> answers;  // answer index per key pair, row-major over (k1, k2)
  std::uint64_t seed = 0;

  std::size_t size() const { return answers.size(); }
  int answer_index(int k1, int k2) const { return answers[static_cast<std::size_t>(k1 * vocab.num_keys + k2)]; }
  int answer_token(int k1, int k2) const { return vocab.answer(answer_index(k1, k2)); }
  std::vector<FactKey> all_keys() const;
};

FactTable gen_fact_table(int num_keys, int num_answers, std::uint64_t seed);

/// Overlapping shards of K x K whose union is total. Each key pair is covered
/// by one or two shards, with every shard covering `coverage` of the table.
/// Requires 1 <= n_shards * coverage <= 2.
std::vector<Shard> gen_skill_shards(const FactTable& table, int n_shards, double coverage, std::uint64_t seed);

/// Fact statements [k1, k2, SEP, a], each fact repeated `copies` times, shuffled.
std::vector<TokenSeq> gen_pretrain_corpus(const FactTable& table, const Shard& shard, int copies, std::uint64_t seed);

struct McqExample {
  std::array<int, 3> question{};  // [k1, k2, SEP]
  std::array<int, 4> choices{};   // answer tokens, exactly one correct
  int answer = 0;                 // index of the correct choice

  bool operator==(const McqExample&) const = default;
};

/// Token sequence a node reads for a question: [k1, k2, SEP, c0, c1, c2, c3, ANS].
/// The expected continuation is the letter token of the correct choice.
TokenSeq mcq_prompt(const McqExample& ex, const Vocabulary& vocab);
/// Question for `key` with three distinct distractors and a uniformly placed answer.
McqExample make_mcq(const FactTable& table, FactKey key, Rng& rng);

/// Question-format practice sequences: mcq_prompt followed by the answer letter.
std::vector<TokenSeq> gen_mcq_practice(const FactTable& table, const Shard& shard, int count, std::uint64_t seed);

struct DatasetSplit {
  std::vector<McqExample> train, val, test;
  Vocabulary vocab;
  std::uint64_t seed = 0;
  std::vector<Shard> shards;  // skill-split assignment per layer-1 node, if any
};

/// n distinct questions, split 80/10/10.
DatasetSplit gen_mcq_dataset(const FactTable& table, int n, std::uint64_t seed);

/// Line-delimited JSON, one question per line:
/// {"split":"train","question":[..],"choices":[..],"answer":c}
void write_dataset_jsonl(const DatasetSplit& data, const std::filesystem::path& path);
DatasetSplit read_dataset_jsonl(const std::filesystem::path& path);

}  // namespace flg
