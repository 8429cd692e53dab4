#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace flg {

// Seed derivation: every consumer of randomness gets its own stream,
//   seed(root, stream) = splitmix64(root + (stream + 1) * 0x9E3779B97F4A7C15)
// where `stream` is a fixed small integer (see Stream) optionally offset by an
// index (node number, epoch, ...). No consumer ever draws from another's stream.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

enum class Stream : std::uint64_t {
  kFactTable = 1,
  kShards = 2,
  kDataset = 3,
  kNodeInit = 100,      // + node index
  kNodeCorpus = 200,    // + node index
  kNodePretrain = 300,  // + node index
  kEdgeInit = 400,      // + edge index
  kOutputInit = 500,
  kShuffle = 1000,      // + epoch
  kBaseline = 5000,
  kValidation = 6000,
  kPermutation = 7000,
};

inline std::uint64_t derive_seed(std::uint64_t root, Stream stream, std::uint64_t offset = 0) {
  const auto id = static_cast<std::uint64_t>(stream) + offset;
  return splitmix64(root + (id + 1) * 0x9E3779B97F4A7C15ULL);
}

using Rng = std::mt19937_64;

/// Uniform draw in [0, n). Modulo bias is below 2^-50 for the small n used here.
inline std::size_t uniform_index(Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

/// Fisher-Yates with uniform_index, so the order is identical across standard libraries.
template <typename Container>
void shuffle_in_place(Container& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[uniform_index(rng, i)]);
  }
}

/// Matrix of i.i.d. N(0, stddev^2) draws, filled row by row.
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> random_normal(
    Eigen::Index rows, Eigen::Index cols, Scalar stddev, Rng& rng) {
  std::normal_distribution<Scalar> dist(Scalar(0), stddev);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = dist(rng);
  return out;
}

template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> random_uniform(
    Eigen::Index rows, Eigen::Index cols, Scalar bound, Rng& rng) {
  std::uniform_real_distribution<Scalar> dist(-bound, bound);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = dist(rng);
  return out;
}

}  // namespace flg
