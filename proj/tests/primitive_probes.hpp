#pragma once

// Finite-difference probes for every autodiff primitive, shared by the unit
// tests and the acceptance run.

#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace flg::testing {

struct PrimitiveProbe {
  std::string name;
  int probes = 0;
  double max_rel_error = 0.0;
  bool all_nonzero = true;

  void record(const GradCheckResult& r) {
    ++probes;
    max_rel_error = std::max(max_rel_error, r.max_rel_error);
    all_nonzero = all_nonzero && r.any_nonzero;
  }
};

/// `probes` random shapes and values per primitive, sizes up to 64.
inline std::vector<PrimitiveProbe> run_primitive_probes(int probes, std::uint64_t seed) {

  Rng rng(seed);
  std::vector<PrimitiveProbe> out;
  std::uniform_int_distribution<int> small(1, 12);
  std::uniform_int_distribution<int> wide(2, 64);

  auto check = [&](const char* name, auto&& make_inputs, auto&& fn) {
    PrimitiveProbe r{name};
    for (int p = 0; p < probes; ++p) {
      std::vector<Tensor> inputs = make_inputs();
      const std::uint64_t proj_seed = rng();
      auto res = gradcheck(
          [&](Tape& t, std::vector<Var>& v) { return random_projection(fn(t, v), proj_seed); }, inputs);
      r.record(res);
    }
    out.push_back(r);
  };

  check(
      "affine",
      [&] {
        const Index r = small(rng), c = wide(rng);
        return std::vector<Tensor>{random_tensor({r, c}, rng), random_tensor({r}, rng), random_tensor({c}, rng)};
      },
      [](Tape&, std::vector<Var>& v) { return affine(v[0], v[1], v[2]); });

  check(
      "linear_rows",
      [&] {
        const Index n = small(rng), r = small(rng), c = small(rng);
        return std::vector<Tensor>{random_tensor({n, c}, rng), random_tensor({r, c}, rng), random_tensor({r}, rng)};
      },
      [](Tape&, std::vector<Var>& v) { return linear_rows(v[0], v[1], v[2]); });

  check(
      "matmul",
      [&] {
        const Index a = small(rng), b = small(rng), c = small(rng);
        return std::vector<Tensor>{random_tensor({a, b}, rng), random_tensor({b, c}, rng)};
      },
      [](Tape&, std::vector<Var>& v) { return matmul(v[0], v[1]); });

  check(
      "add/scale/mul",
      [&] {
        const Index n = wide(rng);
        return std::vector<Tensor>{random_tensor({n}, rng), random_tensor({n}, rng)};
      },
      [](Tape&, std::vector<Var>& v) { return mul(add(v[0], scale(v[1], -1.7)), v[1]); });

  check(
      "mean",
      [&] {
        const Index n = wide(rng);
        return std::vector<Tensor>{random_tensor({n}, rng), random_tensor({n}, rng), random_tensor({n}, rng)};
      },
      [](Tape&, std::vector<Var>& v) { return mean(std::span<const Var>(v)); });

  check(
      "gelu", [&] { return std::vector<Tensor>{random_tensor({wide(rng)}, rng, 2.0)}; },
      [](Tape&, std::vector<Var>& v) { return gelu(v[0]); });

  check(
      "l2_normalize", [&] { return std::vector<Tensor>{random_tensor({wide(rng)}, rng)}; },
      [](Tape&, std::vector<Var>& v) { return l2_normalize(v[0]); });

  check(
      "softmax", [&] { return std::vector<Tensor>{random_tensor({wide(rng)}, rng, 2.0)}; },
      [](Tape&, std::vector<Var>& v) { return softmax(v[0]); });

  check(
      "layer_norm (vector)",
      [&] {
        const Index n = wide(rng);
        return std::vector<Tensor>{random_tensor({n}, rng), random_tensor({n}, rng), random_tensor({n}, rng)};
      },
      [](Tape&, std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); });

  check(
      "layer_norm (rows)",
      [&] {
        const Index r = small(rng), n = wide(rng);
        return std::vector<Tensor>{random_tensor({r, n}, rng), random_tensor({n}, rng), random_tensor({n}, rng)};
      },
      [](Tape&, std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); });

  PrimitiveProbe cross_entropy_probe{"cross_entropy"};
  PrimitiveProbe softmax_cross_entropy_probe{"softmax_cross_entropy"};
  PrimitiveProbe sequence_cross_entropy_probe{"sequence_cross_entropy"};
  {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    for (int p = 0; p < probes; ++p) {
      const Index n = wide(rng);
      Tensor probs({n}, true);
      for (Index i = 0; i < n; ++i) probs.value()(i, 0) = u(rng);
      const int target = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
      std::vector<Tensor> in{probs};
      auto res = gradcheck([&](Tape&, std::vector<Var>& v) { return cross_entropy(v[0], target); }, in);
      cross_entropy_probe.record(res);
    }
  }

  {
    for (int p = 0; p < probes; ++p) {
      const Index n = wide(rng);
      const int target = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
      std::vector<Tensor> in{random_tensor({n}, rng, 3.0)};
      auto res = gradcheck([&](Tape&, std::vector<Var>& v) { return softmax_cross_entropy(v[0], target); }, in);
      softmax_cross_entropy_probe.record(res);
    }
  }

  {
    for (int p = 0; p < probes; ++p) {
      const Index rows = small(rng), vocab = wide(rng);
      std::vector<int> targets(static_cast<std::size_t>(rows));
      for (auto& tg : targets) tg = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
      targets[0] = -1;
      if (rows == 1) targets[0] = 0;
      std::vector<Tensor> in{random_tensor({rows, vocab}, rng, 2.0)};
      auto res = gradcheck([&](Tape&, std::vector<Var>& v) { return sequence_cross_entropy(v[0], targets); }, in);
      sequence_cross_entropy_probe.record(res);
    }
  }

  out.push_back(cross_entropy_probe);
  out.push_back(softmax_cross_entropy_probe);
  out.push_back(sequence_cross_entropy_probe);

  check(
      "resample_linear",
      [&] {
        // The second tensor only carries the target length.
        return std::vector<Tensor>{random_tensor({wide(rng)}, rng), Tensor({wide(rng) - 1}, false)};
      },
      [&](Tape&, std::vector<Var>& v) { return resample_linear(v[0], v[1].shape()[0]); });

  check(
      "gather/select/stack",
      [&] {
        const Index rows = small(rng) + 2, n = wide(rng);
        return std::vector<Tensor>{random_tensor({rows, n}, rng), random_tensor({n}, rng)};
      },
      [&](Tape&, std::vector<Var>& v) {
        const int rows = static_cast<int>(v[0].shape()[0]);
        std::vector<int> idx{0, rows - 1, 1, 0};
        Var g = gather_rows(v[0], idx);
        std::vector<Var> parts{select_row(g, 2), v[1], select_row(v[0], rows - 1)};
        return stack_rows(parts);
      });

  for (bool causal : {false, true}) {
    check(
        causal ? "attention (causal, blocked)" : "attention",
        [&] {
          const Index heads = 1 + static_cast<Index>(rng() % 3), dh = 1 + static_cast<Index>(rng() % 4);
          const Index len = 1 + static_cast<Index>(rng() % 5), blocks = 1 + static_cast<Index>(rng() % 2);
          const Index d = heads * dh;
          Tensor meta({heads});
          return std::vector<Tensor>{random_tensor({blocks * len, d}, rng), random_tensor({blocks * len, d}, rng),
                                     random_tensor({blocks * len, d}, rng), Tensor({blocks, len}, false)};
        },
        [&](Tape&, std::vector<Var>& v) {
          const Index blocks = v[3].shape()[0], len = v[3].shape()[1];
          const Index d = v[0].shape()[1];
          int heads = 1;
          for (int h = 3; h >= 1; --h) {
            if (d % h == 0) {
              heads = h;
              break;
            }
          }
          (void)blocks;
          return attention(v[0], v[1], v[2], heads, causal, len, len).out;
        });
  }

  check(
      "multi_head_attention",
      [&] {
        const Index d = 4 * (1 + static_cast<Index>(rng() % 3));
        std::vector<Tensor> in;
        for (int i = 0; i < 4; ++i) {
          in.push_back(random_tensor({d, d}, rng, 0.5));
          in.push_back(random_tensor({d}, rng, 0.5));
        }
        in.push_back(random_tensor({d}, rng));
        in.push_back(random_tensor({d}, rng));
        in.push_back(random_tensor({d}, rng));
        return in;
      },
      [](Tape&, std::vector<Var>& v) {
        MhaWeights w{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
        std::vector<Var> kv{v[9], v[10]};
        return multi_head_attention(v[8], kv, kv, w, 4).out;
      });

  for (auto mode : {InjectPositions::kAll, InjectPositions::kLast}) {
    check(
        mode == InjectPositions::kAll ? "inject (all)" : "inject (last)",
        [&] {
          const Index rows = small(rng), d = wide(rng);
          return std::vector<Tensor>{random_tensor({rows, d}, rng), random_tensor({d}, rng)};
        },
        [mode](Tape&, std::vector<Var>& v) { return inject_blend(v[0], v[1], 0.25, mode); });
  }
  return out;
}

}  // namespace flg::testing
