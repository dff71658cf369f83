// SPDX-License-Identifier: Apache-2.0
//
// Prompt construction and the equivalence between the token-level LSA/MSA
// forward passes and their closed-form readouts.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "iccl/attention.hpp"
#include "iccl/data_model.hpp"
#include "iccl/prompt.hpp"
#include "iccl/rng.hpp"
#include "iccl/simulate.hpp"
#include "iccl/trainer.hpp"
#include "test_helpers.hpp"

using namespace iccl;
using iccl::testing::random_spd;
using iccl::testing::random_unit_weights;

namespace {

struct Instance {
  TaskSequence seq;
  TaskSamples samples;
  GammaMatrix gamma;
};

Instance random_instance(std::uint64_t seed, Eigen::Index d, int t_count,
                         long long m, long long n, bool random_cov = true) {
  const auto stream = rng::make_stream(seed);
  const Covariance cov = random_cov
                             ? build_covariance(random_spd(stream.derive(0), d))
                             : Covariance::identity(d);
  TaskSequence seq = make_task_sequence(
      random_unit_weights(stream.derive(1), t_count, d), cov, m, n);
  TaskSamples samples = draw_trial_samples(seq, stream.derive(2));
  GammaMatrix gamma = build_gamma(cov, n);
  return Instance{std::move(seq), std::move(samples), std::move(gamma)};
}

}  // namespace

TEST_CASE("build_prompt: smallest prompt layout") {
  const TaskSequence seq =
      make_task_sequence({Vector::Ones(1)}, Covariance::identity(1), 1, 1);
  const TaskSamples samples = draw_trial_samples(seq, 3, 0);
  const PromptMatrix prompt = build_prompt(seq, samples, 1);
  REQUIRE(prompt.data.rows() == 2);
  REQUIRE(prompt.data.cols() == 3);
  REQUIRE(prompt.query_columns == std::vector<Eigen::Index>{2, 3});
  REQUIRE(prompt.data(1, 1) == 0.0);
  REQUIRE(prompt.data(1, 2) == 0.0);
  // Final query duplicates task 1's in-block query input.
  REQUIRE(prompt.data(0, 1) == prompt.data(0, 2));
}

TEST_CASE("build_prompt: query column arithmetic for T=2, M=3") {
  const Covariance cov = Covariance::identity(2);
  const TaskSequence seq = make_task_sequence(
      {Vector::Ones(2), -Vector::Ones(2)}, cov, 3, 4);
  const TaskSamples samples = draw_trial_samples(seq, 5, 0);
  const PromptMatrix prompt = build_prompt(seq, samples, 2);
  REQUIRE(prompt.query_columns == std::vector<Eigen::Index>{4, 8, 9});
  REQUIRE(prompt.final_query_task == 2);

  // All query-column labels read back zero; example labels equal w^T x.
  for (Eigen::Index col : prompt.query_columns) {
    REQUIRE(prompt.data(2, col - 1) == 0.0);
  }
  for (int s = 0; s < 2; ++s) {
    for (int i = 0; i < 3; ++i) {
      const Eigen::Index col = s * 4 + i;
      const Vector x = prompt.data.col(col).head(2);
      REQUIRE(prompt.data(2, col) ==
              Catch::Approx(seq.tasks[s].weight.dot(x)).margin(1e-15));
    }
  }

  REQUIRE_THROWS_AS(build_prompt(seq, samples, 0), IndexOutOfRangeError);
  REQUIRE_THROWS_AS(build_prompt(seq, samples, 3), IndexOutOfRangeError);
}

TEST_CASE("lsa_forward: zero weights pass the prompt through") {
  Instance inst = random_instance(21, 2, 2, 3, 5);
  const PromptMatrix prompt = build_prompt(inst.seq, inst.samples, 1);
  AttentionParams params;
  params.W = Matrix::Zero(3, 3);
  params.V = Matrix::Zero(3, 3);
  params.rho = 3.0;
  REQUIRE((lsa_forward(prompt, params) - prompt.data).norm() == 0.0);
  REQUIRE((msa_forward(prompt, params) - prompt.data).norm() == 0.0);
}

TEST_CASE("lsa_forward: bilinear scaling symmetry") {
  Instance inst = random_instance(22, 3, 2, 4, 7);
  const PromptMatrix prompt = build_prompt(inst.seq, inst.samples, 2);
  AttentionParams params = limit_params(inst.gamma, static_cast<double>(inst.seq.context_len));
  const Matrix base = lsa_forward(prompt, params);

  AttentionParams scaled = params;
  scaled.W *= 4.0;
  scaled.V /= 4.0;
  REQUIRE((lsa_forward(prompt, scaled) - base).cwiseAbs().maxCoeff() <
          1e-12 * std::max(1.0, base.cwiseAbs().maxCoeff()));
}

TEST_CASE("forward passes match closed forms at the analytic limit") {
  int checked = 0;
  for (std::uint64_t seed = 100; seed < 140; ++seed) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(seed % 4);
    const int t_count = 1 + static_cast<int>(seed % 5);
    const long long m = 1 + static_cast<long long>(seed % 10);
    const long long n = 1 + static_cast<long long>(seed % 7);
    Instance inst = random_instance(seed, d, t_count, m, n);
    const int final_task = 1 + static_cast<int>(seed % t_count);
    const PromptMatrix prompt = build_prompt(inst.seq, inst.samples, final_task);

    const AttentionParams params = limit_params(inst.gamma, static_cast<double>(m));
    const Matrix lsa = lsa_forward(prompt, params);
    const Matrix msa = msa_forward(prompt, params);
    const Eigen::Index label_row = d;

    for (int t = 1; t <= t_count; ++t) {
      const double via_forward = msa(label_row, prompt.query_col0(t));
      const double closed = closed_form_msa_predict(inst.samples, inst.gamma, t, m);
      REQUIRE(std::abs(via_forward - closed) <
              1e-10 * std::max(1.0, std::abs(closed)));
    }
    const double via_final = msa(label_row, prompt.query_col0(t_count + 1));
    const double closed_final = closed_form_final_predict(
        inst.samples, inst.gamma, m, t_count,
        inst.samples.queries[static_cast<std::size_t>(final_task) - 1]);
    REQUIRE(std::abs(via_final - closed_final) <
            1e-10 * std::max(1.0, std::abs(closed_final)));

    const double via_lsa = lsa(label_row, prompt.query_col0(t_count + 1));
    const double closed_lsa = closed_form_lsa_predict(
        inst.samples, inst.gamma,
        inst.samples.queries[static_cast<std::size_t>(final_task) - 1], m);
    REQUIRE(std::abs(via_lsa - closed_lsa) <
            1e-10 * std::max(1.0, std::abs(closed_lsa)));
    ++checked;
  }
  REQUIRE(checked == 40);
}

TEST_CASE("closed_form_lsa_predict: zero weights and task-order blindness") {
  const Covariance cov = Covariance::identity(2);
  const TaskSequence zero_seq = make_task_sequence(
      {Vector::Zero(2), Vector::Zero(2)}, cov, 3, 2);
  const TaskSamples zero_samples = draw_trial_samples(zero_seq, 9, 0);
  const GammaMatrix gamma = build_gamma(cov, 2);
  REQUIRE(closed_form_lsa_predict(zero_samples, gamma,
                                  zero_samples.queries[0], 3) == 0.0);

  // Permuting tasks (same multiset of samples) leaves the value bit-identical.
  Instance inst = random_instance(33, 2, 5, 3, 4);
  const Vector query = inst.samples.queries[0];
  const double base =
      closed_form_lsa_predict(inst.samples, inst.gamma, query, 3);

  std::vector<int> perm(5);
  std::iota(perm.begin(), perm.end(), 0);
  const auto shuffle_stream = rng::make_stream(77);
  for (int rep = 0; rep < 10; ++rep) {
    for (int i = 4; i > 0; --i) {
      const int j = static_cast<int>(
          shuffle_stream.derive(static_cast<std::uint64_t>(rep)).raw(static_cast<std::uint64_t>(i)) %
          static_cast<std::uint64_t>(i + 1));
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    TaskSamples permuted = inst.samples;
    for (int s = 0; s < 5; ++s) {
      permuted.inputs[static_cast<std::size_t>(s)] =
          inst.samples.inputs[static_cast<std::size_t>(perm[static_cast<std::size_t>(s)])];
      permuted.queries[static_cast<std::size_t>(s)] =
          inst.samples.queries[static_cast<std::size_t>(perm[static_cast<std::size_t>(s)])];
      permuted.label_sums[static_cast<std::size_t>(s)] =
          inst.samples.label_sums[static_cast<std::size_t>(perm[static_cast<std::size_t>(s)])];
    }
    const double permuted_value =
        closed_form_lsa_predict(permuted, inst.gamma, query, 3);
    REQUIRE(permuted_value == base);
  }
}

TEST_CASE("closed_form_msa_predict: prefix causality and t=1 normalizer") {
  Instance inst = random_instance(44, 3, 4, 2, 6);
  const long long m = inst.seq.context_len;

  // t=1 equals (1/(M+1)) x_q^T Gamma^{-1} S_1.
  const double direct =
      inst.samples.queries[0].dot(inst.gamma.inverse() * inst.samples.label_sums[0]) /
      static_cast<double>(m + 1);
  REQUIRE(closed_form_msa_predict(inst.samples, inst.gamma, 1, m) ==
          Catch::Approx(direct).epsilon(1e-14));

  // Changing tasks beyond t leaves the prediction bit-identical.
  const double before = closed_form_msa_predict(inst.samples, inst.gamma, 2, m);
  TaskSamples mutated = inst.samples;
  mutated.label_sums[2] = Vector::Constant(3, 1e6);
  mutated.label_sums[3] = Vector::Constant(3, -41.0);
  REQUIRE(closed_form_msa_predict(mutated, inst.gamma, 2, m) == before);

  REQUIRE_THROWS_AS(closed_form_msa_predict(inst.samples, inst.gamma, 0, m),
                    IndexOutOfRangeError);
  REQUIRE_THROWS_AS(closed_form_msa_predict(inst.samples, inst.gamma, 5, m),
                    IndexOutOfRangeError);
}

TEST_CASE("closed_form_final_predict: T=1 normalizer ratio against task prediction") {
  Instance inst = random_instance(55, 2, 1, 4, 3);
  const long long m = inst.seq.context_len;
  const double task_pred = closed_form_msa_predict(inst.samples, inst.gamma, 1, m);
  const double final_pred = closed_form_final_predict(
      inst.samples, inst.gamma, m, 1, inst.samples.queries[0]);
  // Ratio of normalizers: (M+1)/(M+2).
  REQUIRE(final_pred == Catch::Approx(task_pred * static_cast<double>(m + 1) /
                                      static_cast<double>(m + 2))
                            .epsilon(1e-13));
}

TEST_CASE("query columns contribute nothing to closed-form predictions") {
  Instance inst = random_instance(66, 2, 3, 3, 5);
  const long long m = inst.seq.context_len;
  const double msa = closed_form_msa_predict(inst.samples, inst.gamma, 3, m);

  TaskSamples mutated = inst.samples;
  mutated.queries[0] = Vector::Constant(2, 123.0);
  mutated.queries[1] = Vector::Constant(2, -9.0);
  REQUIRE(closed_form_msa_predict(mutated, inst.gamma, 3, m) == msa);
}

TEST_CASE("attention params at the analytic limit factor through Gamma inverse") {
  const auto stream = rng::make_stream(99);
  const Covariance cov = build_covariance(random_spd(stream, 3));
  const GammaMatrix gamma = build_gamma(cov, 4);
  const AttentionParams params = limit_params(gamma);
  const Eigen::Index d = 3;

  const Matrix product = params.W(d, d) * params.V.topLeftCorner(d, d);
  REQUIRE((product - gamma.inverse()).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE(params.W.topLeftCorner(d, d).norm() == 0.0);
  REQUIRE(params.V.row(d).norm() == 0.0);
}
