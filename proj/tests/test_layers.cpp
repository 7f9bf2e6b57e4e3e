#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "doctest.h"
#include "ktrans/layers.hpp"
#include "support/test_helpers.hpp"

using namespace ktrans;
using ktrans::testing::probe;
using ktrans::testing::random_tensor;

namespace {

bool bit_identical(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

MultiHeadAttention<double> random_mha(std::size_t d_model, std::size_t heads,
                                      std::mt19937_64& rng) {
  return make_multi_head_attention<double>(d_model, heads, rng);
}

}  // namespace

TEST_CASE("positional_encoding: closed-form entries") {
  auto pe = positional_encoding<double>(4, 8);
  for (std::size_t j = 0; j < 8; ++j) CHECK(pe.table.at(0, j) == (j % 2 == 0 ? 0.0 : 1.0));
  CHECK(pe.table.at(1, 0) == doctest::Approx(0.841471).epsilon(1e-6));

  auto wide = positional_encoding<double>(2, 512);
  CHECK(wide.table.at(1, 510) == doctest::Approx(std::sin(1.0 / std::pow(10000.0, 510.0 / 512.0))));
  CHECK(std::abs(wide.table.at(1, 510) - 1e-4) < 5e-6);

  CHECK_THROWS_AS(positional_encoding<double>(4, 7), std::invalid_argument);
  CHECK_THROWS_AS(positional_encoding<double>(0, 8), std::invalid_argument);
}

TEST_CASE("positional_encoding: bounded and sin/cos paired") {
  auto pe = positional_encoding<double>(50, 64);
  for (std::size_t p = 0; p < 50; ++p)
    for (std::size_t i = 0; i < 32; ++i) {
      const double s = pe.table.at(p, 2 * i), c = pe.table.at(p, 2 * i + 1);
      REQUIRE(std::abs(s) <= 1.0);
      REQUIRE(std::abs(c) <= 1.0);
      REQUIRE(std::abs(s * s + c * c - 1.0) < 1e-6);
    }
}

TEST_CASE("residual_layernorm: hand cases") {
  auto ln = LayerNormParams<double>::identity(2);
  auto out = residual_layernorm(Tensor<double>::matrix({{1, 1}}), Tensor<double>::matrix({{0, 2}}), ln);
  // mean 2, population std 1, epsilon 1e-5 inside the root.
  CHECK(out.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(out.at(0, 1) == doctest::Approx(1.0).epsilon(1e-5));

  auto constant = residual_layernorm(Tensor<double>::matrix({{3, 3, 3}}),
                                     Tensor<double>::zeros({1, 3}),
                                     LayerNormParams<double>::identity(3));
  for (double v : constant.data()) CHECK(v == 0.0);
}

TEST_CASE("residual_layernorm: gradient audit") {
  std::mt19937_64 rng(4);
  auto h = random_tensor({3, 5}, rng);
  auto sub = random_tensor({3, 5}, rng);
  LayerNormParams<double> ln{random_tensor({5}, rng, 0.5, 1.5), random_tensor({5}, rng), 1e-5};
  auto w = random_tensor({3, 5}, rng);
  CHECK(finite_diff_check([&](const Tensor<double>& t) { return probe(residual_layernorm(t, sub, ln), w); }, h) < 1e-4);
  auto row = random_tensor({1, 3}, rng);
  CHECK(finite_diff_check([&](const Tensor<double>& t) {
    return probe(residual_layernorm(t, Tensor<double>::zeros({1, 3}), LayerNormParams<double>::identity(3)),
                 Tensor<double>::matrix({{0.3, -1.2, 0.8}}));
  }, row) < 1e-4);
}

TEST_CASE("scaled_dot_attention: single key, equal logits, bias identity") {
  std::mt19937_64 rng(8);
  auto q = random_tensor({3, 4}, rng);
  auto k1 = random_tensor({1, 4}, rng);
  auto v1 = random_tensor({1, 4}, rng);
  auto one = scaled_dot_attention(q, k1, v1);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(one.weights.at(r, 0) == 1.0);
    for (std::size_t c = 0; c < 4; ++c) CHECK(one.output.at(r, c) == doctest::Approx(v1.at(0, c)));
  }

  auto q_orth = Tensor<double>::matrix({{1, 0, 0, 0}});
  auto keys = Tensor<double>::matrix({{0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  auto uniform = scaled_dot_attention(q_orth, keys, keys);
  for (double w : uniform.weights.data()) CHECK(w == doctest::Approx(1.0 / 3.0));

  auto k = random_tensor({5, 4}, rng);
  auto v = random_tensor({5, 4}, rng);
  auto zero = Tensor<double>::zeros({3, 5});
  auto with = scaled_dot_attention(q, k, v, &zero);
  auto without = scaled_dot_attention(q, k, v);
  CHECK(bit_identical(with.output, without.output));
  CHECK(bit_identical(with.weights, without.weights));
}

TEST_CASE("scaled_dot_attention: weights stay stochastic under bias") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    auto q = random_tensor({4, 3}, rng);
    auto k = random_tensor({6, 3}, rng);
    auto v = random_tensor({6, 3}, rng);
    auto bias = random_tensor({4, 6}, rng, -5, 5);
    auto att = scaled_dot_attention(q, k, v, &bias);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 6; ++c) total += att.weights.at(r, c);
      REQUIRE(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("scaled_dot_attention: key/value permutation equivariance") {
  std::mt19937_64 rng(13);
  auto q = random_tensor({3, 4}, rng);
  auto k = random_tensor({5, 4}, rng);
  auto v = random_tensor({5, 4}, rng);
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> kp, vp;
  for (auto p : perm) {
    for (std::size_t c = 0; c < 4; ++c) kp.push_back(k.at(p, c));
    for (std::size_t c = 0; c < 4; ++c) vp.push_back(v.at(p, c));
  }
  auto base = scaled_dot_attention(q, k, v);
  auto permuted = scaled_dot_attention(q, Tensor<double>({5, 4}, kp), Tensor<double>({5, 4}, vp));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(permuted.weights.at(r, j) == doctest::Approx(base.weights.at(r, perm[j])).epsilon(1e-12));
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(permuted.output.at(r, c) == doctest::Approx(base.output.at(r, c)).epsilon(1e-12));
  }
}

TEST_CASE("multi_head_attention: identity composition and zero-bias equivalence") {
  MultiHeadAttention<double> mha;
  auto eye = Tensor<double>::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  mha.heads.push_back({eye, eye, eye});
  mha.w_o = eye;
  auto x = Tensor<double>::matrix({{0.2, -0.7, 1.5}});
  auto out = multi_head_attention<double>(x, x, x, mha).output;
  for (std::size_t c = 0; c < 3; ++c) CHECK(out.at(0, c) == doctest::Approx(x.at(0, c)));

  std::mt19937_64 rng(21);
  auto mh = random_mha(8, 2, rng);
  auto q = random_tensor({4, 8}, rng);
  auto kv = random_tensor({6, 8}, rng);
  std::vector<Tensor<double>> zeros{Tensor<double>::zeros({4, 6}), Tensor<double>::zeros({4, 6})};
  auto biased = multi_head_attention<double>(q, kv, kv, mh, zeros).output;
  auto plain = multi_head_attention<double>(q, kv, kv, mh).output;
  CHECK(bit_identical(biased, plain));

  std::vector<Tensor<double>> one{Tensor<double>::zeros({4, 6})};
  CHECK_THROWS_AS(multi_head_attention<double>(q, kv, kv, mh, one), DimensionError);
}

TEST_CASE("multi_head_attention: gradient audit with nonzero bias") {
  std::mt19937_64 rng(22);
  auto mh = random_mha(4, 2, rng);
  auto x = random_tensor({2, 4}, rng);
  std::vector<Tensor<double>> bias{random_tensor({2, 2}, rng), random_tensor({2, 2}, rng)};
  auto w = random_tensor({2, 4}, rng);
  CHECK(finite_diff_check([&](const Tensor<double>& t) {
    return probe(multi_head_attention<double>(t, t, t, mh, bias).output, w);
  }, x) < 1e-4);
  CHECK(finite_diff_check([&](const Tensor<double>& t) {
    auto copy = mh;
    copy.heads[1].w_k = t;
    return probe(multi_head_attention<double>(x, x, x, copy, bias).output, w);
  }, mh.heads[1].w_k.clone()) < 1e-4);
  CHECK(finite_diff_check([&](const Tensor<double>& t) {
    std::vector<Tensor<double>> b{t, bias[1]};
    return probe(multi_head_attention<double>(x, x, x, mh, b).output, w);
  }, bias[0]) < 1e-4);
}

TEST_CASE("feed_forward: hand evaluations") {
  FeedForward<double> zero{Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({3}),
                           Tensor<double>::zeros({3, 2}), Tensor<double>::vector({4, -1})};
  auto c = feed_forward(Tensor<double>::matrix({{5, 6}, {7, 8}}), zero);
  CHECK(c.at(0, 0) == 4.0);
  CHECK(c.at(1, 1) == -1.0);

  auto one_d = [](double b1, double b2) {
    FeedForward<double> f{Tensor<double>::matrix({{1}}), Tensor<double>::vector({b1}),
                          Tensor<double>::matrix({{5}}), Tensor<double>::vector({b2})};
    return feed_forward(Tensor<double>::matrix({{2}}), f).item();
  };
  CHECK(one_d(-3, 0) == 0.0);
  CHECK(one_d(1, 1) == 16.0);
}

TEST_CASE("feed_forward: gradient audit") {
  std::mt19937_64 rng(30);
  auto ffn = make_feed_forward<double>(4, 6, rng);
  for (auto& b : ffn.b1.mutable_data()) b = 0.3;
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({3, 4}, rng);
  CHECK(finite_diff_check([&](const Tensor<double>& t) { return probe(feed_forward(t, ffn), w); }, x) < 1e-4);
  CHECK(finite_diff_check([&](const Tensor<double>& t) {
    auto copy = ffn;
    copy.w2 = t;
    return probe(feed_forward(x, copy), w);
  }, ffn.w2.clone()) < 1e-4);
}

TEST_CASE("dropout: identity cases, statistics and determinism") {
  std::mt19937_64 rng(40);
  auto x = random_tensor({4, 4}, rng);
  CHECK(dropout(x, 0.0, 1, true).same_node(x));
  CHECK(dropout(x, 0.5, 1, false).same_node(x));
  CHECK_THROWS_AS(dropout(x, 1.0, 1, true), std::invalid_argument);

  auto ones = Tensor<double>::full({200, 100}, 1.0);
  auto y = dropout(ones, 0.1, 77, true);
  std::size_t kept = 0;
  double total = 0;
  for (double v : y.data()) {
    if (v != 0.0) ++kept;
    total += v;
  }
  const double frac = static_cast<double>(kept) / 20000.0;
  CHECK(std::abs(frac - 0.9) < 0.02);
  CHECK(std::abs(total / 20000.0 - 1.0) < 0.03);

  auto again = dropout(ones, 0.1, 77, true);
  CHECK(bit_identical(y, again));
}
