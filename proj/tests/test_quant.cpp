#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "tilevlm/quant.hpp"

using tvlm::QuantizedTensor;
using tvlm::Tensor;

TEST_CASE("group statistics follow the min-max rule") {
  // One row, two groups of four. First group spans [0, 15] so the scale is
  // exactly 1; second group spans [-5, 10], also scale 1 with zero point 5.
  Tensor w = Tensor::from({1, 8}, {0.0, 5.0, 10.0, 15.0, -5.0, -1.0, 3.0, 10.0});
  QuantizedTensor q = tvlm::quantize_rows(w, 4);

  REQUIRE(q.groups_per_row() == 2);
  REQUIRE(q.scales == std::vector<double>{1.0, 1.0});
  REQUIRE(q.zeros == std::vector<std::uint8_t>{0, 5});

  std::vector<std::uint8_t> want_codes{0, 5, 10, 15, 0, 4, 8, 15};
  for (std::size_t c = 0; c < 8; ++c) REQUIRE(q.code_at(0, c) == want_codes[c]);
  // Lattice-aligned values reconstruct without error.
  for (std::size_t c = 0; c < 8; ++c) REQUIRE(q.value_at(0, c) == w.at(0, c));
}

TEST_CASE("codes pack two per byte with the even element in the low nibble") {
  Tensor w = Tensor::from({1, 4}, {0.0, 5.0, 10.0, 15.0});
  QuantizedTensor q = tvlm::quantize_rows(w, 4);
  REQUIRE(q.packed.size() == 2);
  REQUIRE(q.packed[0] == 0x50);  // codes 0 and 5
  REQUIRE(q.packed[1] == 0xfa);  // codes 10 and 15
}

TEST_CASE("a constant-zero group has unit scale and reconstructs exactly") {
  Tensor w = Tensor::from({1, 4}, {0.0, 0.0, 0.0, 0.0});
  QuantizedTensor q = tvlm::quantize_rows(w, 4);
  REQUIRE(q.scales[0] == 1.0);
  REQUIRE(q.zeros[0] == 0);
  for (std::size_t c = 0; c < 4; ++c) REQUIRE(q.value_at(0, c) == 0.0);
}

TEST_CASE("round-trip error stays within half a step on zero-spanning groups") {
  tvlm::Rng rng = tvlm::derive_rng(47, "test.quant.roundtrip");
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t rows = 1 + rng.next_u64() % 6;
    std::size_t group = (rng.next_u64() % 2 == 0) ? 8 : 16;
    std::size_t cols = group * (1 + rng.next_u64() % 4);
    Tensor w = Tensor::zeros({rows, cols});
    auto& wv = w.mutable_value();
    for (auto& v : wv) v = rng.uniform(-1.5, 1.5);
    // Pin one element per group to zero so every group straddles the origin,
    // which keeps the zero point off its clamp and the bound valid.
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t g = 0; g * group < cols; ++g) wv[r * cols + g * group] = 0.0;

    QuantizedTensor q = tvlm::quantize_rows(w, group);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        double scale = q.scales[r * q.groups_per_row() + c / group];
        double err = std::abs(q.value_at(r, c) - w.at(r, c));
        INFO("row " << r << " col " << c << " scale " << scale);
        REQUIRE(err <= 0.5 * scale * (1.0 + 1e-12));
      }
  }
}

TEST_CASE("all codes stay inside the 4-bit range") {
  tvlm::Rng rng = tvlm::derive_rng(53, "test.quant.range");
  Tensor w = Tensor::zeros({4, 32});
  for (auto& v : w.mutable_value()) v = rng.uniform(-100.0, 100.0);
  QuantizedTensor q = tvlm::quantize_rows(w, 8);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 32; ++c) REQUIRE(q.code_at(r, c) <= 15);
}

TEST_CASE("quantized matmul is bit-identical to matmul against the dequantized weight") {
  tvlm::Rng rng = tvlm::derive_rng(19, "test.quant.qmatmul");
  Tensor x = Tensor::zeros({3, 64});
  for (auto& v : x.mutable_value()) v = rng.uniform(-1.0, 1.0);
  // Plant exact zeros to exercise the skip path on both sides.
  x.mutable_value()[5] = 0.0;
  x.mutable_value()[70] = 0.0;

  Tensor w = Tensor::zeros({5, 64});
  for (auto& v : w.mutable_value()) v = rng.uniform(-0.8, 0.8);
  QuantizedTensor q = tvlm::quantize_rows(w, 16);

  tvlm::NoGradGuard ng;
  Tensor got = tvlm::qmatmul(x, q);
  Tensor want = tvlm::matmul(x, tvlm::transpose(tvlm::dequantize(q)));
  REQUIRE(got.rows() == 3);
  REQUIRE(got.cols() == 5);
  REQUIRE(got.value() == want.value());
}

TEST_CASE("quantized matmul counts two flops per multiply-accumulate") {
  Tensor x = Tensor::full({3, 32}, 0.25);
  QuantizedTensor q = tvlm::quantize_rows(Tensor::full({7, 32}, 0.5), 32);
  tvlm::NoGradGuard ng;
  std::uint64_t before = tvlm::flop_counter();
  tvlm::qmatmul(x, q);
  REQUIRE(tvlm::flop_counter() - before == 2ull * 3 * 32 * 7);
}

TEST_CASE("quantization validates shape and grouping") {
  REQUIRE_THROWS_AS(tvlm::quantize_rows(Tensor::zeros({8}), 4), tvlm::DimensionError);
  REQUIRE_THROWS_AS(tvlm::quantize_rows(Tensor::zeros({2, 8}), 0), tvlm::ParameterError);
  REQUIRE_THROWS_AS(tvlm::quantize_rows(Tensor::zeros({2, 10}), 4), tvlm::ParameterError);
  REQUIRE_THROWS_WITH(tvlm::quantize_rows(Tensor::zeros({2, 10}), 4),
                      Catch::Matchers::ContainsSubstring("pad the weight"));

  QuantizedTensor q = tvlm::quantize_rows(Tensor::zeros({2, 8}), 4);
  REQUIRE_THROWS_AS(tvlm::qmatmul(Tensor::zeros({3, 6}), q), tvlm::DimensionError);
}

TEST_CASE("only 2-d dense weights are quantized") {
  REQUIRE(tvlm::should_quantize("proj.fc1.weight", Tensor::zeros({4, 32})));
  REQUIRE_FALSE(tvlm::should_quantize("proj.fc1.bias", Tensor::zeros({4, 32})));
  REQUIRE_FALSE(tvlm::should_quantize("ln.gain", Tensor::zeros({4, 32})));
  REQUIRE_FALSE(tvlm::should_quantize("proj.fc1.weight", Tensor::zeros({32})));
}

TEST_CASE("applying quantization in place matches the dequantized codes") {
  tvlm::Rng rng = tvlm::derive_rng(59, "test.quant.apply");
  Tensor w = Tensor::zeros({3, 32});
  for (auto& v : w.mutable_value()) v = rng.uniform(-1.0, 1.0);
  Tensor b = Tensor::zeros({3});
  b.mutable_value() = {0.1, -0.2, 0.3};

  Tensor w_copy = Tensor::from(w.shape(), std::vector<double>(w.value()));
  QuantizedTensor q = tvlm::quantize_rows(w_copy, 32);

  tvlm::ParamMap pm;
  pm.add("layer.weight", w);
  pm.add("layer.bias", b);
  tvlm::apply_quantization(pm, 32);

  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 32; ++c) REQUIRE(w.at(r, c) == q.value_at(r, c));
  // Bias is untouched.
  REQUIRE(b.value() == std::vector<double>{0.1, -0.2, 0.3});

  auto table = tvlm::quantize_params(pm, 32);
  REQUIRE(table.size() == 1);
  REQUIRE(table.count("layer.weight") == 1);
}
