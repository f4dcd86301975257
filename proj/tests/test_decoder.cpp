#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "oracles.hpp"
#include "tilevlm/decoder.hpp"
#include "tilevlm/model.hpp"

using tvlm::Decoder;
using tvlm::KVCache;
using tvlm::Tensor;

namespace {

Decoder small_decoder(std::uint64_t seed) {
  tvlm::Rng rng = tvlm::derive_rng(seed, "test.decoder.init");
  return Decoder(32, 4, 2, 16, rng);
}

Tensor random_embs(std::size_t t, std::size_t d, std::uint64_t seed) {
  Tensor x = Tensor::zeros({t, d});
  tvlm::Rng rng = tvlm::derive_rng(seed, "test.decoder.embs");
  for (auto& v : x.mutable_value()) v = rng.uniform(-0.5, 0.5);
  return x;
}

}  // namespace

TEST_CASE("text codec round-trips bytes and drops control ids") {
  std::vector<int> ids = tvlm::encode_text("hi there");
  REQUIRE(ids == std::vector<int>{'h', 'i', ' ', 't', 'h', 'e', 'r', 'e'});
  REQUIRE(tvlm::decode_text(ids) == "hi there");
  REQUIRE(tvlm::decode_text({'H', tvlm::vocab::kBos, 'i', tvlm::vocab::kImg}) == "Hi");
  REQUIRE(tvlm::encode_text("").empty());
}

TEST_CASE("incremental decoding reproduces the parallel forward bit-exactly") {
  Decoder dec = small_decoder(101);
  Tensor embs = random_embs(5, 32, 102);

  tvlm::NoGradGuard ng;
  Tensor parallel = dec.forward(embs);
  REQUIRE(parallel.rows() == 5);
  REQUIRE(parallel.cols() == static_cast<std::size_t>(tvlm::vocab::kSize));

  KVCache cache(dec.depth);
  for (std::size_t r = 0; r < 5; ++r) {
    Tensor step = dec.decode_step(tvlm::slice_rows(embs, r, r + 1), cache);
    REQUIRE(step.rows() == 1);
    for (std::size_t j = 0; j < step.cols(); ++j) {
      INFO("position " << r << ", vocab " << j);
      REQUIRE(step.at(0, j) == parallel.at(r, j));
    }
  }
  REQUIRE(cache.len == 5);
}

TEST_CASE("decode step validates its input and the cache budget") {
  Decoder dec = small_decoder(103);
  KVCache cache(dec.depth);
  REQUIRE_THROWS_AS(dec.decode_step(Tensor::zeros({2, 32}), cache), tvlm::DimensionError);
  REQUIRE_THROWS_AS(dec.decode_step(Tensor::zeros({1, 16}), cache), tvlm::DimensionError);

  for (std::size_t i = 0; i < dec.max_seq; ++i)
    dec.decode_step(random_embs(1, 32, 200 + i), cache);
  REQUIRE_THROWS_AS(dec.decode_step(random_embs(1, 32, 999), cache), tvlm::ContractError);
}

TEST_CASE("forward rejects sequences beyond the window") {
  Decoder dec = small_decoder(104);
  tvlm::NoGradGuard ng;
  REQUIRE_THROWS_AS(dec.forward(random_embs(17, 32, 105)), tvlm::ContractError);
}

TEST_CASE("greedy ties resolve to the lowest id") {
  Decoder dec = small_decoder(106);
  // A zeroed head makes every logit identical, so each step is a full tie
  // and the argmax must settle on id 0 (an ordinary byte, never EOS).
  for (auto& v : dec.head.weight.mutable_value()) v = 0.0;
  for (auto& v : dec.head.bias.mutable_value()) v = 0.0;
  std::vector<int> out = dec.generate(random_embs(2, 32, 107), 3);
  REQUIRE(out == std::vector<int>{0, 0, 0});
}

TEST_CASE("generation stops at the end-of-sequence id") {
  Decoder dec = small_decoder(108);
  for (auto& v : dec.head.weight.mutable_value()) v = 0.0;
  for (auto& v : dec.head.bias.mutable_value()) v = 0.0;
  dec.head.bias.mutable_value()[static_cast<std::size_t>(tvlm::vocab::kEos)] = 1.0;
  std::vector<int> out = dec.generate(random_embs(2, 32, 109), 8);
  REQUIRE(out.empty());
}

TEST_CASE("generation stops when the window fills") {
  tvlm::Rng rng = tvlm::derive_rng(110, "test.decoder.window");
  Decoder dec(32, 4, 1, 4, rng);
  for (auto& v : dec.head.weight.mutable_value()) v = 0.0;
  for (auto& v : dec.head.bias.mutable_value()) v = 0.0;
  // Prefix takes 2 of 4 positions; each emitted byte consumes one more, and
  // the final byte is emitted without re-entering the full cache.
  std::vector<int> out = dec.generate(random_embs(2, 32, 111), 10);
  REQUIRE(out.size() == 3);
  REQUIRE_THROWS_AS(dec.generate(Tensor::zeros({0, 32}), 4), tvlm::ContractError);
}

TEST_CASE("sequence assembly lays out image, control, prompt, and answer ids") {
  tvlm::Engine engine{tvlm::EngineConfig{}};
  tvlm::Image img(32, 32, 3, 0.25);

  auto [logits, sb] = engine.sample_logits(img, "ab", "c", tvlm::Branch::kLarge);
  // 4 image tokens, BOS, 'a', 'b', 'c', EOS.
  std::vector<int> want_ids{tvlm::vocab::kImg, tvlm::vocab::kImg, tvlm::vocab::kImg,
                            tvlm::vocab::kImg, tvlm::vocab::kBos, 'a',
                            'b',               'c',               tvlm::vocab::kEos};
  REQUIRE(sb.ids == want_ids);
  REQUIRE(sb.image_tokens == 4);
  REQUIRE(logits.rows() == sb.ids.size());
  REQUIRE(logits.cols() == static_cast<std::size_t>(tvlm::vocab::kSize));

  // Loss sits exactly on positions predicting answer content or EOS.
  std::vector<bool> want_mask{false, false, false, false, false, false, true, true, false};
  REQUIRE(sb.loss_mask == want_mask);
  REQUIRE(sb.targets[6] == 'c');
  REQUIRE(sb.targets[7] == tvlm::vocab::kEos);
  tvlm::tape().clear();
}

TEST_CASE("answers decode greedily from the assembled prefix") {
  tvlm::Engine engine{tvlm::EngineConfig{}};
  tvlm::Image img(32, 32, 3, 0.6);

  std::string ans = engine.infer_answer(img, "caption:", tvlm::Branch::kSmall, 5);
  REQUIRE(ans.size() <= 5);

  // The same inputs must decode to the same answer: inference is pure.
  REQUIRE(engine.infer_answer(img, "caption:", tvlm::Branch::kSmall, 5) == ans);
}
