#include <catch2/catch_amalgamated.hpp>

#include <sstream>
#include <string>
#include <vector>

#include "tilevlm/metrics.hpp"
#include "tilevlm/rng.hpp"

using tvlm::ExtractionResult;
using tvlm::PrfResult;
using tvlm::ScoreRow;

TEST_CASE("field accuracy is the ratio of summed tallies") {
  REQUIRE(tvlm::field_accuracy({{4, 4}}) == 1.0);
  REQUIRE(tvlm::field_accuracy({{0, 3}, {0, 5}}) == 0.0);
  REQUIRE(tvlm::field_accuracy({{2, 4}, {3, 4}}) == 0.625);
}

TEST_CASE("field accuracy weights samples by their field counts") {
  // Two samples, 1/2 and 9/10: the pooled ratio is 10/12, not the 0.7 a
  // mean of per-sample ratios would give.
  double pooled = tvlm::field_accuracy({{1, 2}, {9, 10}});
  REQUIRE_THAT(pooled, Catch::Matchers::WithinAbs(10.0 / 12.0, 1e-15));
  double mean_of_ratios = (1.0 / 2.0 + 9.0 / 10.0) / 2.0;
  REQUIRE_THAT(mean_of_ratios, Catch::Matchers::WithinAbs(0.7, 1e-15));
  REQUIRE(pooled != mean_of_ratios);
}

TEST_CASE("field accuracy rejects impossible or empty tallies") {
  REQUIRE_THROWS_AS(tvlm::field_accuracy({{5, 4}}), tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::field_accuracy({{0, 0}, {0, 0}}), tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::field_accuracy({}), tvlm::ContractError);
}

TEST_CASE("precision at k keeps the denominator fixed at k") {
  REQUIRE(tvlm::precision_at_k({1, 1, 1, 1, 1, 1, 1, 1, 1, 1}) == 1.0);
  REQUIRE(tvlm::precision_at_k({1, 1, 1, 1, 1, 1, 1, 0, 0, 0}) == 0.7);
  // A three-item list scores 3/10, not 3/3: missing candidates are misses.
  REQUIRE(tvlm::precision_at_k({1, 1, 1}) == 0.3);
  // Hits past rank k are invisible.
  REQUIRE(tvlm::precision_at_k({0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1}) == 0.0);
  REQUIRE(tvlm::precision_at_k({1, 0, 1}, 2) == 0.5);
  REQUIRE(tvlm::precision_at_k({}) == 0.0);
  REQUIRE_THROWS_AS(tvlm::precision_at_k({1, 1}, 0), tvlm::ParameterError);
}

TEST_CASE("precision at k ignores order below the cutoff") {
  std::vector<int> a{1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
  std::vector<int> b{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  REQUIRE(tvlm::precision_at_k(a) == tvlm::precision_at_k(b));
}

TEST_CASE("precision, recall, and f1 follow the confusion counts") {
  PrfResult perfect = tvlm::precision_recall_f1({1, 0, 1}, {1, 0, 1});
  REQUIRE(perfect.precision == 1.0);
  REQUIRE(perfect.recall == 1.0);
  REQUIRE(perfect.f1 == 1.0);
  REQUIRE(perfect.warnings.empty());

  // tp=3, fp=1, fn=3.
  PrfResult r = tvlm::precision_recall_f1({1, 1, 1, 1, 0, 0, 0}, {1, 1, 1, 0, 1, 1, 1});
  REQUIRE(r.precision == 0.75);
  REQUIRE(r.recall == 0.5);
  REQUIRE_THAT(r.f1, Catch::Matchers::WithinAbs(0.6, 1e-15));
}

TEST_CASE("f1 equals the shared value when precision and recall agree") {
  // tp=1, fp=1, fn=1: precision = recall = 0.5 = f1.
  PrfResult r = tvlm::precision_recall_f1({1, 1, 0}, {1, 0, 1});
  REQUIRE(r.precision == 0.5);
  REQUIRE(r.recall == 0.5);
  REQUIRE(r.f1 == 0.5);
}

TEST_CASE("f1 is symmetric in its inputs only through the confusion matrix") {
  // Swapping predictions and labels swaps fp and fn, swapping precision and
  // recall, but f1 is unchanged.
  PrfResult fwd = tvlm::precision_recall_f1({1, 1, 0, 0, 1}, {1, 0, 1, 0, 1});
  PrfResult rev = tvlm::precision_recall_f1({1, 0, 1, 0, 1}, {1, 1, 0, 0, 1});
  REQUIRE(fwd.precision == rev.recall);
  REQUIRE(fwd.recall == rev.precision);
  REQUIRE(fwd.f1 == rev.f1);
}

TEST_CASE("f1 is bounded by its components") {
  tvlm::Rng rng = tvlm::derive_rng(61, "test.metrics.bounds");
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> p(12), t(12);
    for (auto& v : p) v = static_cast<int>(rng.next_u64() % 2);
    for (auto& v : t) v = static_cast<int>(rng.next_u64() % 2);
    PrfResult r = tvlm::precision_recall_f1(p, t);
    REQUIRE(r.f1 <= 2.0 * r.precision + 1e-15);
    REQUIRE(r.f1 <= 2.0 * r.recall + 1e-15);
    REQUIRE(r.f1 <= std::max(r.precision, r.recall) + 1e-15);
    REQUIRE(r.f1 >= 0.0);
  }
}

TEST_CASE("zero denominators default to zero with a warning, not a crash") {
  PrfResult no_pos_pred = tvlm::precision_recall_f1({0, 0, 0}, {1, 1, 0});
  REQUIRE(no_pos_pred.precision == 0.0);
  REQUIRE(no_pos_pred.f1 == 0.0);
  REQUIRE_FALSE(no_pos_pred.warnings.empty());

  PrfResult no_pos_truth = tvlm::precision_recall_f1({1, 0, 0}, {0, 0, 0});
  REQUIRE(no_pos_truth.recall == 0.0);
  REQUIRE(no_pos_truth.f1 == 0.0);

  PrfResult all_zero = tvlm::precision_recall_f1({0, 0}, {0, 0});
  REQUIRE(all_zero.precision == 0.0);
  REQUIRE(all_zero.recall == 0.0);
  REQUIRE(all_zero.f1 == 0.0);
  REQUIRE(all_zero.warnings.size() == 3);

  REQUIRE_THROWS_AS(tvlm::precision_recall_f1({1, 0}, {1}), tvlm::ContractError);
}

TEST_CASE("score files parse strictly") {
  std::istringstream ok("id,value\r\na,1\nb,0.5\n\nc,-2\n");
  std::vector<ScoreRow> rows = tvlm::parse_score_csv(ok, "ok");
  REQUIRE(rows.size() == 3);
  REQUIRE(rows[0].id == "a");
  REQUIRE(rows[0].value == 1.0);
  REQUIRE(rows[1].value == 0.5);
  REQUIRE(rows[2].value == -2.0);

  auto parse_one = [](const std::string& text) {
    std::istringstream s(text);
    return tvlm::parse_score_csv(s, "bad");
  };
  REQUIRE_THROWS_AS(parse_one(""), tvlm::EngineError);
  REQUIRE_THROWS_AS(parse_one("wrong,header\n"), tvlm::EngineError);
  REQUIRE_THROWS_AS(parse_one("id,value\nnocomma\n"), tvlm::EngineError);
  REQUIRE_THROWS_AS(parse_one("id,value\n,5\n"), tvlm::EngineError);
  REQUIRE_THROWS_AS(parse_one("id,value\na,\n"), tvlm::EngineError);
  REQUIRE_THROWS_AS(parse_one("id,value\na,1.5x\n"), tvlm::EngineError);
  REQUIRE_THROWS_AS(tvlm::load_score_csv("tvlm_test_missing.csv"), tvlm::EngineError);
}

TEST_CASE("the f1 scorer joins prediction and truth rows by id") {
  std::vector<ScoreRow> pred{{"a", 1}, {"b", 1}, {"c", 0}};
  std::vector<ScoreRow> truth{{"c", 1}, {"a", 1}, {"b", 0}};  // order differs
  tvlm::ScoreOutcome out = tvlm::score_metric("f1", pred, truth);
  // tp=1 (a), fp=1 (b), fn=1 (c).
  REQUIRE(out.value == 0.5);
  REQUIRE(out.warnings.empty());

  REQUIRE_THROWS_AS(tvlm::score_metric("f1", pred, {{"a", 1}, {"b", 0}}), tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::score_metric("f1", pred, {{"a", 1}, {"b", 0}, {"zz", 1}}),
                    tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::score_metric("f1", {{"a", 0.25}}, {{"a", 1}}), tvlm::EngineError);
  REQUIRE_THROWS_AS(tvlm::score_metric("f1", {{"a", 1}, {"a", 0}}, truth), tvlm::EngineError);
}

TEST_CASE("the ranking scorer reads prediction file order as the ranking") {
  std::vector<ScoreRow> pred;
  for (int i = 0; i < 10; ++i) pred.push_back({"d" + std::to_string(i), 0.0});
  std::vector<ScoreRow> truth;
  for (int i = 0; i < 12; ++i) truth.push_back({"d" + std::to_string(i), i < 7 ? 1.0 : 0.0});

  tvlm::ScoreOutcome out = tvlm::score_metric("p@10", pred, truth);
  REQUIRE(out.value == 0.7);

  // A ranked id the truth does not know is a contract violation.
  std::vector<ScoreRow> stray = pred;
  stray.push_back({"mystery", 0.0});
  REQUIRE_THROWS_AS(tvlm::score_metric("p@10", stray, truth), tvlm::ContractError);
}

TEST_CASE("the field-accuracy scorer pools counts across samples") {
  std::vector<ScoreRow> pred{{"s0", 1}, {"s1", 9}};
  std::vector<ScoreRow> truth{{"s0", 2}, {"s1", 10}};
  tvlm::ScoreOutcome out = tvlm::score_metric("field-acc", pred, truth);
  REQUIRE_THAT(out.value, Catch::Matchers::WithinAbs(10.0 / 12.0, 1e-15));

  REQUIRE_THROWS_AS(tvlm::score_metric("field-acc", {{"s0", 1.5}}, {{"s0", 2}}),
                    tvlm::EngineError);
  REQUIRE_THROWS_AS(tvlm::score_metric("field-acc", {{"s0", 3}}, {{"s0", 2}}),
                    tvlm::ContractError);
  REQUIRE_THROWS_AS(tvlm::score_metric("nonsense", pred, truth), tvlm::ParameterError);
}
