#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tilevlm/common.hpp"

namespace tvlm {

// Per-sample structured-extraction tallies: how many fields the sample
// carries and how many of them came out right.
struct ExtractionResult {
  std::size_t correct = 0;
  std::size_t valid = 0;
};

// Corpus-level ratio of sums. Deliberately NOT the mean of per-sample
// ratios: samples with more fields carry proportionally more weight.
inline double field_accuracy(const std::vector<ExtractionResult>& results) {
  std::size_t correct = 0, valid = 0;
  for (const ExtractionResult& r : results) {
    if (r.correct > r.valid)
      throw ContractError("field_accuracy: sample reports " + std::to_string(r.correct) +
                          " correct fields out of only " + std::to_string(r.valid));
    correct += r.correct;
    valid += r.valid;
  }
  if (valid == 0) throw ContractError("field_accuracy: corpus has no valid fields");
  return static_cast<double>(correct) / static_cast<double>(valid);
}

// Relevant hits among the first k entries, over a denominator fixed at k.
// A list shorter than k keeps the full denominator — missing candidates
// score as misses.
inline double precision_at_k(const std::vector<int>& relevance, std::size_t k = 10) {
  if (k == 0) throw ParameterError("precision_at_k: k must be at least 1");
  std::size_t upto = std::min(k, relevance.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < upto; ++i)
    if (relevance[i] != 0) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

struct PrfResult {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<std::string> warnings;  // which denominators were zero
};

inline PrfResult precision_recall_f1(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size())
    throw ContractError("precision_recall_f1: " + std::to_string(pred.size()) +
                        " predictions against " + std::to_string(truth.size()) + " labels");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++tp;
    else if (p && !t) ++fp;
    else if (!p && t) ++fn;
  }
  PrfResult r;
  if (tp + fp == 0)
    r.warnings.push_back("no positive predictions; precision defaulted to 0");
  else
    r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn == 0)
    r.warnings.push_back("no positive labels; recall defaulted to 0");
  else
    r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (r.precision + r.recall == 0.0)
    r.warnings.push_back("precision + recall is 0; f1 defaulted to 0");
  else
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

// ---------------------------------------------------------------------------
// Scorer file format: CSV with header "id,value", one row per item.
//   f1        — value is the 0/1 label (prediction / truth); ids must match.
//   p@10      — prediction rows are the ranking in file order; truth value
//               is 0/1 relevance for that id.
//   field-acc — prediction value is the correct-field count per sample,
//               truth value is the valid-field count; ids must match.
// ---------------------------------------------------------------------------

struct ScoreRow {
  std::string id;
  double value = 0.0;
};

inline std::vector<ScoreRow> parse_score_csv(std::istream& is, const std::string& origin) {
  std::vector<ScoreRow> rows;
  std::string line;
  if (!std::getline(is, line)) throw EngineError(origin + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id,value") throw EngineError(origin + ": expected header 'id,value', got '" + line + "'");
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t comma = line.find(',');
    if (comma == std::string::npos || comma == 0)
      throw EngineError(origin + ":" + std::to_string(line_no) + ": expected 'id,value'");
    ScoreRow row;
    row.id = line.substr(0, comma);
    try {
      std::size_t used = 0;
      row.value = std::stod(line.substr(comma + 1), &used);
      if (comma + 1 + used != line.size()) throw std::invalid_argument("trailing junk");
    } catch (const std::exception&) {
      throw EngineError(origin + ":" + std::to_string(line_no) + ": bad value '" +
                        line.substr(comma + 1) + "'");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<ScoreRow> load_score_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw EngineError("cannot open " + path);
  return parse_score_csv(is, path);
}

namespace detail {

inline std::map<std::string, double> score_rows_by_id(const std::vector<ScoreRow>& rows,
                                                      const std::string& origin) {
  std::map<std::string, double> by_id;
  for (const ScoreRow& r : rows)
    if (!by_id.emplace(r.id, r.value).second)
      throw EngineError(origin + ": duplicate id '" + r.id + "'");
  return by_id;
}

inline int as_binary(double v, const std::string& origin, const std::string& id) {
  if (v == 0.0) return 0;
  if (v == 1.0) return 1;
  throw EngineError(origin + ": id '" + id + "' has non-binary value");
}

}  // namespace detail

struct ScoreOutcome {
  double value = 0.0;
  std::vector<std::string> warnings;
};

inline ScoreOutcome score_metric(const std::string& metric, const std::vector<ScoreRow>& pred,
                                 const std::vector<ScoreRow>& truth) {
  ScoreOutcome out;
  if (metric == "f1") {
    auto truth_by_id = detail::score_rows_by_id(truth, "truth");
    detail::score_rows_by_id(pred, "pred");  // duplicate check
    if (pred.size() != truth_by_id.size())
      throw ContractError("f1: prediction and truth id sets differ in size");
    std::vector<int> p, t;
    for (const ScoreRow& row : pred) {
      auto it = truth_by_id.find(row.id);
      if (it == truth_by_id.end()) throw ContractError("f1: id '" + row.id + "' missing from truth");
      p.push_back(detail::as_binary(row.value, "pred", row.id));
      t.push_back(detail::as_binary(it->second, "truth", row.id));
    }
    PrfResult r = precision_recall_f1(p, t);
    out.value = r.f1;
    out.warnings = std::move(r.warnings);
  } else if (metric == "p@10") {
    auto truth_by_id = detail::score_rows_by_id(truth, "truth");
    detail::score_rows_by_id(pred, "pred");
    std::vector<int> relevance;
    for (const ScoreRow& row : pred) {
      auto it = truth_by_id.find(row.id);
      if (it == truth_by_id.end())
        throw ContractError("p@10: ranked id '" + row.id + "' missing from truth");
      relevance.push_back(detail::as_binary(it->second, "truth", row.id));
    }
    out.value = precision_at_k(relevance, 10);
  } else if (metric == "field-acc") {
    auto truth_by_id = detail::score_rows_by_id(truth, "truth");
    detail::score_rows_by_id(pred, "pred");
    if (pred.size() != truth_by_id.size())
      throw ContractError("field-acc: prediction and truth id sets differ in size");
    std::vector<ExtractionResult> results;
    for (const ScoreRow& row : pred) {
      auto it = truth_by_id.find(row.id);
      if (it == truth_by_id.end())
        throw ContractError("field-acc: id '" + row.id + "' missing from truth");
      auto as_count = [](double v, const std::string& origin, const std::string& id) {
        if (v < 0.0 || v != static_cast<double>(static_cast<std::size_t>(v)))
          throw EngineError(origin + ": id '" + id + "' has non-count value");
        return static_cast<std::size_t>(v);
      };
      ExtractionResult r;
      r.correct = as_count(row.value, "pred", row.id);
      r.valid = as_count(it->second, "truth", row.id);
      results.push_back(r);
    }
    out.value = field_accuracy(results);
  } else {
    throw ParameterError("unknown metric '" + metric + "' (expected f1, p@10, or field-acc)");
  }
  return out;
}

}  // namespace tvlm
