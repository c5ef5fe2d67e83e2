#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnlens/alignment.hpp"
#include "attnlens/forward.hpp"
#include "attnlens/vocab.hpp"

namespace attnlens {

// ||v_j^h|| per layer/head/source position, straight from the recorded pass.
inline const std::vector<std::vector<Tensor>>& value_norms(const AttentionRecord& rec) {
  if (rec.value_norms.empty()) throw DataError("value_norms: record not populated");
  return rec.value_norms;
}

// ||attn_t|| per layer/step: norms of the merged head outputs after W^O.
inline const std::vector<Tensor>& attn_output_norms(const AttentionRecord& rec) {
  if (rec.merged_norms.empty()) throw DataError("attn_output_norms: record not populated");
  return rec.merged_norms;
}

struct CosineResult {
  Tensor m;                    // |x| x |x|, entries clamped to [-1, 1]
  std::vector<int> zero_rows;  // rows with zero norm, cosine defined as 0
  bool flagged = false;        // any zero-norm row seen
};

// Cosine similarity between every pair of encoder output representations.
inline CosineResult encoder_cosine(const AttentionRecord& rec) {
  const Tensor& e = rec.encoder_out;
  if (e.empty()) throw DataError("encoder_cosine: encoder outputs not recorded");
  const std::size_t n = e.rows();
  CosineResult out;
  out.m = Tensor(n, n);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    const double* row = e.raw() + i * e.cols();
    for (std::size_t c = 0; c < e.cols(); ++c) sq += row[c] * row[c];
    norms[i] = std::sqrt(sq);
    if (norms[i] == 0.0) {
      out.zero_rows.push_back(static_cast<int>(i));
      out.flagged = true;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (norms[i] == 0.0 || norms[j] == 0.0) continue;  // defined as 0
      double dot = 0.0;
      const double* a = e.raw() + i * e.cols();
      const double* b = e.raw() + j * e.cols();
      for (std::size_t c = 0; c < e.cols(); ++c) dot += a[c] * b[c];
      out.m(i, j) = std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
    }
  return out;
}

enum class PairCategory { StandardStandard, FinalizingStandard, FinalizingFinalizing };

inline const char* to_string(PairCategory c) {
  switch (c) {
    case PairCategory::StandardStandard: return "standard-standard";
    case PairCategory::FinalizingStandard: return "finalizing-standard";
    default: return "finalizing-finalizing";
  }
}

// Pooled mean and population std of cosine entries per source-pair category,
// over all unordered distinct pairs of every added sentence.
struct CosineStatsAccumulator {
  struct Cell {
    std::size_t count = 0;
    double mean = 0.0, m2 = 0.0;

    void add(double x) {
      ++count;
      const double delta = x - mean;
      mean += delta / static_cast<double>(count);
      m2 += delta * (x - mean);
    }
    double stddev() const {
      return count == 0 ? 0.0 : std::sqrt(m2 / static_cast<double>(count));
    }
  };
  Cell cells[3];

  void add(const Tensor& cosine, const std::vector<bool>& finalizing) {
    if (cosine.rows() != cosine.cols() || cosine.rows() != finalizing.size())
      throw DataError("cosine stats: shape mismatch");
    for (std::size_t i = 0; i < cosine.rows(); ++i)
      for (std::size_t j = i + 1; j < cosine.cols(); ++j) {
        const int fins = (finalizing[i] ? 1 : 0) + (finalizing[j] ? 1 : 0);
        cells[fins].add(cosine(i, j));
      }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    const PairCategory cats[3] = {PairCategory::StandardStandard,
                                  PairCategory::FinalizingStandard,
                                  PairCategory::FinalizingFinalizing};
    for (int k = 0; k < 3; ++k)
      j[to_string(cats[k])] = {{"count", cells[k].count},
                               {"mean", cells[k].count ? cells[k].mean : 0.0},
                               {"std", cells[k].stddev()}};
    return j;
  }
};

// Fraction of target tokens, per category, whose soft-alignment mass on the
// finalizing source columns exceeds the threshold. Rows attributed to
// sentinels are skipped; categories never seen keep count 0.
struct FinalizingRateAccumulator {
  double threshold;
  struct Cell {
    std::size_t count = 0, over = 0;
  };
  std::map<std::string, Cell> by_category;

  explicit FinalizingRateAccumulator(double thr) : threshold(thr) {
    if (!(thr > 0.0) || !(thr < 1.0))
      throw DataError("finalizing_attention_rate: threshold must lie in (0,1)");
    for (TokenCategory c : {TokenCategory::Function, TokenCategory::Content,
                            TokenCategory::Punctuation, TokenCategory::Sentinel})
      by_category[to_string(c)];
  }

  void add(const SoftAlignment& soft, const std::vector<int>& finalizing_cols,
           const std::vector<TokenCategory>& target_file_categories) {
    for (int c : finalizing_cols)
      if (c < 0 || static_cast<std::size_t>(c) >= soft.m.cols())
        throw DataError("finalizing_attention_rate: column out of range");
    for (std::size_t r = 0; r < soft.m.rows(); ++r) {
      const int t = row_to_target_file_index(soft.prov.setting, r, soft.m.rows());
      if (t < 0) continue;
      if (static_cast<std::size_t>(t) >= target_file_categories.size())
        throw DataError("finalizing_attention_rate: category tags too short");
      double mass = 0.0;
      for (int c : finalizing_cols) mass += soft.m(r, static_cast<std::size_t>(c));
      Cell& cell = by_category[to_string(target_file_categories[static_cast<std::size_t>(t)])];
      ++cell.count;
      if (mass > threshold) ++cell.over;
    }
  }

  double rate(TokenCategory c) const {
    const Cell& cell = by_category.at(to_string(c));
    return cell.count == 0 ? 0.0
                           : static_cast<double>(cell.over) / static_cast<double>(cell.count);
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"threshold", threshold}, {"categories", nlohmann::json::object()}};
    for (const auto& [name, cell] : by_category)
      j["categories"][name] = {
          {"count", cell.count},
          {"over", cell.over},
          {"rate", cell.count ? static_cast<double>(cell.over) / static_cast<double>(cell.count)
                              : 0.0}};
    return j;
  }
};

// The head whose solo hard alignment scores the lowest dev AER; ties go to the
// lowest head index.
inline int select_best_head(const std::vector<double>& per_head_aer) {
  if (per_head_aer.empty()) throw DataError("select_best_head: empty table");
  int best = 0;
  for (int h = 1; h < static_cast<int>(per_head_aer.size()); ++h)
    if (per_head_aer[static_cast<std::size_t>(h)] < per_head_aer[static_cast<std::size_t>(best)])
      best = h;
  return best;
}

// Single-sentence probe bundle; corpus-level aggregation runs through the
// accumulators above.
struct ProbeReport {
  std::vector<std::vector<Tensor>> value_norms;  // [layer][head] x |x|
  std::vector<Tensor> attn_output_norms;         // [layer] x |y|
  CosineResult cosine;

  nlohmann::json to_json() const {
    nlohmann::json vn = nlohmann::json::array();
    for (const auto& layer : value_norms) {
      nlohmann::json heads = nlohmann::json::array();
      for (const Tensor& t : layer) {
        nlohmann::json v = nlohmann::json::array();
        for (std::size_t i = 0; i < t.size(); ++i) v.push_back(t.raw()[i]);
        heads.push_back(std::move(v));
      }
      vn.push_back(std::move(heads));
    }
    nlohmann::json an = nlohmann::json::array();
    for (const Tensor& t : attn_output_norms) {
      nlohmann::json v = nlohmann::json::array();
      for (std::size_t i = 0; i < t.size(); ++i) v.push_back(t.raw()[i]);
      an.push_back(std::move(v));
    }
    nlohmann::json cos = nlohmann::json::array();
    for (std::size_t r = 0; r < cosine.m.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t c = 0; c < cosine.m.cols(); ++c) row.push_back(cosine.m(r, c));
      cos.push_back(std::move(row));
    }
    return {{"value_norms", vn},
            {"attn_output_norms", an},
            {"encoder_cosine", cos},
            {"cosine_zero_rows", cosine.zero_rows}};
  }
};

inline ProbeReport probe_report(const AttentionRecord& rec) {
  ProbeReport rep;
  rep.value_norms = value_norms(rec);
  rep.attn_output_norms = attn_output_norms(rec);
  rep.cosine = encoder_cosine(rec);
  return rep;
}

}  // namespace attnlens
