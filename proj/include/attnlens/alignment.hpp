#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attnlens/corpus.hpp"
#include "attnlens/forward.hpp"
#include "attnlens/vocab.hpp"

namespace attnlens {

// Which target token an attention row is attributed to: the step's prediction
// (A_{t,j}) or the step's input token (A_{i,j}, = y_{t-1} under force decoding).
enum class AlignSetting { DecoderOutput, DecoderInput };

inline const char* to_string(AlignSetting s) {
  return s == AlignSetting::DecoderOutput ? "decoder-output" : "decoder-input";
}

struct AlignProvenance {
  int layer = 0;
  std::vector<double> head_weights;  // blending weights (mean over steps when per_step)
  bool per_step_weights = false;
  bool degenerate_heads = false;  // uniform fallback fired at some step
  bool corpus_averaged = false;
  bool masked = false;
  std::vector<int> masked_cols;
  AlignSetting setting = AlignSetting::DecoderOutput;

  nlohmann::json to_json() const {
    return {{"layer", layer},
            {"head_weights", head_weights},
            {"per_step_weights", per_step_weights},
            {"degenerate_heads", degenerate_heads},
            {"corpus_averaged", corpus_averaged},
            {"masked", masked},
            {"masked_cols", masked_cols},
            {"setting", to_string(setting)}};
  }
};

// |y| x |x| nonnegative matrix; rows sum to 1 when unmasked, <= 1 when masked.
struct SoftAlignment {
  Tensor m;
  AlignProvenance prov;
};

// One chosen source column per row.
struct AlignmentMatrix {
  Tensor m;               // 0/1, one 1 per row
  std::vector<int> cols;  // the chosen column per row
  AlignProvenance prov;
};

// Weighted head blend of one layer's attention matrices.
inline SoftAlignment soft_alignment(const AttentionRecord& rec, int layer,
                                    const std::vector<double>& head_weights,
                                    AlignSetting setting) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= rec.attn.size())
    throw DataError("soft_alignment: layer out of range");
  const auto& heads = rec.attn[static_cast<std::size_t>(layer)];
  if (heads.empty()) throw DataError("soft_alignment: empty record");
  if (head_weights.size() != heads.size())
    throw DataError("soft_alignment: weight vector length != head count");
  double sum = 0.0;
  for (double w : head_weights) {
    if (!(w >= 0.0)) throw DataError("soft_alignment: negative head weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DataError("soft_alignment: head weights must sum to 1");

  SoftAlignment out;
  out.m = Tensor(heads[0].rows(), heads[0].cols());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const Tensor& a = heads[h];
    for (std::size_t i = 0; i < a.size(); ++i) out.m.raw()[i] += head_weights[h] * a.raw()[i];
  }
  out.prov.layer = layer;
  out.prov.head_weights = head_weights;
  out.prov.setting = setting;
  return out;
}

inline std::vector<double> uniform_head_weights(std::size_t n_heads) {
  return std::vector<double>(n_heads, 1.0 / static_cast<double>(n_heads));
}

// Per-row argmax; ties go to the lowest column index. Masked columns are
// never selected (relevant when a row's whole mass sat on masked columns).
inline AlignmentMatrix hard_alignment(const SoftAlignment& soft) {
  AlignmentMatrix out;
  out.prov = soft.prov;
  out.m = Tensor(soft.m.rows(), soft.m.cols());
  out.cols.resize(soft.m.rows());
  std::vector<bool> banned(soft.m.cols(), false);
  for (int c : soft.prov.masked_cols) banned[static_cast<std::size_t>(c)] = true;
  for (std::size_t r = 0; r < soft.m.rows(); ++r) {
    const double* row = soft.m.raw() + r * soft.m.cols();
    int best = -1;
    for (std::size_t j = 0; j < soft.m.cols(); ++j) {
      if (banned[j]) continue;
      if (best < 0 || row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    }
    if (best < 0) throw DataError("hard_alignment: every column masked");
    out.cols[r] = best;
    out.m(r, static_cast<std::size_t>(best)) = 1.0;
  }
  return out;
}

// Zeroes the given source columns without renormalizing: the argmax among the
// remaining columns is untouched and the lost row mass documents how much
// attention went to the masked tokens.
inline SoftAlignment mask_finalizing(const SoftAlignment& soft,
                                     const std::vector<int>& finalizing_cols) {
  if (finalizing_cols.empty()) throw DataError("mask_finalizing: no columns given");
  std::set<int> cols(finalizing_cols.begin(), finalizing_cols.end());
  for (int c : cols)
    if (c < 0 || static_cast<std::size_t>(c) >= soft.m.cols())
      throw DataError("mask_finalizing: column out of range");
  if (cols.size() >= soft.m.cols())
    throw DataError("mask_finalizing: at least one standard column must remain");

  SoftAlignment out = soft;
  for (int c : cols)
    for (std::size_t r = 0; r < out.m.rows(); ++r) out.m(r, static_cast<std::size_t>(c)) = 0.0;
  out.prov.masked = true;
  out.prov.masked_cols.assign(cols.begin(), cols.end());
  return out;
}

// Display-only view with rows rescaled back to sum 1 (zero rows left as-is).
inline Tensor renormalized_view(const SoftAlignment& soft) {
  Tensor m = soft.m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) s += m(r, j);
    if (s > 0.0)
      for (std::size_t j = 0; j < m.cols(); ++j) m(r, j) /= s;
  }
  return m;
}

// Maps an attention row to the target-side file token index it is attributed
// to, or -1 for rows attributed to a sentinel. Decoder rows r = 0..|y|-1 hold
// input y_r and predict y_{r+1}.
inline int row_to_target_file_index(AlignSetting setting, std::size_t row, std::size_t n_rows) {
  if (row >= n_rows) throw DataError("row_to_target_file_index: row out of range");
  if (setting == AlignSetting::DecoderOutput)
    return row + 1 < n_rows ? static_cast<int>(row) : -1;  // last row predicts </s>
  return row == 0 ? -1 : static_cast<int>(row) - 1;        // first row inputs </s>
}

// Hypothesis pairs in file coordinates (t = target file index, j = source
// column; the source sentinel column equals the source file length).
inline AlignSet alignment_file_pairs(const AlignmentMatrix& hard) {
  AlignSet pairs;
  for (std::size_t r = 0; r < hard.cols.size(); ++r) {
    const int t = row_to_target_file_index(hard.prov.setting, r, hard.cols.size());
    if (t < 0) continue;
    pairs.push_back({t, hard.cols[r]});
  }
  normalize_align(pairs);
  return pairs;
}

struct HeadContribution {
  std::vector<double> weights;
  bool degenerate = false;  // all-zero gradient scores; uniform fallback
};

// Whose probability the gradients target: the reference token fed in under
// teacher forcing (default) or the model's own argmax prediction.
enum class GradTarget { Reference, Predicted };

// Node holding the per-step probability P(y_t | y_<t, x) of the requested
// target. The Predicted variant appends pick nodes to the live tape.
inline Var probability_node(ForwardPass& fp, GradTarget target) {
  if (target == GradTarget::Reference) return fp.probs;
  const Tensor& lg = fp.tape.value(fp.logits);
  std::vector<int> pred(lg.rows());
  for (std::size_t r = 0; r < lg.rows(); ++r) {
    const double* row = lg.raw() + r * lg.cols();
    std::size_t best = 0;
    for (std::size_t c = 1; c < lg.cols(); ++c)
      if (row[c] > row[best]) best = c;
    pred[r] = static_cast<int>(best);
  }
  return fp.tape.exp(fp.tape.log_softmax_pick(fp.logits, pred));
}

// c_h -> C_h = c_h / sum_h c_h, uniform when everything is zero.
inline HeadContribution normalize_head_scores(const std::vector<double>& scores) {
  if (scores.empty()) throw DataError("normalize_head_scores: no heads");
  double sum = 0.0;
  for (double c : scores) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw NumericError("normalize_head_scores: bad score");
    sum += c;
  }
  HeadContribution out;
  if (sum <= 0.0) {
    out.weights.assign(scores.size(), 1.0 / static_cast<double>(scores.size()));
    out.degenerate = true;
    return out;
  }
  out.weights.resize(scores.size());
  for (std::size_t h = 0; h < scores.size(); ++h) out.weights[h] = scores[h] / sum;
  return out;
}

// Head importance for one step: c_h = sum_j ||d P(y_step) / d v_j^h||_2 over
// the cross-attention value vectors of the given decoder layer.
inline HeadContribution head_contribution_at(ForwardPass& fp, Var prob, int layer,
                                             std::size_t row) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= fp.cross_v.size())
    throw DataError("head_contribution: layer out of range");
  const std::size_t ny = fp.tape.value(prob).size();
  if (row >= ny) throw DataError("head_contribution: step out of range");
  Tensor seed = Tensor::vec(ny);
  seed[row] = 1.0;
  fp.tape.backward(prob, seed);
  const auto& heads = fp.cross_v[static_cast<std::size_t>(layer)];
  std::vector<double> scores;
  scores.reserve(heads.size());
  for (Var v : heads) {
    const Tensor g = fp.tape.grad(v);
    double c = 0.0;
    for (std::size_t j = 0; j < g.rows(); ++j) {
      double sq = 0.0;
      const double* gr = g.raw() + j * g.cols();
      for (std::size_t k = 0; k < g.cols(); ++k) sq += gr[k] * gr[k];
      c += std::sqrt(sq);
    }
    scores.push_back(c);
  }
  return normalize_head_scores(scores);
}

inline HeadContribution head_contribution(ForwardPass& fp, int layer, std::size_t row,
                                          GradTarget target = GradTarget::Reference) {
  return head_contribution_at(fp, probability_node(fp, target), layer, row);
}

// Head-importance-weighted soft alignment: every row is blended with that
// step's C_h weights. Provenance stores the mean weights across steps.
inline SoftAlignment hi_soft_alignment(ForwardPass& fp, int layer, AlignSetting setting,
                                       GradTarget target = GradTarget::Reference) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= fp.record.attn.size())
    throw DataError("hi_soft_alignment: layer out of range");
  const auto& heads = fp.record.attn[static_cast<std::size_t>(layer)];
  if (heads.empty()) throw DataError("hi_soft_alignment: record not populated");
  const std::size_t ny = heads[0].rows();
  const std::size_t nx = heads[0].cols();
  const Var prob = probability_node(fp, target);

  SoftAlignment out;
  out.m = Tensor(ny, nx);
  out.prov.layer = layer;
  out.prov.setting = setting;
  out.prov.per_step_weights = true;
  std::vector<double> mean(heads.size(), 0.0);
  for (std::size_t r = 0; r < ny; ++r) {
    const HeadContribution hc = head_contribution_at(fp, prob, layer, r);
    out.prov.degenerate_heads = out.prov.degenerate_heads || hc.degenerate;
    for (std::size_t h = 0; h < heads.size(); ++h) {
      mean[h] += hc.weights[h] / static_cast<double>(ny);
      const double* a = heads[h].raw() + r * nx;
      double* o = out.m.raw() + r * nx;
      for (std::size_t j = 0; j < nx; ++j) o[j] += hc.weights[h] * a[j];
    }
  }
  out.prov.head_weights = std::move(mean);
  return out;
}

// Running mean of per-step head contributions, for the cheaper corpus-
// averaged weighting mode (one weight vector reused for every sentence).
struct HeadWeightAccumulator {
  std::vector<double> sum;
  std::size_t n = 0;
  bool degenerate = false;

  void add(const HeadContribution& hc) {
    if (sum.empty()) sum.assign(hc.weights.size(), 0.0);
    if (sum.size() != hc.weights.size())
      throw DataError("head weight accumulator: head count changed");
    for (std::size_t h = 0; h < sum.size(); ++h) sum[h] += hc.weights[h];
    degenerate = degenerate || hc.degenerate;
    ++n;
  }

  HeadContribution mean() const {
    if (n == 0) throw DataError("head weight accumulator: empty");
    HeadContribution out;
    out.degenerate = degenerate;
    out.weights.resize(sum.size());
    for (std::size_t h = 0; h < sum.size(); ++h)
      out.weights[h] = sum[h] / static_cast<double>(n);
    return out;
  }
};

struct AERCounts {
  std::size_t a = 0, s = 0, a_and_s = 0, a_and_p = 0;

  AERCounts& operator+=(const AERCounts& o) {
    a += o.a;
    s += o.s;
    a_and_s += o.a_and_s;
    a_and_p += o.a_and_p;
    return *this;
  }
};

struct AERResult {
  double aer = 0.0;
  AERCounts counts;
  bool empty_flagged = false;  // |A| + |S| == 0, AER defined as 0
  std::vector<AERCounts> per_sentence;

  nlohmann::json to_json() const {
    return {{"aer", aer},
            {"hyp", counts.a},
            {"sure", counts.s},
            {"hyp_and_sure", counts.a_and_s},
            {"hyp_and_poss", counts.a_and_p},
            {"empty", empty_flagged},
            {"sentences", per_sentence.size()}};
  }
};

namespace detail {

inline AERCounts aer_counts(AlignSet a, AlignSet s, AlignSet p) {
  normalize_align(a);
  normalize_align(s);
  normalize_align(p);
  if (!std::includes(p.begin(), p.end(), s.begin(), s.end()))
    throw DataError("aer: sure set is not a subset of possible");
  AERCounts c;
  c.a = a.size();
  c.s = s.size();
  for (const auto& pr : a) {
    if (std::binary_search(s.begin(), s.end(), pr)) ++c.a_and_s;
    if (std::binary_search(p.begin(), p.end(), pr)) ++c.a_and_p;
  }
  return c;
}

inline double aer_from_counts(const AERCounts& c) {
  const std::size_t denom = c.a + c.s;
  if (denom == 0) return 0.0;
  return 1.0 - static_cast<double>(c.a_and_s + c.a_and_p) / static_cast<double>(denom);
}

}  // namespace detail

// Pools counts across sentences before the final ratio.
struct AERAccumulator {
  AERCounts total;
  std::vector<AERCounts> per_sentence;

  void add(const AlignSet& hyp, const AlignSet& sure, const AlignSet& poss) {
    const AERCounts c = detail::aer_counts(hyp, sure, poss);
    total += c;
    per_sentence.push_back(c);
  }

  AERResult result() const {
    AERResult r;
    r.counts = total;
    r.aer = detail::aer_from_counts(total);
    r.empty_flagged = total.a + total.s == 0;
    r.per_sentence = per_sentence;
    return r;
  }
};

inline AERResult aer(const AlignSet& hyp, const AlignSet& sure, const AlignSet& poss) {
  AERAccumulator acc;
  acc.add(hyp, sure, poss);
  return acc.result();
}

// Argmin of the per-layer AER table. Ties go to the deeper layer for the
// decoder-output setting and to the shallower one for decoder-input.
inline int select_best_layer(const std::vector<double>& per_layer_aer, AlignSetting setting) {
  if (per_layer_aer.empty()) throw DataError("select_best_layer: empty table");
  int best = 0;
  for (int l = 1; l < static_cast<int>(per_layer_aer.size()); ++l) {
    const double v = per_layer_aer[static_cast<std::size_t>(l)];
    const double b = per_layer_aer[static_cast<std::size_t>(best)];
    if (v < b || (v == b && setting == AlignSetting::DecoderOutput)) best = l;
  }
  return best;
}

// Collapses piece-level pairs to word-level pairs: any piece pair implies the
// word pair. word_of maps each file token index to its word index.
inline AlignSet collapse_to_words(const AlignSet& pairs, const std::vector<int>& tgt_word_of,
                                  const std::vector<int>& src_word_of) {
  AlignSet out;
  for (const auto& [t, j] : pairs) {
    if (t < 0 || static_cast<std::size_t>(t) >= tgt_word_of.size() || j < 0 ||
        static_cast<std::size_t>(j) >= src_word_of.size())
      throw DataError("collapse_to_words: pair out of range");
    out.push_back({tgt_word_of[static_cast<std::size_t>(t)],
                   src_word_of[static_cast<std::size_t>(j)]});
  }
  normalize_align(out);
  return out;
}

enum class ErrorCategory {
  WordToFinalizing = 1,        // functional/content word aligned to a finalizing token
  PrefixOnlyToFinalizing = 2,  // token with no source counterpart, to a finalizing token
  SubwordTailToFinalizing = 3,
  FunctionToNextContent = 4,
  Other = 5,
};

struct ErrorCategoryReport {
  std::array<std::size_t, 5> counts{};  // index = category - 1
  std::size_t total = 0;

  void merge(const ErrorCategoryReport& o) {
    for (std::size_t i = 0; i < 5; ++i) counts[i] += o.counts[i];
    total += o.total;
  }

  std::array<double, 5> fractions() const {
    std::array<double, 5> f{};
    if (total)
      for (std::size_t i = 0; i < 5; ++i)
        f[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    return f;
  }

  nlohmann::json to_json() const {
    const auto f = fractions();
    nlohmann::json cats = nlohmann::json::array();
    static const char* names[5] = {"word-to-finalizing", "prefix-only-to-finalizing",
                                   "subword-tail-to-finalizing", "function-to-next-content",
                                   "other"};
    for (std::size_t i = 0; i < 5; ++i)
      cats.push_back({{"category", i + 1}, {"name", names[i]}, {"count", counts[i]},
                      {"fraction", f[i]}});
    return {{"total_errors", total}, {"categories", cats}};
  }
};

// Buckets every hypothesis pair absent from the possible set. src_tokens spans
// the file tokens plus one trailing sentinel entry; tgt_tokens spans the file
// tokens only. Priority: 3 (subword tail) -> 2 (prefix-only) -> 1 (any other
// word to a finalizing token) -> 4 (function word to the content token right
// after its gold source) -> 5.
inline ErrorCategoryReport categorize_errors(const AlignSet& hyp, const AlignSet& gold_poss,
                                             const std::vector<TokenInfo>& src_tokens,
                                             const std::vector<TokenInfo>& tgt_tokens) {
  AlignSet errs = hyp;
  normalize_align(errs);
  AlignSet poss = gold_poss;
  normalize_align(poss);

  ErrorCategoryReport rep;
  for (const auto& pr : errs) {
    if (std::binary_search(poss.begin(), poss.end(), pr)) continue;
    const auto [t, j] = pr;
    if (t < 0 || static_cast<std::size_t>(t) >= tgt_tokens.size() || j < 0 ||
        static_cast<std::size_t>(j) >= src_tokens.size())
      throw DataError("categorize_errors: pair outside the sentence");
    const TokenInfo& tgt = tgt_tokens[static_cast<std::size_t>(t)];
    const TokenInfo& src = src_tokens[static_cast<std::size_t>(j)];

    ErrorCategory cat = ErrorCategory::Other;
    if (src.is_finalizing && tgt.is_subword_continuation) {
      cat = ErrorCategory::SubwordTailToFinalizing;
    } else if (src.is_finalizing && tgt.prefix_only) {
      cat = ErrorCategory::PrefixOnlyToFinalizing;
    } else if (src.is_finalizing) {
      cat = ErrorCategory::WordToFinalizing;
    } else if (tgt.category == TokenCategory::Function &&
               src.category == TokenCategory::Content) {
      // gold source positions for this target token
      int gold_max = -1;
      for (const auto& [gt, gj] : poss)
        if (gt == t) gold_max = std::max(gold_max, gj);
      if (gold_max >= 0) {
        int next_content = -1;
        for (std::size_t k = static_cast<std::size_t>(gold_max) + 1; k < src_tokens.size(); ++k)
          if (src_tokens[k].category == TokenCategory::Content) {
            next_content = static_cast<int>(k);
            break;
          }
        if (j == next_content) cat = ErrorCategory::FunctionToNextContent;
      }
    }
    ++rep.counts[static_cast<std::size_t>(static_cast<int>(cat)) - 1];
    ++rep.total;
  }
  return rep;
}

}  // namespace attnlens
