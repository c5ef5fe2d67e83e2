#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnlens/forward.hpp"
#include "attnlens/model.hpp"

namespace attnlens {

// Relative Gaussian noise on token embeddings: per-coordinate sigma is the
// embedding's Euclidean norm times lambda.
struct PerturbationConfig {
  double lambda = 0.01;
  int n_samples = 30;
  std::uint64_t seed = 1;

  // Variance estimation needs real noise and at least two samples.
  void validate_variance() const {
    if (!(lambda > 0.0)) throw DataError("perturbation: lambda must be > 0");
    if (n_samples < 2) throw DataError("perturbation: need at least 2 samples");
  }

  // Saliency additionally admits the plain-gradient mode (N = 1, lambda = 0).
  void validate_saliency() const {
    if (n_samples < 1) throw DataError("perturbation: need at least 1 sample");
    if (lambda < 0.0) throw DataError("perturbation: lambda must be >= 0");
    if (lambda == 0.0 && n_samples != 1)
      throw DataError("perturbation: lambda 0 only makes sense with a single sample");
  }

  bool plain_gradient_mode() const { return n_samples == 1 && lambda == 0.0; }

  nlohmann::json to_json() const {
    return {{"lambda", lambda}, {"n_samples", n_samples}, {"seed", seed}};
  }

  static PerturbationConfig from_json(const nlohmann::json& j) {
    PerturbationConfig c;
    if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
    if (j.contains("n_samples")) c.n_samples = j.at("n_samples").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

// Adds i.i.d. zero-mean Gaussian noise per coordinate, sigma = ||row|| * lambda.
// Zero-norm rows are returned unchanged (and reported) without consuming draws.
inline Tensor perturb_embeddings(const Tensor& emb, double lambda, std::uint64_t seed,
                                 std::vector<int>* zero_norm_rows = nullptr) {
  if (lambda < 0.0) throw DataError("perturb_embeddings: negative lambda");
  Tensor out = emb;
  if (lambda == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t r = 0; r < emb.rows(); ++r) {
    const double* row = emb.raw() + r * emb.cols();
    double sq = 0.0;
    for (std::size_t c = 0; c < emb.cols(); ++c) sq += row[c] * row[c];
    const double sigma = std::sqrt(sq) * lambda;
    if (sigma == 0.0) {
      if (zero_norm_rows) zero_norm_rows->push_back(static_cast<int>(r));
      continue;
    }
    double* o = out.raw() + r * emb.cols();
    for (std::size_t c = 0; c < emb.cols(); ++c) o[c] += sigma * gauss(rng);
  }
  return out;
}

// Streaming per-coordinate mean and population variance (1/N) over vectors.
struct VarianceAccumulator {
  std::vector<double> mean, m2;
  std::size_t n = 0;

  void add(const Tensor& x) {
    if (n == 0) {
      mean.assign(x.size(), 0.0);
      m2.assign(x.size(), 0.0);
    }
    if (x.size() != mean.size()) throw ShapeError("variance accumulator: size changed");
    ++n;
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double delta = x.raw()[i] - mean[i];
      mean[i] += delta / static_cast<double>(n);
      m2[i] += delta * (x.raw()[i] - mean[i]);
    }
  }

  std::vector<double> population_variance() const {
    if (n == 0) throw DataError("variance accumulator: empty");
    std::vector<double> v(m2.size());
    for (std::size_t i = 0; i < m2.size(); ++i) v[i] = m2[i] / static_cast<double>(n);
    return v;
  }
};

namespace detail {

constexpr std::uint64_t kSrcNoiseSalt = 0xa1b25e01;
constexpr std::uint64_t kTgtNoiseSalt = 0xa1b25e02;
constexpr std::uint64_t kPsiNoiseSalt = 0xa1b25e03;
constexpr std::uint64_t kSrcSalNoiseSalt = 0xa1b25e04;

inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  Tensor rows(ids.size(), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const int id = ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows())
      throw DataError("embedding_rows: id outside table");
    std::copy_n(table.raw() + static_cast<std::size_t>(id) * table.cols(), table.cols(),
                rows.raw() + r * rows.cols());
  }
  return rows;
}

inline std::vector<int> decoder_inputs(const std::vector<int>& tgt_ids) {
  if (tgt_ids.size() < 2) throw DataError("attribution: target too short");
  return std::vector<int>(tgt_ids.begin(), tgt_ids.end() - 1);
}

inline nlohmann::json tensor_json(const Tensor& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < t.cols(); ++c) row.push_back(t(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

enum class PerturbSide { Source, TargetPrefix };

// Per-step output-probability variance under N noisy passes of one side's
// embeddings, the other side untouched. One noise draw per sample serves every
// step; the causal mask guarantees step t only feels prefix positions < t.
inline std::vector<double> contribution_variance(const ModelConfig& cfg,
                                                 const ModelParams& params,
                                                 const std::vector<int>& src_ids,
                                                 const std::vector<int>& tgt_ids,
                                                 const PerturbationConfig& pc, PerturbSide side,
                                                 std::vector<int>* zero_norm_rows = nullptr) {
  pc.validate_variance();
  const std::vector<int> dec_in = detail::decoder_inputs(tgt_ids);
  const Tensor base = side == PerturbSide::Source
                          ? detail::embedding_rows(params.src_emb, src_ids)
                          : detail::embedding_rows(params.tgt_emb, dec_in);
  const std::uint64_t salt =
      side == PerturbSide::Source ? detail::kSrcNoiseSalt : detail::kTgtNoiseSalt;

  VarianceAccumulator acc;
  for (int n = 0; n < pc.n_samples; ++n) {
    const Tensor noisy = perturb_embeddings(
        base, pc.lambda, mix_seed(mix_seed(pc.seed, salt), static_cast<std::uint64_t>(n)),
        n == 0 ? zero_norm_rows : nullptr);
    ForwardOptions opt;
    opt.record = false;
    if (side == PerturbSide::Source)
      opt.src_embed_override = &noisy;
    else
      opt.tgt_embed_override = &noisy;
    ForwardPass fp = forward_teacher_forced(cfg, params, src_ids, tgt_ids, opt);
    acc.add(fp.tape.value(fp.probs));
  }
  return acc.population_variance();
}

inline std::vector<double> source_contributions(const ModelConfig& cfg, const ModelParams& params,
                                                const std::vector<int>& src_ids,
                                                const std::vector<int>& tgt_ids,
                                                const PerturbationConfig& pc,
                                                std::vector<int>* zero_norm_rows = nullptr) {
  return contribution_variance(cfg, params, src_ids, tgt_ids, pc, PerturbSide::Source,
                               zero_norm_rows);
}

inline std::vector<double> target_contributions(const ModelConfig& cfg, const ModelParams& params,
                                                const std::vector<int>& src_ids,
                                                const std::vector<int>& tgt_ids,
                                                const PerturbationConfig& pc,
                                                std::vector<int>* zero_norm_rows = nullptr) {
  return contribution_variance(cfg, params, src_ids, tgt_ids, pc, PerturbSide::TargetPrefix,
                               zero_norm_rows);
}

inline double source_contribution_at(const ModelConfig& cfg, const ModelParams& params,
                                     const std::vector<int>& src_ids,
                                     const std::vector<int>& tgt_ids, std::size_t step,
                                     const PerturbationConfig& pc) {
  const auto v = source_contributions(cfg, params, src_ids, tgt_ids, pc);
  if (step >= v.size()) throw DataError("source_contribution: step out of range");
  return v[step];
}

inline double target_contribution_at(const ModelConfig& cfg, const ModelParams& params,
                                     const std::vector<int>& src_ids,
                                     const std::vector<int>& tgt_ids, std::size_t step,
                                     const PerturbationConfig& pc) {
  const auto v = target_contributions(cfg, params, src_ids, tgt_ids, pc);
  if (step >= v.size()) throw DataError("target_contribution: step out of range");
  return v[step];
}

// psi(i, s): mean Euclidean norm of the gradient of P(y_{s+1}) with respect to
// the (noisy) prefix embedding at decoder position i, exactly 0 for i > s.
// Rows index prefix positions (row 0 = begin sentinel), columns index steps.
inline Tensor prefix_saliency(const ModelConfig& cfg, const ModelParams& params,
                              const std::vector<int>& src_ids, const std::vector<int>& tgt_ids,
                              const PerturbationConfig& pc) {
  pc.validate_saliency();
  const std::vector<int> dec_in = detail::decoder_inputs(tgt_ids);
  const std::size_t ny = dec_in.size();
  const Tensor base = detail::embedding_rows(params.tgt_emb, dec_in);

  Tensor psi(ny, ny);
  for (int n = 0; n < pc.n_samples; ++n) {
    const Tensor noisy = perturb_embeddings(
        base, pc.lambda,
        mix_seed(mix_seed(pc.seed, detail::kPsiNoiseSalt), static_cast<std::uint64_t>(n)));
    ForwardOptions opt;
    opt.record = false;
    opt.tgt_embed_override = &noisy;
    ForwardPass fp = forward_teacher_forced(cfg, params, src_ids, tgt_ids, opt);
    for (std::size_t s = 0; s < ny; ++s) {
      Tensor seed = Tensor::vec(ny);
      seed[s] = 1.0;
      fp.tape.backward(fp.probs, seed);
      const Tensor g = fp.tape.grad(fp.tgt_tok);
      for (std::size_t i = 0; i <= s; ++i) {
        double sq = 0.0;
        const double* row = g.raw() + i * g.cols();
        for (std::size_t c = 0; c < g.cols(); ++c) sq += row[c] * row[c];
        psi(i, s) += std::sqrt(sq) / static_cast<double>(pc.n_samples);
      }
    }
  }
  return psi;
}

// Same estimator against (noisy) source embeddings: entry (j, s) is the mean
// gradient norm of P(y_{s+1}) with respect to source position j.
inline Tensor source_saliency(const ModelConfig& cfg, const ModelParams& params,
                              const std::vector<int>& src_ids, const std::vector<int>& tgt_ids,
                              const PerturbationConfig& pc) {
  pc.validate_saliency();
  const std::size_t ny = detail::decoder_inputs(tgt_ids).size();
  const Tensor base = detail::embedding_rows(params.src_emb, src_ids);

  Tensor sal(src_ids.size(), ny);
  for (int n = 0; n < pc.n_samples; ++n) {
    const Tensor noisy = perturb_embeddings(
        base, pc.lambda,
        mix_seed(mix_seed(pc.seed, detail::kSrcSalNoiseSalt), static_cast<std::uint64_t>(n)));
    ForwardOptions opt;
    opt.record = false;
    opt.src_embed_override = &noisy;
    ForwardPass fp = forward_teacher_forced(cfg, params, src_ids, tgt_ids, opt);
    for (std::size_t s = 0; s < ny; ++s) {
      Tensor seed = Tensor::vec(ny);
      seed[s] = 1.0;
      fp.tape.backward(fp.probs, seed);
      const Tensor g = fp.tape.grad(fp.src_tok);
      for (std::size_t j = 0; j < src_ids.size(); ++j) {
        double sq = 0.0;
        const double* row = g.raw() + j * g.cols();
        for (std::size_t c = 0; c < g.cols(); ++c) sq += row[c] * row[c];
        sal(j, s) += std::sqrt(sq) / static_cast<double>(pc.n_samples);
      }
    }
  }
  return sal;
}

// Raw variances are stored; normalized shares are a display concern.
struct AttributionReport {
  PerturbationConfig config;
  std::vector<double> c_s, c_t;  // per step
  Tensor psi;                    // ny x ny
  Tensor src_sal;                // |x| x ny, empty when not requested
  bool sentinel_only_first_step = true;  // step 1's prefix is the begin sentinel
  std::vector<int> zero_norm_src_rows, zero_norm_tgt_rows;

  nlohmann::json to_json() const {
    nlohmann::json j{{"config", config.to_json()},
                     {"source_contribution", c_s},
                     {"target_contribution", c_t},
                     {"prefix_saliency", detail::tensor_json(psi)},
                     {"sentinel_only_first_step", sentinel_only_first_step},
                     {"zero_norm_source_rows", zero_norm_src_rows},
                     {"zero_norm_target_rows", zero_norm_tgt_rows}};
    if (!src_sal.empty()) j["source_saliency"] = detail::tensor_json(src_sal);
    return j;
  }
};

inline AttributionReport attribution_report(const ModelConfig& cfg, const ModelParams& params,
                                            const std::vector<int>& src_ids,
                                            const std::vector<int>& tgt_ids,
                                            const PerturbationConfig& pc,
                                            bool with_source_saliency = true) {
  AttributionReport rep;
  rep.config = pc;
  rep.c_s = source_contributions(cfg, params, src_ids, tgt_ids, pc, &rep.zero_norm_src_rows);
  rep.c_t = target_contributions(cfg, params, src_ids, tgt_ids, pc, &rep.zero_norm_tgt_rows);
  rep.psi = prefix_saliency(cfg, params, src_ids, tgt_ids, pc);
  if (with_source_saliency) rep.src_sal = source_saliency(cfg, params, src_ids, tgt_ids, pc);
  return rep;
}

}  // namespace attnlens
