#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnlens/checkpoint.hpp"
#include "attnlens/common.hpp"
#include "attnlens/corpus.hpp"
#include "attnlens/forward.hpp"
#include "attnlens/model.hpp"

namespace attnlens {

struct TrainConfig {
  double lr_factor = 1.0;  // scale on the inverse-sqrt warmup schedule
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  int warmup_steps = 400;
  int batch_size = 32;
  int max_epochs = 10;
  double clip_norm = 1.0;
  double dropout = 0.1;
  int dev_size = 500;  // last dev_size sentences; 0 evaluates on the training data
  std::uint64_t seed = 1;

  void validate(std::size_t corpus_size) const {
    if (lr_factor <= 0.0) throw DataError("train config: lr_factor must be positive");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
      throw DataError("train config: betas must lie in (0,1)");
    if (adam_eps <= 0.0) throw DataError("train config: adam_eps must be positive");
    if (warmup_steps < 1) throw DataError("train config: warmup_steps must be positive");
    if (batch_size < 1) throw DataError("train config: batch_size must be positive");
    if (max_epochs < 1) throw DataError("train config: max_epochs must be positive");
    if (clip_norm <= 0.0) throw DataError("train config: clip_norm must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw DataError("train config: dropout must lie in [0,1)");
    if (dev_size < 0) throw DataError("train config: dev_size must be nonnegative");
    if (corpus_size == 0) throw DataError("train: empty corpus");
    if (static_cast<std::size_t>(dev_size) >= corpus_size)
      throw DataError("train config: dev split must be smaller than the corpus");
  }

  nlohmann::json to_json() const {
    return {{"lr_factor", lr_factor}, {"beta1", beta1},         {"beta2", beta2},
            {"adam_eps", adam_eps},   {"warmup_steps", warmup_steps},
            {"batch_size", batch_size}, {"max_epochs", max_epochs},
            {"clip_norm", clip_norm}, {"dropout", dropout},     {"dev_size", dev_size},
            {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr_factor = j.at("lr_factor").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.max_epochs = j.at("max_epochs").get<int>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.dev_size = j.at("dev_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

// Inverse-sqrt schedule with linear warmup; step counts from 1.
inline double noam_lr(double factor, int d_model, long step, int warmup) {
  if (step < 1) throw DataError("noam_lr: step counts from 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return factor * std::pow(static_cast<double>(d_model), -0.5) *
         std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

// Scales g in place so its global L2 norm is at most max_norm; returns the
// pre-clip norm.
inline double clip_gradient(Tensor& g, double max_norm) {
  if (max_norm <= 0.0) throw DataError("clip_gradient: max_norm must be positive");
  double sq = 0.0;
  for (double v : g.data()) sq += v * v;
  const double n = std::sqrt(sq);
  if (n > max_norm) {
    const double s = max_norm / n;
    for (double& v : g.data()) v *= s;
  }
  return n;
}

struct AdamState {
  Tensor m, v;
  long step = 0;

  static AdamState zeros(std::size_t n) {
    AdamState s;
    s.m = Tensor::vec(n);
    s.v = Tensor::vec(n);
    return s;
  }
};

// Canonical Adam with bias correction, in place on a flat parameter vector.
inline void adam_step(Tensor& params, const Tensor& grad, AdamState& st, double lr, double beta1,
                      double beta2, double eps) {
  if (!params.same_shape(grad) || !params.same_shape(st.m) || !params.same_shape(st.v))
    throw ShapeError("adam_step: shape mismatch");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  double* p = params.raw();
  const double* g = grad.raw();
  double* m = st.m.raw();
  double* v = st.v.raw();
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

struct TrainItem {
  const ParallelExample* ex;
  std::uint64_t drop_seed;  // tied to the sentence, not the batch position
};

struct BatchStats {
  double nll = 0.0;        // summed over tokens
  std::size_t tokens = 0;  // predicted positions
  double mean_nll() const { return tokens ? nll / static_cast<double>(tokens) : 0.0; }
};

// Gradient of the per-token mean negative log-likelihood over the batch,
// accumulated into flat_grad (zeroed here) in canonical parameter order.
// Per-sentence passes run on their own tapes; the reduction order is the
// batch order, so results are independent of any internal scheduling.
inline BatchStats batch_gradient(const ModelConfig& cfg, const ModelParams& params,
                                 const std::vector<TrainItem>& batch, double dropout,
                                 Tensor& flat_grad) {
  BatchStats stats;
  for (const TrainItem& it : batch) stats.tokens += it.ex->tgt.size() - 1;
  if (stats.tokens == 0) throw DataError("batch_gradient: empty batch");
  flat_grad.fill(0.0);

  const double seed_val = -1.0 / static_cast<double>(stats.tokens);
  for (const TrainItem& it : batch) {
    std::mt19937_64 rng(it.drop_seed);
    ForwardOptions opt;
    opt.record = false;
    opt.params_require_grad = true;
    opt.dropout = dropout;
    opt.dropout_rng = dropout > 0.0 ? &rng : nullptr;
    ForwardPass fp = forward_teacher_forced(cfg, params, it.ex->src, it.ex->tgt, opt);
    const double lp = fp.tape.value(fp.sum_log_probs)[0];
    stats.nll -= lp;
    fp.tape.backward(fp.sum_log_probs, Tensor::scalar(seed_val));
    std::size_t off = 0;
    fp.bound.for_each([&](const std::string&, Var& v) {
      const Tensor g = fp.tape.grad(v);
      double* dst = flat_grad.raw() + off;
      const double* src = g.raw();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
      off += g.size();
    });
  }
  return stats;
}

struct EvalStats {
  double ce = 0.0;   // per-token cross-entropy
  double acc = 0.0;  // per-token argmax accuracy
  std::size_t tokens = 0;
};

// Dropout-free teacher-forced evaluation.
inline EvalStats evaluate_model(const ModelConfig& cfg, const ModelParams& params,
                                const std::vector<const ParallelExample*>& examples) {
  EvalStats s;
  double nll = 0.0;
  std::size_t hits = 0;
  for (const ParallelExample* ex : examples) {
    ForwardOptions opt;
    opt.record = false;
    ForwardPass fp = forward_teacher_forced(cfg, params, ex->src, ex->tgt, opt);
    nll -= fp.tape.value(fp.sum_log_probs)[0];
    const Tensor& logits = fp.tape.value(fp.logits);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      const double* row = logits.raw() + r * logits.cols();
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j)
        if (row[j] > row[best]) best = j;
      if (static_cast<int>(best) == fp.ref_ids[r]) ++hits;
      ++s.tokens;
    }
  }
  if (s.tokens == 0) throw DataError("evaluate_model: no examples");
  s.ce = nll / static_cast<double>(s.tokens);
  s.acc = static_cast<double>(hits) / static_cast<double>(s.tokens);
  return s;
}

struct EpochMetrics {
  int epoch = 0;
  long steps = 0;  // optimizer steps seen so far
  double train_ce = 0.0;
  double dev_ce = 0.0;
  double dev_acc = 0.0;
  bool dev_on_train = false;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},   {"steps", steps},     {"train_ce", train_ce},
            {"dev_ce", dev_ce}, {"dev_acc", dev_acc}, {"dev_on_train", dev_on_train}};
  }
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  int best_epoch = -1;
  double best_dev_ce = 0.0;
  double best_dev_acc = 0.0;
  std::string best_path;
  std::string last_path;
  std::string metrics_path;
};

namespace detail {

constexpr std::uint64_t kShuffleSalt = 0x5f0e7a11u;
constexpr std::uint64_t kDropoutSalt = 0xd20b0a57u;

inline std::map<std::string, Tensor> optimizer_extras(const ModelParams& params,
                                                      const AdamState& st) {
  std::map<std::string, Tensor> extras;
  std::size_t off = 0;
  params.for_each([&](const std::string& name, const Tensor& x) {
    Tensor m(x.rows(), x.cols());
    Tensor v(x.rows(), x.cols());
    std::copy_n(st.m.raw() + off, x.size(), m.raw());
    std::copy_n(st.v.raw() + off, x.size(), v.raw());
    extras["opt.m." + name] = std::move(m);
    extras["opt.v." + name] = std::move(v);
    off += x.size();
  });
  return extras;
}

}  // namespace detail

// Teacher-forced MLE training with Adam on the inverse-sqrt schedule. Writes
// metrics.jsonl (one object per epoch), best.ckpt (lowest dev cross-entropy)
// and last.ckpt under out_dir. A non-finite batch loss aborts with the last
// good parameters saved to diverged.ckpt.
inline TrainResult train(const ModelConfig& cfg, const TrainConfig& tr, const Corpus& corpus,
                         const std::string& out_dir) {
  cfg.validate();
  tr.validate(corpus.examples.size());
  std::filesystem::create_directories(out_dir);

  const std::size_t n_train = corpus.examples.size() - static_cast<std::size_t>(tr.dev_size);
  std::vector<const ParallelExample*> dev;
  for (std::size_t i = n_train; i < corpus.examples.size(); ++i) dev.push_back(&corpus.examples[i]);
  const bool dev_on_train = dev.empty();
  if (dev_on_train)
    for (std::size_t i = 0; i < n_train; ++i) dev.push_back(&corpus.examples[i]);

  ModelParams params = init_params(cfg, tr.seed);
  Tensor flat = flatten_params(params);
  Tensor last_good = flat;
  Tensor flat_grad = Tensor::vec(flat.size());
  AdamState adam = AdamState::zeros(flat.size());

  TrainResult result;
  result.metrics_path = (std::filesystem::path(out_dir) / "metrics.jsonl").string();
  result.best_path = (std::filesystem::path(out_dir) / "best.ckpt").string();
  result.last_path = (std::filesystem::path(out_dir) / "last.ckpt").string();
  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics) throw DataError("train: cannot write " + result.metrics_path);

  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  auto save = [&](const std::string& path, int epoch, const EvalStats& devstats) {
    nlohmann::json extra = {{"epoch", epoch},
                            {"step", adam.step},
                            {"dev_ce", devstats.ce},
                            {"dev_acc", devstats.acc},
                            {"train_config", tr.to_json()}};
    save_checkpoint(path, cfg, params, detail::optimizer_extras(params, adam), extra);
  };

  double best_ce = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= tr.max_epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed(mix_seed(tr.seed, detail::kShuffleSalt),
                                         static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_nll = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(tr.batch_size)) {
      const std::size_t stop = std::min(n_train, start + static_cast<std::size_t>(tr.batch_size));
      std::vector<TrainItem> batch;
      batch.reserve(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t idx = order[k];
        batch.push_back({&corpus.examples[idx],
                         mix_seed(mix_seed(mix_seed(tr.seed, detail::kDropoutSalt),
                                           static_cast<std::uint64_t>(epoch)),
                                  static_cast<std::uint64_t>(idx))});
      }
      auto rescue = [&]() {
        // Roll back to the parameters that last produced a finite loss.
        const std::string path = (std::filesystem::path(out_dir) / "diverged.ckpt").string();
        const ModelParams good = unflatten_params(cfg, last_good);
        save_checkpoint(path, cfg, good, {},
                        {{"diverged", true}, {"step", adam.step}, {"epoch", epoch}});
        throw NumericError("train: non-finite loss at step " + std::to_string(adam.step + 1) +
                           "; last good parameters in " + path);
      };
      BatchStats stats;
      try {
        stats = batch_gradient(cfg, params, batch, tr.dropout, flat_grad);
      } catch (const NumericError&) {
        rescue();
      }
      const bool grads_ok = std::all_of(flat_grad.data().begin(), flat_grad.data().end(),
                                        [](double v) { return std::isfinite(v); });
      if (!std::isfinite(stats.nll) || !grads_ok) rescue();
      last_good = flat;
      epoch_nll += stats.nll;
      epoch_tokens += stats.tokens;
      clip_gradient(flat_grad, tr.clip_norm);
      const double lr = noam_lr(tr.lr_factor, cfg.d_model, adam.step + 1, tr.warmup_steps);
      adam_step(flat, flat_grad, adam, lr, tr.beta1, tr.beta2, tr.adam_eps);
      params = unflatten_params(cfg, flat);
    }

    const EvalStats devstats = evaluate_model(cfg, params, dev);
    EpochMetrics em;
    em.epoch = epoch;
    em.steps = adam.step;
    em.train_ce = epoch_nll / static_cast<double>(epoch_tokens);
    em.dev_ce = devstats.ce;
    em.dev_acc = devstats.acc;
    em.dev_on_train = dev_on_train;
    metrics << em.to_json().dump() << "\n";
    metrics.flush();
    result.log.push_back(em);

    if (devstats.ce < best_ce) {
      best_ce = devstats.ce;
      result.best_epoch = epoch;
      result.best_dev_ce = devstats.ce;
      result.best_dev_acc = devstats.acc;
      save(result.best_path, epoch, devstats);
    }
    if (epoch == tr.max_epochs) save(result.last_path, epoch, devstats);
  }
  return result;
}

}  // namespace attnlens
