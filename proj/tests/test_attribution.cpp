#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "attnlens/attribution.hpp"
#include "attnlens/forward.hpp"
#include "attnlens/model.hpp"
#include "attnlens/stats.hpp"

using namespace attnlens;

namespace {

ModelConfig tiny_config(int vocab = 12) {
  ModelConfig c;
  c.num_encoder_layers = 1;
  c.num_decoder_layers = 1;
  c.num_heads = 2;
  c.d_model = 8;
  c.d_ff = 12;
  c.src_vocab_size = vocab;
  c.tgt_vocab_size = vocab;
  c.max_len = 16;
  c.dropout = 0.0;
  return c;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) && std::memcmp(a.raw(), b.raw(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("embedding perturbation mechanics", "[attribution]") {
  SECTION("sigma follows the norm-times-lambda rule") {
    // single row of norm 2 -> sigma 0.02 at lambda 1%
    Tensor emb = Tensor::from({1, 4}, {2.0, 0.0, 0.0, 0.0});
    const int draws = 100000;
    double sum = 0.0, sumsq = 0.0;
    for (int n = 0; n < draws; ++n) {
      Tensor noisy = perturb_embeddings(emb, 0.01, static_cast<std::uint64_t>(n) + 1);
      const double eps = noisy(0, 1);  // pure noise coordinate
      sum += eps;
      sumsq += eps * eps;
    }
    const double mean = sum / draws;
    const double std = std::sqrt(sumsq / draws - mean * mean);
    CHECK(std == Catch::Approx(0.02).epsilon(0.02));
    CHECK(std::abs(mean) < 0.001);
  }
  SECTION("lambda zero is the identity") {
    Tensor emb = Tensor::from({2, 2}, {1.0, -2.0, 0.5, 3.0});
    CHECK(bit_equal(perturb_embeddings(emb, 0.0, 7), emb));
  }
  SECTION("zero-norm rows pass through unchanged and are reported") {
    Tensor emb = Tensor::from({2, 2}, {0.0, 0.0, 3.0, 4.0});
    std::vector<int> zero_rows;
    Tensor noisy = perturb_embeddings(emb, 0.1, 5, &zero_rows);
    CHECK(zero_rows == std::vector<int>{0});
    CHECK(noisy(0, 0) == 0.0);
    CHECK(noisy(0, 1) == 0.0);
    CHECK(noisy(1, 0) != 3.0);  // noise with sigma 0.5 virtually never hits 0
  }
  SECTION("deterministic under a seed") {
    Tensor emb = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(bit_equal(perturb_embeddings(emb, 0.05, 42), perturb_embeddings(emb, 0.05, 42)));
    CHECK_FALSE(bit_equal(perturb_embeddings(emb, 0.05, 42), perturb_embeddings(emb, 0.05, 43)));
  }
  SECTION("scaling lambda scales the noise std linearly") {
    Tensor emb = Tensor::from({1, 2}, {3.0, 4.0});  // norm 5
    const int draws = 10000;
    auto empirical_std = [&](double lambda) {
      double sum = 0.0, sumsq = 0.0;
      for (int n = 0; n < draws; ++n) {
        Tensor noisy = perturb_embeddings(emb, lambda, 1000 + static_cast<std::uint64_t>(n));
        const double eps = noisy(0, 0) - 3.0;
        sum += eps;
        sumsq += eps * eps;
      }
      const double mean = sum / draws;
      return std::sqrt(sumsq / draws - mean * mean);
    };
    const double s1 = empirical_std(0.02);
    const double s2 = empirical_std(0.04);
    CHECK(s2 / s1 == Catch::Approx(2.0).epsilon(0.05));
  }
  SECTION("negative lambda rejected") {
    Tensor emb = Tensor::from({1, 1}, {1.0});
    CHECK_THROWS_AS(perturb_embeddings(emb, -0.01, 1), DataError);
  }
}

TEST_CASE("population variance accumulator", "[attribution]") {
  SECTION("hand case") {
    VarianceAccumulator acc;
    acc.add(Tensor::from({1, 1}, {1.0}));
    acc.add(Tensor::from({1, 1}, {2.0}));
    acc.add(Tensor::from({1, 1}, {3.0}));
    CHECK(acc.population_variance()[0] == Catch::Approx(2.0 / 3.0).margin(1e-15));
    CHECK(acc.mean[0] == Catch::Approx(2.0).margin(1e-15));
  }
  SECTION("identical samples give exactly zero") {
    VarianceAccumulator acc;
    for (int i = 0; i < 5; ++i) acc.add(Tensor::from({1, 2}, {0.25, 0.75}));
    CHECK(acc.population_variance()[0] == 0.0);
    CHECK(acc.population_variance()[1] == 0.0);
  }
  SECTION("matches a two-pass oracle to 1e-12") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int n = 1000;
    std::vector<double> xs(n);
    VarianceAccumulator acc;
    for (int i = 0; i < n; ++i) {
      xs[static_cast<std::size_t>(i)] = u(rng);
      acc.add(Tensor::from({1, 1}, {xs[static_cast<std::size_t>(i)]}));
    }
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;  // population form
    CHECK(acc.population_variance()[0] == Catch::Approx(var).margin(1e-12));
  }
  SECTION("sample order barely matters") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> xs(64);
    for (double& x : xs) x = u(rng);
    VarianceAccumulator fwd, shuf;
    for (double x : xs) fwd.add(Tensor::from({1, 1}, {x}));
    std::shuffle(xs.begin(), xs.end(), rng);
    for (double x : xs) shuf.add(Tensor::from({1, 1}, {x}));
    CHECK(fwd.population_variance()[0] ==
          Catch::Approx(shuf.population_variance()[0]).margin(1e-12));
  }
  SECTION("empty accumulator rejected") {
    CHECK_THROWS_AS(VarianceAccumulator{}.population_variance(), DataError);
  }
}

TEST_CASE("linear surrogate variance matches the analytic value", "[attribution]") {
  // f(x) = w . x with noise sigma = ||x|| * lambda per coordinate:
  // Var f = sigma^2 ||w||^2.
  const Tensor x = Tensor::from({1, 3}, {3.0, 0.0, 4.0});  // norm 5
  const std::vector<double> w{0.5, -1.0, 2.0};
  const double lambda = 0.1;
  const double sigma = 5.0 * lambda;
  const double analytic = sigma * sigma * (0.25 + 1.0 + 4.0);

  VarianceAccumulator acc;
  for (int n = 0; n < 10000; ++n) {
    Tensor noisy = perturb_embeddings(x, lambda, 777 + static_cast<std::uint64_t>(n));
    double f = 0.0;
    for (std::size_t c = 0; c < 3; ++c) f += w[c] * noisy(0, c);
    acc.add(Tensor::from({1, 1}, {f}));
  }
  CHECK(acc.population_variance()[0] == Catch::Approx(analytic).epsilon(0.05));
}

TEST_CASE("source contribution is zero when the decoder ignores the encoder", "[attribution]") {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_params(cfg, 17);
  // zero the cross-attention value projections: z = sum alpha * 0 exactly
  for (auto& d : params.dec) d.cross.wv = Tensor(d.cross.wv.rows(), d.cross.wv.cols());

  PerturbationConfig pc;
  pc.n_samples = 8;
  const std::vector<int> src{3, 4, 0};
  const std::vector<int> tgt{0, 5, 6, 0};
  const auto c_s = source_contributions(cfg, params, src, tgt, pc);
  REQUIRE(c_s.size() == tgt.size() - 1);
  for (double v : c_s) CHECK(v == 0.0);

  // the same model still responds to prefix noise
  const auto c_t = target_contributions(cfg, params, src, tgt, pc);
  double total = 0.0;
  for (double v : c_t) {
    CHECK(v >= 0.0);
    total += v;
  }
  CHECK(total > 0.0);
}

TEST_CASE("contribution estimates behave per contract", "[attribution]") {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_params(cfg, 29);
  const std::vector<int> src{3, 4, 7, 0};
  const std::vector<int> tgt{0, 5, 6, 8, 0};
  PerturbationConfig pc;
  pc.n_samples = 6;

  SECTION("nonnegative, finite, reproducible") {
    const auto a = source_contributions(cfg, params, src, tgt, pc);
    const auto b = source_contributions(cfg, params, src, tgt, pc);
    REQUIRE(a.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] >= 0.0);
      CHECK(std::isfinite(a[i]));
      CHECK(a[i] == b[i]);  // same seeds, same samples, bitwise
    }
    const auto t1 = target_contributions(cfg, params, src, tgt, pc);
    const auto t2 = target_contributions(cfg, params, src, tgt, pc);
    for (std::size_t i = 0; i < t1.size(); ++i) CHECK(t1[i] == t2[i]);
  }
  SECTION("per-step wrappers index the same vector") {
    const auto a = source_contributions(cfg, params, src, tgt, pc);
    CHECK(source_contribution_at(cfg, params, src, tgt, 2, pc) == a[2]);
    const auto t = target_contributions(cfg, params, src, tgt, pc);
    CHECK(target_contribution_at(cfg, params, src, tgt, 0, pc) == t[0]);
    CHECK_THROWS_AS(source_contribution_at(cfg, params, src, tgt, 9, pc), DataError);
  }
  SECTION("sample count below two rejected") {
    PerturbationConfig bad;
    bad.n_samples = 1;
    CHECK_THROWS_AS(source_contributions(cfg, params, src, tgt, bad), DataError);
    bad.n_samples = 30;
    bad.lambda = 0.0;
    CHECK_THROWS_AS(target_contributions(cfg, params, src, tgt, bad), DataError);
  }
  SECTION("causality: noise restricted to positions >= t leaves step t untouched") {
    const std::vector<int> dec_in(tgt.begin(), tgt.end() - 1);
    const std::size_t step = 1;
    Tensor base(dec_in.size(), static_cast<std::size_t>(cfg.d_model));
    for (std::size_t r = 0; r < dec_in.size(); ++r)
      std::copy_n(params.tgt_emb.raw() +
                      static_cast<std::size_t>(dec_in[r]) * params.tgt_emb.cols(),
                  params.tgt_emb.cols(), base.raw() + r * base.cols());

    VarianceAccumulator acc;
    std::mt19937_64 rng(55);
    std::normal_distribution<double> gauss(0.0, 0.5);
    for (int n = 0; n < 5; ++n) {
      Tensor noisy = base;
      for (std::size_t r = step + 1; r < dec_in.size(); ++r)  // only positions after the prefix
        for (std::size_t c = 0; c < noisy.cols(); ++c) noisy(r, c) += gauss(rng);
      ForwardOptions opt;
      opt.record = false;
      opt.tgt_embed_override = &noisy;
      ForwardPass fp = forward_teacher_forced(cfg, params, src, tgt, opt);
      acc.add(fp.tape.value(fp.probs));
    }
    CHECK(acc.population_variance()[step] == 0.0);
    CHECK(acc.population_variance()[step + 1] > 0.0);
  }
}

TEST_CASE("prefix saliency", "[attribution]") {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_params(cfg, 31);
  const std::vector<int> src{3, 4, 7, 0};
  const std::vector<int> tgt{0, 5, 6, 8, 0};
  const std::size_t ny = tgt.size() - 1;

  SECTION("plain-gradient mode equals direct gradients") {
    PerturbationConfig pc;
    pc.n_samples = 1;
    pc.lambda = 0.0;
    REQUIRE(pc.plain_gradient_mode());
    const Tensor psi = prefix_saliency(cfg, params, src, tgt, pc);
    REQUIRE(psi.rows() == ny);
    REQUIRE(psi.cols() == ny);

    ForwardPass fp = forward_teacher_forced(cfg, params, src, tgt);
    for (std::size_t s = 0; s < ny; ++s) {
      Tensor seed = Tensor::vec(ny);
      seed[s] = 1.0;
      fp.tape.backward(fp.probs, seed);
      const Tensor g = fp.tape.grad(fp.tgt_tok);
      for (std::size_t i = 0; i < ny; ++i) {
        double sq = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) sq += g(i, c) * g(i, c);
        const double norm = std::sqrt(sq);
        if (i <= s) {
          CHECK(std::abs(psi(i, s) - norm) < 1e-12);
        } else {
          CHECK(norm == 0.0);  // causality in the graph itself
          CHECK(psi(i, s) == 0.0);
        }
      }
    }
  }
  SECTION("strictly causal and deterministic in plain mode") {
    PerturbationConfig pc;
    pc.n_samples = 1;
    pc.lambda = 0.0;
    const Tensor a = prefix_saliency(cfg, params, src, tgt, pc);
    const Tensor b = prefix_saliency(cfg, params, src, tgt, pc);
    CHECK(bit_equal(a, b));
    for (std::size_t i = 0; i < ny; ++i)
      for (std::size_t s = 0; s < ny; ++s)
        if (i > s) CHECK(a(i, s) == 0.0);
  }
  SECTION("smoothed mode is reproducible and nonnegative") {
    PerturbationConfig pc;
    pc.n_samples = 4;
    const Tensor a = prefix_saliency(cfg, params, src, tgt, pc);
    const Tensor b = prefix_saliency(cfg, params, src, tgt, pc);
    CHECK(bit_equal(a, b));
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.raw()[i] >= 0.0);
      CHECK(std::isfinite(a.raw()[i]));
    }
  }
  SECTION("bad sampling configs rejected") {
    PerturbationConfig pc;
    pc.n_samples = 0;
    CHECK_THROWS_AS(prefix_saliency(cfg, params, src, tgt, pc), DataError);
    pc.n_samples = 3;
    pc.lambda = 0.0;  // zero noise only in single-sample mode
    CHECK_THROWS_AS(prefix_saliency(cfg, params, src, tgt, pc), DataError);
  }
}

TEST_CASE("source saliency", "[attribution]") {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_params(cfg, 37);
  const std::vector<int> src{3, 4, 7, 0};
  const std::vector<int> tgt{0, 5, 6, 0};

  PerturbationConfig pc;
  pc.n_samples = 1;
  pc.lambda = 0.0;
  const Tensor a = source_saliency(cfg, params, src, tgt, pc);
  REQUIRE(a.rows() == src.size());
  REQUIRE(a.cols() == tgt.size() - 1);
  CHECK(bit_equal(a, source_saliency(cfg, params, src, tgt, pc)));
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.raw()[i] >= 0.0);
    total += a.raw()[i];
  }
  CHECK(total > 0.0);  // the decoder does read the encoder here
}

TEST_CASE("attribution report assembles every estimator", "[attribution]") {
  ModelConfig cfg = tiny_config();
  ModelParams params = init_params(cfg, 41);
  const std::vector<int> src{3, 4, 0};
  const std::vector<int> tgt{0, 5, 6, 0};
  PerturbationConfig pc;
  pc.n_samples = 3;

  const AttributionReport rep = attribution_report(cfg, params, src, tgt, pc);
  const std::size_t ny = tgt.size() - 1;
  CHECK(rep.c_s.size() == ny);
  CHECK(rep.c_t.size() == ny);
  CHECK(rep.psi.rows() == ny);
  CHECK(rep.src_sal.rows() == src.size());
  CHECK(rep.sentinel_only_first_step);

  const auto j = rep.to_json();
  CHECK(j.contains("source_contribution"));
  CHECK(j.contains("target_contribution"));
  CHECK(j.contains("prefix_saliency"));
  CHECK(j.contains("source_saliency"));
  CHECK(j["config"]["n_samples"] == 3);
  const PerturbationConfig back = PerturbationConfig::from_json(j["config"]);
  CHECK(back.lambda == pc.lambda);
  CHECK(back.n_samples == pc.n_samples);
  CHECK(back.seed == pc.seed);

  const AttributionReport no_sal = attribution_report(cfg, params, src, tgt, pc, false);
  CHECK(no_sal.src_sal.empty());
  CHECK_FALSE(no_sal.to_json().contains("source_saliency"));
}

TEST_CASE("spearman rank correlation", "[attribution]") {
  SECTION("perfect monotone is one") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == Catch::Approx(1.0).margin(1e-12));
    CHECK(spearman({1, 2, 3, 4}, {1, 4, 9, 16}) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("reversed is minus one") {
    CHECK(spearman({1, 2, 3}, {5, 4, 3}) == Catch::Approx(-1.0).margin(1e-12));
  }
  SECTION("hand-computed mixed case") {
    // ranks of y: 3 1 2 5 4 -> d = (-2, 1, 1, -1, 1), sum d^2 = 8
    // rho = 1 - 6*8 / (5 * 24) = 0.6
    CHECK(spearman({1, 2, 3, 4, 5}, {3, 1, 2, 5, 4}) == Catch::Approx(0.6).margin(1e-12));
  }
  SECTION("ties share average ranks") {
    CHECK(spearman({1, 2, 2, 4}, {10, 20, 20, 40}) == Catch::Approx(1.0).margin(1e-12));
    const auto r = average_ranks({5.0, 1.0, 5.0});
    CHECK(r == std::vector<double>{2.5, 1.0, 2.5});
  }
  SECTION("degenerate inputs rejected") {
    CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), DataError);
    CHECK_THROWS_AS(spearman({1}, {1}), DataError);
    CHECK_THROWS_AS(spearman({1, 1, 1}, {1, 2, 3}), NumericError);
  }
}
