#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnlens/autodiff.hpp"
#include "attnlens/common.hpp"
#include "attnlens/tensor.hpp"

namespace attnlens {

struct ModelConfig {
  int num_encoder_layers = 2;
  int num_decoder_layers = 2;
  int num_heads = 4;
  int d_model = 64;
  int d_ff = 128;
  int src_vocab_size = 0;
  int tgt_vocab_size = 0;
  int max_len = 64;
  double dropout = 0.1;  // training only

  int d_k() const { return d_model / num_heads; }

  void validate() const {
    if (num_encoder_layers < 1 || num_decoder_layers < 1 || num_heads < 1 || d_model < 1 ||
        d_ff < 1 || src_vocab_size < 1 || tgt_vocab_size < 1 || max_len < 1)
      throw DataError("model config: all dims must be >= 1");
    if (d_model % num_heads != 0)
      throw DataError("model config: d_model must be divisible by num_heads");
    if (dropout < 0.0 || dropout >= 1.0) throw DataError("model config: dropout not in [0,1)");
  }

  nlohmann::json to_json() const {
    return {{"num_encoder_layers", num_encoder_layers},
            {"num_decoder_layers", num_decoder_layers},
            {"num_heads", num_heads},
            {"d_model", d_model},
            {"d_ff", d_ff},
            {"src_vocab_size", src_vocab_size},
            {"tgt_vocab_size", tgt_vocab_size},
            {"max_len", max_len},
            {"dropout", dropout}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_encoder_layers = j.at("num_encoder_layers").get<int>();
    c.num_decoder_layers = j.at("num_decoder_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.src_vocab_size = j.at("src_vocab_size").get<int>();
    c.tgt_vocab_size = j.at("tgt_vocab_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Parameter tree, generic over the leaf type so the same fixed-order visitor
// serves Tensor storage (ModelParams) and tape-bound Vars (BoundParams).
template <typename T>
// Projections are bias-free: a key bias shifts every score of a query equally,
// so softmax ignores it and its gradient is identically zero.
struct AttnP {
  T wq, wk, wv, wo;
};

template <typename T>
struct LnP {
  T g, b;
};

template <typename T>
struct FfP {
  T w1, b1, w2, b2;
};

template <typename T>
struct EncLayerP {
  AttnP<T> self;
  LnP<T> ln1, ln2;
  FfP<T> ff;
};

template <typename T>
struct DecLayerP {
  AttnP<T> self, cross;
  LnP<T> ln1, ln2, ln3;
  FfP<T> ff;
};

template <typename T>
struct ParamsT {
  T src_emb, tgt_emb;
  std::vector<EncLayerP<T>> enc;
  std::vector<DecLayerP<T>> dec;
  LnP<T> enc_ln, dec_ln;  // final norms closing the pre-norm stacks
  T out_w, out_b;

  // Visits every leaf in a fixed, documented order; name is the canonical
  // checkpoint key.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& s, F& f) {
    f("src_emb", s.src_emb);
    f("tgt_emb", s.tgt_emb);
    for (std::size_t l = 0; l < s.enc.size(); ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      auto& e = s.enc[l];
      visit_attn(p + "self.", e.self, f);
      visit_ln(p + "ln1.", e.ln1, f);
      visit_ln(p + "ln2.", e.ln2, f);
      visit_ff(p + "ff.", e.ff, f);
    }
    for (std::size_t l = 0; l < s.dec.size(); ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      auto& d = s.dec[l];
      visit_attn(p + "self.", d.self, f);
      visit_attn(p + "cross.", d.cross, f);
      visit_ln(p + "ln1.", d.ln1, f);
      visit_ln(p + "ln2.", d.ln2, f);
      visit_ln(p + "ln3.", d.ln3, f);
      visit_ff(p + "ff.", d.ff, f);
    }
    visit_ln("enc_ln.", s.enc_ln, f);
    visit_ln("dec_ln.", s.dec_ln, f);
    f("out_w", s.out_w);
    f("out_b", s.out_b);
  }
  template <typename A, typename F>
  static void visit_attn(const std::string& p, A& a, F& f) {
    f(p + "wq", a.wq);
    f(p + "wk", a.wk);
    f(p + "wv", a.wv);
    f(p + "wo", a.wo);
  }
  template <typename L, typename F>
  static void visit_ln(const std::string& p, L& ln, F& f) {
    f(p + "g", ln.g);
    f(p + "b", ln.b);
  }
  template <typename Ff, typename F>
  static void visit_ff(const std::string& p, Ff& ff, F& f) {
    f(p + "w1", ff.w1);
    f(p + "b1", ff.b1);
    f(p + "w2", ff.w2);
    f(p + "b2", ff.b2);
  }
};

using ModelParams = ParamsT<Tensor>;
using BoundParams = ParamsT<Var>;

// Zero-valued parameter tree with the shapes implied by the config.
inline ModelParams shaped_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t ff = static_cast<std::size_t>(cfg.d_ff);
  ModelParams p;
  p.src_emb = Tensor(static_cast<std::size_t>(cfg.src_vocab_size), d);
  p.tgt_emb = Tensor(static_cast<std::size_t>(cfg.tgt_vocab_size), d);
  auto attn = [&]() {
    AttnP<Tensor> a;
    a.wq = Tensor(d, d);
    a.wk = Tensor(d, d);
    a.wv = Tensor(d, d);
    a.wo = Tensor(d, d);
    return a;
  };
  auto ln = [&]() {
    LnP<Tensor> l;
    l.g = Tensor(1, d);
    l.b = Tensor(1, d);
    return l;
  };
  auto ffp = [&]() {
    FfP<Tensor> f;
    f.w1 = Tensor(d, ff);
    f.b1 = Tensor(1, ff);
    f.w2 = Tensor(ff, d);
    f.b2 = Tensor(1, d);
    return f;
  };
  for (int l = 0; l < cfg.num_encoder_layers; ++l) p.enc.push_back({attn(), ln(), ln(), ffp()});
  for (int l = 0; l < cfg.num_decoder_layers; ++l)
    p.dec.push_back({attn(), attn(), ln(), ln(), ln(), ffp()});
  p.enc_ln = ln();
  p.dec_ln = ln();
  p.out_w = Tensor(d, static_cast<std::size_t>(cfg.tgt_vocab_size));
  p.out_b = Tensor(1, static_cast<std::size_t>(cfg.tgt_vocab_size));
  return p;
}

// Embeddings ~ N(0, 1/sqrt(d_model)); weight matrices Xavier; norms identity.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = shaped_params(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  p.for_each([&](const std::string& name, Tensor& t) {
    const bool is_norm_gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    const bool is_norm_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    const bool is_bias = t.rows() == 1 && !is_norm_gain && !is_norm_bias;
    if (is_norm_gain) {
      t.fill(1.0);
    } else if (is_norm_bias || is_bias) {
      t.fill(0.0);
    } else if (name == "src_emb" || name == "tgt_emb") {
      const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
      for (double& v : t.data()) v = normal(rng) * std;
    } else {
      const double std = std::sqrt(2.0 / static_cast<double>(t.rows() + t.cols()));
      for (double& v : t.data()) v = normal(rng) * std;
    }
  });
  return p;
}

inline void check_params(const ModelConfig& cfg, const ModelParams& params) {
  const ModelParams ref = shaped_params(cfg);
  std::vector<std::pair<std::string, const Tensor*>> got, want;
  params.for_each([&](const std::string& n, const Tensor& t) { got.emplace_back(n, &t); });
  ref.for_each([&](const std::string& n, const Tensor& t) { want.emplace_back(n, &t); });
  if (got.size() != want.size()) throw DataError("model params: wrong tensor count");
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (got[i].first != want[i].first)
      throw DataError("model params: unexpected tensor " + got[i].first);
    if (!got[i].second->same_shape(*want[i].second))
      throw DataError("model params: " + got[i].first + " has shape " +
                      got[i].second->shape_str() + ", want " + want[i].second->shape_str());
    if (!got[i].second->finite())
      throw NumericError("model params: non-finite values in " + got[i].first);
  }
}

inline std::size_t param_count(const ModelParams& p) {
  std::size_t n = 0;
  p.for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

inline Tensor flatten_params(const ModelParams& p) {
  Tensor flat = Tensor::vec(param_count(p));
  std::size_t off = 0;
  p.for_each([&](const std::string&, const Tensor& t) {
    std::copy_n(t.raw(), t.size(), flat.raw() + off);
    off += t.size();
  });
  return flat;
}

inline ModelParams unflatten_params(const ModelConfig& cfg, const Tensor& flat) {
  ModelParams p = shaped_params(cfg);
  std::size_t off = 0;
  p.for_each([&](const std::string&, Tensor& t) {
    if (off + t.size() > flat.size()) throw ShapeError("unflatten: flat vector too short");
    std::copy_n(flat.raw() + off, t.size(), t.raw());
    off += t.size();
  });
  if (off != flat.size()) throw ShapeError("unflatten: flat vector too long");
  return p;
}

// --- tape bindings -------------------------------------------------------------

inline BoundParams bind_params(Tape& t, const ModelParams& p, bool requires_grad) {
  BoundParams b;
  b.enc.resize(p.enc.size());
  b.dec.resize(p.dec.size());
  std::vector<const Tensor*> src;
  p.for_each([&](const std::string&, const Tensor& x) { src.push_back(&x); });
  std::size_t i = 0;
  b.for_each([&](const std::string&, Var& v) {
    v = requires_grad ? t.input(*src[i], true) : t.constant(*src[i]);
    ++i;
  });
  return b;
}

// Rebuilds the parameter tree from one flat vector on the tape, so a gradient
// check can differentiate through every parameter at once.
inline BoundParams bind_params_from_flat(Tape& t, const ModelConfig& cfg, Var flat) {
  const ModelParams shapes = shaped_params(cfg);
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  shapes.for_each([&](const std::string&, const Tensor& x) { dims.emplace_back(x.rows(), x.cols()); });
  BoundParams b;
  b.enc.resize(shapes.enc.size());
  b.dec.resize(shapes.dec.size());
  std::size_t i = 0, off = 0;
  b.for_each([&](const std::string&, Var& v) {
    const auto [r, c] = dims[i];
    Var piece = t.slice_cols(flat, off, r * c);
    v = t.reshape(piece, {r, c});
    off += r * c;
    ++i;
  });
  return b;
}

// Fixed sinusoidal positional encodings, rows 0..n-1.
inline Tensor sinusoidal_pe(std::size_t n, std::size_t d) {
  Tensor pe(n, d);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double rate = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(d));
      pe(pos, i) = std::sin(static_cast<double>(pos) * rate);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(static_cast<double>(pos) * rate);
    }
  }
  return pe;
}

}  // namespace attnlens
