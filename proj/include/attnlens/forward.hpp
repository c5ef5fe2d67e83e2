#pragma once

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "attnlens/autodiff.hpp"
#include "attnlens/model.hpp"
#include "attnlens/tensor.hpp"

namespace attnlens {

// Single attention head on plain tensors: alpha = softmax(q K^T / sqrt(d_k)),
// z = alpha V. Returns (z, alpha); alpha is kept, not discarded.
inline std::pair<Tensor, Tensor> attention_head(const Tensor& q, const Tensor& K,
                                                const Tensor& V) {
  if (q.size() != K.cols()) throw ShapeError("attention_head: q/K width mismatch");
  if (q.rank() == 2 && q.rows() != 1) throw ShapeError("attention_head: q must be one query");
  if (K.rows() != V.rows()) throw ShapeError("attention_head: K/V length mismatch");
  if (K.rows() == 0) throw ShapeError("attention_head: empty keys");
  Tape t;
  Var qv = t.input(Tensor::from({1, q.size()}, q.data()));
  Var scores = t.scale(t.matmul(qv, t.transpose(t.input(K))),
                       1.0 / std::sqrt(static_cast<double>(K.cols())));
  Var alpha = t.softmax_rows(scores);
  Var z = t.matmul(alpha, t.input(V));
  Tensor alpha_out = Tensor::from({K.rows()}, t.value(alpha).data());
  Tensor z_out = Tensor::from({V.cols()}, t.value(z).data());
  return {z_out, alpha_out};
}

// Everything captured from the encoder-decoder attention modules of one
// teacher-forced pass, copied out of the tape by value.
struct AttentionRecord {
  // [layer][head], each |y| x |x|
  std::vector<std::vector<Tensor>> attn;
  // [layer][head], each length |x|: ||v_j^h||
  std::vector<std::vector<Tensor>> value_norms;
  // [layer][head], each |y| x d_k
  std::vector<std::vector<Tensor>> head_out;
  // [layer], each |y| x d_model: merged attention output (pre-residual)
  std::vector<Tensor> merged;
  // [layer], each length |y|: ||attn_t||
  std::vector<Tensor> merged_norms;
  // |x| x d_model encoder final-layer output
  Tensor encoder_out;
};

struct ForwardOptions {
  bool record = true;
  // Training graph: parameters become requires_grad inputs and embeddings stay
  // connected to the tables. Otherwise parameters are constants and the
  // pre-positional-encoding embeddings become differentiable inputs.
  bool params_require_grad = false;
  double dropout = 0.0;
  std::mt19937_64* dropout_rng = nullptr;
  // Pre-scale, pre-positional-encoding embedding replacements.
  const Tensor* src_embed_override = nullptr;
  const Tensor* tgt_embed_override = nullptr;
  // Skips the encoder stack entirely (valid when only target-side gradients
  // or perturbations are needed).
  const Tensor* encoder_out_override = nullptr;
  // Additive offset on one cross-attention head's projected values (finite-
  // difference probes).
  int v_offset_layer = -1;
  int v_offset_head = -1;
  const Tensor* v_offset = nullptr;
};

struct GraphOutputs {
  // Pre-scale, pre-positional-encoding token embeddings.
  Var src_tok, tgt_tok;
  // [layer][head] cross-attention value matrices V^h (|x| x d_k).
  std::vector<std::vector<Var>> cross_v;
  Var logits;         // |y| x tgt_vocab
  Var log_probs;      // length |y|: log P(y_t | y_<t, x) of the reference token
  Var probs;          // exp(log_probs)
  Var sum_log_probs;  // scalar
  std::vector<int> ref_ids;
  AttentionRecord record;
};

struct ForwardPass : GraphOutputs {
  Tape tape;
  ModelConfig cfg;
  // Parameter tape nodes, grad-readable when params_require_grad was set.
  BoundParams bound;
};

namespace detail {

constexpr int kSentinelId = 0;  // Vocab convention

inline void check_ids(const std::vector<int>& ids, int vocab, int max_len, const char* which) {
  if (ids.empty()) throw DataError(std::string(which) + ": empty sequence");
  if (static_cast<int>(ids.size()) > max_len)
    throw DataError(std::string(which) + ": sequence length " + std::to_string(ids.size()) +
                    " exceeds max " + std::to_string(max_len));
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw DataError(std::string(which) + ": token id " + std::to_string(id) +
                      " outside vocab of " + std::to_string(vocab));
}

struct GraphBuilder {
  Tape& t;
  const ModelConfig& cfg;
  BoundParams& p;
  const ModelParams* values;  // null when params only exist as tape nodes
  const ForwardOptions& opt;

  GraphBuilder(Tape& tape, const ModelConfig& config, BoundParams& bound,
               const ModelParams* param_values, const ForwardOptions& options)
      : t(tape), cfg(config), p(bound), values(param_values), opt(options) {}

  Var maybe_dropout(Var x) {
    if (opt.dropout <= 0.0) return x;
    if (!opt.dropout_rng) throw ShapeError("forward: dropout requires an rng");
    const Tensor& shape = t.value(x);
    Tensor mask = shape.rank() == 1 ? Tensor::vec(shape.cols()) : Tensor(shape.rows(), shape.cols());
    std::bernoulli_distribution keep(1.0 - opt.dropout);
    const double inv = 1.0 / (1.0 - opt.dropout);
    for (double& v : mask.data()) v = keep(*opt.dropout_rng) ? inv : 0.0;
    return t.mul(x, t.constant(mask));
  }

  // Token embedding rows (pre-scale, pre-positional-encoding) as a tape node.
  Var token_embed(Var table, const Tensor* table_t, const std::vector<int>& ids,
                  const Tensor* override_rows) {
    if (override_rows) {
      if (override_rows->rows() != ids.size() ||
          override_rows->cols() != static_cast<std::size_t>(cfg.d_model))
        throw ShapeError("forward: embedding override shape");
      return t.input(*override_rows, true);
    }
    if (opt.params_require_grad || !table_t) return t.gather_rows(table, ids);
    // Analysis mode: the gathered rows become a differentiable input, leaving
    // the table itself constant.
    Tensor rows(ids.size(), static_cast<std::size_t>(cfg.d_model));
    for (std::size_t r = 0; r < ids.size(); ++r)
      std::copy_n(table_t->raw() + static_cast<std::size_t>(ids[r]) * table_t->cols(),
                  table_t->cols(), rows.raw() + r * rows.cols());
    return t.input(std::move(rows), true);
  }

  Var embed_sequence(Var tok, std::size_t n) {
    Var x = t.scale(tok, std::sqrt(static_cast<double>(cfg.d_model)));
    Tensor pe = sinusoidal_pe(n, static_cast<std::size_t>(cfg.d_model));
    x = t.add(x, t.constant(pe));
    return maybe_dropout(x);
  }

  struct HeadSink {
    std::vector<Var>* alphas = nullptr;
    std::vector<Var>* values = nullptr;
    std::vector<Var>* zs = nullptr;
  };

  Var multi_head(const AttnP<Var>& w, Var q_in, Var kv_in, Var mask, HeadSink sink,
                 bool apply_v_offset, int layer) {
    const std::size_t dk = static_cast<std::size_t>(cfg.d_k());
    Var Q = t.matmul(q_in, w.wq);
    Var K = t.matmul(kv_in, w.wk);
    Var V = t.matmul(kv_in, w.wv);
    std::vector<Var> parts;
    parts.reserve(static_cast<std::size_t>(cfg.num_heads));
    for (int h = 0; h < cfg.num_heads; ++h) {
      Var Qh = t.slice_cols(Q, static_cast<std::size_t>(h) * dk, dk);
      Var Kh = t.slice_cols(K, static_cast<std::size_t>(h) * dk, dk);
      Var Vh = t.slice_cols(V, static_cast<std::size_t>(h) * dk, dk);
      if (apply_v_offset && opt.v_offset && opt.v_offset_layer == layer && opt.v_offset_head == h)
        Vh = t.add(Vh, t.constant(*opt.v_offset));
      Var scores = t.scale(t.matmul(Qh, t.transpose(Kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
      Var alpha = mask.valid() ? t.softmax_rows(scores, mask) : t.softmax_rows(scores);
      Var zh = t.matmul(alpha, Vh);
      if (sink.alphas) sink.alphas->push_back(alpha);
      if (sink.values) sink.values->push_back(Vh);
      if (sink.zs) sink.zs->push_back(zh);
      parts.push_back(zh);
    }
    return t.matmul(t.concat_cols(parts), w.wo);
  }

  Var feed_forward(const FfP<Var>& w, Var x) {
    Var h = t.relu(t.add_row(t.matmul(x, w.w1), w.b1));
    return t.add_row(t.matmul(h, w.w2), w.b2);
  }

  Var norm(const LnP<Var>& ln, Var x) { return t.layer_norm_rows(x, ln.g, ln.b); }

  Var encoder(const std::vector<int>& src_ids, Var* src_tok_out) {
    Var tok = token_embed(p.src_emb, values ? &values->src_emb : nullptr, src_ids,
                          opt.src_embed_override);
    if (src_tok_out) *src_tok_out = tok;
    Var x = embed_sequence(tok, src_ids.size());
    for (int l = 0; l < cfg.num_encoder_layers; ++l) {
      const EncLayerP<Var>& e = p.enc[static_cast<std::size_t>(l)];
      Var nx = norm(e.ln1, x);
      Var a = multi_head(e.self, nx, nx, Var{}, {}, false, l);
      x = t.add(x, maybe_dropout(a));
      Var f = feed_forward(e.ff, norm(e.ln2, x));
      x = t.add(x, maybe_dropout(f));
    }
    return norm(p.enc_ln, x);
  }
};

}  // namespace detail

// Builds the teacher-forced graph on an existing tape against pre-bound
// parameters (tape inputs, constants, or slices of a flat vector). src ends
// with the sentinel; tgt is framed by sentinels. Rows of every per-step
// quantity are decoding steps t = 1..|y| (inputs y_0..y_{|y|-1}, predictions
// y_1..y_{|y|}).
inline GraphOutputs build_forward_graph(Tape& t, const ModelConfig& cfg, BoundParams& bound,
                                        const ModelParams* values,
                                        const std::vector<int>& src_ids,
                                        const std::vector<int>& tgt_ids,
                                        const ForwardOptions& opt = {}) {
  detail::check_ids(src_ids, cfg.src_vocab_size, cfg.max_len, "source");
  detail::check_ids(tgt_ids, cfg.tgt_vocab_size, cfg.max_len + 1, "target");
  if (tgt_ids.size() < 2) throw DataError("target: needs at least sentinel + one step");
  if (src_ids.back() != detail::kSentinelId)
    throw DataError("source: must end with the sentinel token");
  if (tgt_ids.front() != detail::kSentinelId || tgt_ids.back() != detail::kSentinelId)
    throw DataError("target: must be framed by sentinel tokens");

  GraphOutputs out;
  detail::GraphBuilder g(t, cfg, bound, values, opt);

  Var enc_out;
  if (opt.encoder_out_override) {
    if (opt.encoder_out_override->rows() != src_ids.size() ||
        opt.encoder_out_override->cols() != static_cast<std::size_t>(cfg.d_model))
      throw ShapeError("forward: encoder override shape");
    enc_out = t.constant(*opt.encoder_out_override);
  } else {
    enc_out = g.encoder(src_ids, &out.src_tok);
  }

  const std::vector<int> dec_in(tgt_ids.begin(), tgt_ids.end() - 1);
  out.ref_ids.assign(tgt_ids.begin() + 1, tgt_ids.end());
  const std::size_t ny = dec_in.size();

  Var tok = g.token_embed(bound.tgt_emb, values ? &values->tgt_emb : nullptr, dec_in,
                          opt.tgt_embed_override);
  out.tgt_tok = tok;
  Var x = g.embed_sequence(tok, ny);

  Tensor causal(ny, ny);
  for (std::size_t i = 0; i < ny; ++i)
    for (std::size_t j = 0; j <= i; ++j) causal(i, j) = 1.0;
  Var causal_mask = t.constant(std::move(causal));

  const std::size_t nl = static_cast<std::size_t>(cfg.num_decoder_layers);
  out.cross_v.resize(nl);
  if (opt.record) {
    out.record.attn.resize(nl);
    out.record.value_norms.resize(nl);
    out.record.head_out.resize(nl);
    out.record.merged.resize(nl);
    out.record.merged_norms.resize(nl);
  }

  for (int l = 0; l < cfg.num_decoder_layers; ++l) {
    const DecLayerP<Var>& d = bound.dec[static_cast<std::size_t>(l)];
    Var nx = g.norm(d.ln1, x);
    Var a = g.multi_head(d.self, nx, nx, causal_mask, {}, false, l);
    x = t.add(x, g.maybe_dropout(a));

    std::vector<Var> alphas, vals, zs;
    detail::GraphBuilder::HeadSink sink{&alphas, &vals, &zs};
    Var c = g.multi_head(d.cross, g.norm(d.ln2, x), enc_out, Var{}, sink, true, l);
    out.cross_v[static_cast<std::size_t>(l)] = vals;
    if (opt.record) {
      auto& rec = out.record;
      for (int h = 0; h < cfg.num_heads; ++h) {
        rec.attn[static_cast<std::size_t>(l)].push_back(
            t.value(alphas[static_cast<std::size_t>(h)]));
        rec.value_norms[static_cast<std::size_t>(l)].push_back(
            row_norms(t.value(vals[static_cast<std::size_t>(h)])));
        rec.head_out[static_cast<std::size_t>(l)].push_back(
            t.value(zs[static_cast<std::size_t>(h)]));
      }
      rec.merged[static_cast<std::size_t>(l)] = t.value(c);
      rec.merged_norms[static_cast<std::size_t>(l)] = row_norms(t.value(c));
    }
    x = t.add(x, g.maybe_dropout(c));

    Var f = g.feed_forward(d.ff, g.norm(d.ln3, x));
    x = t.add(x, g.maybe_dropout(f));
  }
  x = g.norm(bound.dec_ln, x);

  out.logits = t.add_row(t.matmul(x, bound.out_w), bound.out_b);
  out.log_probs = t.log_softmax_pick(out.logits, out.ref_ids);
  out.probs = t.exp(out.log_probs);
  out.sum_log_probs = t.sum(out.log_probs);
  if (opt.record)
    out.record.encoder_out =
        opt.encoder_out_override ? *opt.encoder_out_override : t.value(enc_out);
  return out;
}

// Teacher-forced pass over one sentence pair with self-owned tape.
inline ForwardPass forward_teacher_forced(const ModelConfig& cfg, const ModelParams& params,
                                          const std::vector<int>& src_ids,
                                          const std::vector<int>& tgt_ids,
                                          const ForwardOptions& opt = {}) {
  cfg.validate();
  ForwardPass fp;
  fp.cfg = cfg;
  fp.bound = bind_params(fp.tape, params, opt.params_require_grad);
  static_cast<GraphOutputs&>(fp) =
      build_forward_graph(fp.tape, cfg, fp.bound, &params, src_ids, tgt_ids, opt);
  return fp;
}

// Encoder states for a source sequence (|x| x d_model).
inline Tensor encode(const ModelConfig& cfg, const ModelParams& params,
                     const std::vector<int>& src_ids, const ForwardOptions& opt = {}) {
  cfg.validate();
  detail::check_ids(src_ids, cfg.src_vocab_size, cfg.max_len, "source");
  if (src_ids.back() != detail::kSentinelId)
    throw DataError("source: must end with the sentinel token");
  Tape t;
  BoundParams bound = bind_params(t, params, opt.params_require_grad);
  detail::GraphBuilder g(t, cfg, bound, &params, opt);
  Var out = g.encoder(src_ids, nullptr);
  return t.value(out);
}

// Greedy decoding: starts from the sentinel, stops at the sentinel or max_len
// steps. Returns generated tokens including the terminating sentinel, without
// the leading one.
inline std::vector<int> greedy_decode(const ModelConfig& cfg, const ModelParams& params,
                                      const std::vector<int>& src_ids, int max_len) {
  cfg.validate();
  const int eos = 0;
  const Tensor enc_out = encode(cfg, params, src_ids);
  std::vector<int> dec_in = {eos};
  std::vector<int> out;
  ForwardOptions opt;
  opt.record = false;
  opt.encoder_out_override = &enc_out;
  while (static_cast<int>(out.size()) < max_len) {
    // forward_teacher_forced wants a framed target; append a dummy sentinel
    // whose prediction row is ignored.
    std::vector<int> framed = dec_in;
    framed.push_back(eos);
    ForwardPass fp = forward_teacher_forced(cfg, params, src_ids, framed, opt);
    const Tensor& logits = fp.tape.value(fp.logits);
    const std::size_t last = logits.rows() - 1;
    int best = 0;
    double best_v = logits(last, 0);
    for (std::size_t v = 1; v < logits.cols(); ++v)
      if (logits(last, v) > best_v) {
        best_v = logits(last, v);
        best = static_cast<int>(v);
      }
    out.push_back(best);
    if (best == eos) break;
    dec_in.push_back(best);
  }
  return out;
}

}  // namespace attnlens
