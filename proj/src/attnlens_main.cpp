// attnlens: corpus generation, training, and attention-analysis runs.
//
// Every subcommand resolves an output directory (--out, falling back to
// $ATTNLENS_OUT_ROOT/<subcommand>), takes an exclusive lock on it, writes the
// fully resolved run configuration, and only then computes. Reruns with the
// same inputs are bit-identical, SVGs included.
//
// Exit codes: 0 ok, 2 usage, 3 data, 4 numerical.

#include <CLI11.hpp>

#include <attnlens/alignment.hpp>
#include <attnlens/attribution.hpp>
#include <attnlens/checkpoint.hpp>
#include <attnlens/corpus.hpp>
#include <attnlens/probes.hpp>
#include <attnlens/svg.hpp>
#include <attnlens/trainer.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace attnlens {
namespace {

using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exclusive marker on the output directory; concurrent runs into the same
// directory fail fast instead of interleaving files.
class LockFile {
 public:
  explicit LockFile(const std::string& dir) : path_(dir + "/.lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw DataError("output directory is locked: " + dir + " (remove .lock if stale)");
  }
  ~LockFile() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

std::string resolve_out(const std::string& flag, const std::string& sub) {
  if (!flag.empty()) return flag;
  const char* root = std::getenv("ATTNLENS_OUT_ROOT");
  if (root && *root) return std::string(root) + "/" + sub;
  throw UsageError("--out is required (or set ATTNLENS_OUT_ROOT)");
}

void write_run_config(const std::string& out, const std::string& sub, const json& params) {
  json j{{"subcommand", sub}, {"tool", kToolVersion}, {"params", params}};
  write_text_file(out + "/run_config.json", j.dump(2) + "\n");
}

// [begin, end) over the corpus after --skip/--limit. Empty selections are a
// data error so a bad window fails loudly.
std::pair<std::size_t, std::size_t> slice_range(std::size_t n, int skip, int limit) {
  if (skip < 0 || limit < 0) throw DataError("sentence selection: skip/limit must be nonnegative");
  const std::size_t begin = std::min<std::size_t>(static_cast<std::size_t>(skip), n);
  const std::size_t end =
      limit == 0 ? n : std::min(n, begin + static_cast<std::size_t>(limit));
  if (begin >= end) throw DataError("sentence selection: no sentences in range");
  return {begin, end};
}

std::vector<std::string> texts_of(const Vocab& v, const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(v.text(id));
  return out;
}

std::vector<int> finalizing_columns(const Vocab& v, const std::vector<int>& src) {
  std::vector<int> cols;
  for (std::size_t j = 0; j < src.size(); ++j)
    if (v.is_finalizing(src[j])) cols.push_back(static_cast<int>(j));
  return cols;
}

AlignSetting parse_setting(const std::string& s) {
  return s == "input" ? AlignSetting::DecoderInput : AlignSetting::DecoderOutput;
}

// ---------------------------------------------------------------- gen-corpus

struct GenCorpusArgs {
  std::string spec_path;
  std::string out;
};

json cmd_gen_corpus(const GenCorpusArgs& a) {
  const CorpusSpec spec = CorpusSpec::from_json(json::parse(read_text_file(a.spec_path)));
  spec.validate();

  const std::string out = resolve_out(a.out, "gen-corpus");
  std::filesystem::create_directories(out);
  LockFile lock(out);
  write_run_config(out, "gen-corpus", {{"spec", spec.to_json()}, {"spec_path", a.spec_path}});

  const Corpus corpus = generate_corpus(spec);
  save_corpus(corpus, out);

  json summary{{"sentences", corpus.examples.size()},
               {"vocab", corpus.vocab.size()},
               {"out", out}};
  write_text_file(out + "/summary.json", summary.dump(2) + "\n");
  return summary;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string corpus;
  std::string out;
  int enc_layers = 2, dec_layers = 2, heads = 4, d_model = 64, d_ff = 128;
  int max_len = 0;  // 0: longest sequence in the corpus
  TrainConfig tr;
};

json cmd_train(const TrainArgs& a) {
  const Corpus corpus = load_corpus(a.corpus);

  ModelConfig cfg;
  cfg.num_encoder_layers = a.enc_layers;
  cfg.num_decoder_layers = a.dec_layers;
  cfg.num_heads = a.heads;
  cfg.d_model = a.d_model;
  cfg.d_ff = a.d_ff;
  cfg.src_vocab_size = static_cast<int>(corpus.vocab.size());
  cfg.tgt_vocab_size = static_cast<int>(corpus.vocab.size());
  cfg.dropout = a.tr.dropout;
  if (a.max_len > 0) {
    cfg.max_len = a.max_len;
  } else {
    std::size_t longest = 1;
    for (const ParallelExample& ex : corpus.examples)
      longest = std::max({longest, ex.src.size(), ex.tgt.size()});
    cfg.max_len = static_cast<int>(longest);
  }
  cfg.validate();
  a.tr.validate(corpus.examples.size());

  const std::string out = resolve_out(a.out, "train");
  std::filesystem::create_directories(out);
  LockFile lock(out);
  write_run_config(out, "train",
                   {{"corpus", a.corpus}, {"model", cfg.to_json()}, {"train", a.tr.to_json()}});

  const TrainResult res = train(cfg, a.tr, corpus, out);

  json summary{{"best_epoch", res.best_epoch},     {"best_dev_ce", res.best_dev_ce},
               {"best_dev_acc", res.best_dev_acc}, {"best_path", res.best_path},
               {"last_path", res.last_path},       {"metrics_path", res.metrics_path},
               {"epochs", res.log.size()}};
  write_text_file(out + "/train_result.json", summary.dump(2) + "\n");
  return summary;
}

// --------------------------------------------------------------------- align

struct AlignArgs {
  std::string model;
  std::string corpus;
  std::string out;
  int layer = -1;  // -1: pick by AER
  std::string mode = "avg";
  bool mask = false;
  std::string setting = "output";
  int limit = 0, skip = 0;
};

json cmd_align(const AlignArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.model);
  const int n_layers = ckpt.config.num_decoder_layers;
  if (a.layer != -1 && (a.layer < 0 || a.layer >= n_layers))
    throw DataError("align: --layer out of range for this model");

  const Corpus corpus = load_corpus(a.corpus);
  const auto [begin, end] = slice_range(corpus.examples.size(), a.skip, a.limit);
  const AlignSetting setting = parse_setting(a.setting);
  const bool head_importance = a.mode == "head-importance";

  const std::string out = resolve_out(a.out, "align");
  std::filesystem::create_directories(out);
  LockFile lock(out);
  write_run_config(out, "align",
                   {{"model", a.model},
                    {"corpus", a.corpus},
                    {"layer", a.layer},
                    {"auto_layer", a.layer == -1},
                    {"mode", a.mode},
                    {"mask", a.mask},
                    {"setting", a.setting},
                    {"limit", a.limit},
                    {"skip", a.skip},
                    {"pharaoh_base", 0}});

  std::vector<int> layers;
  if (a.layer == -1)
    for (int l = 0; l < n_layers; ++l) layers.push_back(l);
  else
    layers.push_back(a.layer);

  const std::size_t nl = layers.size();
  std::vector<AERAccumulator> acc(nl);
  std::vector<HeadWeightAccumulator> head_w(nl);
  std::vector<std::size_t> degenerate(nl, 0);
  std::vector<std::vector<AlignSet>> pairs_by_layer(nl);
  const std::vector<double> uniform(static_cast<std::size_t>(ckpt.config.num_heads),
                                    1.0 / ckpt.config.num_heads);

  // Fixed-order sentence loop: accumulators see sentences in corpus order, so
  // pooled counts and the hypothesis file are reproducible byte for byte.
  for (std::size_t i = begin; i < end; ++i) {
    const ParallelExample& ex = corpus.examples[i];
    ForwardPass fp = forward_teacher_forced(ckpt.config, ckpt.params, ex.src, ex.tgt);
    const std::vector<int> fin_cols =
        a.mask ? finalizing_columns(corpus.vocab, ex.src) : std::vector<int>{};

    for (std::size_t li = 0; li < nl; ++li) {
      SoftAlignment soft =
          head_importance ? hi_soft_alignment(fp, layers[li], setting)
                          : soft_alignment(fp.record, layers[li], uniform, setting);
      if (head_importance) {
        head_w[li].add({soft.prov.head_weights, soft.prov.degenerate_heads});
        if (soft.prov.degenerate_heads) ++degenerate[li];
      }
      if (a.mask) soft = mask_finalizing(soft, fin_cols);
      const AlignSet pairs = alignment_file_pairs(hard_alignment(soft));
      acc[li].add(pairs, ex.sure, ex.poss);
      pairs_by_layer[li].push_back(pairs);
    }
  }

  std::vector<double> layer_table(nl);
  for (std::size_t li = 0; li < nl; ++li) layer_table[li] = acc[li].result().aer;
  const std::size_t chosen =
      a.layer == -1 ? static_cast<std::size_t>(select_best_layer(layer_table, setting)) : 0;
  const int chosen_layer = layers[chosen];
  const AERResult result = acc[chosen].result();

  std::vector<SentAlign> hyp;
  for (const AlignSet& pairs : pairs_by_layer[chosen]) hyp.push_back({pairs, pairs});
  write_pharaoh(hyp, out + "/hyp.pharaoh");

  // Error buckets for the chosen layer against the possible set.
  ErrorCategoryReport errors;
  for (std::size_t i = begin; i < end; ++i) {
    const ParallelExample& ex = corpus.examples[i];
    std::vector<TokenInfo> src_infos, tgt_infos;
    for (int id : ex.src) src_infos.push_back(corpus.vocab.info(id));
    for (std::size_t t = 1; t + 1 < ex.tgt.size(); ++t)
      tgt_infos.push_back(corpus.vocab.info(ex.tgt[t]));
    errors.merge(
        categorize_errors(pairs_by_layer[chosen][i - begin], ex.poss, src_infos, tgt_infos));
  }

  json layer_json = json::array();
  for (std::size_t li = 0; li < nl; ++li)
    layer_json.push_back({{"layer", layers[li]}, {"aer", layer_table[li]}});

  json aer{{"setting", a.setting},
           {"mode", a.mode},
           {"mask", a.mask},
           {"layer", chosen_layer},
           {"auto_layer", a.layer == -1},
           {"layer_table", layer_json},
           {"result", result.to_json()},
           {"error_categories", errors.to_json()}};
  write_text_file(out + "/aer.json", aer.dump(2) + "\n");

  json prov{{"setting", a.setting}, {"mode", a.mode},
            {"mask", a.mask},       {"layer", chosen_layer},
            {"layer_table", layer_json},
            {"sentences", end - begin}};
  if (head_importance) {
    const HeadContribution mean = head_w[chosen].mean();
    prov["head_weights"] = mean.weights;
    prov["degenerate_sentences"] = degenerate[chosen];
  } else {
    prov["head_weights"] = uniform;
  }
  write_text_file(out + "/provenance.json", prov.dump(2) + "\n");

  return json{{"aer", result.aer}, {"layer", chosen_layer}, {"sentences", end - begin}};
}

// ------------------------------------------------------------------ eval-aer

struct EvalAerArgs {
  std::string hyp;
  std::string gold;
  std::string out;
  int base = 0;
  int gold_base = -1;  // -1: same as --base
};

json cmd_eval_aer(const EvalAerArgs& a) {
  const int gb = a.gold_base == -1 ? a.base : a.gold_base;
  const std::vector<SentAlign> hyp = read_pharaoh(a.hyp, a.base);
  const std::vector<SentAlign> gold = read_pharaoh(a.gold, gb);
  if (hyp.size() != gold.size())
    throw DataError("eval-aer: sentence count mismatch (" + std::to_string(hyp.size()) +
                    " hyp vs " + std::to_string(gold.size()) + " gold)");

  const std::string out = resolve_out(a.out, "eval-aer");
  std::filesystem::create_directories(out);
  LockFile lock(out);
  write_run_config(out, "eval-aer",
                   {{"hyp", a.hyp}, {"gold", a.gold}, {"base", a.base}, {"gold_base", gb}});

  AERAccumulator acc;
  for (std::size_t i = 0; i < hyp.size(); ++i) acc.add(hyp[i].poss, gold[i].sure, gold[i].poss);
  const AERResult result = acc.result();

  json aer{{"result", result.to_json()}, {"sentences", hyp.size()}};
  write_text_file(out + "/aer.json", aer.dump(2) + "\n");
  return json{{"aer", result.aer}, {"sentences", hyp.size()}};
}

// -------------------------------------------------------------------- attrib

struct AttribArgs {
  std::string model;
  std::string corpus;
  std::string out;
  double lambda = 0.01;
  int samples = 30;
  std::uint64_t seed = 1;
  int limit = 1, skip = 0;
  bool svg = false;
  bool no_source_saliency = false;
};

json cmd_attrib(const AttribArgs& a) {
  PerturbationConfig pc;
  pc.lambda = a.lambda;
  pc.n_samples = a.samples;
  pc.seed = a.seed;
  pc.validate_variance();

  const Checkpoint ckpt = load_checkpoint(a.model);
  const Corpus corpus = load_corpus(a.corpus);
  const auto [begin, end] = slice_range(corpus.examples.size(), a.skip, a.limit);

  const std::string out = resolve_out(a.out, "attrib");
  std::filesystem::create_directories(out);
  LockFile lock(out);
  write_run_config(out, "attrib",
                   {{"model", a.model},
                    {"corpus", a.corpus},
                    {"lambda", a.lambda},
                    {"samples", a.samples},
                    {"seed", a.seed},
                    {"limit", a.limit},
                    {"skip", a.skip},
                    {"svg", a.svg},
                    {"source_saliency", !a.no_source_saliency}});

  json reports = json::array();
  for (std::size_t i = begin; i < end; ++i) {
    const ParallelExample& ex = corpus.examples[i];
    const AttributionReport rep = attribution_report(ckpt.config, ckpt.params, ex.src, ex.tgt,
                                                     pc, !a.no_source_saliency);
    reports.push_back({{"index", i},
                       {"src", texts_of(corpus.vocab, ex.src)},
                       {"tgt", texts_of(corpus.vocab, ex.tgt)},
                       {"report", rep.to_json()}});

    if (a.svg) {
      // Decoder rows are the inputs y_0..y_{ny-1}; step s predicts y_{s+1}.
      const std::size_t ny = ex.tgt.size() - 1;
      std::vector<std::string> prefix_labels, step_labels;
      for (std::size_t r = 0; r < ny; ++r) {
        prefix_labels.push_back(corpus.vocab.text(ex.tgt[r]));
        step_labels.push_back(corpus.vocab.text(ex.tgt[r + 1]));
      }
      write_text_file(out + "/psi_" + std::to_string(i) + ".svg",
                      svg_heatmap(rep.psi, prefix_labels, step_labels, ColorScale::Sequential,
                                  "prefix saliency"));

      std::vector<double> bars;
      std::vector<std::string> bar_labels;
      for (std::size_t s = 0; s < rep.c_s.size(); ++s) {
        bars.push_back(rep.c_s[s]);
        bar_labels.push_back("S " + step_labels[s]);
        bars.push_back(rep.c_t[s]);
        bar_labels.push_back("T " + step_labels[s]);
      }
      write_text_file(out + "/contrib_" + std::to_string(i) + ".svg",
                      svg_bars(bars, bar_labels, "perturbation contributions"));

      if (!a.no_source_saliency)
        write_text_file(out + "/srcsal_" + std::to_string(i) + ".svg",
                        svg_heatmap(rep.src_sal, texts_of(corpus.vocab, ex.src), step_labels,
                                    ColorScale::Sequential, "source saliency"));
    }
  }
  write_text_file(out + "/attrib.json", reports.dump(2) + "\n");
  return json{{"sentences", end - begin}, {"out", out}};
}

// --------------------------------------------------------------------- probe

struct ProbeArgs {
  std::string model;
  std::string corpus;
  std::string out;
  int layer = -1;
  double threshold = 0.5;
  int limit = 0, skip = 0;
  bool svg = false;
};

json cmd_probe(const ProbeArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.model);
  const int n_layers = ckpt.config.num_decoder_layers;
  const int n_heads = ckpt.config.num_heads;
  if (a.layer != -1 && (a.layer < 0 || a.layer >= n_layers))
    throw DataError("probe: --layer out of range for this model");

  const Corpus corpus = load_corpus(a.corpus);
  const auto [begin, end] = slice_range(corpus.examples.size(), a.skip, a.limit);

  // Accumulator construction validates the threshold before any compute.
  std::vector<FinalizingRateAccumulator> fin_rate(
      static_cast<std::size_t>(n_layers), FinalizingRateAccumulator(a.threshold));

  const std::string out = resolve_out(a.out, "probe");
  std::filesystem::create_directories(out);
  LockFile lock(out);
  write_run_config(out, "probe",
                   {{"model", a.model},
                    {"corpus", a.corpus},
                    {"layer", a.layer},
                    {"auto_layer", a.layer == -1},
                    {"threshold", a.threshold},
                    {"limit", a.limit},
                    {"skip", a.skip},
                    {"svg", a.svg}});

  const std::vector<double> uniform(static_cast<std::size_t>(n_heads), 1.0 / n_heads);
  std::vector<AERAccumulator> layer_acc(static_cast<std::size_t>(n_layers));
  std::vector<std::vector<AERAccumulator>> head_acc(
      static_cast<std::size_t>(n_layers),
      std::vector<AERAccumulator>(static_cast<std::size_t>(n_heads)));
  std::vector<std::vector<std::size_t>> min_norm_fin(
      static_cast<std::size_t>(n_layers), std::vector<std::size_t>(n_heads, 0));
  CosineStatsAccumulator cos_acc;

  // First selected sentence, kept for the figures.
  AttentionRecord first_rec;
  std::vector<int> first_src, first_tgt;

  for (std::size_t i = begin; i < end; ++i) {
    const ParallelExample& ex = corpus.examples[i];
    ForwardPass fp = forward_teacher_forced(ckpt.config, ckpt.params, ex.src, ex.tgt);
    const AttentionRecord& rec = fp.record;
    if (i == begin && a.svg) {
      first_rec = rec;
      first_src = ex.src;
      first_tgt = ex.tgt;
    }

    std::vector<bool> fin(ex.src.size());
    std::vector<int> fin_cols;
    for (std::size_t j = 0; j < ex.src.size(); ++j) {
      fin[j] = corpus.vocab.is_finalizing(ex.src[j]);
      if (fin[j]) fin_cols.push_back(static_cast<int>(j));
    }
    std::vector<TokenCategory> tgt_cats;
    for (std::size_t t = 1; t + 1 < ex.tgt.size(); ++t)
      tgt_cats.push_back(corpus.vocab.info(ex.tgt[t]).category);

    for (int l = 0; l < n_layers; ++l) {
      const SoftAlignment soft =
          soft_alignment(rec, l, uniform, AlignSetting::DecoderOutput);
      layer_acc[l].add(alignment_file_pairs(hard_alignment(soft)), ex.sure, ex.poss);
      fin_rate[l].add(soft, fin_cols, tgt_cats);

      for (int h = 0; h < n_heads; ++h) {
        std::vector<double> solo(static_cast<std::size_t>(n_heads), 0.0);
        solo[static_cast<std::size_t>(h)] = 1.0;
        const SoftAlignment sh = soft_alignment(rec, l, solo, AlignSetting::DecoderOutput);
        head_acc[l][h].add(alignment_file_pairs(hard_alignment(sh)), ex.sure, ex.poss);

        const Tensor& vn = rec.value_norms[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
        std::size_t arg = 0;
        for (std::size_t j = 1; j < vn.size(); ++j)
          if (vn.raw()[j] < vn.raw()[arg]) arg = j;
        if (fin[arg]) ++min_norm_fin[l][h];
      }
    }

    const CosineResult cres = encoder_cosine(rec);
    cos_acc.add(cres.m, fin);
  }

  const std::size_t n_sent = end - begin;
  std::vector<double> layer_table(static_cast<std::size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) layer_table[l] = layer_acc[l].result().aer;
  const int chosen =
      a.layer != -1 ? a.layer : select_best_layer(layer_table, AlignSetting::DecoderOutput);

  std::vector<double> head_table(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) head_table[h] = head_acc[chosen][h].result().aer;
  const int best_head = select_best_head(head_table);

  json fin_by_layer = json::array();
  for (int l = 0; l < n_layers; ++l) fin_by_layer.push_back(fin_rate[l].to_json());
  json min_norm = json::array();
  for (int h = 0; h < n_heads; ++h)
    min_norm.push_back({{"head", h},
                        {"finalizing_fraction",
                         static_cast<double>(min_norm_fin[chosen][h]) / n_sent}});

  json report{{"layer", chosen},
              {"auto_layer", a.layer == -1},
              {"layer_table", layer_table},
              {"best_head", best_head},
              {"head_table", head_table},
              {"cosine", cos_acc.to_json()},
              {"finalizing_rate", fin_rate[static_cast<std::size_t>(chosen)].to_json()},
              {"finalizing_rate_by_layer", fin_by_layer},
              {"value_norm_min_finalizing", min_norm},
              {"sentences", n_sent}};
  write_text_file(out + "/probe.json", report.dump(2) + "\n");

  if (a.svg) {
    const std::vector<std::string> src_labels = texts_of(corpus.vocab, first_src);
    const CosineResult cres = encoder_cosine(first_rec);
    write_text_file(out + "/cosine.svg", svg_heatmap(cres.m, src_labels, src_labels,
                                                     ColorScale::Diverging, "encoder cosine"));

    const Tensor& vn = first_rec.value_norms[static_cast<std::size_t>(chosen)]
                                            [static_cast<std::size_t>(best_head)];
    write_text_file(out + "/value_norms.svg",
                    svg_bars(std::vector<double>(vn.raw(), vn.raw() + vn.size()), src_labels,
                             "value norms"));

    const Tensor& an = first_rec.merged_norms[static_cast<std::size_t>(chosen)];
    std::vector<std::string> row_labels;
    for (std::size_t r = 0; r + 1 < first_tgt.size(); ++r)
      row_labels.push_back(corpus.vocab.text(first_tgt[r]));
    write_text_file(out + "/attn_output_norms.svg",
                    svg_bars(std::vector<double>(an.raw(), an.raw() + an.size()), row_labels,
                             "attention output norms"));
  }

  return json{{"layer", chosen},
              {"best_head", best_head},
              {"aer", layer_table[static_cast<std::size_t>(chosen)]},
              {"sentences", n_sent}};
}

// -------------------------------------------------------------------- report

struct ReportArgs {
  std::string model;
  std::string corpus;
  std::string out;
  int limit = 0, skip = 0;
  int attrib_limit = 1;
  double lambda = 0.01;
  int samples = 30;
  std::uint64_t seed = 1;
  double threshold = 0.5;
};

json cmd_report(const ReportArgs& a) {
  const std::string out = resolve_out(a.out, "report");
  std::filesystem::create_directories(out);
  LockFile lock(out);
  write_run_config(out, "report",
                   {{"model", a.model},
                    {"corpus", a.corpus},
                    {"limit", a.limit},
                    {"skip", a.skip},
                    {"attrib_limit", a.attrib_limit},
                    {"lambda", a.lambda},
                    {"samples", a.samples},
                    {"seed", a.seed},
                    {"threshold", a.threshold}});

  auto align_variant = [&](const char* dir, const char* mode, bool mask) {
    AlignArgs args;
    args.model = a.model;
    args.corpus = a.corpus;
    args.out = out + "/" + dir;
    args.mode = mode;
    args.mask = mask;
    args.limit = a.limit;
    args.skip = a.skip;
    return cmd_align(args);
  };
  json align{{"avg", align_variant("align_avg", "avg", false)},
             {"avg_mask", align_variant("align_avg_mask", "avg", true)},
             {"hi", align_variant("align_hi", "head-importance", false)},
             {"hi_mask", align_variant("align_hi_mask", "head-importance", true)}};

  ProbeArgs pa;
  pa.model = a.model;
  pa.corpus = a.corpus;
  pa.out = out + "/probe";
  pa.threshold = a.threshold;
  pa.limit = a.limit;
  pa.skip = a.skip;
  pa.svg = true;
  const json probe = cmd_probe(pa);

  AttribArgs aa;
  aa.model = a.model;
  aa.corpus = a.corpus;
  aa.out = out + "/attrib";
  aa.lambda = a.lambda;
  aa.samples = a.samples;
  aa.seed = a.seed;
  aa.limit = a.attrib_limit;
  aa.skip = a.skip;
  aa.svg = true;
  const json attrib = cmd_attrib(aa);

  json summary{{"align", align}, {"probe", probe}, {"attrib", attrib}};
  write_text_file(out + "/summary.json", summary.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------- main

int run(int argc, char** argv) {
  CLI::App app{"attention-lens: train a toy translation model and analyze its attention"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  GenCorpusArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-corpus", "generate a synthetic parallel corpus");
  gen_cmd->add_option("--spec", gen.spec_path, "corpus spec JSON")->required();
  gen_cmd->add_option("--out", gen.out, "output directory");

  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a corpus");
  train_cmd->add_option("--corpus", tr.corpus, "corpus directory")->required();
  train_cmd->add_option("--out", tr.out, "output directory");
  train_cmd->add_option("--enc-layers", tr.enc_layers, "encoder layers");
  train_cmd->add_option("--dec-layers", tr.dec_layers, "decoder layers");
  train_cmd->add_option("--heads", tr.heads, "attention heads");
  train_cmd->add_option("--d-model", tr.d_model, "model width");
  train_cmd->add_option("--d-ff", tr.d_ff, "feed-forward width");
  train_cmd->add_option("--max-len", tr.max_len, "max sequence length (0: from corpus)");
  train_cmd->add_option("--lr-factor", tr.tr.lr_factor, "learning-rate scale");
  train_cmd->add_option("--warmup", tr.tr.warmup_steps, "warmup steps");
  train_cmd->add_option("--batch", tr.tr.batch_size, "batch size");
  train_cmd->add_option("--epochs", tr.tr.max_epochs, "max epochs");
  train_cmd->add_option("--clip", tr.tr.clip_norm, "gradient clip norm");
  train_cmd->add_option("--dropout", tr.tr.dropout, "dropout rate");
  train_cmd->add_option("--dev-size", tr.tr.dev_size, "dev split size");
  train_cmd->add_option("--seed", tr.tr.seed, "training seed");

  AlignArgs al;
  CLI::App* align_cmd = app.add_subcommand("align", "induce word alignments from attention");
  align_cmd->add_option("--model", al.model, "checkpoint path")->required();
  align_cmd->add_option("--corpus", al.corpus, "corpus directory")->required();
  align_cmd->add_option("--out", al.out, "output directory");
  align_cmd->add_option("--layer", al.layer, "decoder layer (-1: pick by AER)");
  align_cmd->add_option("--mode", al.mode, "head blending")
      ->check(CLI::IsMember({"avg", "head-importance"}));
  align_cmd->add_flag("--mask", al.mask, "zero finalizing source columns before the argmax");
  align_cmd->add_option("--setting", al.setting, "attention rows viewed as")
      ->check(CLI::IsMember({"output", "input"}));
  align_cmd->add_option("--limit", al.limit, "sentences to use (0: all)");
  align_cmd->add_option("--skip", al.skip, "sentences to skip");

  EvalAerArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval-aer", "score a Pharaoh file against gold");
  eval_cmd->add_option("--hyp", ev.hyp, "hypothesis Pharaoh file")->required();
  eval_cmd->add_option("--gold", ev.gold, "gold Pharaoh file")->required();
  eval_cmd->add_option("--out", ev.out, "output directory");
  eval_cmd->add_option("--base", ev.base, "index base of the hypothesis file");
  eval_cmd->add_option("--gold-base", ev.gold_base, "index base of the gold file (-1: same)");

  AttribArgs at;
  CLI::App* attrib_cmd = app.add_subcommand("attrib", "perturbation contributions and saliency");
  attrib_cmd->add_option("--model", at.model, "checkpoint path")->required();
  attrib_cmd->add_option("--corpus", at.corpus, "corpus directory")->required();
  attrib_cmd->add_option("--out", at.out, "output directory");
  attrib_cmd->add_option("--lambda", at.lambda, "relative noise scale");
  attrib_cmd->add_option("--samples", at.samples, "noise samples per statistic");
  attrib_cmd->add_option("--seed", at.seed, "noise seed");
  attrib_cmd->add_option("--limit", at.limit, "sentences to analyze");
  attrib_cmd->add_option("--skip", at.skip, "sentences to skip");
  attrib_cmd->add_flag("--svg", at.svg, "emit figures");
  attrib_cmd->add_flag("--no-source-saliency", at.no_source_saliency,
                       "skip the source saliency map");

  ProbeArgs pr;
  CLI::App* probe_cmd = app.add_subcommand("probe", "representation and head probes");
  probe_cmd->add_option("--model", pr.model, "checkpoint path")->required();
  probe_cmd->add_option("--corpus", pr.corpus, "corpus directory")->required();
  probe_cmd->add_option("--out", pr.out, "output directory");
  probe_cmd->add_option("--layer", pr.layer, "decoder layer (-1: pick by AER)");
  probe_cmd->add_option("--threshold", pr.threshold, "finalizing attention mass threshold");
  probe_cmd->add_option("--limit", pr.limit, "sentences to use (0: all)");
  probe_cmd->add_option("--skip", pr.skip, "sentences to skip");
  probe_cmd->add_flag("--svg", pr.svg, "emit figures");

  ReportArgs rp;
  CLI::App* report_cmd = app.add_subcommand("report", "full analysis bundle");
  report_cmd->add_option("--model", rp.model, "checkpoint path")->required();
  report_cmd->add_option("--corpus", rp.corpus, "corpus directory")->required();
  report_cmd->add_option("--out", rp.out, "output directory");
  report_cmd->add_option("--limit", rp.limit, "sentences for alignment/probes (0: all)");
  report_cmd->add_option("--skip", rp.skip, "sentences to skip");
  report_cmd->add_option("--attrib-limit", rp.attrib_limit, "sentences for attribution");
  report_cmd->add_option("--lambda", rp.lambda, "relative noise scale");
  report_cmd->add_option("--samples", rp.samples, "noise samples per statistic");
  report_cmd->add_option("--seed", rp.seed, "noise seed");
  report_cmd->add_option("--threshold", rp.threshold, "finalizing attention mass threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  json summary;
  if (*gen_cmd) summary = cmd_gen_corpus(gen);
  else if (*train_cmd) summary = cmd_train(tr);
  else if (*align_cmd) summary = cmd_align(al);
  else if (*eval_cmd) summary = cmd_eval_aer(ev);
  else if (*attrib_cmd) summary = cmd_attrib(at);
  else if (*probe_cmd) summary = cmd_probe(pr);
  else if (*report_cmd) summary = cmd_report(rp);
  std::cout << summary.dump() << "\n";
  return 0;
}

}  // namespace
}  // namespace attnlens

int main(int argc, char** argv) {
  try {
    return attnlens::run(argc, argv);
  } catch (const attnlens::UsageError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const attnlens::NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 4;
  } catch (const attnlens::ShapeError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 3;
  } catch (const attnlens::DataError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 3;
  }
}
