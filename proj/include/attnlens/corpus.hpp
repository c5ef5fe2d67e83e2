#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attnlens/common.hpp"
#include "attnlens/vocab.hpp"

namespace attnlens {

// Alignment pairs are (target position, source position), 0-based over file
// token positions (content plus final punctuation; sentinels excluded).
using AlignSet = std::vector<std::pair<int, int>>;

inline void normalize_align(AlignSet& a) {
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
}

struct SentAlign {
  AlignSet sure;  // subset of poss
  AlignSet poss;

  bool operator==(const SentAlign&) const = default;
};

struct ParallelExample {
  // Model-form sequences: src = content + punct + sentinel;
  // tgt = sentinel + content + punct + sentinel.
  std::vector<int> src;
  std::vector<int> tgt;
  AlignSet sure;
  AlignSet poss;

  std::size_t src_file_len() const { return src.size() - 1; }
  std::size_t tgt_file_len() const { return tgt.size() - 2; }

  bool operator==(const ParallelExample&) const = default;
};

struct CorpusSpec {
  int n_sentences = 5000;
  int len_min = 3;  // content words per source sentence
  int len_max = 9;
  int n_word_types = 60;
  int n_trigger_types = 4;
  int reorder_window = 2;
  double split_prob = 0.1;        // per word type
  double prefix_only_rate = 0.1;  // per adjacent target pair
  int vocab_budget = 200;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_sentences < 1) throw DataError("corpus spec: n_sentences < 1");
    if (len_min < 1 || len_max < len_min) throw DataError("corpus spec: bad length range");
    if (n_word_types < 1) throw DataError("corpus spec: n_word_types < 1");
    if (n_trigger_types < 0) throw DataError("corpus spec: n_trigger_types < 0");
    if (reorder_window < 1) throw DataError("corpus spec: reorder window < 1");
    if (split_prob < 0.0 || split_prob > 1.0) throw DataError("corpus spec: split_prob not in [0,1]");
    if (prefix_only_rate < 0.0 || prefix_only_rate > 1.0)
      throw DataError("corpus spec: prefix_only_rate not in [0,1]");
  }

  nlohmann::json to_json() const {
    return {{"n_sentences", n_sentences},
            {"len_min", len_min},
            {"len_max", len_max},
            {"n_word_types", n_word_types},
            {"n_trigger_types", n_trigger_types},
            {"reorder_window", reorder_window},
            {"split_prob", split_prob},
            {"prefix_only_rate", prefix_only_rate},
            {"vocab_budget", vocab_budget},
            {"seed", seed}};
  }

  static CorpusSpec from_json(const nlohmann::json& j) {
    CorpusSpec s;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("n_sentences", s.n_sentences);
    get("len_min", s.len_min);
    get("len_max", s.len_max);
    get("n_word_types", s.n_word_types);
    get("n_trigger_types", s.n_trigger_types);
    get("reorder_window", s.reorder_window);
    get("split_prob", s.split_prob);
    get("prefix_only_rate", s.prefix_only_rate);
    get("vocab_budget", s.vocab_budget);
    get("seed", s.seed);
    s.validate();
    return s;
  }

  bool operator==(const CorpusSpec&) const = default;
};

struct Corpus {
  CorpusSpec spec;
  Vocab vocab;
  std::vector<ParallelExample> examples;
};

namespace detail {

constexpr std::uint64_t kSplitSalt = 0x5b17c0de;
constexpr std::uint64_t kReorderSalt = 0x0e0e0e0e;
constexpr std::uint64_t kTriggerSalt = 0x7516ce77;
constexpr std::uint64_t kSentenceSalt = 0x5e17e4ce;

// Deterministic per-type split decision and per-pair trigger firing: the
// phenomena are pure functions of the visible context, so a model can learn
// them exactly.
inline bool type_splits(const CorpusSpec& spec, int word_type) {
  std::uint64_t h = mix_seed(mix_seed(spec.seed, kSplitSalt), static_cast<std::uint64_t>(word_type));
  return static_cast<double>(h % 1000000) < spec.split_prob * 1e6;
}

inline int trigger_after(const CorpusSpec& spec, int prev, int cur) {
  if (spec.n_trigger_types == 0 || spec.prefix_only_rate <= 0.0) return -1;
  std::uint64_t h = mix_seed(mix_seed(mix_seed(spec.seed, kTriggerSalt), static_cast<std::uint64_t>(prev)),
                             static_cast<std::uint64_t>(cur));
  if (static_cast<double>(h % 1000000) >= spec.prefix_only_rate * 1e6) return -1;
  return static_cast<int>((h >> 20) % static_cast<std::uint64_t>(spec.n_trigger_types));
}

}  // namespace detail

// Synthetic parallel corpus with gold alignments known by construction.
// Target = block-reordered lexicon image of the source, with deterministic
// subword splits (per word type) and prefix-only tokens fired by the previous
// two target tokens.
inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();

  Corpus corpus;
  corpus.spec = spec;
  corpus.vocab = Vocab::with_specials();
  Vocab& vocab = corpus.vocab;

  const int n = spec.n_word_types;
  int vocab_count = 3 + n + spec.n_trigger_types;
  for (int i = 0; i < n; ++i) vocab_count += detail::type_splits(spec, i) ? 2 : 1;
  if (vocab_count > spec.vocab_budget)
    throw DataError("corpus spec: lexicon needs " + std::to_string(vocab_count) +
                    " tokens, budget is " + std::to_string(spec.vocab_budget));

  auto word_cat = [](int i) {
    return i % 4 == 0 ? TokenCategory::Function : TokenCategory::Content;
  };

  std::vector<int> src_id(n);
  std::vector<std::vector<int>> tgt_pieces(n);
  for (int i = 0; i < n; ++i)
    src_id[i] = vocab.add({"s" + std::to_string(i), word_cat(i), false, false, false});
  for (int i = 0; i < n; ++i) {
    if (detail::type_splits(spec, i)) {
      tgt_pieces[i].push_back(
          vocab.add({"t" + std::to_string(i) + "a", word_cat(i), false, false, false}));
      tgt_pieces[i].push_back(
          vocab.add({"t" + std::to_string(i) + "b", word_cat(i), false, true, false}));
    } else {
      tgt_pieces[i].push_back(vocab.add({"t" + std::to_string(i), word_cat(i), false, false, false}));
    }
  }
  std::vector<int> trigger_id(spec.n_trigger_types);
  for (int k = 0; k < spec.n_trigger_types; ++k)
    trigger_id[k] = vocab.add({"g" + std::to_string(k), TokenCategory::Function, false, false, true});

  // Per-type emission ranks: one seeded permutation shared by every sentence.
  std::vector<int> rank(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) rank[static_cast<std::size_t>(i)] = i;
  {
    std::mt19937_64 rank_rng(mix_seed(spec.seed, detail::kReorderSalt));
    std::shuffle(rank.begin(), rank.end(), rank_rng);
  }

  corpus.examples.reserve(static_cast<std::size_t>(spec.n_sentences));
  for (int idx = 0; idx < spec.n_sentences; ++idx) {
    std::mt19937_64 rng(mix_seed(mix_seed(spec.seed, detail::kSentenceSalt),
                                 static_cast<std::uint64_t>(idx)));
    std::uniform_int_distribution<int> len_dist(spec.len_min, spec.len_max);
    std::uniform_int_distribution<int> word_dist(0, n - 1);
    const int L = len_dist(rng);
    std::vector<int> words(static_cast<std::size_t>(L));
    for (int& w : words) w = word_dist(rng);

    // Emission order: within each block of reorder_window source positions,
    // positions are emitted by ascending seeded word rank (ties keep source
    // order), so the reordering is a deterministic function of the word types.
    std::vector<int> order(static_cast<std::size_t>(L));
    for (int p = 0; p < L; ++p) order[static_cast<std::size_t>(p)] = p;
    for (int lo = 0; lo < L; lo += spec.reorder_window) {
      const int hi = std::min(lo + spec.reorder_window, L);
      if (hi - lo < 2) continue;
      std::stable_sort(order.begin() + lo, order.begin() + hi, [&](int a, int b) {
        return rank[static_cast<std::size_t>(words[static_cast<std::size_t>(a)])] <
               rank[static_cast<std::size_t>(words[static_cast<std::size_t>(b)])];
      });
    }

    ParallelExample ex;
    for (int p = 0; p < L; ++p) ex.src.push_back(src_id[static_cast<std::size_t>(words[static_cast<std::size_t>(p)])]);
    ex.src.push_back(vocab.punct_id());
    ex.src.push_back(vocab.eos_id());

    ex.tgt.push_back(vocab.eos_id());
    auto emit_file_pos = [&]() { return static_cast<int>(ex.tgt.size()) - 1; };
    for (int k = 0; k < L; ++k) {
      const int sp = order[static_cast<std::size_t>(k)];
      const std::vector<int>& pieces = tgt_pieces[static_cast<std::size_t>(words[static_cast<std::size_t>(sp)])];
      for (std::size_t pi = 0; pi < pieces.size(); ++pi) {
        const int t = emit_file_pos();
        ex.tgt.push_back(pieces[pi]);
        ex.poss.emplace_back(t, sp);
        if (pi == 0) ex.sure.emplace_back(t, sp);
      }
      const int prev = ex.tgt[ex.tgt.size() - 2];
      const int cur = ex.tgt.back();
      const int trig = detail::trigger_after(spec, prev, cur);
      if (trig >= 0) ex.tgt.push_back(trigger_id[static_cast<std::size_t>(trig)]);
    }
    const int t_punct = emit_file_pos();
    ex.tgt.push_back(vocab.punct_id());
    ex.sure.emplace_back(t_punct, L);
    ex.poss.emplace_back(t_punct, L);
    ex.tgt.push_back(vocab.eos_id());

    normalize_align(ex.sure);
    normalize_align(ex.poss);
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

// --- Pharaoh alignment files -------------------------------------------------
// One sentence per line; "t-j" marks a sure pair, "t?j" a possible-only pair,
// first index target, second source. Emitted 0-based; `base` shifts ingestion.

inline std::vector<SentAlign> read_pharaoh(const std::string& path, int base = 0,
                                           const std::vector<std::pair<int, int>>* lens = nullptr) {
  std::istringstream in(read_text_file(path));
  std::vector<SentAlign> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    SentAlign sa;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      std::size_t sep = tok.find_first_of("-?");
      if (sep == std::string::npos || sep == 0 || sep + 1 >= tok.size())
        throw DataError(path + ":" + std::to_string(line_no) + ": malformed pair '" + tok + "'");
      int t = 0, j = 0;
      auto r1 = std::from_chars(tok.data(), tok.data() + sep, t);
      auto r2 = std::from_chars(tok.data() + sep + 1, tok.data() + tok.size(), j);
      if (r1.ec != std::errc() || r1.ptr != tok.data() + sep || r2.ec != std::errc() ||
          r2.ptr != tok.data() + tok.size())
        throw DataError(path + ":" + std::to_string(line_no) + ": malformed pair '" + tok + "'");
      t -= base;
      j -= base;
      if (t < 0 || j < 0)
        throw DataError(path + ":" + std::to_string(line_no) + ": negative index after base shift");
      if (tok[sep] == '-') sa.sure.emplace_back(t, j);
      sa.poss.emplace_back(t, j);
    }
    normalize_align(sa.sure);
    normalize_align(sa.poss);
    out.push_back(std::move(sa));
  }
  if (lens) {
    if (lens->size() != out.size())
      throw DataError(path + ": " + std::to_string(out.size()) + " alignment lines for " +
                      std::to_string(lens->size()) + " sentences");
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (const auto& [t, j] : out[i].poss)
        if (t >= (*lens)[i].first || j >= (*lens)[i].second)
          throw DataError(path + ":" + std::to_string(i + 1) + ": pair (" + std::to_string(t) +
                          "," + std::to_string(j) + ") out of range for lengths (" +
                          std::to_string((*lens)[i].first) + "," +
                          std::to_string((*lens)[i].second) + ")");
    }
  }
  return out;
}

inline void write_pharaoh(const std::vector<SentAlign>& alignments, const std::string& path) {
  std::string out;
  for (const SentAlign& sa : alignments) {
    AlignSet sure = sa.sure;
    normalize_align(sure);
    AlignSet all = sa.poss;
    for (const auto& p : sure) all.push_back(p);
    normalize_align(all);
    bool first = true;
    for (const auto& [t, j] : all) {
      if (!first) out += ' ';
      first = false;
      const bool is_sure = std::binary_search(sure.begin(), sure.end(), std::make_pair(t, j));
      out += std::to_string(t);
      out += is_sure ? '-' : '?';
      out += std::to_string(j);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

// --- external parallel text ---------------------------------------------------

namespace detail {

inline std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> toks;
    std::string t;
    while (ls >> t) toks.push_back(std::move(t));
    lines.push_back(std::move(toks));
  }
  return lines;
}

}  // namespace detail

// Whitespace-tokenized, line-aligned source/target text; unknown tokens map to
// the unknown id. Empty gold path gives empty S, P (analysis-only mode).
inline std::vector<ParallelExample> load_external_parallel(const std::string& src_path,
                                                           const std::string& tgt_path,
                                                           const std::string& gold_path,
                                                           const Vocab& vocab, int base = 0) {
  auto src_lines = detail::read_token_lines(src_path);
  auto tgt_lines = detail::read_token_lines(tgt_path);
  if (src_lines.size() != tgt_lines.size())
    throw DataError("parallel text: " + std::to_string(src_lines.size()) + " source lines vs " +
                    std::to_string(tgt_lines.size()) + " target lines");

  std::vector<ParallelExample> out;
  out.reserve(src_lines.size());
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    ParallelExample ex;
    for (const std::string& t : src_lines[i]) ex.src.push_back(vocab.id_or_unk(t));
    ex.src.push_back(vocab.eos_id());
    ex.tgt.push_back(vocab.eos_id());
    for (const std::string& t : tgt_lines[i]) ex.tgt.push_back(vocab.id_or_unk(t));
    ex.tgt.push_back(vocab.eos_id());
    out.push_back(std::move(ex));
  }

  if (!gold_path.empty()) {
    std::vector<std::pair<int, int>> lens;
    lens.reserve(out.size());
    for (const ParallelExample& ex : out)
      lens.emplace_back(static_cast<int>(ex.tgt_file_len()), static_cast<int>(ex.src_file_len()));
    auto gold = read_pharaoh(gold_path, base, &lens);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i].sure = std::move(gold[i].sure);
      out[i].poss = std::move(gold[i].poss);
    }
  }
  return out;
}

// --- corpus directory ----------------------------------------------------------
// spec.json + vocab.json + src.txt + tgt.txt + gold.pharaoh. Text files hold
// file tokens only (no sentinels); sequences are re-framed on load.

inline void save_corpus(const Corpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir + "/spec.json", corpus.spec.to_json().dump(2) + "\n");
  write_text_file(dir + "/vocab.json", corpus.vocab.to_json().dump(2) + "\n");
  std::string src_txt, tgt_txt;
  std::vector<SentAlign> gold;
  for (const ParallelExample& ex : corpus.examples) {
    for (std::size_t p = 0; p + 1 < ex.src.size(); ++p) {
      if (p) src_txt += ' ';
      src_txt += corpus.vocab.text(ex.src[p]);
    }
    src_txt += '\n';
    for (std::size_t p = 1; p + 1 < ex.tgt.size(); ++p) {
      if (p > 1) tgt_txt += ' ';
      tgt_txt += corpus.vocab.text(ex.tgt[p]);
    }
    tgt_txt += '\n';
    gold.push_back({ex.sure, ex.poss});
  }
  write_text_file(dir + "/src.txt", src_txt);
  write_text_file(dir + "/tgt.txt", tgt_txt);
  write_pharaoh(gold, dir + "/gold.pharaoh");
}

inline Corpus load_corpus(const std::string& dir) {
  Corpus corpus;
  corpus.spec = CorpusSpec::from_json(nlohmann::json::parse(read_text_file(dir + "/spec.json")));
  corpus.vocab = Vocab::from_json(nlohmann::json::parse(read_text_file(dir + "/vocab.json")));

  auto src_lines = detail::read_token_lines(dir + "/src.txt");
  auto tgt_lines = detail::read_token_lines(dir + "/tgt.txt");
  if (src_lines.size() != tgt_lines.size())
    throw DataError(dir + ": src.txt and tgt.txt line counts differ");
  auto to_ids = [&](const std::vector<std::string>& toks, const char* which, std::size_t line) {
    std::vector<int> ids;
    for (const std::string& t : toks) {
      int id = corpus.vocab.id_of(t);
      if (id < 0)
        throw DataError(dir + "/" + which + ":" + std::to_string(line + 1) +
                        ": token '" + t + "' not in vocab");
      ids.push_back(id);
    }
    return ids;
  };
  corpus.examples.reserve(src_lines.size());
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    ParallelExample ex;
    ex.src = to_ids(src_lines[i], "src.txt", i);
    ex.src.push_back(corpus.vocab.eos_id());
    ex.tgt.push_back(corpus.vocab.eos_id());
    for (int id : to_ids(tgt_lines[i], "tgt.txt", i)) ex.tgt.push_back(id);
    ex.tgt.push_back(corpus.vocab.eos_id());
    corpus.examples.push_back(std::move(ex));
  }

  std::vector<std::pair<int, int>> lens;
  lens.reserve(corpus.examples.size());
  for (const ParallelExample& ex : corpus.examples)
    lens.emplace_back(static_cast<int>(ex.tgt_file_len()), static_cast<int>(ex.src_file_len()));
  auto gold = read_pharaoh(dir + "/gold.pharaoh", 0, &lens);
  for (std::size_t i = 0; i < corpus.examples.size(); ++i) {
    corpus.examples[i].sure = std::move(gold[i].sure);
    corpus.examples[i].poss = std::move(gold[i].poss);
  }
  return corpus;
}

}  // namespace attnlens
