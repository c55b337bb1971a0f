#include "lmmt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lmmt {

std::vector<int> apply_transform(const TranslationRule& rule, const std::vector<int>& idx) {
  const int n = static_cast<int>(idx.size());
  std::vector<int> out(idx.size());
  switch (rule.transform) {
    case StructuralTransform::Identity:
      out = idx;
      break;
    case StructuralTransform::Reversal:
      for (int i = 0; i < n; ++i) out[i] = idx[n - 1 - i];
      break;
    case StructuralTransform::Rotation:
      for (int i = 0; i < n; ++i) {
        int j = (i + rule.rotation) % n;
        if (j < 0) j += n;
        out[i] = idx[j];
      }
      break;
  }
  return out;
}

namespace {

bool is_rotation_like(const TranslationRule& r) {
  return r.transform != StructuralTransform::Reversal;
}

int rotation_of(const TranslationRule& r) {
  return r.transform == StructuralTransform::Rotation ? r.rotation : 0;
}

}  // namespace

TranslationRule compose_rules(const TranslationRule& ab, const TranslationRule& bc) {
  if (ab.tgt_lang != bc.src_lang)
    throw std::invalid_argument("compose_rules: directions do not chain (" +
                                direction_name({ab.src_lang, ab.tgt_lang}) + " then " +
                                direction_name({bc.src_lang, bc.tgt_lang}) + ")");
  TranslationRule out;
  out.src_lang = ab.src_lang;
  out.tgt_lang = bc.tgt_lang;
  if (is_rotation_like(ab) && is_rotation_like(bc)) {
    const int k = rotation_of(ab) + rotation_of(bc);
    out.transform = k == 0 ? StructuralTransform::Identity : StructuralTransform::Rotation;
    out.rotation = k;
    return out;
  }
  if (ab.transform == StructuralTransform::Reversal &&
      bc.transform == StructuralTransform::Reversal) {
    out.transform = StructuralTransform::Identity;
    return out;
  }
  if (ab.transform == StructuralTransform::Identity ||
      bc.transform == StructuralTransform::Identity) {
    const TranslationRule& keep = ab.transform == StructuralTransform::Identity ? bc : ab;
    out.transform = keep.transform;
    out.rotation = keep.rotation;
    return out;
  }
  throw std::invalid_argument(
      "compose_rules: reversal composed with rotation leaves the transform set; "
      "use rotation-only languages when zero-shot references are needed");
}

TranslationRule invert_rule(const TranslationRule& rule) {
  TranslationRule out;
  out.src_lang = rule.tgt_lang;
  out.tgt_lang = rule.src_lang;
  out.transform = rule.transform;
  out.rotation = rule.transform == StructuralTransform::Rotation ? -rule.rotation : 0;
  return out;
}

std::string direction_name(const Direction& d) {
  return "l" + std::to_string(d.src_lang) + "-l" + std::to_string(d.tgt_lang);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

ParallelCorpus generate_corpus(const SyntheticLanguageSpec& src_spec,
                               const SyntheticLanguageSpec& tgt_spec,
                               const TranslationRule& rule, int n, uint64_t seed,
                               Split split) {
  if (src_spec.block_size() <= 0 || tgt_spec.block_size() <= 0)
    throw std::invalid_argument("generate_corpus: empty vocabulary block");
  if (src_spec.block_size() != tgt_spec.block_size())
    throw std::invalid_argument("generate_corpus: vocabulary blocks differ in size (" +
                                std::to_string(src_spec.block_size()) + " vs " +
                                std::to_string(tgt_spec.block_size()) + ")");
  const bool overlap =
      src_spec.vocab_begin < tgt_spec.vocab_end && tgt_spec.vocab_begin < src_spec.vocab_end;
  if (src_spec.id != tgt_spec.id && overlap)
    throw std::invalid_argument("generate_corpus: vocabulary blocks overlap ([" +
                                std::to_string(src_spec.vocab_begin) + "," +
                                std::to_string(src_spec.vocab_end) + ") vs [" +
                                std::to_string(tgt_spec.vocab_begin) + "," +
                                std::to_string(tgt_spec.vocab_end) + "))");
  for (const SyntheticLanguageSpec* spec : {&src_spec, &tgt_spec})
    if (spec->min_len < 1 || spec->min_len > spec->max_len)
      throw std::invalid_argument("generate_corpus: bad length range [" +
                                  std::to_string(spec->min_len) + "," +
                                  std::to_string(spec->max_len) + "]");
  if (rule.src_lang != src_spec.id || rule.tgt_lang != tgt_spec.id)
    throw std::invalid_argument("generate_corpus: rule is for " +
                                direction_name({rule.src_lang, rule.tgt_lang}) +
                                ", specs are " + direction_name({src_spec.id, tgt_spec.id}));

  ParallelCorpus corpus;
  corpus.direction = {src_spec.id, tgt_spec.id};
  corpus.split = split;
  corpus.rule = rule;
  corpus.pairs.reserve(static_cast<size_t>(n));

  const std::string purpose = "data/" + direction_name(corpus.direction) + "/" +
                              split_name(split);
  RngStream rng(seed, purpose);
  const int span = src_spec.max_len - src_spec.min_len + 1;
  for (int i = 0; i < n; ++i) {
    const int len = src_spec.min_len + static_cast<int>(rng.next_below(span));
    std::vector<int> idx(static_cast<size_t>(len));
    for (int& v : idx) v = static_cast<int>(rng.next_below(src_spec.block_size()));
    std::vector<int> tgt_idx = apply_transform(rule, idx);

    SequencePair pair;
    pair.src_lang = src_spec.id;
    pair.tgt_lang = tgt_spec.id;
    pair.src.reserve(idx.size());
    for (int v : idx) pair.src.push_back(src_spec.vocab_begin + v);
    pair.tgt.reserve(tgt_idx.size() + 1);
    for (int v : tgt_idx) pair.tgt.push_back(tgt_spec.vocab_begin + v);
    pair.tgt.push_back(kEosId);
    corpus.pairs.push_back(std::move(pair));
  }
  return corpus;
}

TagPosition parse_tag_position(const std::string& name) {
  if (name == "source_start") return TagPosition::SourceStart;
  if (name == "source_end") return TagPosition::SourceEnd;
  if (name == "target_start") return TagPosition::TargetStart;
  throw std::invalid_argument("tag_position: unknown value '" + name +
                              "' (expected source_start, source_end or target_start)");
}

const char* tag_position_name(TagPosition p) {
  switch (p) {
    case TagPosition::SourceStart: return "source_start";
    case TagPosition::SourceEnd: return "source_end";
    case TagPosition::TargetStart: return "target_start";
  }
  return "?";
}

ParallelCorpus tag_pairs(const ParallelCorpus& corpus, TagPosition position) {
  ParallelCorpus out = corpus;
  for (SequencePair& p : out.pairs) {
    const int tag = kFirstTagId + p.tgt_lang;
    switch (position) {
      case TagPosition::SourceStart:
        p.src.insert(p.src.begin(), tag);
        break;
      case TagPosition::SourceEnd:
        p.src.push_back(tag);
        break;
      case TagPosition::TargetStart:
        p.start_token = tag;
        p.start_in_lm_stream = true;
        break;
    }
  }
  return out;
}

std::vector<double> temperature_weights(const std::vector<int64_t>& counts,
                                        double temperature) {
  if (counts.empty()) throw std::invalid_argument("temperature_weights: no directions");
  if (temperature <= 0.0)
    throw std::invalid_argument("temperature_weights: temperature must be positive, got " +
                                std::to_string(temperature));
  int64_t total = 0;
  for (int64_t c : counts) {
    if (c < 0) throw std::invalid_argument("temperature_weights: negative count");
    total += c;
  }
  if (total == 0) throw std::invalid_argument("temperature_weights: zero total count");
  std::vector<double> w(counts.size());
  double norm = 0.0;
  for (size_t i = 0; i < counts.size(); ++i) {
    const double frac = static_cast<double>(counts[i]) / static_cast<double>(total);
    w[i] = frac > 0.0 ? std::pow(frac, 1.0 / temperature) : 0.0;
    norm += w[i];
  }
  for (double& x : w) x /= norm;
  return w;
}

BatchStream::BatchStream(std::vector<const ParallelCorpus*> corpora, SamplerConfig config)
    : corpora_(std::move(corpora)), config_(config) {
  if (corpora_.empty()) throw std::invalid_argument("BatchStream: no corpora");
  std::vector<int64_t> counts;
  for (const ParallelCorpus* c : corpora_) {
    if (c == nullptr || c->pairs.empty())
      throw std::invalid_argument("BatchStream: empty corpus for direction " +
                                  (c ? direction_name(c->direction) : std::string("?")));
    counts.push_back(static_cast<int64_t>(c->pairs.size()));
  }
  weights_ = temperature_weights(counts, config_.temperature);
}

Batch BatchStream::batch(int64_t step) const {
  RngStream rng(config_.seed, "batch", static_cast<uint64_t>(step));
  // pick the batch's direction
  size_t dir = weights_.size() - 1;
  double u = rng.next_double(), acc = 0.0;
  for (size_t i = 0; i < weights_.size(); ++i) {
    acc += weights_[i];
    if (u < acc) {
      dir = i;
      break;
    }
  }
  const ParallelCorpus& corpus = *corpora_[dir];

  Batch batch;
  int max_src = 0, max_tgt = 0;
  while (true) {
    const size_t i = rng.next_below(corpus.pairs.size());
    const SequencePair& p = corpus.pairs[i];
    const int own = static_cast<int>(p.src.size() + p.tgt.size());
    if (own > config_.token_budget)
      throw std::invalid_argument(
          "batch: pair " + std::to_string(i) + " of direction " +
          direction_name(corpus.direction) + " needs " + std::to_string(own) +
          " tokens alone, over the budget of " + std::to_string(config_.token_budget));
    const int ns = std::max(max_src, static_cast<int>(p.src.size()));
    const int nt = std::max(max_tgt, static_cast<int>(p.tgt.size()));
    const int footprint = static_cast<int>(batch.size() + 1) * (ns + nt);
    if (footprint > config_.token_budget && !batch.empty()) break;
    max_src = ns;
    max_tgt = nt;
    batch.push_back(p);
  }
  return batch;
}

void write_pair_file(const std::string& path, const ParallelCorpus& corpus) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_pair_file: cannot open " + path);
  out << "# src_lang=" << corpus.direction.src_lang
      << " tgt_lang=" << corpus.direction.tgt_lang << " split=" << split_name(corpus.split)
      << " transform=" << static_cast<int>(corpus.rule.transform)
      << " rotation=" << corpus.rule.rotation << "\n";
  for (const SequencePair& p : corpus.pairs) {
    for (size_t i = 0; i < p.src.size(); ++i) out << (i ? " " : "") << p.src[i];
    out << "\t";
    for (size_t i = 0; i < p.tgt.size(); ++i) out << (i ? " " : "") << p.tgt[i];
    out << "\n";
  }
  if (!out) throw std::runtime_error("write_pair_file: write failed for " + path);
}

ParallelCorpus read_pair_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_pair_file: cannot open " + path);
  std::string header;
  if (!std::getline(in, header) || header.rfind("# ", 0) != 0)
    throw std::runtime_error("read_pair_file: missing header line in " + path);

  ParallelCorpus corpus;
  {
    std::istringstream hs(header.substr(2));
    std::string kv;
    int transform = 0;
    while (hs >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("read_pair_file: malformed header field '" + kv + "'");
      const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "src_lang") corpus.direction.src_lang = std::stoi(val);
      else if (key == "tgt_lang") corpus.direction.tgt_lang = std::stoi(val);
      else if (key == "transform") transform = std::stoi(val);
      else if (key == "rotation") corpus.rule.rotation = std::stoi(val);
      else if (key == "split") {
        if (val == "train") corpus.split = Split::Train;
        else if (val == "dev") corpus.split = Split::Dev;
        else if (val == "test") corpus.split = Split::Test;
        else throw std::runtime_error("read_pair_file: unknown split '" + val + "'");
      } else {
        throw std::runtime_error("read_pair_file: unknown header key '" + key + "'");
      }
    }
    if (transform < 0 || transform > 2)
      throw std::runtime_error("read_pair_file: transform code out of range");
    corpus.rule.transform = static_cast<StructuralTransform>(transform);
    corpus.rule.src_lang = corpus.direction.src_lang;
    corpus.rule.tgt_lang = corpus.direction.tgt_lang;
  }

  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("read_pair_file: no tab separator at " + path + ":" +
                               std::to_string(line_no));
    SequencePair p;
    p.src_lang = corpus.direction.src_lang;
    p.tgt_lang = corpus.direction.tgt_lang;
    auto parse_ids = [&](const std::string& part, std::vector<int>& dst) {
      std::istringstream ss(part);
      int id;
      while (ss >> id) dst.push_back(id);
      if (!ss.eof())
        throw std::runtime_error("read_pair_file: non-integer token at " + path + ":" +
                                 std::to_string(line_no));
    };
    parse_ids(line.substr(0, tab), p.src);
    parse_ids(line.substr(tab + 1), p.tgt);
    if (p.src.empty() || p.tgt.empty())
      throw std::runtime_error("read_pair_file: empty side at " + path + ":" +
                               std::to_string(line_no));
    corpus.pairs.push_back(std::move(p));
  }
  return corpus;
}

SyntheticLanguageSpec VocabLayout::language(int id, int min_len, int max_len) const {
  if (id < 0 || id >= n_languages)
    throw std::invalid_argument("VocabLayout: language " + std::to_string(id) +
                                " outside [0," + std::to_string(n_languages) + ")");
  SyntheticLanguageSpec spec;
  spec.id = id;
  spec.vocab_begin = content_base() + id * tokens_per_language;
  spec.vocab_end = spec.vocab_begin + tokens_per_language;
  spec.min_len = min_len;
  spec.max_len = max_len;
  return spec;
}

int VocabLayout::token_language(int token) const {
  if (token < content_base() || token >= vocab_size()) return -1;
  return (token - content_base()) / tokens_per_language;
}

}  // namespace lmmt
