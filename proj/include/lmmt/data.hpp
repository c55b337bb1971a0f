// Synthetic multilingual parallel data.
//
// Token-id layout: 0=pad, 1=BOS, 2=EOS, then one tag id per language, then one
// contiguous content block per language. Every content token belongs to
// exactly one language, which makes translation-language detection exact.
//
// A sentence is a sequence of content indices; each language renders indices
// into its own block after applying its structural transform. Translating
// i -> j therefore means undoing transform i, applying transform j, and
// relabeling blocks. Rotation transforms compose, which is what gives
// held-out (zero-shot) directions an exact reference.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmmt/rng.hpp"

namespace lmmt {

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kFirstTagId = 3;

struct SequencePair {
  std::vector<int> src;        // source tokens as fed to the model (tags included)
  std::vector<int> tgt;        // target tokens to predict: content then EOS
  int src_lang = -1;
  int tgt_lang = -1;
  int start_token = kBosId;    // decoder start; the target tag when tag_position=target_start
  bool start_in_lm_stream = false;  // target_start mode feeds the start token to LM variants
};

struct SyntheticLanguageSpec {
  int id = 0;
  int vocab_begin = 0;  // content block [vocab_begin, vocab_end)
  int vocab_end = 0;
  int min_len = 4;
  int max_len = 8;
  int tag_id() const { return kFirstTagId + id; }
  int block_size() const { return vocab_end - vocab_begin; }
};

enum class StructuralTransform { Identity, Reversal, Rotation };

struct TranslationRule {
  int src_lang = 0;
  int tgt_lang = 0;
  StructuralTransform transform = StructuralTransform::Identity;
  int rotation = 0;  // used when transform == Rotation; may be negative
};

// apply `rule`'s structural transform to a content-index sequence
std::vector<int> apply_transform(const TranslationRule& rule, const std::vector<int>& idx);

// rule(A->B) then rule(B->C) as one A->C rule; reversal composed with rotation
// has no representation in the transform set and is rejected
TranslationRule compose_rules(const TranslationRule& ab, const TranslationRule& bc);
TranslationRule invert_rule(const TranslationRule& rule);

struct Direction {
  int src_lang = 0;
  int tgt_lang = 0;
  bool operator==(const Direction& o) const {
    return src_lang == o.src_lang && tgt_lang == o.tgt_lang;
  }
};

std::string direction_name(const Direction& d);  // e.g. "l1-l0"

enum class Split { Train, Dev, Test };
const char* split_name(Split s);

struct ParallelCorpus {
  Direction direction;
  Split split = Split::Train;
  TranslationRule rule;
  std::vector<SequencePair> pairs;
};

// n pairs with source lengths uniform in the spec range, target = rule(source).
// Deterministic in (seed, direction, split): distinct splits draw from disjoint
// stream regions.
ParallelCorpus generate_corpus(const SyntheticLanguageSpec& src_spec,
                               const SyntheticLanguageSpec& tgt_spec,
                               const TranslationRule& rule, int n, uint64_t seed,
                               Split split);

enum class TagPosition { SourceStart, SourceEnd, TargetStart };
TagPosition parse_tag_position(const std::string& name);
const char* tag_position_name(TagPosition p);

// Inserts the target-language tag per the configured position. target_start
// replaces the decoder BOS with the tag (labels are unchanged).
ParallelCorpus tag_pairs(const ParallelCorpus& corpus, TagPosition position);

// p_i proportional to (count_i / sum)^(1/T)
std::vector<double> temperature_weights(const std::vector<int64_t>& counts, double temperature);

struct SamplerConfig {
  double temperature = 5.0;
  int token_budget = 1024;  // per batch, counting the padded rectangle
  uint64_t seed = 1;
};

using Batch = std::vector<SequencePair>;

// Deterministic batch schedule over one or more training corpora. Each step
// samples one direction from temperature_weights over corpus sizes, then fills
// the batch (sampling pairs with replacement) until the padded footprint
// n_pairs * (max src len + max tgt len) would exceed the token budget.
// batch(t) depends only on (seed, t), so resumed runs see identical batches.
class BatchStream {
 public:
  BatchStream(std::vector<const ParallelCorpus*> corpora, SamplerConfig config);
  Batch batch(int64_t step) const;
  const SamplerConfig& config() const { return config_; }
  const std::vector<double>& direction_weights() const { return weights_; }

 private:
  std::vector<const ParallelCorpus*> corpora_;
  SamplerConfig config_;
  std::vector<double> weights_;
};

// line-oriented corpus files: a header recording languages/rule/split, then
// one pair per line with source and target ids separated by a tab
void write_pair_file(const std::string& path, const ParallelCorpus& corpus);
ParallelCorpus read_pair_file(const std::string& path);

// vocabulary geometry shared by data generation and the language detector
struct VocabLayout {
  int n_languages = 0;
  int tokens_per_language = 0;
  int content_base() const { return kFirstTagId + n_languages; }
  int vocab_size() const { return content_base() + n_languages * tokens_per_language; }
  SyntheticLanguageSpec language(int id, int min_len, int max_len) const;
  // language owning a token id, or -1 for reserved/out-of-range ids
  int token_language(int token) const;
};

}  // namespace lmmt
