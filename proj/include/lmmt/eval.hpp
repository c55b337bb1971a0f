#pragma once

// Measurement: token log-perplexity (natural log, target side only so every
// variant is comparable), corpus BLEU over integer token ids, beam search with
// a power-form length penalty, and vocab-block language accuracy.

#include <string>
#include <vector>

#include "lmmt/data.hpp"
#include "lmmt/model.hpp"

namespace lmmt {

struct DecodeSettings {
  int beam = 8;
  double length_penalty = 0.5;  // score = (sum logprob) / |Y|^alpha
  int max_len = 32;
};

// mean over target tokens of -ln p(reference token), teacher-forced.
// Per-pair forwards are independent of batch composition, so the value is
// invariant to how the corpus is split into batches.
double log_perplexity(ModelState& state, const std::vector<SequencePair>& corpus,
                      int batch_pairs = 8);

// corpus-level modified n-gram precisions (n = 1..max_n), geometric mean,
// brevity penalty exp(min(0, 1 - r/c)); 0 if any precision is 0.  Percentage.
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_n = 4);

// finished hypotheses score (sum logprob)/len^alpha with len counting the
// emitted tokens including EOS; ties break toward earlier completion, then
// lexicographic token order.  Returns the emitted tokens without EOS.
std::vector<int> beam_search(ModelState& state, const std::vector<int>& src,
                             const DecodeSettings& settings, int start_token = kBosId,
                             bool start_in_lm_stream = false);

// fraction of hypotheses whose non-reserved tokens fall by strict majority in
// the intended language's vocab block; zero non-reserved tokens = off-target
double language_accuracy(const std::vector<std::vector<int>>& hypotheses,
                         const std::vector<int>& intended_languages,
                         const VocabLayout& layout);

// one record per (cell, direction, split); field names are the rows.csv header
struct MetricsRecord {
  std::string direction;
  std::string split;
  double ppl = 0.0;        // token log-perplexity, natural log
  double bleu = -1.0;      // percentage; -1 when decoding was skipped
  double lang_acc = -1.0;  // fraction; -1 when not applicable
  int64_t n_params = 0;    // non-embedding parameter count
  int64_t flops = 0;       // forward-pass estimate at the recipe's max lengths
  DecodeSettings decode;
};

}  // namespace lmmt
