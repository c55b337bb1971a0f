#include "lmmt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace lmmt {

double log_perplexity(ModelState& state, const std::vector<SequencePair>& corpus,
                      int batch_pairs) {
  if (corpus.empty()) throw std::invalid_argument("log_perplexity: empty corpus");
  if (batch_pairs < 1)
    throw std::invalid_argument("log_perplexity: batch_pairs must be >= 1");
  double total = 0.0;
  int64_t tokens = 0;
  for (size_t begin = 0; begin < corpus.size(); begin += static_cast<size_t>(batch_pairs)) {
    const size_t count = std::min(corpus.size() - begin, static_cast<size_t>(batch_pairs));
    std::span<const SequencePair> chunk(corpus.data() + begin, count);
    ForwardResult fwd = forward_batch(nullptr, state, chunk, {});
    Tensor loss =
        ops::cross_entropy_label_smoothed(nullptr, fwd.logits, fwd.tgt_labels, 0.0f, kPadId);
    total += static_cast<double>(loss.item()) * fwd.tgt_tokens;
    tokens += fwd.tgt_tokens;
  }
  return total / static_cast<double>(tokens);
}

namespace {

using Ngram = std::vector<int>;

std::map<Ngram, int> ngram_counts(const std::vector<int>& toks, int n) {
  std::map<Ngram, int> counts;
  for (int i = 0; i + n <= static_cast<int>(toks.size()); ++i)
    ++counts[Ngram(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

}  // namespace

double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_n) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) +
                                " hypotheses vs " + std::to_string(references.size()) +
                                " references");
  if (hypotheses.empty()) throw std::invalid_argument("corpus_bleu: empty input");
  if (max_n < 1) throw std::invalid_argument("corpus_bleu: max_n must be >= 1");

  int64_t hyp_len = 0, ref_len = 0;
  std::vector<int64_t> matched(static_cast<size_t>(max_n), 0);
  std::vector<int64_t> possible(static_cast<size_t>(max_n), 0);
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    hyp_len += static_cast<int64_t>(hyp.size());
    ref_len += static_cast<int64_t>(ref.size());
    for (int n = 1; n <= max_n; ++n) {
      const auto hyp_counts = ngram_counts(hyp, n);
      const auto ref_counts = ngram_counts(ref, n);
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end())
          matched[static_cast<size_t>(n - 1)] += std::min(count, it->second);
      }
      possible[static_cast<size_t>(n - 1)] +=
          std::max<int64_t>(0, static_cast<int64_t>(hyp.size()) - n + 1);
    }
  }

  double log_prec = 0.0;
  for (int n = 0; n < max_n; ++n) {
    if (matched[static_cast<size_t>(n)] == 0) return 0.0;
    log_prec += std::log(static_cast<double>(matched[static_cast<size_t>(n)]) /
                         static_cast<double>(possible[static_cast<size_t>(n)]));
  }
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_prec / max_n);
}

namespace {

struct Hypothesis {
  std::vector<int> toks;  // emitted tokens, EOS excluded
  double sum_lp = 0.0;
  int finished_at = -1;  // step index of EOS, -1 while active
};

double penalized(const Hypothesis& h, double alpha) {
  // |Y| counts the emitted tokens plus EOS when the hypothesis finished
  const double len = static_cast<double>(h.toks.size() + (h.finished_at >= 0 ? 1 : 0));
  return h.sum_lp / std::pow(std::max(len, 1.0), alpha);
}

// earlier completion first, then lexicographic token order
bool preferred(const Hypothesis& a, const Hypothesis& b, double alpha) {
  const double sa = penalized(a, alpha), sb = penalized(b, alpha);
  if (sa != sb) return sa > sb;
  if (a.finished_at != b.finished_at) {
    if (a.finished_at < 0) return false;
    if (b.finished_at < 0) return true;
    return a.finished_at < b.finished_at;
  }
  return a.toks < b.toks;
}

Hypothesis greedy_rollout(ModelState& state, const std::vector<int>& src,
                          const DecodeSettings& settings, int start_token,
                          bool start_in_lm_stream) {
  Hypothesis h;
  for (int step = 0; step < settings.max_len; ++step) {
    std::vector<float> lp =
        next_token_logprobs(state, src, h.toks, start_token, start_in_lm_stream);
    int best = -1;
    for (int c = 0; c < static_cast<int>(lp.size()); ++c) {
      if (c == kPadId || c == kBosId) continue;
      if (best < 0 || lp[static_cast<size_t>(c)] > lp[static_cast<size_t>(best)]) best = c;
    }
    h.sum_lp += lp[static_cast<size_t>(best)];
    if (best == kEosId) {
      h.finished_at = step;
      break;
    }
    h.toks.push_back(best);
  }
  return h;
}

}  // namespace

std::vector<int> beam_search(ModelState& state, const std::vector<int>& src,
                             const DecodeSettings& settings, int start_token,
                             bool start_in_lm_stream) {
  if (settings.beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  if (settings.max_len < 1)
    throw std::invalid_argument("beam_search: max_len must be >= 1");

  const double alpha = settings.length_penalty;
  std::vector<Hypothesis> active{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (int step = 0; step < settings.max_len && !active.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    for (const Hypothesis& h : active) {
      std::vector<float> lp =
          next_token_logprobs(state, src, h.toks, start_token, start_in_lm_stream);
      for (int c = 0; c < static_cast<int>(lp.size()); ++c) {
        if (c == kPadId || c == kBosId) continue;
        Hypothesis next = h;
        next.sum_lp += lp[static_cast<size_t>(c)];
        if (c == kEosId)
          next.finished_at = step;
        else
          next.toks.push_back(c);
        candidates.push_back(std::move(next));
      }
    }
    // rank expansions by running score; lexicographic order on ties keeps the
    // search deterministic and makes beam=1 match greedy exactly
    std::sort(candidates.begin(), candidates.end(),
              [](const Hypothesis& a, const Hypothesis& b) {
                if (a.sum_lp != b.sum_lp) return a.sum_lp > b.sum_lp;
                if (a.finished_at != b.finished_at) {
                  if (a.finished_at < 0) return false;
                  if (b.finished_at < 0) return true;
                }
                return a.toks < b.toks;
              });
    if (static_cast<int>(candidates.size()) > settings.beam)
      candidates.resize(static_cast<size_t>(settings.beam));
    active.clear();
    for (Hypothesis& h : candidates) {
      if (h.finished_at >= 0)
        finished.push_back(std::move(h));
      else
        active.push_back(std::move(h));
    }
  }

  Hypothesis best;
  bool have = false;
  for (const Hypothesis& h : finished)
    if (!have || preferred(h, best, alpha)) {
      best = h;
      have = true;
    }
  if (!have)
    for (const Hypothesis& h : active)
      if (!have || preferred(h, best, alpha)) {
        best = h;
        have = true;
      }
  // a wider beam must never score below the greedy baseline, so keep the
  // greedy rollout as a candidate of last resort
  Hypothesis greedy = greedy_rollout(state, src, settings, start_token, start_in_lm_stream);
  if (!have || preferred(greedy, best, alpha)) best = greedy;
  return best.toks;
}

double language_accuracy(const std::vector<std::vector<int>>& hypotheses,
                         const std::vector<int>& intended_languages,
                         const VocabLayout& layout) {
  if (hypotheses.size() != intended_languages.size())
    throw std::invalid_argument("language_accuracy: " +
                                std::to_string(hypotheses.size()) + " hypotheses vs " +
                                std::to_string(intended_languages.size()) + " languages");
  if (hypotheses.empty()) throw std::invalid_argument("language_accuracy: empty input");
  int on_target = 0;
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    int in_block = 0, content = 0;
    for (int tok : hypotheses[s]) {
      const int lang = layout.token_language(tok);
      if (lang < 0) continue;  // reserved ids and tags belong to no language
      ++content;
      if (lang == intended_languages[s]) ++in_block;
    }
    if (content > 0 && 2 * in_block > content) ++on_target;
  }
  return static_cast<double>(on_target) / static_cast<double>(hypotheses.size());
}

}  // namespace lmmt
