// Go/no-go acceptance checks for the workbench. Each criterion prints one
// verdict line of the form "criterion N PASS: <name>" (or FAIL), preceded by
// indented measurement lines so a failing run can be diagnosed from the log
// alone. Pass --only N to run a single criterion. Exit code 0 iff all pass.
//
// Thresholds are pinned here on purpose: loosening them is a spec change, not
// a tuning knob.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lmmt/harness.hpp"
#include "lmmt/rng.hpp"
#include "support.hpp"

using namespace lmmt;

namespace {

constexpr double kOpFdStep = 1e-3;
constexpr double kOpFdTol = 1e-3;
constexpr double kOpFdFloor = 1.0;
constexpr double kEndFdStep = 3e-3;
constexpr double kEndFdTol = 1e-2;
constexpr double kEndFdFloor = 0.1;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n == 0) return std::nan("");
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

bool rows_identical(const Tensor& a, const Tensor& b, int row_begin, int row_end) {
  if (row_end <= row_begin) return true;
  return std::memcmp(a.values().data() + static_cast<size_t>(row_begin) * a.cols(),
                     b.values().data() + static_cast<size_t>(row_begin) * b.cols(),
                     sizeof(float) * static_cast<size_t>(row_end - row_begin) * a.cols()) == 0;
}

ModelConfig small_config(const std::string& variant, int layers, int d, int d_ff, int heads,
                         int vocab) {
  ModelConfig c;
  c.variant = parse_variant(variant);
  c.vocab_size = vocab;
  c.d = d;
  c.d_ff = d_ff;
  c.layers = layers;
  c.heads = heads;
  c.dropout = 0.0f;
  c.label_smoothing = 0.1f;
  return c;
}

// ---------------------------------------------------------------------------
// criterion 1: masks against a direct predicate
// ---------------------------------------------------------------------------

bool criterion_masks(std::ostream& log) {
  int checked = 0, wrong = 0;
  for (int s = 1; s <= 8; ++s)
    for (int t = 1; t <= 8; ++t) {
      const BoolMatrix enc = build_mask({MaskKind::EncSelf, s, t});
      const BoolMatrix dec = build_mask({MaskKind::DecSelf, s, t});
      const BoolMatrix cross = build_mask({MaskKind::Cross, s, t});
      const BoolMatrix prefix = build_mask({MaskKind::Prefix, s, t});
      const BoolMatrix causal = build_mask({MaskKind::Causal, s, t});
      if (enc.rows != s || enc.cols != s || dec.rows != t || dec.cols != t ||
          cross.rows != t || cross.cols != s || prefix.rows != s + t ||
          prefix.cols != s + t || causal.rows != s + t || causal.cols != s + t) {
        ++wrong;
        continue;
      }
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j) wrong += enc.at(i, j) != 1;
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j) wrong += dec.at(i, j) != (j <= i ? 1 : 0);
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < s; ++j) wrong += cross.at(i, j) != 1;
      for (int i = 0; i < s + t; ++i)
        for (int j = 0; j < s + t; ++j) {
          wrong += prefix.at(i, j) != ((j < s || j <= i) ? 1 : 0);
          wrong += causal.at(i, j) != (j <= i ? 1 : 0);
        }
      // the prefix mask decomposes into the three encoder-decoder masks plus
      // an all-zero source-to-target block
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j) wrong += prefix.at(i, j) != enc.at(i, j);
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < s; ++j) wrong += prefix.at(s + i, j) != cross.at(i, j);
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j) wrong += prefix.at(s + i, s + j) != dec.at(i, j);
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < t; ++j) wrong += prefix.at(i, s + j) != 0;
      ++checked;
    }
  log << "  mask grids checked: " << checked << " of 64, mismatched entries: " << wrong
      << "\n";
  return checked == 64 && wrong == 0;
}

// ---------------------------------------------------------------------------
// criterion 2: perturbation audit of the realized visibility
// ---------------------------------------------------------------------------

Tensor run_forward(ModelState& state, const std::vector<int>& src,
                   const std::vector<int>& tgt) {
  const ModelVariant v = state.config.variant;
  if (v.family == Family::EncDec) return forward_encdec(nullptr, state, src, tgt);
  if (v.family == Family::PrefixLM && v.top_only)
    return forward_prefixlm_toponly(nullptr, state, src, tgt);
  return forward_lm(nullptr, state, src, tgt,
                    v.family == Family::PrefixLM ? MaskKind::Prefix : MaskKind::Causal);
}

bool criterion_visibility(std::ostream& log) {
  const VocabLayout layout = support::tiny_layout();
  const std::vector<int> src{5, 6, 7, 8, 9};        // first-language block
  const std::vector<int> tgt{13, 14, 15, kEosId};   // second-language block
  const int nx = static_cast<int>(src.size());
  const int ny = static_cast<int>(tgt.size());

  struct Subject {
    std::string label;
    ModelConfig config;
  };
  std::vector<Subject> subjects;
  for (const char* name : {"encdec", "prefixlm", "prefixlm_top", "causallm", "causallm_tgt"})
    subjects.push_back({name, small_config(name, 2, 16, 32, 4, layout.vocab_size())});
  {
    ModelConfig untied = small_config("prefixlm_top", 2, 16, 32, 4, layout.vocab_size());
    untied.tie_lm_stacks = false;
    subjects.push_back({"prefixlm_top/untied", untied});
  }

  bool all_ok = true;
  uint64_t seed = 31;
  for (Subject& sub : subjects) {
    ModelState state = init_model(sub.config, seed++);
    const Tensor base = run_forward(state, src, tgt);
    const bool merged = base.rows() == nx + ny;  // one row per concatenation position
    const bool causal_family = sub.config.variant.family == Family::CausalLM;
    int leaks = 0, dead_sources = 0;

    // a changed source token must leave strictly earlier rows alone under the
    // causal mask, and must reach the target rows whenever it is visible
    for (int j = 0; j < nx; ++j) {
      std::vector<int> poked = src;
      poked[static_cast<size_t>(j)] = 5 + (src[static_cast<size_t>(j)] - 5 + 3) % 8;
      const Tensor after = run_forward(state, poked, tgt);
      if (causal_family && merged) leaks += !rows_identical(base, after, 0, j);
      if (!causal_family) {
        const int tgt_begin = merged ? nx : 0;
        dead_sources += rows_identical(base, after, tgt_begin, base.rows());
      }
    }

    // a changed target token enters as the decoder input one row after the
    // start token, or as merged-stream input at row nx + j; every row before
    // its input row must be bit-identical
    for (int j = 0; j + 1 < ny; ++j) {
      std::vector<int> poked = tgt;
      poked[static_cast<size_t>(j)] = 13 + (tgt[static_cast<size_t>(j)] - 13 + 3) % 8;
      const Tensor after = run_forward(state, src, poked);
      const int input_row = (merged ? nx : 1) + j;
      leaks += !rows_identical(base, after, 0, input_row);
    }

    // the final target token is label-only for the two-stream variants and
    // must move nothing; the merged stream carries it as its last input row,
    // so only that row may move
    {
      std::vector<int> poked = tgt;
      poked.back() = 13;
      const Tensor after = run_forward(state, src, poked);
      const int frozen_end = merged ? base.rows() - 1 : base.rows();
      leaks += !rows_identical(base, after, 0, frozen_end);
    }

    log << "  " << sub.label << ": rows=" << base.rows() << " leaks=" << leaks
        << " dead_sources=" << dead_sources << "\n";
    all_ok = all_ok && leaks == 0 && dead_sources == 0;
  }
  return all_ok;
}

// ---------------------------------------------------------------------------
// criterion 3: top-only two-pass forward vs the merged-attention reference
// ---------------------------------------------------------------------------

bool criterion_toponly(std::ostream& log) {
  RngStream rng(2024, "acceptance/toponly");
  double worst = 0.0;
  int checked = 0;
  for (int i = 0; i < 20; ++i) {
    ModelConfig c = small_config("prefixlm_top", 2, 16, 32, 4, 21);
    c.tie_lm_stacks = (i % 2 == 0);
    ModelState state = init_model(c, 100 + static_cast<uint64_t>(i));

    std::vector<int> src, tgt;
    const int sx = 2 + static_cast<int>(rng.next_below(5));
    const int sy = 1 + static_cast<int>(rng.next_below(4));
    for (int k = 0; k < sx; ++k) src.push_back(5 + static_cast<int>(rng.next_below(8)));
    for (int k = 0; k < sy; ++k) tgt.push_back(13 + static_cast<int>(rng.next_below(8)));
    tgt.push_back(kEosId);

    const Tensor logits = forward_prefixlm_toponly(nullptr, state, src, tgt);
    const support::Mat ref =
        support::ref_merged_encdec_logits(state, support::make_pair(src, tgt));
    worst = std::max(worst, support::max_abs_diff(support::to_mat(logits), ref));
    ++checked;
  }
  log << "  inputs checked: " << checked << ", worst |logit diff|: " << worst << "\n";
  return checked == 20 && worst < 1e-5;
}

// ---------------------------------------------------------------------------
// criterion 4: finite-difference gradient checks
// ---------------------------------------------------------------------------

bool criterion_gradients(std::ostream& log) {
  using support::every_element;
  using support::fd_compare;
  using support::reduction_weights;
  using support::weighted_scalar;

  double worst_op = 0.0;
  auto op_check = [&](const char* label, const std::function<Tensor(Tape*)>& make,
                      Tensor param) {
    const support::FdReport rep =
        fd_compare(make, param, every_element(param), kOpFdStep, kOpFdFloor);
    worst_op = std::max(worst_op, rep.max_rel);
    if (rep.max_rel >= kOpFdTol)
      log << "  op " << label << " rel gap " << rep.max_rel << " at element "
          << rep.worst_index << "\n";
    return rep.max_rel < kOpFdTol;
  };

  bool ok = true;
  {
    Tensor a(3, 4), b(4, 2);
    support::fill_normal(a, 51, "a");
    support::fill_normal(b, 51, "b");
    ok &= op_check("matmul/a", [&](Tape* t) { return ops::sum(t, ops::matmul(t, a, b)); }, a);
    auto [wr, wc] = reduction_weights(3, 2, 51);
    ok &= op_check(
        "matmul/b", [&](Tape* t) { return weighted_scalar(t, ops::matmul(t, a, b), wr, wc); },
        b);
  }
  {
    Tensor x(4, 5), y(4, 5), bias(1, 5);
    support::fill_normal(x, 52, "x");
    support::fill_normal(y, 52, "y");
    support::fill_normal(bias, 52, "bias");
    auto [wr, wc] = reduction_weights(4, 5, 52);
    auto chain = [&](Tape* t) {
      Tensor s = ops::add(t, x, y);
      s = ops::add_row_bias(t, s, bias);
      s = ops::scale(t, s, 1.7f);
      s = ops::relu(t, s);
      return weighted_scalar(t, s, wr, wc);
    };
    ok &= op_check("add/x", chain, x);
    ok &= op_check("add/y", chain, y);
    ok &= op_check("add_row_bias/bias", chain, bias);
  }
  {
    Tensor logits(3, 5);
    support::fill_normal(logits, 53, "logits");
    BoolMatrix mask(3, 5, 1);
    mask.at(0, 4) = 0;
    mask.at(2, 0) = mask.at(2, 1) = 0;
    auto [wr, wc] = reduction_weights(3, 5, 53);
    ok &= op_check(
        "softmax_masked",
        [&](Tape* t) { return weighted_scalar(t, ops::softmax_masked(t, logits, mask), wr, wc); },
        logits);
  }
  {
    Tensor x(2, 8), gain(1, 8), bias(1, 8);
    support::fill_normal(x, 54, "x");
    support::fill_normal(gain, 54, "gain");
    support::fill_normal(bias, 54, "bias");
    auto [wr, wc] = reduction_weights(2, 8, 54);
    auto make = [&](Tape* t) {
      return weighted_scalar(t, ops::layer_norm(t, x, gain, bias), wr, wc);
    };
    ok &= op_check("layer_norm/x", make, x);
    ok &= op_check("layer_norm/gain", make, gain);
    ok &= op_check("layer_norm/bias", make, bias);
  }
  {
    Tensor x(5, 7);
    support::fill_normal(x, 55, "x");
    auto [wr, wc] = reduction_weights(5, 7, 55);
    ok &= op_check(
        "dropout",
        [&](Tape* t) {
          RngStream rng(55, "drop");  // fixed stream so every evaluation sees one mask
          return weighted_scalar(t, ops::dropout(t, x, 0.3f, rng, true), wr, wc);
        },
        x);
  }
  {
    Tensor table(6, 4);
    support::fill_normal(table, 56, "table");
    const std::vector<int> ids{0, 2, 5, 2};  // repeat to exercise the scatter-add
    auto [wr, wc] = reduction_weights(4, 4, 56);
    ok &= op_check(
        "embedding",
        [&](Tape* t) { return weighted_scalar(t, ops::embedding(t, table, ids), wr, wc); },
        table);
  }
  {
    Tensor logits(4, 6);
    support::fill_normal(logits, 57, "logits");
    ok &= op_check(
        "cross_entropy",
        [&](Tape* t) {
          return ops::cross_entropy_label_smoothed(t, logits, {2, kPadId, 0, 5}, 0.1f, kPadId);
        },
        logits);
  }
  {
    Tensor a(2, 3), b(3, 3);
    support::fill_normal(a, 58, "a");
    support::fill_normal(b, 58, "b");
    auto [wr, wc] = reduction_weights(3, 3, 58);
    auto make = [&](Tape* t) {
      return weighted_scalar(t, ops::slice_rows(t, ops::concat_rows(t, a, b), 1, 4), wr, wc);
    };
    ok &= op_check("concat_slice/a", make, a);
    ok &= op_check("concat_slice/b", make, b);
  }
  log << "  per-op worst rel gap: " << worst_op << " (tol " << kOpFdTol << ")\n";

  // end to end through every variant at one layer
  const std::vector<SequencePair> batch{support::make_pair({4, 5, 6}, {7, 8, kEosId}),
                                        support::make_pair({9, 10}, {11, kEosId})};
  double worst_end = 0.0;
  for (const char* name : {"encdec", "prefixlm", "prefixlm_top", "causallm", "causallm_tgt"}) {
    ModelState state = init_model(small_config(name, 1, 8, 16, 2, 16), 60);
    auto make = [&](Tape* t) {
      ForwardResult fwd = forward_batch(t, state, batch);
      return training_loss(t, state, fwd);
    };
    int checked = 0;
    for (auto& [pname, tensor] : named_parameters(state)) {
      if (pname != "embedding" && pname != "out_w" &&
          pname.find("wq") == std::string::npos &&
          pname.find("ffn.w1") == std::string::npos &&
          pname.find("norm_self.gain") == std::string::npos)
        continue;
      const auto idx = support::sampled_elements(tensor, 5, 60, "fd/" + pname);
      const support::FdReport rep = fd_compare(make, tensor, idx, kEndFdStep, kEndFdFloor);
      checked += rep.checked;
      worst_end = std::max(worst_end, rep.max_rel);
      if (rep.max_rel >= kEndFdTol) {
        log << "  " << name << " " << pname << " rel gap " << rep.max_rel << "\n";
        ok = false;
      }
    }
    ok &= checked >= 20;
  }
  log << "  end-to-end worst rel gap: " << worst_end << " (tol " << kEndFdTol << ")\n";
  return ok;
}

// ---------------------------------------------------------------------------
// criterion 5: parameter counting
// ---------------------------------------------------------------------------

bool criterion_params(std::ostream& log) {
  // independent tally from the shape list
  auto attn = [](int64_t d) { return 4 * (d * d + d); };
  auto ffn = [](int64_t d, int64_t f) { return 2 * d * f + f + d; };
  auto norm = [](int64_t d) { return 2 * d; };
  const auto self_layer = [&](int64_t d, int64_t f) { return attn(d) + ffn(d, f) + 2 * norm(d); };
  const auto cross_layer = [&](int64_t d, int64_t f) {
    return 2 * attn(d) + ffn(d, f) + 3 * norm(d);
  };

  bool ok = true;
  const int d = 8, f = 32;
  ok &= param_count(small_config("encdec", 2, d, f, 2, 16)) ==
        2 * (self_layer(d, f) + cross_layer(d, f));
  ok &= param_count(small_config("prefixlm", 3, d, f, 2, 16)) == 3 * self_layer(d, f);
  ok &= param_count(small_config("causallm", 3, d, f, 2, 16)) == 3 * self_layer(d, f);
  {
    ModelConfig untied = small_config("prefixlm_top", 2, d, f, 2, 16);
    untied.tie_lm_stacks = false;
    ok &= param_count(untied) == 4 * self_layer(d, f);
  }
  {
    ModelConfig pre = small_config("prefixlm", 2, d, f, 2, 16);
    pre.norm = NormPlacement::PreNorm;
    ok &= param_count(pre) == 2 * self_layer(d, f) + norm(d);  // plus the final norm
  }
  {
    // the counter must also agree with the tensors actually allocated
    ModelConfig enc = small_config("encdec", 2, d, f, 2, 16);
    ModelState state = init_model(enc, 71);
    int64_t live = 0;
    for (auto& [name, t] : named_parameters(state))
      if (name != "embedding" && name != "out_w" && name != "out_b") live += t.size();
    ok &= live == param_count(enc);
    log << "  toy enc-dec: counted " << param_count(enc) << ", live tensors " << live << "\n";
  }

  ModelConfig big = big_preset();
  big.variant = parse_variant("encdec");
  big.layers = 14;
  big.vocab_size = 32000;  // the count excludes embeddings; any legal vocab does
  const int64_t n = param_count(big);
  const double rel = std::abs(static_cast<double>(n) - 412e6) / 412e6;
  log << "  14-layer big enc-dec: " << n << " params, rel gap to 412M: " << rel << "\n";
  return ok && rel < 0.01;
}

// ---------------------------------------------------------------------------
// criterion 6: power-law recovery
// ---------------------------------------------------------------------------

bool criterion_scaling(std::ostream& log) {
  const double n0 = 1000.0, alpha = 2.0, p = 0.35, l_inf = 1.7;
  const std::vector<double> ns{1e3, 1e4, 1e5, 1e6};
  // fixed draws standing in for Gaussian noise at sigma = 0.01
  const std::vector<double> noise{0.0113, -0.0068, 0.0041, -0.0125};

  auto build = [&](bool noisy) {
    std::vector<ScalingObservation> obs;
    for (size_t i = 0; i < ns.size(); ++i)
      obs.push_back({"gen", "all", ns[i],
                     alpha * std::pow(n0 / ns[i], p) + l_inf + (noisy ? noise[i] : 0.0)});
    return obs;
  };

  const PowerLawFit clean = fit_power_law(build(false), n0);
  log << "  noiseless fit: alpha=" << clean.alpha << " p=" << clean.p
      << " l_inf=" << clean.l_inf << " converged=" << clean.converged << "\n";
  const bool clean_ok = clean.converged && std::abs(clean.alpha - alpha) < 1e-3 &&
                        std::abs(clean.p - p) < 1e-3 && std::abs(clean.l_inf - l_inf) < 1e-3;

  const PowerLawFit noisy = fit_power_law(build(true), n0);
  log << "  noisy fit:     alpha=" << noisy.alpha << " p=" << noisy.p
      << " l_inf=" << noisy.l_inf << "\n";
  const bool noisy_ok = noisy.converged && std::abs(noisy.alpha - alpha) < 0.05 &&
                        std::abs(noisy.p - p) < 0.05 && std::abs(noisy.l_inf - l_inf) < 0.05;
  return clean_ok && noisy_ok;
}

// ---------------------------------------------------------------------------
// criterion 7: compute cost under the parameter-matched protocol
// ---------------------------------------------------------------------------

// At equal (d, d_ff, L) the cost ordering flips with sequence length, so the
// comparison that reflects how the families are actually raced is at matched
// parameter count: the encoder-decoder anchor against the deep and wide LMs
// produced by the aligner. The LM must never come out cheaper.

bool criterion_flops(std::ostream& log) {
  const std::vector<std::pair<int, int>> lengths{{1, 1},   {2, 3},   {4, 8},  {8, 8},
                                                 {16, 12}, {32, 32}, {64, 48}, {128, 96}};
  double min_ratio = 1e300;
  bool ok = true;
  for (auto [d, f] : std::vector<std::pair<int, int>>{{32, 128}, {64, 256}})
    for (int layers : {1, 2, 4, 6, 8}) {
      ModelConfig anchor = small_config("encdec", layers, d, f, 4, 69);
      const AlignedConfigs aligned = align_configs(anchor);
      for (auto [sx, sy] : lengths) {
        const int64_t base = flops_estimate(anchor, sx, sy);
        for (const ModelConfig& lm : {aligned.deep, aligned.wide}) {
          const int64_t cost = flops_estimate(lm, sx, sy);
          min_ratio = std::min(min_ratio, static_cast<double>(cost) / base);
          if (cost <= base) {
            log << "  violated at d=" << d << " L=" << layers << " lm_layers=" << lm.layers
                << " d_ff=" << lm.d_ff << " lens=(" << sx << "," << sy << "): " << cost
                << " <= " << base << "\n";
            ok = false;
          }
        }
      }
    }
  log << "  min LM/enc-dec flops ratio over the grid: " << min_ratio << "\n";
  return ok;
}

// ---------------------------------------------------------------------------
// criteria 8 and 9: preset trend runs
// ---------------------------------------------------------------------------

ExperimentPlan preset_named(const std::string& name) {
  for (auto& [pname, plan] : preset_plans())
    if (pname == name) return plan;
  throw std::runtime_error("no preset named " + name);
}

// median over seeds of dev-set log-perplexity for one cell family
double median_ppl(const std::vector<MetricsRow>& rows, const std::string& variant,
                  const std::string& alignment, int anchor, const std::string& split) {
  std::vector<double> vals;
  for (const MetricsRow& r : rows)
    if (r.variant == variant && r.alignment == alignment && r.anchor_layers == anchor &&
        r.metrics.split == split)
      vals.push_back(r.metrics.ppl);
  return median(vals);
}

bool criterion_bilingual(std::ostream& log) {
  ExperimentPlan plan = preset_named("bilingual_scaling");
  plan.output_dir = support::fresh_dir("acceptance_bilingual");
  const RunOutcome out = run_plan(plan);
  log << "  cells run: " << out.cells_run << ", failed: " << out.cells_failed << "\n";
  if (out.cells_failed > 0) {
    for (const std::string& f : out.failures) log << "  failure: " << f << "\n";
    return false;
  }
  const std::vector<MetricsRow> rows = read_rows_csv(out.results_dir + "/rows.csv");

  const int lo = plan.grid.anchor_layers.front();
  const int hi = plan.grid.anchor_layers.back();
  const std::vector<std::string> variants{"encdec", "prefixlm", "prefixlm_top", "causallm",
                                          "causallm_tgt"};
  // capacity-matched representative per variant: the anchor itself for the
  // encoder-decoder, the depth-aligned stack for the LMs
  auto rep = [&](const std::string& v, int anchor) {
    return median_ppl(rows, v, v == "encdec" ? "anchor" : "deep", anchor, "dev");
  };

  bool ok = true;

  const double prefix_lo = rep("prefixlm", lo);
  const double causal_lo = rep("causallm", lo);
  log << "  dev ppl at anchor " << lo << ": prefixlm=" << prefix_lo
      << " causallm=" << causal_lo << "\n";
  ok &= prefix_lo <= causal_lo;

  double gap_lo = 0.0, gap_hi = 0.0;
  for (int anchor : {lo, hi}) {
    double best = 1e300, worst = -1e300;
    std::ostringstream line;
    for (const std::string& v : variants) {
      const double m = rep(v, anchor);
      best = std::min(best, m);
      worst = std::max(worst, m);
      line << " " << v << "=" << m;
    }
    (anchor == lo ? gap_lo : gap_hi) = worst - best;
    log << "  anchor " << anchor << ":" << line.str() << "\n";
  }
  log << "  best-to-worst ppl gap: " << gap_lo << " at anchor " << lo << ", " << gap_hi
      << " at anchor " << hi << "\n";
  ok &= gap_hi < gap_lo;

  // pooled across scale points: the source-side loss is the only difference
  // between these two, so target perplexity must not get worse without it
  std::vector<double> tgt_only, full;
  for (const MetricsRow& r : rows)
    if (r.alignment == "deep" && r.metrics.split == "dev") {
      if (r.variant == "causallm_tgt") tgt_only.push_back(r.metrics.ppl);
      if (r.variant == "causallm") full.push_back(r.metrics.ppl);
    }
  const double med_tgt = median(tgt_only), med_full = median(full);
  log << "  pooled dev ppl: causallm_tgt=" << med_tgt << " causallm=" << med_full << "\n";
  ok &= med_tgt <= med_full;

  return ok;
}

bool criterion_zero_shot(std::ostream& log) {
  ExperimentPlan plan = preset_named("zero_shot");
  plan.output_dir = support::fresh_dir("acceptance_zero_shot");
  const RunOutcome out = run_plan(plan);
  log << "  cells run: " << out.cells_run << ", failed: " << out.cells_failed << "\n";
  if (out.cells_failed > 0) {
    for (const std::string& f : out.failures) log << "  failure: " << f << "\n";
    return false;
  }
  const std::vector<MetricsRow> rows = read_rows_csv(out.results_dir + "/rows.csv");

  std::vector<std::string> held, supervised;
  for (const DirectionCfg& dc : plan.data.directions) {
    const std::string name = "l" + std::to_string(dc.src) + "-l" + std::to_string(dc.tgt);
    (dc.train_pairs == 0 ? held : supervised).push_back(name);
  }

  bool ok = true;
  std::map<std::string, double> held_median;
  for (const std::string& variant : {std::string("prefixlm"), std::string("causallm")}) {
    std::vector<double> pool;
    for (const MetricsRow& r : rows)
      if (r.variant == variant &&
          std::find(held.begin(), held.end(), r.metrics.direction) != held.end())
        pool.push_back(r.metrics.lang_acc);
    held_median[variant] = median(pool);
    log << "  " << variant << " held-out language accuracy median: " << held_median[variant]
        << " over " << pool.size() << " rows\n";

    for (const std::string& dir : supervised) {
      std::vector<double> accs;
      for (const MetricsRow& r : rows)
        if (r.variant == variant && r.metrics.direction == dir)
          accs.push_back(r.metrics.lang_acc);
      const double m = median(accs);
      if (m < 0.99) {
        log << "  " << variant << " supervised " << dir << " accuracy median " << m << "\n";
        ok = false;
      }
    }
  }
  ok &= held_median["prefixlm"] >= held_median["causallm"];
  return ok;
}

// ---------------------------------------------------------------------------
// criterion 10: rerun determinism
// ---------------------------------------------------------------------------

bool criterion_determinism(std::ostream& log) {
  ExperimentPlan plan;
  plan.name = "determinism_probe";
  plan.master_seed = 9;
  plan.output_dir = support::fresh_dir("acceptance_determinism");
  plan.data.languages = {{0, 8, 2, 4}, {1, 8, 2, 4}};
  plan.data.directions = {{0, 1, StructuralTransform::Reversal, 0, 48, 0, 8}};
  plan.data.tag.reset();
  plan.data.token_budget = 24;
  plan.grid.variants = {parse_variant("prefixlm")};
  plan.grid.anchor_layers = {1};
  plan.grid.d = 16;
  plan.grid.d_ff = 32;
  plan.grid.heads = 2;
  plan.grid.alignments = {"deep"};
  plan.train.steps = 12;
  plan.train.warmup = 4;
  plan.train.checkpoint_interval = 0;
  plan.eval.splits = {Split::Test};
  plan.eval.beam = 2;
  plan.eval.max_len = 8;
  plan.eval.decode_pairs = 4;

  auto slurp = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };

  const RunOutcome first = run_plan(plan);
  const std::string rows_a = slurp(first.results_dir + "/rows.csv");
  const RunOutcome second = run_plan(plan);
  const std::string rows_b = slurp(second.results_dir + "/rows.csv");
  log << "  rows.csv bytes: " << rows_a.size() << " first run, " << rows_b.size()
      << " second run\n";
  return first.cells_failed == 0 && second.cells_failed == 0 && !rows_a.empty() &&
         rows_a == rows_b;
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
      return 2;
    }
  }

  struct Criterion {
    int id;
    const char* name;
    std::function<bool(std::ostream&)> run;
  };
  const std::vector<Criterion> criteria{
      {1, "attention masks match the visibility predicate", criterion_masks},
      {2, "masked positions never influence protected logits", criterion_visibility},
      {3, "top-only forward equals the merged two-pass reference", criterion_toponly},
      {4, "analytic gradients match finite differences", criterion_gradients},
      {5, "parameter counts match the shape enumeration", criterion_params},
      {6, "power-law fits recover planted curves", criterion_scaling},
      {7, "parameter-matched LMs never cost fewer flops", criterion_flops},
      {8, "bilingual preset reproduces the scaling trends", criterion_bilingual},
      {9, "zero-shot preset keeps the prefix LM on target", criterion_zero_shot},
      {10, "identical plans rerun byte-identically", criterion_determinism},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (only != 0 && c.id != only) continue;
    std::ostringstream detail;
    bool pass = false;
    try {
      pass = c.run(detail);
    } catch (const std::exception& e) {
      detail << "  exception: " << e.what() << "\n";
    }
    std::cout << detail.str();
    std::cout << "criterion " << c.id << (pass ? " PASS: " : " FAIL: ") << c.name << "\n";
    std::cout.flush();
    if (!pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
