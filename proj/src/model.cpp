#include "lmmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lmmt {

std::string variant_name(const ModelVariant& v) {
  switch (v.family) {
    case Family::EncDec: return "encdec";
    case Family::PrefixLM: return v.top_only ? "prefixlm_top" : "prefixlm";
    case Family::CausalLM: return v.tgt_only ? "causallm_tgt" : "causallm";
  }
  return "?";
}

ModelVariant parse_variant(const std::string& name) {
  if (name == "encdec") return {Family::EncDec, false, false};
  if (name == "prefixlm") return {Family::PrefixLM, false, false};
  if (name == "prefixlm_top") return {Family::PrefixLM, true, false};
  if (name == "causallm") return {Family::CausalLM, false, false};
  if (name == "causallm_tgt") return {Family::CausalLM, false, true};
  throw std::invalid_argument("variant: unknown name '" + name +
                              "' (expected encdec, prefixlm, prefixlm_top, causallm or "
                              "causallm_tgt)");
}

void validate_variant(const ModelVariant& v) {
  if (v.top_only && v.family != Family::PrefixLM)
    throw std::invalid_argument("variant: top_only requires family prefixlm, got " +
                                std::string(v.family == Family::EncDec ? "encdec"
                                                                       : "causallm"));
  if (v.tgt_only && v.family != Family::CausalLM)
    throw std::invalid_argument("variant: tgt_only requires family causallm, got " +
                                std::string(v.family == Family::EncDec ? "encdec"
                                                                       : "prefixlm"));
}

ModelConfig base_preset() {
  ModelConfig c;
  c.d = 512;
  c.d_ff = 2048;
  c.heads = 8;
  return c;
}

ModelConfig big_preset() {
  ModelConfig c;
  c.d = 1024;
  c.d_ff = 4096;
  c.heads = 16;
  return c;
}

void validate_config(const ModelConfig& c) {
  validate_variant(c.variant);
  auto demand = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("config: " + msg);
  };
  demand(c.d >= 2 && c.d % 2 == 0, "d must be even and >= 2, got " + std::to_string(c.d));
  demand(c.d_ff >= 1, "d_ff must be >= 1, got " + std::to_string(c.d_ff));
  demand(c.layers >= 1, "layers must be >= 1, got " + std::to_string(c.layers));
  demand(c.heads >= 1 && c.d % c.heads == 0,
         "heads (" + std::to_string(c.heads) + ") must divide d (" + std::to_string(c.d) +
             ")");
  demand(c.vocab_size > kFirstTagId,
         "vocab_size must cover the reserved ids, got " + std::to_string(c.vocab_size));
  demand(c.dropout >= 0.0f && c.dropout < 1.0f, "dropout outside [0,1)");
  demand(c.label_smoothing >= 0.0f && c.label_smoothing < 1.0f,
         "label_smoothing outside [0,1)");
  if (!c.tie_lm_stacks)
    demand(c.variant.family == Family::PrefixLM && c.variant.top_only,
           "untied stacks are only meaningful for prefixlm_top");
}

namespace {

LayerParams make_layer(const ModelConfig& cfg, bool with_cross, uint64_t seed,
                       const std::string& prefix) {
  const int d = cfg.d, f = cfg.d_ff;
  auto weight = [&](const std::string& name, int r, int c) {
    Tensor t(r, c);
    RngStream rng(seed, "init/" + prefix + name);
    t.fill_glorot(rng);
    return t;
  };
  auto make_attn = [&](const std::string& p) {
    AttentionParams a;
    a.wq = weight(p + ".wq", d, d);
    a.bq = Tensor(1, d);
    a.wk = weight(p + ".wk", d, d);
    a.bk = Tensor(1, d);
    a.wv = weight(p + ".wv", d, d);
    a.bv = Tensor(1, d);
    a.wo = weight(p + ".wo", d, d);
    a.bo = Tensor(1, d);
    return a;
  };
  auto make_norm = [&](int dim) {
    NormParams n;
    n.gain = Tensor::full(1, dim, 1.0f);
    n.bias = Tensor(1, dim);
    return n;
  };
  LayerParams layer;
  layer.self_attn = make_attn("self");
  if (with_cross) {
    layer.cross_attn = make_attn("cross");
    layer.norm_cross = make_norm(d);
  }
  layer.ffn.w1 = weight("ffn.w1", d, f);
  layer.ffn.b1 = Tensor(1, f);
  layer.ffn.w2 = weight("ffn.w2", f, d);
  layer.ffn.b2 = Tensor(1, d);
  layer.norm_self = make_norm(d);
  layer.norm_ffn = make_norm(d);
  return layer;
}

void collect_attn(std::vector<std::pair<std::string, Tensor>>& out, const std::string& p,
                  const AttentionParams& a) {
  out.emplace_back(p + ".wq", a.wq);
  out.emplace_back(p + ".bq", a.bq);
  out.emplace_back(p + ".wk", a.wk);
  out.emplace_back(p + ".bk", a.bk);
  out.emplace_back(p + ".wv", a.wv);
  out.emplace_back(p + ".bv", a.bv);
  out.emplace_back(p + ".wo", a.wo);
  out.emplace_back(p + ".bo", a.bo);
}

void collect_layer(std::vector<std::pair<std::string, Tensor>>& out, const std::string& p,
                   const LayerParams& layer) {
  collect_attn(out, p + "self", layer.self_attn);
  if (layer.cross_attn) collect_attn(out, p + "cross", *layer.cross_attn);
  out.emplace_back(p + "ffn.w1", layer.ffn.w1);
  out.emplace_back(p + "ffn.b1", layer.ffn.b1);
  out.emplace_back(p + "ffn.w2", layer.ffn.w2);
  out.emplace_back(p + "ffn.b2", layer.ffn.b2);
  out.emplace_back(p + "norm_self.gain", layer.norm_self.gain);
  out.emplace_back(p + "norm_self.bias", layer.norm_self.bias);
  if (layer.norm_cross) {
    out.emplace_back(p + "norm_cross.gain", layer.norm_cross->gain);
    out.emplace_back(p + "norm_cross.bias", layer.norm_cross->bias);
  }
  out.emplace_back(p + "norm_ffn.gain", layer.norm_ffn.gain);
  out.emplace_back(p + "norm_ffn.bias", layer.norm_ffn.bias);
}

}  // namespace

ModelState init_model(const ModelConfig& config, uint64_t seed) {
  validate_config(config);
  ModelState state;
  state.config = config;
  const int d = config.d, v = config.vocab_size;

  state.embedding = Tensor(v, d);
  {
    RngStream rng(seed, "init/embedding");
    state.embedding.fill_normal(rng, 1.0f / std::sqrt(static_cast<float>(d)));
  }
  state.out_w = Tensor(d, v);
  {
    RngStream rng(seed, "init/out_w");
    state.out_w.fill_glorot(rng);
  }
  state.out_b = Tensor(1, v);

  const bool encdec = config.variant.family == Family::EncDec;
  const bool untied = !config.tie_lm_stacks;
  for (int l = 0; l < config.layers; ++l)
    state.stack.push_back(
        make_layer(config, false, seed, "stack." + std::to_string(l) + "."));
  if (encdec)
    for (int l = 0; l < config.layers; ++l)
      state.dec_stack.push_back(
          make_layer(config, true, seed, "dec." + std::to_string(l) + "."));
  else if (untied)
    for (int l = 0; l < config.layers; ++l)
      state.dec_stack.push_back(
          make_layer(config, false, seed, "dec." + std::to_string(l) + "."));

  if (config.norm == NormPlacement::PreNorm) {
    auto make_norm = [&]() {
      NormParams n;
      n.gain = Tensor::full(1, d, 1.0f);
      n.bias = Tensor(1, d);
      return n;
    };
    state.final_norm = make_norm();
    if (encdec || untied) state.dec_final_norm = make_norm();
  }
  return state;
}

std::vector<std::pair<std::string, Tensor>> named_parameters(ModelState& state) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", state.embedding);
  out.emplace_back("out_w", state.out_w);
  out.emplace_back("out_b", state.out_b);
  for (size_t l = 0; l < state.stack.size(); ++l)
    collect_layer(out, "stack." + std::to_string(l) + ".", state.stack[l]);
  for (size_t l = 0; l < state.dec_stack.size(); ++l)
    collect_layer(out, "dec." + std::to_string(l) + ".", state.dec_stack[l]);
  if (state.final_norm) {
    out.emplace_back("final_norm.gain", state.final_norm->gain);
    out.emplace_back("final_norm.bias", state.final_norm->bias);
  }
  if (state.dec_final_norm) {
    out.emplace_back("dec_final_norm.gain", state.dec_final_norm->gain);
    out.emplace_back("dec_final_norm.bias", state.dec_final_norm->bias);
  }
  return out;
}

void set_training_mode(ModelState& state, bool requires_grad) {
  for (auto& [name, t] : named_parameters(state)) t.set_requires_grad(requires_grad);
}

namespace {

struct PackedSide {
  std::vector<int> ids;
  std::vector<int> offsets;  // per pair begin; back() = total rows
  Tensor pos;
};

// input stream on the target side: [start, tgt[0..m-2]] (one input per label)
std::vector<int> decoder_input(const SequencePair& p) {
  std::vector<int> in;
  in.reserve(p.tgt.size());
  in.push_back(p.start_token);
  in.insert(in.end(), p.tgt.begin(), p.tgt.end() - 1);
  return in;
}

PackedSide pack_sources(std::span<const SequencePair> batch, int d) {
  PackedSide side;
  side.offsets.push_back(0);
  for (const SequencePair& p : batch) {
    side.ids.insert(side.ids.end(), p.src.begin(), p.src.end());
    side.offsets.push_back(static_cast<int>(side.ids.size()));
  }
  side.pos = Tensor(static_cast<int>(side.ids.size()), d);
  int row = 0;
  for (const SequencePair& p : batch) {
    Tensor pe = sinusoid_positions(0, static_cast<int>(p.src.size()), d);
    std::copy(pe.values().begin(), pe.values().end(),
              side.pos.values().begin() + static_cast<size_t>(row) * d);
    row += static_cast<int>(p.src.size());
  }
  return side;
}

PackedSide pack_targets(std::span<const SequencePair> batch, int d,
                        bool with_start_token) {
  PackedSide side;
  side.offsets.push_back(0);
  for (const SequencePair& p : batch) {
    if (with_start_token) {
      std::vector<int> in = decoder_input(p);
      side.ids.insert(side.ids.end(), in.begin(), in.end());
    } else {
      side.ids.insert(side.ids.end(), p.tgt.begin(), p.tgt.end());
    }
    side.offsets.push_back(static_cast<int>(side.ids.size()));
  }
  side.pos = Tensor(static_cast<int>(side.ids.size()), d);
  int row = 0;
  for (const SequencePair& p : batch) {
    const int n = static_cast<int>(p.tgt.size());
    Tensor pe = sinusoid_positions(0, n, d);
    std::copy(pe.values().begin(), pe.values().end(),
              side.pos.values().begin() + static_cast<size_t>(row) * d);
    row += n;
  }
  return side;
}

Tensor embed_with_positions(Tape* tape, ModelState& state, const std::vector<int>& ids,
                            const Tensor& pos) {
  Tensor e = ops::embedding(tape, state.embedding, ids);
  e = ops::scale(tape, e, std::sqrt(static_cast<float>(state.config.d)));
  return ops::add(tape, e, pos);
}

Tensor project_out(Tape* tape, ModelState& state, const Tensor& x) {
  return ops::add_row_bias(tape, ops::matmul(tape, x, state.out_w), state.out_b);
}

void check_batch(std::span<const SequencePair> batch) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  for (size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].src.empty())
      throw std::invalid_argument("forward: pair " + std::to_string(i) +
                                  " has an empty source");
    if (batch[i].tgt.empty())
      throw std::invalid_argument("forward: pair " + std::to_string(i) +
                                  " has an empty target");
  }
}

// encoder pass shared by EncDec and the TopOnly first pass
Tensor encode_sources(Tape* tape, ModelState& state, std::span<const SequencePair> batch,
                      const PackedSide& enc, const DropoutSpec& drop) {
  const int n = static_cast<int>(batch.size());
  std::vector<BoolMatrix> masks;
  masks.reserve(static_cast<size_t>(n));
  std::vector<AttentionSegment> segs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int len = enc.offsets[i + 1] - enc.offsets[i];
    masks.emplace_back(build_mask({MaskKind::EncSelf, len, 0}));
    segs[i] = {enc.offsets[i], enc.offsets[i + 1],
               {{enc.offsets[i], enc.offsets[i + 1]}},
               &masks[i]};
  }
  Tensor x = embed_with_positions(tape, state, enc.ids, enc.pos);
  LayerInputs in;
  in.self_segments = &segs;
  for (LayerParams& layer : state.stack)
    x = transformer_layer(tape, x, layer, state.config.heads, state.config.norm, in, drop);
  if (state.final_norm)
    x = ops::layer_norm(tape, x, state.final_norm->gain, state.final_norm->bias);
  return x;
}

ForwardResult forward_encdec_batch(Tape* tape, ModelState& state,
                                   std::span<const SequencePair> batch,
                                   const DropoutSpec& drop) {
  const int n = static_cast<int>(batch.size());
  PackedSide enc = pack_sources(batch, state.config.d);
  Tensor memory = encode_sources(tape, state, batch, enc, drop);

  PackedSide dec = pack_targets(batch, state.config.d, true);
  std::vector<BoolMatrix> self_masks, cross_masks;
  self_masks.reserve(static_cast<size_t>(n));
  cross_masks.reserve(static_cast<size_t>(n));
  std::vector<AttentionSegment> self_segs(static_cast<size_t>(n)),
      cross_segs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int ny = dec.offsets[i + 1] - dec.offsets[i];
    const int nx = enc.offsets[i + 1] - enc.offsets[i];
    self_masks.emplace_back(build_mask({MaskKind::DecSelf, 0, ny}));
    cross_masks.emplace_back(build_mask({MaskKind::Cross, nx, ny}));
    self_segs[i] = {dec.offsets[i], dec.offsets[i + 1],
                    {{dec.offsets[i], dec.offsets[i + 1]}},
                    &self_masks[i]};
    cross_segs[i] = {dec.offsets[i], dec.offsets[i + 1],
                     {{enc.offsets[i], enc.offsets[i + 1]}},
                     &cross_masks[i]};
  }

  Tensor y = embed_with_positions(tape, state, dec.ids, dec.pos);
  LayerInputs in;
  in.self_segments = &self_segs;
  in.cross_context = &memory;
  in.cross_segments = &cross_segs;
  for (LayerParams& layer : state.dec_stack)
    y = transformer_layer(tape, y, layer, state.config.heads, state.config.norm, in, drop);
  if (state.dec_final_norm)
    y = ops::layer_norm(tape, y, state.dec_final_norm->gain, state.dec_final_norm->bias);

  ForwardResult out;
  out.logits = project_out(tape, state, y);
  out.tgt_labels.assign(static_cast<size_t>(dec.offsets[n]), kPadId);
  out.src_labels.assign(static_cast<size_t>(dec.offsets[n]), kPadId);
  for (int i = 0; i < n; ++i) {
    const auto& tgt = batch[i].tgt;
    for (size_t k = 0; k < tgt.size(); ++k)
      out.tgt_labels[static_cast<size_t>(dec.offsets[i]) + k] = tgt[k];
    out.tgt_tokens += static_cast<int>(tgt.size());
    out.pair_rows.emplace_back(dec.offsets[i], dec.offsets[i + 1]);
  }
  return out;
}

ForwardResult forward_lm_batch(Tape* tape, ModelState& state,
                               std::span<const SequencePair> batch, MaskKind kind,
                               const DropoutSpec& drop) {
  const int n = static_cast<int>(batch.size());
  const int d = state.config.d;
  std::vector<int> ids;
  std::vector<int> offsets{0};
  std::vector<int> src_lens, y_lens;
  for (const SequencePair& p : batch) {
    ids.insert(ids.end(), p.src.begin(), p.src.end());
    if (p.start_in_lm_stream) {
      std::vector<int> in = decoder_input(p);
      ids.insert(ids.end(), in.begin(), in.end());
      y_lens.push_back(static_cast<int>(in.size()));
    } else {
      ids.insert(ids.end(), p.tgt.begin(), p.tgt.end());
      y_lens.push_back(static_cast<int>(p.tgt.size()));
    }
    src_lens.push_back(static_cast<int>(p.src.size()));
    offsets.push_back(static_cast<int>(ids.size()));
  }
  Tensor pos(static_cast<int>(ids.size()), d);
  for (int i = 0; i < n; ++i) {
    Tensor pe = positions(src_lens[i], y_lens[i], d, true);
    std::copy(pe.values().begin(), pe.values().end(),
              pos.values().begin() + static_cast<size_t>(offsets[i]) * d);
  }

  std::vector<BoolMatrix> masks;
  masks.reserve(static_cast<size_t>(n));
  std::vector<AttentionSegment> segs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    masks.emplace_back(build_mask({kind, src_lens[i], y_lens[i]}));
    segs[i] = {offsets[i], offsets[i + 1], {{offsets[i], offsets[i + 1]}}, &masks[i]};
  }

  Tensor x = embed_with_positions(tape, state, ids, pos);
  LayerInputs in;
  in.self_segments = &segs;
  for (LayerParams& layer : state.stack)
    x = transformer_layer(tape, x, layer, state.config.heads, state.config.norm, in, drop);
  if (state.final_norm)
    x = ops::layer_norm(tape, x, state.final_norm->gain, state.final_norm->bias);

  ForwardResult out;
  out.logits = project_out(tape, state, x);
  out.tgt_labels.assign(static_cast<size_t>(offsets[n]), kPadId);
  out.src_labels.assign(static_cast<size_t>(offsets[n]), kPadId);
  const bool want_src = state.config.variant.family == Family::CausalLM &&
                        !state.config.variant.tgt_only;
  for (int i = 0; i < n; ++i) {
    const SequencePair& p = batch[i];
    // with the start token in the stream its row predicts the first label;
    // otherwise the last source row does
    const int first_label_row = offsets[i] + src_lens[i] - (p.start_in_lm_stream ? 0 : 1);
    for (size_t k = 0; k < p.tgt.size(); ++k)
      out.tgt_labels[static_cast<size_t>(first_label_row) + k] = p.tgt[k];
    out.tgt_tokens += static_cast<int>(p.tgt.size());
    if (want_src) {
      for (int t = 0; t + 1 < src_lens[i]; ++t)
        out.src_labels[static_cast<size_t>(offsets[i]) + t] = p.src[static_cast<size_t>(t) + 1];
      out.src_tokens += src_lens[i] - 1;
    }
    out.pair_rows.emplace_back(offsets[i], offsets[i + 1]);
  }
  return out;
}

ForwardResult forward_toponly_batch(Tape* tape, ModelState& state,
                                    std::span<const SequencePair> batch,
                                    const DropoutSpec& drop) {
  const int n = static_cast<int>(batch.size());
  PackedSide enc = pack_sources(batch, state.config.d);
  Tensor memory = encode_sources(tape, state, batch, enc, drop);
  const int n_mem = memory.rows();

  PackedSide dec = pack_targets(batch, state.config.d, true);
  std::vector<BoolMatrix> masks;
  masks.reserve(static_cast<size_t>(n));
  std::vector<AttentionSegment> segs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int nx = enc.offsets[i + 1] - enc.offsets[i];
    const int ny = dec.offsets[i + 1] - dec.offsets[i];
    // joint mask over [memory ; own causal prefix]
    BoolMatrix m(ny, nx + ny, 0);
    for (int r = 0; r < ny; ++r) {
      for (int c = 0; c < nx; ++c) m.at(r, c) = 1;
      for (int c = 0; c <= r; ++c) m.at(r, nx + c) = 1;
    }
    masks.push_back(std::move(m));
    segs[i] = {dec.offsets[i],
               dec.offsets[i + 1],
               {{enc.offsets[i], enc.offsets[i + 1]},
                {n_mem + dec.offsets[i], n_mem + dec.offsets[i + 1]}},
               &masks[i]};
  }

  Tensor y = embed_with_positions(tape, state, dec.ids, dec.pos);
  LayerInputs in;
  in.self_prefix = &memory;
  in.self_segments = &segs;
  std::vector<LayerParams>& pass2 =
      state.config.tie_lm_stacks ? state.stack : state.dec_stack;
  for (LayerParams& layer : pass2)
    y = transformer_layer(tape, y, layer, state.config.heads, state.config.norm, in, drop);
  const std::optional<NormParams>& fin =
      state.config.tie_lm_stacks ? state.final_norm : state.dec_final_norm;
  if (fin) y = ops::layer_norm(tape, y, fin->gain, fin->bias);

  ForwardResult out;
  out.logits = project_out(tape, state, y);
  out.tgt_labels.assign(static_cast<size_t>(dec.offsets[n]), kPadId);
  out.src_labels.assign(static_cast<size_t>(dec.offsets[n]), kPadId);
  for (int i = 0; i < n; ++i) {
    const auto& tgt = batch[i].tgt;
    for (size_t k = 0; k < tgt.size(); ++k)
      out.tgt_labels[static_cast<size_t>(dec.offsets[i]) + k] = tgt[k];
    out.tgt_tokens += static_cast<int>(tgt.size());
    out.pair_rows.emplace_back(dec.offsets[i], dec.offsets[i + 1]);
  }
  return out;
}

}  // namespace

ForwardResult forward_batch(Tape* tape, ModelState& state, std::span<const SequencePair> batch,
                            const DropoutSpec& dropout) {
  check_batch(batch);
  switch (state.config.variant.family) {
    case Family::EncDec:
      return forward_encdec_batch(tape, state, batch, dropout);
    case Family::PrefixLM:
      if (state.config.variant.top_only)
        return forward_toponly_batch(tape, state, batch, dropout);
      return forward_lm_batch(tape, state, batch, MaskKind::Prefix, dropout);
    case Family::CausalLM:
      return forward_lm_batch(tape, state, batch, MaskKind::Causal, dropout);
  }
  throw std::logic_error("forward_batch: unhandled family");
}

Tensor forward_encdec(Tape* tape, ModelState& state, const std::vector<int>& src,
                      const std::vector<int>& tgt, int start_token) {
  if (state.config.variant.family != Family::EncDec)
    throw std::invalid_argument("forward_encdec: model variant is " +
                                variant_name(state.config.variant));
  SequencePair p;
  p.src = src;
  p.tgt = tgt;
  p.start_token = start_token;
  return forward_encdec_batch(tape, state, std::span<const SequencePair>(&p, 1), {}).logits;
}

Tensor forward_lm(Tape* tape, ModelState& state, const std::vector<int>& src,
                  const std::vector<int>& tgt, MaskKind mask_kind) {
  if (mask_kind != MaskKind::Prefix && mask_kind != MaskKind::Causal)
    throw std::invalid_argument("forward_lm: mask kind must be prefix or causal");
  if (state.config.variant.family == Family::EncDec)
    throw std::invalid_argument("forward_lm: model variant is encdec");
  SequencePair p;
  p.src = src;
  p.tgt = tgt;
  return forward_lm_batch(tape, state, std::span<const SequencePair>(&p, 1), mask_kind, {})
      .logits;
}

Tensor forward_prefixlm_toponly(Tape* tape, ModelState& state, const std::vector<int>& src,
                                const std::vector<int>& tgt, int start_token) {
  if (state.config.variant.family != Family::PrefixLM || !state.config.variant.top_only)
    throw std::invalid_argument("forward_prefixlm_toponly: model variant is " +
                                variant_name(state.config.variant));
  SequencePair p;
  p.src = src;
  p.tgt = tgt;
  p.start_token = start_token;
  return forward_toponly_batch(tape, state, std::span<const SequencePair>(&p, 1), {}).logits;
}

Tensor loss_tgt(Tape* tape, const Tensor& logits, const std::vector<int>& tgt_labels,
                float smoothing) {
  if (static_cast<int>(tgt_labels.size()) != logits.rows())
    throw std::invalid_argument("loss_tgt: " + std::to_string(tgt_labels.size()) +
                                " labels for logits " + logits.shape_str());
  return ops::cross_entropy_label_smoothed(tape, logits, tgt_labels, smoothing, kPadId);
}

CausalLoss loss_causallm(Tape* tape, const Tensor& logits, const std::vector<int>& src_labels,
                         const std::vector<int>& tgt_labels, float smoothing) {
  if (static_cast<int>(src_labels.size()) != logits.rows() ||
      static_cast<int>(tgt_labels.size()) != logits.rows())
    throw std::invalid_argument("loss_causallm: label lengths (" +
                                std::to_string(src_labels.size()) + ", " +
                                std::to_string(tgt_labels.size()) + ") for logits " +
                                logits.shape_str());
  const bool any_src =
      std::any_of(src_labels.begin(), src_labels.end(), [](int t) { return t != kPadId; });
  CausalLoss out;
  Tensor tgt_loss =
      ops::cross_entropy_label_smoothed(tape, logits, tgt_labels, smoothing, kPadId);
  out.tgt_part = tgt_loss.item();
  if (any_src) {
    Tensor src_loss =
        ops::cross_entropy_label_smoothed(tape, logits, src_labels, smoothing, kPadId);
    out.total = ops::add(tape, tgt_loss, src_loss);
    // defined by subtraction so total - src_part recovers the target loss
    // bit-for-bit even after the float32 rounding of the sum
    out.src_part = static_cast<double>(out.total.item()) - out.tgt_part;
  } else {
    out.src_part = 0.0;
    out.total = tgt_loss;
  }
  return out;
}

Tensor training_loss(Tape* tape, const ModelState& state, const ForwardResult& fwd,
                     double* src_part, double* tgt_part) {
  const float eps = state.config.label_smoothing;
  if (state.config.variant.family == Family::CausalLM) {
    CausalLoss loss = loss_causallm(tape, fwd.logits, fwd.src_labels, fwd.tgt_labels, eps);
    if (src_part) *src_part = loss.src_part;
    if (tgt_part) *tgt_part = loss.tgt_part;
    return loss.total;
  }
  Tensor loss = loss_tgt(tape, fwd.logits, fwd.tgt_labels, eps);
  if (src_part) *src_part = 0.0;
  if (tgt_part) *tgt_part = loss.item();
  return loss;
}

std::vector<float> next_token_logprobs(ModelState& state, const std::vector<int>& src,
                                       const std::vector<int>& prefix, int start_token,
                                       bool start_in_lm_stream) {
  if (src.empty()) throw std::invalid_argument("next_token_logprobs: empty source");
  const Family family = state.config.variant.family;
  Tensor logits;
  if (family == Family::EncDec ||
      (family == Family::PrefixLM && state.config.variant.top_only)) {
    // the decoder input [start, prefix...] is what [start, tgt[:-1]] yields for
    // tgt = prefix + [EOS]
    SequencePair p;
    p.src = src;
    p.tgt = prefix;
    p.tgt.push_back(kEosId);
    p.start_token = start_token;
    ForwardResult fwd =
        family == Family::EncDec
            ? forward_encdec_batch(nullptr, state, std::span<const SequencePair>(&p, 1), {})
            : forward_toponly_batch(nullptr, state, std::span<const SequencePair>(&p, 1), {});
    logits = fwd.logits;
  } else {
    const MaskKind kind = family == Family::CausalLM ? MaskKind::Causal : MaskKind::Prefix;
    std::vector<int> ids = src;
    if (start_in_lm_stream) ids.push_back(start_token);
    ids.insert(ids.end(), prefix.begin(), prefix.end());
    const int sx = static_cast<int>(src.size());
    const int sy = static_cast<int>(ids.size()) - sx;
    // visibility over [src ; generated-so-far]; sy may be 0 on the first step
    BoolMatrix mask(sx + sy, sx + sy, 0);
    for (int i = 0; i < sx + sy; ++i)
      for (int j = 0; j < sx + sy; ++j)
        if (j <= i || (kind == MaskKind::Prefix && j < sx)) mask.at(i, j) = 1;
    Tensor pos = positions(sx, sy, state.config.d, true);
    Tensor x = embed_with_positions(nullptr, state, ids, pos);
    std::vector<AttentionSegment> segs(1);
    segs[0] = {0, x.rows(), {{0, x.rows()}}, &mask};
    LayerInputs in;
    in.self_segments = &segs;
    for (LayerParams& layer : state.stack)
      x = transformer_layer(nullptr, x, layer, state.config.heads, state.config.norm, in, {});
    if (state.final_norm)
      x = ops::layer_norm(nullptr, x, state.final_norm->gain, state.final_norm->bias);
    logits = project_out(nullptr, state, x);
  }

  const int v = logits.cols();
  const int row = logits.rows() - 1;
  std::vector<float> lp(static_cast<size_t>(v));
  float mx = logits.at(row, 0);
  for (int c = 1; c < v; ++c) mx = std::max(mx, logits.at(row, c));
  double denom = 0.0;
  for (int c = 0; c < v; ++c) denom += std::exp(static_cast<double>(logits.at(row, c)) - mx);
  const double lse = std::log(denom) + mx;
  for (int c = 0; c < v; ++c)
    lp[static_cast<size_t>(c)] = static_cast<float>(logits.at(row, c) - lse);
  return lp;
}

namespace {

int64_t attn_param_count(int d) { return 4LL * (static_cast<int64_t>(d) * d + d); }

int64_t ffn_param_count(int d, int f) {
  return static_cast<int64_t>(d) * f + f + static_cast<int64_t>(f) * d + d;
}

int64_t norm_param_count(int d) { return 2LL * d; }

int64_t lm_layer_params(int d, int f) {
  return attn_param_count(d) + ffn_param_count(d, f) + 2 * norm_param_count(d);
}

int64_t dec_layer_params(int d, int f) {
  return lm_layer_params(d, f) + attn_param_count(d) + norm_param_count(d);
}

}  // namespace

int64_t param_count(const ModelConfig& config) {
  validate_config(config);
  const int d = config.d, f = config.d_ff;
  const int64_t l = config.layers;
  const bool pre = config.norm == NormPlacement::PreNorm;
  switch (config.variant.family) {
    case Family::EncDec:
      return l * lm_layer_params(d, f) + l * dec_layer_params(d, f) +
             (pre ? 2 * norm_param_count(d) : 0);
    case Family::PrefixLM:
    case Family::CausalLM: {
      int64_t one = l * lm_layer_params(d, f) + (pre ? norm_param_count(d) : 0);
      return config.tie_lm_stacks ? one : 2 * one;
    }
  }
  throw std::logic_error("param_count: unhandled family");
}

namespace {

int64_t attn_flops(int d, int64_t nq, int64_t nk) {
  return 4 * (nq + nk) * d * static_cast<int64_t>(d) + 4 * nq * nk * d;
}

int64_t ffn_flops(int d, int f, int64_t n) { return 4 * n * static_cast<int64_t>(d) * f; }

}  // namespace

int64_t flops_estimate(const ModelConfig& config, int src_len, int tgt_len) {
  validate_config(config);
  if (src_len < 1 || tgt_len < 1)
    throw std::invalid_argument("flops_estimate: lengths must be >= 1, got " +
                                std::to_string(src_len) + " and " + std::to_string(tgt_len));
  const int d = config.d, f = config.d_ff;
  const int64_t l = config.layers, sx = src_len, sy = tgt_len, s = sx + sy;
  switch (config.variant.family) {
    case Family::EncDec:
      return l * (attn_flops(d, sx, sx) + ffn_flops(d, f, sx)) +
             l * (attn_flops(d, sy, sy) + attn_flops(d, sy, sx) + ffn_flops(d, f, sy));
    case Family::PrefixLM:
      if (config.variant.top_only)
        return l * (attn_flops(d, sx, sx) + ffn_flops(d, f, sx)) +
               l * (attn_flops(d, sy, s) + ffn_flops(d, f, sy));
      return l * (attn_flops(d, s, s) + ffn_flops(d, f, s));
    case Family::CausalLM:
      return l * (attn_flops(d, s, s) + ffn_flops(d, f, s));
  }
  throw std::logic_error("flops_estimate: unhandled family");
}

AlignedConfigs align_configs(const ModelConfig& anchor) {
  if (anchor.variant.family != Family::EncDec)
    throw std::invalid_argument("align_configs: anchor must be encdec, got " +
                                variant_name(anchor.variant));
  AlignedConfigs out;
  out.target_params = param_count(anchor);

  ModelConfig deep = anchor;
  deep.variant = {Family::PrefixLM, false, false};
  for (int l = 1;; ++l) {
    deep.layers = l;
    deep.norm = l > 12 ? NormPlacement::PreNorm : anchor.norm;
    if (param_count(deep) >= out.target_params) break;
    if (l > 100000) throw std::logic_error("align_configs: deep search runaway");
  }
  out.deep = deep;
  out.deep_params = param_count(deep);

  ModelConfig wide = anchor;
  wide.variant = {Family::PrefixLM, false, false};
  wide.layers = anchor.layers;
  // per-layer params are linear in d_ff; solve, then check the neighbors
  const int d = anchor.d;
  const int64_t fixed = attn_param_count(d) + 2 * norm_param_count(d) + d;
  const int64_t pre_extra =
      anchor.norm == NormPlacement::PreNorm ? norm_param_count(d) : 0;
  const double f_real =
      (static_cast<double>(out.target_params - pre_extra) / anchor.layers - fixed) /
      (2.0 * d + 1.0);
  int best_f = 1;
  int64_t best_diff = -1;
  for (int df = -1; df <= 1; ++df) {
    const int f = std::max(1, static_cast<int>(std::llround(f_real)) + df);
    wide.d_ff = f;
    const int64_t diff = std::llabs(param_count(wide) - out.target_params);
    if (best_diff < 0 || diff < best_diff || (diff == best_diff && f < best_f)) {
      best_diff = diff;
      best_f = f;
    }
  }
  wide.d_ff = best_f;
  out.wide = wide;
  out.wide_params = param_count(wide);

  out.deep_mismatch = static_cast<double>(std::llabs(out.deep_params - out.target_params)) /
                      static_cast<double>(out.target_params);
  out.wide_mismatch = static_cast<double>(std::llabs(out.wide_params - out.target_params)) /
                      static_cast<double>(out.target_params);
  return out;
}

// ---- checkpoint bundles ----

static const char* kBundleMagic = "LMMT-CKPT v1";

void save_bundle(const std::string& path, const TensorBundle& bundle) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_bundle: cannot open " + path);
  out << kBundleMagic << "\n";
  for (const auto& [k, v] : bundle.meta) {
    if (k.find_first_of(" =\n") != std::string::npos ||
        v.find_first_of(" \n") != std::string::npos)
      throw std::invalid_argument("save_bundle: meta entry '" + k +
                                  "' contains spaces or newlines");
    out << "meta " << k << "=" << v << "\n";
  }
  for (const auto& [name, t] : bundle.tensors) {
    if (name.find_first_of(" \n") != std::string::npos)
      throw std::invalid_argument("save_bundle: tensor name '" + name + "' contains spaces");
    out << "tensor " << name << " " << t.rows() << " " << t.cols() << "\n";
  }
  out << "payload\n";
  for (const auto& [name, t] : bundle.tensors) {
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * 4));
  }
  if (!out) throw std::runtime_error("save_bundle: write failed for " + path);
}

TensorBundle load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_bundle: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kBundleMagic)
    throw std::runtime_error("load_bundle: version mismatch in " + path + ": expected '" +
                             kBundleMagic + "', found '" + line + "'");
  TensorBundle bundle;
  std::vector<std::tuple<std::string, int, int>> plan;
  while (std::getline(in, line)) {
    if (line == "payload") break;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "meta") {
      std::string kv;
      ss >> kv;
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("load_bundle: malformed meta line '" + line + "'");
      bundle.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
    } else if (kind == "tensor") {
      std::string name;
      int r, c;
      if (!(ss >> name >> r >> c))
        throw std::runtime_error("load_bundle: malformed tensor line '" + line + "'");
      plan.emplace_back(name, r, c);
    } else {
      throw std::runtime_error("load_bundle: unexpected manifest line '" + line + "'");
    }
  }
  for (const auto& [name, r, c] : plan) {
    Tensor t(r, c);
    in.read(reinterpret_cast<char*>(t.values().data()),
            static_cast<std::streamsize>(t.size() * 4));
    if (!in)
      throw std::runtime_error("load_bundle: truncated payload at tensor '" + name + "'");
    bundle.tensors.emplace_back(name, t);
  }
  return bundle;
}

namespace {

std::string format_float(float v) {
  std::ostringstream ss;
  ss.precision(9);
  ss << v;
  return ss.str();
}

}  // namespace

std::map<std::string, std::string> config_meta(const ModelConfig& c) {
  return {
      {"variant", variant_name(c.variant)},
      {"vocab_size", std::to_string(c.vocab_size)},
      {"d", std::to_string(c.d)},
      {"d_ff", std::to_string(c.d_ff)},
      {"layers", std::to_string(c.layers)},
      {"heads", std::to_string(c.heads)},
      {"norm", c.norm == NormPlacement::PreNorm ? "pre" : "post"},
      {"dropout", format_float(c.dropout)},
      {"label_smoothing", format_float(c.label_smoothing)},
      {"tie_lm_stacks", c.tie_lm_stacks ? "1" : "0"},
  };
}

ModelConfig config_from_meta(const std::map<std::string, std::string>& meta) {
  auto get = [&](const char* key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end())
      throw std::runtime_error("config_from_meta: missing key '" + std::string(key) + "'");
    return it->second;
  };
  ModelConfig c;
  c.variant = parse_variant(get("variant"));
  c.vocab_size = std::stoi(get("vocab_size"));
  c.d = std::stoi(get("d"));
  c.d_ff = std::stoi(get("d_ff"));
  c.layers = std::stoi(get("layers"));
  c.heads = std::stoi(get("heads"));
  c.norm = get("norm") == "pre" ? NormPlacement::PreNorm : NormPlacement::PostNorm;
  c.dropout = std::stof(get("dropout"));
  c.label_smoothing = std::stof(get("label_smoothing"));
  c.tie_lm_stacks = get("tie_lm_stacks") == "1";
  validate_config(c);
  return c;
}

void save_model(const std::string& path, ModelState& state) {
  TensorBundle bundle;
  bundle.meta = config_meta(state.config);
  bundle.meta["kind"] = "model";
  bundle.tensors = named_parameters(state);
  save_bundle(path, bundle);
}

ModelState load_model(const std::string& path) {
  TensorBundle bundle = load_bundle(path);
  ModelState state = init_model(config_from_meta(bundle.meta), 0);
  std::map<std::string, Tensor> by_name(bundle.tensors.begin(), bundle.tensors.end());
  for (auto& [name, t] : named_parameters(state)) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("load_model: checkpoint lacks parameter '" + name + "'");
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols())
      throw std::runtime_error("load_model: parameter '" + name + "' has shape " +
                               it->second.shape_str() + ", expected " + t.shape_str());
    std::copy(it->second.values().begin(), it->second.values().end(), t.values().begin());
    by_name.erase(it);
  }
  for (const auto& [name, t] : by_name)
    if (name.rfind("adam.", 0) != 0)
      throw std::runtime_error("load_model: checkpoint has unexpected parameter '" + name +
                               "'");
  return state;
}

}  // namespace lmmt
