#include "lmmt/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"
#include "lmmt/rng.hpp"

namespace lmmt {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::string sha1_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("sha1_hex: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

// ---- plan parsing ----

namespace {

[[noreturn]] void fail_field(const std::string& path, const std::string& what) {
  throw std::invalid_argument("plan: " + path + ": " + what);
}

const Json& need(const Json& j, const char* key, const std::string& path) {
  if (!j.is_object()) fail_field(path, "must be an object");
  auto it = j.find(key);
  if (it == j.end()) fail_field(path + "." + key, "is missing");
  return *it;
}

int get_int(const Json& j, const char* key, const std::string& path) {
  const Json& v = need(j, key, path);
  if (!v.is_number_integer()) fail_field(path + "." + key, "must be an integer");
  return v.get<int>();
}

int get_int_or(const Json& j, const char* key, const std::string& path, int fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return get_int(j, key, path);
}

double get_double(const Json& j, const char* key, const std::string& path) {
  const Json& v = need(j, key, path);
  if (!v.is_number()) fail_field(path + "." + key, "must be a number");
  return v.get<double>();
}

double get_double_or(const Json& j, const char* key, const std::string& path,
                     double fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return get_double(j, key, path);
}

std::string get_string(const Json& j, const char* key, const std::string& path) {
  const Json& v = need(j, key, path);
  if (!v.is_string()) fail_field(path + "." + key, "must be a string");
  return v.get<std::string>();
}

StructuralTransform parse_transform(const std::string& name, const std::string& path) {
  if (name == "identity") return StructuralTransform::Identity;
  if (name == "reversal") return StructuralTransform::Reversal;
  if (name == "rotation") return StructuralTransform::Rotation;
  fail_field(path, "unknown transform '" + name +
                       "' (expected identity, reversal or rotation)");
}

const char* transform_name(StructuralTransform t) {
  switch (t) {
    case StructuralTransform::Identity: return "identity";
    case StructuralTransform::Reversal: return "reversal";
    case StructuralTransform::Rotation: return "rotation";
  }
  return "?";
}

ModelVariant parse_variant_entry(const Json& v, const std::string& path) {
  try {
    if (v.is_string()) return parse_variant(v.get<std::string>());
    if (v.is_object()) {
      ModelVariant out;
      const std::string family = get_string(v, "family", path);
      if (family == "encdec")
        out.family = Family::EncDec;
      else if (family == "prefixlm")
        out.family = Family::PrefixLM;
      else if (family == "causallm")
        out.family = Family::CausalLM;
      else
        fail_field(path + ".family", "unknown family '" + family + "'");
      if (v.contains("top_only")) out.top_only = v.at("top_only").get<bool>();
      if (v.contains("tgt_only")) out.tgt_only = v.at("tgt_only").get<bool>();
      validate_variant(out);
      return out;
    }
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    if (msg.rfind("plan:", 0) == 0) throw;
    fail_field(path, msg);
  }
  fail_field(path, "must be a variant name or an object with family/top_only/tgt_only");
}

}  // namespace

ExperimentPlan parse_plan(const std::string& json_text) {
  Json j;
  try {
    j = Json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("plan: JSON parse error: ") + e.what());
  }
  ExperimentPlan plan;
  plan.name = get_string(j, "name", "plan");
  plan.master_seed = static_cast<uint64_t>(get_int(j, "master_seed", "plan"));
  plan.seeds = get_int_or(j, "seeds", "plan", 1);
  plan.output_dir = get_string(j, "output_dir", "plan");

  const Json& data = need(j, "data", "plan");
  const Json& langs = need(data, "languages", "plan.data");
  if (!langs.is_array()) fail_field("plan.data.languages", "must be an array");
  for (size_t i = 0; i < langs.size(); ++i) {
    const std::string path = "plan.data.languages[" + std::to_string(i) + "]";
    const Json& lj = langs.at(i);
    LanguageCfg lc;
    lc.id = get_int(lj, "id", path);
    lc.tokens = get_int(lj, "tokens", path);
    lc.min_len = get_int(lj, "min_len", path);
    lc.max_len = get_int(lj, "max_len", path);
    plan.data.languages.push_back(lc);
  }
  const Json& dirs = need(data, "directions", "plan.data");
  if (!dirs.is_array()) fail_field("plan.data.directions", "must be an array");
  for (size_t i = 0; i < dirs.size(); ++i) {
    const std::string path = "plan.data.directions[" + std::to_string(i) + "]";
    const Json& dj = dirs.at(i);
    DirectionCfg dc;
    dc.src = get_int(dj, "src", path);
    dc.tgt = get_int(dj, "tgt", path);
    dc.transform = parse_transform(get_string(dj, "transform", path), path + ".transform");
    dc.rotation = get_int_or(dj, "rotation", path, 0);
    dc.train_pairs = get_int_or(dj, "train_pairs", path, 0);
    dc.dev_pairs = get_int_or(dj, "dev_pairs", path, 0);
    dc.test_pairs = get_int_or(dj, "test_pairs", path, 0);
    plan.data.directions.push_back(dc);
  }
  const std::string tag = get_string(data, "tag_position", "plan.data");
  if (tag == "none") {
    plan.data.tag.reset();
  } else {
    try {
      plan.data.tag = parse_tag_position(tag);
    } catch (const std::invalid_argument& e) {
      fail_field("plan.data.tag_position", e.what());
    }
  }
  plan.data.temperature = get_double(data, "temperature", "plan.data");
  plan.data.token_budget = get_int(data, "token_budget", "plan.data");

  const Json& grid = need(j, "grid", "plan");
  const Json& variants = need(grid, "variants", "plan.grid");
  if (!variants.is_array()) fail_field("plan.grid.variants", "must be an array");
  for (size_t i = 0; i < variants.size(); ++i)
    plan.grid.variants.push_back(parse_variant_entry(
        variants.at(i), "plan.grid.variants[" + std::to_string(i) + "]"));
  const Json& anchors = need(grid, "anchor_layers", "plan.grid");
  if (!anchors.is_array()) fail_field("plan.grid.anchor_layers", "must be an array");
  for (size_t i = 0; i < anchors.size(); ++i) {
    if (!anchors.at(i).is_number_integer())
      fail_field("plan.grid.anchor_layers[" + std::to_string(i) + "]",
                 "must be an integer");
    plan.grid.anchor_layers.push_back(anchors.at(i).get<int>());
  }
  const Json& width = need(grid, "width", "plan.grid");
  plan.grid.d = get_int(width, "d", "plan.grid.width");
  plan.grid.d_ff = get_int(width, "d_ff", "plan.grid.width");
  plan.grid.heads = get_int(width, "heads", "plan.grid.width");
  const Json& aligns = need(grid, "alignments", "plan.grid");
  if (!aligns.is_array()) fail_field("plan.grid.alignments", "must be an array");
  plan.grid.alignments.clear();
  for (size_t i = 0; i < aligns.size(); ++i) {
    if (!aligns.at(i).is_string())
      fail_field("plan.grid.alignments[" + std::to_string(i) + "]", "must be a string");
    plan.grid.alignments.push_back(aligns.at(i).get<std::string>());
  }

  const Json& train = need(j, "train", "plan");
  plan.train.steps = get_int(train, "steps", "plan.train");
  plan.train.warmup = get_int(train, "warmup", "plan.train");
  plan.train.lr_scale = get_double_or(train, "lr_scale", "plan.train", 1.0);
  plan.train.dropout = static_cast<float>(get_double_or(train, "dropout", "plan.train", 0.1));
  plan.train.label_smoothing =
      static_cast<float>(get_double_or(train, "label_smoothing", "plan.train", 0.1));
  plan.train.checkpoint_interval =
      get_int_or(train, "checkpoint_interval", "plan.train", 0);
  plan.train.average_last = get_int_or(train, "average_last", "plan.train", 10);

  const Json& eval = need(j, "eval", "plan");
  const Json& splits = need(eval, "splits", "plan.eval");
  if (!splits.is_array()) fail_field("plan.eval.splits", "must be an array");
  plan.eval.splits.clear();
  for (size_t i = 0; i < splits.size(); ++i) {
    const std::string s =
        splits.at(i).is_string() ? splits.at(i).get<std::string>() : std::string();
    if (s == "dev")
      plan.eval.splits.push_back(Split::Dev);
    else if (s == "test")
      plan.eval.splits.push_back(Split::Test);
    else
      fail_field("plan.eval.splits[" + std::to_string(i) + "]",
                 "must be 'dev' or 'test'");
  }
  plan.eval.beam = get_int_or(eval, "beam", "plan.eval", 4);
  plan.eval.length_penalty = get_double_or(eval, "length_penalty", "plan.eval", 0.5);
  plan.eval.max_len = get_int_or(eval, "max_len", "plan.eval", 24);
  plan.eval.decode_pairs = get_int_or(eval, "decode_pairs", "plan.eval", 16);
  return plan;
}

ExperimentPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("plan: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_plan(ss.str());
}

std::string plan_to_json(const ExperimentPlan& plan) {
  Json j;
  j["name"] = plan.name;
  j["master_seed"] = plan.master_seed;
  j["seeds"] = plan.seeds;
  j["output_dir"] = plan.output_dir;
  Json langs = Json::array();
  for (const LanguageCfg& lc : plan.data.languages)
    langs.push_back(Json{{"id", lc.id},
                         {"tokens", lc.tokens},
                         {"min_len", lc.min_len},
                         {"max_len", lc.max_len}});
  Json dirs = Json::array();
  for (const DirectionCfg& dc : plan.data.directions)
    dirs.push_back(Json{{"src", dc.src},
                        {"tgt", dc.tgt},
                        {"transform", transform_name(dc.transform)},
                        {"rotation", dc.rotation},
                        {"train_pairs", dc.train_pairs},
                        {"dev_pairs", dc.dev_pairs},
                        {"test_pairs", dc.test_pairs}});
  j["data"] = Json{{"languages", langs},
                   {"directions", dirs},
                   {"tag_position",
                    plan.data.tag ? tag_position_name(*plan.data.tag) : "none"},
                   {"temperature", plan.data.temperature},
                   {"token_budget", plan.data.token_budget}};
  Json variants = Json::array();
  for (const ModelVariant& v : plan.grid.variants) variants.push_back(variant_name(v));
  j["grid"] = Json{{"variants", variants},
                   {"anchor_layers", plan.grid.anchor_layers},
                   {"width", Json{{"d", plan.grid.d},
                                  {"d_ff", plan.grid.d_ff},
                                  {"heads", plan.grid.heads}}},
                   {"alignments", plan.grid.alignments}};
  j["train"] = Json{{"steps", plan.train.steps},
                    {"warmup", plan.train.warmup},
                    {"lr_scale", plan.train.lr_scale},
                    {"dropout", plan.train.dropout},
                    {"label_smoothing", plan.train.label_smoothing},
                    {"checkpoint_interval", plan.train.checkpoint_interval},
                    {"average_last", plan.train.average_last}};
  Json splits = Json::array();
  for (Split s : plan.eval.splits) splits.push_back(split_name(s));
  j["eval"] = Json{{"splits", splits},
                   {"beam", plan.eval.beam},
                   {"length_penalty", plan.eval.length_penalty},
                   {"max_len", plan.eval.max_len},
                   {"decode_pairs", plan.eval.decode_pairs}};
  return j.dump(2);
}

std::string plan_hash(const ExperimentPlan& plan) { return sha1_hex(plan_to_json(plan)); }

void validate_plan(const ExperimentPlan& plan) {
  auto demand = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) fail_field(field, what);
  };
  demand(!plan.name.empty(), "name", "must be non-empty");
  demand(!plan.output_dir.empty(), "output_dir", "must be non-empty");
  demand(plan.seeds >= 1, "seeds", "must be >= 1, got " + std::to_string(plan.seeds));

  demand(!plan.data.languages.empty(), "data.languages", "must be non-empty");
  for (size_t i = 0; i < plan.data.languages.size(); ++i) {
    const LanguageCfg& lc = plan.data.languages[i];
    const std::string path = "data.languages[" + std::to_string(i) + "]";
    demand(lc.id == static_cast<int>(i), path + ".id",
           "must equal the list position " + std::to_string(i));
    demand(lc.tokens == plan.data.languages[0].tokens, path + ".tokens",
           "must match every other language (" +
               std::to_string(plan.data.languages[0].tokens) + ")");
    demand(lc.tokens >= 2, path + ".tokens", "must be >= 2");
    demand(lc.min_len >= 1, path + ".min_len", "must be >= 1");
    demand(lc.max_len >= lc.min_len, path + ".max_len", "must be >= min_len");
  }
  const int n_langs = static_cast<int>(plan.data.languages.size());
  demand(!plan.data.directions.empty(), "data.directions", "must be non-empty");
  bool any_train = false;
  for (size_t i = 0; i < plan.data.directions.size(); ++i) {
    const DirectionCfg& dc = plan.data.directions[i];
    const std::string path = "data.directions[" + std::to_string(i) + "]";
    demand(dc.src >= 0 && dc.src < n_langs, path + ".src", "out of language range");
    demand(dc.tgt >= 0 && dc.tgt < n_langs, path + ".tgt", "out of language range");
    demand(dc.src != dc.tgt, path, "src and tgt must differ");
    demand(dc.train_pairs >= 0 && dc.dev_pairs >= 0 && dc.test_pairs >= 0, path,
           "pair counts must be >= 0");
    demand(dc.transform == StructuralTransform::Rotation || dc.rotation == 0,
           path + ".rotation", "must be 0 unless transform is rotation");
    any_train = any_train || dc.train_pairs > 0;
    const bool source_tag = plan.data.tag && (*plan.data.tag == TagPosition::SourceStart ||
                                              *plan.data.tag == TagPosition::SourceEnd);
    const int max_src = plan.data.languages[static_cast<size_t>(dc.src)].max_len +
                        (source_tag ? 1 : 0);
    const int max_tgt = plan.data.languages[static_cast<size_t>(dc.tgt)].max_len + 1;
    demand(max_src + max_tgt <= plan.data.token_budget, "data.token_budget",
           "too small for the largest pair of direction l" + std::to_string(dc.src) +
               "-l" + std::to_string(dc.tgt) + " (needs " +
               std::to_string(max_src + max_tgt) + " tokens)");
  }
  demand(any_train, "data.directions", "at least one direction needs train_pairs > 0");
  demand(plan.data.temperature > 0.0, "data.temperature", "must be > 0");

  demand(!plan.grid.variants.empty(), "grid.variants", "must be non-empty");
  bool any_encdec = false, any_lm = false;
  for (size_t i = 0; i < plan.grid.variants.size(); ++i) {
    try {
      validate_variant(plan.grid.variants[i]);
    } catch (const std::invalid_argument& e) {
      fail_field("grid.variants[" + std::to_string(i) + "]", e.what());
    }
    (plan.grid.variants[i].family == Family::EncDec ? any_encdec : any_lm) = true;
  }
  demand(!plan.grid.anchor_layers.empty(), "grid.anchor_layers", "must be non-empty");
  for (size_t i = 0; i < plan.grid.anchor_layers.size(); ++i) {
    demand(plan.grid.anchor_layers[i] >= 1,
           "grid.anchor_layers[" + std::to_string(i) + "]", "must be >= 1");
    if (i > 0)
      demand(plan.grid.anchor_layers[i] > plan.grid.anchor_layers[i - 1],
             "grid.anchor_layers", "must be strictly increasing");
  }
  demand(!plan.grid.alignments.empty(), "grid.alignments", "must be non-empty");
  bool has_anchor = false, has_lm_alignment = false;
  for (size_t i = 0; i < plan.grid.alignments.size(); ++i) {
    const std::string& a = plan.grid.alignments[i];
    demand(a == "anchor" || a == "deep" || a == "wide",
           "grid.alignments[" + std::to_string(i) + "]",
           "must be anchor, deep or wide, got '" + a + "'");
    for (size_t k = 0; k < i; ++k)
      demand(plan.grid.alignments[k] != a, "grid.alignments",
             "contains '" + a + "' twice");
    if (a == "anchor") has_anchor = true;
    if (a == "deep" || a == "wide") has_lm_alignment = true;
  }
  demand(!any_encdec || has_anchor, "grid.alignments",
         "must include 'anchor' when encdec is in the grid");
  demand(!any_lm || has_lm_alignment, "grid.alignments",
         "must include 'deep' or 'wide' when LM variants are in the grid");
  {
    VocabLayout layout{n_langs, plan.data.languages[0].tokens};
    ModelConfig probe;
    probe.variant = {Family::EncDec, false, false};
    probe.vocab_size = layout.vocab_size();
    probe.d = plan.grid.d;
    probe.d_ff = plan.grid.d_ff;
    probe.heads = plan.grid.heads;
    probe.layers = plan.grid.anchor_layers.front();
    probe.dropout = plan.train.dropout;
    probe.label_smoothing = plan.train.label_smoothing;
    try {
      validate_config(probe);
    } catch (const std::invalid_argument& e) {
      fail_field("grid.width", e.what());
    }
  }

  demand(plan.train.steps >= 1, "train.steps", "must be >= 1");
  demand(plan.train.warmup >= 1, "train.warmup", "must be >= 1");
  demand(plan.train.lr_scale > 0.0, "train.lr_scale", "must be > 0");
  demand(plan.train.checkpoint_interval >= 0, "train.checkpoint_interval",
         "must be >= 0");
  demand(plan.train.average_last >= 1, "train.average_last", "must be >= 1");

  demand(!plan.eval.splits.empty(), "eval.splits", "must be non-empty");
  for (Split s : plan.eval.splits) {
    int64_t available = 0;
    for (const DirectionCfg& dc : plan.data.directions)
      available += s == Split::Dev ? dc.dev_pairs : dc.test_pairs;
    demand(available > 0, "eval.splits",
           std::string("includes '") + split_name(s) +
               "' but no direction has pairs for it");
  }
  demand(plan.eval.beam >= 1, "eval.beam", "must be >= 1");
  demand(plan.eval.length_penalty >= 0.0, "eval.length_penalty", "must be >= 0");
  demand(plan.eval.max_len >= 1, "eval.max_len", "must be >= 1");
  demand(plan.eval.decode_pairs >= 0, "eval.decode_pairs", "must be >= 0");
}

// ---- cell expansion ----

std::vector<CellSpec> expand_cells(const ExperimentPlan& plan) {
  VocabLayout layout{static_cast<int>(plan.data.languages.size()),
                     plan.data.languages[0].tokens};
  std::vector<CellSpec> cells;
  for (int anchor_layers : plan.grid.anchor_layers) {
    ModelConfig anchor;
    anchor.variant = {Family::EncDec, false, false};
    anchor.vocab_size = layout.vocab_size();
    anchor.d = plan.grid.d;
    anchor.d_ff = plan.grid.d_ff;
    anchor.heads = plan.grid.heads;
    anchor.layers = anchor_layers;
    anchor.norm = anchor_layers > 12 ? NormPlacement::PreNorm : NormPlacement::PostNorm;
    anchor.dropout = plan.train.dropout;
    anchor.label_smoothing = plan.train.label_smoothing;
    AlignedConfigs aligned = align_configs(anchor);
    for (const ModelVariant& variant : plan.grid.variants) {
      for (const std::string& alignment : plan.grid.alignments) {
        const bool is_encdec = variant.family == Family::EncDec;
        if (is_encdec != (alignment == "anchor")) continue;
        ModelConfig config = alignment == "anchor" ? anchor
                             : alignment == "deep" ? aligned.deep
                                                   : aligned.wide;
        config.variant = variant;
        for (int s = 0; s < plan.seeds; ++s) {
          CellSpec cell;
          cell.variant = variant;
          cell.alignment = alignment;
          cell.anchor_layers = anchor_layers;
          cell.seed_index = s;
          cell.config = config;
          cell.id = variant_name(variant) + "-" + alignment + "-a" +
                    std::to_string(anchor_layers) + "-s" + std::to_string(s);
          cell.seed = mix64(mix64(plan.master_seed) ^ hash_str(cell.id));
          Json cj;
          cj["id"] = cell.id;
          cj["variant"] = variant_name(variant);
          cj["alignment"] = alignment;
          cj["anchor_layers"] = anchor_layers;
          cj["seed"] = cell.seed;
          for (const auto& [k, v] : config_meta(config)) cj["config"][k] = v;
          cj["train"] = Json{{"steps", plan.train.steps},
                             {"warmup", plan.train.warmup},
                             {"lr_scale", plan.train.lr_scale},
                             {"average_last", plan.train.average_last}};
          cell.hash = sha1_hex(cj.dump());
          cells.push_back(std::move(cell));
        }
      }
    }
  }
  return cells;
}

// ---- rows.csv ----

std::string rows_csv_header() {
  return "plan,plan_hash,cell,cell_hash,master_seed,seed_index,variant,alignment,"
         "anchor_layers,layers,d,d_ff,heads,n_params,flops,direction,split,ppl,bleu,"
         "lang_acc,beam,length_penalty,max_len";
}

std::string row_to_csv(const MetricsRow& row) {
  char buf[640];
  std::snprintf(buf, sizeof(buf),
                "%s,%s,%s,%s,%llu,%d,%s,%s,%d,%d,%d,%d,%d,%lld,%lld,%s,%s,%.6f,%.6f,"
                "%.6f,%d,%.6f,%d",
                row.plan.c_str(), row.plan_hash.c_str(), row.cell.c_str(),
                row.cell_hash.c_str(), static_cast<unsigned long long>(row.master_seed),
                row.seed_index, row.variant.c_str(), row.alignment.c_str(),
                row.anchor_layers, row.layers, row.d, row.d_ff, row.heads,
                static_cast<long long>(row.metrics.n_params),
                static_cast<long long>(row.metrics.flops), row.metrics.direction.c_str(),
                row.metrics.split.c_str(), row.metrics.ppl, row.metrics.bleu,
                row.metrics.lang_acc, row.metrics.decode.beam,
                row.metrics.decode.length_penalty, row.metrics.decode.max_len);
  return buf;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

std::vector<MetricsRow> read_rows_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_rows_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("read_rows_csv: " + path + " is empty");
  const std::vector<std::string> header = split_csv(line);
  const std::vector<std::string> expect = split_csv(rows_csv_header());
  if (header != expect)
    throw std::runtime_error("read_rows_csv: " + path + " has an unexpected header");
  std::vector<MetricsRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv(line);
    if (f.size() != expect.size())
      throw std::runtime_error("read_rows_csv: " + path + ":" + std::to_string(line_no) +
                               ": wrong column count");
    try {
      MetricsRow r;
      r.plan = f[0];
      r.plan_hash = f[1];
      r.cell = f[2];
      r.cell_hash = f[3];
      r.master_seed = std::stoull(f[4]);
      r.seed_index = std::stoi(f[5]);
      r.variant = f[6];
      r.alignment = f[7];
      r.anchor_layers = std::stoi(f[8]);
      r.layers = std::stoi(f[9]);
      r.d = std::stoi(f[10]);
      r.d_ff = std::stoi(f[11]);
      r.heads = std::stoi(f[12]);
      r.metrics.n_params = std::stoll(f[13]);
      r.metrics.flops = std::stoll(f[14]);
      r.metrics.direction = f[15];
      r.metrics.split = f[16];
      r.metrics.ppl = std::stod(f[17]);
      r.metrics.bleu = std::stod(f[18]);
      r.metrics.lang_acc = std::stod(f[19]);
      r.metrics.decode.beam = std::stoi(f[20]);
      r.metrics.decode.length_penalty = std::stod(f[21]);
      r.metrics.decode.max_len = std::stoi(f[22]);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw std::runtime_error("read_rows_csv: " + path + ":" + std::to_string(line_no) +
                               ": malformed row");
    }
  }
  return rows;
}

// ---- fits and plots ----

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double reference_n0(int d, int d_ff, int heads) {
  ModelConfig probe;
  probe.variant = {Family::EncDec, false, false};
  probe.vocab_size = kFirstTagId + 100;
  probe.d = d;
  probe.d_ff = d_ff;
  probe.heads = heads;
  probe.layers = 1;
  return static_cast<double>(param_count(probe));
}

struct FitBundle {
  double n0 = 0.0;
  // per curve label: median test-PPL observations and the fit when >= 2 points
  std::vector<std::pair<std::string, std::vector<ScalingObservation>>> observations;
  std::vector<std::pair<std::string, PowerLawFit>> fits;
  std::vector<std::string> underpopulated;  // curves with a single scale point
};

FitBundle fit_rows(const std::vector<MetricsRow>& rows) {
  FitBundle bundle;
  if (rows.empty()) return bundle;
  // n0 is pinned to the grid width; wide-aligned rows carry a stretched d_ff,
  // so prefer a row from any other alignment when one exists
  const MetricsRow* base = &rows.front();
  for (const MetricsRow& r : rows)
    if (r.alignment != "wide") {
      base = &r;
      break;
    }
  bundle.n0 = reference_n0(base->d, base->d_ff, base->heads);
  // (curve label, slice) -> n -> ppl per seed
  std::map<std::pair<std::string, std::string>, std::map<int64_t, std::vector<double>>>
      acc;
  for (const MetricsRow& r : rows) {
    if (r.metrics.split != "test") continue;
    const std::string label = r.variant + "-" + r.alignment;
    const std::string slice = "test/" + r.metrics.direction;
    acc[{label, slice}][r.metrics.n_params].push_back(r.metrics.ppl);
  }
  for (const auto& [key, by_n] : acc) {
    std::vector<ScalingObservation> obs;
    for (const auto& [n, ppls] : by_n)
      obs.push_back({key.first, key.second, static_cast<double>(n), median(ppls)});
    const std::string label = key.first + "/" + key.second;
    if (obs.size() >= 2) {
      bundle.fits.emplace_back(label, fit_power_law(obs, bundle.n0));
      bundle.observations.emplace_back(label, std::move(obs));
    } else {
      bundle.underpopulated.push_back(label);
      bundle.observations.emplace_back(label, std::move(obs));
    }
  }
  return bundle;
}

std::string build_fit_report(const ExperimentPlan* plan, const std::string& phash,
                             const std::vector<MetricsRow>& rows,
                             const std::vector<std::string>& failures) {
  std::ostringstream out;
  if (plan) out << "plan " << plan->name << " hash " << phash << "\n";
  FitBundle bundle = fit_rows(rows);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "n0 %.6g (1-layer encdec at the grid width)\n",
                bundle.n0);
  out << buf;
  if (bundle.fits.empty())
    out << "no curve has enough scale points to fit\n";
  else
    for (const auto& [label, fit] : bundle.fits)
      out << fit_report_line(label, fit) << "\n";
  if (bundle.fits.size() >= 2) out << compare_families(bundle.fits);
  for (const std::string& label : bundle.underpopulated)
    out << "skipped (single scale point): " << label << "\n";
  if (!failures.empty()) {
    out << "excluded cells:\n";
    for (const std::string& f : failures) out << "  " << f << "\n";
  }
  return out.str();
}

void write_plots(const std::string& results_dir, const std::vector<MetricsRow>& rows) {
  FitBundle bundle = fit_rows(rows);
  {
    std::ofstream out(results_dir + "/plots/loss_vs_n.csv");
    out << "family,slice,n,loss,fitted\n";
    char buf[256];
    for (const auto& [label, obs] : bundle.observations)
      for (const ScalingObservation& o : obs) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,0\n", o.family.c_str(),
                      o.slice.c_str(), o.n, o.loss);
        out << buf;
      }
    for (const auto& [label, fit] : bundle.fits) {
      const double ln_min = std::log(fit.n_min), ln_max = std::log(fit.n_max);
      for (int i = 0; i < 64; ++i) {
        const double n = std::exp(ln_min + (ln_max - ln_min) * i / 63.0);
        const auto slash = label.find('/');
        std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,1\n",
                      label.substr(0, slash).c_str(), label.substr(slash + 1).c_str(), n,
                      predict(fit, n));
        out << buf;
      }
    }
  }
  auto write_metric = [&](const std::string& file, auto metric_of, const char* tag) {
    std::ofstream out(results_dir + "/plots/" + file);
    out << "family,slice,n,loss,fitted\n";
    std::map<std::pair<std::string, std::string>, std::map<int64_t, std::vector<double>>>
        acc;
    for (const MetricsRow& r : rows) {
      if (r.metrics.split != "test") continue;
      const double value = metric_of(r);
      if (value < 0.0) continue;
      acc[{r.variant + "-" + r.alignment, "test/" + r.metrics.direction + "/" + tag}]
         [r.metrics.n_params]
             .push_back(value);
    }
    char buf[256];
    for (const auto& [key, by_n] : acc)
      for (const auto& [n, values] : by_n) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,0\n", key.first.c_str(),
                      key.second.c_str(), static_cast<double>(n), median(values));
        out << buf;
      }
  };
  write_metric("bleu_vs_n.csv", [](const MetricsRow& r) { return r.metrics.bleu; },
               "bleu");
  write_metric("accuracy_vs_n.csv",
               [](const MetricsRow& r) { return r.metrics.lang_acc; }, "accuracy");
}

}  // namespace

// ---- run_plan ----

namespace {

struct EvalSet {
  Direction dir;
  Split split;
  ParallelCorpus corpus;
  int max_src = 0;  // tag included, for the FLOPs estimate
  int max_tgt = 0;  // EOS included
};

MetricsRecord evaluate_slice(ModelState& avg, const CellSpec& cell, const EvalSet& es,
                             const ExperimentPlan& plan, const VocabLayout& layout) {
  MetricsRecord rec;
  rec.direction = direction_name(es.dir);
  rec.split = split_name(es.split);
  rec.ppl = log_perplexity(avg, es.corpus.pairs);
  rec.n_params = param_count(cell.config);
  rec.flops = flops_estimate(cell.config, es.max_src, es.max_tgt);
  rec.decode = {plan.eval.beam, plan.eval.length_penalty, plan.eval.max_len};
  if (plan.eval.decode_pairs > 0) {
    const size_t n =
        std::min(es.corpus.pairs.size(), static_cast<size_t>(plan.eval.decode_pairs));
    std::vector<std::vector<int>> hyps, refs;
    std::vector<int> intended;
    for (size_t i = 0; i < n; ++i) {
      const SequencePair& p = es.corpus.pairs[i];
      hyps.push_back(
          beam_search(avg, p.src, rec.decode, p.start_token, p.start_in_lm_stream));
      std::vector<int> ref = p.tgt;
      if (!ref.empty() && ref.back() == kEosId) ref.pop_back();
      refs.push_back(std::move(ref));
      intended.push_back(p.tgt_lang);
    }
    rec.bleu = corpus_bleu(hyps, refs);
    rec.lang_acc = language_accuracy(hyps, intended, layout);
  }
  return rec;
}

}  // namespace

RunOutcome run_plan(const ExperimentPlan& plan) {
  validate_plan(plan);
  fs::create_directories(plan.output_dir + "/plots");
  fs::create_directories(plan.output_dir + "/checkpoints");
  const std::string phash = plan_hash(plan);

  VocabLayout layout{static_cast<int>(plan.data.languages.size()),
                     plan.data.languages[0].tokens};
  std::vector<SyntheticLanguageSpec> specs;
  for (const LanguageCfg& lc : plan.data.languages)
    specs.push_back(layout.language(lc.id, lc.min_len, lc.max_len));

  const bool source_tag = plan.data.tag && (*plan.data.tag == TagPosition::SourceStart ||
                                            *plan.data.tag == TagPosition::SourceEnd);
  std::vector<ParallelCorpus> train_corpora;
  std::vector<EvalSet> eval_sets;
  for (const DirectionCfg& dc : plan.data.directions) {
    TranslationRule rule{dc.src, dc.tgt, dc.transform, dc.rotation};
    auto make = [&](int n, Split split) {
      ParallelCorpus c = generate_corpus(specs[static_cast<size_t>(dc.src)],
                                         specs[static_cast<size_t>(dc.tgt)], rule, n,
                                         plan.master_seed, split);
      if (plan.data.tag) c = tag_pairs(c, *plan.data.tag);
      return c;
    };
    if (dc.train_pairs > 0) train_corpora.push_back(make(dc.train_pairs, Split::Train));
    for (Split split : plan.eval.splits) {
      const int n = split == Split::Dev ? dc.dev_pairs : dc.test_pairs;
      if (n == 0) continue;
      EvalSet es;
      es.dir = {dc.src, dc.tgt};
      es.split = split;
      es.corpus = make(n, split);
      es.max_src =
          specs[static_cast<size_t>(dc.src)].max_len + (source_tag ? 1 : 0);
      es.max_tgt = specs[static_cast<size_t>(dc.tgt)].max_len + 1;
      eval_sets.push_back(std::move(es));
    }
  }
  std::vector<const ParallelCorpus*> train_ptrs;
  for (const ParallelCorpus& c : train_corpora) train_ptrs.push_back(&c);

  RunOutcome outcome;
  outcome.results_dir = plan.output_dir;
  std::vector<MetricsRow> rows;
  for (const CellSpec& cell : expand_cells(plan)) {
    ++outcome.cells_run;
    try {
      ModelState state = init_model(cell.config, cell.seed);
      BatchStream stream(train_ptrs,
                         {plan.data.temperature, plan.data.token_budget, cell.seed});
      const std::string cell_dir = plan.output_dir + "/checkpoints/" + cell.id;
      fs::create_directories(cell_dir);
      std::ofstream log(cell_dir + "/train.log");
      TrainConfig tc;
      tc.steps = plan.train.steps;
      tc.warmup = plan.train.warmup;
      tc.lr_scale = plan.train.lr_scale;
      tc.checkpoint_interval = plan.train.checkpoint_interval;
      tc.checkpoints_keep = plan.train.average_last;
      tc.seed = cell.seed;
      tc.checkpoint_dir = cell_dir;
      tc.log = &log;
      tc.log_interval = std::max(1, plan.train.steps / 10);
      Trainer trainer(state, stream, tc);
      trainer.run();
      ModelState avg = checkpoint_average(trainer.checkpoint_paths());
      for (const EvalSet& es : eval_sets) {
        MetricsRow row;
        row.plan = plan.name;
        row.plan_hash = phash;
        row.cell = cell.id;
        row.cell_hash = cell.hash;
        row.master_seed = plan.master_seed;
        row.seed_index = cell.seed_index;
        row.variant = variant_name(cell.variant);
        row.alignment = cell.alignment;
        row.anchor_layers = cell.anchor_layers;
        row.layers = cell.config.layers;
        row.d = cell.config.d;
        row.d_ff = cell.config.d_ff;
        row.heads = cell.config.heads;
        row.metrics = evaluate_slice(avg, cell, es, plan, layout);
        rows.push_back(std::move(row));
      }
    } catch (const std::exception& e) {
      ++outcome.cells_failed;
      outcome.failures.push_back(cell.id + ": " + e.what());
    }
  }

  {
    std::ofstream out(plan.output_dir + "/rows.csv");
    out << rows_csv_header() << "\n";
    for (const MetricsRow& r : rows) out << row_to_csv(r) << "\n";
  }
  {
    std::ofstream out(plan.output_dir + "/fits.txt");
    out << build_fit_report(&plan, phash, rows, outcome.failures);
  }
  write_plots(plan.output_dir, rows);
  return outcome;
}

// ---- presets ----

std::vector<std::pair<std::string, ExperimentPlan>> preset_plans() {
  std::vector<std::pair<std::string, ExperimentPlan>> presets;

  {
    // one reversal pair, all five variants, four scale points, both alignments
    ExperimentPlan p;
    p.name = "bilingual_scaling";
    p.master_seed = 7;
    p.seeds = 3;
    p.output_dir = "results/bilingual_scaling";
    p.data.languages = {{0, 32, 4, 8}, {1, 32, 4, 8}};
    p.data.directions = {{0, 1, StructuralTransform::Reversal, 0, 3000, 64, 64}};
    p.data.tag.reset();
    p.data.temperature = 5.0;
    p.data.token_budget = 192;
    p.grid.variants = {parse_variant("encdec"), parse_variant("prefixlm"),
                       parse_variant("prefixlm_top"), parse_variant("causallm"),
                       parse_variant("causallm_tgt")};
    p.grid.anchor_layers = {2, 4, 6, 8};
    p.grid.d = 32;
    p.grid.d_ff = 128;
    p.grid.heads = 4;
    p.grid.alignments = {"anchor", "deep", "wide"};
    p.train.steps = 700;
    p.train.warmup = 175;
    p.train.checkpoint_interval = 70;
    p.eval.splits = {Split::Dev, Split::Test};
    p.eval.beam = 4;
    p.eval.max_len = 12;
    p.eval.decode_pairs = 16;
    presets.emplace_back(p.name, std::move(p));
  }
  {
    // three languages, many-to-many, one low-resource pair at a 1:10 ratio
    ExperimentPlan p;
    p.name = "multilingual_transfer";
    p.master_seed = 13;
    p.seeds = 1;
    p.output_dir = "results/multilingual_transfer";
    p.data.languages = {{0, 32, 4, 8}, {1, 32, 4, 8}, {2, 32, 4, 8}};
    auto rot = [](int src, int tgt, int train) {
      return DirectionCfg{src,   tgt, StructuralTransform::Rotation, tgt - src,
                          train, 48,  48};
    };
    p.data.directions = {rot(0, 1, 2000), rot(1, 0, 2000), rot(0, 2, 2000),
                         rot(2, 0, 2000), rot(1, 2, 200),  rot(2, 1, 2000)};
    p.data.tag = TagPosition::SourceStart;
    p.data.temperature = 5.0;
    p.data.token_budget = 256;
    p.grid.variants = {parse_variant("encdec"), parse_variant("prefixlm"),
                       parse_variant("causallm")};
    p.grid.anchor_layers = {2};
    p.grid.d = 32;
    p.grid.d_ff = 128;
    p.grid.heads = 4;
    p.grid.alignments = {"anchor", "deep"};
    p.train.steps = 1200;
    p.train.warmup = 300;
    p.train.checkpoint_interval = 120;
    p.eval.splits = {Split::Dev, Split::Test};
    p.eval.beam = 4;
    p.eval.max_len = 12;
    p.eval.decode_pairs = 16;
    presets.emplace_back(p.name, std::move(p));
  }
  {
    // four directions trained through the pivot l0; l1-l2 held out both ways
    // with composed-rotation references
    ExperimentPlan p;
    p.name = "zero_shot";
    p.master_seed = 11;
    p.seeds = 3;
    p.output_dir = "results/zero_shot";
    p.data.languages = {{0, 32, 4, 8}, {1, 32, 4, 8}, {2, 32, 4, 8}};
    auto rot = [](int src, int tgt, int train, int test) {
      return DirectionCfg{src,   tgt, StructuralTransform::Rotation, tgt - src,
                          train, 0,   test};
    };
    p.data.directions = {rot(0, 1, 2500, 48), rot(1, 0, 2500, 48), rot(0, 2, 2500, 48),
                         rot(2, 0, 2500, 48), rot(1, 2, 0, 48),    rot(2, 1, 0, 48)};
    p.data.tag = TagPosition::SourceStart;
    p.data.temperature = 5.0;
    p.data.token_budget = 256;
    p.grid.variants = {parse_variant("prefixlm"), parse_variant("causallm")};
    p.grid.anchor_layers = {2};
    p.grid.d = 32;
    p.grid.d_ff = 128;
    p.grid.heads = 4;
    p.grid.alignments = {"deep"};
    p.train.steps = 1500;
    p.train.warmup = 300;
    p.train.checkpoint_interval = 150;
    p.eval.splits = {Split::Test};
    p.eval.beam = 4;
    p.eval.max_len = 12;
    p.eval.decode_pairs = 32;
    presets.emplace_back(p.name, std::move(p));
  }
  return presets;
}

// ---- CLI ----

int cli_main(int argc, char** argv) {
  CLI::App app{"architecture workbench for synthetic translation scaling studies"};
  app.require_subcommand(1);

  std::string plan_path, obs_path, results_dir, write_dir;
  double n0_flag = 0.0;
  CLI::App* cmd_run = app.add_subcommand("run", "train and evaluate a plan file");
  cmd_run->add_option("plan", plan_path, "plan JSON file")->required();
  CLI::App* cmd_presets = app.add_subcommand("presets", "list the built-in plans");
  cmd_presets->add_option("--write", write_dir, "also write each plan JSON here");
  CLI::App* cmd_fit =
      app.add_subcommand("fit", "fit power laws to an observations CSV");
  cmd_fit->add_option("observations", obs_path, "CSV with family,slice,n,loss")
      ->required();
  cmd_fit->add_option("--n0", n0_flag, "anchor n0 (default: smallest n per curve)");
  CLI::App* cmd_report =
      app.add_subcommand("report", "recompute the fit report from rows.csv");
  cmd_report->add_option("results", results_dir, "results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cmd_run->parsed()) {
      ExperimentPlan plan = load_plan(plan_path);
      validate_plan(plan);
      RunOutcome out = run_plan(plan);
      std::cout << "results: " << out.results_dir << " (" << out.cells_run << " cells, "
                << out.cells_failed << " failed)\n";
      for (const std::string& f : out.failures) std::cout << "failed cell: " << f << "\n";
      return out.cells_failed > 0 ? 1 : 0;
    }
    if (cmd_presets->parsed()) {
      for (const auto& [name, plan] : preset_plans()) {
        std::cout << name << ": " << plan.grid.variants.size() << " variants, "
                  << expand_cells(plan).size() << " cells, output " << plan.output_dir
                  << "\n";
        if (!write_dir.empty()) {
          fs::create_directories(write_dir);
          std::ofstream out(write_dir + "/" + name + ".json");
          out << plan_to_json(plan) << "\n";
        }
      }
      return 0;
    }
    if (cmd_fit->parsed()) {
      const std::vector<ScalingObservation> obs = read_observations(obs_path);
      std::map<std::pair<std::string, std::string>, std::vector<ScalingObservation>> by;
      for (const ScalingObservation& o : obs) by[{o.family, o.slice}].push_back(o);
      std::vector<std::pair<std::string, PowerLawFit>> fits;
      for (const auto& [key, group] : by) {
        if (group.size() < 2) {
          std::cout << "skipped (needs >= 2 points): " << key.first << "/" << key.second
                    << "\n";
          continue;
        }
        double n0 = n0_flag;
        if (n0 <= 0.0)
          for (const ScalingObservation& o : group)
            n0 = n0 <= 0.0 ? o.n : std::min(n0, o.n);
        fits.emplace_back(key.first + "/" + key.second, fit_power_law(group, n0));
      }
      for (const auto& [label, fit] : fits)
        std::cout << fit_report_line(label, fit) << "\n";
      if (fits.size() >= 2) std::cout << compare_families(fits);
      return 0;
    }
    if (cmd_report->parsed()) {
      const std::vector<MetricsRow> rows = read_rows_csv(results_dir + "/rows.csv");
      std::cout << build_fit_report(nullptr, "", rows, {});
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace lmmt
