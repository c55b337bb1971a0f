#pragma once

// Config-driven experiment runner: expands a plan into (variant x scale point x
// alignment x seed) cells, trains and evaluates each cell, and writes
// rows.csv / fits.txt / plots/*.csv under the plan's output directory.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lmmt/data.hpp"
#include "lmmt/eval.hpp"
#include "lmmt/model.hpp"
#include "lmmt/scaling.hpp"
#include "lmmt/trainer.hpp"

namespace lmmt {

struct LanguageCfg {
  int id = 0;
  int tokens = 32;  // content vocab block size (equal across languages)
  int min_len = 4;
  int max_len = 8;
};

struct DirectionCfg {
  int src = 0;
  int tgt = 1;
  StructuralTransform transform = StructuralTransform::Identity;
  int rotation = 0;
  int train_pairs = 0;  // 0 = held out (evaluated, never trained on)
  int dev_pairs = 0;
  int test_pairs = 0;
};

struct DataCfg {
  std::vector<LanguageCfg> languages;
  std::vector<DirectionCfg> directions;
  std::optional<TagPosition> tag;  // absent = untagged
  double temperature = 5.0;
  int token_budget = 256;
};

struct GridCfg {
  std::vector<ModelVariant> variants;
  std::vector<int> anchor_layers;  // scale points, as EncDec anchor depths
  int d = 64;
  int d_ff = 256;
  int heads = 4;
  // how each variant realizes a scale point: "anchor" (EncDec only), "deep"
  // and/or "wide" (LM variants, via align_configs)
  std::vector<std::string> alignments = {"anchor", "deep", "wide"};
};

struct TrainPlanCfg {
  int steps = 600;
  int warmup = 150;
  double lr_scale = 1.0;
  float dropout = 0.1f;
  float label_smoothing = 0.1f;
  int checkpoint_interval = 0;  // 0 = steps/10, so averaging sees 10 snapshots
  int average_last = 10;
};

struct EvalPlanCfg {
  std::vector<Split> splits = {Split::Dev, Split::Test};
  int beam = 4;
  double length_penalty = 0.5;
  int max_len = 24;
  int decode_pairs = 16;  // 0 disables decoding (PPL only)
};

struct ExperimentPlan {
  std::string name;
  uint64_t master_seed = 1;
  int seeds = 1;  // independent training seeds; rows carry the seed index
  std::string output_dir;
  DataCfg data;
  GridCfg grid;
  TrainPlanCfg train;
  EvalPlanCfg eval;
};

// throws std::invalid_argument naming the offending field on any violation
void validate_plan(const ExperimentPlan& plan);

ExperimentPlan parse_plan(const std::string& json_text);
ExperimentPlan load_plan(const std::string& path);
std::string plan_to_json(const ExperimentPlan& plan);

// SHA-1 of the canonical JSON serialization
std::string plan_hash(const ExperimentPlan& plan);

struct CellSpec {
  std::string id;  // e.g. "prefixlm-deep-a4-s1"
  ModelVariant variant;
  std::string alignment;  // anchor | deep | wide
  int anchor_layers = 0;
  int seed_index = 0;
  uint64_t seed = 0;  // training seed for this cell
  ModelConfig config;
  std::string hash;  // SHA-1 over the resolved cell settings
};

std::vector<CellSpec> expand_cells(const ExperimentPlan& plan);

struct CellResult {
  CellSpec cell;
  std::vector<MetricsRecord> records;
  bool failed = false;
  std::string error;
};

struct RunOutcome {
  std::string results_dir;
  int cells_run = 0;
  int cells_failed = 0;
  std::vector<std::string> failures;
};

// trains and evaluates every cell, then writes rows.csv, fits.txt and
// plots/*.csv; cell failures are recorded and skipped
RunOutcome run_plan(const ExperimentPlan& plan);

// bilingual_scaling, multilingual_transfer, zero_shot
std::vector<std::pair<std::string, ExperimentPlan>> preset_plans();

struct MetricsRow {
  std::string plan;
  std::string plan_hash;
  std::string cell;
  std::string cell_hash;
  uint64_t master_seed = 0;
  int seed_index = 0;
  std::string variant;
  std::string alignment;
  int anchor_layers = 0;
  int layers = 0;
  int d = 0;
  int d_ff = 0;
  int heads = 0;
  MetricsRecord metrics;
};

std::string rows_csv_header();
std::string row_to_csv(const MetricsRow& row);
std::vector<MetricsRow> read_rows_csv(const std::string& path);

std::string sha1_hex(const std::string& bytes);

// CLI entry: run <plan-file> | presets | fit <observations.csv> |
// report <results-dir>; exit 0 success, 1 cell failures, 2 validation error
int cli_main(int argc, char** argv);

}  // namespace lmmt
