#pragma once

// Optimization loop: Adam with warmup / inverse-sqrt schedule, label smoothing
// via the model config, dropout, global-norm clipping, checkpointing and
// checkpoint averaging.  Training is deterministic given (config.seed, stream):
// batches come from BatchStream::batch(t) and dropout from a per-step RNG
// stream, so a reloaded checkpoint continues bit-for-bit.

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "lmmt/data.hpp"
#include "lmmt/model.hpp"

namespace lmmt {

struct TrainConfig {
  int steps = 1000;
  int warmup = 400;
  double lr_scale = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 1.0;
  int checkpoint_interval = 0;  // 0 = only at the final step
  int checkpoints_keep = 10;    // older files are pruned
  uint64_t seed = 1;
  std::string checkpoint_dir;  // empty = no checkpoints written
  std::ostream* log = nullptr;
  int log_interval = 50;
};

// scale * d^{-1/2} * min(t^{-1/2}, t * W^{-3/2}); peak at t = W
double lr_schedule(int64_t step, int d, int warmup, double scale);

struct TrainStats {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double src_part = 0.0;
  double tgt_part = 0.0;
  double grad_norm = 0.0;
  int64_t batch_tokens = 0;
};

class Trainer {
 public:
  Trainer(ModelState& state, const BatchStream& stream, TrainConfig config);

  // one optimizer step at step index step()+1
  TrainStats step_once();

  // steps from the current position through config.steps, checkpointing on the
  // configured interval and always at the final step
  void run();

  int64_t step() const { return step_; }
  const std::vector<std::string>& checkpoint_paths() const { return checkpoint_paths_; }

  void save_checkpoint(const std::string& path);
  void load_checkpoint(const std::string& path);  // params, moments and step

 private:
  ModelState& state_;
  const BatchStream& stream_;
  TrainConfig config_;
  int64_t step_ = 0;
  std::map<std::string, std::vector<float>> adam_m_, adam_v_;
  std::vector<std::string> checkpoint_paths_;
};

// elementwise mean of the model parameters across checkpoint files; optimizer
// state is discarded
ModelState checkpoint_average(const std::vector<std::string>& paths);

// names of parameter tensors whose gradient is entirely zero after one
// backward pass on the batch with dropout disabled; expected empty for every
// variant (the output projection is shared between source and target
// predictions, so even tgt_only leaves no dead tensors)
std::vector<std::string> gradient_flow_audit(ModelState& state, const Batch& batch);

}  // namespace lmmt
