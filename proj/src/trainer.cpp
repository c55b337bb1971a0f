#include "lmmt/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <stdexcept>

#include "lmmt/rng.hpp"

namespace lmmt {

double lr_schedule(int64_t step, int d, int warmup, double scale) {
  if (step < 1)
    throw std::invalid_argument("lr_schedule: step must be >= 1, got " +
                                std::to_string(step));
  if (warmup < 1)
    throw std::invalid_argument("lr_schedule: warmup must be >= 1, got " +
                                std::to_string(warmup));
  const double t = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return scale / std::sqrt(static_cast<double>(d)) *
         std::min(1.0 / std::sqrt(t), t / (w * std::sqrt(w)));
}

namespace {

std::string batch_fingerprint(const Batch& batch) {
  uint64_t h = 0x9E3779B97F4A7C15ULL;
  for (const SequencePair& p : batch) {
    h = mix64(h ^ (static_cast<uint64_t>(p.src_lang) * 31 +
                   static_cast<uint64_t>(p.tgt_lang)));
    for (int id : p.src) h = mix64(h + static_cast<uint64_t>(id));
    for (int id : p.tgt) h = mix64(h + static_cast<uint64_t>(id));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

Trainer::Trainer(ModelState& state, const BatchStream& stream, TrainConfig config)
    : state_(state), stream_(stream), config_(config) {
  if (config_.steps < 1)
    throw std::invalid_argument("trainer: steps must be >= 1, got " +
                                std::to_string(config_.steps));
  if (config_.warmup < 1)
    throw std::invalid_argument("trainer: warmup must be >= 1, got " +
                                std::to_string(config_.warmup));
  if (config_.checkpoints_keep < 1)
    throw std::invalid_argument("trainer: checkpoints_keep must be >= 1");
  set_training_mode(state_, true);
  for (auto& [name, t] : named_parameters(state_)) {
    adam_m_[name].assign(t.size(), 0.0f);
    adam_v_[name].assign(t.size(), 0.0f);
  }
}

TrainStats Trainer::step_once() {
  const int64_t t = step_ + 1;
  Batch batch = stream_.batch(t);
  TrainStats stats;
  stats.step = t;
  stats.lr = lr_schedule(t, state_.config.d, config_.warmup, config_.lr_scale);
  for (const SequencePair& p : batch)
    stats.batch_tokens += static_cast<int64_t>(p.src.size() + p.tgt.size());

  RngStream drop_rng(config_.seed, "dropout", static_cast<uint64_t>(t));
  DropoutSpec drop{state_.config.dropout, &drop_rng, true};
  Tape tape;
  ForwardResult fwd = forward_batch(&tape, state_, batch, drop);
  Tensor loss = training_loss(&tape, state_, fwd, &stats.src_part, &stats.tgt_part);
  stats.loss = loss.item();
  if (!std::isfinite(stats.loss))
    throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(t) +
                             " on batch " + batch_fingerprint(batch));

  auto params = named_parameters(state_);
  for (auto& [name, p] : params) p.zero_grad();
  tape.backward(loss);

  double sq = 0.0;
  for (auto& [name, p] : params)
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  stats.grad_norm = std::sqrt(sq);
  if (!std::isfinite(stats.grad_norm))
    throw std::runtime_error("train_step: non-finite gradient at step " +
                             std::to_string(t) + " on batch " + batch_fingerprint(batch));
  const double gscale =
      stats.grad_norm > config_.clip_norm ? config_.clip_norm / stats.grad_norm : 1.0;

  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    std::vector<float>& m = adam_m_[name];
    std::vector<float>& v = adam_v_[name];
    auto vals = p.values();
    auto grads = p.grad();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double g = static_cast<double>(grads[i]) * gscale;
      m[i] = static_cast<float>(config_.beta1 * m[i] + (1.0 - config_.beta1) * g);
      v[i] = static_cast<float>(config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      vals[i] = static_cast<float>(vals[i] - stats.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
  step_ = t;
  return stats;
}

void Trainer::run() {
  namespace fs = std::filesystem;
  const int interval = config_.checkpoint_interval;
  using clock = std::chrono::steady_clock;
  auto window_start = clock::now();
  int64_t window_tokens = 0;
  while (step_ < config_.steps) {
    TrainStats s = step_once();
    window_tokens += s.batch_tokens;
    if (config_.log && (s.step % config_.log_interval == 0 || s.step == config_.steps)) {
      const double secs =
          std::chrono::duration<double>(clock::now() - window_start).count();
      char line[256];
      std::snprintf(line, sizeof(line),
                    "step %lld lr %.6g loss %.6f src %.6f tgt %.6f gnorm %.4f tok/s %.1f",
                    static_cast<long long>(s.step), s.lr, s.loss, s.src_part, s.tgt_part,
                    s.grad_norm, secs > 0 ? window_tokens / secs : 0.0);
      (*config_.log) << line << "\n";
      config_.log->flush();
      window_start = clock::now();
      window_tokens = 0;
    }
    if (!config_.checkpoint_dir.empty() &&
        ((interval > 0 && s.step % interval == 0) || s.step == config_.steps)) {
      char name[32];
      std::snprintf(name, sizeof(name), "step_%06lld.ckpt",
                    static_cast<long long>(s.step));
      save_checkpoint(config_.checkpoint_dir + "/" + name);
      while (static_cast<int>(checkpoint_paths_.size()) > config_.checkpoints_keep) {
        fs::remove(checkpoint_paths_.front());
        checkpoint_paths_.erase(checkpoint_paths_.begin());
      }
    }
  }
}

void Trainer::save_checkpoint(const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  TensorBundle bundle;
  bundle.meta = config_meta(state_.config);
  bundle.meta["kind"] = "checkpoint";
  bundle.meta["step"] = std::to_string(step_);
  bundle.meta["seed"] = std::to_string(config_.seed);
  bundle.tensors = named_parameters(state_);
  for (auto& [name, vec] : adam_m_) {
    Tensor t(1, static_cast<int>(vec.size()));
    std::copy(vec.begin(), vec.end(), t.values().begin());
    bundle.tensors.emplace_back("adam.m." + name, t);
  }
  for (auto& [name, vec] : adam_v_) {
    Tensor t(1, static_cast<int>(vec.size()));
    std::copy(vec.begin(), vec.end(), t.values().begin());
    bundle.tensors.emplace_back("adam.v." + name, t);
  }
  save_bundle(path, bundle);
  if (checkpoint_paths_.empty() || checkpoint_paths_.back() != path)
    checkpoint_paths_.push_back(path);
}

void Trainer::load_checkpoint(const std::string& path) {
  TensorBundle bundle = load_bundle(path);
  const auto expect = config_meta(state_.config);
  for (const auto& [k, v] : expect) {
    auto it = bundle.meta.find(k);
    if (it == bundle.meta.end() || it->second != v)
      throw std::runtime_error("load_checkpoint: config key '" + k + "' is '" +
                               (it == bundle.meta.end() ? "<missing>" : it->second) +
                               "', expected '" + v + "'");
  }
  auto step_it = bundle.meta.find("step");
  if (step_it == bundle.meta.end())
    throw std::runtime_error("load_checkpoint: missing step in " + path);
  std::map<std::string, Tensor> by_name(bundle.tensors.begin(), bundle.tensors.end());
  auto take = [&](const std::string& name) -> Tensor {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("load_checkpoint: checkpoint lacks entry '" + name + "'");
    return it->second;
  };
  for (auto& [name, p] : named_parameters(state_)) {
    Tensor t = take(name);
    if (t.rows() != p.rows() || t.cols() != p.cols())
      throw std::runtime_error("load_checkpoint: entry '" + name + "' has shape " +
                               t.shape_str() + ", expected " + p.shape_str());
    std::copy(t.values().begin(), t.values().end(), p.values().begin());
    std::vector<float>& m = adam_m_[name];
    std::vector<float>& v = adam_v_[name];
    Tensor tm = take("adam.m." + name);
    Tensor tv = take("adam.v." + name);
    if (tm.size() != m.size() || tv.size() != v.size())
      throw std::runtime_error("load_checkpoint: optimizer state size mismatch for '" +
                               name + "'");
    std::copy(tm.values().begin(), tm.values().end(), m.begin());
    std::copy(tv.values().begin(), tv.values().end(), v.begin());
  }
  step_ = std::stoll(step_it->second);
}

ModelState checkpoint_average(const std::vector<std::string>& paths) {
  if (paths.empty())
    throw std::invalid_argument("checkpoint_average: no checkpoints given");
  std::vector<TensorBundle> bundles;
  bundles.reserve(paths.size());
  for (const std::string& p : paths) bundles.push_back(load_bundle(p));

  const TensorBundle& ref = bundles.front();
  std::vector<std::string> differing;
  for (size_t b = 1; b < bundles.size(); ++b) {
    std::map<std::string, std::pair<int, int>> lhs, rhs;
    for (const auto& [n, t] : ref.tensors) lhs[n] = {t.rows(), t.cols()};
    for (const auto& [n, t] : bundles[b].tensors) rhs[n] = {t.rows(), t.cols()};
    for (const auto& [n, shape] : lhs) {
      auto it = rhs.find(n);
      if (it == rhs.end())
        differing.push_back(n + " (missing from " + paths[b] + ")");
      else if (it->second != shape)
        differing.push_back(n + " (shape differs in " + paths[b] + ")");
    }
    for (const auto& [n, shape] : rhs)
      if (!lhs.count(n)) differing.push_back(n + " (extra in " + paths[b] + ")");
  }
  if (!differing.empty()) {
    std::string msg = "checkpoint_average: parameter manifests differ:";
    for (const std::string& d : differing) msg += " " + d + ";";
    throw std::runtime_error(msg);
  }

  ModelState state = init_model(config_from_meta(ref.meta), 0);
  auto params = named_parameters(state);
  for (auto& [name, p] : params) {
    std::vector<double> acc(p.size(), 0.0);
    for (const TensorBundle& b : bundles) {
      const Tensor* src = nullptr;
      for (const auto& [n, t] : b.tensors)
        if (n == name) {
          src = &t;
          break;
        }
      if (!src)
        throw std::runtime_error("checkpoint_average: parameter '" + name +
                                 "' missing from a checkpoint");
      auto vals = src->values();
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += vals[i];
    }
    auto out = p.values();
    for (size_t i = 0; i < acc.size(); ++i)
      out[i] = static_cast<float>(acc[i] / static_cast<double>(bundles.size()));
  }
  return state;
}

std::vector<std::string> gradient_flow_audit(ModelState& state, const Batch& batch) {
  set_training_mode(state, true);
  auto params = named_parameters(state);
  for (auto& [name, p] : params) p.zero_grad();
  Tape tape;
  ForwardResult fwd = forward_batch(&tape, state, batch, {});
  Tensor loss = training_loss(&tape, state, fwd, nullptr, nullptr);
  tape.backward(loss);
  std::vector<std::string> dead;
  for (auto& [name, p] : params) {
    bool any = false;
    for (float g : p.grad())
      if (g != 0.0f) {
        any = true;
        break;
      }
    if (!any) dead.push_back(name);
  }
  return dead;
}

}  // namespace lmmt
