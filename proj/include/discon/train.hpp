#pragma once

// Deterministic mini-batch training shared by the prior and the DisCon model.
// Every random draw derives from (seed, step), so a run resumed from a saved
// TrainState replays the uninterrupted run exactly.

#include "discon/config.hpp"
#include "discon/optim.hpp"
#include "discon/prior.hpp"

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace discon {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int warmup_steps = 100;
  double ema_decay = 0.999;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  std::uint64_t seed = 0;
  // The batch is split into this many gradient shards, reduced in fixed
  // order; `threads` only changes wall-clock, never results.
  int grad_shards = 1;
  int threads = 1;

  void validate() const;
  KeyValues to_kv() const;
  static TrainConfig from_kv(const KeyValues& kv);
};

struct TrainState {
  std::uint64_t step = 0;
  AdamW optimizer;
  Ema ema;
  double epoch_loss_sum = 0.0;
  std::uint64_t epoch_loss_count = 0;
};

struct MetricRecord {
  std::uint64_t step = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

struct TrainHooks {
  std::function<void(const MetricRecord&)> on_metric;
  // Called after each completed epoch (1-based) with the model's current state.
  std::function<void(const TrainState&, int epoch)> on_epoch_end;
  // Stop once this many steps have been taken in total; 0 runs all epochs.
  std::uint64_t stop_at_step = 0;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::uint64_t last_good_step)
      : std::runtime_error(what), last_good_step(last_good_step) {}
  std::uint64_t last_good_step;
};

TrainState init_train_state(const LossModel& model, const TrainConfig& config);
std::uint64_t steps_per_epoch(int n_samples, int batch_size);

// Trains from state.step until config.epochs are complete (or the stop step).
// On a non-finite loss or gradient the model is left at the last good step
// and TrainingAborted is thrown.
void train(LossModel& model, TrainState& state, const TokenBatch& train_data, const TokenBatch* val_data,
           const TrainConfig& config, const TrainHooks& hooks = {});

// Mean loss over `data` under fixed randomness, in chunks of batch_size.
double evaluate_loss(const LossModel& model, const std::vector<Matrix>& weights, const TokenBatch& data,
                     int batch_size, std::uint64_t seed);

}  // namespace discon
