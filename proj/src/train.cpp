#include "discon/train.hpp"

#include <cmath>
#include <numeric>
#include <thread>

namespace discon {

namespace {
constexpr std::uint64_t kStepStream = 0x5354455000000000ULL;
constexpr std::uint64_t kEpochStream = 0x45504f4300000000ULL;
constexpr std::uint64_t kValStream = 0x56414c0000000000ULL;
}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train: ema_decay must lie in [0, 1)");
  if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0, 1)");
  if (grad_shards < 1 || grad_shards > batch_size) throw ConfigError("train: grad_shards must lie in [1, batch_size]");
  if (threads < 1) throw ConfigError("train: threads must be >= 1");
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  kv.set("epochs", epochs);
  kv.set("batch_size", batch_size);
  kv.set("learning_rate", learning_rate);
  kv.set("warmup_steps", warmup_steps);
  kv.set("ema_decay", ema_decay);
  kv.set("grad_clip", grad_clip);
  kv.set("weight_decay", weight_decay);
  kv.set("beta1", beta1);
  kv.set("beta2", beta2);
  kv.set("seed", seed);
  kv.set("grad_shards", grad_shards);
  kv.set("threads", threads);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  c.epochs = kv.integer("epochs", c.epochs);
  c.batch_size = kv.integer("batch_size", c.batch_size);
  c.learning_rate = kv.real("learning_rate", c.learning_rate);
  c.warmup_steps = kv.integer("warmup_steps", c.warmup_steps);
  c.ema_decay = kv.real("ema_decay", c.ema_decay);
  c.grad_clip = kv.real("grad_clip", c.grad_clip);
  c.weight_decay = kv.real("weight_decay", c.weight_decay);
  c.beta1 = kv.real("beta1", c.beta1);
  c.beta2 = kv.real("beta2", c.beta2);
  c.seed = kv.u64("seed", c.seed);
  c.grad_shards = kv.integer("grad_shards", c.grad_shards);
  c.threads = kv.integer("threads", c.threads);
  c.validate();
  return c;
}

TrainState init_train_state(const LossModel& model, const TrainConfig& config) {
  TrainState s;
  s.optimizer = AdamW(model.params(), {config.beta1, config.beta2, 1e-8, config.weight_decay});
  s.ema = Ema(model.params().values());
  return s;
}

std::uint64_t steps_per_epoch(int n_samples, int batch_size) {
  return (static_cast<std::uint64_t>(n_samples) + batch_size - 1) / static_cast<std::uint64_t>(batch_size);
}

double evaluate_loss(const LossModel& model, const std::vector<Matrix>& weights, const TokenBatch& data,
                     int batch_size, std::uint64_t seed) {
  double total = 0.0;
  const Rng root = Rng(seed).split(kValStream);
  std::uint64_t chunk = 0;
  for (int start = 0; start < data.size(); start += batch_size, ++chunk) {
    const int end = std::min(data.size(), start + batch_size);
    std::vector<int> idx(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    Rng rng = root.split(chunk);
    Graph g;
    BoundParams p(g, weights, false);
    total += model.loss(p, data.subset(idx), rng).value()(0, 0) * (end - start);
  }
  return total / data.size();
}

namespace {

struct ShardResult {
  double loss = 0.0;
  std::vector<Matrix> grads;
  std::string error;
};

ShardResult run_shard(const LossModel& model, const TokenBatch& batch, Rng rng) {
  ShardResult r;
  try {
    Graph g;
    BoundParams p(g, model.params(), true);
    Var loss = model.loss(p, batch, rng);
    r.loss = loss.value()(0, 0);
    if (!std::isfinite(r.loss)) throw NumericError("loss is not finite");
    r.grads = p.gradients(g.backward(loss));
  } catch (const NumericError& e) {
    r.error = e.what();
  }
  return r;
}

}  // namespace

void train(LossModel& model, TrainState& state, const TokenBatch& train_data, const TokenBatch* val_data,
           const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (train_data.size() == 0) throw std::invalid_argument("train: empty training set");
  const std::uint64_t per_epoch = steps_per_epoch(train_data.size(), config.batch_size);
  const std::uint64_t total = per_epoch * static_cast<std::uint64_t>(config.epochs);
  const std::uint64_t stop = hooks.stop_at_step > 0 ? std::min(total, hooks.stop_at_step) : total;
  const Rng root(config.seed);
  auto emit = [&](std::uint64_t step, const char* split, const char* metric, double value) {
    if (hooks.on_metric) hooks.on_metric({step, split, metric, value});
  };

  if (state.step == 0 && val_data != nullptr && val_data->size() > 0) {
    emit(0, "val", "loss", evaluate_loss(model, state.ema.values(), *val_data, config.batch_size, config.seed));
  }

  while (state.step < stop) {
    const std::uint64_t epoch = state.step / per_epoch;
    const std::uint64_t in_epoch = state.step % per_epoch;
    Rng order_rng = root.split(kEpochStream + epoch);
    const std::vector<int> order = order_rng.permutation(train_data.size());
    const auto begin = static_cast<std::size_t>(in_epoch * config.batch_size);
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
    const std::vector<int> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));

    // Contiguous shards, each with its own stream and weight n_shard / n.
    const Rng step_rng = root.split(kStepStream + state.step);
    const int shards = std::min<int>(config.grad_shards, static_cast<int>(batch_idx.size()));
    std::vector<TokenBatch> shard_batches;
    std::vector<double> weights;
    for (int s = 0; s < shards; ++s) {
      const std::size_t a = batch_idx.size() * static_cast<std::size_t>(s) / static_cast<std::size_t>(shards);
      const std::size_t b = batch_idx.size() * static_cast<std::size_t>(s + 1) / static_cast<std::size_t>(shards);
      shard_batches.push_back(train_data.subset(std::span<const int>(batch_idx.data() + a, b - a)));
      weights.push_back(static_cast<double>(b - a) / static_cast<double>(batch_idx.size()));
    }
    std::vector<ShardResult> results(static_cast<std::size_t>(shards));
    if (config.threads > 1 && shards > 1) {
      std::vector<std::jthread> pool;
      for (int s = 0; s < shards; ++s) {
        pool.emplace_back([&, s] { results[s] = run_shard(model, shard_batches[s], step_rng.split(s)); });
        if (static_cast<int>(pool.size()) == config.threads) pool.clear();
      }
    } else {
      for (int s = 0; s < shards; ++s) results[s] = run_shard(model, shard_batches[s], step_rng.split(s));
    }

    double loss = 0.0;
    std::vector<Matrix> grads;
    for (int s = 0; s < shards; ++s) {
      if (!results[s].error.empty()) {
        throw TrainingAborted("step " + std::to_string(state.step) + ": " + results[s].error, state.step);
      }
      loss += weights[s] * results[s].loss;
      if (grads.empty()) {
        grads = std::move(results[s].grads);
        for (auto& g : grads) g *= weights[s];
      } else {
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += weights[s] * results[s].grads[i];
      }
    }
    try {
      clip_grad_norm(grads, config.grad_clip);
    } catch (const NumericError& e) {
      throw TrainingAborted("step " + std::to_string(state.step) + ": " + e.what(), state.step);
    }

    state.optimizer.step(model.params(), grads, warmup_lr(config.learning_rate, config.warmup_steps, state.step));
    state.ema.update(model.params().values(), ema_decay_at(config.ema_decay, state.step));
    ++state.step;
    state.epoch_loss_sum += loss;
    ++state.epoch_loss_count;
    emit(state.step, "train", "step_loss", loss);

    if (state.step % per_epoch == 0) {
      const int done = static_cast<int>(state.step / per_epoch);
      emit(state.step, "train", "loss", state.epoch_loss_sum / static_cast<double>(state.epoch_loss_count));
      state.epoch_loss_sum = 0.0;
      state.epoch_loss_count = 0;
      if (val_data != nullptr && val_data->size() > 0) {
        emit(state.step, "val", "loss",
             evaluate_loss(model, state.ema.values(), *val_data, config.batch_size, config.seed));
      }
      if (hooks.on_epoch_end) hooks.on_epoch_end(state, done);
    }
  }
}

}  // namespace discon
