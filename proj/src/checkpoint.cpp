#include "discon/checkpoint.hpp"

namespace discon {

std::string to_string(CheckpointKind k) {
  switch (k) {
    case CheckpointKind::prior: return "prior";
    case CheckpointKind::discon: return "discon";
    case CheckpointKind::tokenizer: return "tokenizer";
  }
  return "unknown";
}

namespace {

void write_list(ByteWriter& w, const std::vector<Matrix>& ms) {
  w.u32(static_cast<std::uint32_t>(ms.size()));
  for (const auto& m : ms) w.matrix(m);
}

std::vector<Matrix> read_list(ByteReader& r) {
  const std::uint32_t n = r.u32();
  if (n > r.remaining()) throw TruncatedError("checkpoint: tensor count exceeds payload");
  std::vector<Matrix> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(r.matrix());
  return out;
}

void copy_params(ParamSet& dst, const Checkpoint& ckpt) {
  if (dst.size() != ckpt.params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.params.size()) + " tensors, model expects " +
                      std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const Matrix& src = ckpt.params[i];
    if (dst.name(i) != ckpt.names[i] || dst.value(i).rows() != src.rows() || dst.value(i).cols() != src.cols()) {
      throw FormatError("checkpoint tensor '" + ckpt.names[i] + "' " + shape_string(src) + " does not match model '" +
                        dst.name(i) + "' " + shape_string(dst.value(i)));
    }
    dst.value(i) = src;
  }
}

void require_kind(const Checkpoint& ckpt, CheckpointKind expected) {
  if (ckpt.kind != expected) {
    throw KindError("expected a " + to_string(expected) + " checkpoint, got " + to_string(ckpt.kind));
  }
}

}  // namespace

std::string serialize(const Checkpoint& c) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(c.kind));
  w.string(c.config.to_text());
  w.u32(static_cast<std::uint32_t>(c.names.size()));
  for (const auto& n : c.names) w.string(n);
  write_list(w, c.params);
  write_list(w, c.ema);
  write_list(w, c.adam_m);
  write_list(w, c.adam_v);
  w.u64(c.adam_steps);
  w.u64(c.step);
  w.u64(c.rng_key);
  w.u64(c.rng_counter);
  w.f64(c.epoch_loss_sum);
  w.u64(c.epoch_loss_count);
  return frame(kCheckpointMagic, kCheckpointVersion, w.bytes());
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  ByteReader r(unframe(bytes, kCheckpointMagic, kCheckpointVersion));
  Checkpoint c;
  const std::uint32_t kind = r.u32();
  if (kind < 1 || kind > 3) throw FormatError("checkpoint: unknown kind tag " + std::to_string(kind));
  c.kind = static_cast<CheckpointKind>(kind);
  c.config = KeyValues::from_text(r.string());
  const std::uint32_t n = r.u32();
  if (n > r.remaining()) throw TruncatedError("checkpoint: name count exceeds payload");
  for (std::uint32_t i = 0; i < n; ++i) c.names.push_back(r.string());
  c.params = read_list(r);
  c.ema = read_list(r);
  c.adam_m = read_list(r);
  c.adam_v = read_list(r);
  c.adam_steps = r.u64();
  c.step = r.u64();
  c.rng_key = r.u64();
  c.rng_counter = r.u64();
  c.epoch_loss_sum = r.f64();
  c.epoch_loss_count = r.u64();
  if (!r.done()) throw FormatError("checkpoint: trailing bytes in payload");
  if (c.params.size() != c.names.size() || (!c.ema.empty() && c.ema.size() != c.params.size())) {
    throw FormatError("checkpoint: tensor lists disagree in length");
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) { write_file(path, serialize(ckpt)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

Checkpoint load_checkpoint(const std::filesystem::path& path, CheckpointKind expected) {
  Checkpoint c = load_checkpoint(path);
  require_kind(c, expected);
  return c;
}

Checkpoint make_checkpoint(CheckpointKind kind, const KeyValues& model_config, const TrainConfig& train,
                           const LossModel& model, const TrainState& state) {
  Checkpoint c;
  c.kind = kind;
  c.config.merge("model", model_config);
  c.config.merge("train", train.to_kv());
  c.names = model.params().names();
  c.params = model.params().values();
  c.ema = state.ema.values();
  c.adam_m = state.optimizer.first_moment();
  c.adam_v = state.optimizer.second_moment();
  c.adam_steps = state.optimizer.steps();
  c.step = state.step;
  const Rng root(train.seed);
  c.rng_key = root.key();
  c.rng_counter = root.counter();
  c.epoch_loss_sum = state.epoch_loss_sum;
  c.epoch_loss_count = state.epoch_loss_count;
  return c;
}

PriorModel prior_from(const Checkpoint& ckpt) {
  require_kind(ckpt, CheckpointKind::prior);
  PriorModel model(PriorConfig::from_kv(ckpt.config.section("model")), 0);
  copy_params(model.params(), ckpt);
  return model;
}

DisConModel discon_from(const Checkpoint& ckpt) {
  require_kind(ckpt, CheckpointKind::discon);
  DisConModel model(DisConConfig::from_kv(ckpt.config.section("model")), 0);
  copy_params(model.params(), ckpt);
  return model;
}

TrainConfig train_config_from(const Checkpoint& ckpt) { return TrainConfig::from_kv(ckpt.config.section("train")); }

TrainState train_state_from(const Checkpoint& ckpt, const LossModel& model) {
  const TrainConfig tc = train_config_from(ckpt);
  TrainState s = init_train_state(model, tc);
  if (ckpt.ema.size() != ckpt.params.size() || ckpt.adam_m.size() != ckpt.params.size() ||
      ckpt.adam_v.size() != ckpt.params.size()) {
    throw FormatError("checkpoint carries no resumable training state");
  }
  s.ema.values() = ckpt.ema;
  s.optimizer.first_moment() = ckpt.adam_m;
  s.optimizer.second_moment() = ckpt.adam_v;
  s.optimizer.set_steps(ckpt.adam_steps);
  s.step = ckpt.step;
  s.epoch_loss_sum = ckpt.epoch_loss_sum;
  s.epoch_loss_count = ckpt.epoch_loss_count;
  return s;
}

Checkpoint make_checkpoint(const Tokenizers& tok, const KeyValues& config) {
  Checkpoint c;
  c.kind = CheckpointKind::tokenizer;
  c.config = config;
  c.config.set("fit.inertia", tok.codebook.inertia);
  c.config.set("fit.iterations", tok.codebook.iterations);
  c.names = {"codebook", "norm.mean", "norm.scale"};
  c.params = {tok.codebook.vectors, Matrix(tok.norm.mean), Matrix(tok.norm.scale)};
  return c;
}

Tokenizers tokenizers_from(const Checkpoint& ckpt) {
  require_kind(ckpt, CheckpointKind::tokenizer);
  if (ckpt.params.size() != 3) throw FormatError("tokenizer checkpoint must hold 3 tensors");
  const Matrix& mean = ckpt.params[1];
  const Matrix& scale = ckpt.params[2];
  if (mean.rows() != 1 || scale.rows() != 1 || scale.cols() != mean.cols() ||
      ckpt.params[0].cols() != mean.cols()) {
    throw FormatError("tokenizer checkpoint tensors have inconsistent shapes");
  }
  Tokenizers t;
  t.codebook.vectors = ckpt.params[0];
  t.codebook.inertia = ckpt.config.real("fit.inertia", 0.0);
  t.codebook.iterations = static_cast<int>(ckpt.config.integer("fit.iterations", 0));
  t.norm.mean = mean;
  t.norm.scale = scale;
  return t;
}

}  // namespace discon
