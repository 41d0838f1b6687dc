#pragma once

// Versioned model snapshot: parameters, EMA shadow, optimizer moments and
// training position, framed with a CRC-32.

#include "discon/backbone.hpp"
#include "discon/binary_io.hpp"
#include "discon/prior.hpp"
#include "discon/tokenizers.hpp"
#include "discon/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace discon {

inline constexpr std::string_view kCheckpointMagic = "DSCK";
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { prior = 1, discon = 2, tokenizer = 3 };
std::string to_string(CheckpointKind k);

class KindError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::prior;
  KeyValues config;
  std::vector<std::string> names;
  std::vector<Matrix> params;
  std::vector<Matrix> ema;
  std::vector<Matrix> adam_m, adam_v;
  std::uint64_t adam_steps = 0;
  std::uint64_t step = 0;
  std::uint64_t rng_key = 0, rng_counter = 0;
  double epoch_loss_sum = 0.0;
  std::uint64_t epoch_loss_count = 0;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Throws KindError when the stored kind differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, CheckpointKind expected);

// Model configs live under "model." in the config echo, training under "train.".
Checkpoint make_checkpoint(CheckpointKind kind, const KeyValues& model_config, const TrainConfig& train,
                           const LossModel& model, const TrainState& state);
PriorModel prior_from(const Checkpoint& ckpt);
DisConModel discon_from(const Checkpoint& ckpt);
TrainConfig train_config_from(const Checkpoint& ckpt);
// Restores optimizer and EMA state into a freshly built model's TrainState.
TrainState train_state_from(const Checkpoint& ckpt, const LossModel& model);

struct Tokenizers {
  Codebook codebook;
  Normalizer norm;
};
Checkpoint make_checkpoint(const Tokenizers& tok, const KeyValues& config);
Tokenizers tokenizers_from(const Checkpoint& ckpt);

}  // namespace discon
