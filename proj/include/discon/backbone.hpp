#pragma once

// Masked bidirectional transformer over
//   [class] ++ [embedded discrete ids (prefix mode only)] ++ [continuous tokens]
// where hidden continuous tokens are replaced by a learned mask embedding.
// The final hidden states at hidden positions, linearly projected, are the
// conditions z for the diffusion head.

#include "discon/config.hpp"
#include "discon/diffhead.hpp"
#include "discon/prior.hpp"

#include <string>
#include <vector>

namespace discon {

enum class Conditioning { prefix, disabled };
std::string to_string(Conditioning c);
Conditioning conditioning_from_string(const std::string& s);

struct DisConConfig {
  int layers = 6;
  int width = 128;
  int heads = 4;
  int mlp_ratio = 4;
  int seq_len = 16;
  int token_dim = 2;
  int vocab = 16;
  int n_classes = 4;
  int z_dim = 128;
  double mask_ratio_lo = 0.7;
  double mask_ratio_hi = 1.0;
  Conditioning conditioning = Conditioning::prefix;
  int head_width = 128;
  int head_blocks = 3;
  int diffusion_steps = 100;
  int diffusion_batch_mul = 4;

  void validate() const;
  KeyValues to_kv() const;
  static DisConConfig from_kv(const KeyValues& kv);
};

struct MaskState {
  std::vector<char> mask;         // 1 = hidden
  std::vector<int> reveal_order;  // the hidden positions, in reveal order

  int hidden_count() const;
};

MaskState sample_mask(int seq_len, double lo, double hi, Rng& rng);

class DisConModel : public LossModel {
 public:
  DisConModel(const DisConConfig& config, std::uint64_t seed);

  const DisConConfig& config() const { return config_; }
  ParamSet& params() override { return params_; }
  const ParamSet& params() const override { return params_; }
  const DiffHead& head() const { return head_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  std::size_t discrete_embedding() const { return discrete_emb_; }
  Index sequence_length() const;

  // z rows for every hidden position, ordered by sample then position.
  // `continuous` is [batch * M, d] (normalized), `discrete` has batch * M ids,
  // `mask` has batch * M flags. Values at hidden positions are never read.
  Var encode_context(const BoundParams& p, const Matrix& continuous, std::span<const int> discrete,
                     std::span<const int> classes, std::span<const char> mask) const;

  // Transformer stack and final norm over packed rows [batch * L, width].
  Var encode_rows(const BoundParams& p, Var x, Index seq_len) const;

  Var loss(const BoundParams& p, const TokenBatch& batch, Rng& rng) const override;

 private:
  DisConConfig config_;
  ParamSet params_;
  std::size_t class_emb_ = 0, discrete_emb_ = 0, pos_emb_ = 0, mask_emb_ = 0;
  Linear continuous_proj_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear z_proj_;
  DiffHead head_;
  NoiseSchedule schedule_;
};

}  // namespace discon
