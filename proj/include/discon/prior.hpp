#pragma once

// Class-conditional causal transformer over discrete token sequences.
// Input row 0 is the class embedding; row i > 0 embeds token i-1. The output
// at row i is the distribution of token i.

#include "discon/config.hpp"
#include "discon/nn.hpp"
#include "discon/tokenizers.hpp"

#include <vector>

namespace discon {

struct PriorConfig {
  int layers = 4;
  int width = 128;
  int heads = 4;
  int vocab = 16;
  int seq_len = 16;
  int n_classes = 4;
  int mlp_ratio = 4;
  double dropout = 0.0;
  double cfg_null_prob = 0.1;

  void validate() const;
  KeyValues to_kv() const;
  static PriorConfig from_kv(const KeyValues& kv);
};

// Shared interface for anything the trainer can optimize.
class LossModel {
 public:
  virtual ~LossModel() = default;
  virtual ParamSet& params() = 0;
  virtual const ParamSet& params() const = 0;
  // Scalar training loss of `batch`; all randomness drawn from `rng`.
  virtual Var loss(const BoundParams& p, const TokenBatch& batch, Rng& rng) const = 0;
};

class PriorModel : public LossModel {
 public:
  PriorModel(const PriorConfig& config, std::uint64_t seed);

  const PriorConfig& config() const { return config_; }
  ParamSet& params() override { return params_; }
  const ParamSet& params() const override { return params_; }
  int null_class() const { return config_.n_classes; }

  // Logits [batch * positions, V]. `tokens` holds seq_len ids per sample of
  // which only the first positions-1 are read; `classes` may contain the null class.
  Var logits(const BoundParams& p, std::span<const int> tokens, std::span<const int> classes,
             int positions, Rng* dropout_rng = nullptr) const;

  // Mean next-token cross entropy. The class is swapped for the null class
  // with probability cfg_null_prob when `rng` is given.
  Var loss(const BoundParams& p, const TokenBatch& batch, Rng& rng) const override;
  Var eval_loss(const BoundParams& p, const TokenBatch& batch) const;

 private:
  PriorConfig config_;
  ParamSet params_;
  std::size_t token_emb_ = 0, class_emb_ = 0, pos_emb_ = 0;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear head_;
};

// null + scale * (cond - null), row-wise.
Matrix guide_logits(const Matrix& cond, const Matrix& null, double cfg_scale);

struct PriorSampling {
  double cfg_scale = 1.0;
  double temperature = 1.0;
};

// Ancestral sampling of one sequence per entry of `classes`. Sequence i uses
// the stream Rng(seed).split(i), so results do not depend on batching.
std::vector<std::vector<int>> sample_prior(const PriorModel& model, const std::vector<Matrix>& weights,
                                           std::span<const int> classes, const PriorSampling& sampling,
                                           std::uint64_t seed);
std::vector<int> sample_prior(const PriorModel& model, int class_label, const PriorSampling& sampling,
                              std::uint64_t seed);

// Exact log-probability of each sequence under the guided, tempered sampling
// distribution. `sequences` holds seq_len ids per entry of `classes`.
std::vector<double> sequence_log_prob(const PriorModel& model, const std::vector<Matrix>& weights,
                                      std::span<const int> sequences, std::span<const int> classes,
                                      const PriorSampling& sampling);

// Draws an index from unnormalized logits / temperature.
int sample_categorical(const RowVector& logits, double temperature, Rng& rng);

}  // namespace discon
