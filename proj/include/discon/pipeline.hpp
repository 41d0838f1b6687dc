#pragma once

// End-to-end sampling: discrete prior -> masked continuous decoding over S
// steps -> decoder, plus the evaluation drivers built on it.

#include "discon/backbone.hpp"
#include "discon/checkpoint.hpp"
#include "discon/eval.hpp"
#include "discon/gradcheck.hpp"
#include "discon/prior.hpp"
#include "discon/synthdata.hpp"
#include "discon/tokenizers.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace discon {

// Tokens revealed at each of the S decoding steps: cosine-shaped, each >= 1,
// non-decreasing, summing to M. Largest-remainder apportionment of the
// increments of M * (1 - cos(pi s / 2S)).
std::vector<int> reveal_schedule(int seq_len, int steps);

enum class ConditionSource { prior, ground_truth };
std::string to_string(ConditionSource s);
ConditionSource condition_source_from_string(const std::string& s);

struct SampleRequest {
  int class_label = -1;  // -1 cycles through the classes
  int n_images = 64;
  int steps = 16;
  double temperature = 1.0;
  double cfg_scale = 1.0;
  std::uint64_t seed = 0;
  ConditionSource source = ConditionSource::prior;

  void validate(int seq_len, int n_classes) const;
  KeyValues to_kv() const;
  static SampleRequest from_kv(const KeyValues& kv);
};

// Everything generate() reads. Weights are usually EMA shadows.
struct Generator {
  const DisConModel* model = nullptr;
  const std::vector<Matrix>* weights = nullptr;
  const PriorModel* prior = nullptr;
  const std::vector<Matrix>* prior_weights = nullptr;
  Normalizer norm;
  // Supplies x_d when the request asks for ground-truth conditioning.
  const TokenBatch* ground_truth = nullptr;
};

struct GeneratedBatch {
  int seq_len = 0;
  std::vector<int> classes;
  std::vector<int> discrete;  // n_images * M ids (all zero when unconditioned)
  Matrix tokens;              // n_images * M rows, decoded to data space
  KeyValues provenance;
};

// Bitwise deterministic in (models, request).
GeneratedBatch generate(const Generator& gen, const SampleRequest& req);

// Models and tokenizer loaded from checkpoint files, with their hashes.
struct ModelBundle {
  DisConModel model;
  std::vector<Matrix> weights;
  std::optional<PriorModel> prior;
  std::vector<Matrix> prior_weights;
  Tokenizers tokenizers;
  KeyValues hashes;  // ckpt.discon / ckpt.prior / ckpt.tokenizer -> CRC hex
};

// Throws KindError when a file holds the wrong model kind. The prior path may
// be empty for unconditioned models.
ModelBundle load_bundle(const std::filesystem::path& discon, const std::filesystem::path& prior,
                        const std::filesystem::path& tokenizer);
Generator make_generator(const ModelBundle& bundle, const TokenBatch* ground_truth = nullptr);

struct GenerationMetrics {
  double fd = 0.0;  // mean over classes of the per-class Frechet distance
  std::vector<double> class_fd;
  ModeReport modes;
};

GenerationMetrics generation_metrics(const GeneratedBatch& batch, const Dataset& reference);

struct GridCell {
  std::string run_id;
  std::filesystem::path discon_ckpt, prior_ckpt, tokenizer_ckpt;
  SampleRequest request;
};

struct ResultRow {
  std::string run_id;
  std::string conditioning;
  int steps = 0;
  double temperature = 0.0;
  double cfg_scale = 0.0;
  double fd = 0.0;
  double mode_coverage = 0.0;
  double ood_rate = 0.0;
  double sec_per_batch = 0.0;
  std::string ckpt_hash;
  std::string error;  // non-empty when the cell failed
};

inline constexpr const char* kResultsHeader =
    "run_id,conditioning,S,tau,cfg,fd,mode_coverage,ood_rate,sec_per_batch,ckpt_hash";

// Evaluates every cell; a cell that cannot load or sample records its error
// and the rest still run. Ground-truth requests draw x_d from `reference`.
std::vector<ResultRow> compare_runs(const std::vector<GridCell>& grid, const Dataset& reference,
                                    int images_per_batch = 64);
std::string results_csv(const std::vector<ResultRow>& rows, bool with_timing = true);

// Tiny-instance check that end-to-end sampling matches the explicit mixture
// sum over x_d of p(x_c | x_d) p(x_d). Tokens of one sequence are flattened
// into a single row. `samples` images are drawn for every conditional and
// again end to end.
struct MarginalOracleResult {
  std::vector<std::vector<int>> sequences;
  std::vector<double> probabilities;
  double fd = 0.0;
};

MarginalOracleResult marginal_oracle(const Generator& gen, int class_label, int samples, std::uint64_t seed);

// Flattens [n * M, d] token rows into [n, M * d].
Matrix flatten_sequences(const Matrix& tokens, int seq_len);

// Finite-difference check of the full prior, backbone and diffusion-head
// losses at small random configurations.
std::vector<GradCheckEntry> model_gradcheck_suite(std::uint64_t seed, double step = 1e-5);

}  // namespace discon
