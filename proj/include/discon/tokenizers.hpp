#pragma once

// Dual tokenization: a k-means codebook maps each continuous token to a
// discrete index (lossy); an affine normalizer maps it to the model's
// continuous space and back (lossless).

#include "discon/numerics.hpp"
#include "discon/rng.hpp"
#include "discon/synthdata.hpp"

#include <vector>

namespace discon {

struct Codebook {
  Matrix vectors;  // V x d
  double inertia = 0.0;
  int iterations = 0;
  std::vector<double> inertia_history;  // mean squared distance after each assignment

  int size() const { return static_cast<int>(vectors.rows()); }
  int dim() const { return static_cast<int>(vectors.cols()); }
};

// k-means++ seeding then Lloyd iterations to an assignment fixpoint or
// max_iters. Empty clusters are reseeded at the point farthest from its center.
Codebook fit_codebook(const Matrix& tokens, int vocab, std::uint64_t seed, int max_iters = 100);

// Nearest code per row; ties resolve to the lowest index.
std::vector<int> encode_discrete(const Matrix& tokens, const Codebook& codebook);
Matrix lookup_codes(std::span<const int> ids, const Codebook& codebook);

struct Normalizer {
  RowVector mean;
  RowVector scale;

  // Per-dimension mean and population standard deviation.
  static Normalizer fit(const Matrix& tokens);
  static Normalizer identity(int dim);
  int dim() const { return static_cast<int>(mean.cols()); }

  Matrix encode(const Matrix& tokens) const;
  Matrix decode(const Matrix& tokens) const;
};

struct ReconstructionFd {
  double continuous = 0.0;
  double discrete = 0.0;
};

// Model-ready view of a dataset: one sample per seq_len consecutive rows of
// `discrete` / `continuous`. Continuous tokens are normalized.
struct TokenBatch {
  int seq_len = 0;
  std::vector<int> classes;
  std::vector<int> discrete;
  Matrix continuous;

  int size() const { return static_cast<int>(classes.size()); }
  int token_dim() const { return static_cast<int>(continuous.cols()); }
  TokenBatch subset(std::span<const int> indices) const;
};

TokenBatch tokenize(const Dataset& data, const Codebook& codebook, const Normalizer& norm);

// Frechet distance between the pooled tokens of `data` and their
// reconstructions through each tokenizer path.
ReconstructionFd reconstruction_fd(const Dataset& data, const Codebook& codebook, const Normalizer& norm);

}  // namespace discon
