#include "discon/tokenizers.hpp"

#include "discon/eval.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace discon {

namespace {

void check_dim(const Matrix& tokens, Index dim, const char* where) {
  if (tokens.cols() != dim) {
    throw ShapeError(std::string(where) + ": token dim " + std::to_string(tokens.cols()) +
                     " does not match tokenizer dim " + std::to_string(dim));
  }
}

std::size_t count_distinct_rows(const Matrix& x) {
  std::vector<Index> order(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) order[static_cast<std::size_t>(i)] = i;
  auto less = [&](Index a, Index b) {
    for (Index j = 0; j < x.cols(); ++j) {
      if (x(a, j) != x(b, j)) return x(a, j) < x(b, j);
    }
    return false;
  };
  std::sort(order.begin(), order.end(), less);
  std::size_t distinct = order.empty() ? 0 : 1;
  for (std::size_t i = 1; i < order.size(); ++i) distinct += less(order[i - 1], order[i]);
  return distinct;
}

// Assigns each row to its nearest code; returns the squared distances.
std::vector<double> assign(const Matrix& x, const Matrix& codes, std::vector<int>& labels) {
  labels.resize(static_cast<std::size_t>(x.rows()));
  std::vector<double> d2(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    int best = 0;
    double best_d = (codes.row(0) - x.row(i)).squaredNorm();
    for (Index k = 1; k < codes.rows(); ++k) {
      const double d = (codes.row(k) - x.row(i)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
    d2[static_cast<std::size_t>(i)] = best_d;
  }
  return d2;
}

}  // namespace

Codebook fit_codebook(const Matrix& tokens, int vocab, std::uint64_t seed, int max_iters) {
  if (vocab < 1) throw std::invalid_argument("fit_codebook: vocab must be positive");
  if (max_iters < 1) throw std::invalid_argument("fit_codebook: max_iters must be positive");
  const std::size_t distinct = count_distinct_rows(tokens);
  if (distinct < static_cast<std::size_t>(vocab)) {
    throw std::invalid_argument("fit_codebook: " + std::to_string(distinct) + " distinct points for V=" +
                                std::to_string(vocab));
  }
  Rng rng(seed);
  const Index n = tokens.rows();

  // k-means++ seeding.
  Matrix codes(vocab, tokens.cols());
  codes.row(0) = tokens.row(static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(n))));
  std::vector<double> nearest(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) nearest[static_cast<std::size_t>(i)] = (tokens.row(i) - codes.row(0)).squaredNorm();
  for (int k = 1; k < vocab; ++k) {
    double total = 0.0;
    for (double v : nearest) total += v;
    const double target = rng.uniform() * total;
    double acc = 0.0;
    Index pick = -1;
    for (Index i = 0; i < n; ++i) {
      const double w = nearest[static_cast<std::size_t>(i)];
      if (w <= 0.0) continue;
      acc += w;
      pick = i;
      if (acc > target) break;
    }
    codes.row(k) = tokens.row(pick);
    for (Index i = 0; i < n; ++i) {
      auto& v = nearest[static_cast<std::size_t>(i)];
      v = std::min(v, (tokens.row(i) - codes.row(k)).squaredNorm());
    }
  }

  Codebook cb;
  std::vector<int> labels, previous;
  for (int iter = 0; iter < max_iters; ++iter) {
    std::vector<double> d2 = assign(tokens, codes, labels);
    std::vector<Index> counts(static_cast<std::size_t>(vocab), 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];

    // Reseed empty clusters at the currently worst-served points.
    for (int k = 0; k < vocab; ++k) {
      if (counts[static_cast<std::size_t>(k)] != 0) continue;
      const auto far = static_cast<Index>(std::max_element(d2.begin(), d2.end()) - d2.begin());
      --counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(far)])];
      codes.row(k) = tokens.row(far);
      labels[static_cast<std::size_t>(far)] = k;
      counts[static_cast<std::size_t>(k)] = 1;
      d2[static_cast<std::size_t>(far)] = 0.0;
    }
    double inertia = 0.0;
    for (double v : d2) inertia += v;
    cb.inertia_history.push_back(inertia / static_cast<double>(n));
    cb.iterations = iter + 1;
    if (labels == previous) break;
    previous = labels;

    Matrix sums = Matrix::Zero(vocab, tokens.cols());
    for (Index i = 0; i < n; ++i) sums.row(labels[static_cast<std::size_t>(i)]) += tokens.row(i);
    for (int k = 0; k < vocab; ++k) {
      codes.row(k) = sums.row(k) / static_cast<double>(counts[static_cast<std::size_t>(k)]);
    }
  }
  cb.vectors = std::move(codes);
  std::vector<double> final_d2 = assign(tokens, cb.vectors, labels);
  double inertia = 0.0;
  for (double v : final_d2) inertia += v;
  cb.inertia = inertia;
  return cb;
}

std::vector<int> encode_discrete(const Matrix& tokens, const Codebook& codebook) {
  check_dim(tokens, codebook.dim(), "encode_discrete");
  std::vector<int> labels;
  assign(tokens, codebook.vectors, labels);
  return labels;
}

Matrix lookup_codes(std::span<const int> ids, const Codebook& codebook) {
  Matrix out(static_cast<Index>(ids.size()), codebook.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= codebook.size()) throw std::out_of_range("lookup_codes: index out of range");
    out.row(static_cast<Index>(i)) = codebook.vectors.row(ids[i]);
  }
  return out;
}

Normalizer Normalizer::fit(const Matrix& tokens) {
  if (tokens.rows() == 0) throw std::invalid_argument("Normalizer::fit: no tokens");
  Normalizer n;
  n.mean = tokens.colwise().mean();
  const Matrix centered = tokens.rowwise() - n.mean;
  n.scale = (centered.array().square().colwise().sum() / static_cast<double>(tokens.rows())).sqrt().matrix();
  for (Index j = 0; j < n.scale.cols(); ++j) {
    if (!(n.scale(j) > 0.0)) n.scale(j) = 1.0;
  }
  return n;
}

Normalizer Normalizer::identity(int dim) {
  return Normalizer{RowVector::Zero(dim), RowVector::Ones(dim)};
}

Matrix Normalizer::encode(const Matrix& tokens) const {
  check_dim(tokens, mean.cols(), "Normalizer::encode");
  return ((tokens.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

Matrix Normalizer::decode(const Matrix& tokens) const {
  check_dim(tokens, mean.cols(), "Normalizer::decode");
  return ((tokens.array().rowwise() * scale.array()).rowwise() + mean.array()).matrix();
}

ReconstructionFd reconstruction_fd(const Dataset& data, const Codebook& codebook, const Normalizer& norm) {
  const Matrix original = data.pooled_tokens();
  const Matrix continuous = norm.decode(norm.encode(original));
  const std::vector<int> ids = encode_discrete(original, codebook);
  const Matrix discrete = lookup_codes(ids, codebook);
  return {frechet_distance(original, continuous), frechet_distance(original, discrete)};
}

}  // namespace discon

namespace discon {

TokenBatch TokenBatch::subset(std::span<const int> indices) const {
  TokenBatch out;
  out.seq_len = seq_len;
  out.continuous.resize(static_cast<Index>(indices.size()) * seq_len, continuous.cols());
  out.classes.reserve(indices.size());
  out.discrete.reserve(indices.size() * static_cast<std::size_t>(seq_len));
  Index row = 0;
  for (int i : indices) {
    if (i < 0 || i >= size()) throw std::out_of_range("batch index " + std::to_string(i) + " out of range");
    out.classes.push_back(classes[static_cast<std::size_t>(i)]);
    for (int m = 0; m < seq_len; ++m) {
      const auto src = static_cast<std::size_t>(i) * seq_len + m;
      out.discrete.push_back(discrete[src]);
      out.continuous.row(row++) = continuous.row(static_cast<Index>(src));
    }
  }
  return out;
}

TokenBatch tokenize(const Dataset& data, const Codebook& codebook, const Normalizer& norm) {
  TokenBatch out;
  out.seq_len = data.spec.seq_len;
  const Matrix pooled = data.pooled_tokens();
  out.discrete = encode_discrete(pooled, codebook);
  out.continuous = norm.encode(pooled);
  out.classes.reserve(data.samples.size());
  for (const auto& s : data.samples) out.classes.push_back(s.class_label);
  return out;
}

}  // namespace discon
