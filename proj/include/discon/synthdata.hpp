#pragma once

// Synthetic data made of a finite set of disjoint continuous modes. Each
// sample is a sequence of continuous tokens; classes own disjoint subsets of
// the modes.

#include "discon/numerics.hpp"
#include "discon/rng.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace discon {

enum class ModeShape { gaussian, annulus };

std::string to_string(ModeShape s);
ModeShape mode_shape_from_string(const std::string& s);

struct MixtureSpec {
  int n_modes = 8;
  int token_dim = 2;
  int seq_len = 16;
  double separation = 10.0;  // minimum center distance in units of sigma
  double sigma = 1.0;
  ModeShape mode_shape = ModeShape::gaussian;
  int n_classes = 4;
  std::vector<std::vector<int>> class_to_modes;

  // Throws std::invalid_argument on violation.
  void validate() const;

  // Assigns modes to classes round-robin in contiguous blocks.
  static std::vector<std::vector<int>> contiguous_classes(int n_modes, int n_classes);
  static MixtureSpec default_spec();
  // V=4 / M=2 scale instance used for exhaustive marginalization.
  static MixtureSpec tiny_spec();

  friend bool operator==(const MixtureSpec&, const MixtureSpec&) = default;
};

struct Sample {
  Matrix tokens;  // seq_len x token_dim
  std::vector<int> mode_ids;
  int class_label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  MixtureSpec spec;
  Matrix centers;  // n_modes x token_dim
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  // All tokens stacked: (size * seq_len) x token_dim.
  Matrix pooled_tokens() const;
  Dataset subset(const std::vector<std::size_t>& indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Lattice placement with bounded jitter; rejection sampling only as fallback.
Matrix place_centers(const MixtureSpec& spec, Rng& rng);

Matrix sample_mode(const MixtureSpec& spec, const Matrix& centers, int mode, Rng& rng);

Dataset generate(const MixtureSpec& spec, std::size_t n, std::uint64_t seed);

// Stratified by class: each class contributes round(fraction * count) to train.
std::pair<Dataset, Dataset> split(const Dataset& data, double fraction, std::uint64_t seed);

inline constexpr char kDatasetMagic[] = "DSCN";
inline constexpr std::uint16_t kDatasetVersion = 1;

std::string serialize(const Dataset& data);
Dataset deserialize_dataset(std::string_view bytes);
void save(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace discon
