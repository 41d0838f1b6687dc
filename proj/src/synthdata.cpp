#include "discon/synthdata.hpp"

#include "discon/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace discon {

std::string to_string(ModeShape s) { return s == ModeShape::gaussian ? "gaussian" : "annulus"; }

ModeShape mode_shape_from_string(const std::string& s) {
  if (s == "gaussian") return ModeShape::gaussian;
  if (s == "annulus") return ModeShape::annulus;
  throw std::invalid_argument("unknown mode shape '" + s + "'");
}

std::vector<std::vector<int>> MixtureSpec::contiguous_classes(int n_modes, int n_classes) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n_classes));
  for (int m = 0; m < n_modes; ++m) {
    out[static_cast<std::size_t>(static_cast<long>(m) * n_classes / n_modes)].push_back(m);
  }
  return out;
}

MixtureSpec MixtureSpec::default_spec() {
  MixtureSpec s;
  s.class_to_modes = contiguous_classes(s.n_modes, s.n_classes);
  return s;
}

MixtureSpec MixtureSpec::tiny_spec() {
  MixtureSpec s;
  s.n_modes = 4;
  s.token_dim = 2;
  s.seq_len = 2;
  s.n_classes = 2;
  s.class_to_modes = contiguous_classes(s.n_modes, s.n_classes);
  return s;
}

void MixtureSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("MixtureSpec: " + msg); };
  if (n_modes < 1) fail("n_modes must be positive");
  if (token_dim < 1) fail("token_dim must be positive");
  if (seq_len < 1) fail("seq_len must be positive");
  if (!(sigma > 0.0)) fail("sigma must be positive");
  if (n_modes > 1 && !(separation >= 6.0)) fail("separation must be >= 6 (modes must be disjoint)");
  if (n_classes < 1) fail("n_classes must be positive");
  if (static_cast<int>(class_to_modes.size()) != n_classes) fail("class_to_modes must list every class");
  std::vector<int> owner(static_cast<std::size_t>(n_modes), -1);
  for (int c = 0; c < n_classes; ++c) {
    const auto& modes = class_to_modes[static_cast<std::size_t>(c)];
    if (modes.empty()) fail("class " + std::to_string(c) + " owns no modes");
    for (int m : modes) {
      if (m < 0 || m >= n_modes) fail("mode " + std::to_string(m) + " out of range");
      if (owner[static_cast<std::size_t>(m)] != -1) fail("mode " + std::to_string(m) + " belongs to two classes");
      owner[static_cast<std::size_t>(m)] = c;
    }
  }
  for (int m = 0; m < n_modes; ++m) {
    if (owner[static_cast<std::size_t>(m)] == -1) fail("mode " + std::to_string(m) + " belongs to no class");
  }
}

Matrix Dataset::pooled_tokens() const {
  const Index m = spec.seq_len;
  Matrix out(static_cast<Index>(samples.size()) * m, spec.token_dim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.middleRows(static_cast<Index>(i) * m, m) = samples[i].tokens;
  }
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out{spec, centers, {}};
  out.samples.reserve(indices.size());
  for (auto i : indices) out.samples.push_back(samples.at(i));
  return out;
}

namespace {

double min_pairwise_distance(const Matrix& c) {
  double best = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < c.rows(); ++i) {
    for (Index j = i + 1; j < c.rows(); ++j) best = std::min(best, (c.row(i) - c.row(j)).norm());
  }
  return best;
}

}  // namespace

Matrix place_centers(const MixtureSpec& spec, Rng& rng) {
  spec.validate();
  const int k = spec.n_modes;
  const int d = spec.token_dim;
  const double min_dist = spec.separation * spec.sigma;
  const double spacing = 1.5 * min_dist;
  // Jitter stays inside a ball of radius spacing/6 so any two lattice
  // neighbours remain at least spacing - 2*spacing/6 = min_dist apart.
  const double jitter = spacing / 6.0 / std::sqrt(static_cast<double>(d));

  int side = 1;
  while (std::pow(static_cast<double>(side), d) < k) ++side;
  long cells = 1;
  for (int i = 0; i < d; ++i) cells *= side;

  std::vector<long> chosen;
  if (cells <= 1'000'000) {
    std::vector<long> all(static_cast<std::size_t>(cells));
    for (long i = 0; i < cells; ++i) all[static_cast<std::size_t>(i)] = i;
    rng.shuffle(all);
    chosen.assign(all.begin(), all.begin() + k);
    std::sort(chosen.begin(), chosen.end());
  }

  Matrix centers(k, d);
  if (!chosen.empty()) {
    const double offset = 0.5 * (side - 1) * spacing;
    for (int m = 0; m < k; ++m) {
      long cell = chosen[static_cast<std::size_t>(m)];
      for (int j = 0; j < d; ++j) {
        centers(m, j) = static_cast<double>(cell % side) * spacing - offset + rng.uniform(-jitter, jitter);
        cell /= side;
      }
    }
    if (k == 1 || min_pairwise_distance(centers) >= min_dist) return centers;
  }

  // Fallback: rejection sampling in a box sized to the lattice extent.
  const double half = 0.5 * side * spacing;
  constexpr int kMaxTries = 10000;
  for (int m = 0; m < k; ++m) {
    bool placed = false;
    for (int t = 0; t < kMaxTries && !placed; ++t) {
      for (int j = 0; j < d; ++j) centers(m, j) = rng.uniform(-half, half);
      placed = true;
      for (int q = 0; q < m && placed; ++q) placed = (centers.row(m) - centers.row(q)).norm() >= min_dist;
    }
    if (!placed) throw std::runtime_error("place_centers: could not satisfy separation after retries");
  }
  return centers;
}

Matrix sample_mode(const MixtureSpec& spec, const Matrix& centers, int mode, Rng& rng) {
  const int d = spec.token_dim;
  Matrix x(1, d);
  if (spec.mode_shape == ModeShape::gaussian) {
    for (int j = 0; j < d; ++j) x(0, j) = spec.sigma * rng.normal();
  } else {
    // Shell of radius 2 sigma with sigma/2 radial spread.
    double norm = 0.0;
    for (int j = 0; j < d; ++j) {
      x(0, j) = rng.normal();
      norm += x(0, j) * x(0, j);
    }
    norm = std::sqrt(norm);
    const double radius = std::max(0.0, spec.sigma * (2.0 + 0.5 * rng.normal()));
    x *= radius / std::max(norm, 1e-300);
  }
  x += centers.row(mode);
  return x;
}

Dataset generate(const MixtureSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("generate: n must be at least 1");
  Rng root(seed);
  Rng center_rng = root.split(0);
  Dataset data{spec, place_centers(spec, center_rng), {}};
  data.samples.reserve(n);
  const int m = spec.seq_len;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = root.split(1 + i);
    Sample s;
    s.class_label = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.n_classes)));
    const auto& modes = spec.class_to_modes[static_cast<std::size_t>(s.class_label)];
    s.tokens.resize(m, spec.token_dim);
    s.mode_ids.resize(static_cast<std::size_t>(m));
    for (int p = 0; p < m; ++p) {
      const int mode = modes[rng.uniform_int(modes.size())];
      s.mode_ids[static_cast<std::size_t>(p)] = mode;
      s.tokens.row(p) = sample_mode(spec, data.centers, mode, rng);
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

std::pair<Dataset, Dataset> split(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split: fraction must lie in (0, 1)");
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.spec.n_classes));
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    by_class.at(static_cast<std::size_t>(data.samples[i].class_label)).push_back(i);
  }
  std::vector<std::size_t> train, val;
  for (auto& members : by_class) {
    rng.shuffle(members);
    const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    train.insert(train.end(), members.begin(), members.begin() + static_cast<long>(n_train));
    val.insert(val.end(), members.begin() + static_cast<long>(n_train), members.end());
  }
  if (train.empty() || val.empty()) {
    throw std::invalid_argument("split: fraction " + std::to_string(fraction) + " yields an empty split");
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {data.subset(train), data.subset(val)};
}

std::string serialize(const Dataset& data) {
  const auto& s = data.spec;
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(s.n_modes));
  w.u32(static_cast<std::uint32_t>(s.token_dim));
  w.u32(static_cast<std::uint32_t>(s.seq_len));
  w.f64(s.separation);
  w.f64(s.sigma);
  w.u8(static_cast<std::uint8_t>(s.mode_shape));
  w.u32(static_cast<std::uint32_t>(s.n_classes));
  for (const auto& modes : s.class_to_modes) {
    w.u32(static_cast<std::uint32_t>(modes.size()));
    for (int m : modes) w.i32(m);
  }
  w.u64(data.samples.size());
  w.matrix(data.centers);
  for (const auto& sample : data.samples) {
    for (Index i = 0; i < sample.tokens.size(); ++i) w.f64(sample.tokens.data()[i]);
  }
  for (const auto& sample : data.samples) {
    for (int id : sample.mode_ids) w.i32(id);
  }
  for (const auto& sample : data.samples) w.i32(sample.class_label);
  return frame(std::string_view(kDatasetMagic, 4), kDatasetVersion, w.bytes());
}

Dataset deserialize_dataset(std::string_view bytes) {
  ByteReader r(unframe(bytes, std::string_view(kDatasetMagic, 4), kDatasetVersion));
  Dataset data;
  auto& s = data.spec;
  s.n_modes = static_cast<int>(r.u32());
  s.token_dim = static_cast<int>(r.u32());
  s.seq_len = static_cast<int>(r.u32());
  s.separation = r.f64();
  s.sigma = r.f64();
  const auto shape = r.u8();
  if (shape > 1) throw FormatError("unknown mode shape tag " + std::to_string(shape));
  s.mode_shape = static_cast<ModeShape>(shape);
  s.n_classes = static_cast<int>(r.u32());
  if (s.n_classes < 0 || s.n_classes > 1'000'000) throw FormatError("implausible class count");
  s.class_to_modes.resize(static_cast<std::size_t>(s.n_classes));
  for (auto& modes : s.class_to_modes) {
    const auto count = r.u32();
    if (count > r.remaining() / 4) throw TruncatedError("class table truncated");
    for (std::uint32_t i = 0; i < count; ++i) modes.push_back(r.i32());
  }
  s.validate();
  const auto n = r.u64();
  data.centers = r.matrix();
  if (data.centers.rows() != s.n_modes || data.centers.cols() != s.token_dim) {
    throw FormatError("center table shape does not match spec");
  }
  const auto per_sample = static_cast<std::size_t>(s.seq_len) * static_cast<std::size_t>(s.token_dim);
  if (n > r.remaining() / (8 * per_sample + 4)) throw TruncatedError("sample arrays truncated");
  data.samples.resize(n);
  for (auto& sample : data.samples) {
    sample.tokens.resize(s.seq_len, s.token_dim);
    for (Index i = 0; i < sample.tokens.size(); ++i) sample.tokens.data()[i] = r.f64();
  }
  for (auto& sample : data.samples) {
    sample.mode_ids.resize(static_cast<std::size_t>(s.seq_len));
    for (auto& id : sample.mode_ids) id = r.i32();
  }
  for (auto& sample : data.samples) sample.class_label = r.i32();
  if (!r.done()) throw FormatError("trailing bytes after dataset payload");
  return data;
}

void save(const Dataset& data, const std::filesystem::path& path) { write_file(path, serialize(data)); }

Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file(path)); }

}  // namespace discon
