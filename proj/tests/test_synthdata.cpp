#include "doctest.h"

#include "discon/binary_io.hpp"
#include "discon/synthdata.hpp"

#include <filesystem>
#include <map>

using namespace discon;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "discon_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

int nearest_center(const Matrix& centers, const Matrix& x) {
  int best = 0;
  for (Index m = 1; m < centers.rows(); ++m) {
    if ((centers.row(m) - x).squaredNorm() < (centers.row(best) - x).squaredNorm()) best = static_cast<int>(m);
  }
  return best;
}

}  // namespace

TEST_CASE("degenerate single mode collapses onto its center") {
  MixtureSpec spec;
  spec.n_modes = 1;
  spec.n_classes = 1;
  spec.sigma = 1e-12;
  spec.class_to_modes = {{0}};
  const Dataset data = generate(spec, 20, 3);
  for (const auto& s : data.samples) {
    for (Index p = 0; p < s.tokens.rows(); ++p) {
      CHECK((s.tokens.row(p) - data.centers.row(0)).norm() < 1e-9);
    }
  }
}

TEST_CASE("centers satisfy the separation constraint") {
  MixtureSpec spec = MixtureSpec::default_spec();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Dataset data = generate(spec, 1, seed);
    double min_dist = 1e300;
    for (Index i = 0; i < data.centers.rows(); ++i) {
      for (Index j = i + 1; j < data.centers.rows(); ++j) {
        min_dist = std::min(min_dist, (data.centers.row(i) - data.centers.row(j)).norm());
      }
    }
    CHECK(min_dist >= 10.0);
  }
}

TEST_CASE("generation is deterministic under seed") {
  const auto spec = MixtureSpec::default_spec();
  CHECK(generate(spec, 50, 9) == generate(spec, 50, 9));
  CHECK_FALSE(generate(spec, 50, 9) == generate(spec, 50, 10));
  CHECK(serialize(generate(spec, 50, 9)) == serialize(generate(spec, 50, 9)));
}

TEST_CASE("spec validation") {
  auto spec = MixtureSpec::default_spec();
  spec.separation = 5.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = MixtureSpec::default_spec();
  spec.class_to_modes[0].push_back(2);  // mode 2 already belongs to class 1
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = MixtureSpec::default_spec();
  CHECK_THROWS_AS(generate(spec, 0, 1), std::invalid_argument);
}

TEST_CASE("gaussian tokens stay near their mode and classes own their modes") {
  const auto spec = MixtureSpec::default_spec();
  const Dataset data = generate(spec, 200, 4);
  for (const auto& s : data.samples) {
    const auto& owned = spec.class_to_modes[static_cast<std::size_t>(s.class_label)];
    for (Index p = 0; p < s.tokens.rows(); ++p) {
      const int mode = s.mode_ids[static_cast<std::size_t>(p)];
      CHECK(std::find(owned.begin(), owned.end(), mode) != owned.end());
      CHECK((s.tokens.row(p) - data.centers.row(mode)).norm() <= 5.0 * spec.sigma);
    }
  }
}

TEST_CASE("disjointness and label consistency over 1e5 tokens") {
  const auto spec = MixtureSpec::default_spec();
  const Dataset data = generate(spec, 6250, 12);  // 6250 * 16 = 1e5 tokens
  std::size_t wrong = 0, total = 0;
  for (const auto& s : data.samples) {
    for (Index p = 0; p < s.tokens.rows(); ++p) {
      wrong += nearest_center(data.centers, s.tokens.row(p)) != s.mode_ids[static_cast<std::size_t>(p)];
      ++total;
    }
  }
  CHECK(total == 100000);
  CHECK(static_cast<double>(wrong) / static_cast<double>(total) < 1e-6);
}

TEST_CASE("annulus modes") {
  auto spec = MixtureSpec::default_spec();
  spec.mode_shape = ModeShape::annulus;
  const Dataset data = generate(spec, 100, 2);
  for (const auto& s : data.samples) {
    for (Index p = 0; p < s.tokens.rows(); ++p) {
      CHECK(nearest_center(data.centers, s.tokens.row(p)) == s.mode_ids[static_cast<std::size_t>(p)]);
    }
  }
}

TEST_CASE("split") {
  SUBCASE("balanced halves") {
    auto spec = MixtureSpec::default_spec();
    spec.n_classes = 2;
    spec.class_to_modes = MixtureSpec::contiguous_classes(spec.n_modes, 2);
    Dataset data = generate(spec, 100, 1);
    for (std::size_t i = 0; i < data.samples.size(); ++i) data.samples[i].class_label = static_cast<int>(i % 2);
    auto [train, val] = split(data, 0.5, 3);
    for (const Dataset* part : {&train, &val}) {
      std::map<int, int> counts;
      for (const auto& s : part->samples) ++counts[s.class_label];
      CHECK(counts[0] == 25);
      CHECK(counts[1] == 25);
    }
  }
  SUBCASE("partition property") {
    const Dataset data = generate(MixtureSpec::default_spec(), 77, 5);
    auto [train, val] = split(data, 0.8, 11);
    CHECK(train.size() + val.size() == data.size());
    std::vector<const Sample*> seen;
    for (const auto& s : train.samples) {
      for (const auto& v : val.samples) CHECK_FALSE(&s == &v);
    }
    // Every original sample appears exactly once across the halves.
    std::size_t matched = 0;
    for (const auto& s : data.samples) {
      int hits = 0;
      for (const auto& t : train.samples) hits += (t == s);
      for (const auto& v : val.samples) hits += (v == s);
      matched += hits == 1;
    }
    CHECK(matched == data.size());
  }
  SUBCASE("unbalanced classes stay within one of proportional") {
    const Dataset data = generate(MixtureSpec::default_spec(), 203, 8);
    for (double f : {0.1, 0.37, 0.5, 0.9}) {
      auto [train, val] = split(data, f, 2);
      std::map<int, int> total, in_train;
      for (const auto& s : data.samples) ++total[s.class_label];
      for (const auto& s : train.samples) ++in_train[s.class_label];
      for (auto [c, n] : total) CHECK(std::abs(in_train[c] - f * n) <= 1.0);
    }
  }
  SUBCASE("empty split is an error") {
    const Dataset data = generate(MixtureSpec::default_spec(), 3, 8);
    CHECK_THROWS_AS(split(data, 0.01, 1), std::invalid_argument);
    CHECK_THROWS_AS(split(data, 1.0, 1), std::invalid_argument);
  }
}

TEST_CASE("dataset file format") {
  const Dataset data = generate(MixtureSpec::default_spec(), 40, 21);
  const auto path = temp_path("roundtrip.dscn");
  save(data, path);
  CHECK(load_dataset(path) == data);

  SUBCASE("header layout") {
    const std::string bytes = read_file(path);
    CHECK(bytes.substr(0, 4) == "DSCN");
    CHECK(static_cast<unsigned char>(bytes[4]) == kDatasetVersion);
    CHECK(bytes[5] == 0);
  }
  SUBCASE("corrupted checksum") {
    std::string bytes = read_file(path);
    bytes[bytes.size() - 1] ^= 0x5a;
    CHECK_THROWS_AS(deserialize_dataset(bytes), ChecksumError);
  }
  SUBCASE("corrupted payload") {
    std::string bytes = read_file(path);
    bytes[40] ^= 0x01;
    CHECK_THROWS_AS(deserialize_dataset(bytes), ChecksumError);
  }
  SUBCASE("truncated") {
    std::string bytes = read_file(path);
    bytes.resize(bytes.size() - 100);
    CHECK_THROWS_AS(deserialize_dataset(bytes), TruncatedError);
  }
  SUBCASE("version mismatch") {
    std::string bytes = read_file(path);
    bytes[4] = 9;
    CHECK_THROWS_AS(deserialize_dataset(bytes), VersionError);
  }
  SUBCASE("empty dataset loads as empty") {
    Dataset empty{data.spec, data.centers, {}};
    CHECK(deserialize_dataset(serialize(empty)) == empty);
  }
}
