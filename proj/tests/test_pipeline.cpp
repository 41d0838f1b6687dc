#include "doctest.h"

#include "discon/pipeline.hpp"
#include "test_util.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>

using namespace discon;
using namespace discon::testing;

namespace {

DisConConfig small_discon(Conditioning c = Conditioning::prefix) {
  DisConConfig d;
  d.layers = 1;
  d.width = 16;
  d.heads = 2;
  d.z_dim = 16;
  d.head_width = 16;
  d.head_blocks = 1;
  d.diffusion_steps = 10;
  d.conditioning = c;
  return d;
}

PriorConfig small_prior() {
  PriorConfig p;
  p.layers = 1;
  p.width = 16;
  p.heads = 2;
  return p;
}

std::filesystem::path scratch() {
  const auto dir = std::filesystem::temp_directory_path() / "discon_test_pipeline";
  std::filesystem::create_directories(dir);
  return dir;
}

// Untrained models written to disk, as a run directory would hold them.
struct Files {
  std::filesystem::path discon, baseline, prior, tokenizer;
};

Files write_models(const DefaultData& data) {
  const auto dir = scratch();
  Files f{dir / "discon.dsck", dir / "baseline.dsck", dir / "prior.dsck", dir / "tok.dsck"};
  TrainConfig tc;
  DisConModel dm(small_discon(), 1);
  randomize(dm.params(), 2, 0.1);
  save_checkpoint(make_checkpoint(CheckpointKind::discon, small_discon().to_kv(), tc, dm, init_train_state(dm, tc)),
                  f.discon);
  const DisConConfig bc = small_discon(Conditioning::disabled);
  DisConModel bm(bc, 1);
  randomize(bm.params(), 2, 0.1);
  save_checkpoint(make_checkpoint(CheckpointKind::discon, bc.to_kv(), tc, bm, init_train_state(bm, tc)), f.baseline);
  PriorModel pm(small_prior(), 3);
  randomize(pm.params(), 4);
  save_checkpoint(make_checkpoint(CheckpointKind::prior, small_prior().to_kv(), tc, pm, init_train_state(pm, tc)),
                  f.prior);
  save_checkpoint(make_checkpoint(Tokenizers{data.codebook, data.norm}, KeyValues()), f.tokenizer);
  return f;
}

}  // namespace

TEST_CASE("reveal schedule") {
  SUBCASE("M=16, S=4 matches rounded cumulative cosine counts") {
    // Independent evaluation: round M(1 - cos(pi s / 2S)) and difference.
    std::vector<int> oracle;
    int prev = 0;
    for (int s = 1; s <= 4; ++s) {
      const int cum = static_cast<int>(std::lround(16 * (1 - std::cos(std::numbers::pi * s / 8))));
      oracle.push_back(cum - prev);
      prev = cum;
    }
    CHECK(oracle == std::vector<int>{1, 4, 5, 6});
    CHECK(reveal_schedule(16, 4) == oracle);
  }
  SUBCASE("boundaries") {
    CHECK(reveal_schedule(16, 1) == std::vector<int>{16});
    CHECK(reveal_schedule(16, 16) == std::vector<int>(16, 1));
    CHECK_THROWS_AS(reveal_schedule(16, 17), std::invalid_argument);
    CHECK_THROWS_AS(reveal_schedule(16, 0), std::invalid_argument);
  }
  SUBCASE("counts are positive, non-decreasing and sum to M") {
    for (int m = 1; m <= 64; ++m) {
      for (int s = 1; s <= m; ++s) {
        const auto n = reveal_schedule(m, s);
        INFO("M=" << m << " S=" << s);
        REQUIRE(n.size() == static_cast<std::size_t>(s));
        CHECK(std::accumulate(n.begin(), n.end(), 0) == m);
        CHECK(*std::min_element(n.begin(), n.end()) >= 1);
        CHECK(std::is_sorted(n.begin(), n.end()));
      }
    }
  }
}

TEST_CASE("sample request validation") {
  SampleRequest r;
  r.steps = 17;
  CHECK_THROWS_AS(r.validate(16, 4), ConfigError);
  r.steps = 16;
  CHECK_NOTHROW(r.validate(16, 4));
  r.class_label = 4;
  CHECK_THROWS_AS(r.validate(16, 4), ConfigError);
  r.class_label = 0;
  r.temperature = 0;
  CHECK_THROWS_AS(r.validate(16, 4), ConfigError);
  SampleRequest q;
  q.seed = 99;
  q.source = ConditionSource::ground_truth;
  const SampleRequest back = SampleRequest::from_kv(q.to_kv());
  CHECK(back.seed == 99);
  CHECK(back.source == ConditionSource::ground_truth);
}

TEST_CASE("generate") {
  const auto data = default_data(200, 21);
  const Files files = write_models(data);
  const ModelBundle bundle = load_bundle(files.discon, files.prior, files.tokenizer);
  const Generator gen = make_generator(bundle, &data.val_tokens);
  SampleRequest req;
  req.n_images = 6;
  req.steps = 4;
  req.seed = 5;

  SUBCASE("bitwise deterministic with provenance") {
    const GeneratedBatch a = generate(gen, req);
    const GeneratedBatch b = generate(gen, req);
    CHECK(a.tokens == b.tokens);
    CHECK(a.discrete == b.discrete);
    CHECK(a.tokens.rows() == 6 * 16);
    CHECK(a.tokens.allFinite());
    CHECK(a.classes == std::vector<int>{0, 1, 2, 3, 0, 1});
    CHECK(a.provenance.str("request.seed", "") == "5");
    CHECK(a.provenance.str("request.steps", "") == "4");
    req.seed = 6;
    CHECK(generate(gen, req).tokens != a.tokens);
  }
  SUBCASE("every step count decodes all positions") {
    for (int s : {1, 4, 16}) {
      req.steps = s;
      CHECK(generate(gen, req).tokens.allFinite());
    }
    req.steps = 17;
    CHECK_THROWS_AS(generate(gen, req), ConfigError);
  }
  SUBCASE("ground-truth conditions come from the dataset") {
    req.source = ConditionSource::ground_truth;
    req.class_label = 2;
    const GeneratedBatch a = generate(gen, req);
    for (int i = 0; i < req.n_images; ++i) {
      const std::vector<int> seq(a.discrete.begin() + i * 16, a.discrete.begin() + (i + 1) * 16);
      bool found = false;
      for (int k = 0; k < data.val_tokens.size() && !found; ++k) {
        found = data.val_tokens.classes[static_cast<std::size_t>(k)] == 2 &&
                std::equal(seq.begin(), seq.end(), data.val_tokens.discrete.begin() + k * 16);
      }
      CHECK(found);
    }
    Generator no_data = gen;
    no_data.ground_truth = nullptr;
    CHECK_THROWS_AS(generate(no_data, req), std::invalid_argument);
  }
  SUBCASE("the unconditioned model ignores the prior") {
    const ModelBundle base = load_bundle(files.baseline, files.prior, files.tokenizer);
    const ModelBundle alone = load_bundle(files.baseline, "", files.tokenizer);
    const GeneratedBatch a = generate(make_generator(base), req);
    const GeneratedBatch b = generate(make_generator(alone), req);
    CHECK(a.tokens == b.tokens);
    CHECK(std::all_of(a.discrete.begin(), a.discrete.end(), [](int v) { return v == 0; }));
  }
  SUBCASE("wrong checkpoint kinds are rejected") {
    CHECK_THROWS_AS(load_bundle(files.prior, files.prior, files.tokenizer), KindError);
    CHECK_THROWS_AS(load_bundle(files.discon, files.discon, files.tokenizer), KindError);
    CHECK_THROWS_AS(load_bundle(files.discon, files.prior, files.prior), KindError);
  }
}

TEST_CASE("generation metrics of the reference itself are zero") {
  const auto data = default_data(400, 22);
  GeneratedBatch b;
  b.seq_len = 16;
  for (const auto& s : data.val.samples) b.classes.push_back(s.class_label);
  b.tokens = data.val.pooled_tokens();
  const GenerationMetrics m = generation_metrics(b, data.val);
  CHECK(m.class_fd.size() == 4);
  CHECK(m.fd < 1e-9);
  CHECK(m.modes.coverage == 1.0);
  CHECK(m.modes.ood_rate == 0.0);

  // Shift every token by (1, 0): each class FD gains exactly 1.
  b.tokens.col(0).array() += 1.0;
  const GenerationMetrics shifted = generation_metrics(b, data.val);
  for (double fd : shifted.class_fd) CHECK(fd == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("compare_runs") {
  const auto data = default_data(200, 23);
  const Files files = write_models(data);
  SampleRequest req;
  req.n_images = 8;
  req.steps = 4;
  GridCell cell{"a", files.discon, files.prior, files.tokenizer, req};

  SUBCASE("grid of one gives one row carrying the checkpoint hash") {
    const auto rows = compare_runs({cell}, data.val);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].error.empty());
    CHECK(rows[0].ckpt_hash == file_hash(files.discon));
    CHECK(rows[0].conditioning == "prefix");
    const std::string csv = results_csv(rows);
    CHECK(csv.rfind(std::string(kResultsHeader) + "\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  }
  SUBCASE("a missing checkpoint is recorded and the grid continues") {
    GridCell missing = cell;
    missing.run_id = "missing";
    missing.discon_ckpt = scratch() / "nope.dsck";
    GridCell base = cell;
    base.run_id = "b";
    base.discon_ckpt = files.baseline;
    const auto rows = compare_runs({missing, base}, data.val);
    REQUIRE(rows.size() == 2);
    CHECK_FALSE(rows[0].error.empty());
    CHECK(std::isnan(rows[0].fd));
    CHECK(rows[1].error.empty());
    CHECK(rows[1].conditioning == "disabled");
  }
  SUBCASE("results are reproducible apart from timing") {
    const auto a = results_csv(compare_runs({cell}, data.val), false);
    const auto b = results_csv(compare_runs({cell}, data.val), false);
    CHECK(a == b);
  }
}

TEST_CASE("marginal oracle") {
  const MixtureSpec spec = MixtureSpec::tiny_spec();
  const Dataset all = generate(spec, 400, 31);
  const Codebook cb = fit_codebook(all.pooled_tokens(), 4, 32);
  const Normalizer norm = Normalizer::fit(all.pooled_tokens());

  DisConConfig dc = small_discon();
  dc.seq_len = 2;
  dc.vocab = 4;
  dc.n_classes = 2;
  DisConModel model(dc, 1);
  randomize(model.params(), 3, 0.2);
  PriorConfig pc = small_prior();
  pc.seq_len = 2;
  pc.vocab = 4;
  pc.n_classes = 2;
  PriorModel prior(pc, 2);

  Generator gen;
  gen.model = &model;
  gen.weights = &model.params().values();
  gen.prior = &prior;
  gen.prior_weights = &prior.params().values();
  gen.norm = norm;
  // An untrained head leaves wide samples; shrink them so Monte Carlo noise
  // stays far below the tolerance.
  gen.norm.scale.setConstant(0.01);

  SUBCASE("point-mass prior collapses the mixture") {
    // Head bias strongly favours code 2 at every position.
    prior.params().value(prior.params().find("prior.head.b"))(0, 2) = 60.0;
    const auto r = marginal_oracle(gen, 0, 1000, 7);
    CHECK(r.sequences.size() == 16);
    CHECK(r.probabilities[10] > 1 - 1e-12);  // sequence (2, 2)
    CHECK(r.fd < 0.05);
  }
  SUBCASE("probabilities of all sequences sum to one") {
    randomize(prior.params(), 9);
    const auto r = marginal_oracle(gen, 1, 50, 8);
    CHECK(std::accumulate(r.probabilities.begin(), r.probabilities.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("too large to enumerate") {
    PriorConfig big = pc;
    big.vocab = 5;
    PriorModel p5(big, 2);
    Generator g5 = gen;
    g5.prior = &p5;
    g5.prior_weights = &p5.params().values();
    CHECK_THROWS_AS(marginal_oracle(g5, 0, 100, 1), std::invalid_argument);
  }
}

TEST_CASE("symmetric two-mode mixture has zero mean") {
  // Two equiprobable conditionals centred at +c and -c.
  Rng rng(41);
  const Matrix c = (Matrix(1, 2) << 3.0, -2.0).finished();
  Matrix a(5000, 2), b(5000, 2);
  for (Index i = 0; i < 5000; ++i) {
    a.row(i) = c + random_matrix(rng, 1, 2, 0.5);
    b.row(i) = -c + random_matrix(rng, 1, 2, 0.5);
  }
  const auto mix = mixture_moments<double>({fit_moments(a), fit_moments(b)}, {0.5, 0.5});
  const double stderr_ = std::sqrt((0.25 + 13.0) / 10000.0);
  CHECK(std::abs(mix.mean(0)) < 3 * stderr_);
  CHECK(std::abs(mix.mean(1)) < 3 * stderr_);
  CHECK(mix.covariance(0, 0) == doctest::Approx(9.25).epsilon(0.05));
}

TEST_CASE("flatten_sequences keeps each sequence on one row") {
  Matrix t(4, 2);
  t << 1, 2, 3, 4, 5, 6, 7, 8;
  const Matrix f = flatten_sequences(t, 2);
  CHECK(f == (Matrix(2, 4) << 1, 2, 3, 4, 5, 6, 7, 8).finished());
  CHECK_THROWS_AS(flatten_sequences(t, 3), ShapeError);
}

TEST_CASE("end-to-end model losses pass the finite-difference oracle") {
  for (const auto& e : model_gradcheck_suite(3)) {
    INFO(e.name);
    CHECK(e.max_rel_error < 1e-6);
  }
}
