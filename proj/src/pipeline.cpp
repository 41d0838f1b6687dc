#include "discon/pipeline.hpp"

#include "discon/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace discon {

namespace {

constexpr std::uint64_t kPriorStream = 0x505249;
constexpr std::uint64_t kImageStream = 0x494d47;
constexpr std::uint64_t kTruthStream = 0x545255;
constexpr std::uint64_t kOracleStream = 0x4f5243;
constexpr int kChunk = 256;

}  // namespace

std::vector<int> reveal_schedule(int seq_len, int steps) {
  if (steps < 1 || steps > seq_len) {
    throw std::invalid_argument("reveal_schedule: need 1 <= S <= M, got S=" + std::to_string(steps) +
                                ", M=" + std::to_string(seq_len));
  }
  const auto s_count = static_cast<std::size_t>(steps);
  std::vector<double> exact(s_count);
  auto revealed = [&](int s) { return seq_len * (1.0 - std::cos(std::numbers::pi * s / (2.0 * steps))); };
  for (int s = 1; s <= steps; ++s) exact[static_cast<std::size_t>(s - 1)] = revealed(s) - revealed(s - 1);

  std::vector<int> n(s_count);
  int total = 0;
  for (std::size_t i = 0; i < s_count; ++i) {
    n[i] = static_cast<int>(std::floor(exact[i]));
    total += n[i];
  }
  // Hand the remainder to the largest fractional parts; ties go to later steps.
  std::vector<std::size_t> order(s_count);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double fa = exact[a] - n[a], fb = exact[b] - n[b];
    return fa != fb ? fa > fb : a > b;
  });
  for (std::size_t k = 0; total < seq_len; ++k, ++total) ++n[order[k % s_count]];

  // Early increments can round to zero; lift them to one, paid for by the
  // first entry of the largest block.
  for (std::size_t i = s_count; i-- > 0;) {
    if (n[i] > 0) continue;
    const int top = *std::max_element(n.begin(), n.end());
    const auto j = static_cast<std::size_t>(std::find(n.begin(), n.end(), top) - n.begin());
    --n[j];
    ++n[i];
  }
  return n;
}

std::string to_string(ConditionSource s) { return s == ConditionSource::prior ? "prior" : "ground_truth"; }

ConditionSource condition_source_from_string(const std::string& s) {
  if (s == "prior") return ConditionSource::prior;
  if (s == "ground_truth") return ConditionSource::ground_truth;
  throw ConfigError("unknown condition source '" + s + "' (expected prior or ground_truth)");
}

void SampleRequest::validate(int seq_len, int n_classes) const {
  if (steps < 1) throw ConfigError("sample.steps must be >= 1");
  if (steps > seq_len) {
    throw ConfigError("sample.steps must not exceed the sequence length (S=" + std::to_string(steps) +
                      " > M=" + std::to_string(seq_len) + ")");
  }
  if (n_images < 1) throw ConfigError("sample.n_images must be >= 1");
  if (class_label < -1 || class_label >= n_classes) {
    throw ConfigError("sample.class must be -1 or in [0, " + std::to_string(n_classes) + ")");
  }
  if (!(temperature > 0.0)) throw ConfigError("sample.temperature must be > 0");
  if (!(cfg_scale >= 0.0)) throw ConfigError("sample.cfg_scale must be >= 0");
}

KeyValues SampleRequest::to_kv() const {
  KeyValues kv;
  kv.set("class", class_label);
  kv.set("n_images", n_images);
  kv.set("steps", steps);
  kv.set("temperature", temperature);
  kv.set("cfg_scale", cfg_scale);
  kv.set("seed", seed);
  kv.set("source", to_string(source));
  return kv;
}

SampleRequest SampleRequest::from_kv(const KeyValues& kv) {
  SampleRequest r;
  r.class_label = kv.integer("class", r.class_label);
  r.n_images = kv.integer("n_images", r.n_images);
  r.steps = kv.integer("steps", r.steps);
  r.temperature = kv.real("temperature", r.temperature);
  r.cfg_scale = kv.real("cfg_scale", r.cfg_scale);
  r.seed = kv.u64("seed", r.seed);
  r.source = condition_source_from_string(kv.str("source", to_string(r.source)));
  return r;
}

namespace {

std::vector<int> discrete_conditions(const Generator& gen, const SampleRequest& req, const std::vector<int>& classes,
                                     int seq_len) {
  const auto m = static_cast<std::size_t>(seq_len);
  std::vector<int> out(classes.size() * m, 0);
  if (gen.model->config().conditioning == Conditioning::disabled) return out;

  if (req.source == ConditionSource::prior) {
    if (gen.prior == nullptr || gen.prior_weights == nullptr) {
      throw std::invalid_argument("generate: prior-conditioned sampling needs a prior model");
    }
    if (gen.prior->config().seq_len != seq_len || gen.prior->config().vocab != gen.model->config().vocab) {
      throw ShapeError("generate: prior and DisCon model disagree on sequence length or vocabulary");
    }
    const auto seqs = sample_prior(*gen.prior, *gen.prior_weights, classes, PriorSampling{req.cfg_scale, 1.0},
                                   mix64(req.seed ^ kPriorStream));
    for (std::size_t i = 0; i < seqs.size(); ++i) std::copy(seqs[i].begin(), seqs[i].end(), out.begin() + i * m);
    return out;
  }

  if (gen.ground_truth == nullptr) throw std::invalid_argument("generate: ground-truth sampling needs a dataset");
  const TokenBatch& gt = *gen.ground_truth;
  if (gt.seq_len != seq_len) throw ShapeError("generate: ground-truth sequence length differs from the model");
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(gen.model->config().n_classes));
  for (int i = 0; i < gt.size(); ++i) {
    const int c = gt.classes[static_cast<std::size_t>(i)];
    if (c >= 0 && c < static_cast<int>(by_class.size())) by_class[static_cast<std::size_t>(c)].push_back(i);
  }
  const Rng root = Rng(req.seed).split(kTruthStream);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto& pool = by_class[static_cast<std::size_t>(classes[i])];
    if (pool.empty()) throw std::invalid_argument("generate: no ground-truth sample of class " + std::to_string(classes[i]));
    Rng pick = root.split(i);
    const auto src = static_cast<std::size_t>(pool[pick.uniform_int(pool.size())]);
    std::copy_n(gt.discrete.begin() + static_cast<std::ptrdiff_t>(src * m), m, out.begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  return out;
}

// Masked decoding of one chunk of images, in normalized token space.
Matrix decode_chunk(const Generator& gen, const SampleRequest& req, const std::vector<int>& schedule,
                    std::span<const int> classes, std::span<const int> discrete, std::size_t first_image) {
  const DisConModel& model = *gen.model;
  const int m = model.config().seq_len;
  const int d = model.config().token_dim;
  const auto b = classes.size();
  const auto mm = static_cast<std::size_t>(m);

  std::vector<std::vector<int>> order(b);
  std::vector<Rng> image_rng;
  image_rng.reserve(b);
  const Rng root = Rng(req.seed).split(kImageStream);
  for (std::size_t i = 0; i < b; ++i) {
    image_rng.push_back(root.split(first_image + i));
    Rng perm = image_rng.back().split(0);
    order[i] = perm.permutation(m);
  }

  Matrix x = Matrix::Zero(static_cast<Index>(b * mm), d);
  std::vector<char> hidden(b * mm, 1);
  std::size_t done = 0;
  for (const int count : schedule) {
    Matrix z;
    {
      Graph g;
      BoundParams p(g, *gen.weights, false);
      z = model.encode_context(p, x, discrete, classes, hidden).value();
    }
    // z holds one row per hidden position, by image then position.
    std::vector<int> rows;
    std::vector<std::size_t> targets;
    std::vector<Rng> streams;
    int z_row = 0;
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<char> now(mm, 0);
      for (std::size_t k = done; k < done + static_cast<std::size_t>(count); ++k) now[static_cast<std::size_t>(order[i][k])] = 1;
      for (std::size_t pos = 0; pos < mm; ++pos) {
        if (!hidden[i * mm + pos]) continue;
        if (now[pos]) {
          rows.push_back(z_row);
          targets.push_back(i * mm + pos);
          streams.push_back(image_rng[i].split(1 + pos));
        }
        ++z_row;
      }
    }
    Matrix z_sel(static_cast<Index>(rows.size()), z.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) z_sel.row(static_cast<Index>(r)) = z.row(rows[r]);
    const Matrix tokens = sample_tokens(model.head(), *gen.weights, z_sel, model.schedule(), req.temperature, streams);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      x.row(static_cast<Index>(targets[r])) = tokens.row(static_cast<Index>(r));
      hidden[targets[r]] = 0;
    }
    done += static_cast<std::size_t>(count);
  }
  return x;
}

}  // namespace

GeneratedBatch generate(const Generator& gen, const SampleRequest& req) {
  if (gen.model == nullptr || gen.weights == nullptr) throw std::invalid_argument("generate: no DisCon model");
  const DisConConfig& cfg = gen.model->config();
  req.validate(cfg.seq_len, cfg.n_classes);
  if (gen.norm.dim() != cfg.token_dim) throw ShapeError("generate: normalizer dimension differs from the model");

  GeneratedBatch out;
  out.seq_len = cfg.seq_len;
  const auto n = static_cast<std::size_t>(req.n_images);
  const auto m = static_cast<std::size_t>(cfg.seq_len);
  out.classes.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.classes[i] = req.class_label >= 0 ? req.class_label : static_cast<int>(i % static_cast<std::size_t>(cfg.n_classes));
  }
  out.discrete = discrete_conditions(gen, req, out.classes, cfg.seq_len);

  const std::vector<int> schedule = reveal_schedule(cfg.seq_len, req.steps);
  Matrix normalized(static_cast<Index>(n * m), cfg.token_dim);
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t len = std::min<std::size_t>(kChunk, n - start);
    const Matrix chunk = decode_chunk(gen, req, schedule, std::span<const int>(out.classes).subspan(start, len),
                                      std::span<const int>(out.discrete).subspan(start * m, len * m), start);
    normalized.middleRows(static_cast<Index>(start * m), chunk.rows()) = chunk;
  }
  out.tokens = gen.norm.decode(normalized);
  out.provenance.merge("request", req.to_kv());
  out.provenance.set("model.conditioning", to_string(cfg.conditioning));
  return out;
}

ModelBundle load_bundle(const std::filesystem::path& discon, const std::filesystem::path& prior,
                        const std::filesystem::path& tokenizer) {
  const Checkpoint dc = load_checkpoint(discon, CheckpointKind::discon);
  const Checkpoint tc = load_checkpoint(tokenizer, CheckpointKind::tokenizer);
  ModelBundle b{discon_from(dc), dc.ema.empty() ? dc.params : dc.ema, std::nullopt, {}, tokenizers_from(tc), {}};
  b.hashes.set("ckpt.discon", file_hash(discon));
  b.hashes.set("ckpt.tokenizer", file_hash(tokenizer));
  if (!prior.empty()) {
    const Checkpoint pc = load_checkpoint(prior, CheckpointKind::prior);
    b.prior.emplace(prior_from(pc));
    b.prior_weights = pc.ema.empty() ? pc.params : pc.ema;
    b.hashes.set("ckpt.prior", file_hash(prior));
  }
  return b;
}

Generator make_generator(const ModelBundle& bundle, const TokenBatch* ground_truth) {
  Generator g;
  g.model = &bundle.model;
  g.weights = &bundle.weights;
  if (bundle.prior) {
    g.prior = &*bundle.prior;
    g.prior_weights = &bundle.prior_weights;
  }
  g.norm = bundle.tokenizers.norm;
  g.ground_truth = ground_truth;
  return g;
}

GenerationMetrics generation_metrics(const GeneratedBatch& batch, const Dataset& reference) {
  const Index d = batch.tokens.cols();
  const auto m = static_cast<Index>(batch.seq_len);
  const int n_classes = reference.spec.n_classes;
  std::vector<std::vector<Index>> gen_rows(static_cast<std::size_t>(n_classes)), ref_rows(gen_rows.size());
  for (std::size_t i = 0; i < batch.classes.size(); ++i) gen_rows.at(static_cast<std::size_t>(batch.classes[i])).push_back(static_cast<Index>(i));
  for (std::size_t i = 0; i < reference.samples.size(); ++i) ref_rows.at(static_cast<std::size_t>(reference.samples[i].class_label)).push_back(static_cast<Index>(i));

  GenerationMetrics out;
  for (std::size_t c = 0; c < gen_rows.size(); ++c) {
    if (gen_rows[c].empty()) continue;
    if (ref_rows[c].empty()) throw std::invalid_argument("generation_metrics: reference lacks class " + std::to_string(c));
    Matrix gen(static_cast<Index>(gen_rows[c].size()) * m, d);
    for (std::size_t k = 0; k < gen_rows[c].size(); ++k) gen.middleRows(static_cast<Index>(k) * m, m) = batch.tokens.middleRows(gen_rows[c][k] * m, m);
    Matrix ref(static_cast<Index>(ref_rows[c].size()) * m, d);
    for (std::size_t k = 0; k < ref_rows[c].size(); ++k) ref.middleRows(static_cast<Index>(k) * m, m) = reference.samples[static_cast<std::size_t>(ref_rows[c][k])].tokens;
    out.class_fd.push_back(frechet_distance(gen, ref));
  }
  if (out.class_fd.empty()) throw std::invalid_argument("generation_metrics: empty batch");
  out.fd = std::accumulate(out.class_fd.begin(), out.class_fd.end(), 0.0) / static_cast<double>(out.class_fd.size());
  out.modes = mode_report(batch.tokens, reference.centers, reference.spec.sigma);
  return out;
}

std::vector<ResultRow> compare_runs(const std::vector<GridCell>& grid, const Dataset& reference, int images_per_batch) {
  std::vector<ResultRow> rows;
  for (const GridCell& cell : grid) {
    ResultRow row;
    row.run_id = cell.run_id;
    row.steps = cell.request.steps;
    row.temperature = cell.request.temperature;
    row.cfg_scale = cell.request.cfg_scale;
    try {
      const ModelBundle bundle = load_bundle(cell.discon_ckpt, cell.prior_ckpt, cell.tokenizer_ckpt);
      row.conditioning = to_string(bundle.model.config().conditioning);
      row.ckpt_hash = bundle.hashes.str("ckpt.discon", "");
      const TokenBatch truth = tokenize(reference, bundle.tokenizers.codebook, bundle.tokenizers.norm);
      const Generator gen = make_generator(bundle, &truth);
      const auto t0 = std::chrono::steady_clock::now();
      const GeneratedBatch batch = generate(gen, cell.request);
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      const int batches = (cell.request.n_images + images_per_batch - 1) / images_per_batch;
      row.sec_per_batch = dt.count() / batches;
      const GenerationMetrics metrics = generation_metrics(batch, reference);
      row.fd = metrics.fd;
      row.mode_coverage = metrics.modes.coverage;
      row.ood_rate = metrics.modes.ood_rate;
    } catch (const std::exception& e) {
      row.error = e.what();
      row.fd = row.mode_coverage = row.ood_rate = row.sec_per_batch = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string results_csv(const std::vector<ResultRow>& rows, bool with_timing) {
  std::ostringstream os;
  os << kResultsHeader << '\n';
  for (const ResultRow& r : rows) {
    os << r.run_id << ',' << r.conditioning << ',' << r.steps << ',' << format_real(r.temperature) << ','
       << format_real(r.cfg_scale) << ',' << format_real(r.fd) << ',' << format_real(r.mode_coverage) << ','
       << format_real(r.ood_rate) << ',' << (with_timing ? format_real(r.sec_per_batch) : std::string()) << ','
       << r.ckpt_hash << '\n';
  }
  return os.str();
}

Matrix flatten_sequences(const Matrix& tokens, int seq_len) {
  if (seq_len < 1 || tokens.rows() % seq_len != 0) throw ShapeError("flatten_sequences: rows not a multiple of M");
  Matrix out(tokens.rows() / seq_len, tokens.cols() * seq_len);
  // Row-major storage makes the reshape a straight copy.
  std::copy(tokens.data(), tokens.data() + tokens.size(), out.data());
  return out;
}

MarginalOracleResult marginal_oracle(const Generator& gen, int class_label, int samples, std::uint64_t seed) {
  if (gen.model == nullptr || gen.prior == nullptr) throw std::invalid_argument("marginal_oracle: needs both models");
  const int v = gen.prior->config().vocab;
  const int m = gen.prior->config().seq_len;
  double count = 1.0;
  for (int i = 0; i < m; ++i) count *= v;
  if (count > 16.0) {
    throw std::invalid_argument("marginal_oracle: V^M = " + format_real(count) + " sequences is too many to enumerate (limit 16)");
  }
  if (samples < 1) throw std::invalid_argument("marginal_oracle: samples must be positive");

  MarginalOracleResult out;
  const int n_seq = static_cast<int>(count);
  std::vector<int> flat;
  for (int s = 0; s < n_seq; ++s) {
    std::vector<int> seq(static_cast<std::size_t>(m));
    for (int i = m - 1, r = s; i >= 0; --i, r /= v) seq[static_cast<std::size_t>(i)] = r % v;
    flat.insert(flat.end(), seq.begin(), seq.end());
    out.sequences.push_back(std::move(seq));
  }
  const std::vector<int> classes(static_cast<std::size_t>(n_seq), class_label);
  for (double lp : sequence_log_prob(*gen.prior, *gen.prior_weights, flat, classes, PriorSampling{}))
    out.probabilities.push_back(std::exp(lp));

  const Rng root = Rng(seed).split(kOracleStream);
  std::vector<GaussianMoments<double>> parts;
  for (int s = 0; s < n_seq; ++s) {
    TokenBatch fixed;
    fixed.seq_len = m;
    fixed.classes = {class_label};
    fixed.discrete = out.sequences[static_cast<std::size_t>(s)];
    fixed.continuous = Matrix::Zero(m, gen.model->config().token_dim);
    Generator conditioned = gen;
    conditioned.ground_truth = &fixed;
    SampleRequest req;
    req.class_label = class_label;
    req.n_images = samples;
    req.steps = m;
    req.seed = root.split(static_cast<std::uint64_t>(s)).next_u64();
    req.source = ConditionSource::ground_truth;
    parts.push_back(fit_moments(flatten_sequences(generate(conditioned, req).tokens, m)));
  }
  const GaussianMoments<double> mixture = mixture_moments(parts, out.probabilities);

  SampleRequest e2e;
  e2e.class_label = class_label;
  e2e.n_images = samples;
  e2e.steps = m;
  e2e.seed = root.split(kOracleStream).next_u64();
  e2e.source = ConditionSource::prior;
  const Matrix end_to_end = flatten_sequences(generate(gen, e2e).tokens, m);
  out.fd = frechet_distance(mixture, fit_moments(end_to_end));
  return out;
}

namespace {

void perturb(std::vector<Matrix>& values, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& v : values)
    for (Index i = 0; i < v.size(); ++i) v.data()[i] += 0.3 * rng.normal();
}

TokenBatch random_batch(int n, int seq_len, int dim, int vocab, int classes, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch b;
  b.seq_len = seq_len;
  for (int i = 0; i < n; ++i) b.classes.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(classes))));
  for (int i = 0; i < n * seq_len; ++i) b.discrete.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab))));
  b.continuous.resize(n * seq_len, dim);
  for (Index i = 0; i < b.continuous.size(); ++i) b.continuous.data()[i] = rng.normal();
  return b;
}

double check_model(const LossModel& model, const TokenBatch& batch, std::uint64_t seed, double step) {
  std::vector<Matrix> values = model.params().values();
  perturb(values, seed);
  const Rng fixed(seed + 1);
  auto loss = [&](const BoundParams& p) {
    Rng rng = fixed;
    return model.loss(p, batch, rng);
  };
  return grad_check_params(loss, values, step);
}

}  // namespace

std::vector<GradCheckEntry> model_gradcheck_suite(std::uint64_t seed, double step) {
  std::vector<GradCheckEntry> out;

  PriorConfig pc;
  pc.layers = 1;
  pc.width = 8;
  pc.heads = 2;
  pc.vocab = 5;
  pc.seq_len = 3;
  pc.n_classes = 2;
  pc.mlp_ratio = 2;
  pc.cfg_null_prob = 0.5;
  const PriorModel prior(pc, seed);
  out.push_back({"prior.loss", check_model(prior, random_batch(3, 3, 2, 5, 2, seed + 10), seed + 20, step)});

  DisConConfig dc;
  dc.layers = 1;
  dc.width = 8;
  dc.heads = 2;
  dc.mlp_ratio = 2;
  dc.seq_len = 3;
  dc.vocab = 5;
  dc.n_classes = 2;
  dc.z_dim = 6;
  dc.head_width = 6;
  dc.head_blocks = 1;
  dc.diffusion_steps = 10;
  dc.diffusion_batch_mul = 2;
  for (const Conditioning c : {Conditioning::prefix, Conditioning::disabled}) {
    dc.conditioning = c;
    const DisConModel model(dc, seed + 1);
    out.push_back({"backbone.loss(" + to_string(c) + ")",
                   check_model(model, random_batch(2, 3, 2, 5, 2, seed + 11), seed + 21, step)});
  }

  ParamSet ps;
  Rng init(seed + 2);
  const DiffHead head(ps, "head", DiffHeadConfig{2, 5, 6, 2}, init);
  const NoiseSchedule schedule = NoiseSchedule::cosine(10);
  Rng data(seed + 3);
  Matrix z(4, 5), x0(4, 2);
  for (Index i = 0; i < z.size(); ++i) z.data()[i] = data.normal();
  for (Index i = 0; i < x0.size(); ++i) x0.data()[i] = data.normal();
  std::vector<Matrix> values = ps.values();
  perturb(values, seed + 4);
  const Rng fixed(seed + 5);
  auto head_loss = [&](const BoundParams& p) {
    Rng rng = fixed;
    return diffusion_loss(head, p, p.graph().constant(z), x0, schedule, rng, 2);
  };
  out.push_back({"diffhead.loss", grad_check_params(head_loss, values, step)});
  return out;
}

}  // namespace discon
