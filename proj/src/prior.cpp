#include "discon/prior.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace discon {

void PriorConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1 || vocab < 1 || seq_len < 1 || n_classes < 1 || mlp_ratio < 1) {
    throw ConfigError("prior: layers, width, heads, vocab, seq_len, n_classes and mlp_ratio must be positive");
  }
  if (width % heads != 0) throw ConfigError("prior: width must be divisible by heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("prior: dropout must lie in [0, 1)");
  if (!(cfg_null_prob >= 0.0 && cfg_null_prob < 1.0)) {
    throw ConfigError("prior: cfg_null_prob must lie in [0, 1)");
  }
}

KeyValues PriorConfig::to_kv() const {
  KeyValues kv;
  kv.set("layers", layers);
  kv.set("width", width);
  kv.set("heads", heads);
  kv.set("vocab", vocab);
  kv.set("seq_len", seq_len);
  kv.set("n_classes", n_classes);
  kv.set("mlp_ratio", mlp_ratio);
  kv.set("dropout", dropout);
  kv.set("cfg_null_prob", cfg_null_prob);
  return kv;
}

PriorConfig PriorConfig::from_kv(const KeyValues& kv) {
  PriorConfig c;
  c.layers = kv.integer("layers", c.layers);
  c.width = kv.integer("width", c.width);
  c.heads = kv.integer("heads", c.heads);
  c.vocab = kv.integer("vocab", c.vocab);
  c.seq_len = kv.integer("seq_len", c.seq_len);
  c.n_classes = kv.integer("n_classes", c.n_classes);
  c.mlp_ratio = kv.integer("mlp_ratio", c.mlp_ratio);
  c.dropout = kv.real("dropout", c.dropout);
  c.cfg_null_prob = kv.real("cfg_null_prob", c.cfg_null_prob);
  c.validate();
  return c;
}

PriorModel::PriorModel(const PriorConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const Index w = config_.width;
  token_emb_ = make_embedding(params_, "prior.token_emb", config_.vocab, w, 0.02, rng);
  class_emb_ = make_embedding(params_, "prior.class_emb", config_.n_classes + 1, w, 0.02, rng);
  pos_emb_ = make_embedding(params_, "prior.pos_emb", config_.seq_len, w, 0.02, rng);
  for (int l = 0; l < config_.layers; ++l) {
    blocks_.push_back(make_transformer_block(params_, "prior.block" + std::to_string(l), w, config_.heads,
                                             config_.mlp_ratio, rng));
  }
  final_norm_ = make_layer_norm(params_, "prior.final_norm", w);
  head_ = make_linear(params_, "prior.head", w, config_.vocab, rng);
  // Zero logits at initialization: the untrained model predicts uniformly.
  params_.value(head_.weight).setZero();
}

Var PriorModel::logits(const BoundParams& p, std::span<const int> tokens, std::span<const int> classes,
                       int positions, Rng* dropout_rng) const {
  const int m = config_.seq_len;
  const auto batch = static_cast<int>(classes.size());
  if (positions < 1 || positions > m) {
    throw std::out_of_range("prior: positions must lie in [1, " + std::to_string(m) + "]");
  }
  if (tokens.size() != static_cast<std::size_t>(batch) * m) {
    throw std::invalid_argument("prior: expected " + std::to_string(batch * m) + " token ids, got " +
                                std::to_string(tokens.size()));
  }
  for (int c : classes) {
    if (c < 0 || c > config_.n_classes) throw std::out_of_range("prior: class " + std::to_string(c) + " out of range");
  }

  std::vector<int> prev;
  prev.reserve(static_cast<std::size_t>(batch) * (positions - 1));
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i + 1 < positions; ++i) prev.push_back(tokens[static_cast<std::size_t>(b) * m + i]);
  }
  Var rows = concat_rows({embedding(p[class_emb_], classes), embedding(p[token_emb_], prev)});

  // Interleave into per-sample order [class, x_0, ..., x_{P-2}].
  std::vector<int> order, pos;
  order.reserve(static_cast<std::size_t>(batch) * positions);
  pos.reserve(order.capacity());
  for (int b = 0; b < batch; ++b) {
    order.push_back(b);
    pos.push_back(0);
    for (int i = 0; i + 1 < positions; ++i) {
      order.push_back(batch + b * (positions - 1) + i);
      pos.push_back(i + 1);
    }
  }
  Var x = add(gather_rows(rows, order), embedding(p[pos_emb_], pos));
  x = dropout(x, config_.dropout, dropout_rng);
  const Matrix mask = causal_mask(positions);
  for (const auto& block : blocks_) x = apply(block, p, x, positions, mask, dropout_rng, config_.dropout);
  return apply(head_, p, apply(final_norm_, p, x));
}

Var PriorModel::loss(const BoundParams& p, const TokenBatch& batch, Rng& rng) const {
  if (batch.seq_len != config_.seq_len) throw std::invalid_argument("prior: batch seq_len mismatch");
  std::vector<int> classes = batch.classes;
  for (int& c : classes) {
    if (c < 0 || c >= config_.n_classes) throw std::out_of_range("prior: class " + std::to_string(c) + " out of range");
    if (config_.cfg_null_prob > 0.0 && rng.uniform() < config_.cfg_null_prob) c = null_class();
  }
  Rng* drop = config_.dropout > 0.0 ? &rng : nullptr;
  return cross_entropy(logits(p, batch.discrete, classes, config_.seq_len, drop), batch.discrete);
}

Var PriorModel::eval_loss(const BoundParams& p, const TokenBatch& batch) const {
  for (int c : batch.classes) {
    if (c < 0 || c >= config_.n_classes) throw std::out_of_range("prior: class " + std::to_string(c) + " out of range");
  }
  return cross_entropy(logits(p, batch.discrete, batch.classes, config_.seq_len), batch.discrete);
}

Matrix guide_logits(const Matrix& cond, const Matrix& null, double cfg_scale) {
  return null + cfg_scale * (cond - null);
}

int sample_categorical(const RowVector& logits, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  const RowVector z = logits / temperature;
  const RowVector w = (z.array() - z.maxCoeff()).exp();
  const double u = rng.uniform() * w.sum();
  double acc = 0.0;
  for (Index i = 0; i < w.cols(); ++i) {
    acc += w(i);
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding can leave u at the very top; fall back to the last positive entry.
  for (Index i = w.cols() - 1; i >= 0; --i) {
    if (w(i) > 0.0) return static_cast<int>(i);
  }
  return 0;
}

namespace {

constexpr std::size_t kSampleChunk = 512;

void check_sampling(const PriorSampling& s) {
  if (!(s.cfg_scale >= 0.0)) throw std::invalid_argument("cfg_scale must be >= 0");
  if (!(s.temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
}

// Guided logits at `position` for every sequence: [batch, V].
Matrix guided_step_logits(const PriorModel& model, const std::vector<Matrix>& weights,
                          std::span<const int> tokens, std::span<const int> classes, int position,
                          double cfg_scale) {
  const auto batch = static_cast<Index>(classes.size());
  const int positions = position + 1;
  const bool guided = cfg_scale != 1.0;
  std::vector<int> all_classes(classes.begin(), classes.end());
  std::vector<int> all_tokens(tokens.begin(), tokens.end());
  if (guided) {
    all_classes.insert(all_classes.end(), classes.size(), model.null_class());
    all_tokens.insert(all_tokens.end(), tokens.begin(), tokens.end());
  }
  Graph g;
  BoundParams p(g, weights, false);
  const Matrix& out = model.logits(p, all_tokens, all_classes, positions).value();
  Matrix step(batch, out.cols());
  for (Index b = 0; b < batch; ++b) step.row(b) = out.row(b * positions + position);
  if (!guided) return step;
  Matrix null(batch, out.cols());
  for (Index b = 0; b < batch; ++b) null.row(b) = out.row((batch + b) * positions + position);
  return guide_logits(step, null, cfg_scale);
}

}  // namespace

std::vector<std::vector<int>> sample_prior(const PriorModel& model, const std::vector<Matrix>& weights,
                                           std::span<const int> classes, const PriorSampling& sampling,
                                           std::uint64_t seed) {
  check_sampling(sampling);
  const int m = model.config().seq_len;
  for (int c : classes) {
    if (c < 0 || c >= model.config().n_classes) throw std::out_of_range("class " + std::to_string(c) + " out of range");
  }
  std::vector<std::vector<int>> out(classes.size());
  for (std::size_t start = 0; start < classes.size(); start += kSampleChunk) {
    const std::size_t batch = std::min(kSampleChunk, classes.size() - start);
    const auto chunk = classes.subspan(start, batch);
    std::vector<Rng> streams;
    for (std::size_t b = 0; b < batch; ++b) streams.push_back(Rng(seed).split(start + b));
    std::vector<int> tokens(batch * static_cast<std::size_t>(m), 0);
    for (int i = 0; i < m; ++i) {
      const Matrix logits = guided_step_logits(model, weights, tokens, chunk, i, sampling.cfg_scale);
      for (std::size_t b = 0; b < batch; ++b) {
        tokens[b * m + i] = sample_categorical(logits.row(static_cast<Index>(b)), sampling.temperature, streams[b]);
      }
    }
    for (std::size_t b = 0; b < batch; ++b) {
      out[start + b].assign(tokens.begin() + static_cast<std::ptrdiff_t>(b * m),
                            tokens.begin() + static_cast<std::ptrdiff_t>((b + 1) * m));
    }
  }
  return out;
}

std::vector<int> sample_prior(const PriorModel& model, int class_label, const PriorSampling& sampling,
                              std::uint64_t seed) {
  const int cls[] = {class_label};
  return sample_prior(model, model.params().values(), cls, sampling, seed).front();
}

std::vector<double> sequence_log_prob(const PriorModel& model, const std::vector<Matrix>& weights,
                                      std::span<const int> sequences, std::span<const int> classes,
                                      const PriorSampling& sampling) {
  check_sampling(sampling);
  const int m = model.config().seq_len;
  const auto batch = static_cast<Index>(classes.size());
  std::vector<int> all_classes(classes.begin(), classes.end());
  all_classes.insert(all_classes.end(), classes.size(), model.null_class());
  std::vector<int> all_tokens(sequences.begin(), sequences.end());
  all_tokens.insert(all_tokens.end(), sequences.begin(), sequences.end());
  Graph g;
  BoundParams p(g, weights, false);
  const Matrix& out = model.logits(p, all_tokens, all_classes, m).value();
  const Index rows = batch * m;
  Matrix guided = guide_logits(out.topRows(rows), out.bottomRows(rows), sampling.cfg_scale) / sampling.temperature;
  std::vector<double> lp(static_cast<std::size_t>(batch), 0.0);
  for (Index r = 0; r < rows; ++r) {
    const double mx = guided.row(r).maxCoeff();
    const double lse = mx + std::log((guided.row(r).array() - mx).exp().sum());
    lp[static_cast<std::size_t>(r / m)] += guided(r, sequences[static_cast<std::size_t>(r)]) - lse;
  }
  return lp;
}

}  // namespace discon
