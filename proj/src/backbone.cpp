#include "discon/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace discon {

std::string to_string(Conditioning c) { return c == Conditioning::prefix ? "prefix" : "disabled"; }

Conditioning conditioning_from_string(const std::string& s) {
  if (s == "prefix") return Conditioning::prefix;
  if (s == "disabled") return Conditioning::disabled;
  throw ConfigError("conditioning must be 'prefix' or 'disabled', got '" + s + "'");
}

void DisConConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1 || mlp_ratio < 1 || token_dim < 1 || vocab < 1 || n_classes < 1 ||
      z_dim < 1 || head_width < 1 || head_blocks < 0 || diffusion_steps < 1 || diffusion_batch_mul < 1) {
    throw ConfigError("discon: sizes must be positive");
  }
  if (seq_len < 2) throw ConfigError("discon: seq_len must be >= 2");
  if (width % heads != 0) throw ConfigError("discon: width must be divisible by heads");
  if (!(mask_ratio_lo > 0.0 && mask_ratio_lo <= mask_ratio_hi && mask_ratio_hi <= 1.0)) {
    throw ConfigError("discon: mask ratio range must satisfy 0 < lo <= hi <= 1");
  }
}

KeyValues DisConConfig::to_kv() const {
  KeyValues kv;
  kv.set("layers", layers);
  kv.set("width", width);
  kv.set("heads", heads);
  kv.set("mlp_ratio", mlp_ratio);
  kv.set("seq_len", seq_len);
  kv.set("token_dim", token_dim);
  kv.set("vocab", vocab);
  kv.set("n_classes", n_classes);
  kv.set("z_dim", z_dim);
  kv.set("mask_ratio_lo", mask_ratio_lo);
  kv.set("mask_ratio_hi", mask_ratio_hi);
  kv.set("conditioning", to_string(conditioning));
  kv.set("head_width", head_width);
  kv.set("head_blocks", head_blocks);
  kv.set("diffusion_steps", diffusion_steps);
  kv.set("diffusion_batch_mul", diffusion_batch_mul);
  return kv;
}

DisConConfig DisConConfig::from_kv(const KeyValues& kv) {
  DisConConfig c;
  c.layers = kv.integer("layers", c.layers);
  c.width = kv.integer("width", c.width);
  c.heads = kv.integer("heads", c.heads);
  c.mlp_ratio = kv.integer("mlp_ratio", c.mlp_ratio);
  c.seq_len = kv.integer("seq_len", c.seq_len);
  c.token_dim = kv.integer("token_dim", c.token_dim);
  c.vocab = kv.integer("vocab", c.vocab);
  c.n_classes = kv.integer("n_classes", c.n_classes);
  c.z_dim = kv.integer("z_dim", c.width);
  c.mask_ratio_lo = kv.real("mask_ratio_lo", c.mask_ratio_lo);
  c.mask_ratio_hi = kv.real("mask_ratio_hi", c.mask_ratio_hi);
  c.conditioning = conditioning_from_string(kv.str("conditioning", to_string(c.conditioning)));
  c.head_width = kv.integer("head_width", c.head_width);
  c.head_blocks = kv.integer("head_blocks", c.head_blocks);
  c.diffusion_steps = kv.integer("diffusion_steps", c.diffusion_steps);
  c.diffusion_batch_mul = kv.integer("diffusion_batch_mul", c.diffusion_batch_mul);
  c.validate();
  return c;
}

int MaskState::hidden_count() const {
  int n = 0;
  for (char m : mask) n += m != 0;
  return n;
}

MaskState sample_mask(int seq_len, double lo, double hi, Rng& rng) {
  if (seq_len < 2) throw std::invalid_argument("sample_mask: seq_len must be >= 2");
  if (!(lo > 0.0 && lo <= hi && hi <= 1.0)) throw std::invalid_argument("sample_mask: need 0 < lo <= hi <= 1");
  const double ratio = lo == hi ? lo : rng.uniform(lo, hi);
  // The small offset keeps e.g. 0.7 * 10 from rounding up to 8.
  int count = static_cast<int>(std::ceil(ratio * seq_len - 1e-9));
  count = std::clamp(count, 1, seq_len);
  const std::vector<int> perm = rng.permutation(seq_len);
  MaskState s;
  s.mask.assign(static_cast<std::size_t>(seq_len), 0);
  for (int i = 0; i < count; ++i) s.mask[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = 1;
  s.reveal_order.assign(perm.begin(), perm.begin() + count);
  rng.shuffle(s.reveal_order);
  return s;
}

DisConModel::DisConModel(const DisConConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const Index w = config_.width;
  class_emb_ = make_embedding(params_, "backbone.class_emb", config_.n_classes, w, 0.02, rng);
  if (config_.conditioning == Conditioning::prefix) {
    discrete_emb_ = make_embedding(params_, "backbone.discrete_emb", config_.vocab, w, 0.02, rng);
  }
  pos_emb_ = make_embedding(params_, "backbone.pos_emb", sequence_length(), w, 0.02, rng);
  mask_emb_ = make_embedding(params_, "backbone.mask_emb", 1, w, 0.02, rng);
  continuous_proj_ = make_linear(params_, "backbone.continuous_proj", config_.token_dim, w, rng);
  for (int l = 0; l < config_.layers; ++l) {
    blocks_.push_back(make_transformer_block(params_, "backbone.block" + std::to_string(l), w, config_.heads,
                                             config_.mlp_ratio, rng));
  }
  final_norm_ = make_layer_norm(params_, "backbone.final_norm", w);
  z_proj_ = make_linear(params_, "backbone.z_proj", w, config_.z_dim, rng);
  head_ = DiffHead(params_, "head", {config_.token_dim, config_.z_dim, config_.head_width, config_.head_blocks}, rng);
  schedule_ = NoiseSchedule::cosine(config_.diffusion_steps);
}

Index DisConModel::sequence_length() const {
  return 1 + config_.seq_len * (config_.conditioning == Conditioning::prefix ? 2 : 1);
}

Var DisConModel::encode_rows(const BoundParams& p, Var x, Index seq_len) const {
  const Matrix no_mask;
  for (const auto& block : blocks_) x = apply(block, p, x, seq_len, no_mask);
  return apply(final_norm_, p, x);
}

Var DisConModel::encode_context(const BoundParams& p, const Matrix& continuous, std::span<const int> discrete,
                                std::span<const int> classes, std::span<const char> mask) const {
  Graph& g = p.graph();
  const int m = config_.seq_len;
  const auto batch = static_cast<Index>(classes.size());
  const Index tokens = batch * m;
  const bool prefix = config_.conditioning == Conditioning::prefix;
  if (continuous.rows() != tokens || continuous.cols() != config_.token_dim ||
      static_cast<Index>(mask.size()) != tokens || (prefix && static_cast<Index>(discrete.size()) != tokens)) {
    throw ShapeError("encode_context: " + std::to_string(batch) + " samples of length " + std::to_string(m) +
                     " need x_c [" + std::to_string(tokens) + "x" + std::to_string(config_.token_dim) +
                     "], got " + shape_string(continuous) + "; x_d " + std::to_string(discrete.size()) +
                     " ids; mask " + std::to_string(mask.size()) + " flags");
  }
  for (int c : classes) {
    if (c < 0 || c >= config_.n_classes) throw std::out_of_range("class " + std::to_string(c) + " out of range");
  }

  // Project visible tokens only; hidden positions point at the mask embedding.
  std::vector<int> visible_rows, hidden_rows;
  for (Index r = 0; r < tokens; ++r) (mask[static_cast<std::size_t>(r)] ? hidden_rows : visible_rows).push_back(static_cast<int>(r));
  Matrix visible(static_cast<Index>(visible_rows.size()), config_.token_dim);
  for (std::size_t i = 0; i < visible_rows.size(); ++i) visible.row(static_cast<Index>(i)) = continuous.row(visible_rows[i]);
  const Var xc_table = concat_rows({apply(continuous_proj_, p, g.constant(std::move(visible))), p[mask_emb_]});

  std::vector<int> xc_index(static_cast<std::size_t>(tokens));
  {
    int v = 0;
    const int mask_row = static_cast<int>(visible_rows.size());
    for (Index r = 0; r < tokens; ++r) xc_index[static_cast<std::size_t>(r)] = mask[static_cast<std::size_t>(r)] ? mask_row : v++;
  }

  // Rows: classes [0, B), discrete [B, B + B*M) when present, then continuous.
  std::vector<Var> parts{embedding(p[class_emb_], classes)};
  if (prefix) parts.push_back(embedding(p[discrete_emb_], discrete));
  parts.push_back(gather_rows(xc_table, xc_index));
  const Var all = concat_rows(parts);

  const Index len = sequence_length();
  const Index xc_base = prefix ? batch + tokens : batch;
  std::vector<int> order, pos;
  order.reserve(static_cast<std::size_t>(batch * len));
  for (Index b = 0; b < batch; ++b) {
    order.push_back(static_cast<int>(b));
    if (prefix) {
      for (int i = 0; i < m; ++i) order.push_back(static_cast<int>(batch + b * m + i));
    }
    for (int i = 0; i < m; ++i) order.push_back(static_cast<int>(xc_base + b * m + i));
    for (Index i = 0; i < len; ++i) pos.push_back(static_cast<int>(i));
  }
  const Var h = encode_rows(p, add(gather_rows(all, order), embedding(p[pos_emb_], pos)), len);

  std::vector<int> out_rows;
  out_rows.reserve(hidden_rows.size());
  for (int r : hidden_rows) {
    const int b = r / m;
    const int i = r % m;
    out_rows.push_back(static_cast<int>(b * len + (len - m) + i));
  }
  return apply(z_proj_, p, gather_rows(h, out_rows));
}

Var DisConModel::loss(const BoundParams& p, const TokenBatch& batch, Rng& rng) const {
  const int m = config_.seq_len;
  if (batch.seq_len != m) throw std::invalid_argument("discon: batch seq_len mismatch");
  std::vector<char> mask;
  mask.reserve(static_cast<std::size_t>(batch.size()) * m);
  for (int b = 0; b < batch.size(); ++b) {
    const MaskState s = sample_mask(m, config_.mask_ratio_lo, config_.mask_ratio_hi, rng);
    mask.insert(mask.end(), s.mask.begin(), s.mask.end());
  }
  Var z = encode_context(p, batch.continuous, batch.discrete, batch.classes, mask);
  Matrix x0(z.rows(), batch.token_dim());
  Index k = 0;
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (mask[r]) x0.row(k++) = batch.continuous.row(static_cast<Index>(r));
  }
  return diffusion_loss(head_, p, z, x0, schedule_, rng, config_.diffusion_batch_mul);
}

}  // namespace discon
