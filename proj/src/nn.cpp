#include "discon/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace discon {

std::size_t ParamSet::add(std::string name, Matrix init) {
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return values_.size() - 1;
}

std::size_t ParamSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

BoundParams::BoundParams(Graph& g, const ParamSet& params, bool requires_grad)
    : BoundParams(g, params.values(), requires_grad) {}

BoundParams::BoundParams(Graph& g, const std::vector<Matrix>& values, bool requires_grad)
    : graph_(&g) {
  vars_.reserve(values.size());
  for (const auto& v : values) vars_.push_back(g.parameter(v, requires_grad));
}

std::vector<Matrix> BoundParams::gradients(const GradientMap& grads) const {
  std::vector<Matrix> out;
  out.reserve(vars_.size());
  for (Var v : vars_) {
    if (grads.contains(v)) {
      out.push_back(grads[v]);
    } else {
      out.push_back(Matrix::Zero(v.rows(), v.cols()));
    }
  }
  return out;
}

Linear make_linear(ParamSet& params, const std::string& name, Index in, Index out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = params.add(name + ".w", std::move(w));
  l.bias = params.add(name + ".b", Matrix::Zero(1, out));
  return l;
}

LayerNorm make_layer_norm(ParamSet& params, const std::string& name, Index width) {
  LayerNorm ln;
  ln.gamma = params.add(name + ".gamma", Matrix::Ones(1, width));
  ln.beta = params.add(name + ".beta", Matrix::Zero(1, width));
  return ln;
}

TransformerBlock make_transformer_block(ParamSet& params, const std::string& name, Index width,
                                        Index heads, Index mlp_ratio, Rng& rng) {
  if (width % heads != 0) {
    throw std::invalid_argument("width " + std::to_string(width) + " not divisible by heads " +
                                std::to_string(heads));
  }
  TransformerBlock b;
  b.heads = heads;
  b.norm1 = make_layer_norm(params, name + ".norm1", width);
  b.qkv = make_linear(params, name + ".qkv", width, 3 * width, rng);
  b.proj = make_linear(params, name + ".proj", width, width, rng);
  b.norm2 = make_layer_norm(params, name + ".norm2", width);
  b.fc1 = make_linear(params, name + ".fc1", width, mlp_ratio * width, rng);
  b.fc2 = make_linear(params, name + ".fc2", mlp_ratio * width, width, rng);
  return b;
}

std::size_t make_embedding(ParamSet& params, const std::string& name, Index rows, Index width,
                           double stddev, Rng& rng) {
  Matrix t(rows, width);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = stddev * rng.normal();
  return params.add(name, std::move(t));
}

Var apply(const Linear& layer, const BoundParams& p, Var x) {
  return add(matmul(x, p[layer.weight]), p[layer.bias]);
}

Var apply(const LayerNorm& layer, const BoundParams& p, Var x) {
  return layer_norm(x, p[layer.gamma], p[layer.beta]);
}

Var dropout(Var x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  Matrix keep(x.rows(), x.cols());
  const double inv = 1.0 / (1.0 - rate);
  for (Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng->uniform() < rate ? 0.0 : inv;
  return mul(x, x.graph->constant(std::move(keep)));
}

Var apply(const TransformerBlock& block, const BoundParams& p, Var x, Index seq_len,
          const Matrix& mask, Rng* dropout_rng, double rate) {
  const Index width = x.cols();
  Var h = apply(block.norm1, p, x);
  Var qkv = apply(block.qkv, p, h);
  Var q = slice_cols(qkv, 0, width);
  Var k = slice_cols(qkv, width, width);
  Var v = slice_cols(qkv, 2 * width, width);
  Var a = apply(block.proj, p, attention(q, k, v, seq_len, block.heads, mask));
  x = add(x, dropout(a, rate, dropout_rng));
  h = apply(block.norm2, p, x);
  h = apply(block.fc2, p, gelu(apply(block.fc1, p, h)));
  return add(x, dropout(h, rate, dropout_rng));
}

Matrix timestep_features(std::span<const int> steps, Index width) {
  if (width % 2 != 0) throw std::invalid_argument("timestep feature width must be even");
  const Index half = width / 2;
  Matrix out(static_cast<Index>(steps.size()), width);
  for (std::size_t r = 0; r < steps.size(); ++r) {
    for (Index i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(steps[r]) * freq;
      out(static_cast<Index>(r), i) = std::cos(arg);
      out(static_cast<Index>(r), half + i) = std::sin(arg);
    }
  }
  return out;
}

}  // namespace discon
