#pragma once

// Parameter storage and the handful of layers the models are built from.
// Layers are plain index bundles into a ParamSet; the apply() functions bind
// them to a graph for one forward pass.

#include "discon/numerics.hpp"
#include "discon/rng.hpp"

#include <string>
#include <vector>

namespace discon {

class ParamSet {
 public:
  std::size_t add(std::string name, Matrix init);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Matrix& value(std::size_t i) { return values_.at(i); }
  const Matrix& value(std::size_t i) const { return values_.at(i); }
  std::vector<Matrix>& values() { return values_; }
  const std::vector<Matrix>& values() const { return values_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t find(const std::string& name) const;
  std::size_t scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

// One graph's view of a ParamSet.
class BoundParams {
 public:
  BoundParams(Graph& g, const ParamSet& params, bool requires_grad);
  BoundParams(Graph& g, const std::vector<Matrix>& values, bool requires_grad);
  Var operator[](std::size_t i) const { return vars_.at(i); }
  const std::vector<Var>& vars() const { return vars_; }
  Graph& graph() const { return *graph_; }

  // Gradients in parameter order; zeros for unused parameters.
  std::vector<Matrix> gradients(const GradientMap& grads) const;

 private:
  Graph* graph_;
  std::vector<Var> vars_;
};

struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  Index in = 0;
  Index out = 0;
};

struct LayerNorm {
  std::size_t gamma = 0;
  std::size_t beta = 0;
};

struct TransformerBlock {
  LayerNorm norm1;
  Linear qkv;
  Linear proj;
  LayerNorm norm2;
  Linear fc1;
  Linear fc2;
  Index heads = 1;
};

// Xavier-uniform weights, zero bias.
Linear make_linear(ParamSet& params, const std::string& name, Index in, Index out, Rng& rng);
LayerNorm make_layer_norm(ParamSet& params, const std::string& name, Index width);
TransformerBlock make_transformer_block(ParamSet& params, const std::string& name, Index width,
                                        Index heads, Index mlp_ratio, Rng& rng);
// N(0, std^2) table of shape rows x width.
std::size_t make_embedding(ParamSet& params, const std::string& name, Index rows, Index width,
                           double stddev, Rng& rng);

Var apply(const Linear& layer, const BoundParams& p, Var x);
Var apply(const LayerNorm& layer, const BoundParams& p, Var x);
// Pre-norm block over packed sequences [batch * seq_len, width].
Var apply(const TransformerBlock& block, const BoundParams& p, Var x, Index seq_len,
          const Matrix& mask, Rng* dropout_rng = nullptr, double dropout = 0.0);

// Inverted dropout; identity when rng is null or rate is zero.
Var dropout(Var x, double rate, Rng* rng);

// Sinusoidal features of integer timesteps, one row per entry.
Matrix timestep_features(std::span<const int> steps, Index width);

}  // namespace discon
