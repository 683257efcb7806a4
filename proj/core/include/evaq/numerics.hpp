#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evaq/error.hpp"

namespace evaq::num {

/// Dense row-major 64-bit float tensor.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> v;

  static Tensor zeros(std::vector<std::size_t> shape);

  std::size_t size() const { return v.size(); }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t r, std::size_t c) { return v[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols() + c]; }
};

/// Named view of a parameter tensor; Adam, serialization and error
/// messages all address parameters through these.
struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
};

/// One LSTM layer (Graves formulation, no peepholes). The four gates are
/// fused along the first axis in the order: input, forget, cell candidate,
/// output.
struct LstmLayerParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor w_x; // [4*hidden, input]
  Tensor w_h; // [4*hidden, hidden]
  Tensor b;   // [4*hidden]

  static LstmLayerParams zeros(std::size_t input_dim, std::size_t hidden_dim);
  void check_shapes(const std::string& where) const;
};

struct LstmStackParams {
  std::vector<LstmLayerParams> layers;
};

/// Activations recorded by lstm_forward: per layer and step the gate
/// activations (4h), cell state, tanh of the cell state and hidden state.
/// Layer inputs are not duplicated; backward reads them from the layer
/// below (or from the caller's input sequence for layer 0).
struct LstmTape {
  std::size_t steps = 0;
  std::vector<std::size_t> hidden; // per layer
  std::vector<std::vector<double>> layer_data;

  static constexpr std::size_t fields_per_unit = 7; // i,f,g,o,c,tanh_c,h

  double* step_ptr(std::size_t layer, std::size_t step) {
    return layer_data[layer].data() + step * fields_per_unit * hidden[layer];
  }
  const double* step_ptr(std::size_t layer, std::size_t step) const {
    return layer_data[layer].data() + step * fields_per_unit * hidden[layer];
  }
  /// Hidden state of a layer at a step.
  const double* h(std::size_t layer, std::size_t step) const {
    return step_ptr(layer, step) + 6 * hidden[layer];
  }
  const double* top_h(std::size_t step) const { return h(hidden.size() - 1, step); }
  std::size_t top_hidden() const { return hidden.back(); }
};

/// Runs the stack over the input sequence from zero initial state.
/// inputs[t] must have layers[0].input_dim entries.
void lstm_forward(const LstmStackParams& params,
                  std::span<const std::vector<double>> inputs, LstmTape& tape);

/// Reverse-mode pass. d_top_h[t] is the loss gradient w.r.t. the top
/// layer's hidden state at step t (zero-length entries mean zero).
/// Parameter gradients are accumulated into grads; if d_inputs is given it
/// is resized and receives gradients w.r.t. the input sequence.
void lstm_backward(const LstmStackParams& params,
                   std::span<const std::vector<double>> inputs, const LstmTape& tape,
                   std::span<const std::vector<double>> d_top_h, LstmStackParams& grads,
                   std::vector<std::vector<double>>* d_inputs = nullptr);

struct AffineParams {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  Tensor w; // [output, input]
  Tensor b; // [output]

  static AffineParams zeros(std::size_t input_dim, std::size_t output_dim);
};

void affine_forward(const AffineParams& p, const double* x, double* y);
/// Accumulates parameter gradients; dx (if non-null) is accumulated too.
void affine_backward(const AffineParams& p, const double* x, const double* dy,
                     AffineParams& grads, double* dx);

/// Plain dot-product cosine (Eq. form: a·b / (|a||b|)). Throws "numeric"
/// on a zero-norm input.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// d(cos)/da and d(cos)/db scaled by upstream dcos, accumulated into
/// da/db when non-null.
void cosine_backward(std::span<const double> a, std::span<const double> b, double dcos,
                     double* da, double* db);

/// Softmax over candidate similarities with inverse temperature beta; the
/// correct candidate sits at index 0. Returns -log P(candidate 0) and, if
/// d_r is non-null, writes dloss/dR into it.
double candidate_softmax_loss(std::span<const double> r, double beta, double* d_r);

std::vector<double> candidate_softmax(std::span<const double> r, double beta);

struct AdamHyper {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are kept per registered parameter block, addressed by position.
struct AdamState {
  AdamHyper hp;
  std::int64_t step = 0;
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;
};

/// One Adam update with bias correction:
///   m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ), θ −= α·m̂/sqrt(v̂+ε).
/// Slots are created on first use; a non-finite gradient raises an error
/// naming the parameter block.
void adam_step(AdamState& state, std::span<const ParamRef> params,
               std::span<const ParamRef> grads);

/// Scales all gradients so their joint L2 norm is at most max_norm.
/// Returns the pre-clip norm.
double clip_global_norm(std::span<const ParamRef> grads, double max_norm);

double l2_norm(std::span<const double> x);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Central finite differences of f at x against an analytic gradient.
/// Relative error denominator is max(|analytic|, |numeric|, 1e−8).
GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<double> x, std::span<const double> analytic,
                           double epsilon = 1e-5);

} // namespace evaq::num
