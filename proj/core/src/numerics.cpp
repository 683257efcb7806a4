#include "evaq/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace evaq::num {

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  Tensor t;
  t.shape = std::move(shape);
  t.v.assign(n, 0.0);
  return t;
}

LstmLayerParams LstmLayerParams::zeros(std::size_t input_dim, std::size_t hidden_dim) {
  LstmLayerParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.w_x = Tensor::zeros({4 * hidden_dim, input_dim});
  p.w_h = Tensor::zeros({4 * hidden_dim, hidden_dim});
  p.b = Tensor::zeros({4 * hidden_dim});
  return p;
}

void LstmLayerParams::check_shapes(const std::string& where) const {
  if (hidden_dim == 0 || input_dim == 0)
    fail("shape", where + ": zero-sized LSTM layer");
  if (w_x.size() != 4 * hidden_dim * input_dim || w_h.size() != 4 * hidden_dim * hidden_dim ||
      b.size() != 4 * hidden_dim)
    fail("shape", where + ": LSTM parameter shapes inconsistent with dims");
}

AffineParams AffineParams::zeros(std::size_t input_dim, std::size_t output_dim) {
  AffineParams p;
  p.input_dim = input_dim;
  p.output_dim = output_dim;
  p.w = Tensor::zeros({output_dim, input_dim});
  p.b = Tensor::zeros({output_dim});
  return p;
}

namespace {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// y += W x, W row-major [rows, cols]. Four accumulators keep a fixed
// summation order while giving the compiler independent FMA chains.
void matvec_acc(const double* w, std::size_t rows, std::size_t cols, const double* x,
                double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w + r * cols;
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t c = 0;
    for (; c + 4 <= cols; c += 4) {
      a0 += wr[c] * x[c];
      a1 += wr[c + 1] * x[c + 1];
      a2 += wr[c + 2] * x[c + 2];
      a3 += wr[c + 3] * x[c + 3];
    }
    for (; c < cols; ++c) a0 += wr[c] * x[c];
    y[r] += (a0 + a1) + (a2 + a3);
  }
}

// y += W^T d; row-major W traversed row by row (axpy per row).
void matvec_t_acc(const double* w, std::size_t rows, std::size_t cols, const double* d,
                  double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = d[r];
    if (s == 0.0) continue;
    const double* wr = w + r * cols;
    for (std::size_t c = 0; c < cols; ++c) y[c] += s * wr[c];
  }
}

// G += d x^T
void outer_acc(double* g, const double* d, std::size_t rows, const double* x,
               std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = d[r];
    if (s == 0.0) continue;
    double* gr = g + r * cols;
    for (std::size_t c = 0; c < cols; ++c) gr[c] += s * x[c];
  }
}

} // namespace

void lstm_forward(const LstmStackParams& params, std::span<const std::vector<double>> inputs,
                  LstmTape& tape) {
  if (params.layers.empty()) fail("shape", "lstm_forward: empty layer stack");
  if (inputs.empty()) fail("shape", "lstm_forward: empty input sequence");
  const std::size_t n_layers = params.layers.size();
  const std::size_t steps = inputs.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    params.layers[l].check_shapes("lstm layer " + std::to_string(l));
    const std::size_t expect =
        l == 0 ? inputs[0].size() : params.layers[l - 1].hidden_dim;
    if (params.layers[l].input_dim != expect)
      fail("shape", "lstm layer " + std::to_string(l) + ": input dim " +
                        std::to_string(params.layers[l].input_dim) + " != " +
                        std::to_string(expect));
  }
  for (std::size_t t = 0; t < steps; ++t)
    if (inputs[t].size() != params.layers[0].input_dim)
      fail("shape", "lstm_forward: input step " + std::to_string(t) + " has dim " +
                        std::to_string(inputs[t].size()));

  tape.steps = steps;
  tape.hidden.resize(n_layers);
  tape.layer_data.resize(n_layers);

  std::vector<double> pre;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const LstmLayerParams& lp = params.layers[l];
    const std::size_t h = lp.hidden_dim;
    tape.hidden[l] = h;
    tape.layer_data[l].assign(steps * LstmTape::fields_per_unit * h, 0.0);
    pre.resize(4 * h);
    for (std::size_t t = 0; t < steps; ++t) {
      const double* x = l == 0 ? inputs[t].data() : tape.h(l - 1, t);
      double* s = tape.step_ptr(l, t);
      double* gi = s;
      double* gf = s + h;
      double* gg = s + 2 * h;
      double* go = s + 3 * h;
      double* c = s + 4 * h;
      double* tc = s + 5 * h;
      double* hh = s + 6 * h;

      std::copy(lp.b.data(), lp.b.data() + 4 * h, pre.data());
      matvec_acc(lp.w_x.data(), 4 * h, lp.input_dim, x, pre.data());
      if (t > 0) matvec_acc(lp.w_h.data(), 4 * h, h, tape.h(l, t - 1), pre.data());

      const double* c_prev = t > 0 ? tape.step_ptr(l, t - 1) + 4 * h : nullptr;
      for (std::size_t j = 0; j < h; ++j) {
        const double iv = sigmoid(pre[j]);
        const double fv = sigmoid(pre[h + j]);
        const double gv = std::tanh(pre[2 * h + j]);
        const double ov = sigmoid(pre[3 * h + j]);
        gi[j] = iv;
        gf[j] = fv;
        gg[j] = gv;
        go[j] = ov;
        const double cv = (c_prev ? fv * c_prev[j] : 0.0) + iv * gv;
        c[j] = cv;
        tc[j] = std::tanh(cv);
        hh[j] = ov * tc[j];
      }
    }
  }
}

void lstm_backward(const LstmStackParams& params, std::span<const std::vector<double>> inputs,
                   const LstmTape& tape, std::span<const std::vector<double>> d_top_h,
                   LstmStackParams& grads, std::vector<std::vector<double>>* d_inputs) {
  const std::size_t n_layers = params.layers.size();
  const std::size_t steps = tape.steps;
  if (grads.layers.size() != n_layers)
    fail("shape", "lstm_backward: gradient stack has wrong layer count");
  if (d_top_h.size() != steps)
    fail("shape", "lstm_backward: d_top_h length != steps");

  // Gradient stream flowing into each layer's hidden states from above.
  std::vector<std::vector<double>> stream(steps);
  const std::size_t top_h = params.layers[n_layers - 1].hidden_dim;
  for (std::size_t t = 0; t < steps; ++t) {
    if (!d_top_h[t].empty() && d_top_h[t].size() != top_h)
      fail("shape", "lstm_backward: d_top_h step " + std::to_string(t) + " has wrong dim");
    stream[t] = d_top_h[t].empty() ? std::vector<double>(top_h, 0.0) : d_top_h[t];
  }

  std::vector<std::vector<double>> below(steps);
  std::vector<double> dc, dh, dpre;
  if (d_inputs) d_inputs->assign(steps, std::vector<double>(params.layers[0].input_dim, 0.0));

  for (std::size_t li = n_layers; li-- > 0;) {
    const LstmLayerParams& lp = params.layers[li];
    LstmLayerParams& lg = grads.layers[li];
    const std::size_t h = lp.hidden_dim;
    const std::size_t in = lp.input_dim;
    if (lg.w_x.size() != lp.w_x.size() || lg.w_h.size() != lp.w_h.size() ||
        lg.b.size() != lp.b.size())
      fail("shape", "lstm_backward: gradient shapes for layer " + std::to_string(li));

    if (li > 0)
      for (std::size_t t = 0; t < steps; ++t) below[t].assign(in, 0.0);

    dc.assign(h, 0.0);
    dh.assign(h, 0.0);
    dpre.assign(4 * h, 0.0);

    for (std::size_t t = steps; t-- > 0;) {
      const double* s = tape.step_ptr(li, t);
      const double* gi = s;
      const double* gf = s + h;
      const double* gg = s + 2 * h;
      const double* go = s + 3 * h;
      const double* tc = s + 5 * h;
      const double* c_prev = t > 0 ? tape.step_ptr(li, t - 1) + 4 * h : nullptr;
      const double* x = li == 0 ? inputs[t].data() : tape.h(li - 1, t);

      for (std::size_t j = 0; j < h; ++j) dh[j] += stream[t][j];

      for (std::size_t j = 0; j < h; ++j) {
        const double dov = dh[j] * tc[j];
        const double dcv = dc[j] + dh[j] * go[j] * (1.0 - tc[j] * tc[j]);
        const double div = dcv * gg[j];
        const double dgv = dcv * gi[j];
        const double dfv = c_prev ? dcv * c_prev[j] : 0.0;
        dpre[j] = div * gi[j] * (1.0 - gi[j]);
        dpre[h + j] = dfv * gf[j] * (1.0 - gf[j]);
        dpre[2 * h + j] = dgv * (1.0 - gg[j] * gg[j]);
        dpre[3 * h + j] = dov * go[j] * (1.0 - go[j]);
        dc[j] = dcv * gf[j]; // flows to c_{t-1}
      }

      for (std::size_t j = 0; j < 4 * h; ++j) lg.b.v[j] += dpre[j];
      outer_acc(lg.w_x.data(), dpre.data(), 4 * h, x, in);
      if (t > 0) outer_acc(lg.w_h.data(), dpre.data(), 4 * h, tape.h(li, t - 1), h);

      dh.assign(h, 0.0);
      if (t > 0) matvec_t_acc(lp.w_h.data(), 4 * h, h, dpre.data(), dh.data());

      if (li > 0)
        matvec_t_acc(lp.w_x.data(), 4 * h, in, dpre.data(), below[t].data());
      else if (d_inputs)
        matvec_t_acc(lp.w_x.data(), 4 * h, in, dpre.data(), (*d_inputs)[t].data());
    }

    if (li > 0) stream.swap(below);
  }
}

void affine_forward(const AffineParams& p, const double* x, double* y) {
  std::copy(p.b.data(), p.b.data() + p.output_dim, y);
  matvec_acc(p.w.data(), p.output_dim, p.input_dim, x, y);
}

void affine_backward(const AffineParams& p, const double* x, const double* dy,
                     AffineParams& grads, double* dx) {
  for (std::size_t j = 0; j < p.output_dim; ++j) grads.b.v[j] += dy[j];
  outer_acc(grads.w.data(), dy, p.output_dim, x, p.input_dim);
  if (dx) matvec_t_acc(p.w.data(), p.output_dim, p.input_dim, dy, dx);
}

double l2_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail("shape", "cosine_similarity: length mismatch");
  if (a.empty()) fail("shape", "cosine_similarity: empty vectors");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    fail("numeric", "cosine_similarity: zero-norm representation");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void cosine_backward(std::span<const double> a, std::span<const double> b, double dcos,
                     double* da, double* db) {
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na2 += a[i] * a[i];
    nb2 += b[i] * b[i];
  }
  if (na2 == 0.0 || nb2 == 0.0)
    fail("numeric", "cosine_backward: zero-norm representation");
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double inv = 1.0 / (na * nb);
  const double cosv = dot * inv;
  if (da)
    for (std::size_t i = 0; i < a.size(); ++i)
      da[i] += dcos * (b[i] * inv - cosv * a[i] / na2);
  if (db)
    for (std::size_t i = 0; i < b.size(); ++i)
      db[i] += dcos * (a[i] * inv - cosv * b[i] / nb2);
}

std::vector<double> candidate_softmax(std::span<const double> r, double beta) {
  if (r.size() < 2) fail("shape", "candidate_softmax: need at least 2 candidates");
  if (!(beta > 0.0)) fail("numeric", "candidate_softmax: beta must be positive");
  double m = r[0];
  for (double v : r) {
    if (!std::isfinite(v)) fail("numeric", "candidate_softmax: non-finite similarity");
    m = std::max(m, v);
  }
  std::vector<double> p(r.size());
  double z = 0.0;
  for (std::size_t j = 0; j < r.size(); ++j) {
    p[j] = std::exp(beta * (r[j] - m));
    z += p[j];
  }
  for (auto& v : p) v /= z;
  return p;
}

double candidate_softmax_loss(std::span<const double> r, double beta, double* d_r) {
  const std::vector<double> p = candidate_softmax(r, beta);
  double m = r[0];
  for (double v : r) m = std::max(m, v);
  double z = 0.0;
  for (std::size_t j = 0; j < r.size(); ++j) z += std::exp(beta * (r[j] - m));
  const double loss = -(beta * (r[0] - m) - std::log(z));
  if (d_r)
    for (std::size_t j = 0; j < r.size(); ++j)
      d_r[j] = beta * (p[j] - (j == 0 ? 1.0 : 0.0));
  return loss;
}

void adam_step(AdamState& state, std::span<const ParamRef> params,
               std::span<const ParamRef> grads) {
  if (params.size() != grads.size())
    fail("shape", "adam_step: parameter and gradient lists differ in length");
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m.assign(params[i].tensor->size(), 0.0);
      state.slots[i].v.assign(params[i].tensor->size(), 0.0);
    }
  }
  if (state.slots.size() != params.size())
    fail("shape", "adam_step: state has a different number of parameter blocks");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.hp.beta1, t);
  const double bc2 = 1.0 - std::pow(state.hp.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    const Tensor& g = *grads[i].tensor;
    auto& slot = state.slots[i];
    if (g.size() != p.size() || slot.m.size() != p.size())
      fail("shape", "adam_step: shape mismatch in block '" + params[i].name + "'");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gv = g.v[j];
      if (!std::isfinite(gv))
        fail("numeric", "adam_step: non-finite gradient in block '" + params[i].name + "'");
      slot.m[j] = state.hp.beta1 * slot.m[j] + (1.0 - state.hp.beta1) * gv;
      slot.v[j] = state.hp.beta2 * slot.v[j] + (1.0 - state.hp.beta2) * gv * gv;
      const double mhat = slot.m[j] / bc1;
      const double vhat = slot.v[j] / bc2;
      p.v[j] -= state.hp.alpha * (mhat / std::sqrt(vhat + state.hp.eps));
    }
  }
}

double clip_global_norm(std::span<const ParamRef> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.tensor->v) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const auto& g : grads)
      for (double& v : g.tensor->v) v *= scale;
  }
  return norm;
}

GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<double> x, std::span<const double> analytic,
                           double epsilon) {
  if (x.size() != analytic.size())
    fail("shape", "grad_check: analytic gradient length mismatch");
  GradCheckReport rep;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + epsilon;
    const double fp = f(x);
    x[i] = saved - epsilon;
    const double fm = f(x);
    x[i] = saved;
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double denom = std::max({std::fabs(numeric), std::fabs(analytic[i]), 1e-8});
    const double rel = std::fabs(numeric - analytic[i]) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.analytic_at_worst = analytic[i];
      rep.numeric_at_worst = numeric;
    }
  }
  return rep;
}

} // namespace evaq::num
