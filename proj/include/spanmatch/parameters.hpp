#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include "spanmatch/autodiff.hpp"
#include "spanmatch/error.hpp"
#include "spanmatch/matrix.hpp"

namespace spanmatch {

struct ModelConfig {
  std::size_t d_w = 768;       // encoder (token embedding) width
  std::size_t d = 100;         // span representation width
  std::size_t d_ff = 0;        // FFN hidden width; 0 means 2 * d
  std::size_t max_span_len = 8;
  double dropout = 0.1;
  bool use_isa = true;
  bool use_csa = true;
  bool use_insa = true;
  bool use_o_partition = true;
  bool squared_distance = false;

  std::size_t ffn_width() const { return d_ff == 0 ? 2 * d : d_ff; }

  void validate() const {
    if (d_w == 0 || d == 0 || ffn_width() == 0) throw UserError("model dims must be positive");
    if (max_span_len < 1) throw UserError("max_span_len must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw UserError("dropout must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_w", c.d_w},
                     {"d", c.d},
                     {"d_ff", c.ffn_width()},
                     {"max_span_len", c.max_span_len},
                     {"dropout", c.dropout},
                     {"use_isa", c.use_isa},
                     {"use_csa", c.use_csa},
                     {"use_insa", c.use_insa},
                     {"use_o_partition", c.use_o_partition},
                     {"squared_distance", c.squared_distance}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d_w = j.value("d_w", c.d_w);
  c.d = j.value("d", c.d);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_span_len = j.value("max_span_len", c.max_span_len);
  c.dropout = j.value("dropout", c.dropout);
  c.use_isa = j.value("use_isa", c.use_isa);
  c.use_csa = j.value("use_csa", c.use_csa);
  c.use_insa = j.value("use_insa", c.use_insa);
  c.use_o_partition = j.value("use_o_partition", c.use_o_partition);
  c.squared_distance = j.value("squared_distance", c.squared_distance);
}

// Weights of one residual FFN block: LayerNorm(x + GELU(a W1) W2).
struct BlockParams {
  Matrix w1;       // d x d_ff
  Matrix w2;       // d_ff x d
  Matrix ln_gain;  // 1 x d
  Matrix ln_bias;  // 1 x d

  bool operator==(const BlockParams&) const = default;
};

struct Parameters {
  Matrix span_proj;  // 2 d_w x d, the boundary projection W_s
  BlockParams isa;
  BlockParams csa;

  // Stable order used for serialization, optimizer state and gradient checks.
  std::vector<std::pair<std::string, Matrix*>> named() {
    return {{"span_proj", &span_proj}, {"isa.w1", &isa.w1},           {"isa.w2", &isa.w2},
            {"isa.ln_gain", &isa.ln_gain}, {"isa.ln_bias", &isa.ln_bias}, {"csa.w1", &csa.w1},
            {"csa.w2", &csa.w2},           {"csa.ln_gain", &csa.ln_gain}, {"csa.ln_bias", &csa.ln_bias}};
  }
  std::vector<std::pair<std::string, const Matrix*>> named() const {
    auto* self = const_cast<Parameters*>(this);
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [name, m] : self->named()) out.emplace_back(name, m);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : named()) n += m->size();
    return n;
  }

  // Zero-valued parameters with the same shapes (gradient / moment slots).
  Parameters zeros_like() const {
    Parameters z = *this;
    for (auto& [name, m] : z.named()) std::fill(m->values().begin(), m->values().end(), 0.0);
    return z;
  }

  bool operator==(const Parameters&) const = default;
};

using Gradients = Parameters;

inline BlockParams make_block(std::size_t d, std::size_t d_ff) {
  return BlockParams{Matrix(d, d_ff), Matrix(d_ff, d), Matrix(1, d, 1.0), Matrix(1, d, 0.0)};
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit gain, zero bias.
inline Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Parameters p;
  p.span_proj = Matrix(2 * cfg.d_w, cfg.d);
  p.isa = make_block(cfg.d, cfg.ffn_width());
  p.csa = make_block(cfg.d, cfg.ffn_width());
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Matrix& m) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.rows()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : m.values()) v = dist(rng);
  };
  fill(p.span_proj);
  fill(p.isa.w1);
  fill(p.isa.w2);
  fill(p.csa.w1);
  fill(p.csa.w2);
  return p;
}

inline void check_shapes(const Parameters& p, const ModelConfig& cfg) {
  const std::size_t ff = cfg.ffn_width();
  auto expect = [](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      throw InvariantError(std::string("parameter ") + name + " has shape " + m.shape_string() +
                           ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  expect(p.span_proj, 2 * cfg.d_w, cfg.d, "span_proj");
  for (const BlockParams* b : {&p.isa, &p.csa}) {
    expect(b->w1, cfg.d, ff, "w1");
    expect(b->w2, ff, cfg.d, "w2");
    expect(b->ln_gain, 1, cfg.d, "ln_gain");
    expect(b->ln_bias, 1, cfg.d, "ln_bias");
  }
}

// Parameters bound as differentiable leaves on one tape.
struct BlockVars {
  ad::Var w1, w2, ln_gain, ln_bias;
};

struct ParamVars {
  ad::Var span_proj_left;   // rows [0, d_w) of W_s
  ad::Var span_proj_right;  // rows [d_w, 2 d_w) of W_s
  ad::Var span_proj;
  BlockVars isa;
  BlockVars csa;
};

inline ParamVars bind(ad::Tape& tape, const Parameters& p) {
  auto block = [&tape](const BlockParams& b) {
    return BlockVars{tape.leaf(b.w1), tape.leaf(b.w2), tape.leaf(b.ln_gain), tape.leaf(b.ln_bias)};
  };
  ParamVars v;
  v.span_proj = tape.leaf(p.span_proj);
  const std::size_t dw = p.span_proj.rows() / 2;
  v.span_proj_left = ad::slice_rows(v.span_proj, 0, dw);
  v.span_proj_right = ad::slice_rows(v.span_proj, dw, 2 * dw);
  v.isa = block(p.isa);
  v.csa = block(p.csa);
  return v;
}

inline Gradients collect_gradients(const ad::Tape& tape, const ParamVars& v) {
  Gradients g;
  g.span_proj = tape.grad(v.span_proj);
  auto block = [&tape](const BlockVars& b) {
    return BlockParams{tape.grad(b.w1), tape.grad(b.w2), tape.grad(b.ln_gain), tape.grad(b.ln_bias)};
  };
  g.isa = block(v.isa);
  g.csa = block(v.csa);
  return g;
}

inline double global_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& [name, m] : g.named())
    for (double v : m->values()) s += v * v;
  return std::sqrt(s);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Parameters first_moment;
  Parameters second_moment;
  std::uint64_t step = 0;

  static AdamState for_parameters(const Parameters& p) {
    return AdamState{p.zeros_like(), p.zeros_like(), 0};
  }
};

// One bias-corrected Adam update in place.
inline void adam_step(Parameters& params, const Gradients& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  auto pn = params.named();
  const auto gn = grads.named();
  auto mn = state.first_moment.named();
  auto vn = state.second_moment.named();
  for (std::size_t i = 0; i < pn.size(); ++i) {
    if (!pn[i].second->same_shape(*gn[i].second) || !pn[i].second->same_shape(*mn[i].second)) {
      throw InvariantError("adam_step: shape mismatch for " + pn[i].first);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < pn.size(); ++i) {
    auto p = pn[i].second->values();
    auto g = gn[i].second->values();
    auto m = mn[i].second->values();
    auto v = vn[i].second->values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace spanmatch
