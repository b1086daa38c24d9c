#pragma once

#include <random>
#include <span>
#include <vector>

#include "spanmatch/autodiff.hpp"
#include "spanmatch/matrix.hpp"
#include "spanmatch/parameters.hpp"

namespace spanmatch {

// Inverted dropout. A null rng (or p == 0) means evaluation mode: identity.
class Dropout {
 public:
  Dropout() = default;
  Dropout(double p, std::mt19937_64* rng) : p_(p), rng_(rng) {}

  bool active() const { return rng_ != nullptr && p_ > 0.0; }

  ad::Var operator()(ad::Var x) const {
    if (!active()) return x;
    const Matrix& v = ad::value(x);
    Matrix mask(v.rows(), v.cols());
    std::bernoulli_distribution keep(1.0 - p_);
    const double scale = 1.0 / (1.0 - p_);
    for (double& m : mask.values()) m = keep(*rng_) ? scale : 0.0;
    return ad::mul_const(x, mask);
  }

 private:
  double p_ = 0.0;
  std::mt19937_64* rng_ = nullptr;
};

// LayerNorm(x + GELU(aggregated W1) W2), row-wise.
inline ad::Var residual_ffn(ad::Var x, ad::Var aggregated, const BlockVars& block,
                            const Dropout& dropout = {}) {
  ad::Var hidden = dropout(ad::gelu(ad::matmul(aggregated, block.w1)));
  ad::Var ffn = ad::matmul(hidden, block.w2);
  return ad::layer_norm(ad::add(x, ffn), block.ln_gain, block.ln_bias);
}

/// Attention aggregation phi(q, K): softmax of the unscaled dot products
/// q K^T, used as weights over the rows of K.
inline std::vector<double> attention_aggregate(std::span<const double> query, const Matrix& keys) {
  if (keys.rows() == 0) throw InvariantError("empty-attention: keys matrix has no rows");
  if (query.size() != keys.cols()) throw InvariantError("attention_aggregate: width mismatch");
  ad::Tape tape;
  ad::Var q = tape.constant(Matrix::row_vector(query));
  ad::Var k = tape.constant(keys);
  const Matrix& out = ad::value(ad::attend(q, k));
  return {out.values().begin(), out.values().end()};
}

/// The attention weights alone (for inspection and property tests).
inline std::vector<double> attention_weights(std::span<const double> query, const Matrix& keys) {
  if (keys.rows() == 0) throw InvariantError("empty-attention: keys matrix has no rows");
  ad::Tape tape;
  ad::Var q = tape.constant(Matrix::row_vector(query));
  ad::Var k = tape.constant(keys);
  const Matrix& w = ad::value(ad::softmax_rows(ad::matmul_bt(q, k)));
  return {w.values().begin(), w.values().end()};
}

inline std::vector<double> residual_ffn_block(std::span<const double> x,
                                              std::span<const double> aggregated,
                                              const BlockParams& block) {
  const std::size_t d = block.w1.rows();
  if (x.size() != d || aggregated.size() != d || block.w2.cols() != d) {
    throw InvariantError("residual_ffn_block: dimension mismatch");
  }
  ad::Tape tape;
  BlockVars bv{tape.constant(block.w1), tape.constant(block.w2), tape.constant(block.ln_gain),
               tape.constant(block.ln_bias)};
  const Matrix& out = ad::value(residual_ffn(tape.constant(Matrix::row_vector(x)),
                                             tape.constant(Matrix::row_vector(aggregated)), bv));
  return {out.values().begin(), out.values().end()};
}

}  // namespace spanmatch
