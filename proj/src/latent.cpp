#include "metabridge/latent.hpp"

#include <cmath>
#include <stdexcept>

namespace metabridge::latent {

namespace {

constexpr double kClamp = 6.0;

void check_pair(const DiagGaussian& g) {
  if (!g.mu.same_shape(g.logsigma)) {
    throw std::invalid_argument("latent: mu shape " + shape_str(g.mu.shape()) +
                                " does not match logsigma shape " + shape_str(g.logsigma.shape()));
  }
}

}  // namespace

Tensor reparameterize(const DiagGaussian& g, const Tensor& eps) {
  check_pair(g);
  if (!eps.same_shape(g.mu)) {
    throw std::invalid_argument("reparameterize: eps shape " + shape_str(eps.shape()) +
                                " does not match mu shape " + shape_str(g.mu.shape()));
  }
  Tensor z(g.mu.shape());
  for (int64_t i = 0; i < z.size(); ++i) {
    z[i] = g.mu[i] + std::exp(g.logsigma[i]) * eps[i];
  }
  return z;
}

double kl_divergence(const DiagGaussian& q, const DiagGaussian& p) {
  check_pair(q);
  check_pair(p);
  if (!q.mu.same_shape(p.mu)) {
    throw std::invalid_argument("kl_divergence: operand dims differ: " + shape_str(q.mu.shape()) +
                                " vs " + shape_str(p.mu.shape()));
  }
  double total = 0.0;
  for (int64_t j = 0; j < q.mu.size(); ++j) {
    // Written with the variance ratio exp(2(lsq - lsp)) so every term is
    // exactly zero when q = p.
    const double log_ratio = p.logsigma[j] - q.logsigma[j];
    const double inv_var_p = std::exp(-2.0 * p.logsigma[j]);
    const double diff = q.mu[j] - p.mu[j];
    total += log_ratio + 0.5 * (std::exp(-2.0 * log_ratio) - 1.0) + 0.5 * diff * diff * inv_var_p;
  }
  // The true value is >= 0; floor out rounding residue in near-equal cases.
  return std::max(0.0, total);
}

DiagGaussian pool_set(std::span<const DiagGaussian> posteriors) {
  if (posteriors.empty()) throw std::invalid_argument("pool_set: empty posterior list");
  check_pair(posteriors.front());
  const Shape shape = posteriors.front().mu.shape();
  DiagGaussian pooled{Tensor::zeros(shape), Tensor::zeros(shape)};
  for (const DiagGaussian& g : posteriors) {
    check_pair(g);
    if (!g.mu.same_shape(pooled.mu)) {
      throw std::invalid_argument("pool_set: member dims differ");
    }
    for (int64_t j = 0; j < pooled.mu.size(); ++j) {
      pooled.mu[j] += g.mu[j];
      pooled.logsigma[j] += g.logsigma[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(posteriors.size());
  for (int64_t j = 0; j < pooled.mu.size(); ++j) {
    pooled.mu[j] *= inv;
    const double ls = pooled.logsigma[j] * inv;
    pooled.logsigma[j] = std::min(kClamp, std::max(-kClamp, ls));
  }
  return pooled;
}

Tensor deterministic_latent(const DiagGaussian& g) {
  check_pair(g);
  return g.mu;
}

diff::ValueId reparameterize_g(diff::Graph& g, diff::ValueId mu, diff::ValueId logsigma,
                               const Tensor& eps) {
  return g.add(mu, g.mul(g.exp(logsigma), g.constant(eps)));
}

diff::ValueId kl_g(diff::Graph& g, diff::ValueId mu_q, diff::ValueId logsigma_q,
                   diff::ValueId mu_p, diff::ValueId logsigma_p) {
  // Same exactly-zero-at-equality form as the value-level kl_divergence.
  const diff::ValueId log_ratio = g.sub(logsigma_p, logsigma_q);
  const diff::ValueId ratio_term = g.scale(g.add_scalar(g.exp(g.scale(log_ratio, -2.0)), -1.0), 0.5);
  const diff::ValueId inv_var_p = g.exp(g.scale(logsigma_p, -2.0));
  const diff::ValueId diff = g.sub(mu_q, mu_p);
  const diff::ValueId quad = g.scale(g.mul(g.mul(diff, diff), inv_var_p), 0.5);
  const diff::ValueId per_coord = g.add(g.add(log_ratio, ratio_term), quad);
  return g.sum_all(per_coord);
}

diff::ValueId pool_rows_g(diff::Graph& g, diff::ValueId stacked) {
  const Tensor& t = g.val(stacked);
  if (t.rank() != 2) throw std::invalid_argument("pool_rows_g: operand must be (batch, d)");
  const int64_t rows = t.dim(0);
  return g.scale(g.sum_to(stacked, {1, t.dim(1)}), 1.0 / static_cast<double>(rows));
}

}  // namespace metabridge::latent
