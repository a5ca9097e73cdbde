#pragma once

#include <span>

#include "metabridge/graph.hpp"
#include "metabridge/tensor.hpp"

namespace metabridge::latent {

/// Diagonal Gaussian N(mu, diag(exp(logsigma))^2). Producers clamp logsigma
/// to [-6, 6], which keeps every KL term finite.
struct DiagGaussian {
  Tensor mu;
  Tensor logsigma;
};

/// z = mu + exp(logsigma) * eps, elementwise.
Tensor reparameterize(const DiagGaussian& g, const Tensor& eps);

/// KL(q || p) for diagonal Gaussians:
///   sum_j [ (logsigma_p - logsigma_q)
///           + (sigma_q^2 + (mu_q - mu_p)^2) / (2 sigma_p^2) - 1/2 ].
double kl_divergence(const DiagGaussian& q, const DiagGaussian& p);

/// Arithmetic mean of member mu's and logsigma's, clamp re-applied.
DiagGaussian pool_set(std::span<const DiagGaussian> posteriors);

/// The conditional mean, used as the latent at inference time.
Tensor deterministic_latent(const DiagGaussian& g);

/// Graph-side counterparts operating on (batch, d) value ids so the same
/// algebra participates in gradient computations.

/// eps enters as a constant: the sampling noise is data, not a parameter.
diff::ValueId reparameterize_g(diff::Graph& g, diff::ValueId mu, diff::ValueId logsigma,
                               const Tensor& eps);

/// Scalar sum of the closed-form KL over all coordinates of the operands.
diff::ValueId kl_g(diff::Graph& g, diff::ValueId mu_q, diff::ValueId logsigma_q,
                   diff::ValueId mu_p, diff::ValueId logsigma_p);

/// Mean over axis 0 of a (batch, d) stack: the pooled posterior parameters.
diff::ValueId pool_rows_g(diff::Graph& g, diff::ValueId stacked);

}  // namespace metabridge::latent
