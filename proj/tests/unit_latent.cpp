#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "metabridge/latent.hpp"
#include "metabridge/params.hpp"
#include "metabridge/rng.hpp"

using namespace metabridge;
using namespace metabridge::latent;
namespace diffm = metabridge::diff;

namespace {

/// Monte-Carlo KL oracle: E_{z~q}[log q(z) - log p(z)] with antithetic
/// standard-normal pairs. Independent of the closed form under test.
double mc_kl(const DiagGaussian& q, const DiagGaussian& p, int64_t n_samples, uint64_t seed) {
  Rng rng(seed);
  const int64_t d = q.mu.size();
  double total = 0.0;
  const auto log_density = [d](const DiagGaussian& g, const std::vector<double>& z) {
    double lp = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double s = std::exp(g.logsigma[j]);
      const double u = (z[static_cast<size_t>(j)] - g.mu[j]) / s;
      lp += -g.logsigma[j] - 0.5 * std::log(2.0 * M_PI) - 0.5 * u * u;
    }
    return lp;
  };
  std::vector<double> z(static_cast<size_t>(d));
  for (int64_t i = 0; i < n_samples / 2; ++i) {
    std::vector<double> eps(static_cast<size_t>(d));
    for (auto& e : eps) e = rng.normal();
    for (const double sign : {1.0, -1.0}) {
      for (int64_t j = 0; j < d; ++j) {
        z[static_cast<size_t>(j)] = q.mu[j] + std::exp(q.logsigma[j]) * sign * eps[static_cast<size_t>(j)];
      }
      total += log_density(q, z) - log_density(p, z);
    }
  }
  return total / static_cast<double>(2 * (n_samples / 2));
}

DiagGaussian make_gaussian(std::vector<double> mu, std::vector<double> logsigma) {
  const int64_t d = static_cast<int64_t>(mu.size());
  return DiagGaussian{Tensor({d}, std::move(mu)), Tensor({d}, std::move(logsigma))};
}

}  // namespace

TEST_CASE("reparameterize follows z = mu + sigma * eps") {
  const auto g = make_gaussian({0.5, -1.0, 2.0}, {0.0, 0.5, -0.25});
  const Tensor zero = Tensor::zeros({3});
  CHECK(reparameterize(g, zero).values() == g.mu.values());

  const auto unit_sigma = make_gaussian({0.5, -1.0, 2.0}, {0.0, 0.0, 0.0});
  const Tensor ones = Tensor::full({3}, 1.0);
  const Tensor shifted = reparameterize(unit_sigma, ones);
  for (int64_t j = 0; j < 3; ++j) CHECK(shifted[j] == doctest::Approx(g.mu[j] + 1.0));

  CHECK_THROWS(reparameterize(g, Tensor::zeros({2})));
}

TEST_CASE("empirical mean of a million reparameterized draws recovers mu") {
  const auto g = make_gaussian({0.7, -0.3}, {0.2, -0.5});
  const int64_t n = 1'000'000;
  Rng rng(mix_seed(21, rngtag::kEps));
  std::vector<double> sum(2, 0.0);
  Tensor eps({2});
  for (int64_t i = 0; i < n; ++i) {
    eps[0] = rng.normal();
    eps[1] = rng.normal();
    const Tensor z = reparameterize(g, eps);
    sum[0] += z[0];
    sum[1] += z[1];
  }
  for (int64_t j = 0; j < 2; ++j) {
    const double mean = sum[static_cast<size_t>(j)] / static_cast<double>(n);
    const double band = 4.0 * std::exp(g.logsigma[j]) / std::sqrt(static_cast<double>(n));
    CHECK(std::fabs(mean - g.mu[j]) <= band);
  }
}

TEST_CASE("closed-form KL matches hand values and the Monte-Carlo oracle") {
  const auto q1 = make_gaussian({0.0}, {0.0});
  const auto p1 = make_gaussian({1.0}, {0.0});
  CHECK(kl_divergence(q1, q1) == 0.0);
  CHECK(kl_divergence(q1, p1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(kl_divergence(q1, p1) == doctest::Approx(mc_kl(q1, p1, 1'000'000, 77)).epsilon(0.01));

  // d=2: q = N((0,0), diag(1,4)), p = N((1,0), I). Variance 4 = logsigma ln(2).
  const auto q2 = make_gaussian({0.0, 0.0}, {0.0, std::log(2.0)});
  const auto p2 = make_gaussian({1.0, 0.0}, {0.0, 0.0});
  const double closed = kl_divergence(q2, p2);
  CHECK(closed == doctest::Approx(0.5 + 1.5 - std::log(2.0)).epsilon(1e-12));
  CHECK(closed == doctest::Approx(mc_kl(q2, p2, 1'000'000, 78)).epsilon(0.01));

  // Asymmetry witness.
  CHECK(kl_divergence(q2, p2) != kl_divergence(p2, q2));

  CHECK_THROWS(kl_divergence(q1, p2));
}

TEST_CASE("KL is nonnegative and zero only at equality") {
  Rng rng(mix_seed(5, rngtag::kEval));
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> mu_q(3), ls_q(3), mu_p(3), ls_p(3);
    for (int64_t j = 0; j < 3; ++j) {
      mu_q[static_cast<size_t>(j)] = rng.uniform(-2.0, 2.0);
      ls_q[static_cast<size_t>(j)] = rng.uniform(-2.0, 2.0);
      mu_p[static_cast<size_t>(j)] = rng.uniform(-2.0, 2.0);
      ls_p[static_cast<size_t>(j)] = rng.uniform(-2.0, 2.0);
    }
    const auto q = make_gaussian(mu_q, ls_q);
    const auto p = make_gaussian(mu_p, ls_p);
    CHECK(kl_divergence(q, p) >= 0.0);
    CHECK(kl_divergence(q, q) == 0.0);
  }
}

TEST_CASE("KL gradients match finite differences") {
  diffm::ParamSet params;
  params.emplace("mu_q", Tensor({3}, {0.3, -0.7, 1.2}));
  params.emplace("ls_q", Tensor({3}, {0.1, -0.4, 0.6}));
  params.emplace("mu_p", Tensor({3}, {-0.2, 0.5, 0.9}));
  params.emplace("ls_p", Tensor({3}, {-0.3, 0.2, -0.1}));
  const diffm::LossBuilder build = [](diffm::Graph& g, const diffm::NodeMap& h) {
    return kl_g(g, h.at("mu_q"), h.at("ls_q"), h.at("mu_p"), h.at("ls_p"));
  };
  const auto res = diffm::gradient(build, params);
  const double h = 1e-5;
  for (const auto& [name, p] : params) {
    for (int64_t i = 0; i < p.size(); ++i) {
      diffm::ParamSet plus = params;
      plus.at(name).data()[i] += h;
      diffm::ParamSet minus = params;
      minus.at(name).data()[i] -= h;
      diffm::Graph gp;
      diffm::NodeMap hp;
      for (const auto& [n, t] : plus) hp.emplace(n, gp.leaf(t));
      diffm::Graph gm;
      diffm::NodeMap hm;
      for (const auto& [n, t] : minus) hm.emplace(n, gm.leaf(t));
      const double fd =
          (gp.val(build(gp, hp)).item() - gm.val(build(gm, hm)).item()) / (2.0 * h);
      const double an = res.grads.at(name)[i];
      const double scale = std::max({std::fabs(fd), std::fabs(an), 1e-6});
      INFO(name, "[", i, "] analytic ", an, " fd ", fd);
      CHECK(std::fabs(an - fd) / scale <= 1e-6);
    }
  }
}

TEST_CASE("pool_set averages in (mu, logsigma) space") {
  const auto a = make_gaussian({0.0}, {0.0});
  const auto b = make_gaussian({2.0}, {0.0});
  const std::vector<DiagGaussian> singles{a};
  const DiagGaussian same = pool_set(singles);
  CHECK(same.mu.values() == a.mu.values());
  CHECK(same.logsigma.values() == a.logsigma.values());

  const std::vector<DiagGaussian> twins{b, b};
  const DiagGaussian twin = pool_set(twins);
  CHECK(twin.mu.values() == b.mu.values());

  const std::vector<DiagGaussian> pair{a, b};
  const DiagGaussian pooled = pool_set(pair);
  CHECK(pooled.mu[0] == doctest::Approx(1.0));
  CHECK(pooled.logsigma[0] == doctest::Approx(0.0));

  // The clamp is re-applied after averaging.
  const auto wide = make_gaussian({0.0}, {7.0});
  const std::vector<DiagGaussian> wides{wide, wide};
  CHECK(pool_set(wides).logsigma[0] == 6.0);

  CHECK_THROWS(pool_set(std::span<const DiagGaussian>{}));
}

TEST_CASE("deterministic latent is the mean") {
  const auto g = make_gaussian({0.4, -1.1}, {1.5, -2.0});
  CHECK(deterministic_latent(g).values() == g.mu.values());
  CHECK(deterministic_latent(g).values() == reparameterize(g, Tensor::zeros({2})).values());
  CHECK(deterministic_latent(g).values() == deterministic_latent(g).values());
}

TEST_CASE("graph-side latent ops agree with the value-level algebra") {
  const auto q = make_gaussian({0.3, -0.8, 0.2}, {0.1, -0.6, 0.4});
  const auto p = make_gaussian({-0.5, 0.7, 0.0}, {-0.2, 0.3, -0.9});

  diffm::Graph g;
  const auto mu_q = g.leaf(q.mu);
  const auto ls_q = g.leaf(q.logsigma);
  const auto mu_p = g.leaf(p.mu);
  const auto ls_p = g.leaf(p.logsigma);
  CHECK(g.val(kl_g(g, mu_q, ls_q, mu_p, ls_p)).item() ==
        doctest::Approx(kl_divergence(q, p)).epsilon(1e-14));

  const Tensor eps({3}, {0.5, -1.5, 0.25});
  const auto z = reparameterize_g(g, mu_q, ls_q, eps);
  const Tensor z_value = reparameterize(q, eps);
  for (int64_t j = 0; j < 3; ++j) CHECK(g.val(z)[j] == doctest::Approx(z_value[j]).epsilon(1e-15));

  // pool_rows_g over a stack equals pool_set of the rows (mu part).
  const Tensor stack({2, 3}, {0.0, 1.0, 2.0, 4.0, 5.0, 6.0});
  const auto pooled = pool_rows_g(g, g.leaf(stack));
  CHECK(g.val(pooled).shape() == Shape{1, 3});
  CHECK(g.val(pooled)[0] == doctest::Approx(2.0));
  CHECK(g.val(pooled)[2] == doctest::Approx(4.0));
}
