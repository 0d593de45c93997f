#pragma once

// von Mises-Fisher mathematics on the unit hypersphere S^{D-1}.
//
// Latent scores come in two modes. Normalized mode compares directions
// (cosine). Relaxed mode uses raw inner products so latent magnitudes act
// as a per-state concentration. Both modes are zero at h == z.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "depo/autodiff.hpp"
#include "depo/rng.hpp"

namespace depo::vmf {

/// A_D(kappa) = I_{D/2}(kappa) / I_{D/2-1}(kappa), the norm of the vMF mean.
///
/// Evaluated from the ascending series of both Bessel functions, summed
/// until a term's relative contribution drops below 1e-14. Throws
/// std::domain_error for D < 2 or kappa <= 0, and std::runtime_error if
/// 10^4 terms do not converge.
double mean_resultant_length(int dim, double kappa);

/// log C_D(kappa), the log normalizer of the vMF density.
double log_normalizer(int dim, double kappa);

struct VmfParams {
  int dim = 32;
  double kappa = 0.01;
  /// Replaces kappa * A_D(kappa) as the KL weight when set.
  std::optional<double> kl_weight_override;

  double kl_weight() const;
};

std::vector<double> normalize(std::span<const double> v);

/// Raw score used by the log-density: cos(h, z) or h.z (relaxed).
double score(std::span<const double> h, std::span<const double> z, bool relaxed);

/// Mode-referenced log ratio: kappa*(cos - 1) or kappa*(h.z - z.z).
double log_ratio(std::span<const double> h, std::span<const double> z, const VmfParams& p, bool relaxed);

/// Closed-form KL: W*(1 - cos) or W*(z.z - h.z).
double kl(std::span<const double> h, std::span<const double> z, const VmfParams& p, bool relaxed);

// Differentiable counterparts. `z` is a stored rollout constant and never
// receives a gradient.
ad::Var score(ad::Var h, std::span<const double> z, bool relaxed);
ad::Var log_ratio(ad::Var h, std::span<const double> z, const VmfParams& p, bool relaxed);
ad::Var kl(ad::Var h, std::span<const double> z, const VmfParams& p, bool relaxed);

/// Exact draw from vMF(mu, kappa) by Wood's rejection scheme.
std::vector<double> sample(std::span<const double> mu, double kappa, Rng& rng);

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo KL(vMF(mu_new) || vMF(mu_old)) using the integrand
/// kappa*(mu_new - mu_old).x with x ~ vMF(mu_new, kappa).
McEstimate mc_kl_estimate(std::span<const double> mu_new, std::span<const double> mu_old, double kappa,
                          std::size_t n, Rng& rng);

/// Monte-Carlo mean of mu.x over vMF(mu, kappa) draws, with its standard error.
McEstimate mc_mean_resultant_length(int dim, double kappa, std::size_t n, Rng& rng);

}  // namespace depo::vmf
