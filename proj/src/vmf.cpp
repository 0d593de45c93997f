#include "depo/vmf.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace depo::vmf {

namespace {

constexpr double kSeriesTolerance = 1e-14;
constexpr int kMaxSeriesTerms = 10000;
constexpr std::size_t kMaxRejections = 1000000;

// sum_k (kappa^2/4)^k / (k! (nu+1)_k): I_nu(kappa) without its leading
// (kappa/2)^nu / Gamma(nu+1) factor.
double bessel_i_series(double nu, double kappa) {
  const double q = 0.25 * kappa * kappa;
  double term = 1.0;
  double total = 1.0;
  for (int k = 1; k <= kMaxSeriesTerms; ++k) {
    term *= q / (static_cast<double>(k) * (static_cast<double>(k) + nu));
    total += term;
    // Terms grow while k(k+nu) < q; only test once they are shrinking.
    if (static_cast<double>(k) * (k + nu) > q && term < kSeriesTolerance * total) return total;
  }
  throw std::runtime_error("bessel series did not converge in 10^4 terms (nu=" + std::to_string(nu) +
                           ", kappa=" + std::to_string(kappa) + ")");
}

void check_domain(int dim, double kappa) {
  if (dim < 2) throw std::domain_error("vmf: dimension must be >= 2, got " + std::to_string(dim));
  if (!(kappa > 0.0) || !std::isfinite(kappa)) {
    throw std::domain_error("vmf: kappa must be positive and finite, got " + std::to_string(kappa));
  }
}

void check_dims(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": dimension mismatch " + std::to_string(a) + " vs " +
                                std::to_string(b));
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// 1 - cos(h, z) for unit directions, written as ||mu_h - mu_z||^2 / 2 so
// that identical inputs give an exact zero.
double half_sq_chord(std::span<const double> h, std::span<const double> z) {
  const auto mh = normalize(h);
  const auto mz = normalize(z);
  double acc = 0.0;
  for (std::size_t i = 0; i < mh.size(); ++i) {
    const double d = mh[i] - mz[i];
    acc += d * d;
  }
  return 0.5 * acc;
}

// (h - z).z, zero at h == z.
double relaxed_gap(std::span<const double> h, std::span<const double> z) {
  double acc = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) acc += (h[i] - z[i]) * z[i];
  return acc;
}

ad::Var half_sq_chord(ad::Var h, std::span<const double> z) {
  ad::Graph& g = *h.graph();
  const ad::Var mz = g.constant(ad::Tensor::vector(normalize(z)));
  return 0.5 * ad::sqdist(ad::normalize(h), mz);
}

ad::Var relaxed_gap(ad::Var h, std::span<const double> z) {
  ad::Graph& g = *h.graph();
  const ad::Var zc = g.constant(ad::Tensor::vector({z.begin(), z.end()}));
  return ad::dot(h - zc, zc);
}

}  // namespace

double mean_resultant_length(int dim, double kappa) {
  check_domain(dim, kappa);
  const double nu = 0.5 * dim;
  return kappa / dim * bessel_i_series(nu, kappa) / bessel_i_series(nu - 1.0, kappa);
}

double log_normalizer(int dim, double kappa) {
  check_domain(dim, kappa);
  const double mu = 0.5 * dim - 1.0;
  return mu * std::numbers::ln2 - 0.5 * dim * std::log(2.0 * std::numbers::pi) + std::lgamma(mu + 1.0) -
         std::log(bessel_i_series(mu, kappa));
}

double VmfParams::kl_weight() const {
  if (kl_weight_override) return *kl_weight_override;
  return kappa * mean_resultant_length(dim, kappa);
}

std::vector<double> normalize(std::span<const double> v) {
  const double len = std::sqrt(dot(v, v));
  if (!(len >= 1e-12)) throw std::domain_error("normalize: degenerate direction (norm below 1e-12)");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= len;
  return out;
}

double score(std::span<const double> h, std::span<const double> z, bool relaxed) {
  check_dims(h.size(), z.size(), "vmf score");
  if (relaxed) return dot(h, z);
  return 1.0 - half_sq_chord(h, z);
}

double log_ratio(std::span<const double> h, std::span<const double> z, const VmfParams& p, bool relaxed) {
  check_dims(h.size(), z.size(), "vmf log_ratio");
  if (relaxed) return p.kappa * relaxed_gap(h, z);
  return -p.kappa * half_sq_chord(h, z);
}

double kl(std::span<const double> h, std::span<const double> z, const VmfParams& p, bool relaxed) {
  check_dims(h.size(), z.size(), "vmf kl");
  const double w = p.kl_weight();
  if (relaxed) return -w * relaxed_gap(h, z);
  return w * half_sq_chord(h, z);
}

ad::Var score(ad::Var h, std::span<const double> z, bool relaxed) {
  check_dims(h.size(), z.size(), "vmf score");
  ad::Graph& g = *h.graph();
  if (relaxed) return ad::dot(h, g.constant(ad::Tensor::vector({z.begin(), z.end()})));
  return ad::add_scalar(-half_sq_chord(h, z), 1.0);
}

ad::Var log_ratio(ad::Var h, std::span<const double> z, const VmfParams& p, bool relaxed) {
  check_dims(h.size(), z.size(), "vmf log_ratio");
  if (relaxed) return p.kappa * relaxed_gap(h, z);
  return -p.kappa * half_sq_chord(h, z);
}

ad::Var kl(ad::Var h, std::span<const double> z, const VmfParams& p, bool relaxed) {
  check_dims(h.size(), z.size(), "vmf kl");
  const double w = p.kl_weight();
  if (relaxed) return -w * relaxed_gap(h, z);
  return w * half_sq_chord(h, z);
}

std::vector<double> sample(std::span<const double> mu, double kappa, Rng& rng) {
  const int dim = static_cast<int>(mu.size());
  check_domain(dim, kappa);
  if (std::abs(std::sqrt(dot(mu, mu)) - 1.0) > 1e-9) throw std::invalid_argument("vmf sample: mu must be unit norm");

  // Cosine to the mode, by envelope rejection.
  const double m1 = dim - 1.0;
  const double b = m1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + m1 * m1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + m1 * std::log(1.0 - x0 * x0);
  std::gamma_distribution<double> gamma(0.5 * m1, 1.0);
  double w = 0.0;
  for (std::size_t iter = 0;; ++iter) {
    if (iter == kMaxRejections) throw std::runtime_error("vmf sample: rejection loop exceeded 10^6 iterations");
    const double ga = gamma(rng);
    const double gb = gamma(rng);
    const double beta = ga / (ga + gb);
    w = (1.0 - (1.0 + b) * beta) / (1.0 - (1.0 - b) * beta);
    const double u = uniform01(rng);
    if (kappa * w + m1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
  }

  // Uniform tangent direction orthogonal to mu.
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(mu.size());
  for (;;) {
    for (double& x : v) x = normal(rng);
    const double proj = dot(v, mu);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= proj * mu[i];
    const double len = std::sqrt(dot(v, v));
    if (len > 1e-8) {
      for (double& x : v) x /= len;
      break;
    }
  }

  const double s = std::sqrt(std::max(0.0, 1.0 - w * w));
  std::vector<double> out(mu.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * mu[i] + s * v[i];
  return out;
}

namespace {

template <class F>
McEstimate mc_mean(std::size_t n, F&& draw) {
  // Welford accumulation.
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    const double x = draw();
    const double delta = x - mean;
    mean += delta / static_cast<double>(i);
    m2 += delta * (x - mean);
  }
  const double var = n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

}  // namespace

McEstimate mc_kl_estimate(std::span<const double> mu_new, std::span<const double> mu_old, double kappa,
                          std::size_t n, Rng& rng) {
  check_dims(mu_new.size(), mu_old.size(), "mc_kl_estimate");
  if (n < 1000) throw std::invalid_argument("mc_kl_estimate: need at least 10^3 samples");
  std::vector<double> diff(mu_new.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = mu_new[i] - mu_old[i];
  return mc_mean(n, [&] {
    const auto x = sample(mu_new, kappa, rng);
    return kappa * dot(diff, x);
  });
}

McEstimate mc_mean_resultant_length(int dim, double kappa, std::size_t n, Rng& rng) {
  check_domain(dim, kappa);
  std::vector<double> mu(static_cast<std::size_t>(dim), 0.0);
  mu[0] = 1.0;
  return mc_mean(n, [&] { return sample(mu, kappa, rng)[0]; });
}

}  // namespace depo::vmf
