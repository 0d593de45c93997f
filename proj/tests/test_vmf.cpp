#include <doctest.h>

#include <boost/math/special_functions/bessel.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "depo/vmf.hpp"

using namespace depo;

namespace {

double boost_a(int d, double kappa) {
  const double nu = d / 2.0;
  return boost::math::cyl_bessel_i(nu, kappa) / boost::math::cyl_bessel_i(nu - 1.0, kappa);
}

double boost_log_c(int d, double kappa) {
  const double nu = d / 2.0 - 1.0;
  return nu * std::log(kappa) - (d / 2.0) * std::log(2.0 * std::numbers::pi) -
         std::log(boost::math::cyl_bessel_i(nu, kappa));
}

std::vector<double> unit_at_angle(int d, double angle) {
  std::vector<double> v(static_cast<std::size_t>(d), 0.0);
  v[0] = std::cos(angle);
  v[1] = std::sin(angle);
  return v;
}

std::vector<double> axis(int d, int i = 0) {
  std::vector<double> v(static_cast<std::size_t>(d), 0.0);
  v[static_cast<std::size_t>(i)] = 1.0;
  return v;
}

std::vector<double> gaussian(std::size_t n, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("mean resultant length matches Bessel ratios") {
  for (int d : {2, 3, 4, 8, 16, 32, 64}) {
    for (double kappa : {1e-3, 0.01, 0.5, 1.0, 2.0, 8.0, 20.0, 50.0}) {
      CAPTURE(d);
      CAPTURE(kappa);
      CHECK(vmf::mean_resultant_length(d, kappa) == doctest::Approx(boost_a(d, kappa)).epsilon(1e-10));
      CHECK(vmf::log_normalizer(d, kappa) == doctest::Approx(boost_log_c(d, kappa)).epsilon(1e-10));
    }
  }
}

TEST_CASE("mean resultant length: small-kappa asymptote and monotonicity") {
  const double a = vmf::mean_resultant_length(16, 1e-4);
  CHECK(std::abs(a - 6.25e-6) / 6.25e-6 < 1e-3);
  CHECK(vmf::mean_resultant_length(8, 1.0) < vmf::mean_resultant_length(8, 2.0));
  CHECK(vmf::mean_resultant_length(8, 2.0) < vmf::mean_resultant_length(8, 4.0));
  const double big = vmf::mean_resultant_length(8, 50.0);
  CHECK(big > 0.0);
  CHECK(big < 1.0);
}

TEST_CASE("domain errors") {
  CHECK_THROWS_AS(vmf::mean_resultant_length(1, 1.0), std::domain_error);
  CHECK_THROWS_AS(vmf::mean_resultant_length(8, 0.0), std::domain_error);
  CHECK_THROWS_AS(vmf::mean_resultant_length(8, -1.0), std::domain_error);
  CHECK_THROWS_AS(vmf::normalize(std::vector<double>{0.0, 0.0}), std::domain_error);
  const std::vector<double> a = {1.0, 0.0}, b = {1.0, 0.0, 0.0};
  CHECK_THROWS_AS(vmf::log_ratio(a, b, vmf::VmfParams{2, 1.0, std::nullopt}, false), std::invalid_argument);
}

TEST_CASE("normalize") {
  const auto a = vmf::normalize(std::vector<double>{3.0, 4.0});
  CHECK(a[0] == doctest::Approx(0.6));
  CHECK(a[1] == doctest::Approx(0.8));
  const auto b = vmf::normalize(std::vector<double>{2.0, 0.0, 0.0, 0.0});
  CHECK(b == std::vector<double>{1.0, 0.0, 0.0, 0.0});
  const auto u = unit_at_angle(5, 0.7);
  const auto v = vmf::normalize(u);
  for (std::size_t i = 0; i < u.size(); ++i) CHECK(v[i] == doctest::Approx(u[i]).epsilon(1e-15));
}

TEST_CASE("log ratio examples") {
  const vmf::VmfParams p{8, 0.01, std::nullopt};
  Rng rng(3);
  const auto h = gaussian(8, rng);
  for (bool relaxed : {false, true}) {
    CHECK(vmf::log_ratio(h, h, p, relaxed) == 0.0);
  }
  // Orthogonal unit vectors: log p_new(z) - log p_old(z) = kappa*mu.z - kappa*z.z.
  const auto mu = axis(8, 0), z = axis(8, 1);
  double mu_z = 0.0;
  for (std::size_t i = 0; i < 8; ++i) mu_z += mu[i] * z[i];
  CHECK(vmf::log_ratio(mu, z, p, false) == doctest::Approx(0.01 * mu_z - 0.01).epsilon(1e-15));
  CHECK(vmf::log_ratio(mu, z, p, false) == doctest::Approx(-0.01));
  std::vector<double> anti = mu;
  for (auto& x : anti) x = -x;
  CHECK(vmf::log_ratio(anti, mu, p, false) == doctest::Approx(-0.02));
}

TEST_CASE("relaxed and normalized scores coincide on unit inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto h = vmf::normalize(gaussian(16, rng));
    const auto z = vmf::normalize(gaussian(16, rng));
    const vmf::VmfParams p{16, 0.5 + trial * 0.01, std::nullopt};
    CHECK(std::abs(vmf::log_ratio(h, z, p, true) - vmf::log_ratio(h, z, p, false)) <= 1e-12);
    CHECK(std::abs(vmf::kl(h, z, p, true) - vmf::kl(h, z, p, false)) <= 1e-12);
  }
}

TEST_CASE("normalized mode is scale invariant, relaxed is not") {
  Rng rng(12);
  const vmf::VmfParams p{8, 1.5, std::nullopt};
  const auto h = gaussian(8, rng), z = vmf::normalize(gaussian(8, rng));
  auto scaled = h;
  for (auto& x : scaled) x *= 3.7;
  CHECK(vmf::log_ratio(scaled, z, p, false) == doctest::Approx(vmf::log_ratio(h, z, p, false)).epsilon(1e-13));
  CHECK(vmf::log_ratio(scaled, z, p, true) != doctest::Approx(vmf::log_ratio(h, z, p, true)));
}

TEST_CASE("closed-form KL examples") {
  const vmf::VmfParams p{8, 2.0, std::nullopt};
  const double w = 2.0 * boost_a(8, 2.0);
  CHECK(p.kl_weight() == doctest::Approx(w).epsilon(1e-12));
  const auto mu = axis(8);
  CHECK(vmf::kl(mu, mu, p, false) == 0.0);
  CHECK(vmf::kl(mu, mu, p, true) == 0.0);
  std::vector<double> anti = mu;
  for (auto& x : anti) x = -x;
  CHECK(vmf::kl(anti, mu, p, false) == doctest::Approx(2.0 * w).epsilon(1e-12));
  const vmf::VmfParams fixed{8, 2.0, 0.25};
  CHECK(vmf::kl(anti, mu, fixed, false) == doctest::Approx(0.5));
}

TEST_CASE("KL at 60 degrees against a Monte-Carlo mean resultant length") {
  Rng rng(derive_seed(5, Stream::kVmfVerify));
  const vmf::McEstimate a = vmf::mc_mean_resultant_length(8, 2.0, 1000000, rng);
  const vmf::VmfParams p{8, 2.0, std::nullopt};
  const double closed = vmf::kl(unit_at_angle(8, std::numbers::pi / 3.0), axis(8), p, false);
  const double oracle = 2.0 * a.estimate * 0.5;
  CHECK(std::abs(closed - oracle) <= 3.0 * 2.0 * 0.5 * a.std_error);
}

TEST_CASE("graph and plain evaluations agree") {
  Rng rng(13);
  const auto h = gaussian(6, rng), z = gaussian(6, rng);
  const vmf::VmfParams p{6, 0.8, std::nullopt};
  for (bool relaxed : {false, true}) {
    ad::Graph g;
    ad::Var hv = g.variable(ad::Tensor::vector(h));
    CHECK(vmf::log_ratio(hv, z, p, relaxed).item() == doctest::Approx(vmf::log_ratio(h, z, p, relaxed)).epsilon(1e-14));
    CHECK(vmf::kl(hv, z, p, relaxed).item() == doctest::Approx(vmf::kl(h, z, p, relaxed)).epsilon(1e-14));
    CHECK(vmf::score(hv, z, relaxed).item() == doctest::Approx(vmf::score(h, z, relaxed)).epsilon(1e-14));
  }
}

TEST_CASE("Wood sampler") {
  SUBCASE("unit norm and determinism") {
    Rng a(21), b(21);
    const auto mu = vmf::normalize(std::vector<double>{1.0, 2.0, -1.0, 0.5, 0.0});
    for (int i = 0; i < 2000; ++i) {
      const auto x = vmf::sample(mu, 0.5 + i % 7, a);
      CHECK(std::abs(norm(x) - 1.0) <= 1e-9);
      CHECK(x == vmf::sample(mu, 0.5 + i % 7, b));
    }
  }
  SUBCASE("projection onto mu matches A_D") {
    Rng rng(22);
    const auto mu = vmf::normalize(std::vector<double>{0.3, -0.2, 0.9, 0.1, 0.0, 0.4, -0.5, 0.2});
    const std::size_t n = 1000000;
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto x = vmf::sample(mu, 2.0, rng);
      double c = 0.0;
      for (std::size_t k = 0; k < mu.size(); ++k) c += mu[k] * x[k];
      s += c;
      s2 += c * c;
    }
    const double mean = s / n;
    const double se = std::sqrt((s2 / n - mean * mean) / n);
    CHECK(std::abs(mean - boost_a(8, 2.0)) <= 3.0 * se);
  }
  SUBCASE("high concentration clusters tightly") {
    Rng rng(23);
    const vmf::McEstimate m = vmf::mc_mean_resultant_length(4, 50.0, 100000, rng);
    CHECK(m.estimate > 0.95);
  }
  SUBCASE("mu must be a unit vector") {
    Rng rng(24);
    CHECK_THROWS_AS(vmf::sample(std::vector<double>{2.0, 0.0}, 1.0, rng), std::invalid_argument);
  }
}

TEST_CASE("Monte-Carlo KL") {
  Rng rng(31);
  const auto mu = axis(8);
  SUBCASE("identical means: zero estimate and zero error") {
    const vmf::McEstimate e = vmf::mc_kl_estimate(mu, mu, 2.0, 1000, rng);
    CHECK(e.estimate == 0.0);
    CHECK(e.std_error == 0.0);
  }
  SUBCASE("60 degrees at 10^6 samples") {
    const auto mu_new = unit_at_angle(8, std::numbers::pi / 3.0);
    const vmf::McEstimate e = vmf::mc_kl_estimate(mu_new, mu, 2.0, 1000000, rng);
    const double closed = vmf::kl(mu_new, mu, vmf::VmfParams{8, 2.0, std::nullopt}, false);
    CHECK(std::abs(e.estimate - closed) <= 3.0 * e.std_error);
  }
  SUBCASE("nonnegative up to noise") {
    for (double angle : {0.1, 1.0, 2.0, 3.0}) {
      for (double kappa : {0.1, 1.0, 10.0}) {
        const vmf::McEstimate e = vmf::mc_kl_estimate(unit_at_angle(8, angle), mu, kappa, 20000, rng);
        CHECK(e.estimate >= -3.0 * e.std_error);
      }
    }
  }
  SUBCASE("sample count floor") { CHECK_THROWS_AS(vmf::mc_kl_estimate(mu, mu, 1.0, 999, rng), std::invalid_argument); }
}
