#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "depo/rollout.hpp"

using namespace depo;

namespace {

bool same_trajectory(const Trajectory& a, const Trajectory& b) {
  if (a.steps.size() != b.steps.size()) return false;
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    if (a.steps[i].kind() != b.steps[i].kind()) return false;
    if (a.steps[i].kind() == StepKind::kToken) {
      if (a.steps[i].token().id != b.steps[i].token().id) return false;
      if (a.steps[i].token().old_logprob != b.steps[i].token().old_logprob) return false;
    } else if (a.steps[i].latent().z_tilde != b.steps[i].latent().z_tilde) {
      return false;
    }
  }
  return a.reward == b.reward;
}

RolloutGroup pattern_group(unsigned bits, int g) {
  RolloutGroup group;
  for (int i = 0; i < g; ++i) {
    Trajectory t;
    t.reward.accuracy = static_cast<int>((bits >> i) & 1U);
    t.reward.format_ok = 1;
    t.reward.total = t.reward.accuracy + 0.1;
    group.rewards.push_back(t.reward.total);
    group.trajectories.push_back(t);
  }
  return group;
}

}  // namespace

TEST_CASE("group advantages: examples") {
  for (double a : {0.0, 1.0, 1.1, -3.5}) {
    const std::vector<double> r(4, a);
    for (double x : group_advantages(r)) CHECK(x == 0.0);
  }
  const std::vector<double> r = {1.0, 0.0, 0.0, 0.0};
  const auto adv = group_advantages(r, 1e-6);
  // Brute force: mean 0.25, population std sqrt(3/16).
  const double mean = 0.25, sd = std::sqrt((0.75 * 0.75 + 3 * 0.25 * 0.25) / 4.0);
  CHECK(sd == doctest::Approx(0.43301).epsilon(1e-5));
  CHECK(adv[0] == doctest::Approx((1.0 - mean) / (sd + 1e-6)).epsilon(1e-14));
  CHECK(adv[0] == doctest::Approx(1.73205).epsilon(1e-5));
  for (int i = 1; i < 4; ++i) CHECK(adv[static_cast<std::size_t>(i)] == doctest::Approx(-0.57735).epsilon(1e-5));
}

TEST_CASE("group advantages: shift invariance and zero mean on random groups") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::uniform_int_distribution<int> size(2, 16);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(static_cast<std::size_t>(size(rng)));
    for (auto& x : r) x = u(rng);
    const double shift = u(rng) * 10.0;
    std::vector<double> shifted = r;
    for (auto& x : shifted) x += shift;
    const auto a = group_advantages(r), b = group_advantages(shifted);
    double sum = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      CHECK(std::abs(a[i] - b[i]) <= 1e-9);
      sum += a[i];
    }
    CHECK(std::abs(sum / static_cast<double>(r.size())) <= 1e-9);
  }
}

TEST_CASE("filtering: every accuracy pattern of a group of 8") {
  std::vector<RolloutGroup> groups;
  for (unsigned bits = 0; bits < 256; ++bits) groups.push_back(pattern_group(bits, 8));
  const auto kept = filter_groups(groups, 0.1, 0.9);
  std::size_t expected_kept = 0;
  for (unsigned bits = 0; bits < 256; ++bits) {
    const auto& g = groups[bits];
    const int correct = std::popcount(bits);
    const double mean = correct / 8.0;
    const bool keep = mean >= 0.1 && mean <= 0.9;
    CAPTURE(bits);
    CHECK(g.kept == keep);
    CHECK(g.mean_accuracy() == mean);
    expected_kept += keep;
    const auto adv = group_advantages(g.rewards);
    if (correct == 0 || correct == 8) {
      CHECK_FALSE(g.kept);
      for (double a : adv) CHECK(a == 0.0);
    } else {
      for (std::size_t i = 0; i < 8; ++i) CHECK((adv[i] > 0.0) == (((bits >> i) & 1U) == 1U));
    }
  }
  CHECK(kept.size() == expected_kept);
  CHECK(expected_kept == 254);
  CHECK_THROWS_AS(filter_groups(groups, 0.9, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(filter_groups(groups, -0.1, 0.5), std::invalid_argument);
}

TEST_CASE("G = 8 with four correct is kept") {
  std::vector<RolloutGroup> groups = {pattern_group(0x0F, 8), pattern_group(0xFF, 8), pattern_group(0x00, 8)};
  const auto kept = filter_groups(groups, 0.1, 0.9);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].mean_accuracy() == 0.5);
}

TEST_CASE("collect_group") {
  const Dims d{};
  const Task task(LatentRetrievalSpec{4}, d, 1234);
  const PolicyParams p = PolicyParams::init(d, 3);
  Rng rng(4);
  const Episode e = task.sample_episode(0, rng);
  const DecodeConfig decode;

  SUBCASE("reproducible") {
    const RolloutGroup a = collect_group(p, e, 2, decode, 0.1, 99);
    const RolloutGroup b = collect_group(p, e, 2, decode, 0.1, 99);
    REQUIRE(a.trajectories.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) CHECK(same_trajectory(a.trajectories[i], b.trajectories[i]));
    CHECK(a.rewards == b.rewards);
  }
  SUBCASE("rewards lie in the score's value set") {
    const RolloutGroup g = collect_group(p, e, 16, decode, 0.1, 5);
    for (double r : g.rewards) CHECK((r == 0.0 || r == 0.1 || r == 1.0 || r == 1.1));
  }
  SUBCASE("members do not depend on generation order") {
    const RolloutGroup g = collect_group(p, e, 6, decode, 0.1, 7);
    const Vocab vocab(d);
    for (std::size_t i = 6; i-- > 0;) {
      Rng member = make_rng(member_seed(7, i));
      Trajectory t = generate_trajectory(p, e, decode, member);
      t.reward = score(e, t, vocab, 0.1);
      CHECK(same_trajectory(t, g.trajectories[i]));
    }
  }
  SUBCASE("group size guard") { CHECK_THROWS_AS(collect_group(p, e, 1, decode, 0.1, 7), std::invalid_argument); }
}
