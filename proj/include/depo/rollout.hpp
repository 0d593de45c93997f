#pragma once

// Group rollouts, dynamic filtering and group-relative advantages.

#include <cstdint>
#include <span>
#include <vector>

#include "depo/policy.hpp"
#include "depo/tasks.hpp"

namespace depo {

struct RolloutGroup {
  Episode episode;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  std::vector<double> advantages;
  bool kept = false;

  double mean_accuracy() const;
};

/// Seed of member `member` in a group keyed by `group_seed`.
std::uint64_t member_seed(std::uint64_t group_seed, std::size_t member);

/// G trajectories for one episode under a frozen snapshot. Member i draws
/// from member_seed(group_seed, i) only.
RolloutGroup collect_group(const PolicyParams& snapshot, const Episode& episode, int group_size,
                           const DecodeConfig& decode, double w_fmt, std::uint64_t group_seed);

/// (r_i - mean) / (std + eps) with the population standard deviation.
std::vector<double> group_advantages(std::span<const double> rewards, double eps = 1e-6);

/// Keeps groups whose mean accuracy lies in [lo, hi]; marks `kept` on every
/// input group and returns the kept ones in input order.
std::vector<RolloutGroup> filter_groups(std::vector<RolloutGroup>& groups, double lo, double hi);

}  // namespace depo
