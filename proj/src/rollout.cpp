#include "depo/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace depo {

double RolloutGroup::mean_accuracy() const {
  if (trajectories.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& t : trajectories) acc += t.reward.accuracy;
  return acc / static_cast<double>(trajectories.size());
}

std::uint64_t member_seed(std::uint64_t group_seed, std::size_t member) {
  return derive_seed(group_seed, {static_cast<std::uint64_t>(member)});
}

RolloutGroup collect_group(const PolicyParams& snapshot, const Episode& episode, int group_size,
                           const DecodeConfig& decode, double w_fmt, std::uint64_t group_seed) {
  if (group_size < 2) throw std::invalid_argument("collect_group: group size must be >= 2");
  const Vocab vocab(snapshot.dims);
  RolloutGroup g;
  g.episode = episode;
  g.trajectories.reserve(static_cast<std::size_t>(group_size));
  for (int i = 0; i < group_size; ++i) {
    Rng rng = make_rng(member_seed(group_seed, static_cast<std::size_t>(i)));
    Trajectory t = generate_trajectory(snapshot, episode, decode, rng);
    t.reward = score(episode, t, vocab, w_fmt);
    g.rewards.push_back(t.reward.total);
    g.trajectories.push_back(std::move(t));
  }
  return g;
}

std::vector<double> group_advantages(std::span<const double> rewards, double eps) {
  // Equal rewards carry no signal. Handled exactly: a rounded mean would
  // leave residues that 1/eps amplifies.
  if (std::adjacent_find(rewards.begin(), rewards.end(), std::not_equal_to<>()) == rewards.end()) {
    return std::vector<double>(rewards.size(), 0.0);
  }
  const auto n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double stddev = std::sqrt(var / n);
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mean) / (stddev + eps));
  return out;
}

std::vector<RolloutGroup> filter_groups(std::vector<RolloutGroup>& groups, double lo, double hi) {
  if (!(lo < hi) || lo < 0.0 || hi > 1.0) throw std::invalid_argument("filter_groups: need 0 <= lo < hi <= 1");
  std::vector<RolloutGroup> kept;
  for (auto& g : groups) {
    const double acc = g.mean_accuracy();
    g.kept = acc >= lo && acc <= hi;
    if (g.kept) kept.push_back(g);
  }
  return kept;
}

}  // namespace depo
