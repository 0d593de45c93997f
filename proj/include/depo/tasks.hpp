#pragma once

// Synthetic hybrid-reasoning tasks with verifiable rewards.
//
// LatentRetrieval(M): the observation prefix is M (key, value-embedding)
// pairs followed by a query equal to one key; the answer is the content
// token bound to that key. ParityMemory(n): n bits given as prompt tokens;
// the answer is their parity.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "depo/episode.hpp"
#include "depo/policy.hpp"
#include "depo/rng.hpp"

namespace depo {

struct LatentRetrievalSpec {
  int pairs = 4;
};

struct ParityMemorySpec {
  int bits = 8;
};

using TaskSpec = std::variant<LatentRetrievalSpec, ParityMemorySpec>;

/// Parses "latent_retrieval" / "parity_memory" with a size argument.
TaskSpec make_task_spec(const std::string& name, int size);
std::string task_name(const TaskSpec& spec);

class Task {
 public:
  /// `task_seed` fixes the value codebook and the target map, so every run
  /// and checkpoint on the same seed sees the same task.
  Task(TaskSpec spec, const Dims& dims, std::uint64_t task_seed);

  const TaskSpec& spec() const { return spec_; }
  const Dims& dims() const { return dims_; }
  bool has_latent_targets() const { return std::holds_alternative<LatentRetrievalSpec>(spec_); }

  Episode sample_episode(std::uint64_t episode_id, Rng& rng) const;

  /// Pair count or bit count.
  int size() const;
  /// Same codebook and target map with a different pair or bit count.
  Task resized(int size) const;

  /// Value embedding shown in the observation stream for content token `v`.
  const std::vector<double>& value_embedding(int v) const { return codebook_.at(static_cast<std::size_t>(v)); }
  /// Canvas target for answer `v`: tanh(R e_v) in R^D.
  std::vector<double> target_latent(int v) const;

  /// Gold action script: prompt text (none), CANVAS_START, k_train latent
  /// slots, CANVAS_END, ANSWER, gold, EOS.
  std::vector<int> gold_script(const Episode& e, int k_train) const;

 private:
  TaskSpec spec_;
  Dims dims_;
  std::vector<std::vector<double>> codebook_;  // content -> D_obs unit vector
  ad::Tensor target_map_;                      // D x D_obs
};

/// Accuracy: the token after the first ANSWER equals the gold answer.
/// Format: text, at least one non-empty canvas, ANSWER, one content token,
/// EOS at the end. total = accuracy + w_fmt * format_ok.
/// Gold action script shared by every task: CANVAS_START, k latent slots,
/// CANVAS_END, ANSWER, gold, EOS.
std::vector<int> gold_script(const Vocab& vocab, const Episode& e, int k_train);

RewardRecord score(const Episode& e, const Trajectory& t, const Vocab& vocab, double w_fmt);

bool well_formed(const Trajectory& t, const Vocab& vocab);

}  // namespace depo
