#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace depo {

/// One task instance: a continuous observation prefix, prompt tokens and
/// the verifiable answer.
struct Episode {
  std::uint64_t episode_id = 0;
  std::string task_id;
  std::vector<std::vector<double>> observations;
  std::vector<int> prompt_tokens;
  int gold_answer = 0;
  /// Supervision for canvas positions during SFT (dimension D each).
  std::optional<std::vector<std::vector<double>>> target_latents;
};

struct RewardRecord {
  int accuracy = 0;
  int format_ok = 0;
  double total = 0.0;

  bool operator==(const RewardRecord&) const = default;
};

}  // namespace depo
