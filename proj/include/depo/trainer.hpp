#pragma once

// Two-stage pipeline: SFT on gold trajectories, then RL with the decoupled
// objective. Every random draw is keyed by (master seed, stream, global
// step, index), so a run resumed from a checkpoint replays exactly the
// draws the uninterrupted run would have made.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "depo/losses.hpp"
#include "depo/policy.hpp"
#include "depo/tasks.hpp"

namespace depo {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  bool operator==(const AdamConfig&) const = default;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  Gradients m;
  Gradients v;

  static OptimizerState create(const Dims& dims, const AdamConfig& config);
  bool operator==(const OptimizerState&) const = default;
};

/// AdamW with bias correction and decoupled decay. Throws
/// std::domain_error naming the array if a gradient is not finite.
void adam_step(PolicyParams& params, const Gradients& grads, OptimizerState& state);

enum class Stage { kSft, kRl };

struct Checkpoint {
  static constexpr int kVersion = 1;

  Stage stage = Stage::kSft;
  PolicyParams params;
  /// Frozen reference policy (RL stage only).
  std::optional<PolicyParams> reference;
  OptimizerState optimizer;
  std::map<std::string, std::string> config;
  std::uint64_t master_seed = 0;
  /// Global steps already taken in this stage; the rng position.
  std::uint64_t step = 0;

  bool operator==(const Checkpoint&) const = default;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws std::runtime_error on a corrupt container or version mismatch,
/// and std::invalid_argument when `expected` dims differ from the file.
Checkpoint parse_checkpoint(const std::string& text, const Dims* expected = nullptr);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, const Dims* expected = nullptr);

/// Tabular metrics stream with a fixed column order.
struct MetricsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  double at(std::size_t row, const std::string& column) const;
  std::vector<double> column(const std::string& name) const;
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct SftConfig {
  int epochs = 16;
  /// Fresh gold episodes per epoch; no episode is seen twice.
  int episodes_per_epoch = 32768;
  int batch_size = 16;
  /// Caps the number of steps taken by one call; 0 means no cap.
  int max_steps = 0;
  double lambda = 1.0;
  int k_train = 8;
  /// Ramps the pair (or bit) count from 1 to the task size in equal stages
  /// over the schedule.
  bool curriculum = true;
  AdamConfig adam{3e-3};
};

struct SftResult {
  Checkpoint checkpoint;
  MetricsTable metrics;
};

/// Columns: step, epoch, task_size, loss, ce, canvas, grad_norm.
///
/// Starts from PolicyParams::init unless `resume` is given, in which case
/// the schedule continues at resume->step.
SftResult run_sft(const Task& task, const Dims& dims, const SftConfig& config, std::uint64_t master_seed,
                  const std::optional<Checkpoint>& resume = std::nullopt);

struct RlConfig {
  int steps = 500;
  int groups_per_step = 16;
  int group_size = 8;
  /// Optimizer updates per collected batch; the first always sits at r = 1.
  int ppo_epochs = 2;
  double filter_lo = 0.1;
  double filter_hi = 0.9;
  double w_fmt = 0.1;
  double advantage_eps = 1e-6;
  DecodeConfig decode;
  DepoConfig depo;
  AdamConfig adam{1e-4};
};

struct RlResult {
  Checkpoint checkpoint;
  MetricsTable metrics;
};

/// Runs config.steps further steps. From an SFT checkpoint the parameters
/// become both the starting point and the frozen reference; from an RL
/// checkpoint training resumes with its stored reference and optimizer.
///
/// Columns: step, skipped, reward_mean, accuracy, format_rate,
/// discard_rate, kept_groups, l_tok, l_lat, kl_tok, kl_lat, l_total,
/// mean_abs_log_r_tok, max_abs_log_r_tok, mean_abs_log_r_lat,
/// max_abs_log_r_lat, clip_frac_tok, clip_frac_lat, grad_norm.
/// A step whose groups were all discarded has skipped = 1 and no update.
RlResult run_rl(const Checkpoint& start, const Task& task, const RlConfig& config);

struct EvalSummary {
  std::size_t episodes = 0;
  double accuracy = 0.0;
  double format_rate = 0.0;
  double mean_canvas_length = 0.0;
};

/// Greedy decoding with canvas budget k_test over episodes keyed by
/// (seed, episode index); the same seed always yields the same episodes.
EvalSummary evaluate_policy(const PolicyParams& params, const Task& task, std::size_t episodes, int k_test,
                            std::uint64_t seed, const DecodeConfig& decode = {}, double w_fmt = 0.1);

}  // namespace depo
