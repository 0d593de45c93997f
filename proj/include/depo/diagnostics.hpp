#pragma once

// Verification experiments: ratio mismatch under parameter perturbation,
// closed-form vs Monte-Carlo vMF KL, finite-difference gradient checks and
// the inference canvas-budget sweep.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "depo/losses.hpp"
#include "depo/policy.hpp"
#include "depo/tasks.hpp"
#include "depo/trainer.hpp"

namespace depo::diag {

// --- Ratio mismatch ---------------------------------------------------------

struct RatioSweepConfig {
  std::vector<double> magnitudes = {0.005, 0.01, 0.02, 0.05, 0.1};
  int trials = 16;
  /// Episodes in the fixed replay set (one gold-script trajectory each).
  int episodes = 32;
  int k_train = 8;
  /// Concentration used to score latent positions. The training default
  /// (0.01) shrinks every latent log-ratio a hundredfold, so the sweep
  /// uses its own value.
  double kappa = 1.0;
  bool relaxed = true;
};

struct RatioSweepRow {
  double magnitude = 0.0;
  StepKind kind = StepKind::kToken;
  double mean_r = 0.0;
  double std_r = 0.0;
  double max_abs_log_r = 0.0;
  /// Mean over trials of the per-trial maximum |log r|.
  double mean_trial_max_abs_log_r = 0.0;
  std::size_t count = 0;
};

struct RatioSweepResult {
  std::vector<RatioSweepRow> rows;

  /// Rows of one kind, in magnitude order.
  std::vector<RatioSweepRow> series(StepKind kind) const;
  /// Header: magnitude,kind,mean_r,std_r,max_abs_log_r,mean_trial_max_abs_log_r,count
  std::string to_csv() const;
};

/// For each magnitude m and trial, perturbs the snapshot along a unit
/// direction u drawn isotropically over the concatenated parameters,
/// theta = theta_old + m |theta_old| u, replays the fixed trajectory set and
/// records ratio statistics per position kind. Trial t uses the same
/// direction at every m.
RatioSweepResult ratio_mismatch_experiment(const PolicyParams& snapshot, const Task& task,
                                           const RatioSweepConfig& config, std::uint64_t seed);

// --- vMF KL verification -------------------------------------------------------

struct KlCase {
  int dim = 8;
  double kappa = 1.0;
  /// Angle between the two mean directions, radians.
  double angle = 0.0;
};

struct KlCheck {
  KlCase config;
  double closed_form = 0.0;
  double monte_carlo = 0.0;
  double std_error = 0.0;
  bool pass = false;
};

/// 20 cases: identical means first, then random (D, kappa, angle).
std::vector<KlCase> random_kl_cases(std::uint64_t seed, std::size_t count = 20);

/// PASS iff |closed - mc| <= 3 * stderr. Throws for n < 1000.
std::vector<KlCheck> verify_vmf_kl(const std::vector<KlCase>& cases, std::size_t n, std::uint64_t seed);

/// Header: dim,kappa,angle,closed_form,monte_carlo,std_error,pass
std::string kl_csv(const std::vector<KlCheck>& checks);

// --- Gradient checks -------------------------------------------------------------

struct GradcheckResult {
  std::string op;
  bool pass = false;
  double max_rel_error = 0.0;
  std::size_t compared = 0;
  /// Worst entry.
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central differences with step `h`; an entry passes if
/// |a - n| <= rel_tol * max(|a|, |n|) or |a - n| <= abs_floor.
GradcheckResult gradcheck(const std::string& op, PolicyParams params,
                          const std::function<double(const PolicyParams&, Gradients*)>& f, double h = 1e-5,
                          double rel_tol = 1e-4, double abs_floor = 1e-8);

/// Small frozen micro-batches over every loss path: sft_loss,
/// depo_policy_loss, latent_kl_loss, token_kl_loss, total_loss and the
/// Gaussian-ratio variant, in relaxed and normalized modes.
std::vector<GradcheckResult> gradcheck_all(std::uint64_t seed);

// --- Canvas budget sweep -------------------------------------------------------------

struct NamedCheckpoint {
  std::string name;
  PolicyParams params;
};

struct KtestRow {
  std::string checkpoint;
  int k = 0;
  EvalSummary summary;
};

/// Greedy accuracy for every (checkpoint, K) on the same fresh episodes.
/// Throws std::invalid_argument unless k_values contains 0.
std::vector<KtestRow> ktest_sweep(const std::vector<NamedCheckpoint>& checkpoints, const Task& task,
                                  const std::vector<int>& k_values, std::size_t episodes, std::uint64_t seed,
                                  const DecodeConfig& decode = {});

/// Header: checkpoint,k,episodes,accuracy,format_rate,mean_canvas_length
std::string ktest_csv(const std::vector<KtestRow>& rows);

}  // namespace depo::diag
