#pragma once

// Training objectives: SFT, the decoupled dual-clip surrogates, the
// closed-form latent KL, the sample-based token KL and their composition.
//
// Every mean over positions is taken across the whole batch (token-mean),
// separately for text positions Z and latent positions S.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "depo/policy.hpp"
#include "depo/rollout.hpp"

namespace depo {

enum class LatentRatio { kVmf, kGaussian };

struct DepoConfig {
  double eps_tok_lo = 0.2;
  double eps_tok_hi = 0.28;
  double eps_lat_lo = 0.05;
  double eps_lat_hi = 0.05;
  double alpha = 0.5;
  double beta_tok = 0.01;
  double beta_lat = 0.005;
  double dual_clip_c = 3.0;
  bool relaxed = true;
  double kappa = 0.01;
  std::optional<double> kl_weight;
  LatentRatio latent_ratio = LatentRatio::kVmf;
  double gaussian_sigma = 10.0;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
  vmf::VmfParams vmf(int dim) const;
};

struct LossBreakdown {
  double l_tok = 0.0;
  double l_lat = 0.0;
  double kl_tok = 0.0;
  double kl_lat = 0.0;
  double l_total = 0.0;
  std::size_t n_tok = 0;
  std::size_t n_lat = 0;
};

/// Dual-clip surrogate as a loss (negated objective). Throws for r <= 0.
double surrogate_clip(double r, double advantage, double eps_lo, double eps_hi, double c);
ad::Var surrogate_clip(ad::Var r, double advantage, double eps_lo, double eps_hi, double c);

/// -|h_old - h|^2 / (2 sigma^2).
double gaussian_log_ratio(std::span<const double> h, std::span<const double> h_old, double sigma);
ad::Var gaussian_log_ratio(ad::Var h, std::span<const double> h_old, double sigma);

/// exp(d) - d - 1 with d = log pi_ref - log pi_theta.
double token_kl_estimator(double delta);

struct BatchItem {
  const Episode* episode = nullptr;
  const Trajectory* trajectory = nullptr;
  double advantage = 0.0;
  /// Per-step participation mask; empty means every step participates.
  std::vector<char> active;
  /// Reference-policy log-prob per step (token steps only); filled lazily.
  std::vector<double> ref_logprob;
};

struct PolicyBatch {
  std::vector<BatchItem> items;

  std::size_t token_count() const;
  std::size_t latent_count() const;
};

/// Flattens kept groups; the groups must outlive the batch.
PolicyBatch make_batch(std::span<const RolloutGroup> kept);

/// Fills ref_logprob for every item by replaying under `reference`.
void attach_reference(PolicyBatch& batch, const PolicyParams& reference);

/// Which scalar receives the gradient.
enum class Objective {
  kTotal,          // l_tok + alpha l_lat + beta_tok kl_tok + beta_lat kl_lat
  kPolicy,         // l_tok + alpha l_lat
  kTokenSurrogate,
  kLatentSurrogate,
  kLatentKl,
  kTokenKl,
};

struct RatioStats {
  double mean_abs_log_tok = 0.0;
  double max_abs_log_tok = 0.0;
  double mean_abs_log_lat = 0.0;
  double max_abs_log_lat = 0.0;
  /// Fraction of positions whose surrogate sits on a clipped branch.
  double clip_frac_tok = 0.0;
  double clip_frac_lat = 0.0;
};

struct LossEvaluation {
  LossBreakdown breakdown;
  RatioStats ratios;
  /// log r per item and step (0 at masked steps).
  std::vector<std::vector<double>> log_ratios;
  /// Gradient of the selected objective; empty unless requested.
  std::optional<Gradients> grad;
};

/// Teacher-forces every trajectory under `params` and evaluates all loss
/// components. Token KL needs ref_logprob (see attach_reference) and is 0
/// without it. Items are evaluated in parallel and reduced in order.
LossEvaluation evaluate_losses(const PolicyBatch& batch, const PolicyParams& params, const DepoConfig& cfg,
                               Objective objective, bool want_grad);

struct PolicyLoss {
  double l_tok = 0.0;
  double l_lat = 0.0;
  std::vector<std::vector<double>> log_ratios;
};

/// Throws std::invalid_argument when the batch has neither Z nor S positions.
PolicyLoss depo_policy_loss(const PolicyBatch& batch, const PolicyParams& params, const DepoConfig& cfg);
/// 0 when |S| == 0.
double latent_kl_loss(const PolicyBatch& batch, const PolicyParams& params, const DepoConfig& cfg);
double token_kl_loss(const PolicyBatch& batch, const PolicyParams& params, const PolicyParams& reference);

/// Fills l_total from the four components.
LossBreakdown total_loss(LossBreakdown components, const DepoConfig& cfg);

struct SftEvaluation {
  double ce = 0.0;
  double canvas = 0.0;
  double total = 0.0;
  std::size_t n_tokens = 0;
  std::size_t n_canvas = 0;
  std::optional<Gradients> grad;
};

/// CE over gold tokens (token-mean over the batch) plus lambda times the
/// canvas MSE averaged over positions and hidden dimensions. Canvas steps
/// use the real latent recursion. The closing CANVAS_END is a forced exit
/// and carries no CE term. The canvas term is measured whenever targets
/// exist, even at lambda == 0. With lambda != 0, throws
/// std::invalid_argument if an episode lacks target_latents; with
/// lambda == 0 such episodes report a canvas term of 0.
SftEvaluation sft_loss(std::span<const Episode> episodes, const PolicyParams& params, double lambda, int k_train,
                       bool want_grad);

}  // namespace depo
