#pragma once

// Hybrid recurrent policy.
//
//   h_t    = tanh(W_hh h_{t-1} + W_hx x_t + b_h)
//   logits = W_out h_t + b_out
//
// Inputs x_t are token embeddings, projected observations (W_obs o), or,
// inside a canvas segment, the previous hidden state itself (latent
// recursion). Token positions are categorical actions; latent positions
// are directional actions scored by a vMF density around the current
// hidden state.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "depo/autodiff.hpp"
#include "depo/episode.hpp"
#include "depo/rng.hpp"
#include "depo/vmf.hpp"

namespace depo {

struct Dims {
  int content = 16;
  int spare = 4;
  int hidden = 32;
  int input = 32;
  int obs = 16;

  int vocab() const { return content + 4 + spare; }
  bool operator==(const Dims&) const = default;
};

/// Token id layout: content tokens first, then the four control tokens,
/// then spare (never-supervised) tokens.
struct Vocab {
  int content = 16;
  int spare = 4;

  explicit Vocab(const Dims& d) : content(d.content), spare(d.spare) {}

  int size() const { return content + 4 + spare; }
  int canvas_start() const { return content; }
  int canvas_end() const { return content + 1; }
  int answer() const { return content + 2; }
  int eos() const { return content + 3; }
  bool is_content(int id) const { return id >= 0 && id < content; }
  bool is_control(int id) const { return id >= content && id < content + 4; }
};

struct PolicyParams {
  static constexpr std::size_t kNumArrays = 7;
  static constexpr std::array<std::string_view, kNumArrays> kNames = {"embed", "w_hh", "w_hx", "b_h",
                                                                       "w_out", "b_out", "w_obs"};

  Dims dims;
  ad::Tensor embed;  // V x D_in
  ad::Tensor w_hh;   // D x D
  ad::Tensor w_hx;   // D x D_in
  ad::Tensor b_h;    // D
  ad::Tensor w_out;  // V x D
  ad::Tensor b_out;  // V
  ad::Tensor w_obs;  // D_in x D_obs

  static PolicyParams zeros(const Dims& d);
  /// Scaled Gaussian initialization drawn from `seed`.
  static PolicyParams init(const Dims& d, std::uint64_t seed);

  std::array<ad::Tensor*, kNumArrays> arrays();
  std::array<const ad::Tensor*, kNumArrays> arrays() const;

  std::size_t total_size() const;
  double global_norm() const;
  bool all_finite() const;
  /// this += c * other
  void axpy(double c, const PolicyParams& other);

  bool operator==(const PolicyParams&) const = default;
};

/// Gradients share the parameter layout.
using Gradients = PolicyParams;

enum class StepKind { kToken, kLatent };

struct TokenAction {
  int id = 0;
  double old_logprob = 0.0;
  /// A CANVAS_END inserted because the budget ran out while the head's exit
  /// probability was at or below the threshold. Not a policy decision, so
  /// it is excluded from every ratio and KL term.
  bool forced = false;
};

struct LatentAction {
  std::vector<double> z_tilde;
};

struct HybridStep {
  std::size_t position = 0;
  std::variant<TokenAction, LatentAction> action;

  StepKind kind() const { return std::holds_alternative<TokenAction>(action) ? StepKind::kToken : StepKind::kLatent; }
  const TokenAction& token() const { return std::get<TokenAction>(action); }
  const LatentAction& latent() const { return std::get<LatentAction>(action); }
};

struct Trajectory {
  std::uint64_t episode_id = 0;
  std::vector<HybridStep> steps;
  std::vector<std::size_t> text_positions;    // Z
  std::vector<std::size_t> latent_positions;  // S
  RewardRecord reward;

  /// Lengths of the latent runs, in order.
  std::vector<std::size_t> canvas_lengths() const;
};

struct DecodeConfig {
  /// 0 selects greedy decoding.
  double temperature = 0.9;
  int max_length = 64;
  int canvas_budget = 8;
  double exit_threshold = 0.5;
  /// Relaxed mode stores raw hidden states as z~, otherwise their directions.
  bool relaxed = true;
};

// --- Plain (graph-free) forward pass -------------------------------------

std::vector<double> step_core(std::span<const double> h_prev, std::span<const double> x, const PolicyParams& p);
/// The fixed D -> D_in adapter applied to h before it is fed back.
std::vector<double> latent_input(std::span<const double> h, const Dims& d);
std::vector<double> latent_step(std::span<const double> h_prev, const PolicyParams& p);
std::vector<double> token_logprobs(std::span<const double> h, const PolicyParams& p);
std::vector<double> observation_input(std::span<const double> obs, const PolicyParams& p);
/// Hidden state after consuming the episode's observations and prompt tokens.
std::vector<double> prefill(const PolicyParams& p, const Episode& e);

/// Samples one hybrid trajectory. Token steps are drawn from
/// softmax(logits / temperature) and store the untempered log-probability;
/// latent steps are deterministic.
Trajectory generate_trajectory(const PolicyParams& p, const Episode& e, const DecodeConfig& decode, Rng& rng);

/// Script entry for record_trajectory: a token id, or kLatentSlot.
inline constexpr int kLatentSlot = -1;

/// Builds a trajectory whose actions are given, recording old log-probs and
/// z~ under `p`. Throws std::invalid_argument for a malformed canvas layout.
/// A CANVAS_END is marked forced under the same rule generation uses.
Trajectory record_trajectory(const PolicyParams& p, const Episode& e, std::span<const int> script, bool relaxed,
                             double exit_threshold = 0.5);

/// Checks the position partition and canvas nesting; throws std::logic_error.
void validate_trajectory(const Trajectory& t, const Vocab& vocab, int canvas_budget);

struct PlainReplay {
  /// Hidden state at which each step's action is evaluated.
  std::vector<std::vector<double>> hidden;
  /// Token log-probability per step (0 for latent steps).
  std::vector<double> token_logprob;
};

PlainReplay replay(const PolicyParams& p, const Episode& e, const Trajectory& t);

// --- Differentiable forward pass ------------------------------------------

struct BoundParams {
  Dims dims;
  ad::Var embed, w_hh, w_hx, b_h, w_out, b_out, w_obs;
  ad::Var adapter;  // invalid when D == D_in
};

/// Places `p` on `g`, as trainable leaves or as constants.
BoundParams bind(ad::Graph& g, const PolicyParams& p, bool trainable);
/// Reads the gradients of trainable leaves created by bind().
void accumulate_gradients(const BoundParams& b, Gradients& out);

ad::Var step_core(ad::Var h_prev, ad::Var x, const BoundParams& b);
ad::Var latent_step(ad::Var h_prev, const BoundParams& b);
ad::Var logits(ad::Var h, const BoundParams& b);

struct GraphReplay {
  std::vector<ad::Var> hidden;
};

GraphReplay replay(const BoundParams& b, const Episode& e, const Trajectory& t);

/// log pi(a_t | s_t) with the latent normalizer kept apart from the
/// differentiable part, so it cancels exactly in ratios.
struct UnifiedLogProb {
  ad::Var variable;
  double log_normalizer = 0.0;

  double value() const { return variable.item() + log_normalizer; }
};

UnifiedLogProb unified_logprob(const HybridStep& step, ad::Var h, const BoundParams& b, const vmf::VmfParams& vmf,
                               bool relaxed);

}  // namespace depo
