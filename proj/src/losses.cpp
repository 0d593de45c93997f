#include "depo/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "depo/parallel.hpp"

namespace depo {

namespace {

// Decoder-forced tokens were not chosen by the policy and carry no ratio.
bool step_active(const BatchItem& item, std::size_t i) {
  const auto& step = item.trajectory->steps[i];
  if (step.kind() == StepKind::kToken && step.token().forced) return false;
  return item.active.empty() || item.active[i] != 0;
}

void check_item(const BatchItem& item) {
  if (item.episode == nullptr || item.trajectory == nullptr) throw std::invalid_argument("batch item without data");
  const std::size_t n = item.trajectory->steps.size();
  if (!item.active.empty() && item.active.size() != n) throw std::invalid_argument("batch mask length mismatch");
  if (!item.ref_logprob.empty() && item.ref_logprob.size() != n) {
    throw std::invalid_argument("reference log-prob length mismatch");
  }
}

bool on_clipped_branch(double r, double a, double lo, double hi, double c) {
  if (a >= 0.0) return r > 1.0 + hi;
  return r < 1.0 - lo || r > c;
}

struct Weights {
  double tok_surr = 0.0, lat_surr = 0.0, kl_tok = 0.0, kl_lat = 0.0;
};

Weights objective_weights(Objective obj, const DepoConfig& cfg, std::size_t n_tok, std::size_t n_lat) {
  const double it = n_tok > 0 ? 1.0 / static_cast<double>(n_tok) : 0.0;
  const double il = n_lat > 0 ? 1.0 / static_cast<double>(n_lat) : 0.0;
  switch (obj) {
    case Objective::kTotal:
      return {it, cfg.alpha * il, cfg.beta_tok * it, cfg.beta_lat * il};
    case Objective::kPolicy:
      return {it, cfg.alpha * il, 0.0, 0.0};
    case Objective::kTokenSurrogate:
      return {it, 0.0, 0.0, 0.0};
    case Objective::kLatentSurrogate:
      return {0.0, il, 0.0, 0.0};
    case Objective::kLatentKl:
      return {0.0, 0.0, 0.0, il};
    case Objective::kTokenKl:
      return {0.0, 0.0, it, 0.0};
  }
  return {};
}

struct ItemResult {
  double tok_surr = 0.0, lat_surr = 0.0, kl_tok = 0.0, kl_lat = 0.0;
  double abs_tok = 0.0, abs_lat = 0.0, max_tok = 0.0, max_lat = 0.0;
  std::size_t clip_tok = 0, clip_lat = 0;
  std::vector<double> log_ratio;
  std::optional<Gradients> grad;
};

ItemResult evaluate_item(const BatchItem& item, const PolicyParams& params, const DepoConfig& cfg,
                         const vmf::VmfParams& vp, const Weights& w, bool want_grad) {
  const Trajectory& t = *item.trajectory;
  ad::Graph g;
  const BoundParams b = bind(g, params, want_grad);
  const GraphReplay rep = replay(b, *item.episode, t);
  const double a = item.advantage;

  ItemResult out;
  out.log_ratio.assign(t.steps.size(), 0.0);
  std::vector<ad::Var> terms;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    if (!step_active(item, i)) continue;
    const HybridStep& s = t.steps[i];
    const ad::Var h = rep.hidden[i];
    if (s.kind() == StepKind::kToken) {
      const ad::Var lp = ad::log_softmax_at(logits(h, b), static_cast<std::size_t>(s.token().id));
      const ad::Var log_r = ad::add_scalar(lp, -s.token().old_logprob);
      const ad::Var r = ad::exp(log_r);
      const ad::Var surr = surrogate_clip(r, a, cfg.eps_tok_lo, cfg.eps_tok_hi, cfg.dual_clip_c);
      out.tok_surr += surr.item();
      out.log_ratio[i] = log_r.item();
      out.abs_tok += std::abs(log_r.item());
      out.max_tok = std::max(out.max_tok, std::abs(log_r.item()));
      if (on_clipped_branch(r.item(), a, cfg.eps_tok_lo, cfg.eps_tok_hi, cfg.dual_clip_c)) ++out.clip_tok;
      if (w.tok_surr != 0.0) terms.push_back(w.tok_surr * surr);
      if (!item.ref_logprob.empty()) {
        const ad::Var d = ad::add_scalar(-lp, item.ref_logprob[i]);
        const ad::Var est = ad::add_scalar(ad::exp(d) - d, -1.0);
        out.kl_tok += est.item();
        if (w.kl_tok != 0.0) terms.push_back(w.kl_tok * est);
      }
    } else {
      const auto& z = s.latent().z_tilde;
      ad::Var log_r;
      if (cfg.latent_ratio == LatentRatio::kVmf) {
        log_r = vmf::log_ratio(h, z, vp, cfg.relaxed);
      } else {
        log_r = gaussian_log_ratio(cfg.relaxed ? h : ad::normalize(h), z, cfg.gaussian_sigma);
      }
      const ad::Var r = ad::exp(log_r);
      const ad::Var surr = surrogate_clip(r, a, cfg.eps_lat_lo, cfg.eps_lat_hi, cfg.dual_clip_c);
      const ad::Var kl = vmf::kl(h, z, vp, cfg.relaxed);
      out.lat_surr += surr.item();
      out.kl_lat += kl.item();
      out.log_ratio[i] = log_r.item();
      out.abs_lat += std::abs(log_r.item());
      out.max_lat = std::max(out.max_lat, std::abs(log_r.item()));
      if (on_clipped_branch(r.item(), a, cfg.eps_lat_lo, cfg.eps_lat_hi, cfg.dual_clip_c)) ++out.clip_lat;
      if (w.lat_surr != 0.0) terms.push_back(w.lat_surr * surr);
      if (w.kl_lat != 0.0) terms.push_back(w.kl_lat * kl);
    }
  }
  if (want_grad) {
    out.grad = Gradients::zeros(params.dims);
    if (!terms.empty()) {
      const ad::Var objective = ad::sum(terms);
      if (objective.requires_grad()) {
        g.backward(objective);
        accumulate_gradients(b, *out.grad);
      }
    }
  }
  return out;
}

}  // namespace

void DepoConfig::validate() const {
  auto in_unit = [](double e, const char* name) {
    if (!(e > 0.0 && e < 1.0)) throw std::invalid_argument(std::string(name) + " must lie in (0, 1)");
  };
  in_unit(eps_tok_lo, "eps_tok_lo");
  in_unit(eps_tok_hi, "eps_tok_hi");
  in_unit(eps_lat_lo, "eps_lat_lo");
  in_unit(eps_lat_hi, "eps_lat_hi");
  if (!(dual_clip_c > 1.0 + eps_tok_hi)) throw std::invalid_argument("dual_clip_c must exceed 1 + eps_tok_hi");
  if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
  if (!(beta_tok >= 0.0) || !(beta_lat >= 0.0)) throw std::invalid_argument("beta_tok and beta_lat must be >= 0");
  if (!(kappa > 0.0)) throw std::invalid_argument("kappa must be > 0");
  if (!(gaussian_sigma > 0.0)) throw std::invalid_argument("gaussian_sigma must be > 0");
}

vmf::VmfParams DepoConfig::vmf(int dim) const { return vmf::VmfParams{dim, kappa, kl_weight}; }

double surrogate_clip(double r, double advantage, double eps_lo, double eps_hi, double c) {
  if (!(r > 0.0)) throw std::invalid_argument("surrogate_clip: ratio must be positive, got " + std::to_string(r));
  const double u = std::min(r * advantage, std::clamp(r, 1.0 - eps_lo, 1.0 + eps_hi) * advantage);
  const double objective = advantage >= 0.0 ? u : std::max(u, c * advantage);
  return -objective;
}

ad::Var surrogate_clip(ad::Var r, double advantage, double eps_lo, double eps_hi, double c) {
  if (!(r.item() > 0.0)) {
    throw std::invalid_argument("surrogate_clip: ratio must be positive, got " + std::to_string(r.item()));
  }
  ad::Var u = ad::min(ad::scale(r, advantage), ad::scale(ad::clip(r, 1.0 - eps_lo, 1.0 + eps_hi), advantage));
  if (advantage < 0.0) u = ad::max(u, r.graph()->constant(c * advantage));
  return -u;
}

double gaussian_log_ratio(std::span<const double> h, std::span<const double> h_old, double sigma) {
  if (h.size() != h_old.size()) throw std::invalid_argument("gaussian_log_ratio: size mismatch");
  double d2 = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) d2 += (h[i] - h_old[i]) * (h[i] - h_old[i]);
  return -d2 / (2.0 * sigma * sigma);
}

ad::Var gaussian_log_ratio(ad::Var h, std::span<const double> h_old, double sigma) {
  const ad::Var ref = h.graph()->constant(ad::Tensor::vector({h_old.begin(), h_old.end()}));
  return ad::scale(ad::sqdist(h, ref), -1.0 / (2.0 * sigma * sigma));
}

double token_kl_estimator(double delta) { return std::exp(delta) - delta - 1.0; }

std::size_t PolicyBatch::token_count() const {
  std::size_t n = 0;
  for (const auto& item : items) {
    const auto& steps = item.trajectory->steps;
    for (std::size_t i = 0; i < steps.size(); ++i) n += steps[i].kind() == StepKind::kToken && step_active(item, i);
  }
  return n;
}

std::size_t PolicyBatch::latent_count() const {
  std::size_t n = 0;
  for (const auto& item : items) {
    const auto& steps = item.trajectory->steps;
    for (std::size_t i = 0; i < steps.size(); ++i) n += steps[i].kind() == StepKind::kLatent && step_active(item, i);
  }
  return n;
}

PolicyBatch make_batch(std::span<const RolloutGroup> kept) {
  PolicyBatch batch;
  for (const auto& g : kept) {
    if (g.advantages.size() != g.trajectories.size()) throw std::invalid_argument("make_batch: missing advantages");
    for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
      BatchItem item;
      item.episode = &g.episode;
      item.trajectory = &g.trajectories[i];
      item.advantage = g.advantages[i];
      batch.items.push_back(std::move(item));
    }
  }
  return batch;
}

void attach_reference(PolicyBatch& batch, const PolicyParams& reference) {
  parallel_for(batch.items.size(), [&](std::size_t k) {
    auto& item = batch.items[k];
    item.ref_logprob = replay(reference, *item.episode, *item.trajectory).token_logprob;
  });
}

LossEvaluation evaluate_losses(const PolicyBatch& batch, const PolicyParams& params, const DepoConfig& cfg,
                               Objective objective, bool want_grad) {
  cfg.validate();
  for (const auto& item : batch.items) check_item(item);
  LossEvaluation ev;
  auto& bd = ev.breakdown;
  bd.n_tok = batch.token_count();
  bd.n_lat = batch.latent_count();
  const Weights w = objective_weights(objective, cfg, bd.n_tok, bd.n_lat);
  const vmf::VmfParams vp = cfg.vmf(params.dims.hidden);

  std::vector<ItemResult> results(batch.items.size());
  parallel_for(batch.items.size(),
               [&](std::size_t k) { results[k] = evaluate_item(batch.items[k], params, cfg, vp, w, want_grad); });

  RatioStats& rs = ev.ratios;
  std::size_t clip_tok = 0, clip_lat = 0;
  if (want_grad) ev.grad = Gradients::zeros(params.dims);
  for (auto& r : results) {
    bd.l_tok += r.tok_surr;
    bd.l_lat += r.lat_surr;
    bd.kl_tok += r.kl_tok;
    bd.kl_lat += r.kl_lat;
    rs.mean_abs_log_tok += r.abs_tok;
    rs.mean_abs_log_lat += r.abs_lat;
    rs.max_abs_log_tok = std::max(rs.max_abs_log_tok, r.max_tok);
    rs.max_abs_log_lat = std::max(rs.max_abs_log_lat, r.max_lat);
    clip_tok += r.clip_tok;
    clip_lat += r.clip_lat;
    if (want_grad) ev.grad->axpy(1.0, *r.grad);
    ev.log_ratios.push_back(std::move(r.log_ratio));
  }
  if (bd.n_tok > 0) {
    const auto n = static_cast<double>(bd.n_tok);
    bd.l_tok /= n;
    bd.kl_tok /= n;
    rs.mean_abs_log_tok /= n;
    rs.clip_frac_tok = static_cast<double>(clip_tok) / n;
  }
  if (bd.n_lat > 0) {
    const auto n = static_cast<double>(bd.n_lat);
    bd.l_lat /= n;
    bd.kl_lat /= n;
    rs.mean_abs_log_lat /= n;
    rs.clip_frac_lat = static_cast<double>(clip_lat) / n;
  }
  bd = total_loss(bd, cfg);
  return ev;
}

PolicyLoss depo_policy_loss(const PolicyBatch& batch, const PolicyParams& params, const DepoConfig& cfg) {
  if (batch.token_count() == 0 && batch.latent_count() == 0) {
    throw std::invalid_argument("depo_policy_loss: batch has no text and no latent positions");
  }
  LossEvaluation ev = evaluate_losses(batch, params, cfg, Objective::kPolicy, false);
  return {ev.breakdown.l_tok, ev.breakdown.l_lat, std::move(ev.log_ratios)};
}

double latent_kl_loss(const PolicyBatch& batch, const PolicyParams& params, const DepoConfig& cfg) {
  return evaluate_losses(batch, params, cfg, Objective::kLatentKl, false).breakdown.kl_lat;
}

double token_kl_loss(const PolicyBatch& batch, const PolicyParams& params, const PolicyParams& reference) {
  PolicyBatch with_ref = batch;
  attach_reference(with_ref, reference);
  return evaluate_losses(with_ref, params, DepoConfig{}, Objective::kTokenKl, false).breakdown.kl_tok;
}

LossBreakdown total_loss(LossBreakdown c, const DepoConfig& cfg) {
  c.l_total = c.l_tok + cfg.alpha * c.l_lat + cfg.beta_tok * c.kl_tok + cfg.beta_lat * c.kl_lat;
  return c;
}

SftEvaluation sft_loss(std::span<const Episode> episodes, const PolicyParams& params, double lambda, int k_train,
                       bool want_grad) {
  const Vocab vocab(params.dims);
  const auto dim = static_cast<double>(params.dims.hidden);

  struct Scripted {
    Trajectory t;
    std::vector<char> ce;       // token steps carrying a CE term
    std::vector<int> canvas_k;  // index within the canvas, -1 for tokens
  };
  std::vector<Scripted> scripted(episodes.size());
  std::size_t n_tok = 0, n_canvas = 0;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto script = gold_script(vocab, episodes[e], k_train);
    Scripted& s = scripted[e];
    int k = -1;
    for (std::size_t i = 0; i < script.size(); ++i) {
      HybridStep step{i, TokenAction{}};
      if (script[i] == kLatentSlot) {
        step.action = LatentAction{};
        ++k;
        s.ce.push_back(0);
        s.canvas_k.push_back(k);
        ++n_canvas;
      } else {
        step.action = TokenAction{script[i], 0.0};
        const bool forced_exit = script[i] == vocab.canvas_end();
        if (forced_exit) k = -1;
        s.ce.push_back(forced_exit ? 0 : 1);
        s.canvas_k.push_back(-1);
        n_tok += forced_exit ? 0 : 1;
      }
      s.t.steps.push_back(std::move(step));
    }
    if (lambda != 0.0 && n_canvas > 0 && (!episodes[e].target_latents || episodes[e].target_latents->empty())) {
      throw std::invalid_argument("sft_loss: episode " + std::to_string(episodes[e].episode_id) +
                                  " has canvas positions but no target_latents");
    }
  }

  struct Result {
    double ce = 0.0, canvas = 0.0;
    std::optional<Gradients> grad;
  };
  const double w_ce = n_tok > 0 ? 1.0 / static_cast<double>(n_tok) : 0.0;
  const double w_canvas = n_canvas > 0 ? lambda / (static_cast<double>(n_canvas) * dim) : 0.0;
  std::vector<Result> results(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t e) {
    const Scripted& s = scripted[e];
    ad::Graph g;
    const BoundParams b = bind(g, params, want_grad);
    const GraphReplay rep = replay(b, episodes[e], s.t);
    std::vector<ad::Var> terms;
    Result& r = results[e];
    for (std::size_t i = 0; i < s.t.steps.size(); ++i) {
      const HybridStep& step = s.t.steps[i];
      if (step.kind() == StepKind::kToken) {
        if (!s.ce[i]) continue;
        const ad::Var nll =
            -ad::log_softmax_at(logits(rep.hidden[i], b), static_cast<std::size_t>(step.token().id));
        r.ce += nll.item();
        terms.push_back(w_ce * nll);
      } else if (episodes[e].target_latents && !episodes[e].target_latents->empty()) {
        // Measured even at lambda = 0 so the metric stays comparable.
        const auto& targets = *episodes[e].target_latents;
        const auto& target = targets[std::min(static_cast<std::size_t>(s.canvas_k[i]), targets.size() - 1)];
        if (target.size() != static_cast<std::size_t>(params.dims.hidden)) throw std::invalid_argument("sft_loss: target dimension mismatch");
        const ad::Var sq = ad::sqdist(rep.hidden[i], g.constant(ad::Tensor::vector(target)));
        r.canvas += sq.item() / dim;
        if (w_canvas != 0.0) terms.push_back(w_canvas * sq);
      }
    }
    if (want_grad) {
      r.grad = Gradients::zeros(params.dims);
      if (!terms.empty()) {
        g.backward(ad::sum(terms));
        accumulate_gradients(b, *r.grad);
      }
    }
  });

  SftEvaluation out;
  out.n_tokens = n_tok;
  out.n_canvas = n_canvas;
  if (want_grad) out.grad = Gradients::zeros(params.dims);
  for (auto& r : results) {
    out.ce += r.ce;
    out.canvas += r.canvas;
    if (want_grad) out.grad->axpy(1.0, *r.grad);
  }
  if (n_tok > 0) out.ce /= static_cast<double>(n_tok);
  if (n_canvas > 0) out.canvas /= static_cast<double>(n_canvas);
  out.total = out.ce + lambda * out.canvas;
  return out;
}

}  // namespace depo
