#include "depo/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "depo/parallel.hpp"
#include "depo/rng.hpp"
#include "depo/vmf.hpp"

namespace depo::diag {

namespace {

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

const char* kind_name(StepKind k) { return k == StepKind::kToken ? "token" : "latent"; }

/// Unit direction over the concatenated parameter vector.
PolicyParams random_direction(const Dims& dims, Rng& rng) {
  PolicyParams u = PolicyParams::zeros(dims);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto* a : u.arrays()) {
    for (double& x : a->values) x = normal(rng);
  }
  const double len = u.global_norm();
  for (auto* a : u.arrays()) {
    for (double& x : a->values) x /= len;
  }
  return u;
}

struct Accum {
  double sum = 0.0, sum2 = 0.0, max_abs_log = 0.0, trial_max_sum = 0.0;
  std::size_t n = 0;
};

}  // namespace

// --- Ratio mismatch ---------------------------------------------------------------

std::vector<RatioSweepRow> RatioSweepResult::series(StepKind kind) const {
  std::vector<RatioSweepRow> out;
  for (const auto& r : rows) {
    if (r.kind == kind) out.push_back(r);
  }
  return out;
}

std::string RatioSweepResult::to_csv() const {
  std::string out = "magnitude,kind,mean_r,std_r,max_abs_log_r,mean_trial_max_abs_log_r,count\n";
  for (const auto& r : rows) {
    out += fmt(r.magnitude) + "," + kind_name(r.kind) + "," + fmt(r.mean_r) + "," + fmt(r.std_r) + "," +
           fmt(r.max_abs_log_r) + "," + fmt(r.mean_trial_max_abs_log_r) + "," + std::to_string(r.count) + "\n";
  }
  return out;
}

RatioSweepResult ratio_mismatch_experiment(const PolicyParams& snapshot, const Task& task,
                                           const RatioSweepConfig& cfg, std::uint64_t seed) {
  if (cfg.trials < 1 || cfg.episodes < 1 || cfg.k_train < 1) {
    throw std::invalid_argument("ratio sweep: trials, episodes and k_train must be positive");
  }
  for (std::size_t i = 0; i < cfg.magnitudes.size(); ++i) {
    const double m = cfg.magnitudes[i];
    if (!(m >= 0.0 && m <= 0.5)) throw std::invalid_argument("ratio sweep: magnitudes must lie in [0, 0.5]");
    if (i > 0 && !(m > cfg.magnitudes[i - 1])) throw std::invalid_argument("ratio sweep: magnitudes must increase");
  }
  const Vocab vocab(snapshot.dims);
  std::vector<Episode> episodes;
  std::vector<Trajectory> rollouts;
  for (int i = 0; i < cfg.episodes; ++i) {
    Rng rng = make_rng(derive_seed(seed, Stream::kRatioSweep, {0, static_cast<std::uint64_t>(i)}));
    episodes.push_back(task.sample_episode(static_cast<std::uint64_t>(i), rng));
  }
  for (const auto& e : episodes) {
    rollouts.push_back(record_trajectory(snapshot, e, gold_script(vocab, e, cfg.k_train), cfg.relaxed));
  }
  const vmf::VmfParams vp{snapshot.dims.hidden, cfg.kappa, std::nullopt};
  const double scale = snapshot.global_norm();

  const std::size_t n_m = cfg.magnitudes.size();
  const auto n_t = static_cast<std::size_t>(cfg.trials);
  // Per (magnitude, trial, kind) accumulators, reduced in index order below.
  std::vector<std::array<Accum, 2>> cells(n_m * n_t);
  parallel_for(n_t, [&](std::size_t trial) {
    Rng rng = make_rng(derive_seed(seed, Stream::kRatioSweep, {1, trial}));
    const PolicyParams u = random_direction(snapshot.dims, rng);
    for (std::size_t mi = 0; mi < n_m; ++mi) {
      PolicyParams theta = snapshot;
      theta.axpy(cfg.magnitudes[mi] * scale, u);
      auto& cell = cells[mi * n_t + trial];
      for (std::size_t e = 0; e < episodes.size(); ++e) {
        const PlainReplay rep = replay(theta, episodes[e], rollouts[e]);
        const auto& steps = rollouts[e].steps;
        for (std::size_t i = 0; i < steps.size(); ++i) {
          double log_r = 0.0;
          int k = 0;
          if (steps[i].kind() == StepKind::kToken) {
            if (steps[i].token().forced) continue;
            log_r = rep.token_logprob[i] - steps[i].token().old_logprob;
          } else {
            log_r = vmf::log_ratio(rep.hidden[i], steps[i].latent().z_tilde, vp, cfg.relaxed);
            k = 1;
          }
          const double r = std::exp(log_r);
          Accum& a = cell[static_cast<std::size_t>(k)];
          a.sum += r;
          a.sum2 += r * r;
          a.max_abs_log = std::max(a.max_abs_log, std::abs(log_r));
          ++a.n;
        }
      }
    }
  });

  RatioSweepResult res;
  for (std::size_t mi = 0; mi < n_m; ++mi) {
    for (int k = 0; k < 2; ++k) {
      Accum total;
      for (std::size_t t = 0; t < n_t; ++t) {
        const Accum& a = cells[mi * n_t + t][static_cast<std::size_t>(k)];
        total.sum += a.sum;
        total.sum2 += a.sum2;
        total.n += a.n;
        total.max_abs_log = std::max(total.max_abs_log, a.max_abs_log);
        total.trial_max_sum += a.max_abs_log;
      }
      RatioSweepRow row;
      row.magnitude = cfg.magnitudes[mi];
      row.kind = k == 0 ? StepKind::kToken : StepKind::kLatent;
      row.count = total.n;
      if (total.n > 0) {
        const auto n = static_cast<double>(total.n);
        row.mean_r = total.sum / n;
        row.std_r = std::sqrt(std::max(0.0, total.sum2 / n - row.mean_r * row.mean_r));
      }
      row.max_abs_log_r = total.max_abs_log;
      row.mean_trial_max_abs_log_r = total.trial_max_sum / static_cast<double>(n_t);
      res.rows.push_back(row);
    }
  }
  return res;
}

// --- vMF KL verification -------------------------------------------------------------

std::vector<KlCase> random_kl_cases(std::uint64_t seed, std::size_t count) {
  std::vector<KlCase> out;
  if (count == 0) return out;
  out.push_back({8, 1.0, 0.0});
  Rng rng = make_rng(derive_seed(seed, Stream::kVmfVerify, {0}));
  std::uniform_int_distribution<int> dim(2, 32);
  std::uniform_real_distribution<double> log_kappa(std::log(0.05), std::log(20.0));
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  while (out.size() < count) {
    const int d = dim(rng);
    const double k = std::exp(log_kappa(rng));
    out.push_back({d, k, angle(rng)});
  }
  return out;
}

std::vector<KlCheck> verify_vmf_kl(const std::vector<KlCase>& cases, std::size_t n, std::uint64_t seed) {
  if (n < 1000) throw std::invalid_argument("verify_vmf_kl: need at least 1000 samples");
  std::vector<KlCheck> out(cases.size());
  parallel_for(cases.size(), [&](std::size_t i) {
    const KlCase& c = cases[i];
    Rng rng = make_rng(derive_seed(seed, Stream::kVmfVerify, {1, i}));
    // Two unit vectors at the requested angle in a random plane.
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> a(static_cast<std::size_t>(c.dim)), b(a.size());
    for (double& x : a) x = normal(rng);
    for (double& x : b) x = normal(rng);
    a = vmf::normalize(a);
    double proj = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) proj += a[j] * b[j];
    for (std::size_t j = 0; j < a.size(); ++j) b[j] -= proj * a[j];
    b = vmf::normalize(b);
    std::vector<double> mu_old(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) mu_old[j] = std::cos(c.angle) * a[j] + std::sin(c.angle) * b[j];
    const vmf::VmfParams vp{c.dim, c.kappa, std::nullopt};
    KlCheck& k = out[i];
    k.config = c;
    k.closed_form = vmf::kl(a, mu_old, vp, /*relaxed=*/false);
    const vmf::McEstimate mc = vmf::mc_kl_estimate(a, mu_old, c.kappa, n, rng);
    k.monte_carlo = mc.estimate;
    k.std_error = mc.std_error;
    k.pass = std::abs(k.closed_form - k.monte_carlo) <= 3.0 * k.std_error;
  });
  return out;
}

std::string kl_csv(const std::vector<KlCheck>& checks) {
  std::string out = "dim,kappa,angle,closed_form,monte_carlo,std_error,pass\n";
  for (const auto& c : checks) {
    out += std::to_string(c.config.dim) + "," + fmt(c.config.kappa) + "," + fmt(c.config.angle) + "," +
           fmt(c.closed_form) + "," + fmt(c.monte_carlo) + "," + fmt(c.std_error) + "," + (c.pass ? "1" : "0") + "\n";
  }
  return out;
}

// --- Gradient checks ---------------------------------------------------------------------

GradcheckResult gradcheck(const std::string& op, PolicyParams params,
                          const std::function<double(const PolicyParams&, Gradients*)>& f, double h, double rel_tol,
                          double abs_floor) {
  Gradients analytic = Gradients::zeros(params.dims);
  f(params, &analytic);
  GradcheckResult res;
  res.op = op;
  res.pass = true;
  // The reported entry is the worst failure if any, else the largest
  // relative error among entries that clear the absolute floor.
  double worst_excess = 0.0;
  bool failed = false;
  auto p_arrays = params.arrays();
  const auto g_arrays = std::as_const(analytic).arrays();
  for (std::size_t k = 0; k < PolicyParams::kNumArrays; ++k) {
    auto& values = p_arrays[k]->values;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f(params, nullptr);
      values[i] = saved - h;
      const double down = f(params, nullptr);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = g_arrays[k]->values[i];
      const double diff = std::abs(a - numeric);
      const double mag = std::max(std::abs(a), std::abs(numeric));
      const double rel = mag > 0.0 ? diff / mag : 0.0;
      const double excess = diff - std::max(rel_tol * mag, abs_floor);
      ++res.compared;
      bool report = false;
      if (excess > 0.0) {
        report = !failed || excess > worst_excess;
        if (report) worst_excess = excess;
        failed = true;
      } else if (!failed && mag > abs_floor) {
        report = rel >= res.max_rel_error;
      }
      if (mag > abs_floor) res.max_rel_error = std::max(res.max_rel_error, rel);
      if (report) {
        res.param = std::string(PolicyParams::kNames[k]);
        res.index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  res.pass = !failed;
  return res;
}

namespace {

double objective_value(const LossBreakdown& b, Objective obj, const DepoConfig& cfg) {
  switch (obj) {
    case Objective::kTotal:
      return b.l_total;
    case Objective::kPolicy:
      return b.l_tok + cfg.alpha * b.l_lat;
    case Objective::kTokenSurrogate:
      return b.l_tok;
    case Objective::kLatentSurrogate:
      return b.l_lat;
    case Objective::kLatentKl:
      return b.kl_lat;
    case Objective::kTokenKl:
      return b.kl_tok;
  }
  return 0.0;
}

/// Excludes positions within `margin` of a nondifferentiable point of the
/// surrogate (clip edges, and the dual-clip floor for negative advantages).
void mask_kinks(PolicyBatch& batch, const PolicyParams& params, const DepoConfig& cfg, double margin) {
  const LossEvaluation ev = evaluate_losses(batch, params, cfg, Objective::kTotal, false);
  for (std::size_t k = 0; k < batch.items.size(); ++k) {
    auto& item = batch.items[k];
    const auto& steps = item.trajectory->steps;
    item.active.assign(steps.size(), 1);
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const bool tok = steps[i].kind() == StepKind::kToken;
      const double lo = 1.0 - (tok ? cfg.eps_tok_lo : cfg.eps_lat_lo);
      const double hi = 1.0 + (tok ? cfg.eps_tok_hi : cfg.eps_lat_hi);
      const double r = std::exp(ev.log_ratios[k][i]);
      bool near = std::abs(r - lo) < margin || std::abs(r - hi) < margin;
      if (item.advantage < 0.0) near = near || std::abs(r - cfg.dual_clip_c) < margin;
      if (near) item.active[i] = 0;
    }
  }
}

}  // namespace

std::vector<GradcheckResult> gradcheck_all(std::uint64_t seed) {
  const Dims dims{4, 1, 5, 4, 3};
  const Task task(LatentRetrievalSpec{2}, dims, derive_seed(seed, Stream::kGradcheck, {0}));
  const Vocab vocab(dims);
  const PolicyParams old = PolicyParams::init(dims, derive_seed(seed, Stream::kGradcheck, {1}));

  std::vector<Episode> episodes;
  for (std::uint64_t i = 0; i < 2; ++i) {
    Rng rng = make_rng(derive_seed(seed, Stream::kGradcheck, {2, i}));
    episodes.push_back(task.sample_episode(i, rng));
  }

  // Current and reference parameters: small isotropic moves from the
  // snapshot, so ratios sit away from 1 and the token KL is nonzero.
  auto perturbed = [&](std::uint64_t key, double m) {
    Rng rng = make_rng(derive_seed(seed, Stream::kGradcheck, {3, key}));
    PolicyParams p = old;
    p.axpy(m * old.global_norm(), random_direction(dims, rng));
    return p;
  };
  const PolicyParams theta = perturbed(0, 0.05);
  const PolicyParams reference = perturbed(1, 0.05);

  std::vector<GradcheckResult> out;
  {
    const std::vector<Episode> one{episodes[0]};
    out.push_back(gradcheck("sft_loss", theta, [&](const PolicyParams& p, Gradients* g) {
      SftEvaluation ev = sft_loss(one, p, 1.0, 3, g != nullptr);
      if (g) *g = *ev.grad;
      return ev.total;
    }));
  }

  struct Variant {
    const char* suffix;
    bool relaxed;
    LatentRatio ratio;
  };
  for (const Variant v : {Variant{"", true, LatentRatio::kVmf}, Variant{"[normalized]", false, LatentRatio::kVmf},
                          Variant{"[gaussian]", true, LatentRatio::kGaussian}}) {
    DepoConfig cfg;
    cfg.relaxed = v.relaxed;
    cfg.latent_ratio = v.ratio;
    cfg.kappa = 1.0;
    cfg.gaussian_sigma = 1.0;
    cfg.beta_tok = 0.1;
    cfg.beta_lat = 0.1;

    // Two trajectories with text and latent positions, recorded under the
    // snapshot: the gold script, and a longer script with two canvases.
    const std::vector<int> scripts[2] = {
        gold_script(vocab, episodes[0], 3),
        {vocab.canvas_start(), kLatentSlot, kLatentSlot, vocab.canvas_end(), 1, vocab.canvas_start(), kLatentSlot,
         vocab.canvas_end(), vocab.answer(), 2, vocab.eos()}};
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 2; ++i) trajs.push_back(record_trajectory(old, episodes[static_cast<std::size_t>(i)], scripts[i], v.relaxed));
    PolicyBatch batch;
    const double advantages[2] = {1.3, -0.9};
    for (std::size_t i = 0; i < 2; ++i) batch.items.push_back({&episodes[i], &trajs[i], advantages[i], {}, {}});
    attach_reference(batch, reference);
    mask_kinks(batch, theta, cfg, 1e-3);

    struct Target {
      const char* name;
      Objective objective;
    };
    for (const Target t : {Target{"depo_policy_loss", Objective::kPolicy},
                           Target{"latent_kl_loss", Objective::kLatentKl},
                           Target{"token_kl_loss", Objective::kTokenKl},
                           Target{"total_loss", Objective::kTotal}}) {
      if (v.ratio == LatentRatio::kGaussian && t.objective != Objective::kPolicy && t.objective != Objective::kTotal) {
        continue;  // identical to the vMF variant
      }
      out.push_back(gradcheck(std::string(t.name) + v.suffix, theta, [&](const PolicyParams& p, Gradients* g) {
        LossEvaluation ev = evaluate_losses(batch, p, cfg, t.objective, g != nullptr);
        if (g) *g = *ev.grad;
        return objective_value(ev.breakdown, t.objective, cfg);
      }));
    }
  }
  return out;
}

// --- Canvas budget sweep ---------------------------------------------------------------------

std::vector<KtestRow> ktest_sweep(const std::vector<NamedCheckpoint>& checkpoints, const Task& task,
                                  const std::vector<int>& k_values, std::size_t episodes, std::uint64_t seed,
                                  const DecodeConfig& decode) {
  if (std::find(k_values.begin(), k_values.end(), 0) == k_values.end()) {
    throw std::invalid_argument("ktest_sweep: K values must include 0");
  }
  std::vector<KtestRow> rows;
  for (const auto& c : checkpoints) {
    for (int k : k_values) {
      rows.push_back({c.name, k, evaluate_policy(c.params, task, episodes, k, derive_seed(seed, Stream::kKtest), decode)});
    }
  }
  return rows;
}

std::string ktest_csv(const std::vector<KtestRow>& rows) {
  std::string out = "checkpoint,k,episodes,accuracy,format_rate,mean_canvas_length\n";
  for (const auto& r : rows) {
    out += r.checkpoint + "," + std::to_string(r.k) + "," + std::to_string(r.summary.episodes) + "," +
           fmt(r.summary.accuracy) + "," + fmt(r.summary.format_rate) + "," + fmt(r.summary.mean_canvas_length) + "\n";
  }
  return out;
}

}  // namespace depo::diag
