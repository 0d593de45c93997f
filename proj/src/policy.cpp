#include "depo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace depo {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void check_size(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw std::invalid_argument(std::string(what) + ": expected dimension " + std::to_string(want) + ", got " +
                                std::to_string(got));
  }
}

void matvec_add(const ad::Tensor& w, std::span<const double> x, std::span<double> out) {
  const std::size_t cols = w.cols();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double* wr = w.values.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    out[r] += acc;
  }
}

ad::Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = normal(rng);
  if (cols == 0) return ad::Tensor::vector(std::move(v));
  return ad::Tensor::matrix(rows, cols, std::move(v));
}

int sample_token(std::span<const double> logprobs, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    return static_cast<int>(std::max_element(logprobs.begin(), logprobs.end()) - logprobs.begin());
  }
  const double top = *std::max_element(logprobs.begin(), logprobs.end());
  std::vector<double> w(logprobs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp((logprobs[i] - top) / temperature);
    total += w[i];
  }
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  // Rounding left u marginally non-negative: take the last positive weight.
  for (std::size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0.0) return static_cast<int>(i);
  }
  return 0;
}

std::vector<double> latent_action(std::span<const double> h, bool relaxed) {
  if (relaxed) return {h.begin(), h.end()};
  return vmf::normalize(h);
}

void push_token(Trajectory& t, int id, double logprob, bool forced = false) {
  const std::size_t pos = t.steps.size();
  t.steps.push_back({pos, TokenAction{id, logprob, forced}});
  t.text_positions.push_back(pos);
}

void push_latent(Trajectory& t, std::vector<double> z) {
  const std::size_t pos = t.steps.size();
  t.steps.push_back({pos, LatentAction{std::move(z)}});
  t.latent_positions.push_back(pos);
}

}  // namespace

// ---------------------------------------------------------------------------
// PolicyParams

PolicyParams PolicyParams::zeros(const Dims& d) {
  PolicyParams p;
  p.dims = d;
  const std::size_t v = sz(d.vocab());
  p.embed = ad::Tensor::zeros({v, sz(d.input)});
  p.w_hh = ad::Tensor::zeros({sz(d.hidden), sz(d.hidden)});
  p.w_hx = ad::Tensor::zeros({sz(d.hidden), sz(d.input)});
  p.b_h = ad::Tensor::zeros({sz(d.hidden)});
  p.w_out = ad::Tensor::zeros({v, sz(d.hidden)});
  p.b_out = ad::Tensor::zeros({v});
  p.w_obs = ad::Tensor::zeros({sz(d.input), sz(d.obs)});
  return p;
}

PolicyParams PolicyParams::init(const Dims& d, std::uint64_t seed) {
  if (d.content < 1 || d.spare < 0 || d.hidden < 2 || d.input < 1 || d.obs < 1) {
    throw std::invalid_argument("PolicyParams: invalid dimensions");
  }
  Rng rng = make_rng(seed);
  PolicyParams p = zeros(d);
  const std::size_t v = sz(d.vocab());
  p.embed = gaussian(v, sz(d.input), 1.0, rng);
  p.w_hh = gaussian(sz(d.hidden), sz(d.hidden), 1.0 / std::sqrt(d.hidden), rng);
  p.w_hx = gaussian(sz(d.hidden), sz(d.input), 1.0 / std::sqrt(d.input), rng);
  p.w_out = gaussian(v, sz(d.hidden), 1.0 / std::sqrt(d.hidden), rng);
  p.w_obs = gaussian(sz(d.input), sz(d.obs), 1.0, rng);
  return p;
}

std::array<ad::Tensor*, PolicyParams::kNumArrays> PolicyParams::arrays() {
  return {&embed, &w_hh, &w_hx, &b_h, &w_out, &b_out, &w_obs};
}

std::array<const ad::Tensor*, PolicyParams::kNumArrays> PolicyParams::arrays() const {
  return {&embed, &w_hh, &w_hx, &b_h, &w_out, &b_out, &w_obs};
}

std::size_t PolicyParams::total_size() const {
  std::size_t n = 0;
  for (const auto* a : arrays()) n += a->size();
  return n;
}

double PolicyParams::global_norm() const {
  double acc = 0.0;
  for (const auto* a : arrays()) {
    for (double x : a->values) acc += x * x;
  }
  return std::sqrt(acc);
}

bool PolicyParams::all_finite() const {
  for (const auto* a : arrays()) {
    for (double x : a->values) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

void PolicyParams::axpy(double c, const PolicyParams& other) {
  auto mine = arrays();
  auto theirs = other.arrays();
  for (std::size_t k = 0; k < kNumArrays; ++k) {
    if (mine[k]->shape != theirs[k]->shape) throw std::invalid_argument("axpy: parameter layout mismatch");
    for (std::size_t i = 0; i < mine[k]->size(); ++i) mine[k]->values[i] += c * theirs[k]->values[i];
  }
}

std::vector<std::size_t> Trajectory::canvas_lengths() const {
  std::vector<std::size_t> runs;
  std::size_t current = 0;
  for (const auto& s : steps) {
    if (s.kind() == StepKind::kLatent) {
      ++current;
    } else if (current > 0) {
      runs.push_back(current);
      current = 0;
    }
  }
  if (current > 0) runs.push_back(current);
  return runs;
}

// ---------------------------------------------------------------------------
// Plain forward pass

std::vector<double> step_core(std::span<const double> h_prev, std::span<const double> x, const PolicyParams& p) {
  check_size(h_prev.size(), sz(p.dims.hidden), "step_core hidden");
  check_size(x.size(), sz(p.dims.input), "step_core input");
  std::vector<double> pre(p.b_h.values);
  matvec_add(p.w_hh, h_prev, pre);
  matvec_add(p.w_hx, x, pre);
  for (double& v : pre) v = std::tanh(v);
  return pre;
}

std::vector<double> latent_input(std::span<const double> h, const Dims& d) {
  check_size(h.size(), sz(d.hidden), "latent_input");
  std::vector<double> x(sz(d.input));
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = h[i % h.size()];
  return x;
}

std::vector<double> latent_step(std::span<const double> h_prev, const PolicyParams& p) {
  return step_core(h_prev, latent_input(h_prev, p.dims), p);
}

std::vector<double> token_logprobs(std::span<const double> h, const PolicyParams& p) {
  check_size(h.size(), sz(p.dims.hidden), "token_logprobs");
  std::vector<double> z(p.b_out.values);
  matvec_add(p.w_out, h, z);
  const double top = *std::max_element(z.begin(), z.end());
  double acc = 0.0;
  for (double v : z) acc += std::exp(v - top);
  const double lse = top + std::log(acc);
  for (double& v : z) v -= lse;
  return z;
}

std::vector<double> observation_input(std::span<const double> obs, const PolicyParams& p) {
  check_size(obs.size(), sz(p.dims.obs), "observation");
  std::vector<double> x(sz(p.dims.input), 0.0);
  matvec_add(p.w_obs, obs, x);
  return x;
}

std::vector<double> prefill(const PolicyParams& p, const Episode& e) {
  std::vector<double> h(sz(p.dims.hidden), 0.0);
  for (const auto& o : e.observations) h = step_core(h, observation_input(o, p), p);
  for (int tok : e.prompt_tokens) {
    if (tok < 0 || tok >= p.dims.vocab()) throw std::invalid_argument("prompt token out of range");
    h = step_core(h, p.embed.row(sz(tok)), p);
  }
  return h;
}

Trajectory generate_trajectory(const PolicyParams& p, const Episode& e, const DecodeConfig& decode, Rng& rng) {
  const Vocab vocab(p.dims);
  Trajectory t;
  t.episode_id = e.episode_id;
  std::vector<double> h = prefill(p, e);
  const auto max_len = sz(std::max(decode.max_length, 1));

  while (t.steps.size() < max_len) {
    auto lp = token_logprobs(h, p);
    const int tok = sample_token(lp, decode.temperature, rng);
    push_token(t, tok, lp[sz(tok)]);
    h = step_core(h, p.embed.row(sz(tok)), p);
    if (tok == vocab.eos()) break;
    if (tok != vocab.canvas_start()) continue;

    // Canvas mode: latent recursion until the head would emit CANVAS_END,
    // the budget is spent, or only room for the closing token remains.
    for (int k = 0; k < decode.canvas_budget && t.steps.size() + 1 < max_len; ++k) {
      h = latent_step(h, p);
      push_latent(t, latent_action(h, decode.relaxed));
      lp = token_logprobs(h, p);
      if (std::exp(lp[sz(vocab.canvas_end())]) > decode.exit_threshold) break;
    }
    lp = token_logprobs(h, p);
    const double lp_end = lp[sz(vocab.canvas_end())];
    push_token(t, vocab.canvas_end(), lp_end, std::exp(lp_end) <= decode.exit_threshold);
    h = step_core(h, p.embed.row(sz(vocab.canvas_end())), p);
  }
  return t;
}

Trajectory record_trajectory(const PolicyParams& p, const Episode& e, std::span<const int> script, bool relaxed,
                             double exit_threshold) {
  const Vocab vocab(p.dims);
  Trajectory t;
  t.episode_id = e.episode_id;
  std::vector<double> h = prefill(p, e);
  bool in_canvas = false;
  for (int a : script) {
    if (a == kLatentSlot) {
      if (!in_canvas) throw std::invalid_argument("record_trajectory: latent slot outside a canvas segment");
      h = latent_step(h, p);
      push_latent(t, latent_action(h, relaxed));
      continue;
    }
    if (a < 0 || a >= vocab.size()) throw std::invalid_argument("record_trajectory: token out of range");
    if (in_canvas && a != vocab.canvas_end()) {
      throw std::invalid_argument("record_trajectory: only latents or CANVAS_END may follow CANVAS_START");
    }
    const auto lp = token_logprobs(h, p);
    push_token(t, a, lp[sz(a)], in_canvas && std::exp(lp[sz(a)]) <= exit_threshold);
    h = step_core(h, p.embed.row(sz(a)), p);
    if (a == vocab.canvas_start()) in_canvas = true;
    if (a == vocab.canvas_end()) in_canvas = false;
  }
  if (in_canvas) throw std::invalid_argument("record_trajectory: unterminated canvas segment");
  return t;
}

void validate_trajectory(const Trajectory& t, const Vocab& vocab, int canvas_budget) {
  std::vector<std::size_t> z;
  std::vector<std::size_t> s;
  bool in_canvas = false;
  std::size_t run = 0;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const auto& step = t.steps[i];
    if (step.position != i) throw std::logic_error("trajectory: positions are not consecutive");
    if (step.kind() == StepKind::kLatent) {
      if (!in_canvas) throw std::logic_error("trajectory: latent step outside a canvas segment");
      if (++run > sz(std::max(canvas_budget, 0))) throw std::logic_error("trajectory: canvas exceeds budget");
      s.push_back(i);
      continue;
    }
    const int id = step.token().id;
    if (in_canvas) {
      if (id != vocab.canvas_end()) throw std::logic_error("trajectory: token inside a canvas segment");
      in_canvas = false;
    } else if (id == vocab.canvas_start()) {
      in_canvas = true;
      run = 0;
    }
    z.push_back(i);
  }
  if (in_canvas) throw std::logic_error("trajectory: unterminated canvas segment");
  if (z != t.text_positions || s != t.latent_positions) {
    throw std::logic_error("trajectory: Z/S partition does not match step kinds");
  }
}

PlainReplay replay(const PolicyParams& p, const Episode& e, const Trajectory& t) {
  PlainReplay out;
  out.hidden.reserve(t.steps.size());
  out.token_logprob.reserve(t.steps.size());
  std::vector<double> h = prefill(p, e);
  for (const auto& step : t.steps) {
    if (step.kind() == StepKind::kToken) {
      const int id = step.token().id;
      out.hidden.push_back(h);
      out.token_logprob.push_back(token_logprobs(h, p).at(sz(id)));
      h = step_core(h, p.embed.row(sz(id)), p);
    } else {
      h = latent_step(h, p);
      out.hidden.push_back(h);
      out.token_logprob.push_back(0.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable forward pass

BoundParams bind(ad::Graph& g, const PolicyParams& p, bool trainable) {
  auto put = [&](const ad::Tensor& t) { return trainable ? g.variable(t) : g.constant(t); };
  BoundParams b;
  b.dims = p.dims;
  b.embed = put(p.embed);
  b.w_hh = put(p.w_hh);
  b.w_hx = put(p.w_hx);
  b.b_h = put(p.b_h);
  b.w_out = put(p.w_out);
  b.b_out = put(p.b_out);
  b.w_obs = put(p.w_obs);
  if (p.dims.hidden != p.dims.input) {
    auto adapter = ad::Tensor::zeros({sz(p.dims.input), sz(p.dims.hidden)});
    for (std::size_t i = 0; i < sz(p.dims.input); ++i) adapter.at(i, i % sz(p.dims.hidden)) = 1.0;
    b.adapter = g.constant(std::move(adapter));
  }
  return b;
}

void accumulate_gradients(const BoundParams& b, Gradients& out) {
  const std::array<ad::Var, PolicyParams::kNumArrays> vars = {b.embed, b.w_hh, b.w_hx, b.b_h,
                                                               b.w_out, b.b_out, b.w_obs};
  auto dst = out.arrays();
  for (std::size_t k = 0; k < vars.size(); ++k) {
    const auto g = vars[k].grad();
    if (g.empty()) continue;
    for (std::size_t i = 0; i < g.size(); ++i) dst[k]->values[i] += g[i];
  }
}

ad::Var step_core(ad::Var h_prev, ad::Var x, const BoundParams& b) {
  return ad::tanh(ad::matvec(b.w_hh, h_prev) + ad::matvec(b.w_hx, x) + b.b_h);
}

ad::Var latent_step(ad::Var h_prev, const BoundParams& b) {
  const ad::Var x = b.adapter.valid() ? ad::matvec(b.adapter, h_prev) : h_prev;
  return step_core(h_prev, x, b);
}

ad::Var logits(ad::Var h, const BoundParams& b) { return ad::matvec(b.w_out, h) + b.b_out; }

GraphReplay replay(const BoundParams& b, const Episode& e, const Trajectory& t) {
  ad::Graph& g = *b.embed.graph();
  ad::Var h = g.constant(ad::Tensor::zeros({sz(b.dims.hidden)}));
  for (const auto& o : e.observations) {
    check_size(o.size(), sz(b.dims.obs), "observation");
    h = step_core(h, ad::matvec(b.w_obs, g.constant(ad::Tensor::vector(o))), b);
  }
  for (int tok : e.prompt_tokens) h = step_core(h, ad::row(b.embed, sz(tok)), b);

  GraphReplay out;
  out.hidden.reserve(t.steps.size());
  for (const auto& step : t.steps) {
    if (step.kind() == StepKind::kToken) {
      out.hidden.push_back(h);
      h = step_core(h, ad::row(b.embed, sz(step.token().id)), b);
    } else {
      h = latent_step(h, b);
      out.hidden.push_back(h);
    }
  }
  return out;
}

UnifiedLogProb unified_logprob(const HybridStep& step, ad::Var h, const BoundParams& b, const vmf::VmfParams& vmf,
                               bool relaxed) {
  if (step.kind() == StepKind::kToken) {
    return {ad::log_softmax_at(logits(h, b), sz(step.token().id)), 0.0};
  }
  const auto& z = step.latent().z_tilde;
  check_size(z.size(), sz(b.dims.hidden), "latent z~");
  return {vmf.kappa * vmf::score(h, z, relaxed), vmf::log_normalizer(b.dims.hidden, vmf.kappa)};
}

}  // namespace depo
