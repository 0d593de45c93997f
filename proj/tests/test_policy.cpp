#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "depo/policy.hpp"
#include "depo/tasks.hpp"
#include "depo/vmf.hpp"

using namespace depo;

namespace {

const Dims kSmall{4, 1, 5, 4, 3};

std::vector<double> uniform_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * (2.0 * uniform01(rng) - 1.0);
  return v;
}

// tanh(W_hh h + W_hx x + b), written out independently of the library.
std::vector<double> oracle_step(const std::vector<double>& h, const std::vector<double>& x, const PolicyParams& p) {
  const auto d = static_cast<std::size_t>(p.dims.hidden);
  const auto din = static_cast<std::size_t>(p.dims.input);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) {
    double a = p.b_h.values[i];
    for (std::size_t j = 0; j < d; ++j) a += p.w_hh.values[i * d + j] * h[j];
    for (std::size_t j = 0; j < din; ++j) a += p.w_hx.values[i * din + j] * x[j];
    out[i] = std::tanh(a);
  }
  return out;
}

Episode episode(const Dims& d, std::uint64_t id, int pairs = 2) {
  const Task task(LatentRetrievalSpec{pairs}, d, 99);
  Rng rng(1000 + id);
  return task.sample_episode(id, rng);
}

}  // namespace

TEST_CASE("step_core with zero weights is zero") {
  const PolicyParams p = PolicyParams::zeros(kSmall);
  Rng rng(1);
  const auto h = step_core(uniform_vector(5, rng), uniform_vector(4, rng), p);
  for (double v : h) CHECK(v == 0.0);
}

TEST_CASE("step_core output is bounded") {
  const PolicyParams p = PolicyParams::init(Dims{}, 3);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto h = step_core(uniform_vector(32, rng), uniform_vector(32, rng), p);
    for (double v : h) CHECK(std::abs(v) < 1.0);
  }
}

TEST_CASE("step_core golden values") {
  const PolicyParams p = PolicyParams::init(kSmall, 42);
  Rng rng(7);
  const auto h = uniform_vector(5, rng);
  const auto x = uniform_vector(4, rng);
  const auto y = step_core(h, x, p);
  const std::vector<double> golden = {0x1.8554a4db0cc1fp-1, -0x1.5c5db830eca57p-1, 0x1.e1a4c320901c5p-1,
                                      0x1.68939423d5f33p-1, -0x1.db14ec3c27945p-2};
  CHECK(y == golden);
  const auto o = oracle_step(h, x, p);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(o[i]).epsilon(1e-14));
}

TEST_CASE("latent adapter repeats h cyclically") {
  Rng rng(4);
  const auto h = uniform_vector(5, rng);
  const auto x = latent_input(h, Dims{4, 1, 5, 7, 3});
  REQUIRE(x.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) CHECK(x[i] == h[i % 5]);
  const auto same = latent_input(h, Dims{4, 1, 5, 5, 3});
  CHECK(same == h);
  const auto shorter = latent_input(h, kSmall);
  for (std::size_t i = 0; i < 4; ++i) CHECK(shorter[i] == h[i]);
}

TEST_CASE("latent_step") {
  Rng rng(5);
  const Dims square{4, 1, 6, 6, 3};
  const auto h = uniform_vector(6, rng);
  SUBCASE("zero weights give zero") {
    for (double v : latent_step(h, PolicyParams::zeros(square))) CHECK(v == 0.0);
  }
  const PolicyParams p = PolicyParams::init(square, 6);
  SUBCASE("is step_core on the fed-back state") { CHECK(latent_step(h, p) == step_core(h, latent_input(h, square), p)); }
  SUBCASE("is not idempotent") {
    const auto once = latent_step(h, p);
    const auto twice = latent_step(once, p);
    double diff = 0.0;
    for (std::size_t i = 0; i < once.size(); ++i) diff += std::abs(once[i] - twice[i]);
    CHECK(diff > 1e-6);
  }
  SUBCASE("is bounded") {
    auto s = uniform_vector(6, rng);
    for (int i = 0; i < 20; ++i) {
      s = latent_step(s, p);
      for (double v : s) CHECK(std::abs(v) < 1.0);
    }
  }
}

TEST_CASE("token_logprobs") {
  const Dims d{};
  const Vocab vocab(d);
  Rng rng(8);
  const auto h = uniform_vector(32, rng);
  SUBCASE("zero head is uniform") {
    for (double lp : token_logprobs(h, PolicyParams::zeros(d))) {
      CHECK(lp == doctest::Approx(std::log(1.0 / vocab.size())).epsilon(1e-15));
    }
  }
  PolicyParams p = PolicyParams::init(d, 9);
  SUBCASE("normalized") {
    const auto lp = token_logprobs(h, p);
    const double m = *std::max_element(lp.begin(), lp.end());
    double s = 0.0;
    for (double v : lp) s += std::exp(v - m);
    CHECK(std::abs(m + std::log(s)) <= 1e-12);
  }
  SUBCASE("argmax invariant under a uniform logit shift") {
    const auto a = token_logprobs(h, p);
    for (auto& b : p.b_out.values) b += 17.0;
    const auto b = token_logprobs(h, p);
    CHECK(std::max_element(a.begin(), a.end()) - a.begin() == std::max_element(b.begin(), b.end()) - b.begin());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("unified log-probability") {
  const Dims d{};
  const vmf::VmfParams vp{32, 0.5, std::nullopt};
  Rng rng(10);
  const auto hv = uniform_vector(32, rng);
  SUBCASE("latent at its own mode, normalized") {
    const PolicyParams p = PolicyParams::init(d, 11);
    ad::Graph g;
    const BoundParams b = bind(g, p, false);
    const HybridStep step{0, LatentAction{vmf::normalize(hv)}};
    const UnifiedLogProb lp = unified_logprob(step, g.constant(ad::Tensor::vector(hv)), b, vp, false);
    CHECK(lp.value() == doctest::Approx(vmf::log_normalizer(32, 0.5) + 0.5).epsilon(1e-13));
    CHECK(lp.log_normalizer == vmf::log_normalizer(32, 0.5));
  }
  SUBCASE("token under a uniform head") {
    const PolicyParams p = PolicyParams::zeros(d);
    ad::Graph g;
    const BoundParams b = bind(g, p, false);
    const HybridStep step{0, TokenAction{3, 0.0}};
    const UnifiedLogProb lp = unified_logprob(step, g.constant(ad::Tensor::vector(hv)), b, vp, true);
    CHECK(lp.value() == doctest::Approx(std::log(1.0 / Vocab(d).size())).epsilon(1e-15));
  }
}

TEST_CASE("generated trajectories") {
  const Dims d{};
  const Vocab vocab(d);
  const PolicyParams p = PolicyParams::init(d, 12);
  const Episode e = episode(d, 1, 4);
  DecodeConfig decode;
  decode.temperature = 1.0;

  SUBCASE("deterministic per seed") {
    Rng a(13), b(13);
    const Trajectory ta = generate_trajectory(p, e, decode, a);
    const Trajectory tb = generate_trajectory(p, e, decode, b);
    REQUIRE(ta.steps.size() == tb.steps.size());
    for (std::size_t i = 0; i < ta.steps.size(); ++i) {
      REQUIRE(ta.steps[i].kind() == tb.steps[i].kind());
      if (ta.steps[i].kind() == StepKind::kToken) {
        CHECK(ta.steps[i].token().id == tb.steps[i].token().id);
        CHECK(ta.steps[i].token().old_logprob == tb.steps[i].token().old_logprob);
      } else {
        CHECK(ta.steps[i].latent().z_tilde == tb.steps[i].latent().z_tilde);
      }
    }
  }
  SUBCASE("zero canvas budget gives a pure-text trajectory") {
    decode.canvas_budget = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      Rng rng(s);
      const Trajectory t = generate_trajectory(p, e, decode, rng);
      CHECK(t.latent_positions.empty());
      validate_trajectory(t, vocab, 0);
    }
  }
  SUBCASE("recorded log-probs match a teacher-forced replay") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      Rng rng(100 + s);
      const Trajectory t = generate_trajectory(p, e, decode, rng);
      validate_trajectory(t, vocab, decode.canvas_budget);
      CHECK(t.text_positions.size() + t.latent_positions.size() == t.steps.size());

      const PlainReplay plain = replay(p, e, t);
      ad::Graph g;
      const BoundParams b = bind(g, p, false);
      const GraphReplay graph = replay(b, e, t);
      const vmf::VmfParams vp{32, 0.01, std::nullopt};
      for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const auto& step = t.steps[i];
        const auto gh = graph.hidden[i].values();
        for (std::size_t k = 0; k < gh.size(); ++k) CHECK(gh[k] == doctest::Approx(plain.hidden[i][k]).epsilon(1e-14));
        if (step.kind() == StepKind::kToken) {
          const double lp = unified_logprob(step, graph.hidden[i], b, vp, true).value();
          CHECK(std::abs(lp - step.token().old_logprob) <= 1e-10);
          CHECK(std::abs(plain.token_logprob[i] - step.token().old_logprob) <= 1e-10);
        } else {
          // z~ is the mode, so the ratio against the snapshot is exactly 1.
          CHECK(vmf::log_ratio(plain.hidden[i], step.latent().z_tilde, vp, true) == 0.0);
        }
      }
    }
  }
}

TEST_CASE("budget-forced canvas exits are marked") {
  const Dims d{};
  const Vocab vocab(d);
  const PolicyParams p = PolicyParams::init(d, 14);
  const Episode e = episode(d, 2, 4);
  DecodeConfig decode;
  int ends = 0;
  // Indices of CANVAS_END tokens that close a canvas; one sampled outside
  // a canvas is ordinary text.
  auto closing_ends = [&](const Trajectory& t) {
    std::vector<std::size_t> out;
    bool in_canvas = false;
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      const auto& step = t.steps[i];
      if (step.kind() != StepKind::kToken) continue;
      if (in_canvas && step.token().id == vocab.canvas_end()) {
        out.push_back(i);
        in_canvas = false;
      } else if (step.token().id == vocab.canvas_start()) {
        in_canvas = true;
      }
    }
    return out;
  };
  SUBCASE("threshold one: every exit is forced") {
    decode.exit_threshold = 1.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng rng(s);
      const Trajectory t = generate_trajectory(p, e, decode, rng);
      for (std::size_t i : closing_ends(t)) {
        CHECK(t.steps[i].token().forced);
        ++ends;
      }
    }
    CHECK(ends > 0);
  }
  SUBCASE("threshold zero: the head always exits after one latent") {
    decode.exit_threshold = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng rng(s);
      const Trajectory t = generate_trajectory(p, e, decode, rng);
      for (std::size_t i : closing_ends(t)) {
        CHECK_FALSE(t.steps[i].token().forced);
        CHECK(t.steps[i - 1].kind() == StepKind::kLatent);
        CHECK(t.steps[i - 2].kind() == StepKind::kToken);
        ++ends;
      }
      for (const auto& step : t.steps) {
        if (step.kind() == StepKind::kToken) CHECK_FALSE(step.token().forced);
      }
    }
    CHECK(ends > 0);
  }
  SUBCASE("recording applies the same rule") {
    const std::vector<int> script = {vocab.canvas_start(), kLatentSlot, vocab.canvas_end(), vocab.answer(), 0,
                                     vocab.eos()};
    const Trajectory forced = record_trajectory(p, e, script, true, 1.0);
    const Trajectory free = record_trajectory(p, e, script, true, 0.0);
    CHECK(forced.steps[2].token().forced);
    CHECK_FALSE(free.steps[2].token().forced);
    CHECK_FALSE(forced.steps[0].token().forced);
  }
}

TEST_CASE("record_trajectory rejects malformed scripts") {
  const Dims d{};
  const Vocab vocab(d);
  const PolicyParams p = PolicyParams::init(d, 15);
  const Episode e = episode(d, 3);
  const std::vector<int> outside = {kLatentSlot, vocab.eos()};
  const std::vector<int> open = {vocab.canvas_start(), kLatentSlot};
  const std::vector<int> token_inside = {vocab.canvas_start(), 0, vocab.canvas_end()};
  const std::vector<int> out_of_range = {vocab.size()};
  CHECK_THROWS_AS(record_trajectory(p, e, outside, true), std::invalid_argument);
  CHECK_THROWS_AS(record_trajectory(p, e, open, true), std::invalid_argument);
  CHECK_THROWS_AS(record_trajectory(p, e, token_inside, true), std::invalid_argument);
  CHECK_THROWS_AS(record_trajectory(p, e, out_of_range, true), std::invalid_argument);
}

TEST_CASE("parameter containers") {
  const Dims d{};
  const PolicyParams a = PolicyParams::init(d, 16);
  CHECK(a == PolicyParams::init(d, 16));
  CHECK_FALSE(a == PolicyParams::init(d, 17));
  CHECK(a.all_finite());
  const std::size_t v = static_cast<std::size_t>(d.vocab());
  CHECK(a.total_size() == v * 32 + 32 * 32 + 32 * 32 + 32 + v * 32 + v + 32 * 16);

  PolicyParams b = a;
  b.axpy(-1.0, a);
  CHECK(b.global_norm() == 0.0);
  b.axpy(2.0, a);
  CHECK(b.global_norm() == doctest::Approx(2.0 * a.global_norm()).epsilon(1e-14));

  double sq = 0.0;
  for (const auto* t : a.arrays()) {
    for (double x : t->values) sq += x * x;
  }
  CHECK(a.global_norm() == doctest::Approx(std::sqrt(sq)).epsilon(1e-14));
  b.w_hh.values[0] = std::nan("");
  CHECK_FALSE(b.all_finite());
}

TEST_CASE("graph gradients flow into every parameter array") {
  const PolicyParams p = PolicyParams::init(kSmall, 18);
  const Vocab vocab(kSmall);
  const Episode e = episode(kSmall, 4);
  const std::vector<int> script = {vocab.canvas_start(), kLatentSlot, kLatentSlot, vocab.canvas_end(),
                                   vocab.answer(), 1, vocab.eos()};
  const Trajectory t = record_trajectory(p, e, script, true);
  ad::Graph g;
  const BoundParams b = bind(g, p, true);
  const GraphReplay rep = replay(b, e, t);
  std::vector<ad::Var> terms;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    if (t.steps[i].kind() == StepKind::kToken) {
      terms.push_back(ad::log_softmax_at(logits(rep.hidden[i], b), static_cast<std::size_t>(t.steps[i].token().id)));
    }
  }
  g.backward(ad::sum(terms));
  Gradients grad = Gradients::zeros(kSmall);
  accumulate_gradients(b, grad);
  for (std::size_t k = 0; k < PolicyParams::kNumArrays; ++k) {
    CAPTURE(PolicyParams::kNames[k]);
    double n = 0.0;
    for (double x : grad.arrays()[k]->values) n += std::abs(x);
    CHECK(n > 0.0);
  }
}
