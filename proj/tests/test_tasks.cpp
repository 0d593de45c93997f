#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "depo/tasks.hpp"

using namespace depo;

namespace {

const Dims kDims{};

Trajectory scripted(const Episode& e, const std::vector<int>& script) {
  return record_trajectory(PolicyParams::zeros(kDims), e, script, true);
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("task specs") {
  CHECK(std::holds_alternative<LatentRetrievalSpec>(make_task_spec("latent_retrieval", 4)));
  CHECK(std::get<ParityMemorySpec>(make_task_spec("parity_memory", 8)).bits == 8);
  CHECK(task_name(make_task_spec("parity_memory", 3)) == "parity_memory");
  CHECK_THROWS_AS(make_task_spec("sorting", 4), std::invalid_argument);
  CHECK_THROWS_AS(Task(LatentRetrievalSpec{17}, kDims, 1), std::invalid_argument);
  CHECK_THROWS_AS(Task(LatentRetrievalSpec{0}, kDims, 1), std::invalid_argument);
  CHECK_THROWS_AS(Task(ParityMemorySpec{0}, kDims, 1), std::invalid_argument);
}

TEST_CASE("latent retrieval episodes") {
  const Task task(LatentRetrievalSpec{4}, kDims, 1234);
  CHECK(task.has_latent_targets());
  CHECK(task.size() == 4);
  for (std::uint64_t id = 0; id < 200; ++id) {
    Rng rng(id);
    const Episode e = task.sample_episode(id, rng);
    REQUIRE(e.observations.size() == 9);
    CHECK(e.prompt_tokens.empty());
    CHECK(e.episode_id == id);
    // The query repeats exactly one key; the gold answer is the value bound to it.
    int hits = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      if (e.observations[2 * i] == e.observations[8]) {
        ++hits;
        CHECK(e.observations[2 * i + 1] == task.value_embedding(e.gold_answer));
      }
    }
    CHECK(hits == 1);
    // Bound values are distinct content tokens.
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = i + 1; j < 4; ++j) CHECK(e.observations[2 * i + 1] != e.observations[2 * j + 1]);
    }
    REQUIRE(e.target_latents.has_value());
    CHECK(e.target_latents->front() == task.target_latent(e.gold_answer));
  }
}

TEST_CASE("a single pair degenerates to copying") {
  const Task task(LatentRetrievalSpec{1}, kDims, 5);
  for (std::uint64_t id = 0; id < 50; ++id) {
    Rng rng(id);
    const Episode e = task.sample_episode(id, rng);
    CHECK(e.observations[1] == task.value_embedding(e.gold_answer));
  }
}

TEST_CASE("codebook and targets are fixed by the task seed") {
  const Task a(LatentRetrievalSpec{4}, kDims, 77), b(LatentRetrievalSpec{4}, kDims, 77), c(LatentRetrievalSpec{4}, kDims, 78);
  for (int v = 0; v < kDims.content; ++v) {
    CHECK(a.value_embedding(v) == b.value_embedding(v));
    CHECK(a.target_latent(v) == b.target_latent(v));
    CHECK(a.value_embedding(v) != c.value_embedding(v));
    double n = 0.0;
    for (double x : a.value_embedding(v)) n += x * x;
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
    const auto t = a.target_latent(v);
    CHECK(t.size() == static_cast<std::size_t>(kDims.hidden));
    for (double x : t) CHECK(std::abs(x) < 1.0);
    for (int w = v + 1; w < kDims.content; ++w) CHECK(dist(a.value_embedding(v), a.value_embedding(w)) > 1e-3);
  }
  const Task small = a.resized(2);
  CHECK(small.size() == 2);
  CHECK(small.value_embedding(3) == a.value_embedding(3));
  CHECK(small.target_latent(3) == a.target_latent(3));
  CHECK_THROWS_AS(a.resized(kDims.content + 1), std::invalid_argument);
}

TEST_CASE("parity memory episodes") {
  SUBCASE("one bit: the answer is the bit") {
    const Task task(ParityMemorySpec{1}, kDims, 1);
    for (std::uint64_t id = 0; id < 50; ++id) {
      Rng rng(id);
      const Episode e = task.sample_episode(id, rng);
      REQUIRE(e.prompt_tokens.size() == 1);
      CHECK(e.gold_answer == e.prompt_tokens[0]);
    }
  }
  SUBCASE("answer is the parity and parity 0 is about half") {
    const Task task(ParityMemorySpec{8}, kDims, 1);
    CHECK_FALSE(task.has_latent_targets());
    Rng rng(9);
    int zeros = 0;
    for (std::uint64_t id = 0; id < 10000; ++id) {
      const Episode e = task.sample_episode(id, rng);
      int parity = 0;
      for (int b : e.prompt_tokens) {
        CHECK((b == 0 || b == 1));
        parity ^= b;
      }
      CHECK(e.gold_answer == parity);
      zeros += parity == 0;
    }
    CHECK(zeros / 10000.0 >= 0.47);
    CHECK(zeros / 10000.0 <= 0.53);
  }
}

TEST_CASE("episodes are reproducible from their rng") {
  const Task task(LatentRetrievalSpec{4}, kDims, 3);
  Rng a(41), b(41);
  const Episode x = task.sample_episode(7, a), y = task.sample_episode(7, b);
  CHECK(x.observations == y.observations);
  CHECK(x.gold_answer == y.gold_answer);
}

TEST_CASE("gold script layout") {
  const Vocab v(kDims);
  Episode e;
  e.gold_answer = 5;
  const std::vector<int> expected = {v.canvas_start(), kLatentSlot, kLatentSlot, kLatentSlot, v.canvas_end(),
                                     v.answer(), 5, v.eos()};
  CHECK(gold_script(v, e, 3) == expected);
  CHECK_THROWS_AS(gold_script(v, e, 0), std::invalid_argument);
}

TEST_CASE("scoring") {
  const Vocab v(kDims);
  const Task task(LatentRetrievalSpec{4}, kDims, 1234);
  Rng rng(1);
  const Episode e = task.sample_episode(0, rng);
  const int gold = e.gold_answer;
  const int wrong = (gold + 1) % kDims.content;
  const int cs = v.canvas_start(), ce = v.canvas_end(), ans = v.answer(), eos = v.eos();

  SUBCASE("well-formed and correct") {
    const RewardRecord r = score(e, scripted(e, {cs, kLatentSlot, ce, ans, gold, eos}), v, 0.1);
    CHECK(r.accuracy == 1);
    CHECK(r.format_ok == 1);
    CHECK(r.total == doctest::Approx(1.1));
  }
  SUBCASE("text before and between canvases is allowed") {
    const RewardRecord r = score(e, scripted(e, {3, cs, kLatentSlot, ce, 4, cs, kLatentSlot, ce, ans, gold, eos}), v, 0.1);
    CHECK(r.format_ok == 1);
  }
  SUBCASE("well-formed but wrong") {
    const RewardRecord r = score(e, scripted(e, {cs, kLatentSlot, ce, ans, wrong, eos}), v, 0.1);
    CHECK(r.accuracy == 0);
    CHECK(r.total == doctest::Approx(0.1));
  }
  SUBCASE("no canvas segment") {
    const RewardRecord r = score(e, scripted(e, {ans, gold, eos}), v, 0.1);
    CHECK(r.format_ok == 0);
    CHECK(r.accuracy == 1);
    CHECK(r.total == doctest::Approx(1.0));
  }
  SUBCASE("empty canvas, missing EOS, trailing text, control answer") {
    CHECK(score(e, scripted(e, {cs, ce, ans, gold, eos}), v, 0.1).format_ok == 0);
    CHECK(score(e, scripted(e, {cs, kLatentSlot, ce, ans, gold}), v, 0.1).format_ok == 0);
    CHECK(score(e, scripted(e, {cs, kLatentSlot, ce, ans, gold, eos, 3}), v, 0.1).format_ok == 0);
    CHECK(score(e, scripted(e, {cs, kLatentSlot, ce, ans, eos, eos}), v, 0.1).format_ok == 0);
    CHECK(score(e, scripted(e, {cs, kLatentSlot, ce, ans, gold, eos}), v, 0.0).total == 1.0);
  }
  SUBCASE("only the first answer counts") {
    CHECK(score(e, scripted(e, {ans, wrong, ans, gold, eos}), v, 0.1).accuracy == 0);
    CHECK(score(e, scripted(e, {cs, kLatentSlot, ce}), v, 0.1).accuracy == 0);
  }
}
