#include "depo/tasks.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace depo {

namespace {

std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  for (;;) {
    double len2 = 0.0;
    for (double& x : v) {
      x = normal(rng);
      len2 += x * x;
    }
    if (len2 > 1e-12) {
      const double len = std::sqrt(len2);
      for (double& x : v) x /= len;
      return v;
    }
  }
}

}  // namespace

TaskSpec make_task_spec(const std::string& name, int size) {
  if (name == "latent_retrieval") return LatentRetrievalSpec{size};
  if (name == "parity_memory") return ParityMemorySpec{size};
  throw std::invalid_argument("unknown task '" + name + "' (expected latent_retrieval or parity_memory)");
}

std::string task_name(const TaskSpec& spec) {
  return std::holds_alternative<LatentRetrievalSpec>(spec) ? "latent_retrieval" : "parity_memory";
}

Task::Task(TaskSpec spec, const Dims& dims, std::uint64_t task_seed) : spec_(spec), dims_(dims) {
  if (const auto* lr = std::get_if<LatentRetrievalSpec>(&spec_)) {
    if (lr->pairs < 1) throw std::invalid_argument("latent_retrieval: need at least one pair");
    if (lr->pairs > dims.content) {
      throw std::invalid_argument("latent_retrieval: " + std::to_string(lr->pairs) +
                                  " pairs exceed the content vocabulary (" + std::to_string(dims.content) + ")");
    }
  } else {
    const auto& pm = std::get<ParityMemorySpec>(spec_);
    if (pm.bits < 1) throw std::invalid_argument("parity_memory: need at least one bit");
    if (dims.content < 2) throw std::invalid_argument("parity_memory: needs two content tokens");
  }
  Rng rng = make_rng(derive_seed(task_seed, Stream::kTask));
  for (int v = 0; v < dims.content; ++v) codebook_.push_back(random_unit(static_cast<std::size_t>(dims.obs), rng));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> r(static_cast<std::size_t>(dims.hidden * dims.obs));
  for (double& x : r) x = normal(rng);
  target_map_ = ad::Tensor::matrix(static_cast<std::size_t>(dims.hidden), static_cast<std::size_t>(dims.obs), r);
}

int Task::size() const {
  if (const auto* lr = std::get_if<LatentRetrievalSpec>(&spec_)) return lr->pairs;
  return std::get<ParityMemorySpec>(spec_).bits;
}

Task Task::resized(int size) const {
  if (size < 1) throw std::invalid_argument("task size must be >= 1");
  if (std::holds_alternative<LatentRetrievalSpec>(spec_) && size > dims_.content) {
    throw std::invalid_argument("latent_retrieval: " + std::to_string(size) + " pairs exceed the content vocabulary");
  }
  Task t = *this;
  if (auto* lr = std::get_if<LatentRetrievalSpec>(&t.spec_)) {
    lr->pairs = size;
  } else {
    std::get<ParityMemorySpec>(t.spec_).bits = size;
  }
  return t;
}

std::vector<double> Task::target_latent(int v) const {
  const auto& e = value_embedding(v);
  std::vector<double> out(target_map_.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < e.size(); ++j) acc += target_map_.at(i, j) * e[j];
    out[i] = std::tanh(acc);
  }
  return out;
}

Episode Task::sample_episode(std::uint64_t episode_id, Rng& rng) const {
  Episode ep;
  ep.episode_id = episode_id;
  ep.task_id = task_name(spec_);
  if (const auto* lr = std::get_if<LatentRetrievalSpec>(&spec_)) {
    std::vector<int> pool(static_cast<std::size_t>(dims_.content));
    std::iota(pool.begin(), pool.end(), 0);
    // Partial Fisher-Yates: the first `pairs` entries become the bound values.
    for (int i = 0; i < lr->pairs; ++i) {
      std::uniform_int_distribution<int> pick(i, dims_.content - 1);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
    }
    std::vector<std::vector<double>> keys;
    for (int i = 0; i < lr->pairs; ++i) {
      keys.push_back(random_unit(static_cast<std::size_t>(dims_.obs), rng));
      ep.observations.push_back(keys.back());
      ep.observations.push_back(value_embedding(pool[static_cast<std::size_t>(i)]));
    }
    std::uniform_int_distribution<int> query(0, lr->pairs - 1);
    const auto q = static_cast<std::size_t>(query(rng));
    ep.observations.push_back(keys[q]);
    ep.gold_answer = pool[q];
    ep.target_latents = std::vector<std::vector<double>>{target_latent(ep.gold_answer)};
  } else {
    const auto& pm = std::get<ParityMemorySpec>(spec_);
    int parity = 0;
    for (int i = 0; i < pm.bits; ++i) {
      const int bit = static_cast<int>(rng() >> 63);
      parity ^= bit;
      ep.prompt_tokens.push_back(bit);
    }
    ep.gold_answer = parity;
  }
  return ep;
}

std::vector<int> Task::gold_script(const Episode& e, int k_train) const {
  return depo::gold_script(Vocab(dims_), e, k_train);
}

std::vector<int> gold_script(const Vocab& vocab, const Episode& e, int k_train) {
  if (k_train < 1) throw std::invalid_argument("gold_script: k_train must be >= 1");
  std::vector<int> script{vocab.canvas_start()};
  for (int k = 0; k < k_train; ++k) script.push_back(kLatentSlot);
  script.push_back(vocab.canvas_end());
  script.push_back(vocab.answer());
  script.push_back(e.gold_answer);
  script.push_back(vocab.eos());
  return script;
}

bool well_formed(const Trajectory& t, const Vocab& vocab) {
  const auto& s = t.steps;
  auto token_at = [&](std::size_t i) { return s[i].kind() == StepKind::kToken ? s[i].token().id : -1; };
  bool seen_canvas = false;
  std::size_t i = 0;
  while (i < s.size()) {
    const int id = token_at(i);
    if (id == vocab.answer()) break;
    if (id < 0 || id == vocab.canvas_end() || id == vocab.eos()) return false;
    if (id == vocab.canvas_start()) {
      std::size_t j = i + 1;
      while (j < s.size() && s[j].kind() == StepKind::kLatent) ++j;
      if (j == i + 1 || j >= s.size() || token_at(j) != vocab.canvas_end()) return false;
      seen_canvas = true;
      i = j + 1;
      continue;
    }
    ++i;
  }
  return seen_canvas && i + 3 == s.size() && token_at(i) == vocab.answer() && vocab.is_content(token_at(i + 1)) &&
         token_at(i + 2) == vocab.eos();
}

RewardRecord score(const Episode& e, const Trajectory& t, const Vocab& vocab, double w_fmt) {
  RewardRecord r;
  for (std::size_t i = 0; i + 1 < t.steps.size(); ++i) {
    const auto& s = t.steps[i];
    if (s.kind() == StepKind::kToken && s.token().id == vocab.answer()) {
      const auto& next = t.steps[i + 1];
      r.accuracy = next.kind() == StepKind::kToken && next.token().id == e.gold_answer ? 1 : 0;
      break;
    }
  }
  r.format_ok = well_formed(t, vocab) ? 1 : 0;
  r.total = r.accuracy + w_fmt * r.format_ok;
  return r;
}

}  // namespace depo
