#include "depo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "depo/parallel.hpp"
#include "depo/rng.hpp"
#include "depo/rollout.hpp"

namespace depo {

using nlohmann::json;

// --- Optimizer ---------------------------------------------------------------

OptimizerState OptimizerState::create(const Dims& dims, const AdamConfig& config) {
  return OptimizerState{config, 0, Gradients::zeros(dims), Gradients::zeros(dims)};
}

void adam_step(PolicyParams& params, const Gradients& grads, OptimizerState& state) {
  if (!(params.dims == grads.dims) || !(params.dims == state.m.dims) || !(params.dims == state.v.dims)) {
    throw std::invalid_argument("adam_step: dimension mismatch between parameters, gradients and state");
  }
  const auto g_arrays = grads.arrays();
  for (std::size_t k = 0; k < PolicyParams::kNumArrays; ++k) {
    for (double x : g_arrays[k]->values) {
      if (!std::isfinite(x)) {
        throw std::domain_error("adam_step: non-finite gradient in '" + std::string(PolicyParams::kNames[k]) + "'");
      }
    }
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const auto t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  auto p_arrays = params.arrays();
  auto m_arrays = state.m.arrays();
  auto v_arrays = state.v.arrays();
  for (std::size_t k = 0; k < PolicyParams::kNumArrays; ++k) {
    auto& p = p_arrays[k]->values;
    auto& m = m_arrays[k]->values;
    auto& v = v_arrays[k]->values;
    const auto& g = g_arrays[k]->values;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
      p[i] -= c.lr * (update + c.weight_decay * p[i]);
    }
  }
}

// --- Checkpoints -------------------------------------------------------------

namespace {

std::string hex(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", x);
  return buf;
}

double unhex(const json& j) {
  const std::string s = j.get<std::string>();
  char* end = nullptr;
  const double x = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::runtime_error("checkpoint: bad number '" + s + "'");
  return x;
}

json tensor_json(const ad::Tensor& t) {
  json data = json::array();
  for (double x : t.values) data.push_back(hex(x));
  return {{"shape", t.shape}, {"data", data}};
}

ad::Tensor tensor_from(const json& j) {
  ad::Shape shape = j.at("shape").get<ad::Shape>();
  std::vector<double> values;
  for (const auto& x : j.at("data")) values.push_back(unhex(x));
  return ad::Tensor(std::move(shape), std::move(values));
}

json dims_json(const Dims& d) {
  return {{"content", d.content}, {"spare", d.spare}, {"hidden", d.hidden}, {"input", d.input}, {"obs", d.obs}};
}

Dims dims_from(const json& j) {
  return Dims{j.at("content").get<int>(), j.at("spare").get<int>(), j.at("hidden").get<int>(),
              j.at("input").get<int>(), j.at("obs").get<int>()};
}

json params_json(const PolicyParams& p) {
  json out = json::object();
  const auto arrays = p.arrays();
  for (std::size_t k = 0; k < PolicyParams::kNumArrays; ++k) out[std::string(PolicyParams::kNames[k])] = tensor_json(*arrays[k]);
  return out;
}

PolicyParams params_from(const json& j, const Dims& dims) {
  PolicyParams p = PolicyParams::zeros(dims);
  auto arrays = p.arrays();
  for (std::size_t k = 0; k < PolicyParams::kNumArrays; ++k) {
    const std::string name(PolicyParams::kNames[k]);
    ad::Tensor t = tensor_from(j.at(name));
    if (t.shape != arrays[k]->shape) {
      throw std::runtime_error("checkpoint: array '" + name + "' has shape " + ad::shape_string(t.shape) +
                               ", expected " + ad::shape_string(arrays[k]->shape));
    }
    *arrays[k] = std::move(t);
  }
  return p;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  const auto& a = c.optimizer.config;
  json j;
  j["format"] = "depo-checkpoint";
  j["version"] = Checkpoint::kVersion;
  j["stage"] = c.stage == Stage::kSft ? "sft" : "rl";
  j["dims"] = dims_json(c.params.dims);
  j["params"] = params_json(c.params);
  j["reference"] = c.reference ? params_json(*c.reference) : json(nullptr);
  j["optimizer"] = {{"lr", hex(a.lr)},
                    {"beta1", hex(a.beta1)},
                    {"beta2", hex(a.beta2)},
                    {"eps", hex(a.eps)},
                    {"weight_decay", hex(a.weight_decay)},
                    {"step", c.optimizer.step},
                    {"m", params_json(c.optimizer.m)},
                    {"v", params_json(c.optimizer.v)}};
  j["config"] = c.config;
  j["master_seed"] = c.master_seed;
  j["step"] = c.step;
  return j.dump(1) + "\n";
}

Checkpoint parse_checkpoint(const std::string& text, const Dims* expected) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: corrupt container: ") + e.what());
  }
  try {
    if (j.value("format", "") != "depo-checkpoint") throw std::runtime_error("checkpoint: not a checkpoint file");
    const int version = j.at("version").get<int>();
    if (version != Checkpoint::kVersion) {
      throw std::runtime_error("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                               std::to_string(Checkpoint::kVersion) + ")");
    }
    const Dims dims = dims_from(j.at("dims"));
    if (expected != nullptr && !(dims == *expected)) {
      std::ostringstream msg;
      msg << "checkpoint dimension mismatch: file has hidden=" << dims.hidden << " input=" << dims.input
          << " obs=" << dims.obs << " content=" << dims.content << " spare=" << dims.spare
          << ", config has hidden=" << expected->hidden << " input=" << expected->input << " obs=" << expected->obs
          << " content=" << expected->content << " spare=" << expected->spare;
      throw std::invalid_argument(msg.str());
    }
    Checkpoint c;
    const std::string stage = j.at("stage").get<std::string>();
    if (stage != "sft" && stage != "rl") throw std::runtime_error("checkpoint: unknown stage '" + stage + "'");
    c.stage = stage == "sft" ? Stage::kSft : Stage::kRl;
    c.params = params_from(j.at("params"), dims);
    if (!j.at("reference").is_null()) c.reference = params_from(j.at("reference"), dims);
    const auto& o = j.at("optimizer");
    AdamConfig a{unhex(o.at("lr")), unhex(o.at("beta1")), unhex(o.at("beta2")), unhex(o.at("eps")),
                 unhex(o.at("weight_decay"))};
    c.optimizer = OptimizerState{a, o.at("step").get<std::uint64_t>(), params_from(o.at("m"), dims),
                                 params_from(o.at("v"), dims)};
    c.config = j.at("config").get<std::map<std::string, std::string>>();
    c.master_seed = j.at("master_seed").get<std::uint64_t>();
    c.step = j.at("step").get<std::uint64_t>();
    return c;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: corrupt container: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << serialize_checkpoint(ckpt);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const Dims* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), expected);
}

// --- Metrics -----------------------------------------------------------------

double MetricsTable::at(std::size_t row, const std::string& column) const {
  const auto it = std::find(columns.begin(), columns.end(), column);
  if (it == columns.end()) throw std::out_of_range("no metrics column '" + column + "'");
  return rows.at(row).at(static_cast<std::size_t>(it - columns.begin()));
}

std::vector<double> MetricsTable::column(const std::string& name) const {
  std::vector<double> out;
  for (std::size_t r = 0; r < rows.size(); ++r) out.push_back(at(r, name));
  return out;
}

std::string MetricsTable::to_csv() const {
  std::string out;
  for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
  out += '\n';
  char buf[64];
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", row[i]);
      if (i) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void MetricsTable::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_csv();
}

// --- SFT -----------------------------------------------------------------------

SftResult run_sft(const Task& task, const Dims& dims, const SftConfig& cfg, std::uint64_t master_seed,
                  const std::optional<Checkpoint>& resume) {
  if (cfg.epochs < 0 || cfg.episodes_per_epoch < 1 || cfg.batch_size < 1 || cfg.k_train < 1 || cfg.max_steps < 0) {
    throw std::invalid_argument(
        "run_sft: epochs >= 0, episodes_per_epoch >= 1, batch_size >= 1, k_train >= 1, max_steps >= 0 required");
  }
  if (cfg.lambda != 0.0 && !task.has_latent_targets()) {
    throw std::invalid_argument("run_sft: task " + task_name(task.spec()) +
                                " has no latent targets; set sft.lambda = 0");
  }
  if (!(task.dims() == dims)) throw std::invalid_argument("run_sft: task and model dims differ");

  SftResult res;
  Checkpoint& ck = res.checkpoint;
  if (resume) {
    if (resume->stage != Stage::kSft) throw std::invalid_argument("run_sft: can only resume an SFT checkpoint");
    if (!(resume->params.dims == dims)) throw std::invalid_argument("run_sft: resume checkpoint dims differ");
    ck = *resume;
    ck.optimizer.config = cfg.adam;
  } else {
    ck.stage = Stage::kSft;
    ck.params = PolicyParams::init(dims, derive_seed(master_seed, Stream::kInit));
    ck.optimizer = OptimizerState::create(dims, cfg.adam);
    ck.master_seed = master_seed;
  }
  res.metrics.columns = {"step", "epoch", "task_size", "loss", "ce", "canvas", "grad_norm"};

  const auto bs = static_cast<std::uint64_t>(cfg.batch_size);
  const std::uint64_t per_epoch = (static_cast<std::uint64_t>(cfg.episodes_per_epoch) + bs - 1) / bs;
  const std::uint64_t total = per_epoch * static_cast<std::uint64_t>(cfg.epochs);
  const auto full = static_cast<std::uint64_t>(task.size());

  std::uint64_t taken = 0;
  while (ck.step < total && (cfg.max_steps == 0 || taken < static_cast<std::uint64_t>(cfg.max_steps))) {
    const std::uint64_t step = ck.step;
    const std::uint64_t size = cfg.curriculum ? std::min(full, 1 + full * step / total) : full;
    const Task stage = task.resized(static_cast<int>(size));
    std::vector<Episode> batch(bs);
    for (std::uint64_t b = 0; b < bs; ++b) {
      Rng rng = make_rng(derive_seed(ck.master_seed, Stream::kSftData, {step, b}));
      batch[b] = stage.sample_episode(step * bs + b, rng);
    }
    SftEvaluation ev = sft_loss(batch, ck.params, cfg.lambda, cfg.k_train, true);
    const double gnorm = ev.grad->global_norm();
    adam_step(ck.params, *ev.grad, ck.optimizer);
    res.metrics.rows.push_back({static_cast<double>(step), static_cast<double>(step / per_epoch),
                                static_cast<double>(size), ev.total, ev.ce, ev.canvas, gnorm});
    ++ck.step;
    ++taken;
  }
  return res;
}

// --- RL ------------------------------------------------------------------------

RlResult run_rl(const Checkpoint& start, const Task& task, const RlConfig& cfg) {
  if (cfg.steps < 0 || cfg.groups_per_step < 1 || cfg.group_size < 2 || cfg.ppo_epochs < 1) {
    throw std::invalid_argument("run_rl: steps >= 0, groups_per_step >= 1, group_size >= 2, ppo_epochs >= 1 required");
  }
  cfg.depo.validate();
  if (!(task.dims() == start.params.dims)) throw std::invalid_argument("run_rl: task and checkpoint dims differ");

  RlResult res;
  Checkpoint& ck = res.checkpoint;
  ck = start;
  if (start.stage == Stage::kSft) {
    ck.stage = Stage::kRl;
    ck.reference = start.params;
    ck.optimizer = OptimizerState::create(start.params.dims, cfg.adam);
    ck.step = 0;
  } else {
    if (!start.reference) throw std::invalid_argument("run_rl: RL checkpoint without a reference policy");
    ck.optimizer.config = cfg.adam;
  }
  const PolicyParams& reference = *ck.reference;
  res.metrics.columns = {"step",
                         "skipped",
                         "reward_mean",
                         "accuracy",
                         "format_rate",
                         "discard_rate",
                         "kept_groups",
                         "l_tok",
                         "l_lat",
                         "kl_tok",
                         "kl_lat",
                         "l_total",
                         "mean_abs_log_r_tok",
                         "max_abs_log_r_tok",
                         "mean_abs_log_r_lat",
                         "max_abs_log_r_lat",
                         "clip_frac_tok",
                         "clip_frac_lat",
                         "grad_norm"};

  const auto n_groups = static_cast<std::size_t>(cfg.groups_per_step);
  DecodeConfig decode = cfg.decode;
  decode.relaxed = cfg.depo.relaxed;
  for (int s = 0; s < cfg.steps; ++s) {
    const std::uint64_t step = ck.step;
    const PolicyParams snapshot = ck.params;
    std::vector<RolloutGroup> groups(n_groups);
    parallel_for(n_groups, [&](std::size_t g) {
      Rng rng = make_rng(derive_seed(ck.master_seed, Stream::kRlEpisode, {step, g}));
      const Episode ep = task.sample_episode(step * n_groups + g, rng);
      groups[g] = collect_group(snapshot, ep, cfg.group_size, decode, cfg.w_fmt,
                                derive_seed(ck.master_seed, Stream::kRlRollout, {step, g}));
    });

    double reward = 0.0, acc = 0.0, fmt = 0.0, count = 0.0;
    for (const auto& g : groups) {
      for (const auto& t : g.trajectories) {
        reward += t.reward.total;
        acc += t.reward.accuracy;
        fmt += t.reward.format_ok;
        count += 1.0;
      }
    }
    std::vector<RolloutGroup> kept = filter_groups(groups, cfg.filter_lo, cfg.filter_hi);
    const double discard = 1.0 - static_cast<double>(kept.size()) / static_cast<double>(n_groups);
    std::vector<double> row = {static_cast<double>(step), kept.empty() ? 1.0 : 0.0, reward / count, acc / count,
                               fmt / count, discard, static_cast<double>(kept.size())};

    if (kept.empty()) {
      row.resize(res.metrics.columns.size(), 0.0);
    } else {
      for (auto& g : kept) g.advantages = group_advantages(g.rewards, cfg.advantage_eps);
      PolicyBatch batch = make_batch(kept);
      attach_reference(batch, reference);
      LossEvaluation ev;
      for (int e = 0; e < cfg.ppo_epochs; ++e) {
        ev = evaluate_losses(batch, ck.params, cfg.depo, Objective::kTotal, true);
        adam_step(ck.params, *ev.grad, ck.optimizer);
      }
      // Statistics of the last update, the one furthest from the snapshot.
      const auto& b = ev.breakdown;
      const auto& r = ev.ratios;
      row.insert(row.end(), {b.l_tok, b.l_lat, b.kl_tok, b.kl_lat, b.l_total, r.mean_abs_log_tok, r.max_abs_log_tok,
                             r.mean_abs_log_lat, r.max_abs_log_lat, r.clip_frac_tok, r.clip_frac_lat,
                             ev.grad->global_norm()});
    }
    res.metrics.rows.push_back(std::move(row));
    ++ck.step;
  }
  return res;
}

// --- Evaluation ------------------------------------------------------------------

EvalSummary evaluate_policy(const PolicyParams& params, const Task& task, std::size_t episodes, int k_test,
                            std::uint64_t seed, const DecodeConfig& decode, double w_fmt) {
  if (k_test < 0) throw std::invalid_argument("evaluate_policy: k_test must be >= 0");
  DecodeConfig d = decode;
  d.temperature = 0.0;
  d.canvas_budget = k_test;
  const Vocab vocab(params.dims);
  struct One {
    int acc = 0, fmt = 0;
    double canvas = 0.0;
  };
  std::vector<One> out(episodes);
  parallel_for(episodes, [&](std::size_t i) {
    Rng rng = make_rng(derive_seed(seed, Stream::kEval, {i}));
    const Episode ep = task.sample_episode(i, rng);
    Rng decode_rng = make_rng(derive_seed(seed, Stream::kEval, {i, 1}));
    const Trajectory t = generate_trajectory(params, ep, d, decode_rng);
    const RewardRecord r = score(ep, t, vocab, w_fmt);
    out[i] = {r.accuracy, r.format_ok, static_cast<double>(t.latent_positions.size())};
  });
  EvalSummary s;
  s.episodes = episodes;
  if (episodes == 0) return s;
  for (const auto& o : out) {
    s.accuracy += o.acc;
    s.format_rate += o.fmt;
    s.mean_canvas_length += o.canvas;
  }
  const auto n = static_cast<double>(episodes);
  s.accuracy /= n;
  s.format_rate /= n;
  s.mean_canvas_length /= n;
  return s;
}

}  // namespace depo
