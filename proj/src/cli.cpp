#include "depo/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "depo/diagnostics.hpp"
#include "depo/parallel.hpp"
#include "depo/rng.hpp"

namespace depo::cli {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::optional<double> parse_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (errno != 0 || *end != '\0') return std::nullopt;
  return v;
}

std::optional<long long> parse_int(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || *end != '\0') return std::nullopt;
  return v;
}

std::optional<std::uint64_t> parse_u64(const std::string& s) {
  if (s.empty() || s[0] == '-') return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (errno != 0 || *end != '\0') return std::nullopt;
  return v;
}

std::optional<bool> parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  return std::nullopt;
}

std::optional<std::vector<double>> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto v = parse_real(trim(item));
    if (!v) return std::nullopt;
    out.push_back(*v);
  }
  if (out.empty()) return std::nullopt;
  return out;
}

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace

// --- RunConfig ---------------------------------------------------------------

void RunConfig::add(std::string key, Kind kind, std::string value, std::string note) {
  entries_.push_back({std::move(key), std::move(value), std::move(note)});
  kinds_.push_back(kind);
}

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.add("seed", Kind::kU64, "1", "master seed; every random stream derives from it");
  c.add("out_dir", Kind::kString, "runs/depo", "output directory (DEPO_OUT_DIR and --out override)");
  c.add("threads", Kind::kInt, "0", "worker threads, 0 = hardware concurrency; results do not depend on it");

  c.add("dims.content", Kind::kInt, "16", "content tokens (desk scale)");
  c.add("dims.spare", Kind::kInt, "4", "spare never-supervised tokens (desk scale)");
  c.add("dims.hidden", Kind::kInt, "32", "hidden size D (desk scale)");
  c.add("dims.input", Kind::kInt, "32", "input size D_in (desk scale)");
  c.add("dims.obs", Kind::kInt, "16", "observation feature size (desk scale)");

  c.add("task.name", Kind::kTaskName, "latent_retrieval", "latent_retrieval | parity_memory");
  c.add("task.size", Kind::kInt, "4", "pair count M or bit count n");
  c.add("task.seed", Kind::kU64, "1234", "fixes the task codebook; shared by all runs on one task");

  c.add("adam.beta1", Kind::kReal, "0.9", "AdamW");
  c.add("adam.beta2", Kind::kReal, "0.999", "AdamW");
  c.add("adam.eps", Kind::kReal, "1e-8", "AdamW");
  c.add("adam.weight_decay", Kind::kReal, "0.01", "AdamW decoupled decay");

  c.add("sft.epochs", Kind::kInt, "16", "desk scale");
  c.add("sft.episodes_per_epoch", Kind::kInt, "32768", "fresh gold episodes per epoch");
  c.add("sft.batch_size", Kind::kInt, "16", "desk scale");
  c.add("sft.max_steps", Kind::kInt, "0", "cap on steps per invocation, 0 = none");
  c.add("sft.lambda", Kind::kReal, "1.0", "canvas MSE weight");
  c.add("sft.k_train", Kind::kInt, "8", "latent steps in gold trajectories (reference setting)");
  c.add("sft.curriculum", Kind::kBool, "true", "ramp pair count from 1 to task.size");
  c.add("sft.lr", Kind::kReal, "3e-3", "desk scale");

  c.add("rl.steps", Kind::kInt, "500", "desk scale");
  c.add("rl.groups", Kind::kInt, "16", "prompts per step (desk scale)");
  c.add("rl.group_size", Kind::kInt, "8", "rollouts per prompt G (reference setting)");
  c.add("rl.ppo_epochs", Kind::kInt, "2", "updates per collected batch");
  c.add("rl.filter_lo", Kind::kReal, "0.1", "keep groups with mean accuracy in [lo, hi]");
  c.add("rl.filter_hi", Kind::kReal, "0.9", "keep groups with mean accuracy in [lo, hi]");
  c.add("rl.w_fmt", Kind::kReal, "0.1", "format reward weight");
  c.add("rl.advantage_eps", Kind::kReal, "1e-6", "advantage std floor");
  c.add("rl.lr", Kind::kReal, "1e-4", "desk scale");

  c.add("depo.eps_tok_lo", Kind::kReal, "0.2", "token clip, lower (reference setting)");
  c.add("depo.eps_tok_hi", Kind::kReal, "0.28", "token clip, upper (reference setting)");
  c.add("depo.eps_lat_lo", Kind::kReal, "0.05", "latent clip, lower (reference setting)");
  c.add("depo.eps_lat_hi", Kind::kReal, "0.05", "latent clip, upper (reference setting)");
  c.add("depo.alpha", Kind::kReal, "0.5", "latent surrogate weight (reference setting)");
  c.add("depo.beta_tok", Kind::kReal, "0.01", "token KL weight");
  c.add("depo.beta_lat", Kind::kReal, "0.005", "latent KL weight");
  c.add("depo.dual_clip_c", Kind::kReal, "3.0", "dual-clip floor for negative advantages");
  c.add("depo.relaxed", Kind::kBool, "true", "score raw hidden states instead of their directions");
  c.add("depo.kappa", Kind::kReal, "0.01", "vMF concentration (reference setting)");
  c.add("depo.kl_weight", Kind::kKlWeight, "auto", "latent KL scale; auto = kappa * A_D(kappa)");
  c.add("depo.latent_ratio", Kind::kRatio, "vmf", "vmf | gaussian");
  c.add("depo.gaussian_sigma", Kind::kReal, "10.0", "sigma of the Gaussian latent ratio");

  c.add("decode.temperature", Kind::kReal, "0.9", "rollout temperature");
  c.add("decode.max_length", Kind::kInt, "64", "trajectory length cap");
  c.add("decode.canvas_budget", Kind::kInt, "8", "latent steps before CANVAS_END is forced in rollouts");
  c.add("decode.exit_threshold", Kind::kReal, "0.5", "CANVAS_END probability that ends a canvas");

  c.add("eval.episodes", Kind::kInt, "1000", "greedy evaluation episodes");
  c.add("eval.k_test", Kind::kInt, "8", "canvas budget at evaluation");

  c.add("ratio.magnitudes", Kind::kList, "0.005,0.01,0.02,0.05,0.1", "relative perturbation sizes");
  c.add("ratio.trials", Kind::kInt, "16", "directions per magnitude");
  c.add("ratio.episodes", Kind::kInt, "32", "replayed trajectories");
  c.add("ratio.kappa", Kind::kReal, "1.0", "latent scoring concentration for the sweep");
  c.add("ratio.relaxed", Kind::kBool, "true", "relaxed latent scoring");

  c.add("vmf.samples", Kind::kInt, "1000000", "Monte-Carlo samples per KL case");
  c.add("vmf.cases", Kind::kInt, "20", "randomized KL cases");

  c.add("ktest.values", Kind::kList, "0,1,2,4,8,16,32", "canvas budgets; must contain 0");
  c.add("ktest.episodes", Kind::kInt, "1000", "episodes per grid point");
  return c;
}

std::size_t RunConfig::index_of(const std::string& key) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].key == key) return i;
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::size_t i = index_of(key);
  const std::string value = trim(raw);
  bool ok = true;
  switch (kinds_[i]) {
    case Kind::kString: ok = !value.empty(); break;
    case Kind::kReal: ok = parse_real(value).has_value(); break;
    case Kind::kInt: ok = parse_int(value).has_value(); break;
    case Kind::kU64: ok = parse_u64(value).has_value(); break;
    case Kind::kBool: ok = parse_bool(value).has_value(); break;
    case Kind::kList: ok = parse_list(value).has_value(); break;
    case Kind::kKlWeight: ok = value == "auto" || parse_real(value).has_value(); break;
    case Kind::kRatio: ok = value == "vmf" || value == "gaussian"; break;
    case Kind::kTaskName: ok = value == "latent_retrieval" || value == "parity_memory"; break;
  }
  if (!ok) throw std::invalid_argument("bad value '" + value + "' for config key '" + key + "'");
  entries_[i].value = value;
}

void RunConfig::assign(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::merge_text(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      assign(line);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    merge_text(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

const std::string& RunConfig::get(const std::string& key) const { return entries_[index_of(key)].value; }
double RunConfig::number(const std::string& key) const { return *parse_real(get(key)); }
long long RunConfig::integer(const std::string& key) const { return *parse_int(get(key)); }
std::uint64_t RunConfig::u64(const std::string& key) const { return *parse_u64(get(key)); }
bool RunConfig::flag(const std::string& key) const { return *parse_bool(get(key)); }
std::vector<double> RunConfig::numbers(const std::string& key) const { return *parse_list(get(key)); }

std::map<std::string, std::string> RunConfig::as_map() const {
  std::map<std::string, std::string> m;
  for (const auto& e : entries_) m[e.key] = e.value;
  return m;
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& e : entries_) s += e.key + " = " + e.value + "  # " + e.note + "\n";
  return s;
}

Dims RunConfig::dims() const {
  Dims d;
  d.content = static_cast<int>(integer("dims.content"));
  d.spare = static_cast<int>(integer("dims.spare"));
  d.hidden = static_cast<int>(integer("dims.hidden"));
  d.input = static_cast<int>(integer("dims.input"));
  d.obs = static_cast<int>(integer("dims.obs"));
  return d;
}

Task RunConfig::task() const {
  return Task(make_task_spec(get("task.name"), static_cast<int>(integer("task.size"))), dims(), u64("task.seed"));
}

namespace {

AdamConfig adam_from(const RunConfig& c, double lr) {
  AdamConfig a;
  a.lr = lr;
  a.beta1 = c.number("adam.beta1");
  a.beta2 = c.number("adam.beta2");
  a.eps = c.number("adam.eps");
  a.weight_decay = c.number("adam.weight_decay");
  return a;
}

int to_int(long long v, const char* key) {
  if (v < -2147483647LL || v > 2147483647LL) throw std::invalid_argument(std::string(key) + " out of range");
  return static_cast<int>(v);
}

}  // namespace

SftConfig RunConfig::sft() const {
  SftConfig s;
  s.epochs = to_int(integer("sft.epochs"), "sft.epochs");
  s.episodes_per_epoch = to_int(integer("sft.episodes_per_epoch"), "sft.episodes_per_epoch");
  s.batch_size = to_int(integer("sft.batch_size"), "sft.batch_size");
  s.max_steps = to_int(integer("sft.max_steps"), "sft.max_steps");
  s.lambda = number("sft.lambda");
  s.k_train = to_int(integer("sft.k_train"), "sft.k_train");
  s.curriculum = flag("sft.curriculum");
  s.adam = adam_from(*this, number("sft.lr"));
  return s;
}

DepoConfig RunConfig::depo() const {
  DepoConfig d;
  d.eps_tok_lo = number("depo.eps_tok_lo");
  d.eps_tok_hi = number("depo.eps_tok_hi");
  d.eps_lat_lo = number("depo.eps_lat_lo");
  d.eps_lat_hi = number("depo.eps_lat_hi");
  d.alpha = number("depo.alpha");
  d.beta_tok = number("depo.beta_tok");
  d.beta_lat = number("depo.beta_lat");
  d.dual_clip_c = number("depo.dual_clip_c");
  d.relaxed = flag("depo.relaxed");
  d.kappa = number("depo.kappa");
  if (get("depo.kl_weight") != "auto") d.kl_weight = number("depo.kl_weight");
  d.latent_ratio = get("depo.latent_ratio") == "gaussian" ? LatentRatio::kGaussian : LatentRatio::kVmf;
  d.gaussian_sigma = number("depo.gaussian_sigma");
  d.validate();
  return d;
}

DecodeConfig RunConfig::decode() const {
  DecodeConfig d;
  d.temperature = number("decode.temperature");
  d.max_length = to_int(integer("decode.max_length"), "decode.max_length");
  d.canvas_budget = to_int(integer("decode.canvas_budget"), "decode.canvas_budget");
  d.exit_threshold = number("decode.exit_threshold");
  d.relaxed = flag("depo.relaxed");
  return d;
}

RlConfig RunConfig::rl() const {
  RlConfig r;
  r.steps = to_int(integer("rl.steps"), "rl.steps");
  r.groups_per_step = to_int(integer("rl.groups"), "rl.groups");
  r.group_size = to_int(integer("rl.group_size"), "rl.group_size");
  r.ppo_epochs = to_int(integer("rl.ppo_epochs"), "rl.ppo_epochs");
  r.filter_lo = number("rl.filter_lo");
  r.filter_hi = number("rl.filter_hi");
  r.w_fmt = number("rl.w_fmt");
  r.advantage_eps = number("rl.advantage_eps");
  r.decode = decode();
  r.depo = depo();
  r.adam = adam_from(*this, number("rl.lr"));
  return r;
}

// --- Subcommands ---------------------------------------------------------------

namespace {

struct Invocation {
  std::string command;
  RunConfig config;
  std::vector<std::string> checkpoints;
  std::filesystem::path out_dir;
};

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json summary_json(const EvalSummary& s) {
  return {{"episodes", s.episodes},
          {"accuracy", s.accuracy},
          {"format_rate", s.format_rate},
          {"mean_canvas_length", s.mean_canvas_length}};
}

EvalSummary run_eval(const Invocation& inv, const PolicyParams& params, const Task& task) {
  const RunConfig& c = inv.config;
  DecodeConfig decode = c.decode();
  return evaluate_policy(params, task, static_cast<std::size_t>(c.integer("eval.episodes")),
                         to_int(c.integer("eval.k_test"), "eval.k_test"), c.u64("seed"), decode, c.number("rl.w_fmt"));
}

// Where and on how many threads a run executes does not change its
// results, so those keys stay out of the checkpoint.
std::map<std::string, std::string> run_snapshot(const RunConfig& c) {
  auto m = c.as_map();
  m.erase("out_dir");
  m.erase("threads");
  return m;
}

Checkpoint load_one(const Invocation& inv, const Dims& dims) {
  return load_checkpoint(inv.checkpoints.front(), &dims);
}

int cmd_sft(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  const Dims dims = c.dims();
  const Task task = c.task();
  std::optional<Checkpoint> resume;
  if (!inv.checkpoints.empty()) resume = load_one(inv, dims);
  SftResult r = run_sft(task, dims, c.sft(), c.u64("seed"), resume);
  r.checkpoint.config = run_snapshot(c);
  save_checkpoint(r.checkpoint, inv.out_dir / "checkpoint.json");
  r.metrics.write_csv(inv.out_dir / "metrics.csv");
  const EvalSummary s = run_eval(inv, r.checkpoint.params, task);
  nlohmann::json j = {{"stage", "sft"},
                      {"steps", r.checkpoint.step},
                      {"k_test", c.integer("eval.k_test")},
                      {"eval", summary_json(s)}};
  if (!r.metrics.rows.empty()) j["final_loss"] = r.metrics.rows.back()[3];
  write_file(inv.out_dir / "summary.json", j.dump(2) + "\n");
  out << "sft: " << r.checkpoint.step << " steps, eval accuracy " << s.accuracy << "\n";
  return 0;
}

int cmd_rl(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  const Dims dims = c.dims();
  const Task task = c.task();
  Checkpoint start = load_one(inv, dims);
  // A fresh RL stage takes its streams from --seed; a resumed one keeps the
  // stored seed so the continuation matches an uninterrupted run.
  if (start.stage == Stage::kSft) start.master_seed = c.u64("seed");
  RlResult r = run_rl(start, task, c.rl());
  r.checkpoint.config = run_snapshot(c);
  save_checkpoint(r.checkpoint, inv.out_dir / "checkpoint.json");
  r.metrics.write_csv(inv.out_dir / "metrics.csv");
  const EvalSummary s = run_eval(inv, r.checkpoint.params, task);
  const nlohmann::json j = {{"stage", "rl"},
                            {"steps", r.checkpoint.step},
                            {"k_test", c.integer("eval.k_test")},
                            {"eval", summary_json(s)}};
  write_file(inv.out_dir / "summary.json", j.dump(2) + "\n");
  out << "rl: " << r.checkpoint.step << " steps, eval accuracy " << s.accuracy << "\n";
  return 0;
}

int cmd_eval(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  const Task task = c.task();
  const Checkpoint ck = load_one(inv, c.dims());
  const EvalSummary s = run_eval(inv, ck.params, task);
  nlohmann::json j = summary_json(s);
  j["task"] = task_name(task.spec());
  j["k_test"] = c.integer("eval.k_test");
  j["seed"] = c.u64("seed");
  write_file(inv.out_dir / "summary.json", j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  return 0;
}

int cmd_diag_ratio(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  const Dims dims = c.dims();
  const Task task = c.task();
  const PolicyParams snapshot = inv.checkpoints.empty()
                                    ? PolicyParams::init(dims, derive_seed(c.u64("seed"), Stream::kInit))
                                    : load_one(inv, dims).params;
  diag::RatioSweepConfig rc;
  rc.magnitudes = c.numbers("ratio.magnitudes");
  rc.trials = to_int(c.integer("ratio.trials"), "ratio.trials");
  rc.episodes = to_int(c.integer("ratio.episodes"), "ratio.episodes");
  rc.k_train = to_int(c.integer("sft.k_train"), "sft.k_train");
  rc.kappa = c.number("ratio.kappa");
  rc.relaxed = c.flag("ratio.relaxed");
  const diag::RatioSweepResult r = diag::ratio_mismatch_experiment(snapshot, task, rc, c.u64("seed"));
  write_file(inv.out_dir / "ratio_sweep.csv", r.to_csv());
  out << r.to_csv();
  return 0;
}

int cmd_verify_vmf(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  const std::uint64_t seed = c.u64("seed");
  const auto cases = diag::random_kl_cases(seed, static_cast<std::size_t>(c.integer("vmf.cases")));
  const auto checks = diag::verify_vmf_kl(cases, static_cast<std::size_t>(c.integer("vmf.samples")), seed);
  write_file(inv.out_dir / "kl_verify.csv", diag::kl_csv(checks));
  const auto passed = std::count_if(checks.begin(), checks.end(), [](const diag::KlCheck& k) { return k.pass; });
  for (const auto& k : checks) {
    char line[256];
    std::snprintf(line, sizeof line, "%s D=%d kappa=%.6g angle=%.6g closed=%.8g mc=%.8g se=%.3g\n",
                  k.pass ? "PASS" : "FAIL", k.config.dim, k.config.kappa, k.config.angle, k.closed_form,
                  k.monte_carlo, k.std_error);
    out << line;
  }
  out << passed << "/" << checks.size() << " PASS\n";
  return passed == static_cast<long>(checks.size()) ? 0 : 1;
}

int cmd_gradcheck(const Invocation& inv, std::ostream& out) {
  const auto results = diag::gradcheck_all(inv.config.u64("seed"));
  bool all = true;
  std::string csv = "op,pass,max_rel_error,compared,param,index,analytic,numeric\n";
  for (const auto& r : results) {
    all = all && r.pass;
    char line[512];
    std::snprintf(line, sizeof line, "%s %s max_rel=%.3g compared=%zu worst=%s[%zu] analytic=%.12g numeric=%.12g\n",
                  r.pass ? "PASS" : "FAIL", r.op.c_str(), r.max_rel_error, r.compared, r.param.c_str(), r.index,
                  r.analytic, r.numeric);
    out << line;
    std::snprintf(line, sizeof line, "%s,%d,%.17g,%zu,%s,%zu,%.17g,%.17g\n", r.op.c_str(), r.pass ? 1 : 0,
                  r.max_rel_error, r.compared, r.param.c_str(), r.index, r.analytic, r.numeric);
    csv += line;
  }
  write_file(inv.out_dir / "gradcheck.csv", csv);
  return all ? 0 : 1;
}

int cmd_ktest(const Invocation& inv, std::ostream& out) {
  const RunConfig& c = inv.config;
  const Dims dims = c.dims();
  std::vector<diag::NamedCheckpoint> cks;
  for (const auto& path : inv.checkpoints) {
    cks.push_back({path, load_checkpoint(path, &dims).params});
  }
  std::vector<int> ks;
  for (double k : c.numbers("ktest.values")) {
    if (k != static_cast<double>(static_cast<int>(k)) || k < 0) throw std::invalid_argument("ktest.values: bad K");
    ks.push_back(static_cast<int>(k));
  }
  const auto rows = diag::ktest_sweep(cks, c.task(), ks, static_cast<std::size_t>(c.integer("ktest.episodes")),
                                      c.u64("seed"), c.decode());
  write_file(inv.out_dir / "ktest_sweep.csv", diag::ktest_csv(rows));
  out << diag::ktest_csv(rows);
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Decoupled policy optimization for hybrid latent reasoning at desk scale"};
  app.require_subcommand(1);

  struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> checkpoints;
    std::string task;
    std::optional<int> k_test;
    std::optional<long long> samples;
    std::vector<std::string> sets;
  } f;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"sft", "supervised warm-up on gold trajectories"},
      {"rl", "reinforcement learning from an SFT or RL checkpoint"},
      {"eval", "greedy evaluation of a checkpoint"},
      {"diag-ratio", "importance-ratio sweep under parameter perturbation"},
      {"verify-vmf", "closed-form vs Monte-Carlo vMF KL"},
      {"gradcheck", "finite-difference checks of every loss"},
      {"ktest", "accuracy across inference canvas budgets"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", f.config, "flat key = value config file");
    sub->add_option("--seed", f.seed, "master seed");
    sub->add_option("--out", f.out, "output directory");
    auto* ck = sub->add_option("--from-checkpoint", f.checkpoints, "checkpoint path");
    if (name != "ktest") ck->expected(1);
    sub->add_option("--task", f.task, "latent_retrieval | parity_memory");
    sub->add_option("--k-test", f.k_test, "canvas budget at evaluation");
    if (name == "verify-vmf") sub->add_option("--samples", f.samples, "Monte-Carlo samples per case");
    sub->add_option("--set", f.sets, "key=value override")->take_all();
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "depo: " << e.what() << "\n";
    return 2;
  }

  Invocation inv;
  inv.command = app.get_subcommands().front()->get_name();
  inv.checkpoints = f.checkpoints;
  try {
    RunConfig& c = inv.config = RunConfig::defaults();
    if (!f.config.empty()) c.merge_file(f.config);
    if (const char* env = std::getenv("DEPO_OUT_DIR"); env != nullptr && *env != '\0') c.set("out_dir", env);
    for (const auto& s : f.sets) c.assign(s);
    if (f.seed) c.set("seed", std::to_string(*f.seed));
    if (!f.task.empty()) c.set("task.name", f.task);
    if (f.k_test) c.set("eval.k_test", std::to_string(*f.k_test));
    if (f.samples) c.set("vmf.samples", std::to_string(*f.samples));
    if (!f.out.empty()) c.set("out_dir", f.out);

    // Resolve everything up front so a bad value fails before any output.
    (void)c.task();
    (void)c.sft();
    (void)c.rl();
    if (c.integer("threads") < 0) throw std::invalid_argument("threads must be >= 0");
    if (c.integer("eval.episodes") < 0 || c.integer("ktest.episodes") < 0) {
      throw std::invalid_argument("episode counts must be >= 0");
    }
    if (c.integer("vmf.samples") < 0 || c.integer("vmf.cases") < 1) {
      throw std::invalid_argument("vmf.samples >= 0 and vmf.cases >= 1 required");
    }
    const bool needs_checkpoint = inv.command == "rl" || inv.command == "eval" || inv.command == "ktest";
    if (needs_checkpoint && inv.checkpoints.empty()) {
      throw UsageError(inv.command + " requires --from-checkpoint");
    }
    for (const auto& p : inv.checkpoints) {
      if (!std::filesystem::is_regular_file(p)) throw UsageError("checkpoint not found: " + p);
    }
  } catch (const std::exception& e) {
    err << "depo " << inv.command << ": " << e.what() << "\n";
    return 2;
  }

  try {
    const RunConfig& c = inv.config;
    set_worker_count(static_cast<unsigned>(c.integer("threads")));
    inv.out_dir = c.get("out_dir");
    std::filesystem::create_directories(inv.out_dir);
    write_file(inv.out_dir / "config.txt", c.to_text());

    if (inv.command == "sft") return cmd_sft(inv, out);
    if (inv.command == "rl") return cmd_rl(inv, out);
    if (inv.command == "eval") return cmd_eval(inv, out);
    if (inv.command == "diag-ratio") return cmd_diag_ratio(inv, out);
    if (inv.command == "verify-vmf") return cmd_verify_vmf(inv, out);
    if (inv.command == "gradcheck") return cmd_gradcheck(inv, out);
    return cmd_ktest(inv, out);
  } catch (const std::exception& e) {
    err << "depo " << inv.command << ": " << e.what() << "\n";
    return 1;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace depo::cli
