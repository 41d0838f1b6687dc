#include "discon/cli.hpp"

#include "discon/checkpoint.hpp"
#include "discon/gradcheck.hpp"
#include "discon/pipeline.hpp"
#include "discon/plot.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace discon {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

// Model fields derived from the data and tokenizer rather than configured.
const std::set<std::string> kDerivedModelKeys = {"vocab", "seq_len", "n_classes", "token_dim"};

KeyValues without(const KeyValues& kv, const std::set<std::string>& drop) {
  KeyValues out;
  for (const auto& [k, v] : kv.items())
    if (!drop.count(k)) out.set(k, v);
  return out;
}

}  // namespace

KeyValues default_config() {
  KeyValues kv;
  const MixtureSpec spec = MixtureSpec::default_spec();
  kv.set("data.n_modes", spec.n_modes);
  kv.set("data.token_dim", spec.token_dim);
  kv.set("data.seq_len", spec.seq_len);
  kv.set("data.separation", spec.separation);
  kv.set("data.sigma", spec.sigma);
  kv.set("data.shape", to_string(spec.mode_shape));
  kv.set("data.n_classes", spec.n_classes);
  kv.set("data.n_samples", 6000);
  kv.set("data.seed", 0);
  kv.set("data.train_fraction", 0.8);

  kv.set("tokenizer.vocab", 16);
  kv.set("tokenizer.seed", 0);
  kv.set("tokenizer.max_iters", 100);

  kv.merge("prior", without(PriorConfig{}.to_kv(), kDerivedModelKeys));
  kv.merge("discon", without(DisConConfig{}.to_kv(), kDerivedModelKeys));
  kv.merge("train", TrainConfig{}.to_kv());
  kv.set("train.snapshots", "");
  kv.merge("sample", SampleRequest{}.to_kv());

  kv.set("eval.temperatures", "0.2,0.6,1");
  kv.set("eval.steps", 16);
  kv.set("eval.step_sweep", "");
  kv.set("eval.n_images", 400);
  kv.set("eval.seed", 0);
  kv.set("eval.source", "prior");
  kv.set("eval.cfg_scale", 1.0);
  kv.set("eval.gradcheck_seeds", "1,2,3");
  kv.set("eval.gradcheck_threshold", 1e-6);
  return kv;
}

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::set<std::string> known_keys() {
  std::set<std::string> keys;
  const KeyValues defaults = default_config();
  for (const auto& [k, v] : defaults.items()) keys.insert(k);
  return keys;
}

KeyValues resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  KeyValues kv = default_config();
  const auto known = known_keys();
  KeyValues user;
  if (!config_path.empty()) user = read_config_file(config_path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
    user.set(o.substr(0, eq), o.substr(eq + 1));
  }
  require_known_keys(user, known);
  for (const auto& [k, v] : user.items()) kv.set(k, v);
  if (!user.has("discon.z_dim")) kv.set("discon.z_dim", kv.get("discon.width"));
  return kv;
}

// ---------------------------------------------------------------- run dir

class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw std::runtime_error("run directory " + dir.string() + " is locked by another invocation (" + path_.string() + ")");
  }
  ~RunLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

struct Invocation {
  std::string command;
  KeyValues config;
  std::map<std::string, std::string> inputs;  // role -> path
  fs::path out;
};

class Run {
 public:
  Run(const Invocation& inv, std::ostream& log) : inv_(inv), log_(log), start_(std::chrono::steady_clock::now()) {}

  const KeyValues& config() const { return inv_.config; }
  const fs::path& dir() const { return inv_.out; }
  std::ostream& log() { return log_; }

  bool has_input(const std::string& role) const {
    auto it = inv_.inputs.find(role);
    return it != inv_.inputs.end() && !it->second.empty();
  }
  fs::path input(const std::string& role) const {
    if (!has_input(role)) throw ConfigError("missing required input --" + role);
    return inv_.inputs.at(role);
  }
  // Records the hash of a file read as input.
  fs::path use_file(const fs::path& p) {
    if (!fs::exists(p)) throw std::runtime_error("input file not found: " + p.string());
    input_hashes_[fs::weakly_canonical(p).string()] = file_hash(p);
    return p;
  }
  Dataset dataset(const std::string& split) {
    return load_dataset(use_file(input("data") / "data" / (split + ".dscn")));
  }
  Checkpoint checkpoint(const std::string& role, CheckpointKind kind) {
    return load_checkpoint(use_file(input(role)), kind);
  }

  void write(const std::string& rel, std::string_view bytes) {
    const fs::path p = dir() / rel;
    fs::create_directories(p.parent_path());
    write_file(p, bytes);
    outputs_[rel] = hex32(crc32(bytes));
  }
  void save(const std::string& name, const Checkpoint& c) {
    const std::string rel = "checkpoints/" + name + ".dsck";
    write(rel, serialize(c));
    checkpoints_[name] = outputs_[rel];
  }
  void metric(const MetricRecord& r) { metrics_.push_back(r); }
  void metric(std::uint64_t step, const std::string& split, const std::string& name, double value) {
    metrics_.push_back({step, split, name, value});
  }
  void timing(const std::string& stage, double seconds) { timings_[stage] = seconds; }
  void error(const std::string& what) { errors_.push_back(what); }
  Json& extra() { return extra_; }

  void finish() {
    std::ostringstream csv;
    csv << "step,split,metric,value\n";
    for (const auto& m : metrics_) csv << m.step << ',' << m.split << ',' << m.metric << ',' << format_real(m.value) << '\n';
    write("metrics.csv", csv.str());

    Json j;
    j["run_id"] = fs::absolute(dir()).filename().string();
    j["command"] = inv_.command;
    j["tool_version"] = kToolVersion;
    Json cfg = Json::object();
    for (const auto& [k, v] : inv_.config.items()) cfg[k] = v;
    j["config"] = cfg;
    Json inputs = Json::object();
    for (const auto& [role, path] : inv_.inputs)
      if (!path.empty()) inputs[role] = fs::exists(path) ? fs::weakly_canonical(path).string() : path;
    j["inputs"] = inputs;
    j["input_hashes"] = input_hashes_;
    j["outputs"] = outputs_;
    j["checkpoints"] = checkpoints_;
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    j["errors"] = errors_;
    timings_["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    j["timings"] = timings_;
    write_file(dir() / "manifest.json", j.dump(2) + "\n");
  }

 private:
  Invocation inv_;
  std::ostream& log_;
  std::chrono::steady_clock::time_point start_;
  std::vector<MetricRecord> metrics_;
  Json input_hashes_ = Json::object(), outputs_ = Json::object(), checkpoints_ = Json::object();
  Json extra_ = Json::object();
  Json timings_ = Json::object();
  std::vector<std::string> errors_;
};

Json kv_json(const KeyValues& kv) {
  Json j = Json::object();
  for (const auto& [k, v] : kv.items()) j[k] = v;
  return j;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- commands

MixtureSpec spec_from(const KeyValues& kv) {
  MixtureSpec s;
  s.n_modes = kv.integer("n_modes", s.n_modes);
  s.token_dim = kv.integer("token_dim", s.token_dim);
  s.seq_len = kv.integer("seq_len", s.seq_len);
  s.separation = kv.real("separation", s.separation);
  s.sigma = kv.real("sigma", s.sigma);
  s.mode_shape = mode_shape_from_string(kv.str("shape", "gaussian"));
  s.n_classes = kv.integer("n_classes", s.n_classes);
  if (s.n_modes < s.n_classes) throw ConfigError("data.n_modes must be at least data.n_classes");
  s.class_to_modes = MixtureSpec::contiguous_classes(s.n_modes, s.n_classes);
  s.validate();
  return s;
}

void cmd_gen_data(Run& run) {
  const KeyValues kv = run.config().section("data");
  const MixtureSpec spec = spec_from(kv);
  const int n = kv.integer("n_samples", 0);
  const double fraction = kv.real("train_fraction", 0.8);
  if (n < 3) throw ConfigError("data.n_samples must be at least 3");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("data.train_fraction must lie in (0, 1)");
  const std::uint64_t seed = kv.u64("seed", 0);
  const Dataset all = generate(spec, static_cast<std::size_t>(n), seed);
  auto [train, rest] = split(all, fraction, seed + 1);
  auto [val, test] = split(rest, 0.5, seed + 2);
  run.write("data/train.dscn", serialize(train));
  run.write("data/val.dscn", serialize(val));
  run.write("data/test.dscn", serialize(test));
  run.metric(0, "train", "samples", static_cast<double>(train.size()));
  run.metric(0, "val", "samples", static_cast<double>(val.size()));
  run.metric(0, "test", "samples", static_cast<double>(test.size()));
}

void cmd_fit_tokenizer(Run& run) {
  const KeyValues kv = run.config().section("tokenizer");
  const Dataset train = run.dataset("train");
  const Dataset val = run.dataset("val");
  const int vocab = kv.integer("vocab", 16);
  if (vocab < 1) throw ConfigError("tokenizer.vocab must be positive");
  Tokenizers tok{fit_codebook(train.pooled_tokens(), vocab, kv.u64("seed", 0), kv.integer("max_iters", 100)),
                 Normalizer::fit(train.pooled_tokens())};
  KeyValues echo;
  echo.merge("tokenizer", kv);
  run.save("tokenizer", make_checkpoint(tok, echo));
  const ReconstructionFd rfd = reconstruction_fd(val, tok.codebook, tok.norm);
  run.metric(0, "train", "inertia", tok.codebook.inertia);
  run.metric(0, "val", "rfd_continuous", rfd.continuous);
  run.metric(0, "val", "rfd_discrete", rfd.discrete);
}

template <typename Model>
void train_command(Run& run, CheckpointKind kind, const std::string& name, const KeyValues& model_kv) {
  const Tokenizers tok = tokenizers_from(run.checkpoint("tokenizer", CheckpointKind::tokenizer));
  const Dataset train_set = run.dataset("train");
  const Dataset val_set = run.dataset("val");
  const TokenBatch train_tokens = tokenize(train_set, tok.codebook, tok.norm);
  const TokenBatch val_tokens = tokenize(val_set, tok.codebook, tok.norm);

  const KeyValues train_kv = run.config().section("train");
  const TrainConfig tc = TrainConfig::from_kv(without(train_kv, {"snapshots"}));
  tc.validate();
  Model model(Model::Config::from_kv(model_kv), tc.seed);
  run.extra()["model"] = kv_json(model_kv);

  const std::uint64_t total = steps_per_epoch(train_tokens.size(), tc.batch_size) * static_cast<std::uint64_t>(tc.epochs);
  std::vector<std::uint64_t> snapshots;
  for (double f : train_kv.real_list("snapshots", {})) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("train.snapshots entries must lie in (0, 1)");
    snapshots.push_back(std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(f * static_cast<double>(total)))));
  }
  std::sort(snapshots.begin(), snapshots.end());

  TrainState state = init_train_state(model, tc);
  TrainHooks hooks;
  hooks.on_metric = [&](const MetricRecord& r) {
    if (r.metric != "step_loss") run.log() << name << " step " << r.step << ' ' << r.split << '/' << r.metric << ' ' << format_real(r.value) << '\n';
    run.metric(r);
  };
  const auto t0 = std::chrono::steady_clock::now();
  try {
    for (std::uint64_t stop : snapshots) {
      if (stop <= state.step) continue;
      hooks.stop_at_step = stop;
      train(model, state, train_tokens, &val_tokens, tc, hooks);
      run.save(name + "_step" + std::to_string(stop), make_checkpoint(kind, model_kv, tc, model, state));
    }
    hooks.stop_at_step = 0;
    train(model, state, train_tokens, &val_tokens, tc, hooks);
  } catch (const TrainingAborted& e) {
    run.save(name + "_last_good", make_checkpoint(kind, model_kv, tc, model, state));
    run.error(e.what());
    throw;
  }
  run.timing("train_seconds", seconds_since(t0));
  run.save(name, make_checkpoint(kind, model_kv, tc, model, state));
}

KeyValues derived_model_kv(Run& run, const std::string& section, bool with_token_dim) {
  const Tokenizers tok = tokenizers_from(run.checkpoint("tokenizer", CheckpointKind::tokenizer));
  const Dataset train = run.dataset("train");
  KeyValues kv = run.config().section(section);
  kv.set("vocab", tok.codebook.size());
  kv.set("seq_len", train.spec.seq_len);
  kv.set("n_classes", train.spec.n_classes);
  if (with_token_dim) kv.set("token_dim", train.spec.token_dim);
  return kv;
}

struct PriorAdapter : PriorModel {
  using Config = PriorConfig;
  PriorAdapter(const PriorConfig& c, std::uint64_t seed) : PriorModel(c, seed) {}
};
struct DisConAdapter : DisConModel {
  using Config = DisConConfig;
  DisConAdapter(const DisConConfig& c, std::uint64_t seed) : DisConModel(c, seed) {}
};

void cmd_train_prior(Run& run) {
  const KeyValues kv = derived_model_kv(run, "prior", false);
  PriorConfig::from_kv(kv).validate();
  train_command<PriorAdapter>(run, CheckpointKind::prior, "prior", kv);
}

void cmd_train_discon(Run& run) {
  const KeyValues kv = derived_model_kv(run, "discon", true);
  DisConConfig::from_kv(kv).validate();
  train_command<DisConAdapter>(run, CheckpointKind::discon, "discon", kv);
}

ModelBundle bundle_for(Run& run) {
  const fs::path discon = run.use_file(run.input("discon"));
  const fs::path prior = run.has_input("prior") ? run.use_file(run.input("prior")) : fs::path();
  const fs::path tokenizer = run.use_file(run.input("tokenizer"));
  ModelBundle b = load_bundle(discon, prior, tokenizer);
  run.extra()["checkpoint_hashes"] = kv_json(b.hashes);
  return b;
}

std::string samples_csv(const GeneratedBatch& b) {
  std::ostringstream os;
  os << "image,class,position,discrete";
  for (Index k = 0; k < b.tokens.cols(); ++k) os << ",x" << k;
  os << '\n';
  for (Index r = 0; r < b.tokens.rows(); ++r) {
    const auto i = static_cast<std::size_t>(r / b.seq_len);
    os << i << ',' << b.classes[i] << ',' << r % b.seq_len << ',' << b.discrete[static_cast<std::size_t>(r)];
    for (Index k = 0; k < b.tokens.cols(); ++k) os << ',' << format_real(b.tokens(r, k));
    os << '\n';
  }
  return os.str();
}

void cmd_sample(Run& run) {
  const ModelBundle bundle = bundle_for(run);
  const SampleRequest req = SampleRequest::from_kv(run.config().section("sample"));
  req.validate(bundle.model.config().seq_len, bundle.model.config().n_classes);
  TokenBatch truth;
  const bool need_truth = req.source == ConditionSource::ground_truth;
  if (need_truth) truth = tokenize(run.dataset("val"), bundle.tokenizers.codebook, bundle.tokenizers.norm);
  const auto t0 = std::chrono::steady_clock::now();
  const GeneratedBatch batch = generate(make_generator(bundle, need_truth ? &truth : nullptr), req);
  run.timing("sample_seconds", seconds_since(t0));
  run.write("samples.csv", samples_csv(batch));
  run.extra()["provenance"] = kv_json(batch.provenance);
  if (run.has_input("data")) {
    const GenerationMetrics m = generation_metrics(batch, run.dataset("val"));
    run.metric(0, "val", "fd", m.fd);
    run.metric(0, "val", "ood_rate", m.modes.ood_rate);
    run.metric(0, "val", "mode_coverage", m.modes.coverage);
  }
}

std::string tag(const std::string& key, double v) { return key + "=" + format_real(v); }

void cmd_eval(Run& run) {
  const KeyValues kv = run.config().section("eval");
  const ModelBundle bundle = bundle_for(run);
  const Dataset val = run.dataset("val");
  const Dataset test = run.dataset("test");
  const TokenBatch val_truth = tokenize(val, bundle.tokenizers.codebook, bundle.tokenizers.norm);
  const TokenBatch test_truth = tokenize(test, bundle.tokenizers.codebook, bundle.tokenizers.norm);

  SampleRequest req;
  req.n_images = kv.integer("n_images", 400);
  req.steps = kv.integer("steps", 16);
  req.seed = kv.u64("seed", 0);
  req.cfg_scale = kv.real("cfg_scale", 1.0);
  req.source = condition_source_from_string(kv.str("source", "prior"));
  const auto temperatures = kv.real_list("temperatures", {});
  if (temperatures.empty()) throw ConfigError("eval.temperatures must list at least one value");
  const auto sweep = kv.int_list("step_sweep", {});
  for (double t : temperatures) {
    req.temperature = t;
    req.validate(bundle.model.config().seq_len, bundle.model.config().n_classes);
  }
  for (int s : sweep) {
    req.steps = s;
    req.validate(bundle.model.config().seq_len, bundle.model.config().n_classes);
  }
  req.steps = kv.integer("steps", 16);

  const std::string run_id = fs::absolute(run.dir()).filename().string();
  const std::string ckpt_hash = bundle.hashes.str("ckpt.discon", "");
  std::vector<ResultRow> rows;
  auto evaluate = [&](const SampleRequest& r, const Dataset& ref, const TokenBatch& truth, const std::string& split) {
    const auto t0 = std::chrono::steady_clock::now();
    const GeneratedBatch batch = generate(make_generator(bundle, &truth), r);
    const double dt = seconds_since(t0);
    const GenerationMetrics m = generation_metrics(batch, ref);
    ResultRow row{run_id + ":" + split, to_string(bundle.model.config().conditioning), r.steps, r.temperature,
                  r.cfg_scale, m.fd, m.modes.coverage, m.modes.ood_rate, dt / std::ceil(r.n_images / 64.0), ckpt_hash, ""};
    rows.push_back(row);
    return m;
  };

  double best_fd = std::numeric_limits<double>::infinity();
  double best_tau = temperatures.front();
  for (double t : temperatures) {
    req.temperature = t;
    const GenerationMetrics m = evaluate(req, val, val_truth, "val");
    run.metric(0, "val", "fd/" + tag("tau", t), m.fd);
    run.metric(0, "val", "ood_rate/" + tag("tau", t), m.modes.ood_rate);
    run.log() << "val tau=" << format_real(t) << " fd=" << format_real(m.fd) << " ood=" << format_real(m.modes.ood_rate) << '\n';
    if (m.fd < best_fd) {
      best_fd = m.fd;
      best_tau = t;
    }
  }
  req.temperature = best_tau;
  const GenerationMetrics m = evaluate(req, test, test_truth, "test");
  run.metric(0, "test", "tau", best_tau);
  run.metric(0, "test", "fd", m.fd);
  run.metric(0, "test", "ood_rate", m.modes.ood_rate);
  run.metric(0, "test", "mode_coverage", m.modes.coverage);
  run.metric(0, "test", "purity", m.modes.purity);
  run.log() << "test tau=" << format_real(best_tau) << " fd=" << format_real(m.fd) << " ood=" << format_real(m.modes.ood_rate) << '\n';
  for (int s : sweep) {
    SampleRequest r = req;
    r.steps = s;
    const GenerationMetrics ms = evaluate(r, test, test_truth, "test");
    run.metric(0, "test", "fd/" + tag("S", s), ms.fd);
    run.metric(0, "test", "ood_rate/" + tag("S", s), ms.modes.ood_rate);
    run.log() << "test S=" << s << " fd=" << format_real(ms.fd) << '\n';
  }
  run.write("results.csv", results_csv(rows));
}

void cmd_ablate(Run& run, const std::vector<std::string>& specs) {
  const KeyValues kv = run.config().section("eval");
  if (specs.empty()) throw ConfigError("ablate needs at least one --run id=discon.dsck[,prior.dsck]");
  const fs::path tokenizer = run.use_file(run.input("tokenizer"));
  const Dataset test = run.dataset("test");
  std::vector<int> steps = kv.int_list("step_sweep", {});
  if (steps.empty()) steps = {kv.integer("steps", 16)};
  std::vector<GridCell> grid;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--run expects id=discon.dsck[,prior.dsck], got '" + s + "'");
    const std::string id = s.substr(0, eq);
    const std::string paths = s.substr(eq + 1);
    const auto comma = paths.find(',');
    const fs::path discon = paths.substr(0, comma);
    const fs::path prior = comma == std::string::npos ? fs::path() : fs::path(paths.substr(comma + 1));
    if (fs::exists(discon)) run.use_file(discon);
    if (!prior.empty() && fs::exists(prior)) run.use_file(prior);
    for (int st : steps) {
      for (double t : kv.real_list("temperatures", {})) {
        SampleRequest req;
        req.n_images = kv.integer("n_images", 400);
        req.seed = kv.u64("seed", 0);
        req.cfg_scale = kv.real("cfg_scale", 1.0);
        req.source = condition_source_from_string(kv.str("source", "prior"));
        req.steps = st;
        req.temperature = t;
        grid.push_back({id, discon, prior, tokenizer, req});
      }
    }
  }
  const auto rows = compare_runs(grid, test);
  for (const auto& r : rows) {
    if (!r.error.empty()) {
      run.error(r.run_id + " (S=" + std::to_string(r.steps) + ", tau=" + format_real(r.temperature) + "): " + r.error);
      run.log() << "cell " << r.run_id << " failed: " << r.error << '\n';
      continue;
    }
    const std::string suffix = "/" + r.run_id + "/" + tag("S", r.steps) + "/" + tag("tau", r.temperature);
    run.metric(0, "test", "fd" + suffix, r.fd);
    run.metric(0, "test", "ood_rate" + suffix, r.ood_rate);
  }
  run.write("results.csv", results_csv(rows));
}

bool cmd_gradcheck(const KeyValues& config, Run* run, std::ostream& out) {
  const KeyValues kv = config.section("eval");
  const double threshold = kv.real("gradcheck_threshold", 1e-6);
  std::vector<std::pair<std::string, double>> entries;
  for (int seed : kv.int_list("gradcheck_seeds", {1})) {
    for (const auto& e : op_gradcheck_suite(static_cast<std::uint64_t>(seed)))
      entries.emplace_back("op." + e.name + "@seed" + std::to_string(seed), e.max_rel_error);
    for (const auto& e : model_gradcheck_suite(static_cast<std::uint64_t>(seed)))
      entries.emplace_back("model." + e.name + "@seed" + std::to_string(seed), e.max_rel_error);
  }
  bool ok = true;
  std::ostringstream csv;
  csv << "check,max_rel_error,pass\n";
  for (const auto& [name, err] : entries) {
    const bool pass = err < threshold;
    ok = ok && pass;
    out << (pass ? "ok   " : "FAIL ") << name << " max_rel_error=" << format_real(err) << '\n';
    csv << name << ',' << format_real(err) << ',' << (pass ? 1 : 0) << '\n';
  }
  out << entries.size() << " checks, threshold " << format_real(threshold) << ": " << (ok ? "all passed" : "FAILED") << '\n';
  if (run != nullptr) run->write("gradcheck.csv", csv.str());
  return ok;
}

// Minimal CSV reader for the files this tool writes.
std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("expected file not found: " + path.string());
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw std::runtime_error("empty CSV: " + path.string());
  return rows;
}

void cmd_plot(Run& run, const fs::path& target, const std::string& kind) {
  PlotFiles files;
  if (kind == "scatter") {
    const auto rows = read_csv(run.use_file(target / "samples.csv"));
    Matrix pts(static_cast<Index>(rows.size() - 1), 2);
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (rows[r].size() < 6) throw FormatError("samples.csv row " + std::to_string(r) + " has too few columns");
      pts(static_cast<Index>(r - 1), 0) = std::stod(rows[r][4]);
      pts(static_cast<Index>(r - 1), 1) = std::stod(rows[r][5]);
    }
    Matrix centers(0, 2);
    if (run.has_input("data")) centers = run.dataset("train").centers;
    files = scatter_plot(pts, centers, "generated tokens");
  } else if (kind == "curve") {
    const auto rows = read_csv(run.use_file(target / "metrics.csv"));
    std::vector<CurvePoint> pts;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (rows[r].size() != 4) throw FormatError("metrics.csv row " + std::to_string(r) + " is malformed");
      pts.push_back({rows[r][1] + "/" + rows[r][2], std::stod(rows[r][0]), std::stod(rows[r][3])});
    }
    files = curve_plot(pts, "step", "metrics");
  } else {
    throw ConfigError("plot --kind must be scatter or curve, got '" + kind + "'");
  }
  run.write(kind + ".svg", files.svg);
  run.write(kind + ".csv", files.csv);
}

// ---------------------------------------------------------------- dispatch

const std::vector<std::pair<std::string, std::string>> kCommands = {
    {"gen-data", "Generate the synthetic dataset (train/val/test splits)"},
    {"fit-tokenizer", "Fit the codebook and normalizer on the training split"},
    {"train-prior", "Train the discrete autoregressive prior"},
    {"train-discon", "Train the masked continuous model with its diffusion head"},
    {"sample", "Generate token sequences from trained checkpoints"},
    {"eval", "Tune temperature on validation and report test metrics"},
    {"ablate", "Evaluate a grid of runs x steps x temperatures"},
    {"gradcheck", "Finite-difference check of every op and model loss"},
    {"plot", "Render a scatter of samples or metric curves"},
};

Invocation replay_invocation(const fs::path& manifest_path, const std::string& command, const fs::path& out) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot read manifest " + manifest_path.string());
  const Json j = Json::parse(in);
  if (j.at("command").get<std::string>() != command) {
    throw ConfigError("manifest records command '" + j.at("command").get<std::string>() + "', not '" + command + "'");
  }
  Invocation inv;
  inv.command = command;
  KeyValues user;
  for (const auto& [k, v] : j.at("config").items()) user.set(k, v.get<std::string>());
  require_known_keys(user, known_keys());
  inv.config = default_config();
  for (const auto& [k, v] : user.items()) inv.config.set(k, v);
  for (const auto& [role, path] : j.at("inputs").items()) inv.inputs[role] = path.get<std::string>();
  for (const auto& [path, hash] : j.at("input_hashes").items()) {
    if (!fs::exists(path)) throw std::runtime_error("replay input missing: " + path);
    if (file_hash(path) != hash.get<std::string>()) throw std::runtime_error("replay input changed since the run: " + path);
  }
  inv.out = out;
  return inv;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DisCon: discrete-conditioned continuous autoregressive generation on synthetic data", "discon"};
  app.require_subcommand(1);
  struct Options {
    std::string config, out, replay, kind, run_dir;
    std::vector<std::string> overrides, runs;
    std::map<std::string, std::string> inputs;
  } opt;
  for (const auto& [name, desc] : kCommands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", opt.config, "Sectioned key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", opt.overrides, "Override a config key, e.g. --set train.epochs=5");
    sub->add_option("--replay", opt.replay, "Re-run the command recorded in this manifest.json")->check(CLI::ExistingFile);
    auto input = [&](const std::string& role, const std::string& help) {
      sub->add_option_function<std::string>("--" + role, [&opt, role](const std::string& v) { opt.inputs[role] = v; }, help);
    };
    if (name == "plot") {
      sub->add_option("--run", opt.run_dir, "Run directory holding samples.csv or metrics.csv")->required();
      sub->add_option("--kind", opt.kind, "scatter or curve")->required();
      sub->add_option("--out", opt.out, "Output directory (default: <run>/plots)");
      input("data", "gen-data run directory, for mode colours");
      continue;
    }
    sub->add_option("--out", opt.out, "Run directory to write")->required(name != "gradcheck");
    if (name != "gen-data" && name != "gradcheck") input("data", "gen-data run directory");
    if (name == "train-prior" || name == "train-discon" || name == "sample" || name == "eval" || name == "ablate")
      input("tokenizer", "Tokenizer checkpoint");
    if (name == "sample" || name == "eval") {
      input("discon", "DisCon checkpoint");
      input("prior", "Prior checkpoint (omit for unconditioned models)");
    }
    if (name == "ablate") sub->add_option("--run", opt.runs, "Grid entry id=discon.dsck[,prior.dsck] (repeatable)");
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    Invocation inv;
    if (!opt.replay.empty()) {
      if (opt.out.empty()) throw ConfigError("--replay needs --out");
      inv = replay_invocation(opt.replay, command, opt.out);
    } else {
      inv.command = command;
      inv.config = resolve_config(opt.config, opt.overrides);
      inv.inputs = opt.inputs;
      inv.out = opt.out;
    }
    if (command == "plot") {
      if (inv.out.empty()) inv.out = fs::path(opt.run_dir) / "plots";
      inv.inputs["run"] = opt.run_dir;
    }
    if (command == "ablate") {
      for (std::size_t i = 0; i < opt.runs.size(); ++i) inv.inputs["run" + std::to_string(i)] = opt.runs[i];
    }

    if (command == "gradcheck" && inv.out.empty()) return cmd_gradcheck(inv.config, nullptr, out) ? kExitOk : kExitRuntime;

    fs::create_directories(inv.out);
    RunLock lock(inv.out);
    Run run(inv, err);
    bool ok = true;
    try {
      if (command == "gen-data") cmd_gen_data(run);
      else if (command == "fit-tokenizer") cmd_fit_tokenizer(run);
      else if (command == "train-prior") cmd_train_prior(run);
      else if (command == "train-discon") cmd_train_discon(run);
      else if (command == "sample") cmd_sample(run);
      else if (command == "eval") cmd_eval(run);
      else if (command == "ablate") {
        std::vector<std::string> specs;
        for (const auto& [role, v] : inv.inputs)
          if (role.rfind("run", 0) == 0 && role != "run") specs.push_back(v);
        cmd_ablate(run, specs);
      } else if (command == "gradcheck") ok = cmd_gradcheck(inv.config, &run, out);
      else if (command == "plot") cmd_plot(run, inv.inputs.at("run"), opt.kind);
    } catch (const std::exception& e) {
      run.error(e.what());
      run.finish();
      throw;
    }
    run.finish();
    out << "wrote " << (inv.out / "manifest.json").string() << '\n';
    return ok ? kExitOk : kExitRuntime;
  } catch (const std::invalid_argument& e) {
    err << "validation error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace discon
