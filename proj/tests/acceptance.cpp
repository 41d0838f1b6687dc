// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--work DIR] [--reuse] [N ...]
//
// Without criterion numbers all eight run. Criteria 4 to 6 and 8 drive the
// command-line tool in DIR and share its run directories. DIR is cleared
// first unless --reuse is given, in which case finished runs are kept.

#include "discon/cli.hpp"
#include "discon/config.hpp"
#include "discon/pipeline.hpp"
#include "discon/runtime.hpp"
#include "discon/tokenizers.hpp"
#include "head_fixture.hpp"

#include "json.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace discon;
using namespace discon::testing;
namespace fs = std::filesystem;

namespace {

constexpr int kSeeds = 3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) {}

  fs::path path(const std::string& rel) const { return root_ / rel; }
  std::string str(const std::string& rel) const { return path(rel).string(); }
  std::string config() const { return (fs::path(DISCON_SOURCE_DIR) / "configs" / "acceptance.ini").string(); }

  // Runs a tool command into run directory `out` unless it already finished.
  void run(const std::string& out, std::vector<std::string> args) {
    if (fs::exists(path(out) / "manifest.json")) return;
    fs::remove_all(path(out));
    args.insert(args.end(), {"--out", str(out)});
    std::ostringstream log, err;
    const auto t0 = std::chrono::steady_clock::now();
    const int code = run_cli(args, log, err);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "  [" << num(dt) << "s] " << args.front() << " -> " << out << '\n';
    if (code != 0) throw std::runtime_error(args.front() + " -> " + out + " failed (" + std::to_string(code) + "): " + err.str());
  }

  double metric(const std::string& run, const std::string& split, const std::string& name) const {
    std::ifstream in(path(run) / "metrics.csv");
    std::string line;
    const std::string prefix = "0," + split + "," + name + ",";
    while (std::getline(in, line))
      if (line.rfind(prefix, 0) == 0) return std::stod(line.substr(prefix.size()));
    throw std::runtime_error("metric " + split + "/" + name + " not found in " + run);
  }

  fs::path snapshot(const std::string& run, const std::string& name) const {
    for (const auto& e : fs::directory_iterator(path(run) / "checkpoints")) {
      const std::string f = e.path().filename().string();
      if (f.rfind(name + "_step", 0) == 0) return e.path();
    }
    throw std::runtime_error("no snapshot of " + name + " in " + run);
  }

 private:
  fs::path root_;
};

// ------------------------------------------------------------ criterion 1

Outcome gradients() {
  std::ostringstream out, err;
  const auto t0 = std::chrono::steady_clock::now();
  const int code = run_cli({"gradcheck"}, out, err);
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string summary = out.str();
  summary = summary.substr(summary.rfind('\n', summary.size() - 2) + 1);
  summary.pop_back();
  return {code == 0 && dt < 60.0, summary + ", " + num(dt) + "s"};
}

// ------------------------------------------------------------ criterion 2

Outcome tokenizer_fidelity() {
  const Dataset all = generate(MixtureSpec::default_spec(), 6000, 0);
  const auto [train, rest] = split(all, 0.8, 1);
  const Matrix pooled = train.pooled_tokens();
  const Normalizer norm = Normalizer::fit(pooled);
  const ReconstructionFd v16 = reconstruction_fd(rest, fit_codebook(pooled, 16, 0), norm);
  const ReconstructionFd v1 = reconstruction_fd(rest, fit_codebook(pooled, 1, 0), norm);
  const bool pass = std::abs(v16.continuous) <= 1e-9 && std::abs(v1.continuous) <= 1e-9 && v16.discrete > 0.0 &&
                    v1.discrete >= v16.discrete;
  return {pass, "continuous " + num(v16.continuous) + ", discrete V=16 " + num(v16.discrete) + ", V=1 " +
                    num(v1.discrete)};
}

// ------------------------------------------------------------ criterion 3

Outcome head_soundness() {
  std::vector<std::string> failures;
  std::ostringstream detail;

  // Forward-process moments.
  const auto schedule = NoiseSchedule::cosine(100);
  Rng rng(1);
  const int n = 100000;
  Matrix x0(1, 2);
  x0 << 1.5, -2.0;
  double worst = 0.0;
  for (int t : {10, 50, 90}) {
    Matrix eps(n, 2);
    for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
    const Matrix xt = q_sample(x0.replicate(n, 1), t, eps, schedule);
    const RowVector mu = xt.colwise().mean();
    const RowVector var = (xt.rowwise() - mu).array().square().colwise().sum() / (n - 1);
    const double ab = schedule.alpha_bar(t);
    for (Index k = 0; k < 2; ++k) {
      const double expect = std::sqrt(ab) * x0(0, k);
      worst = std::max(worst, std::abs(mu(k) - expect) / std::max(std::abs(expect), std::sqrt(1.0 - ab)));
      worst = std::max(worst, std::abs(var(k) / (1.0 - ab) - 1.0));
    }
  }
  detail << "q_sample moment error " << num(100 * worst) << "%";
  if (worst >= 0.02) failures.push_back("q_sample");

  // Point mass at near-zero temperature.
  HeadFixture point(14);
  Matrix c(1, 2);
  c << 0.7, -1.2;
  fit_unconditional(point, [&](Rng&, int m) { return Matrix(c.replicate(m, 1)); }, 4000, 256, 3e-3);
  const Matrix xs = sample_many(point, 64, 1e-9, 15);
  const double miss = (xs.rowwise() - RowVector(c)).rowwise().norm().maxCoeff();
  detail << ", point-mass miss " << num(miss);
  if (miss >= 1e-3) failures.push_back("point mass");

  // Variance ordered by temperature.
  HeadFixture gauss(16);
  fit_unconditional(
      gauss,
      [](Rng& r, int m) {
        Matrix x(m, 2);
        for (Index i = 0; i < x.size(); ++i) x.data()[i] = 0.5 * r.normal();
        return x;
      },
      4000, 256, 2e-3);
  double prev = 0.0;
  bool ordered = true;
  detail << ", variance";
  for (double tau : {0.2, 0.6, 1.0}) {
    const Matrix y = sample_many(gauss, 2000, tau, 18);
    const RowVector m = y.colwise().mean();
    const double v = (y.rowwise() - m).array().square().sum() / (2.0 * (y.rows() - 1));
    detail << " " << num(v);
    ordered = ordered && v > prev;
    prev = v;
  }
  if (!ordered) failures.push_back("temperature ordering");
  return {failures.empty(), detail.str()};
}

// ------------------------------------------------------------ criteria 4-6, 8

std::string prior_run(int s) { return "prior_s" + std::to_string(s); }
std::string discon_run(int s) { return "discon_s" + std::to_string(s); }
std::string baseline_run(int s) { return "baseline_s" + std::to_string(s); }
std::string eval_run(int s) { return "eval_discon_s" + std::to_string(s); }
std::string eval_baseline_run(int s) { return "eval_baseline_s" + std::to_string(s); }

std::vector<std::string> common(Workspace& w, const std::string& cmd) { return {cmd, "--config", w.config()}; }

// Every run that criterion 4 reports on, in dependency order.
std::vector<std::string> central_runs(Workspace& w) {
  auto args = [&](const std::string& cmd) { return common(w, cmd); };
  auto with = [](std::vector<std::string> a, std::initializer_list<std::string> extra) {
    a.insert(a.end(), extra);
    return a;
  };
  const std::string data = w.str("data");
  const std::string tok = w.str("tokenizer/checkpoints/tokenizer.dsck");
  w.run("data", args("gen-data"));
  w.run("tokenizer", with(args("fit-tokenizer"), {"--data", data}));
  for (int s = 1; s <= kSeeds; ++s) {
    const std::string seed = "train.seed=" + std::to_string(s);
    w.run(prior_run(s), with(args("train-prior"), {"--data", data, "--tokenizer", tok, "--set", seed, "--set",
                                                  "train.snapshots=0.1"}));
    w.run(discon_run(s), with(args("train-discon"), {"--data", data, "--tokenizer", tok, "--set", seed}));
    w.run(baseline_run(s), with(args("train-discon"), {"--data", data, "--tokenizer", tok, "--set", seed, "--set",
                                                      "discon.conditioning=disabled"}));
    // M = 16, so the S = M point of the sweep is S = 16.
    w.run(eval_run(s), with(args("eval"), {"--data", data, "--tokenizer", tok, "--discon",
                                           w.str(discon_run(s) + "/checkpoints/discon.dsck"), "--prior",
                                           w.str(prior_run(s) + "/checkpoints/prior.dsck"), "--set",
                                           "eval.step_sweep=4,16"}));
    w.run(eval_baseline_run(s), with(args("eval"), {"--data", data, "--tokenizer", tok, "--discon",
                                                    w.str(baseline_run(s) + "/checkpoints/discon.dsck")}));
  }
  std::vector<std::string> runs = {"data", "tokenizer"};
  for (int s = 1; s <= kSeeds; ++s)
    for (const auto& r : {prior_run(s), discon_run(s), baseline_run(s), eval_run(s), eval_baseline_run(s)}) runs.push_back(r);
  return runs;
}

Outcome central_claim(Workspace& w) {
  central_runs(w);
  int fd_wins = 0, ood_wins = 0;
  std::ostringstream detail;
  for (int s = 1; s <= kSeeds; ++s) {
    const double fd = w.metric(eval_run(s), "test", "fd");
    const double fd_base = w.metric(eval_baseline_run(s), "test", "fd");
    const double ood = w.metric(eval_run(s), "test", "ood_rate");
    const double ood_base = w.metric(eval_baseline_run(s), "test", "ood_rate");
    fd_wins += fd < fd_base;
    ood_wins += ood <= ood_base;
    detail << (s > 1 ? "; " : "") << "seed " << s << " fd " << num(fd) << " vs " << num(fd_base) << ", ood " << num(ood)
           << " vs " << num(ood_base);
  }
  detail << " (fd wins " << fd_wins << "/3, ood wins " << ood_wins << "/3)";
  return {fd_wins >= 2 && ood_wins >= 2, detail.str()};
}

Outcome few_step(Workspace& w) {
  central_runs(w);
  bool pass = true;
  std::ostringstream detail;
  for (int s = 1; s <= kSeeds; ++s) {
    const double at16 = w.metric(eval_run(s), "test", "fd");
    const double at_m = w.metric(eval_run(s), "test", "fd/S=16");
    const double at4 = w.metric(eval_run(s), "test", "fd/S=4");
    pass = pass && std::abs(at16 - at_m) <= 0.1 * at_m && at4 <= 2.0 * at16;
    detail << (s > 1 ? "; " : "") << "seed " << s << " S=4 " << num(at4) << ", S=16 " << num(at16) << ", S=M " << num(at_m);
  }
  return {pass, detail.str()};
}

Outcome prior_quality(Workspace& w) {
  central_runs(w);
  int ordered = 0;
  std::ostringstream detail;
  const std::string data = w.str("data");
  const std::string tok = w.str("tokenizer/checkpoints/tokenizer.dsck");
  for (int s = 1; s <= kSeeds; ++s) {
    const std::string tau = "eval.temperatures=" + format_real(w.metric(eval_run(s), "test", "tau"));
    const std::string discon = w.str(discon_run(s) + "/checkpoints/discon.dsck");
    auto args = common(w, "eval");
    args.insert(args.end(), {"--data", data, "--tokenizer", tok, "--discon", discon, "--set", tau});
    auto gt = args;
    gt.insert(gt.end(), {"--set", "eval.source=ground_truth"});
    w.run("eval_truth_s" + std::to_string(s), gt);
    auto weak = args;
    weak.insert(weak.end(), {"--prior", w.snapshot(prior_run(s), "prior").string()});
    w.run("eval_weak_prior_s" + std::to_string(s), weak);

    const double fd_gt = w.metric("eval_truth_s" + std::to_string(s), "test", "fd");
    const double fd_full = w.metric(eval_run(s), "test", "fd");
    const double fd_weak = w.metric("eval_weak_prior_s" + std::to_string(s), "test", "fd");
    ordered += fd_gt <= fd_full && fd_full <= fd_weak;
    detail << (s > 1 ? "; " : "") << "seed " << s << " truth " << num(fd_gt) << " <= full " << num(fd_full)
           << " <= 10% " << num(fd_weak);
  }
  detail << " (" << ordered << "/3 ordered)";
  return {ordered >= 2, detail.str()};
}

Outcome reproducible(Workspace& w) {
  const auto runs = central_runs(w);
  int identical = 0, checkpoints = 0, same_checkpoints = 0;
  std::vector<std::string> differing;
  for (const auto& r : runs) {
    const std::string again = "replay/" + r;
    std::ifstream in(w.path(r) / "manifest.json");
    const std::string command = nlohmann::json::parse(in).at("command");
    w.run(again, {command, "--replay", w.str(r + "/manifest.json")});
    if (read_file(w.path(r) / "metrics.csv") == read_file(w.path(again) / "metrics.csv")) {
      ++identical;
    } else {
      differing.push_back(r);
    }
    if (fs::exists(w.path(r) / "checkpoints")) {
      for (const auto& e : fs::directory_iterator(w.path(r) / "checkpoints")) {
        ++checkpoints;
        const fs::path twin = w.path(again) / "checkpoints" / e.path().filename();
        same_checkpoints += fs::exists(twin) && read_file(e.path()) == read_file(twin);
      }
    }
  }
  std::string detail = std::to_string(identical) + "/" + std::to_string(runs.size()) + " metrics.csv identical, " +
                       std::to_string(same_checkpoints) + "/" + std::to_string(checkpoints) + " checkpoints identical";
  for (const auto& d : differing) detail += ", differs: " + d;
  return {identical == static_cast<int>(runs.size()), detail};
}

// ------------------------------------------------------------ criterion 7

Outcome marginal_consistency() {
  const MixtureSpec spec = MixtureSpec::tiny_spec();
  const Dataset all = generate(spec, 4000, 70);
  const auto [train_set, val_set] = split(all, 0.9, 71);
  const Codebook codebook = fit_codebook(train_set.pooled_tokens(), 4, 72);
  const Normalizer norm = Normalizer::fit(train_set.pooled_tokens());
  const TokenBatch tr = tokenize(train_set, codebook, norm);
  const TokenBatch va = tokenize(val_set, codebook, norm);

  TrainConfig tc;
  tc.epochs = 10;
  tc.warmup_steps = 20;
  tc.seed = 73;

  PriorConfig pc;
  pc.layers = 1;
  pc.width = 32;
  pc.heads = 2;
  pc.vocab = 4;
  pc.seq_len = spec.seq_len;
  pc.n_classes = spec.n_classes;
  PriorModel prior(pc, tc.seed);
  TrainState prior_state = init_train_state(prior, tc);
  train(prior, prior_state, tr, &va, tc, {});

  DisConConfig dc;
  dc.layers = 1;
  dc.width = 32;
  dc.z_dim = 32;
  dc.heads = 2;
  dc.head_width = 32;
  dc.head_blocks = 1;
  dc.diffusion_steps = 50;
  dc.vocab = 4;
  dc.seq_len = spec.seq_len;
  dc.n_classes = spec.n_classes;
  dc.token_dim = spec.token_dim;
  DisConModel model(dc, tc.seed);
  TrainState model_state = init_train_state(model, tc);
  train(model, model_state, tr, &va, tc, {});

  Generator gen;
  gen.model = &model;
  gen.weights = &model_state.ema.values();
  gen.prior = &prior;
  gen.prior_weights = &prior_state.ema.values();
  gen.norm = norm;

  bool pass = true;
  std::ostringstream detail;
  for (int label = 0; label < spec.n_classes; ++label) {
    const double small = marginal_oracle(gen, label, 1000, 74).fd;
    const double large = marginal_oracle(gen, label, 10000, 75).fd;
    pass = pass && large < 0.1 && large <= small + 0.02;
    detail << (label > 0 ? "; " : "") << "class " << label << " fd " << num(large) << " (10^3 samples: " << num(small)
           << ")";
  }
  return {pass, detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  fs::path work = fs::temp_directory_path() / "discon_acceptance";
  std::set<int> wanted;
  bool reuse = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--reuse") {
      reuse = true;
    } else {
      wanted.insert(std::stoi(a));
    }
  }
  if (wanted.empty()) wanted = {1, 2, 3, 4, 5, 6, 7, 8};
  if (!reuse) fs::remove_all(work);
  fs::create_directories(work);
  Workspace w(work);

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria = {
      {1, {"gradient correctness", gradients}},
      {2, {"tokenizer fidelity ordering", tokenizer_fidelity}},
      {3, {"diffusion head soundness", head_soundness}},
      {4, {"discrete conditioning beats the baseline", [&] { return central_claim(w); }}},
      {5, {"few-step robustness", [&] { return few_step(w); }}},
      {6, {"prior-quality monotonicity", [&] { return prior_quality(w); }}},
      {7, {"marginalization consistency", marginal_consistency}},
      {8, {"reproducible from manifests", [&] { return reproducible(w); }}},
  };

  int failed = 0;
  for (int id : wanted) {
    const auto& [title, check] = criteria.at(id);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << title << "  [" << num(dt) << "s]  "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
