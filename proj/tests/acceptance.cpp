// Acceptance runner: prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. End-to-end checks drive the fmfi CLI.
//
//   acceptance [--work-dir DIR] [--only NAME]

#include "fmfi/distill.hpp"

#include "oracles.hpp"

#include <malloc.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Directional checks train on a smaller world than the end-to-end run so the
// whole suite stays within a single-core budget.
constexpr int kSmallPerClass = 200;
constexpr int kSmallEpochs = 15;
const std::vector<int> kSeeds{1, 2, 3};

fs::path g_work;
const std::string g_cli = FMFI_CLI_PATH;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void run(const std::string& args) {
  const fs::path log = g_work / "cli.log";
  const std::string cmd = g_cli + " " + args + " >> " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
    throw std::runtime_error("command failed (" + std::to_string(WEXITSTATUS(status)) + "): fmfi " + args);
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return json::parse(in);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

// Synthetic world with unlabeled distillation pool and labeled pool.
fs::path world(int per_class, int seed) {
  const fs::path dir = g_work / ("world_" + std::to_string(per_class) + "_" + std::to_string(seed));
  if (!fs::exists(dir / "synth.json"))
    run("synth-gen --classes 5 --per-class " + std::to_string(per_class) + " --seed " + std::to_string(seed) +
        " --out " + dir.string());
  return dir;
}

std::string train_args(const fs::path& w, int epochs, int seed) {
  return "train --data " + (w / "ckd.jsonl").string() + " --anchors " + (w / "anchors.jsonl").string() + " --val " +
         (w / "labeled.jsonl").string() + " --tau 10 --lr 0.001 --batch 256 --epochs " + std::to_string(epochs) +
         " --seed " + std::to_string(seed);
}

json eval(const std::string& kind, const fs::path& w, const fs::path& ckpt, const fs::path& out,
          const std::string& extra = "") {
  run(kind + " --data " + (w / "labeled.jsonl").string() + " --anchors " + (w / "anchors.jsonl").string() +
      " --ckpt " + ckpt.string() + " --out " + out.string() + " --split test " + extra);
  return read_json(out / "summary.json");
}

Outcome gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto check = fmfi::testing::gradient_check();
  const double secs = seconds_since(t0);
  return {check.max_rel_error < 1e-4 && secs < 30.0,
          "max_rel_error=" + std::to_string(check.max_rel_error) + " over " + std::to_string(check.checked) +
              " parameters (worst " + check.worst + "), " + fmt(secs, 1) + " s"};
}

Outcome permutation_invariance() {
  const int bad = fmfi::testing::permutation_mismatches(100, 10);
  return {bad == 0, std::to_string(bad) + " of 100 frames changed under 10 permutations"};
}

Outcome ckd_identities() {
  using fmfi::MatD;
  const MatD one = MatD::Random(1, 512);
  const double single = fmfi::ckd_loss<double>(one, MatD(MatD::Random(1, 512)), 10.0).value;
  const MatD same = MatD::Constant(16, 512, 0.25);
  const double collapse = fmfi::ckd_loss<double>(same, same, 10.0).value;
  const MatD eye = MatD::Identity(2, 2);
  const double ortho = fmfi::ckd_loss<double>(eye, eye, 1.0).value;
  const bool ok = single == 0.0 && std::abs(collapse - std::log(16.0)) < 1e-9 && std::abs(ortho - 0.313262) < 1e-6;
  return {ok, "N=1 " + std::to_string(single) + ", collapse-log16 " + std::to_string(collapse - std::log(16.0)) +
                  ", orthonormal " + fmt(ortho, 7)};
}

Outcome end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path w = g_work / "e2e";
  run("synth-gen --classes 5 --per-class 400 --seed 1 --out " + w.string());
  run(train_args(w, 30, 1) + " --out " + (w / "model.bin").string());
  const json s = eval("eval-zero-shot", w, w / "model.bin", w / "zero_shot");
  const double secs = seconds_since(t0);
  const double acc = s.at("accuracy");
  const double bound = read_json(w / "synth.json").at("oracle_zero_shot_bound");
  return {acc >= 0.90 && bound >= 0.99 && secs < 600.0,
          "accuracy=" + fmt(acc) + " oracle=" + fmt(bound) + " runtime=" + fmt(secs, 1) + " s"};
}

Outcome ckd_beats_mse() {
  bool ok = true;
  std::string detail;
  for (int seed : kSeeds) {
    const fs::path w = world(kSmallPerClass, seed);
    const fs::path out = g_work / ("compare_" + std::to_string(seed));
    std::string args = train_args(w, kSmallEpochs, seed);
    args.replace(0, 5, "compare-losses");
    run(args + " --out " + out.string());
    const json c = read_json(out / "compare.json");
    const double ca = c["ckd"]["accuracy"], ma = c["mse"]["accuracy"];
    const double cr = c["ckd"]["mean_abs_corr_diff"], mr = c["mse"]["mean_abs_corr_diff"];
    ok = ok && ca > ma && cr < mr;
    detail += "seed " + std::to_string(seed) + ": acc " + fmt(ca) + " vs " + fmt(ma) + ", |dR| " + fmt(cr) + " vs " +
              fmt(mr) + "; ";
  }
  return {ok, detail};
}

Outcome few_shot_monotone() {
  bool ok = true;
  std::string detail;
  for (int seed : kSeeds) {
    const fs::path w = world(kSmallPerClass, seed);
    // Reuses the contrastive checkpoint of the loss comparison when present.
    fs::path ckpt = g_work / ("compare_" + std::to_string(seed)) / "ckd.ckpt";
    if (!fs::exists(ckpt)) {
      ckpt = g_work / ("fewshot_" + std::to_string(seed) + ".ckpt");
      run(train_args(w, kSmallEpochs, seed) + " --out " + ckpt.string());
    }
    const fs::path base = g_work / ("fewshot_" + std::to_string(seed));
    const double z = eval("eval-zero-shot", w, ckpt, base / "zero").at("accuracy");
    const double one = eval("eval-few-shot", w, ckpt, base / "one", "--shots 1 --gamma 5.5").at("accuracy");
    const double three = eval("eval-few-shot", w, ckpt, base / "three", "--shots 3 --gamma 5.5").at("accuracy");
    ok = ok && three >= one && one >= z;
    detail += "seed " + std::to_string(seed) + ": " + fmt(three) + " >= " + fmt(one) + " >= " + fmt(z) + "; ";
  }
  return {ok, detail};
}

Outcome doppler_sweep() {
  const fs::path w = world(kSmallPerClass, 1);
  double acc[2];
  const char* thresholds[2] = {"0", "0.8"};
  std::string detail;
  for (int i = 0; i < 2; ++i) {
    const fs::path ckpt = g_work / ("sweep_" + std::string(thresholds[i]) + ".bin");
    run(train_args(w, kSmallEpochs, 1) + " --v-thresh " + thresholds[i] + " --out " + ckpt.string());
    const json s = eval("eval-zero-shot", w, ckpt, g_work / ("sweep_" + std::string(thresholds[i])));
    acc[i] = s.at("end_to_end_accuracy");
    detail += "v=" + std::string(thresholds[i]) + ": " + fmt(acc[i]) + " (" + std::to_string(s.at("dropped").get<int>()) +
              " frames emptied); ";
  }
  return {acc[0] >= acc[1], detail};
}

Outcome determinism() {
  std::string logs[2], summaries[2], models[2], data[2];
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = g_work / ("determinism_" + std::to_string(r));
    fs::remove_all(dir);
    run("synth-gen --classes 5 --per-class 100 --seed 4 --out " + (dir / "world").string());
    run(train_args(dir / "world", 5, 4) + " --out " + (dir / "model.bin").string());
    eval("eval-zero-shot", dir / "world", dir / "model.bin", dir / "eval");
    // Wall-clock time is the only field allowed to differ between runs.
    std::istringstream in(read_text(dir / "model.bin.metrics.jsonl"));
    for (std::string line; std::getline(in, line);) {
      json j = json::parse(line);
      j.erase("wall_ms");
      logs[r] += j.dump() + "\n";
    }
    summaries[r] = read_text(dir / "eval" / "summary.json");
    models[r] = read_text(dir / "model.bin");
    data[r] = read_text(dir / "world" / "ckd.jsonl") + read_text(dir / "world" / "labeled.jsonl");
  }
  const bool ok = !logs[0].empty() && logs[0] == logs[1] && summaries[0] == summaries[1] && models[0] == models[1] &&
                  data[0] == data[1];
  return {ok, std::string("metrics ") + (logs[0] == logs[1] ? "identical" : "differ") + ", checkpoint " +
                  (models[0] == models[1] ? "identical" : "differs") + ", eval " +
                  (summaries[0] == summaries[1] ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  g_work = fs::temp_directory_path() / "fmfi_acceptance";
  std::string only;
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string key = argv[i];
    if (key == "--work-dir") g_work = argv[i + 1];
    else if (key == "--only") only = argv[i + 1];
  }
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient_oracle", gradient_oracle},
      {"permutation_invariance", permutation_invariance},
      {"ckd_loss_identities", ckd_identities},
      {"end_to_end_synthetic", end_to_end},
      {"ckd_beats_mse", ckd_beats_mse},
      {"few_shot_monotonicity", few_shot_monotone},
      {"doppler_threshold_sweep", doppler_sweep},
      {"determinism", determinism},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && name != only) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt(seconds_since(t0), 1) << " s]"
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
