// fmfi: command-line front end for synthetic data generation, encoder
// distillation, evaluation and diagnostics.
//
// Exit codes: 0 success, 2 usage, 3 data error, 4 runtime error.

#include "fmfi/pipeline.hpp"
#include "fmfi/synthetic.hpp"

#include <CLI11.hpp>
#include <malloc.h>
#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using fmfi::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

std::string sha256_file(const fs::path& path) {
  const std::string bytes = fmfi::read_file(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed for " + path.string());
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Everything needed to rerun a command: every flag (explicit or default),
// and content hashes of the files it read and wrote.
class Manifest {
 public:
  Manifest(const CLI::App& sub, std::vector<std::string> argv) : command_(sub.get_name()), argv_(std::move(argv)) {
    for (const CLI::Option* opt : sub.get_options()) {
      if (opt->get_name() == "--help") continue;
      std::string name = opt->get_name();
      while (!name.empty() && name.front() == '-') name.erase(name.begin());
      if (opt->get_type_size() == 0) {
        flags_[name] = opt->count() > 0;
      } else {
        flags_[name] = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
      }
    }
    started_ = utc_now();
  }

  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }
  void note(const std::string& key, json value) { extra_[key] = std::move(value); }

  void write(const fs::path& path) const {
    json j{{"command", command_}, {"argv", argv_}, {"flags", flags_}, {"started_at", started_},
           {"finished_at", utc_now()}};
    auto hashes = [](const std::vector<fs::path>& files) {
      json h = json::object();
      for (const fs::path& f : files) h[f.string()] = fs::exists(f) ? json(sha256_file(f)) : json(nullptr);
      return h;
    };
    j["inputs"] = hashes(inputs_);
    j["outputs"] = hashes(outputs_);
    if (!extra_.empty()) j["notes"] = extra_;
    fmfi::atomic_write(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  json flags_ = json::object();
  std::string started_;
  std::vector<fs::path> inputs_, outputs_;
  json extra_ = json::object();
};

fmfi::Dataset load_dataset(const fs::path& path) {
  auto r = fmfi::load_paired(path);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  return std::move(r.items);
}

fmfi::AnchorMatrix load_anchor_matrix(const fs::path& path) {
  auto r = fmfi::load_anchors(path);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  return fmfi::AnchorMatrix(r.items);
}

fmfi::Dataset select_split(const fmfi::Dataset& data, const std::string& split) {
  if (split == "all") return data;
  fmfi::Split s = fmfi::split_by_time(data, 0.9);
  return split == "validation" ? std::move(s.validation) : std::move(s.test);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw fmfi::Error(fmfi::ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
}

json summary_json(const fmfi::EvalOutcome& out, const std::string& mode, const std::string& split) {
  json j = fmfi::to_json(out.report);
  j["mode"] = mode;
  j["split"] = split;
  j["dropped"] = out.dropped;
  j["end_to_end_accuracy"] = out.end_to_end_accuracy;
  return j;
}

// Writes a |a - b| heatmap as a binary PGM, 0 = black, 1 = white.
void write_heatmap(const fs::path& path, const fmfi::MatD& a, const fmfi::MatD& b) {
  std::string img = "P5\n" + std::to_string(a.cols()) + " " + std::to_string(a.rows()) + "\n255\n";
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c)
      img += static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(std::abs(a(r, c) - b(r, c)), 0.0, 1.0) * 255.0)));
  fmfi::atomic_write(path, img);
}

struct TrainFlags {
  std::string data, anchors, val, out, metrics;
  double tau = 10.0, lr = 1e-3, v_thresh = 0.0;
  int epochs = 30, batch = 256, validate_every = 1;
  std::uint64_t seed = 1;
  bool symmetric = false;
};

void add_train_flags(CLI::App* sub, TrainFlags& f, bool need_out) {
  sub->add_option("--data", f.data, "Paired JSONL used for distillation (labels ignored)")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--anchors", f.anchors, "Anchor JSONL for validation accuracy")->check(CLI::ExistingFile);
  sub->add_option("--val", f.val, "Labeled paired JSONL; its validation split is scored every epoch")
      ->check(CLI::ExistingFile);
  sub->add_option("--tau", f.tau, "Contrastive temperature")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
  sub->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::NonNegativeNumber)->capture_default_str();
  sub->add_option("--batch", f.batch, "Minibatch size")->check(CLI::Range(2, 1 << 20))->capture_default_str();
  sub->add_option("--seed", f.seed, "Seed for initialization, shuffling, dropout and resampling")
      ->capture_default_str();
  sub->add_option("--v-thresh", f.v_thresh, "Doppler filter threshold, m/s")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->add_option("--validate-every", f.validate_every, "Epochs between validation passes, 0 = never")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->add_flag("--symmetric", f.symmetric, "Use the symmetric contrastive loss");
  if (need_out) sub->add_option("--out", f.out, "Checkpoint path")->required();
}

fmfi::PipelineConfig pipeline_config(const TrainFlags& f, fmfi::LossKind loss) {
  fmfi::PipelineConfig cfg;
  cfg.ckd.tau = f.tau;
  cfg.ckd.batch_size = f.batch;
  cfg.ckd.direction = f.symmetric ? fmfi::CkdDirection::Symmetric : fmfi::CkdDirection::OneWay;
  cfg.train.learning_rate = f.lr;
  cfg.train.epochs = f.epochs;
  cfg.train.seed = f.seed;
  cfg.train.loss = loss;
  cfg.train.validate_every = f.validate_every;
  cfg.v_thresh = f.v_thresh;
  return cfg;
}

struct TrainInputs {
  fmfi::Dataset pool;
  fmfi::Dataset validation;
  std::optional<fmfi::AnchorMatrix> anchors;
};

TrainInputs load_train_inputs(const TrainFlags& f, Manifest& m) {
  TrainInputs in;
  in.pool = load_dataset(f.data);
  for (auto& s : in.pool) s.label.reset();
  m.input(f.data);
  if (!f.anchors.empty()) {
    in.anchors = load_anchor_matrix(f.anchors);
    m.input(f.anchors);
  }
  if (!f.val.empty()) {
    in.validation = fmfi::split_by_time(load_dataset(f.val), 0.9).validation;
    if (!in.anchors)
      for (auto& s : in.validation) s.label.reset();
    m.input(f.val);
  }
  return in;
}

fmfi::PipelineResult<float> run_train(const TrainInputs& in, const fmfi::PipelineConfig& cfg,
                                      const fs::path& metrics_path) {
  fmfi::atomic_write(metrics_path, "");
  fmfi::TrainHooks<float> hooks;
  hooks.on_epoch = [&metrics_path](const fmfi::EpochRecord& r) {
    std::ofstream log(metrics_path, std::ios::app);
    log << fmfi::to_json(r).dump() << "\n";
    if (!log) throw fmfi::Error(fmfi::ErrorKind::Io, "cannot append to " + metrics_path.string());
    std::cerr << fmfi::to_json(r).dump() << "\n";
  };
  return fmfi::run_training<float>(in.pool, cfg, in.validation.empty() ? nullptr : &in.validation,
                                   in.anchors ? &*in.anchors : nullptr, hooks);
}

int exit_code_for(fmfi::ErrorKind k) {
  switch (k) {
    case fmfi::ErrorKind::Usage:
      return kExitUsage;
    case fmfi::ErrorKind::Io:
      return kExitRuntime;
    default:
      return kExitData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees many large matrices; keep them on the heap
  // instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Cross-modal distillation of an RF point-cloud encoder"};
  app.require_subcommand(1);
  std::function<void(Manifest&)> run;
  CLI::App* chosen = nullptr;
  auto bind = [&](CLI::App* sub, std::function<void(Manifest&)> body) {
    sub->callback([&, sub, body] {
      chosen = sub;
      run = body;
    });
  };

  // synth-gen
  fmfi::SyntheticSpec spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic paired dataset and anchors");
  synth->add_option("--classes", spec.n_classes, "Number of activity classes")->check(CLI::Range(2, 1000))->capture_default_str();
  synth->add_option("--per-class", spec.samples_per_class, "Samples per class in each pool")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--seed", spec.seed, "World seed")->capture_default_str();
  synth->add_option("--sigma", spec.embedding_noise_sigma, "Teacher embedding noise")->check(CLI::NonNegativeNumber)->capture_default_str();
  synth->add_option("--static-points", spec.n_static_points, "Static clutter points per frame")->check(CLI::NonNegativeNumber)->capture_default_str();
  synth->add_option("--distractors", spec.n_dynamic_distractors, "Moving distractors per frame")->check(CLI::NonNegativeNumber)->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();
  bind(synth, [&](Manifest& m) {
    const fs::path dir(synth_out);
    ensure_dir(dir);
    fmfi::SyntheticSpec s = spec;
    s.stream = 0;
    fmfi::SyntheticDataset pool = fmfi::gen_dataset(s);
    for (auto& p : pool.samples) p.label.reset();
    s.stream = 1;
    const fmfi::SyntheticDataset labeled = fmfi::gen_dataset(s);
    fmfi::write_paired(dir / "ckd.jsonl", pool.samples);
    fmfi::write_paired(dir / "labeled.jsonl", labeled.samples);
    fmfi::write_anchors(dir / "anchors.jsonl", labeled.anchors);
    const json info{{"oracle_zero_shot_bound", fmfi::oracle_zero_shot_bound(s)},
                    {"ckd_samples", pool.samples.size()},
                    {"labeled_samples", labeled.samples.size()}};
    fmfi::atomic_write(dir / "synth.json", info.dump(2) + "\n");
    for (const char* f : {"ckd.jsonl", "labeled.jsonl", "anchors.jsonl", "synth.json"}) m.output(dir / f);
    m.write(dir / "manifest.json");
    std::cout << info.dump() << "\n";
  });

  // train
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Distill the teacher into the RF encoder");
  add_train_flags(train, tf, true);
  train->add_option("--metrics", tf.metrics, "Metrics JSONL (default: <out>.metrics.jsonl)");
  bind(train, [&](Manifest& m) {
    const fs::path out(tf.out);
    const fs::path metrics = tf.metrics.empty() ? fs::path(tf.out + ".metrics.jsonl") : fs::path(tf.metrics);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    const TrainInputs in = load_train_inputs(tf, m);
    const auto result = run_train(in, pipeline_config(tf, fmfi::LossKind::CKD), metrics);
    fmfi::save_checkpoint(out, result.checkpoint);
    m.note("dropped_train_frames", result.dropped_train);
    m.output(out);
    m.output(metrics);
    m.write(tf.out + ".manifest.json");
    json summary{{"checkpoint", out.string()}, {"epochs", result.log.size()}, {"dropped_train_frames", result.dropped_train}};
    if (!result.log.empty()) summary["final"] = fmfi::to_json(result.log.back());
    std::cout << summary.dump() << "\n";
  });

  // eval-zero-shot / eval-few-shot
  struct EvalFlags {
    std::string data, anchors, ckpt, out, split = "test", support;
    int shots = 1, episodes = 10;
    double gamma = 5.5;
    std::uint64_t seed = 1;
  } ef;
  auto add_eval_flags = [&ef](CLI::App* sub) {
    sub->add_option("--data", ef.data, "Labeled paired JSONL")->required()->check(CLI::ExistingFile);
    sub->add_option("--anchors", ef.anchors, "Anchor JSONL")->required()->check(CLI::ExistingFile);
    sub->add_option("--ckpt", ef.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", ef.out, "Output directory")->required();
    sub->add_option("--split", ef.split, "Which part of --data to score")
        ->check(CLI::IsMember({"test", "validation", "all"}))
        ->capture_default_str();
    sub->add_option("--seed", ef.seed, "Seed for resampling and support draws")->capture_default_str();
  };
  auto run_eval = [&](Manifest& m, const fmfi::EvalMode& mode, const std::string& mode_name) {
    const fs::path dir(ef.out);
    ensure_dir(dir);
    const fmfi::Dataset all = load_dataset(ef.data);
    const fmfi::AnchorMatrix anchors = load_anchor_matrix(ef.anchors);
    const auto ck = fmfi::load_checkpoint<float>(ef.ckpt);
    m.input(ef.data);
    m.input(ef.anchors);
    m.input(ef.ckpt);
    const fmfi::Dataset queries = select_split(all, ef.split);
    std::optional<fmfi::Dataset> support;
    if (mode.shots > 0) {
      if (!ef.support.empty()) {
        support = load_dataset(ef.support);
        m.input(ef.support);
      } else if (ef.split == "test") {
        support = fmfi::split_by_time(all, 0.9).validation;
      } else {
        throw fmfi::Error(fmfi::ErrorKind::MissingSupport,
                          "pass --support when scoring a split other than test");
      }
    }
    const fmfi::EvalOutcome out =
        fmfi::evaluate_dataset<float>(queries, ck, anchors, mode, ef.seed, support ? &*support : nullptr);
    json summary = summary_json(out, mode_name, ef.split);
    if (mode.shots > 0) {
      summary["gamma"] = mode.gamma;
      summary["episodes"] = mode.episodes;
    }
    fmfi::atomic_write(dir / "confusion.csv", fmfi::confusion_csv(out.report));
    fmfi::atomic_write(dir / "summary.json", summary.dump(2) + "\n");
    m.output(dir / "confusion.csv");
    m.output(dir / "summary.json");
    m.write(dir / "manifest.json");
    std::cout << summary.dump() << "\n";
  };

  auto* zs = app.add_subcommand("eval-zero-shot", "Zero-shot accuracy against the anchors");
  add_eval_flags(zs);
  bind(zs, [&](Manifest& m) { run_eval(m, fmfi::EvalMode{}, "zero-shot"); });

  auto* fsh = app.add_subcommand("eval-few-shot", "K-shot accuracy with the weighted anchor term");
  add_eval_flags(fsh);
  fsh->add_option("--shots", ef.shots, "Support samples per class")->check(CLI::Range(1, 3))->capture_default_str();
  fsh->add_option("--gamma", ef.gamma, "Weight of the anchor term")->check(CLI::NonNegativeNumber)->capture_default_str();
  fsh->add_option("--episodes", ef.episodes, "Support draws averaged")->check(CLI::PositiveNumber)->capture_default_str();
  fsh->add_option("--support", ef.support, "Labeled JSONL to draw supports from (default: validation split of --data)")
      ->check(CLI::ExistingFile);
  bind(fsh, [&](Manifest& m) {
    run_eval(m, fmfi::EvalMode{ef.shots, ef.gamma, ef.episodes}, std::to_string(ef.shots) + "-shot");
  });

  // diag-correlation
  struct DiagFlags {
    std::string data, ckpt, out, heatmap, split = "all";
    std::uint64_t seed = 1;
    bool full = false;
  } df;
  auto* diag = app.add_subcommand("diag-correlation", "Teacher vs student embedding correlation structure");
  diag->add_option("--data", df.data, "Paired JSONL")->required()->check(CLI::ExistingFile);
  diag->add_option("--ckpt", df.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  diag->add_option("--out", df.out, "Output directory")->required();
  diag->add_option("--split", df.split, "Which part of --data to use")
      ->check(CLI::IsMember({"test", "validation", "all"}))
      ->capture_default_str();
  diag->add_option("--heatmap", df.heatmap, "Also write |R_teacher - R_student| as a PGM image");
  diag->add_option("--seed", df.seed, "Seed for resampling")->capture_default_str();
  diag->add_flag("--full", df.full, "Include both correlation matrices in the report");
  bind(diag, [&](Manifest& m) {
    const fs::path dir(df.out);
    ensure_dir(dir);
    const fmfi::Dataset data = select_split(load_dataset(df.data), df.split);
    const auto ck = fmfi::load_checkpoint<float>(df.ckpt);
    m.input(df.data);
    m.input(df.ckpt);
    const fmfi::EmbeddedSet e = fmfi::embed_dataset<float>(data, ck, df.seed, false);
    if (e.teacher.rows() < 2)
      throw fmfi::Error(fmfi::ErrorKind::InsufficientSamples, "correlation needs at least two frames");
    const fmfi::CorrelationReport rep = fmfi::correlation_report(e.teacher, e.labeled.embeddings);
    json j{{"mean_abs_diff", rep.mean_abs_diff},
           {"n_samples", e.teacher.rows()},
           {"dim", e.teacher.cols()},
           {"dropped", e.dropped},
           {"degenerate_teacher", rep.degenerate_teacher},
           {"degenerate_student", rep.degenerate_student}};
    if (df.full) {
      auto rows = [](const fmfi::MatD& r) {
        json a = json::array();
        for (Eigen::Index i = 0; i < r.rows(); ++i)
          a.push_back(std::vector<double>(r.row(i).data(), r.row(i).data() + r.cols()));
        return a;
      };
      j["r_teacher"] = rows(rep.r_teacher);
      j["r_student"] = rows(rep.r_student);
    }
    fmfi::atomic_write(dir / "correlation.json", j.dump() + "\n");
    m.output(dir / "correlation.json");
    if (!df.heatmap.empty()) {
      write_heatmap(df.heatmap, rep.r_teacher, rep.r_student);
      m.output(df.heatmap);
    }
    m.write(dir / "manifest.json");
    std::cout << json{{"mean_abs_diff", rep.mean_abs_diff}, {"n_samples", e.teacher.rows()}}.dump() << "\n";
  });

  // filter
  double filter_v = 0.0;
  std::string filter_in, filter_out;
  auto* filt = app.add_subcommand("filter", "Drop points with |doppler| <= threshold");
  filt->add_option("--v-thresh", filter_v, "Doppler threshold, m/s")->check(CLI::NonNegativeNumber)->capture_default_str();
  filt->add_option("--in", filter_in, "Paired JSONL")->required()->check(CLI::ExistingFile);
  filt->add_option("--out", filter_out, "Filtered paired JSONL")->required();
  bind(filt, [&](Manifest& m) {
    fmfi::Dataset data = load_dataset(filter_in);
    std::size_t emptied = 0, removed = 0;
    for (auto& s : data) {
      const std::size_t before = s.frame.points.size();
      s.frame = fmfi::doppler_filter(s.frame, filter_v);
      removed += before - s.frame.points.size();
      if (s.frame.points.empty() && before > 0) ++emptied;
    }
    fmfi::write_paired(filter_out, data);
    m.input(filter_in);
    m.output(filter_out);
    m.note("points_removed", removed);
    m.note("frames_emptied", emptied);
    m.write(filter_out + ".manifest.json");
    if (emptied > 0) std::cerr << "warning: " << emptied << " frames have no points left\n";
    std::cout << json{{"records", data.size()}, {"points_removed", removed}, {"frames_emptied", emptied}}.dump()
              << "\n";
  });

  // compare-losses
  TrainFlags cf;
  std::string compare_out;
  auto* cmp = app.add_subcommand("compare-losses", "Train with CKD and with MSE-KD from the same seed and compare");
  add_train_flags(cmp, cf, false);
  cmp->add_option("--out", compare_out, "Output directory")->required();
  bind(cmp, [&](Manifest& m) {
    if (cf.anchors.empty() || cf.val.empty())
      throw fmfi::Error(fmfi::ErrorKind::Usage, "compare-losses needs --anchors and --val");
    const fs::path dir(compare_out);
    ensure_dir(dir);
    const TrainInputs in = load_train_inputs(cf, m);
    const fmfi::Dataset labeled = load_dataset(cf.val);
    const fmfi::Dataset test = fmfi::split_by_time(labeled, 0.9).test;
    json report = json::object();
    for (fmfi::LossKind kind : {fmfi::LossKind::CKD, fmfi::LossKind::MSE}) {
      const std::string name = fmfi::to_string(kind);
      const fs::path metrics = dir / (name + ".metrics.jsonl");
      const auto result = run_train(in, pipeline_config(cf, kind), metrics);
      const fs::path ckpt = dir / (name + ".ckpt");
      fmfi::save_checkpoint(ckpt, result.checkpoint);
      const fmfi::EvalOutcome ev = fmfi::evaluate_dataset<float>(test, result.checkpoint, *in.anchors, fmfi::EvalMode{}, cf.seed);
      // Correlation over the whole labeled pool so there are more samples
      // than embedding dimensions.
      const fmfi::EmbeddedSet e = fmfi::embed_dataset<float>(labeled, result.checkpoint, cf.seed, false);
      const double corr = fmfi::correlation_report(e.teacher, e.labeled.embeddings).mean_abs_diff;
      report[name] = {{"accuracy", ev.report.accuracy},
                      {"end_to_end_accuracy", ev.end_to_end_accuracy},
                      {"mean_abs_corr_diff", corr},
                      {"final_loss", result.log.empty() ? json(nullptr) : json(result.log.back().loss)}};
      m.output(metrics);
      m.output(ckpt);
    }
    fmfi::atomic_write(dir / "compare.json", report.dump(2) + "\n");
    m.output(dir / "compare.json");
    m.write(dir / "manifest.json");
    std::cout << report.dump() << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }
  try {
    Manifest manifest(*chosen, args);
    run(manifest);
  } catch (const fmfi::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
