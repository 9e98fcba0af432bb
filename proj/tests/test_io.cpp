#include "fmfi/io.hpp"
#include "fmfi/synthetic.hpp"

#include "helpers.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <sys/wait.h>
#include <unistd.h>

using namespace fmfi;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("fmfi_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string vector_json(std::size_t n, double v = 0.1) {
  std::string s = "[";
  for (std::size_t i = 0; i < n; ++i) s += (i ? "," : "") + std::to_string(v);
  return s + "]";
}

std::string record(std::size_t dim, const std::string& extra = "") {
  return R"({"frame":[[0.1,0.2,0.3,0.5,1.0]],"teacher_embedding":)" + vector_json(dim) + R"(,"timestamp_ms":0)" +
         extra + "}\n";
}

}  // namespace

TEST(Jsonl, RoundTripsGeneratedData) {
  TempDir dir;
  SyntheticSpec spec;
  spec.samples_per_class = 4;
  const auto d = gen_dataset(spec);
  write_paired(dir / "d.jsonl", d.samples);
  write_anchors(dir / "a.jsonl", d.anchors);
  const auto loaded = load_paired(dir / "d.jsonl");
  EXPECT_EQ(loaded.items, d.samples);
  EXPECT_TRUE(loaded.warnings.empty());
  const auto anchors = load_anchors(dir / "a.jsonl");
  ASSERT_EQ(anchors.items.size(), d.anchors.size());
  for (std::size_t i = 0; i < d.anchors.size(); ++i) {
    EXPECT_EQ(anchors.items[i].class_name, d.anchors[i].class_name);
    EXPECT_EQ(anchors.items[i].embedding, d.anchors[i].embedding);
  }
}

TEST(Jsonl, ShortEmbeddingNamesTheLine) {
  TempDir dir;
  write_text(dir / "d.jsonl", record(512) + "\n" + record(511));
  try {
    load_paired(dir / "d.jsonl");
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("511"), std::string::npos);
  }
}

TEST(Jsonl, RejectsBadValues) {
  TempDir dir;
  write_text(dir / "nan.jsonl", R"({"frame":[],"teacher_embedding":[1e999],"timestamp_ms":0})"
                                "\n");
  EXPECT_THROW(load_paired(dir / "nan.jsonl", 1), SchemaError);
  write_text(dir / "neg.jsonl", R"({"frame":[[0,0,0,0,-1]],"teacher_embedding":[1],"timestamp_ms":0})"
                                "\n");
  EXPECT_THROW(load_paired(dir / "neg.jsonl", 1), SchemaError);
  write_text(dir / "bad.jsonl", "{not json\n");
  EXPECT_THROW(load_paired(dir / "bad.jsonl", 1), SchemaError);
  write_text(dir / "ts.jsonl", R"({"frame":[],"teacher_embedding":[1]})"
                               "\n");
  EXPECT_THROW(load_paired(dir / "ts.jsonl", 1), SchemaError);
}

TEST(Jsonl, LabelIsOptional) {
  TempDir dir;
  write_text(dir / "d.jsonl", record(4) + record(4, R"(,"label":"walking")"));
  const auto r = load_paired(dir / "d.jsonl", 4);
  ASSERT_EQ(r.items.size(), 2u);
  EXPECT_FALSE(r.items[0].label);
  EXPECT_EQ(*r.items[1].label, "walking");
}

TEST(Jsonl, EmptyFileWarns) {
  TempDir dir;
  write_text(dir / "d.jsonl", "\n");
  const auto r = load_paired(dir / "d.jsonl");
  EXPECT_TRUE(r.items.empty());
  EXPECT_EQ(r.warnings.size(), 1u);
}

TEST(Jsonl, MissingFileIsIoError) {
  try {
    load_paired("/nonexistent/fmfi.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(Anchors, DuplicateClassIsRejected) {
  TempDir dir;
  const std::string line = R"({"class":"walking","embedding":[1,0]})"
                           "\n";
  write_text(dir / "a.jsonl", line + line);
  try {
    load_anchors(dir / "a.jsonl", 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DuplicateClass);
  }
}

TEST(Anchors, PromptDefaultsFromClass) {
  TempDir dir;
  write_text(dir / "a.jsonl", R"({"class":"sitting","embedding":[1,0]})"
                              "\n");
  EXPECT_EQ(load_anchors(dir / "a.jsonl", 2).items[0].prompt, "A person sitting");
}

TEST(Checkpoint, SaveLoadSaveIsBitwiseStable) {
  TempDir dir;
  Rng rng(1);
  Checkpoint<float> ck{init_encoder<float>(EncoderConfig{}, 5), PreprocessConfig{}};
  fmfi::testing::perturb(ck.params, rng, 0.1);
  ck.preprocess.v_thresh = 0.25;
  ck.preprocess.intensity = {1.5, 0.75};
  save_checkpoint(dir / "a.bin", ck);
  const auto loaded = load_checkpoint<float>(dir / "a.bin");
  save_checkpoint(dir / "b.bin", loaded);
  EXPECT_EQ(read_file(dir / "a.bin"), read_file(dir / "b.bin"));
  EXPECT_EQ(loaded.preprocess.v_thresh, 0.25);
  EXPECT_EQ(loaded.preprocess.intensity.stddev, 0.75);
}

TEST(Checkpoint, CorruptionIsSchemaError) {
  Checkpoint<float> ck{init_encoder<float>(fmfi::testing::tiny_config(), 5), PreprocessConfig{}};
  const std::string good = serialize_checkpoint(ck);
  for (const std::string& bad : {std::string("garbage"), good.substr(0, good.size() - 3), good + "x"}) {
    try {
      deserialize_checkpoint<float>(bad);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::SchemaError);
    }
  }
}

TEST(Checkpoint, DoubleReaderAcceptsFloatFile) {
  Checkpoint<float> ck{init_encoder<float>(fmfi::testing::tiny_config(), 6), PreprocessConfig{}};
  const auto d = deserialize_checkpoint<double>(serialize_checkpoint(ck));
  EXPECT_EQ(d.params.lift.w.cast<float>(), ck.params.lift.w);
}

TEST(SplitByTime, SingleCutInTimeOrder) {
  Dataset data;
  for (int i = 0; i < 20; ++i) {
    PairedSample s;
    s.timestamp_ms = (i * 7) % 20 * 200;
    s.teacher = {static_cast<double>(i)};
    data.push_back(s);
  }
  const Split s = split_by_time(data, 0.9);
  EXPECT_EQ(s.validation.size(), 18u);
  EXPECT_EQ(s.test.size(), 2u);
  for (const auto& v : s.validation)
    for (const auto& t : s.test) EXPECT_LT(v.timestamp_ms, t.timestamp_ms);
  EXPECT_TRUE(split_by_time(data, 1.0).test.empty());
  EXPECT_THROW(split_by_time(data, 1.5), Error);
}

TEST(Cli, UntrainedCheckpointIsInitialization) {
  TempDir dir;
  const std::string cli = FMFI_CLI_PATH;
  const std::string prefix = cli + " synth-gen --per-class 3 --out " + (dir / "data").string() + " > /dev/null";
  ASSERT_EQ(std::system(prefix.c_str()), 0);
  const std::string train = cli + " train --data " + (dir / "data" / "ckd.jsonl").string() + " --epochs 0 --out " +
                            (dir / "ck.bin").string() + " > /dev/null";
  ASSERT_EQ(std::system(train.c_str()), 0);
  const auto ck = load_checkpoint<float>(dir / "ck.bin");
  const auto init = init_encoder<float>(EncoderConfig{}, derive_seed(1, 0x1417));
  const auto a = ck.params.named_params();
  const auto b = init.named_params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second) << a[i].first;
  const auto ra = ck.params.named_buffers();
  const auto rb = init.named_buffers();
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(*ra[i].second, *rb[i].second) << ra[i].first;
}

TEST(Cli, ExitCodes) {
  const std::string cli = FMFI_CLI_PATH;
  auto rc = [](const std::string& cmd) {
    const int s = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(rc(cli + " no-such-command"), 2);
  EXPECT_EQ(rc(cli + " train --data /nonexistent.jsonl --out /tmp/x.bin"), 2);
  TempDir dir;
  write_text(dir / "bad.jsonl", "{broken\n");
  EXPECT_EQ(rc(cli + " train --data " + (dir / "bad.jsonl").string() + " --out " + (dir / "c.bin").string()), 3);
}
