#include "cli.hpp"

#include "metadistil/error.hpp"
#include "metadistil/io.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <filesystem>
#include <sstream>

using namespace metadistil;
using namespace metadistil::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("metadistil_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const char* kMinimal = R"([teacher]
layers = 2-16-3
[student]
layers = 2-8-3
[distill]
mode = metadistil
steps = 10
)";

std::string small_config(const fs::path& out, const std::string& mode, std::size_t steps, double mu = 0.01,
                         std::uint64_t seed = 0, std::uint64_t data_seed = 0) {
  std::ostringstream os;
  os << "[data]\nper_class = 60\nseed = " << data_seed << "\n"
     << "[teacher]\nlayers = 2-16-3\npretrain_steps = 100\n"
     << "[student]\nlayers = 2-8-3\n"
     << "[distill]\nmode = " << mode << "\nsteps = " << steps << "\nmu = " << mu << "\nseed = " << seed
     << "\neval_interval = 5\n"
     << "[output]\ndirectory = " << out.string() << "\n";
  return os.str();
}

ExperimentFile train_run(const fs::path& out, const std::string& mode, std::size_t steps, double mu = 0.01,
                         std::uint64_t seed = 0, std::uint64_t data_seed = 0) {
  ExperimentFile c = parse_config_text(small_config(out, mode, steps, mu, seed, data_seed));
  std::ostringstream log;
  cmd_train(c, log);
  return c;
}

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ParseConfig, MinimalFileGetsDefaults) {
  const ExperimentFile c = parse_config_text(kMinimal);
  EXPECT_EQ(c.distill.kd.temperature, 2.0);
  EXPECT_EQ(c.distill.kd.kind, KdLoss::Kind::logit_mse);
  EXPECT_EQ(c.distill.quiz_fraction, 0.1);
  EXPECT_EQ(c.distill.alpha, 0.5);
  EXPECT_EQ(c.distill.steps, 10u);
  EXPECT_EQ(c.distill.teacher_spec, (MlpSpec{{2, 16, 3}}));
  EXPECT_EQ(c.data.generator, "blobs");
  EXPECT_FALSE(c.sweep);
}

TEST(ParseConfig, ErrorsNameTheKey) {
  const std::string base = kMinimal;
  EXPECT_NE(error_of(base + "alpha = 1.5\n").find("alpha"), std::string::npos);
  EXPECT_NE(error_of(base + "alhpa = 0.5\n").find("alhpa"), std::string::npos);
  EXPECT_NE(error_of(base + "mu = -1\n").find("mu"), std::string::npos);
  EXPECT_NE(error_of(base + "temperature = 0\n").find("temperature"), std::string::npos);
  EXPECT_NE(error_of(base + "batch_size = many\n").find("batch_size"), std::string::npos);
  EXPECT_NE(error_of("[student]\nlayers = 2-8-3\n[distill]\nmode = metadistil\nsteps = 1\n").find("layers"),
            std::string::npos);
  EXPECT_NE(error_of("[teacher]\nlayers = 2-4-3\n[student]\nlayers = 2-4-3\n[distill]\nmode = metadistil\n")
                .find("steps"),
            std::string::npos);
  EXPECT_NE(error_of(base + "[extra]\nx = 1\n").find("extra"), std::string::npos);
  EXPECT_NE(error_of("[teacher]\nlayers = 2-4-3\n[student]\nlayers = 2-4-2\n[distill]\nmode = metadistil\nsteps = 1\n")
                .find("layers"),
            std::string::npos);
}

TEST(ParseConfig, SnapshotModesNeedASnapshot) {
  const std::string text = "[teacher]\nlayers = 2-4-3\n[student]\nlayers = 2-4-3\n[distill]\nmode = static-kd\nsteps = 1\n";
  EXPECT_NE(error_of(text).find("snapshot"), std::string::npos);
  EXPECT_NE(error_of("[teacher]\nlayers = 2-4-3\n[student]\nlayers = 2-4-3\n[distill]\nmode = cross-teach\nsteps = 1\n")
                .find("snapshot"),
            std::string::npos);
}

TEST(ParseConfig, SweepValidation) {
  const std::string base = kMinimal;
  EXPECT_NE(error_of(base + "[sweep]\nparameter = lambda\nvalues = 1\nseeds = 1\n").find("lambda"),
            std::string::npos);
  EXPECT_NE(error_of(base + "[sweep]\nparameter = temperature\nvalues = 1 2\nseeds = 1\n").find("softened-kl"),
            std::string::npos);
  EXPECT_NE(error_of(base + "[sweep]\nparameter = alpha\nvalues = 0.5 2\nseeds = 1\n").find("alpha"),
            std::string::npos);
  const ExperimentFile c = parse_config_text(base + "[sweep]\nparameter = alpha\nvalues = 0.4, 0.5 0.6\nseeds = 1 2\n");
  ASSERT_TRUE(c.sweep);
  EXPECT_EQ(c.sweep->values, (std::vector<std::string>{"0.4", "0.5", "0.6"}));
  EXPECT_EQ(c.sweep->seeds, (std::vector<std::uint64_t>{1, 2}));
}

TEST(ParseConfig, ResolvedIniRoundTrips) {
  const ExperimentFile a = parse_config_text(std::string(kMinimal) +
                                             "kd_kind = softened-kl\ntemperature = 4\nalpha = 0.3\n"
                                             "snapshot_steps = 3,7\ngrad_clip = 1.5\n"
                                             "[sweep]\nparameter = temperature\nvalues = 1 2\nseeds = 3\nworkers = 2\n"
                                             "[output]\ndirectory = /tmp/x\n");
  const std::string ini = to_ini(a);
  const ExperimentFile b = parse_config_text(ini);
  EXPECT_EQ(to_ini(b), ini);
  EXPECT_EQ(b.distill.kd.temperature, 4.0);
  EXPECT_EQ(b.distill.alpha, 0.3);
  EXPECT_EQ(b.distill.snapshot_steps, (std::vector<std::size_t>{3, 7}));
  EXPECT_EQ(b.data, a.data);
  EXPECT_EQ(b.output, fs::path("/tmp/x"));
}

TEST(ParseConfig, OutputDirectoryDefaultsToConfigStem) {
  const ExperimentFile c = parse_config_text(kMinimal, "configs/blob_run.ini");
  EXPECT_EQ(c.output.filename(), "blob_run");
}

TEST(Train, ZeroStepsWritesHeaderOnlyCsv) {
  const fs::path dir = scratch("zero");
  train_run(dir / "run", "metadistil", 0);
  EXPECT_EQ(io::read_file(dir / "run" / "steps.csv"),
            "step,train_loss,experimental_quiz_loss,real_quiz_loss,teacher_grad_norm,similarity_before,"
            "similarity_after\n");
}

TEST(Train, RepeatedRunsAreByteIdentical) {
  const fs::path dir = scratch("repeat");
  train_run(dir / "a", "metadistil", 12);
  train_run(dir / "b", "metadistil", 12);
  for (const char* f : {"steps.csv", "dynamics.csv", "teacher.bin", "student.bin"}) {
    EXPECT_EQ(io::read_file(dir / "a" / f), io::read_file(dir / "b" / f)) << f;
  }
}

TEST(Train, ManifestListsExactlyTheWrittenFiles) {
  const fs::path dir = scratch("manifest");
  ExperimentFile c = parse_config_text(small_config(dir / "run", "metadistil", 10));
  c.distill.snapshot_steps = {4};
  std::ostringstream log;
  const RunManifest m = cmd_train(c, log);
  std::vector<std::string> on_disk;
  for (const auto& e : fs::recursive_directory_iterator(dir / "run")) {
    if (e.is_regular_file() && e.path().filename() != "manifest.json") {
      on_disk.push_back(fs::relative(e.path(), dir / "run").generic_string());
    }
  }
  std::sort(on_disk.begin(), on_disk.end());
  EXPECT_EQ(m.files, on_disk);
  EXPECT_NE(std::find(m.files.begin(), m.files.end(), "teacher_step4.bin"), m.files.end());

  const auto j = nlohmann::json::parse(io::read_file(dir / "run" / "manifest.json"));
  EXPECT_EQ(j["format_version"], kManifestVersion);
  EXPECT_EQ(j["files"].get<std::vector<std::string>>(), m.files);
  EXPECT_EQ(j["config"].get<std::string>(), to_ini(c));
}

TEST(Train, RejectsSweepSection) {
  const ExperimentFile c =
      parse_config_text(std::string(kMinimal) + "[sweep]\nparameter = alpha\nvalues = 0.5\nseeds = 1\n");
  std::ostringstream log;
  EXPECT_THROW(cmd_train(c, log), ConfigError);
}

TEST(Train, StaticKdFromSavedSnapshot) {
  const fs::path dir = scratch("static");
  train_run(dir / "source", "vanilla-kd", 5);
  std::string text = small_config(dir / "static", "static-kd", 5);
  const std::string anchor = "pretrain_steps = 100\n";
  text.insert(text.find(anchor) + anchor.size(), "snapshot = " + (dir / "source" / "teacher.bin").string() + "\n");
  std::ostringstream log;
  cmd_train(parse_config_text(text), log);
  // A fixed teacher ends exactly where it started.
  EXPECT_EQ(io::read_file(dir / "static" / "teacher.bin"), io::read_file(dir / "source" / "teacher.bin"));

  // The same snapshot cannot serve cross-teach: it was trained with this student.
  text.replace(text.find("static-kd"), 9, "cross-teach");
  EXPECT_THROW(cmd_train(parse_config_text(text), log), ConfigError);
}

TEST(Sweep, SingleValueMatchesTwoTrainRuns) {
  const fs::path dir = scratch("single");
  ExperimentFile c = parse_config_text(small_config(dir / "sweep", "metadistil", 8, 0.01, 3) +
                                       "[sweep]\nparameter = alpha\nvalues = 0.5\nseeds = 3\n");
  std::ostringstream log;
  const RunManifest m = cmd_sweep(c, log);
  const auto table = sweep_from_csv(io::read_file(dir / "sweep" / "sweep.csv"));
  ASSERT_EQ(table.rows.size(), 2u);
  ASSERT_EQ(table.aggregates.size(), 2u);
  for (const auto& a : table.aggregates) {
    EXPECT_EQ(a.count, 1u);
    EXPECT_EQ(a.stddev, 0.0);
  }

  for (const char* mode : {"metadistil", "vanilla-kd"}) {
    train_run(dir / mode, mode, 8, 0.01, 3);
    const fs::path swept = dir / "sweep" / "runs" / "0.5" / mode / "seed3";
    EXPECT_EQ(io::read_file(swept / "steps.csv"), io::read_file(dir / mode / "steps.csv")) << mode;
    EXPECT_TRUE(fs::exists(swept / "manifest.json"));
  }
  for (const auto& f : m.files) EXPECT_TRUE(fs::exists(dir / "sweep" / f)) << f;
}

TEST(Sweep, GridSizeAndWorkersAgree) {
  const fs::path dir = scratch("grid");
  const std::string sweep = "[sweep]\nparameter = alpha\nvalues = 0.4 0.5 0.6\nseeds = 1 2\n";
  std::ostringstream log;
  const ExperimentFile one = parse_config_text(small_config(dir / "one", "metadistil", 4) + sweep + "workers = 1\n");
  const ExperimentFile three =
      parse_config_text(small_config(dir / "three", "metadistil", 4) + sweep + "workers = 3\n");
  cmd_sweep(one, log);
  cmd_sweep(three, log);
  const std::string a = io::read_file(dir / "one" / "sweep.csv");
  EXPECT_EQ(a, io::read_file(dir / "three" / "sweep.csv"));
  const auto table = sweep_from_csv(a);
  EXPECT_EQ(table.rows.size(), 12u);
  EXPECT_EQ(table.aggregates.size(), 6u);
}

TEST(Sweep, ModeSweepRunsSnapshotModes) {
  const fs::path dir = scratch("modes");
  train_run(dir / "source", "vanilla-kd", 5);
  const std::string base = small_config(dir / "sweep", "metadistil", 5);
  // cross-teach needs a teacher trained alongside a different student.
  ExperimentFile other = parse_config_text(base);
  other.distill.student_spec = MlpSpec{{2, 4, 3}};
  other.output = dir / "other";
  std::ostringstream log;
  cmd_train(other, log);

  ExperimentFile c = parse_config_text(base);
  c.sweep = SweepSection{"mode", {"metadistil", "static-kd", "cross-teach"}, {1}, 1,
                         dir / "source" / "teacher.bin", dir / "other" / "teacher.bin"};
  cmd_sweep(c, log);
  const auto table = sweep_from_csv(io::read_file(dir / "sweep" / "sweep.csv"));
  ASSERT_EQ(table.aggregates.size(), 3u);
  EXPECT_EQ(table.aggregates[1].mode, "static-kd");
  EXPECT_EQ(table.aggregates[2].mode, "cross-teach");
}

TEST(VerifyGrad, DefaultPassesAndZeroToleranceFails) {
  std::ostringstream log;
  VerifyOptions o;
  const VerifyReport pass = cmd_verify_grad(o, log);
  EXPECT_TRUE(pass.passed);
  EXPECT_EQ(pass.instances, 20u);
  EXPECT_LE(pass.worst_error, 1e-5);
  EXPECT_NE(log.str().find("worst relative error"), std::string::npos);

  o.tolerance = 0.0;
  o.instances = 3;
  EXPECT_FALSE(cmd_verify_grad(o, log).passed);
}

TEST(VerifyGrad, ZeroLambdaIsExactlyZero) {
  std::ostringstream log;
  VerifyOptions o;
  o.zero_lambda = true;
  o.instances = 6;
  const VerifyReport r = cmd_verify_grad(o, log);
  EXPECT_TRUE(r.passed);
  EXPECT_LE(r.worst_error, 1e-12);
}

TEST(Analyze, MetadistilAndFrozenRuns) {
  const fs::path dir = scratch("analyze");
  train_run(dir / "meta", "metadistil", 20, 0.01, 1);
  train_run(dir / "frozen", "metadistil", 20, 0.0, 1);
  train_run(dir / "vanilla", "vanilla-kd", 20, 0.01, 1);
  std::ostringstream log;
  const auto j = nlohmann::json::parse(cmd_analyze({dir / "meta", dir / "frozen", dir / "vanilla"}, dir, log));
  ASSERT_EQ(j["runs"].size(), 3u);
  const double pe = j["runs"][0]["pilot_effectiveness"];
  EXPECT_GE(pe, 0.0);
  EXPECT_LE(pe, 1.0);
  EXPECT_EQ(j["runs"][1]["pilot_effectiveness"].get<double>(), 0.0);
  EXPECT_TRUE(j["runs"][2]["pilot_effectiveness"].is_null());
  EXPECT_TRUE(j["runs"][0]["similarity_decrease_first_half"].is_number());
  EXPECT_TRUE(j["runs"][0]["loyalty_final_teacher"].is_number());
  EXPECT_TRUE(fs::exists(dir / "analysis.json"));
  // Both metadistil runs share seed 1 with the vanilla run.
  ASSERT_EQ(j["pairs"].size(), 2u);
  EXPECT_TRUE(j["pairs"][0]["hard_examples"].is_number());
}

TEST(Analyze, RejectsPairsOnDifferentData) {
  const fs::path dir = scratch("mismatch");
  train_run(dir / "meta", "metadistil", 3, 0.01, 1, 0);
  train_run(dir / "vanilla", "vanilla-kd", 3, 0.01, 1, 9);
  std::ostringstream log;
  EXPECT_THROW(cmd_analyze({dir / "meta", dir / "vanilla"}, dir, log), ConfigError);
  EXPECT_THROW(cmd_analyze({dir / "missing"}, dir, log), ConfigError);
}

TEST(Run, ExitCodes) {
  const fs::path dir = scratch("exit");
  const fs::path bad = dir / "bad.ini";
  io::write_atomic(bad, std::string(kMinimal) + "alhpa = 1\n");
  std::ostringstream out, err;
  std::string prog = "metadistil", cmd = "train", path = bad.string();
  {
    char* argv[] = {prog.data(), cmd.data(), path.data()};
    EXPECT_NE(run(3, argv, out, err), 0);
    EXPECT_NE(err.str().find("alhpa"), std::string::npos);
  }
  {
    std::string vg = "verify-grad", n = "--instances", three = "3", tol = "--tol", zero = "0";
    char* argv[] = {prog.data(), vg.data(), n.data(), three.data(), tol.data(), zero.data()};
    EXPECT_NE(run(6, argv, out, err), 0);
  }
  {
    std::string vg = "verify-grad", n = "--instances", three = "3";
    char* argv[] = {prog.data(), vg.data(), n.data(), three.data()};
    EXPECT_EQ(run(4, argv, out, err), 0);
  }
  {
    const fs::path good = dir / "good.ini";
    io::write_atomic(good, small_config(dir / "run", "vanilla-kd", 3));
    std::string g = good.string();
    char* argv[] = {prog.data(), cmd.data(), g.data()};
    EXPECT_EQ(run(3, argv, out, err), 0);
    EXPECT_TRUE(fs::exists(dir / "run" / "manifest.json"));
  }
}

TEST(ParseConfig, ShippedExamplesAreValid) {
  for (const auto& e : fs::directory_iterator(METADISTIL_CONFIG_DIR)) {
    if (e.path().extension() == ".ini") EXPECT_NO_THROW(parse_config(e.path())) << e.path();
  }
}

TEST(ParseConfig, InlineComments) {
  const ExperimentFile c = parse_config_text(
      "[teacher]   # wide\nlayers = 2-16-3  # hidden 16\n[student]\nlayers = 2-8-3 ; small\n"
      "[distill]\nmode = vanilla-kd\t# fixed teacher\nsteps = 5\n");
  EXPECT_EQ(c.distill.teacher_spec, (MlpSpec{{2, 16, 3}}));
  EXPECT_EQ(c.distill.mode, Mode::vanilla_kd);
  EXPECT_EQ(c.distill.steps, 5u);
}
