// Copyright 2026 The capforge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "capforge/dsp.h"
#include "capforge/experiments.h"
#include "capforge_cli/cli.h"
#include "support.h"

namespace capforge {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path toy_dataset(const fs::path& dir, std::size_t n, std::uint64_t seed) {
  return experiments::write_dataset(experiments::generate(n, seed, {1.0, 1.2, 2}), dir);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kInputError);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kInputError);
  EXPECT_EQ(run({"--help"}).code, cli::kOk);
  EXPECT_EQ(run({"caption", "--checkpoint", "x.acpt", "--audio", "a.wav", "--beam", "6"}).code, cli::kInputError);
  EXPECT_EQ(run({"caption", "--checkpoint", "missing.acpt", "--audio", "a.wav"}).code, cli::kInputError);
}

TEST(Cli, FeaturizeReportsFailuresAndIsIdempotent) {
  testing::ScratchDir dir("cli");
  fs::create_directories(dir / "wav");
  const auto items = experiments::generate(2, 1, {0.5, 0.5, 1});
  dsp::write_wav_file(dir / "wav" / "a.wav", items[0].audio);
  dsp::write_wav_file(dir / "wav" / "b.wav", items[1].audio);
  std::ofstream(dir / "wav" / "c.wav") << "RIFF garbage";
  const CliRun first = run({"featurize", "--in", (dir / "wav").string(), "--out", (dir / "mels").string(), "--jobs", "2"});
  EXPECT_EQ(first.code, cli::kInputError);
  const auto summary = nlohmann::json::parse(first.out);
  EXPECT_EQ(summary["featurized"], 2);
  EXPECT_EQ(summary["failed"], 1);
  EXPECT_NE(first.err.find("c.wav"), std::string::npos) << first.err;
  const auto mel = dsp::read_mels_file(dir / "mels" / "a.mels");
  EXPECT_EQ(mel.values, dsp::log_mel(dsp::read_wav_file(dir / "wav" / "a.wav")).values);

  fs::remove(dir / "wav" / "c.wav");
  const std::string before = slurp(dir / "mels" / "b.mels");
  const CliRun again = run({"featurize", "--in", (dir / "wav").string(), "--out", (dir / "mels").string()});
  EXPECT_EQ(again.code, cli::kOk);
  EXPECT_EQ(nlohmann::json::parse(again.out)["skipped"], 2);
  EXPECT_EQ(slurp(dir / "mels" / "b.mels"), before);
}

TEST(Cli, FeaturizeManifestWritesANewManifest) {
  testing::ScratchDir dir("cli");
  const auto manifest = toy_dataset(dir / "data", 2, 4);
  ASSERT_EQ(run({"featurize", "--in", manifest.string(), "--out", (dir / "mels").string()}).code, cli::kOk);
  const auto entries = read_manifest(dir / "mels" / "manifest.jsonl");
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].audio.extension(), ".mels");
  EXPECT_EQ(entries[0].captions, read_manifest(manifest)[0].captions);
}

TEST(Cli, GenerateHonoursTheSeedEnvironment) {
  testing::ScratchDir dir("cli");
  auto gen = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> args{"generate", "--n", "2", "--out", (dir / out).string(), "--min-seconds", "0.5",
                                  "--max-seconds", "1"};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  };
  ASSERT_EQ(gen("a", {"--seed", "5"}).code, cli::kOk);
  ::setenv("CAPFORGE_SEED", "5", 1);
  const CliRun from_env = gen("b", {});
  ::unsetenv("CAPFORGE_SEED");
  ASSERT_EQ(from_env.code, cli::kOk) << from_env.err;
  ASSERT_EQ(gen("c", {"--seed", "6"}).code, cli::kOk);
  EXPECT_EQ(slurp(dir / "a" / "clip_0001.wav"), slurp(dir / "b" / "clip_0001.wav"));
  EXPECT_NE(slurp(dir / "a" / "clip_0001.wav"), slurp(dir / "c" / "clip_0001.wav"));
  EXPECT_TRUE(fs::exists(dir / "a" / "vocab.txt"));
}

TEST(Cli, PretrainedPolicyNeedsACheckpoint) {
  testing::ScratchDir dir("cli");
  const auto m = toy_dataset(dir / "data", 1, 2).string();
  const CliRun r = run({"train", "--manifest", m, "--val-manifest", m, "--init-policy", "pretrained", "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, cli::kInputError);
  EXPECT_NE(r.err.find("--bert-checkpoint"), std::string::npos) << r.err;
}

TEST(Cli, TrainCaptionEvaluateInspect) {
  testing::ScratchDir dir("cli");
  const auto m = toy_dataset(dir / "data", 2, 3).string();
  std::ofstream(dir / "train.ini") << "# toy run\nepochs = 2\nwarmup-epochs=1\nbatch-size=2\nfreeze-encoder=true\n";
  const std::vector<std::string> train{"train", "--config", (dir / "train.ini").string(), "--manifest", m,
                                       "--val-manifest", m, "--seed", "3", "--out", (dir / "run").string()};
  const CliRun t = run(train);
  ASSERT_EQ(t.code, cli::kOk) << t.err;
  for (const char* f : {"best.acpt", "train_log.jsonl", "init_audit.json", "resolved_config.ini"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  const std::string resolved = slurp(dir / "run" / "resolved_config.ini");
  EXPECT_NE(resolved.find("epochs=2"), std::string::npos) << resolved;
  EXPECT_NE(resolved.find("freeze-encoder=true"), std::string::npos) << resolved;
  EXPECT_NE(resolved.find("seed=3"), std::string::npos) << resolved;

  // Flags beat the config file.
  auto override_args = train;
  override_args.back() = (dir / "run2").string();
  override_args.insert(override_args.end(), {"--epochs", "3"});
  ASSERT_EQ(run(override_args).code, cli::kOk);
  EXPECT_NE(slurp(dir / "run2" / "resolved_config.ini").find("epochs=3"), std::string::npos);

  const std::string ckpt = (dir / "run" / "best.acpt").string();
  const CliRun c = run({"caption", "--checkpoint", ckpt, "--audio", m, "--beam", "2", "--out", (dir / "pred.jsonl").string()});
  ASSERT_EQ(c.code, cli::kOk) << c.err;
  std::ifstream preds(dir / "pred.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(preds, line); ++lines) EXPECT_TRUE(nlohmann::json::parse(line).contains("caption"));
  EXPECT_EQ(lines, 2u);
  EXPECT_EQ(run({"caption", "--checkpoint", ckpt, "--audio", m, "--model", "mini"}).code, cli::kInputError);

  const CliRun e = run({"evaluate", "--predictions", (dir / "pred.jsonl").string(), "--references", m});
  ASSERT_EQ(e.code, cli::kOk) << e.err;
  EXPECT_TRUE(nlohmann::json::parse(e.out)["raw"].contains("cider"));

  const CliRun i = run({"inspect", "--checkpoint", ckpt});
  ASSERT_EQ(i.code, cli::kOk) << i.err;
  EXPECT_NE(i.out.find("decoder.block0.crossattn.wq"), std::string::npos);
  EXPECT_NE(i.out.find("init audit"), std::string::npos);
}

TEST(Cli, EvaluateIdenticalCaptionsAndKeyMismatch) {
  testing::ScratchDir dir("cli");
  std::ofstream(dir / "refs.jsonl") << R"({"audio": "x/a.wav", "captions": ["a high tone then noise"]})" "\n"
                                    << R"({"audio": "x/b.wav", "captions": ["quiet beeping"]})" "\n";
  std::ofstream(dir / "same.jsonl") << R"({"audio": ")" << (dir / "x/./a.wav").string() << R"(", "caption": "a high tone then noise"})" "\n"
                                    << R"({"audio": ")" << (dir / "x/b.wav").string() << R"(", "caption": "quiet beeping"})" "\n";
  const CliRun ok = run({"evaluate", "--predictions", (dir / "same.jsonl").string(), "--references", (dir / "refs.jsonl").string()});
  ASSERT_EQ(ok.code, cli::kOk) << ok.err;
  EXPECT_NEAR(nlohmann::json::parse(ok.out)["raw"]["bleu1"].get<double>(), 1.0, 1e-9);

  std::ofstream(dir / "other.jsonl") << R"({"audio": ")" << (dir / "x/a.wav").string() << R"(", "caption": "noise"})" "\n"
                                     << R"({"audio": ")" << (dir / "x/c.wav").string() << R"(", "caption": "noise"})" "\n";
  const CliRun bad = run({"evaluate", "--predictions", (dir / "other.jsonl").string(), "--references", (dir / "refs.jsonl").string()});
  EXPECT_EQ(bad.code, cli::kInputError);
  EXPECT_NE(bad.err.find("item 2"), std::string::npos) << bad.err;
  EXPECT_NE(bad.err.find("b.wav"), std::string::npos) << bad.err;
}

TEST(Cli, ConfigRejectsUnknownKeys) {
  testing::ScratchDir dir("cli");
  std::ofstream(dir / "c.ini") << "epochs=2\nlearning_rate=1\n";
  const CliRun r = run({"train", "--config", (dir / "c.ini").string(), "--manifest", "m", "--val-manifest", "m"});
  EXPECT_EQ(r.code, cli::kInputError);
  EXPECT_NE(r.err.find("c.ini:2"), std::string::npos) << r.err;
}

TEST(Cli, SameSeedTrainingGivesIdenticalBytes) {
  testing::ScratchDir dir("cli");
  const auto m = toy_dataset(dir / "data", 2, 8).string();
  auto train = [&](const std::string& out, const std::string& seed) {
    return run({"train", "--manifest", m, "--val-manifest", m, "--epochs", "2", "--warmup-epochs", "1",
                "--batch-size", "2", "--seed", seed, "--out", (dir / out).string()});
  };
  ASSERT_EQ(train("a", "4").code, cli::kOk);
  ASSERT_EQ(train("b", "4").code, cli::kOk);
  ASSERT_EQ(train("c", "5").code, cli::kOk);
  EXPECT_EQ(slurp(dir / "a" / "best.acpt"), slurp(dir / "b" / "best.acpt"));
  EXPECT_NE(slurp(dir / "a" / "best.acpt"), slurp(dir / "c" / "best.acpt"));
  EXPECT_EQ(slurp(dir / "a" / "train_log.jsonl"), slurp(dir / "b" / "train_log.jsonl"));
}

}  // namespace
}  // namespace capforge
