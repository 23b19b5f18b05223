/*
 * Copyright 2026 The midi-tune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "midi/config.hpp"
#include "midi/data.hpp"
#include "midi/pipeline.hpp"

namespace midi {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("midi_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_text(path("tiny.json"), R"({
  "seed": 3,
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "vocab_size": 512, "max_positions": 512},
  "lora": {"rank": 2, "alpha": 4.0},
  "train": {"lr": 0.01, "global_batch": 4, "micro_batch": 4, "epochs": 1, "max_rounds": 10},
  "generation": {"max_new_tokens": 8}
})");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  /// Exit status of the CLI; stdout and stderr land in out.txt / err.txt.
  int run(const std::string& args, const std::string& stdin_text = "") {
    std::string cmd = std::string(MIDI_TUNE_BIN) + " " + args + " >" + path("out.txt") + " 2>" + path("err.txt");
    if (!stdin_text.empty()) {
      write_text(path("in.txt"), stdin_text);
      cmd += " <" + path("in.txt");
    } else {
      cmd += " </dev/null";
    }
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  }

  std::string err() const { return slurp(dir_ / "err.txt"); }

  fs::path dir_;
};

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("data-synth"), 2);
  EXPECT_EQ(run("train --corpus " + path("missing.jsonl") + " --out " + path("o")), 2);
  EXPECT_EQ(run("data-synth --n 4 --seed 1 --out " + path("c.jsonl")), 0);
  EXPECT_EQ(run("train --corpus " + path("c.jsonl") + " --out " + path("o") + " --mode joint"), 2);
  write_text(path("bad.json"), R"({"trian": {}})");
  EXPECT_EQ(run("train --corpus " + path("c.jsonl") + " --out " + path("o") + " --config " + path("bad.json")), 2);
  EXPECT_NE(err().find("trian"), std::string::npos) << err();
  write_text(path("broken.jsonl"), "{\"instruction\": 1}\n");
  EXPECT_EQ(run("train --corpus " + path("broken.jsonl") + " --out " + path("o") + " --config " + path("tiny.json")),
            1);
  EXPECT_NE(err().find("line 1"), std::string::npos) << err();
}

TEST_F(Cli, DataSynthIsDeterministic) {
  ASSERT_EQ(run("data-synth --n 20 --seed 5 --out " + path("a.jsonl")), 0);
  ASSERT_EQ(run("data-synth --n 20 --seed 5 --out " + path("b.jsonl")), 0);
  ASSERT_EQ(run("data-synth --n 20 --seed 6 --out " + path("c.jsonl")), 0);
  EXPECT_EQ(slurp(path("a.jsonl")), slurp(path("b.jsonl")));
  EXPECT_NE(slurp(path("a.jsonl")), slurp(path("c.jsonl")));
  EXPECT_EQ(read_corpus(path("a.jsonl")).size(), 20u);
  ASSERT_EQ(run("data-synth --n 0 --out " + path("e.jsonl")), 0);
  EXPECT_EQ(slurp(path("e.jsonl")), "");
  EXPECT_NE(err().find("warning"), std::string::npos);
}

TEST_F(Cli, ConcatAndSplitLogsAgreeOnSingleRoundCorpus) {
  write_text(path("spec.json"), R"({"user_vocab": ["bam", "cob"], "agent_vocab": ["jay", "kit"],
    "persona_markers": ["qat", "rex"], "min_rounds": 1, "max_rounds": 1})");
  ASSERT_EQ(run("data-synth --spec " + path("spec.json") + " --n 8 --seed 2 --out " + path("one.jsonl")), 0) << err();
  const std::string common = " --corpus " + path("one.jsonl") + " --config " + path("tiny.json");
  ASSERT_EQ(run("train" + common + " --mode concat --out " + path("concat")), 0) << err();
  ASSERT_EQ(run("train" + common + " --mode split --out " + path("split")), 0) << err();
  const std::string log = slurp(dir_ / "concat" / "loss_log.csv");
  EXPECT_EQ(log.rfind("step,agent,user,total,lr\n", 0), 0u);
  EXPECT_EQ(log, slurp(dir_ / "split" / "loss_log.csv"));
}

TEST_F(Cli, ManifestRecordsAndReplays) {
  ASSERT_EQ(run("data-synth --n 6 --seed 1 --out " + path("c.jsonl")), 0);
  ASSERT_EQ(run("train --corpus " + path("c.jsonl") + " --config " + path("tiny.json") + " --beta 0.5 --out " +
                path("run")),
            0)
      << err();
  const auto m = read_manifest(dir_ / "run" / "manifest.json");
  EXPECT_EQ(m.command, "train");
  EXPECT_EQ(m.status, "finished");
  EXPECT_EQ(m.config.train.beta, 0.5);
  EXPECT_EQ(m.input_hashes.at("corpus"), file_hash(path("c.jsonl")));
  EXPECT_EQ(m.artifact_hashes.at("checkpoint"), file_hash((dir_ / "run" / "checkpoint.bin").string()));
  const auto j = read_json_file(dir_ / "run" / "manifest.json");
  EXPECT_EQ(j.at("config_hash").get<std::string>(), config_hash(m.config));
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 3u);

  const std::string ckpt = slurp(dir_ / "run" / "checkpoint.bin");
  fs::remove(dir_ / "run" / "checkpoint.bin");
  ASSERT_EQ(run("train --from-manifest " + (dir_ / "run" / "manifest.json").string()), 0) << err();
  EXPECT_EQ(slurp(dir_ / "run" / "checkpoint.bin"), ckpt);

  // A changed input no longer matches the recorded hash.
  ASSERT_EQ(run("data-synth --n 6 --seed 2 --out " + path("c.jsonl")), 0);
  EXPECT_NE(run("train --from-manifest " + (dir_ / "run" / "manifest.json").string()), 0);
}

TEST_F(Cli, EvalOfGoldTranscriptsIsPerfect) {
  ASSERT_EQ(run("data-synth --n 5 --seed 1 --out " + path("t.jsonl")), 0);
  ASSERT_EQ(run("eval --transcripts " + path("t.jsonl") + " --test " + path("t.jsonl") + " --out " + path("ev")), 0)
      << err();
  const auto r = read_json_file(dir_ / "ev" / "report.json");
  EXPECT_EQ(r.at("word_f1").get<double>(), 1.0);
  EXPECT_EQ(r.at("bleu_1").get<double>(), 1.0);
}

TEST_F(Cli, EvalAndChatFromCheckpoint) {
  ASSERT_EQ(run("data-synth --n 4 --seed 1 --out " + path("c.jsonl")), 0);
  ASSERT_EQ(run("train --corpus " + path("c.jsonl") + " --config " + path("tiny.json") + " --out " + path("run")), 0)
      << err();
  const std::string ckpt = (dir_ / "run" / "checkpoint.bin").string();
  ASSERT_EQ(run("eval --checkpoint " + ckpt + " --test " + path("c.jsonl") + " --out " + path("ev")), 0) << err();
  const auto r = read_json_file(dir_ / "ev" / "report.json");
  EXPECT_GT(r.at("responses").get<std::size_t>(), 0u);
  EXPECT_TRUE(fs::exists(dir_ / "ev" / "generated.jsonl"));

  ASSERT_EQ(run("chat-sim --agent " + ckpt + " --user stdin --instruction 'you are qat' --rounds 3 --out " +
                    path("chat.jsonl") + " --config " + path("tiny.json"),
                "bam cob\nhop\n"),
            0)
      << err();
  const auto chat = read_corpus(path("chat.jsonl"));
  ASSERT_EQ(chat.size(), 1u);
  ASSERT_EQ(chat[0].rounds.size(), 2u);
  EXPECT_EQ(chat[0].rounds[0].user, "bam cob");
  EXPECT_EQ(chat[0].rounds[1].user, "hop");
  ASSERT_EQ(run("chat-sim --agent " + ckpt + " --user " + ckpt + " --instruction 'you are qat' --rounds 2 --out " +
                path("self.jsonl") + " --config " + path("tiny.json")),
            0)
      << err();
  EXPECT_EQ(read_corpus(path("self.jsonl"))[0].rounds.size(), 2u);
}

TEST_F(Cli, CompareWritesCurveRowsPerSeries) {
  write_text(path("spec.json"), R"({"user_vocab": ["bam", "cob"], "agent_vocab": ["jay", "kit"],
    "persona_markers": ["qat", "rex"], "min_rounds": 3, "max_rounds": 3})");
  ASSERT_EQ(run("data-synth --spec " + path("spec.json") + " --n 4 --seed 1 --out " + path("train.jsonl")), 0);
  ASSERT_EQ(run("data-synth --spec " + path("spec.json") + " --n 3 --seed 9 --out " + path("test.jsonl")), 0);
  ASSERT_EQ(run("compare --corpus " + path("train.jsonl") + " --test " + path("test.jsonl") + " --spec " +
                path("spec.json") + " --config " + path("tiny.json") + " --out " + path("cmp")),
            0)
      << err();
  std::istringstream curve(slurp(dir_ / "cmp" / "curve.csv"));
  std::string line;
  std::getline(curve, line);
  EXPECT_EQ(line, "round,score,mode");
  std::map<std::string, int> rows;
  while (std::getline(curve, line)) ++rows[line.substr(line.rfind(',') + 1)];
  EXPECT_EQ(rows["midi"], 3);
  EXPECT_EQ(rows["concat"], 3);
  EXPECT_EQ(rows["gold"], 3);
  const std::string table = slurp(dir_ / "cmp" / "compare.csv");
  EXPECT_EQ(table.rfind("round,midi,concat,gold\n", 0), 0u);
}

}  // namespace
}  // namespace midi
