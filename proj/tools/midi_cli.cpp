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

// midi-tune: data synthesis, training, evaluation, self-chat and the
// midi-vs-concat comparison behind one binary.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "midi.hpp"

namespace {

using namespace midi;

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

/// Thrown for bad arguments discovered after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Overrides {
  std::string config;
  std::optional<std::string> mode;
  std::optional<double> beta, lr, top_p;
  std::optional<std::size_t> max_rounds, top_k, max_new_tokens, epochs, batch;
  std::optional<std::uint64_t> seed;

  void add_train_flags(CLI::App* c) {
    c->add_option("--mode", mode, "midi | concat | split")->check(CLI::IsMember({"midi", "concat", "split"}));
    c->add_option("--beta", beta, "weight of the user loss");
    c->add_option("--lr", lr, "peak learning rate");
    c->add_option("--max-rounds", max_rounds, "keep at most this many trailing rounds");
    c->add_option("--epochs", epochs, "training epochs");
    c->add_option("--batch", batch, "global batch size (also the micro batch)");
  }

  void add_generation_flags(CLI::App* c) {
    c->add_option("--top-p", top_p, "nucleus mass");
    c->add_option("--top-k", top_k, "candidate cap before the nucleus cut");
    c->add_option("--max-new-tokens", max_new_tokens, "per-utterance token budget");
  }

  void add_common(CLI::App* c) {
    c->add_option("--config", config, "experiment config (JSON)")->check(CLI::ExistingFile);
    c->add_option("--seed", seed, "run seed");
  }

  /// Config file first, then flags.
  ExperimentConfig resolve() const {
    ExperimentConfig cfg;
    try {
      if (!config.empty()) cfg = read_experiment_config(config);
      if (mode) cfg.train.mode = parse_mode(*mode);
      if (beta) cfg.train.beta = *beta;
      if (lr) cfg.train.lr = *lr;
      if (max_rounds) cfg.train.max_rounds = *max_rounds;
      if (epochs) cfg.train.epochs = *epochs;
      if (batch) cfg.train.global_batch = cfg.train.micro_batch = *batch;
      if (top_p) cfg.generation.top_p = *top_p;
      if (top_k) cfg.generation.top_k = *top_k;
      if (max_new_tokens) cfg.generation.max_new_tokens = *max_new_tokens;
      if (seed) cfg.apply_seed(*seed);
      cfg.validate();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    return cfg;
  }
};

std::string input_of(const RunManifest& m, const std::string& key) {
  auto it = m.inputs.find(key);
  return it == m.inputs.end() ? std::string() : it->second;
}

/// Re-reads a manifest and checks that its inputs still hash the same.
RunManifest replay_manifest(const std::string& path, const std::string& command) {
  RunManifest m = read_manifest(path);
  if (m.command != command) throw UsageError(path + " records a '" + m.command + "' run, not '" + command + "'");
  for (const auto& [k, p] : m.inputs) {
    auto h = m.input_hashes.find(k);
    if (h != m.input_hashes.end() && file_hash(p) != h->second) {
      throw Error("input '" + k + "' (" + p + ") changed since the manifest was written");
    }
  }
  return m;
}

/// Replays write next to their manifest unless --out is given.
std::string replay_out(const CLI::App* cmd, const std::string& out, const std::string& manifest) {
  if (cmd->count("--out") > 0) return out;
  const auto dir = std::filesystem::path(manifest).parent_path();
  return dir.empty() ? std::string(".") : dir.string();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"midi-tune: round-level memory tuning of agent/user adapters on a toy transformer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  // data-synth
  auto* synth = app.add_subcommand("data-synth", "write a synthetic role-separation corpus");
  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 0;
  std::size_t synth_n = 500;
  synth->add_option("--spec", synth_spec, "synthesis spec (JSON); the built-in toy spec when omitted")
      ->check(CLI::ExistingFile);
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--n", synth_n, "number of dialogues");
  synth->add_option("--out", synth_out, "corpus path (JSON lines)")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train adapters in one mode");
  Overrides train_ov;
  std::string train_corpus, train_out = "run", train_manifest;
  train_cmd->add_option("--corpus", train_corpus, "training corpus (JSON lines)")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--from-manifest", train_manifest, "repeat a recorded train run")->check(CLI::ExistingFile);
  train_ov.add_common(train_cmd);
  train_ov.add_train_flags(train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint or a transcript file against a test corpus");
  Overrides eval_ov;
  std::string eval_ckpt, eval_transcripts, eval_test, eval_spec, eval_out = "eval", eval_manifest;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint to generate responses with")->check(CLI::ExistingFile);
  eval_cmd->add_option("--transcripts", eval_transcripts, "score these transcripts as given")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--test", eval_test, "reference corpus")->check(CLI::ExistingFile);
  eval_cmd->add_option("--oracle,--spec", eval_spec, "synthesis spec defining the consistency oracle")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval_out, "output directory");
  eval_cmd->add_option("--from-manifest", eval_manifest, "repeat a recorded eval run")->check(CLI::ExistingFile);
  eval_ov.add_common(eval_cmd);
  eval_ov.add_generation_flags(eval_cmd);

  // chat-sim
  auto* chat = app.add_subcommand("chat-sim", "let an agent converse with a user checkpoint or stdin");
  Overrides chat_ov;
  std::string chat_agent, chat_user = "stdin", chat_instruction, chat_out;
  std::size_t chat_rounds = 3;
  chat->add_option("--agent", chat_agent, "agent checkpoint")->required()->check(CLI::ExistingFile);
  chat->add_option("--user", chat_user, "user checkpoint, or 'stdin' to type user turns");
  chat->add_option("--instruction", chat_instruction, "dialogue instruction")->required();
  chat->add_option("--rounds", chat_rounds, "number of rounds")->check(CLI::PositiveNumber);
  chat->add_option("--out", chat_out, "transcript path (JSON lines)")->required();
  chat_ov.add_common(chat);
  chat_ov.add_generation_flags(chat);

  // compare
  auto* cmp = app.add_subcommand("compare", "train midi and concat from one seed and compare per-round consistency");
  Overrides cmp_ov;
  std::string cmp_corpus, cmp_test, cmp_spec, cmp_out = "compare", cmp_manifest;
  cmp->add_option("--corpus", cmp_corpus, "training corpus")->check(CLI::ExistingFile);
  cmp->add_option("--test", cmp_test, "test corpus")->check(CLI::ExistingFile);
  cmp->add_option("--oracle,--spec", cmp_spec, "synthesis spec defining the consistency oracle")
      ->check(CLI::ExistingFile);
  cmp->add_option("--out", cmp_out, "output directory");
  cmp->add_option("--from-manifest", cmp_manifest, "repeat a recorded compare run")->check(CLI::ExistingFile);
  cmp_ov.add_common(cmp);
  cmp_ov.add_train_flags(cmp);
  cmp_ov.add_generation_flags(cmp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) {
      const SynthSpec spec = synth_spec.empty() ? SynthSpec::toy() : read_synth_spec(synth_spec);
      const auto corpus = synth_generate(synth_seed, synth_n, spec);
      if (synth_n == 0) std::cerr << "warning: --n 0 writes an empty corpus\n";
      write_corpus(synth_out, corpus);
      std::cout << "wrote " << corpus.size() << " dialogues to " << synth_out << "\n";
    } else if (*train_cmd) {
      std::string corpus = train_corpus;
      ExperimentConfig cfg;
      if (!train_manifest.empty()) {
        const RunManifest m = replay_manifest(train_manifest, "train");
        corpus = input_of(m, "corpus");
        cfg = m.config;
        train_out = replay_out(train_cmd, train_out, train_manifest);
      } else {
        require(!corpus.empty(), "train: --corpus is required");
        cfg = train_ov.resolve();
      }
      auto out = run_train(corpus, cfg, train_out, &std::cout);
      std::cout << "checkpoint " << out.checkpoint.string() << " after " << out.result.steps << " steps\n";
    } else if (*eval_cmd) {
      std::string ckpt = eval_ckpt, transcripts = eval_transcripts, test = eval_test, spec = eval_spec;
      ExperimentConfig cfg;
      if (!eval_manifest.empty()) {
        const RunManifest m = replay_manifest(eval_manifest, "eval");
        ckpt = input_of(m, "checkpoint");
        transcripts = input_of(m, "transcripts");
        test = input_of(m, "test");
        spec = input_of(m, "spec");
        cfg = m.config;
        eval_out = replay_out(eval_cmd, eval_out, eval_manifest);
      } else {
        require(!test.empty(), "eval: --test is required");
        require(ckpt.empty() != transcripts.empty(), "eval: give exactly one of --checkpoint and --transcripts");
        cfg = eval_ov.resolve();
        if (!ckpt.empty()) {
          // The model shape comes from the checkpoint unless a config pins it.
          const auto model = load_checkpoint<Real>(ckpt);
          if (eval_ov.config.empty()) cfg.model = model.config;
        }
      }
      auto out = run_eval(ckpt, transcripts, test, spec, cfg, eval_out);
      std::cout << report_text(out.report);
    } else if (*chat) {
      const ExperimentConfig cfg = chat_ov.resolve();
      const auto agent = load_checkpoint<Real>(chat_agent);
      std::optional<ModelState<Real>> user_model;
      UserTurnSource source;
      if (chat_user == "stdin") {
        source = [](std::size_t round) -> std::optional<std::string> {
          std::cerr << "user[" << round + 1 << "]> " << std::flush;
          std::string line;
          if (!std::getline(std::cin, line)) return std::nullopt;
          return line;
        };
      } else {
        user_model = load_checkpoint<Real>(chat_user);
      }
      const ChatResult res =
          self_chat(agent, user_model ? *user_model : agent, chat_instruction, chat_rounds, cfg.generation, source);
      const DialogueSample transcript = res.transcript;
      write_corpus(chat_out, std::span<const DialogueSample>(&transcript, 1));
      for (const auto& r : transcript.rounds) std::cout << "user:  " << r.user << "\nagent: " << r.agent << "\n";
      if (res.truncated) {
        std::cerr << "error: position budget exhausted after " << transcript.rounds.size()
                  << " rounds; partial transcript written\n";
        return kRuntime;
      }
    } else if (*cmp) {
      std::string corpus = cmp_corpus, test = cmp_test, spec = cmp_spec;
      ExperimentConfig cfg;
      if (!cmp_manifest.empty()) {
        const RunManifest m = replay_manifest(cmp_manifest, "compare");
        corpus = input_of(m, "corpus");
        test = input_of(m, "test");
        spec = input_of(m, "spec");
        cfg = m.config;
        cmp_out = replay_out(cmp, cmp_out, cmp_manifest);
      } else {
        require(!corpus.empty() && !test.empty(), "compare: --corpus and --test are required");
        cfg = cmp_ov.resolve();
      }
      const auto c = run_compare(corpus, test, spec, cfg, cmp_out, &std::cout);
      std::cout << compare_table(c);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
