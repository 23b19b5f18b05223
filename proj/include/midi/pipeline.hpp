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

#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "midi/checkpoint.hpp"
#include "midi/config.hpp"
#include "midi/data.hpp"
#include "midi/eval.hpp"
#include "midi/inference.hpp"
#include "midi/synth.hpp"
#include "midi/training.hpp"

namespace midi {

namespace fs = std::filesystem;

/// Scalar type of every pipeline artifact.
using Real = float;

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Record of one command invocation. Written before any work starts and
/// rewritten with artifact hashes once the command finishes.
struct RunManifest {
  std::string command;
  ExperimentConfig config;
  std::map<std::string, std::string> inputs;   // role -> path
  std::map<std::string, std::string> options;  // command-specific settings
  std::map<std::string, std::string> outputs;  // role -> path
  std::map<std::string, std::string> input_hashes;
  std::map<std::string, std::string> artifact_hashes;
  std::string started_at;
  std::string finished_at;
  std::string status = "running";
};

inline ojson to_json(const RunManifest& m) {
  return {{"command", m.command},
          {"status", m.status},
          {"seed", m.config.seed},
          {"mode", mode_name(m.config.train.mode)},
          {"config", to_json(m.config)},
          {"config_hash", config_hash(m.config)},
          {"inputs", m.inputs},
          {"input_hashes", m.input_hashes},
          {"options", m.options},
          {"outputs", m.outputs},
          {"artifact_hashes", m.artifact_hashes},
          {"started_at", m.started_at},
          {"finished_at", m.finished_at}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.status = j.value("status", "");
    m.config = experiment_config_from_json(j.at("config"));
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.input_hashes = j.value("input_hashes", std::map<std::string, std::string>{});
    m.options = j.value("options", std::map<std::string, std::string>{});
    m.outputs = j.value("outputs", std::map<std::string, std::string>{});
    m.artifact_hashes = j.value("artifact_hashes", std::map<std::string, std::string>{});
    m.started_at = j.value("started_at", "");
    m.finished_at = j.value("finished_at", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  const std::string recorded = j.value("config_hash", "");
  if (!recorded.empty() && recorded != config_hash(m.config)) {
    throw FormatError("manifest: config_hash does not match the recorded config");
  }
  return m;
}

inline RunManifest read_manifest(const fs::path& path) { return manifest_from_json(read_json_file(path)); }

class ManifestWriter {
 public:
  ManifestWriter(fs::path path, RunManifest m) : path_(std::move(path)), m_(std::move(m)) {
    m_.started_at = utc_timestamp();
    for (const auto& [k, p] : m_.inputs) m_.input_hashes[k] = file_hash(p);
    flush();
  }

  void finish() {
    for (const auto& [k, p] : m_.outputs) {
      if (fs::is_regular_file(p)) m_.artifact_hashes[k] = file_hash(p);
    }
    m_.finished_at = utc_timestamp();
    m_.status = "finished";
    flush();
  }

  void fail(const std::string& why) {
    m_.status = "failed: " + why;
    m_.finished_at = utc_timestamp();
    flush();
  }

  const RunManifest& manifest() const { return m_; }

 private:
  void flush() { write_text(path_, to_json(m_).dump(2) + "\n"); }

  fs::path path_;
  RunManifest m_;
};

inline std::vector<DialogueSample> load_corpus(const std::string& path) { return read_corpus(path); }

inline std::string format_loss_log(const std::vector<LossRecord>& log) {
  std::ostringstream os;
  os << "step,agent,user,total,lr\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.step, r.agent, r.user, r.total, r.lr);
    os << buf;
  }
  return os.str();
}

struct TrainOutcome {
  TrainResult<Real> result;
  fs::path checkpoint;
  fs::path loss_log;
};

/// Trains one mode on a corpus file into `out_dir`: manifest.json,
/// checkpoint.bin and loss_log.csv.
inline TrainOutcome run_train(const std::string& corpus_path, const ExperimentConfig& cfg, const fs::path& out_dir,
                              std::ostream* progress = nullptr) {
  cfg.validate();
  fs::create_directories(out_dir);
  RunManifest m;
  m.command = "train";
  m.config = cfg;
  m.inputs["corpus"] = corpus_path;
  m.outputs["checkpoint"] = (out_dir / "checkpoint.bin").string();
  m.outputs["loss_log"] = (out_dir / "loss_log.csv").string();
  ManifestWriter mw(out_dir / "manifest.json", m);
  try {
    const auto corpus = load_corpus(corpus_path);
    auto state = ModelState<Real>::init(cfg.model, cfg.lora, mode_roles(cfg.train.mode), cfg.seed);
    auto res = train<Real>(corpus, std::move(state), cfg.train, [&](const LossRecord& r) {
      if (progress && r.step % 25 == 0) {
        *progress << "step " << r.step << " L_s " << r.agent << " L_u " << r.user << " lr " << r.lr << "\n";
      }
    });
    save_checkpoint(m.outputs["checkpoint"], res.state);
    write_text(m.outputs["loss_log"], format_loss_log(res.log));
    mw.finish();
    return {std::move(res), m.outputs["checkpoint"], m.outputs["loss_log"]};
  } catch (const std::exception& e) {
    mw.fail(e.what());
    throw;
  }
}

inline std::string report_text(const MetricReport& r) { return to_json(r).dump(2) + "\n"; }

inline std::string curve_text(std::span<const CurveSeries> series) {
  std::ostringstream os;
  write_curve_table(os, series);
  return os.str();
}

/// Scores a set of transcripts (generated or gold) against a reference
/// corpus and returns the report.
inline MetricReport evaluate_transcripts(std::span<const DialogueSample> transcripts,
                                         std::span<const DialogueSample> reference, const SynthSpec& spec) {
  const ConsistencyOracle oracle(spec);
  return score_transcripts(transcripts, reference, &oracle);
}

struct EvalOutcome {
  MetricReport report;
  std::vector<DialogueSample> generated;
};

/// Generates agent turns for every round of the test corpus from `checkpoint`
/// (or scores `transcripts_path` as given when no checkpoint is set) and
/// writes report.json, curve.csv and generated.jsonl into `out_dir`.
inline EvalOutcome run_eval(const std::string& checkpoint, const std::string& transcripts_path,
                            const std::string& test_path, const std::string& spec_path, const ExperimentConfig& cfg,
                            const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  RunManifest m;
  m.command = "eval";
  m.config = cfg;
  m.inputs["test"] = test_path;
  if (!checkpoint.empty()) m.inputs["checkpoint"] = checkpoint;
  if (!transcripts_path.empty()) m.inputs["transcripts"] = transcripts_path;
  if (!spec_path.empty()) m.inputs["spec"] = spec_path;
  m.outputs["report"] = (out_dir / "report.json").string();
  m.outputs["curve"] = (out_dir / "curve.csv").string();
  m.outputs["generated"] = (out_dir / "generated.jsonl").string();
  ManifestWriter mw(out_dir / "manifest.json", m);
  try {
    const auto test = load_corpus(test_path);
    const SynthSpec spec = spec_path.empty() ? SynthSpec::toy() : read_synth_spec(spec_path);
    EvalOutcome out;
    std::string mode = "transcripts";
    if (!checkpoint.empty()) {
      const auto model = load_checkpoint<Real>(checkpoint);
      if (!(model.config == cfg.model)) {
        throw ConfigError("eval: checkpoint model config differs from the run config");
      }
      out.generated = generate_responses(model, test, cfg.generation);
      mode = mode_name(cfg.train.mode);
    } else {
      out.generated = load_corpus(transcripts_path);
    }
    out.report = evaluate_transcripts(out.generated, test, spec);
    write_text(m.outputs["report"], report_text(out.report));
    const CurveSeries series[] = {{mode, out.report.consistency}};
    write_text(m.outputs["curve"], curve_text(series));
    std::ostringstream gen;
    write_corpus(gen, out.generated);
    write_text(m.outputs["generated"], gen.str());
    mw.finish();
    return out;
  } catch (const std::exception& e) {
    mw.fail(e.what());
    throw;
  }
}

struct CompareOutcome {
  std::vector<double> midi, concat, gold;
  MetricReport midi_report, concat_report;
};

/// Joint per-round table: round, midi, concat, gold.
inline std::string compare_table(const CompareOutcome& c) {
  std::ostringstream os;
  os << "round,midi,concat,gold\n";
  const std::size_t n = std::max({c.midi.size(), c.concat.size(), c.gold.size()});
  auto at = [](const std::vector<double>& v, std::size_t i) { return i < v.size() ? v[i] : 0.0; };
  char buf[96];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", i + 1, at(c.midi, i), at(c.concat, i), at(c.gold, i));
    os << buf;
  }
  return os.str();
}

/// Trains midi and concat from the same seed into out_dir/midi and
/// out_dir/concat, evaluates both on the test corpus and writes the joint
/// tables. Sub-runs write their own manifests.
inline CompareOutcome run_compare(const std::string& corpus_path, const std::string& test_path,
                                  const std::string& spec_path, const ExperimentConfig& cfg, const fs::path& out_dir,
                                  std::ostream* progress = nullptr) {
  cfg.validate();
  fs::create_directories(out_dir);
  RunManifest m;
  m.command = "compare";
  m.config = cfg;
  m.inputs["corpus"] = corpus_path;
  m.inputs["test"] = test_path;
  if (!spec_path.empty()) m.inputs["spec"] = spec_path;
  m.outputs["table"] = (out_dir / "compare.csv").string();
  m.outputs["curve"] = (out_dir / "curve.csv").string();
  m.outputs["report"] = (out_dir / "report.json").string();
  ManifestWriter mw(out_dir / "manifest.json", m);
  try {
    CompareOutcome c;
    for (TuneMode mode : {TuneMode::midi, TuneMode::concat}) {
      ExperimentConfig leg = cfg;
      leg.train.mode = mode;
      const fs::path dir = out_dir / mode_name(mode);
      if (progress) *progress << "training " << mode_name(mode) << "\n";
      auto t = run_train(corpus_path, leg, dir, progress);
      auto e = run_eval(t.checkpoint.string(), "", test_path, spec_path, leg, dir / "eval");
      (mode == TuneMode::midi ? c.midi : c.concat) = e.report.consistency;
      (mode == TuneMode::midi ? c.midi_report : c.concat_report) = e.report;
    }
    const auto test = load_corpus(test_path);
    const SynthSpec spec = spec_path.empty() ? SynthSpec::toy() : read_synth_spec(spec_path);
    c.gold = consistency_curve(test, ConsistencyOracle(spec));
    write_text(m.outputs["table"], compare_table(c));
    const CurveSeries series[] = {{"midi", c.midi}, {"concat", c.concat}, {"gold", c.gold}};
    write_text(m.outputs["curve"], curve_text(series));
    const ojson report{{"midi", to_json(c.midi_report)}, {"concat", to_json(c.concat_report)}, {"gold", c.gold}};
    write_text(m.outputs["report"], report.dump(2) + "\n");
    mw.finish();
    return c;
  } catch (const std::exception& e) {
    mw.fail(e.what());
    throw;
  }
}

}  // namespace midi
