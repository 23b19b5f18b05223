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

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "midi/data.hpp"
#include "midi/rng.hpp"

namespace midi {

/// Description of a role-separated synthetic corpus. User and agent speak
/// from disjoint vocabularies; each dialogue draws one persona marker that
/// its agent repeats at the start of every utterance.
struct SynthSpec {
  std::vector<std::string> user_vocab;
  std::vector<std::string> agent_vocab;
  std::vector<std::string> persona_markers;
  std::vector<std::string> target_topics;  // non-empty => target-annotated corpus
  std::vector<std::string> target_acts{"recommend"};
  std::size_t min_rounds = 8;
  std::size_t max_rounds = 8;
  std::size_t min_words = 2;
  std::size_t max_words = 4;

  void validate() const {
    if (user_vocab.empty() || agent_vocab.empty() || persona_markers.empty()) {
      throw ConfigError("synth spec: user_vocab, agent_vocab and persona_markers must be non-empty");
    }
    if (min_rounds == 0 || min_rounds > max_rounds) throw ConfigError("synth spec: bad round range");
    if (min_words == 0 || min_words > max_words) throw ConfigError("synth spec: bad word-count range");
    if (!target_topics.empty() && target_acts.empty()) throw ConfigError("synth spec: target_acts is empty");
    std::set<std::string> user(user_vocab.begin(), user_vocab.end());
    std::set<std::string> agent_side(agent_vocab.begin(), agent_vocab.end());
    agent_side.insert(target_topics.begin(), target_topics.end());
    for (const auto& m : persona_markers) {
      if (agent_side.count(m)) throw ConfigError("synth spec: persona marker '" + m + "' is also an agent word");
    }
    agent_side.insert(persona_markers.begin(), persona_markers.end());
    agent_side.insert(target_topics.begin(), target_topics.end());
    for (const auto& w : user) {
      if (agent_side.count(w)) throw ConfigError("synth spec: role vocabularies overlap on '" + w + "'");
    }
    std::set<std::string> all = user;
    all.insert(agent_side.begin(), agent_side.end());
    for (const auto& w : all) {
      if (w.empty() || w.find_first_of(" \t\n") != std::string::npos) {
        throw ConfigError("synth spec: words must be non-empty and contain no whitespace");
      }
    }
  }

  /// Default spec used by the toy experiments.
  static SynthSpec toy() {
    SynthSpec s;
    s.user_vocab = {"bam", "cob", "dug", "fez", "gum", "hop"};
    s.agent_vocab = {"jay", "kit", "lox", "mud", "nib", "pal"};
    s.persona_markers = {"qat", "rex", "sol", "tam"};
    return s;
  }
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"user_vocab", s.user_vocab},   {"agent_vocab", s.agent_vocab}, {"persona_markers", s.persona_markers},
       {"target_topics", s.target_topics}, {"target_acts", s.target_acts}, {"min_rounds", s.min_rounds},
       {"max_rounds", s.max_rounds},   {"min_words", s.min_words},     {"max_words", s.max_words}};
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  SynthSpec d;
  s.user_vocab = j.at("user_vocab").get<std::vector<std::string>>();
  s.agent_vocab = j.at("agent_vocab").get<std::vector<std::string>>();
  s.persona_markers = j.at("persona_markers").get<std::vector<std::string>>();
  s.target_topics = j.value("target_topics", d.target_topics);
  s.target_acts = j.value("target_acts", d.target_acts);
  s.min_rounds = j.value("min_rounds", d.min_rounds);
  s.max_rounds = j.value("max_rounds", d.max_rounds);
  s.min_words = j.value("min_words", d.min_words);
  s.max_words = j.value("max_words", d.max_words);
}

inline SynthSpec read_synth_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open synth spec '" + path + "'");
  try {
    SynthSpec s = nlohmann::json::parse(in).get<SynthSpec>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("synth spec '" + path + "': " + e.what());
  }
}

inline std::string persona_instruction(const std::string& marker) { return "you are " + marker; }

/// Deterministic under `seed`. With target topics, the instruction names a
/// goal and the final agent utterance ends with the topic word.
inline std::vector<DialogueSample> synth_generate(std::uint64_t seed, std::size_t n_dialogues, const SynthSpec& spec) {
  spec.validate();
  Rng rng = Rng(seed).fork("synth");
  auto pick = [&rng](const std::vector<std::string>& v) -> const std::string& { return v[rng.below(v.size())]; };
  auto range = [&rng](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
  std::vector<DialogueSample> out;
  out.reserve(n_dialogues);
  for (std::size_t i = 0; i < n_dialogues; ++i) {
    DialogueSample d;
    const std::string marker = pick(spec.persona_markers);
    d.instruction = persona_instruction(marker);
    std::optional<Target> target;
    if (!spec.target_topics.empty()) {
      target = Target{pick(spec.target_acts), pick(spec.target_topics), std::nullopt};
      d.instruction += " goal " + target->act + " " + target->topic;
    }
    const std::size_t T = range(spec.min_rounds, spec.max_rounds);
    for (std::size_t t = 0; t < T; ++t) {
      Round r;
      const std::size_t nu = range(spec.min_words, spec.max_words);
      for (std::size_t w = 0; w < nu; ++w) r.user += (w ? " " : "") + pick(spec.user_vocab);
      r.agent = marker;
      const std::size_t na = range(spec.min_words, spec.max_words);
      for (std::size_t w = 0; w < na; ++w) r.agent += " " + pick(spec.agent_vocab);
      if (target && t + 1 == T) r.agent += " " + target->topic;
      d.rounds.push_back(std::move(r));
    }
    if (target) {
      target->round = T;
      d.target = target;
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace midi
