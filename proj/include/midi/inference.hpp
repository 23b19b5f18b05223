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

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "midi/data.hpp"
#include "midi/memory.hpp"
#include "midi/model.hpp"
#include "midi/rng.hpp"

namespace midi {

struct GenerationConfig {
  double top_p = 0.75;
  std::size_t top_k = 40;
  double temperature = 1.0;
  std::size_t max_new_tokens = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("generation: top_p must lie in (0, 1]");
    if (top_k == 0) throw ConfigError("generation: top_k must be at least 1");
    if (!(temperature > 0.0)) throw ConfigError("generation: temperature must be positive");
    if (max_new_tokens == 0) throw ConfigError("generation: max_new_tokens must be at least 1");
  }
};

/// Ids that may be generated: byte tokens and EOS.
inline bool generable(int id) { return id == token::kEos || (id >= token::kByteOffset && id < token::kVocabSize); }

/// Nucleus candidates from a probability vector: the top_k most probable
/// ids (ties broken by lower id), cut to the shortest prefix whose mass
/// reaches top_p. Returns (id, renormalised probability) pairs.
inline std::vector<std::pair<int, double>> nucleus_candidates(std::span<const double> probs, std::size_t top_k,
                                                              double top_p) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) ids.push_back(int(i));
  }
  if (ids.empty()) throw NumericError("nucleus sampling: no candidate with positive probability");
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return probs[std::size_t(a)] > probs[std::size_t(b)]; });
  if (ids.size() > top_k) ids.resize(top_k);
  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < ids.size()) {
    mass += probs[std::size_t(ids[keep])];
    ++keep;
    if (mass >= top_p) break;
  }
  std::vector<std::pair<int, double>> out;
  for (std::size_t i = 0; i < keep; ++i) out.emplace_back(ids[i], probs[std::size_t(ids[i])] / mass);
  return out;
}

/// Temperature-scaled softmax over generable ids; everything else gets 0.
template <Scalar T>
std::vector<double> generation_probs(std::span<const T> logits, double temperature) {
  std::vector<double> p(logits.size(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (generable(int(i))) mx = std::max(mx, double(logits[i]) / temperature);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!generable(int(i))) continue;
    p[i] = std::exp(double(logits[i]) / temperature - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

inline int sample_candidate(const std::vector<std::pair<int, double>>& cands, Rng& rng) {
  double u = rng.uniform();
  for (const auto& [id, p] : cands) {
    if (u < p) return id;
    u -= p;
  }
  return cands.back().first;
}

template <Scalar T>
int sample_token(std::span<const T> logits, const GenerationConfig& cfg, Rng& rng) {
  const auto probs = generation_probs(logits, cfg.temperature);
  return sample_candidate(nucleus_candidates(probs, cfg.top_k, cfg.top_p), rng);
}

/// Most probable generable id, lowest id on ties.
template <Scalar T>
int greedy_token(std::span<const T> logits) {
  int best = -1;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!generable(int(i))) continue;
    if (best < 0 || logits[i] > logits[std::size_t(best)]) best = int(i);
  }
  return best;
}

/// Which adapter runs each kind of segment. Baseline checkpoints carry only
/// agent deltas and run every segment through them.
struct RolePolicy {
  Role instruction = Role::agent;
  Role user = Role::user;
  Role agent = Role::agent;

  template <Scalar T>
  static RolePolicy for_adapters(const RoleAdapters<T>& a) {
    RolePolicy p;
    if (!a.has_role(Role::user)) p.user = Role::agent;
    return p;
  }
};

/// One dialogue's rolling cache. Instruction and agent segments run on the
/// agent model, user segments on the user model; both must share one base.
template <Scalar T>
class DialogueSession {
 public:
  DialogueSession(const ModelState<T>& agent_model, const ModelState<T>& user_model, MaskOptions opts = {})
      : agent_(agent_model),
        user_(user_model),
        opts_(opts),
        memory_(agent_model.config.n_layers, 1, agent_model.config.n_heads, agent_model.config.head_dim()) {
    if (!(agent_model.config == user_model.config)) {
      throw ConfigError("dialogue session: agent and user checkpoints have different model configs");
    }
  }

  explicit DialogueSession(const ModelState<T>& model, MaskOptions opts = {}) : DialogueSession(model, model, opts) {}

  const RoundMemory<T>& memory() const { return memory_; }
  void set_memory(RoundMemory<T> m) { memory_ = std::move(m); }

  /// Forwards tokens as one segment spoken by `speaker` and appends their
  /// keys/values. Returns logits of the last token.
  std::vector<T> feed(std::span<const int> tokens, SlotKind speaker) {
    if (tokens.empty()) throw ContractError("feed: empty segment");
    const ModelState<T>& model = speaker == SlotKind::user ? user_ : agent_;
    const RolePolicy policy = RolePolicy::for_adapters(model.adapters);
    const Role role = speaker == SlotKind::user       ? policy.user
                      : speaker == SlotKind::agent    ? policy.agent
                                                      : policy.instruction;
    Bitmap valid(1, tokens.size(), 1);
    Segment seg{1, tokens.size(), std::vector<int>(tokens.begin(), tokens.end()), next_positions(memory_, valid)};
    MaskOptions opts = opts_;
    opts.hide_instruction = opts_.hide_instruction && role == Role::user;
    const AttentionMask mask = build_mask(memory_, valid, opts);
    Tape<T> tape(false);
    BoundModel<T> bound(tape, model.config, model.base, model.adapters, false);
    SegmentOutput<T> out = forward_segment(bound, seg, role, memory_, mask);
    memory_ = append(memory_, std::span<const LayerKV<T>>(kv_arrays(out)), valid, speaker);
    const std::size_t V = model.config.vocab_size;
    const T* last = out.logits.value().ptr() + (tokens.size() - 1) * V;
    return std::vector<T>(last, last + V);
  }

  void feed_instruction(std::string_view text) { feed(instruction_tokens(text), SlotKind::instruction); }

  void feed_utterance(SlotKind speaker, std::string_view text) {
    feed(utterance_tokens(speaker == SlotKind::user ? Role::user : Role::agent, text), speaker);
  }

  /// Emits the speaker's role marker, then samples token by token (greedy when
  /// `greedy` is set), forwarding each accepted token. Stops after EOS or
  /// max_new_tokens; the memory always ends the utterance with EOS. Returns
  /// the sampled ids, EOS included when produced.
  std::vector<int> generate(SlotKind speaker, const GenerationConfig& cfg, Rng& rng, bool greedy = false) {
    cfg.validate();
    const Role marker_role = speaker == SlotKind::user ? Role::user : Role::agent;
    const int marker = ByteTokenizer::role_token(marker_role);
    std::vector<T> logits = feed(std::span<const int>(&marker, 1), speaker);
    std::vector<int> out;
    while (out.size() < cfg.max_new_tokens) {
      const int next = greedy ? greedy_token<T>(logits) : sample_token<T>(logits, cfg, rng);
      out.push_back(next);
      logits = feed(std::span<const int>(&next, 1), speaker);
      if (next == token::kEos) return out;
    }
    const int eos = token::kEos;
    feed(std::span<const int>(&eos, 1), speaker);
    return out;
  }

 private:
  const ModelState<T>& agent_;
  const ModelState<T>& user_;
  MaskOptions opts_;
  RoundMemory<T> memory_;
};

/// Text of generated ids without the trailing EOS.
inline std::string decode_utterance(std::span<const int> ids) {
  std::vector<int> bytes;
  for (int id : ids) {
    if (id == token::kEos) break;
    bytes.push_back(id);
  }
  return ByteTokenizer::decode(bytes);
}

/// History entry for priming.
struct Utterance {
  SlotKind speaker;
  std::string text;
};

/// Instruction, then each utterance as its own segment under its speaker's
/// adapter. Nothing is trained and no logits are kept.
template <Scalar T>
RoundMemory<T> prime_memory(const ModelState<T>& model, std::string_view instruction, std::span<const Utterance> history,
                            MaskOptions opts = {}) {
  DialogueSession<T> s(model, opts);
  s.feed_instruction(instruction);
  SlotKind expect = SlotKind::user;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (history[i].speaker != expect) throw ContractError("prime_memory: history must alternate user, agent, ...");
    try {
      s.feed_utterance(history[i].speaker, history[i].text);
    } catch (const CapacityError& e) {
      throw CapacityError("round " + std::to_string(i / 2 + 1) + ": " + e.what());
    }
    expect = expect == SlotKind::user ? SlotKind::agent : SlotKind::user;
  }
  return s.memory();
}

/// Agent response from a primed memory; the returned ids exclude the role
/// marker.
template <Scalar T>
std::vector<int> generate_response(const ModelState<T>& model, const RoundMemory<T>& memory, const GenerationConfig& cfg,
                                   Rng& rng) {
  DialogueSession<T> s(model);
  s.set_memory(memory);
  return s.generate(SlotKind::agent, cfg, rng);
}

struct ChatResult {
  DialogueSample transcript;
  bool truncated = false;  // stopped early on a capacity overflow
};

/// Where user turns come from during a simulated chat.
using UserTurnSource = std::function<std::optional<std::string>(std::size_t round)>;

/// Alternates user and agent turns for `rounds` rounds over one shared
/// memory. User turns come from `user_source` when given, otherwise they are
/// generated by the user model.
template <Scalar T>
ChatResult self_chat(const ModelState<T>& agent_model, const ModelState<T>& user_model, const std::string& instruction,
                     std::size_t rounds, const GenerationConfig& cfg, const UserTurnSource& user_source = {}) {
  cfg.validate();
  ChatResult res;
  res.transcript.instruction = instruction;
  DialogueSession<T> s(agent_model, user_model);
  Rng rng = Rng(cfg.seed).fork("sampling");
  try {
    s.feed_instruction(instruction);
    for (std::size_t t = 0; t < rounds; ++t) {
      Round r;
      if (user_source) {
        auto turn = user_source(t);
        if (!turn) break;
        r.user = *turn;
        s.feed_utterance(SlotKind::user, r.user);
      } else {
        r.user = decode_utterance(s.generate(SlotKind::user, cfg, rng));
      }
      r.agent = decode_utterance(s.generate(SlotKind::agent, cfg, rng));
      res.transcript.rounds.push_back(std::move(r));
    }
  } catch (const CapacityError&) {
    res.truncated = true;
  }
  return res;
}

}  // namespace midi
