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
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "midi/memory.hpp"
#include "midi/model.hpp"

namespace midi {

// ---------------------------------------------------------------------------
// Tokenizer

namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kRoleUser = 3;
inline constexpr int kRoleAgent = 4;
inline constexpr int kByteOffset = 5;
inline constexpr int kVocabSize = kByteOffset + 256;
}  // namespace token

/// Byte-level tokenizer: id = byte + 5, with five reserved specials below.
class ByteTokenizer {
 public:
  static std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(int(c) + token::kByteOffset);
    return ids;
  }

  static std::string decode(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < token::kByteOffset || id >= token::kVocabSize) {
        throw IndexError("detokenize: id " + std::to_string(id) + " is not a byte token");
      }
      out.push_back(char(id - token::kByteOffset));
    }
    return out;
  }

  static bool is_special(int id) { return id >= 0 && id < token::kByteOffset; }
  static constexpr int role_token(Role r) { return r == Role::user ? token::kRoleUser : token::kRoleAgent; }
};

// ---------------------------------------------------------------------------
// Dialogue records

struct Round {
  std::string user;
  std::string agent;
  bool operator==(const Round&) const = default;
};

/// Target annotation for success scoring; `round` is the 1-based round in
/// which the target topic is reached.
struct Target {
  std::string act;
  std::string topic;
  std::optional<std::size_t> round;
  bool operator==(const Target&) const = default;
};

struct DialogueSample {
  std::string instruction;
  std::vector<Round> rounds;
  std::optional<Target> target;
  bool operator==(const DialogueSample&) const = default;
};

inline nlohmann::json to_json(const DialogueSample& d) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& r : d.rounds) {
    turns.push_back({{"role", "user"}, {"text", r.user}});
    turns.push_back({{"role", "assistant"}, {"text", r.agent}});
  }
  nlohmann::json j = {{"instruction", d.instruction}, {"turns", turns}};
  if (d.target) {
    nlohmann::json t = {{"act", d.target->act}, {"topic", d.target->topic}};
    if (d.target->round) t["round"] = *d.target->round;
    j["target"] = t;
  }
  return j;
}

/// Parses one record. Turns must start with the user and alternate strictly,
/// ending on an agent turn.
inline DialogueSample dialogue_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("record is not an object");
  DialogueSample d;
  if (!j.contains("instruction") || !j["instruction"].is_string()) throw FormatError("missing string 'instruction'");
  d.instruction = j["instruction"].get<std::string>();
  if (!j.contains("turns") || !j["turns"].is_array()) throw FormatError("missing array 'turns'");
  const auto& turns = j["turns"];
  if (turns.empty()) throw FormatError("dialogue has no turns");
  if (turns.size() % 2 != 0) throw FormatError("dialogue ends on a user turn");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const auto& t = turns[i];
    if (!t.is_object() || !t.contains("role") || !t.contains("text") || !t["role"].is_string() ||
        !t["text"].is_string()) {
      throw FormatError("turn " + std::to_string(i) + " needs string 'role' and 'text'");
    }
    const std::string want = i % 2 == 0 ? "user" : "assistant";
    if (t["role"].get<std::string>() != want) {
      throw FormatError("turn " + std::to_string(i) + " should be '" + want + "' (turns alternate, user first)");
    }
    std::string text = t["text"].get<std::string>();
    if (text.empty()) throw FormatError("turn " + std::to_string(i) + " is empty");
    if (i % 2 == 0) {
      d.rounds.push_back(Round{std::move(text), {}});
    } else {
      d.rounds.back().agent = std::move(text);
    }
  }
  if (j.contains("target") && !j["target"].is_null()) {
    const auto& t = j["target"];
    Target tg;
    tg.act = t.value("act", "");
    tg.topic = t.value("topic", "");
    if (t.contains("round")) tg.round = t["round"].get<std::size_t>();
    d.target = tg;
  }
  return d;
}

/// Newline-delimited records. Errors carry 1-based line numbers.
inline std::vector<DialogueSample> read_corpus(std::istream& in) {
  std::vector<DialogueSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(dialogue_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<DialogueSample> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus '" + path + "'");
  return read_corpus(in);
}

/// Sampled text may hold byte sequences that are not UTF-8; those are written
/// as U+FFFD.
inline void write_corpus(std::ostream& out, std::span<const DialogueSample> corpus) {
  for (const auto& d : corpus) out << to_json(d).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
}

inline void write_corpus(const std::string& path, std::span<const DialogueSample> corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write corpus '" + path + "'");
  write_corpus(out, corpus);
  if (!out) throw FormatError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Token layout shared by every tuning mode

/// [BOS] instruction bytes.
inline std::vector<int> instruction_tokens(std::string_view instruction) {
  std::vector<int> t{token::kBos};
  auto b = ByteTokenizer::encode(instruction);
  t.insert(t.end(), b.begin(), b.end());
  return t;
}

/// [ROLE] utterance bytes [EOS]. Every token after the role marker is a
/// prediction target.
inline std::vector<int> utterance_tokens(Role role, std::string_view text) {
  std::vector<int> t{ByteTokenizer::role_token(role)};
  auto b = ByteTokenizer::encode(text);
  t.insert(t.end(), b.begin(), b.end());
  t.push_back(token::kEos);
  return t;
}

/// Drops the earliest rounds until at most `max_rounds` remain and the whole
/// dialogue fits in `max_positions`. The instruction is always kept.
inline DialogueSample truncate_rounds(const DialogueSample& d, std::size_t max_rounds, std::size_t max_positions) {
  if (d.rounds.empty()) throw ContractError("dialogue has no rounds");
  DialogueSample out = d;
  if (out.rounds.size() > max_rounds) {
    const std::size_t drop = out.rounds.size() - max_rounds;
    out.rounds.erase(out.rounds.begin(), out.rounds.begin() + std::ptrdiff_t(drop));
    if (out.target && out.target->round) {
      out.target->round = *out.target->round > drop ? std::optional<std::size_t>(*out.target->round - drop)
                                                     : std::nullopt;
    }
  }
  auto length = [](const DialogueSample& s) {
    std::size_t n = instruction_tokens(s.instruction).size();
    for (const auto& r : s.rounds) n += r.user.size() + r.agent.size() + 4;
    return n;
  };
  while (length(out) > max_positions) {
    if (out.rounds.size() == 1) {
      throw CapacityError("dialogue does not fit in " + std::to_string(max_positions) +
                          " positions even with a single round");
    }
    out.rounds.erase(out.rounds.begin());
    if (out.target && out.target->round) {
      out.target->round = *out.target->round > 1 ? std::optional<std::size_t>(*out.target->round - 1) : std::nullopt;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Round-structured batches

/// One padded [batch × length] token grid processed as a single segment.
/// loss_mask marks slots whose token is a prediction target.
struct SegmentGrid {
  Role role = Role::agent;
  SlotKind kind = SlotKind::agent;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> tokens;
  Bitmap validity;
  std::vector<std::uint8_t> loss_mask;
  std::vector<int> positions;

  Segment segment() const { return Segment{batch, length, tokens, positions}; }

  /// Targets/mask aligned with logits: slot j predicts token j+1.
  std::pair<std::vector<int>, std::vector<std::uint8_t>> shifted_targets() const {
    std::vector<int> tgt(batch * length, token::kPad);
    std::vector<std::uint8_t> m(batch * length, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j + 1 < length; ++j) {
        tgt[b * length + j] = tokens[b * length + j + 1];
        m[b * length + j] = loss_mask[b * length + j + 1];
      }
    }
    return {std::move(tgt), std::move(m)};
  }

  std::size_t loss_tokens() const {
    std::size_t n = 0;
    for (auto v : loss_mask) n += v;
    return n;
  }

  /// First `rows` sequences only.
  SegmentGrid take_rows(std::size_t rows) const {
    SegmentGrid g = *this;
    g.batch = rows;
    g.tokens.resize(rows * length);
    g.loss_mask.resize(rows * length);
    g.positions.resize(rows * length);
    g.validity.rows = rows;
    g.validity.bits.resize(rows * length);
    return g;
  }
};

/// Right-pads token rows into a grid. `loss_from` gives, per row, which
/// slots are targets (empty = none).
inline SegmentGrid pack_rows(const std::vector<std::vector<int>>& rows, const std::vector<std::vector<std::uint8_t>>& loss,
                             Role role, SlotKind kind) {
  SegmentGrid g;
  g.role = role;
  g.kind = kind;
  g.batch = rows.size();
  g.length = 1;
  for (const auto& r : rows) g.length = std::max(g.length, r.size());
  g.tokens.assign(g.batch * g.length, token::kPad);
  g.loss_mask.assign(g.batch * g.length, 0);
  g.positions.assign(g.batch * g.length, kPadPosition);
  g.validity = Bitmap(g.batch, g.length);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t j = 0; j < rows[b].size(); ++j) {
      g.tokens[b * g.length + j] = rows[b][j];
      g.validity.at(b, j) = 1;
      if (!loss[b].empty()) g.loss_mask[b * g.length + j] = loss[b][j];
    }
  }
  return g;
}

struct RoundGrids {
  SegmentGrid user;
  SegmentGrid agent;
};

/// A batch of dialogues laid out round by round, rows sorted by round count
/// descending so that the dialogues still active in round t are a prefix.
struct RoundBatch {
  std::vector<std::size_t> source_index;  // corpus index of each row
  std::vector<std::size_t> round_counts;  // per row, non-increasing
  SegmentGrid instruction;
  std::vector<RoundGrids> rounds;

  std::size_t batch() const { return round_counts.size(); }

  /// Rows whose dialogue has a round with 0-based index t.
  std::size_t active_rows(std::size_t t) const {
    std::size_t n = 0;
    while (n < round_counts.size() && round_counts[n] > t) ++n;
    return n;
  }
};

namespace detail {

inline std::vector<std::uint8_t> targets_after_marker(std::size_t n) {
  std::vector<std::uint8_t> m(n, 1);
  m[0] = 0;
  return m;
}

inline void assign_positions(SegmentGrid& g, std::vector<std::size_t>& counts) {
  g.positions = next_positions(counts, g.validity);
  for (std::size_t b = 0; b < g.batch; ++b) counts[b] += g.validity.row_count(b);
}

}  // namespace detail

struct BatchOptions {
  std::size_t batch_size = 16;
  std::size_t max_rounds = 10;
  std::size_t max_positions = 2048;
};

/// Chunks samples (in the given order) into round-structured batches.
inline std::vector<RoundBatch> build_round_batches(std::span<const DialogueSample> samples, BatchOptions opt,
                                                   std::span<const std::size_t> order = {}) {
  if (samples.empty()) throw ContractError("build_round_batches: empty sample set");
  if (opt.batch_size == 0) throw ContractError("build_round_batches: batch_size must be at least 1");
  if (opt.max_rounds == 0) throw ContractError("build_round_batches: max_rounds must be at least 1");
  std::vector<std::size_t> idx(order.begin(), order.end());
  if (idx.empty()) {
    idx.resize(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  std::vector<RoundBatch> out;
  for (std::size_t start = 0; start < idx.size(); start += opt.batch_size) {
    const std::size_t end = std::min(idx.size(), start + opt.batch_size);
    std::vector<std::pair<std::size_t, DialogueSample>> rows;
    for (std::size_t i = start; i < end; ++i) {
      rows.emplace_back(idx[i], truncate_rounds(samples[idx[i]], opt.max_rounds, opt.max_positions));
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto& a, const auto& b) { return a.second.rounds.size() > b.second.rounds.size(); });
    RoundBatch rb;
    std::vector<std::vector<int>> inst;
    std::vector<std::vector<std::uint8_t>> no_loss;
    for (const auto& [src, d] : rows) {
      rb.source_index.push_back(src);
      rb.round_counts.push_back(d.rounds.size());
      inst.push_back(instruction_tokens(d.instruction));
      no_loss.emplace_back();
    }
    rb.instruction = pack_rows(inst, no_loss, Role::agent, SlotKind::instruction);
    std::vector<std::size_t> counts(rows.size(), 0);
    detail::assign_positions(rb.instruction, counts);
    const std::size_t T = rb.round_counts.front();
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<std::vector<int>> u, a;
      std::vector<std::vector<std::uint8_t>> ul, al;
      for (const auto& [src, d] : rows) {
        if (t < d.rounds.size()) {
          u.push_back(utterance_tokens(Role::user, d.rounds[t].user));
          a.push_back(utterance_tokens(Role::agent, d.rounds[t].agent));
          ul.push_back(detail::targets_after_marker(u.back().size()));
          al.push_back(detail::targets_after_marker(a.back().size()));
        } else {
          u.emplace_back();
          a.emplace_back();
          ul.emplace_back();
          al.emplace_back();
        }
      }
      RoundGrids g{pack_rows(u, ul, Role::user, SlotKind::user), pack_rows(a, al, Role::agent, SlotKind::agent)};
      detail::assign_positions(g.user, counts);
      detail::assign_positions(g.agent, counts);
      rb.rounds.push_back(std::move(g));
    }
    out.push_back(std::move(rb));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Baseline samples

/// A flat token sequence with per-token target marks.
struct SequenceSample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;
  std::size_t context_length = 0;  // tokens before the trained response
};

/// Whole dialogue as one sequence; targets are the agent utterance tokens
/// and their EOS.
inline SequenceSample make_concat_sample(const DialogueSample& dialogue, std::size_t max_rounds = 10,
                                         std::size_t max_positions = 2048) {
  const DialogueSample d = truncate_rounds(dialogue, max_rounds, max_positions);
  SequenceSample s;
  s.tokens = instruction_tokens(d.instruction);
  s.loss_mask.assign(s.tokens.size(), 0);
  for (const auto& r : d.rounds) {
    auto u = utterance_tokens(Role::user, r.user);
    s.tokens.insert(s.tokens.end(), u.begin(), u.end());
    s.loss_mask.insert(s.loss_mask.end(), u.size(), 0);
    auto a = utterance_tokens(Role::agent, r.agent);
    s.tokens.insert(s.tokens.end(), a.begin(), a.end());
    s.loss_mask.push_back(0);
    s.loss_mask.insert(s.loss_mask.end(), a.size() - 1, 1);
  }
  return s;
}

/// One (context, response) sample per round: context is everything before
/// the agent's utterance of that round, response is [ROLE_AGENT] s_t [EOS]
/// with targets on s_t and EOS.
inline std::vector<SequenceSample> make_split_samples(const DialogueSample& dialogue, std::size_t max_rounds = 10,
                                                      std::size_t max_positions = 2048) {
  const DialogueSample d = truncate_rounds(dialogue, max_rounds, max_positions);
  std::vector<SequenceSample> out;
  std::vector<int> ctx = instruction_tokens(d.instruction);
  for (const auto& r : d.rounds) {
    auto u = utterance_tokens(Role::user, r.user);
    ctx.insert(ctx.end(), u.begin(), u.end());
    auto a = utterance_tokens(Role::agent, r.agent);
    SequenceSample s;
    s.context_length = ctx.size();
    s.tokens = ctx;
    s.tokens.insert(s.tokens.end(), a.begin(), a.end());
    s.loss_mask.assign(ctx.size() + 1, 0);
    s.loss_mask.insert(s.loss_mask.end(), a.size() - 1, 1);
    out.push_back(std::move(s));
    ctx.insert(ctx.end(), a.begin(), a.end());
  }
  return out;
}

/// Right-padded grid of sequences with positions 0..n-1, for the causal
/// baselines. Runs under the agent role.
inline SegmentGrid pack_sequences(std::span<const SequenceSample> seqs) {
  std::vector<std::vector<int>> rows;
  std::vector<std::vector<std::uint8_t>> loss;
  for (const auto& s : seqs) {
    rows.push_back(s.tokens);
    loss.push_back(s.loss_mask);
  }
  SegmentGrid g = pack_rows(rows, loss, Role::agent, SlotKind::agent);
  std::vector<std::size_t> counts(g.batch, 0);
  detail::assign_positions(g, counts);
  return g;
}

}  // namespace midi
