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
#include <cctype>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "midi/data.hpp"
#include "midi/inference.hpp"
#include "midi/synth.hpp"

namespace midi {

/// Lowercase, split on whitespace, strip trailing punctuation from each word.
/// Words that are pure punctuation vanish.
inline std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) {
    for (auto& c : w) c = char(std::tolower(static_cast<unsigned char>(c)));
    while (!w.empty() && std::ispunct(static_cast<unsigned char>(w.back()))) w.pop_back();
    if (!w.empty()) out.push_back(w);
  }
  return out;
}

namespace detail {

using Gram = std::vector<std::string>;

inline std::map<Gram, std::size_t> gram_counts(const std::vector<std::string>& words, std::size_t n) {
  std::map<Gram, std::size_t> c;
  for (std::size_t i = 0; i + n <= words.size(); ++i) ++c[Gram(words.begin() + long(i), words.begin() + long(i + n))];
  return c;
}

}  // namespace detail

inline double word_f1(std::string_view hypothesis, std::string_view reference) {
  const auto h = normalize_words(hypothesis);
  const auto r = normalize_words(reference);
  if (h.empty() || r.empty()) return 0.0;
  const auto hc = detail::gram_counts(h, 1);
  const auto rc = detail::gram_counts(r, 1);
  std::size_t overlap = 0;
  for (const auto& [g, n] : hc) {
    auto it = rc.find(g);
    if (it != rc.end()) overlap += std::min(n, it->second);
  }
  if (overlap == 0) return 0.0;
  const double p = double(overlap) / double(h.size());
  const double rec = double(overlap) / double(r.size());
  return 2.0 * p * rec / (p + rec);
}

/// Clipped k-gram precision: hypothesis counts capped by reference counts.
inline double modified_precision(const std::vector<std::string>& hyp, const std::vector<std::string>& ref,
                                 std::size_t k) {
  if (hyp.size() < k) return 0.0;
  const auto hc = detail::gram_counts(hyp, k);
  const auto rc = detail::gram_counts(ref, k);
  std::size_t clipped = 0, total = 0;
  for (const auto& [g, n] : hc) {
    total += n;
    auto it = rc.find(g);
    if (it != rc.end()) clipped += std::min(n, it->second);
  }
  return double(clipped) / double(total);
}

/// Cumulative BLEU-n without smoothing.
inline double bleu_n(std::string_view hypothesis, std::string_view reference, std::size_t n) {
  if (n == 0) throw ContractError("bleu_n: n must be at least 1");
  const auto h = normalize_words(hypothesis);
  const auto r = normalize_words(reference);
  if (h.size() < n || r.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const double p = modified_precision(h, r, k);
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  const double bp = std::min(1.0, std::exp(1.0 - double(r.size()) / double(h.size())));
  return bp * std::exp(log_sum / double(n));
}

enum class DistDenominator { words, ngrams };

/// Distinct n-grams over the whole hypothesis set. The default divides by
/// the total word count; `ngrams` divides by the total n-gram count.
inline double dist_n(std::span<const std::string> hypotheses, std::size_t n,
                     DistDenominator denom = DistDenominator::words) {
  if (n == 0) throw ContractError("dist_n: n must be at least 1");
  std::set<detail::Gram> distinct;
  std::size_t words = 0, grams = 0;
  for (const auto& hyp : hypotheses) {
    const auto w = normalize_words(hyp);
    words += w.size();
    for (std::size_t i = 0; i + n <= w.size(); ++i) {
      distinct.insert(detail::Gram(w.begin() + long(i), w.begin() + long(i + n)));
      ++grams;
    }
  }
  const std::size_t d = denom == DistDenominator::words ? words : grams;
  return d == 0 ? 0.0 : double(distinct.size()) / double(d);
}

inline bool contains_ci(std::string_view hay, std::string_view needle) {
  if (needle.empty()) return true;
  auto lower = [](std::string_view s) {
    std::string o(s);
    for (auto& c : o) c = char(std::tolower(static_cast<unsigned char>(c)));
    return o;
  };
  return lower(hay).find(lower(needle)) != std::string::npos;
}

struct SuccessResult {
  double score = 0.0;
  std::size_t evaluated = 0;
  std::size_t successes = 0;
  std::size_t skipped = 0;  // transcripts without a target annotation
};

/// Rounds are 1-based. A transcript succeeds when the target topic appears in
/// an agent utterance at its annotated round plus or minus `window`.
inline SuccessResult success_rate(std::span<const DialogueSample> transcripts, std::size_t window = 1) {
  SuccessResult r;
  for (const auto& d : transcripts) {
    if (!d.target || !d.target->round || d.target->topic.empty()) {
      ++r.skipped;
      continue;
    }
    ++r.evaluated;
    const std::size_t g = *d.target->round;
    const std::size_t lo = g > window ? g - window : 1;
    for (std::size_t t = lo; t <= g + window && t <= d.rounds.size(); ++t) {
      if (contains_ci(d.rounds[t - 1].agent, d.target->topic)) {
        ++r.successes;
        break;
      }
    }
  }
  r.score = r.evaluated == 0 ? 0.0 : double(r.successes) / double(r.evaluated);
  return r;
}

/// Deterministic stand-in for a learned consistency estimator. An agent
/// utterance is consistent when it carries the dialogue's persona marker,
/// no other marker, and otherwise only agent-vocabulary (or target-topic)
/// words.
class ConsistencyOracle {
 public:
  explicit ConsistencyOracle(const SynthSpec& spec) : spec_(spec) {
    agent_.insert(spec.agent_vocab.begin(), spec.agent_vocab.end());
    agent_.insert(spec.target_topics.begin(), spec.target_topics.end());
    markers_.insert(spec.persona_markers.begin(), spec.persona_markers.end());
  }

  /// The persona marker named in an instruction, if exactly one appears.
  std::optional<std::string> persona_of(std::string_view instruction) const {
    std::optional<std::string> found;
    for (const auto& w : normalize_words(instruction)) {
      if (!markers_.count(w)) continue;
      if (found && *found != w) return std::nullopt;
      found = w;
    }
    return found;
  }

  bool consistent(std::string_view instruction, std::string_view agent_utterance) const {
    const auto persona = persona_of(instruction);
    if (!persona) return false;
    bool has_marker = false;
    for (const auto& w : normalize_words(agent_utterance)) {
      if (w == *persona) {
        has_marker = true;
      } else if (!agent_.count(w)) {
        return false;
      }
    }
    return has_marker;
  }

  const SynthSpec& spec() const { return spec_; }

 private:
  SynthSpec spec_;
  std::set<std::string> agent_;
  std::set<std::string> markers_;
};

/// Fraction of dialogues, per 1-based round, whose agent utterance the oracle
/// accepts. Entry t-1 averages over dialogues that reach round t.
inline std::vector<double> consistency_curve(std::span<const DialogueSample> transcripts,
                                             const ConsistencyOracle& oracle) {
  std::size_t rounds = 0;
  for (const auto& d : transcripts) rounds = std::max(rounds, d.rounds.size());
  std::vector<double> hits(rounds, 0.0), seen(rounds, 0.0);
  for (const auto& d : transcripts) {
    for (std::size_t t = 0; t < d.rounds.size(); ++t) {
      seen[t] += 1.0;
      if (oracle.consistent(d.instruction, d.rounds[t].agent)) hits[t] += 1.0;
    }
  }
  for (std::size_t t = 0; t < rounds; ++t) hits[t] /= seen[t];
  return hits;
}

/// For every dialogue and round, primes the gold history up to the round's
/// user turn and samples an agent response. The result keeps gold user turns
/// and targets, with generated agent turns. Rounds that do not fit in the
/// position budget end that dialogue's transcript early.
template <Scalar T>
std::vector<DialogueSample> generate_responses(const ModelState<T>& model, std::span<const DialogueSample> dialogues,
                                               const GenerationConfig& cfg) {
  cfg.validate();
  std::vector<DialogueSample> out;
  out.reserve(dialogues.size());
  Rng root = Rng(cfg.seed).fork("sampling");
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    const auto& d = dialogues[i];
    Rng rng = root.fork("dialogue/" + std::to_string(i));
    DialogueSample gen{d.instruction, {}, d.target};
    DialogueSession<T> s(model);
    try {
      s.feed_instruction(d.instruction);
      for (const auto& r : d.rounds) {
        s.feed_utterance(SlotKind::user, r.user);
        const RoundMemory<T> before = s.memory();
        const std::string reply = decode_utterance(s.generate(SlotKind::agent, cfg, rng));
        s.set_memory(before);
        s.feed_utterance(SlotKind::agent, r.agent);
        gen.rounds.push_back({r.user, reply});
      }
    } catch (const CapacityError&) {
    }
    out.push_back(std::move(gen));
  }
  return out;
}

struct MetricReport {
  double word_f1 = 0.0;
  double bleu_1 = 0.0;
  double bleu_2 = 0.0;
  double dist_1 = 0.0;
  double dist_2 = 0.0;
  std::optional<SuccessResult> succ;
  std::vector<double> consistency;
  std::size_t responses = 0;
};

/// Scores generated transcripts against gold ones round by round. Pairs are
/// matched by dialogue index and round; F1 and BLEU are means over pairs.
inline MetricReport score_transcripts(std::span<const DialogueSample> generated, std::span<const DialogueSample> gold,
                                      const ConsistencyOracle* oracle) {
  if (generated.size() != gold.size()) throw ContractError("score_transcripts: transcript count mismatch");
  MetricReport rep;
  std::vector<std::string> hyps;
  bool any_target = false;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const std::size_t n = std::min(generated[i].rounds.size(), gold[i].rounds.size());
    for (std::size_t t = 0; t < n; ++t) {
      const auto& h = generated[i].rounds[t].agent;
      const auto& r = gold[i].rounds[t].agent;
      rep.word_f1 += word_f1(h, r);
      rep.bleu_1 += bleu_n(h, r, 1);
      rep.bleu_2 += bleu_n(h, r, 2);
      hyps.push_back(h);
    }
    any_target = any_target || generated[i].target.has_value();
  }
  rep.responses = hyps.size();
  if (!hyps.empty()) {
    const double n = double(hyps.size());
    rep.word_f1 /= n;
    rep.bleu_1 /= n;
    rep.bleu_2 /= n;
  }
  rep.dist_1 = dist_n(hyps, 1);
  rep.dist_2 = dist_n(hyps, 2);
  if (any_target) rep.succ = success_rate(generated);
  if (oracle) rep.consistency = consistency_curve(generated, *oracle);
  return rep;
}

inline nlohmann::ordered_json to_json(const MetricReport& r) {
  nlohmann::ordered_json j{{"responses", r.responses}, {"word_f1", r.word_f1}, {"bleu_1", r.bleu_1},
                           {"bleu_2", r.bleu_2},       {"dist_1", r.dist_1},   {"dist_2", r.dist_2}};
  if (r.succ) {
    j["succ"] = {{"score", r.succ->score},
                 {"evaluated", r.succ->evaluated},
                 {"successes", r.succ->successes},
                 {"skipped", r.succ->skipped}};
  }
  j["consistency"] = r.consistency;
  return j;
}

/// One named per-round series for the plot table.
struct CurveSeries {
  std::string mode;
  std::vector<double> scores;
};

/// CSV with header `round,score,mode`, one row per (round, mode). Scores are
/// printed with fixed precision so tables compare byte for byte.
inline void write_curve_table(std::ostream& os, std::span<const CurveSeries> series) {
  os << "round,score,mode\n";
  for (const auto& s : series) {
    for (std::size_t t = 0; t < s.scores.size(); ++t) {
      os << (t + 1) << ',' << std::fixed << std::setprecision(6) << s.scores[t] << ',' << s.mode << '\n';
    }
  }
}

}  // namespace midi
