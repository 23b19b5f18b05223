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

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "midi/inference.hpp"
#include "midi/model.hpp"
#include "midi/training.hpp"

namespace midi {

using ojson = nlohmann::ordered_json;

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline Projection parse_projection(const std::string& s) {
  if (s == "q") return Projection::q;
  if (s == "k") return Projection::k;
  if (s == "v") return Projection::v;
  if (s == "o") return Projection::o;
  throw ConfigError("unknown projection '" + s + "'");
}

inline std::vector<std::string> projection_names(const std::vector<Projection>& ps) {
  std::vector<std::string> out;
  for (auto p : ps) out.emplace_back(projection_name(p));
  return out;
}

inline std::vector<Projection> parse_projections(const std::vector<std::string>& ss) {
  std::vector<Projection> out;
  for (const auto& s : ss) out.push_back(parse_projection(s));
  return out;
}

}  // namespace detail

inline ojson to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},       {"n_layers", c.n_layers},           {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},       {"max_positions", c.max_positions},
          {"rope_base", c.rope_base},   {"norm_epsilon", c.norm_epsilon}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  const std::string w = "model";
  detail::reject_unknown(j, w, {"d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_positions", "rope_base",
                                "norm_epsilon"});
  ModelConfig c;
  detail::read_opt(j, "d_model", c.d_model, w);
  detail::read_opt(j, "n_layers", c.n_layers, w);
  detail::read_opt(j, "n_heads", c.n_heads, w);
  detail::read_opt(j, "d_ff", c.d_ff, w);
  detail::read_opt(j, "vocab_size", c.vocab_size, w);
  detail::read_opt(j, "max_positions", c.max_positions, w);
  detail::read_opt(j, "rope_base", c.rope_base, w);
  detail::read_opt(j, "norm_epsilon", c.norm_epsilon, w);
  c.validate();
  if (c.vocab_size < std::size_t(token::kVocabSize)) {
    throw ConfigError("model: vocab_size must cover the " + std::to_string(token::kVocabSize) + " tokenizer ids");
  }
  return c;
}

inline ojson to_json(const LoraConfig& c) {
  return {{"rank", c.rank},
          {"alpha", c.alpha},
          {"agent_targets", detail::projection_names(c.agent_targets)},
          {"user_targets", detail::projection_names(c.user_targets)}};
}

inline LoraConfig lora_config_from_json(const nlohmann::json& j) {
  const std::string w = "lora";
  detail::reject_unknown(j, w, {"rank", "alpha", "agent_targets", "user_targets"});
  LoraConfig c;
  detail::read_opt(j, "rank", c.rank, w);
  detail::read_opt(j, "alpha", c.alpha, w);
  std::vector<std::string> at = detail::projection_names(c.agent_targets);
  std::vector<std::string> ut = detail::projection_names(c.user_targets);
  detail::read_opt(j, "agent_targets", at, w);
  detail::read_opt(j, "user_targets", ut, w);
  c.agent_targets = detail::parse_projections(at);
  c.user_targets = detail::parse_projections(ut);
  return c;
}

inline ojson to_json(const TrainConfig& c) {
  return {{"mode", mode_name(c.mode)},
          {"beta", c.beta},
          {"lr", c.lr},
          {"warmup_ratio", c.warmup_ratio},
          {"schedule", c.schedule},
          {"global_batch", c.global_batch},
          {"micro_batch", c.micro_batch},
          {"epochs", c.epochs},
          {"max_rounds", c.max_rounds},
          {"seed", c.seed},
          {"backprop_through_rounds", c.backprop_through_rounds},
          {"strictly_cross_round", c.strictly_cross_round},
          {"user_hides_instruction", c.user_hides_instruction},
          {"adamw",
           {{"beta1", c.adamw.beta1},
            {"beta2", c.adamw.beta2},
            {"eps", c.adamw.eps},
            {"weight_decay", c.adamw.weight_decay}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  const std::string w = "train";
  detail::reject_unknown(j, w, {"mode", "beta", "lr", "warmup_ratio", "schedule", "global_batch", "micro_batch",
                                "epochs", "max_rounds", "seed", "backprop_through_rounds", "strictly_cross_round",
                                "user_hides_instruction", "adamw"});
  TrainConfig c;
  std::string mode = mode_name(c.mode);
  detail::read_opt(j, "mode", mode, w);
  c.mode = parse_mode(mode);
  detail::read_opt(j, "beta", c.beta, w);
  detail::read_opt(j, "lr", c.lr, w);
  detail::read_opt(j, "warmup_ratio", c.warmup_ratio, w);
  detail::read_opt(j, "schedule", c.schedule, w);
  detail::read_opt(j, "global_batch", c.global_batch, w);
  detail::read_opt(j, "micro_batch", c.micro_batch, w);
  detail::read_opt(j, "epochs", c.epochs, w);
  detail::read_opt(j, "max_rounds", c.max_rounds, w);
  detail::read_opt(j, "seed", c.seed, w);
  detail::read_opt(j, "backprop_through_rounds", c.backprop_through_rounds, w);
  detail::read_opt(j, "strictly_cross_round", c.strictly_cross_round, w);
  detail::read_opt(j, "user_hides_instruction", c.user_hides_instruction, w);
  if (j.contains("adamw")) {
    const auto& a = j.at("adamw");
    detail::reject_unknown(a, "train.adamw", {"beta1", "beta2", "eps", "weight_decay"});
    detail::read_opt(a, "beta1", c.adamw.beta1, "train.adamw");
    detail::read_opt(a, "beta2", c.adamw.beta2, "train.adamw");
    detail::read_opt(a, "eps", c.adamw.eps, "train.adamw");
    detail::read_opt(a, "weight_decay", c.adamw.weight_decay, "train.adamw");
  }
  return c;
}

inline ojson to_json(const GenerationConfig& c) {
  return {{"top_p", c.top_p},
          {"top_k", c.top_k},
          {"temperature", c.temperature},
          {"max_new_tokens", c.max_new_tokens},
          {"seed", c.seed}};
}

inline GenerationConfig generation_config_from_json(const nlohmann::json& j) {
  const std::string w = "generation";
  detail::reject_unknown(j, w, {"top_p", "top_k", "temperature", "max_new_tokens", "seed"});
  GenerationConfig c;
  detail::read_opt(j, "top_p", c.top_p, w);
  detail::read_opt(j, "top_k", c.top_k, w);
  detail::read_opt(j, "temperature", c.temperature, w);
  detail::read_opt(j, "max_new_tokens", c.max_new_tokens, w);
  detail::read_opt(j, "seed", c.seed, w);
  return c;
}

/// Everything a run needs besides its input files. One seed drives model
/// init, data order and sampling through labelled forks.
struct ExperimentConfig {
  ModelConfig model;
  LoraConfig lora;
  TrainConfig train;
  GenerationConfig generation;
  std::uint64_t seed = 0;

  /// Pushes the run seed into the sub-configs.
  void apply_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    generation.seed = s;
  }

  void validate() const {
    model.validate();
    lora.validate(model);
    train.validate();
    generation.validate();
  }
};

inline ojson to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"model", to_json(c.model)},
          {"lora", to_json(c.lora)},
          {"train", to_json(c.train)},
          {"generation", to_json(c.generation)}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, "config", {"seed", "model", "lora", "train", "generation"});
  ExperimentConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("lora")) c.lora = lora_config_from_json(j.at("lora"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("generation")) c.generation = generation_config_from_json(j.at("generation"));
  std::uint64_t seed = c.train.seed;
  detail::read_opt(j, "seed", seed, "config");
  c.apply_seed(seed);
  c.validate();
  return c;
}

inline ExperimentConfig read_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

/// 64-bit FNV-1a as 16 lowercase hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path + " for hashing");
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a_hex(ss.str());
}

/// Hash of the canonical serialisation, so a config read back from a
/// manifest hashes the same as the one that produced it.
inline std::string config_hash(const ExperimentConfig& c) { return fnv1a_hex(to_json(c).dump()); }

}  // namespace midi
