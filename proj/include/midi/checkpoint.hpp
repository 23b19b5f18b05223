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

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "midi/config.hpp"
#include "midi/model.hpp"

namespace midi {

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'D', 'I', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
U byteswap_if_big(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

template <class U>
void put(std::ostream& os, U v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& is, const char* what) {
  U v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError(std::string("checkpoint truncated in ") + what);
  return byteswap_if_big(v);
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

inline std::string get_string(std::istream& is, const char* what) {
  const auto n = get<std::uint32_t>(is, what);
  if (n > (1u << 24)) throw FormatError(std::string("checkpoint: implausible string length in ") + what);
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw FormatError(std::string("checkpoint truncated in ") + what);
  return s;
}

template <Scalar T>
using ScalarBits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

/// Layout: magic, u32 version, u8 scalar width, JSON header (model config,
/// lora config, roles), u32 array count, then per array its name, u8 rank,
/// u64 extents and little-endian scalars. Base arrays come first, then
/// adapter A/B pairs in adapter order.
template <Scalar T>
void save_checkpoint(std::ostream& os, const ModelState<T>& s) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint8_t>(os, std::uint8_t(sizeof(T)));
  ojson roles = ojson::array();
  for (Role r : s.adapters.roles()) roles.push_back(role_name(r));
  const ojson header{{"model", to_json(s.config)}, {"lora", to_json(s.lora)}, {"roles", roles}};
  detail::put_string(os, header.dump());
  std::uint32_t count = 0;
  auto counter = [&](const std::string&, const Array<T>&) { ++count; };
  BaseWeights<T>::visit(s.base, counter);
  RoleAdapters<T>::visit(s.adapters, counter);
  detail::put<std::uint32_t>(os, count);
  auto writer = [&](const std::string& name, const Array<T>& a) {
    detail::put_string(os, name);
    detail::put<std::uint8_t>(os, std::uint8_t(a.rank()));
    for (std::size_t e : a.shape()) detail::put<std::uint64_t>(os, e);
    for (T v : a.data()) detail::put(os, std::bit_cast<detail::ScalarBits<T>>(v));
  };
  BaseWeights<T>::visit(s.base, writer);
  RoleAdapters<T>::visit(s.adapters, writer);
  if (!os) throw Error("checkpoint: write failed");
}

template <Scalar T>
void save_checkpoint(const std::string& path, const ModelState<T>& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  save_checkpoint(out, s);
}

/// Reads a checkpoint of scalar type T. Rejects wrong magic, version, scalar
/// width, unexpected array names and shape mismatches against the header's
/// configuration.
template <Scalar T>
ModelState<T> load_checkpoint(std::istream& is) {
  char magic[sizeof kCheckpointMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto width = detail::get<std::uint8_t>(is, "dtype");
  if (width != sizeof(T)) {
    throw FormatError("checkpoint: stored scalar width " + std::to_string(width) + " bytes, requested " +
                      std::string(dtype_name<T>()));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(detail::get_string(is, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const ModelConfig mc = model_config_from_json(header.at("model"));
  const LoraConfig lc = lora_config_from_json(header.at("lora"));
  std::vector<Role> roles;
  for (const auto& r : header.at("roles")) {
    const std::string name = r.get<std::string>();
    if (name == "agent") {
      roles.push_back(Role::agent);
    } else if (name == "user") {
      roles.push_back(Role::user);
    } else {
      throw FormatError("checkpoint: unknown role '" + name + "'");
    }
  }
  ModelState<T> s = ModelState<T>::init(mc, lc, roles, 0);
  std::map<std::string, Array<T>*> slots;
  auto collect = [&](const std::string& name, Array<T>& a) { slots[name] = &a; };
  BaseWeights<T>::visit(s.base, collect);
  RoleAdapters<T>::visit(s.adapters, collect);
  const auto count = detail::get<std::uint32_t>(is, "array count");
  if (count != slots.size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " arrays stored, configuration expects " +
                      std::to_string(slots.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = detail::get_string(is, "array name");
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint: unexpected array '" + name + "'");
    Array<T>& dst = *it->second;
    const auto rank = detail::get<std::uint8_t>(is, "rank");
    Shape shape(rank);
    for (auto& e : shape) e = std::size_t(detail::get<std::uint64_t>(is, "shape"));
    if (shape != dst.shape()) {
      throw FormatError("checkpoint: array '" + name + "' has shape " + shape_string(shape) + ", expected " +
                        shape_string(dst.shape()));
    }
    for (T& v : dst.data()) v = std::bit_cast<T>(detail::get<detail::ScalarBits<T>>(is, "array data"));
    slots.erase(it);
  }
  return s;
}

template <Scalar T>
ModelState<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  return load_checkpoint<T>(in);
}

}  // namespace midi
