#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   bytes 0..7    magic "CLPLCKPT"
//   bytes 8..15   u64 header length H
//   next H bytes  JSON header
//   remainder     payload: float64 values of every manifest tensor,
//                 concatenated in manifest order
//
// The header holds format_version, config_hash, step, the tensor manifest
// (name, shape, offset and length in bytes relative to the payload start),
// optimizer scalars, payload_bytes and an FNV-1a 64 hash of the payload.
// Optimizer slots and LookAhead slow weights are ordinary manifest entries
// named "opt/<slot>/<param>".

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cliplite/binary_io.hpp"
#include "cliplite/model.hpp"
#include "cliplite/optim.hpp"
#include "cliplite/rng.hpp"
#include "cliplite/training.hpp"

namespace cliplite {

inline constexpr std::string_view kCheckpointMagic = "CLPLCKPT";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct CheckpointHeader {
  int format_version = kCheckpointVersion;
  std::string config_hash;
  std::uint64_t step = 0;
  std::vector<CheckpointEntry> manifest;
  nlohmann::ordered_json optimizer;  // null when the checkpoint has no optimizer state
  std::uint64_t payload_bytes = 0;
  std::string payload_hash;
};

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

namespace detail {

struct NamedTensorRef {
  std::string name;
  Tensor* tensor;
};

inline std::vector<NamedTensorRef> checkpoint_tensors(ClipModel& model, OptimizerState* opt) {
  std::vector<NamedTensorRef> out;
  for (auto& p : model.parameters(true)) out.push_back({p.name, p.tensor});
  if (opt) {
    for (auto& slot : opt->slots) {
      if (!slot.first.data.empty()) out.push_back({"opt/first/" + slot.name, &slot.first});
      if (!slot.second.data.empty()) out.push_back({"opt/second/" + slot.name, &slot.second});
      if (!slot.slow.data.empty()) out.push_back({"opt/slow/" + slot.name, &slot.slow});
    }
  }
  return out;
}

inline nlohmann::ordered_json optimizer_json(const OptimizerState& s) {
  const auto& c = s.config;
  nlohmann::ordered_json slots = nlohmann::ordered_json::array();
  for (const auto& slot : s.slots) slots.push_back(slot.name);
  return {{"kind", optimizer_name(c.kind)},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"lookahead", {{"enabled", c.lookahead.enabled}, {"alpha", c.lookahead.alpha}, {"k", c.lookahead.k}}},
          {"step_count", s.step_count},
          {"slots", slots}};
}

}  // namespace detail

/// Writes model (and optimizer state when given) atomically.
inline void save_checkpoint(const std::filesystem::path& path, ClipModel& model,
                            OptimizerState* optimizer, std::uint64_t step,
                            const std::string& config_hash) {
  std::string payload;
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  for (const auto& ref : detail::checkpoint_tensors(model, optimizer)) {
    const std::uint64_t offset = payload.size();
    for (double v : ref.tensor->data) io::put_f64(payload, v);
    manifest.push_back({{"name", ref.name},
                        {"shape", ref.tensor->shape},
                        {"offset", offset},
                        {"length", payload.size() - offset}});
  }
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["config_hash"] = config_hash;
  header["step"] = step;
  header["tensors"] = manifest;
  header["optimizer"] = optimizer ? detail::optimizer_json(*optimizer) : nlohmann::ordered_json();
  header["payload_bytes"] = payload.size();
  header["payload_fnv1a64"] = hex64(fnv1a64(payload));
  const std::string h = header.dump();
  std::string bytes(kCheckpointMagic);
  io::put_u64(bytes, h.size());
  bytes += h;
  bytes += payload;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  io::write_file_atomic(path, bytes);
}

struct LoadedCheckpoint {
  CheckpointHeader header;
  std::map<std::string, Tensor> tensors;
};

/// Parses and validates a checkpoint file. `expected_hash`, when non-empty,
/// must equal the stored config hash.
inline LoadedCheckpoint read_checkpoint(const std::filesystem::path& path,
                                        const std::string& expected_hash = "") {
  if (!std::filesystem::exists(path)) throw IoError("missing checkpoint '" + path.string() + "'");
  const std::string bytes = io::read_file(path);
  if (bytes.size() < 16 || std::string_view(bytes).substr(0, 8) != kCheckpointMagic) {
    throw IoError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  const std::uint64_t hlen = io::get_u64(bytes, 8);
  if (16 + hlen > bytes.size()) throw IoError("checkpoint header length exceeds file size");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  LoadedCheckpoint out;
  auto& h = out.header;
  if (!j.contains("format_version")) throw IoError("checkpoint header lacks format_version");
  h.format_version = j.at("format_version").get<int>();
  if (h.format_version != kCheckpointVersion) {
    throw IoError("checkpoint format version " + std::to_string(h.format_version) +
                  " is not supported (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  h.config_hash = j.at("config_hash").get<std::string>();
  h.step = j.at("step").get<std::uint64_t>();
  h.payload_bytes = j.at("payload_bytes").get<std::uint64_t>();
  h.payload_hash = j.at("payload_fnv1a64").get<std::string>();
  h.optimizer = j.at("optimizer");
  const std::string_view payload = std::string_view(bytes).substr(16 + hlen);
  if (payload.size() != h.payload_bytes) {
    throw IoError("checkpoint payload length " + std::to_string(payload.size()) +
                  " does not match header payload_bytes " + std::to_string(h.payload_bytes));
  }
  std::uint64_t expected_offset = 0;
  for (const auto& e : j.at("tensors")) {
    CheckpointEntry ce{e.at("name").get<std::string>(), e.at("shape").get<Shape>(),
                       e.at("offset").get<std::uint64_t>(), e.at("length").get<std::uint64_t>()};
    if (ce.offset != expected_offset) {
      throw IoError("checkpoint manifest offsets overlap or leave gaps at '" + ce.name + "'");
    }
    if (ce.length != numel(ce.shape) * 8) {
      throw IoError("checkpoint manifest length of '" + ce.name + "' disagrees with its shape");
    }
    expected_offset += ce.length;
    h.manifest.push_back(ce);
  }
  if (expected_offset != h.payload_bytes) {
    throw IoError("checkpoint manifest total " + std::to_string(expected_offset) +
                  " does not match payload length " + std::to_string(h.payload_bytes));
  }
  if (hex64(fnv1a64(payload)) != h.payload_hash) throw IoError("checkpoint payload hash mismatch");
  if (!expected_hash.empty() && expected_hash != h.config_hash) {
    throw IoError("checkpoint config hash " + h.config_hash + " does not match expected " + expected_hash);
  }
  for (const auto& ce : h.manifest) {
    Tensor t(ce.shape);
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = io::get_f64(payload, ce.offset + 8 * i);
    if (!out.tensors.emplace(ce.name, std::move(t)).second) {
      throw IoError("checkpoint manifest repeats tensor '" + ce.name + "'");
    }
  }
  return out;
}

/// Restores model parameters (and optimizer state when requested) in place.
/// Returns the stored step.
inline std::uint64_t load_checkpoint(const std::filesystem::path& path, ClipModel& model,
                                     OptimizerState* optimizer = nullptr,
                                     const std::string& expected_hash = "") {
  LoadedCheckpoint ck = read_checkpoint(path, expected_hash);
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw IoError("checkpoint lacks tensor '" + name + "'");
    if (!dst.shape.empty() && !dst.data.empty() && it->second.shape != dst.shape) {
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                    ", expected " + shape_str(dst.shape));
    }
    dst.shape = it->second.shape;
    dst.data = std::move(it->second.data);
    dst.grad.clear();
  };
  for (auto& p : model.parameters(true)) take(p.name, *p.tensor);
  model.validate();
  if (optimizer) {
    const auto& oj = ck.header.optimizer;
    if (oj.is_null()) throw IoError("checkpoint has no optimizer state");
    OptimizerConfig c;
    c.kind = parse_optimizer_kind(oj.at("kind").get<std::string>());
    c.momentum = oj.at("momentum").get<double>();
    c.weight_decay = oj.at("weight_decay").get<double>();
    c.beta1 = oj.at("beta1").get<double>();
    c.beta2 = oj.at("beta2").get<double>();
    c.eps = oj.at("eps").get<double>();
    c.lookahead.enabled = oj.at("lookahead").at("enabled").get<bool>();
    c.lookahead.alpha = oj.at("lookahead").at("alpha").get<double>();
    c.lookahead.k = oj.at("lookahead").at("k").get<std::size_t>();
    OptimizerState s(c);
    s.step_count = oj.at("step_count").get<std::size_t>();
    for (const auto& name : oj.at("slots")) {
      OptimizerSlot slot;
      slot.name = name.get<std::string>();
      for (auto [prefix, dst] : {std::pair{"opt/first/", &slot.first}, std::pair{"opt/second/", &slot.second},
                                 std::pair{"opt/slow/", &slot.slow}}) {
        auto it = ck.tensors.find(prefix + slot.name);
        if (it != ck.tensors.end()) *dst = it->second;
      }
      s.slots.push_back(std::move(slot));
    }
    *optimizer = std::move(s);
  }
  return ck.header.step;
}

/// Resumable training state round trip.
inline void save_train_state(const std::filesystem::path& path, TrainState& state,
                             const std::string& config_hash) {
  save_checkpoint(path, state.model, &state.optimizer, state.step, config_hash);
}

inline TrainState load_train_state(const std::filesystem::path& path, const TrainConfig& config,
                                   const std::string& expected_hash = "") {
  TrainState s{init_clip_model(config.seed), OptimizerState(config.optimizer), 0};
  s.step = load_checkpoint(path, s.model, &s.optimizer, expected_hash);
  return s;
}

}  // namespace cliplite
