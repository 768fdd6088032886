// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint file:
//   8 bytes   magic "FMTCKPT1"
//   u64       header length, then that many bytes of JSON text:
//             {"format", "version", "model": <config>, "extra": {...},
//              "parameters": [{"name", "shape"}, ...]}
//   per parameter, in header order:
//             u32 name length, name bytes, u32 rank, rank × u64 dims,
//             numel × f64 values (little-endian)

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmtlab/binary_io.hpp"
#include "fmtlab/config.hpp"
#include "fmtlab/error.hpp"
#include "fmtlab/model.hpp"

namespace fmtlab {

inline constexpr char kCheckpointMagic[8] = {'F', 'M', 'T', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const FmtModel& model, const std::string& path,
                            const nlohmann::ordered_json& extra = nlohmann::ordered_json::object()) {
  nlohmann::ordered_json header;
  header["format"] = "fmtlab-checkpoint";
  header["version"] = 1;
  header["model"] = to_json(model.config());
  header["extra"] = extra;
  header["parameters"] = nlohmann::ordered_json::array();
  for (const auto& p : model.parameters().all()) {
    header["parameters"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 8);
  io::write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters().all()) {
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) io::write_pod<std::uint64_t>(out, d);
    io::write_array(out, p.tensor.values());
  }
  if (!out) throw DataError("failed writing checkpoint " + path);
}

struct LoadedCheckpoint {
  FmtModel model;
  nlohmann::json extra;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw DataError(path + ": not a checkpoint file");
  }
  const auto len = io::read_pod<std::uint64_t>(in, "checkpoint header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad header: " + e.what());
  }

  FmtModel model(model_config_from_json(header.at("model")));
  auto& store = model.parameters();
  const auto& listed = header.at("parameters");
  if (listed.size() != store.size()) {
    throw DataError(path + ": checkpoint lists " + std::to_string(listed.size()) +
                    " parameters, config builds " + std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < listed.size(); ++i) {
    const auto name_len = io::read_pod<std::uint32_t>(in, "parameter name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw DataError(path + ": truncated parameter name");
    const auto rank = io::read_pod<std::uint32_t>(in, name);
    Shape shape(rank);
    for (auto& d : shape) d = io::read_pod<std::uint64_t>(in, name);
    if (!store.contains(name)) throw DataError(path + ": unknown parameter " + name);
    Tensor& t = store.at(name);
    if (t.shape() != shape) {
      throw DataError(path + ": parameter " + name + " has shape " + shape_str(shape) +
                      ", model expects " + shape_str(t.shape()));
    }
    auto values = io::read_array<double>(in, t.numel(), name);
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  return {std::move(model), header.value("extra", nlohmann::json::object())};
}

}  // namespace fmtlab
