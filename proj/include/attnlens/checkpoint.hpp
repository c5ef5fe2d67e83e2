#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnlens/common.hpp"
#include "attnlens/model.hpp"

namespace attnlens {

// Checkpoint file: 8-byte magic, u32 little-endian header length, JSON header
// {format_version, config, extra, tensors: name -> (shape, dtype "f64",
// offset)}, then the raw little-endian IEEE-754 payload. Round-trips are
// bit-exact.
constexpr char kCheckpointMagic[8] = {'A', 'T', 'L', 'N', 'C', 'K', 'P', '1'};
constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::map<std::string, Tensor> extras;
  nlohmann::json extra;  // scalar metadata (step counters etc.)
};

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const ModelParams& params,
                            const std::map<std::string, Tensor>& extras = {},
                            const nlohmann::json& extra = nlohmann::json::object()) {
  check_params(cfg, params);
  std::vector<std::pair<std::string, const Tensor*>> order;
  params.for_each([&](const std::string& n, const Tensor& t) { order.emplace_back(n, &t); });
  for (const auto& [n, t] : extras) {
    for (const auto& [pn, pt] : order)
      if (pn == n) throw DataError("checkpoint: extra tensor shadows parameter " + n);
    order.emplace_back(n, &t);
  }

  nlohmann::json index = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : order) {
    index[name] = {{"shape", t->shape()}, {"dtype", "f64"}, {"offset", offset}};
    offset += t->size() * sizeof(double);
  }
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"config", cfg.to_json()},
                           {"extra", extra},
                           {"tensors", index}};
  const std::string header_str = header.dump();
  if (header_str.size() > 0xffffffffull) throw DataError("checkpoint: header too large");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t len = static_cast<std::uint32_t>(header_str.size());
  const unsigned char len_le[4] = {static_cast<unsigned char>(len & 0xff),
                                   static_cast<unsigned char>((len >> 8) & 0xff),
                                   static_cast<unsigned char>((len >> 16) & 0xff),
                                   static_cast<unsigned char>((len >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(len_le), 4);
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : order)
    out.write(reinterpret_cast<const char*>(t->raw()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  const unsigned char* lp = reinterpret_cast<const unsigned char*>(bytes.data() + 8);
  const std::uint32_t header_len = static_cast<std::uint32_t>(lp[0]) |
                                   (static_cast<std::uint32_t>(lp[1]) << 8) |
                                   (static_cast<std::uint32_t>(lp[2]) << 16) |
                                   (static_cast<std::uint32_t>(lp[3]) << 24);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len))
    throw DataError("checkpoint: truncated header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: header parse error: " + std::string(e.what()));
  }
  if (header.value("format_version", -1) != kCheckpointVersion)
    throw DataError("checkpoint: unsupported format version");

  Checkpoint ck;
  try {
    ck.config = ModelConfig::from_json(header.at("config"));
    ck.extra = header.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: bad config: " + std::string(e.what()));
  }

  const char* payload = bytes.data() + 12 + header_len;
  const std::size_t payload_len = bytes.size() - 12 - header_len;
  const nlohmann::json& index = header.at("tensors");

  auto read_tensor = [&](const std::string& name) {
    if (!index.contains(name)) throw DataError("checkpoint: missing tensor " + name);
    const nlohmann::json& e = index.at(name);
    if (e.value("dtype", "") != "f64") throw DataError("checkpoint: " + name + " is not f64");
    std::vector<std::size_t> shape = e.at("shape").get<std::vector<std::size_t>>();
    if (shape.empty() || shape.size() > 2)
      throw DataError("checkpoint: tensor " + name + " has unsupported rank");
    const std::uint64_t off = e.at("offset").get<std::uint64_t>();
    std::size_t count = 1;
    for (std::size_t s : shape) count *= s;
    if (off + count * sizeof(double) > payload_len)
      throw DataError("checkpoint: tensor " + name + " overruns payload");
    std::vector<double> data(count);
    std::memcpy(data.data(), payload + off, count * sizeof(double));
    for (const double v : data)
      if (!std::isfinite(v)) throw NumericError("checkpoint: non-finite values in " + name);
    return Tensor::from(shape, std::move(data));
  };

  ck.params = shaped_params(ck.config);
  std::vector<std::string> param_names;
  ck.params.for_each([&](const std::string& n, Tensor& t) {
    Tensor loaded = read_tensor(n);
    if (!loaded.same_shape(t))
      throw DataError("checkpoint: " + n + " has shape " + loaded.shape_str() + ", want " +
                      t.shape_str());
    t = std::move(loaded);
    param_names.push_back(n);
  });
  for (auto it = index.begin(); it != index.end(); ++it) {
    const std::string& name = it.key();
    bool is_param = false;
    for (const std::string& pn : param_names)
      if (pn == name) {
        is_param = true;
        break;
      }
    if (!is_param) ck.extras.emplace(name, read_tensor(name));
  }
  return ck;
}

}  // namespace attnlens
