#pragma once

// Checkpoint container. Layout (all integers little-endian, doubles IEEE-754
// binary64 little-endian):
//
//   offset  size  field
//   0       8     magic "HYSPECK1"
//   8       4     u32 format version (1)
//   12      4     u32 byte-order marker, always written as 0x01020304
//   16      8     u64 length N of the config header
//   24      N     config header: UTF-8 JSON object (see config_to_json)
//   24+N    8     u64 number of weight blocks B
//   then B times:
//           4     u32 name length M
//           M     block name (e.g. "layers.3.attn.wq")
//           8     u64 rows
//           8     u64 cols
//           8*r*c row-major f64 payload
//
// A human-readable manifest (`<checkpoint>.json`) mirrors the config and
// lists block shapes; it is never read back.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "hyspec/config.hpp"
#include "hyspec/model.hpp"
#include "hyspec/weights.hpp"

namespace hyspec {

inline constexpr char kCheckpointMagic[8] = {'H', 'Y', 'S', 'P', 'E', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["arch"] = to_string(c.arch);
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_state"] = c.d_state;
  j["vocab_size"] = c.vocab_size;
  j["context_limit"] = c.context_limit;
  j["d_ff"] = c.d_ff;
  j["norm_eps"] = c.norm_eps;
  j["rope_base"] = c.rope_base;
  if (c.arch == Arch::sequential_hybrid) {
    auto& p = j["layer_pattern"] = nlohmann::json::array();
    for (auto k : c.layer_pattern) p.push_back(to_string(k));
  }
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.arch = arch_from_string(j.at("arch").get<std::string>());
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_state = j.at("d_state").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.context_limit = j.at("context_limit").get<int>();
  c.d_ff = j.value("d_ff", 0);
  c.norm_eps = j.value("norm_eps", 1e-6);
  c.rope_base = j.value("rope_base", 10000.0);
  if (j.contains("layer_pattern"))
    for (const auto& k : j["layer_pattern"]) c.layer_pattern.push_back(layer_kind_from_string(k.get<std::string>()));
  c.validate();
  return c;
}

namespace detail {
template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  require(static_cast<std::size_t>(is.gcount()) == sizeof(T), "checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Weights& w) {
  check_shapes(cfg, w);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), "checkpoint: cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, 8);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, 0x01020304u);
  const std::string header = config_to_json(cfg).dump();
  detail::put_le<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));

  std::uint64_t n_blocks = 0;
  for_each_param(w, [&](const std::string&, const Mat&) { ++n_blocks; });
  detail::put_le<std::uint64_t>(os, n_blocks);

  nlohmann::json manifest;
  manifest["format"] = "HYSPECK1";
  manifest["version"] = kCheckpointVersion;
  manifest["config"] = config_to_json(cfg);
  manifest["parameters"] = parameter_count(w);
  auto& blocks = manifest["blocks"] = nlohmann::json::array();
  for_each_param(w, [&](const std::string& name, const Mat& m) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_le<double>(os, m.data()[i]);
    blocks.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  require(os.good(), "checkpoint: write failed for " + path.string());
  std::ofstream ms(path.string() + ".json", std::ios::trunc);
  ms << manifest.dump(2) << "\n";
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  require(is.gcount() == 8 && std::memcmp(magic, kCheckpointMagic, 8) == 0, "checkpoint: bad magic in " + path.string());
  const auto version = detail::get_le<std::uint32_t>(is);
  require(version == kCheckpointVersion, "checkpoint: unsupported version " + std::to_string(version));
  require(detail::get_le<std::uint32_t>(is) == 0x01020304u, "checkpoint: bad byte-order marker");
  const auto hlen = detail::get_le<std::uint64_t>(is);
  require(hlen < (1u << 24), "checkpoint: implausible header length");
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  require(static_cast<std::uint64_t>(is.gcount()) == hlen, "checkpoint: truncated header");
  const ModelConfig cfg = config_from_json(nlohmann::json::parse(header));

  std::map<std::string, Mat> blocks;
  const auto n_blocks = detail::get_le<std::uint64_t>(is);
  for (std::uint64_t b = 0; b < n_blocks; ++b) {
    const auto nlen = detail::get_le<std::uint32_t>(is);
    require(nlen < 4096, "checkpoint: implausible block name length");
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const auto rows = detail::get_le<std::uint64_t>(is);
    const auto cols = detail::get_le<std::uint64_t>(is);
    require(rows * cols < (1ull << 32), "checkpoint: implausible block size");
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::get_le<double>(is);
    blocks.emplace(std::move(name), std::move(m));
  }

  Weights w = zero_weights(cfg);
  for_each_param(w, [&](const std::string& name, Mat& m) {
    auto it = blocks.find(name);
    require(it != blocks.end(), "checkpoint: missing block " + name);
    require(it->second.rows() == m.rows() && it->second.cols() == m.cols(), "checkpoint: wrong shape for " + name);
    m = std::move(it->second);
    blocks.erase(it);
  });
  require(blocks.empty(), "checkpoint: unexpected extra blocks");
  require(weights_finite(w), "checkpoint: non-finite weights");
  return Model(cfg, std::move(w));
}

}  // namespace hyspec
