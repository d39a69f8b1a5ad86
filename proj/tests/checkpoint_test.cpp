#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hyspec/checkpoint.hpp"
#include "test_util.hpp"

using namespace hyspec;
using namespace hyspec::testing;
namespace fs = std::filesystem;

namespace {
fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("hyspec_ckpt_" + name); }
}  // namespace

TEST(Checkpoint, RoundTripPreservesEverything) {
  for (Arch a : {Arch::parallel_hybrid, Arch::sequential_hybrid, Arch::transformer}) {
    const auto m = tiny_model(a, 31);
    const auto path = tmp(to_string(a) + ".bin");
    save_checkpoint(path, m.cfg, m.weights);
    const Model back = load_checkpoint(path);
    EXPECT_EQ(back.cfg, m.cfg);
    EXPECT_TRUE(weights_equal(back.weights, m.weights));
    EXPECT_TRUE(fs::exists(path.string() + ".json"));
  }
}

TEST(Checkpoint, HeaderLayoutIsLittleEndian) {
  const auto m = tiny_model(Arch::transformer);
  const auto path = tmp("layout.bin");
  save_checkpoint(path, m.cfg, m.weights);
  std::ifstream is(path, std::ios::binary);
  unsigned char head[24];
  is.read(reinterpret_cast<char*>(head), 24);
  EXPECT_EQ(std::string(reinterpret_cast<char*>(head), 8), "HYSPECK1");
  EXPECT_EQ(head[8], 1);
  EXPECT_EQ(head[12], 0x04);
  EXPECT_EQ(head[15], 0x01);
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(head[16 + i]) << (8 * i);
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  const auto j = nlohmann::json::parse(header);
  EXPECT_EQ(j.at("arch"), "transformer");
  EXPECT_EQ(j.at("d_model"), m.cfg.d_model);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = tmp("corrupt.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACHECKPOINT";
  }
  EXPECT_THROW(load_checkpoint(path), Error);
  EXPECT_THROW(load_checkpoint(tmp("does_not_exist.bin")), Error);

  const auto m = tiny_model(Arch::parallel_hybrid);
  const auto good = tmp("truncate.bin");
  save_checkpoint(good, m.cfg, m.weights);
  fs::resize_file(good, fs::file_size(good) - 9);
  EXPECT_THROW(load_checkpoint(good), Error);
}

TEST(Checkpoint, ConfigJsonRoundTrip) {
  auto c = default_config(Arch::sequential_hybrid);
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
  auto bad = config_to_json(c);
  bad["layer_pattern"] = nlohmann::json::array({"linear"});
  EXPECT_THROW(config_from_json(bad), Error);
}
