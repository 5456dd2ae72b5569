// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "sbt/net.hpp"

using namespace sbt;

namespace {

Autoencoder<float> small_model(Strategy s = Strategy::spline) {
  ModelConfig cfg;
  cfg.latent_dim = 3;
  cfg.n_layers = 2;
  cfg.width = 16;
  cfg.heads = 4;
  cfg.seq_len = 32;
  cfg.strategy = s;
  cfg.n_ctrl = default_ctrl_count(s);
  cfg.seed = 21;
  return Autoencoder<float>(cfg);
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "sbt_checkpoint_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<unsigned char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  for (Strategy s : {Strategy::spline, Strategy::alibi, Strategy::alibi_cat}) {
    const auto model = small_model(s);
    const auto a = temp_file("a.sbtf"), b = temp_file("b.sbtf");
    save_checkpoint(a.string(), model);
    save_checkpoint(b.string(), load_checkpoint(a.string()));
    EXPECT_EQ(read_all(a), read_all(b));
    EXPECT_EQ(read_all(a), serialize_checkpoint(model));
  }
}

TEST(Checkpoint, LoadedModelForwardIsBitwiseIdentical) {
  const auto model = small_model();
  const auto loaded = deserialize_checkpoint(serialize_checkpoint(model));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> x(3 * 32 * 2);
  for (auto& v : x) v = u(rng);
  const auto a = run_forward<float>(model, x, 3, 32, 32);
  const auto b = run_forward<float>(loaded, x, 3, 32, 32);
  EXPECT_EQ(a.recon, b.recon);
  EXPECT_EQ(a.latent, b.latent);
  EXPECT_EQ(loaded.config().to_keyvalues().to_text(), model.config().to_keyvalues().to_text());
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = serialize_checkpoint(small_model());
  ASSERT_GT(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SBTF");
  EXPECT_EQ(bytes[4], kCheckpointVersion);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  const auto bytes = serialize_checkpoint(small_model());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), std::runtime_error);
  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(deserialize_checkpoint(bad_version), std::runtime_error);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<unsigned char> truncated(bytes.begin(), bytes.begin() + cut);
    EXPECT_THROW(deserialize_checkpoint(truncated), std::runtime_error) << cut;
  }
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(trailing), std::runtime_error);
  EXPECT_THROW(load_checkpoint(temp_file("missing.sbtf").string()), std::runtime_error);
}

TEST(Checkpoint, CopyWeightsAcrossPrecisions) {
  const auto model = small_model();
  Autoencoder<double> wide(model.config());
  copy_weights(model, wide);
  Autoencoder<float> narrow(model.config());
  copy_weights(wide, narrow);
  EXPECT_EQ(serialize_checkpoint(narrow), serialize_checkpoint(model));
}
