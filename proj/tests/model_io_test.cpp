#include <algorithm>
#include <cstring>

#include "gtest/gtest.h"

#include "oracles.hpp"
#include "test_util.hpp"
#include "utixvec/errors.hpp"
#include "utixvec/model_io.hpp"

namespace utixvec {
namespace {

using testing::TempDir;
using testing::read_bytes;
using testing::write_bytes;

XVectorConfig toy_xvector() {
  XVectorConfig c;
  c.backbone = BackboneConfig::toy();
  c.num_speakers = 6;
  return c;
}

template <typename Model>
void expect_same_parameters(const Model& a, const Model& b) {
  auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    ASSERT_EQ(pa[i].tensor.shape(), pb[i].tensor.shape());
    EXPECT_EQ(0, std::memcmp(pa[i].tensor.data().data(), pb[i].tensor.data().data(),
                             pa[i].tensor.numel() * sizeof(float)))
        << pa[i].name;
  }
}

TEST(ModelIoTest, XVectorRoundTripIsBitwise) {
  TempDir dir("model_io");
  XVectorModel<float> model(toy_xvector(), 3);
  save_model(model, dir.file("a.uxvm"));
  auto loaded = load_xvector(dir.file("a.uxvm"));
  EXPECT_EQ(loaded.config(), model.config());
  expect_same_parameters(model, loaded);

  save_model(loaded, dir.file("b.uxvm"));
  EXPECT_EQ(read_bytes(dir.file("a.uxvm")), read_bytes(dir.file("b.uxvm")));
  EXPECT_EQ(peek_model_kind(dir.file("a.uxvm")), ModelKind::kXVector);
}

TEST(ModelIoTest, LoadedModelGivesIdenticalPosteriors) {
  TempDir dir("model_io");
  XVectorModel<float> model(toy_xvector(), 4);
  save_model(model, dir.file("m.uxvm"));
  auto loaded = load_xvector(dir.file("m.uxvm"));
  auto v = oracle::random_values(30 * 8 * 16, 5);
  Tensor<float> frames({30, 8, 16}, std::vector<float>(v.begin(), v.end()));
  auto a = xvector_forward(model, frames);
  auto b = xvector_forward(loaded, frames);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(ModelIoTest, SpectralRoundTripIsBitwise) {
  TempDir dir("model_io");
  SpectralConfig cfg;
  cfg.backbone = BackboneConfig::toy();
  cfg.embed_dim = 250;
  SpectralModel<float> model(cfg, 6);
  save_model(model, dir.file("s.uxvm"));
  auto loaded = load_spectral(dir.file("s.uxvm"));
  EXPECT_EQ(loaded.config(), cfg);
  expect_same_parameters(model, loaded);
  save_model(loaded, dir.file("t.uxvm"));
  EXPECT_EQ(read_bytes(dir.file("s.uxvm")), read_bytes(dir.file("t.uxvm")));
  EXPECT_THROW(load_xvector(dir.file("s.uxvm")), FormatError);
}

TEST(ModelIoTest, TruncationIsCorruption) {
  TempDir dir("model_io");
  save_model(XVectorModel<float>(toy_xvector(), 7), dir.file("m.uxvm"));
  auto bytes = read_bytes(dir.file("m.uxvm"));
  for (std::size_t keep : {bytes.size() - 1, bytes.size() / 2, std::size_t{40}}) {
    write_bytes(dir.file("cut.uxvm"), {bytes.begin(), bytes.begin() + keep});
    EXPECT_THROW(load_xvector(dir.file("cut.uxvm")), CorruptionError) << keep;
  }
  auto extended = bytes;
  extended.push_back(0);
  write_bytes(dir.file("long.uxvm"), extended);
  EXPECT_THROW(load_xvector(dir.file("long.uxvm")), CorruptionError);
}

TEST(ModelIoTest, MagicAndVersionAreChecked) {
  TempDir dir("model_io");
  save_model(XVectorModel<float>(toy_xvector(), 8), dir.file("m.uxvm"));
  auto bytes = read_bytes(dir.file("m.uxvm"));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write_bytes(dir.file("magic.uxvm"), bad_magic);
  EXPECT_THROW(load_xvector(dir.file("magic.uxvm")), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 2;
  write_bytes(dir.file("version.uxvm"), bad_version);
  EXPECT_THROW(load_xvector(dir.file("version.uxvm")), FormatError);

  write_bytes(dir.file("empty.uxvm"), {});
  EXPECT_THROW(load_xvector(dir.file("empty.uxvm")), FormatError);
  EXPECT_THROW(load_xvector(dir.file("missing.uxvm")), IoError);
}

TEST(ModelIoTest, ShapeDisagreeingWithConfigIsCorruption) {
  TempDir dir("model_io");
  save_model(XVectorModel<float>(toy_xvector(), 9), dir.file("m.uxvm"));
  auto bytes = read_bytes(dir.file("m.uxvm"));
  // Rewrite the speaker count in the embedded config so the output layer no
  // longer matches its record.
  std::string text(bytes.begin(), bytes.end());
  const auto pos = text.find("\"num_speakers\":6");
  ASSERT_NE(pos, std::string::npos);
  bytes[pos + std::strlen("\"num_speakers\":")] = '7';
  write_bytes(dir.file("shape.uxvm"), bytes);
  EXPECT_THROW(load_xvector(dir.file("shape.uxvm")), CorruptionError);
}

}  // namespace
}  // namespace utixvec
