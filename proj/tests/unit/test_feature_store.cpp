#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "doctest.h"
#include "dupguard/feature_store.hpp"
#include "test_helpers.hpp"

using namespace dupguard;
using testutil::expect_error;
using testutil::random_dataset;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "dupguard_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

}  // namespace

TEST_CASE("trajectory rejects bad shapes and non-finite values") {
  expect_error([] { FeatureTrajectory(FeatureMatrix::Zero(1, 4)); }, ErrorCode::kInvalidArgument, "at least 2 layers");
  expect_error([] { FeatureTrajectory(FeatureMatrix::Zero(3, 0)); }, ErrorCode::kInvalidArgument, "dim");
  FeatureMatrix m = FeatureMatrix::Zero(2, 2);
  m(1, 1) = std::numeric_limits<float>::quiet_NaN();
  expect_error([&] { FeatureTrajectory{m}; }, ErrorCode::kInvalidArgument, "non-finite");
}

TEST_CASE("file size for 2 samples, L=3, d=4") {
  auto ds = random_dataset(2, 3, 4, 1, false, false);
  const auto path = temp_path("size.ftrj");
  CHECK(write_trajectories(ds, path) == kFtrjHeaderBytes + 2 * 3 * 4 * 4);
  CHECK(std::filesystem::file_size(path) == 24 + 96);

  ds.labels = std::vector<std::uint32_t>{0, 1};
  ds.poison_mask = std::vector<bool>{true, false};
  CHECK(write_trajectories(ds, path) == 24 + 96 + 2 * 4 + 2);
}

TEST_CASE("header layout is little-endian with flag bits") {
  const auto ds = random_dataset(3, 2, 5, 2, true, false);
  const auto b = encode_trajectories(ds);
  CHECK(std::memcmp(b.data(), "FTRJ", 4) == 0);
  CHECK(read_u32(b, 4) == 1);
  CHECK(read_u32(b, 8) == 3);
  CHECK(read_u32(b, 12) == 2);
  CHECK(read_u32(b, 16) == 5);
  CHECK(b[20] == 0x1);
  CHECK(b[21] == 0);
  CHECK(b[22] == 0);
  CHECK(b[23] == 0);
  // First payload value is sample 0, layer 0, dim 0.
  CHECK(read_u32(b, 24) == std::bit_cast<std::uint32_t>(ds.samples[0].data()(0, 0)));
  // Second value is dim 1 of the same layer.
  CHECK(read_u32(b, 28) == std::bit_cast<std::uint32_t>(ds.samples[0].data()(0, 1)));
  // Labels follow the payload.
  CHECK(read_u32(b, 24 + 3 * 2 * 5 * 4 + 4) == 1);
}

TEST_CASE("write then read is the identity, bitwise on floats") {
  auto ds = random_dataset(7, 4, 3, 3);
  FeatureMatrix special = ds.samples[0].data();
  special(0, 0) = -0.0f;
  special(0, 1) = std::numeric_limits<float>::denorm_min();
  special(0, 2) = std::numeric_limits<float>::max();
  ds.samples[0] = FeatureTrajectory(special);
  const auto path = temp_path("roundtrip.ftrj");
  write_trajectories(ds, path);
  const auto back = read_trajectories(path);
  CHECK(back == ds);
  CHECK(std::signbit(back.samples[0].data()(0, 0)));
  CHECK(encode_trajectories(back) == encode_trajectories(ds));
}

TEST_CASE("dimension mismatch is rejected on write") {
  auto ds = random_dataset(2, 3, 4, 4, false, false);
  ds.samples.push_back(FeatureTrajectory(FeatureMatrix::Zero(3, 5)));
  expect_error([&] { encode_trajectories(ds); }, ErrorCode::kInvalidArgument, "inconsistent dimensions");
  expect_error([] { encode_trajectories(TrajectoryDataset{}); }, ErrorCode::kInvalidArgument, "empty");
}

TEST_CASE("reader rejects malformed files") {
  const auto good = encode_trajectories(random_dataset(5, 2, 3, 5, true, true));

  auto bad_magic = good;
  std::memcpy(bad_magic.data(), "XXXX", 4);
  expect_error([&] { decode_trajectories(bad_magic); }, ErrorCode::kFormat, "bad magic");

  auto bad_version = good;
  bad_version[4] = 2;
  expect_error([&] { decode_trajectories(bad_version); }, ErrorCode::kFormat, "version");

  // Declares n=5 but holds only 4 samples of payload and no tail.
  auto truncated = encode_trajectories(random_dataset(4, 2, 3, 5, false, false));
  truncated[8] = 5;
  expect_error([&] { decode_trajectories(truncated); }, ErrorCode::kFormat, "truncated");

  auto header_only = std::vector<std::uint8_t>(good.begin(), good.begin() + 10);
  expect_error([&] { decode_trajectories(header_only); }, ErrorCode::kFormat, "truncated");

  auto trailing = good;
  trailing.push_back(0);
  expect_error([&] { decode_trajectories(trailing); }, ErrorCode::kFormat, "trailing");

  auto nan = good;
  const auto qnan = std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN());
  for (int k = 0; k < 4; ++k) nan[24 + k] = static_cast<std::uint8_t>(qnan >> (8 * k));
  expect_error([&] { decode_trajectories(nan); }, ErrorCode::kFormat, "non-finite");

  auto reserved = good;
  reserved[22] = 1;
  expect_error([&] { decode_trajectories(reserved); }, ErrorCode::kFormat, "reserved");

  auto mask = good;
  mask.back() = 7;
  expect_error([&] { decode_trajectories(mask); }, ErrorCode::kFormat, "poison mask");

  expect_error([] { read_trajectories(temp_path("does_not_exist.ftrj")); }, ErrorCode::kIo, "cannot open");
}

TEST_CASE("split n=200 at fraction 0.5 and seed 2025 gives 100/100, repeatably") {
  const auto ds = random_dataset(200, 2, 2, 6, false, false);
  const SplitConfig cfg{0.5, 2025};
  const auto a = split_indices(ds, cfg);
  const auto b = split_indices(ds, cfg);
  CHECK(a.calib.size() == 100);
  CHECK(a.valid.size() == 100);
  CHECK(a.calib == b.calib);
  CHECK(a.valid == b.valid);

  const auto [calib, valid] = split_calib_valid(ds, cfg);
  CHECK(calib.size() == 100);
  CHECK(valid.size() == 100);
  CHECK(calib.samples[0] == ds.samples[a.calib[0]]);
}

TEST_CASE("split sizes follow the ceiling") {
  const auto ds = random_dataset(3, 2, 2, 7, false, false);
  const auto s = split_indices(ds, {0.5, 1});
  CHECK(s.calib.size() == 2);
  CHECK(s.valid.size() == 1);
  const auto t = split_indices(random_dataset(10, 2, 2, 7, false, false), {0.31, 1});
  CHECK(t.calib.size() == 4);
  CHECK(t.valid.size() == 6);
}

TEST_CASE("stratified split keeps half of each class") {
  auto ds = random_dataset(100, 2, 2, 8, true, false);  // labels alternate 0/1
  const auto s = split_indices(ds, {0.5, 2025});
  std::size_t ones = 0;
  for (auto i : s.calib) ones += (*ds.labels)[i];
  CHECK(s.calib.size() == 50);
  CHECK(ones == 25);
}

TEST_CASE("split is a partition with fixed sizes across seeds") {
  const auto ds = random_dataset(57, 2, 2, 9, true, true);
  std::vector<std::size_t> first;
  bool any_different = false;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    const auto s = split_indices(ds, {0.5, seed});
    CHECK(s.calib.size() == 29);
    CHECK(s.valid.size() == 28);
    std::set<std::size_t> all(s.calib.begin(), s.calib.end());
    all.insert(s.valid.begin(), s.valid.end());
    CHECK(all.size() == 57);
    CHECK(*all.rbegin() == 56);
    CHECK(std::is_sorted(s.calib.begin(), s.calib.end()));
    if (first.empty()) first = s.calib;
    else any_different = any_different || s.calib != first;
  }
  CHECK(any_different);
}

TEST_CASE("split rejects bad inputs") {
  expect_error([] { split_indices(random_dataset(10, 2, 2, 1, false, false), {1.0, 1}); },
               ErrorCode::kInvalidArgument, "calib_fraction");
  expect_error([] { split_indices(random_dataset(1, 2, 2, 1, false, false), {0.5, 1}); },
               ErrorCode::kInvalidArgument, "at least 2");
  auto ds = random_dataset(5, 2, 2, 1, true, false);
  (*ds.labels) = {0, 0, 0, 0, 1};
  expect_error([&] { split_indices(ds, {0.5, 1}); }, ErrorCode::kInvalidArgument, "too few samples per class");
}

TEST_CASE("subset and layer_features") {
  const auto ds = random_dataset(6, 3, 2, 10);
  const std::vector<std::size_t> idx{4, 1};
  const auto sub = ds.subset(idx);
  CHECK(sub.size() == 2);
  CHECK(sub.samples[0] == ds.samples[4]);
  CHECK((*sub.labels)[1] == (*ds.labels)[1]);
  CHECK((*sub.poison_mask)[0] == (*ds.poison_mask)[4]);
  const auto f = ds.layer_features(2);
  CHECK(f.rows() == 6);
  CHECK(f.cols() == 2);
  CHECK(f(3, 1) == static_cast<double>(ds.samples[3].data()(2, 1)));
  CHECK(ds.num_classes() == 2);
}

TEST_CASE("sidecar is written next to the file") {
  const auto path = temp_path("side.ftrj");
  write_sidecar(path, R"({"pooling":"none"})");
  auto sidecar = path;
  sidecar += ".meta.json";
  std::ifstream is(sidecar);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  CHECK(text == "{\"pooling\":\"none\"}\n");
}
