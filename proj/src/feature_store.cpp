#include "dupguard/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "dupguard/error.hpp"
#include "dupguard/rng.hpp"

namespace dupguard {

namespace {

constexpr char kMagic[4] = {'F', 'T', 'R', 'J'};
constexpr std::uint8_t kFlagLabels = 0x1;
constexpr std::uint8_t kFlagMask = 0x2;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[offset + i]) << (8 * i);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) fail(ErrorCode::kInvalidArgument, std::string(what) + " exceeds u32 range");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

FeatureTrajectory::FeatureTrajectory(FeatureMatrix data) : data_(std::move(data)) {
  if (data_.rows() < 2) fail(ErrorCode::kInvalidArgument, "trajectory needs at least 2 layers");
  if (data_.cols() < 1) fail(ErrorCode::kInvalidArgument, "trajectory needs dim >= 1");
  if (!data_.allFinite()) fail(ErrorCode::kInvalidArgument, "trajectory contains non-finite values");
}

FeatureTrajectory FeatureTrajectory::from_double(const Eigen::MatrixXd& data) {
  return FeatureTrajectory(data.cast<float>());
}

Eigen::VectorXd FeatureTrajectory::layer(std::size_t i) const {
  if (i >= layers()) fail(ErrorCode::kInvalidArgument, "layer index out of range");
  return data_.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
}

bool operator==(const FeatureTrajectory& a, const FeatureTrajectory& b) {
  if (a.data_.rows() != b.data_.rows() || a.data_.cols() != b.data_.cols()) return false;
  // Bitwise comparison so that -0.0f and 0.0f are distinguished.
  for (Eigen::Index i = 0; i < a.data_.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(a.data_.data()[i]) !=
        std::bit_cast<std::uint32_t>(b.data_.data()[i])) {
      return false;
    }
  }
  return true;
}

std::size_t TrajectoryDataset::layers() const {
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "empty dataset has no shape");
  return samples.front().layers();
}

std::size_t TrajectoryDataset::dim() const {
  if (samples.empty()) fail(ErrorCode::kInvalidArgument, "empty dataset has no shape");
  return samples.front().dim();
}

std::size_t TrajectoryDataset::num_classes() const {
  if (!labels || labels->empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(labels->begin(), labels->end())) + 1;
}

void TrajectoryDataset::validate() const {
  if (!samples.empty()) {
    const auto l = samples.front().layers();
    const auto d = samples.front().dim();
    for (const auto& s : samples) {
      if (s.layers() != l || s.dim() != d) fail(ErrorCode::kInvalidArgument, "inconsistent dimensions");
    }
  }
  if (labels && labels->size() != samples.size()) {
    fail(ErrorCode::kInvalidArgument, "labels must have one entry per sample");
  }
  if (poison_mask && poison_mask->size() != samples.size()) {
    fail(ErrorCode::kInvalidArgument, "poison_mask must have one entry per sample");
  }
}

Eigen::MatrixXd TrajectoryDataset::layer_features(std::size_t layer) const {
  const auto n = static_cast<Eigen::Index>(samples.size());
  Eigen::MatrixXd out(n, static_cast<Eigen::Index>(dim()));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (layer >= s.layers()) fail(ErrorCode::kInvalidArgument, "layer index out of range");
    out.row(i) = s.data().row(static_cast<Eigen::Index>(layer)).cast<double>();
  }
  return out;
}

TrajectoryDataset TrajectoryDataset::subset(std::span<const std::size_t> indices) const {
  TrajectoryDataset out;
  out.samples.reserve(indices.size());
  if (labels) out.labels.emplace();
  if (poison_mask) out.poison_mask.emplace();
  for (auto i : indices) {
    if (i >= samples.size()) fail(ErrorCode::kInvalidArgument, "subset index out of range");
    out.samples.push_back(samples[i]);
    if (labels) out.labels->push_back((*labels)[i]);
    if (poison_mask) out.poison_mask->push_back((*poison_mask)[i]);
  }
  return out;
}

std::vector<std::uint8_t> encode_trajectories(const TrajectoryDataset& dataset) {
  if (dataset.empty()) fail(ErrorCode::kInvalidArgument, "cannot write an empty dataset");
  dataset.validate();
  const auto n = dataset.size();
  const auto l = dataset.layers();
  const auto d = dataset.dim();

  std::vector<std::uint8_t> out;
  out.reserve(kFtrjHeaderBytes + n * l * d * 4 + n * 5);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kFtrjVersion);
  put_u32(out, checked_u32(n, "n_samples"));
  put_u32(out, checked_u32(l, "L"));
  put_u32(out, checked_u32(d, "d"));
  std::uint8_t flags = 0;
  if (dataset.labels) flags |= kFlagLabels;
  if (dataset.poison_mask) flags |= kFlagMask;
  out.push_back(flags);
  out.insert(out.end(), 3, 0);

  for (const auto& s : dataset.samples) {
    // Row-major storage is already layer-major, dim-minor.
    const float* p = s.data().data();
    for (std::size_t k = 0; k < l * d; ++k) put_u32(out, std::bit_cast<std::uint32_t>(p[k]));
  }
  if (dataset.labels) {
    for (auto label : *dataset.labels) put_u32(out, label);
  }
  if (dataset.poison_mask) {
    for (bool m : *dataset.poison_mask) out.push_back(m ? 1 : 0);
  }
  return out;
}

TrajectoryDataset decode_trajectories(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFtrjHeaderBytes) fail(ErrorCode::kFormat, "truncated header");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    fail(ErrorCode::kFormat, "bad magic");
  }
  const auto version = get_u32(bytes, 4);
  if (version != kFtrjVersion) {
    fail(ErrorCode::kFormat, "unsupported version " + std::to_string(version));
  }
  const std::size_t n = get_u32(bytes, 8);
  const std::size_t l = get_u32(bytes, 12);
  const std::size_t d = get_u32(bytes, 16);
  const std::uint8_t flags = bytes[20];
  if ((flags & ~(kFlagLabels | kFlagMask)) != 0 || bytes[21] != 0 || bytes[22] != 0 || bytes[23] != 0) {
    fail(ErrorCode::kFormat, "reserved header bits must be zero");
  }
  if (n == 0 || l < 2 || d == 0) fail(ErrorCode::kFormat, "invalid shape in header");

  const bool has_labels = (flags & kFlagLabels) != 0;
  const bool has_mask = (flags & kFlagMask) != 0;
  const std::size_t expected = kFtrjHeaderBytes + n * l * d * 4 + (has_labels ? n * 4 : 0) + (has_mask ? n : 0);
  if (bytes.size() < expected) fail(ErrorCode::kFormat, "truncated payload");
  if (bytes.size() > expected) fail(ErrorCode::kFormat, "trailing bytes after payload");

  TrajectoryDataset out;
  out.samples.reserve(n);
  std::size_t offset = kFtrjHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) {
    FeatureMatrix m(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(d));
    float* p = m.data();
    for (std::size_t k = 0; k < l * d; ++k, offset += 4) {
      p[k] = std::bit_cast<float>(get_u32(bytes, offset));
      if (!std::isfinite(p[k])) fail(ErrorCode::kFormat, "non-finite value in payload");
    }
    out.samples.emplace_back(std::move(m));
  }
  if (has_labels) {
    out.labels.emplace();
    out.labels->reserve(n);
    for (std::size_t i = 0; i < n; ++i, offset += 4) out.labels->push_back(get_u32(bytes, offset));
  }
  if (has_mask) {
    out.poison_mask.emplace();
    out.poison_mask->reserve(n);
    for (std::size_t i = 0; i < n; ++i, ++offset) {
      if (bytes[offset] > 1) fail(ErrorCode::kFormat, "poison mask bytes must be 0 or 1");
      out.poison_mask->push_back(bytes[offset] == 1);
    }
  }
  return out;
}

std::uint64_t write_trajectories(const TrajectoryDataset& dataset, const std::filesystem::path& path) {
  const auto bytes = encode_trajectories(dataset);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) fail(ErrorCode::kIo, "write failed: " + path.string());
  return bytes.size();
}

TrajectoryDataset read_trajectories(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_trajectories(bytes);
}

void write_sidecar(const std::filesystem::path& ftrj_path, const std::string& json_text) {
  auto sidecar = ftrj_path;
  sidecar += ".meta.json";
  std::ofstream os(sidecar, std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot open for writing: " + sidecar.string());
  os << json_text << '\n';
}

namespace {

// Per-class calibration quotas summing to `total`, by largest remainder,
// then nudged so every class keeps at least one sample on each side.
std::vector<std::size_t> stratified_quotas(const std::vector<std::size_t>& class_sizes,
                                           double fraction, std::size_t total) {
  const auto c = class_sizes.size();
  std::vector<std::size_t> quota(c);
  std::vector<double> frac(c);
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const double exact = static_cast<double>(class_sizes[k]) * fraction;
    quota[k] = static_cast<std::size_t>(std::floor(exact));
    frac[k] = exact - std::floor(exact);
    assigned += quota[k];
  }
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; assigned < total; r = (r + 1) % c) {
    const auto k = order[r];
    if (quota[k] < class_sizes[k]) {
      ++quota[k];
      ++assigned;
    }
  }

  auto largest_donor = [&](auto can_give) {
    std::optional<std::size_t> best;
    for (std::size_t k = 0; k < c; ++k) {
      if (can_give(k) && (!best || quota[k] > quota[*best])) best = k;
    }
    return best;
  };
  for (std::size_t k = 0; k < c; ++k) {
    if (quota[k] == 0) {
      auto donor = largest_donor([&](std::size_t j) { return quota[j] > 1; });
      if (!donor) break;
      --quota[*donor];
      ++quota[k];
    }
  }
  for (std::size_t k = 0; k < c; ++k) {
    if (quota[k] == class_sizes[k] && class_sizes[k] > 1) {
      auto taker = largest_donor([&](std::size_t j) { return quota[j] + 1 < class_sizes[j]; });
      if (!taker) break;
      --quota[k];
      ++quota[*taker];
    }
  }
  return quota;
}

}  // namespace

SplitIndices split_indices(const TrajectoryDataset& dataset, const SplitConfig& cfg) {
  if (!(cfg.calib_fraction > 0.0 && cfg.calib_fraction < 1.0)) {
    fail(ErrorCode::kInvalidArgument, "calib_fraction must lie strictly between 0 and 1");
  }
  dataset.validate();
  const auto n = dataset.size();
  if (n < 2) fail(ErrorCode::kInvalidArgument, "split needs at least 2 samples");
  const auto total = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * cfg.calib_fraction));

  auto rng = make_rng(cfg.seed, "feature_store.split");
  SplitIndices out;
  if (!dataset.labels) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    out.calib.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(total));
    out.valid.assign(idx.begin() + static_cast<std::ptrdiff_t>(total), idx.end());
  } else {
    const auto& labels = *dataset.labels;
    std::vector<std::vector<std::size_t>> by_class(dataset.num_classes());
    for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
    std::erase_if(by_class, [](const auto& v) { return v.empty(); });
    std::vector<std::size_t> sizes;
    for (const auto& members : by_class) {
      if (members.size() < 2) fail(ErrorCode::kInvalidArgument, "too few samples per class to stratify");
      sizes.push_back(members.size());
    }
    const auto quota = stratified_quotas(sizes, cfg.calib_fraction, total);
    for (std::size_t k = 0; k < by_class.size(); ++k) {
      auto members = by_class[k];
      std::shuffle(members.begin(), members.end(), rng);
      const auto q = static_cast<std::ptrdiff_t>(quota[k]);
      out.calib.insert(out.calib.end(), members.begin(), members.begin() + q);
      out.valid.insert(out.valid.end(), members.begin() + q, members.end());
    }
  }
  std::sort(out.calib.begin(), out.calib.end());
  std::sort(out.valid.begin(), out.valid.end());
  return out;
}

std::pair<TrajectoryDataset, TrajectoryDataset> split_calib_valid(const TrajectoryDataset& dataset,
                                                                  const SplitConfig& cfg) {
  const auto idx = split_indices(dataset, cfg);
  return {dataset.subset(idx.calib), dataset.subset(idx.valid)};
}

}  // namespace dupguard
