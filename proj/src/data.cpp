#include "can/data.hpp"

#include "can/binio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

namespace can {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'N', 'V'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat32 = 0;
constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 4 * 4 + 1;

// 3x3 Gaussian blob, center 1.
constexpr double kBlobSigma = 0.85;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::size_t wrap(long v, std::size_t extent) {
  const long e = long(extent);
  return std::size_t(((v % e) + e) % e);
}

void render(const Trajectory& tr, double noise, std::mt19937_64& rng, VideoTensor& frames) {
  const Dims d = frames.dims();
  double blob[3][3];
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx)
      blob[dy + 1][dx + 1] = std::exp(-double(dx * dx + dy * dy) / (2 * kBlobSigma * kBlobSigma));

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> canvas(d.h * d.w);
  for (std::size_t t = 0; t < d.t; ++t) {
    std::fill(canvas.begin(), canvas.end(), 0.0);
    for (const auto& [x, y] : tr.positions[t]) {
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const std::size_t px = wrap(long(x) + dx, d.w), py = wrap(long(y) + dy, d.h);
          double& c = canvas[py * d.w + px];
          c = std::max(c, blob[dy + 1][dx + 1]);
        }
    }
    for (std::size_t h = 0; h < d.h; ++h)
      for (std::size_t w = 0; w < d.w; ++w) {
        double v = canvas[h * d.w + w];
        if (noise > 0) v += noise * gauss(rng);
        // stored as f32 on disk, so keep only f32-representable values
        frames(0, t, h, w, 0) = real(float(std::clamp(v, 0.0, 1.0)));
      }
  }
}

Trajectory draw_trajectory(std::uint32_t label, const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> xs(0, cfg.width - 1), ys(0, cfg.height - 1);
  std::array<std::array<std::size_t, 2>, 2> start;
  for (auto& s : start) s = {xs(rng), ys(rng)};
  Trajectory tr;
  tr.label = label;
  tr.positions.resize(cfg.frames);
  for (std::size_t t = 0; t < cfg.frames; ++t)
    for (std::size_t k = 0; k < 2; ++k) {
      const long x = long(start[k][0]) + motion_offset(Motion(label), k, t);
      tr.positions[t][k] = {wrap(x, cfg.width), start[k][1]};
    }
  return tr;
}

void check_config(const SynthConfig& cfg) {
  if (cfg.frames == 0 || cfg.height < 3 || cfg.width < 3) {
    throw ConfigError("synthetic data needs frames >= 1 and a canvas of at least 3x3");
  }
  if (!(cfg.noise >= 0.0) || !std::isfinite(cfg.noise)) throw ConfigError("noise must be finite and >= 0");
}

}  // namespace

int motion_offset(Motion m, std::size_t dot, std::size_t t) {
  const int ti = int(t);
  switch (m) {
    case Motion::fast_left: return -3 * ti;
    case Motion::slow_left: return -ti;
    case Motion::oscillate: {
      static constexpr int cycle[4] = {0, -2, -4, -2};
      return cycle[t % 4];
    }
    case Motion::reverse: {
      const int phase = ti % 8;
      return phase <= 4 ? -2 * phase : -2 * (8 - phase);
    }
    case Motion::converge: return dot == 0 ? ti : -ti;
  }
  throw ConfigError("unknown motion class");
}

std::vector<Trajectory> generate_trajectories(const SynthConfig& cfg) {
  std::vector<Trajectory> out;
  generate(cfg, &out);
  return out;
}

Dataset generate(const SynthConfig& cfg, std::vector<Trajectory>* trajectories) {
  check_config(cfg);
  Dataset data;
  data.frames = cfg.frames;
  data.height = cfg.height;
  data.width = cfg.width;
  const std::size_t total = cfg.clips_per_class * kMotionClasses;
  data.clips.reserve(trajectories ? 0 : total);
  if (trajectories) trajectories->clear();

  // Separate streams for geometry and pixel noise, so trajectories do not depend on rendering.
  std::mt19937_64 geometry(cfg.seed);
  std::mt19937_64 pixels(splitmix64(cfg.seed));
  for (std::size_t i = 0; i < total; ++i) {
    const auto label = std::uint32_t(i % kMotionClasses);
    Trajectory tr = draw_trajectory(label, cfg, geometry);
    if (trajectories) {
      trajectories->push_back(std::move(tr));
      continue;
    }
    Clip clip{label, VideoTensor(data.clip_dims())};
    render(tr, cfg.noise, pixels, clip.frames);
    data.clips.push_back(std::move(clip));
  }
  return data;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  const std::size_t per_clip = data.frames * data.height * data.width;
  bin::Writer w;
  w.reserve(kHeaderBytes + data.clips.size() * (4 + 4 * per_clip));
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u64(data.clips.size());
  w.u32(std::uint32_t(data.classes));
  w.u32(std::uint32_t(data.frames));
  w.u32(std::uint32_t(data.height));
  w.u32(std::uint32_t(data.width));
  w.u8(kFloat32);
  for (const Clip& c : data.clips) {
    require_same_dims(c.frames.dims(), data.clip_dims(), "write_dataset clip");
    if (c.label >= data.classes) throw ConfigError("clip label " + std::to_string(c.label) + " >= class count");
    w.u32(c.label);
    for (real v : c.frames.data()) w.f32(float(v));
  }
  return w.take();
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  bin::Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected CANV", 0);
  for (int i = 0; i < 4; ++i) r.u8("magic");
  const std::size_t version_at = r.offset();
  if (const std::uint32_t v = r.u32("version"); v != kVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(v), version_at);
  }
  const std::uint64_t count = r.u64("clip count");
  Dataset data;
  data.classes = r.u32("class count");
  data.frames = r.u32("frame count");
  data.height = r.u32("height");
  data.width = r.u32("width");
  const std::size_t tag_at = r.offset();
  if (const std::uint8_t tag = r.u8("element tag"); tag != kFloat32) {
    throw FormatError("unsupported element tag " + std::to_string(tag), tag_at);
  }
  if (data.classes == 0 || data.frames == 0 || data.height == 0 || data.width == 0) {
    throw FormatError("zero extent in header", 16);
  }
  constexpr std::size_t kMaxExtent = std::size_t(1) << 16;
  if (data.frames > kMaxExtent || data.height > kMaxExtent || data.width > kMaxExtent) {
    throw FormatError("implausible clip extent in header", 20);
  }
  const std::uint64_t per_clip = std::uint64_t(data.frames) * data.height * data.width;
  const std::uint64_t payload = bytes.size() - kHeaderBytes;
  if (count > payload / (4 + 4 * per_clip)) {
    throw FormatError("header claims " + std::to_string(count) + " clips but the payload is truncated",
                      bytes.size());
  }

  data.clips.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t label_at = r.offset();
    Clip c{r.u32("label"), VideoTensor(data.clip_dims())};
    if (c.label >= data.classes) {
      throw FormatError("label " + std::to_string(c.label) + " out of range", label_at);
    }
    for (real& v : c.frames.data()) {
      const std::size_t at = r.offset();
      const float f = r.f32("pixels");
      if (!(f >= 0.0f && f <= 1.0f)) throw FormatError("pixel value outside [0, 1]", at);
      v = real(f);
    }
    data.clips.push_back(std::move(c));
  }
  if (r.offset() != bytes.size()) throw FormatError("trailing bytes after the last clip", r.offset());
  return data;
}

void write_dataset(const std::string& path, const Dataset& data) { bin::write_file(path, encode_dataset(data)); }

Dataset read_dataset(const std::string& path) { return decode_dataset(bin::read_file(path)); }

Split split_indices(std::size_t count, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ConfigError("train fraction must lie in [0, 1]");
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed(count);
  for (std::size_t i = 0; i < count; ++i) keyed[i] = {splitmix64(splitmix64(seed) ^ i), i};
  std::sort(keyed.begin(), keyed.end());
  const auto n_train = std::size_t(std::floor(train_fraction * double(count)));
  Split s;
  for (std::size_t k = 0; k < count; ++k) (k < n_train ? s.train : s.val).push_back(keyed[k].second);
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

}  // namespace can
