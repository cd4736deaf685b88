#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "can/tensor.hpp"

namespace can {

// Motion classes of the synthetic set. Every clip holds two identical dots on a
// wrap-around canvas; only how they move from frame to frame depends on the class.
enum class Motion : std::uint32_t {
  fast_left = 0,    // both dots 3 px/frame to the left
  slow_left = 1,    // both dots 1 px/frame to the left
  oscillate = 2,    // x offsets 0, -2, -4, -2 repeating (period 4)
  reverse = 3,      // 2 px/frame left for four frames, then back
  converge = 4,     // dot A 1 px/frame right, dot B 1 px/frame left
};

inline constexpr std::size_t kMotionClasses = 5;

// Horizontal offset of dot `dot` (0 or 1) at frame t for a class.
int motion_offset(Motion m, std::size_t dot, std::size_t t);

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t clips_per_class = 200;
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.05;  // std of additive Gaussian pixel noise, before clipping to [0, 1]
};

// Dot centers of one clip: positions[t][dot] = {x, y}, already wrapped into the canvas.
struct Trajectory {
  std::uint32_t label = 0;
  std::vector<std::array<std::array<std::size_t, 2>, 2>> positions;
};

struct Clip {
  std::uint32_t label = 0;
  VideoTensor frames;  // (1, T, H, W, 1), values in [0, 1]
};

struct Dataset {
  std::size_t classes = kMotionClasses;
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<Clip> clips;

  Dims clip_dims() const { return Dims{1, frames, height, width, 1}; }
};

// Labels cycle 0..K-1 so every class gets exactly clips_per_class clips.
// Same config gives the same clips, bit for bit.
Dataset generate(const SynthConfig& config, std::vector<Trajectory>* trajectories = nullptr);

// Trajectories only (no rendering); identical to what generate() would produce.
std::vector<Trajectory> generate_trajectories(const SynthConfig& config);

// Binary "CANV" file, little-endian. Pixel values are stored as 32-bit floats.
void write_dataset(const std::string& path, const Dataset& data);
Dataset read_dataset(const std::string& path);
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Orders clip indices by a seeded hash and sends exactly floor(train_fraction * n) to train.
// Both lists come back sorted ascending.
Split split_indices(std::size_t count, double train_fraction, std::uint64_t seed);

}  // namespace can
