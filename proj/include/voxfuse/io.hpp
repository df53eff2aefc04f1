#pragma once

#include "voxfuse/distill.hpp"
#include "voxfuse/unprojection.hpp"

#include <filesystem>

namespace vf {

namespace fs = std::filesystem;

inline constexpr std::uint32_t kGridVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "HFVG", u32 version, u64 S, u64 d, 6 f64 extent (min xyz, max xyz), then features
/// (channel, z, y, x). All little-endian.
void save_grid(const fs::path& path, const VoxelGrid& grid);
VoxelGrid load_grid(const fs::path& path);

/// Text header "HFIMG H W C\n" followed by little-endian f64 values in (row, col, channel) order.
void save_image(const fs::path& path, const Tensor& image);
Tensor load_image(const fs::path& path);

/// "HFCK", u32 version, u64 count, then per tensor: u64 name length, name bytes, u64 rank,
/// u64 dims, f64 values.
void save_checkpoint(const fs::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const fs::path& path);

/// 8-bit PNG of a [H, W, 3] color or [H, W] grey image. Values are clamped to [0, 1] unless
/// `normalize` rescales by the maximum.
void write_png(const fs::path& path, const Tensor& image, bool normalize = false);

/// Directory with "manifest.txt" listing each frame's raw image and row-major projection matrix.
void save_posed_dataset(const fs::path& dir, std::span<const PosedImage> frames);
std::vector<PosedImage> load_posed_dataset(const fs::path& dir);

/// One subdirectory per camera holding camera.txt, hypothesis_<k>.hfimg and optionally
/// conditioning.hfimg.
void save_bank(const fs::path& dir, const HypothesisBank& bank);
HypothesisBank load_bank(const fs::path& dir);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

}  // namespace vf
