#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <vector>

#include "medblip/ndiff/tensor.hpp"

namespace medblip::volume {

// Voxel intensities in [0,1], row-major over (z, y, x).
struct Volume {
  std::array<std::size_t, 3> dims{};
  std::vector<float> voxels;

  Volume() = default;
  Volume(std::array<std::size_t, 3> d, float fill = 0.0f);

  std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[index(z, y, x)]; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[index(z, y, x)]; }
  bool is_cube() const { return dims[0] == dims[1] && dims[1] == dims[2]; }

  friend bool operator==(const Volume&, const Volume&) = default;
};

// Zero-pads to a cube of the largest side (content centered), rescales to
// target^3 by trilinear interpolation with aligned corners, clamps to [0,1].
Volume prepare_volume(const Volume& raw, long target);

// Non-overlapping or strided sub-volume layout for a cubic volume.
struct PatchGrid {
  std::size_t volume_dim = 0;
  std::size_t patch = 0;
  std::size_t stride = 0;
  std::size_t per_axis = 0;  // floor((D - p) / s) + 1
  std::size_t count = 0;     // per_axis^3

  static PatchGrid make(std::size_t volume_dim, std::size_t patch, std::size_t stride);
  std::size_t patch_voxels() const { return patch * patch * patch; }
};

// (count, p^3): rows ordered by (z, y, x) block index, each the row-major
// flattening of its cube.
template <class T>
nd::Tensor<T> patchify(const Volume& v, const PatchGrid& grid);

// Shifts and scales patch values in place to zero mean and unit variance over
// the whole tensor (a constant input becomes all zeros).
template <class T>
void standardize_patches(nd::Tensor<T>& patches);

// Binary volume file: u32 dims[3], u8 dtype (0 = f32), then little-endian
// float32 voxels in row-major order.
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);
// Parses and validates only the header and the payload length.
std::array<std::size_t, 3> read_volume_dims(const std::filesystem::path& path);

}  // namespace medblip::volume
