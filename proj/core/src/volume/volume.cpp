#include "medblip/volume/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>

namespace medblip::volume {

Volume::Volume(std::array<std::size_t, 3> d, float fill) : dims(d), voxels(d[0] * d[1] * d[2], fill) {}

namespace {

// Source coordinate for output index i when mapping n_out samples onto n_in
// with aligned corners.
double source_coord(std::size_t i, std::size_t n_in, std::size_t n_out) {
  if (n_out == 1 || n_in == 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
}

Volume pad_to_cube(const Volume& raw) {
  const std::size_t side = *std::max_element(raw.dims.begin(), raw.dims.end());
  if (raw.is_cube()) return raw;
  Volume out({side, side, side}, 0.0f);
  const std::size_t oz = (side - raw.dims[0]) / 2, oy = (side - raw.dims[1]) / 2, ox = (side - raw.dims[2]) / 2;
  for (std::size_t z = 0; z < raw.dims[0]; ++z)
    for (std::size_t y = 0; y < raw.dims[1]; ++y)
      std::copy_n(raw.voxels.begin() + static_cast<std::ptrdiff_t>(raw.index(z, y, 0)), raw.dims[2],
                  out.voxels.begin() + static_cast<std::ptrdiff_t>(out.index(z + oz, y + oy, ox)));
  return out;
}

}  // namespace

Volume prepare_volume(const Volume& raw, long target) {
  if (target <= 0) throw Error("prepare_volume: target size must be positive, got " + std::to_string(target));
  if (raw.dims[0] == 0 || raw.dims[1] == 0 || raw.dims[2] == 0 || raw.voxels.size() != raw.size()) {
    throw ShapeError("prepare_volume: invalid input volume");
  }
  const Volume cube = pad_to_cube(raw);
  const std::size_t n_in = cube.dims[0];
  const auto n_out = static_cast<std::size_t>(target);

  std::vector<std::size_t> lo(n_out), hi(n_out);
  std::vector<double> frac(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double s = source_coord(i, n_in, n_out);
    lo[i] = std::min(static_cast<std::size_t>(std::floor(s)), n_in - 1);
    hi[i] = std::min(lo[i] + 1, n_in - 1);
    frac[i] = s - static_cast<double>(lo[i]);
  }

  Volume out({n_out, n_out, n_out});
  for (std::size_t z = 0; z < n_out; ++z) {
    for (std::size_t y = 0; y < n_out; ++y) {
      for (std::size_t x = 0; x < n_out; ++x) {
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz) {
          const double wz = dz ? frac[z] : 1.0 - frac[z];
          if (wz == 0.0) continue;
          const std::size_t sz = dz ? hi[z] : lo[z];
          for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? frac[y] : 1.0 - frac[y];
            if (wy == 0.0) continue;
            const std::size_t sy = dy ? hi[y] : lo[y];
            for (int dx = 0; dx < 2; ++dx) {
              const double wx = dx ? frac[x] : 1.0 - frac[x];
              if (wx == 0.0) continue;
              acc += wz * wy * wx * cube.at(sz, sy, dx ? hi[x] : lo[x]);
            }
          }
        }
        out.at(z, y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
    }
  }
  return out;
}

PatchGrid PatchGrid::make(std::size_t volume_dim, std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0) throw Error("patch size and stride must be positive");
  if (patch > volume_dim) {
    throw Error("patch size " + std::to_string(patch) + " exceeds volume size " + std::to_string(volume_dim));
  }
  PatchGrid g;
  g.volume_dim = volume_dim;
  g.patch = patch;
  g.stride = stride;
  g.per_axis = (volume_dim - patch) / stride + 1;
  g.count = g.per_axis * g.per_axis * g.per_axis;
  return g;
}

template <class T>
nd::Tensor<T> patchify(const Volume& v, const PatchGrid& grid) {
  if (!v.is_cube() || v.dims[0] != grid.volume_dim) {
    throw ShapeError("patchify: volume " + std::to_string(v.dims[0]) + "x" + std::to_string(v.dims[1]) + "x" +
                     std::to_string(v.dims[2]) + " does not match grid for " + std::to_string(grid.volume_dim));
  }
  const std::size_t p = grid.patch;
  nd::Tensor<T> out({grid.count, grid.patch_voxels()});
  T* dst = out.data().data();
  for (std::size_t bz = 0; bz < grid.per_axis; ++bz)
    for (std::size_t by = 0; by < grid.per_axis; ++by)
      for (std::size_t bx = 0; bx < grid.per_axis; ++bx)
        for (std::size_t z = 0; z < p; ++z)
          for (std::size_t y = 0; y < p; ++y) {
            const float* src = &v.voxels[v.index(bz * grid.stride + z, by * grid.stride + y, bx * grid.stride)];
            for (std::size_t x = 0; x < p; ++x) *dst++ = static_cast<T>(src[x]);
          }
  return out;
}

template nd::Tensor<float> patchify(const Volume&, const PatchGrid&);
template nd::Tensor<double> patchify(const Volume&, const PatchGrid&);

template <class T>
void standardize_patches(nd::Tensor<T>& patches) {
  auto& v = patches.storage();
  if (v.empty()) return;
  double mean = 0.0;
  for (T x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (T x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
  for (T& x : v) x = static_cast<T>((x - mean) * inv);
}

template void standardize_patches(nd::Tensor<float>&);
template void standardize_patches(nd::Tensor<double>&);

void write_volume(const Volume& v, const std::filesystem::path& path) {
  std::string buf;
  buf.reserve(13 + v.voxels.size() * 4);
  auto put32 = [&buf](std::uint32_t x) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
  };
  for (std::size_t d : v.dims) put32(static_cast<std::uint32_t>(d));
  buf.push_back(0);
  for (float f : v.voxels) put32(std::bit_cast<std::uint32_t>(f));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write volume file " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

namespace {

std::uint32_t get32(const std::string& buf, std::size_t at) {
  std::uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  return x;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open volume file " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::array<std::size_t, 3> parse_header(const std::string& buf, std::size_t file_size,
                                        const std::filesystem::path& path) {
  if (buf.size() < 13) throw FormatError("volume file too short: " + path.string());
  std::array<std::size_t, 3> dims{get32(buf, 0), get32(buf, 4), get32(buf, 8)};
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw FormatError("volume file has a zero dimension: " + path.string());
  if (buf[12] != 0) throw FormatError("volume file has unsupported dtype: " + path.string());
  if (file_size != 13 + dims[0] * dims[1] * dims[2] * 4) {
    throw FormatError("volume payload length does not match header: " + path.string());
  }
  return dims;
}

}  // namespace

Volume read_volume(const std::filesystem::path& path) {
  const std::string buf = slurp(path);
  Volume v(parse_header(buf, buf.size(), path));
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = std::bit_cast<float>(get32(buf, 13 + 4 * i));
  return v;
}

std::array<std::size_t, 3> read_volume_dims(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open volume file " + path.string());
  std::string head(13, '\0');
  in.read(head.data(), 13);
  head.resize(static_cast<std::size_t>(in.gcount()));
  return parse_header(head, std::filesystem::file_size(path), path);
}

}  // namespace medblip::volume
