#pragma once

#include <cstdint>
#include <filesystem>

#include "medblip/ndiff/param_store.hpp"

// MBLP checkpoint layout, all integers little-endian:
//
//   "MBLP"  u32 version
//   repeated until EOF:
//     u32 name_len, name bytes (utf-8), u8 frozen, u32 rank, u32 dims[rank],
//     u8 dtype, payload (numel elements, little-endian)
//
// dtype: 0 = f32, 1 = f64, 2 = u64. The store's rng seed is written first as a
// rank-0 u64 record named "__rng_seed"; tensors follow in name order.
namespace medblip::nd {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kSeedRecord = "__rng_seed";

template <class T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& path);

// Tensors stored in the other float width are converted to T.
template <class T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path);

// Overwrites values and frozen flags of an existing store. The checkpoint must
// hold the same names with the same shapes.
template <class T>
void load_into(ParamStore<T>& store, const std::filesystem::path& path);

}  // namespace medblip::nd
