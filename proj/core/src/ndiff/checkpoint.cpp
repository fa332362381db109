#include "medblip/ndiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace medblip::nd {
namespace {

constexpr char kMagic[4] = {'M', 'B', 'L', 'P'};
constexpr std::uint8_t kDtypeU64 = 2;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}
  bool done() const { return pos_ == buf_.size(); }
  std::size_t pos() const { return pos_; }
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

template <class T>
void write_payload(Writer& w, const Tensor<T>& t) {
  for (T v : t.storage()) {
    if constexpr (std::is_same_v<T, float>) {
      w.u32(std::bit_cast<std::uint32_t>(v));
    } else {
      w.u64(std::bit_cast<std::uint64_t>(v));
    }
  }
}

void write_header(Writer& w, const std::string& name, bool frozen, const Shape& shape, std::uint8_t dtype) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u8(frozen ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
  w.u8(dtype);
}

}  // namespace

template <class T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& path) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  write_header(w, kSeedRecord, true, {}, kDtypeU64);
  w.u64(store.rng_seed());
  for (const auto& [name, e] : store.entries()) {
    write_header(w, name, e.frozen, e.value.shape(), static_cast<std::uint8_t>(dtype_of<T>));
    write_payload(w, e.value);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw Error("failed writing checkpoint: " + path.string());
}

template <class T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

  if (r.str(4) != std::string(kMagic, 4)) throw FormatError("not an MBLP checkpoint: " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }

  ParamStore<T> store;
  while (!r.done()) {
    const std::size_t record_at = r.pos();
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const bool frozen = r.u8() != 0;
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    const std::uint8_t dtype = r.u8();
    if (dtype == kDtypeU64) {
      if (name != kSeedRecord || rank != 0) throw FormatError("unexpected u64 record '" + name + "'");
      store.set_rng_seed(r.u64());
      continue;
    }
    const std::size_t count = numel(shape);
    std::vector<T> values(count);
    if (dtype == static_cast<std::uint8_t>(DType::f32)) {
      r.need(count * 4);
      for (auto& v : values) v = static_cast<T>(std::bit_cast<float>(r.u32()));
    } else if (dtype == static_cast<std::uint8_t>(DType::f64)) {
      r.need(count * 8);
      for (auto& v : values) v = static_cast<T>(std::bit_cast<double>(r.u64()));
    } else {
      throw FormatError("record '" + name + "' at byte " + std::to_string(record_at) + " has unknown dtype " +
                        std::to_string(dtype));
    }
    try {
      store.add(name, Tensor<T>(shape, std::move(values)), frozen);
    } catch (const Error& e) {
      throw FormatError("bad record '" + name + "': " + e.what());
    }
  }
  return store;
}

template <class T>
void load_into(ParamStore<T>& store, const std::filesystem::path& path) {
  ParamStore<T> loaded = load_checkpoint<T>(path);
  for (const auto& [name, e] : store.entries()) {
    if (!loaded.contains(name)) throw FormatError("checkpoint lacks parameter '" + name + "'");
    if (loaded.value(name).shape() != e.value.shape()) {
      throw FormatError("shape mismatch for '" + name + "': checkpoint " + to_string(loaded.value(name).shape()) +
                        ", model " + to_string(e.value.shape()));
    }
  }
  for (const auto& [name, e] : loaded.entries()) {
    if (!store.contains(name)) throw FormatError("checkpoint has unexpected parameter '" + name + "'");
  }
  store = std::move(loaded);
}

template void save_checkpoint(const ParamStore<float>&, const std::filesystem::path&);
template void save_checkpoint(const ParamStore<double>&, const std::filesystem::path&);
template ParamStore<float> load_checkpoint(const std::filesystem::path&);
template ParamStore<double> load_checkpoint(const std::filesystem::path&);
template void load_into(ParamStore<float>&, const std::filesystem::path&);
template void load_into(ParamStore<double>&, const std::filesystem::path&);

}  // namespace medblip::nd
