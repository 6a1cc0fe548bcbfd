#include "pflrm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace pflrm::ad {

namespace {

constexpr char kMagic[4] = {'P', 'F', 'T', 'N'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& os, T value) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

void write_f64_le(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_le(os, bits);
}

void write_f32_le(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_le(os, bits);
}

double read_f64_le(std::istream& is) {
  std::uint64_t bits = read_le<std::uint64_t>(is);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

float read_f32_le(std::istream& is) {
  std::uint32_t bits = read_le<std::uint32_t>(is);
  float v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_checkpoint: cannot open " + path);
  os.write(kMagic, 4);
  write_le<std::uint32_t>(os, kVersion);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    if (nt.name.size() > 0xffff) throw Error("save_checkpoint: name too long: " + nt.name);
    write_le<std::uint16_t>(os, static_cast<std::uint16_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    const auto& shape = nt.tensor.shape();
    if (shape.size() > 0xff) throw Error("save_checkpoint: rank too large");
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(shape.size()));
    for (auto e : shape) write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(nt.dtype));
    const double* d = nt.tensor.data();
    if (nt.dtype == Dtype::F64) {
      for (std::size_t i = 0; i < nt.tensor.size(); ++i) write_f64_le(os, d[i]);
    } else {
      for (std::size_t i = 0; i < nt.tensor.size(); ++i)
        write_f32_le(os, static_cast<float>(d[i]));
    }
  }
  if (!os) throw Error("save_checkpoint: write failed for " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("load_checkpoint: bad magic in " + path);
  const auto version = read_le<std::uint32_t>(is);
  if (version != kVersion)
    throw Error("load_checkpoint: unsupported version " + std::to_string(version));
  const auto count = read_le<std::uint32_t>(is);
  std::vector<NamedTensor> result;
  result.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_le<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = read_le<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = read_le<std::uint32_t>(is);
    const auto dtype = static_cast<Dtype>(read_le<std::uint8_t>(is));
    std::vector<double> data(shape_numel(shape));
    if (dtype == Dtype::F64) {
      for (auto& v : data) v = read_f64_le(is);
    } else if (dtype == Dtype::F32) {
      for (auto& v : data) v = static_cast<double>(read_f32_le(is));
    } else {
      throw Error("load_checkpoint: unknown dtype code");
    }
    if (!is) throw Error("load_checkpoint: truncated file " + path);
    result.push_back(NamedTensor{std::move(name), Tensor::from(std::move(shape), std::move(data)),
                                 dtype});
  }
  return result;
}

const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& nt : tensors)
    if (nt.name == name) return nt.tensor;
  throw Error("checkpoint: missing tensor \"" + name + "\"");
}

}  // namespace pflrm::ad
