#include "glmlab/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace glmlab {

namespace {

constexpr const char* kModule = "tensorio";
constexpr char kMagic[4] = {'G', 'L', 'M', 'T'};
constexpr std::uint8_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
  Reader(const std::filesystem::path& path) : path_(path.string()), in_(path, std::ios::binary) {
    if (!in_) throw FormatError(kModule, "cannot open " + path_);
  }

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(kModule, "truncated file " + path_);
    }
  }

  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }

  std::uint32_t u32() {
    std::uint8_t b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  std::uint64_t u64() {
    std::uint8_t b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

private:
  std::string path_;
  std::ifstream in_;
};

static_assert(std::endian::native == std::endian::little,
              "payload fast path assumes a little-endian host");

}  // namespace

void write_glmt(const std::filesystem::path& path, const GlmtTensor& tensor) {
  std::string header;
  header.append(kMagic, 4);
  header.push_back(static_cast<char>(kVersion));
  header.push_back(static_cast<char>(tensor.dtype));
  put_u32(header, static_cast<std::uint32_t>(tensor.dims.size()));
  for (auto d : tensor.dims) put_u64(header, d);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(kModule, "cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  const std::uint64_t n = tensor.element_count();
  switch (tensor.dtype) {
    case GlmtDtype::kF64:
      if (tensor.f64.size() != n) throw FormatError(kModule, "payload size mismatch");
      out.write(reinterpret_cast<const char*>(tensor.f64.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
      break;
    case GlmtDtype::kF32:
      if (tensor.f32.size() != n) throw FormatError(kModule, "payload size mismatch");
      out.write(reinterpret_cast<const char*>(tensor.f32.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
      break;
    case GlmtDtype::kI8:
      if (tensor.i8.size() != n) throw FormatError(kModule, "payload size mismatch");
      out.write(reinterpret_cast<const char*>(tensor.i8.data()),
                static_cast<std::streamsize>(n));
      break;
  }
  if (!out) throw FormatError(kModule, "write failed for " + path.string());
}

GlmtTensor read_glmt(const std::filesystem::path& path) {
  Reader reader(path);
  char magic[4];
  reader.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(kModule, "bad magic in " + path.string());
  }
  const std::uint8_t version = reader.u8();
  if (version != kVersion) {
    throw FormatError(kModule, "unsupported version " + std::to_string(version));
  }
  const std::uint8_t dtype = reader.u8();
  if (dtype > 2) throw FormatError(kModule, "unknown dtype " + std::to_string(dtype));
  GlmtTensor t;
  t.dtype = static_cast<GlmtDtype>(dtype);
  const std::uint32_t rank = reader.u32();
  if (rank > 64) throw FormatError(kModule, "implausible rank " + std::to_string(rank));
  t.dims.resize(rank);
  for (std::uint32_t i = 0; i < rank; ++i) t.dims[i] = reader.u64();
  const std::uint64_t n = t.element_count();
  switch (t.dtype) {
    case GlmtDtype::kF64:
      t.f64.resize(n);
      reader.bytes(t.f64.data(), n * sizeof(double));
      break;
    case GlmtDtype::kF32:
      t.f32.resize(n);
      reader.bytes(t.f32.data(), n * sizeof(float));
      break;
    case GlmtDtype::kI8:
      t.i8.resize(n);
      reader.bytes(t.i8.data(), n);
      break;
  }
  return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  GlmtTensor t;
  t.dtype = GlmtDtype::kF64;
  for (Index d : tensor.shape()) t.dims.push_back(static_cast<std::uint64_t>(d));
  t.f64.assign(tensor.values().data(), tensor.values().data() + tensor.size());
  write_glmt(path, t);
}

Tensor read_tensor(const std::filesystem::path& path) {
  GlmtTensor t = read_glmt(path);
  std::vector<Index> shape;
  for (auto d : t.dims) shape.push_back(static_cast<Index>(d));
  std::vector<Real> values;
  switch (t.dtype) {
    case GlmtDtype::kF64:
      values.assign(t.f64.begin(), t.f64.end());
      break;
    case GlmtDtype::kF32:
      values.assign(t.f32.begin(), t.f32.end());
      break;
    case GlmtDtype::kI8:
      values.assign(t.i8.begin(), t.i8.end());
      break;
  }
  return Tensor::from_values(std::move(shape), std::move(values));
}

void write_i8(const std::filesystem::path& path, const std::vector<std::int8_t>& codes,
              std::vector<std::uint64_t> dims) {
  GlmtTensor t;
  t.dtype = GlmtDtype::kI8;
  t.dims = std::move(dims);
  t.i8 = codes;
  write_glmt(path, t);
}

std::vector<std::int8_t> read_i8(const std::filesystem::path& path) {
  GlmtTensor t = read_glmt(path);
  if (t.dtype != GlmtDtype::kI8) {
    throw FormatError(kModule, "expected i8 payload in " + path.string());
  }
  return t.i8;
}

}  // namespace glmlab
