#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "glmlab/common.hpp"
#include "glmlab/tensor.hpp"

namespace glmlab {

// GLMT container: magic "GLMT", u8 version=1, u8 dtype, u32 rank,
// u64 dims[rank], then the payload little-endian in row-major order.
enum class GlmtDtype : std::uint8_t { kF64 = 0, kF32 = 1, kI8 = 2 };

struct GlmtTensor {
  GlmtDtype dtype = GlmtDtype::kF64;
  std::vector<std::uint64_t> dims;
  std::vector<double> f64;
  std::vector<float> f32;
  std::vector<std::int8_t> i8;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

void write_glmt(const std::filesystem::path& path, const GlmtTensor& tensor);
GlmtTensor read_glmt(const std::filesystem::path& path);

// Tensor payloads are always written wide (f64).
void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

void write_i8(const std::filesystem::path& path, const std::vector<std::int8_t>& codes,
              std::vector<std::uint64_t> dims);
std::vector<std::int8_t> read_i8(const std::filesystem::path& path);

}  // namespace glmlab
