#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "care/tensor.hpp"

// Binary tensor dump format used across the tool surface:
//   magic "CARE" (4 ASCII bytes)
//   u32 little-endian rank
//   rank x u32 little-endian extents
//   row-major f32 little-endian payload

namespace care {

struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

std::vector<uint8_t> tensor_to_bytes(const Shape& shape,
                                     const std::vector<float>& data);
std::pair<Shape, std::vector<float>> tensor_from_bytes(
    const std::vector<uint8_t>& bytes);

void dump_tensor(const std::string& path, const Shape& shape,
                 const std::vector<float>& data);
std::pair<Shape, std::vector<float>> load_tensor(const std::string& path);

template <class S>
void dump_tensor(const std::string& path, const Tensor<S>& t) {
  std::vector<float> f(t.value().begin(), t.value().end());
  dump_tensor(path, t.shape(), f);
}

// A checkpoint is a directory of tensor dumps, one file per named parameter,
// plus a manifest text file mapping name -> file -> shape.
struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void write_checkpoint(const std::string& dir,
                      const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::string& dir);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace care
