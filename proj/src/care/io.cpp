#include "care/io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace care {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t((v >> 8) & 0xff));
  out.push_back(uint8_t((v >> 16) & 0xff));
  out.push_back(uint8_t((v >> 24) & 0xff));
}

uint32_t get_u32(const std::vector<uint8_t>& in, size_t off) {
  return uint32_t(in[off]) | (uint32_t(in[off + 1]) << 8) |
         (uint32_t(in[off + 2]) << 16) | (uint32_t(in[off + 3]) << 24);
}

std::string file_for(const std::string& name) { return name + ".bin"; }

}  // namespace

std::vector<uint8_t> tensor_to_bytes(const Shape& shape,
                                     const std::vector<float>& data) {
  if ((int64_t)data.size() != numel_of(shape))
    throw IoError("tensor dump: data size does not match shape " +
                  shape_str(shape));
  std::vector<uint8_t> out;
  out.reserve(8 + 4 * shape.size() + 4 * data.size());
  out.push_back('C');
  out.push_back('A');
  out.push_back('R');
  out.push_back('E');
  put_u32(out, (uint32_t)shape.size());
  for (int d : shape) put_u32(out, (uint32_t)d);
  for (float f : data) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  return out;
}

std::pair<Shape, std::vector<float>> tensor_from_bytes(
    const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || bytes[0] != 'C' || bytes[1] != 'A' ||
      bytes[2] != 'R' || bytes[3] != 'E')
    throw IoError("tensor load: bad magic");
  const uint32_t rank = get_u32(bytes, 4);
  if (rank > 8 || bytes.size() < 8 + 4 * (size_t)rank)
    throw IoError("tensor load: truncated header");
  Shape shape(rank);
  int64_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = (int)get_u32(bytes, 8 + 4 * (size_t)i);
    n *= shape[i];
  }
  const size_t payload = 8 + 4 * (size_t)rank;
  if (bytes.size() != payload + 4 * (size_t)n)
    throw IoError("tensor load: payload size mismatch for " +
                  shape_str(shape));
  std::vector<float> data((size_t)n);
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits = get_u32(bytes, payload + 4 * (size_t)i);
    std::memcpy(&data[i], &bits, 4);
  }
  return {std::move(shape), std::move(data)};
}

void dump_tensor(const std::string& path, const Shape& shape,
                 const std::vector<float>& data) {
  auto bytes = tensor_to_bytes(shape, data);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          (std::streamsize)bytes.size());
  if (!f) throw IoError("write failed: " + path);
}

std::pair<Shape, std::vector<float>> load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return tensor_from_bytes(bytes);
}

void write_checkpoint(const std::string& dir,
                      const std::vector<NamedTensor>& tensors) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (const auto& t : tensors) {
    const std::string file = file_for(t.name);
    dump_tensor(dir + "/" + file, t.shape, t.data);
    manifest << t.name << '\t' << file << '\t';
    for (size_t i = 0; i < t.shape.size(); ++i) {
      if (i) manifest << 'x';
      manifest << t.shape[i];
    }
    manifest << '\n';
  }
  write_text_file(dir + "/manifest.txt", manifest.str());
}

std::vector<NamedTensor> read_checkpoint(const std::string& dir) {
  std::istringstream manifest(read_text_file(dir + "/manifest.txt"));
  std::vector<NamedTensor> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw IoError("checkpoint manifest: malformed line: " + line);
    NamedTensor nt;
    nt.name = line.substr(0, t1);
    const std::string file = line.substr(t1 + 1, t2 - t1 - 1);
    auto [shape, data] = load_tensor(dir + "/" + file);
    nt.shape = std::move(shape);
    nt.data = std::move(data);
    out.push_back(std::move(nt));
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(text.data(), (std::streamsize)text.size());
  if (!f) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace care
