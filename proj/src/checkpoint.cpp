#include "oscar/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "oscar/errors.hpp"

namespace oscar {

namespace {

constexpr char kMagic[4] = {'O', 'S', 'C', '1'};

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

// float payloads are written verbatim; this code assumes a little-endian host
static_assert(sizeof(float) == 4);

}  // namespace

void save_checkpoint(const std::string& path, const ParamRegistry& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  write_u32(os, static_cast<uint32_t>(params.entries().size()));
  for (const auto& e : params.entries()) {
    write_u32(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    const auto& shape = e.tensor.shape();
    write_u32(os, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(e.tensor.ptr()),
             static_cast<std::streamsize>(e.tensor.numel() * sizeof(float)));
  }
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  uint32_t count = read_u32(is);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; i++) {
    uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = read_u32(is);
    std::vector<int> shape(rank);
    int64_t numel = 1;
    for (uint32_t r = 0; r < rank; r++) {
      shape[r] = static_cast<int>(read_u32(is));
      numel *= shape[r];
    }
    std::vector<float> data(numel);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!is) throw DataError("checkpoint: truncated tensor " + name + " in " + path);
    out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

void load_checkpoint(const std::string& path, const ParamRegistry& params) {
  auto records = read_checkpoint(path);
  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [name, t] : records) by_name.emplace(name, t);
  for (const auto& e : params.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end())
      throw DataError("checkpoint: " + path + " is missing tensor " + e.name);
    if (it->second.shape() != e.tensor.shape())
      throw DimensionError("checkpoint: shape mismatch for " + e.name);
    e.tensor.data() = it->second.data();
  }
}

}  // namespace oscar
