#include <bit>
#include <cstring>
#include <fstream>

#include "metastab/nn.hpp"

static_assert(std::endian::native == std::endian::little,
              "MSTB/MSFL writers assume a little-endian host");

namespace metastab::nn {

namespace {

constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::istream& is, const char* what) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw std::runtime_error(std::string("MSTB: truncated while reading ") + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointTable& table) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("MSTB: cannot open for write: " + path.string());
  os.write("MSTB", 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<uint32_t>(table.entries.size()));
  for (const auto& e : table.entries) {
    write_u32(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_u32(os, static_cast<uint32_t>(e.shape.size()));
    for (int d : e.shape) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(e.data.data()),
             static_cast<std::streamsize>(e.data.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("MSTB: write failed: " + path.string());
}

CheckpointTable load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("MSTB: cannot open: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MSTB", 4) != 0)
    throw std::runtime_error("MSTB: bad magic in " + path.string());
  const uint32_t version = read_u32(is, "version");
  if (version != kVersion)
    throw std::runtime_error("MSTB: unsupported version " + std::to_string(version));
  const uint32_t count = read_u32(is, "count");
  CheckpointTable table;
  table.entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointTable::Entry e;
    const uint32_t nlen = read_u32(is, "name length");
    e.name.resize(nlen);
    if (!is.read(e.name.data(), nlen)) throw std::runtime_error("MSTB: truncated name");
    const uint32_t rank = read_u32(is, "rank");
    e.shape.resize(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      e.shape[d] = static_cast<int>(read_u32(is, "dim"));
      numel *= e.shape[d];
    }
    e.data.resize(static_cast<size_t>(numel));
    if (!is.read(reinterpret_cast<char*>(e.data.data()),
                 static_cast<std::streamsize>(e.data.size() * sizeof(float))))
      throw std::runtime_error("MSTB: truncated payload for " + e.name);
    table.entries.push_back(std::move(e));
  }
  return table;
}

}  // namespace metastab::nn
