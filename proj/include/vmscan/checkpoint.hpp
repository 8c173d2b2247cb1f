#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "vmscan/blocks.hpp"

namespace vmscan {

static_assert(std::endian::native == std::endian::little,
              "checkpoint files are little-endian; big-endian hosts are unsupported");

inline constexpr char kCheckpointMagic[8] = {'V', 'M', 'S', 'C', 'A', 'N', '0', '1'};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

/// Layout: magic, u32 config length + config text, u32 record count, then
/// per parameter: u32 name length, name bytes, u32 rank, u64 dims, raw
/// doubles.
inline void save_checkpoint(const std::string& path, const std::string& config_text,
                            const ParamStore& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(config_text.size()));
  os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(params.items.size()));
  for (const auto& [name, t] : params.items) {
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
    for (long d : t.shape()) detail::write_pod<uint64_t>(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * static_cast<long>(sizeof(double))));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

struct Checkpoint {
  std::string config_text;
  ParamStore params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Checkpoint out;
  const auto cfg_len = detail::read_pod<uint32_t>(is);
  out.config_text.resize(cfg_len);
  is.read(out.config_text.data(), cfg_len);
  const auto count = detail::read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = detail::read_pod<uint32_t>(is);
    std::vector<long> shape;
    long total = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<long>(detail::read_pod<uint64_t>(is)));
      total *= shape.back();
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(total * static_cast<long>(sizeof(double))));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor data in " + path);
    out.params.items.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace vmscan
