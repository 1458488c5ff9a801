#include "omniret/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace omniret {

namespace {

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& os, T value) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
  }
  put_bytes(os, buf, sizeof(T));
}

void put_f64_payload(std::ostream& os, const std::vector<double>& data) {
  for (double v : data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_le(os, bits);
  }
}

void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  get_bytes(is, buf, sizeof(T));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  put_bytes(os, "ORET", 4);
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max())
      throw std::invalid_argument("checkpoint: tensor name too long");
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    put_bytes(os, name.data(), name.size());
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t d : tensor.dims()) put_le<std::uint64_t>(os, d);
    put_le<std::uint8_t>(os, 1);  // f64
    put_f64_payload(os, tensor.data());
  }
  put_le<std::uint64_t>(os, ckpt.config_json.size());
  put_bytes(os, ckpt.config_json.data(), ckpt.config_json.size());
  put_le<std::uint64_t>(os, ckpt.step);
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  get_bytes(is, magic, 4);
  if (std::memcmp(magic, "ORET", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(is);
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get_le<std::uint16_t>(is);
    std::string name(name_len, '\0');
    get_bytes(is, name.data(), name_len);
    const auto rank = get_le<std::uint8_t>(is);
    if (rank < 1 || rank > 4) throw std::runtime_error("checkpoint: bad tensor rank");
    std::vector<std::size_t> dims(rank);
    std::size_t total = 1;
    for (auto& d : dims) {
      d = static_cast<std::size_t>(get_le<std::uint64_t>(is));
      total *= d;
    }
    const auto dtype = get_le<std::uint8_t>(is);
    std::vector<double> data(total);
    if (dtype == 1) {
      for (double& v : data) {
        const std::uint64_t bits = get_le<std::uint64_t>(is);
        std::memcpy(&v, &bits, sizeof(v));
      }
    } else if (dtype == 0) {
      for (double& v : data) {
        const std::uint32_t bits = get_le<std::uint32_t>(is);
        float f;
        std::memcpy(&f, &bits, sizeof(f));
        v = static_cast<double>(f);
      }
    } else {
      throw std::runtime_error("checkpoint: unknown dtype tag");
    }
    ckpt.tensors.emplace(std::move(name), Tensor(std::move(dims), std::move(data)));
  }
  const auto cfg_len = get_le<std::uint64_t>(is);
  ckpt.config_json.resize(cfg_len);
  if (cfg_len > 0) get_bytes(is, ckpt.config_json.data(), cfg_len);
  ckpt.step = get_le<std::uint64_t>(is);
  return ckpt;
}

}  // namespace omniret
