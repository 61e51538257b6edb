#include "attnsteer/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "attnsteer/common.hpp"

namespace attnsteer {

namespace {

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T read_le(const std::uint8_t* src) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, src, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

template <typename T>
std::vector<std::uint8_t> pack(std::span<const T> values) {
  std::vector<std::uint8_t> out;
  out.reserve(values.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::little) {
    out.resize(values.size() * sizeof(T));
    if (!values.empty()) std::memcpy(out.data(), values.data(), out.size());
  } else {
    for (T v : values) append_le(out, v);
  }
  return out;
}

template <typename T>
std::vector<T> unpack(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t count) {
  require(offset + count * sizeof(T) <= bytes.size(), ErrorKind::IoError,
          "tensor payload truncated");
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = read_le<T>(bytes.data() + offset + i * sizeof(T));
  return out;
}

}  // namespace

std::vector<std::uint8_t> pack_f32(std::span<const float> values) { return pack(values); }
std::vector<std::uint8_t> pack_i32(std::span<const std::int32_t> values) { return pack(values); }

std::vector<float> unpack_f32(std::span<const std::uint8_t> bytes, std::size_t offset,
                              std::size_t count) {
  return unpack<float>(bytes, offset, count);
}

std::vector<std::int32_t> unpack_i32(std::span<const std::uint8_t> bytes, std::size_t offset,
                                     std::size_t count) {
  return unpack<std::int32_t>(bytes, offset, count);
}

void write_blob(const fs::path& path, const json& header, std::span<const std::uint8_t> payload) {
  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + payload.size());
  append_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  write_file_atomic(path, out);
}

Blob read_blob(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(all.size() >= 8, ErrorKind::IoError, "blob too short: " + path.string());
  const auto header_len = read_le<std::uint64_t>(all.data());
  require(8 + header_len <= all.size(), ErrorKind::IoError, "blob header truncated: " + path.string());
  Blob blob;
  try {
    blob.header = json::parse(all.begin() + 8, all.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    fail(ErrorKind::IoError, "bad blob header in " + path.string() + ": " + e.what());
  }
  blob.payload.assign(all.begin() + 8 + static_cast<std::ptrdiff_t>(header_len), all.end());
  return blob;
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(content.data()), static_cast<std::streamsize>(content.size()));
    require(static_cast<bool>(out), ErrorKind::IoError, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_file_atomic(const fs::path& path, std::string_view content) {
  write_file_atomic(path, std::span<const std::uint8_t>(
                              reinterpret_cast<const std::uint8_t*>(content.data()), content.size()));
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                  text.size()));
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text_file(path)); }

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
  return h;
}

}  // namespace attnsteer
