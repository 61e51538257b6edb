#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace attnsteer {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Tensor blob layout shared by checkpoints, trace dumps, token sidecars and
// vector bundles:
//   bytes 0..7   little-endian uint64 header length N
//   bytes 8..8+N UTF-8 JSON header
//   remainder    raw little-endian payload (float32 or int32)
struct Blob {
  json header;
  std::vector<std::uint8_t> payload;
};

void write_blob(const fs::path& path, const json& header, std::span<const std::uint8_t> payload);
Blob read_blob(const fs::path& path);

std::vector<std::uint8_t> pack_f32(std::span<const float> values);
std::vector<std::uint8_t> pack_i32(std::span<const std::int32_t> values);
std::vector<float> unpack_f32(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t count);
std::vector<std::int32_t> unpack_i32(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t count);

// Write-temp-then-rename so readers never observe a partial artifact.
void write_file_atomic(const fs::path& path, std::string_view content);
void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> content);
std::string read_text_file(const fs::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const fs::path& path);

// Stable 64-bit mixing for deriving independent RNG streams from tuples.
std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) noexcept;

// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
template <typename Engine>
double uniform01(Engine& engine) {
  return static_cast<double>(engine() >> 11) * 0x1.0p-53;
}

// Unbiased integer in [0, bound) by rejection.
template <typename Engine>
std::uint64_t uniform_index(Engine& engine, std::uint64_t bound) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t draw = engine();
  while (draw >= limit) draw = engine();
  return draw % bound;
}

}  // namespace attnsteer
