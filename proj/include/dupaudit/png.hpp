#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dupaudit::png {

struct Chunk {
  std::string type;  // four ASCII letters
  std::vector<std::uint8_t> data;
};

// 8-bit grayscale PNG. `extra` chunks are written between IHDR and IDAT.
std::vector<std::uint8_t> encode_gray(std::uint32_t width, std::uint32_t height,
                                      std::span<const std::uint8_t> pixels,
                                      std::span<const Chunk> extra = {});

bool has_signature(std::span<const std::uint8_t> bytes);

// Data of the first chunk of `type`, or nullopt when absent or the stream is
// malformed. CRCs are verified.
std::optional<std::vector<std::uint8_t>> find_chunk(std::span<const std::uint8_t> bytes,
                                                    std::string_view type);

}  // namespace dupaudit::png
