#include "dupaudit/png.hpp"

#include <zlib.h>

#include <algorithm>

#include "dupaudit/errors.hpp"

namespace dupaudit::png {
namespace {

constexpr std::uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

void put_chunk(std::vector<std::uint8_t>& out, std::string_view type,
               std::span<const std::uint8_t> data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t type_at = out.size();
  out.insert(out.end(), type.begin(), type.end());
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + type_at, static_cast<uInt>(4 + data.size()));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

std::vector<std::uint8_t> encode_gray(std::uint32_t width, std::uint32_t height,
                                      std::span<const std::uint8_t> pixels,
                                      std::span<const Chunk> extra) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) {
    throw UsageError("png: pixel count does not match dimensions");
  }
  std::vector<std::uint8_t> out(std::begin(kSignature), std::end(kSignature));

  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, width);
  put_be32(ihdr, height);
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, grayscale, no interlace
  put_chunk(out, "IHDR", ihdr);

  for (const auto& c : extra) put_chunk(out, c.type, c.data);

  std::vector<std::uint8_t> raw;
  raw.reserve(pixels.size() + height);
  for (std::uint32_t y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    const auto row = pixels.subspan(static_cast<std::size_t>(y) * width, width);
    raw.insert(raw.end(), row.begin(), row.end());
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IntegrityError("png: deflate failed");
  }
  z.resize(zlen);
  put_chunk(out, "IDAT", z);
  put_chunk(out, "IEND", {});
  return out;
}

bool has_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 8 && std::equal(std::begin(kSignature), std::end(kSignature),
                                          bytes.begin());
}

std::optional<std::vector<std::uint8_t>> find_chunk(std::span<const std::uint8_t> bytes,
                                                    std::string_view type) {
  if (!has_signature(bytes) || type.size() != 4) return std::nullopt;
  std::size_t at = 8;
  while (at + 12 <= bytes.size()) {
    const std::uint32_t len = get_be32(bytes, at);
    if (len > bytes.size() - at - 12) return std::nullopt;
    const auto chunk_type = bytes.subspan(at + 4, 4);
    const auto crc = crc32(0L, bytes.data() + at + 4, 4 + len);
    if (crc != get_be32(bytes, at + 8 + len)) return std::nullopt;
    if (std::equal(chunk_type.begin(), chunk_type.end(), type.begin())) {
      const auto data = bytes.subspan(at + 8, len);
      return std::vector<std::uint8_t>(data.begin(), data.end());
    }
    if (std::equal(chunk_type.begin(), chunk_type.end(), "IEND")) break;
    at += 12 + len;
  }
  return std::nullopt;
}

}  // namespace dupaudit::png
