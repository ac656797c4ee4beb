#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dupaudit {

enum class Modality : std::uint8_t { kText = 0, kImage = 1 };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view tag);

inline constexpr double kUnitNormTolerance = 1e-6;

// A unit-norm vector stored as 32-bit floats.
class EmbeddingVector {
 public:
  EmbeddingVector() = default;

  // Wraps values that are already unit-norm; throws InvariantError otherwise.
  static EmbeddingVector from_unit(std::vector<float> values);

  std::size_t dim() const { return values_.size(); }
  std::span<const float> values() const { return values_; }

  bool operator==(const EmbeddingVector&) const = default;

 private:
  explicit EmbeddingVector(std::vector<float> v) : values_(std::move(v)) {}
  std::vector<float> values_;

  friend EmbeddingVector normalize(std::span<const double> raw);
};

// Scales `raw` to unit L2 norm (computed in double). Throws
// DegenerateInputError for the zero vector or non-finite input.
EmbeddingVector normalize(std::span<const double> raw);
EmbeddingVector normalize(std::span<const float> raw);

double l2_norm(std::span<const float> v);
bool is_unit(std::span<const float> v, double tolerance = kUnitNormTolerance);

// Dot product accumulated in double, clamped to [-1, 1]. Inputs are assumed
// unit-norm. Throws UsageError on dimension mismatch.
double cosine_sim(std::span<const float> a, std::span<const float> b);
inline double cosine_sim(const EmbeddingVector& a, const EmbeddingVector& b) {
  return cosine_sim(a.values(), b.values());
}

// Id-aligned, unit-norm rows of one modality from one backend.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(Modality modality, std::uint32_t dim, std::string backend_id);

  // Ids must be strictly ascending and rows unit-norm.
  void append(std::uint64_t id, std::span<const float> row);
  void append(std::uint64_t id, const EmbeddingVector& v) { append(id, v.values()); }

  Modality modality() const { return modality_; }
  std::uint32_t dim() const { return dim_; }
  const std::string& backend_id() const { return backend_id_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::vector<std::uint64_t>& ids() const { return ids_; }

  std::span<const float> row(std::size_t index) const {
    return {data_.data() + index * dim_, dim_};
  }
  EmbeddingVector vector(std::size_t index) const;
  std::optional<std::size_t> index_of(std::uint64_t id) const;

  bool operator==(const EmbeddingMatrix&) const = default;

 private:
  Modality modality_ = Modality::kImage;
  std::uint32_t dim_ = 0;
  std::string backend_id_;
  std::vector<std::uint64_t> ids_;
  std::vector<float> data_;
};

// Binary layout, little-endian:
//   "DAEM" | u8 version (1) | u8 modality | u32 dim | u64 count |
//   u16 backend_id length | backend_id bytes |
//   count x (u64 id | dim x f32)
std::string serialize_matrix(const EmbeddingMatrix& m);
// Throws FormatError (with byte offset) on a corrupt header or truncated
// payload, InvariantError on a non-unit row or unsorted ids.
EmbeddingMatrix parse_matrix(std::string_view bytes);

void save_matrix(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix load_matrix(const std::filesystem::path& path);

}  // namespace dupaudit
