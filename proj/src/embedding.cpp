#include "dupaudit/embedding.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "dupaudit/errors.hpp"
#include "dupaudit/io.hpp"

namespace dupaudit {

std::string_view to_string(Modality m) {
  return m == Modality::kText ? "text" : "image";
}

Modality parse_modality(std::string_view tag) {
  if (tag == "text") return Modality::kText;
  if (tag == "image") return Modality::kImage;
  throw UsageError("unknown modality '" + std::string(tag) + "' (expected text or image)");
}

EmbeddingVector EmbeddingVector::from_unit(std::vector<float> values) {
  if (values.empty()) throw InvariantError("embedding has dimension 0");
  if (!is_unit(values)) {
    throw InvariantError("embedding norm " + std::to_string(l2_norm(values)) +
                         " is not unit");
  }
  return EmbeddingVector(std::move(values));
}

EmbeddingVector normalize(std::span<const double> raw) {
  double sq = 0.0;
  for (double x : raw) {
    if (!std::isfinite(x)) throw DegenerateInputError("non-finite vector component");
    sq += x * x;
  }
  if (raw.empty() || sq == 0.0) throw DegenerateInputError("cannot normalize a zero vector");
  const double inv = 1.0 / std::sqrt(sq);
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[i] = static_cast<float>(raw[i] * inv);
  }
  return EmbeddingVector(std::move(out));
}

EmbeddingVector normalize(std::span<const float> raw) {
  std::vector<double> wide(raw.begin(), raw.end());
  return normalize(std::span<const double>(wide));
}

double l2_norm(std::span<const float> v) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * x;
  return std::sqrt(sq);
}

bool is_unit(std::span<const float> v, double tolerance) {
  return std::abs(l2_norm(v) - 1.0) <= tolerance;
}

double cosine_sim(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw UsageError("dimension mismatch: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return std::clamp(dot, -1.0, 1.0);
}

// ---------------------------------------------------------------------------

EmbeddingMatrix::EmbeddingMatrix(Modality modality, std::uint32_t dim,
                                 std::string backend_id)
    : modality_(modality), dim_(dim), backend_id_(std::move(backend_id)) {
  if (dim == 0) throw UsageError("embedding dimension must be positive");
}

void EmbeddingMatrix::append(std::uint64_t id, std::span<const float> row) {
  if (row.size() != dim_) {
    throw UsageError("row dimension " + std::to_string(row.size()) +
                     " does not match matrix dimension " + std::to_string(dim_));
  }
  if (!ids_.empty() && id <= ids_.back()) {
    throw InvariantError("matrix ids must be strictly ascending (" + std::to_string(id) +
                         " after " + std::to_string(ids_.back()) + ")");
  }
  if (!is_unit(row)) {
    throw InvariantError("row for id " + std::to_string(id) + " has norm " +
                         std::to_string(l2_norm(row)));
  }
  ids_.push_back(id);
  data_.insert(data_.end(), row.begin(), row.end());
}

EmbeddingVector EmbeddingMatrix::vector(std::size_t index) const {
  const auto r = row(index);
  return EmbeddingVector::from_unit(std::vector<float>(r.begin(), r.end()));
}

std::optional<std::size_t> EmbeddingMatrix::index_of(std::uint64_t id) const {
  const auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
  if (it == ids_.end() || *it != id) return std::nullopt;
  return static_cast<std::size_t>(it - ids_.begin());
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'A', 'E', 'M'};
constexpr std::uint8_t kVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(u & 0xFF));
    u = static_cast<U>(u >> 8);
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::make_unsigned_t<T>>(
               static_cast<unsigned char>(bytes_[pos_ + i]))
           << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw FormatError(std::string("truncated ") + what + " (need " +
                            std::to_string(n) + " bytes, have " +
                            std::to_string(remaining()) + ")",
                        pos_);
    }
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_matrix(const EmbeddingMatrix& m) {
  if (m.backend_id().size() > 0xFFFF) throw UsageError("backend id too long");
  std::string out;
  out.reserve(24 + m.backend_id().size() + m.size() * (8 + 4 * m.dim()));
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  out.push_back(static_cast<char>(m.modality()));
  put_le<std::uint32_t>(out, m.dim());
  put_le<std::uint64_t>(out, m.size());
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(m.backend_id().size()));
  out += m.backend_id();
  for (std::size_t i = 0; i < m.size(); ++i) {
    put_le<std::uint64_t>(out, m.ids()[i]);
    for (float x : m.row(i)) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(x));
  }
  return out;
}

EmbeddingMatrix parse_matrix(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4, "magic") != std::string_view(kMagic, 4)) {
    throw FormatError("bad magic (expected DAEM)", 0);
  }
  const std::size_t version_at = in.pos();
  if (in.get<std::uint8_t>("version") != kVersion) {
    throw FormatError("unsupported version", version_at);
  }
  const std::size_t modality_at = in.pos();
  const auto modality = in.get<std::uint8_t>("modality");
  if (modality > 1) throw FormatError("unknown modality byte", modality_at);
  const std::size_t dim_at = in.pos();
  const auto dim = in.get<std::uint32_t>("dim");
  if (dim == 0) throw FormatError("dimension 0", dim_at);
  const auto count = in.get<std::uint64_t>("count");
  const auto tag_len = in.get<std::uint16_t>("backend id length");
  const auto backend_id = in.take(tag_len, "backend id");

  const std::size_t record_bytes = 8 + 4 * static_cast<std::size_t>(dim);
  if (count > in.remaining() / record_bytes) {
    const std::size_t stored = in.remaining() / record_bytes;
    throw FormatError("declared " + std::to_string(count) + " vectors but only " +
                          std::to_string(stored) + " stored",
                      in.pos() + stored * record_bytes);
  }
  EmbeddingMatrix m(static_cast<Modality>(modality), dim, std::string(backend_id));
  std::vector<float> row(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id = in.get<std::uint64_t>("record id");
    for (auto& x : row) x = std::bit_cast<float>(in.get<std::uint32_t>("vector"));
    m.append(id, row);
  }
  if (in.remaining() != 0) {
    throw FormatError(std::to_string(in.remaining()) + " trailing bytes", in.pos());
  }
  return m;
}

void save_matrix(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_matrix(m));
}

EmbeddingMatrix load_matrix(const std::filesystem::path& path) {
  return parse_matrix(read_file(path));
}

}  // namespace dupaudit
