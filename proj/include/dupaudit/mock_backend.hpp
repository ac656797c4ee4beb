#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dupaudit/backend.hpp"

namespace dupaudit {

// Hash-to-vector construction shared with the service's mock mode:
//
//   h    = FNV-1a-64 over  "dupaudit-mock-v1" 0x00 <domain> 0x00 <payload>
//   r_i  = 2 * U(splitmix64(h + i * 0x9e3779b97f4a7c15)) - 1,  i = 0..63
//          where U(x) = (x >> 11) * 2^-53 and all arithmetic wraps mod 2^64
//   v    = r / ||r||  computed in double, each component rounded to f32
//
// Domains: "text" and "image" for embeddings, "generate" for unplanned
// generations (payload = prompt 0x00 decimal-seed), "orth" for the orthogonal
// component of planted vectors.
inline constexpr std::uint32_t kMockDim = 64;
inline constexpr std::string_view kMockModelTag = "mock-hash64-v1";
inline constexpr std::string_view kMockKey = "dupaudit-mock-v1";
inline constexpr std::size_t kMockMaxTokens = 77;

std::uint64_t mock_hash(std::string_view domain, std::string_view payload);
std::vector<double> mock_raw_values(std::string_view domain, std::string_view payload,
                                    std::uint32_t dim = kMockDim);
EmbeddingVector mock_vector(std::string_view domain, std::string_view payload);

// Vector whose cosine to `reference` is `sim` up to f32 rounding. The
// orthogonal part is derived from `salt` through the "orth" domain.
EmbeddingVector planted_vector(const EmbeddingVector& reference, double sim,
                               std::string_view salt);

// Mock "generated image": an 8x8 grayscale PNG whose private "daEm" chunk holds
// u64 seed | u32 dim | dim x f32 (little-endian). Embedding it through the mock
// returns the carried vector.
Bytes encode_mock_image(std::uint64_t seed, const EmbeddingVector& embedding);

struct MockImagePayload {
  std::uint64_t seed = 0;
  EmbeddingVector embedding;
};
std::optional<MockImagePayload> decode_mock_image(std::span<const std::uint8_t> bytes);

// `count` distinct seeds from `seeds`, ranked by splitmix64(seed ^ salt).
std::vector<std::uint64_t> choose_seeds(std::span<const std::uint64_t> seeds,
                                        std::size_t count, std::uint64_t salt);

struct ReplicationPlan {
  std::string prompt;
  EmbeddingVector reference;
  std::map<std::uint64_t, double> seed_sims;  // planted similarity per seed
  std::optional<double> default_sim;          // for seeds not listed
};

struct DetectionPlan {
  std::string label;
  bool default_present = false;
  std::set<std::uint64_t> positive_seeds;    // mock-generated images
  std::set<std::string> positive_digests;    // sha256 hex of arbitrary bytes
  std::set<std::uint64_t> failing_seeds;     // per-item detector failures
};

struct MockPlan {
  std::vector<ReplicationPlan> replications;
  std::vector<DetectionPlan> detections;
  // seed -> number of attempts that fail before success (-1: always fails)
  std::map<std::uint64_t, int> generate_failures;
  bool offline = false;

  // JSON plan file; see README for the schema. Relative file references are
  // resolved against `base_dir`.
  static MockPlan from_json(std::string_view json, const std::string& base_dir = ".");
};

// Deterministic in-process implementation of the backend contract.
class MockBackend final : public BackendClient {
 public:
  explicit MockBackend(MockPlan plan = {});

  BackendDescriptor descriptor() override;
  BackendInfo info() override;
  std::vector<EmbedItem> embed_text(std::span<const std::string> texts) override;
  std::vector<EmbedItem> embed_image(std::span<const Bytes> images) override;
  std::vector<GeneratedItem> generate(const GenerateRequest& request) override;
  std::vector<DetectItem> detect(std::span<const Bytes> images,
                                 std::string_view label) override;
  std::vector<CountItem> count_tokens(std::span<const std::string> texts) override;
  std::size_t request_count() const override { return requests_.load(); }

  void set_offline(bool offline) { offline_.store(offline); }

  static EmbeddingVector image_embedding(std::span<const std::uint8_t> bytes);

 private:
  void begin_request();
  EmbeddingVector generated_embedding(const std::string& prompt, std::uint64_t seed) const;

  MockPlan plan_;
  std::atomic<std::size_t> requests_{0};
  std::atomic<bool> offline_{false};
  std::mutex failures_mu_;
  std::map<std::uint64_t, int> remaining_failures_;
};

}  // namespace dupaudit
