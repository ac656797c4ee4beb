#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dupaudit/dataset.hpp"
#include "dupaudit/embedding.hpp"

namespace dupaudit {

using Bytes = std::vector<std::uint8_t>;

struct BackendInfo {
  std::string model_tag;
  std::uint32_t dim = 0;
  std::size_t max_tokens = 77;
  std::set<std::string> modes;
  bool deterministic = false;
};

struct BackendDescriptor {
  std::string base_url;
  std::uint32_t dim = 0;
  std::string model_tag;
  bool mock = false;
};

struct EmbedItem {
  std::optional<EmbeddingVector> embedding;
  std::string error;
};

struct GenerationParams {
  int steps = 50;
  double guidance = 7.5;
  int width = 512;
  int height = 512;
  bool operator==(const GenerationParams&) const = default;
};

enum class GenerateReturn { kImages, kEmbeddings };

struct GenerateRequest {
  std::string prompt;
  std::vector<std::uint64_t> seeds;
  GenerationParams params;
  GenerateReturn want = GenerateReturn::kImages;
};

struct GeneratedItem {
  std::uint64_t seed = 0;
  std::optional<Bytes> image;                // PNG bytes
  std::optional<EmbeddingVector> embedding;  // image-space embedding
  std::string error;
  bool ok() const { return error.empty() && (image || embedding); }
};

struct DetectItem {
  std::optional<bool> present;
  double score = 0.0;
  std::string error;
};

struct CountItem {
  std::optional<std::size_t> count;
  std::string error;
};

// Model service client. Batch methods return one entry per input, in input
// order; per-item failures are reported in the entry. A failure of the call
// as a whole throws BackendError. Implementations must be safe to call from
// several threads.
class BackendClient {
 public:
  virtual ~BackendClient() = default;

  virtual BackendDescriptor descriptor() = 0;
  virtual BackendInfo info() = 0;
  virtual std::vector<EmbedItem> embed_text(std::span<const std::string> texts) = 0;
  virtual std::vector<EmbedItem> embed_image(std::span<const Bytes> images) = 0;
  virtual std::vector<GeneratedItem> generate(const GenerateRequest& request) = 0;
  virtual std::vector<DetectItem> detect(std::span<const Bytes> images,
                                         std::string_view label) = 0;
  virtual std::vector<CountItem> count_tokens(std::span<const std::string> texts) = 0;

  // Number of work requests (embed, generate, detect, count) issued so far.
  virtual std::size_t request_count() const = 0;

  std::string backend_id() { return descriptor().model_tag; }
};

// Tokenizer backed by the service's count endpoint.
class BackendTokenizer final : public Tokenizer {
 public:
  explicit BackendTokenizer(BackendClient& client, std::size_t batch_size = 256)
      : client_(client), batch_size_(batch_size) {}
  std::vector<std::optional<std::size_t>> count(
      std::span<const std::string> texts) override;
  std::string name() const override { return "backend"; }

 private:
  BackendClient& client_;
  std::size_t batch_size_;
};

struct HttpBackendOptions {
  std::chrono::milliseconds timeout{60000};
};

// "mock" selects the in-process mock; anything else is an http(s) base URL.
std::unique_ptr<BackendClient> make_backend(std::string_view spec,
                                            const HttpBackendOptions& options = {});

std::unique_ptr<BackendClient> make_http_backend(std::string base_url,
                                                 const HttpBackendOptions& options = {});

}  // namespace dupaudit
