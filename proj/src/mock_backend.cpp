#include "dupaudit/mock_backend.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>

#include <json.hpp>

#include "dupaudit/errors.hpp"
#include "dupaudit/hashing.hpp"
#include "dupaudit/io.hpp"
#include "dupaudit/png.hpp"

namespace dupaudit {

std::uint64_t mock_hash(std::string_view domain, std::string_view payload) {
  std::uint64_t h = fnv1a64(kMockKey);
  h = fnv1a64(std::string_view("\0", 1), h);
  h = fnv1a64(domain, h);
  h = fnv1a64(std::string_view("\0", 1), h);
  return fnv1a64(payload, h);
}

std::vector<double> mock_raw_values(std::string_view domain, std::string_view payload,
                                    std::uint32_t dim) {
  const std::uint64_t h = mock_hash(domain, payload);
  std::vector<double> r(dim);
  for (std::uint32_t i = 0; i < dim; ++i) {
    r[i] = 2.0 * unit_interval(splitmix64(h + i * 0x9e3779b97f4a7c15ULL)) - 1.0;
  }
  return r;
}

EmbeddingVector mock_vector(std::string_view domain, std::string_view payload) {
  const auto raw = mock_raw_values(domain, payload);
  return normalize(std::span<const double>(raw));
}

EmbeddingVector planted_vector(const EmbeddingVector& reference, double sim,
                               std::string_view salt) {
  if (sim < -1.0 || sim > 1.0) throw UsageError("planted similarity outside [-1, 1]");
  if (sim == 1.0) return reference;
  const auto ref = reference.values();
  auto u = mock_raw_values("orth", salt, static_cast<std::uint32_t>(ref.size()));
  double proj = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) proj += u[i] * ref[i];
  double sq = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] -= proj * ref[i];
    sq += u[i] * u[i];
  }
  const double inv = 1.0 / std::sqrt(sq);
  const double ortho = std::sqrt(1.0 - sim * sim);
  std::vector<double> v(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) v[i] = sim * ref[i] + ortho * u[i] * inv;
  return normalize(std::span<const double>(v));
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kMockChunk = "daEm";

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    v = static_cast<T>(v >> 8);
  }
}

template <typename T>
T get_le(std::span<const std::uint8_t> b, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[at + i]) << (8 * i);
  return v;
}

}  // namespace

Bytes encode_mock_image(std::uint64_t seed, const EmbeddingVector& embedding) {
  const auto values = embedding.values();
  png::Chunk chunk{std::string(kMockChunk), {}};
  put_le<std::uint64_t>(chunk.data, seed);
  put_le<std::uint32_t>(chunk.data, static_cast<std::uint32_t>(values.size()));
  for (float x : values) put_le<std::uint32_t>(chunk.data, std::bit_cast<std::uint32_t>(x));

  std::vector<std::uint8_t> pixels(64, 128);
  for (std::size_t i = 0; i < std::min<std::size_t>(64, values.size()); ++i) {
    const double p = 128.0 + 1024.0 * values[i];
    pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(p), 0L, 255L));
  }
  const png::Chunk extra[] = {chunk};
  return png::encode_gray(8, 8, pixels, extra);
}

std::optional<MockImagePayload> decode_mock_image(std::span<const std::uint8_t> bytes) {
  const auto data = png::find_chunk(bytes, kMockChunk);
  if (!data || data->size() < 12) return std::nullopt;
  const auto seed = get_le<std::uint64_t>(*data, 0);
  const auto dim = get_le<std::uint32_t>(*data, 8);
  if (dim == 0 || data->size() != 12 + 4 * static_cast<std::size_t>(dim)) return std::nullopt;
  std::vector<float> values(dim);
  for (std::uint32_t i = 0; i < dim; ++i) {
    values[i] = std::bit_cast<float>(get_le<std::uint32_t>(*data, 12 + 4 * i));
  }
  if (!is_unit(values)) return std::nullopt;
  return MockImagePayload{seed, EmbeddingVector::from_unit(std::move(values))};
}

std::vector<std::uint64_t> choose_seeds(std::span<const std::uint64_t> seeds,
                                        std::size_t count, std::uint64_t salt) {
  if (count > seeds.size()) throw UsageError("cannot choose more seeds than available");
  std::vector<std::uint64_t> ranked(seeds.begin(), seeds.end());
  std::sort(ranked.begin(), ranked.end(), [salt](std::uint64_t a, std::uint64_t b) {
    const auto ka = splitmix64(a ^ salt);
    const auto kb = splitmix64(b ^ salt);
    return ka != kb ? ka < kb : a < b;
  });
  ranked.resize(count);
  std::sort(ranked.begin(), ranked.end());
  return ranked;
}

// ---------------------------------------------------------------------------
// Plan file.

namespace {

using nlohmann::json;

std::vector<std::uint64_t> seed_range(const json& j) {
  const auto base = j.value("base_seed", std::uint64_t{0});
  const auto n = j.at("n").get<std::uint64_t>();
  std::vector<std::uint64_t> seeds(n);
  for (std::uint64_t i = 0; i < n; ++i) seeds[i] = base + i;
  return seeds;
}

EmbeddingVector reference_from(const json& j, const std::string& base_dir) {
  if (j.contains("reference")) {
    return normalize(std::span<const double>(j["reference"].get<std::vector<double>>()));
  }
  if (j.contains("reference_text")) {
    return mock_vector("text", j["reference_text"].get<std::string>());
  }
  if (j.contains("reference_image")) {
    std::filesystem::path p = j["reference_image"].get<std::string>();
    if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
    return MockBackend::image_embedding(read_bytes(p));
  }
  throw UsageError("replication plan needs reference, reference_text or reference_image");
}

}  // namespace

MockPlan MockPlan::from_json(std::string_view text, const std::string& base_dir) {
  MockPlan plan;
  try {
    const auto j = json::parse(text);
    for (const auto& r : j.value("replications", json::array())) {
      ReplicationPlan rp;
      rp.prompt = r.at("prompt").get<std::string>();
      rp.reference = reference_from(r, base_dir);
      if (r.contains("default_sim")) rp.default_sim = r["default_sim"].get<double>();
      const auto seed_sims = r.value("seed_sims", json::object());
      for (const auto& [k, v] : seed_sims.items()) {
        rp.seed_sims[std::stoull(k)] = v.get<double>();
      }
      if (r.contains("replicate")) {
        const auto& rep = r["replicate"];
        const auto seeds = seed_range(rep);
        for (auto s : choose_seeds(seeds, rep.at("count").get<std::size_t>(),
                                   rep.value("salt", std::uint64_t{0}))) {
          rp.seed_sims[s] = rep.at("sim").get<double>();
        }
      }
      plan.replications.push_back(std::move(rp));
    }
    for (const auto& d : j.value("detections", json::array())) {
      DetectionPlan dp;
      dp.label = d.at("label").get<std::string>();
      dp.default_present = d.value("default", false);
      for (const auto& s : d.value("positive_seeds", json::array())) {
        dp.positive_seeds.insert(s.get<std::uint64_t>());
      }
      if (d.contains("positive_count")) {
        const auto& pc = d["positive_count"];
        for (auto s : choose_seeds(seed_range(pc), pc.at("count").get<std::size_t>(),
                                   pc.value("salt", std::uint64_t{0}))) {
          dp.positive_seeds.insert(s);
        }
      }
      for (const auto& s : d.value("positive_digests", json::array())) {
        dp.positive_digests.insert(s.get<std::string>());
      }
      for (const auto& s : d.value("failing_seeds", json::array())) {
        dp.failing_seeds.insert(s.get<std::uint64_t>());
      }
      plan.detections.push_back(std::move(dp));
    }
    const auto failures = j.value("generate_failures", json::object());
    for (const auto& [k, v] : failures.items()) {
      plan.generate_failures[std::stoull(k)] = v.get<int>();
    }
    plan.offline = j.value("offline", false);
  } catch (const json::exception& e) {
    throw UsageError(std::string("invalid mock plan: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw UsageError("invalid mock plan: seed keys must be integers");
  }
  return plan;
}

// ---------------------------------------------------------------------------

MockBackend::MockBackend(MockPlan plan)
    : plan_(std::move(plan)),
      offline_(plan_.offline),
      remaining_failures_(plan_.generate_failures) {}

BackendDescriptor MockBackend::descriptor() {
  return {"mock", kMockDim, std::string(kMockModelTag), true};
}

BackendInfo MockBackend::info() {
  BackendInfo info;
  info.model_tag = std::string(kMockModelTag);
  info.dim = kMockDim;
  info.max_tokens = kMockMaxTokens;
  info.modes = {"embed_text", "embed_image", "generate", "detect", "count_tokens"};
  info.deterministic = true;
  return info;
}

void MockBackend::begin_request() {
  if (offline_.load()) throw BackendError("mock backend is offline");
  ++requests_;
}

EmbeddingVector MockBackend::image_embedding(std::span<const std::uint8_t> bytes) {
  if (auto payload = decode_mock_image(bytes)) return std::move(payload->embedding);
  return mock_vector("image", std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                               bytes.size()));
}

std::vector<EmbedItem> MockBackend::embed_text(std::span<const std::string> texts) {
  begin_request();
  WhitespaceTokenizer ws;
  const auto counts = ws.count(texts);
  std::vector<EmbedItem> out(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (*counts[i] > kMockMaxTokens) {
      out[i].error = "text has " + std::to_string(*counts[i]) + " tokens (max " +
                     std::to_string(kMockMaxTokens) + ")";
      continue;
    }
    out[i].embedding = mock_vector("text", texts[i]);
  }
  return out;
}

std::vector<EmbedItem> MockBackend::embed_image(std::span<const Bytes> images) {
  begin_request();
  std::vector<EmbedItem> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].empty()) {
      out[i].error = "empty image payload";
      continue;
    }
    out[i].embedding = image_embedding(images[i]);
  }
  return out;
}

EmbeddingVector MockBackend::generated_embedding(const std::string& prompt,
                                                 std::uint64_t seed) const {
  const std::string key = prompt + '\0' + std::to_string(seed);
  for (const auto& rp : plan_.replications) {
    if (rp.prompt != prompt) continue;
    std::optional<double> sim;
    if (const auto it = rp.seed_sims.find(seed); it != rp.seed_sims.end()) {
      sim = it->second;
    } else {
      sim = rp.default_sim;
    }
    if (sim) return planted_vector(rp.reference, *sim, key);
  }
  return mock_vector("generate", key);
}

std::vector<GeneratedItem> MockBackend::generate(const GenerateRequest& request) {
  begin_request();
  const auto& p = request.params;
  if (request.seeds.empty()) throw UsageError("generate: seeds must be non-empty");
  if (p.width < 64 || p.width > 2048 || p.width % 8 || p.height < 64 ||
      p.height > 2048 || p.height % 8) {
    throw UsageError("generate: width/height must be multiples of 8 in [64, 2048]");
  }
  if (p.steps < 1 || p.steps > 1000 || p.guidance < 0.0 || p.guidance > 50.0) {
    throw UsageError("generate: steps must be in [1, 1000] and guidance in [0, 50]");
  }
  std::vector<GeneratedItem> out(request.seeds.size());
  for (std::size_t i = 0; i < request.seeds.size(); ++i) {
    const auto seed = request.seeds[i];
    out[i].seed = seed;
    {
      std::lock_guard lock(failures_mu_);
      if (auto it = remaining_failures_.find(seed); it != remaining_failures_.end()) {
        if (it->second < 0) {
          out[i].error = "planted permanent generation fault";
          continue;
        }
        if (it->second > 0) {
          --it->second;
          out[i].error = "planted transient generation fault";
          continue;
        }
      }
    }
    auto embedding = generated_embedding(request.prompt, seed);
    if (request.want == GenerateReturn::kImages) {
      out[i].image = encode_mock_image(seed, embedding);
    } else {
      out[i].embedding = std::move(embedding);
    }
  }
  return out;
}

std::vector<DetectItem> MockBackend::detect(std::span<const Bytes> images,
                                            std::string_view label) {
  begin_request();
  if (label.empty()) throw UsageError("detect: label must be non-empty");
  const DetectionPlan* plan = nullptr;
  for (const auto& dp : plan_.detections) {
    if (dp.label == label) plan = &dp;
  }
  std::vector<DetectItem> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    bool present = false;
    if (plan) {
      present = plan->default_present;
      const auto payload = decode_mock_image(images[i]);
      if (payload && plan->failing_seeds.count(payload->seed)) {
        out[i].error = "planted detector fault";
        continue;
      }
      if (payload && plan->positive_seeds.count(payload->seed)) present = true;
      if (!plan->positive_digests.empty() &&
          plan->positive_digests.count(sha256_hex(images[i]))) {
        present = true;
      }
    }
    out[i].present = present;
    out[i].score = present ? 1.0 : 0.0;
  }
  return out;
}

std::vector<CountItem> MockBackend::count_tokens(std::span<const std::string> texts) {
  begin_request();
  WhitespaceTokenizer ws;
  const auto counts = ws.count(texts);
  std::vector<CountItem> out(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) out[i].count = counts[i];
  return out;
}

}  // namespace dupaudit
