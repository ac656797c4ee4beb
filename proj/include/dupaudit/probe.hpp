#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dupaudit/backend.hpp"
#include "dupaudit/dataset.hpp"
#include "dupaudit/embedding.hpp"

namespace dupaudit {

inline constexpr std::size_t kDefaultSeedCount = 500;

struct ProbeSpec {
  std::string prompt;
  std::vector<std::string> highlight_keywords;
  std::size_t n_seeds = kDefaultSeedCount;
  std::uint64_t base_seed = 0;
  GenerationParams gen_params;
  bool operator==(const ProbeSpec&) const = default;
};

// [base, base+1, ..., base+n-1] with wrapping arithmetic. n == 0 throws
// UsageError.
std::vector<std::uint64_t> derive_seeds(std::uint64_t base_seed, std::size_t n);

// Training-side references a probe is scored against. Both matrices must come
// from the backend that scores the probe.
struct ReferenceSet {
  EmbeddingMatrix image_embeddings;
  EmbeddingMatrix text_embeddings;

  const std::string& backend_id() const { return image_embeddings.backend_id(); }
  // Throws UsageError on modality or backend mismatch between the two.
  void validate() const;
};

// Manifest JSON {"image_embeddings": PATH, "text_embeddings": PATH}; relative
// paths resolve against the manifest's directory.
ReferenceSet load_reference_set(const std::filesystem::path& manifest);
void save_reference_set(const ReferenceSet& refs, const std::filesystem::path& manifest);

enum class DistanceMetric { kCosineDistance, kL2 };

struct MemorizationCriterion {
  DistanceMetric metric = DistanceMetric::kCosineDistance;
  double delta = 0.0;
};

double distance(const EmbeddingVector& a, const EmbeddingVector& b, DistanceMetric metric);

// True iff distance(candidate, original) <= delta.
bool is_extractable(const EmbeddingVector& candidate, const EmbeddingVector& original,
                    const MemorizationCriterion& criterion);

// counts[i] = number of sims s with (#edges e such that s > e) == i, so the
// last bucket holds everything strictly above the highest edge.
struct SimilarityBuckets {
  std::vector<double> edges;
  std::vector<std::size_t> counts;

  std::size_t total() const;
  bool operator==(const SimilarityBuckets&) const = default;
};

SimilarityBuckets bucketize(std::span<const double> sims, std::vector<double> edges);

// 100 * |{s > threshold}| / |sims|. Throws DegenerateInputError on an empty list.
double percent_above(std::span<const double> sims, double threshold);

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::string image_ref;                   // empty in embeddings-only mode
  std::optional<double> sim_to_reference;  // nullopt for failed seeds
  std::string error;
  bool operator==(const SeedOutcome&) const = default;
};

struct ObjectPresence {
  std::string label;
  double rate = 0.0;
  std::size_t positives = 0;
  std::size_t answered = 0;
  std::size_t failed = 0;
  bool operator==(const ObjectPresence&) const = default;
};

struct ProbeResult {
  std::string probe_id;
  std::string backend_id;
  ProbeSpec spec;
  double threshold = 0.0;
  bool embeddings_only = false;
  std::vector<SeedOutcome> per_seed;  // seed-index order
  double text_similarity = 0.0;
  SimilarityBuckets buckets;
  double percent_above = 0.0;
  std::optional<ObjectPresence> presence;
  std::optional<double> baseline_rate;

  std::vector<double> successful_sims() const;
  std::size_t failed_seeds() const;
  bool operator==(const ProbeResult&) const = default;
};

struct ProbeOptions {
  std::vector<double> bucket_edges = {0.70, 0.80, 0.85};
  std::size_t parallelism = 4;
  std::size_t seeds_per_request = 25;
  int max_retries = 2;
  // Generated images are written to image_dir/{probe_id}/{seed}.png. Empty
  // selects embeddings-only mode.
  std::filesystem::path image_dir;
  std::string probe_id;  // default_probe_id(spec) when empty
};

std::string default_probe_id(const ProbeSpec& spec);

// Maximum cosine between the embedded prompt and the reference text corpus.
double text_similarity(std::string_view prompt, const ReferenceSet& refs,
                       BackendClient& backend);

// Generates one sample per derived seed, scores each against the reference
// images (max cosine), and aggregates in seed order. Failed seeds are retried,
// then excluded from every denominator.
ProbeResult run_probe(const ProbeSpec& spec, BackendClient& backend,
                      const ReferenceSet& refs, double threshold,
                      const ProbeOptions& options = {});

struct DetectOptions {
  std::size_t batch_size = 25;
  std::size_t parallelism = 4;
  std::filesystem::path base_dir;  // for relative image refs
};

// Share of the probe's generated images the detector marks as showing `label`.
// Throws ModeError for embeddings-only probes and DegenerateInputError when no
// detection was answered.
ObjectPresence object_presence_rate(const ProbeResult& result, BackendClient& detector,
                                    std::string_view label,
                                    const DetectOptions& options = {});

// Detector-positive share over a seeded sample of the slice's active records
// with readable images.
ObjectPresence baseline_object_rate(const DatasetSlice& slice, std::size_t sample_n,
                                    BackendClient& detector, std::string_view label,
                                    std::uint64_t seed, const DetectOptions& options = {});

// Sample indices: partial Fisher-Yates over [0, n) driven by splitmix64.
std::vector<std::size_t> seeded_sample(std::size_t n, std::size_t k, std::uint64_t seed);

// Highest-similarity seed in each bucket (nullopt for empty buckets).
std::vector<std::optional<SeedOutcome>> band_exemplars(const ProbeResult& result);

std::string serialize_probe_result(const ProbeResult& r);
ProbeResult parse_probe_result(std::string_view json);
void save_probe_result(const ProbeResult& r, const std::filesystem::path& path);
ProbeResult load_probe_result(const std::filesystem::path& path);

}  // namespace dupaudit
