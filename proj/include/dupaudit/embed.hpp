#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dupaudit/backend.hpp"
#include "dupaudit/dataset.hpp"
#include "dupaudit/embedding.hpp"

namespace dupaudit {

struct EmbedInput {
  std::uint64_t id = 0;
  std::string payload;  // caption text, or raw image bytes
};

struct EmbedFailure {
  std::uint64_t id = 0;
  std::string reason;
};

struct EmbedOptions {
  std::filesystem::path cache_dir;  // empty disables caching
  std::size_t batch_size = 32;
  std::size_t parallelism = 4;
  int max_retries = 2;
};

struct EmbedReport {
  EmbeddingMatrix matrix;
  std::vector<EmbedFailure> failures;
  std::size_t cache_hits = 0;
  std::size_t backend_requests = 0;
};

// Inputs for the active records of `slice`. Image payloads are read from
// image_ref (relative paths resolve against `base_dir`); records without a
// readable image are returned as failures.
struct SliceInputs {
  std::vector<EmbedInput> inputs;
  std::vector<EmbedFailure> failures;
};
SliceInputs inputs_from_slice(const DatasetSlice& slice, Modality modality,
                              const std::filesystem::path& base_dir = {});

// One unit-norm row per successfully embedded id, ids ascending. Entries are
// cached under cache_dir keyed by (backend id, modality, sha256 of payload);
// a warm cache issues no backend requests. Items failing per-item are retried
// up to max_retries times before being reported in `failures`. Throws
// BackendError when the backend is unreachable for uncached inputs.
EmbedReport embed_batch(std::span<const EmbedInput> inputs, Modality modality,
                        BackendClient& client, const EmbedOptions& options = {});

// Path of the cache entry for one payload.
std::filesystem::path cache_entry_path(const std::filesystem::path& cache_dir,
                                       const std::string& backend_id, Modality modality,
                                       std::string_view payload);

}  // namespace dupaudit
