#include "dupaudit/embed.hpp"

#include <algorithm>
#include <bit>
#include <map>

#include "dupaudit/errors.hpp"
#include "dupaudit/hashing.hpp"
#include "dupaudit/io.hpp"
#include "dupaudit/parallel.hpp"

namespace dupaudit {
namespace {

std::string sanitize(std::string_view tag) {
  std::string out;
  for (char c : tag) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
    out.push_back(ok ? c : '_');
  }
  return out.empty() ? "_" : out;
}

std::string encode_row(std::span<const float> row) {
  std::string out;
  out.reserve(row.size() * 4);
  for (float x : row) {
    auto u = std::bit_cast<std::uint32_t>(x);
    for (int i = 0; i < 4; ++i) {
      out.push_back(static_cast<char>(u & 0xFF));
      u >>= 8;
    }
  }
  return out;
}

std::optional<std::vector<float>> decode_row(std::string_view bytes, std::uint32_t dim) {
  if (bytes.size() != 4 * static_cast<std::size_t>(dim)) return std::nullopt;
  std::vector<float> row(dim);
  for (std::uint32_t i = 0; i < dim; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) {
      u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    }
    row[i] = std::bit_cast<float>(u);
  }
  if (!is_unit(row)) return std::nullopt;
  return row;
}

}  // namespace

std::filesystem::path cache_entry_path(const std::filesystem::path& cache_dir,
                                       const std::string& backend_id, Modality modality,
                                       std::string_view payload) {
  const std::string key = sha256_hex(payload);
  return cache_dir / sanitize(backend_id) / std::string(to_string(modality)) /
         key.substr(0, 2) / (key + ".f32");
}

SliceInputs inputs_from_slice(const DatasetSlice& slice, Modality modality,
                              const std::filesystem::path& base_dir) {
  SliceInputs out;
  for (const auto* rec : slice.active()) {
    if (modality == Modality::kText) {
      out.inputs.push_back({rec->id, rec->caption});
      continue;
    }
    if (!rec->image_ref) {
      out.failures.push_back({rec->id, "record has no image_ref"});
      continue;
    }
    std::filesystem::path p = *rec->image_ref;
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    try {
      out.inputs.push_back({rec->id, read_file(p)});
    } catch (const IoError& e) {
      out.failures.push_back({rec->id, e.what()});
    }
  }
  return out;
}

EmbedReport embed_batch(std::span<const EmbedInput> inputs, Modality modality,
                        BackendClient& client, const EmbedOptions& options) {
  std::vector<const EmbedInput*> sorted;
  sorted.reserve(inputs.size());
  for (const auto& in : inputs) sorted.push_back(&in);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->id < b->id; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->id == sorted[i - 1]->id) {
      throw UsageError("duplicate input id " + std::to_string(sorted[i]->id));
    }
  }

  EmbedReport report;
  if (sorted.empty()) {
    // No inputs: nothing to ask the backend, the mock dim documents the shape.
    const auto desc = client.descriptor();
    report.matrix = EmbeddingMatrix(modality, desc.dim, desc.model_tag);
    return report;
  }

  const auto desc = client.descriptor();
  const std::size_t requests_before = client.request_count();
  std::vector<std::optional<std::vector<float>>> rows(sorted.size());
  std::vector<std::string> last_error(sorted.size());

  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (!options.cache_dir.empty()) {
      const auto path = cache_entry_path(options.cache_dir, desc.model_tag, modality,
                                         sorted[i]->payload);
      if (std::filesystem::exists(path)) {
        try {
          if (auto row = decode_row(read_file(path), desc.dim)) {
            rows[i] = std::move(row);
            ++report.cache_hits;
            continue;
          }
        } catch (const IoError&) {
        }
      }
    }
    pending.push_back(i);
  }

  const std::size_t batch = std::max<std::size_t>(options.batch_size, 1);
  for (int attempt = 0; attempt <= options.max_retries && !pending.empty(); ++attempt) {
    const std::size_t n_batches = (pending.size() + batch - 1) / batch;
    parallel_for(n_batches, options.parallelism, [&](std::size_t b) {
      const std::size_t lo = b * batch;
      const std::size_t hi = std::min(pending.size(), lo + batch);
      std::vector<EmbedItem> items;
      if (modality == Modality::kText) {
        std::vector<std::string> texts;
        for (std::size_t k = lo; k < hi; ++k) texts.push_back(sorted[pending[k]]->payload);
        items = client.embed_text(texts);
      } else {
        std::vector<Bytes> images;
        for (std::size_t k = lo; k < hi; ++k) {
          const auto& p = sorted[pending[k]]->payload;
          images.emplace_back(p.begin(), p.end());
        }
        items = client.embed_image(images);
      }
      if (items.size() != hi - lo) {
        throw BackendError("embedding batch returned " + std::to_string(items.size()) +
                           " items for " + std::to_string(hi - lo) + " inputs");
      }
      for (std::size_t k = lo; k < hi; ++k) {
        auto& item = items[k - lo];
        const std::size_t i = pending[k];
        if (!item.embedding) {
          last_error[i] = item.error.empty() ? "backend returned no embedding" : item.error;
          continue;
        }
        if (item.embedding->dim() != desc.dim) {
          throw BackendError("backend returned dimension " +
                             std::to_string(item.embedding->dim()) + ", expected " +
                             std::to_string(desc.dim));
        }
        const auto v = item.embedding->values();
        rows[i] = std::vector<float>(v.begin(), v.end());
        if (!options.cache_dir.empty()) {
          write_file_atomic(cache_entry_path(options.cache_dir, desc.model_tag, modality,
                                             sorted[i]->payload),
                            encode_row(v));
        }
      }
    });
    std::vector<std::size_t> still;
    for (auto i : pending) {
      if (!rows[i]) still.push_back(i);
    }
    pending = std::move(still);
  }

  report.matrix = EmbeddingMatrix(modality, desc.dim, desc.model_tag);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (rows[i]) {
      report.matrix.append(sorted[i]->id, *rows[i]);
    } else {
      report.failures.push_back({sorted[i]->id, last_error[i]});
    }
  }
  report.backend_requests = client.request_count() - requests_before;
  return report;
}

}  // namespace dupaudit
