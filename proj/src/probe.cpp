#include "dupaudit/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "dupaudit/embed.hpp"
#include "dupaudit/errors.hpp"
#include "dupaudit/hashing.hpp"
#include "dupaudit/io.hpp"
#include "dupaudit/parallel.hpp"

namespace dupaudit {

using nlohmann::ordered_json;

std::vector<std::uint64_t> derive_seeds(std::uint64_t base_seed, std::size_t n) {
  if (n == 0) throw UsageError("a probe needs at least one seed");
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = base_seed + static_cast<std::uint64_t>(i);
  return seeds;
}

// ---------------------------------------------------------------------------

void ReferenceSet::validate() const {
  if (image_embeddings.modality() != Modality::kImage) {
    throw UsageError("reference image embeddings have modality text");
  }
  if (text_embeddings.modality() != Modality::kText) {
    throw UsageError("reference text embeddings have modality image");
  }
  if (image_embeddings.backend_id() != text_embeddings.backend_id()) {
    throw UsageError("reference matrices come from different backends ('" +
                     image_embeddings.backend_id() + "' vs '" +
                     text_embeddings.backend_id() + "')");
  }
}

ReferenceSet load_reference_set(const std::filesystem::path& manifest) {
  const auto j = nlohmann::json::parse(read_file(manifest), nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("image_embeddings") ||
      !j.contains("text_embeddings")) {
    throw FormatError("reference manifest needs image_embeddings and text_embeddings", 0);
  }
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path = p;
    return path.is_relative() ? manifest.parent_path() / path : path;
  };
  ReferenceSet refs{load_matrix(resolve(j["image_embeddings"].get<std::string>())),
                    load_matrix(resolve(j["text_embeddings"].get<std::string>()))};
  refs.validate();
  return refs;
}

void save_reference_set(const ReferenceSet& refs, const std::filesystem::path& manifest) {
  const auto stem = manifest.stem().string();
  const auto dir = manifest.parent_path();
  save_matrix(refs.image_embeddings, dir / (stem + ".image.daem"));
  save_matrix(refs.text_embeddings, dir / (stem + ".text.daem"));
  ordered_json j;
  j["image_embeddings"] = stem + ".image.daem";
  j["text_embeddings"] = stem + ".text.daem";
  write_file_atomic(manifest, j.dump(1) + "\n");
}

// ---------------------------------------------------------------------------

double distance(const EmbeddingVector& a, const EmbeddingVector& b, DistanceMetric metric) {
  if (a.dim() != b.dim()) {
    throw UsageError("dimension mismatch: " + std::to_string(a.dim()) + " vs " +
                     std::to_string(b.dim()));
  }
  if (metric == DistanceMetric::kCosineDistance) return 1.0 - cosine_sim(a, b);
  double sq = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    const double d = static_cast<double>(a.values()[i]) - b.values()[i];
    sq += d * d;
  }
  return std::sqrt(sq);
}

bool is_extractable(const EmbeddingVector& candidate, const EmbeddingVector& original,
                    const MemorizationCriterion& criterion) {
  if (criterion.delta < 0.0) throw UsageError("delta must be non-negative");
  return distance(candidate, original, criterion.metric) <= criterion.delta;
}

std::size_t SimilarityBuckets::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

SimilarityBuckets bucketize(std::span<const double> sims, std::vector<double> edges) {
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i - 1] < edges[i])) throw UsageError("bucket edges must be strictly ascending");
  }
  SimilarityBuckets b;
  b.counts.assign(edges.size() + 1, 0);
  for (double s : sims) {
    const auto above = static_cast<std::size_t>(
        std::count_if(edges.begin(), edges.end(), [s](double e) { return s > e; }));
    ++b.counts[above];
  }
  b.edges = std::move(edges);
  return b;
}

double percent_above(std::span<const double> sims, double threshold) {
  if (sims.empty()) throw DegenerateInputError("percent_above over an empty list");
  const auto above = std::count_if(sims.begin(), sims.end(),
                                   [threshold](double s) { return s > threshold; });
  return (100.0 * static_cast<double>(above)) / static_cast<double>(sims.size());
}

std::vector<double> ProbeResult::successful_sims() const {
  std::vector<double> out;
  for (const auto& s : per_seed) {
    if (s.sim_to_reference) out.push_back(*s.sim_to_reference);
  }
  return out;
}

std::size_t ProbeResult::failed_seeds() const {
  return static_cast<std::size_t>(std::count_if(
      per_seed.begin(), per_seed.end(), [](const auto& s) { return !s.sim_to_reference; }));
}

std::string default_probe_id(const ProbeSpec& spec) {
  std::uint64_t h = fnv1a64(spec.prompt);
  h = fnv1a64(std::to_string(spec.base_seed) + ':' + std::to_string(spec.n_seeds), h);
  return "probe-" + hex64(h);
}

// ---------------------------------------------------------------------------

namespace {

void check_backend(const ReferenceSet& refs, BackendClient& backend) {
  const auto id = backend.backend_id();
  if (id != refs.backend_id()) {
    throw UsageError("references were embedded by '" + refs.backend_id() +
                     "' but the probe backend is '" + id +
                     "'; cross-model similarities are refused");
  }
}

double max_cosine(std::span<const float> v, const EmbeddingMatrix& corpus) {
  double best = -1.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    best = std::max(best, cosine_sim(v, corpus.row(i)));
  }
  return best;
}

}  // namespace

double text_similarity(std::string_view prompt, const ReferenceSet& refs,
                       BackendClient& backend) {
  if (refs.text_embeddings.empty()) {
    throw DegenerateInputError("reference text corpus is empty");
  }
  check_backend(refs, backend);
  const std::string texts[] = {std::string(prompt)};
  auto items = backend.embed_text(texts);
  if (items.size() != 1 || !items[0].embedding) {
    throw BackendError("could not embed prompt: " +
                       (items.empty() ? std::string("no result") : items[0].error));
  }
  return max_cosine(items[0].embedding->values(), refs.text_embeddings);
}

ProbeResult run_probe(const ProbeSpec& spec, BackendClient& backend,
                      const ReferenceSet& refs, double threshold,
                      const ProbeOptions& options) {
  refs.validate();
  if (refs.image_embeddings.empty()) {
    throw DegenerateInputError("reference image set is empty");
  }
  check_backend(refs, backend);
  const auto seeds = derive_seeds(spec.base_seed, spec.n_seeds);

  ProbeResult result;
  result.probe_id = options.probe_id.empty() ? default_probe_id(spec) : options.probe_id;
  result.backend_id = refs.backend_id();
  result.spec = spec;
  result.threshold = threshold;
  result.embeddings_only = options.image_dir.empty();
  result.per_seed.resize(seeds.size());

  std::vector<GeneratedItem> items(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    items[i].seed = seeds[i];
    items[i].error = "not attempted";
  }
  const std::size_t per_request = std::max<std::size_t>(options.seeds_per_request, 1);
  for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (!items[i].ok()) pending.push_back(i);
    }
    if (pending.empty()) break;
    const std::size_t n_chunks = (pending.size() + per_request - 1) / per_request;
    parallel_for(n_chunks, options.parallelism, [&](std::size_t c) {
      const std::size_t lo = c * per_request;
      const std::size_t hi = std::min(pending.size(), lo + per_request);
      GenerateRequest req;
      req.prompt = spec.prompt;
      req.params = spec.gen_params;
      req.want = result.embeddings_only ? GenerateReturn::kEmbeddings : GenerateReturn::kImages;
      for (std::size_t k = lo; k < hi; ++k) req.seeds.push_back(seeds[pending[k]]);
      std::vector<GeneratedItem> got;
      try {
        got = backend.generate(req);
      } catch (const BackendError& e) {
        for (std::size_t k = lo; k < hi; ++k) items[pending[k]].error = e.what();
        return;
      }
      if (got.size() != hi - lo) {
        throw BackendError("generate returned " + std::to_string(got.size()) +
                           " items for " + std::to_string(hi - lo) + " seeds");
      }
      for (std::size_t k = lo; k < hi; ++k) {
        auto& item = got[k - lo];
        if (item.seed != seeds[pending[k]]) throw BackendError("generate reordered seeds");
        if (item.error.empty() && !item.image && !item.embedding) {
          item.error = "backend returned neither image nor embedding";
        }
        items[pending[k]] = std::move(item);
      }
    });
  }

  const auto& ref_images = refs.image_embeddings;
  std::vector<std::optional<EmbeddingVector>> embeddings(seeds.size());
  std::vector<EmbedInput> to_embed;
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& out = result.per_seed[i];
    out.seed = seeds[i];
    if (!items[i].ok()) {
      out.error = items[i].error;
      continue;
    }
    if (items[i].image && !result.embeddings_only) {
      const auto path = options.image_dir / result.probe_id / (std::to_string(seeds[i]) + ".png");
      const auto& img = *items[i].image;
      write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(img.data()),
                                               img.size()));
      out.image_ref = path.string();
    }
    if (items[i].embedding) {
      embeddings[i] = std::move(items[i].embedding);
    } else {
      const auto& img = *items[i].image;
      to_embed.push_back({i, std::string(img.begin(), img.end())});
    }
  }
  if (!to_embed.empty()) {
    EmbedOptions eo;
    eo.parallelism = options.parallelism;
    eo.max_retries = options.max_retries;
    const auto report = embed_batch(to_embed, Modality::kImage, backend, eo);
    for (std::size_t r = 0; r < report.matrix.size(); ++r) {
      embeddings[report.matrix.ids()[r]] = report.matrix.vector(r);
    }
    for (const auto& f : report.failures) result.per_seed[f.id].error = f.reason;
  }
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!embeddings[i]) continue;
    if (embeddings[i]->dim() != ref_images.dim()) {
      throw BackendError("generated embedding dimension does not match references");
    }
    result.per_seed[i].sim_to_reference = max_cosine(embeddings[i]->values(), ref_images);
  }

  const auto sims = result.successful_sims();
  if (sims.empty()) {
    throw BackendError("all " + std::to_string(seeds.size()) + " seeds failed (last error: " +
                       result.per_seed.back().error + ")");
  }
  result.buckets = bucketize(sims, options.bucket_edges);
  result.percent_above = percent_above(sims, threshold);
  result.text_similarity = text_similarity(spec.prompt, refs, backend);
  return result;
}

// ---------------------------------------------------------------------------

namespace {

struct DetectJob {
  std::vector<Bytes> images;
};

ObjectPresence run_detection(std::vector<Bytes> images, std::size_t unreadable,
                             BackendClient& detector, std::string_view label,
                             const DetectOptions& options) {
  if (label.empty()) throw UsageError("detection label must be non-empty");
  ObjectPresence p;
  p.label = std::string(label);
  p.failed = unreadable;
  const std::size_t batch = std::max<std::size_t>(options.batch_size, 1);
  const std::size_t n_batches = (images.size() + batch - 1) / batch;
  std::vector<std::vector<DetectItem>> verdicts(n_batches);
  parallel_for(n_batches, options.parallelism, [&](std::size_t b) {
    const std::size_t lo = b * batch;
    const std::size_t hi = std::min(images.size(), lo + batch);
    verdicts[b] = detector.detect(std::span<const Bytes>(images).subspan(lo, hi - lo), label);
    if (verdicts[b].size() != hi - lo) {
      throw BackendError("detector returned a different number of verdicts than images");
    }
  });
  for (const auto& batch_verdicts : verdicts) {
    for (const auto& v : batch_verdicts) {
      if (!v.present) {
        ++p.failed;
        continue;
      }
      ++p.answered;
      if (*v.present) ++p.positives;
    }
  }
  if (p.answered == 0) {
    throw DegenerateInputError("no detection answered for label '" + p.label + "' (" +
                               std::to_string(p.failed) + " failed)");
  }
  p.rate = (100.0 * static_cast<double>(p.positives)) / static_cast<double>(p.answered);
  return p;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& ref) {
  std::filesystem::path p = ref;
  return (p.is_relative() && !base.empty()) ? base / p : p;
}

}  // namespace

ObjectPresence object_presence_rate(const ProbeResult& result, BackendClient& detector,
                                    std::string_view label, const DetectOptions& options) {
  if (result.embeddings_only) {
    throw ModeError("probe '" + result.probe_id +
                    "' ran in embeddings-only mode; re-run it with image persistence "
                    "(--image-dir) to detect objects");
  }
  std::vector<Bytes> images;
  std::size_t unreadable = 0;
  for (const auto& s : result.per_seed) {
    if (!s.sim_to_reference || s.image_ref.empty()) continue;
    try {
      images.push_back(read_bytes(resolve(options.base_dir, s.image_ref)));
    } catch (const IoError&) {
      ++unreadable;
    }
  }
  return run_detection(std::move(images), unreadable, detector, label, options);
}

std::vector<std::size_t> seeded_sample(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k > n) throw UsageError("sample larger than population");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::uint64_t state = seed;
  for (std::size_t i = 0; i < k; ++i) {
    state = splitmix64(state);
    const std::size_t j = i + static_cast<std::size_t>(state % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ObjectPresence baseline_object_rate(const DatasetSlice& slice, std::size_t sample_n,
                                    BackendClient& detector, std::string_view label,
                                    std::uint64_t seed, const DetectOptions& options) {
  if (sample_n == 0) throw UsageError("baseline sample size must be positive");
  std::vector<Bytes> candidates;
  for (const auto* rec : slice.active()) {
    if (!rec->image_ref) continue;
    try {
      candidates.push_back(read_bytes(resolve(options.base_dir, *rec->image_ref)));
    } catch (const IoError&) {
    }
  }
  if (candidates.size() < sample_n) {
    throw DegenerateInputError("baseline needs " + std::to_string(sample_n) +
                               " readable images but only " +
                               std::to_string(candidates.size()) + " are available (short by " +
                               std::to_string(sample_n - candidates.size()) + ")");
  }
  std::vector<Bytes> sample;
  sample.reserve(sample_n);
  for (auto i : seeded_sample(candidates.size(), sample_n, seed)) {
    sample.push_back(std::move(candidates[i]));
  }
  return run_detection(std::move(sample), 0, detector, label, options);
}

std::vector<std::optional<SeedOutcome>> band_exemplars(const ProbeResult& result) {
  const auto& edges = result.buckets.edges;
  std::vector<std::optional<SeedOutcome>> best(edges.size() + 1);
  for (const auto& s : result.per_seed) {
    if (!s.sim_to_reference) continue;
    const double v = *s.sim_to_reference;
    const auto b = static_cast<std::size_t>(
        std::count_if(edges.begin(), edges.end(), [v](double e) { return v > e; }));
    if (!best[b] || v > *best[b]->sim_to_reference) best[b] = s;
  }
  return best;
}

// ---------------------------------------------------------------------------

namespace {

ordered_json presence_json(const ObjectPresence& p) {
  ordered_json j;
  j["label"] = p.label;
  j["rate"] = p.rate;
  j["positives"] = p.positives;
  j["answered"] = p.answered;
  j["failed"] = p.failed;
  return j;
}

}  // namespace

std::string serialize_probe_result(const ProbeResult& r) {
  ordered_json j;
  j["probe_id"] = r.probe_id;
  j["backend_id"] = r.backend_id;
  ordered_json spec;
  spec["prompt"] = r.spec.prompt;
  spec["highlight_keywords"] = r.spec.highlight_keywords;
  spec["n_seeds"] = r.spec.n_seeds;
  spec["base_seed"] = r.spec.base_seed;
  spec["gen_params"] = {{"steps", r.spec.gen_params.steps},
                        {"guidance", r.spec.gen_params.guidance},
                        {"width", r.spec.gen_params.width},
                        {"height", r.spec.gen_params.height}};
  j["spec"] = std::move(spec);
  j["threshold"] = r.threshold;
  j["embeddings_only"] = r.embeddings_only;
  auto per_seed = ordered_json::array();
  for (const auto& s : r.per_seed) {
    ordered_json o;
    o["seed"] = s.seed;
    o["image_ref"] = s.image_ref;
    o["sim_to_reference"] = s.sim_to_reference ? ordered_json(*s.sim_to_reference) : ordered_json();
    if (!s.error.empty()) o["error"] = s.error;
    per_seed.push_back(std::move(o));
  }
  j["per_seed"] = std::move(per_seed);
  j["text_similarity"] = r.text_similarity;
  j["buckets"] = {{"edges", r.buckets.edges}, {"counts", r.buckets.counts}};
  j["percent_above"] = r.percent_above;
  if (r.presence) j["presence"] = presence_json(*r.presence);
  if (r.baseline_rate) j["baseline_rate"] = *r.baseline_rate;
  return j.dump(1) + "\n";
}

ProbeResult parse_probe_result(std::string_view text) {
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw FormatError("probe result is not JSON", 0);
  ProbeResult r;
  try {
    r.probe_id = j.at("probe_id").get<std::string>();
    r.backend_id = j.at("backend_id").get<std::string>();
    const auto& spec = j.at("spec");
    r.spec.prompt = spec.at("prompt").get<std::string>();
    r.spec.highlight_keywords = spec.value("highlight_keywords", std::vector<std::string>{});
    r.spec.n_seeds = spec.at("n_seeds").get<std::size_t>();
    r.spec.base_seed = spec.at("base_seed").get<std::uint64_t>();
    const auto& gp = spec.at("gen_params");
    r.spec.gen_params = {gp.at("steps").get<int>(), gp.at("guidance").get<double>(),
                         gp.at("width").get<int>(), gp.at("height").get<int>()};
    r.threshold = j.at("threshold").get<double>();
    r.embeddings_only = j.value("embeddings_only", false);
    for (const auto& o : j.at("per_seed")) {
      SeedOutcome s;
      s.seed = o.at("seed").get<std::uint64_t>();
      s.image_ref = o.value("image_ref", "");
      if (!o.at("sim_to_reference").is_null()) {
        s.sim_to_reference = o["sim_to_reference"].get<double>();
      }
      s.error = o.value("error", "");
      r.per_seed.push_back(std::move(s));
    }
    r.text_similarity = j.at("text_similarity").get<double>();
    r.buckets.edges = j.at("buckets").at("edges").get<std::vector<double>>();
    r.buckets.counts = j.at("buckets").at("counts").get<std::vector<std::size_t>>();
    r.percent_above = j.at("percent_above").get<double>();
    if (j.contains("presence")) {
      const auto& p = j["presence"];
      r.presence = ObjectPresence{p.at("label").get<std::string>(), p.at("rate").get<double>(),
                                  p.at("positives").get<std::size_t>(),
                                  p.at("answered").get<std::size_t>(),
                                  p.at("failed").get<std::size_t>()};
    }
    if (j.contains("baseline_rate")) r.baseline_rate = j["baseline_rate"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("probe result: ") + e.what(), 0);
  }
  if (r.per_seed.size() != r.spec.n_seeds) {
    throw IntegrityError("probe result lists " + std::to_string(r.per_seed.size()) +
                         " seeds but declares " + std::to_string(r.spec.n_seeds));
  }
  if (r.buckets.total() != r.successful_sims().size()) {
    throw IntegrityError("bucket counts do not sum to the number of successful seeds");
  }
  return r;
}

void save_probe_result(const ProbeResult& r, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_probe_result(r));
}

ProbeResult load_probe_result(const std::filesystem::path& path) {
  return parse_probe_result(read_file(path));
}

}  // namespace dupaudit
