#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dupaudit/dataset.hpp"
#include "dupaudit/embedding.hpp"
#include "dupaudit/text.hpp"

namespace dupaudit {

inline constexpr double kDefaultTau = 0.9;

using WordCount = std::pair<std::string, std::uint64_t>;

struct Cluster {
  int cluster_id = 0;
  std::vector<std::uint64_t> member_ids;  // ascending
  std::uint64_t leader_id = 0;
  // Mean cosine over all unordered member pairs; 1 for singletons.
  double coherence = 1.0;
  std::vector<WordCount> keyword_freqs;

  std::size_t size() const { return member_ids.size(); }
  bool operator==(const Cluster&) const = default;
};

struct ClusteringSource {
  std::string backend_id;
  std::string slice_name;
  bool operator==(const ClusteringSource&) const = default;
};

struct Clustering {
  double tau = kDefaultTau;
  std::vector<Cluster> clusters;  // rank order, cluster_id == index
  std::vector<int> omitted_ids;   // ascending
  ClusteringSource source;

  bool is_omitted(int cluster_id) const;
  std::size_t record_count() const;
  std::size_t record_count_non_omitted() const;
  const Cluster* cluster_of(std::uint64_t record_id) const;

  // Throws InvariantError when members are unsorted or shared between
  // clusters, a leader is not a member, or ids are not dense in rank order.
  void validate() const;

  bool operator==(const Clustering&) const = default;
};

// Greedy leader clustering in ascending id order: each vector joins the
// existing cluster whose leader is most similar among those with
// similarity >= tau (ties: earliest cluster), else founds a new cluster.
// Output is ranked (see rank_clusters). Throws EmptyInputError on an empty
// matrix and UsageError for tau outside (0, 1].
Clustering cluster_embeddings(const EmbeddingMatrix& m, double tau = kDefaultTau);

// Size descending, ties by smallest member id; ids reassigned densely and
// omitted ids remapped.
Clustering rank_clusters(Clustering c);

struct ManualNoise {
  std::vector<int> cluster_ids;
};
struct CoherenceBelow {
  double threshold = 0.0;
};
using NoiseMode = std::variant<ManualNoise, CoherenceBelow>;

// Adds clusters to omitted_ids. Unknown ids throw UsageError.
Clustering mark_noise(Clustering c, const NoiseMode& mode);

// Top-k words over member captions, by total occurrences, ties
// lexicographic. Throws IntegrityError when a member is missing from `slice`.
std::vector<WordCount> frequent_words(const Cluster& cluster, const DatasetSlice& slice,
                                      const text::StopwordSet& stopwords, std::size_t k);

enum class ShareDenominator { kAll, kNonOmitted };
ShareDenominator parse_share_denominator(std::string_view tag);

// Fraction of records whose cluster leader has cosine >= tau_ref to
// `reference`. With kNonOmitted, omitted clusters count in neither numerator
// nor denominator. `leaders` must hold every leader id.
double cluster_share(const Clustering& c, const EmbeddingMatrix& leaders,
                     const EmbeddingVector& reference, double tau_ref,
                     ShareDenominator denominator);

struct DistributionRow {
  std::size_t rank = 0;  // 1-based among reported clusters
  std::size_t size = 0;
  bool matches_reference = false;
  bool operator==(const DistributionRow&) const = default;
};

struct ReferenceMatch {
  const EmbeddingMatrix* leaders = nullptr;
  EmbeddingVector reference;
  double tau_ref = 0.85;
};

// Top-n non-omitted clusters in rank order. Without a reference every flag is
// false.
std::vector<DistributionRow> size_distribution(
    const Clustering& c, std::size_t top_n = 30,
    const std::optional<ReferenceMatch>& reference = std::nullopt);

// JSON: {tau, omitted_ids, source, clusters: [{cluster_id, leader_id,
// member_ids, coherence}]}.
std::string serialize_clustering(const Clustering& c);
Clustering parse_clustering(std::string_view json);
void save_clustering(const Clustering& c, const std::filesystem::path& path);
Clustering load_clustering(const std::filesystem::path& path);

}  // namespace dupaudit
