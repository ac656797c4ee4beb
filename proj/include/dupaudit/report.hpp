#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dupaudit/cluster.hpp"
#include "dupaudit/dataset.hpp"
#include "dupaudit/probe.hpp"
#include "dupaudit/text.hpp"

namespace dupaudit {

enum class TableFormat { kText, kCsv, kMarkdown };
TableFormat parse_table_format(std::string_view tag);
std::string_view extension_for(TableFormat f);

// Fixed number formatting: similarities to 4 decimals, percentages to 1.
std::string format_similarity(double v);
std::string format_percent(double v);

struct ClusterTableRow {
  int cluster_id = 0;
  std::size_t size = 0;
  std::vector<WordCount> words;
  bool operator==(const ClusterTableRow&) const = default;
};

struct ClusterTableMeta {
  double tau = kDefaultTau;
  std::string backend_id;
  std::string slice_name;
};

// One row per non-omitted cluster among the first `top_clusters` reported
// ones. Missing members throw IntegrityError.
std::vector<ClusterTableRow> cluster_table_rows(const Clustering& c, const DatasetSlice& slice,
                                                std::size_t top_clusters, std::size_t top_k_words,
                                                const text::StopwordSet& stopwords);

std::string render_cluster_table(const std::vector<ClusterTableRow>& rows,
                                 const ClusterTableMeta& meta, TableFormat format);

std::string emit_cluster_table(const Clustering& c, const DatasetSlice& slice,
                               std::size_t top_clusters, std::size_t top_k_words,
                               TableFormat format,
                               const text::StopwordSet& stopwords = text::builtin_stopwords());

// CSV: rank,size,matches_reference.
std::string emit_distribution(const std::vector<DistributionRow>& rows);
std::string emit_distribution(const Clustering& c, std::size_t top_n = 30,
                              const std::optional<ReferenceMatch>& reference = std::nullopt);

struct ProbeRow {
  std::string probe_id;
  std::string prompt;
  std::vector<std::string> highlight_keywords;
  double text_similarity = 0.0;
  double percent_above = 0.0;
  double threshold = 0.0;
  std::size_t n_seeds = 0;
  std::size_t failed = 0;
  SimilarityBuckets buckets;
  std::optional<ObjectPresence> presence;
  std::optional<double> baseline_rate;
  std::vector<std::optional<SeedOutcome>> exemplars;  // one per bucket
};

ProbeRow probe_row(const ProbeResult& r);

// Throws UsageError when the results come from different backends.
std::string emit_probe_table(const std::vector<ProbeResult>& results, TableFormat format);

// Wraps each prompt word whose folded form is a highlight keyword in `**`.
std::string highlight(std::string_view prompt, const std::vector<std::string>& keywords);

struct ReportMetadata {
  double tau = kDefaultTau;
  std::string backend_id;
  std::string slice_name;
  std::string generated_at;  // ISO-8601 UTC
  std::vector<std::string> artifacts;
};

struct ReportBundle {
  std::vector<ClusterTableRow> cluster_table;
  std::vector<DistributionRow> distribution;
  std::vector<ProbeResult> probes;
  ReportMetadata metadata;
};

// SOURCE_DATE_EPOCH when set, else the current time.
std::string report_timestamp();

// Writes cluster_table.<ext>, distribution.csv, probe_table.<ext> and
// report.json into `dir`. Returns the written paths.
std::vector<std::filesystem::path> write_report_bundle(const ReportBundle& bundle,
                                                       const std::filesystem::path& dir,
                                                       TableFormat format);

std::string serialize_report_metadata(const ReportBundle& bundle);

// RFC 4180 reader; lines starting with '#' outside quotes are skipped.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);
std::string csv_field(std::string_view s);

}  // namespace dupaudit
