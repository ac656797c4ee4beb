#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dupaudit {

enum class RecordFlag { kUrlInvalid, kTooLong, kExcluded };

std::string_view to_string(RecordFlag f);
RecordFlag parse_record_flag(std::string_view s);

struct CaptionRecord {
  std::uint64_t id = 0;
  std::string caption;
  std::string image_url;
  std::optional<std::string> image_ref;
  std::set<RecordFlag> flags;

  // A record is active while it carries no flag.
  bool active() const { return flags.empty(); }
  bool operator==(const CaptionRecord&) const = default;
};

// Immutable, id-sorted collection of records plus the history of filters that
// produced it. Flagged records stay in `records()` so that the reason for their
// removal is persisted; `active()` is what downstream stages consume.
class DatasetSlice {
 public:
  DatasetSlice() = default;
  // Sorts by id. Throws IntegrityError on duplicate ids.
  DatasetSlice(std::string name, std::vector<CaptionRecord> records,
               std::vector<std::string> provenance = {});

  const std::string& name() const { return name_; }
  const std::vector<CaptionRecord>& records() const { return records_; }
  const std::vector<std::string>& provenance() const { return provenance_; }

  std::vector<const CaptionRecord*> active() const;
  std::size_t active_count() const;
  const CaptionRecord* find(std::uint64_t id) const;

  // New slice with `records` and this slice's provenance plus `step`.
  DatasetSlice derive(std::vector<CaptionRecord> records, std::string step) const;

  bool operator==(const DatasetSlice&) const = default;

 private:
  std::string name_;
  std::vector<CaptionRecord> records_;
  std::vector<std::string> provenance_;
};

enum class MatchMode { kAll, kAny };
enum class MatchUnit { kWord, kSubstring };

struct FilterSpec {
  std::vector<std::string> keywords;
  MatchMode mode = MatchMode::kAll;
  bool case_fold = true;
  MatchUnit unit = MatchUnit::kWord;

  bool is_identity() const { return keywords.empty(); }
  bool matches(std::string_view caption) const;
  std::string describe() const;
};

// ---------------------------------------------------------------------------
// Loading and persistence.

enum class MetadataFormat { kTsv, kJsonl };
MetadataFormat parse_metadata_format(std::string_view tag);

struct LoadedSlice {
  DatasetSlice slice;
  std::size_t skipped = 0;  // malformed rows
};

// TSV rows are `caption<TAB>url[<TAB>image_path]`, or follow a header line
// naming the columns (caption, url, id, image_path). JSON-lines rows are
// objects with string keys caption/url and optional id/image_path.
// Ids come from the file when it declares an id column (first row for
// JSON-lines); otherwise they are 0..n-1 over parsed rows in file order.
LoadedSlice load_metadata(const std::filesystem::path& path, MetadataFormat format);

// JSON-lines: a header object {name, provenance[]} followed by one object per
// record {id, caption, url, image_ref?, flags[]}.
std::string serialize_slice(const DatasetSlice& slice);
DatasetSlice parse_slice(std::string_view contents);
void save_slice(const DatasetSlice& slice, const std::filesystem::path& path);
DatasetSlice load_slice(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Filters. Every filter appends exactly one provenance entry.

DatasetSlice filter_by_keywords(const DatasetSlice& slice, const FilterSpec& spec);

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  // One count per text; nullopt marks a per-text failure. Throws BackendError
  // when the tokenizer is unavailable as a whole.
  virtual std::vector<std::optional<std::size_t>> count(
      std::span<const std::string> texts) = 0;
  virtual std::string name() const = 0;
};

class WhitespaceTokenizer final : public Tokenizer {
 public:
  std::vector<std::optional<std::size_t>> count(
      std::span<const std::string> texts) override;
  std::string name() const override { return "whitespace"; }
};

inline constexpr std::size_t kDefaultMaxTokens = 77;

DatasetSlice token_length_filter(const DatasetSlice& slice, Tokenizer& tokenizer,
                                 std::size_t max_tokens = kDefaultMaxTokens);

enum class UrlPolicy { kOfflineSyntactic, kNetworkHead };
UrlPolicy parse_url_policy(std::string_view tag);

// scheme "://" host [":" port] [path...]; no whitespace or control bytes.
bool is_syntactically_valid_url(std::string_view url);

class UrlProber {
 public:
  virtual ~UrlProber() = default;
  // HTTP status of a HEAD request, or nullopt when no response arrived.
  virtual std::optional<int> head(const std::string& url) = 0;
};

struct UrlCheckOptions {
  std::chrono::milliseconds timeout{5000};
  std::size_t parallelism = 8;
};

std::unique_ptr<UrlProber> make_http_url_prober(const UrlCheckOptions& options);

// In network mode `prober` must be non-null. Probing runs with bounded
// concurrency; flags are committed in id order.
DatasetSlice validate_urls(const DatasetSlice& slice, UrlPolicy policy,
                           UrlProber* prober = nullptr,
                           const UrlCheckOptions& options = {});

}  // namespace dupaudit
