#include "dupaudit/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "dupaudit/errors.hpp"
#include "dupaudit/io.hpp"
#include "dupaudit/parallel.hpp"
#include "dupaudit/text.hpp"

namespace dupaudit {

using nlohmann::ordered_json;

std::string_view to_string(RecordFlag f) {
  switch (f) {
    case RecordFlag::kUrlInvalid: return "url_invalid";
    case RecordFlag::kTooLong: return "too_long";
    case RecordFlag::kExcluded: return "excluded";
  }
  return "?";
}

RecordFlag parse_record_flag(std::string_view s) {
  if (s == "url_invalid") return RecordFlag::kUrlInvalid;
  if (s == "too_long") return RecordFlag::kTooLong;
  if (s == "excluded") return RecordFlag::kExcluded;
  throw IntegrityError("unknown record flag '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

DatasetSlice::DatasetSlice(std::string name, std::vector<CaptionRecord> records,
                           std::vector<std::string> provenance)
    : name_(std::move(name)),
      records_(std::move(records)),
      provenance_(std::move(provenance)) {
  std::stable_sort(records_.begin(), records_.end(),
                   [](const auto& a, const auto& b) { return a.id < b.id; });
  const auto dup = std::adjacent_find(
      records_.begin(), records_.end(),
      [](const auto& a, const auto& b) { return a.id == b.id; });
  if (dup != records_.end()) {
    throw IntegrityError("duplicate record id " + std::to_string(dup->id) +
                         " in slice '" + name_ + "'");
  }
}

std::vector<const CaptionRecord*> DatasetSlice::active() const {
  std::vector<const CaptionRecord*> out;
  for (const auto& r : records_) {
    if (r.active()) out.push_back(&r);
  }
  return out;
}

std::size_t DatasetSlice::active_count() const {
  return static_cast<std::size_t>(std::count_if(
      records_.begin(), records_.end(), [](const auto& r) { return r.active(); }));
}

const CaptionRecord* DatasetSlice::find(std::uint64_t id) const {
  const auto it = std::lower_bound(
      records_.begin(), records_.end(), id,
      [](const CaptionRecord& r, std::uint64_t v) { return r.id < v; });
  return (it != records_.end() && it->id == id) ? &*it : nullptr;
}

DatasetSlice DatasetSlice::derive(std::vector<CaptionRecord> records,
                                  std::string step) const {
  auto provenance = provenance_;
  provenance.push_back(std::move(step));
  return DatasetSlice(name_, std::move(records), std::move(provenance));
}

// ---------------------------------------------------------------------------

bool FilterSpec::matches(std::string_view caption) const {
  if (keywords.empty()) return true;
  const bool want_all = mode == MatchMode::kAll;
  if (unit == MatchUnit::kSubstring) {
    const std::string hay = case_fold ? text::fold_case(caption) : std::string(caption);
    for (const auto& kw : keywords) {
      const std::string needle = case_fold ? text::fold_case(kw) : kw;
      const bool hit = !needle.empty() && hay.find(needle) != std::string::npos;
      if (hit && !want_all) return true;
      if (!hit && want_all) return false;
    }
    return want_all;
  }
  const auto words = text::split_words(caption, case_fold);
  for (const auto& kw : keywords) {
    const bool hit = text::contains_sequence(words, text::split_words(kw, case_fold));
    if (hit && !want_all) return true;
    if (!hit && want_all) return false;
  }
  return want_all;
}

std::string FilterSpec::describe() const {
  if (is_identity()) return "keywords: identity";
  std::ostringstream os;
  os << "keywords[" << (mode == MatchMode::kAll ? "all" : "any") << ','
     << (unit == MatchUnit::kWord ? "word" : "substring") << ','
     << (case_fold ? "fold" : "exact") << "]: ";
  for (std::size_t i = 0; i < keywords.size(); ++i) {
    if (i) os << ", ";
    os << keywords[i];
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Loading.

MetadataFormat parse_metadata_format(std::string_view tag) {
  if (tag == "tsv") return MetadataFormat::kTsv;
  if (tag == "jsonl") return MetadataFormat::kJsonl;
  throw UsageError("unknown metadata format '" + std::string(tag) +
                   "' (expected tsv or jsonl)");
}

namespace {

struct RawRow {
  std::optional<std::uint64_t> id;
  std::string caption;
  std::string url;
  std::optional<std::string> image_path;
};

std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    cols.emplace_back(line.substr(start, tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return cols;
}

std::optional<std::uint64_t> parse_u64(std::string_view s) {
  s = text::trim(s);
  if (s.empty() || s.size() > 20) return std::nullopt;
  std::uint64_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    const std::uint64_t d = static_cast<std::uint64_t>(c - '0');
    if (v > (UINT64_MAX - d) / 10) return std::nullopt;
    v = v * 10 + d;
  }
  return v;
}

struct TsvLayout {
  int caption = 0;
  int url = 1;
  int image_path = 2;
  int id = -1;
};

std::optional<TsvLayout> detect_tsv_header(const std::vector<std::string>& cols) {
  TsvLayout layout{-1, -1, -1, -1};
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const auto name = text::fold_case(text::trim(cols[i]));
    const int idx = static_cast<int>(i);
    if (name == "caption") layout.caption = idx;
    else if (name == "url") layout.url = idx;
    else if (name == "image_path") layout.image_path = idx;
    else if (name == "id") layout.id = idx;
  }
  if (layout.caption < 0 || layout.url < 0) return std::nullopt;
  return layout;
}

std::optional<RawRow> parse_tsv_row(const std::vector<std::string>& cols,
                                    const TsvLayout& layout) {
  auto col = [&](int i) -> const std::string* {
    return (i >= 0 && static_cast<std::size_t>(i) < cols.size()) ? &cols[i] : nullptr;
  };
  const auto* caption = col(layout.caption);
  const auto* url = col(layout.url);
  if (!caption || !url) return std::nullopt;
  RawRow row;
  row.caption = std::string(text::trim(*caption));
  row.url = std::string(text::trim(*url));
  if (const auto* p = col(layout.image_path); p && !text::trim(*p).empty()) {
    row.image_path = std::string(text::trim(*p));
  }
  if (layout.id >= 0) {
    const auto* id = col(layout.id);
    if (!id) return std::nullopt;
    row.id = parse_u64(*id);
    if (!row.id) return std::nullopt;
  }
  return row;
}

std::optional<RawRow> parse_jsonl_row(std::string_view line, bool expect_id) {
  const auto j = ordered_json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (!j.is_object()) return std::nullopt;
  const auto caption = j.find("caption");
  const auto url = j.find("url");
  if (caption == j.end() || url == j.end() || !caption->is_string() ||
      !url->is_string()) {
    return std::nullopt;
  }
  RawRow row;
  row.caption = std::string(text::trim(caption->get<std::string>()));
  row.url = std::string(text::trim(url->get<std::string>()));
  if (const auto p = j.find("image_path"); p != j.end() && p->is_string() &&
                                           !p->get<std::string>().empty()) {
    row.image_path = p->get<std::string>();
  }
  if (expect_id) {
    const auto id = j.find("id");
    if (id == j.end() || !id->is_number_unsigned()) return std::nullopt;
    row.id = id->get<std::uint64_t>();
  }
  return row;
}

bool jsonl_declares_id(std::string_view line) {
  const auto j = ordered_json::parse(line, nullptr, false);
  return j.is_object() && j.contains("id");
}

}  // namespace

LoadedSlice load_metadata(const std::filesystem::path& path, MetadataFormat format) {
  const std::string contents = read_file(path);
  std::vector<std::string_view> lines;
  {
    std::string_view rest = contents;
    while (!rest.empty()) {
      const auto nl = rest.find('\n');
      auto line = rest.substr(0, nl);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (!text::trim(line).empty()) lines.push_back(line);
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
  }

  std::vector<RawRow> rows;
  std::size_t skipped = 0;
  bool has_ids = false;
  if (format == MetadataFormat::kTsv) {
    TsvLayout layout;
    std::size_t first = 0;
    if (!lines.empty()) {
      if (auto header = detect_tsv_header(split_tabs(lines.front()))) {
        layout = *header;
        first = 1;
      }
    }
    has_ids = layout.id >= 0;
    for (std::size_t i = first; i < lines.size(); ++i) {
      auto row = parse_tsv_row(split_tabs(lines[i]), layout);
      if (row) rows.push_back(std::move(*row));
      else ++skipped;
    }
  } else {
    has_ids = !lines.empty() && jsonl_declares_id(lines.front());
    for (const auto line : lines) {
      auto row = parse_jsonl_row(line, has_ids);
      if (row) rows.push_back(std::move(*row));
      else ++skipped;
    }
  }

  std::vector<CaptionRecord> records;
  std::set<std::uint64_t> seen;
  for (auto& row : rows) {
    if (row.caption.empty() || row.url.empty()) {
      ++skipped;
      continue;
    }
    CaptionRecord rec;
    if (has_ids) {
      if (!seen.insert(*row.id).second) {
        ++skipped;
        continue;
      }
      rec.id = *row.id;
    } else {
      rec.id = records.size();
    }
    rec.caption = std::move(row.caption);
    rec.image_url = std::move(row.url);
    rec.image_ref = std::move(row.image_path);
    records.push_back(std::move(rec));
  }
  if (records.empty()) {
    throw EmptyInputError("no parsable rows in " + path.string() + " (" +
                          std::to_string(skipped) + " malformed)");
  }
  LoadedSlice out;
  out.slice = DatasetSlice(path.stem().string(), std::move(records));
  out.skipped = skipped;
  return out;
}

// ---------------------------------------------------------------------------
// Persistence.

std::string serialize_slice(const DatasetSlice& slice) {
  std::string out;
  ordered_json header;
  header["name"] = slice.name();
  header["provenance"] = slice.provenance();
  out += header.dump();
  out += '\n';
  for (const auto& r : slice.records()) {
    ordered_json j;
    j["id"] = r.id;
    j["caption"] = r.caption;
    j["url"] = r.image_url;
    if (r.image_ref) j["image_ref"] = *r.image_ref;
    auto flags = ordered_json::array();
    for (auto f : r.flags) flags.push_back(std::string(to_string(f)));
    j["flags"] = std::move(flags);
    out += j.dump();
    out += '\n';
  }
  return out;
}

DatasetSlice parse_slice(std::string_view contents) {
  std::size_t offset = 0;
  std::size_t line_no = 0;
  std::optional<ordered_json> header;
  std::vector<CaptionRecord> records;
  while (offset < contents.size()) {
    auto nl = contents.find('\n', offset);
    if (nl == std::string_view::npos) nl = contents.size();
    const auto line = contents.substr(offset, nl - offset);
    const std::size_t line_start = offset;
    offset = nl + 1;
    ++line_no;
    if (text::trim(line).empty()) continue;
    auto j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw FormatError("slice line " + std::to_string(line_no) + " is not a JSON object",
                        line_start);
    }
    try {
      if (!header) {
        if (!j.contains("name") || !j.contains("provenance")) {
          throw FormatError("slice header must carry name and provenance", line_start);
        }
        header = std::move(j);
        continue;
      }
      CaptionRecord r;
      r.id = j.at("id").get<std::uint64_t>();
      r.caption = j.at("caption").get<std::string>();
      r.image_url = j.at("url").get<std::string>();
      if (j.contains("image_ref")) r.image_ref = j["image_ref"].get<std::string>();
      for (const auto& f : j.at("flags")) r.flags.insert(parse_record_flag(f.get<std::string>()));
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("slice line " + std::to_string(line_no) + ": " + e.what(),
                        line_start);
    }
  }
  if (!header) throw FormatError("slice file has no header line", 0);
  const auto& h = *header;
  DatasetSlice slice(h.at("name").get<std::string>(), std::move(records),
                     h.at("provenance").get<std::vector<std::string>>());
  return slice;
}

void save_slice(const DatasetSlice& slice, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_slice(slice));
}

DatasetSlice load_slice(const std::filesystem::path& path) {
  return parse_slice(read_file(path));
}

// ---------------------------------------------------------------------------
// Filters.

DatasetSlice filter_by_keywords(const DatasetSlice& slice, const FilterSpec& spec) {
  std::vector<CaptionRecord> kept;
  for (const auto& r : slice.records()) {
    if (spec.matches(r.caption)) kept.push_back(r);
  }
  return slice.derive(std::move(kept), spec.describe());
}

std::vector<std::optional<std::size_t>> WhitespaceTokenizer::count(
    std::span<const std::string> texts) {
  std::vector<std::optional<std::size_t>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) {
    std::size_t n = 0;
    bool in_token = false;
    for (char c : t) {
      const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r' ||
                         c == '\f' || c == '\v';
      if (!space && !in_token) ++n;
      in_token = !space;
    }
    out.push_back(n);
  }
  return out;
}

DatasetSlice token_length_filter(const DatasetSlice& slice, Tokenizer& tokenizer,
                                 std::size_t max_tokens) {
  std::vector<CaptionRecord> records = slice.records();
  std::vector<std::size_t> idx;
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].active()) continue;
    idx.push_back(i);
    texts.push_back(records[i].caption);
  }
  std::size_t failures = 0;
  if (!texts.empty()) {
    const auto counts = tokenizer.count(texts);
    if (counts.size() != texts.size()) {
      throw BackendError("tokenizer '" + tokenizer.name() + "' returned " +
                         std::to_string(counts.size()) + " counts for " +
                         std::to_string(texts.size()) + " texts");
    }
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto& rec = records[idx[k]];
      if (!counts[k]) {
        rec.flags.insert(RecordFlag::kExcluded);
        ++failures;
      } else if (*counts[k] > max_tokens) {
        rec.flags.insert(RecordFlag::kTooLong);
      }
    }
    if (failures == texts.size()) {
      throw BackendError("tokenizer '" + tokenizer.name() + "' failed on all " +
                         std::to_string(failures) + " captions");
    }
  }
  return slice.derive(std::move(records),
                      "max_tokens: " + std::to_string(max_tokens) + " (" +
                          tokenizer.name() + ")");
}

// ---------------------------------------------------------------------------
// URLs.

UrlPolicy parse_url_policy(std::string_view tag) {
  if (tag == "offline" || tag == "offline_syntactic") return UrlPolicy::kOfflineSyntactic;
  if (tag == "head" || tag == "network_head") return UrlPolicy::kNetworkHead;
  throw UsageError("unknown url policy '" + std::string(tag) +
                   "' (expected offline or head)");
}

bool is_syntactically_valid_url(std::string_view url) {
  for (char c : url) {
    const auto u = static_cast<unsigned char>(c);
    if (u <= 0x20 || u == 0x7F) return false;
  }
  const auto sep = url.find("://");
  if (sep == std::string_view::npos || sep == 0) return false;
  const auto scheme = url.substr(0, sep);
  auto alpha = [](char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); };
  auto digit = [](char c) { return c >= '0' && c <= '9'; };
  if (!alpha(scheme.front())) return false;
  for (char c : scheme) {
    if (!alpha(c) && !digit(c) && c != '+' && c != '-' && c != '.') return false;
  }
  auto authority = url.substr(sep + 3);
  authority = authority.substr(0, authority.find_first_of("/?#"));
  if (const auto at = authority.rfind('@'); at != std::string_view::npos) {
    authority.remove_prefix(at + 1);
  }
  std::string_view host = authority;
  std::string_view port;
  if (!host.empty() && host.front() == '[') {
    const auto close = host.find(']');
    if (close == std::string_view::npos || close == 1) return false;
    for (char c : host.substr(1, close - 1)) {
      if (!digit(c) && !(c >= 'a' && c <= 'f') && !(c >= 'A' && c <= 'F') &&
          c != ':' && c != '.') {
        return false;
      }
    }
    const auto rest = host.substr(close + 1);
    if (!rest.empty()) {
      if (rest.front() != ':') return false;
      port = rest.substr(1);
      if (port.empty()) return false;
    }
    host = host.substr(0, close + 1);
  } else {
    if (const auto colon = host.rfind(':'); colon != std::string_view::npos) {
      port = host.substr(colon + 1);
      host = host.substr(0, colon);
      if (port.empty()) return false;
    }
    if (host.empty() || host.front() == '.' || host.back() == '.' ||
        host.front() == '-') {
      return false;
    }
    bool any_alnum = false;
    for (char c : host) {
      const auto u = static_cast<unsigned char>(c);
      if (alpha(c) || digit(c) || u >= 0x80) {
        any_alnum = true;
      } else if (c != '-' && c != '.' && c != '_' && c != '~' && c != '%') {
        return false;
      }
    }
    if (!any_alnum || host.find("..") != std::string_view::npos) return false;
  }
  if (!port.empty()) {
    if (port.size() > 5) return false;
    unsigned value = 0;
    for (char c : port) {
      if (!digit(c)) return false;
      value = value * 10 + static_cast<unsigned>(c - '0');
    }
    if (value > 65535) return false;
  }
  return true;
}

DatasetSlice validate_urls(const DatasetSlice& slice, UrlPolicy policy,
                           UrlProber* prober, const UrlCheckOptions& options) {
  std::vector<CaptionRecord> records = slice.records();
  std::vector<std::size_t> to_probe;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& rec = records[i];
    if (!rec.active()) continue;
    if (!is_syntactically_valid_url(rec.image_url)) {
      rec.flags.insert(RecordFlag::kUrlInvalid);
    } else if (policy == UrlPolicy::kNetworkHead) {
      to_probe.push_back(i);
    }
  }
  std::string step = "urls: offline_syntactic";
  if (policy == UrlPolicy::kNetworkHead) {
    if (!prober) throw UsageError("network_head url policy needs a prober");
    std::vector<std::optional<int>> status(to_probe.size());
    parallel_for(to_probe.size(), options.parallelism, [&](std::size_t k) {
      status[k] = prober->head(records[to_probe[k]].image_url);
    });
    const auto unreachable = static_cast<std::size_t>(
        std::count(status.begin(), status.end(), std::nullopt));
    if (!to_probe.empty() && unreachable == to_probe.size()) {
      throw BackendError("network unavailable: " + std::to_string(unreachable) +
                         " of " + std::to_string(to_probe.size()) +
                         " urls unreachable");
    }
    for (std::size_t k = 0; k < to_probe.size(); ++k) {
      const bool ok = status[k] && *status[k] >= 200 && *status[k] < 400;
      if (!ok) records[to_probe[k]].flags.insert(RecordFlag::kUrlInvalid);
    }
    step = "urls: network_head (" + std::to_string(unreachable) + " unreachable)";
  }
  return slice.derive(std::move(records), std::move(step));
}

}  // namespace dupaudit
