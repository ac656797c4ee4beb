#include "dupaudit/report.hpp"

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <set>

#include <json.hpp>

#include "dupaudit/errors.hpp"
#include "dupaudit/io.hpp"

namespace dupaudit {

using nlohmann::ordered_json;

TableFormat parse_table_format(std::string_view tag) {
  if (tag == "text" || tag == "txt") return TableFormat::kText;
  if (tag == "csv") return TableFormat::kCsv;
  if (tag == "markdown" || tag == "md") return TableFormat::kMarkdown;
  throw UsageError("unknown report format '" + std::string(tag) +
                   "' (expected text, csv or markdown)");
}

std::string_view extension_for(TableFormat f) {
  switch (f) {
    case TableFormat::kText: return "txt";
    case TableFormat::kCsv: return "csv";
    case TableFormat::kMarkdown: return "md";
  }
  return "txt";
}

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  // -0.0000 and friends
  if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

std::string md_cell(std::string_view s) {
  std::string out;
  for (char ch : s) {
    if (ch == '|') out += '\\';
    if (ch == '\n' || ch == '\r') {
      out += ' ';
      continue;
    }
    out += ch;
  }
  return out;
}

std::string words_cell(const std::vector<WordCount>& words) {
  std::string out;
  for (const auto& [w, n] : words) {
    if (!out.empty()) out += ", ";
    out += w + ": " + std::to_string(n);
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string csv_line(const std::vector<std::string>& fields) {
  std::vector<std::string> esc;
  esc.reserve(fields.size());
  for (const auto& f : fields) esc.push_back(csv_field(f));
  return join(esc, ",") + "\n";
}

std::string md_row(const std::vector<std::string>& cells) {
  return "| " + join(cells, " | ") + " |\n";
}

}  // namespace

std::string format_similarity(double v) { return fixed(v, 4); }
std::string format_percent(double v) { return fixed(v, 1); }

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos && (s.empty() || s.front() != '#')) {
    return std::string(s);
  }
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '#') {
      const auto nl = text.find('\n', i);
      i = nl == std::string_view::npos ? text.size() : nl + 1;
      continue;
    }
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool done = false;
    while (!done) {
      if (i >= text.size()) {
        if (quoted) throw FormatError("unterminated quoted csv field", i);
        row.push_back(std::move(field));
        done = true;
        break;
      }
      const char ch = text[i++];
      if (quoted) {
        if (ch == '"') {
          if (i < text.size() && text[i] == '"') {
            field += '"';
            ++i;
          } else {
            quoted = false;
          }
        } else {
          field += ch;
        }
      } else if (ch == '"' && field.empty()) {
        quoted = true;
      } else if (ch == ',') {
        row.push_back(std::move(field));
        field.clear();
      } else if (ch == '\n') {
        if (!field.empty() && field.back() == '\r') field.pop_back();
        row.push_back(std::move(field));
        done = true;
      } else {
        field += ch;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------

std::vector<ClusterTableRow> cluster_table_rows(const Clustering& c, const DatasetSlice& slice,
                                                std::size_t top_clusters, std::size_t top_k_words,
                                                const text::StopwordSet& stopwords) {
  std::vector<ClusterTableRow> rows;
  for (const auto& cl : c.clusters) {
    if (rows.size() >= top_clusters) break;
    if (c.is_omitted(cl.cluster_id)) continue;
    rows.push_back({cl.cluster_id, cl.size(), frequent_words(cl, slice, stopwords, top_k_words)});
  }
  return rows;
}

std::string render_cluster_table(const std::vector<ClusterTableRow>& rows,
                                 const ClusterTableMeta& meta, TableFormat format) {
  const std::string info = "tau " + format_similarity(meta.tau) + ", backend " +
                           meta.backend_id + ", slice " + meta.slice_name;
  std::string out;
  switch (format) {
    case TableFormat::kText:
      out = "# " + info + "\nCluster ID & Keywords with Frequencies\n";
      for (const auto& r : rows) {
        out += std::to_string(r.cluster_id) + " & " + words_cell(r.words) + "\n";
      }
      break;
    case TableFormat::kCsv:
      out = "# " + info + "\n" + csv_line({"cluster_id", "size", "keywords"});
      for (const auto& r : rows) {
        out += csv_line({std::to_string(r.cluster_id), std::to_string(r.size), words_cell(r.words)});
      }
      break;
    case TableFormat::kMarkdown:
      out = md_cell(info) + "\n\n" + md_row({"Cluster ID", "Size", "Keywords with Frequencies"}) +
            "|---:|---:|---|\n";
      for (const auto& r : rows) {
        out += md_row({std::to_string(r.cluster_id), std::to_string(r.size),
                       md_cell(words_cell(r.words))});
      }
      break;
  }
  return out;
}

std::string emit_cluster_table(const Clustering& c, const DatasetSlice& slice,
                               std::size_t top_clusters, std::size_t top_k_words,
                               TableFormat format, const text::StopwordSet& stopwords) {
  return render_cluster_table(cluster_table_rows(c, slice, top_clusters, top_k_words, stopwords),
                              {c.tau, c.source.backend_id, c.source.slice_name}, format);
}

std::string emit_distribution(const std::vector<DistributionRow>& rows) {
  std::string out = "rank,size,matches_reference\n";
  for (const auto& r : rows) {
    out += std::to_string(r.rank) + "," + std::to_string(r.size) + "," +
           (r.matches_reference ? "true" : "false") + "\n";
  }
  return out;
}

std::string emit_distribution(const Clustering& c, std::size_t top_n,
                              const std::optional<ReferenceMatch>& reference) {
  return emit_distribution(size_distribution(c, top_n, reference));
}

// ---------------------------------------------------------------------------

ProbeRow probe_row(const ProbeResult& r) {
  ProbeRow row;
  row.probe_id = r.probe_id;
  row.prompt = r.spec.prompt;
  row.highlight_keywords = r.spec.highlight_keywords;
  row.text_similarity = r.text_similarity;
  row.percent_above = r.percent_above;
  row.threshold = r.threshold;
  row.n_seeds = r.spec.n_seeds;
  row.failed = r.failed_seeds();
  row.buckets = r.buckets;
  row.presence = r.presence;
  row.baseline_rate = r.baseline_rate;
  row.exemplars = band_exemplars(r);
  return row;
}

std::string highlight(std::string_view prompt, const std::vector<std::string>& keywords) {
  std::set<std::string> wanted;
  for (const auto& k : keywords) {
    for (auto& w : text::split_words(k)) wanted.insert(std::move(w));
  }
  auto is_word_byte = [](unsigned char ch) {
    return ch >= 0x80 || (ch >= '0' && ch <= '9') || (ch >= 'a' && ch <= 'z') ||
           (ch >= 'A' && ch <= 'Z');
  };
  std::string out;
  std::size_t i = 0;
  while (i < prompt.size()) {
    if (!is_word_byte(static_cast<unsigned char>(prompt[i]))) {
      out += prompt[i++];
      continue;
    }
    std::size_t j = i;
    while (j < prompt.size() && is_word_byte(static_cast<unsigned char>(prompt[j]))) ++j;
    const auto run = prompt.substr(i, j - i);
    const auto folded = text::split_words(run);
    if (folded.size() == 1 && wanted.count(folded[0])) {
      out += "**";
      out += run;
      out += "**";
    } else {
      out += run;
    }
    i = j;
  }
  return out;
}

namespace {

std::vector<std::string> bucket_labels(const std::vector<double>& edges) {
  std::vector<std::string> labels;
  if (edges.empty()) return {"all"};
  labels.push_back("<=" + format_similarity(edges.front()));
  for (std::size_t i = 1; i < edges.size(); ++i) {
    labels.push_back(format_similarity(edges[i - 1]) + "-" + format_similarity(edges[i]));
  }
  labels.push_back(">" + format_similarity(edges.back()));
  return labels;
}

std::string counts_cell(const SimilarityBuckets& b, std::string_view sep) {
  std::vector<std::string> parts;
  for (auto n : b.counts) parts.push_back(std::to_string(n));
  return join(parts, sep);
}

std::string edges_cell(const SimilarityBuckets& b) {
  std::vector<std::string> parts;
  for (auto e : b.edges) parts.push_back(format_similarity(e));
  return join(parts, ";");
}

struct ProbeColumns {
  std::optional<double> common_threshold;
  bool mixed_threshold = false;
  bool presence = false;
  std::string presence_label;
  bool baseline = false;
  bool failed = false;
  std::optional<std::vector<double>> common_edges;
};

ProbeColumns probe_columns(const std::vector<ProbeRow>& rows) {
  ProbeColumns cols;
  std::set<std::string> labels;
  bool edges_differ = false;
  for (const auto& r : rows) {
    if (!cols.common_threshold) cols.common_threshold = r.threshold;
    else if (*cols.common_threshold != r.threshold) cols.mixed_threshold = true;
    if (!cols.common_edges) cols.common_edges = r.buckets.edges;
    else if (*cols.common_edges != r.buckets.edges) edges_differ = true;
    if (r.presence) {
      cols.presence = true;
      labels.insert(r.presence->label);
    }
    cols.baseline = cols.baseline || r.baseline_rate.has_value();
    cols.failed = cols.failed || r.failed > 0;
  }
  if (edges_differ) cols.common_edges.reset();
  cols.presence_label = labels.size() == 1 ? *labels.begin() : std::string("Object");
  return cols;
}

std::string threshold_header(const ProbeColumns& cols) {
  if (cols.common_threshold && !cols.mixed_threshold) {
    return "Image Sim > " + fixed(*cols.common_threshold, 2) + " (%)";
  }
  return "Image Sim > threshold (%)";
}

std::string optional_percent(const std::optional<double>& v, bool with_sign) {
  if (!v) return "-";
  return format_percent(*v) + (with_sign ? "%" : "");
}

std::optional<double> presence_rate(const ProbeRow& r) {
  if (!r.presence) return std::nullopt;
  return r.presence->rate;
}

}  // namespace

std::string emit_probe_table(const std::vector<ProbeResult>& results, TableFormat format) {
  std::vector<ProbeRow> rows;
  for (const auto& r : results) {
    if (!rows.empty() && r.backend_id != results.front().backend_id) {
      throw UsageError("probe results come from different backends ('" +
                       results.front().backend_id + "' and '" + r.backend_id +
                       "'); their similarities are not comparable");
    }
    rows.push_back(probe_row(r));
  }
  const auto cols = probe_columns(rows);
  const std::string backend = results.empty() ? std::string("-") : results.front().backend_id;
  const std::string info =
      "backend " + backend + ", image similarity = max embedding cosine to reference images";

  std::string out;
  if (format == TableFormat::kCsv) {
    out = "# " + info + "\n" +
          csv_line({"probe_id", "prompt", "keywords", "threshold", "text_similarity",
                    "percent_above", "n_seeds", "failed", "bucket_edges", "bucket_counts",
                    "object_label", "object_rate", "object_positives", "object_answered",
                    "object_failed", "baseline_rate"});
    for (const auto& r : rows) {
      std::vector<std::string> f = {r.probe_id,
                                    r.prompt,
                                    join(r.highlight_keywords, ";"),
                                    format_similarity(r.threshold),
                                    format_similarity(r.text_similarity),
                                    format_percent(r.percent_above),
                                    std::to_string(r.n_seeds),
                                    std::to_string(r.failed),
                                    edges_cell(r.buckets),
                                    counts_cell(r.buckets, ";")};
      if (r.presence) {
        f.insert(f.end(), {r.presence->label, format_percent(r.presence->rate),
                           std::to_string(r.presence->positives),
                           std::to_string(r.presence->answered),
                           std::to_string(r.presence->failed)});
      } else {
        f.insert(f.end(), {"", "", "", "", ""});
      }
      f.push_back(r.baseline_rate ? format_percent(*r.baseline_rate) : "");
      out += csv_line(f);
    }
    return out;
  }

  if (format == TableFormat::kText) {
    std::vector<std::string> header = {"Prompt", "Text Similarity", threshold_header(cols)};
    if (cols.mixed_threshold) header.push_back("Threshold");
    if (cols.presence) header.push_back(cols.presence_label + " %");
    if (cols.baseline) header.push_back("Baseline %");
    if (cols.failed) header.push_back("Failed Seeds");
    out = "# " + info + "\n" + join(header, " | ") + "\n";
    for (const auto& r : rows) {
      std::vector<std::string> cells = {r.prompt, format_similarity(r.text_similarity),
                                        format_percent(r.percent_above) + "%"};
      if (cols.mixed_threshold) cells.push_back(format_similarity(r.threshold));
      if (cols.presence) cells.push_back(optional_percent(presence_rate(r), true));
      if (cols.baseline) cells.push_back(optional_percent(r.baseline_rate, true));
      if (cols.failed) cells.push_back(std::to_string(r.failed));
      out += join(cells, " | ") + "\n";
    }
    return out;
  }

  std::vector<std::string> header = {"Prompt", "Text Similarity", threshold_header(cols)};
  if (cols.mixed_threshold) header.push_back("Threshold");
  header.push_back(cols.common_edges
                       ? "Seeds per band (" + join(bucket_labels(*cols.common_edges), " / ") + ")"
                       : std::string("Seeds per band"));
  if (cols.presence) header.push_back(md_cell(cols.presence_label) + " %");
  if (cols.baseline) header.push_back("Baseline %");
  if (cols.failed) header.push_back("Failed Seeds");
  out = md_cell(info) + "\n\n" + md_row(header) + "|---|";
  for (std::size_t i = 1; i < header.size(); ++i) out += "---:|";
  out += "\n";
  for (const auto& r : rows) {
    std::vector<std::string> cells = {md_cell(highlight(r.prompt, r.highlight_keywords)),
                                      format_similarity(r.text_similarity),
                                      format_percent(r.percent_above) + "%"};
    if (cols.mixed_threshold) cells.push_back(format_similarity(r.threshold));
    cells.push_back(counts_cell(r.buckets, " / "));
    if (cols.presence) cells.push_back(optional_percent(presence_rate(r), true));
    if (cols.baseline) cells.push_back(optional_percent(r.baseline_rate, true));
    if (cols.failed) cells.push_back(std::to_string(r.failed));
    out += md_row(cells);
  }
  bool any_exemplar = false;
  for (const auto& r : rows) {
    for (const auto& e : r.exemplars) any_exemplar = any_exemplar || (e && !e->image_ref.empty());
  }
  if (any_exemplar) {
    out += "\nHighest-similarity image per band:\n\n";
    for (const auto& r : rows) {
      const auto labels = bucket_labels(r.buckets.edges);
      for (std::size_t b = r.exemplars.size(); b-- > 0;) {
        const auto& e = r.exemplars[b];
        if (!e || e->image_ref.empty()) continue;
        out += "- " + md_cell(r.probe_id) + " " + labels[b] + ": seed " +
               std::to_string(e->seed) + " (" + format_similarity(*e->sim_to_reference) +
               ") " + e->image_ref + "\n";
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string report_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH"); env && *env) {
    char* end = nullptr;
    const long long v = std::strtoll(env, &end, 10);
    if (end && *end == '\0' && v >= 0) t = static_cast<std::time_t>(v);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string serialize_report_metadata(const ReportBundle& bundle) {
  const auto& m = bundle.metadata;
  ordered_json j;
  j["generated_at"] = m.generated_at;
  j["tau"] = m.tau;
  j["backend_id"] = m.backend_id;
  j["slice"] = m.slice_name;
  j["image_similarity"] = "max embedding cosine to reference images";
  j["artifacts"] = m.artifacts;
  auto probes = ordered_json::array();
  for (const auto& r : bundle.probes) {
    ordered_json p;
    p["probe_id"] = r.probe_id;
    p["prompt"] = r.spec.prompt;
    p["threshold"] = r.threshold;
    p["failed_seeds"] = r.failed_seeds();
    auto ex = ordered_json::array();
    const auto labels = bucket_labels(r.buckets.edges);
    const auto exemplars = band_exemplars(r);
    for (std::size_t b = 0; b < exemplars.size(); ++b) {
      if (!exemplars[b]) continue;
      ex.push_back({{"band", labels[b]},
                    {"seed", exemplars[b]->seed},
                    {"image_ref", exemplars[b]->image_ref},
                    {"sim", *exemplars[b]->sim_to_reference}});
    }
    p["band_exemplars"] = std::move(ex);
    probes.push_back(std::move(p));
  }
  j["probes"] = std::move(probes);
  return j.dump(1) + "\n";
}

std::vector<std::filesystem::path> write_report_bundle(const ReportBundle& bundle,
                                                       const std::filesystem::path& dir,
                                                       TableFormat format) {
  const std::string ext(extension_for(format));
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& body) {
    write_file_atomic(dir / name, body);
    written.push_back(dir / name);
  };
  put("cluster_table." + ext,
      render_cluster_table(bundle.cluster_table,
                           {bundle.metadata.tau, bundle.metadata.backend_id,
                            bundle.metadata.slice_name},
                           format));
  put("distribution.csv", emit_distribution(bundle.distribution));
  put("probe_table." + ext, emit_probe_table(bundle.probes, format));
  put("report.json", serialize_report_metadata(bundle));
  return written;
}

}  // namespace dupaudit
