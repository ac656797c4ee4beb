#include "dupaudit/cluster.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "dupaudit/errors.hpp"
#include "dupaudit/io.hpp"

namespace dupaudit {

bool Clustering::is_omitted(int cluster_id) const {
  return std::binary_search(omitted_ids.begin(), omitted_ids.end(), cluster_id);
}

std::size_t Clustering::record_count() const {
  std::size_t n = 0;
  for (const auto& c : clusters) n += c.size();
  return n;
}

std::size_t Clustering::record_count_non_omitted() const {
  std::size_t n = 0;
  for (const auto& c : clusters) {
    if (!is_omitted(c.cluster_id)) n += c.size();
  }
  return n;
}

const Cluster* Clustering::cluster_of(std::uint64_t record_id) const {
  for (const auto& c : clusters) {
    if (std::binary_search(c.member_ids.begin(), c.member_ids.end(), record_id)) return &c;
  }
  return nullptr;
}

void Clustering::validate() const {
  if (!(tau > 0.0 && tau <= 1.0)) throw InvariantError("tau outside (0, 1]");
  std::set<std::uint64_t> seen;
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    const auto& c = clusters[i];
    if (c.cluster_id != static_cast<int>(i)) {
      throw InvariantError("cluster ids are not dense in rank order");
    }
    if (c.member_ids.empty()) throw InvariantError("empty cluster " + std::to_string(i));
    if (!std::is_sorted(c.member_ids.begin(), c.member_ids.end()) ||
        std::adjacent_find(c.member_ids.begin(), c.member_ids.end()) != c.member_ids.end()) {
      throw InvariantError("members of cluster " + std::to_string(i) + " not strictly ascending");
    }
    if (!std::binary_search(c.member_ids.begin(), c.member_ids.end(), c.leader_id)) {
      throw InvariantError("leader of cluster " + std::to_string(i) + " is not a member");
    }
    for (auto id : c.member_ids) {
      if (!seen.insert(id).second) {
        throw InvariantError("record " + std::to_string(id) + " is in two clusters");
      }
    }
    if (i > 0) {
      const auto& p = clusters[i - 1];
      if (p.size() < c.size() ||
          (p.size() == c.size() && p.member_ids.front() > c.member_ids.front())) {
        throw InvariantError("clusters are not in rank order at " + std::to_string(i));
      }
    }
  }
  for (std::size_t i = 0; i < omitted_ids.size(); ++i) {
    const int id = omitted_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= clusters.size()) {
      throw InvariantError("omitted id " + std::to_string(id) + " out of range");
    }
    if (i > 0 && omitted_ids[i - 1] >= id) throw InvariantError("omitted ids not ascending");
  }
}

namespace {

// Mean pairwise cosine from the identity
//   sum_{i<j} <v_i, v_j> = (||sum v||^2 - sum ||v_i||^2) / 2.
double mean_pairwise_cosine(const EmbeddingMatrix& m, const std::vector<std::size_t>& rows) {
  if (rows.size() < 2) return 1.0;
  std::vector<double> sum(m.dim(), 0.0);
  double self = 0.0;
  for (auto r : rows) {
    const auto v = m.row(r);
    for (std::size_t d = 0; d < v.size(); ++d) {
      sum[d] += v[d];
      self += static_cast<double>(v[d]) * v[d];
    }
  }
  double total = 0.0;
  for (double x : sum) total += x * x;
  const double n = static_cast<double>(rows.size());
  return std::clamp((total - self) / (n * (n - 1.0)), -1.0, 1.0);
}

}  // namespace

Clustering cluster_embeddings(const EmbeddingMatrix& m, double tau) {
  if (m.empty()) throw EmptyInputError("cannot cluster an empty matrix");
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw UsageError("tau must be in (0, 1], got " + std::to_string(tau));
  }
  std::vector<std::size_t> leader_rows;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto v = m.row(i);
    std::optional<std::size_t> best;
    double best_sim = 0.0;
    for (std::size_t c = 0; c < leader_rows.size(); ++c) {
      const double s = cosine_sim(v, m.row(leader_rows[c]));
      if (s >= tau && (!best || s > best_sim)) {
        best = c;
        best_sim = s;
      }
    }
    if (best) {
      members[*best].push_back(i);
    } else {
      leader_rows.push_back(i);
      members.push_back({i});
    }
  }

  Clustering out;
  out.tau = tau;
  out.source.backend_id = m.backend_id();
  out.clusters.reserve(members.size());
  for (std::size_t c = 0; c < members.size(); ++c) {
    Cluster cl;
    cl.cluster_id = static_cast<int>(c);
    cl.leader_id = m.ids()[leader_rows[c]];
    for (auto r : members[c]) cl.member_ids.push_back(m.ids()[r]);
    cl.coherence = mean_pairwise_cosine(m, members[c]);
    out.clusters.push_back(std::move(cl));
  }
  return rank_clusters(std::move(out));
}

Clustering rank_clusters(Clustering c) {
  std::vector<std::size_t> order(c.clusters.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = c.clusters[a];
    const auto& y = c.clusters[b];
    if (x.size() != y.size()) return x.size() > y.size();
    return x.member_ids.front() < y.member_ids.front();
  });
  std::map<int, int> remap;
  std::vector<Cluster> ranked;
  ranked.reserve(order.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    auto cl = std::move(c.clusters[order[rank]]);
    remap[cl.cluster_id] = static_cast<int>(rank);
    cl.cluster_id = static_cast<int>(rank);
    ranked.push_back(std::move(cl));
  }
  std::vector<int> omitted;
  for (int id : c.omitted_ids) {
    if (auto it = remap.find(id); it != remap.end()) omitted.push_back(it->second);
  }
  std::sort(omitted.begin(), omitted.end());
  c.clusters = std::move(ranked);
  c.omitted_ids = std::move(omitted);
  return c;
}

Clustering mark_noise(Clustering c, const NoiseMode& mode) {
  std::set<int> omitted(c.omitted_ids.begin(), c.omitted_ids.end());
  if (const auto* manual = std::get_if<ManualNoise>(&mode)) {
    for (int id : manual->cluster_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= c.clusters.size()) {
        throw UsageError("unknown cluster id " + std::to_string(id));
      }
      omitted.insert(id);
    }
  } else {
    const double threshold = std::get<CoherenceBelow>(mode).threshold;
    for (const auto& cl : c.clusters) {
      if (cl.coherence < threshold) omitted.insert(cl.cluster_id);
    }
  }
  c.omitted_ids.assign(omitted.begin(), omitted.end());
  return c;
}

std::vector<WordCount> frequent_words(const Cluster& cluster, const DatasetSlice& slice,
                                      const text::StopwordSet& stopwords, std::size_t k) {
  std::map<std::string, std::uint64_t, std::less<>> counts;
  for (auto id : cluster.member_ids) {
    const auto* rec = slice.find(id);
    if (!rec) {
      throw IntegrityError("cluster " + std::to_string(cluster.cluster_id) + " member " +
                           std::to_string(id) + " is not in slice '" + slice.name() + "'");
    }
    for (auto& w : text::split_words(rec->caption)) {
      if (!stopwords.count(w)) ++counts[std::move(w)];
    }
  }
  std::vector<WordCount> out(counts.begin(), counts.end());
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.second > b.second;  // map order already lexicographic
  });
  if (out.size() > k) out.resize(k);
  return out;
}

ShareDenominator parse_share_denominator(std::string_view tag) {
  if (tag == "all") return ShareDenominator::kAll;
  if (tag == "non-omitted" || tag == "non_omitted") return ShareDenominator::kNonOmitted;
  throw UsageError("unknown denominator '" + std::string(tag) + "' (expected all or non-omitted)");
}

namespace {

bool leader_matches(const Cluster& cl, const EmbeddingMatrix& leaders,
                    const EmbeddingVector& reference, double tau_ref) {
  const auto row = leaders.index_of(cl.leader_id);
  if (!row) {
    throw IntegrityError("leader " + std::to_string(cl.leader_id) +
                         " has no embedding in the supplied matrix");
  }
  return cosine_sim(leaders.row(*row), reference.values()) >= tau_ref;
}

}  // namespace

double cluster_share(const Clustering& c, const EmbeddingMatrix& leaders,
                     const EmbeddingVector& reference, double tau_ref,
                     ShareDenominator denominator) {
  if (reference.dim() != leaders.dim()) {
    throw UsageError("reference dimension " + std::to_string(reference.dim()) +
                     " does not match matrix dimension " + std::to_string(leaders.dim()));
  }
  std::size_t numerator = 0;
  std::size_t total = 0;
  for (const auto& cl : c.clusters) {
    if (denominator == ShareDenominator::kNonOmitted && c.is_omitted(cl.cluster_id)) continue;
    total += cl.size();
    if (leader_matches(cl, leaders, reference, tau_ref)) numerator += cl.size();
  }
  if (total == 0) throw DegenerateInputError("cluster share has an empty denominator");
  return static_cast<double>(numerator) / static_cast<double>(total);
}

std::vector<DistributionRow> size_distribution(const Clustering& c, std::size_t top_n,
                                               const std::optional<ReferenceMatch>& reference) {
  std::vector<DistributionRow> rows;
  for (const auto& cl : c.clusters) {
    if (rows.size() >= top_n) break;
    if (c.is_omitted(cl.cluster_id)) continue;
    DistributionRow row;
    row.rank = rows.size() + 1;
    row.size = cl.size();
    if (reference && reference->leaders) {
      row.matches_reference =
          leader_matches(cl, *reference->leaders, reference->reference, reference->tau_ref);
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------

std::string serialize_clustering(const Clustering& c) {
  nlohmann::ordered_json j;
  j["tau"] = c.tau;
  j["omitted_ids"] = c.omitted_ids;
  j["source"] = {{"backend_id", c.source.backend_id}, {"slice", c.source.slice_name}};
  auto clusters = nlohmann::ordered_json::array();
  for (const auto& cl : c.clusters) {
    nlohmann::ordered_json o;
    o["cluster_id"] = cl.cluster_id;
    o["leader_id"] = cl.leader_id;
    o["member_ids"] = cl.member_ids;
    o["coherence"] = cl.coherence;
    clusters.push_back(std::move(o));
  }
  j["clusters"] = std::move(clusters);
  return j.dump(1) + "\n";
}

Clustering parse_clustering(std::string_view text) {
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw FormatError("clustering file is not a JSON object", 0);
  }
  Clustering c;
  try {
    c.tau = j.at("tau").get<double>();
    c.omitted_ids = j.value("omitted_ids", std::vector<int>{});
    if (j.contains("source")) {
      c.source.backend_id = j["source"].value("backend_id", "");
      c.source.slice_name = j["source"].value("slice", "");
    }
    for (const auto& o : j.at("clusters")) {
      Cluster cl;
      cl.cluster_id = o.at("cluster_id").get<int>();
      cl.leader_id = o.at("leader_id").get<std::uint64_t>();
      cl.member_ids = o.at("member_ids").get<std::vector<std::uint64_t>>();
      cl.coherence = o.value("coherence", 1.0);
      c.clusters.push_back(std::move(cl));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("clustering: ") + e.what(), 0);
  }
  c.validate();
  return c;
}

void save_clustering(const Clustering& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_clustering(c));
}

Clustering load_clustering(const std::filesystem::path& path) {
  return parse_clustering(read_file(path));
}

}  // namespace dupaudit
