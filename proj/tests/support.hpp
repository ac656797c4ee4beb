#pragma once

// Test-side helpers. The oracles here are written independently of the
// library code they check: plain loops, no shared helpers.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "dupaudit/embedding.hpp"

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("dupaudit-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& p, const std::string& body) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << body;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::vector<double> gaussian(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  for (auto& x : v) x = n(rng);
  return v;
}

inline std::vector<float> unit_f32(const std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double inv = 1.0 / std::sqrt(sq);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

inline double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

struct Row {
  std::uint64_t id;
  std::vector<float> v;
};

inline dupaudit::EmbeddingMatrix to_matrix(std::vector<Row> rows,
                                           dupaudit::Modality m = dupaudit::Modality::kImage,
                                           const std::string& backend = "mock-hash64-v1") {
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.id < b.id; });
  const auto dim = rows.empty() ? 64u : static_cast<std::uint32_t>(rows.front().v.size());
  dupaudit::EmbeddingMatrix out(m, dim, backend);
  for (const auto& r : rows) out.append(r.id, r.v);
  return out;
}

// Greedy leader assignment replayed with a linear scan over leaders.
struct OracleCluster {
  std::uint64_t leader;
  std::set<std::uint64_t> members;
  bool operator<(const OracleCluster& o) const { return leader < o.leader; }
  bool operator==(const OracleCluster& o) const {
    return leader == o.leader && members == o.members;
  }
};

inline std::vector<OracleCluster> oracle_greedy(std::vector<Row> rows, double tau) {
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.id < b.id; });
  std::vector<OracleCluster> clusters;
  std::vector<const std::vector<float>*> leader_vecs;
  for (const auto& r : rows) {
    int best = -1;
    double best_sim = 0.0;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      double s = dot(r.v, *leader_vecs[c]);
      if (s > 1.0) s = 1.0;
      if (s < -1.0) s = -1.0;
      if (s >= tau && (best < 0 || s > best_sim)) {
        best = static_cast<int>(c);
        best_sim = s;
      }
    }
    if (best < 0) {
      clusters.push_back({r.id, {r.id}});
      leader_vecs.push_back(&r.v);
    } else {
      clusters[static_cast<std::size_t>(best)].members.insert(r.id);
    }
  }
  std::sort(clusters.begin(), clusters.end());
  return clusters;
}

// Mean cosine over every unordered member pair.
inline double oracle_coherence(const std::vector<const std::vector<float>*>& members) {
  if (members.size() < 2) return 1.0;
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < members.size(); ++i) {
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      sum += dot(*members[i], *members[j]);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

// Vector at cosine ~`sim` from `center` (both unit), built from a random
// direction orthogonalised against the center.
inline std::vector<float> near(const std::vector<float>& center, double sim,
                               std::mt19937_64& rng) {
  auto g = gaussian(rng, center.size());
  double proj = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) proj += g[i] * center[i];
  for (std::size_t i = 0; i < g.size(); ++i) g[i] -= proj * center[i];
  double n = 0.0;
  for (double x : g) n += x * x;
  n = std::sqrt(n);
  const double ortho = std::sqrt(std::max(0.0, 1.0 - sim * sim));
  std::vector<double> v(center.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sim * center[i] + ortho * g[i] / n;
  return unit_f32(v);
}

// Well-separated planted clusters. Member ids are shuffled across clusters.
struct Planted {
  std::vector<Row> rows;
  std::map<std::uint64_t, std::size_t> label;  // id -> planted cluster index
  std::vector<std::vector<float>> centers;
};

inline Planted plant_clusters(const std::vector<std::size_t>& sizes, double within,
                              std::uint64_t seed, std::size_t dim = 64) {
  std::mt19937_64 rng(seed);
  Planted p;
  // Centers: Gram-Schmidt on random vectors, so cross-center cosine is 0.
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    auto g = gaussian(rng, dim);
    for (const auto& prev : p.centers) {
      double d = 0.0;
      for (std::size_t i = 0; i < dim; ++i) d += g[i] * prev[i];
      for (std::size_t i = 0; i < dim; ++i) g[i] -= d * prev[i];
    }
    p.centers.push_back(unit_f32(g));
  }
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  std::vector<std::uint64_t> ids(total);
  for (std::size_t i = 0; i < total; ++i) ids[i] = 1000 + 7 * i;
  std::shuffle(ids.begin(), ids.end(), rng);
  std::size_t k = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    for (std::size_t m = 0; m < sizes[c]; ++m) {
      const auto id = ids[k++];
      p.rows.push_back({id, near(p.centers[c], within, rng)});
      p.label[id] = c;
    }
  }
  return p;
}

}  // namespace testsupport
