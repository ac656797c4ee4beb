// Acceptance suite: one PASS/FAIL line per acceptance criterion. Exit status is
// non-zero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

#include "dupaudit/cluster.hpp"
#include "dupaudit/dataset.hpp"
#include "dupaudit/mock_backend.hpp"
#include "dupaudit/pipeline.hpp"
#include "dupaudit/probe.hpp"
#include "dupaudit/report.hpp"
#include "dupaudit/text.hpp"
#include "paper_fixtures.hpp"
#include "pipeline_fixture.hpp"
#include "support.hpp"

using namespace dupaudit;
using testsupport::Row;
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail << what;
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<float> as_floats(const EmbeddingVector& v) {
  return {v.values().begin(), v.values().end()};
}

// ---------------------------------------------------------------------------

void clustering_oracle(Outcome& o) {
  const auto t0 = Clock::now();
  std::size_t compared = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const double tau = trial % 2 == 0 ? 0.7 : 0.9;
    std::mt19937_64 rng(1000 + trial);
    const std::size_t n = 50 + rng() % 151;  // 50..200
    const std::size_t centers = 2 + rng() % 8;
    std::uniform_real_distribution<double> sim(0.6, 1.0);
    std::vector<Row> rows;
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = mock_vector("text", "center-" + std::to_string(trial) + "-" +
                                             std::to_string(rng() % centers));
      const auto v = planted_vector(c, sim(rng), "t" + std::to_string(trial) + "-" + std::to_string(i));
      rows.push_back({3 * i + (rng() % 3), as_floats(v)});
    }
    // Ids must be unique; the stride of 3 guarantees it.
    const auto got = cluster_embeddings(testsupport::to_matrix(rows), tau);
    std::vector<testsupport::OracleCluster> mine;
    for (const auto& cl : got.clusters) {
      mine.push_back({cl.leader_id, {cl.member_ids.begin(), cl.member_ids.end()}});
    }
    std::sort(mine.begin(), mine.end());
    o.require(mine == testsupport::oracle_greedy(rows, tau),
              "trial " + std::to_string(trial) + " differs from the oracle");
    compared += n;
  }
  const double secs = seconds_since(t0);
  o.require(secs < 5.0, "took " + std::to_string(secs) + " s");
  if (o.ok) o.detail << "20 trials, " << compared << " vectors, " << secs << " s";
}

void planted_recovery(Outcome& o) {
  const std::vector<std::size_t> sizes = {60, 45, 30, 20, 10};
  const auto p = testsupport::plant_clusters(sizes, 0.96, 77);
  const auto c = cluster_embeddings(testsupport::to_matrix(p.rows), 0.85);
  o.require(c.clusters.size() == sizes.size(),
            "recovered " + std::to_string(c.clusters.size()) + " clusters");
  for (std::size_t i = 0; o.ok && i < sizes.size(); ++i) {
    o.require(c.clusters[i].size() == sizes[i], "cluster " + std::to_string(i) + " has size " +
                                                    std::to_string(c.clusters[i].size()));
    std::set<std::size_t> labels;
    for (auto id : c.clusters[i].member_ids) labels.insert(p.label.at(id));
    o.require(labels.size() == 1, "cluster " + std::to_string(i) + " mixes planted groups");
  }

  // 52/48 split: one group of 52 near the reference, 48 spread over others.
  const auto split = testsupport::plant_clusters({52, 20, 16, 12}, 0.96, 78);
  const auto sc = cluster_embeddings(testsupport::to_matrix(split.rows), 0.85);
  std::vector<Row> leaders;
  for (const auto& cl : sc.clusters) {
    for (const auto& r : split.rows) {
      if (r.id == cl.leader_id) leaders.push_back(r);
    }
  }
  const auto lm = testsupport::to_matrix(leaders);
  const auto ref = EmbeddingVector::from_unit(split.centers[0]);
  const double share = cluster_share(sc, lm, ref, 0.85, ShareDenominator::kAll);
  o.require(share == 0.52, "share " + std::to_string(share));
  const auto dist = size_distribution(sc, 30, ReferenceMatch{&lm, ref, 0.85});
  std::size_t flagged = 0;
  for (const auto& row : dist) flagged += row.matches_reference ? 1 : 0;
  o.require(flagged == 1 && !dist.empty() && dist[0].matches_reference && dist[0].size == 52,
            "distribution flags " + std::to_string(flagged) + " clusters");

  // The same recovery through the on-disk pipeline.
  testsupport::TempDir dir;
  const auto fx = testsupport::write_pipeline_fixture(dir.path());
  const auto cfg = PipelineConfig::load(fx.config);
  run_pipeline(cfg);
  const auto pc = load_clustering(dir / "work" / "clusters.json");
  o.require(pc.clusters.size() == 3 && pc.clusters[0].size() == 52 && pc.clusters[1].size() == 30 &&
                pc.clusters[2].size() == 18,
            "pipeline cluster sizes differ from 52/30/18");
  o.require(testsupport::read_text(dir / "work" / "distribution.csv") ==
                "rank,size,matches_reference\n1,52,true\n2,30,false\n3,18,false\n",
            "pipeline distribution differs");
  if (o.ok) o.detail << "sizes 60/45/30/20/10 recovered, share " << share << ", 1 cluster flagged";
}

void keyword_conservation(Outcome& o) {
  std::mt19937_64 rng(4242);
  std::vector<std::string> vocab;
  for (int i = 0; i < 50; ++i) vocab.push_back("word" + std::string(1, 'a' + i % 26) + std::to_string(i));
  std::map<std::string, std::uint64_t> whole;
  std::vector<CaptionRecord> recs;
  for (std::uint64_t id = 0; id < 500; ++id) {
    std::string cap;
    for (std::size_t k = 1 + rng() % 12; k > 0; --k) {
      const auto& w = vocab[rng() % vocab.size()];
      cap += (cap.empty() ? "" : " ") + w;
      ++whole[w];
    }
    recs.push_back({id, cap, "https://example.org/" + std::to_string(id), std::nullopt, {}});
  }
  DatasetSlice slice("synthetic", recs);

  // Partition via clustering of random vectors around a few centers.
  std::vector<Row> rows;
  for (std::uint64_t id = 0; id < 500; ++id) {
    const auto c = mock_vector("text", "kw-center-" + std::to_string(rng() % 7));
    rows.push_back({id, as_floats(planted_vector(c, 0.95, "kw" + std::to_string(id)))});
  }
  const auto c = cluster_embeddings(testsupport::to_matrix(rows), 0.8);
  std::map<std::string, std::uint64_t> summed;
  for (const auto& cl : c.clusters) {
    for (const auto& [w, n] : frequent_words(cl, slice, text::StopwordSet{}, vocab.size())) summed[w] += n;
  }
  o.require(summed == whole, "per-cluster sums differ from whole-slice counts");
  if (o.ok) o.detail << "50 words, 500 captions, " << c.clusters.size() << " clusters";
}

MockPlan probe_plan(std::size_t replicated, std::size_t flagged) {
  return MockPlan::from_json(
      R"({"replications": [{"prompt": "Van Gogh starry night", "reference_text": "starry-ref",
          "default_sim": 0.1,
          "replicate": {"base_seed": 0, "n": 500, "count": )" + std::to_string(replicated) +
      R"(, "sim": 0.9}}],
        "detections": [{"label": "US flag",
          "positive_count": {"base_seed": 0, "n": 500, "count": )" + std::to_string(flagged) +
      "}}]}");
}

ReferenceSet probe_refs() {
  EmbeddingMatrix img(Modality::kImage, kMockDim, std::string(kMockModelTag));
  img.append(1, mock_vector("text", "starry-ref").values());
  img.append(2, mock_vector("image", "unrelated").values());
  EmbeddingMatrix txt(Modality::kText, kMockDim, std::string(kMockModelTag));
  txt.append(1, mock_vector("text", "Van Gogh starry night").values());
  return {img, txt};
}

void probe_properties(Outcome& o) {
  const auto t0 = Clock::now();
  MockBackend mock(probe_plan(323, 489));
  ProbeSpec spec;
  spec.prompt = "Van Gogh starry night";
  spec.n_seeds = 500;
  const auto r = run_probe(spec, mock, probe_refs(), 0.83);
  o.require(r.buckets.total() == 500, "bucket total " + std::to_string(r.buckets.total()));
  const auto sims = r.successful_sims();
  double prev = 101.0;
  for (double t : {0.5, 0.7, 0.83, 0.9}) {
    const double p = percent_above(sims, t);
    o.require(p <= prev, "percent_above increases at threshold " + std::to_string(t));
    prev = p;
  }
  o.require(r.percent_above == 64.6, "percent_above " + std::to_string(r.percent_above));

  testsupport::TempDir dir;
  MockBackend imaging(probe_plan(323, 489));
  ProbeOptions opt;
  opt.image_dir = dir.path();
  const auto ri = run_probe(spec, imaging, probe_refs(), 0.83, opt);
  const auto presence = object_presence_rate(ri, imaging, "US flag");
  o.require(presence.rate == 97.8, "presence rate " + std::to_string(presence.rate));
  const double secs = seconds_since(t0);
  o.require(secs < 10.0, "took " + std::to_string(secs) + " s");
  if (o.ok) {
    o.detail << "buckets sum 500, 64.6% above 0.83, 97.8% flagged, " << secs << " s";
  }
}

void text_similarity_identity(Outcome& o) {
  MockBackend mock;
  const double same = text_similarity("Van Gogh starry night", probe_refs(), mock);
  o.require(std::abs(same - 1.0) <= 1e-4, "verbatim prompt scores " + std::to_string(same));
  for (std::size_t n : {1, 5, 100, 1000}) {
    EmbeddingMatrix txt(Modality::kText, kMockDim, std::string(kMockModelTag));
    std::vector<std::vector<float>> corpus;
    for (std::size_t i = 0; i < n; ++i) {
      // Half the corpus sits near the prompt so the max is not trivially small.
      const auto v = i % 2 ? mock_vector("text", "caption " + std::to_string(i))
                           : planted_vector(mock_vector("text", "a prompt"),
                                            0.3 + 0.6 * static_cast<double>(i) / n,
                                            std::to_string(i));
      txt.append(i, v.values());
      corpus.push_back(as_floats(v));
    }
    const ReferenceSet refs{probe_refs().image_embeddings, txt};
    const auto prompt = as_floats(mock_vector("text", "a prompt"));
    double best = -2.0;
    for (const auto& c : corpus) best = std::max(best, testsupport::dot(prompt, c));
    const double got = text_similarity("a prompt", refs, mock);
    o.require(std::abs(got - best) <= 1e-12,
              "corpus of " + std::to_string(n) + ": " + std::to_string(got) + " vs " +
                  std::to_string(best));
  }
  if (o.ok) o.detail << "verbatim " << same << ", oracle equal on corpora of 1..1000";
}

void extractability_monotone(Outcome& o) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::size_t positives = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = mock_vector("text", "a" + std::to_string(i));
    const auto b = i % 3 == 0 ? planted_vector(a, u(rng) / 2.0, std::to_string(i))
                              : mock_vector("text", "b" + std::to_string(i));
    const auto metric = i % 2 ? DistanceMetric::kL2 : DistanceMetric::kCosineDistance;
    const double d = u(rng);
    if (!is_extractable(b, a, {metric, d})) continue;
    ++positives;
    for (double larger : {d + 1e-9, d + 0.1, d + 1.0, 10.0}) {
      o.require(is_extractable(b, a, {metric, larger}),
                "pair " + std::to_string(i) + " flips at delta " + std::to_string(larger));
    }
  }
  if (o.ok) o.detail << "1000 pairs, " << positives << " extractable at their sampled delta";
}

std::string golden(const std::string& name) {
  return testsupport::read_text(fs::path(DUPAUDIT_GOLDEN_DIR) / name);
}

void golden_reports(Outcome& o) {
  const auto fx = testsupport::van_gogh_clusters();
  const std::pair<TableFormat, const char*> cluster_goldens[] = {
      {TableFormat::kText, "table1.txt"},
      {TableFormat::kCsv, "table1.csv"},
      {TableFormat::kMarkdown, "table1.md"}};
  for (const auto& [f, name] : cluster_goldens) {
    o.require(emit_cluster_table(fx.clustering, fx.slice, 10, 8, f) == golden(name),
              std::string(name) + " differs");
  }
  const auto starry = testsupport::starry_night_probes();
  const auto astro = testsupport::astronaut_probes();
  o.require(emit_probe_table(starry, TableFormat::kText) == golden("starry_probes.txt"),
            "starry_probes.txt differs");
  o.require(emit_probe_table(starry, TableFormat::kCsv) == golden("starry_probes.csv"),
            "starry_probes.csv differs");
  o.require(emit_probe_table(starry, TableFormat::kMarkdown) == golden("starry_probes.md"),
            "starry_probes.md differs");
  o.require(emit_probe_table(astro, TableFormat::kText) == golden("astronaut_probes.txt"),
            "astronaut_probes.txt differs");
  o.require(emit_probe_table(astro, TableFormat::kMarkdown) == golden("astronaut_probes.md"),
            "astronaut_probes.md differs");

  testsupport::TempDir dir;
  const auto pf = testsupport::write_pipeline_fixture(dir.path());
  const auto cfg = PipelineConfig::load(pf.config);
  run_pipeline(cfg);
  const auto before = testsupport::snapshot(dir.path());
  const auto rerun = run_pipeline(cfg);
  o.require(testsupport::snapshot(dir.path()) == before, "pipeline rerun changed bytes");
  o.require(rerun.backend_requests == 0,
            "pipeline rerun made " + std::to_string(rerun.backend_requests) + " backend calls");
  if (o.ok) {
    o.detail << "8 golden files match, rerun touched 0 of " << before.size() << " files";
  }
}

void filtering(Outcome& o) {
  auto slice_of = [](const std::vector<std::string>& captions) {
    std::vector<CaptionRecord> recs;
    for (std::size_t i = 0; i < captions.size(); ++i) {
      recs.push_back({i, captions[i], "https://example.org/" + std::to_string(i), std::nullopt, {}});
    }
    return DatasetSlice("fixture", recs);
  };
  auto ids = [](const DatasetSlice& s) {
    std::vector<std::uint64_t> out;
    for (const auto* r : s.active()) out.push_back(r->id);
    return out;
  };
  auto words = [](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += (i ? " t" : "t") + std::to_string(i);
    return s;
  };
  using Ids = std::vector<std::uint64_t>;

  const auto tokens = slice_of({words(77), words(78), words(76), words(200)});
  WhitespaceTokenizer ws;
  o.require(ids(token_length_filter(tokens, ws, 77)) == Ids{0, 2},
            "whitespace tokenizer boundary");
  MockBackend mock;
  BackendTokenizer bt(mock);
  o.require(ids(token_length_filter(tokens, bt, 77)) == Ids{0, 2}, "backend tokenizer boundary");

  const auto s = slice_of({"Van Gogh starry night", "vangogh poster", "Van Gogh's Sunflowers",
                           "gogh van", "A VAN parked at night", "Vincent van Gogh - Almond Blossoms",
                           "caravan goghs", "van-gogh museum"});
  o.require(ids(filter_by_keywords(s, {{"van", "gogh"}, MatchMode::kAll})) == Ids{0, 2, 3, 5, 7},
            "word/all");
  o.require(ids(filter_by_keywords(s, {{"van", "gogh"}, MatchMode::kAny})) ==
                Ids{0, 2, 3, 4, 5, 7},
            "word/any");
  o.require(ids(filter_by_keywords(s, {{"van", "gogh"}, MatchMode::kAll, true,
                                       MatchUnit::kSubstring})) == Ids{0, 1, 2, 3, 5, 6, 7},
            "substring/all");
  o.require(ids(filter_by_keywords(s, {{"van", "gogh"}, MatchMode::kAny, true,
                                       MatchUnit::kSubstring})) == Ids{0, 1, 2, 3, 4, 5, 6, 7},
            "substring/any");
  if (o.ok) o.detail << "77 kept, 78 dropped; 4 all/any fixtures match";
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria = {
      {"clustering-oracle-equivalence", clustering_oracle},
      {"planted-duplicate-recovery", planted_recovery},
      {"keyword-count-conservation", keyword_conservation},
      {"probe-conservation-and-monotonicity", probe_properties},
      {"text-similarity-identity", text_similarity_identity},
      {"extractability-monotonicity", extractability_monotone},
      {"golden-reports", golden_reports},
      {"filtering-pipeline", filtering},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail << "threw: " << e.what();
    }
    std::printf("%s %s: %s\n", o.ok ? "PASS" : "FAIL", name, o.detail.str().c_str());
    failures += o.ok ? 0 : 1;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
