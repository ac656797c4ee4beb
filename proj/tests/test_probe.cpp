#include <doctest.h>

#include "dupaudit/errors.hpp"
#include "dupaudit/hashing.hpp"
#include "dupaudit/mock_backend.hpp"
#include "dupaudit/probe.hpp"
#include "support.hpp"

using namespace dupaudit;
namespace fs = std::filesystem;

namespace {

EmbeddingMatrix matrix_of(const std::vector<EmbeddingVector>& vs, Modality m,
                          const std::string& backend = std::string(kMockModelTag)) {
  EmbeddingMatrix out(m, kMockDim, backend);
  for (std::size_t i = 0; i < vs.size(); ++i) out.append(i + 1, vs[i].values());
  return out;
}

const std::vector<std::string> kCaptions = {"Van Gogh starry night", "a blue sky print",
                                            "portrait of a man", "astronaut on a horse"};

// Reference images: the planted target plus a few unrelated vectors.
ReferenceSet make_refs(const std::string& backend = std::string(kMockModelTag)) {
  std::vector<EmbeddingVector> imgs = {mock_vector("text", "starry-ref")};
  for (int i = 0; i < 5; ++i) imgs.push_back(mock_vector("image", "other" + std::to_string(i)));
  std::vector<EmbeddingVector> texts;
  for (const auto& c : kCaptions) texts.push_back(mock_vector("text", c));
  return {matrix_of(imgs, Modality::kImage, backend), matrix_of(texts, Modality::kText, backend)};
}

MockPlan planted_plan(std::size_t count, double sim, const std::string& extra = "") {
  return MockPlan::from_json(R"({"replications": [{"prompt": "Van Gogh starry night",
      "reference_text": "starry-ref", "default_sim": 0.5,
      "replicate": {"base_seed": 0, "n": 500, "count": )" +
                             std::to_string(count) + R"(, "sim": )" + std::to_string(sim) +
                             "}}]" + extra + "}");
}

ProbeSpec starry(std::size_t n = 500) {
  ProbeSpec s;
  s.prompt = "Van Gogh starry night";
  s.highlight_keywords = {"van", "gogh"};
  s.n_seeds = n;
  return s;
}

}  // namespace

TEST_SUITE("probe") {
  TEST_CASE("seed derivation") {
    CHECK(derive_seeds(10, 3) == std::vector<std::uint64_t>{10, 11, 12});
    CHECK(derive_seeds(~0ULL, 2) == std::vector<std::uint64_t>{~0ULL, 0});
    CHECK(derive_seeds(0, 500).size() == 500);
    CHECK_THROWS_AS(derive_seeds(0, 0), UsageError);
  }

  TEST_CASE("bucketize places values by strict comparison with edges") {
    const std::vector<double> sims = {0.1, 0.7, 0.7000001, 0.8, 0.85, 0.86, 1.0};
    const auto b = bucketize(sims, {0.70, 0.80, 0.85});
    CHECK(b.counts == std::vector<std::size_t>{2, 2, 1, 2});
    CHECK(b.total() == sims.size());
    CHECK(bucketize({}, {0.5}).counts == std::vector<std::size_t>{0, 0});
    CHECK_THROWS_AS(bucketize(sims, {0.8, 0.7}), UsageError);
    CHECK_THROWS_AS(bucketize(sims, {0.8, 0.8}), UsageError);
  }

  TEST_CASE("bucket counts always sum to the number of scores") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> sims(rng() % 300);
      for (auto& s : sims) s = u(rng);
      std::vector<double> edges;
      double e = -1.0;
      for (std::size_t k = rng() % 6; k > 0; --k) edges.push_back(e += 0.3);
      CHECK(bucketize(sims, edges).total() == sims.size());
    }
  }

  TEST_CASE("percent_above") {
    std::vector<double> sims(500, 0.5);
    for (std::size_t i = 0; i < 323; ++i) sims[i] = 0.9;
    CHECK(percent_above(sims, 0.83) == doctest::Approx(64.6).epsilon(1e-12));
    CHECK(percent_above(sims, 0.9) == 0.0);
    CHECK(percent_above(sims, 0.4) == 100.0);
    CHECK_THROWS_AS(percent_above({}, 0.5), DegenerateInputError);
    // Non-increasing in the threshold.
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& s : sims) s = u(rng);
    double prev = 101.0;
    for (double t : {0.5, 0.7, 0.83, 0.9}) {
      const double p = percent_above(sims, t);
      CHECK(p <= prev);
      prev = p;
    }
  }

  TEST_CASE("extractability is monotone in delta") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int i = 0; i < 300; ++i) {
      const auto a = normalize(std::span<const double>(testsupport::gaussian(rng, 16)));
      const auto b = normalize(std::span<const double>(testsupport::gaussian(rng, 16)));
      for (auto metric : {DistanceMetric::kCosineDistance, DistanceMetric::kL2}) {
        const double d1 = u(rng);
        const double d2 = d1 + u(rng);
        if (is_extractable(a, b, {metric, d1})) CHECK(is_extractable(a, b, {metric, d2}));
      }
    }
    const auto v = mock_vector("text", "x");
    CHECK(distance(v, v, DistanceMetric::kL2) == doctest::Approx(0.0));
    CHECK(is_extractable(v, v, {DistanceMetric::kCosineDistance, 1e-6}));
    CHECK_THROWS_AS(is_extractable(v, v, {DistanceMetric::kL2, -0.1}), UsageError);
  }

  TEST_CASE("text similarity is the max over the reference corpus") {
    MockBackend mock;
    const auto refs = make_refs();
    CHECK(text_similarity("Van Gogh starry night", refs, mock) == doctest::Approx(1.0).epsilon(1e-4));
    auto as_vec = [](const EmbeddingVector& v) {
      return std::vector<float>(v.values().begin(), v.values().end());
    };
    const auto prompt = as_vec(mock_vector("text", "an unrelated prompt"));
    double best = -1.0;
    for (const auto& c : kCaptions) {
      best = std::max(best, testsupport::dot(prompt, as_vec(mock_vector("text", c))));
    }
    CHECK(text_similarity("an unrelated prompt", refs, mock) == doctest::Approx(best).epsilon(1e-6));
    CHECK_THROWS_AS(text_similarity("p", make_refs("other-model"), mock), UsageError);
    ReferenceSet empty{EmbeddingMatrix(Modality::kImage, 64, std::string(kMockModelTag)),
                       EmbeddingMatrix(Modality::kText, 64, std::string(kMockModelTag))};
    CHECK_THROWS(text_similarity("p", empty, mock));
  }

  TEST_CASE("a planted 323 of 500 replication scores 64.6 percent") {
    MockBackend mock(planted_plan(323, 0.9));
    const auto r = run_probe(starry(), mock, make_refs(), 0.83);
    CHECK(r.embeddings_only);
    CHECK(r.per_seed.size() == 500);
    CHECK(r.failed_seeds() == 0);
    CHECK(r.buckets.total() == 500);
    CHECK(r.percent_above == doctest::Approx(64.6).epsilon(1e-12));
    CHECK(r.buckets.counts == std::vector<std::size_t>{177, 0, 0, 323});
    CHECK(r.text_similarity == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(r.backend_id == kMockModelTag);
    for (std::size_t i = 0; i < 500; ++i) CHECK(r.per_seed[i].seed == i);
    CHECK(r.probe_id == default_probe_id(starry()));
    // Deterministic across runs.
    MockBackend again(planted_plan(323, 0.9));
    CHECK(run_probe(starry(), again, make_refs(), 0.83) == r);
  }

  TEST_CASE("failed seeds are retried, then excluded") {
    MockBackend mock(planted_plan(0, 0.9, R"(, "generate_failures": {"5": 1, "7": -1})"));
    ProbeOptions opt;
    opt.seeds_per_request = 4;
    const auto r = run_probe(starry(20), mock, make_refs(), 0.83, opt);
    CHECK(r.failed_seeds() == 1);
    CHECK(r.per_seed[5].sim_to_reference);
    CHECK_FALSE(r.per_seed[7].sim_to_reference);
    CHECK_FALSE(r.per_seed[7].error.empty());
    CHECK(r.successful_sims().size() == 19);
    CHECK(r.buckets.total() == 19);

    MockBackend offline(planted_plan(0, 0.9, R"(, "offline": true)"));
    CHECK_THROWS_AS(run_probe(starry(10), offline, make_refs(), 0.83), BackendError);
    CHECK_THROWS_AS(run_probe(starry(10), mock, make_refs("other-model"), 0.83), UsageError);
  }

  TEST_CASE("image mode writes images and supports object detection") {
    testsupport::TempDir dir;
    MockBackend mock(planted_plan(323, 0.9, R"(, "detections": [{"label": "astronaut",
        "positive_count": {"base_seed": 0, "n": 500, "count": 489}}])"));
    ProbeOptions opt;
    opt.image_dir = dir.path();
    opt.probe_id = "p1";
    auto r = run_probe(starry(), mock, make_refs(), 0.83, opt);
    CHECK_FALSE(r.embeddings_only);
    CHECK(r.percent_above == doctest::Approx(64.6).epsilon(1e-12));
    CHECK(fs::exists(dir / "p1" / "0.png"));
    CHECK(fs::exists(dir / "p1" / "499.png"));
    DetectOptions dopt;
    const auto presence = object_presence_rate(r, mock, "astronaut", dopt);
    CHECK(presence.positives == 489);
    CHECK(presence.answered == 500);
    CHECK(presence.rate == doctest::Approx(97.8).epsilon(1e-12));

    const auto ex = band_exemplars(r);
    REQUIRE(ex.size() == 4);
    CHECK(ex[0]);
    CHECK_FALSE(ex[1]);
    CHECK(ex[3]->sim_to_reference == doctest::Approx(0.9).epsilon(1e-6));

    MockBackend plain(planted_plan(10, 0.9));
    const auto emb = run_probe(starry(10), plain, make_refs(), 0.83);
    CHECK_THROWS_AS(object_presence_rate(emb, plain, "astronaut"), ModeError);
  }

  TEST_CASE("detection with no answers is degenerate") {
    testsupport::TempDir dir;
    MockBackend mock(planted_plan(0, 0.9, R"(, "detections": [{"label": "x",
        "failing_seeds": [0, 1, 2]}])"));
    ProbeOptions opt;
    opt.image_dir = dir.path();
    const auto r = run_probe(starry(3), mock, make_refs(), 0.83, opt);
    CHECK_THROWS_AS(object_presence_rate(r, mock, "x"), DegenerateInputError);
  }

  TEST_CASE("seeded sample") {
    const auto a = seeded_sample(100, 10, 4);
    CHECK(a.size() == 10);
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 10);
    CHECK(a == seeded_sample(100, 10, 4));
    CHECK(a != seeded_sample(100, 10, 5));
    CHECK(seeded_sample(5, 5, 1) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    CHECK_THROWS(seeded_sample(5, 9, 1));
  }

  TEST_CASE("baseline rate over slice images") {
    testsupport::TempDir dir;
    std::vector<CaptionRecord> recs;
    std::vector<std::string> digests;
    for (std::uint64_t i = 0; i < 40; ++i) {
      const std::string body = "image-bytes-" + std::to_string(i);
      testsupport::write_text(dir / ("img/" + std::to_string(i) + ".bin"), body);
      if (i % 10 == 0) digests.push_back("\"" + sha256_hex(std::string_view(body)) + "\"");
      recs.push_back({i, "c", "http://u", "img/" + std::to_string(i) + ".bin", {}});
    }
    recs.push_back({99, "no image", "http://u", std::nullopt, {}});
    DatasetSlice slice("s", recs);
    std::string list;
    for (const auto& d : digests) list += (list.empty() ? "" : ",") + d;
    MockBackend mock(MockPlan::from_json(R"({"detections": [{"label": "astronaut",
        "positive_digests": [)" + list + "]}]}"));
    DetectOptions opt;
    opt.base_dir = dir.path();
    const auto all = baseline_object_rate(slice, 40, mock, "astronaut", 1, opt);
    CHECK(all.answered == 40);
    CHECK(all.positives == 4);
    CHECK(all.rate == doctest::Approx(10.0));
    const auto some = baseline_object_rate(slice, 20, mock, "astronaut", 1, opt);
    CHECK(some.answered == 20);
    CHECK(some == baseline_object_rate(slice, 20, mock, "astronaut", 1, opt));
    DatasetSlice none("n", {{1, "c", "http://u", std::nullopt, {}}});
    CHECK_THROWS_AS(baseline_object_rate(none, 10, mock, "astronaut", 1, opt),
                    DegenerateInputError);
  }

  TEST_CASE("result persistence round trip and integrity checks") {
    testsupport::TempDir dir;
    MockBackend mock(planted_plan(30, 0.9, R"(, "generate_failures": {"3": -1})"));
    auto r = run_probe(starry(50), mock, make_refs(), 0.83);
    r.presence = ObjectPresence{"astronaut", 12.5, 6, 48, 1};
    r.baseline_rate = 10.0;
    save_probe_result(r, dir / "p.json");
    CHECK(load_probe_result(dir / "p.json") == r);
    CHECK(serialize_probe_result(parse_probe_result(serialize_probe_result(r))) ==
          serialize_probe_result(r));

    auto bad = serialize_probe_result(r);
    const auto at = bad.find("\"n_seeds\": 50");
    REQUIRE(at != std::string::npos);
    bad.replace(at, 13, "\"n_seeds\": 51");
    CHECK_THROWS_AS(parse_probe_result(bad), IntegrityError);
  }

  TEST_CASE("reference set manifest round trip") {
    testsupport::TempDir dir;
    const auto refs = make_refs();
    save_reference_set(refs, dir / "refs.json");
    CHECK(fs::exists(dir / "refs.image.daem"));
    const auto back = load_reference_set(dir / "refs.json");
    CHECK(back.image_embeddings == refs.image_embeddings);
    CHECK(back.text_embeddings == refs.text_embeddings);
    ReferenceSet mixed{refs.image_embeddings, make_refs("other").text_embeddings};
    CHECK_THROWS_AS(mixed.validate(), UsageError);
  }
}
