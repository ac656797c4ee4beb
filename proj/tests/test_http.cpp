#include <doctest.h>

#include <cstring>

#include "dupaudit/embed.hpp"
#include "dupaudit/errors.hpp"
#include "dupaudit/probe.hpp"
#include "support.hpp"
#include "wire_server.hpp"

using namespace dupaudit;

namespace {

bool same_bits(const EmbeddingVector& a, const EmbeddingVector& b) {
  return a.dim() == b.dim() &&
         std::memcmp(a.values().data(), b.values().data(), a.dim() * sizeof(float)) == 0;
}

int unused_port() {
  httplib::Server s;
  return s.bind_to_any_port("127.0.0.1");  // released when s goes out of scope
}

}  // namespace

TEST_SUITE("http") {
  TEST_CASE("info and embeddings are bit identical to the in-process mock") {
    testsupport::WireServer server;
    auto client = make_backend(server.url());
    MockBackend local;
    for (int i = 0; i < 10; ++i) {
      const auto info = client->info();
      CHECK(info.dim == 64);
      CHECK(info.model_tag == kMockModelTag);
      CHECK(info.max_tokens == 77);
    }
    CHECK(client->backend_id() == local.backend_id());

    std::vector<std::string> texts;
    for (int i = 0; i < 50; ++i) texts.push_back("caption number " + std::to_string(i * 37));
    const auto remote = client->embed_text(texts);
    const auto mine = local.embed_text(texts);
    REQUIRE(remote.size() == 50);
    for (std::size_t i = 0; i < 50; ++i) CHECK(same_bits(*remote[i].embedding, *mine[i].embedding));

    std::vector<Bytes> images;
    for (int i = 0; i < 20; ++i) {
      const auto s = "img" + std::to_string(i);
      images.emplace_back(s.begin(), s.end());
    }
    const auto ri = client->embed_image(images);
    const auto li = local.embed_image(images);
    for (std::size_t i = 0; i < images.size(); ++i) CHECK(same_bits(*ri[i].embedding, *li[i].embedding));
    CHECK(client->request_count() == 2);
  }

  TEST_CASE("per-item errors keep their position") {
    testsupport::WireServer server;
    auto client = make_backend(server.url());
    std::string too_long;
    for (int i = 0; i < 90; ++i) too_long += "w ";
    const std::vector<std::string> texts = {"a", too_long, "b"};
    const auto items = client->embed_text(texts);
    CHECK(items[0].embedding);
    CHECK_FALSE(items[1].embedding);
    CHECK(items[1].error.find("90") != std::string::npos);
    CHECK(items[2].embedding);
    const auto counts = client->count_tokens(texts);
    CHECK(counts[0].count == std::optional<std::size_t>(1));
    CHECK(counts[1].count == std::optional<std::size_t>(90));
  }

  TEST_CASE("generation and detection over the wire") {
    testsupport::WireServer server(MockPlan::from_json(R"({
      "replications": [{"prompt": "p", "reference_text": "r", "seed_sims": {"2": 0.9}}],
      "detections": [{"label": "flag", "positive_seeds": [1]}],
      "generate_failures": {"3": -1}})"));
    auto client = make_backend(server.url());
    MockBackend local(MockPlan::from_json(R"({
      "replications": [{"prompt": "p", "reference_text": "r", "seed_sims": {"2": 0.9}}]})"));
    GenerateRequest req{"p", {1, 2, 3}, {}, GenerateReturn::kEmbeddings};
    const auto remote = client->generate(req);
    REQUIRE(remote.size() == 3);
    CHECK(remote[0].seed == 1);
    CHECK(same_bits(*remote[1].embedding, *local.generate({"p", {2}, {}, GenerateReturn::kEmbeddings})[0].embedding));
    CHECK_FALSE(remote[2].ok());

    req.want = GenerateReturn::kImages;
    const auto imgs = client->generate(req);
    CHECK(*imgs[0].image == *local.generate({"p", {1}, {}, GenerateReturn::kImages})[0].image);
    const std::vector<Bytes> to_check = {*imgs[0].image, *imgs[1].image};
    const auto verdicts = client->detect(to_check, "flag");
    CHECK(verdicts[0].present == std::optional<bool>(true));
    CHECK(verdicts[1].present == std::optional<bool>(false));
  }

  TEST_CASE("a probe through HTTP equals the in-process probe") {
    const char* plan = R"({"replications": [{"prompt": "p", "reference_text": "r",
        "default_sim": 0.4, "replicate": {"n": 60, "count": 20, "sim": 0.9}}]})";
    testsupport::WireServer server(MockPlan::from_json(plan));
    auto client = make_backend(server.url());
    MockBackend local(MockPlan::from_json(plan));
    EmbeddingMatrix img(Modality::kImage, 64, std::string(kMockModelTag));
    img.append(1, mock_vector("text", "r").values());
    EmbeddingMatrix txt(Modality::kText, 64, std::string(kMockModelTag));
    txt.append(1, mock_vector("text", "p").values());
    const ReferenceSet refs{img, txt};
    ProbeSpec spec;
    spec.prompt = "p";
    spec.n_seeds = 60;
    const auto a = run_probe(spec, *client, refs, 0.83);
    const auto b = run_probe(spec, local, refs, 0.83);
    CHECK(serialize_probe_result(a) == serialize_probe_result(b));
    CHECK(a.percent_above == doctest::Approx(100.0 * 20 / 60));
  }

  TEST_CASE("status codes map to error kinds") {
    testsupport::WireServer server;
    auto client = make_backend(server.url());
    const std::vector<std::string> texts = {"a"};
    CHECK_THROWS_AS(client->generate({"p", {}, {}, GenerateReturn::kImages}), UsageError);
    server.fail_with(500);
    try {
      client->embed_text(texts);
      FAIL("expected a backend error");
    } catch (const BackendError& e) {
      CHECK(std::string(e.what()).find("forced failure") != std::string::npos);
      CHECK(e.code() == ExitCode::kBackend);
    }
    server.fail_with(503);
    CHECK_THROWS_AS(client->count_tokens(texts), BackendError);
    server.fail_with(0);
    CHECK_NOTHROW(client->embed_text(texts));

    auto dead = make_backend("http://127.0.0.1:" + std::to_string(unused_port()),
                             HttpBackendOptions{std::chrono::milliseconds(500)});
    CHECK_THROWS_AS(dead->embed_text(texts), BackendError);
    CHECK_THROWS_AS(dead->info(), BackendError);
    CHECK_THROWS_AS(make_backend("ftp://x"), UsageError);
  }

  TEST_CASE("embedding through the client uses the cache like the mock") {
    testsupport::TempDir dir;
    testsupport::WireServer server;
    auto client = make_backend(server.url());
    std::vector<EmbedInput> in = {{3, "x"}, {1, "y"}};
    EmbedOptions opt;
    opt.cache_dir = dir.path();
    const auto first = embed_batch(in, Modality::kText, *client, opt);
    const auto before = server.mock().request_count();
    const auto second = embed_batch(in, Modality::kText, *client, opt);
    CHECK(server.mock().request_count() == before);
    CHECK(first.matrix == second.matrix);
    MockBackend local;
    CHECK(first.matrix == embed_batch(in, Modality::kText, local).matrix);
  }

  TEST_CASE("HEAD prober reports statuses and unreachable hosts") {
    testsupport::WireServer server;
    auto prober = make_http_url_prober({std::chrono::milliseconds(1000), 2});
    CHECK(prober->head(server.url() + "/status/200") == std::optional<int>(200));
    CHECK(prober->head(server.url() + "/status/404") == std::optional<int>(404));
    CHECK(prober->head(server.url() + "/status/200#frag") == std::optional<int>(200));
    CHECK_FALSE(prober->head("http://127.0.0.1:" + std::to_string(unused_port()) + "/x"));
    CHECK_FALSE(prober->head("not a url"));

    std::vector<CaptionRecord> recs = {{1, "a", server.url() + "/status/200", std::nullopt, {}},
                                       {2, "b", server.url() + "/status/404", std::nullopt, {}},
                                       {3, "c", "bad url", std::nullopt, {}}};
    const auto checked = validate_urls(DatasetSlice("s", recs), UrlPolicy::kNetworkHead,
                                       prober.get());
    CHECK_FALSE(checked.records()[0].flags.count(RecordFlag::kUrlInvalid));
    CHECK(checked.records()[1].flags.count(RecordFlag::kUrlInvalid));
    CHECK(checked.records()[2].flags.count(RecordFlag::kUrlInvalid));
  }
}
