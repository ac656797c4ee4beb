#pragma once

// Minimal HTTP server speaking the backend wire contract on top of the
// in-process mock. Used to exercise the HTTP client end to end.

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <thread>

#include "dupaudit/errors.hpp"
#include "dupaudit/hashing.hpp"
#include "dupaudit/mock_backend.hpp"

namespace testsupport {

class WireServer {
 public:
  explicit WireServer(dupaudit::MockPlan plan = {}) : mock_(std::move(plan)) {
    using nlohmann::json;
    server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"status":"ok"})", "application/json");
    });
    server_.Get("/info", [this](const httplib::Request&, httplib::Response& res) {
      const auto i = mock_.info();
      json j{{"model_tag", i.model_tag},
             {"dim", i.dim},
             {"max_tokens", i.max_tokens},
             {"modes", json(std::vector<std::string>(i.modes.begin(), i.modes.end()))},
             {"deterministic", i.deterministic}};
      res.set_content(j.dump(), "application/json");
    });
    post("/embed/text", [this](const json& in) {
      const auto texts = in.at("texts").get<std::vector<std::string>>();
      return embeddings(mock_.embed_text(texts));
    });
    post("/embed/image", [this](const json& in) {
      std::vector<dupaudit::Bytes> images;
      for (const auto& s : in.at("images")) {
        images.push_back(dupaudit::base64_decode(s.get<std::string>()).value_or(dupaudit::Bytes{}));
      }
      return embeddings(mock_.embed_image(images));
    });
    post("/generate", [this](const json& in) {
      dupaudit::GenerateRequest r;
      r.prompt = in.at("prompt").get<std::string>();
      r.seeds = in.at("seeds").get<std::vector<std::uint64_t>>();
      r.params.steps = in.value("steps", r.params.steps);
      r.params.guidance = in.value("guidance", r.params.guidance);
      r.params.width = in.value("width", r.params.width);
      r.params.height = in.value("height", r.params.height);
      r.want = in.value("return", std::string("images")) == "images"
                   ? dupaudit::GenerateReturn::kImages
                   : dupaudit::GenerateReturn::kEmbeddings;
      json items = json::array();
      for (const auto& it : mock_.generate(r)) {
        json j{{"seed", it.seed}};
        if (!it.error.empty()) {
          j["error"] = {{"code", "generation_failed"}, {"message", it.error}};
        } else if (it.image) {
          j["image"] = dupaudit::base64_encode(*it.image);
        } else if (it.embedding) {
          j["embedding"] = values(*it.embedding);
        }
        items.push_back(std::move(j));
      }
      return json{{"items", items}};
    });
    post("/detect", [this](const json& in) {
      std::vector<dupaudit::Bytes> images;
      for (const auto& s : in.at("images")) {
        images.push_back(dupaudit::base64_decode(s.get<std::string>()).value_or(dupaudit::Bytes{}));
      }
      json present = json::array();
      json scores = json::array();
      json errors = json::array();
      const auto verdicts = mock_.detect(images, in.at("label").get<std::string>());
      for (std::size_t i = 0; i < verdicts.size(); ++i) {
        const auto& v = verdicts[i];
        present.push_back(v.present ? json(*v.present) : json(nullptr));
        scores.push_back(v.score);
        if (!v.error.empty()) errors.push_back({{"item_index", i}, {"message", v.error}});
      }
      return json{{"present", present}, {"scores", scores}, {"errors", errors}};
    });
    post("/count_tokens", [this](const json& in) {
      const auto texts = in.at("texts").get<std::vector<std::string>>();
      json counts = json::array();
      json errors = json::array();
      const auto out = mock_.count_tokens(texts);
      for (std::size_t i = 0; i < out.size(); ++i) {
        counts.push_back(out[i].count ? json(*out[i].count) : json(nullptr));
        if (!out[i].error.empty()) errors.push_back({{"item_index", i}, {"message", out[i].error}});
      }
      return json{{"counts", counts}, {"errors", errors}};
    });
    // GET handlers also answer HEAD.
    server_.Get(R"(/status/(\d+))", [](const httplib::Request& req, httplib::Response& res) {
      res.status = std::stoi(req.matches[1]);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~WireServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int port() const { return port_; }
  dupaudit::MockBackend& mock() { return mock_; }
  // When non-zero, every POST answers with this status and an error body.
  void fail_with(int status) { fail_status_ = status; }

 private:
  template <typename F>
  void post(const std::string& path, F fn) {
    server_.Post(path, [this, fn](const httplib::Request& req, httplib::Response& res) {
      using nlohmann::json;
      if (const int s = fail_status_.load(); s != 0) {
        res.status = s;
        res.set_content(json{{"error", {{"code", "forced"}, {"message", "forced failure"}}}}.dump(),
                        "application/json");
        return;
      }
      try {
        res.set_content(fn(json::parse(req.body)).dump(), "application/json");
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", {{"code", "bad_request"}, {"message", e.what()}}}}.dump(),
                        "application/json");
      }
    });
  }

  static nlohmann::json values(const dupaudit::EmbeddingVector& v) {
    auto j = nlohmann::json::array();
    for (float f : v.values()) j.push_back(f);
    return j;
  }

  nlohmann::json embeddings(const std::vector<dupaudit::EmbedItem>& items) {
    using nlohmann::json;
    json rows = json::array();
    json errors = json::array();
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].embedding) {
        rows.push_back(values(*items[i].embedding));
      } else {
        rows.push_back(nullptr);
        errors.push_back({{"item_index", i}, {"message", items[i].error}});
      }
    }
    return json{{"embeddings", rows}, {"dim", dupaudit::kMockDim}, {"errors", errors}};
  }

  dupaudit::MockBackend mock_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> fail_status_{0};
};

}  // namespace testsupport
