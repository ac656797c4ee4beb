#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <json.hpp>

#include <atomic>
#include <mutex>
#include <type_traits>

#include "dupaudit/backend.hpp"
#include "dupaudit/errors.hpp"
#include "dupaudit/hashing.hpp"
#include "dupaudit/mock_backend.hpp"

namespace dupaudit {

using nlohmann::json;

namespace {

std::string error_message(const std::string& body) {
  const auto j = json::parse(body, nullptr, false);
  if (j.is_object() && j.contains("error") && j["error"].is_object()) {
    return j["error"].value("message", body);
  }
  return body;
}

std::vector<std::string> item_errors(const json& response, std::size_t n) {
  std::vector<std::string> errors(n);
  for (const auto& e : response.value("errors", json::array())) {
    const auto idx = e.value("item_index", n);
    if (idx < n) errors[idx] = e.value("message", std::string("item failed"));
  }
  return errors;
}

std::optional<EmbeddingVector> to_vector(const json& j, std::uint32_t dim) {
  if (!j.is_array()) return std::nullopt;
  const auto raw = j.get<std::vector<double>>();
  if (dim != 0 && raw.size() != dim) {
    throw BackendError("embedding of dimension " + std::to_string(raw.size()) +
                       ", expected " + std::to_string(dim));
  }
  std::vector<float> values(raw.begin(), raw.end());
  if (is_unit(values)) return EmbeddingVector::from_unit(std::move(values));
  return normalize(std::span<const double>(raw));
}

template <typename F>
std::invoke_result_t<F> guarded(const char* endpoint, F&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw BackendError(std::string(endpoint) + " returned a malformed response: " + e.what());
  }
}

class HttpBackendClient final : public BackendClient {
 public:
  HttpBackendClient(std::string base_url, const HttpBackendOptions& options)
      : base_url_(std::move(base_url)), options_(options) {}

  BackendDescriptor descriptor() override {
    const auto i = info();
    return {base_url_, i.dim, i.model_tag, false};
  }

  BackendInfo info() override {
    std::lock_guard lock(info_mu_);
    if (info_) return *info_;
    return guarded("/info", [&] {
      const auto j = call("GET", "/info", json());
      BackendInfo i;
      i.model_tag = j.at("model_tag").get<std::string>();
      i.dim = j.at("dim").get<std::uint32_t>();
      i.max_tokens = j.value("max_tokens", std::size_t{77});
      for (const auto& m : j.value("modes", json::array())) i.modes.insert(m.get<std::string>());
      i.deterministic = j.value("deterministic", false);
      if (i.dim == 0) throw BackendError("/info reports dimension 0");
      info_ = i;
      return i;
    });
  }

  std::vector<EmbedItem> embed_text(std::span<const std::string> texts) override {
    return guarded("/embed/text", [&] {
      json body{{"texts", json(std::vector<std::string>(texts.begin(), texts.end()))}};
      return parse_embeddings(work("/embed/text", body), texts.size());
    });
  }

  std::vector<EmbedItem> embed_image(std::span<const Bytes> images) override {
    return guarded("/embed/image", [&] {
      json encoded = json::array();
      for (const auto& img : images) encoded.push_back(base64_encode(img));
      return parse_embeddings(work("/embed/image", json{{"images", encoded}}), images.size());
    });
  }

  std::vector<GeneratedItem> generate(const GenerateRequest& request) override {
    return guarded("/generate", [&] {
      json body{{"prompt", request.prompt},
                {"seeds", request.seeds},
                {"steps", request.params.steps},
                {"guidance", request.params.guidance},
                {"width", request.params.width},
                {"height", request.params.height},
                {"return", request.want == GenerateReturn::kImages ? "images" : "embeddings"}};
      const auto j = work("/generate", body);
      const auto& items = j.at("items");
      if (!items.is_array() || items.size() != request.seeds.size()) {
        throw BackendError("/generate returned a different number of items than seeds");
      }
      const auto dim = info().dim;
      std::vector<GeneratedItem> out(items.size());
      for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        out[i].seed = it.at("seed").get<std::uint64_t>();
        if (out[i].seed != request.seeds[i]) {
          throw BackendError("/generate reordered seeds");
        }
        if (it.contains("error") && !it["error"].is_null()) {
          out[i].error = it["error"].is_object() ? it["error"].value("message", "failed")
                                                 : it["error"].dump();
          continue;
        }
        if (it.contains("image") && it["image"].is_string()) {
          auto bytes = base64_decode(it["image"].get<std::string>());
          if (!bytes) {
            out[i].error = "undecodable image payload";
            continue;
          }
          out[i].image = std::move(*bytes);
        }
        if (it.contains("embedding")) out[i].embedding = to_vector(it["embedding"], dim);
      }
      return out;
    });
  }

  std::vector<DetectItem> detect(std::span<const Bytes> images,
                                 std::string_view label) override {
    return guarded("/detect", [&] {
      json encoded = json::array();
      for (const auto& img : images) encoded.push_back(base64_encode(img));
      const auto j = work("/detect", json{{"images", encoded}, {"label", std::string(label)}});
      const auto& present = j.at("present");
      if (!present.is_array() || present.size() != images.size()) {
        throw BackendError("/detect returned a different number of verdicts than images");
      }
      const auto scores = j.value("scores", json::array());
      const auto errors = item_errors(j, images.size());
      std::vector<DetectItem> out(images.size());
      for (std::size_t i = 0; i < images.size(); ++i) {
        if (present[i].is_boolean()) {
          out[i].present = present[i].get<bool>();
        } else {
          out[i].error = errors[i].empty() ? "no verdict" : errors[i];
        }
        if (i < scores.size() && scores[i].is_number()) out[i].score = scores[i].get<double>();
      }
      return out;
    });
  }

  std::vector<CountItem> count_tokens(std::span<const std::string> texts) override {
    return guarded("/count_tokens", [&] {
      json body{{"texts", json(std::vector<std::string>(texts.begin(), texts.end()))}};
      const auto j = work("/count_tokens", body);
      const auto& counts = j.at("counts");
      if (!counts.is_array() || counts.size() != texts.size()) {
        throw BackendError("/count_tokens returned a different number of counts than texts");
      }
      const auto errors = item_errors(j, texts.size());
      std::vector<CountItem> out(texts.size());
      for (std::size_t i = 0; i < texts.size(); ++i) {
        if (counts[i].is_number_unsigned()) {
          out[i].count = counts[i].get<std::size_t>();
        } else {
          out[i].error = errors[i].empty() ? "no count" : errors[i];
        }
      }
      return out;
    });
  }

  std::size_t request_count() const override { return requests_.load(); }

 private:
  std::vector<EmbedItem> parse_embeddings(const json& j, std::size_t n) {
    const auto& embeddings = j.at("embeddings");
    if (!embeddings.is_array() || embeddings.size() != n) {
      throw BackendError("embedding response has a different number of rows than inputs");
    }
    const auto dim = info().dim;
    const auto errors = item_errors(j, n);
    std::vector<EmbedItem> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i].embedding = to_vector(embeddings[i], dim);
      if (!out[i].embedding) out[i].error = errors[i].empty() ? "no embedding" : errors[i];
    }
    return out;
  }

  json work(const std::string& path, const json& body) {
    ++requests_;
    return call("POST", path, body);
  }

  json call(const std::string& method, const std::string& path, const json& body) {
    httplib::Client client(base_url_);
    const auto secs = options_.timeout.count() / 1000;
    const auto usecs = (options_.timeout.count() % 1000) * 1000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Result res = method == "GET"
                              ? client.Get(path)
                              : client.Post(path, body.dump(), "application/json");
    if (!res) {
      throw BackendError(method + " " + base_url_ + path + " failed: " +
                         httplib::to_string(res.error()));
    }
    if (res->status == 400) {
      throw UsageError("backend rejected " + path + ": " + error_message(res->body));
    }
    if (res->status != 200) {
      throw BackendError(path + " returned HTTP " + std::to_string(res->status) + ": " +
                         error_message(res->body));
    }
    auto j = json::parse(res->body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw BackendError(path + " returned a non-JSON body");
    }
    return j;
  }

  std::string base_url_;
  HttpBackendOptions options_;
  std::atomic<std::size_t> requests_{0};
  std::mutex info_mu_;
  std::optional<BackendInfo> info_;
};

class HttpUrlProber final : public UrlProber {
 public:
  explicit HttpUrlProber(const UrlCheckOptions& options) : options_(options) {}

  std::optional<int> head(const std::string& url) override {
    const auto sep = url.find("://");
    if (sep == std::string::npos) return std::nullopt;
    const auto path_at = url.find_first_of("/?#", sep + 3);
    const std::string origin = url.substr(0, path_at);
    std::string path = path_at == std::string::npos ? "/" : url.substr(path_at);
    if (const auto hash = path.find('#'); hash != std::string::npos) path.resize(hash);
    if (path.empty() || path.front() != '/') path.insert(path.begin(), '/');
    try {
      httplib::Client client(origin);
      const auto secs = options_.timeout.count() / 1000;
      const auto usecs = (options_.timeout.count() % 1000) * 1000;
      client.set_connection_timeout(secs, usecs);
      client.set_read_timeout(secs, usecs);
      auto res = client.Head(path);
      if (!res) return std::nullopt;
      return res->status;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

 private:
  UrlCheckOptions options_;
};

}  // namespace

std::unique_ptr<BackendClient> make_http_backend(std::string base_url,
                                                 const HttpBackendOptions& options) {
  while (!base_url.empty() && base_url.back() == '/') base_url.pop_back();
  return std::make_unique<HttpBackendClient>(std::move(base_url), options);
}

std::unique_ptr<BackendClient> make_backend(std::string_view spec,
                                            const HttpBackendOptions& options) {
  if (spec == "mock") return std::make_unique<MockBackend>();
  if (spec.rfind("http://", 0) != 0 && spec.rfind("https://", 0) != 0) {
    throw UsageError("backend must be 'mock' or an http(s) URL, got '" + std::string(spec) + "'");
  }
  return make_http_backend(std::string(spec), options);
}

std::unique_ptr<UrlProber> make_http_url_prober(const UrlCheckOptions& options) {
  return std::make_unique<HttpUrlProber>(options);
}

std::vector<std::optional<std::size_t>> BackendTokenizer::count(
    std::span<const std::string> texts) {
  std::vector<std::optional<std::size_t>> out;
  out.reserve(texts.size());
  for (std::size_t start = 0; start < texts.size(); start += batch_size_) {
    const auto batch = texts.subspan(start, std::min(batch_size_, texts.size() - start));
    for (auto& item : client_.count_tokens(batch)) out.push_back(item.count);
  }
  return out;
}

}  // namespace dupaudit
