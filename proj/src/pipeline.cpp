#include "dupaudit/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <set>

#include <json.hpp>

#include "dupaudit/cluster.hpp"
#include "dupaudit/dataset.hpp"
#include "dupaudit/embed.hpp"
#include "dupaudit/errors.hpp"
#include "dupaudit/hashing.hpp"
#include "dupaudit/io.hpp"
#include "dupaudit/mock_backend.hpp"
#include "dupaudit/probe.hpp"
#include "dupaudit/text.hpp"

namespace dupaudit {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "workdir",        "backend",          "mock_plan",       "timeout_ms",
      "input",          "format",           "slice",           "image_base",
      "keywords",       "mode",             "match",           "case_fold",
      "max_tokens",     "tokenizer",        "url_policy",      "url_timeout_ms",
      "cache_dir",      "parallelism",      "batch_size",      "max_retries",
      "image_embeddings", "text_embeddings", "tau",            "clusters",
      "noise",          "share_reference",  "share_tau",       "share_denominator",
      "top_n",          "top_clusters",     "top_k_words",     "stopwords",
      "refs",           "refs_cluster",     "probe_seeds",     "probe_base_seed",
      "probe_images",   "probe_steps",      "probe_guidance",  "probe_width",
      "probe_height",   "bucket_edges",     "detect_label",    "baseline_sample",
      "baseline_seed",  "report_format",
  };
  return keys;
}

std::vector<std::string> split_list(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto end = s.find(sep, start);
    if (end == std::string_view::npos) end = s.size();
    const auto item = text::trim(s.substr(start, end - start));
    if (!item.empty()) out.emplace_back(item);
    start = end + 1;
  }
  return out;
}

}  // namespace

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages = {
      "ingest", "filter", "embed", "embed_text", "cluster", "noise", "share",
      "dist",   "refs",   "probe", "detect",     "report"};
  return stages;
}

PipelineConfig PipelineConfig::parse(std::string_view text, fs::path base_dir) {
  PipelineConfig cfg;
  cfg.base_dir = std::move(base_dir);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = text::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(text::trim(line.substr(0, eq)));
    const std::string value(text::trim(line.substr(eq + 1)));
    if (key == "stages") {
      if (!cfg.stages.empty()) throw UsageError("config: stages given twice");
      for (auto& s : split_list(value, ',')) {
        for (auto& t : split_list(s, ' ')) {
          const auto& all = pipeline_stages();
          if (std::find(all.begin(), all.end(), t) == all.end()) {
            throw UsageError("config line " + std::to_string(line_no) + ": unknown stage '" +
                             t + "'");
          }
          if (std::find(cfg.stages.begin(), cfg.stages.end(), t) != cfg.stages.end()) {
            throw UsageError("config: stage '" + t + "' listed twice");
          }
          cfg.stages.push_back(t);
        }
      }
    } else if (key == "probe") {
      cfg.probes.push_back(value);
    } else if (known_keys().count(key)) {
      if (!cfg.values.emplace(key, value).second) {
        throw UsageError("config line " + std::to_string(line_no) + ": '" + key +
                         "' given twice");
      }
    } else {
      throw UsageError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  if (cfg.stages.empty()) throw UsageError("config: no stages declared");
  return cfg;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  return parse(read_file(path), path.parent_path());
}

std::optional<std::string> PipelineConfig::get(const std::string& key) const {
  const auto it = values.find(key);
  if (it == values.end()) return std::nullopt;
  return it->second;
}

std::string PipelineConfig::get_or(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

double PipelineConfig::get_double(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used == v->size()) return d;
  } catch (const std::exception&) {
  }
  throw UsageError("config: '" + key + "' is not a number: " + *v);
}

std::size_t PipelineConfig::get_size(const std::string& key, std::size_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const auto n = std::stoull(*v, &used);
    if (used == v->size() && v->front() != '-') return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
  }
  throw UsageError("config: '" + key + "' is not a non-negative integer: " + *v);
}

bool PipelineConfig::get_bool(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "yes" || *v == "1") return true;
  if (*v == "false" || *v == "no" || *v == "0") return false;
  throw UsageError("config: '" + key + "' is not a boolean: " + *v);
}

fs::path PipelineConfig::resolve(const fs::path& p) const {
  return p.is_relative() ? base_dir / p : p;
}

fs::path PipelineConfig::path(const std::string& key) const {
  const auto v = get(key);
  if (!v || v->empty()) throw UsageError("config: '" + key + "' is required");
  return resolve(*v);
}

std::unique_ptr<BackendClient> open_backend(std::string spec, const fs::path& mock_plan,
                                            const HttpBackendOptions& options) {
  if (spec.empty()) {
    const char* env = std::getenv("DUPAUDIT_BACKEND_URL");
    spec = (env && *env) ? env : "mock";
  }
  if (spec == "mock") {
    MockPlan plan;
    if (!mock_plan.empty()) {
      plan = MockPlan::from_json(read_file(mock_plan), mock_plan.parent_path().string());
    }
    return std::make_unique<MockBackend>(std::move(plan));
  }
  if (!mock_plan.empty()) throw UsageError("a mock plan only applies to the mock backend");
  return make_backend(spec, options);
}

// ---------------------------------------------------------------------------

namespace {

class Runner {
 public:
  Runner(const PipelineConfig& cfg, const PipelineOptions& opts)
      : cfg_(cfg), opts_(opts), work_(cfg.resolve(cfg.get_or("workdir", "work"))) {
    state_path_ = work_ / "pipeline.state.json";
    if (fs::exists(state_path_)) {
      state_ = ordered_json::parse(read_file(state_path_), nullptr, false);
      if (state_.is_discarded() || !state_.is_object()) state_ = ordered_json::object();
    }
    if (!state_.contains("stages")) state_["stages"] = ordered_json::object();
  }

  PipelineResult run() {
    result_.workdir = work_;
    for (const auto& stage : cfg_.stages) dispatch(stage);
    result_.backend_requests = backend_ ? backend_->request_count() - base_requests_ : 0;
    return std::move(result_);
  }

 private:
  bool listed(const std::string& s) const {
    return std::find(cfg_.stages.begin(), cfg_.stages.end(), s) != cfg_.stages.end();
  }

  // ---- artifact locations -------------------------------------------------

  fs::path raw_slice() const { return work_ / "slice.raw.jsonl"; }
  fs::path filter_input() const { return listed("ingest") ? raw_slice() : cfg_.path("slice"); }
  fs::path slice_path() const {
    if (listed("filter")) return work_ / "slice.jsonl";
    return filter_input();
  }
  fs::path image_matrix() const {
    if (listed("embed") || !cfg_.get("image_embeddings")) return work_ / "image.daem";
    return cfg_.path("image_embeddings");
  }
  fs::path text_matrix() const {
    if (listed("embed_text") || !cfg_.get("text_embeddings")) return work_ / "text.daem";
    return cfg_.path("text_embeddings");
  }
  fs::path raw_clusters() const {
    return listed("cluster") ? work_ / "clusters.raw.json" : cfg_.path("clusters");
  }
  std::optional<fs::path> clusters() const {
    if (listed("noise")) return work_ / "clusters.json";
    if (listed("cluster")) return work_ / "clusters.raw.json";
    if (cfg_.get("clusters")) return cfg_.path("clusters");
    return std::nullopt;
  }
  fs::path refs_manifest() const {
    return listed("refs") ? work_ / "refs.json" : cfg_.path("refs");
  }
  fs::path probe_file(std::size_t i) const {
    return work_ / "probes" / ("probe-" + std::to_string(i + 1) + ".json");
  }
  fs::path detect_file(std::size_t i) const {
    return work_ / "probes" / ("probe-" + std::to_string(i + 1) + ".detect.json");
  }
  fs::path image_base() const {
    if (cfg_.get("image_base")) return cfg_.path("image_base");
    if (cfg_.get("input")) return cfg_.path("input").parent_path();
    return cfg_.base_dir;
  }
  fs::path cache_dir() const {
    return cfg_.get("cache_dir") ? cfg_.path("cache_dir") : work_ / "cache";
  }

  // ---- backend ------------------------------------------------------------

  BackendClient& backend() {
    if (!backend_) {
      if (opts_.backend) {
        backend_ = opts_.backend;
      } else {
        HttpBackendOptions ho;
        ho.timeout = std::chrono::milliseconds(cfg_.get_size("timeout_ms", 60000));
        owned_ = open_backend(cfg_.get_or("backend", ""),
                              cfg_.get("mock_plan") ? cfg_.path("mock_plan") : fs::path{}, ho);
        backend_ = owned_.get();
      }
      base_requests_ = backend_->request_count();
    }
    return *backend_;
  }

  std::vector<std::string> backend_params() const {
    std::vector<std::string> p = {"backend=" + cfg_.get_or("backend", "")};
    if (opts_.backend) p.push_back("injected=" + opts_.backend->descriptor().model_tag);
    if (cfg_.get("mock_plan")) p.push_back("plan=" + sha256_hex(read_file(cfg_.path("mock_plan"))));
    if (cfg_.get_or("backend", "").empty() && !opts_.backend) {
      const char* env = std::getenv("DUPAUDIT_BACKEND_URL");
      p.push_back(std::string("env=") + (env ? env : ""));
    }
    return p;
  }

  std::vector<std::string> keys(std::initializer_list<const char*> names) const {
    std::vector<std::string> p;
    for (const char* n : names) p.push_back(std::string(n) + "=" + cfg_.get_or(n, "\x01"));
    return p;
  }

  EmbedOptions embed_options() const {
    EmbedOptions eo;
    eo.cache_dir = cache_dir();
    eo.batch_size = cfg_.get_size("batch_size", 32);
    eo.parallelism = cfg_.get_size("parallelism", 4);
    eo.max_retries = static_cast<int>(cfg_.get_size("max_retries", 2));
    return eo;
  }

  // ---- stage bookkeeping --------------------------------------------------

  std::string rel(const fs::path& p) const {
    const auto r = p.lexically_relative(work_);
    return (r.empty() || *r.begin() == "..") ? p.string() : r.string();
  }

  void run_stage(const std::string& name, const std::vector<fs::path>& inputs,
                 std::vector<std::string> params, const std::vector<fs::path>& outputs,
                 const std::function<void()>& body) {
    const fs::path primary = outputs.empty() ? work_ : outputs.front();
    try {
      std::string material = name;
      for (const auto& p : params) material += '\n' + p;
      for (const auto& in : inputs) {
        if (!fs::exists(in)) throw IoError("missing input artifact " + in.string());
        material += "\ninput " + in.string() + " " + sha256_hex(read_file(in));
      }
      const auto fingerprint = sha256_hex(material);

      auto& entry = state_["stages"][name];
      bool fresh = !opts_.force && entry.is_object() && entry.value("fingerprint", "") == fingerprint;
      if (fresh) {
        const auto& recorded = entry["outputs"];
        for (const auto& out : outputs) {
          const auto key = rel(out);
          if (!recorded.contains(key) || !fs::exists(out) ||
              recorded[key].get<std::string>() != sha256_hex(read_file(out))) {
            fresh = false;
            break;
          }
        }
      }
      if (!fresh) {
        body();
        ordered_json recorded = ordered_json::object();
        for (const auto& out : outputs) {
          if (!fs::exists(out)) throw InvariantError("stage did not produce " + out.string());
          recorded[rel(out)] = sha256_hex(read_file(out));
        }
        state_["stages"][name] = {{"fingerprint", fingerprint}, {"outputs", recorded}};
        save_state();
      }
      result_.stages.push_back({name, fresh, outputs});
    } catch (const Error& e) {
      throw Error(e.code(), "stage '" + name + "' failed (artifact " + primary.string() +
                                "): " + e.what());
    } catch (const std::exception& e) {
      throw Error(ExitCode::kIntegrity, "stage '" + name + "' failed (artifact " +
                                            primary.string() + "): " + e.what());
    }
  }

  void save_state() {
    const auto body = state_.dump(1) + "\n";
    if (fs::exists(state_path_) && read_file(state_path_) == body) return;
    write_file_atomic(state_path_, body);
  }

  // ---- stages -------------------------------------------------------------

  void dispatch(const std::string& stage) {
    if (stage == "ingest") return ingest();
    if (stage == "filter") return filter();
    if (stage == "embed") return embed(Modality::kImage);
    if (stage == "embed_text") return embed(Modality::kText);
    if (stage == "cluster") return cluster();
    if (stage == "noise") return noise();
    if (stage == "share") return share();
    if (stage == "dist") return dist();
    if (stage == "refs") return refs();
    if (stage == "probe") return probe();
    if (stage == "detect") return detect();
    if (stage == "report") return report();
  }

  void ingest() {
    const auto input = cfg_.path("input");
    const auto fmt = cfg_.get_or("format", input.extension() == ".jsonl" ? "jsonl" : "tsv");
    run_stage("ingest", {input}, {"format=" + fmt}, {raw_slice()}, [&] {
      auto loaded = load_metadata(input, parse_metadata_format(fmt));
      save_slice(loaded.slice, raw_slice());
    });
  }

  void filter() {
    auto params = keys({"keywords", "mode", "match", "case_fold", "max_tokens", "tokenizer",
                        "url_policy"});
    const auto tokenizer = cfg_.get_or("tokenizer", "backend");
    if (tokenizer == "backend") {
      for (auto& p : backend_params()) params.push_back(p);
    } else if (tokenizer != "whitespace") {
      throw UsageError("config: tokenizer must be backend or whitespace");
    }
    const auto out = work_ / "slice.jsonl";
    run_stage("filter", {filter_input()}, params, {out}, [&] {
      auto slice = load_slice(filter_input());
      FilterSpec spec;
      spec.keywords = split_list(cfg_.get_or("keywords", ""), ',');
      const auto mode = cfg_.get_or("mode", "all");
      if (mode != "all" && mode != "any") throw UsageError("config: mode must be all or any");
      spec.mode = mode == "all" ? MatchMode::kAll : MatchMode::kAny;
      const auto unit = cfg_.get_or("match", "word");
      if (unit != "word" && unit != "substring") {
        throw UsageError("config: match must be word or substring");
      }
      spec.unit = unit == "word" ? MatchUnit::kWord : MatchUnit::kSubstring;
      spec.case_fold = cfg_.get_bool("case_fold", true);
      slice = filter_by_keywords(slice, spec);

      const auto policy = parse_url_policy(cfg_.get_or("url_policy", "offline"));
      UrlCheckOptions uo;
      uo.timeout = std::chrono::milliseconds(cfg_.get_size("url_timeout_ms", 5000));
      uo.parallelism = cfg_.get_size("parallelism", 8);
      std::unique_ptr<UrlProber> prober;
      if (policy == UrlPolicy::kNetworkHead) prober = make_http_url_prober(uo);
      slice = validate_urls(slice, policy, prober.get(), uo);

      const auto max_tokens = cfg_.get_size("max_tokens", kDefaultMaxTokens);
      if (tokenizer == "backend") {
        BackendTokenizer tok(backend());
        slice = token_length_filter(slice, tok, max_tokens);
      } else {
        WhitespaceTokenizer tok;
        slice = token_length_filter(slice, tok, max_tokens);
      }
      save_slice(slice, out);
    });
  }

  void embed(Modality modality) {
    const bool image = modality == Modality::kImage;
    const auto out = work_ / (image ? "image.daem" : "text.daem");
    const auto failures = work_ / (image ? "image.failures.json" : "text.failures.json");
    auto params = keys({"image_base"});
    for (auto& p : backend_params()) params.push_back(p);
    run_stage(image ? "embed" : "embed_text", {slice_path()}, params, {out, failures}, [&] {
      const auto slice = load_slice(slice_path());
      auto in = inputs_from_slice(slice, modality, image_base());
      auto report = embed_batch(in.inputs, modality, backend(), embed_options());
      save_matrix(report.matrix, out);
      ordered_json f = ordered_json::array();
      auto all = in.failures;
      all.insert(all.end(), report.failures.begin(), report.failures.end());
      std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
      for (const auto& x : all) f.push_back({{"id", x.id}, {"reason", x.reason}});
      write_file_atomic(failures, f.dump(1) + "\n");
    });
  }

  void cluster() {
    const auto out = work_ / "clusters.raw.json";
    run_stage("cluster", {image_matrix(), slice_path()}, keys({"tau"}), {out}, [&] {
      const auto m = load_matrix(image_matrix());
      auto c = cluster_embeddings(m, cfg_.get_double("tau", kDefaultTau));
      c.source.slice_name = load_slice(slice_path()).name();
      save_clustering(c, out);
    });
  }

  static NoiseMode parse_noise(const std::string& v) {
    if (v == "largest") return ManualNoise{{0}};
    std::string_view body = v;
    if (body.rfind("coherence:", 0) == 0) {
      try {
        return CoherenceBelow{std::stod(std::string(body.substr(10)))};
      } catch (const std::exception&) {
        throw UsageError("config: bad noise threshold '" + v + "'");
      }
    }
    if (body.rfind("ids:", 0) == 0) body.remove_prefix(4);
    ManualNoise m;
    for (const auto& id : split_list(body, ',')) {
      try {
        m.cluster_ids.push_back(std::stoi(id));
      } catch (const std::exception&) {
        throw UsageError("config: bad noise cluster id '" + id + "'");
      }
    }
    return m;
  }

  void noise() {
    const auto out = work_ / "clusters.json";
    run_stage("noise", {raw_clusters()}, keys({"noise"}), {out}, [&] {
      const auto mode = parse_noise(cfg_.get("noise").value_or(""));
      save_clustering(mark_noise(load_clustering(raw_clusters()), mode), out);
    });
  }

  EmbeddingVector share_reference(const EmbeddingMatrix& m) const {
    const auto id = cfg_.get_size("share_reference", 0);
    const auto idx = m.index_of(id);
    if (!idx) {
      throw UsageError("share_reference " + std::to_string(id) + " has no image embedding");
    }
    return m.vector(*idx);
  }

  fs::path need_clusters() const {
    const auto c = clusters();
    if (!c) throw UsageError("no clustering available (add a cluster stage or a clusters key)");
    return *c;
  }

  void share() {
    const auto out = work_ / "share.json";
    run_stage("share", {need_clusters(), image_matrix()},
              keys({"share_reference", "share_tau", "share_denominator"}), {out}, [&] {
                if (!cfg_.get("share_reference")) {
                  throw UsageError("config: share needs share_reference (a record id)");
                }
                const auto c = load_clustering(need_clusters());
                const auto m = load_matrix(image_matrix());
                const auto tau_ref = cfg_.get_double("share_tau", 0.85);
                const auto denom_tag = cfg_.get_or("share_denominator", "all");
                const double s = cluster_share(c, m, share_reference(m), tau_ref,
                                               parse_share_denominator(denom_tag));
                ordered_json j;
                j["reference_id"] = cfg_.get_size("share_reference", 0);
                j["tau_ref"] = tau_ref;
                j["denominator"] = denom_tag;
                j["share"] = s;
                write_file_atomic(out, j.dump(1) + "\n");
              });
  }

  std::vector<DistributionRow> distribution_rows(const Clustering& c,
                                                 const EmbeddingMatrix* m) const {
    std::optional<ReferenceMatch> ref;
    if (m && cfg_.get("share_reference")) {
      ref = ReferenceMatch{m, share_reference(*m), cfg_.get_double("share_tau", 0.85)};
    }
    return size_distribution(c, cfg_.get_size("top_n", 30), ref);
  }

  void dist() {
    const auto out = work_ / "distribution.csv";
    std::vector<fs::path> inputs = {need_clusters()};
    if (cfg_.get("share_reference")) inputs.push_back(image_matrix());
    run_stage("dist", inputs, keys({"top_n", "share_reference", "share_tau"}), {out}, [&] {
      const auto c = load_clustering(need_clusters());
      std::optional<EmbeddingMatrix> m;
      if (cfg_.get("share_reference")) m = load_matrix(image_matrix());
      write_file_atomic(out, emit_distribution(distribution_rows(c, m ? &*m : nullptr)));
    });
  }

  void refs() {
    const auto out = work_ / "refs.json";
    std::vector<fs::path> inputs = {image_matrix(), text_matrix()};
    if (cfg_.get("refs_cluster")) inputs.push_back(need_clusters());
    run_stage("refs", inputs, keys({"refs_cluster"}),
              {out, work_ / "refs.image.daem", work_ / "refs.text.daem"}, [&] {
                auto images = load_matrix(image_matrix());
                auto texts = load_matrix(text_matrix());
                if (cfg_.get("refs_cluster")) {
                  const auto c = load_clustering(need_clusters());
                  const auto cid = cfg_.get_size("refs_cluster", 0);
                  if (cid >= c.clusters.size()) {
                    throw UsageError("refs_cluster " + std::to_string(cid) + " does not exist");
                  }
                  const auto& members = c.clusters[cid].member_ids;
                  auto restrict = [&](const EmbeddingMatrix& m) {
                    EmbeddingMatrix r(m.modality(), m.dim(), m.backend_id());
                    for (auto id : members) {
                      if (auto i = m.index_of(id)) r.append(id, m.row(*i));
                    }
                    return r;
                  };
                  images = restrict(images);
                  texts = restrict(texts);
                }
                save_reference_set({std::move(images), std::move(texts)}, out);
              });
  }

  std::vector<double> bucket_edges() const {
    std::vector<double> edges;
    for (const auto& e : split_list(cfg_.get_or("bucket_edges", "0.70,0.80,0.85"), ',')) {
      try {
        edges.push_back(std::stod(e));
      } catch (const std::exception&) {
        throw UsageError("config: bad bucket edge '" + e + "'");
      }
    }
    return edges;
  }

  struct ProbeLine {
    ProbeSpec spec;
    double threshold = 0.0;
  };

  ProbeLine parse_probe(std::size_t i) const {
    const auto& line = cfg_.probes[i];
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
      const auto bar = line.find('|', start);
      parts.emplace_back(text::trim(std::string_view(line).substr(
          start, bar == std::string::npos ? std::string::npos : bar - start)));
      if (bar == std::string::npos) break;
      start = bar + 1;
    }
    if (parts.size() < 3 || parts.size() > 4 || parts[0].empty()) {
      throw UsageError("probe " + std::to_string(i + 1) +
                       ": expected 'prompt | keywords | threshold [| base_seed]'");
    }
    ProbeLine p;
    p.spec.prompt = parts[0];
    p.spec.highlight_keywords = split_list(parts[1], ',');
    p.spec.n_seeds = cfg_.get_size("probe_seeds", kDefaultSeedCount);
    p.spec.base_seed = cfg_.get_size("probe_base_seed", 0);
    p.spec.gen_params.steps = static_cast<int>(cfg_.get_size("probe_steps", 50));
    p.spec.gen_params.guidance = cfg_.get_double("probe_guidance", 7.5);
    p.spec.gen_params.width = static_cast<int>(cfg_.get_size("probe_width", 512));
    p.spec.gen_params.height = static_cast<int>(cfg_.get_size("probe_height", 512));
    try {
      p.threshold = std::stod(parts[2]);
      if (parts.size() == 4) p.spec.base_seed = std::stoull(parts[3]);
    } catch (const std::exception&) {
      throw UsageError("probe " + std::to_string(i + 1) + ": bad threshold or seed");
    }
    return p;
  }

  void probe() {
    if (cfg_.probes.empty()) throw UsageError("config: probe stage needs at least one probe line");
    const auto manifest = refs_manifest();
    const bool images = cfg_.get_bool("probe_images", false);
    for (std::size_t i = 0; i < cfg_.probes.size(); ++i) {
      auto params = keys({"probe_seeds", "probe_base_seed", "probe_images", "probe_steps",
                          "probe_guidance", "probe_width", "probe_height", "bucket_edges",
                          "parallelism", "max_retries"});
      params.push_back("probe=" + cfg_.probes[i]);
      for (auto& p : backend_params()) params.push_back(p);
      const auto out = probe_file(i);
      const auto stem = manifest.parent_path() / manifest.stem();
      run_stage("probe-" + std::to_string(i + 1),
                {manifest, fs::path(stem.string() + ".image.daem"),
                 fs::path(stem.string() + ".text.daem")},
                params, {out}, [&] {
                  const auto line = parse_probe(i);
                  const auto refs = load_reference_set(manifest);
                  ProbeOptions po;
                  po.bucket_edges = bucket_edges();
                  po.parallelism = cfg_.get_size("parallelism", 4);
                  po.max_retries = static_cast<int>(cfg_.get_size("max_retries", 2));
                  po.probe_id = "probe-" + std::to_string(i + 1);
                  if (images) po.image_dir = work_ / "images";
                  auto r = run_probe(line.spec, backend(), refs, line.threshold, po);
                  // Stored relative to the workdir so the result is relocatable.
                  for (auto& s : r.per_seed) {
                    if (!s.image_ref.empty()) s.image_ref = rel(s.image_ref);
                  }
                  save_probe_result(r, out);
                });
    }
  }

  void detect() {
    const auto label = cfg_.get("detect_label");
    if (!label || label->empty()) throw UsageError("config: detect needs detect_label");
    const auto sample = cfg_.get_size("baseline_sample", 0);
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;
    for (std::size_t i = 0; i < cfg_.probes.size(); ++i) {
      inputs.push_back(probe_file(i));
      outputs.push_back(detect_file(i));
    }
    if (inputs.empty()) throw UsageError("config: detect needs probe lines");
    if (sample > 0) inputs.push_back(slice_path());
    auto params = keys({"detect_label", "baseline_sample", "baseline_seed", "batch_size",
                        "image_base"});
    for (auto& p : backend_params()) params.push_back(p);
    run_stage("detect", inputs, params, outputs, [&] {
      DetectOptions d;
      d.batch_size = cfg_.get_size("batch_size", 25);
      d.parallelism = cfg_.get_size("parallelism", 4);
      std::optional<double> baseline;
      if (sample > 0) {
        DetectOptions bd = d;
        bd.base_dir = image_base();
        baseline = baseline_object_rate(load_slice(slice_path()), sample, backend(), *label,
                                        cfg_.get_size("baseline_seed", 0), bd)
                       .rate;
      }
      d.base_dir = work_;
      for (std::size_t i = 0; i < cfg_.probes.size(); ++i) {
        auto r = load_probe_result(probe_file(i));
        r.presence = object_presence_rate(r, backend(), *label, d);
        r.baseline_rate = baseline;
        save_probe_result(r, detect_file(i));
      }
    });
  }

  std::vector<fs::path> report_probe_files() const {
    std::vector<fs::path> files;
    for (std::size_t i = 0; i < cfg_.probes.size(); ++i) {
      if (listed("detect")) files.push_back(detect_file(i));
      else if (listed("probe")) files.push_back(probe_file(i));
    }
    return files;
  }

  ReportBundle build_bundle(const std::optional<fs::path>& clusters_path,
                            const std::vector<fs::path>& probe_files) const {
    ReportBundle b;
    b.metadata.tau = cfg_.get_double("tau", kDefaultTau);
    if (clusters_path) {
      const auto c = load_clustering(*clusters_path);
      const auto slice = load_slice(slice_path());
      const auto stop = cfg_.get("stopwords") ? text::load_stopwords(cfg_.path("stopwords"))
                                              : text::builtin_stopwords();
      b.cluster_table = cluster_table_rows(c, slice, cfg_.get_size("top_clusters", 10),
                                           cfg_.get_size("top_k_words", 8), stop);
      std::optional<EmbeddingMatrix> m;
      if (cfg_.get("share_reference")) m = load_matrix(image_matrix());
      b.distribution = distribution_rows(c, m ? &*m : nullptr);
      b.metadata.tau = c.tau;
      b.metadata.backend_id = c.source.backend_id;
      b.metadata.slice_name = c.source.slice_name;
      b.metadata.artifacts.push_back(rel(*clusters_path));
      b.metadata.artifacts.push_back(rel(slice_path()));
    }
    for (const auto& f : probe_files) {
      b.probes.push_back(load_probe_result(f));
      b.metadata.artifacts.push_back(rel(f));
      if (b.metadata.backend_id.empty()) b.metadata.backend_id = b.probes.back().backend_id;
    }
    return b;
  }

  void report() {
    const auto format = parse_table_format(cfg_.get_or("report_format", "text"));
    const auto dir = work_ / "report";
    const std::string ext(extension_for(format));
    const auto cpath = clusters();
    const auto probes = report_probe_files();
    std::vector<fs::path> inputs = probes;
    if (cpath) {
      inputs.push_back(*cpath);
      inputs.push_back(slice_path());
      if (cfg_.get("share_reference")) inputs.push_back(image_matrix());
    }
    if (cfg_.get("stopwords")) inputs.push_back(cfg_.path("stopwords"));
    const std::vector<fs::path> outputs = {dir / ("cluster_table." + ext),
                                           dir / "distribution.csv",
                                           dir / ("probe_table." + ext), dir / "report.json"};
    ReportBundle bundle;
    run_stage("report", inputs,
              keys({"report_format", "top_clusters", "top_k_words", "top_n", "share_reference",
                    "share_tau", "tau"}),
              outputs, [&] {
                bundle = build_bundle(cpath, probes);
                bundle.metadata.generated_at = report_timestamp();
                write_report_bundle(bundle, dir, format);
              });
    if (result_.stages.back().cached) {
      bundle = build_bundle(cpath, probes);
      const auto meta = ordered_json::parse(read_file(dir / "report.json"), nullptr, false);
      if (meta.is_object()) bundle.metadata.generated_at = meta.value("generated_at", "");
    }
    result_.report = std::move(bundle);
  }

  const PipelineConfig& cfg_;
  PipelineOptions opts_;
  fs::path work_;
  fs::path state_path_;
  ordered_json state_ = ordered_json::object();
  std::unique_ptr<BackendClient> owned_;
  BackendClient* backend_ = nullptr;
  std::size_t base_requests_ = 0;
  PipelineResult result_;
};

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config, const PipelineOptions& options) {
  Runner runner(config, options);
  return runner.run();
}

}  // namespace dupaudit
