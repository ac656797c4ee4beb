// dupaudit: command-line front end for the duplication audit library.

#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dupaudit/cluster.hpp"
#include "dupaudit/dataset.hpp"
#include "dupaudit/embed.hpp"
#include "dupaudit/errors.hpp"
#include "dupaudit/io.hpp"
#include "dupaudit/pipeline.hpp"
#include "dupaudit/probe.hpp"
#include "dupaudit/report.hpp"
#include "dupaudit/text.hpp"

namespace fs = std::filesystem;
using namespace dupaudit;

namespace {

struct Globals {
  std::string backend;
  std::string mock_plan;
  std::size_t timeout_ms = 60000;
  std::string config;

  std::unique_ptr<BackendClient> open() const {
    HttpBackendOptions o;
    o.timeout = std::chrono::milliseconds(timeout_ms);
    return open_backend(backend, mock_plan, o);
  }
};

std::vector<std::string> split_csv_arg(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!text::trim(cur).empty()) out.emplace_back(text::trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!text::trim(cur).empty()) out.emplace_back(text::trim(cur));
  return out;
}

void emit(const std::string& body, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << body;
  } else {
    write_file_atomic(out, body);
  }
}

NoiseMode parse_noise_arg(const std::string& v) {
  if (v == "largest") return ManualNoise{{0}};
  if (v.rfind("coherence:", 0) == 0) return CoherenceBelow{std::stod(v.substr(10))};
  ManualNoise m;
  for (const auto& id : split_csv_arg(v.rfind("ids:", 0) == 0 ? v.substr(4) : v)) {
    m.cluster_ids.push_back(std::stoi(id));
  }
  return m;
}

std::optional<ReferenceMatch> reference_match(const std::optional<EmbeddingMatrix>& m,
                                              std::optional<std::uint64_t> ref_id,
                                              double tau_ref) {
  if (!m || !ref_id) return std::nullopt;
  const auto idx = m->index_of(*ref_id);
  if (!idx) throw UsageError("reference id " + std::to_string(*ref_id) + " is not in the matrix");
  return ReferenceMatch{&*m, m->vector(*idx), tau_ref};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dataset duplication audit for text-to-image training data"};
  app.require_subcommand(0, 1);
  Globals g;
  if (const char* env = std::getenv("DUPAUDIT_BACKEND_URL"); env && *env) g.backend = env;
  app.add_option("--config", g.config, "Pipeline config file (runs the pipeline)");
  app.add_option("--backend", g.backend, "Backend: 'mock' or an http(s) base URL")
      ->envname("DUPAUDIT_BACKEND_URL");
  app.add_option("--mock-plan", g.mock_plan, "Planted-fixture plan for the mock backend");
  app.add_option("--timeout-ms", g.timeout_ms, "Backend request timeout");
  app.fallthrough();

  std::function<int()> action;

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Load a metadata export into a slice");
  std::string in_path, in_format = "tsv", out_path;
  ingest->add_option("--input", in_path)->required();
  ingest->add_option("--format", in_format)->check(CLI::IsMember({"tsv", "jsonl"}));
  ingest->add_option("--out", out_path)->required();
  ingest->callback([&] {
    action = [&] {
      auto loaded = load_metadata(in_path, parse_metadata_format(in_format));
      save_slice(loaded.slice, out_path);
      std::cerr << "ingested " << loaded.slice.records().size() << " records ("
                << loaded.skipped << " malformed rows skipped)\n";
      return 0;
    };
  });

  // filter
  auto* filter = app.add_subcommand("filter", "Keyword, URL and token-length filtering");
  std::string slice_path, keywords, mode = "all", match = "word", url_policy = "offline";
  std::string tokenizer = "backend";
  bool no_case_fold = false;
  std::size_t max_tokens = kDefaultMaxTokens, url_timeout_ms = 5000, parallelism = 8;
  filter->add_option("--slice", slice_path)->required();
  filter->add_option("--keywords", keywords, "Comma-separated keywords");
  filter->add_option("--mode", mode)->check(CLI::IsMember({"all", "any"}));
  filter->add_option("--match", match)->check(CLI::IsMember({"word", "substring"}));
  filter->add_flag("--no-case-fold", no_case_fold);
  filter->add_option("--max-tokens", max_tokens);
  filter->add_option("--tokenizer", tokenizer)->check(CLI::IsMember({"backend", "whitespace"}));
  filter->add_option("--url-policy", url_policy);
  filter->add_option("--url-timeout-ms", url_timeout_ms);
  filter->add_option("--parallelism", parallelism);
  filter->add_option("--out", out_path)->required();
  filter->callback([&] {
    action = [&] {
      auto slice = load_slice(slice_path);
      FilterSpec spec;
      spec.keywords = split_csv_arg(keywords);
      spec.mode = mode == "all" ? MatchMode::kAll : MatchMode::kAny;
      spec.unit = match == "word" ? MatchUnit::kWord : MatchUnit::kSubstring;
      spec.case_fold = !no_case_fold;
      slice = filter_by_keywords(slice, spec);
      const auto policy = parse_url_policy(url_policy);
      UrlCheckOptions uo{std::chrono::milliseconds(url_timeout_ms), parallelism};
      std::unique_ptr<UrlProber> prober;
      if (policy == UrlPolicy::kNetworkHead) prober = make_http_url_prober(uo);
      slice = validate_urls(slice, policy, prober.get(), uo);
      if (tokenizer == "backend") {
        auto client = g.open();
        BackendTokenizer tok(*client);
        slice = token_length_filter(slice, tok, max_tokens);
      } else {
        WhitespaceTokenizer tok;
        slice = token_length_filter(slice, tok, max_tokens);
      }
      save_slice(slice, out_path);
      std::cerr << slice.active_count() << " of " << slice.records().size()
                << " records active\n";
      return 0;
    };
  });

  // embed
  auto* embed = app.add_subcommand("embed", "Embed slice images or captions");
  std::string modality = "image", image_base, cache_dir;
  EmbedOptions eo;
  embed->add_option("--slice", slice_path)->required();
  embed->add_option("--modality", modality)->check(CLI::IsMember({"image", "text"}));
  embed->add_option("--image-base", image_base, "Directory relative image paths resolve against");
  embed->add_option("--cache-dir", cache_dir);
  embed->add_option("--batch-size", eo.batch_size);
  embed->add_option("--parallelism", eo.parallelism);
  embed->add_option("--max-retries", eo.max_retries);
  embed->add_option("--out", out_path)->required();
  embed->callback([&] {
    action = [&] {
      const auto slice = load_slice(slice_path);
      const auto mod = parse_modality(modality);
      auto inputs = inputs_from_slice(slice, mod,
                                      image_base.empty() ? fs::path(slice_path).parent_path()
                                                         : fs::path(image_base));
      eo.cache_dir = cache_dir;
      auto client = g.open();
      auto report = embed_batch(inputs.inputs, mod, *client, eo);
      save_matrix(report.matrix, out_path);
      for (const auto& f : inputs.failures) std::cerr << "skipped " << f.id << ": " << f.reason << "\n";
      for (const auto& f : report.failures) std::cerr << "failed " << f.id << ": " << f.reason << "\n";
      std::cerr << report.matrix.size() << " embedded, " << report.cache_hits << " from cache, "
                << report.backend_requests << " backend requests\n";
      return 0;
    };
  });

  // cluster
  auto* cluster = app.add_subcommand("cluster", "Greedy near-duplicate clustering");
  std::string matrix_path, omit;
  double tau = kDefaultTau;
  cluster->add_option("--matrix", matrix_path)->required();
  cluster->add_option("--tau", tau, "Assignment threshold in (0, 1]");
  cluster->add_option("--slice", slice_path, "Slice name recorded in the output");
  cluster->add_option("--omit", omit, "Noise clusters: largest | ids:0,3 | coherence:0.5");
  cluster->add_option("--out", out_path)->required();
  cluster->callback([&] {
    action = [&] {
      auto c = cluster_embeddings(load_matrix(matrix_path), tau);
      if (!slice_path.empty()) c.source.slice_name = load_slice(slice_path).name();
      if (!omit.empty()) c = mark_noise(std::move(c), parse_noise_arg(omit));
      save_clustering(c, out_path);
      std::cerr << c.clusters.size() << " clusters at tau " << format_similarity(tau) << "\n";
      return 0;
    };
  });

  // keywords
  auto* kw = app.add_subcommand("keywords", "Cluster table with frequent words");
  std::string clusters_path, format = "text", stopwords;
  std::size_t top_clusters = 10, top_k = 8;
  kw->add_option("--clusters", clusters_path)->required();
  kw->add_option("--slice", slice_path)->required();
  kw->add_option("--top-clusters", top_clusters);
  kw->add_option("--top-k", top_k);
  kw->add_option("--stopwords", stopwords, "Stopword file replacing the built-in list");
  kw->add_option("--format", format)->check(CLI::IsMember({"text", "csv", "markdown"}));
  kw->add_option("--out", out_path);
  kw->callback([&] {
    action = [&] {
      const auto stop = stopwords.empty() ? text::builtin_stopwords() : text::load_stopwords(stopwords);
      emit(emit_cluster_table(load_clustering(clusters_path), load_slice(slice_path), top_clusters,
                              top_k, parse_table_format(format), stop),
           out_path);
      return 0;
    };
  });

  // share
  auto* share = app.add_subcommand("share", "Share of records in clusters matching a reference");
  std::optional<std::uint64_t> ref_id;
  double tau_ref = 0.85;
  std::string denominator = "all";
  share->add_option("--clusters", clusters_path)->required();
  share->add_option("--matrix", matrix_path, "Image embeddings holding the cluster leaders")
      ->required();
  share->add_option("--reference-id", ref_id, "Record whose embedding is the reference")
      ->required();
  share->add_option("--tau-ref", tau_ref);
  share->add_option("--denominator", denominator);
  share->callback([&] {
    action = [&] {
      const auto m = load_matrix(matrix_path);
      const auto idx = m.index_of(*ref_id);
      if (!idx) throw UsageError("reference id " + std::to_string(*ref_id) + " is not in the matrix");
      const double s = cluster_share(load_clustering(clusters_path), m, m.vector(*idx), tau_ref,
                                     parse_share_denominator(denominator));
      std::cout << format_similarity(s) << "\n";
      return 0;
    };
  });

  // dist
  auto* dist = app.add_subcommand("dist", "Cluster size distribution as CSV");
  std::size_t top_n = 30;
  dist->add_option("--clusters", clusters_path)->required();
  dist->add_option("--matrix", matrix_path);
  dist->add_option("--reference-id", ref_id);
  dist->add_option("--tau-ref", tau_ref);
  dist->add_option("--top-n", top_n);
  dist->add_option("--out", out_path);
  dist->callback([&] {
    action = [&] {
      std::optional<EmbeddingMatrix> m;
      if (!matrix_path.empty()) m = load_matrix(matrix_path);
      emit(emit_distribution(load_clustering(clusters_path), top_n,
                             reference_match(m, ref_id, tau_ref)),
           out_path);
      return 0;
    };
  });

  // probe
  auto* probe = app.add_subcommand("probe", "Multi-seed replication probe");
  std::string refs_path, ref_images, ref_texts, prompt, image_dir, probe_id;
  double threshold = 0.0;
  ProbeSpec spec;
  ProbeOptions po;
  probe->add_option("--refs", refs_path, "Reference manifest");
  probe->add_option("--ref-images", ref_images, "Reference image embeddings");
  probe->add_option("--ref-texts", ref_texts, "Reference caption embeddings");
  probe->add_option("--prompt", spec.prompt)->required();
  probe->add_option("--keywords", keywords, "Highlighted keywords");
  probe->add_option("--threshold", threshold)->required();
  probe->add_option("--seeds", spec.n_seeds);
  probe->add_option("--base-seed", spec.base_seed);
  probe->add_option("--steps", spec.gen_params.steps);
  probe->add_option("--guidance", spec.gen_params.guidance);
  probe->add_option("--width", spec.gen_params.width);
  probe->add_option("--height", spec.gen_params.height);
  probe->add_option("--bucket-edges", po.bucket_edges)->delimiter(',');
  probe->add_option("--parallelism", po.parallelism);
  probe->add_option("--image-dir", image_dir, "Persist generated images (enables detect)");
  probe->add_option("--probe-id", probe_id);
  probe->add_option("--out", out_path)->required();
  probe->callback([&] {
    action = [&] {
      ReferenceSet refs;
      if (!refs_path.empty()) {
        refs = load_reference_set(refs_path);
      } else if (!ref_images.empty() && !ref_texts.empty()) {
        refs = {load_matrix(ref_images), load_matrix(ref_texts)};
        refs.validate();
      } else {
        throw UsageError("probe needs --refs or both --ref-images and --ref-texts");
      }
      spec.highlight_keywords = split_csv_arg(keywords);
      po.image_dir = image_dir;
      po.probe_id = probe_id;
      auto client = g.open();
      const auto r = run_probe(spec, *client, refs, threshold, po);
      save_probe_result(r, out_path);
      std::cerr << r.probe_id << ": " << format_percent(r.percent_above) << "% above "
                << format_similarity(threshold) << ", text similarity "
                << format_similarity(r.text_similarity) << ", " << r.failed_seeds()
                << " failed seeds\n";
      return 0;
    };
  });

  // detect
  auto* detect = app.add_subcommand("detect", "Object presence rate over a probe's images");
  std::string probe_path, label, base_dir;
  DetectOptions dopt;
  detect->add_option("--probe", probe_path)->required();
  detect->add_option("--label", label)->required();
  detect->add_option("--base-dir", base_dir, "Directory relative image paths resolve against");
  detect->add_option("--batch-size", dopt.batch_size);
  detect->add_option("--out", out_path, "Updated probe result (defaults to --probe)");
  detect->callback([&] {
    action = [&] {
      auto r = load_probe_result(probe_path);
      dopt.base_dir = base_dir;
      auto client = g.open();
      r.presence = object_presence_rate(r, *client, label, dopt);
      save_probe_result(r, out_path.empty() ? probe_path : out_path);
      std::cout << format_percent(r.presence->rate) << "%\n";
      return 0;
    };
  });

  // baseline
  auto* baseline = app.add_subcommand("baseline", "Object presence rate over training images");
  std::size_t sample_n = 1000;
  std::uint64_t sample_seed = 0;
  std::vector<std::string> attach;
  baseline->add_option("--slice", slice_path)->required();
  baseline->add_option("--label", label)->required();
  baseline->add_option("--sample", sample_n);
  baseline->add_option("--seed", sample_seed);
  baseline->add_option("--image-base", image_base);
  baseline->add_option("--attach", attach, "Probe results that record the baseline rate");
  baseline->callback([&] {
    action = [&] {
      dopt.base_dir = image_base.empty() ? fs::path(slice_path).parent_path() : fs::path(image_base);
      auto client = g.open();
      const auto p = baseline_object_rate(load_slice(slice_path), sample_n, *client, label,
                                          sample_seed, dopt);
      for (const auto& f : attach) {
        auto r = load_probe_result(f);
        r.baseline_rate = p.rate;
        save_probe_result(r, f);
      }
      std::cout << format_percent(p.rate) << "% (" << p.positives << " of " << p.answered
                << ", " << p.failed << " failed)\n";
      return 0;
    };
  });

  // report
  auto* report = app.add_subcommand("report", "Render report tables");
  std::vector<std::string> probe_paths;
  std::string what = "bundle";
  report->add_option("--clusters", clusters_path);
  report->add_option("--slice", slice_path);
  report->add_option("--probes", probe_paths);
  report->add_option("--matrix", matrix_path);
  report->add_option("--reference-id", ref_id);
  report->add_option("--tau-ref", tau_ref);
  report->add_option("--top-clusters", top_clusters);
  report->add_option("--top-k", top_k);
  report->add_option("--top-n", top_n);
  report->add_option("--table", what, "bundle | clusters | probes")
      ->check(CLI::IsMember({"bundle", "clusters", "probes"}));
  report->add_option("--format", format)->check(CLI::IsMember({"text", "csv", "markdown"}));
  report->add_option("--out", out_path, "Directory for a bundle, file for a single table");
  report->callback([&] {
    action = [&] {
      const auto fmt = parse_table_format(format);
      std::vector<ProbeResult> probes;
      for (const auto& p : probe_paths) probes.push_back(load_probe_result(p));
      if (what == "probes") {
        emit(emit_probe_table(probes, fmt), out_path);
        return 0;
      }
      if (clusters_path.empty() || slice_path.empty()) {
        throw UsageError("cluster tables need --clusters and --slice");
      }
      const auto c = load_clustering(clusters_path);
      const auto slice = load_slice(slice_path);
      if (what == "clusters") {
        emit(emit_cluster_table(c, slice, top_clusters, top_k, fmt), out_path);
        return 0;
      }
      if (out_path.empty()) throw UsageError("a report bundle needs --out DIR");
      std::optional<EmbeddingMatrix> m;
      if (!matrix_path.empty()) m = load_matrix(matrix_path);
      ReportBundle b;
      b.cluster_table = cluster_table_rows(c, slice, top_clusters, top_k, text::builtin_stopwords());
      b.distribution = size_distribution(c, top_n, reference_match(m, ref_id, tau_ref));
      b.probes = std::move(probes);
      b.metadata = {c.tau, c.source.backend_id, c.source.slice_name, report_timestamp(),
                    {clusters_path, slice_path}};
      for (const auto& p : probe_paths) b.metadata.artifacts.push_back(p);
      for (const auto& p : write_report_bundle(b, out_path, fmt)) std::cerr << p.string() << "\n";
      return 0;
    };
  });

  // pipeline
  auto* pipeline = app.add_subcommand("pipeline", "Run the stages declared in a config file");
  bool force = false;
  pipeline->add_option("--config", g.config);
  pipeline->add_flag("--force", force, "Ignore cached stage state");
  auto run_pipeline_action = [&] {
    if (g.config.empty()) throw UsageError("pipeline needs --config PATH");
    const auto cfg = PipelineConfig::load(g.config);
    PipelineOptions opts;
    opts.force = force;
    std::unique_ptr<BackendClient> client;
    if (!g.backend.empty() || !g.mock_plan.empty()) {
      // Command-line backend settings override the config file.
      client = g.open();
      opts.backend = client.get();
    }
    const auto result = run_pipeline(cfg, opts);
    for (const auto& s : result.stages) {
      std::cerr << s.stage << (s.cached ? ": cached\n" : ": done\n");
    }
    std::cerr << result.backend_requests << " backend requests\n";
    return 0;
  };
  pipeline->callback([&] { action = run_pipeline_action; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (!action) {
      if (g.config.empty()) {
        std::cerr << app.help();
        return static_cast<int>(ExitCode::kUsage);
      }
      action = run_pipeline_action;
    }
    return action();
  } catch (const Error& e) {
    std::cerr << "dupaudit: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::invalid_argument& e) {
    std::cerr << "dupaudit: bad argument: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  } catch (const std::exception& e) {
    std::cerr << "dupaudit: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kIntegrity);
  }
}
