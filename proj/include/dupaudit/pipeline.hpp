#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dupaudit/backend.hpp"
#include "dupaudit/report.hpp"

namespace dupaudit {

// Flat "key = value" file. Blank lines and lines starting with '#' are
// ignored. `stages` lists the stages to run, in order; `probe` may repeat
// (one probe per line: "prompt | keyword,keyword | threshold [| base_seed]").
struct PipelineConfig {
  std::filesystem::path base_dir;  // relative paths resolve against this
  std::map<std::string, std::string> values;
  std::vector<std::string> stages;
  std::vector<std::string> probes;

  static PipelineConfig parse(std::string_view text, std::filesystem::path base_dir);
  static PipelineConfig load(const std::filesystem::path& path);

  std::optional<std::string> get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::filesystem::path path(const std::string& key) const;  // UsageError when unset
  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

const std::vector<std::string>& pipeline_stages();

// "mock" (optionally with a plan file), or an http(s) base URL. An empty spec
// falls back to DUPAUDIT_BACKEND_URL, then to "mock".
std::unique_ptr<BackendClient> open_backend(std::string spec,
                                            const std::filesystem::path& mock_plan = {},
                                            const HttpBackendOptions& options = {});

struct StageOutcome {
  std::string stage;
  bool cached = false;
  std::vector<std::filesystem::path> outputs;
};

struct PipelineResult {
  std::filesystem::path workdir;
  std::vector<StageOutcome> stages;
  std::size_t backend_requests = 0;
  std::optional<ReportBundle> report;
};

struct PipelineOptions {
  // Used instead of opening the configured backend. Not owned.
  BackendClient* backend = nullptr;
  bool force = false;  // ignore cached stage state
};

// Runs the declared stages, persisting each artifact under `workdir`. A stage
// whose inputs, parameters and outputs are unchanged since its last run is
// skipped, so an unchanged rerun makes no backend calls and rewrites nothing.
// Failures are rethrown with the stage name and artifact path prepended.
PipelineResult run_pipeline(const PipelineConfig& config, const PipelineOptions& options = {});

}  // namespace dupaudit
