#include "sbsampler.h"

#include <cstring>
#include <string>

#include "common.hpp"
#include "experiment.hpp"

struct sbs_config {
  sbs::ExperimentConfig cfg;
};

struct sbs_report {
  std::string summary_json;
};

namespace {

thread_local std::string tl_error;

sbs_status status_of(const sbs::Error& e) {
  switch (e.code()) {
    case sbs::Errc::config:
      return SBS_ERR_CONFIG;
    case sbs::Errc::io:
      return SBS_ERR_IO;
    case sbs::Errc::numeric:
    case sbs::Errc::domain:
    case sbs::Errc::divergence:
      return SBS_ERR_NUMERIC;
    default:
      return SBS_ERR_RUNTIME;
  }
}

template <typename Fn>
sbs_status guarded(Fn&& fn) {
  try {
    fn();
    tl_error.clear();
    return SBS_OK;
  } catch (const sbs::Error& e) {
    tl_error = e.what();
    return status_of(e);
  } catch (const std::exception& e) {
    tl_error = e.what();
    return SBS_ERR_RUNTIME;
  } catch (...) {
    tl_error = "unknown error";
    return SBS_ERR_RUNTIME;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* sbs_version(void) { return "0.1.0"; }

const char* sbs_last_error(void) { return tl_error.c_str(); }

void sbs_free(char* str) { std::free(str); }

sbs_status sbs_config_load(const char* path, sbs_config** out) {
  if (!path || !out) {
    tl_error = "null argument";
    return SBS_ERR_CONFIG;
  }
  return guarded([&] { *out = new sbs_config{sbs::ExperimentConfig::load(path)}; });
}

sbs_status sbs_config_from_json(const char* json_text, sbs_config** out) {
  if (!json_text || !out) {
    tl_error = "null argument";
    return SBS_ERR_CONFIG;
  }
  return guarded([&] { *out = new sbs_config{sbs::ExperimentConfig::from_json_text(json_text)}; });
}

sbs_status sbs_config_set(sbs_config* cfg, const char* dotted_key, const char* value_json) {
  if (!cfg || !dotted_key || !value_json) {
    tl_error = "null argument";
    return SBS_ERR_CONFIG;
  }
  return guarded([&] { cfg->cfg.override_value(dotted_key, value_json); });
}

sbs_status sbs_config_to_json(const sbs_config* cfg, char** out_json) {
  if (!cfg || !out_json) {
    tl_error = "null argument";
    return SBS_ERR_CONFIG;
  }
  return guarded([&] { *out_json = dup_string(cfg->cfg.to_json_text()); });
}

void sbs_config_free(sbs_config* cfg) { delete cfg; }

sbs_status sbs_run(const sbs_config* cfg, sbs_report** out) {
  if (!cfg || !out) {
    tl_error = "null argument";
    return SBS_ERR_CONFIG;
  }
  return guarded([&] { *out = new sbs_report{sbs::run_experiment(cfg->cfg)}; });
}

const char* sbs_report_summary_json(const sbs_report* report) {
  return report ? report->summary_json.c_str() : "";
}

void sbs_report_free(sbs_report* report) { delete report; }

sbs_status sbs_compare(const char* const* report_paths, int count, char** out_table_csv) {
  if (!report_paths || count < 1 || !out_table_csv) {
    tl_error = "null argument";
    return SBS_ERR_CONFIG;
  }
  return guarded([&] {
    std::vector<std::filesystem::path> paths;
    for (int i = 0; i < count; ++i) paths.emplace_back(report_paths[i]);
    *out_table_csv = dup_string(sbs::compare_reports(paths));
  });
}

}  // extern "C"
