/* C interface to the controlled-diffusion sampler library.
 *
 * All entry points return a status code; on failure sbs_last_error() gives a
 * thread-local description.  Objects are opaque handles released with their
 * matching _free function.  Strings returned through char** are owned by the
 * caller and released with sbs_free().
 */
#ifndef SBSAMPLER_H
#define SBSAMPLER_H

#ifdef __cplusplus
extern "C" {
#endif

typedef enum sbs_status {
  SBS_OK = 0,
  SBS_ERR_RUNTIME = 1,
  SBS_ERR_CONFIG = 2,
  SBS_ERR_IO = 3,
  SBS_ERR_NUMERIC = 4
} sbs_status;

typedef struct sbs_config sbs_config;
typedef struct sbs_report sbs_report;

const char* sbs_version(void);
const char* sbs_last_error(void);
void sbs_free(char* str);

/* Configuration: JSON text or file, strict keys; dotted-path overrides take a
 * JSON literal, e.g. sbs_config_set(cfg, "loss.lambda", "0.5"). */
sbs_status sbs_config_load(const char* path, sbs_config** out);
sbs_status sbs_config_from_json(const char* json_text, sbs_config** out);
sbs_status sbs_config_set(sbs_config* cfg, const char* dotted_key, const char* value_json);
sbs_status sbs_config_to_json(const sbs_config* cfg, char** out_json);
void sbs_config_free(sbs_config* cfg);

/* Full experiment per seed (pretrain, train, evaluate); artifacts are written
 * under the configured output directory. */
sbs_status sbs_run(const sbs_config* cfg, sbs_report** out);
const char* sbs_report_summary_json(const sbs_report* report);
void sbs_report_free(sbs_report* report);

/* Cross-run comparison table (CSV) from persisted report.json files. */
sbs_status sbs_compare(const char* const* report_paths, int count, char** out_table_csv);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* SBSAMPLER_H */
