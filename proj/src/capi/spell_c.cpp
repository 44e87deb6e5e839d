// SPDX-License-Identifier: Apache-2.0
#include "spell/spell.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "spell/eval.hpp"

struct spell_dataset {
  spell::Dataset data;
};

struct spell_config {
  spell::TrainConfig config;
};

struct spell_model {
  std::unique_ptr<spell::SpellModel<float>> model;
  std::vector<spell::EpochRecord> history;
  bool trained = false;
};

namespace {

thread_local std::string g_last_error;

spell_status status_of(spell::ErrorKind kind) {
  using spell::ErrorKind;
  switch (kind) {
    case ErrorKind::kDimension: return SPELL_ERR_DIMENSION;
    case ErrorKind::kState: return SPELL_ERR_STATE;
    case ErrorKind::kValidation: return SPELL_ERR_VALIDATION;
    case ErrorKind::kDegenerateBatch: return SPELL_ERR_DEGENERATE_BATCH;
    case ErrorKind::kUndefinedMetric: return SPELL_ERR_UNDEFINED_METRIC;
    case ErrorKind::kNumeric: return SPELL_ERR_NUMERIC;
    case ErrorKind::kIo: return SPELL_ERR_IO;
    case ErrorKind::kFormat: return SPELL_ERR_FORMAT;
  }
  return SPELL_ERR_INTERNAL;
}

spell_status set_error(spell_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

// Runs `body`, translating exceptions into status codes.
template <typename F>
spell_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return SPELL_OK;
  } catch (const spell::Error& e) {
    return set_error(status_of(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(SPELL_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(SPELL_ERR_INTERNAL, e.what());
  }
}

#define SPELL_REQUIRE(ptr)                                                    \
  do {                                                                        \
    if ((ptr) == nullptr) {                                                   \
      return set_error(SPELL_ERR_ARGUMENT, std::string(__func__) + ": '" #ptr \
                                               "' must not be NULL");         \
    }                                                                         \
  } while (0)

const spell::TrainConfig& config_or_default(const spell_config* c) {
  static const spell::TrainConfig defaults;
  return c ? c->config : defaults;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) spell::fail(spell::ErrorKind::kIo, "cannot write " + path);
  out << text;
  out.flush();
  if (!out) spell::fail(spell::ErrorKind::kIo, "failed writing " + path);
}

std::vector<std::string> split_list(const char* text) {
  std::vector<std::string> out;
  if (text == nullptr) return out;
  std::string item;
  for (const char* p = text;; ++p) {
    if (*p == ',' || *p == '\0') {
      if (!item.empty()) out.push_back(item);
      item.clear();
      if (*p == '\0') break;
    } else if (*p != ' ') {
      item.push_back(*p);
    }
  }
  return out;
}

}  // namespace

extern "C" {

const char* spell_status_name(spell_status status) {
  switch (status) {
    case SPELL_OK: return "ok";
    case SPELL_ERR_ARGUMENT: return "argument error";
    case SPELL_ERR_DIMENSION: return "dimension error";
    case SPELL_ERR_STATE: return "state error";
    case SPELL_ERR_VALIDATION: return "validation error";
    case SPELL_ERR_DEGENERATE_BATCH: return "degenerate batch";
    case SPELL_ERR_UNDEFINED_METRIC: return "undefined metric";
    case SPELL_ERR_NUMERIC: return "numeric error";
    case SPELL_ERR_IO: return "i/o error";
    case SPELL_ERR_FORMAT: return "format error";
    case SPELL_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* spell_last_error(void) { return g_last_error.c_str(); }

const char* spell_version(void) { return "1.0.0"; }

// ---- datasets ---------------------------------------------------------------

spell_status spell_dataset_load(const char* tracks_path, const char* features_path,
                                spell_dataset** out) {
  SPELL_REQUIRE(tracks_path);
  SPELL_REQUIRE(features_path);
  SPELL_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    auto ds = std::make_unique<spell_dataset>();
    ds->data = spell::load_dataset(tracks_path, features_path);
    *out = ds.release();
  });
}

spell_status spell_dataset_load_tracks(const char* tracks_path, spell_dataset** out) {
  SPELL_REQUIRE(tracks_path);
  SPELL_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    auto ds = std::make_unique<spell_dataset>();
    ds->data = spell::load_tracks_only(tracks_path);
    *out = ds.release();
  });
}

spell_status spell_dataset_size(const spell_dataset* dataset, size_t* out) {
  SPELL_REQUIRE(dataset);
  SPELL_REQUIRE(out);
  *out = dataset->data.size();
  return SPELL_OK;
}

void spell_dataset_free(spell_dataset* dataset) { delete dataset; }

spell_status spell_graph_stats_compute(const spell_dataset* dataset, size_t n,
                                       double tau, spell_graph_stats* out) {
  SPELL_REQUIRE(dataset);
  SPELL_REQUIRE(out);
  return guarded([&] {
    const auto chunks = spell::build_graphs(dataset->data.boxes, n, tau);
    const spell::GraphStats s = spell::graph_stats(chunks);
    *out = {s.videos,          s.chunks,          s.nodes,
            s.self_loops,      s.forward_edges,   s.backward_edges,
            s.undirected_edges, s.same_frame_edges, s.same_identity_edges};
  });
}

// ---- configuration -------------------------------------------------------------

spell_status spell_config_new(spell_config** out) {
  SPELL_REQUIRE(out);
  *out = nullptr;
  return guarded([&] { *out = new spell_config{}; });
}

spell_status spell_config_load(const char* path, spell_config** out) {
  SPELL_REQUIRE(path);
  SPELL_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    auto c = std::make_unique<spell_config>();
    c->config = spell::read_train_config(path);
    *out = c.release();
  });
}

spell_status spell_config_set(spell_config* config, const char* key,
                              const char* value) {
  SPELL_REQUIRE(config);
  SPELL_REQUIRE(key);
  SPELL_REQUIRE(value);
  return guarded([&] {
    spell::TrainConfig next = config->config;
    spell::apply_setting(next, spell::KeyValue{key, value, 0});
    next.validate();
    config->config = next;
  });
}

spell_status spell_config_get(const spell_config* config, const char* key, char* buf,
                              size_t buf_len, size_t* needed) {
  SPELL_REQUIRE(config);
  SPELL_REQUIRE(key);
  for (const spell::KeyValue& kv : spell::config_settings(config->config)) {
    if (kv.key != key) continue;
    const std::size_t size = kv.value.size() + 1;
    if (needed) *needed = size;
    if (buf == nullptr || buf_len < size) {
      return set_error(SPELL_ERR_ARGUMENT, "spell_config_get: buffer of " +
                                               std::to_string(buf_len) +
                                               " bytes, need " + std::to_string(size));
    }
    std::memcpy(buf, kv.value.c_str(), size);
    return SPELL_OK;
  }
  return set_error(SPELL_ERR_VALIDATION,
                   std::string("unknown config key '") + key + "'");
}

spell_status spell_config_param_count(const spell_config* config, size_t* out) {
  SPELL_REQUIRE(config);
  SPELL_REQUIRE(out);
  return guarded([&] { *out = spell::param_count(config->config.model); });
}

void spell_config_free(spell_config* config) { delete config; }

// ---- training and models ---------------------------------------------------------

spell_status spell_train(const spell_dataset* train, const spell_dataset* val,
                         const spell_config* config, spell_epoch_callback callback,
                         void* user, spell_model** out) {
  SPELL_REQUIRE(train);
  SPELL_REQUIRE(config);
  SPELL_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    const spell::TrainConfig& c = config->config;
    spell::EpochHook<float> hook;
    if (val != nullptr || callback != nullptr) {
      hook = [&](const spell::SpellModel<float>& m,
                 const spell::EpochRecord& rec) -> std::optional<double> {
        std::optional<double> ap;
        if (val != nullptr) {
          ap = spell::evaluate<float>(m, val->data, c.n, c.tau, c.modality_mask).ap;
        }
        if (callback) {
          callback(rec.epoch, rec.lr, rec.loss,
                   ap.value_or(std::numeric_limits<double>::quiet_NaN()), user);
        }
        return ap;
      };
    }
    auto result = spell::train<float>(train->data, c, hook);
    auto m = std::make_unique<spell_model>();
    m->model = std::move(result.model);
    m->history = std::move(result.history);
    m->trained = true;
    *out = m.release();
  });
}

spell_status spell_model_write_history(const spell_model* model, const char* path) {
  SPELL_REQUIRE(model);
  SPELL_REQUIRE(path);
  if (!model->trained) {
    return set_error(SPELL_ERR_STATE,
                     "model was loaded from a checkpoint and has no training history");
  }
  return guarded([&] { write_text(path, spell::history_csv(model->history)); });
}

spell_status spell_model_save(const spell_model* model, const char* path) {
  SPELL_REQUIRE(model);
  SPELL_REQUIRE(path);
  return guarded([&] { spell::save_checkpoint(*model->model, path); });
}

spell_status spell_model_load(const char* path, spell_model** out) {
  SPELL_REQUIRE(path);
  SPELL_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    const spell::ModelConfig cfg = spell::read_checkpoint_config(path);
    auto m = std::make_unique<spell_model>();
    m->model = std::make_unique<spell::SpellModel<float>>(cfg, 0);
    spell::load_checkpoint(*m->model, path);
    *out = m.release();
  });
}

spell_status spell_model_param_count(const spell_model* model, size_t* out) {
  SPELL_REQUIRE(model);
  SPELL_REQUIRE(out);
  *out = model->model->param_count();
  return SPELL_OK;
}

void spell_model_free(spell_model* model) { delete model; }

spell_status spell_infer(const spell_model* model, const spell_dataset* dataset,
                         const spell_config* config, const char* predictions_path) {
  SPELL_REQUIRE(model);
  SPELL_REQUIRE(dataset);
  SPELL_REQUIRE(predictions_path);
  return guarded([&] {
    const spell::TrainConfig& c = config_or_default(config);
    const auto scores = spell::infer_scores<float>(*model->model, dataset->data, c.n,
                                                   c.tau, c.modality_mask);
    spell::write_predictions(predictions_path,
                             spell::to_predictions(dataset->data, scores));
  });
}

spell_status spell_evaluate(const spell_model* model, const spell_dataset* dataset,
                            const spell_config* config, double* ap) {
  SPELL_REQUIRE(model);
  SPELL_REQUIRE(dataset);
  SPELL_REQUIRE(ap);
  return guarded([&] {
    const spell::TrainConfig& c = config_or_default(config);
    *ap = spell::evaluate<float>(*model->model, dataset->data, c.n, c.tau,
                                 c.modality_mask)
              .ap;
  });
}

spell_status spell_eval_predictions(const char* predictions_path,
                                    const char* tracks_path, const char* report_path,
                                    double* ap) {
  SPELL_REQUIRE(predictions_path);
  SPELL_REQUIRE(tracks_path);
  SPELL_REQUIRE(ap);
  return guarded([&] {
    const auto predictions = spell::read_predictions(predictions_path);
    const auto tracks = spell::read_tracks(tracks_path);
    const spell::EvalReport report = spell::evaluate_predictions(predictions, tracks);
    if (report_path != nullptr) write_text(report_path, spell::eval_csv(report));
    *ap = report.ap;
  });
}

// ---- synthetic data -----------------------------------------------------------

spell_status spell_synth_preset(const char* preset, uint64_t seed, const char* out_dir) {
  SPELL_REQUIRE(preset);
  SPELL_REQUIRE(out_dir);
  return guarded([&] {
    spell::write_synthetic(
        spell::generate_synthetic(spell::synthetic_preset(preset), seed), out_dir);
  });
}

spell_status spell_synth_spec(const char* spec_path, uint64_t seed, const char* out_dir) {
  SPELL_REQUIRE(spec_path);
  SPELL_REQUIRE(out_dir);
  return guarded([&] {
    spell::write_synthetic(
        spell::generate_synthetic(spell::read_synthetic_spec(spec_path), seed), out_dir);
  });
}

// ---- experiments --------------------------------------------------------------

spell_status spell_ablate(const spell_dataset* train, const spell_dataset* val,
                          const spell_config* config, const char* rows,
                          const char* report_path) {
  SPELL_REQUIRE(train);
  SPELL_REQUIRE(val);
  SPELL_REQUIRE(config);
  SPELL_REQUIRE(report_path);
  return guarded([&] {
    const auto names = split_list(rows);
    const auto report = spell::run_ablation(train->data, val->data, config->config, names);
    write_text(report_path, spell::ablation_csv(report));
  });
}

spell_status spell_sweep(const spell_dataset* train, const spell_dataset* val,
                         const spell_config* config, const char* axis,
                         const double* values, size_t count, const char* report_path) {
  SPELL_REQUIRE(train);
  SPELL_REQUIRE(val);
  SPELL_REQUIRE(config);
  SPELL_REQUIRE(axis);
  SPELL_REQUIRE(values);
  SPELL_REQUIRE(report_path);
  return guarded([&] {
    const spell::SweepAxis a = spell::parse_sweep_axis(axis);
    const auto points = spell::run_sweep(train->data, val->data, config->config, a,
                                         std::span<const double>(values, count));
    write_text(report_path, spell::sweep_csv(a, points));
  });
}

}  // extern "C"
