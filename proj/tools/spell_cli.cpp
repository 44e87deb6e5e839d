// SPDX-License-Identifier: Apache-2.0
// Command-line front end over the C API.

#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spell/spell.h"

namespace {

struct Failure {
  spell_status status;
};

void check(spell_status status) {
  if (status != SPELL_OK) throw Failure{status};
}

struct DatasetDeleter {
  void operator()(spell_dataset* d) const { spell_dataset_free(d); }
};
struct ConfigDeleter {
  void operator()(spell_config* c) const { spell_config_free(c); }
};
struct ModelDeleter {
  void operator()(spell_model* m) const { spell_model_free(m); }
};
using Dataset = std::unique_ptr<spell_dataset, DatasetDeleter>;
using Config = std::unique_ptr<spell_config, ConfigDeleter>;
using Model = std::unique_ptr<spell_model, ModelDeleter>;

Dataset load_dataset(const std::string& tracks, const std::string& features) {
  spell_dataset* d = nullptr;
  check(spell_dataset_load(tracks.c_str(), features.c_str(), &d));
  return Dataset(d);
}

Config load_config(const std::string& path) {
  spell_config* c = nullptr;
  check(path.empty() ? spell_config_new(&c) : spell_config_load(path.c_str(), &c));
  return Config(c);
}

void set(spell_config* c, const char* key, const std::string& value) {
  check(spell_config_set(c, key, value.c_str()));
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Options {
  std::string tracks, features, val_tracks, val_features;
  std::string config, out, ckpt, predictions, spec, preset, history, rows, axis;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
  std::optional<double> tau;
  std::vector<double> values;
  bool quiet = false;
};

// --seed, --n and --tau override the config file when given.
void apply_overrides(spell_config* c, const Options& o) {
  if (o.seed) set(c, "seed", std::to_string(*o.seed));
  if (o.n) set(c, "n", std::to_string(*o.n));
  if (o.tau) set(c, "tau", number(*o.tau));
}

void epoch_printer(size_t epoch, double lr, double loss, double val_ap, void*) {
  if (std::isnan(val_ap)) {
    std::printf("epoch %zu lr %.6g loss %.6f\n", epoch, lr, loss);
  } else {
    std::printf("epoch %zu lr %.6g loss %.6f val_ap %.6f\n", epoch, lr, loss, val_ap);
  }
  std::fflush(stdout);
}

void run_build_graph(const Options& o) {
  spell_dataset* raw = nullptr;
  check(spell_dataset_load_tracks(o.tracks.c_str(), &raw));
  Dataset d(raw);
  spell_graph_stats s{};
  check(spell_graph_stats_compute(d.get(), *o.n, *o.tau, &s));
  const std::pair<const char*, size_t> rows[] = {
      {"videos", s.videos},
      {"chunks", s.chunks},
      {"nodes", s.nodes},
      {"self_loops", s.self_loops},
      {"forward_edges", s.forward_edges},
      {"backward_edges", s.backward_edges},
      {"undirected_edges", s.undirected_edges},
      {"same_frame_edges", s.same_frame_edges},
      {"same_identity_edges", s.same_identity_edges},
  };
  std::FILE* f = std::fopen(o.out.c_str(), "w");
  if (!f) {
    std::fprintf(stderr, "spell build-graph: cannot write %s\n", o.out.c_str());
    throw Failure{SPELL_ERR_IO};
  }
  std::fprintf(f, "stat,value\n");
  for (const auto& [name, value] : rows) {
    std::fprintf(f, "%s,%zu\n", name, value);
    std::printf("%s %zu\n", name, value);
  }
  if (std::fclose(f) != 0) throw Failure{SPELL_ERR_IO};
}

void run_train(const Options& o) {
  Dataset train = load_dataset(o.tracks, o.features);
  Dataset val;
  if (!o.val_tracks.empty()) val = load_dataset(o.val_tracks, o.val_features);
  Config c = load_config(o.config);
  apply_overrides(c.get(), o);
  spell_model* raw = nullptr;
  check(spell_train(train.get(), val.get(), c.get(), o.quiet ? nullptr : epoch_printer,
                    nullptr, &raw));
  Model m(raw);
  check(spell_model_save(m.get(), o.out.c_str()));
  if (!o.history.empty()) check(spell_model_write_history(m.get(), o.history.c_str()));
}

void run_infer(const Options& o) {
  Dataset d = load_dataset(o.tracks, o.features);
  Config c = load_config(o.config);
  apply_overrides(c.get(), o);
  spell_model* raw = nullptr;
  check(spell_model_load(o.ckpt.c_str(), &raw));
  Model m(raw);
  check(spell_infer(m.get(), d.get(), c.get(), o.out.c_str()));
}

void run_eval(const Options& o) {
  double ap = 0.0;
  check(spell_eval_predictions(o.predictions.c_str(), o.tracks.c_str(),
                               o.out.empty() ? nullptr : o.out.c_str(), &ap));
  std::printf("AP %.6f\n", ap);
}

void run_synth(const Options& o) {
  const std::uint64_t seed = o.seed.value_or(0);
  if (!o.spec.empty()) {
    check(spell_synth_spec(o.spec.c_str(), seed, o.out.c_str()));
  } else {
    check(spell_synth_preset(o.preset.c_str(), seed, o.out.c_str()));
  }
}

void run_ablate(const Options& o) {
  Dataset train = load_dataset(o.tracks, o.features);
  Dataset val = load_dataset(o.val_tracks, o.val_features);
  Config c = load_config(o.config);
  apply_overrides(c.get(), o);
  check(spell_ablate(train.get(), val.get(), c.get(), o.rows.c_str(), o.out.c_str()));
}

void run_sweep(const Options& o) {
  Dataset train = load_dataset(o.tracks, o.features);
  Dataset val = load_dataset(o.val_tracks, o.val_features);
  Config c = load_config(o.config);
  apply_overrides(c.get(), o);
  check(spell_sweep(train.get(), val.get(), c.get(), o.axis.c_str(), o.values.data(),
                    o.values.size(), o.out.c_str()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Active speaker detection with spatio-temporal graphs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", spell_version());
  Options o;

  const auto add_data = [&](CLI::App* cmd) {
    cmd->add_option("--tracks", o.tracks, "Track CSV")->required()->check(CLI::ExistingFile);
    cmd->add_option("--features", o.features, "Feature store")
        ->required()
        ->check(CLI::ExistingFile);
  };
  const auto add_val = [&](CLI::App* cmd, bool required) {
    auto* t = cmd->add_option("--val-tracks", o.val_tracks, "Validation track CSV")
                  ->check(CLI::ExistingFile);
    auto* f = cmd->add_option("--val-features", o.val_features, "Validation feature store")
                  ->check(CLI::ExistingFile);
    if (required) {
      t->required();
      f->required();
    } else {
      t->needs(f);
      f->needs(t);
    }
  };
  const auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "key = value config file")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "Random seed (overrides the config)");
    cmd->add_option("--n", o.n, "Nodes per chunk (overrides the config)")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--tau", o.tau, "Time threshold in seconds (overrides the config)")
        ->check(CLI::NonNegativeNumber);
  };

  auto* build = app.add_subcommand("build-graph", "Chunk tracks and report edge statistics");
  build->add_option("--tracks", o.tracks, "Track CSV")->required()->check(CLI::ExistingFile);
  build->add_option("--n", o.n, "Nodes per chunk")->default_val(2000)->check(CLI::PositiveNumber);
  build->add_option("--tau", o.tau, "Time threshold in seconds")
      ->default_val(0.9)
      ->check(CLI::NonNegativeNumber);
  build->add_option("--out", o.out, "Statistics CSV")->required();

  auto* train = app.add_subcommand("train", "Train a model and save a checkpoint");
  add_data(train);
  add_val(train, false);
  add_overrides(train);
  train->add_option("--out", o.out, "Checkpoint path")->required();
  train->add_option("--history", o.history, "Per-epoch loss history CSV");
  train->add_flag("--quiet", o.quiet, "Do not print per-epoch progress");

  auto* infer = app.add_subcommand("infer", "Score every track row");
  add_data(infer);
  add_overrides(infer);
  infer->add_option("--ckpt", o.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", o.out, "Predictions CSV")->required();

  auto* eval = app.add_subcommand("eval", "Average precision of a predictions file");
  eval->add_option("--predictions", o.predictions, "Predictions CSV")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--tracks", o.tracks, "Labeled track CSV")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--out", o.out, "Report CSV (global and per-video AP)");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic conversation dataset");
  auto* spec = synth->add_option("--spec", o.spec, "Synthetic spec file")
                   ->check(CLI::ExistingFile);
  auto* preset = synth->add_option("--preset", o.preset,
                                   "Named spec: separable, contextual or modality");
  spec->excludes(preset);
  preset->excludes(spec);
  synth->add_option("--seed", o.seed, "Random seed")->required();
  synth->add_option("--out-dir", o.out, "Output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Train and score the ablation rows");
  add_data(ablate);
  add_val(ablate, true);
  add_overrides(ablate);
  ablate->add_option("--rows", o.rows, "Comma-separated row names (default: all)");
  ablate->add_option("--out", o.out, "Report CSV")->required();

  auto* sweep = app.add_subcommand("sweep", "Train and score one value per run");
  add_data(sweep);
  add_val(sweep, true);
  add_overrides(sweep);
  sweep->add_option("--axis", o.axis, "tau, n or filter_dim")
      ->required()
      ->check(CLI::IsMember({"tau", "n", "filter_dim"}));
  sweep->add_option("--values", o.values, "Values to sweep")->required()->delimiter(',');
  sweep->add_option("--out", o.out, "Report CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "spell: %s\n", e.what());
    return 2;
  }

  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  try {
    if (cmd == synth && o.spec.empty() && o.preset.empty()) {
      std::fprintf(stderr, "spell synth: one of --spec or --preset is required\n");
      return 2;
    }
    if (cmd == build) run_build_graph(o);
    else if (cmd == train) run_train(o);
    else if (cmd == infer) run_infer(o);
    else if (cmd == eval) run_eval(o);
    else if (cmd == synth) run_synth(o);
    else if (cmd == ablate) run_ablate(o);
    else if (cmd == sweep) run_sweep(o);
  } catch (const Failure& f) {
    const char* message = spell_last_error();
    std::fprintf(stderr, "spell %s: %s: %s\n", name.c_str(), spell_status_name(f.status),
                 *message ? message : "failed");
    return 1;
  }
  return 0;
}
