#pragma once

// Command-line front end. `run_cli` holds everything but process setup so the
// tests can drive it in-process.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stag/checks.hpp"
#include "stag/classify.hpp"
#include "stag/dataio.hpp"
#include "stag/experiment.hpp"

namespace stag::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

inline constexpr const char* kOutDirEnv = "STAG_OUT_DIR";

inline std::string default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? env : "stag_out";
}

// ---------------------------------------------------------------------------
// JSON snapshots

inline ordered_json to_json(const PipelineConfig& c) {
  return ordered_json{{"name", c.name()},
                      {"use_pca", c.use_pca},
                      {"pca_dim", c.pca_dim},
                      {"grid_pooler", c.grid_pooler == GridPooler::cbp ? "cbp" : "none"},
                      {"use_rnn", c.use_rnn},
                      {"cell", c.cell == CellType::lstm ? "lstm" : "vanilla"},
                      {"video_pooler", c.video_pooler == VideoPooler::cbp       ? "cbp"
                                       : c.video_pooler == VideoPooler::netvlad ? "netvlad"
                                                                                : "mean"},
                      {"frames_per_grid", c.frames_per_grid},
                      {"grids_per_interval", c.grids_per_interval},
                      {"stride", c.stride},
                      {"grid_dim", c.grid_dim},
                      {"hidden_dim", c.hidden_dim},
                      {"video_dim", c.video_dim},
                      {"netvlad_clusters", c.netvlad_clusters},
                      {"netvlad_alpha", c.netvlad_alpha},
                      {"sigma", c.sigma},
                      {"final_l2", c.final_l2},
                      {"subject_norm", c.subject_norm == SubjectNorm::global ? "global"
                                       : c.subject_norm == SubjectNorm::none ? "none"
                                                                             : "per_position"},
                      {"seed", c.seed}};
}

inline ordered_json to_json(const TrainOptions& t) {
  return ordered_json{{"max_iters", t.max_iters}, {"batch_size", t.batch_size}, {"eval_every", t.eval_every},
                      {"patience", t.patience},   {"bag_size", t.bag_size},     {"val_limit", t.val_limit},
                      {"base_lr", t.base_lr},     {"beta1", t.beta1},           {"beta2", t.beta2},
                      {"eps", t.eps},             {"decay_every", t.decay_every}, {"decay", t.decay}};
}

inline ordered_json to_json(const SynthSpec& s) {
  return ordered_json{{"task", std::string(to_string(s.task))},
                      {"seed", s.seed},
                      {"videos_per_class", s.videos_per_class},
                      {"frames", s.frames},
                      {"positions", s.positions},
                      {"dim", s.dim},
                      {"states", s.states},
                      {"dwell", s.dwell},
                      {"noise", s.noise},
                      {"first_moment", s.first_moment},
                      {"second_order", s.second_order},
                      {"subject_offset", s.subject_offset},
                      {"rho", s.rho},
                      {"fps", s.fps}};
}

inline void write_snapshot(const fs::path& path, const std::string& command, ordered_json body) {
  ordered_json j{{"command", command}};
  j.update(body);
  binio::write_file_atomic(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared flag groups

struct PipelineFlags {
  std::string pipeline = "cbp+rnn+cbp";
  std::optional<std::size_t> grid_dim, hidden_dim, video_dim, clusters, pca_dim, frames_per_grid, grids_per_interval,
      stride;
  std::optional<double> sigma;
  std::string cell;
  std::string subject_norm;
  bool no_final_l2 = false;
  std::uint64_t seed = 1;

  void add(CLI::App& app) {
    app.add_option("-p,--pipeline", pipeline, "Pipeline preset, e.g. cbp, rnn+cbp, cbp+rnn+cbp, pca+cbp+rnn+netvlad")
        ->capture_default_str();
    add_overrides(app);
  }

  void add_overrides(CLI::App& app) {
    app.add_option("--grid-dim", grid_dim, "Grid sketch dimension d_g (power of two)");
    app.add_option("--hidden-dim", hidden_dim, "RNN hidden size H");
    app.add_option("--video-dim", video_dim, "Video representation dimension d_v");
    app.add_option("--clusters", clusters, "NetVLAD cluster count");
    app.add_option("--pca-dim", pca_dim, "PCA output dimension");
    app.add_option("--frames-per-grid", frames_per_grid, "Frames per grid T");
    app.add_option("--grids-per-interval", grids_per_interval, "Grids per interval K");
    app.add_option("--stride", stride, "Frames between dense interval starts");
    app.add_option("--sigma", sigma, "Power-normalization exponent");
    app.add_option("--cell", cell, "Recurrent cell")->check(CLI::IsMember({"vanilla", "lstm"}));
    app.add_option("--subject-norm", subject_norm, "Subject normalization")
        ->check(CLI::IsMember({"per_position", "global", "none"}));
    app.add_flag("--no-final-l2", no_final_l2, "Skip the final L2 normalization");
    app.add_option("--seed", seed, "Pipeline seed")->capture_default_str();
  }

  PipelineConfig resolve(const std::string& name) const {
    PipelineConfig c = PipelineConfig::preset(name);
    auto set = [](auto& field, const auto& opt) {
      if (opt) field = *opt;
    };
    set(c.grid_dim, grid_dim);
    set(c.hidden_dim, hidden_dim);
    set(c.video_dim, video_dim);
    set(c.netvlad_clusters, clusters);
    set(c.pca_dim, pca_dim);
    // pass-through presets pin T=K=stride=1
    if (!c.passes_features_through()) {
      if (c.grid_pooler == GridPooler::cbp) set(c.frames_per_grid, frames_per_grid);
      set(c.grids_per_interval, grids_per_interval);
      set(c.stride, stride);
    }
    set(c.sigma, sigma);
    if (!cell.empty()) c.cell = cell == "lstm" ? CellType::lstm : CellType::vanilla;
    if (subject_norm == "per_position") c.subject_norm = SubjectNorm::per_position;
    if (subject_norm == "global") c.subject_norm = SubjectNorm::global;
    if (subject_norm == "none") c.subject_norm = SubjectNorm::none;
    if (no_final_l2) c.final_l2 = false;
    c.seed = seed;
    c.validate();
    return c;
  }
  PipelineConfig resolve() const { return resolve(pipeline); }
};

struct TrainFlags {
  TrainOptions opts;
  double svm_c = 1.0;

  void add(CLI::App& app) {
    app.add_option("--iters", opts.max_iters, "Maximum Adam iterations per emotion")->capture_default_str();
    app.add_option("--batch-size", opts.batch_size, "Minibatch size")->capture_default_str();
    app.add_option("--eval-every", opts.eval_every, "Validation interval in iterations")->capture_default_str();
    app.add_option("--patience", opts.patience, "Evaluations without improvement before stopping")
        ->capture_default_str();
    app.add_option("--lr", opts.base_lr, "Base learning rate")->capture_default_str();
    app.add_option("--svm-c", svm_c, "SVM penalty C")->capture_default_str();
  }

  FitOptions fit() const {
    FitOptions f;
    f.train = opts;
    f.svm_c = svm_c;
    return f;
  }
};

// ---------------------------------------------------------------------------
// Model directory layout

inline fs::path aggregator_path(const fs::path& dir, Emotion e) {
  return dir / (std::string(to_string(e)) + ".aggregator.stag");
}
inline fs::path svm_path(const fs::path& dir, Emotion e) { return dir / (std::string(to_string(e)) + ".svm.stag"); }
inline fs::path records_path(const fs::path& dir, Emotion e) { return dir / (std::string(to_string(e)) + ".train.csv"); }

inline void save_emotion_model(const EmotionModel& m, const fs::path& dir) {
  save_model(m.aggregator, aggregator_path(dir, m.emotion));
  save_svm(m.svm, m.aggregator.config, svm_path(dir, m.emotion));
  binio::write_file_atomic(records_path(dir, m.emotion), train_records_csv(m.records));
}

inline EmotionModel load_emotion_model(const fs::path& dir, Emotion e) {
  EmotionModel m;
  m.emotion = e;
  for (const auto& p : {aggregator_path(dir, e), svm_path(dir, e)}) {
    if (!fs::exists(p)) throw ModelFormatError("missing model file " + p.string());
  }
  m.aggregator = load_model(aggregator_path(dir, e));
  PipelineConfig svm_config;
  m.svm = load_svm(svm_path(dir, e), &svm_config);
  if (!(svm_config == m.aggregator.config)) {
    throw ModelFormatError("SVM and aggregator for " + std::string(to_string(e)) + " were trained with different configs");
  }
  if (m.svm.w.size() != m.aggregator.video_output_dim()) {
    throw ModelFormatError("SVM for " + std::string(to_string(e)) + " expects " + std::to_string(m.svm.w.size()) +
                           " inputs, aggregator emits " + std::to_string(m.aggregator.video_output_dim()));
  }
  return m;
}

inline Split parse_split_or_throw(const std::string& s) {
  if (auto v = parse_split(s)) return *v;
  throw InvalidConfig("unknown split '" + s + "'");
}

inline std::vector<LocalFeatureSequence> load_split(const Manifest& m, Split s) {
  return load_sequences(m, m.select(s));
}

inline std::string predictions_csv(std::span<const Prediction> preds) {
  std::string out = "video_id,emotion,truth,predicted,margin\n";
  for (const auto& p : preds) {
    out += p.video_id + ',' + std::string(to_string(p.emotion)) + ',' + std::string(to_string(p.truth)) + ',' +
           std::string(to_string(p.predicted)) + ',' + format_double(p.margin) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  std::ostream& out;
  std::ostream& err;
  bool verbose = false;
  void log(const std::string& s) const {
    if (verbose) err << s << '\n';
  }
};

inline int cmd_synth(const Context& ctx, const SynthSpec& spec, const fs::path& out_dir) {
  const SynthDataset ds = generate_synthetic(spec);
  write_dataset(ds, out_dir);
  write_snapshot(out_dir / "synth_config.json", "synth", ordered_json{{"spec", to_json(spec)}});
  std::array<std::size_t, 3> counts{};
  for (const auto& e : ds.entries) ++counts[static_cast<std::size_t>(e.split)];
  ctx.out << "wrote " << ds.entries.size() << " videos to " << (out_dir / "manifest.tsv").string() << '\n';
  for (Split s : {Split::train, Split::val, Split::test}) {
    ctx.out << "  " << to_string(s) << ": " << counts[static_cast<std::size_t>(s)] << '\n';
  }
  return kOk;
}

inline int cmd_train(const Context& ctx, const fs::path& manifest_path, const PipelineConfig& config,
                     const FitOptions& fit, const fs::path& out_dir) {
  const Manifest manifest = load_manifest(manifest_path);
  const auto train = load_split(manifest, Split::train);
  const auto val = load_split(manifest, Split::val);
  const fs::path models = out_dir / "models";
  write_snapshot(out_dir / "train_config.json", "train",
                 ordered_json{{"manifest", fs::absolute(manifest_path).lexically_normal().string()},
                              {"pipeline", to_json(config)},
                              {"train", to_json(fit.train)},
                              {"svm_c", fit.svm_c}});
  if (!config.has_trainable_aggregator()) ctx.out << "pipeline " << config.name() << " has no trainable aggregator\n";
  for (Emotion e : kAllEmotions) {
    const auto tr = of_emotion(train, e);
    const auto va = of_emotion(val, e);
    ctx.log("training " + std::string(to_string(e)) + " on " + std::to_string(tr.size()) + " videos");
    const EmotionModel m = fit_emotion(config, e, tr, va, fit);
    save_emotion_model(m, models);
    ctx.out << to_string(e) << ": " << m.iterations << " iterations";
    if (!m.records.empty()) ctx.out << ", final val loss " << format_double(m.records.back().val_loss);
    ctx.out << '\n';
  }
  ctx.out << "models written to " << models.string() << '\n';
  return kOk;
}

inline int cmd_embed(const Context& ctx, const fs::path& manifest_path, const fs::path& models, Split split,
                     const fs::path& out_dir) {
  const Manifest manifest = load_manifest(manifest_path);
  std::string csv = "video_id,emotion,label,values\n";
  std::size_t count = 0;
  for (Emotion e : kAllEmotions) {
    const EmotionModel m = load_emotion_model(models, e);
    for (const auto& s : load_sequences(manifest, manifest.select(split, e))) {
      const auto rep = encode_video(s, m.aggregator);
      csv += rep.video_id + ',' + std::string(to_string(rep.emotion)) + ',' + std::string(to_string(rep.label)) + ',';
      for (std::size_t i = 0; i < rep.values.size(); ++i) csv += (i ? " " : "") + format_double(rep.values[i]);
      csv += '\n';
      ++count;
    }
  }
  const fs::path path = out_dir / ("embeddings_" + std::string(to_string(split)) + ".csv");
  binio::write_file_atomic(path, csv);
  write_snapshot(out_dir / "embed_config.json", "embed",
                 ordered_json{{"manifest", fs::absolute(manifest_path).lexically_normal().string()},
                              {"models", fs::absolute(models).lexically_normal().string()},
                              {"split", std::string(to_string(split))}});
  ctx.out << "embedded " << count << " videos to " << path.string() << '\n';
  return kOk;
}

inline int cmd_evaluate(const Context& ctx, const fs::path& manifest_path, const fs::path& models, Split split,
                        const fs::path& out_dir) {
  const Manifest manifest = load_manifest(manifest_path);
  std::vector<Prediction> preds;
  for (Emotion e : kAllEmotions) {
    const EmotionModel m = load_emotion_model(models, e);
    for (const auto& s : load_sequences(manifest, manifest.select(split, e))) preds.push_back(predict_video(m, s));
  }
  const EvaluationReport rep = evaluate(preds);
  const std::string tag(to_string(split));
  binio::write_file_atomic(out_dir / ("report_" + tag + ".csv"), report_csv(rep));
  binio::write_file_atomic(out_dir / ("predictions_" + tag + ".csv"), predictions_csv(preds));
  write_snapshot(out_dir / "evaluate_config.json", "evaluate",
                 ordered_json{{"manifest", fs::absolute(manifest_path).lexically_normal().string()},
                              {"models", fs::absolute(models).lexically_normal().string()},
                              {"split", tag}});
  ctx.out << format_report_table(rep);
  ctx.out << "mean ranking AP " << percent(rep.mean_average_precision) << '\n';
  return kOk;
}

inline int cmd_gradcheck(const Context& ctx, const GradSuiteOptions& opts) {
  const auto results = run_gradient_suite(opts);
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %9s %14s %8s  %s\n", "component", "instances", "max rel error", "seconds",
                "status");
  ctx.out << line;
  bool ok = true;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-12s %9zu %14.3e %8.2f  %s\n", r.name.c_str(), r.instances, r.max_rel_error,
                  r.seconds, r.passed ? "ok" : "FAIL");
    ctx.out << line;
    if (!r.passed) {
      ok = false;
      ctx.err << "gradient check failed for " << r.name;
      if (!r.error.empty()) ctx.err << ": " << r.error;
      ctx.err << " (max relative error " << r.max_rel_error << ", tolerance " << opts.tolerance << ")\n";
    }
  }
  return ok ? kOk : kNumerical;
}

inline int cmd_ablate(const Context& ctx, const fs::path& manifest_path, const std::vector<std::string>& presets,
                      const PipelineFlags& flags, const FitOptions& fit, Split split, const fs::path& out_dir) {
  const Manifest manifest = load_manifest(manifest_path);
  const auto train = load_split(manifest, Split::train);
  const auto val = load_split(manifest, Split::val);
  const auto heldout = load_split(manifest, split);
  std::vector<PipelineConfig> configs;
  for (const auto& p : presets) configs.push_back(flags.resolve(p));
  ordered_json snap{{"manifest", fs::absolute(manifest_path).lexically_normal().string()},
                    {"split", std::string(to_string(split))},
                    {"train", to_json(fit.train)},
                    {"svm_c", fit.svm_c},
                    {"pipelines", ordered_json::array()}};
  for (const auto& c : configs) snap["pipelines"].push_back(to_json(c));
  write_snapshot(out_dir / "ablate_config.json", "ablate", snap);

  std::string csv = "pipeline";
  for (Emotion e : kAllEmotions) csv += ',' + std::string(to_string(e));
  csv += ",average\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-22s", "Pipeline");
  std::string table = line;
  for (Emotion e : kAllEmotions) {
    std::snprintf(line, sizeof line, " %9s", std::string(to_string(e)).c_str());
    table += line;
  }
  table += "   Average\n";
  ctx.out << table << std::flush;
  for (const auto& c : configs) {
    ctx.log("running " + c.name());
    const ExperimentResult r = run_experiment(c, train, val, heldout, fit);
    std::snprintf(line, sizeof line, "%-22s", c.name().c_str());
    std::string row = line;
    csv += c.name();
    for (std::size_t e = 0; e < 6; ++e) {
      std::snprintf(line, sizeof line, " %9s", percent(r.report.accuracy[e]).c_str());
      row += line;
      csv += ',' + format_double(r.report.accuracy[e]);
    }
    std::snprintf(line, sizeof line, " %9s\n", percent(r.report.overall).c_str());
    row += line;
    csv += ',' + format_double(r.report.overall) + '\n';
    ctx.out << row << std::flush;
    table += row;
  }
  binio::write_file_atomic(out_dir / "ablation.csv", csv);
  return kOk;
}

// ---------------------------------------------------------------------------

/// Maps library errors onto exit codes: bad flags or configs are usage
/// errors, numerical failures are 3, everything about inputs is a data error.
inline int exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  if (dynamic_cast<const InvalidConfig*>(&e)) return kUsage;
  return kData;
}

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Spatio-temporal aggregation of local video features"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress messages on stderr");
  std::string out_dir = default_out_dir();
  auto out_opt = [&](CLI::App* sub) {
    sub->add_option("-o,--out", out_dir, std::string("Output directory (default $") + kOutDirEnv + " or stag_out)");
  };

  // synth
  SynthSpec spec;
  std::string task = "order";
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--task", task, "order or cooccurrence")->check(CLI::IsMember({"order", "cooccurrence"}))
      ->capture_default_str();
  synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  synth->add_option("--videos-per-class", spec.videos_per_class, "Videos per emotion and label")->capture_default_str();
  synth->add_option("--frames", spec.frames, "Frames per video")->capture_default_str();
  synth->add_option("--positions", spec.positions, "Spatial positions M")->capture_default_str();
  synth->add_option("--dim", spec.dim, "Local feature dimension D")->capture_default_str();
  synth->add_option("--noise", spec.noise, "Per-feature noise scale")->capture_default_str();
  synth->add_option("--first-moment", spec.first_moment, "Order task: state mean scale")->capture_default_str();
  synth->add_option("--second-order", spec.second_order, "Order task: zero-mean position pattern scale")
      ->capture_default_str();
  synth->add_option("--rho", spec.rho, "Co-occurrence task: pair correlation")->capture_default_str();
  out_opt(synth);

  // train / embed / evaluate / ablate share manifest + model flags
  std::string manifest;
  std::string models;
  std::string split = "val";
  PipelineFlags pflags;
  TrainFlags tflags;

  auto* train = app.add_subcommand("train", "Train aggregators and SVMs for all six emotions");
  train->add_option("-m,--manifest", manifest, "Manifest with train and val splits")->required();
  pflags.add(*train);
  tflags.add(*train);
  out_opt(train);

  auto* embed = app.add_subcommand("embed", "Write video representations for one split");
  embed->add_option("-m,--manifest", manifest, "Manifest")->required();
  embed->add_option("--models", models, "Model directory (default <out>/models)");
  embed->add_option("--split", split, "train, val or test")->capture_default_str();
  out_opt(embed);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score one split with trained models");
  evaluate_cmd->add_option("-m,--manifest", manifest, "Manifest")->required();
  evaluate_cmd->add_option("--models", models, "Model directory (default <out>/models)");
  evaluate_cmd->add_option("--split", split, "train, val or test")->capture_default_str();
  out_opt(evaluate_cmd);

  GradSuiteOptions gopts;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gradcheck->add_option("--instances", gopts.instances, "Random instances per component")->capture_default_str();
  gradcheck->add_option("--seed", gopts.seed, "Instance seed")->capture_default_str();
  gradcheck->add_option("--corrupt-gradient", gopts.corrupt, "Perturb one component's gradient (self-test)")
      ->group("");

  std::vector<std::string> presets = ablation_presets();
  auto* ablate = app.add_subcommand("ablate", "Train and score every pipeline configuration");
  ablate->add_option("-m,--manifest", manifest, "Manifest with train, val and held-out splits")->required();
  ablate->add_option("--pipelines", presets, "Presets to compare (default: all ten)");
  ablate->add_option("--split", split, "Held-out split")->capture_default_str();
  pflags.add_overrides(*ablate);
  tflags.add(*ablate);
  out_opt(ablate);

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return kUsage;
  }

  const Context ctx{out, err, verbose};
  try {
    const fs::path out_path(out_dir);
    const fs::path model_dir = models.empty() ? out_path / "models" : fs::path(models);
    if (synth->parsed()) {
      spec.task = *parse_task(task);
      return cmd_synth(ctx, spec, out_path);
    }
    if (train->parsed()) return cmd_train(ctx, manifest, pflags.resolve(), tflags.fit(), out_path);
    if (embed->parsed()) return cmd_embed(ctx, manifest, model_dir, parse_split_or_throw(split), out_path);
    if (evaluate_cmd->parsed()) return cmd_evaluate(ctx, manifest, model_dir, parse_split_or_throw(split), out_path);
    if (gradcheck->parsed()) return cmd_gradcheck(ctx, gopts);
    if (ablate->parsed()) {
      return cmd_ablate(ctx, manifest, presets, pflags, tflags.fit(), parse_split_or_throw(split), out_path);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace stag::cli
