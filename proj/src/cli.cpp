#include "convoher2/cli.hpp"

#include <fstream>
#include <iomanip>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "convoher2/backbone.hpp"
#include "convoher2/error.hpp"
#include "convoher2/feature_store.hpp"
#include "convoher2/head.hpp"
#include "convoher2/ingest.hpp"
#include "convoher2/model.hpp"
#include "convoher2/reporting.hpp"
#include "convoher2/verify.hpp"

namespace convoher2 {
namespace fs = std::filesystem;
namespace {

struct Flags {
  std::optional<std::string> config;
  std::optional<std::string> modality;
  std::optional<std::string> data_root;
  std::optional<std::string> manifest;
  std::optional<std::string> checkpoint;
  std::optional<std::string> image;
  std::optional<std::string> out_dir;
  std::optional<std::string> seed;
  std::optional<std::string> epochs;
  std::optional<std::string> batch_size;
  std::optional<std::string> lr;
  std::optional<std::string> monitor;
  bool use_cached_features = false;
  bool force_split = false;
};

// Flags that double as config keys override every other source.
KeyValues flag_overrides(const Flags& f) {
  KeyValues kv;
  const auto put = [&](const char* key, const std::optional<std::string>& v) {
    if (v) kv[key] = *v;
  };
  put("modality", f.modality);
  put("data_root", f.data_root);
  put("out_dir", f.out_dir);
  put("seed", f.seed);
  put("epochs", f.epochs);
  put("batch_size", f.batch_size);
  put("learning_rate", f.lr);
  put("checkpoint_monitor", f.monitor);
  if (f.use_cached_features) kv["use_cached_features"] = "true";
  return kv;
}

PipelineConfig resolve(const Flags& f, const KeyValues& env) {
  std::optional<fs::path> file;
  if (f.config) file = *f.config;
  return load_config(file, env, flag_overrides(f));
}

const std::string& required(const std::optional<std::string>& v, const char* flag) {
  if (!v || v->empty()) throw Error(ErrorCode::PreconditionViolation, std::string(flag) + " is required");
  return *v;
}

BackboneSpec backbone_spec(const PipelineConfig& cfg) {
  if (cfg.backbone == "stub") return BackboneSpec::stub(kInceptionV3FeatureDim, cfg.backbone_seed);
  BackboneSpec spec;
  spec.weights = cfg.backbone_weights;
  return spec;
}

fs::path feature_cache_path(const PipelineConfig& cfg) {
  return cfg.feature_cache.empty() ? cfg.out_dir / "features.bin" : cfg.feature_cache;
}

void echo_config(const PipelineConfig& cfg, std::ostream& out) {
  out << "# resolved configuration (config_hash=" << cfg.config_hash() << ")\n";
  for (const auto& line : cfg.resolved_lines()) out << line << '\n';
}

void print_distribution(const DatasetManifest& m, std::ostream& out) {
  out << "modality " << to_string(m.modality()) << ": " << m.size() << " records, " << m.skipped()
      << " skipped\n";
  for (int k = 0; k < kNumScores; ++k) {
    out << "  HER2 " << std::setw(2) << Her2Score::from_index(k).label() << "  " << m.class_counts()[k] << '\n';
  }
  const SplitCounts& s = m.split_counts();
  out << "  split train=" << s.train << " test=" << s.test << " unsplit=" << s.unsplit << '\n';
  const DistributionCheck check = check_distribution(m);
  out << "  deviation from BCI reference counts: " << check.total_deviation
      << (check.flagged ? " (flagged)" : "") << '\n';
}

int cmd_ingest(const Flags& f, const KeyValues& env, std::ostream& out) {
  const PipelineConfig cfg = resolve(f, env);
  required(f.modality, "--modality");
  if (cfg.data_root.empty()) throw Error(ErrorCode::PreconditionViolation, "--data-root is required");
  DatasetManifest manifest = scan_dataset(cfg.data_root, cfg.train.modality, cfg.label_pattern);
  const bool presplit = manifest.split_counts().unsplit == 0;
  if (!presplit || f.force_split) {
    SplitOptions so;
    so.train_fraction = cfg.train_fraction;
    so.seed = cfg.train.seed;
    so.stratified = cfg.stratified;
    so.force = f.force_split;
    manifest = split_manifest(manifest, so);
  }
  const fs::path path = f.manifest ? fs::path(*f.manifest)
                                   : cfg.out_dir / ("manifest_" + std::string(to_string(cfg.train.modality)) + ".tsv");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  manifest.save(path);
  print_distribution(manifest, out);
  out << "manifest written to " << path.string() << '\n';
  return kExitOk;
}

int cmd_extract(const Flags& f, const KeyValues& env, std::ostream& out) {
  const PipelineConfig cfg = resolve(f, env);
  const DatasetManifest manifest = DatasetManifest::load(required(f.manifest, "--manifest"));
  ModelHandle handle = compose(backbone_spec(cfg), build_head(kInceptionV3FeatureDim));
  FeatureStore store(handle.backbone->spec().feature_dim);
  extract_to_store(handle, manifest, store);
  const fs::path path = feature_cache_path(cfg);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  store.save(path);
  out << "cached " << store.size() << " feature vectors of width " << store.dim() << " in " << path.string() << '\n';
  return kExitOk;
}

int cmd_train(const Flags& f, const KeyValues& env, std::ostream& out) {
  const PipelineConfig cfg = resolve(f, env);
  required(f.modality, "--modality");
  const DatasetManifest manifest = DatasetManifest::load(required(f.manifest, "--manifest"));
  if (manifest.modality() != cfg.train.modality) {
    throw Error(ErrorCode::ConfigurationError, "manifest modality " + std::string(to_string(manifest.modality())) +
                                                   " does not match --modality");
  }
  echo_config(cfg, out);
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream resolved(cfg.out_dir / "config.resolved");
    for (const auto& line : cfg.resolved_lines()) resolved << line << '\n';
  }

  HeadInit init;
  init.seed = cfg.train.seed;
  ModelHandle handle = compose(backbone_spec(cfg), build_head(kInceptionV3FeatureDim), init);
  handle.metadata.config_hash = cfg.config_hash();
  handle.metadata.modality = cfg.train.modality;

  TrainOptions options;
  options.checkpoint_path = cfg.out_dir / "best.ckpt";
  options.history_path = cfg.out_dir / "history.ndjson";
  options.config_hash = cfg.config_hash();
  options.augment = cfg.augment ? AugmentPolicy{} : AugmentPolicy::disabled();
  options.on_epoch = [&](const EpochMetrics& m) {
    out << "epoch " << m.epoch << " train_loss=" << m.train_loss << " train_acc=" << m.train_accuracy;
    if (m.val_loss) out << " val_loss=" << *m.val_loss << " val_acc=" << *m.val_accuracy;
    out << '\n';
  };

  TrainResult result;
  if (cfg.use_cached_features) {
    if (cfg.augment) out << "note: augmentation is not applied to cached features\n";
    const FeatureStore store = FeatureStore::load(feature_cache_path(cfg));
    result = train_on_cached_features(handle, store, labeled_samples(manifest, Split::Train),
                                      labeled_samples(manifest, Split::Test), cfg.train, options);
  } else {
    result = train(handle, manifest, &manifest, cfg.train, options);
  }
  if (const auto best = result.best()) {
    out << "best epoch " << best->epoch << " " << to_string(cfg.train.checkpoint_monitor) << "="
        << best->monitored_loss << " checkpoint " << best->path.string() << '\n';
  } else {
    out << "no checkpoint written\n";
  }
  return kExitOk;
}

int cmd_evaluate(const Flags& f, const KeyValues& env, std::ostream& out) {
  const PipelineConfig cfg = resolve(f, env);
  required(f.modality, "--modality");
  const fs::path ckpt = required(f.checkpoint, "--checkpoint");
  const DatasetManifest manifest = DatasetManifest::load(required(f.manifest, "--manifest"));
  const ModelHandle handle = load_checkpoint(ckpt);

  CheckpointMeta meta;
  meta.path = ckpt;
  if (fs::exists(sidecar_path(ckpt))) {
    const CheckpointSidecar side = read_sidecar(ckpt);
    meta.epoch = side.epoch;
    meta.monitored_loss = side.monitored_loss;
    meta.config_hash = side.config_hash;
  }

  SplitEvaluation ev;
  if (cfg.use_cached_features) {
    const FeatureStore store = FeatureStore::load(feature_cache_path(cfg));
    ev = evaluate_cached(handle, store, labeled_samples(manifest, Split::Test), cfg.train.batch_size);
  } else {
    ev = evaluate_split(handle, manifest, Split::Test, cfg.train.batch_size);
  }
  const EvaluationReport report = make_report(ev, cfg.train.modality, meta);
  const fs::path path = cfg.out_dir / "report.json";
  write_report(report, path);
  out << "accuracy " << std::fixed << std::setprecision(4) << report.accuracy << " (" << report.matrix.trace() << "/"
      << report.n_samples << ") loss " << report.loss << "\nreport written to " << path.string() << '\n';
  return kExitOk;
}

int cmd_predict(const Flags& f, const KeyValues& env, std::ostream& out) {
  const PipelineConfig cfg = resolve(f, env);
  const ModelHandle handle = load_checkpoint(required(f.checkpoint, "--checkpoint"));
  const fs::path image = required(f.image, "--image");
  const ImageTensor t = normalize(decode_resize(image, cfg.image_side));

  Batch batch;
  batch.side = cfg.image_side;
  batch.images = t.data;
  batch.labels.push_back({});
  batch.scores.push_back(Her2Score::from_index(0));
  std::string id;
  try {
    id = derive_sample_id(image.filename().string(), cfg.label_pattern);
  } catch (const Error&) {
    id = image.stem().string();
  }
  batch.record_ids.push_back(id);

  const Eigen::MatrixXf probs = forward(handle, batch, Mode::Infer);
  Eigen::Index arg = 0;
  probs.row(0).maxCoeff(&arg);
  out << Her2Score::from_index(static_cast<int>(arg)).label() << std::fixed << std::setprecision(6);
  for (Eigen::Index k = 0; k < probs.cols(); ++k) out << ' ' << probs(0, k);
  out << '\n';
  return kExitOk;
}

int cmd_report(const Flags& f, const KeyValues& env, std::ostream& out) {
  const PipelineConfig cfg = resolve(f, env);
  const auto history = read_history(cfg.out_dir / "history.ndjson");
  const CurveFiles files = curves(history, cfg.out_dir / "figures");
  out << "figures: " << files.accuracy_figure.string() << ", " << files.loss_figure.string() << '\n';

  std::vector<ComparisonRow> measured;
  const fs::path report_path = cfg.out_dir / "report.json";
  if (fs::exists(report_path)) {
    std::ifstream in(report_path);
    const auto j = nlohmann::json::parse(in);
    const std::string modality = j.at("modality").is_null() ? "?" : j.at("modality").get<std::string>();
    measured.push_back({"convoHER2 (this run)", "BCI (" + modality + ")", j.at("accuracy").get<double>()});
  }
  const std::string table = comparison_table(measured);
  std::ofstream(cfg.out_dir / "comparison.md") << table;
  out << table;
  return kExitOk;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::NonFiniteGradient:
      return kExitFailure;
    default:
      return kExitUsage;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const KeyValues& environment) {
  CLI::App app{"HER2 score classification on stained tissue patches", "convoher2"};
  app.require_subcommand(1);
  Flags f;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "flat key=value config file");
    sub->add_option("--out-dir", f.out_dir, "output directory");
  };
  const auto modality = [&](CLI::App* sub) {
    sub->add_option("--modality", f.modality, "stain modality")->check(CLI::IsMember({"HE", "IHC"}));
  };
  const auto training = [&](CLI::App* sub) {
    sub->add_option("--seed", f.seed, "random seed");
    sub->add_option("--epochs", f.epochs, "number of epochs");
    sub->add_option("--batch-size", f.batch_size, "mini-batch size");
    sub->add_option("--lr", f.lr, "Adam learning rate");
    sub->add_option("--monitor", f.monitor, "checkpoint monitor")->check(CLI::IsMember({"train_loss", "val_loss"}));
  };

  CLI::App* ingest = app.add_subcommand("ingest", "scan a corpus, split it and write a manifest");
  common(ingest);
  modality(ingest);
  ingest->add_option("--data-root", f.data_root, "corpus root directory");
  ingest->add_option("--manifest", f.manifest, "manifest output path");
  ingest->add_option("--seed", f.seed, "split seed");
  ingest->add_flag("--force-split", f.force_split, "re-split even when the corpus ships a split");

  CLI::App* extract = app.add_subcommand("extract-features", "run the frozen backbone and cache features");
  common(extract);
  extract->add_option("--manifest", f.manifest, "manifest path");

  CLI::App* train_cmd = app.add_subcommand("train", "train the classification head");
  common(train_cmd);
  modality(train_cmd);
  training(train_cmd);
  train_cmd->add_option("--manifest", f.manifest, "manifest path");
  train_cmd->add_flag("--use-cached-features", f.use_cached_features, "train from the feature cache");

  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  common(evaluate);
  modality(evaluate);
  evaluate->add_option("--manifest", f.manifest, "manifest path");
  evaluate->add_option("--checkpoint", f.checkpoint, "checkpoint path");
  evaluate->add_option("--batch-size", f.batch_size, "evaluation batch size");
  evaluate->add_flag("--use-cached-features", f.use_cached_features, "evaluate from the feature cache");

  CLI::App* predict = app.add_subcommand("predict", "score one image");
  predict->add_option("--config", f.config, "flat key=value config file");
  predict->add_option("--checkpoint", f.checkpoint, "checkpoint path");
  predict->add_option("--image", f.image, "PNG or JPEG image");

  CLI::App* report = app.add_subcommand("report", "render curves and the comparison table for a run");
  common(report);

  CLI::App* verify = app.add_subcommand("verify", "run the numerics self-checks");
  verify->add_option("--seed", f.seed, "seed for the synthetic tensors");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "convoher2: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*ingest) return cmd_ingest(f, environment, out);
    if (*extract) return cmd_extract(f, environment, out);
    if (*train_cmd) return cmd_train(f, environment, out);
    if (*evaluate) return cmd_evaluate(f, environment, out);
    if (*predict) return cmd_predict(f, environment, out);
    if (*report) return cmd_report(f, environment, out);
    if (*verify) {
      std::uint64_t seed = 0;
      if (f.seed) seed = load_config(std::nullopt, {}, {{"seed", *f.seed}}).train.seed;
      const bool ok = print_verification(out, seed);
      out << (ok ? "verify: all checks passed\n" : "verify: FAILED\n");
      return ok ? kExitOk : kExitFailure;
    }
  } catch (const Error& e) {
    err << "convoher2: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "convoher2: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace convoher2
