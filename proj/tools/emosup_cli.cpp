// emosup command-line entry point. Every subcommand writes fixed file names
// under --out plus run_metadata.json, which holds the fully resolved flags
// and can be fed back through --config to repeat the run.
//
// Exit codes: 0 success, 2 usage or validation failure, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "emosup/analysis.hpp"
#include "emosup/corpus.hpp"
#include "emosup/encoders.hpp"
#include "emosup/errors.hpp"
#include "emosup/feature_io.hpp"
#include "emosup/hashing.hpp"
#include "emosup/metrics.hpp"
#include "emosup/pepl.hpp"
#include "emosup/supervision.hpp"
#include "emosup/vtedc.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace emosup;

namespace {

std::string dashed(std::string s) {
  for (auto& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

// Options of one subcommand. Values given on the command line win over the
// --config file, which wins over the defaults.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON file with flag values");
  }

  template <class T>
  CLI::Option* add(const std::string& key, T* target, const std::string& help,
                   bool required = false) {
    CLI::Option* opt = app_->add_option("--" + dashed(key), *target, help);
    if constexpr (std::is_same_v<T, std::vector<int>> ||
                  std::is_same_v<T, std::vector<double>>) {
      opt->delimiter(',');
    }
    entries_.push_back({key, opt, required,
                        [target](const json& j) { *target = j.get<T>(); },
                        [target] { return json(*target); }});
    return opt;
  }

  void flag(const std::string& key, bool* target, const std::string& help) {
    CLI::Option* opt = app_->add_flag("--" + dashed(key), *target, help);
    entries_.push_back({key, opt, false,
                        [target](const json& j) { *target = j.get<bool>(); },
                        [target] { return json(*target); }});
  }

  void resolve() {
    json config = json::object();
    if (!config_path_.empty()) {
      try {
        config = json::parse(read_text_file(config_path_));
      } catch (const json::exception& e) {
        throw LoadError(config_path_ + ": " + e.what());
      }
      // Accept run_metadata.json directly.
      if (config.contains("config") && config.at("config").is_object()) {
        config = json(config.at("config"));
      }
    }
    for (auto& e : entries_) {
      if (e.opt->count() == 0 && config.contains(e.key)) {
        try {
          e.apply(config.at(e.key));
        } catch (const json::exception& ex) {
          throw ContractError("config key '" + e.key + "': " + ex.what());
        }
        e.given = true;
      } else {
        e.given = e.opt->count() > 0;
      }
      if (e.required && !e.given) {
        throw ContractError("missing required option --" + dashed(e.key));
      }
    }
  }

  json resolved() const {
    json j = json::object();
    for (const auto& e : entries_) j[e.key] = e.dump();
    return j;
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    bool required;
    std::function<void(const json&)> apply;
    std::function<json()> dump;
    bool given = false;
  };

  CLI::App* app_;
  std::string config_path_;
  std::vector<Entry> entries_;
};

struct Run {
  std::string command;
  Flags* flags;
  std::string out;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  fs::path path(const std::string& name) const { return fs::path(out) / name; }

  void write(const std::string& name, const std::string& text) {
    write_text_file(path(name), text);
    outputs.push_back(name);
  }

  void write_metadata() const {
    json in = json::object();
    for (const auto& p : inputs) {
      if (!p.empty() && fs::is_regular_file(p)) in[p] = git_blob_hash_file(p);
    }
    json outs = json::object();
    for (const auto& name : outputs) outs[name] = git_blob_hash_file(path(name));
    const json meta = {{"command", command},
                       {"config", flags->resolved()},
                       {"input_hashes", in},
                       {"output_hashes", outs}};
    write_text_file(path("run_metadata.json"), meta.dump(2) + "\n");
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// A corpus with a synthetic world is served by the synthetic suite; any other
// corpus needs a feature manifest whose sample ids match the image refs.
std::unique_ptr<EncoderSuite> suite_for(const CorpusManifest& m,
                                        const std::string& features) {
  if (m.world()) {
    return std::make_unique<SyntheticSuite>(build_synthetic_world(*m.world()));
  }
  if (features.empty()) {
    throw ContractError("corpus has no synthetic world; pass --features");
  }
  return load_precomputed_features(features);
}

NegativePoolTable pools_for(const std::string& choice) {
  if (choice == "reference") return load_paper_pools();
  if (choice == "all") return NegativePoolTable::all_others();
  if (choice == "derived") return derive_negative_pools(reference_similarity_matrix(), 1);
  json j;
  try {
    j = json::parse(read_text_file(choice));
  } catch (const json::exception& e) {
    throw LoadError(choice + ": " + e.what());
  }
  return pools_from_json(j.contains("pools") ? j.at("pools") : j);
}

// ---- gen-corpus ----

struct GenCorpusArgs {
  std::uint64_t seed = 1;
  int identities = 4;
  int per_emotion = 3;
  double gap = 1.0;
  double noise = 0.05;
  int d_latent = 16;
  int d_e = 64;
  int d_b = 32;
  int d_tok = 32;
  double emotion_scale = 1.0;
  double text_perturbation = 0.3;
  bool no_features = false;
};

void cmd_gen_corpus(const GenCorpusArgs& a, Run& run) {
  SyntheticWorldConfig c;
  c.seed = a.seed;
  c.n_identities = a.identities;
  c.gap = a.gap;
  c.noise_sigma = a.noise;
  c.d_latent = a.d_latent;
  c.d_e = a.d_e;
  c.d_b = a.d_b;
  c.d_tok = a.d_tok;
  c.emotion_scale = a.emotion_scale;
  c.text_perturbation = a.text_perturbation;
  c.validate();
  const SyntheticWorldSpec world = build_synthetic_world(c);
  const CorpusManifest m = generate_synthetic_corpus(world, a.per_emotion);
  run.write("manifest.json", to_json(m).dump(2) + "\n");

  if (!a.no_features) {
    const SyntheticSuite suite(world);
    FeatureManifest fm;
    fm.dim = c.d_e;
    for (const auto& s : m.samples()) {
      const std::string rel = "features/" + s.id + ".pcmf";
      const std::vector<Vector> v{suite.visual_encode(s.image_ref)};
      write_feature_file(run.path(rel), v);
      fm.samples.push_back({s.id, s.identity, std::string(emotion_name(s.emotion)), rel});
    }
    for (Emotion e : kAllEmotions) {
      const std::string rel = "features/text_" + std::string(emotion_name(e)) + ".pcmf";
      const std::vector<Vector> v{suite.text_encode(suite.tokenize(emotion_prompt(e)))};
      write_feature_file(run.path(rel), v);
      fm.text_embeddings[std::string(emotion_name(e))] = rel;
    }
    write_feature_manifest(run.path("features.json"), fm);
    run.outputs.push_back("features.json");
  }
  std::cout << "samples: " << m.size() << " (train " << m.indices(Split::kTrain).size()
            << ", val " << m.indices(Split::kVal).size() << ")\n"
            << "identities: " << m.identities().size() << "\n";
}

// ---- pretraining ----

struct TrainArgs {
  std::string manifest;
  std::string features;
  std::string pools = "reference";
  PeplTrainConfig config;
  std::string projector_mode = "multi";
};

void add_train_flags(Flags& f, TrainArgs& a) {
  f.add("manifest", &a.manifest, "corpus manifest.json", true);
  f.add("features", &a.features, "feature manifest for non-synthetic corpora");
  f.add("pools", &a.pools, "negative pools: reference, all, derived, or a pools JSON file");
  f.add("seed", &a.config.seed, "training seed");
  f.add("epochs", &a.config.epochs, "epochs");
  f.add("steps_per_epoch", &a.config.steps_per_epoch, "SGD steps per epoch");
  f.add("batch_size", &a.config.batch_size, "batch size");
  f.add("lr", &a.config.base_lr, "initial learning rate");
  f.add("decay_epochs", &a.config.decay_epochs, "epochs at whose start lr drops");
  f.add("decay_factor", &a.config.decay_factor, "lr divisor at each decay epoch");
  f.add("momentum", &a.config.momentum, "SGD momentum");
  f.add("projector_mode", &a.projector_mode, "multi or single_conditional");
  f.add("guider_hidden", &a.config.guider_hidden, "guider head hidden width");
  f.add("guider_tokens", &a.config.guider_tokens, "prompt tokens from the guider");
}

void cmd_pretrain(const TrainArgs& a, bool vtedc_objective, Run& run) {
  PeplTrainConfig config = a.config;
  const auto mode = parse_projector_mode(a.projector_mode);
  if (!mode) throw ContractError("unknown projector mode '" + a.projector_mode + "'");
  config.projector_mode = *mode;
  config.validate();
  run.inputs = {a.manifest, a.features, a.pools};
  const CorpusManifest m = load_manifest(a.manifest);
  const auto suite = suite_for(m, a.features);
  const NegativePoolTable pools = pools_for(a.pools);

  const PeplTrainResult r = vtedc_objective
                                ? pretrain_with_vtedc_objective(m, pools, *suite, config)
                                : pretrain_pepl(m, pools, *suite, config);
  run.write("checkpoint.json", to_json(r.checkpoint).dump() + "\n");
  run.write("curve.csv", r.curve.to_csv());

  const auto means = r.curve.epoch_means();
  json lrs = json::array();
  for (int e = 0; e < config.epochs; ++e) lrs.push_back(learning_rate_at(config, e));
  json report = {{"objective", vtedc_objective ? "l2" : "l1"},
                 {"epoch_mean_loss", means},
                 {"epoch_lr", lrs},
                 {"final_epoch_mean_loss", means.back()},
                 {"checkpoint_hash", r.checkpoint.parameter_hash()}};
  if (!m.indices(Split::kVal).empty()) {
    report["val_retrieval_accuracy"] = retrieval_accuracy(r.checkpoint, m, Split::kVal, *suite);
  }
  run.write("report.json", report.dump(2) + "\n");
  std::cout << "epoch-0 mean loss " << fmt(means.front()) << ", final epoch mean loss "
            << fmt(means.back()) << "\n";
  if (report.contains("val_retrieval_accuracy")) {
    std::cout << "val retrieval accuracy " << fmt(report["val_retrieval_accuracy"].get<double>())
              << "\n";
  }
}

// ---- analysis ----

struct GapArgs {
  std::string manifest;
  std::string features;
};

void cmd_analyze_gap(const GapArgs& a, Run& run) {
  FeaturesByEmotion feats;
  TextByEmotion text;
  if (!a.manifest.empty()) {
    const CorpusManifest m = load_manifest(a.manifest);
    const auto suite = suite_for(m, a.features);
    feats = collect_features(m, *suite);
    text = plain_text_embeddings(*suite);
  } else if (!a.features.empty()) {
    const FeatureManifest fm = read_feature_manifest(a.features);
    const auto base = fs::path(a.features).parent_path();
    for (const auto& r : fm.samples) {
      const auto e = parse_emotion(r.emotion);
      if (!e) throw LoadError("unknown emotion '" + r.emotion + "' for " + r.id);
      for (auto& v : read_feature_file(base / r.feature_file)) feats[code(*e)].push_back(v);
    }
    for (Emotion e : kAllEmotions) {
      const auto it = fm.text_embeddings.find(std::string(emotion_name(e)));
      if (it == fm.text_embeddings.end()) {
        throw LoadError("feature manifest lacks a text embedding for " +
                        std::string(emotion_name(e)));
      }
      text[code(e)] = read_feature_file(base / it->second).at(0);
    }
  } else {
    throw ContractError("analyze-gap needs --manifest or --features");
  }
  run.inputs = {a.manifest, a.features};
  const GapReport gap = modality_gap_report(feats, text);
  const CrossModalSimilarityMatrix mat = cross_modal_matrix(feats, text);
  run.write("gap.csv", gap_report_to_csv(gap));
  run.write("matrix.csv", matrix_to_csv(mat));
  const json report = {{"gap", to_json(gap)},
                       {"matrix", to_json(mat)},
                       {"reference_gap", to_json(reference_gap_table())}};
  run.write("report.json", report.dump(2) + "\n");
  std::cout << "mean S_image " << fmt(gap.average.s_image) << ", mean S_match "
            << fmt(gap.average.s_match) << ", mean gap " << fmt(gap.average.gap) << "\n";
}

struct PoolArgs {
  int k = 1;
  std::string matrix = "reference";
};

void cmd_derive_pools(const PoolArgs& a, Run& run) {
  CrossModalSimilarityMatrix m;
  if (a.matrix == "reference") {
    m = reference_similarity_matrix();
  } else {
    run.inputs = {a.matrix};
    m = matrix_from_csv(read_text_file(a.matrix));
  }
  const NegativePoolTable derived = derive_negative_pools(m, a.k);
  const NegativePoolTable reference = load_paper_pools();
  const PoolComparison cmp = compare_pools(derived, reference);
  const json j = {{"k", a.k},
                  {"pools", to_json(derived)},
                  {"reference_pools", to_json(reference)},
                  {"comparison", to_json(cmp)}};
  run.write("pools.json", j.dump(2) + "\n");
  std::cout << "pools matching the reference table: " << cmp.matching.size() << "/7\n";
  for (Emotion e : cmp.discrepant) {
    std::cout << "discrepant: " << emotion_name(e) << " (derived pool differs from the reference)\n";
  }
}

// ---- metrics ----

struct MetricArgs {
  std::string real;
  std::string gen;
  std::string audio;
  std::string visual;
};

void cmd_eval_metrics(const MetricArgs& a, Run& run) {
  run.inputs = {a.real, a.gen, a.audio, a.visual};
  FeatureSet real{load_feature_set(a.real), a.real};
  FeatureSet gen{load_feature_set(a.gen), a.gen};
  MetricReport r;
  r.n_real = real.vectors.size();
  r.n_gen = gen.vectors.size();
  FadDiagnostics diag;
  r.fad = fad(real, gen, &diag);
  if (diag.warn) {
    std::cerr << "warning: eigenvalue clamping removed " << diag.clamped_mass
              << " of covariance mass (trace " << diag.trace << ")\n";
  }
  r.csim = csim(gen.vectors, real.vectors);
  if (!a.audio.empty() || !a.visual.empty()) {
    if (a.audio.empty() || a.visual.empty()) {
      throw ContractError("--audio and --visual must be given together");
    }
    r.lse_d = lse_d(load_feature_set(a.audio), load_feature_set(a.visual));
  } else {
    r.lse_d = lse_d(real.vectors, gen.vectors);
  }
  run.write("report.json", to_json(r).dump(2) + "\n");
  std::cout << "fad " << fmt(r.fad) << ", lse_d " << fmt(r.lse_d) << ", csim " << fmt(r.csim)
            << "\n";
}

// ---- supervision ----

struct SupervisionArgs {
  std::string manifest;
  std::string features;
  std::string checkpoint;
  std::string baseline = "toy";
  double lambda = -1.0;  // negative: use the baseline default
  std::vector<double> grid;
  SupervisionConfig config;
};

void add_supervision_flags(Flags& f, SupervisionArgs& a) {
  f.add("manifest", &a.manifest, "corpus manifest.json", true);
  f.add("features", &a.features, "feature manifest for non-synthetic corpora");
  f.add("checkpoint", &a.checkpoint, "frozen PEPL checkpoint.json", true);
  f.add("seed", &a.config.seed, "generator seed");
  f.add("steps", &a.config.steps, "generator SGD steps");
  f.add("batch_size", &a.config.batch_size, "pairs per step");
  f.add("lr", &a.config.lr, "generator learning rate");
  f.add("hidden", &a.config.hidden, "generator hidden width");
}

struct Loaded {
  CorpusManifest manifest;
  std::unique_ptr<EncoderSuite> suite;
  PeplCheckpoint ckpt;
};

Loaded load_for_supervision(const SupervisionArgs& a, Run& run) {
  run.inputs = {a.manifest, a.features, a.checkpoint};
  Loaded l;
  l.manifest = load_manifest(a.manifest);
  l.suite = suite_for(l.manifest, a.features);
  l.ckpt = load_checkpoint(a.checkpoint);
  if (!l.ckpt.frozen()) throw ContractError("checkpoint is not frozen");
  return l;
}

void cmd_supervise_demo(const SupervisionArgs& a, Run& run) {
  LambdaConfig lambda = default_lambda(a.baseline);
  if (a.lambda >= 0.0) lambda.value = a.lambda;
  lambda.validate();
  Loaded l = load_for_supervision(a, run);
  const std::string before = l.ckpt.parameter_hash();
  const DemoReport r = supervise_demo(l.manifest, l.ckpt, lambda, *l.suite, a.config);
  if (l.ckpt.parameter_hash() != before) {
    throw ContractError("PEPL checkpoint changed during supervision");
  }
  json j = to_json(r);
  j["checkpoint_hash"] = before;
  run.write("report.json", j.dump(2) + "\n");
  run.write("report.csv", demo_runs_to_csv({r.baseline, r.supervised}));
  std::cout << "emotion accuracy: lambda=0 " << fmt(r.baseline.emotion_accuracy)
            << ", lambda=" << fmt(lambda.value) << " " << fmt(r.supervised.emotion_accuracy)
            << "\n";
}

void cmd_sweep_lambda(const SupervisionArgs& a, Run& run) {
  Loaded l = load_for_supervision(a, run);
  const auto runs = sweep_lambda(l.manifest, l.ckpt, a.grid, *l.suite, a.config);
  run.write("sweep.csv", demo_runs_to_csv(runs));
  json rows = json::array();
  for (const auto& r : runs) rows.push_back(to_json(r));
  run.write("report.json", json{{"runs", rows}}.dump(2) + "\n");
  std::cout << runs.size() << " lambda values evaluated\n";
}

struct DiffArgs {
  std::string manifest;
  std::string features;
  std::string checkpoint;
  bool non_corresponding = false;
};

void cmd_export_diffs(const DiffArgs& a, Run& run) {
  run.inputs = {a.manifest, a.features, a.checkpoint};
  const CorpusManifest m = load_manifest(a.manifest);
  const auto suite = suite_for(m, a.features);
  const PeplCheckpoint ckpt = load_checkpoint(a.checkpoint);
  const auto rows = collect_diffs(ckpt, m, *suite, a.non_corresponding);
  run.write("diffs.csv", diffs_to_csv(rows));
  std::cout << rows.size() << " difference rows\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Emotion supervision toolkit: prompt learning, difference alignment, "
               "metrics and analyses"};
  app.require_subcommand(1);

  std::vector<std::unique_ptr<Flags>> all_flags;
  std::string out;
  std::function<void(Run&)> action;
  std::string command;
  Flags* active = nullptr;

  auto sub = [&](const std::string& name, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    all_flags.push_back(std::make_unique<Flags>(s));
    Flags* f = all_flags.back().get();
    f->add("out", &out, "output directory", true);
    s->callback([&, f, name] {
      command = name;
      active = f;
    });
    return f;
  };

  GenCorpusArgs gen;
  {
    Flags* f = sub("gen-corpus", "generate a synthetic corpus");
    f->add("seed", &gen.seed, "world seed");
    f->add("identities", &gen.identities, "number of identities");
    f->add("per_emotion", &gen.per_emotion, "samples per identity and emotion");
    f->add("gap", &gen.gap, "modality offset norm");
    f->add("noise", &gen.noise, "visual noise sigma");
    f->add("d_latent", &gen.d_latent, "latent dimension");
    f->add("d_e", &gen.d_e, "embedding dimension");
    f->add("d_b", &gen.d_b, "identity backbone dimension");
    f->add("d_tok", &gen.d_tok, "token dimension");
    f->add("emotion_scale", &gen.emotion_scale, "mean emotion prototype norm");
    f->add("text_perturbation", &gen.text_perturbation, "text map perturbation");
    f->flag("no_features", &gen.no_features, "skip writing feature files");
  }
  TrainArgs pepl_args;
  add_train_flags(*sub("pretrain-pepl", "pre-train PEPL with the contrastive loss"), pepl_args);
  TrainArgs ablation_args;
  add_train_flags(*sub("pretrain-vtedc-ablation",
                       "pre-train PEPL with the difference loss instead"),
                  ablation_args);
  GapArgs gap_args;
  {
    Flags* f = sub("analyze-gap", "modality gap report and cross-modal matrix");
    f->add("manifest", &gap_args.manifest, "corpus manifest.json");
    f->add("features", &gap_args.features, "feature manifest");
  }
  PoolArgs pool_args;
  {
    Flags* f = sub("derive-pools", "negative pools from a cross-modal matrix");
    f->add("k", &pool_args.k, "most similar emotions to exclude per row");
    f->add("matrix", &pool_args.matrix, "reference (built-in table) or a matrix CSV");
  }
  MetricArgs metric_args;
  {
    Flags* f = sub("eval-metrics", "FAD, LSE-D and CSIM over feature files");
    f->add("real", &metric_args.real, "real features", true);
    f->add("gen", &metric_args.gen, "generated features", true);
    f->add("audio", &metric_args.audio, "audio sync embeddings");
    f->add("visual", &metric_args.visual, "visual sync embeddings");
  }
  SupervisionArgs demo_args;
  {
    Flags* f = sub("supervise-demo", "toy generator with and without the L2 term");
    add_supervision_flags(*f, demo_args);
    f->add("baseline", &demo_args.baseline, "ned, icface, sserd or toy");
    f->add("lambda", &demo_args.lambda, "override the baseline's lambda");
  }
  SupervisionArgs sweep_args;
  {
    Flags* f = sub("sweep-lambda", "toy supervision over a lambda grid");
    add_supervision_flags(*f, sweep_args);
    f->add("grid", &sweep_args.grid, "comma separated lambda values", true);
  }
  DiffArgs diff_args;
  {
    Flags* f = sub("export-diffs", "export image and text difference vectors");
    f->add("manifest", &diff_args.manifest, "corpus manifest.json", true);
    f->add("features", &diff_args.features, "feature manifest");
    f->add("checkpoint", &diff_args.checkpoint, "frozen PEPL checkpoint.json", true);
    f->flag("non_corresponding", &diff_args.non_corresponding,
            "also export non-corresponding text differences");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    active->resolve();
    Run run{command, active, out, {}, {}};
    if (command == "gen-corpus") cmd_gen_corpus(gen, run);
    if (command == "pretrain-pepl") cmd_pretrain(pepl_args, false, run);
    if (command == "pretrain-vtedc-ablation") cmd_pretrain(ablation_args, true, run);
    if (command == "analyze-gap") cmd_analyze_gap(gap_args, run);
    if (command == "derive-pools") cmd_derive_pools(pool_args, run);
    if (command == "eval-metrics") cmd_eval_metrics(metric_args, run);
    if (command == "supervise-demo") cmd_supervise_demo(demo_args, run);
    if (command == "sweep-lambda") cmd_sweep_lambda(sweep_args, run);
    if (command == "export-diffs") cmd_export_diffs(diff_args, run);
    run.write_metadata();
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
