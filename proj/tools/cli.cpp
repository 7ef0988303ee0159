// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <memory>
#include <ostream>
#include <vector>

#include "shortlens/error.hpp"
#include "shortlens/pipeline/pipeline.hpp"
#include "shortlens/service/service.hpp"

namespace shortlens::cli {

namespace {

using nlohmann::json;
using pipeline::Outcome;
using pipeline::Pipeline;
using pipeline::PipelineConfig;
using store::Stage;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitProvider = 3;

struct Binding {
  CLI::Option* option;
  std::function<void(PipelineConfig&)> apply;
};

struct Flags {
  PipelineConfig values;
  std::vector<Binding> bindings;

  template <typename T>
  void add(CLI::App& app, const std::string& name, T& target,
           std::function<void(PipelineConfig&, const T&)> setter,
           const std::string& help) {
    CLI::Option* opt = app.add_option(name, target, help)->capture_default_str();
    bindings.push_back({opt, [&target, setter](PipelineConfig& c) { setter(c, target); }});
  }

  /// Applies every option that was given on the command line or in the
  /// config file.
  PipelineConfig apply_to(PipelineConfig base) const {
    for (const auto& b : bindings) {
      if (b.option->count() > 0) b.apply(base);
    }
    return base.resolved();
  }
};

struct Providers {
  std::string kind = "stub";
  std::size_t parallelism = 4;
  std::size_t retries = 3;
  std::unique_ptr<concepts::Captioner> captioner;
  std::unique_ptr<concepts::Refiner> refiner;
  std::unique_ptr<concepts::HttpChatProvider> http;

  pipeline::ProviderSettings settings() const {
    pipeline::ProviderSettings s;
    s.kind = kind == "http" ? pipeline::ProviderSettings::Kind::kHttp
                            : pipeline::ProviderSettings::Kind::kStub;
    s.caption.parallelism = parallelism;
    s.caption.retries = retries;
    s.summary.retries = retries;
    return s;
  }

  std::pair<concepts::Captioner*, concepts::Refiner*> get() {
    if (kind == "http") {
      if (!http) {
        http = std::make_unique<concepts::HttpChatProvider>(
            concepts::HttpProviderConfig::from_env());
      }
      return {http.get(), http.get()};
    }
    if (!captioner) captioner = std::make_unique<concepts::StubCaptioner>();
    if (!refiner) refiner = std::make_unique<concepts::StubRefiner>();
    return {captioner.get(), refiner.get()};
  }
};

Pipeline acquire(store::RunStore& store, const std::string& run_id,
                 bool may_create, const Flags& flags, std::ostream& out) {
  if (!run_id.empty() && store.exists(run_id)) {
    Pipeline p = Pipeline::open(store, run_id);
    const PipelineConfig requested = flags.apply_to(p.config());
    if (requested.to_json() != p.config().to_json()) {
      throw ValidationError("run '" + run_id +
                            "' was created with a different configuration; "
                            "start a new run to change it");
    }
    return p;
  }
  if (may_create) {
    const std::string id = run_id.empty() ? store::make_ulid() : run_id;
    PipelineConfig config = flags.apply_to(PipelineConfig{});
    config.validate();
    Pipeline p = Pipeline::open_or_create(store, id, config);
    out << "run " << p.run_id() << " created under " << store.root().string()
        << "\n";
    return p;
  }
  if (!run_id.empty()) throw NotFound("unknown run '" + run_id + "'");
  const auto runs = store.list_runs();
  if (runs.empty()) {
    throw ValidationError("stage 'generate-data' incomplete: no run under " +
                          store.root().string());
  }
  if (runs.size() > 1) {
    throw InvalidInput(std::to_string(runs.size()) + " runs under " +
                       store.root().string() + "; choose one with --run");
  }
  return acquire(store, runs.front(), false, flags, out);
}

double stage_seconds(const Pipeline& p, Stage s) {
  const auto it = p.record().stage_seconds.find(s);
  return it == p.record().stage_seconds.end() ? 0.0 : it->second;
}

void report(std::ostream& out, const Pipeline& p, Stage stage, Outcome outcome) {
  char line[128];
  if (outcome == Outcome::kRan) {
    double secs = stage_seconds(p, stage);
    if (stage == Stage::kPrototyped) secs += stage_seconds(p, Stage::kClustered);
    std::snprintf(line, sizeof line, "%-14s done (%.1f s)\n",
                  pipeline::command_for(stage), secs);
  } else {
    std::snprintf(line, sizeof line, "%-14s cached\n", pipeline::command_for(stage));
  }
  out << line;
}

void print_clusters(std::ostream& out, const Pipeline& p) {
  store::RunStore store(p.dir().parent_path());
  const auto report = detection::cluster_report_from_artifact(
      store.read_artifact(p.run_id(), "clusters"));
  const std::size_t K = report.clustering.assignment.K;
  std::vector<std::size_t> sizes(K, 0);
  for (std::size_t c : report.clustering.assignment.labels) ++sizes[c];
  auto opt = [](const std::optional<double>& v) {
    char b[16];
    if (!v) return std::string("n/a");
    std::snprintf(b, sizeof b, "%.4f", *v);
    return std::string(b);
  };
  out << "cluster   size  dominant  h_c      bd       bn       score\n";
  for (std::size_t c = 0; c < K; ++c) {
    const auto& s = report.stats[c];
    char line[160];
    std::snprintf(line, sizeof line, "%-8zu %5zu  %8d  %.4f   %-8s %-8s %.4f\n", c,
                  sizes[c], s.dominant_class, s.homogeneity, opt(s.bd).c_str(),
                  opt(s.bn).c_str(), s.score);
    out << line;
  }
  out << "auto selection: cluster " << report.auto_selection.cluster
      << (report.auto_selection.tie ? " (tie, lower index)" : "") << "\n";
}

void print_concepts(std::ostream& out, const json& report) {
  out << "concepts status: " << report.value("status", "?") << "\n";
  for (const auto& c : report.at("clusters")) {
    out << "  cluster " << c.at("cluster").get<std::size_t>() << ": ";
    if (!c.at("error").is_null()) {
      out << "[error] " << c.at("error").get<std::string>() << "\n";
    } else {
      out << c.at("shortcut_candidate").get<std::string>() << "\n";
    }
  }
}

void print_selection(std::ostream& out, const pipeline::SelectionDecision& d) {
  out << "selected cluster " << d.cluster << " (" << d.source << "; automatic choice "
      << d.auto_cluster << ")\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shortcut detection and mitigation pipeline for vision transformers",
               "shortlens"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "INI file of key=value options");

  std::string run_dir = "runs";
  std::string run_id;
  app.add_option("--run-dir", run_dir, "Root directory holding one folder per run")
      ->capture_default_str();
  app.add_option("--run", run_id, "Run id (default: new run, or the only run)");

  Flags flags;
  PipelineConfig& v = flags.values;
  flags.add<std::uint64_t>(app, "--seed", v.seed,
                           [](PipelineConfig& c, const auto& x) { c.seed = x; },
                           "Seed for every random component");
  flags.add<std::size_t>(app, "--k-pca", v.detection.k_pca,
                         [](PipelineConfig& c, const auto& x) { c.detection.k_pca = x; },
                         "PCA dimensions before k-means");
  flags.add<std::size_t>(app, "-K,--clusters", v.detection.clusters,
                         [](PipelineConfig& c, const auto& x) { c.detection.clusters = x; },
                         "Number of k-means clusters");
  flags.add<std::size_t>(
      app, "-N,--representatives", v.detection.representatives,
      [](PipelineConfig& c, const auto& x) { c.detection.representatives = x; },
      "Representative images per cluster");
  flags.add<std::size_t>(
      app, "-M,--prototypes", v.detection.prototypes,
      [](PipelineConfig& c, const auto& x) { c.detection.prototypes = x; },
      "Prototype patches kept per cluster");
  flags.add<double>(
      app, "--lambda-h", v.detection.weights.homogeneity,
      [](PipelineConfig& c, const auto& x) { c.detection.weights.homogeneity = x; },
      "Selection weight of the homogeneity term");
  flags.add<double>(
      app, "--lambda-d", v.detection.weights.dominant,
      [](PipelineConfig& c, const auto& x) { c.detection.weights.dominant = x; },
      "Selection weight of the dominant-class Brier term");
  flags.add<double>(
      app, "--lambda-n", v.detection.weights.non_dominant,
      [](PipelineConfig& c, const auto& x) { c.detection.weights.non_dominant = x; },
      "Selection weight of the non-dominant Brier term");
  flags.add<std::size_t>(app, "--knn-k", v.mitigation.knn_k,
                         [](PipelineConfig& c, const auto& x) { c.mitigation.knn_k = x; },
                         "Neighbours voting on each token");
  flags.add<double>(app, "--head-l2", v.mitigation.head.l2,
                    [](PipelineConfig& c, const auto& x) { c.mitigation.head.l2 = x; },
                    "L2 penalty of the retrained head");
  flags.add<std::size_t>(app, "--epochs", v.train.epochs,
                         [](PipelineConfig& c, const auto& x) { c.train.epochs = x; },
                         "Training epochs");
  flags.add<double>(app, "--lr", v.train.lr,
                    [](PipelineConfig& c, const auto& x) { c.train.lr = x; },
                    "Peak AdamW learning rate");
  flags.add<std::size_t>(app, "--batch", v.train.batch,
                         [](PipelineConfig& c, const auto& x) { c.train.batch = x; },
                         "Training batch size");
  flags.add<std::size_t>(
      app, "--train-per-class", v.data.train_per_class,
      [](PipelineConfig& c, const auto& x) { c.data.train_per_class = x; },
      "Training images per class");
  flags.add<std::size_t>(app, "--val-per-class", v.data.val_per_class,
                         [](PipelineConfig& c, const auto& x) { c.data.val_per_class = x; },
                         "Validation images per class");
  flags.add<std::size_t>(
      app, "--test-per-group", v.data.test_per_group,
      [](PipelineConfig& c, const auto& x) { c.data.test_per_group = x; },
      "Test images per (label, glyph) group");
  flags.add<double>(app, "--rate0", v.data.rate0,
                    [](PipelineConfig& c, const auto& x) { c.data.rate0 = x; },
                    "Glyph rate in class 0");
  flags.add<double>(app, "--rate1", v.data.rate1,
                    [](PipelineConfig& c, const auto& x) { c.data.rate1 = x; },
                    "Glyph rate in class 1");
  flags.add<std::size_t>(app, "--glyph-size", v.data.glyph.size_px,
                         [](PipelineConfig& c, const auto& x) { c.data.glyph.size_px = x; },
                         "Glyph side length in pixels");
  flags.add<std::size_t>(app, "--image-size", v.data.image_size,
                         [](PipelineConfig& c, const auto& x) { c.data.image_size = x; },
                         "Image side length in pixels");
  flags.add<std::size_t>(app, "--patch-size", v.data.patch_size,
                         [](PipelineConfig& c, const auto& x) { c.data.patch_size = x; },
                         "Patch side length in pixels");
  flags.add<std::size_t>(app, "--embed-dim", v.model.embed_dim,
                         [](PipelineConfig& c, const auto& x) { c.model.embed_dim = x; },
                         "Transformer width");
  flags.add<std::size_t>(app, "--heads", v.model.heads,
                         [](PipelineConfig& c, const auto& x) { c.model.heads = x; },
                         "Attention heads");
  flags.add<std::size_t>(app, "--depth", v.model.blocks,
                         [](PipelineConfig& c, const auto& x) { c.model.blocks = x; },
                         "Transformer blocks");

  Providers providers;
  auto add_provider_flags = [&](CLI::App* sub) {
    sub->add_option("--provider", providers.kind, "Concept providers")
        ->check(CLI::IsMember({"stub", "http"}))
        ->capture_default_str();
    sub->add_option("--parallelism", providers.parallelism,
                    "Concurrent caption requests")
        ->capture_default_str();
    sub->add_option("--retries", providers.retries, "Retries per provider call")
        ->capture_default_str();
  };

  auto* gen = app.add_subcommand("generate-data", "Generate the synthetic dataset");
  auto* train = app.add_subcommand("train", "Train the ViT classifier");
  auto* exp = app.add_subcommand("export", "Export validation activations");
  auto* detect = app.add_subcommand("detect", "Cluster images and score prototype patches");
  auto* conc = app.add_subcommand("concepts", "Caption prototypes and summarize clusters");
  add_provider_flags(conc);
  auto* select = app.add_subcommand("select", "Choose the shortcut cluster");
  std::size_t cluster = 0;
  bool select_auto = false;
  bool force = false;
  auto* cluster_opt = select->add_option("--cluster", cluster, "Expert choice");
  auto* auto_opt = select->add_flag("--auto", select_auto, "Automatic choice");
  select->add_flag("--force", force, "Let --auto replace an expert decision");
  cluster_opt->excludes(auto_opt);
  auto_opt->excludes(cluster_opt);
  auto* mitigate = app.add_subcommand("mitigate", "Ablate shortcut tokens and retrain the head");
  auto* evaluate = app.add_subcommand("evaluate", "Group metrics on the balanced test split");
  auto* run_all = app.add_subcommand("run-all", "Every stage in order");
  add_provider_flags(run_all);
  auto* serve = app.add_subcommand("serve", "HTTP/JSON service over --run-dir");
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitValidation;
  }

  try {
    if (serve->parsed()) {
      service::serve(run_dir, host, port);
      return kExitOk;
    }
    store::RunStore store(run_dir);
    const bool creating = gen->parsed() || run_all->parsed();
    Pipeline p = acquire(store, run_id, creating, flags, out);
    if (!creating) out << "run " << p.run_id() << "\n";

    if (gen->parsed()) {
      report(out, p, Stage::kData, p.generate_data());
    } else if (train->parsed()) {
      report(out, p, Stage::kTrained, p.train());
    } else if (exp->parsed()) {
      report(out, p, Stage::kExported, p.export_activations());
    } else if (detect->parsed()) {
      report(out, p, Stage::kPrototyped, p.detect());
      print_clusters(out, p);
    } else if (conc->parsed()) {
      auto [captioner, refiner] = providers.get();
      report(out, p, Stage::kConcepts, p.concepts(*captioner, *refiner, providers.settings()));
      const json r = p.concepts_report();
      print_concepts(out, r);
      if (r.value("status", "") == "failed") {
        err << "error: concept providers failed for every cluster\n";
        return kExitProvider;
      }
    } else if (select->parsed()) {
      if (cluster_opt->count() == 0 && !select_auto) {
        throw InvalidInput("select needs --cluster <c> or --auto");
      }
      const Outcome o = cluster_opt->count() > 0 ? p.select_cluster(cluster)
                                                 : p.select_auto(force);
      report(out, p, Stage::kSelected, o);
      const auto d = p.selection();
      print_selection(out, d);
      if (select_auto && d.source == "expert") {
        out << "kept the expert decision; pass --force to replace it\n";
      }
    } else if (mitigate->parsed()) {
      report(out, p, Stage::kMitigated, p.mitigate());
    } else if (evaluate->parsed()) {
      report(out, p, Stage::kEvaluated, p.evaluate());
      out << p.metrics_table();
    } else if (run_all->parsed()) {
      auto [captioner, refiner] = providers.get();
      p.run_all(*captioner, *refiner, providers.settings(),
                [&](Stage s, Outcome o) { report(out, p, s, o); });
      const json r = p.concepts_report();
      if (r.value("status", "") != "complete") {
        err << "warning: concepts stage status is " << r.value("status", "?") << "\n";
      }
      print_selection(out, p.selection());
      out << p.metrics_table();
      out << "metrics: " << (p.dir() / "metrics.json").string() << "\n";
    }
    return kExitOk;
  } catch (const ProviderError& e) {
    err << "error: " << e.what() << "\n";
    return kExitProvider;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NotFound& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace shortlens::cli
