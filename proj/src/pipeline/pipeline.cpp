// SPDX-License-Identifier: Apache-2.0
#include "shortlens/pipeline/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>

#include "shortlens/error.hpp"

namespace shortlens::pipeline {

namespace fs = std::filesystem;
using store::Artifact;
using store::Tensor;
using numerics::Matrix;

namespace {

constexpr const char* kDataset = "dataset";
constexpr const char* kModel = "model";
constexpr const char* kTraining = "training";
constexpr const char* kActivations = "activations";
constexpr const char* kClusters = "clusters";
constexpr const char* kPrototypes = "prototypes";
constexpr const char* kConceptsKind = "concepts";
constexpr const char* kSelection = "selection";
constexpr const char* kMitigation = "mitigation";
constexpr const char* kMetricsFile = "metrics.json";
constexpr const char* kTimingsFile = "timings.json";

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ =
      std::chrono::steady_clock::now();
};

int argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw NotFound("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor masks_tensor(const std::vector<mitigation::AblationMask>& masks,
                    std::size_t tokens) {
  std::vector<std::uint8_t> flat;
  flat.reserve(masks.size() * tokens);
  for (const auto& m : masks) flat.insert(flat.end(), m.flags.begin(), m.flags.end());
  return Tensor::from_u8({masks.size(), tokens}, flat);
}

std::vector<mitigation::AblationMask> masks_from(const Tensor& flags,
                                                 const Tensor& guard,
                                                 const Tensor& ids) {
  const auto f = flags.to_u8();
  const auto g = guard.to_u8();
  const auto id = ids.to_i64();
  const std::size_t n = flags.shape.at(0);
  const std::size_t t = flags.shape.at(1);
  std::vector<mitigation::AblationMask> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].image_id = static_cast<std::uint64_t>(id[i]);
    out[i].flags.assign(f.begin() + static_cast<std::ptrdiff_t>(i * t),
                        f.begin() + static_cast<std::ptrdiff_t>((i + 1) * t));
    out[i].guard_applied = g[i] != 0;
  }
  return out;
}

Tensor u8_vector(const std::vector<int>& v) {
  std::vector<std::uint8_t> b(v.begin(), v.end());
  return Tensor::from_u8({b.size()}, b);
}

std::vector<int> int_vector(const Tensor& t) {
  const auto b = t.to_u8();
  return {b.begin(), b.end()};
}

}  // namespace

// ---------------------------------------------------------------------------
// activation artifacts

Artifact activations_to_artifact(
    const std::vector<vit::ActivationRecord>& records) {
  if (records.empty()) throw InvalidInput("no activation records to store");
  const auto& first = records.front();
  const std::size_t n = records.size();
  const std::size_t t = first.token_embeddings.rows();
  const std::size_t d = first.token_embeddings.cols();
  const std::size_t h = first.per_head_keys.size();
  const std::size_t dh = h > 0 ? first.per_head_keys.front().cols() : 0;
  const std::size_t c = first.logits.size();
  std::vector<std::int64_t> ids;
  std::vector<double> tokens, keys, cls, logits, probs;
  std::vector<std::uint32_t> positions;
  for (const auto& r : records) {
    if (r.token_embeddings.rows() != t || r.per_head_keys.size() != h) {
      throw InvalidInput("activation records disagree in shape");
    }
    ids.push_back(static_cast<std::int64_t>(r.image_id));
    tokens.insert(tokens.end(), r.token_embeddings.values().begin(),
                  r.token_embeddings.values().end());
    for (const auto& k : r.per_head_keys) {
      keys.insert(keys.end(), k.values().begin(), k.values().end());
    }
    cls.insert(cls.end(), r.cls_embedding.begin(), r.cls_embedding.end());
    logits.insert(logits.end(), r.logits.begin(), r.logits.end());
    probs.insert(probs.end(), r.probs.begin(), r.probs.end());
    positions.insert(positions.end(), r.token_positions.begin(),
                     r.token_positions.end());
  }
  Artifact a;
  a.meta = {{"count", n}, {"tokens", t}, {"dim", d}, {"heads", h}};
  a.arrays["image_ids"] = Tensor::from_i64({n}, ids);
  a.arrays["token_embeddings"] = Tensor::from_f64({n, t, d}, tokens);
  a.arrays["keys"] = Tensor::from_f64({n, h, t, dh}, keys);
  a.arrays["cls"] = Tensor::from_f64({n, d}, cls);
  a.arrays["logits"] = Tensor::from_f64({n, c}, logits);
  a.arrays["probs"] = Tensor::from_f64({n, c}, probs);
  a.arrays["positions"] = Tensor::from_u32({n, t}, positions);
  return a;
}

std::vector<vit::ActivationRecord> activations_from_artifact(const Artifact& a) {
  auto get = [&](const char* name) -> const Tensor& {
    const auto it = a.arrays.find(name);
    if (it == a.arrays.end()) {
      throw IntegrityError(std::string("activations: missing array ") + name, 0);
    }
    return it->second;
  };
  const Tensor& tok = get("token_embeddings");
  const Tensor& key = get("keys");
  if (tok.shape.size() != 3 || key.shape.size() != 4) {
    throw IntegrityError("activations: bad array rank", 9);
  }
  const std::size_t n = tok.shape[0], t = tok.shape[1], d = tok.shape[2];
  const std::size_t h = key.shape[1], dh = key.shape[3];
  const auto ids = get("image_ids").to_i64();
  const auto tokens = tok.to_f64();
  const auto keys = key.to_f64();
  const auto cls = get("cls").to_f64();
  const auto logits = get("logits").to_f64();
  const auto probs = get("probs").to_f64();
  const auto positions = get("positions").to_u32();
  const std::size_t c = get("logits").shape.at(1);
  if (ids.size() != n || key.shape[0] != n || key.shape[2] != t ||
      cls.size() != n * d || probs.size() != n * c || positions.size() != n * t) {
    throw IntegrityError("activations: arrays disagree in length", 0);
  }
  std::vector<vit::ActivationRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = out[i];
    r.image_id = static_cast<std::uint64_t>(ids[i]);
    r.token_embeddings = Matrix(
        t, d, std::vector<double>(tokens.begin() + i * t * d,
                                  tokens.begin() + (i + 1) * t * d));
    for (std::size_t hh = 0; hh < h; ++hh) {
      const std::size_t off = (i * h + hh) * t * dh;
      r.per_head_keys.emplace_back(
          t, dh, std::vector<double>(keys.begin() + off,
                                     keys.begin() + off + t * dh));
    }
    r.cls_embedding.assign(cls.begin() + i * d, cls.begin() + (i + 1) * d);
    r.logits.assign(logits.begin() + i * c, logits.begin() + (i + 1) * c);
    r.probs.assign(probs.begin() + i * c, probs.begin() + (i + 1) * c);
    r.token_positions.assign(positions.begin() + i * t,
                             positions.begin() + (i + 1) * t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// run lifecycle

Pipeline::Pipeline(store::RunStore& store, store::RunRecord record)
    : store_(&store), record_(std::move(record)) {
  try {
    config_ = PipelineConfig::from_json(record_.config);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("run '" + record_.run_id +
                             "' has an unreadable config: " + e.what(),
                         0);
  }
}

Pipeline Pipeline::open_or_create(store::RunStore& store,
                                  const std::string& run_id,
                                  const PipelineConfig& config) {
  if (store.exists(run_id)) return open(store, run_id);
  const PipelineConfig resolved = config.resolved();
  resolved.validate();
  return Pipeline(store, store.create_run(resolved.to_json(), run_id));
}

Pipeline Pipeline::open(store::RunStore& store, const std::string& run_id) {
  return Pipeline(store, store.load_run(run_id));
}

fs::path Pipeline::dir() const { return store_->run_dir(run_id()); }

void Pipeline::require_before(Stage stage) const {
  for (Stage p : store::prerequisites(stage)) {
    if (!record_.done(p)) {
      throw ValidationError(std::string("stage '") + command_for(p) +
                            "' incomplete");
    }
  }
}

void Pipeline::complete(Stage stage, double seconds) {
  record_.stages[stage] = true;
  record_.stage_seconds[stage] = seconds;
  store_->save_run(record_);
}

void Pipeline::reset(Stage stage) {
  record_.stages[stage] = false;
  record_.stage_seconds.erase(stage);
}

Outcome Pipeline::generate_data() {
  if (record_.done(Stage::kData)) return Outcome::kCached;
  Stopwatch sw;
  const synth::SynthDataset data = synth::generate(config_.data);
  synth::save_dataset(data, store_->artifact_dir(run_id(), kDataset));
  record_.artifacts[kDataset] = kDataset;
  complete(Stage::kData, sw.seconds());
  return Outcome::kRan;
}

Outcome Pipeline::train() {
  require_before(Stage::kTrained);
  if (record_.done(Stage::kTrained)) return Outcome::kCached;
  Stopwatch sw;
  const auto data = synth::load_dataset(store_->artifact_dir(run_id(), kDataset));
  std::vector<vit::LabeledImage> examples;
  examples.reserve(data.train.size());
  for (const auto& s : data.train) examples.push_back({&s.image, s.label});
  const vit::TrainResult result = vit::train(config_.model, examples, config_.train);
  vit::save_checkpoint(result.model, store_->artifact_dir(run_id(), kModel));
  Artifact log;
  log.meta = {{"epoch_loss", result.epoch_loss},
              {"epoch_accuracy", result.epoch_accuracy}};
  store_->write_artifact(run_id(), kTraining, log);
  record_.artifacts[kModel] = kModel;
  record_.artifacts[kTraining] = kTraining;
  complete(Stage::kTrained, sw.seconds());
  return Outcome::kRan;
}

Outcome Pipeline::export_activations() {
  require_before(Stage::kExported);
  if (record_.done(Stage::kExported)) return Outcome::kCached;
  Stopwatch sw;
  const auto data = synth::load_dataset(store_->artifact_dir(run_id(), kDataset));
  const auto model = vit::load_checkpoint(store_->artifact_dir(run_id(), kModel));
  std::vector<Image> images;
  std::vector<std::uint64_t> ids;
  for (const auto& s : data.val) {
    images.push_back(s.image);
    ids.push_back(s.id);
  }
  Artifact a = activations_to_artifact(vit::export_activations(model, images, ids));
  a.meta["split"] = "val";
  store_->write_artifact(run_id(), kActivations, a);
  record_.artifacts[kActivations] = kActivations;
  complete(Stage::kExported, sw.seconds());
  return Outcome::kRan;
}

Outcome Pipeline::detect() {
  require_before(Stage::kClustered);
  if (record_.done(Stage::kClustered) && record_.done(Stage::kPrototyped)) {
    return Outcome::kCached;
  }
  Stopwatch sw;
  const auto data = synth::load_dataset(store_->artifact_dir(run_id(), kDataset));
  const auto records =
      activations_from_artifact(store_->read_artifact(run_id(), kActivations));
  const DetectionParams& p = config_.detection;

  detection::ClusterReport report;
  std::vector<detection::ImageEmbedding> embeddings;
  std::vector<int> labels;
  std::vector<double> prob1;
  std::map<std::uint64_t, int> label_of;
  for (const auto& s : data.val) label_of[s.id] = s.label;
  for (const auto& r : records) {
    embeddings.push_back(detection::image_embedding(r));
    report.image_ids.push_back(r.image_id);
    labels.push_back(label_of.at(r.image_id));
    prob1.push_back(r.probs.at(1));
  }
  report.clustering = detection::cluster_images(
      detection::stack_embeddings(embeddings), p.k_pca, p.clusters,
      config_.seed);
  const auto& asg = report.clustering.assignment;
  report.representatives = detection::representative_samples(
      asg, report.clustering.reduced, report.image_ids, p.representatives);
  report.homogeneity = detection::cluster_homogeneity(labels, asg.labels, p.clusters);
  report.weights = p.weights;
  report.stats = detection::cluster_stats(labels, prob1, asg.labels, p.clusters,
                                          p.weights);
  report.auto_selection = detection::select_shortcut_cluster(report.stats, p.weights);
  store_->write_artifact(run_id(), kClusters, detection::to_artifact(report));
  record_.artifacts[kClusters] = kClusters;
  complete(Stage::kClustered, sw.seconds());

  Stopwatch sw2;
  std::map<std::uint64_t, std::size_t> index_of;
  for (std::size_t i = 0; i < records.size(); ++i) index_of[records[i].image_id] = i;
  std::vector<std::vector<detection::PatchKey>> per_cluster(p.clusters);
  for (std::size_t c = 0; c < p.clusters; ++c) {
    for (std::uint64_t id : report.representatives[c]) {
      auto keys = detection::patch_key_summary(records[index_of.at(id)], c);
      per_cluster[c].insert(per_cluster[c].end(), keys.begin(), keys.end());
    }
  }
  const auto bank = detection::prototypicality_scores(
      per_cluster, p.representatives, p.prototypes);
  store_->write_artifact(run_id(), kPrototypes, detection::to_artifact(bank));
  record_.artifacts[kPrototypes] = kPrototypes;
  complete(Stage::kPrototyped, sw2.seconds());
  return Outcome::kRan;
}

Outcome Pipeline::concepts(concepts::Captioner& captioner,
                           concepts::Refiner& refiner,
                           const ProviderSettings& settings) {
  require_before(Stage::kConcepts);
  if (record_.done(Stage::kConcepts) &&
      concepts_report().value("status", "") == "complete") {
    return Outcome::kCached;
  }
  Stopwatch sw;
  const auto data = synth::load_dataset(store_->artifact_dir(run_id(), kDataset));
  const auto bank = detection::prototype_bank_from_artifact(
      store_->read_artifact(run_id(), kPrototypes));
  std::map<std::uint64_t, const Image*> image_of;
  for (const auto& s : data.val) image_of[s.id] = &s.image;

  json clusters = json::array();
  json captions = json::array();
  std::size_t failed_captions = 0, total_captions = 0, failed_summaries = 0;
  for (std::size_t c = 0; c < bank.clusters.size(); ++c) {
    std::vector<concepts::PatchRef> refs;
    std::vector<Image> crops;
    for (const auto& sp : bank.top(c)) {
      refs.push_back({sp.patch.image_id, sp.patch.position, c, sp.score});
      crops.push_back(concepts::patch_crop(*image_of.at(sp.patch.image_id),
                                           sp.patch.position,
                                           config_.data.patch_size));
    }
    const auto caps =
        concepts::caption_patches(refs, crops, captioner, settings.caption);
    json cj = json::array();
    for (const auto& cap : caps) {
      ++total_captions;
      if (!cap.ok()) ++failed_captions;
      cj.push_back(concepts::to_json(cap));
    }
    captions.push_back(cj);
    concepts::ConceptSummary summary;
    try {
      summary = concepts::summarize_concepts(c, caps, refiner, settings.summary);
    } catch (const InvalidInput& e) {
      summary.cluster = c;
      summary.refiner = refiner.id();
      summary.error = e.what();
    }
    if (summary.error) ++failed_summaries;
    clusters.push_back(concepts::to_json(summary));
  }
  std::string status = "complete";
  if (failed_summaries == bank.clusters.size()) {
    status = "failed";
  } else if (failed_summaries > 0 || failed_captions > 0) {
    status = "partial";
  }
  Artifact a;
  a.meta = {{"status", status},
            {"captioner", captioner.id()},
            {"refiner", refiner.id()},
            {"caption_prompt", std::string(concepts::kCaptionPrompt)},
            {"refine_prompt", std::string(concepts::kRefinePrompt)},
            {"captions_total", total_captions},
            {"captions_failed", failed_captions},
            {"clusters", clusters},
            {"captions", captions}};
  store_->write_artifact(run_id(), kConceptsKind, a);
  record_.artifacts[kConceptsKind] = kConceptsKind;
  complete(Stage::kConcepts, sw.seconds());
  return Outcome::kRan;
}

json Pipeline::concepts_report() const {
  if (!store_->has_artifact(run_id(), kConceptsKind)) {
    throw NotFound("concepts not generated");
  }
  return store_->read_artifact(run_id(), kConceptsKind).meta;
}

SelectionDecision Pipeline::selection() const {
  return SelectionDecision::from_json(
      store_->read_artifact(run_id(), kSelection).meta);
}

Outcome Pipeline::select_auto(bool force) {
  require_before(Stage::kSelected);
  const auto report = detection::cluster_report_from_artifact(
      store_->read_artifact(run_id(), kClusters));
  SelectionDecision d;
  d.cluster = report.auto_selection.cluster;
  d.auto_cluster = report.auto_selection.cluster;
  d.scores = report.auto_selection.scores;
  d.tie = report.auto_selection.tie;
  d.source = "auto";
  if (record_.done(Stage::kSelected)) {
    const SelectionDecision prev = selection();
    if (prev.source == "expert" && !force) return Outcome::kCached;
    if (prev.source == "auto" && prev.cluster == d.cluster) return Outcome::kCached;
    if (prev.cluster != d.cluster) {
      reset(Stage::kMitigated);
      reset(Stage::kEvaluated);
    }
  }
  Stopwatch sw;
  Artifact a;
  a.meta = d.to_json();
  store_->write_artifact(run_id(), kSelection, a);
  record_.artifacts[kSelection] = kSelection;
  complete(Stage::kSelected, sw.seconds());
  return Outcome::kRan;
}

Outcome Pipeline::select_cluster(std::size_t cluster) {
  require_before(Stage::kSelected);
  if (cluster >= config_.detection.clusters) {
    throw InvalidInput("cluster " + std::to_string(cluster) +
                       " out of range for K=" +
                       std::to_string(config_.detection.clusters));
  }
  const auto report = detection::cluster_report_from_artifact(
      store_->read_artifact(run_id(), kClusters));
  SelectionDecision d;
  d.cluster = cluster;
  d.auto_cluster = report.auto_selection.cluster;
  d.scores = report.auto_selection.scores;
  d.tie = report.auto_selection.tie;
  d.source = "expert";
  if (record_.done(Stage::kSelected)) {
    const SelectionDecision prev = selection();
    if (prev.source == "expert" && prev.cluster == cluster) return Outcome::kCached;
    if (prev.cluster != cluster) {
      reset(Stage::kMitigated);
      reset(Stage::kEvaluated);
    }
  }
  Stopwatch sw;
  Artifact a;
  a.meta = d.to_json();
  store_->write_artifact(run_id(), kSelection, a);
  record_.artifacts[kSelection] = kSelection;
  complete(Stage::kSelected, sw.seconds());
  return Outcome::kRan;
}

Outcome Pipeline::mitigate() {
  require_before(Stage::kMitigated);
  if (record_.done(Stage::kMitigated)) return Outcome::kCached;
  Stopwatch sw;
  const auto data = synth::load_dataset(store_->artifact_dir(run_id(), kDataset));
  const auto model = vit::load_checkpoint(store_->artifact_dir(run_id(), kModel));
  const auto val =
      activations_from_artifact(store_->read_artifact(run_id(), kActivations));
  const auto bank = detection::prototype_bank_from_artifact(
      store_->read_artifact(run_id(), kPrototypes));
  const SelectionDecision decision = selection();
  const auto& mp = config_.mitigation;
  const auto key_bank = mitigation::build_key_bank(
      bank, decision.cluster, config_.detection.prototypes, mp.knn_k);

  std::map<std::uint64_t, const synth::SynthSample*> sample_of;
  for (const auto& s : data.val) sample_of[s.id] = &s;

  // Validation split: ablate, then refit the head on post-ablation CLS.
  std::vector<mitigation::AblationMask> val_masks;
  Matrix val_ablated, val_plain;
  std::vector<int> val_labels, val_groups;
  std::vector<std::int64_t> val_ids;
  for (const auto& r : val) {
    const auto& s = *sample_of.at(r.image_id);
    auto mask = mitigation::flag_patches(r, key_bank);
    val_ablated.push_row(
        mitigation::ablate_and_classify(model, s.image, mask).cls_embedding);
    val_plain.push_row(r.cls_embedding);
    val_masks.push_back(std::move(mask));
    val_labels.push_back(s.label);
    val_groups.push_back(s.group());
    val_ids.push_back(static_cast<std::int64_t>(r.image_id));
  }
  const auto head = mitigation::retrain_head(model, val_ablated, val_labels, mp.head);
  const auto dfr = mitigation::baseline_group_balanced_retrain(
      model, val_plain, val_labels, val_groups, mp.head,
      numerics::derive_seed(config_.seed, "dfr"));

  std::vector<mitigation::AblationMask> test_masks;
  std::vector<int> pred_base, pred_dfr, pred_nort, pred_asm;
  std::vector<std::int64_t> test_ids;
  for (const auto& s : data.test) {
    const auto r = vit::forward(model, s.image, s.id);
    pred_base.push_back(argmax(r.probs));
    pred_dfr.push_back(dfr.predict(r.cls_embedding));
    auto mask = mitigation::flag_patches(r, key_bank);
    const auto ap = mitigation::ablate_and_classify(model, s.image, mask);
    pred_nort.push_back(argmax(ap.probs));
    pred_asm.push_back(head.predict(ap.cls_embedding));
    test_masks.push_back(std::move(mask));
    test_ids.push_back(static_cast<std::int64_t>(s.id));
  }

  const std::size_t tokens = config_.model.tokens();
  std::vector<std::uint8_t> val_guard, test_guard;
  for (const auto& m : val_masks) val_guard.push_back(m.guard_applied);
  for (const auto& m : test_masks) test_guard.push_back(m.guard_applied);
  Artifact a;
  a.meta = {{"shortcut_cluster", decision.cluster},
            {"selection_source", decision.source},
            {"bank_per_side", key_bank.per_side},
            {"knn_k", key_bank.k},
            {"head", mitigation::to_json(head)},
            {"dfr_head", mitigation::to_json(dfr)}};
  a.arrays["val_ids"] = Tensor::from_i64({val_ids.size()}, val_ids);
  a.arrays["val_masks"] = masks_tensor(val_masks, tokens);
  a.arrays["val_guard"] = Tensor::from_u8({val_guard.size()}, val_guard);
  a.arrays["test_ids"] = Tensor::from_i64({test_ids.size()}, test_ids);
  a.arrays["test_masks"] = masks_tensor(test_masks, tokens);
  a.arrays["test_guard"] = Tensor::from_u8({test_guard.size()}, test_guard);
  a.arrays["pred_baseline"] = u8_vector(pred_base);
  a.arrays["pred_dfr"] = u8_vector(pred_dfr);
  a.arrays["pred_asm_no_retrain"] = u8_vector(pred_nort);
  a.arrays["pred_asm"] = u8_vector(pred_asm);
  a.arrays["bank_points"] = Tensor::from_f64(
      {key_bank.points.rows(), key_bank.points.cols()}, key_bank.points.values());
  store_->write_artifact(run_id(), kMitigation, a);
  record_.artifacts[kMitigation] = kMitigation;
  complete(Stage::kMitigated, sw.seconds());
  return Outcome::kRan;
}

Outcome Pipeline::evaluate() {
  require_before(Stage::kEvaluated);
  if (record_.done(Stage::kEvaluated)) return Outcome::kCached;
  Stopwatch sw;
  const auto data = synth::load_dataset(store_->artifact_dir(run_id(), kDataset));
  const Artifact mit = store_->read_artifact(run_id(), kMitigation);
  const auto report = detection::cluster_report_from_artifact(
      store_->read_artifact(run_id(), kClusters));
  const SelectionDecision decision = selection();

  std::vector<int> labels, present;
  for (const auto& s : data.test) {
    labels.push_back(s.label);
    present.push_back(s.shortcut_present);
  }
  const auto masks = masks_from(mit.arrays.at("test_masks"),
                                mit.arrays.at("test_guard"),
                                mit.arrays.at("test_ids"));
  const auto base = mitigation::evaluate_groups(
      int_vector(mit.arrays.at("pred_baseline")), labels, present);
  const auto dfr = mitigation::evaluate_groups(
      int_vector(mit.arrays.at("pred_dfr")), labels, present);
  const auto nort = mitigation::evaluate_groups(
      int_vector(mit.arrays.at("pred_asm_no_retrain")), labels, present, masks);
  const auto asmm = mitigation::evaluate_groups(
      int_vector(mit.arrays.at("pred_asm")), labels, present, masks);

  // Which cluster holds most shortcut-bearing validation images.
  const std::size_t K = report.clustering.assignment.K;
  std::map<std::uint64_t, int> present_of;
  for (const auto& s : data.val) present_of[s.id] = s.shortcut_present;
  std::vector<std::size_t> shortcut_counts(K, 0), sizes(K, 0);
  for (std::size_t i = 0; i < report.image_ids.size(); ++i) {
    const std::size_t c = report.clustering.assignment.labels[i];
    ++sizes[c];
    if (present_of.at(report.image_ids[i]) != 0) ++shortcut_counts[c];
  }
  std::size_t majority = 0;
  for (std::size_t c = 1; c < K; ++c) {
    if (shortcut_counts[c] > shortcut_counts[majority]) majority = c;
  }
  std::size_t test_guard = 0;
  for (const auto& m : masks) test_guard += m.guard_applied;

  const auto& dp = config_.detection;
  json metrics = {
      {"seed", config_.seed},
      {"parameters",
       {{"k_pca", dp.k_pca},
        {"K", dp.clusters},
        {"N", dp.representatives},
        {"M", dp.prototypes},
        {"knn_k", config_.mitigation.knn_k}}},
      {"selection", decision.to_json()},
      {"cluster_check",
       {{"cluster_sizes", sizes},
        {"shortcut_images_per_cluster", shortcut_counts},
        {"majority_cluster", majority},
        {"selected_is_majority", majority == decision.cluster}}},
      {"methods",
       {{"baseline", mitigation::to_json(base)},
        {"dfr", mitigation::to_json(dfr)},
        {"asm_no_retrain", mitigation::to_json(nort)},
        {"asm", mitigation::to_json(asmm)}}},
      {"ablation",
       {{"sp_rate", asmm.sp_rate ? json(*asmm.sp_rate) : json(nullptr)},
        {"ns_rate", asmm.ns_rate ? json(*asmm.ns_rate) : json(nullptr)},
        {"bank_per_side", mit.meta.at("bank_per_side")},
        {"test_guard_applied", test_guard}}},
  };
  store::atomic_write(dir() / kMetricsFile, metrics.dump(2) + "\n");
  record_.artifacts["metrics"] = kMetricsFile;
  complete(Stage::kEvaluated, sw.seconds());
  store::atomic_write(dir() / kTimingsFile, timings().dump(2) + "\n");
  record_.artifacts["timings"] = kTimingsFile;
  store_->save_run(record_);
  return Outcome::kRan;
}

void Pipeline::run_all(concepts::Captioner& captioner,
                       concepts::Refiner& refiner,
                       const ProviderSettings& settings,
                       const std::function<void(Stage, Outcome)>& on_stage) {
  auto step = [&](Stage s, Outcome o) {
    if (on_stage) on_stage(s, o);
  };
  step(Stage::kData, generate_data());
  step(Stage::kTrained, train());
  step(Stage::kExported, export_activations());
  step(Stage::kPrototyped, detect());
  step(Stage::kConcepts, concepts(captioner, refiner, settings));
  step(Stage::kSelected, select_auto());
  step(Stage::kMitigated, mitigate());
  step(Stage::kEvaluated, evaluate());
}

json Pipeline::metrics() const {
  if (!record_.done(Stage::kEvaluated)) {
    throw ValidationError("stage 'evaluate' incomplete");
  }
  return json::parse(read_file(dir() / kMetricsFile));
}

json Pipeline::timings() const {
  json stages = json::object();
  double total = 0.0;
  for (const auto& [stage, secs] : record_.stage_seconds) {
    stages[store::to_string(stage)] = secs;
    total += secs;
  }
  return {{"stage_seconds", stages}, {"total_seconds", total}};
}

std::string Pipeline::metrics_table() const {
  const json m = metrics();
  auto secs = [&](std::initializer_list<Stage> stages) {
    double s = 0.0;
    for (Stage st : stages) {
      const auto it = record_.stage_seconds.find(st);
      if (it != record_.stage_seconds.end()) s += it->second;
    }
    return s;
  };
  const double train_s = secs({Stage::kData, Stage::kTrained});
  const double asm_s =
      train_s + secs({Stage::kExported, Stage::kClustered, Stage::kPrototyped,
                      Stage::kSelected, Stage::kMitigated});
  struct Row {
    const char* name;
    const char* key;
    double seconds;
  };
  const Row rows[] = {{"baseline", "baseline", train_s},
                      {"dfr (group labels)", "dfr", train_s + secs({Stage::kMitigated})},
                      {"asm w/o retraining", "asm_no_retrain", asm_s},
                      {"asm", "asm", asm_s}};
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %8s %8s %12s\n", "method", "WGA", "AGA",
                "runtime_s");
  out += line;
  for (const Row& r : rows) {
    const json& g = m.at("methods").at(r.key);
    std::snprintf(line, sizeof line, "%-20s %8.2f %8.2f %12.1f\n", r.name,
                  g.at("wga").get<double>(), g.at("aga").get<double>(), r.seconds);
    out += line;
  }
  const json& ab = m.at("ablation");
  if (!ab.at("sp_rate").is_null() && !ab.at("ns_rate").is_null()) {
    std::snprintf(line, sizeof line, "ablation rates: SP %.1f%%  NS %.1f%%\n",
                  ab.at("sp_rate").get<double>(), ab.at("ns_rate").get<double>());
    out += line;
  }
  return out;
}

}  // namespace shortlens::pipeline
