// SPDX-License-Identifier: Apache-2.0
#include "shortlens/error.hpp"
#include "shortlens/pipeline/pipeline.hpp"

namespace shortlens::pipeline {

PipelineConfig PipelineConfig::resolved() const {
  PipelineConfig c = *this;
  c.data.seed = seed;
  c.model.seed = seed;
  c.train.seed = seed;
  c.model.image_size = c.data.image_size;
  c.model.patch_size = c.data.patch_size;
  c.model.channels = c.data.channels;
  return c;
}

void PipelineConfig::validate() const {
  data.validate();
  model.validate();
  if (train.epochs == 0 || train.batch == 0 || !(train.lr > 0.0)) {
    throw InvalidInput("train: epochs, batch and lr must be positive");
  }
  const DetectionParams& d = detection;
  if (d.clusters < 2) throw InvalidInput("detection: K must be >= 2");
  if (d.k_pca == 0 || d.representatives == 0 || d.prototypes == 0) {
    throw InvalidInput("detection: k_pca, N and M must be >= 1");
  }
  d.weights.validate();
  if (mitigation.knn_k == 0) throw InvalidInput("mitigation: k must be >= 1");
  if (!(mitigation.head.l2 >= 0.0)) {
    throw InvalidInput("mitigation: l2 must be non-negative");
  }
}

json PipelineConfig::to_json() const {
  const auto& w = detection.weights;
  const auto& h = mitigation.head;
  return {{"seed", seed},
          {"data", synth::to_json(data)},
          {"model", vit::config_to_json(model)},
          {"train",
           {{"lr", train.lr},
            {"weight_decay", train.weight_decay},
            {"epochs", train.epochs},
            {"batch", train.batch},
            {"seed", train.seed}}},
          {"detection",
           {{"k_pca", detection.k_pca},
            {"K", detection.clusters},
            {"N", detection.representatives},
            {"M", detection.prototypes},
            {"weights",
             {{"homogeneity", w.homogeneity},
              {"dominant", w.dominant},
              {"non_dominant", w.non_dominant}}}}},
          {"mitigation",
           {{"knn_k", mitigation.knn_k},
            {"head",
             {{"l2", h.l2},
              {"max_steps", h.max_steps},
              {"grad_tol", h.grad_tol},
              {"initial_step", h.initial_step}}}}}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  c.seed = j.at("seed");
  c.data = synth::synth_config_from_json(j.at("data"));
  c.model = vit::config_from_json(j.at("model"));
  const json& t = j.at("train");
  c.train.lr = t.at("lr");
  c.train.weight_decay = t.at("weight_decay");
  c.train.epochs = t.at("epochs");
  c.train.batch = t.at("batch");
  c.train.seed = t.at("seed");
  const json& d = j.at("detection");
  c.detection.k_pca = d.at("k_pca");
  c.detection.clusters = d.at("K");
  c.detection.representatives = d.at("N");
  c.detection.prototypes = d.at("M");
  const json& w = d.at("weights");
  c.detection.weights = {w.at("homogeneity"), w.at("dominant"),
                         w.at("non_dominant")};
  const json& m = j.at("mitigation");
  c.mitigation.knn_k = m.at("knn_k");
  const json& h = m.at("head");
  c.mitigation.head.l2 = h.at("l2");
  c.mitigation.head.max_steps = h.at("max_steps");
  c.mitigation.head.grad_tol = h.at("grad_tol");
  c.mitigation.head.initial_step = h.at("initial_step");
  return c;
}

const char* command_for(Stage stage) {
  switch (stage) {
    case Stage::kData:
      return "generate-data";
    case Stage::kTrained:
      return "train";
    case Stage::kExported:
      return "export";
    case Stage::kClustered:
    case Stage::kPrototyped:
      return "detect";
    case Stage::kConcepts:
      return "concepts";
    case Stage::kSelected:
      return "select";
    case Stage::kMitigated:
      return "mitigate";
    case Stage::kEvaluated:
      return "evaluate";
  }
  return "?";
}

json SelectionDecision::to_json() const {
  return {{"cluster", cluster},
          {"source", source},
          {"auto_cluster", auto_cluster},
          {"scores", scores},
          {"tie", tie}};
}

SelectionDecision SelectionDecision::from_json(const json& j) {
  SelectionDecision d;
  d.cluster = j.at("cluster");
  d.source = j.at("source");
  d.auto_cluster = j.at("auto_cluster");
  d.scores = j.at("scores").get<std::vector<double>>();
  d.tie = j.at("tie");
  return d;
}

}  // namespace shortlens::pipeline
