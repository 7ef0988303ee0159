// SPDX-License-Identifier: Apache-2.0
#include <string>

#include "shortlens/detection/detection.hpp"
#include "shortlens/error.hpp"

namespace shortlens::detection {

using nlohmann::json;
using store::Tensor;

namespace {

json optional_json(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<double> optional_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

Tensor matrix_tensor(const Matrix& m) {
  return Tensor::from_f64({m.rows(), m.cols()}, m.values());
}

Matrix tensor_matrix(const Tensor& t) {
  if (t.shape.size() != 2) throw IntegrityError("expected a rank-2 array", 0);
  return Matrix(t.shape[0], t.shape[1], t.to_f64());
}

const Tensor& array(const store::Artifact& a, const std::string& name) {
  const auto it = a.arrays.find(name);
  if (it == a.arrays.end()) {
    throw IntegrityError("artifact is missing array '" + name + "'", 0);
  }
  return it->second;
}

std::vector<std::int64_t> to_i64(std::span<const std::uint64_t> ids) {
  return {ids.begin(), ids.end()};
}

std::vector<std::uint64_t> to_u64(const std::vector<std::int64_t>& ids) {
  return {ids.begin(), ids.end()};
}

}  // namespace

json stats_to_json(std::span<const ClusterStats> stats) {
  json out = json::array();
  for (std::size_t c = 0; c < stats.size(); ++c) {
    const ClusterStats& s = stats[c];
    out.push_back({{"cluster", c},
                   {"count", s.count},
                   {"homogeneity", s.homogeneity},
                   {"dominant_class", s.dominant_class},
                   {"bd", optional_json(s.bd)},
                   {"bn", optional_json(s.bn)},
                   {"score", s.score}});
  }
  return out;
}

store::Artifact to_artifact(const ClusterReport& r) {
  store::Artifact a;
  const auto& asg = r.clustering.assignment;
  a.meta = {
      {"K", asg.K},
      {"k_pca_requested", r.clustering.k_pca_requested},
      {"k_pca_used", r.clustering.k_pca_used},
      {"inertia", asg.inertia},
      {"iterations", asg.iterations},
      {"cluster_sizes", asg.cluster_sizes()},
      {"homogeneity_global", r.homogeneity.global},
      {"homogeneity_per_cluster", r.homogeneity.per_cluster},
      {"stats", stats_to_json(r.stats)},
      {"auto_selection",
       {{"cluster", r.auto_selection.cluster},
        {"scores", r.auto_selection.scores},
        {"tie", r.auto_selection.tie}}},
      {"weights",
       {{"homogeneity", r.weights.homogeneity},
        {"dominant", r.weights.dominant},
        {"non_dominant", r.weights.non_dominant}}},
      {"representatives", r.representatives},
  };
  const auto ids = to_i64(r.image_ids);
  a.arrays["image_ids"] = Tensor::from_i64({ids.size()}, ids);
  std::vector<std::uint32_t> labels(asg.labels.begin(), asg.labels.end());
  a.arrays["labels"] = Tensor::from_u32({labels.size()}, labels);
  a.arrays["centroids"] = matrix_tensor(asg.centroids);
  a.arrays["inertia_trace"] =
      Tensor::from_f64({asg.inertia_trace.size()}, asg.inertia_trace);
  a.arrays["reduced"] = matrix_tensor(r.clustering.reduced);
  a.arrays["pca_mean"] =
      Tensor::from_f64({r.clustering.pca.mean.size()}, r.clustering.pca.mean);
  a.arrays["pca_components"] = matrix_tensor(r.clustering.pca.components);
  a.arrays["pca_explained_variance"] =
      Tensor::from_f64({r.clustering.pca.explained_variance.size()},
                       r.clustering.pca.explained_variance);
  return a;
}

ClusterReport cluster_report_from_artifact(const store::Artifact& a) {
  ClusterReport r;
  const json& m = a.meta;
  auto& asg = r.clustering.assignment;
  asg.K = m.at("K");
  asg.inertia = m.at("inertia");
  asg.iterations = m.at("iterations");
  r.clustering.k_pca_requested = m.at("k_pca_requested");
  r.clustering.k_pca_used = m.at("k_pca_used");
  r.homogeneity.global = m.at("homogeneity_global");
  r.homogeneity.per_cluster =
      m.at("homogeneity_per_cluster").get<std::vector<double>>();
  for (const json& s : m.at("stats")) {
    ClusterStats cs;
    cs.count = s.at("count");
    cs.homogeneity = s.at("homogeneity");
    cs.dominant_class = s.at("dominant_class");
    cs.bd = optional_from(s.at("bd"));
    cs.bn = optional_from(s.at("bn"));
    cs.score = s.at("score");
    r.stats.push_back(cs);
  }
  const json& sel = m.at("auto_selection");
  r.auto_selection.cluster = sel.at("cluster");
  r.auto_selection.scores = sel.at("scores").get<std::vector<double>>();
  r.auto_selection.tie = sel.at("tie");
  const json& w = m.at("weights");
  r.weights = {w.at("homogeneity"), w.at("dominant"), w.at("non_dominant")};
  r.representatives =
      m.at("representatives").get<std::vector<std::vector<std::uint64_t>>>();

  r.image_ids = to_u64(array(a, "image_ids").to_i64());
  const auto labels = array(a, "labels").to_u32();
  asg.labels.assign(labels.begin(), labels.end());
  asg.centroids = tensor_matrix(array(a, "centroids"));
  asg.inertia_trace = array(a, "inertia_trace").to_f64();
  r.clustering.reduced = tensor_matrix(array(a, "reduced"));
  r.clustering.pca.mean = array(a, "pca_mean").to_f64();
  r.clustering.pca.components = tensor_matrix(array(a, "pca_components"));
  r.clustering.pca.explained_variance =
      array(a, "pca_explained_variance").to_f64();
  if (asg.labels.size() != r.image_ids.size()) {
    throw IntegrityError("cluster report: labels/ids length mismatch", 0);
  }
  return r;
}

store::Artifact to_artifact(const PrototypeBank& bank) {
  store::Artifact a;
  json sizes = json::array();
  for (std::size_t c = 0; c < bank.clusters.size(); ++c) {
    const auto& list = bank.clusters[c];
    sizes.push_back(list.size());
    const std::string pre = "c" + std::to_string(c) + "_";
    std::vector<std::int64_t> ids;
    std::vector<std::uint32_t> pos;
    std::vector<double> scores;
    Matrix keys;
    for (const ScoredPatch& s : list) {
      ids.push_back(static_cast<std::int64_t>(s.patch.image_id));
      pos.push_back(s.patch.position);
      scores.push_back(s.score);
      keys.push_row(s.patch.key);
    }
    a.arrays[pre + "image_ids"] = Tensor::from_i64({ids.size()}, ids);
    a.arrays[pre + "positions"] = Tensor::from_u32({pos.size()}, pos);
    a.arrays[pre + "scores"] = Tensor::from_f64({scores.size()}, scores);
    a.arrays[pre + "keys"] = matrix_tensor(keys);
  }
  a.meta = {{"N", bank.N},
            {"M", bank.M},
            {"K", bank.clusters.size()},
            {"sizes", sizes}};
  return a;
}

PrototypeBank prototype_bank_from_artifact(const store::Artifact& a) {
  PrototypeBank bank;
  bank.N = a.meta.at("N");
  bank.M = a.meta.at("M");
  const std::size_t K = a.meta.at("K");
  bank.clusters.resize(K);
  for (std::size_t c = 0; c < K; ++c) {
    const std::string pre = "c" + std::to_string(c) + "_";
    const auto ids = array(a, pre + "image_ids").to_i64();
    const auto pos = array(a, pre + "positions").to_u32();
    const auto scores = array(a, pre + "scores").to_f64();
    const Matrix keys = tensor_matrix(array(a, pre + "keys"));
    if (pos.size() != ids.size() || scores.size() != ids.size() ||
        keys.rows() != ids.size()) {
      throw IntegrityError("prototype bank: cluster " + std::to_string(c) +
                               " arrays disagree in length",
                           0);
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto row = keys.row(i);
      bank.clusters[c].push_back(
          {{static_cast<std::uint64_t>(ids[i]), pos[i],
            std::vector<double>(row.begin(), row.end()), c},
           scores[i]});
    }
  }
  return bank;
}

}  // namespace shortlens::detection
