// SPDX-License-Identifier: Apache-2.0
#include "shortlens/detection/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "shortlens/error.hpp"

namespace shortlens::detection {

ImageEmbedding image_embedding(const vit::ActivationRecord& record) {
  const Matrix& tokens = record.token_embeddings;
  if (tokens.rows() == 0) {
    throw InvalidInput("image_embedding: record has no tokens");
  }
  ImageEmbedding out{record.image_id, std::vector<double>(tokens.cols(), 0.0)};
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    const auto row = tokens.row(t);
    for (std::size_t j = 0; j < row.size(); ++j) out.vector[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(tokens.rows());
  for (double& v : out.vector) v *= inv;
  return out;
}

Matrix stack_embeddings(std::span<const ImageEmbedding> embeddings) {
  Matrix out;
  for (const auto& e : embeddings) out.push_row(e.vector);
  return out;
}

ClusteringResult cluster_images(const Matrix& embeddings, std::size_t k_pca,
                                std::size_t K, std::uint64_t seed) {
  if (embeddings.rows() < K) {
    throw InvalidInput("cluster_images: " + std::to_string(embeddings.rows()) +
                       " images for K=" + std::to_string(K));
  }
  ClusteringResult out;
  out.k_pca_requested = k_pca;
  out.pca = numerics::pca_fit(embeddings, k_pca);
  out.k_pca_used = out.pca.k();
  out.reduced = numerics::pca_transform(out.pca, embeddings);
  out.assignment = numerics::kmeans(out.reduced, K,
                                    numerics::derive_seed(seed, "kmeans"));
  return out;
}

std::vector<std::vector<std::uint64_t>> representative_samples(
    const numerics::ClusterAssignment& assignment, const Matrix& reduced,
    std::span<const std::uint64_t> image_ids, std::size_t N) {
  if (N == 0) throw InvalidInput("representative_samples: N must be >= 1");
  if (assignment.labels.size() != reduced.rows() ||
      image_ids.size() != reduced.rows()) {
    throw InvalidInput("representative_samples: length mismatch");
  }
  std::vector<std::vector<std::pair<double, std::uint64_t>>> ranked(
      assignment.K);
  for (std::size_t i = 0; i < reduced.rows(); ++i) {
    const std::size_t c = assignment.labels[i];
    ranked[c].emplace_back(
        numerics::squared_distance(reduced.row(i), assignment.centroids.row(c)),
        image_ids[i]);
  }
  std::vector<std::vector<std::uint64_t>> out(assignment.K);
  for (std::size_t c = 0; c < assignment.K; ++c) {
    auto& r = ranked[c];
    const std::size_t take = std::min(N, r.size());
    std::partial_sort(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(take),
                      r.end());
    for (std::size_t i = 0; i < take; ++i) out[c].push_back(r[i].second);
  }
  return out;
}

std::vector<PatchKey> patch_key_summary(const vit::ActivationRecord& record,
                                        std::size_t cluster) {
  const auto& heads = record.per_head_keys;
  if (heads.empty()) throw InvalidInput("patch_key_summary: no keys recorded");
  const std::size_t tcount = heads.front().rows();
  const std::size_t dh = heads.front().cols();
  if (record.token_positions.size() != tcount) {
    throw InvalidInput("patch_key_summary: positions/keys length mismatch");
  }
  const double inv = 1.0 / static_cast<double>(heads.size());
  std::vector<PatchKey> out(tcount);
  for (std::size_t t = 0; t < tcount; ++t) {
    PatchKey& p = out[t];
    p.image_id = record.image_id;
    p.position = record.token_positions[t];
    p.cluster = cluster;
    p.key.assign(dh, 0.0);
    for (const Matrix& h : heads) {
      for (std::size_t j = 0; j < dh; ++j) p.key[j] += h(t, j);
    }
    for (double& v : p.key) v *= inv;
  }
  return out;
}

std::span<const ScoredPatch> PrototypeBank::top(std::size_t cluster) const {
  const auto& list = clusters.at(cluster);
  return {list.data(), std::min(M, list.size())};
}

std::span<const ScoredPatch> PrototypeBank::bottom(std::size_t cluster,
                                                   std::size_t count) const {
  const auto& list = clusters.at(cluster);
  const std::size_t n = std::min(count, list.size());
  return {list.data() + (list.size() - n), n};
}

PrototypeBank prototypicality_scores(
    const std::vector<std::vector<PatchKey>>& per_cluster, std::size_t N,
    std::size_t M) {
  if (per_cluster.size() < 2) {
    throw InvalidInput("prototypicality_scores: need at least 2 clusters");
  }
  for (std::size_t c = 0; c < per_cluster.size(); ++c) {
    if (per_cluster[c].empty()) {
      throw InvalidInput("prototypicality_scores: cluster " +
                         std::to_string(c) + " has no patches");
    }
  }
  PrototypeBank bank;
  bank.N = N;
  bank.M = M;
  bank.clusters.resize(per_cluster.size());
  for (std::size_t c = 0; c < per_cluster.size(); ++c) {
    std::size_t others = 0;
    for (std::size_t o = 0; o < per_cluster.size(); ++o) {
      if (o != c) others += per_cluster[o].size();
    }
    auto& scored = bank.clusters[c];
    scored.reserve(per_cluster[c].size());
    for (const PatchKey& p : per_cluster[c]) {
      double sum = 0.0;
      for (std::size_t o = 0; o < per_cluster.size(); ++o) {
        if (o == c) continue;
        for (const PatchKey& q : per_cluster[o]) {
          sum += numerics::euclidean_distance(p.key, q.key);
        }
      }
      scored.push_back({p, sum / static_cast<double>(others)});
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const ScoredPatch& a, const ScoredPatch& b) {
                       if (a.score != b.score) return a.score > b.score;
                       if (a.patch.image_id != b.patch.image_id) {
                         return a.patch.image_id < b.patch.image_id;
                       }
                       return a.patch.position < b.patch.position;
                     });
  }
  return bank;
}

Homogeneity cluster_homogeneity(std::span<const int> labels,
                                std::span<const std::size_t> assignment,
                                std::size_t K) {
  if (labels.size() != assignment.size() || labels.empty()) {
    throw InvalidInput("cluster_homogeneity: labels/assignment mismatch");
  }
  Homogeneity out;
  out.per_cluster.assign(K, 1.0);
  const double hc = numerics::label_entropy(labels);
  if (hc == 0.0) {
    out.global = 1.0;
    return out;
  }
  out.global = 1.0 - numerics::conditional_entropy(labels, assignment) / hc;
  for (std::size_t c = 0; c < K; ++c) {
    std::size_t counts[2] = {0, 0};
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (assignment[i] == c) ++counts[labels[i] == 1 ? 1 : 0];
    }
    if (counts[0] + counts[1] == 0) {
      out.per_cluster[c] = 0.0;
      continue;
    }
    const double h = 1.0 - numerics::entropy(std::span<const std::size_t>(counts)) / hc;
    out.per_cluster[c] = std::clamp(h, 0.0, 1.0);
  }
  return out;
}

std::vector<ClusterBrier> cluster_brier(std::span<const double> prob_class1,
                                        std::span<const int> labels,
                                        std::span<const std::size_t> assignment,
                                        std::size_t K) {
  if (prob_class1.size() != labels.size() ||
      labels.size() != assignment.size()) {
    throw InvalidInput("cluster_brier: length mismatch");
  }
  std::vector<ClusterBrier> out(K);
  for (std::size_t c = 0; c < K; ++c) {
    std::size_t ones = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (assignment[i] != c) continue;
      ++count;
      if (labels[i] == 1) ++ones;
    }
    ClusterBrier& b = out[c];
    b.count = count;
    if (count == 0) {
      b.empty = true;
      continue;
    }
    b.dominant_class = ones > count - ones ? 1 : 0;
    std::vector<double> pd, pn;
    std::vector<int> od, on;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (assignment[i] != c) continue;
      if (labels[i] == b.dominant_class) {
        pd.push_back(prob_class1[i]);
        od.push_back(labels[i]);
      } else {
        pn.push_back(prob_class1[i]);
        on.push_back(labels[i]);
      }
    }
    b.bd = numerics::brier(pd, od);
    if (!pn.empty()) b.bn = numerics::brier(pn, on);
  }
  return out;
}

void SelectionWeights::validate() const {
  if (!(homogeneity >= 0.0) || !(dominant >= 0.0) || !(non_dominant >= 0.0)) {
    throw InvalidInput("selection weights must be non-negative");
  }
  if (homogeneity == 0.0 && dominant == 0.0 && non_dominant == 0.0) {
    throw InvalidInput("selection weights must not all be zero");
  }
}

Selection select_shortcut_cluster(std::span<const ClusterStats> stats,
                                  const SelectionWeights& weights) {
  weights.validate();
  if (stats.size() < 2) {
    throw InvalidInput("select_shortcut_cluster: need at least 2 clusters");
  }
  Selection out;
  out.scores.reserve(stats.size());
  for (const ClusterStats& s : stats) {
    double score = weights.homogeneity * s.homogeneity;
    if (s.bd) score += weights.dominant * std::exp(-*s.bd);
    if (s.bn) score += weights.non_dominant * (1.0 - std::exp(-*s.bn));
    out.scores.push_back(score);
  }
  for (std::size_t c = 1; c < out.scores.size(); ++c) {
    if (out.scores[c] > out.scores[out.cluster]) out.cluster = c;
  }
  for (std::size_t c = 0; c < out.scores.size(); ++c) {
    if (c != out.cluster && out.scores[c] == out.scores[out.cluster]) {
      out.tie = true;
    }
  }
  return out;
}

std::vector<ClusterStats> cluster_stats(std::span<const int> labels,
                                        std::span<const double> prob_class1,
                                        std::span<const std::size_t> assignment,
                                        std::size_t K,
                                        const SelectionWeights& weights) {
  const Homogeneity h = cluster_homogeneity(labels, assignment, K);
  const auto briers = cluster_brier(prob_class1, labels, assignment, K);
  std::vector<ClusterStats> out(K);
  for (std::size_t c = 0; c < K; ++c) {
    out[c].homogeneity = h.per_cluster[c];
    out[c].dominant_class = briers[c].dominant_class;
    out[c].bd = briers[c].bd;
    out[c].bn = briers[c].bn;
    out[c].count = briers[c].count;
  }
  const Selection sel = select_shortcut_cluster(out, weights);
  for (std::size_t c = 0; c < K; ++c) out[c].score = sel.scores[c];
  return out;
}

}  // namespace shortlens::detection
