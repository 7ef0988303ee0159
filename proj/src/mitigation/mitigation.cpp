// SPDX-License-Identifier: Apache-2.0
#include "shortlens/mitigation/mitigation.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include "shortlens/error.hpp"

namespace shortlens::mitigation {

KeyBank build_key_bank(const detection::PrototypeBank& prototypes,
                       std::size_t shortcut_cluster, std::size_t M,
                       std::size_t k) {
  if (shortcut_cluster >= prototypes.clusters.size()) {
    throw InvalidInput("shortcut cluster " + std::to_string(shortcut_cluster) +
                       " out of range");
  }
  const auto& pos = prototypes.clusters[shortcut_cluster];
  std::vector<const detection::ScoredPatch*> neg;
  for (std::size_t c = 0; c < prototypes.clusters.size(); ++c) {
    if (c == shortcut_cluster) continue;
    for (const auto& s : prototypes.clusters[c]) neg.push_back(&s);
  }
  if (pos.empty() || neg.empty()) {
    throw InvalidState("key bank needs prototypes on both sides");
  }
  // Lowest score first, ties by image id then position.
  std::stable_sort(neg.begin(), neg.end(),
                   [](const detection::ScoredPatch* a,
                      const detection::ScoredPatch* b) {
                     if (a->score != b->score) return a->score < b->score;
                     if (a->patch.image_id != b->patch.image_id) {
                       return a->patch.image_id < b->patch.image_id;
                     }
                     return a->patch.position < b->patch.position;
                   });
  KeyBank bank;
  bank.k = k;
  bank.shortcut_cluster = shortcut_cluster;
  bank.per_side = std::min({M, pos.size(), neg.size()});
  if (bank.per_side == 0) throw InvalidInput("key bank size M must be >= 1");
  for (std::size_t i = 0; i < bank.per_side; ++i) {
    bank.points.push_row(pos[i].patch.key);
    bank.labels.push_back(1);
  }
  for (std::size_t i = 0; i < bank.per_side; ++i) {
    bank.points.push_row(neg[i]->patch.key);
    bank.labels.push_back(0);
  }
  return bank;
}

std::size_t AblationMask::flagged() const noexcept {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
}

AblationMask flag_patches(const vit::ActivationRecord& record,
                          const KeyBank& bank) {
  const auto keys = detection::patch_key_summary(record);
  AblationMask mask;
  mask.image_id = record.image_id;
  mask.flags.resize(keys.size(), 0);
  for (std::size_t t = 0; t < keys.size(); ++t) {
    mask.flags[t] = static_cast<std::uint8_t>(
        numerics::knn_predict(bank.points, bank.labels, keys[t].key, bank.k)
            .label);
  }
  if (!keys.empty() && mask.flagged() == keys.size()) {
    std::size_t keep = 0;
    double best = -1.0;
    for (std::size_t t = 0; t < keys.size(); ++t) {
      double sum = 0.0;
      for (std::size_t i = 0; i < bank.per_side; ++i) {
        sum += numerics::euclidean_distance(keys[t].key, bank.points.row(i));
      }
      const double mean = sum / static_cast<double>(bank.per_side);
      if (mean > best) {
        best = mean;
        keep = t;
      }
    }
    mask.flags[keep] = 0;
    mask.guard_applied = true;
  }
  return mask;
}

AblatedPrediction ablate_and_classify(const vit::ViTModel& model,
                                      const Image& image,
                                      const AblationMask& mask) {
  vit::TokenSequence tokens = vit::embed(model, image);
  if (mask.flags.size() != tokens.positions.size()) {
    throw InvalidInput("ablation mask has " + std::to_string(mask.flags.size()) +
                       " flags for " + std::to_string(tokens.positions.size()) +
                       " tokens");
  }
  if (mask.flagged() > 0) {
    auto drop = std::make_unique<bool[]>(mask.flags.size());
    for (std::size_t i = 0; i < mask.flags.size(); ++i) {
      drop[i] = mask.flags[i] != 0;
    }
    tokens = vit::drop_tokens(tokens, {drop.get(), mask.flags.size()});
  }
  vit::Prediction p = vit::forward_tokens(model, tokens);
  return {std::move(p.logits), std::move(p.probs), std::move(p.cls_embedding),
          std::move(tokens.positions)};
}

std::vector<double> RetrainedHead::probs(
    std::span<const double> embedding) const {
  if (embedding.size() != weight.rows()) {
    throw InvalidInput("embedding dimension does not match head");
  }
  std::vector<double> logits(bias);
  for (std::size_t i = 0; i < weight.rows(); ++i) {
    for (std::size_t c = 0; c < weight.cols(); ++c) {
      logits[c] += embedding[i] * weight(i, c);
    }
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : logits) v /= sum;
  return logits;
}

int RetrainedHead::predict(std::span<const double> embedding) const {
  const auto p = probs(embedding);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

RetrainedHead model_head(const vit::ViTModel& model) {
  const auto& t = model.tensor("head.w");
  const auto w = model.values("head.w");
  const auto b = model.values("head.b");
  RetrainedHead head;
  head.weight = Matrix(t.rows, t.cols, std::vector<double>(w.begin(), w.end()));
  head.bias.assign(b.begin(), b.end());
  return head;
}

namespace {

// Objective and gradient of mean cross-entropy + l2/2 |W|^2.
double objective(const Matrix& x, std::span<const int> labels,
                 const Matrix& w, std::span<const double> b, double l2,
                 Matrix* gw, std::vector<double>* gb) {
  const std::size_t n = x.rows();
  const std::size_t d = w.rows();
  const std::size_t classes = w.cols();
  if (gw) *gw = Matrix(d, classes);
  if (gb) gb->assign(classes, 0.0);
  double total = 0.0;
  std::vector<double> z(classes);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = x.row(i);
    for (std::size_t c = 0; c < classes; ++c) {
      double s = b[c];
      for (std::size_t j = 0; j < d; ++j) s += xi[j] * w(j, c);
      z[c] = s;
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    total += lse - z[static_cast<std::size_t>(labels[i])];
    if (!gw) continue;
    for (std::size_t c = 0; c < classes; ++c) {
      const double g = (std::exp(z[c] - lse) -
                        (static_cast<std::size_t>(labels[i]) == c ? 1.0 : 0.0)) /
                       static_cast<double>(n);
      (*gb)[c] += g;
      for (std::size_t j = 0; j < d; ++j) (*gw)(j, c) += g * xi[j];
    }
  }
  double reg = 0.0;
  for (double v : w.values()) reg += v * v;
  if (gw) {
    for (std::size_t i = 0; i < gw->values().size(); ++i) {
      gw->values()[i] += l2 * w.values()[i];
    }
  }
  return total / static_cast<double>(n) + 0.5 * l2 * reg;
}

RetrainedHead fit_head(RetrainedHead head, const Matrix& x,
                       std::span<const int> labels, const HeadHyper& hyper) {
  if (x.rows() == 0) throw InvalidInput("retrain_head: no embeddings");
  if (labels.size() != x.rows()) {
    throw InvalidInput("retrain_head: labels/embeddings length mismatch");
  }
  if (x.cols() != head.weight.rows()) {
    throw InvalidInput("retrain_head: embedding dimension mismatch");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= head.weight.cols()) {
      throw InvalidInput("retrain_head: label out of range");
    }
  }
  if (!(hyper.l2 >= 0.0)) throw InvalidInput("retrain_head: l2 must be >= 0");
  constexpr double kArmijo = 1e-4;
  Matrix gw;
  std::vector<double> gb;
  double f = objective(x, labels, head.weight, head.bias, hyper.l2, &gw, &gb);
  head.loss_trace.push_back(f);
  double step = hyper.initial_step;
  for (std::size_t it = 0; it < hyper.max_steps; ++it) {
    double gnorm2 = 0.0;
    for (double v : gw.values()) gnorm2 += v * v;
    for (double v : gb) gnorm2 += v * v;
    if (!std::isfinite(f) || !std::isfinite(gnorm2)) {
      throw TrainingDiverged("head retraining produced a non-finite objective",
                             it);
    }
    if (std::sqrt(gnorm2) < hyper.grad_tol) break;
    Matrix w_new;
    std::vector<double> b_new(gb.size());
    double f_new = 0.0;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      w_new = head.weight;
      for (std::size_t i = 0; i < w_new.values().size(); ++i) {
        w_new.values()[i] -= step * gw.values()[i];
      }
      for (std::size_t c = 0; c < gb.size(); ++c) {
        b_new[c] = head.bias[c] - step * gb[c];
      }
      f_new = objective(x, labels, w_new, b_new, hyper.l2, nullptr, nullptr);
      if (std::isfinite(f_new) && f_new <= f - kArmijo * step * gnorm2) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    head.weight = std::move(w_new);
    head.bias = b_new;
    f = objective(x, labels, head.weight, head.bias, hyper.l2, &gw, &gb);
    head.loss_trace.push_back(f);
    step = std::min(step * 2.0, hyper.initial_step * 1024.0);
  }
  return head;
}

}  // namespace

RetrainedHead retrain_head(const vit::ViTModel& model, const Matrix& embeddings,
                           std::span<const int> labels,
                           const HeadHyper& hyper) {
  return fit_head(model_head(model), embeddings, labels, hyper);
}

std::vector<std::size_t> group_balanced_subsample(std::span<const int> groups,
                                                  std::size_t group_count,
                                                  std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> members(group_count);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] < 0 || static_cast<std::size_t>(groups[i]) >= group_count) {
      throw InvalidInput("group id out of range");
    }
    members[static_cast<std::size_t>(groups[i])].push_back(i);
  }
  std::size_t smallest = groups.size();
  for (std::size_t g = 0; g < group_count; ++g) {
    if (members[g].empty()) {
      throw InvalidInput("group " + std::to_string(g) + " has no samples");
    }
    smallest = std::min(smallest, members[g].size());
  }
  std::vector<std::size_t> keep;
  for (std::size_t g = 0; g < group_count; ++g) {
    std::mt19937_64 rng(numerics::derive_seed(seed, g));
    std::shuffle(members[g].begin(), members[g].end(), rng);
    keep.insert(keep.end(), members[g].begin(),
                members[g].begin() + static_cast<std::ptrdiff_t>(smallest));
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

RetrainedHead baseline_group_balanced_retrain(const vit::ViTModel& model,
                                              const Matrix& embeddings,
                                              std::span<const int> labels,
                                              std::span<const int> groups,
                                              const HeadHyper& hyper,
                                              std::uint64_t seed) {
  if (groups.size() != embeddings.rows() || labels.size() != embeddings.rows()) {
    throw InvalidInput("group-balanced retrain: length mismatch");
  }
  const auto keep = group_balanced_subsample(groups, 4, seed);
  Matrix x;
  std::vector<int> y;
  for (std::size_t i : keep) {
    x.push_row(embeddings.row(i));
    y.push_back(labels[i]);
  }
  return fit_head(model_head(model), x, y, hyper);
}

GroupMetrics evaluate_groups(std::span<const int> predictions,
                             std::span<const int> labels,
                             std::span<const int> shortcut_present,
                             std::span<const AblationMask> masks) {
  const std::size_t n = predictions.size();
  if (labels.size() != n || shortcut_present.size() != n ||
      (!masks.empty() && masks.size() != n)) {
    throw InvalidInput("evaluate_groups: length mismatch");
  }
  GroupMetrics m;
  std::array<std::size_t, 4> correct{};
  std::size_t total_correct = 0;
  std::size_t sp_total = 0, sp_hit = 0, ns_total = 0, ns_hit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int g = 2 * labels[i] + shortcut_present[i];
    if (g < 0 || g > 3) throw InvalidInput("evaluate_groups: bad group");
    ++m.group_count[static_cast<std::size_t>(g)];
    if (predictions[i] == labels[i]) {
      ++correct[static_cast<std::size_t>(g)];
      ++total_correct;
    }
    if (masks.empty()) continue;
    const bool hit = masks[i].flagged() > 0;
    if (shortcut_present[i]) {
      ++sp_total;
      sp_hit += hit;
    } else {
      ++ns_total;
      ns_hit += hit;
    }
  }
  double sum = 0.0;
  std::size_t defined = 0;
  m.wga = 100.0;
  for (std::size_t g = 0; g < 4; ++g) {
    if (m.group_count[g] == 0) {
      m.warnings.push_back("group " + std::to_string(g) +
                           " is empty; excluded from WGA/AGA");
      continue;
    }
    const double acc = 100.0 * static_cast<double>(correct[g]) /
                       static_cast<double>(m.group_count[g]);
    m.group_accuracy[g] = acc;
    m.wga = std::min(m.wga, acc);
    sum += acc;
    ++defined;
  }
  if (defined == 0) throw InvalidInput("evaluate_groups: no samples");
  m.aga = sum / static_cast<double>(defined);
  m.overall_accuracy =
      100.0 * static_cast<double>(total_correct) / static_cast<double>(n);
  if (sp_total > 0) {
    m.sp_rate = 100.0 * static_cast<double>(sp_hit) / static_cast<double>(sp_total);
  }
  if (ns_total > 0) {
    m.ns_rate = 100.0 * static_cast<double>(ns_hit) / static_cast<double>(ns_total);
  }
  return m;
}

nlohmann::json to_json(const GroupMetrics& m) {
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t g = 0; g < 4; ++g) {
    groups.push_back(
        {{"group", g},
         {"label", g / 2},
         {"shortcut_present", g % 2},
         {"count", m.group_count[g]},
         {"accuracy", m.group_accuracy[g] ? nlohmann::json(*m.group_accuracy[g])
                                          : nlohmann::json(nullptr)}});
  }
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"wga", m.wga},
          {"aga", m.aga},
          {"overall_accuracy", m.overall_accuracy},
          {"groups", groups},
          {"sp_rate", opt(m.sp_rate)},
          {"ns_rate", opt(m.ns_rate)},
          {"warnings", m.warnings}};
}

nlohmann::json to_json(const RetrainedHead& head) {
  return {{"rows", head.weight.rows()},
          {"cols", head.weight.cols()},
          {"weight", std::vector<double>(head.weight.values().begin(),
                                         head.weight.values().end())},
          {"bias", head.bias},
          {"loss_trace", head.loss_trace}};
}

RetrainedHead head_from_json(const nlohmann::json& j) {
  RetrainedHead head;
  head.weight = Matrix(j.at("rows").get<std::size_t>(),
                       j.at("cols").get<std::size_t>(),
                       j.at("weight").get<std::vector<double>>());
  head.bias = j.at("bias").get<std::vector<double>>();
  head.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  return head;
}

}  // namespace shortlens::mitigation
