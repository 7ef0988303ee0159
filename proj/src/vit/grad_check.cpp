// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>

#include "shortlens/error.hpp"
#include "shortlens/vit/vit.hpp"

namespace shortlens::vit {

double GradCheckReport::max_error_for(LayerKind kind) const {
  double mx = 0.0;
  for (const auto& e : entries) {
    if (e.kind == kind) mx = std::max(mx, e.relative_error);
  }
  return mx;
}

std::size_t GradCheckReport::count_for(LayerKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(),
                    [kind](const auto& e) { return e.kind == kind; }));
}

double finite_difference(const ViTModel& model, const Image& image, int label,
                         std::size_t param_index, double epsilon) {
  ViTModel probe = model;
  auto p = probe.params();
  const double original = p[param_index];
  p[param_index] = original + epsilon;
  const double up = loss(probe, image, label);
  p[param_index] = original - epsilon;
  const double down = loss(probe, image, label);
  return (up - down) / (2.0 * epsilon);
}

GradCheckReport grad_check(const ViTModel& model, const Image& image,
                           int label, double epsilon, std::size_t samples,
                           std::uint64_t seed, double floor) {
  std::vector<double> grad(model.params().size(), 0.0);
  loss_and_gradient(model, image, label, grad);

  // Spread the samples over every tensor so each layer type is covered.
  const auto& layout = model.layout();
  const std::size_t per_tensor =
      std::max<std::size_t>(1, (samples + layout.size() - 1) / layout.size());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> picks;
  for (const auto& t : layout) {
    std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
    for (std::size_t i = 0; i < std::min(per_tensor, t.size()); ++i) {
      picks.push_back(t.offset + pick(rng));
    }
  }
  std::uniform_int_distribution<std::size_t> any(0, grad.size() - 1);
  while (picks.size() < samples) picks.push_back(any(rng));

  ViTModel probe = model;
  auto p = probe.params();
  GradCheckReport report;
  for (std::size_t idx : picks) {
    const double original = p[idx];
    p[idx] = original + epsilon;
    const double up = loss(probe, image, label);
    p[idx] = original - epsilon;
    const double down = loss(probe, image, label);
    p[idx] = original;

    GradCheckEntry e;
    e.param_index = idx;
    for (const auto& t : layout) {
      if (idx >= t.offset && idx < t.offset + t.size()) {
        e.kind = layer_kind(t.name);
        break;
      }
    }
    e.analytic = grad[idx];
    e.numeric = (up - down) / (2.0 * epsilon);
    e.relative_error =
        std::abs(e.analytic - e.numeric) /
        std::max({std::abs(e.analytic), std::abs(e.numeric), floor});
    report.max_relative_error =
        std::max(report.max_relative_error, e.relative_error);
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace shortlens::vit
