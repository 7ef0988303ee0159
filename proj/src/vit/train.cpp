// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "shortlens/error.hpp"
#include "shortlens/vit/vit.hpp"

namespace shortlens::vit {

namespace {

bool decays(const ParamTensor& t) {
  // Decoupled weight decay only on projection matrices.
  return t.rows > 1 && t.name != "pos";
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TrainResult train(const ViTConfig& config, std::span<const LabeledImage> data,
                  const TrainHyper& hyper) {
  if (data.empty()) throw InvalidInput("train: empty dataset");
  for (const auto& s : data) {
    if (s.image == nullptr || (s.label != 0 && s.label != 1)) {
      throw InvalidInput("train: samples need an image and a binary label");
    }
  }
  if (hyper.batch == 0) throw InvalidInput("train: batch size must be > 0");

  TrainResult result{ViTModel(config), {}, {}};
  ViTModel& model = result.model;
  auto params = model.params();
  const std::size_t n_params = params.size();

  std::vector<char> decay_mask(n_params, 0);
  for (const auto& t : model.layout()) {
    if (!decays(t)) continue;
    std::fill_n(decay_mask.begin() + static_cast<long>(t.offset), t.size(), 1);
  }

  std::vector<double> grad(n_params), m1(n_params, 0.0), m2(n_params, 0.0);
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;

  std::mt19937_64 rng(hyper.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  const std::size_t steps_per_epoch =
      (data.size() + hyper.batch - 1) / hyper.batch;
  const std::size_t total_steps = steps_per_epoch * hyper.epochs;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += hyper.batch) {
      const std::size_t end = std::min(start + hyper.batch, data.size());
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const LabeledImage& s = data[order[i]];
        const double l = loss_and_gradient(model, *s.image, s.label, grad);
        if (l < std::log(2.0)) ++correct;  // binary: p(label) > 0.5
        batch_loss += l;
      }
      if (!std::isfinite(batch_loss)) {
        throw TrainingDiverged("non-finite training loss",
                               static_cast<int>(epoch));
      }
      epoch_loss += batch_loss;

      const double inv = 1.0 / static_cast<double>(end - start);
      ++step;
      const double progress =
          static_cast<double>(step - 1) / static_cast<double>(total_steps);
      const double lr = hyper.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t j = 0; j < n_params; ++j) {
        const double g = grad[j] * inv;
        m1[j] = kBeta1 * m1[j] + (1.0 - kBeta1) * g;
        m2[j] = kBeta2 * m2[j] + (1.0 - kBeta2) * g * g;
        if (decay_mask[j] != 0) params[j] -= lr * hyper.weight_decay * params[j];
        params[j] -= lr * (m1[j] / c1) / (std::sqrt(m2[j] / c2) + kEps);
      }
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(data.size()));
    result.epoch_accuracy.push_back(static_cast<double>(correct) /
                                    static_cast<double>(data.size()));
  }
  return result;
}

double accuracy(const ViTModel& model, std::span<const LabeledImage> data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : data) {
    const Prediction p = forward_tokens(model, embed(model, *s.image));
    if (argmax(p.probs) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace shortlens::vit
