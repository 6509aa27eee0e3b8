// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "f3lab/data.hpp"
#include "f3lab/model.hpp"
#include "f3lab/parallel.hpp"

namespace f3lab {

struct TrainingDiverged : Error {
  using Error::Error;
};

struct TrainConfig {
  std::size_t epochs = 60;
  double learning_rate = 0.3;
  double final_lr_fraction = 0.02;  // cosine decay per epoch down to learning_rate * this
  std::size_t batch_size = 8;
  double clip_norm = 2.0;  // global gradient-norm clip per batch; 0 disables
  double noise_augment = 64.0 / 255.0;  // per-sample bound a ~ U[0, this]; pixels get U[-a, a] noise
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct TrainResult {
  Model model;
  double final_loss = 0.0;      // mean loss over the last epoch
  double train_accuracy = 0.0;  // fraction in [0, 1], measured after training
};

/// Percentage of samples whose argmax answer matches the label.
inline double accuracy(const Model& model, const Dataset& data, std::size_t workers = 1) {
  if (data.samples.empty()) throw ConfigError("accuracy of an empty dataset");
  std::vector<char> correct(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) {
    const Sample& s = data.samples[i];
    correct[i] = predict(model, s.image, s.question).answer == s.answer_label;
  });
  std::size_t hits = 0;
  for (char c : correct) hits += c;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(data.size());
}

/// Minibatch SGD on answer cross-entropy with seeded shuffling. Per-sample
/// gradients are summed in sample order, so results do not depend on `workers`.
inline TrainResult train(Model model, const Dataset& data, const TrainConfig& cfg) {
  if (data.samples.empty()) throw ConfigError("cannot train on an empty dataset");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(cfg.learning_rate > 0.0) || cfg.final_lr_fraction < 0.0 || cfg.final_lr_fraction > 1.0) {
    throw ConfigError("learning_rate must be > 0 and final_lr_fraction in [0, 1]");
  }
  if (cfg.noise_augment < 0.0) throw ConfigError("noise_augment must be >= 0");
  Rng rng(derive_seed(cfg.seed, {0x545241494eull}));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<Tensor*> params;
  model.params().for_each([&](Tensor& t) { params.push_back(&t); });

  TrainResult result{model, 0.0, 0.0};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    const double progress = cfg.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1) : 0.0;
    const double lr = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 *
                                                                       (1.0 + std::cos(std::numbers::pi * progress)));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t b = end - start;
      std::vector<std::vector<Tensor>> grads(b);
      std::vector<double> losses(b);
      parallel_for(b, cfg.workers, [&](std::size_t k) {
        const Sample& s = data.samples[order[start + k]];
        try {
          ad::Tape tape;
          BoundParams bp = bind(tape, model.params(), true);
          Tensor image = s.image;
          if (cfg.noise_augment > 0.0) {
            Rng noise(derive_seed(cfg.seed, {epoch, order[start + k]}));
            const double a = noise.uniform(0.0, cfg.noise_augment);
            for (double& v : image.data()) v = std::clamp(v - noise.uniform(-a, a), 0.0, 1.0);
          }
          ForwardVars f = forward(model.config(), bp, tape.constant(image), s.question);
          ad::Var l = ad::cross_entropy(f.logits, s.answer_label);
          tape.backward(l);
          losses[k] = l.value().item();
          for (const ad::Var& v : bp.all) grads[k].push_back(tape.grad(v));
        } catch (const NumericError& e) {
          throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", sample " +
                                 std::to_string(order[start + k]) + ": " + e.what());
        }
      });
      std::vector<Tensor> batch_grad;
      for (const Tensor* p : params) batch_grad.emplace_back(p->shape());
      for (std::size_t k = 0; k < b; ++k) {
        if (!std::isfinite(losses[k])) {
          throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", sample " +
                                 std::to_string(order[start + k]));
        }
        epoch_loss += losses[k];
        for (std::size_t p = 0; p < params.size(); ++p) {
          auto dst = batch_grad[p].data();
          const auto src = grads[k][p].data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
      double norm2 = 0.0;
      for (const Tensor& g : batch_grad) {
        for (double v : g.data()) norm2 += v * v;
      }
      const double norm = std::sqrt(norm2) / static_cast<double>(b);
      double step = lr / static_cast<double>(b);
      if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) step *= cfg.clip_norm / norm;
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto dst = params[p]->data();
        const auto src = batch_grad[p].data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= step * src[i];
      }
      for (Tensor* p : params) {
        if (!p->all_finite()) throw TrainingDiverged("parameters became non-finite at epoch " + std::to_string(epoch));
      }
    }
    result.final_loss = epoch_loss / static_cast<double>(data.size());
  }
  result.model = std::move(model);
  result.train_accuracy = accuracy(result.model, data, cfg.workers) / 100.0;
  return result;
}

}  // namespace f3lab
