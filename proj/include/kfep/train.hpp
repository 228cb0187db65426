#pragma once

#include <cstdint>
#include <vector>

#include "kfep/dataset.hpp"
#include "kfep/nn.hpp"

namespace kfep {

struct TrainOptions {
  std::size_t epochs = 20;
  double lr = 0.1;
  double weight_decay = 2e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct EvalStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Step schedule: lr0, divided by 10 from epoch ceil(E/2) and again from
// ceil(3E/4).
double scheduled_lr(double lr0, std::size_t epoch, std::size_t epochs);

// Minibatch SGD with a seeded shuffle per epoch. Throws TrainingDivergence if
// the loss becomes non-finite.
std::vector<EpochStats> train(nn::Network& net, const Dataset& data, const TrainOptions& opts);

EvalStats evaluate(const nn::Network& net, const Dataset& data, std::size_t batch_size = 256);

}  // namespace kfep
