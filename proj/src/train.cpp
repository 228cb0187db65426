#include "kfep/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kfep/error.hpp"
#include "kfep/rng.hpp"

namespace kfep {

double scheduled_lr(double lr0, std::size_t epoch, std::size_t epochs) {
  const std::size_t half = (epochs + 1) / 2;
  const std::size_t three_quarters = (3 * epochs + 3) / 4;
  double lr = lr0;
  if (epoch >= half) lr /= 10.0;
  if (epoch >= three_quarters) lr /= 10.0;
  return lr;
}

namespace {

std::size_t count_correct(const Matrix& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    const auto r = logits.row(b);
    if (static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin()) == labels[b]) ++correct;
  }
  return correct;
}

}  // namespace

std::vector<EpochStats> train(nn::Network& net, const Dataset& data, const TrainOptions& opts) {
  if (data.size() == 0) throw ValidationError("train: dataset is empty");
  if (opts.batch_size == 0) throw ValidationError("train: batch size must be positive");
  if (!(opts.lr > 0.0)) throw ValidationError("train: learning rate must be positive");
  Rng rng(opts.seed);
  std::vector<std::size_t> order(data.size());
  std::vector<EpochStats> history;

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const double lr = scheduled_lr(opts.lr, epoch, opts.epochs);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix x = select_rows(data.inputs, idx);
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.labels[idx[i]];

      const nn::ForwardPass pass = nn::forward(net, x, false);
      const nn::BackwardResult br = nn::backward(net, pass, y);
      if (!std::isfinite(br.loss)) throw TrainingDivergence("train: loss diverged in epoch " + std::to_string(epoch));
      loss_sum += br.loss * static_cast<double>(idx.size());
      correct += count_correct(pass.logits, y);
      nn::sgd_step(net, br.grads, lr, opts.weight_decay);
    }
    history.push_back({epoch, lr, loss_sum / static_cast<double>(data.size()),
                       static_cast<double>(correct) / static_cast<double>(data.size())});
  }
  return history;
}

EvalStats evaluate(const nn::Network& net, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw ValidationError("evaluate: dataset is empty");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const Dataset part = data.slice(start, start + batch_size);
    const Matrix logits = nn::predict(net, part.inputs);
    const Vector l = nn::per_sample_cross_entropy(logits, part.labels);
    for (double v : l) loss_sum += v;
    correct += count_correct(logits, part.labels);
  }
  const auto n = static_cast<double>(data.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

}  // namespace kfep
