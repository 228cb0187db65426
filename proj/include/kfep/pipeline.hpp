#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kfep/criteria.hpp"
#include "kfep/dataset.hpp"
#include "kfep/kfac.hpp"
#include "kfep/nn.hpp"

namespace kfep::pipeline {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

struct RunConfig {
  // data: a synthetic kind (blobs|moons|random|bars) or "idx"
  std::string dataset = "blobs";
  std::size_t train_size = 512;
  std::size_t test_size = 256;
  std::size_t classes = 2;
  std::filesystem::path train_images, train_labels, test_images, test_labels;

  std::string arch = "mlp:32";
  std::uint64_t seed = 0;

  std::size_t epochs = 20;
  double lr = 0.1;
  double weight_decay = 2e-4;
  std::size_t batch_size = 32;

  criteria::Strategy strategy = criteria::Strategy::eigendamage;
  double ratio = 0.5;
  std::optional<double> cap;
  std::size_t iterations = 1;
  double damping = 1e-6;
  std::size_t fisher_batches = 0;  // 0 = full train split
  std::size_t fisher_batch_size = 128;
  nn::BasisVariant basis = nn::BasisVariant::channel;
  // false: removed units are zeroed in place instead of being cut out
  bool compact = true;

  std::size_t finetune_epochs = 10;
  double finetune_lr = 0.01;
  double finetune_weight_decay = 1e-4;

  std::optional<std::size_t> depthwise_rank;

  std::filesystem::path checkpoint;
  std::filesystem::path out_dir = "out";

  // 0.95 for one pass, 0.5 when iterating, unless set.
  double effective_cap() const { return cap ? *cap : (iterations > 1 ? 0.5 : 0.95); }
  void validate() const;
};

// Applies one "key = value" assignment. Unknown keys are errors.
void set_option(RunConfig& cfg, const std::string& key, const std::string& value);
// Flat key = value text with '#' comments.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

struct Data {
  Dataset train;
  Dataset test;
};
Data load_data(const RunConfig& cfg);

// Every parameter including biases; equals the checkpoint payload size.
std::size_t count_params(const nn::Network& net);
// 2 MACs per multiply-add, bias excluded; bottleneck stages counted apart.
std::size_t count_flops(const nn::Network& net);
std::size_t count_nonzero(const nn::Network& net);
std::size_t layer_params(const nn::Layer& l);

struct PruneOptions {
  criteria::Strategy strategy = criteria::Strategy::eigendamage;
  double ratio = 0.5;
  double cap = 0.95;
  double damping = 1e-6;
  nn::BasisVariant basis = nn::BasisVariant::channel;
  kfac::EstimateOptions estimate;
  bool compact = true;
};

struct PruneOutcome {
  nn::Network net;
  std::vector<criteria::ImportanceTable> tables;
  criteria::PruneMask mask;
  // Units of each scored group before pruning, keyed like the mask.
  std::map<criteria::GroupKey, std::size_t> group_size;
  // Network right after rotation into the eigenbasis, before the mask
  // (eigendamage only).
  std::optional<nn::Network> rotated;
};

PruneOptions prune_options(const RunConfig& cfg);

// Factor estimation, scoring, mask selection and removal for one round.
PruneOutcome prune_once(const nn::Network& net, const Dataset& train, const PruneOptions& opts);

// Rotates every prunable layer into its current Kronecker-factored
// eigenbasis without pruning. Existing bottlenecks have their bases merged.
// Returns the eigenvalues used for scoring (lambda_a already scaled to the
// full-layer Fisher).
struct Rotation {
  nn::Network net;
  std::vector<std::optional<kfac::EigenFactors>> eig;
};
Rotation rotate_to_kfe(const nn::Network& net, const kfac::FactorSet& factors, nn::BasisVariant basis);

// Replaces bottlenecks that are larger than their effective dense or conv
// layer by that layer. Function-preserving.
nn::Network collapse_oversized(const nn::Network& net);

struct CommandResult {
  Json metrics;
  nn::Network net;
};

CommandResult cmd_train(const RunConfig& cfg);
CommandResult cmd_estimate(const RunConfig& cfg);
CommandResult cmd_prune(const RunConfig& cfg);
CommandResult cmd_finetune(const RunConfig& cfg);
CommandResult cmd_iterate(const RunConfig& cfg);
CommandResult cmd_eval(const RunConfig& cfg);
CommandResult cmd_decompose(const RunConfig& cfg);

// Dispatches by name ("train", "prune", ...).
CommandResult run_command(const std::string& name, const RunConfig& cfg);

}  // namespace kfep::pipeline
