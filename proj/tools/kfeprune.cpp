// kfeprune: train, prune, finetune and evaluate small networks.
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kfep/error.hpp"
#include "kfep/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<double> ratio, cap, damping;
  std::optional<std::size_t> iterations, fisher_batches, depthwise_rank;
  std::optional<std::string> out, checkpoint;
};

void add_options(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "key = value config file")->required();
  sub->add_option("--seed", o.seed, "RNG seed");
  sub->add_option("--strategy", o.strategy, "obd|obs|c-obd|c-obs|kron-obd|kron-obs|eigendamage");
  sub->add_option("--ratio", o.ratio, "pruning ratio p in (0,1)");
  sub->add_option("--cap", o.cap, "max fraction of units removed per layer");
  sub->add_option("--iterations", o.iterations, "pruning rounds");
  sub->add_option("--damping", o.damping, "damping lambda");
  sub->add_option("--fisher-batches", o.fisher_batches, "batches used for factor estimation (0 = all)");
  sub->add_option("--depthwise-rank", o.depthwise_rank, "rank for decompose");
  sub->add_option("--checkpoint", o.checkpoint, "input checkpoint");
  sub->add_option("--out", o.out, "output directory");
}

kfep::pipeline::RunConfig resolve(const Overrides& o) {
  using kfep::pipeline::set_option;
  kfep::pipeline::RunConfig cfg = kfep::pipeline::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.strategy) set_option(cfg, "strategy", *o.strategy);
  if (o.ratio) cfg.ratio = *o.ratio;
  if (o.cap) cfg.cap = *o.cap;
  if (o.iterations) cfg.iterations = *o.iterations;
  if (o.damping) cfg.damping = *o.damping;
  if (o.fisher_batches) cfg.fisher_batches = *o.fisher_batches;
  if (o.depthwise_rank) cfg.depthwise_rank = *o.depthwise_rank;
  if (o.checkpoint) cfg.checkpoint = *o.checkpoint;
  if (o.out) cfg.out_dir = *o.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kronecker-factored eigenbasis pruning toolkit"};
  app.require_subcommand(1);
  Overrides o;
  for (const char* name : {"train", "estimate", "prune", "iterate", "finetune", "eval", "decompose"})
    add_options(app.add_subcommand(name, std::string(name) + " command"), o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const auto result = kfep::pipeline::run_command(command, resolve(o));
    if (command == "eval") std::cout << result.metrics.dump(2) << '\n';
    return 0;
  } catch (const kfep::NumericError& e) {
    std::cerr << "kfeprune " << command << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "kfeprune " << command << ": " << e.what() << '\n';
    return 2;
  }
}
