#include "kfep/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "kfep/bottleneck.hpp"
#include "kfep/checkpoint.hpp"
#include "kfep/error.hpp"
#include "kfep/linalg.hpp"
#include "kfep/train.hpp"

namespace kfep::pipeline {

using criteria::Strategy;
using criteria::UnitKind;

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw ValidationError("config: '" + key + "' expects a number, got '" + v + "'");
  return d;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ValidationError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ValidationError("config: '" + key + "' is out of range");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config: '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace

void RunConfig::validate() const {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("ratio must be in (0, 1)");
  if (cap && !(*cap > 0.0 && *cap <= 1.0)) throw ValidationError("cap must be in (0, 1]");
  if (iterations < 1) throw ValidationError("iterations must be >= 1");
  if (!(damping >= 0.0)) throw ValidationError("damping must be >= 0");
  if (!(lr > 0.0) || !(finetune_lr > 0.0)) throw ValidationError("learning rates must be positive");
  if (weight_decay < 0.0 || finetune_weight_decay < 0.0) throw ValidationError("weight decay must be >= 0");
  if (batch_size == 0 || fisher_batch_size == 0) throw ValidationError("batch sizes must be positive");
  if (train_size == 0 || test_size == 0) throw ValidationError("dataset sizes must be positive");
}

void set_option(RunConfig& c, const std::string& key, const std::string& v) {
  if (key == "dataset") c.dataset = v;
  else if (key == "train_size") c.train_size = to_uint(key, v);
  else if (key == "test_size") c.test_size = to_uint(key, v);
  else if (key == "classes") c.classes = to_uint(key, v);
  else if (key == "train_images") c.train_images = v;
  else if (key == "train_labels") c.train_labels = v;
  else if (key == "test_images") c.test_images = v;
  else if (key == "test_labels") c.test_labels = v;
  else if (key == "arch") c.arch = v;
  else if (key == "seed") c.seed = to_uint(key, v);
  else if (key == "epochs") c.epochs = to_uint(key, v);
  else if (key == "lr") c.lr = to_double(key, v);
  else if (key == "weight_decay") c.weight_decay = to_double(key, v);
  else if (key == "batch_size") c.batch_size = to_uint(key, v);
  else if (key == "strategy") c.strategy = criteria::parse_strategy(v);
  else if (key == "ratio") c.ratio = to_double(key, v);
  else if (key == "cap") c.cap = to_double(key, v);
  else if (key == "iterations") c.iterations = to_uint(key, v);
  else if (key == "damping") c.damping = to_double(key, v);
  else if (key == "fisher_batches") c.fisher_batches = to_uint(key, v);
  else if (key == "fisher_batch_size") c.fisher_batch_size = to_uint(key, v);
  else if (key == "basis") {
    if (v == "channel") c.basis = nn::BasisVariant::channel;
    else if (v == "patch") c.basis = nn::BasisVariant::patch;
    else throw ValidationError("config: basis must be channel or patch");
  } else if (key == "compact") c.compact = to_bool(key, v);
  else if (key == "finetune_epochs") c.finetune_epochs = to_uint(key, v);
  else if (key == "finetune_lr") c.finetune_lr = to_double(key, v);
  else if (key == "finetune_weight_decay") c.finetune_weight_decay = to_double(key, v);
  else if (key == "depthwise_rank") c.depthwise_rank = to_uint(key, v);
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "out" || key == "out_dir") c.out_dir = v;
  else throw ValidationError("config: unknown key '" + key + "'");
}

RunConfig parse_config(const std::string& text, RunConfig cfg) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    set_option(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

Data load_data(const RunConfig& cfg) {
  Data d;
  if (cfg.dataset == "idx") {
    for (const auto* p : {&cfg.train_images, &cfg.train_labels, &cfg.test_images, &cfg.test_labels})
      if (p->empty()) throw ValidationError("idx dataset needs train_images, train_labels, test_images, test_labels");
    d.train = load_idx(cfg.train_images, cfg.train_labels, Split::train);
    d.test = load_idx(cfg.test_images, cfg.test_labels, Split::test);
    d.test.num_classes = d.train.num_classes = std::max(d.train.num_classes, d.test.num_classes);
    if (!(d.train.shape == d.test.shape)) throw FormatError("idx train and test images differ in shape");
  } else {
    const SynthKind kind = parse_synth_kind(cfg.dataset);
    d.train = synth_dataset(kind, cfg.seed, cfg.train_size, cfg.classes, Split::train);
    d.test = synth_dataset(kind, cfg.seed, cfg.test_size, cfg.classes, Split::test);
  }
  d.train.validate();
  d.test.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Accounting

std::size_t layer_params(const nn::Layer& l) {
  std::size_t n = 0;
  for (const auto& p : nn::parameters(l)) n += p.size();
  return n;
}

std::size_t count_params(const nn::Network& net) { return nn::parameter_count(net); }

std::size_t count_nonzero(const nn::Network& net) {
  std::size_t n = 0;
  for (const auto& l : net.layers)
    for (const auto& p : nn::parameters(l)) n += static_cast<std::size_t>(std::count_if(p.begin(), p.end(), [](double x) { return x != 0.0; }));
  return n;
}

namespace {

std::size_t stage_flops(const kernels::ConvGeometry& g, std::size_t c_out) {
  return 2 * g.patch_size() * c_out * g.locations();
}

std::size_t layer_flops(const nn::Layer& l, const nn::Shape& in) {
  if (const auto* d = std::get_if<nn::DenseLayer>(&l)) return 2 * d->inputs() * d->outputs();
  if (const auto* c = std::get_if<nn::ConvLayer>(&l))
    return stage_flops(kernels::ConvGeometry{c->c_in, in.h, in.w, c->k, c->stride, c->padding}, c->c_out);
  if (const auto* b = std::get_if<nn::BottleneckLayer>(&l)) {
    const nn::BottleneckStages st = nn::bottleneck_stages(*b, in);
    const std::size_t core = b->is_depthwise()
                                 ? 2 * st.stage[1].k * st.stage[1].k * b->rank_in() * st.stage[1].locations()
                                 : stage_flops(st.stage[1], b->rank_out());
    return stage_flops(st.stage[0], b->rank_in()) + core + stage_flops(st.stage[2], b->c_out);
  }
  return 0;
}

}  // namespace

std::size_t count_flops(const nn::Network& net) {
  const std::vector<nn::Shape> in = nn::layer_input_shapes(net);
  std::size_t total = 0;
  for (std::size_t li = 0; li < net.layers.size(); ++li) total += layer_flops(net.layers[li], in[li]);
  return total;
}

// ---------------------------------------------------------------------------
// Rotation into the eigenbasis

namespace {

kfac::EigenFactors clamped_eig(const kfac::KronFactors& f) {
  kfac::EigenFactors e = kfac::eigenbasis(f);
  for (double& x : e.lambda_a) x = std::max(x, 0.0);
  for (double& x : e.lambda_s) x = std::max(x, 0.0);
  return e;
}

// Output locations of the core linear map, used to put channel-variant input
// factors (means over pixels) on the same scale as patch sums.
std::size_t core_locations(const nn::Layer& l, const nn::Shape& in) {
  if (const auto* c = std::get_if<nn::ConvLayer>(&l))
    return kernels::ConvGeometry{c->c_in, in.h, in.w, c->k, c->stride, c->padding}.locations();
  if (const auto* b = std::get_if<nn::BottleneckLayer>(&l)) return nn::bottleneck_stages(*b, in).stage[1].locations();
  return 1;
}

bool is_plain_linear(const nn::Layer& l) {
  return std::holds_alternative<nn::DenseLayer>(l) || std::holds_alternative<nn::ConvLayer>(l);
}

}  // namespace

Rotation rotate_to_kfe(const nn::Network& net, const kfac::FactorSet& factors, nn::BasisVariant basis) {
  Rotation out{net, std::vector<std::optional<kfac::EigenFactors>>(net.layers.size())};
  const std::vector<nn::Shape> in = nn::layer_input_shapes(net);
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    if (li >= factors.size() || !factors[li]) continue;
    const nn::Layer& layer = net.layers[li];
    kfac::EigenFactors eig = clamped_eig(*factors[li]);
    if (const auto* b = std::get_if<nn::BottleneckLayer>(&layer)) {
      out.net.layers[li] = reparam::merge_bases(*b, eig.q_a, eig.q_s);
    } else if (is_plain_linear(layer)) {
      out.net.layers[li] = reparam::to_kfe(layer, eig, basis);
    } else {
      continue;
    }
    if (factors[li]->variant == kfac::FactorVariant::conv_channel) {
      const double scale = static_cast<double>(core_locations(layer, in[li]));
      for (double& x : eig.lambda_a) x *= scale;
    }
    out.eig[li] = std::move(eig);
  }
  return out;
}

nn::Network collapse_oversized(const nn::Network& net) {
  nn::Network out = net;
  for (auto& l : out.layers) {
    const auto* b = std::get_if<nn::BottleneckLayer>(&l);
    if (!b) continue;
    const Matrix w = reparam::effective_weight(*b);
    if (layer_params(l) < w.size() + b->bias.size()) continue;
    if (b->kind == nn::BottleneckKind::dense) {
      l = nn::DenseLayer{w, b->bias};
    } else {
      l = nn::ConvLayer{b->c_in, b->c_out, b->k, b->stride, b->padding, w, b->bias};
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Strategies

namespace {

Matrix& plain_weight(nn::Layer& l) {
  if (auto* d = std::get_if<nn::DenseLayer>(&l)) return d->weight;
  if (auto* c = std::get_if<nn::ConvLayer>(&l)) return c->weight;
  throw ValidationError("layer '" + nn::layer_name(l) + "' cannot be pruned by this strategy");
}

Vector& plain_bias(nn::Layer& l) {
  if (auto* d = std::get_if<nn::DenseLayer>(&l)) return d->bias;
  if (auto* c = std::get_if<nn::ConvLayer>(&l)) return c->bias;
  throw ValidationError("layer '" + nn::layer_name(l) + "' cannot be pruned by this strategy");
}

std::vector<std::size_t> linear_layers(const nn::Network& net) {
  std::vector<std::size_t> out;
  for (std::size_t li = 0; li < net.layers.size(); ++li)
    if (nn::is_linear(net.layers[li])) out.push_back(li);
  return out;
}

// Input rows of the next linear layer that read output channel `unit` of
// layer `li`.
struct Consumer {
  std::size_t layer = 0;
  std::size_t block = 1;  // rows per channel
};

Consumer find_consumer(const nn::Network& net, std::size_t li) {
  const std::vector<nn::Shape> shapes = nn::layer_shapes(net);
  std::size_t spatial = shapes[li].h * shapes[li].w;
  for (std::size_t nj = li + 1; nj < net.layers.size(); ++nj) {
    const nn::Layer& l = net.layers[nj];
    if (std::holds_alternative<nn::GlobalAvgPoolLayer>(l)) spatial = 1;
    if (std::holds_alternative<nn::DenseLayer>(l)) return {nj, spatial};
    if (const auto* c = std::get_if<nn::ConvLayer>(&l)) return {nj, c->k * c->k};
    if (const auto* b = std::get_if<nn::BottleneckLayer>(&l)) {
      if (b->kind == nn::BottleneckKind::dense) return {nj, spatial};
      return {nj, b->basis_rows() / b->c_in};
    }
  }
  throw ValidationError("layer " + std::to_string(li) + " has no downstream linear layer");
}

std::vector<std::size_t> keep_complement(std::span<const std::size_t> removed, std::size_t n) {
  std::vector<bool> drop(n, false);
  for (std::size_t u : removed) drop.at(u) = true;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (!drop[i]) keep.push_back(i);
  return keep;
}

// Cuts (or zeroes) output units of layer li and the matching input rows of
// its consumer.
void remove_output_units(nn::Network& net, std::size_t li, std::span<const std::size_t> units, bool compact) {
  if (units.empty()) return;
  Matrix& w = plain_weight(net.layers[li]);
  Vector& bias = plain_bias(net.layers[li]);
  if (!compact) {
    for (std::size_t u : units) {
      for (std::size_t r = 0; r < w.rows(); ++r) w(r, u) = 0.0;
      bias[u] = 0.0;
    }
    return;
  }
  const Consumer next = find_consumer(net, li);
  const std::vector<std::size_t> keep = keep_complement(units, w.cols());
  w = select_cols(w, keep);
  Vector nb;
  for (std::size_t k : keep) nb.push_back(bias[k]);
  bias = std::move(nb);
  if (auto* c = std::get_if<nn::ConvLayer>(&net.layers[li])) c->c_out = keep.size();

  std::vector<std::size_t> rows;
  for (std::size_t k : keep)
    for (std::size_t p = 0; p < next.block; ++p) rows.push_back(k * next.block + p);
  nn::Layer& nl = net.layers[next.layer];
  if (auto* d = std::get_if<nn::DenseLayer>(&nl)) {
    d->weight = select_rows(d->weight, rows);
  } else if (auto* c = std::get_if<nn::ConvLayer>(&nl)) {
    c->weight = select_rows(c->weight, rows);
    c->c_in = keep.size();
  } else if (auto* b = std::get_if<nn::BottleneckLayer>(&nl)) {
    b->q_a = select_rows(b->q_a, rows);
    b->c_in = keep.size();
  }
}

void score_structured(const nn::Network& net, const kfac::FactorSet& factors, const PruneOptions& opts,
                      criteria::ImportanceTable& table, std::map<std::size_t, kfac::KronFactors>& damped) {
  const std::vector<std::size_t> lin = linear_layers(net);
  for (std::size_t idx = 0; idx + 1 < lin.size(); ++idx) {
    const std::size_t li = lin[idx];
    nn::Layer layer = net.layers[li];
    if (!is_plain_linear(layer))
      throw ValidationError(criteria::to_string(opts.strategy) + " cannot score bottleneck layer " + std::to_string(li) +
                            "; collapse it first or use eigendamage");
    const Matrix& w = plain_weight(layer);
    const kfac::KronFactors& raw = *factors.at(li);
    Vector scores;
    switch (opts.strategy) {
      case Strategy::c_obd: scores = criteria::c_obd_scores(w, raw); break;
      case Strategy::kron_obd: scores = criteria::kron_obd_scores(w, raw); break;
      case Strategy::c_obs: {
        const kfac::KronFactors f = kfac::damp(raw, opts.damping);
        scores = criteria::c_obs_scores(w, kfac::kron_inverse(f));
        break;
      }
      case Strategy::kron_obs: {
        kfac::KronFactors f = kfac::damp(raw, opts.damping);
        scores = criteria::kron_obs_scores(w, f.a, spd_inverse(f.s));
        damped.emplace(li, std::move(f));
        break;
      }
      default: throw ValidationError("not a structured strategy");
    }
    table.append(li, UnitKind::filter, scores);
  }
}

// Sequential Kron-OBS: each removal applies its compensating update, then S^-1
// is downdated to the remaining filters so removed columns stay at zero.
void apply_kron_obs(Matrix& w, const kfac::KronFactors& f, const criteria::ImportanceTable& table, std::size_t li,
                    std::span<const std::size_t> removed) {
  std::vector<std::pair<double, std::size_t>> order;
  for (const auto& e : table.entries)
    if (e.layer_id == li && std::binary_search(removed.begin(), removed.end(), e.unit_id))
      order.emplace_back(e.delta_loss, e.unit_id);
  std::sort(order.begin(), order.end());
  Matrix s_inv = spd_inverse(f.s);
  for (const auto& [score, i] : order) {
    w += criteria::kron_obs_update(w, s_inv, i);
    for (std::size_t r = 0; r < w.rows(); ++r) w(r, i) = 0.0;
    const double pivot = s_inv(i, i);
    const Vector col = s_inv.col(i);
    for (std::size_t a = 0; a < s_inv.rows(); ++a)
      for (std::size_t b = 0; b < s_inv.cols(); ++b) s_inv(a, b) -= col[a] * col[b] / pivot;
  }
}

void score_weights(const nn::Network& net, const kfac::FactorSet& factors, const PruneOptions& opts,
                   criteria::ImportanceTable& table) {
  for (std::size_t li : linear_layers(net)) {
    nn::Layer layer = net.layers[li];
    if (!is_plain_linear(layer))
      throw ValidationError(criteria::to_string(opts.strategy) + " cannot score bottleneck layer " + std::to_string(li));
    const Matrix& w = plain_weight(layer);
    const kfac::KronFactors& raw = *factors.at(li);
    const Matrix s = opts.strategy == Strategy::obd
                         ? criteria::kfac_obd_weight_scores(w, raw)
                         : criteria::kfac_obs_weight_scores(w, kfac::kron_inverse(kfac::damp(raw, opts.damping)));
    table.append(li, UnitKind::weight, vec(s));
  }
}

void apply_weight_prune(nn::Network& net, const kfac::FactorSet& factors, const PruneOptions& opts,
                        const criteria::ImportanceTable& table, const criteria::PruneMask& mask) {
  for (std::size_t li : linear_layers(net)) {
    const auto& removed = mask.removed_in(li, UnitKind::weight);
    if (removed.empty()) continue;
    Matrix& w = plain_weight(net.layers[li]);
    const std::size_t n = w.rows();
    if (opts.strategy == Strategy::obs) {
      const kfac::KronInverse inv = kfac::kron_inverse(kfac::damp(*factors.at(li), opts.damping));
      std::vector<std::pair<double, std::size_t>> order;
      for (const auto& e : table.entries)
        if (e.layer_id == li && std::binary_search(removed.begin(), removed.end(), e.unit_id))
          order.emplace_back(e.delta_loss, e.unit_id);
      std::sort(order.begin(), order.end());
      for (const auto& [score, q] : order) {
        const std::size_t i = q % n, j = q / n;
        if (w(i, j) != 0.0) w += criteria::kfac_obs_update(w, inv, i, j);
        for (std::size_t r : removed) w(r % n, r / n) = 0.0;
      }
    }
    for (std::size_t q : removed) w(q % n, q / n) = 0.0;
  }
}

}  // namespace

PruneOptions prune_options(const RunConfig& cfg) {
  PruneOptions o;
  o.strategy = cfg.strategy;
  o.ratio = cfg.ratio;
  o.cap = cfg.effective_cap();
  o.damping = cfg.damping;
  o.basis = cfg.basis;
  o.compact = cfg.compact;
  o.estimate.batch_size = cfg.fisher_batch_size;
  o.estimate.max_batches = cfg.fisher_batches;
  return o;
}

PruneOutcome prune_once(const nn::Network& net, const Dataset& train, const PruneOptions& opts) {
  kfac::EstimateOptions est = opts.estimate;
  if (opts.strategy == Strategy::eigendamage)
    est.conv_variant = opts.basis == nn::BasisVariant::channel ? kfac::FactorVariant::conv_channel
                                                               : kfac::FactorVariant::conv_full;
  else
    est.conv_variant = kfac::FactorVariant::conv_full;
  const kfac::FactorSet factors = kfac::estimate_factors(net, train, est);

  PruneOutcome out;
  criteria::ImportanceTable table;
  table.strategy = opts.strategy;

  if (opts.strategy == Strategy::eigendamage) {
    Rotation rot = rotate_to_kfe(net, factors, opts.basis);
    for (std::size_t li = 0; li < rot.net.layers.size(); ++li) {
      if (!rot.eig[li]) continue;
      const auto& b = std::get<nn::BottleneckLayer>(rot.net.layers[li]);
      const std::size_t ck = b.core_k();
      const criteria::EigenScores s =
          criteria::eigendamage_scores(b.core, rot.eig[li]->lambda_a, rot.eig[li]->lambda_s, ck * ck);
      table.append(li, UnitKind::kfe_row, s.rows);
      table.append(li, UnitKind::kfe_col, s.cols);
    }
    table.validate();
    out.mask = criteria::select_mask(std::span(&table, 1), opts.ratio, opts.cap);
    out.net = rot.net;
    for (std::size_t li = 0; li < out.net.layers.size(); ++li) {
      if (!rot.eig[li]) continue;
      auto& b = std::get<nn::BottleneckLayer>(out.net.layers[li]);
      b = reparam::eigenprune(b, out.mask.removed_in(li, UnitKind::kfe_row), out.mask.removed_in(li, UnitKind::kfe_col));
    }
    out.net = collapse_oversized(out.net);
    out.rotated = std::move(rot.net);
  } else if (criteria::is_structured(opts.strategy)) {
    std::map<std::size_t, kfac::KronFactors> damped;
    score_structured(net, factors, opts, table, damped);
    table.validate();
    out.mask = criteria::select_mask(std::span(&table, 1), opts.ratio, opts.cap);
    out.net = net;
    if (opts.strategy == Strategy::kron_obs)
      for (const auto& [li, f] : damped)
        apply_kron_obs(plain_weight(out.net.layers[li]), f, table, li, out.mask.removed_in(li, UnitKind::filter));
    // Cut from the last layer backwards so consumer indices stay valid.
    std::vector<std::size_t> lin = linear_layers(out.net);
    for (auto it = lin.rbegin(); it != lin.rend(); ++it)
      remove_output_units(out.net, *it, out.mask.removed_in(*it, UnitKind::filter), opts.compact);
  } else {
    score_weights(net, factors, opts, table);
    table.validate();
    out.mask = criteria::select_mask(std::span(&table, 1), opts.ratio, opts.cap);
    out.net = net;
    apply_weight_prune(out.net, factors, opts, table, out.mask);
  }
  out.group_size = out.mask.group_size;
  out.tables.push_back(std::move(table));
  return out;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

using Clock = std::chrono::steady_clock;

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

void write_curve(const std::filesystem::path& path, const std::vector<EpochStats>& hist) {
  std::ostringstream s;
  s.precision(17);
  s << "epoch,lr,loss,accuracy\n";
  for (const auto& e : hist) s << e.epoch << ',' << e.lr << ',' << e.loss << ',' << e.accuracy << '\n';
  write_text(path, s.str());
}

nn::Network load_input_network(const RunConfig& cfg, const Data& data) {
  if (cfg.checkpoint.empty()) throw ValidationError("this command needs 'checkpoint' (input checkpoint path)");
  nn::Network net = checkpoint::load_network(cfg.checkpoint);
  if (!(net.input == data.train.shape))
    throw DimensionError("checkpoint input shape does not match dataset '" + cfg.dataset + "'");
  if (nn::num_classes(net) != data.train.num_classes)
    throw DimensionError("checkpoint has " + std::to_string(nn::num_classes(net)) + " outputs, dataset has " +
                         std::to_string(data.train.num_classes) + " classes");
  return net;
}

Json eval_json(const EvalStats& s) { return Json{{"loss", s.loss}, {"accuracy", s.accuracy}}; }

double reduction(std::size_t before, std::size_t after) {
  return before ? 100.0 * (1.0 - static_cast<double>(after) / static_cast<double>(before)) : 0.0;
}

Json base_record(const std::string& command, const RunConfig& cfg) {
  return Json{{"schema_version", kSchemaVersion}, {"command", command}, {"seed", cfg.seed}};
}

void add_counts(Json& j, const nn::Network& before, const nn::Network& after) {
  const std::size_t pb = count_params(before), pa = count_params(after);
  const std::size_t fb = count_flops(before), fa = count_flops(after);
  j["params_before"] = pb;
  j["params"] = pa;
  j["nonzero_params"] = count_nonzero(after);
  j["flops_before"] = fb;
  j["flops"] = fa;
  j["weight_reduction_pct"] = reduction(pb, pa);
  j["nonzero_reduction_pct"] = reduction(count_nonzero(before), count_nonzero(after));
  j["flop_reduction_pct"] = reduction(fb, fa);
  Json frac = Json::array();
  for (std::size_t li = 0; li < after.layers.size() && li < before.layers.size(); ++li) {
    if (!nn::is_linear(before.layers[li])) continue;
    std::size_t nz = 0;
    for (const auto& p : nn::parameters(after.layers[li]))
      nz += static_cast<std::size_t>(std::count_if(p.begin(), p.end(), [](double x) { return x != 0.0; }));
    frac.push_back(static_cast<double>(nz) / static_cast<double>(layer_params(before.layers[li])));
  }
  j["remaining_fraction"] = frac;
}

Json mask_json(const PruneOutcome& o) {
  double worst = 0.0;
  std::size_t removed = 0;
  for (const auto& [key, n] : o.group_size) {
    const std::size_t r = o.mask.removed_in(key.first, key.second).size();
    removed += r;
    worst = std::max(worst, static_cast<double>(r) / static_cast<double>(n));
  }
  return Json{{"tau", o.mask.tau}, {"ratio", o.mask.ratio}, {"cap", o.mask.cap}, {"removed_units", removed},
              {"scored_units", o.tables.empty() ? 0 : o.tables.front().entries.size()},
              {"max_removed_fraction", worst}};
}

void write_timing(const RunConfig& cfg, Clock::time_point start) {
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  write_json(cfg.out_dir / "timing.json", Json{{"schema_version", kSchemaVersion}, {"wall_seconds", secs}});
}

std::vector<EpochStats> finetune(nn::Network& net, const Dataset& train, const RunConfig& cfg, std::uint64_t salt) {
  if (cfg.finetune_epochs == 0) return {};
  TrainOptions t;
  t.epochs = cfg.finetune_epochs;
  t.lr = cfg.finetune_lr;
  t.weight_decay = cfg.finetune_weight_decay;
  t.batch_size = cfg.batch_size;
  t.seed = cfg.seed * 1000003u + salt;
  return kfep::train(net, train, t);
}

}  // namespace

CommandResult cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const Data data = load_data(cfg);
  ensure_dir(cfg.out_dir);
  nn::Network net = nn::make_network(cfg.arch, data.train.shape, data.train.num_classes, cfg.seed);
  TrainOptions t{cfg.epochs, cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.seed};
  const auto hist = train(net, data.train, t);
  checkpoint::save_network(net, cfg.out_dir / "checkpoint.kfep");
  write_curve(cfg.out_dir / "curve.csv", hist);

  Json j = base_record("train", cfg);
  j["arch"] = cfg.arch;
  j["dataset"] = cfg.dataset;
  j["epochs"] = cfg.epochs;
  j["train"] = eval_json(evaluate(net, data.train));
  j["test"] = eval_json(evaluate(net, data.test));
  j["accuracy"] = j["train"]["accuracy"];
  add_counts(j, net, net);
  write_json(cfg.out_dir / "metrics.json", j);
  write_timing(cfg, start);
  return {j, net};
}

CommandResult cmd_estimate(const RunConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const Data data = load_data(cfg);
  const nn::Network net = load_input_network(cfg, data);
  ensure_dir(cfg.out_dir);
  kfac::EstimateOptions est = prune_options(cfg).estimate;
  est.conv_variant = cfg.basis == nn::BasisVariant::channel ? kfac::FactorVariant::conv_channel
                                                            : kfac::FactorVariant::conv_full;
  const kfac::FactorSet factors = kfac::estimate_factors(net, data.train, est);
  std::vector<std::optional<kfac::EigenFactors>> eig(factors.size());
  Json layers = Json::array();
  for (std::size_t li = 0; li < factors.size(); ++li) {
    if (!factors[li]) continue;
    eig[li] = kfac::eigenbasis(*factors[li]);
    layers.push_back(Json{{"layer", li}, {"a_dim", factors[li]->a.rows()}, {"s_dim", factors[li]->s.rows()},
                          {"samples", factors[li]->sample_count}});
  }
  checkpoint::save_factors(factors, eig, cfg.out_dir / "factors.kfep");
  Json j = base_record("estimate", cfg);
  j["layers"] = layers;
  write_json(cfg.out_dir / "metrics.json", j);
  write_timing(cfg, start);
  return {j, net};
}

CommandResult cmd_prune(const RunConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const Data data = load_data(cfg);
  const nn::Network net = load_input_network(cfg, data);
  ensure_dir(cfg.out_dir);
  const EvalStats train_pre = evaluate(net, data.train), test_pre = evaluate(net, data.test);

  const PruneOutcome o = prune_once(net, data.train, prune_options(cfg));
  const EvalStats train_post = evaluate(o.net, data.train), test_post = evaluate(o.net, data.test);

  checkpoint::save_network(o.net, cfg.out_dir / "checkpoint.kfep");
  std::ofstream csv(cfg.out_dir / "importance.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write importance.csv");
  criteria::write_importance_csv(csv, o.tables);

  Json j = base_record("prune", cfg);
  j["strategy"] = criteria::to_string(cfg.strategy);
  j["mask"] = mask_json(o);
  j["train_loss_pre"] = train_pre.loss;
  j["train_loss_post"] = train_post.loss;
  j["train_accuracy_post"] = train_post.accuracy;
  j["test_accuracy_pre"] = test_pre.accuracy;
  j["test_accuracy"] = test_post.accuracy;
  j["test_loss"] = test_post.loss;
  add_counts(j, net, o.net);
  write_json(cfg.out_dir / "metrics.json", j);
  write_timing(cfg, start);
  return {j, o.net};
}

CommandResult cmd_finetune(const RunConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const Data data = load_data(cfg);
  const nn::Network before = load_input_network(cfg, data);
  ensure_dir(cfg.out_dir);
  nn::Network net = before;
  const EvalStats pre = evaluate(net, data.train);
  const auto hist = finetune(net, data.train, cfg, 1);
  checkpoint::save_network(net, cfg.out_dir / "checkpoint.kfep");
  write_curve(cfg.out_dir / "curve.csv", hist);
  Json j = base_record("finetune", cfg);
  j["epochs"] = cfg.finetune_epochs;
  j["train_loss_pre"] = pre.loss;
  j["train"] = eval_json(evaluate(net, data.train));
  j["test"] = eval_json(evaluate(net, data.test));
  j["train_loss_post"] = j["train"]["loss"];
  j["test_accuracy"] = j["test"]["accuracy"];
  add_counts(j, before, net);
  write_json(cfg.out_dir / "metrics.json", j);
  write_timing(cfg, start);
  return {j, net};
}

CommandResult cmd_iterate(const RunConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const Data data = load_data(cfg);
  const nn::Network base = load_input_network(cfg, data);
  ensure_dir(cfg.out_dir);
  const PruneOptions opts = prune_options(cfg);

  Json j = base_record("iterate", cfg);
  j["strategy"] = criteria::to_string(cfg.strategy);
  j["iterations"] = cfg.iterations;
  j["baseline"] = Json{{"train", eval_json(evaluate(base, data.train))},
                       {"test", eval_json(evaluate(base, data.test))},
                       {"params", count_params(base)},
                       {"flops", count_flops(base)}};
  Json rounds = Json::array();
  nn::Network net = base;
  std::vector<EpochStats> curve;
  for (std::size_t r = 0; r < cfg.iterations; ++r) {
    PruneOutcome o;
    try {
      o = prune_once(net, data.train, opts);
    } catch (const ValidationError& e) {
      j["aborted"] = Json{{"round", r + 1}, {"reason", e.what()}};
      break;
    }
    Json rec{{"round", r + 1}, {"mask", mask_json(o)}};
    rec["train_loss_pre"] = evaluate(net, data.train).loss;
    rec["train_loss_post_prune"] = evaluate(o.net, data.train).loss;
    net = std::move(o.net);
    auto hist = finetune(net, data.train, cfg, r + 1);
    for (auto& e : hist) e.epoch += r * cfg.finetune_epochs;
    curve.insert(curve.end(), hist.begin(), hist.end());
    rec["train_loss_post_finetune"] = evaluate(net, data.train).loss;
    rec["test_accuracy"] = evaluate(net, data.test).accuracy;
    add_counts(rec, base, net);
    rounds.push_back(std::move(rec));
  }
  j["rounds"] = rounds;
  j["test_accuracy"] = evaluate(net, data.test).accuracy;
  add_counts(j, base, net);
  checkpoint::save_network(net, cfg.out_dir / "checkpoint.kfep");
  write_curve(cfg.out_dir / "curve.csv", curve);
  write_json(cfg.out_dir / "metrics.json", j);
  write_timing(cfg, start);
  return {j, net};
}

CommandResult cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const Data data = load_data(cfg);
  const nn::Network net = load_input_network(cfg, data);
  ensure_dir(cfg.out_dir);
  Json j = base_record("eval", cfg);
  j["checkpoint"] = cfg.checkpoint.filename().string();
  j["train"] = eval_json(evaluate(net, data.train));
  j["test"] = eval_json(evaluate(net, data.test));
  j["params"] = count_params(net);
  j["nonzero_params"] = count_nonzero(net);
  j["flops"] = count_flops(net);
  write_json(cfg.out_dir / "metrics.json", j);
  write_timing(cfg, start);
  return {j, net};
}

CommandResult cmd_decompose(const RunConfig& cfg) {
  cfg.validate();
  const auto start = Clock::now();
  const Data data = load_data(cfg);
  const nn::Network before = load_input_network(cfg, data);
  ensure_dir(cfg.out_dir);
  nn::Network net = before;
  Json layers = Json::array();
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto* b = std::get_if<nn::BottleneckLayer>(&net.layers[li]);
    if (!b || b->is_depthwise() || b->kind != nn::BottleneckKind::conv) continue;
    const std::size_t ck = b->core_k();
    const std::size_t full = std::min(b->rank_in(), b->rank_out());
    const std::size_t rank = std::min(cfg.depthwise_rank.value_or(full), full);
    reparam::AlsOptions als;
    als.seed = cfg.seed;
    const auto slices = reparam::core_slices(b->core, ck * ck);
    const reparam::DepthwiseFactors f = reparam::depthwise_decompose(slices, rank, als);
    double norm = 0.0;
    for (const auto& s : slices) norm += frobenius_norm(s) * frobenius_norm(s);
    layers.push_back(Json{{"layer", li}, {"rank", rank}, {"iterations", f.objective.size() - 1},
                          {"restarts", f.restarts}, {"objective", f.final_objective()},
                          {"relative_residual", norm > 0 ? std::sqrt(2 * f.final_objective() / norm) : 0.0}});
    *b = reparam::absorb_depthwise(*b, f);
  }
  checkpoint::save_network(net, cfg.out_dir / "checkpoint.kfep");
  Json j = base_record("decompose", cfg);
  j["layers"] = layers;
  j["train_loss_pre"] = evaluate(before, data.train).loss;
  j["train_loss_post"] = evaluate(net, data.train).loss;
  j["test_accuracy"] = evaluate(net, data.test).accuracy;
  add_counts(j, before, net);
  write_json(cfg.out_dir / "metrics.json", j);
  write_timing(cfg, start);
  return {j, net};
}

CommandResult run_command(const std::string& name, const RunConfig& cfg) {
  if (name == "train") return cmd_train(cfg);
  if (name == "estimate") return cmd_estimate(cfg);
  if (name == "prune") return cmd_prune(cfg);
  if (name == "finetune") return cmd_finetune(cfg);
  if (name == "iterate") return cmd_iterate(cfg);
  if (name == "eval") return cmd_eval(cfg);
  if (name == "decompose") return cmd_decompose(cfg);
  throw ValidationError("unknown command '" + name + "'");
}

}  // namespace kfep::pipeline
