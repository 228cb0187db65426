#include "kfep/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "kfep/error.hpp"
#include "kfep/rng.hpp"

namespace kfep {

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  end = std::min(end, size());
  std::vector<std::size_t> idx(end > begin ? end - begin : 0);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return subset(idx);
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.inputs = select_rows(inputs, indices);
  d.labels.reserve(indices.size());
  for (std::size_t i : indices) d.labels.push_back(labels.at(i));
  d.shape = shape;
  d.num_classes = num_classes;
  d.split = split;
  return d;
}

void Dataset::validate() const {
  if (inputs.rows() != labels.size()) throw ValidationError("dataset: input/label count mismatch");
  if (inputs.cols() != shape.size()) throw ValidationError("dataset: input width does not match shape");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw ValidationError("dataset: label out of range");
  if (!inputs.all_finite()) throw ValidationError("dataset: non-finite inputs");
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& p) {
  if (off + 4 > b.size()) throw FormatError("'" + p.string() + "': truncated IDX header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  if (be32(img, 0, images) != 0x00000803u) throw FormatError("'" + images.string() + "': bad IDX image magic");
  if (be32(lab, 0, labels) != 0x00000801u) throw FormatError("'" + labels.string() + "': bad IDX label magic");
  const std::size_t n = be32(img, 4, images), rows = be32(img, 8, images), cols = be32(img, 12, images);
  const std::size_t nl = be32(lab, 4, labels);
  if (nl != n) throw FormatError("IDX image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  if (img.size() < 16 + n * rows * cols) throw FormatError("'" + images.string() + "': truncated IDX payload");
  if (lab.size() < 8 + n) throw FormatError("'" + labels.string() + "': truncated IDX payload");

  Dataset d;
  d.shape = nn::Shape{1, rows, cols};
  d.inputs = Matrix(n, rows * cols);
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.inputs.data()[i] = img[16 + i] / 255.0;
  d.labels.resize(n);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = static_cast<std::size_t>(max_label + 1);
  d.split = split;
  return d;
}

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "blobs") return SynthKind::blobs;
  if (name == "moons") return SynthKind::moons;
  if (name == "random") return SynthKind::random;
  if (name == "bars") return SynthKind::bars;
  throw ValidationError("unknown synthetic dataset '" + name + "' (blobs|moons|random|bars)");
}

namespace {

void fill_blobs(Dataset& d, Rng& rng) {
  const std::size_t k = d.num_classes;
  d.shape = nn::Shape{2, 1, 1};
  d.inputs = Matrix(d.labels.size(), 2);
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(d.labels[i]);
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(y) / static_cast<double>(k);
    d.inputs(i, 0) = 3.0 * std::cos(angle) + 0.5 * rng.normal();
    d.inputs(i, 1) = 3.0 * std::sin(angle) + 0.5 * rng.normal();
  }
}

void fill_moons(Dataset& d, Rng& rng) {
  d.shape = nn::Shape{2, 1, 1};
  d.inputs = Matrix(d.labels.size(), 2);
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    const double t = std::numbers::pi * rng.uniform();
    if (d.labels[i] == 0) {
      d.inputs(i, 0) = std::cos(t);
      d.inputs(i, 1) = std::sin(t);
    } else {
      d.inputs(i, 0) = 1.0 - std::cos(t);
      d.inputs(i, 1) = 0.5 - std::sin(t);
    }
    d.inputs(i, 0) += 0.1 * rng.normal();
    d.inputs(i, 1) += 0.1 * rng.normal();
  }
}

// Labels from a random linear teacher so the task is learnable.
void fill_random(Dataset& d, Rng& rng) {
  constexpr std::size_t dim = 8;
  d.shape = nn::Shape{dim, 1, 1};
  Matrix teacher(dim, d.num_classes);
  for (double& x : teacher.data()) x = rng.normal();
  d.inputs = Matrix(d.labels.size(), dim);
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    for (std::size_t j = 0; j < dim; ++j) d.inputs(i, j) = rng.normal();
    const Vector s = matvec(teacher.transpose(), d.inputs.row(i));
    d.labels[i] = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
  }
}

// Stripe orientation: 0 horizontal, 1 vertical, 2 diagonal, 3 anti-diagonal.
void fill_bars(Dataset& d, Rng& rng) {
  constexpr std::size_t side = 8;
  if (d.num_classes > 4) throw ValidationError("bars dataset supports at most 4 classes");
  d.shape = nn::Shape{1, side, side};
  d.inputs = Matrix(d.labels.size(), side * side);
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    const int y = d.labels[i];
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    const double amp = rng.uniform(0.6, 1.0);
    const double freq = 2.0 * std::numbers::pi / rng.uniform(3.0, 5.0);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        const double u = y == 0 ? double(r) : y == 1 ? double(c) : y == 2 ? (double(r) + double(c)) / std::numbers::sqrt2
                                                                        : (double(r) - double(c)) / std::numbers::sqrt2;
        d.inputs(i, r * side + c) = amp * std::sin(freq * u + phase) + 0.3 * rng.normal();
      }
  }
}

}  // namespace

Dataset synth_dataset(SynthKind kind, std::uint64_t seed, std::size_t n, std::size_t classes, Split split) {
  if (n == 0) throw ValidationError("synthetic dataset needs n > 0");
  if (kind == SynthKind::moons) classes = 2;
  if (classes < 2) throw ValidationError("synthetic dataset needs at least 2 classes");
  // The test split draws from a different stream of the same distribution.
  Rng rng(seed * 2654435761u + (split == Split::test ? 0x9e3779b97f4a7c15ull : 0));
  Dataset d;
  d.num_classes = classes;
  d.split = split;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % classes);
  std::shuffle(d.labels.begin(), d.labels.end(), rng.engine());
  switch (kind) {
    case SynthKind::blobs: fill_blobs(d, rng); break;
    case SynthKind::moons: fill_moons(d, rng); break;
    case SynthKind::random: fill_random(d, rng); break;
    case SynthKind::bars: fill_bars(d, rng); break;
  }
  return d;
}

}  // namespace kfep
