#pragma once

#include <cstdint>
#include <span>
#include <filesystem>
#include <string>
#include <vector>

#include "kfep/matrix.hpp"
#include "kfep/nn.hpp"

namespace kfep {

enum class Split { train, test };

struct Dataset {
  Matrix inputs;  // n x shape.size()
  std::vector<int> labels;
  nn::Shape shape;
  std::size_t num_classes = 0;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  // Rows [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const;
  Dataset subset(std::span<const std::size_t> indices) const;
  void validate() const;
};

// Loads an image file (magic 0x00000803) and a label file (magic 0x00000801).
// Pixels are scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split = Split::train);

enum class SynthKind { blobs, moons, random, bars };

SynthKind parse_synth_kind(const std::string& name);

// Deterministic per seed. blobs/moons/random are flat 2-D (random: 8-D)
// feature sets; bars is a 1 x 8 x 8 image task whose class is the
// orientation of a noisy stripe pattern.
Dataset synth_dataset(SynthKind kind, std::uint64_t seed, std::size_t n, std::size_t classes,
                      Split split = Split::train);


}  // namespace kfep
