#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kfep/kfac.hpp"
#include "kfep/nn.hpp"

// Binary container: "KFEP", u32 version, u32 record count, then records.
// All integers are little-endian u32 unless noted; payloads are f64.
//
//   record  = u8 tag, u32 layer_index, u32 n_attr, u32 attr[n_attr],
//             u32 n_tensor, tensor[n_tensor], u32 n_list, list[n_list]
//   tensor  = u8 name_len, name, u32 ndims, u32 dims[ndims], f64 data[prod]
//   list    = u8 name_len, name, u32 len, u32 data[len]
namespace kfep::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

enum class Tag : std::uint8_t {
  dense = 1,
  conv = 2,
  relu = 3,
  flatten = 4,
  bottleneck = 5,
  global_avg_pool = 6,
  input = 15,
  factors = 16,
};

struct Tensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> data;
};

struct IndexList {
  std::string name;
  std::vector<std::uint32_t> data;
};

struct Record {
  Tag tag = Tag::dense;
  std::uint32_t layer_index = 0;
  std::vector<std::uint32_t> attrs;
  std::vector<Tensor> tensors;
  std::vector<IndexList> lists;

  const Tensor& tensor(const std::string& name) const;
  const IndexList& list(const std::string& name) const;
};

std::vector<std::uint8_t> encode(std::span<const Record> records);
std::vector<Record> decode(std::span<const std::uint8_t> bytes);

std::vector<Record> network_records(const nn::Network& net);
nn::Network network_from_records(std::span<const Record> records);

std::vector<std::uint8_t> encode_network(const nn::Network& net);
nn::Network decode_network(std::span<const std::uint8_t> bytes);

void save_network(const nn::Network& net, const std::filesystem::path& path);
nn::Network load_network(const std::filesystem::path& path);

// Factors (and, when given, their eigendecompositions) keyed by layer index.
std::vector<std::uint8_t> encode_factors(const kfac::FactorSet& factors,
                                         const std::vector<std::optional<kfac::EigenFactors>>& eig = {});
kfac::FactorSet decode_factors(std::span<const std::uint8_t> bytes);
void save_factors(const kfac::FactorSet& factors, const std::vector<std::optional<kfac::EigenFactors>>& eig,
                  const std::filesystem::path& path);

// Number of f64 payload values across all tensors.
std::size_t payload_count(std::span<const Record> records);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace kfep::checkpoint
