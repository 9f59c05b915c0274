#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "miasrec/model.hpp"

namespace miasrec {

// Binary tensor container, version 1 (little endian):
//
//   8 bytes   magic "MIASRCKP"
//   u32       format version
//   u64       header length in bytes
//   header    JSON: {"meta": {...}, "tensors": [{"name", "rows", "cols"}, ...]}
//   payload   float64 values of every tensor, row major, in header order
inline constexpr std::uint32_t kArchiveFormatVersion = 1;

struct TensorRecord {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  std::vector<double> values;
};

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);
};

template <typename Scalar>
void store_parameters(TensorArchive& archive, const std::string& prefix, const ModelParameters<Scalar>& params);

// Reads tensors named `prefix + name` and validates them against `config`.
template <typename Scalar>
ModelParameters<Scalar> restore_parameters(const TensorArchive& archive, const std::string& prefix,
                                           const ModelConfig& config);

template <typename Scalar>
struct Checkpoint {
  ModelConfig config;
  ModelParameters<Scalar> params;
  nlohmann::json echo;  // run configuration that produced the parameters
};

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParameters<Scalar>& params, const nlohmann::json& echo);

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path);

}  // namespace miasrec
