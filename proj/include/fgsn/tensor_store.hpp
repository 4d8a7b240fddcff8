// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fgsn/arch.hpp"

namespace fgsn {

enum class DType { F32, F64 };

std::size_t dtype_size(DType dtype) noexcept;
std::string_view dtype_tag(DType dtype) noexcept;  // "F32" / "F64"
DType parse_dtype(std::string_view tag);

/// A named dense tensor. `data` holds the little-endian row-major payload in
/// the storage dtype; numeric accessors always widen to double.
struct TensorRecord {
  std::string name;
  DType dtype = DType::F64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> data;

  std::uint64_t numel() const noexcept;

  /// Element i of the flattened buffer, widened to double.
  double at(std::size_t i) const;

  /// Flattened values in row-major order.
  Eigen::VectorXd values() const;

  /// 2-D tensors map to rows x cols; 1-D tensors map to an n x 1 column.
  Eigen::MatrixXd matrix() const;

  template <typename Derived>
  static TensorRecord from_matrix(std::string name, const Eigen::MatrixBase<Derived>& m,
                                  DType dtype = DType::F64);

  template <typename Derived>
  static TensorRecord from_vector(std::string name, const Eigen::MatrixBase<Derived>& v,
                                  DType dtype = DType::F64);

  /// Builds a record from already row-major values; checks numel against shape.
  static TensorRecord from_values(std::string name, std::vector<std::uint64_t> shape,
                                  std::span<const double> values, DType dtype = DType::F64);

  bool operator==(const TensorRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Container format: u64 LE header length N, N bytes of JSON metadata, payload.

std::vector<TensorRecord> parse_container(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_container(std::span<const TensorRecord> records);

std::vector<TensorRecord> load_container(const std::filesystem::path& path);
void save_container(std::span<const TensorRecord> records, const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept;

/// Writes text to `path` through a temporary file and rename.
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

enum class SnapshotRole { Base, Aligned, Finetuned };

std::string_view role_tag(SnapshotRole role) noexcept;
SnapshotRole parse_role(std::string_view tag);

struct ModelSnapshot {
  TransformerConfig arch;
  SnapshotRole role = SnapshotRole::Base;
  std::map<std::string, TensorRecord> tensors;

  const TensorRecord& at(const std::string& name) const;
  Eigen::MatrixXd matrix(const std::string& name) const { return at(name).matrix(); }
  void set(TensorRecord record);

  /// Names required by `arch` that are absent or have the wrong shape.
  std::vector<std::string> missing_tensors() const;
  bool complete() const { return missing_tensors().empty(); }

  std::vector<TensorRecord> records() const;
};

/// Directory layout: snapshot.json manifest + tensors.bin container.
void save_snapshot(const ModelSnapshot& snapshot, const std::filesystem::path& dir);
ModelSnapshot load_snapshot(const std::filesystem::path& dir);

/// Elementwise align - base in float64, named after the source tensor.
TensorRecord diff_snapshot(const ModelSnapshot& align, const ModelSnapshot& base, const std::string& name);

/// Throws DataError if the two snapshots disagree on any shared name's shape.
void check_same_geometry(const ModelSnapshot& a, const ModelSnapshot& b);

// ---------------------------------------------------------------------------

/// One low-rank update: delta W = (alpha / rank) * B * A.
struct LoraEntry {
  int layer = 0;
  std::string module;
  Eigen::MatrixXd A;  // rank x d_in
  Eigen::MatrixXd B;  // d_out x rank
  double alpha = 1.0;

  Eigen::Index rank() const noexcept { return A.rows(); }
  double scale() const noexcept { return alpha / static_cast<double>(rank()); }
  std::string key() const;  // "layers.{layer}.{module}"

  bool operator==(const LoraEntry& o) const;
};

struct LoraAdapter {
  std::vector<LoraEntry> entries;  // sorted by (layer, module)
  DType dtype = DType::F64;

  /// Checks rank agreement and, when `arch` is given, d_out == d_ff for MLP row modules.
  void validate(const TransformerConfig* arch = nullptr) const;

  const LoraEntry* find(int layer, std::string_view module) const;
  LoraEntry* find(int layer, std::string_view module);

  std::uint64_t parameter_count() const;

  /// Container records "layers.{k}.{module}.A|B", in sorted order.
  std::vector<TensorRecord> records() const;

  /// FNV-1a of the serialized container bytes.
  std::uint64_t content_hash() const;

  bool operator==(const LoraAdapter&) const = default;
};

/// Directory layout: adapter.json manifest + adapter.bin container.
void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& dir);
LoraAdapter load_adapter(const std::filesystem::path& dir);

/// Returns `snapshot` with every adapter delta added to its dense weight.
ModelSnapshot merge_adapter(const ModelSnapshot& snapshot, const LoraAdapter& adapter);

// ---------------------------------------------------------------------------

template <typename Derived>
TensorRecord TensorRecord::from_matrix(std::string name, const Eigen::MatrixBase<Derived>& m, DType dtype) {
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m.template cast<double>();
  return from_values(std::move(name),
                     {static_cast<std::uint64_t>(rm.rows()), static_cast<std::uint64_t>(rm.cols())},
                     std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())), dtype);
}

template <typename Derived>
TensorRecord TensorRecord::from_vector(std::string name, const Eigen::MatrixBase<Derived>& v, DType dtype) {
  const Eigen::VectorXd flat = v.template cast<double>();
  return from_values(std::move(name), {static_cast<std::uint64_t>(flat.size())},
                     std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())), dtype);
}

}  // namespace fgsn
