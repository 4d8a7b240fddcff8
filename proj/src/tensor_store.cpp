// Copyright (c) 2026, The fgsn authors
// SPDX-License-Identifier: Apache-2.0
//

#include "fgsn/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <tuple>
#include <utility>

#include <nlohmann/json.hpp>

#include "fgsn/error.hpp"

namespace fgsn {

static_assert(std::endian::native == std::endian::little, "container payloads are read in place as little-endian");

namespace {

using json = nlohmann::json;

constexpr std::string_view kMetadataKey = "__metadata__";

std::uint64_t read_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  std::memcpy(&v, p, sizeof v);
  return v;
}

bool checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) return false;
  out = a * b;
  return true;
}

std::uint64_t json_u64(const json& v, const std::string& where) {
  if (!v.is_number_unsigned()) throw DataError("container: " + where + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

void write_binary_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename '" + tmp.string() + "': " + ec.message());
}

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

std::size_t dtype_size(DType dtype) noexcept { return dtype == DType::F32 ? 4 : 8; }

std::string_view dtype_tag(DType dtype) noexcept { return dtype == DType::F32 ? "F32" : "F64"; }

DType parse_dtype(std::string_view tag) {
  if (tag == "F32") return DType::F32;
  if (tag == "F64") return DType::F64;
  throw DataError("unsupported dtype '" + std::string(tag) + "'");
}

// ---------------------------------------------------------------------------

std::uint64_t TensorRecord::numel() const noexcept {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

double TensorRecord::at(std::size_t i) const {
  if (dtype == DType::F32) {
    float f;
    std::memcpy(&f, data.data() + i * 4, 4);
    return f;
  }
  double d;
  std::memcpy(&d, data.data() + i * 8, 8);
  return d;
}

Eigen::VectorXd TensorRecord::values() const {
  const auto n = static_cast<Eigen::Index>(numel());
  Eigen::VectorXd v(n);
  if (dtype == DType::F64) {
    if (n > 0) std::memcpy(v.data(), data.data(), static_cast<std::size_t>(n) * 8);
  } else {
    for (Eigen::Index i = 0; i < n; ++i) v[i] = at(static_cast<std::size_t>(i));
  }
  return v;
}

Eigen::MatrixXd TensorRecord::matrix() const {
  if (shape.size() == 1) return values();
  if (shape.size() != 2) throw DataError("tensor '" + name + "' is not 1-D or 2-D");
  const auto rows = static_cast<Eigen::Index>(shape[0]);
  const auto cols = static_cast<Eigen::Index>(shape[1]);
  const Eigen::VectorXd flat = values();
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(flat.data(), rows,
                                                                                                   cols);
}

TensorRecord TensorRecord::from_values(std::string name, std::vector<std::uint64_t> shape,
                                       std::span<const double> values, DType dtype) {
  TensorRecord r;
  r.name = std::move(name);
  r.dtype = dtype;
  r.shape = std::move(shape);
  if (r.numel() != values.size())
    throw DataError("tensor '" + r.name + "': shape does not match value count");
  r.data.resize(values.size() * dtype_size(dtype));
  if (dtype == DType::F64) {
    if (!values.empty()) std::memcpy(r.data.data(), values.data(), values.size() * 8);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto f = static_cast<float>(values[i]);
      std::memcpy(r.data.data() + i * 4, &f, 4);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

std::vector<TensorRecord> parse_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw DataError("container: truncated header length");
  const std::uint64_t header_len = read_u64_le(bytes.data());
  if (header_len > bytes.size() - 8) throw DataError("container: header length exceeds file size");

  const auto* header_begin = bytes.data() + 8;
  const auto* header_end = header_begin + header_len;
  std::set<std::string> seen;
  json meta;
  try {
    meta = json::parse(header_begin, header_end,
                       [&seen](int depth, json::parse_event_t event, json& parsed) {
                         if (depth == 1 && event == json::parse_event_t::key) {
                           if (!seen.insert(parsed.get<std::string>()).second)
                             throw DataError("container: duplicate tensor name '" + parsed.get<std::string>() + "'");
                         }
                         return true;
                       });
  } catch (const json::exception& e) {
    throw DataError(std::string("container: invalid metadata JSON: ") + e.what());
  }
  if (!meta.is_object()) throw DataError("container: metadata must be a JSON object");

  const std::span<const std::uint8_t> payload = bytes.subspan(8 + header_len);
  std::vector<TensorRecord> records;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& [name, entry] : meta.items()) {
    if (name == kMetadataKey) continue;
    if (!entry.is_object() || entry.size() != 3 || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets"))
      throw DataError("container: entry '" + name + "' must have exactly dtype, shape, data_offsets");
    const auto& jd = entry.at("dtype");
    if (!jd.is_string()) throw DataError("container: dtype of '" + name + "' must be a string");

    TensorRecord r;
    r.name = name;
    r.dtype = parse_dtype(jd.get<std::string>());
    const auto& js = entry.at("shape");
    if (!js.is_array()) throw DataError("container: shape of '" + name + "' must be an array");
    std::uint64_t numel = 1;
    for (const auto& d : js) {
      r.shape.push_back(json_u64(d, "shape of '" + name + "'"));
      if (!checked_mul(numel, r.shape.back(), numel)) throw DataError("container: shape of '" + name + "' overflows");
    }
    const auto& jo = entry.at("data_offsets");
    if (!jo.is_array() || jo.size() != 2) throw DataError("container: data_offsets of '" + name + "' must be [begin, end]");
    const std::uint64_t begin = json_u64(jo[0], "data_offsets of '" + name + "'");
    const std::uint64_t end = json_u64(jo[1], "data_offsets of '" + name + "'");
    if (begin > end || end > payload.size())
      throw DataError("container: data range of '" + name + "' is out of bounds");
    std::uint64_t nbytes = 0;
    if (!checked_mul(numel, dtype_size(r.dtype), nbytes) || nbytes != end - begin)
      throw DataError("container: byte length of '" + name + "' does not match shape and dtype");
    r.data.assign(payload.begin() + static_cast<std::ptrdiff_t>(begin),
                  payload.begin() + static_cast<std::ptrdiff_t>(end));
    ranges.emplace_back(begin, end);
    records.push_back(std::move(r));
  }

  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) throw DataError("container: overlapping data ranges");
  }
  return records;
}

std::vector<std::uint8_t> serialize_container(std::span<const TensorRecord> records) {
  std::vector<const TensorRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->name < b->name; });

  json meta = json::object();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& r = *sorted[i];
    if (i > 0 && sorted[i - 1]->name == r.name) throw DataError("container: duplicate tensor name '" + r.name + "'");
    if (r.name == kMetadataKey) throw DataError("container: reserved tensor name '" + r.name + "'");
    if (r.numel() * dtype_size(r.dtype) != r.data.size())
      throw DataError("container: tensor '" + r.name + "' buffer does not match its shape");
    meta[r.name] = {{"dtype", dtype_tag(r.dtype)}, {"shape", r.shape}, {"data_offsets", {offset, offset + r.data.size()}}};
    offset += r.data.size();
  }
  const std::string header = meta.dump();  // keys iterate in sorted order

  std::vector<std::uint8_t> out(8 + header.size() + offset);
  const std::uint64_t n = header.size();
  std::memcpy(out.data(), &n, 8);
  std::memcpy(out.data() + 8, header.data(), header.size());
  auto* p = out.data() + 8 + header.size();
  for (const auto* r : sorted) {
    if (!r->data.empty()) std::memcpy(p, r->data.data(), r->data.size());
    p += r->data.size();
  }
  return out;
}

std::vector<TensorRecord> load_container(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  try {
    return parse_container(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_container(std::span<const TensorRecord> records, const std::filesystem::path& path) {
  write_binary_file(path, serialize_container(records));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_binary_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  return std::string(bytes.begin(), bytes.end());
}

// ---------------------------------------------------------------------------

std::string_view role_tag(SnapshotRole role) noexcept {
  switch (role) {
    case SnapshotRole::Base: return "base";
    case SnapshotRole::Aligned: return "aligned";
    case SnapshotRole::Finetuned: return "finetuned";
  }
  return "base";
}

SnapshotRole parse_role(std::string_view tag) {
  if (tag == "base") return SnapshotRole::Base;
  if (tag == "aligned") return SnapshotRole::Aligned;
  if (tag == "finetuned") return SnapshotRole::Finetuned;
  throw DataError("unknown snapshot role '" + std::string(tag) + "'");
}

const TensorRecord& ModelSnapshot::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("snapshot has no tensor '" + name + "'");
  return it->second;
}

void ModelSnapshot::set(TensorRecord record) {
  auto name = record.name;
  tensors.insert_or_assign(std::move(name), std::move(record));
}

std::vector<std::string> ModelSnapshot::missing_tensors() const {
  std::vector<std::string> missing;
  for (const auto& spec : required_tensors(arch)) {
    auto it = tensors.find(spec.name);
    if (it == tensors.end() || it->second.shape != spec.shape) missing.push_back(spec.name);
  }
  return missing;
}

std::vector<TensorRecord> ModelSnapshot::records() const {
  std::vector<TensorRecord> out;
  out.reserve(tensors.size());
  for (const auto& [_, r] : tensors) out.push_back(r);
  return out;
}

void save_snapshot(const ModelSnapshot& snapshot, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_container(snapshot.records(), dir / "tensors.bin");
  const json manifest = {{"role", role_tag(snapshot.role)},
                         {"arch", snapshot.arch},
                         {"tensor_count", snapshot.tensors.size()}};
  write_text_file(dir / "snapshot.json", manifest.dump(2) + "\n");
}

ModelSnapshot load_snapshot(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text_file(dir / "snapshot.json"));
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/snapshot.json: " + e.what());
  }
  ModelSnapshot s;
  try {
    s.role = parse_role(manifest.at("role").get<std::string>());
    s.arch = manifest.at("arch").get<TransformerConfig>();
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/snapshot.json: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(dir.string() + "/snapshot.json: " + e.what());
  }
  for (auto& r : load_container(dir / "tensors.bin")) s.set(std::move(r));
  if (manifest.contains("tensor_count") && manifest["tensor_count"].get<std::size_t>() != s.tensors.size())
    throw DataError(dir.string() + ": tensor_count does not match container");
  if (const auto missing = s.missing_tensors(); !missing.empty())
    throw DataError(dir.string() + ": snapshot incomplete, first missing tensor '" + missing.front() + "'");
  return s;
}

TensorRecord diff_snapshot(const ModelSnapshot& align, const ModelSnapshot& base, const std::string& name) {
  const auto& a = align.at(name);
  const auto& b = base.at(name);
  if (a.shape != b.shape) throw DataError("diff: shape mismatch for '" + name + "'");
  const Eigen::VectorXd d = a.values() - b.values();
  return TensorRecord::from_values(name, a.shape, std::span<const double>(d.data(), static_cast<std::size_t>(d.size())),
                                   DType::F64);
}

void check_same_geometry(const ModelSnapshot& a, const ModelSnapshot& b) {
  for (const auto& [name, r] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it != b.tensors.end() && it->second.shape != r.shape)
      throw DataError("snapshots disagree on the shape of '" + name + "'");
  }
}

// ---------------------------------------------------------------------------

std::string LoraEntry::key() const { return "layers." + std::to_string(layer) + "." + module; }

bool LoraEntry::operator==(const LoraEntry& o) const {
  return layer == o.layer && module == o.module && alpha == o.alpha && A.rows() == o.A.rows() &&
         A.cols() == o.A.cols() && B.rows() == o.B.rows() && B.cols() == o.B.cols() && A == o.A && B == o.B;
}

void LoraAdapter::validate(const TransformerConfig* arch) const {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.A.rows() < 1) throw DataError("adapter " + e.key() + ": rank must be >= 1");
    if (e.B.cols() != e.A.rows()) throw DataError("adapter " + e.key() + ": A and B ranks disagree");
    if (i > 0) {
      const auto& p = entries[i - 1];
      if (std::tie(p.layer, p.module) >= std::tie(e.layer, e.module))
        throw DataError("adapter entries must be unique and sorted by (layer, module)");
    }
    if (arch) {
      if (e.layer < 0 || e.layer >= arch->n_layers) throw DataError("adapter " + e.key() + ": layer out of range");
      if (is_neuron_row_module(e.module) && e.B.rows() != arch->d_ff)
        throw DataError("adapter " + e.key() + ": B rows must equal d_ff");
    }
  }
}

const LoraEntry* LoraAdapter::find(int layer, std::string_view module) const {
  for (const auto& e : entries)
    if (e.layer == layer && e.module == module) return &e;
  return nullptr;
}

LoraEntry* LoraAdapter::find(int layer, std::string_view module) {
  return const_cast<LoraEntry*>(std::as_const(*this).find(layer, module));
}

std::uint64_t LoraAdapter::parameter_count() const {
  std::uint64_t n = 0;
  for (const auto& e : entries) n += static_cast<std::uint64_t>(e.A.size() + e.B.size());
  return n;
}

std::vector<TensorRecord> LoraAdapter::records() const {
  std::vector<TensorRecord> out;
  for (const auto& e : entries) {
    out.push_back(TensorRecord::from_matrix(layer_tensor_name(e.layer, e.module, "A"), e.A, dtype));
    out.push_back(TensorRecord::from_matrix(layer_tensor_name(e.layer, e.module, "B"), e.B, dtype));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return out;
}

std::uint64_t LoraAdapter::content_hash() const { return fnv1a64(serialize_container(records())); }

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& dir) {
  adapter.validate();
  std::filesystem::create_directories(dir);
  save_container(adapter.records(), dir / "adapter.bin");
  json entries = json::array();
  for (const auto& e : adapter.entries)
    entries.push_back({{"layer", e.layer}, {"module", e.module}, {"alpha", e.alpha}, {"rank", e.rank()}});
  const json manifest = {{"dtype", dtype_tag(adapter.dtype)}, {"entries", entries}};
  write_text_file(dir / "adapter.json", manifest.dump(2) + "\n");
}

LoraAdapter load_adapter(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text_file(dir / "adapter.json"));
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/adapter.json: " + e.what());
  }
  std::map<std::string, TensorRecord> tensors;
  for (auto& r : load_container(dir / "adapter.bin")) {
    auto name = r.name;
    tensors.emplace(std::move(name), std::move(r));
  }
  LoraAdapter adapter;
  try {
    adapter.dtype = parse_dtype(manifest.at("dtype").get<std::string>());
    for (const auto& je : manifest.at("entries")) {
      LoraEntry e;
      e.layer = je.at("layer").get<int>();
      e.module = je.at("module").get<std::string>();
      e.alpha = je.at("alpha").get<double>();
      auto find = [&](const char* suffix) -> const TensorRecord& {
        auto it = tensors.find(layer_tensor_name(e.layer, e.module, suffix));
        if (it == tensors.end()) throw DataError(dir.string() + ": missing tensor for " + e.key() + "." + suffix);
        if (it->second.shape.size() != 2) throw DataError(dir.string() + ": " + it->first + " must be 2-D");
        return it->second;
      };
      e.A = find("A").matrix();
      e.B = find("B").matrix();
      if (e.rank() != je.at("rank").get<Eigen::Index>())
        throw DataError(dir.string() + ": rank in manifest disagrees with " + e.key() + ".A");
      adapter.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw DataError(dir.string() + "/adapter.json: " + e.what());
  }
  if (tensors.size() != 2 * adapter.entries.size())
    throw DataError(dir.string() + ": adapter container holds tensors not listed in adapter.json");
  adapter.validate();
  return adapter;
}

ModelSnapshot merge_adapter(const ModelSnapshot& snapshot, const LoraAdapter& adapter) {
  adapter.validate(&snapshot.arch);
  ModelSnapshot out = snapshot;
  out.role = SnapshotRole::Finetuned;
  for (const auto& e : adapter.entries) {
    const auto name = layer_tensor_name(e.layer, e.module);
    const auto& w = snapshot.at(name);
    if (w.shape.size() != 2 || e.B.rows() != static_cast<Eigen::Index>(w.shape[0]) ||
        e.A.cols() != static_cast<Eigen::Index>(w.shape[1]))
      throw DataError("adapter " + e.key() + " does not match the weight shape");
    const Eigen::MatrixXd merged = w.matrix() + e.scale() * (e.B * e.A);
    out.set(TensorRecord::from_matrix(name, merged, w.dtype));
  }
  return out;
}

}  // namespace fgsn
