#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hyperconv/architectures.hpp"
#include "hyperconv/data.hpp"

namespace hconv {

// Single-tensor container: "HCT1", u32 dtype (0 = f32, 1 = f64), u32 rank,
// rank x i64 shape, row-major payload. All integers and floats little-endian.
enum class DType : std::uint32_t { F32 = 0, F64 = 1 };

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_tensor(std::ostream& os, const Tensor<float>& t);
void write_tensor(std::ostream& os, const Tensor<double>& t);
AnyTensor read_any_tensor(std::istream& is);
/// Reads a tensor of exactly dtype T; throws FormatError on a dtype mismatch.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);
AnyTensor load_any_tensor(const std::filesystem::path& path);

// Snapshot: "HCTS", u64 header length, JSON header (architecture spec, tensor
// names, free-form metadata), then one container record per tensor.
struct Snapshot {
  ArchitectureSpec spec;
  std::vector<std::pair<std::string, Tensor<float>>> state;
  std::string meta_json = "{}";
};

void save_snapshot(const std::filesystem::path& path, const Snapshot& s);
Snapshot load_snapshot(const std::filesystem::path& path);
Snapshot snapshot_of(const Model<float>& model, std::string meta_json = "{}");
/// Builds a model from the snapshot's spec and loads its state (eval mode).
Model<float> model_from_snapshot(const Snapshot& s);

// Dataset directory: manifest.json plus {split}_images.hct / {split}_targets.hct
// and mask.hct for reconstruction.
void save_dataset_split(const std::filesystem::path& dir, const std::string& split, const Dataset& d);
Dataset load_dataset_split(const std::filesystem::path& dir, const std::string& split);

/// Writes bytes to `path` via a temporary file and rename.
void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace hconv
