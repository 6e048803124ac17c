#include "hyperconv/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hyperconv/serialize.hpp"

namespace hconv {

namespace {

constexpr char kTensorMagic[4] = {'H', 'C', 'T', '1'};
constexpr char kSnapshotMagic[4] = {'H', 'C', 'T', 'S'};

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw FormatError("unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

template <typename T>
void write_tensor_impl(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 4);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(dtype_of<T>()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    for (std::int64_t i = 0; i < t.size(); ++i) put_le<Bits<T>>(os, std::bit_cast<Bits<T>>(t[i]));
  }
  if (!os) throw FormatError("write failed");
}

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  Tensor<T> t(std::move(shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)))) {
      throw FormatError("tensor payload is truncated");
    }
  } else {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<T>(get_le<Bits<T>>(is));
  }
  return t;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor<float>& t) { write_tensor_impl(os, t); }
void write_tensor(std::ostream& os, const Tensor<double>& t) { write_tensor_impl(os, t); }

AnyTensor read_any_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("missing tensor header");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  const auto dtype = get_le<std::uint32_t>(is);
  const auto rank = get_le<std::uint32_t>(is);
  if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape;
  std::uint64_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = get_le<std::uint64_t>(is);
    if (d > (1ULL << 40)) throw FormatError("implausible tensor extent");
    total *= d;
    if (total > (1ULL << 40)) throw FormatError("implausible tensor size");
    shape.push_back(static_cast<std::int64_t>(d));
  }
  if (dtype == static_cast<std::uint32_t>(DType::F32)) return read_payload<float>(is, std::move(shape));
  if (dtype == static_cast<std::uint32_t>(DType::F64)) return read_payload<double>(is, std::move(shape));
  throw FormatError("unknown dtype code " + std::to_string(dtype));
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  auto any = read_any_tensor(is);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError(std::string("tensor dtype is not ") + (sizeof(T) == 4 ? "f32" : "f64"));
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  write_file(path, os.str());
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::istringstream is(read_file(path), std::ios::binary);
  return read_tensor<T>(is);
}

AnyTensor load_any_tensor(const std::filesystem::path& path) {
  std::istringstream is(read_file(path), std::ios::binary);
  return read_any_tensor(is);
}

template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);
template void save_tensor<float>(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::filesystem::path&);
template Tensor<double> load_tensor<double>(const std::filesystem::path&);

// ---------------------------------------------------------------------------
// Snapshots

void save_snapshot(const std::filesystem::path& path, const Snapshot& s) {
  Json header;
  header["architecture"] = s.spec;
  Json names = Json::array();
  for (const auto& [name, t] : s.state) names.push_back(name);
  header["tensors"] = names;
  header["meta"] = Json::parse(s.meta_json);
  const std::string h = header.dump();
  std::ostringstream os(std::ios::binary);
  os.write(kSnapshotMagic, 4);
  put_le<std::uint64_t>(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, t] : s.state) write_tensor(os, t);
  write_file(path, os.str());
}

Snapshot load_snapshot(const std::filesystem::path& path) {
  std::istringstream is(read_file(path), std::ios::binary);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kSnapshotMagic, 4) != 0) throw FormatError(path.string() + " is not a snapshot");
  const auto len = get_le<std::uint64_t>(is);
  if (len > (1ULL << 30)) throw FormatError("implausible snapshot header length");
  std::string h(static_cast<std::size_t>(len), '\0');
  if (!is.read(h.data(), static_cast<std::streamsize>(len))) throw FormatError("snapshot header truncated");
  Snapshot s;
  Json header;
  try {
    header = Json::parse(h);
    s.spec = header.at("architecture").get<ArchitectureSpec>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("bad snapshot header: ") + e.what());
  }
  s.meta_json = header.value("meta", Json::object()).dump();
  for (const auto& name : header.at("tensors")) s.state.emplace_back(name.get<std::string>(), read_tensor<float>(is));
  return s;
}

Snapshot snapshot_of(const Model<float>& model, std::string meta_json) {
  return Snapshot{model.spec(), model.state(), std::move(meta_json)};
}

Model<float> model_from_snapshot(const Snapshot& s) {
  Model<float> m(s.spec, 0);
  m.load_state(s.state);
  m.set_mode(Mode::Eval);
  return m;
}

// ---------------------------------------------------------------------------
// Datasets

void save_dataset_split(const std::filesystem::path& dir, const std::string& split, const Dataset& d) {
  std::vector<std::int64_t> all(static_cast<std::size_t>(d.count()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
  save_tensor(dir / (split + "_images.hct"), d.images(all));
  save_tensor(dir / (split + "_targets.hct"), d.targets(all));
  if (d.mask) save_tensor(dir / "mask.hct", d.mask->mask);
}

Dataset load_dataset_split(const std::filesystem::path& dir, const std::string& split) {
  Json manifest;
  try {
    manifest = Json::parse(read_file(dir / "manifest.json"));
  } catch (const Json::exception& e) {
    throw FormatError("bad manifest in " + dir.string() + ": " + e.what());
  }
  Dataset d;
  d.task = parse_task(manifest.at("task").get<std::string>());
  d.size = manifest.at("size").get<int>();
  d.seed = manifest.at("seed").get<std::uint64_t>();
  const auto images = load_tensor<float>(dir / (split + "_images.hct"));
  const auto targets = load_tensor<float>(dir / (split + "_targets.hct"));
  if (images.rank() != 4 || targets.rank() != 4 || images.dim(0) != targets.dim(0)) {
    throw FormatError("split '" + split + "' has inconsistent image/target tensors");
  }
  const auto n = images.dim(0);
  const auto pi = images.size() / std::max<std::int64_t>(n, 1), pt = targets.size() / std::max<std::int64_t>(n, 1);
  for (std::int64_t i = 0; i < n; ++i) {
    Sample s;
    s.image = Tensor<float>(Shape{images.dim(1), images.dim(2), images.dim(3)},
                            std::vector<float>(images.ptr() + i * pi, images.ptr() + (i + 1) * pi));
    s.target = Tensor<float>(Shape{targets.dim(1), targets.dim(2), targets.dim(3)},
                             std::vector<float>(targets.ptr() + i * pt, targets.ptr() + (i + 1) * pt));
    d.samples.push_back(std::move(s));
  }
  if (d.task == TaskKind::Reconstruction) {
    MaskSpec m;
    m.mask = load_tensor<float>(dir / "mask.hct");
    m.h = static_cast<int>(m.mask.dim(0));
    m.w = static_cast<int>(m.mask.dim(1));
    const auto& mj = manifest.at("mask");
    m.acceleration = mj.at("acceleration").get<double>();
    m.seed = mj.at("seed").get<std::uint64_t>();
    d.mask = std::move(m);
  }
  return d;
}

}  // namespace hconv
