#include "miasrec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "miasrec/errors.hpp"

namespace miasrec {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'I', 'A', 'S', 'R', 'C', 'K', 'P'};

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw DataError("truncated archive reading " + what);
  return value;
}

}  // namespace

const TensorRecord* TensorArchive::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) header["tensors"].push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  const auto text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write archive " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kArchiveFormatVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) {
      out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    }
    if (!out) throw DataError("failed writing archive " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open archive " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + " is not a model archive");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kArchiveFormatVersion) {
    throw DataError("unsupported archive format version " + std::to_string(version));
  }
  const auto length = read_pod<std::uint64_t>(in, "header length");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw DataError("truncated archive header");

  TensorArchive archive;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    archive.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      TensorRecord t;
      t.name = entry.at("name").get<std::string>();
      t.rows = entry.at("rows").get<Eigen::Index>();
      t.cols = entry.at("cols").get<Eigen::Index>();
      if (t.rows < 0 || t.cols < 0) throw DataError("negative tensor shape for " + t.name);
      archive.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed archive header: ") + e.what());
  }
  for (auto& t : archive.tensors) {
    t.values.resize(static_cast<std::size_t>(t.rows * t.cols));
    if (!in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(double)))) {
      throw DataError("truncated archive payload in tensor " + t.name);
    }
  }
  return archive;
}

template <typename Scalar>
void store_parameters(TensorArchive& archive, const std::string& prefix, const ModelParameters<Scalar>& params) {
  params.for_each_tensor([&](const std::string& name, const auto& t) {
    TensorRecord record{prefix + name, t.rows(), t.cols(), {}};
    record.values.resize(static_cast<std::size_t>(t.size()));
    for (Eigen::Index i = 0; i < t.size(); ++i) record.values[static_cast<std::size_t>(i)] = static_cast<double>(t.data()[i]);
    archive.tensors.push_back(std::move(record));
  });
}

template <typename Scalar>
ModelParameters<Scalar> restore_parameters(const TensorArchive& archive, const std::string& prefix,
                                           const ModelConfig& config) {
  auto params = ModelParameters<Scalar>::zeros(config);
  params.for_each_tensor([&](const std::string& name, auto& t) {
    const auto* record = archive.find(prefix + name);
    if (!record) throw DataError("archive is missing tensor " + prefix + name);
    if (record->rows != t.rows() || record->cols != t.cols()) {
      throw DataError("tensor " + prefix + name + " has shape " + std::to_string(record->rows) + "x" +
                      std::to_string(record->cols) + ", config requires " + std::to_string(t.rows()) + "x" +
                      std::to_string(t.cols()));
    }
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(record->values[static_cast<std::size_t>(i)]);
  });
  return params;
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParameters<Scalar>& params,
                     const nlohmann::json& echo) {
  TensorArchive archive;
  archive.meta = {{"kind", "miasrec-checkpoint"}, {"model", config.to_json()}, {"echo", echo}};
  store_parameters(archive, "", params);
  archive.save(path);
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const auto archive = TensorArchive::load(path);
  if (archive.meta.value("kind", std::string()) != "miasrec-checkpoint") {
    throw DataError(path.string() + " is not a model checkpoint");
  }
  Checkpoint<Scalar> checkpoint;
  checkpoint.config = ModelConfig::from_json(archive.meta.at("model"));
  checkpoint.config.validate();
  checkpoint.params = restore_parameters<Scalar>(archive, "", checkpoint.config);
  checkpoint.echo = archive.meta.value("echo", nlohmann::json::object());
  return checkpoint;
}

#define MIASREC_INSTANTIATE(S)                                                                                     \
  template void store_parameters<S>(TensorArchive&, const std::string&, const ModelParameters<S>&);               \
  template ModelParameters<S> restore_parameters<S>(const TensorArchive&, const std::string&, const ModelConfig&); \
  template void save_checkpoint<S>(const std::filesystem::path&, const ModelConfig&, const ModelParameters<S>&,    \
                                   const nlohmann::json&);                                                         \
  template Checkpoint<S> load_checkpoint<S>(const std::filesystem::path&);

MIASREC_INSTANTIATE(float)
MIASREC_INSTANTIATE(double)

#undef MIASREC_INSTANTIATE

}  // namespace miasrec
