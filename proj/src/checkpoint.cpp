#include "qpm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "qpm/config.hpp"
#include "qpm/error.hpp"

namespace qpm {

static_assert(std::endian::native == std::endian::little, "checkpoints assume little endian");

namespace {

constexpr char kMagic[8] = {'Q', 'P', 'M', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T take(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError(what + ": truncated");
  return v;
}

std::string take_bytes(std::istream& is, std::uint64_t n, const std::string& what) {
  if (n > (std::uint64_t{1} << 32)) throw FormatError(what + ": implausible length");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError(what + ": truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const QpmModel& model,
                     const nlohmann::json& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  const std::string header = nlohmann::json{{"model", to_json(model.config())}, {"meta", meta}}.dump();
  os.write(kMagic, sizeof kMagic);
  put(os, kVersion);
  put(os, static_cast<std::uint64_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto tensors = model.store().snapshot();
  put(os, static_cast<std::uint64_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put(os, static_cast<std::int32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw FormatError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string what = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + what);
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError(what + " is not a checkpoint");
  }
  const auto version = take<std::uint32_t>(is, what);
  if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::string header = take_bytes(is, take<std::uint64_t>(is, what), what);
  Checkpoint ckpt;
  try {
    const auto j = nlohmann::json::parse(header);
    ckpt.model = model_config_from_json(j.at("model"));
    ckpt.meta = j.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(what + ": bad model config: " + e.what());
  }
  const auto count = take<std::uint64_t>(is, what);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = take_bytes(is, take<std::uint32_t>(is, what), what);
    const auto rank = take<std::uint32_t>(is, what);
    if (rank > 8) throw FormatError(what + ": tensor " + name + " has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
      d = take<std::int32_t>(is, what);
      if (d < 0) throw FormatError(what + ": negative dimension in " + name);
    }
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw FormatError(what + ": truncated tensor " + name);
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

std::unique_ptr<QpmModel> load_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<QpmModel>(ckpt.model);
  const std::size_t expected = model->store().parameters().size() + model->store().buffers().size();
  const std::size_t loaded = model->store().load(ckpt.tensors);
  if (loaded != expected) {
    throw FormatError("checkpoint holds " + std::to_string(loaded) + " of the model's " +
                      std::to_string(expected) + " tensors");
  }
  return model;
}

std::unique_ptr<QpmModel> load_model(const std::filesystem::path& path) {
  return load_model(read_checkpoint(path));
}

std::size_t load_pretrained_backbone(QpmModel& model, const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  const std::size_t n = model.store().load(ckpt.tensors, "backbone.");
  if (n == 0) throw FormatError(path.string() + " contains no backbone tensors");
  return n;
}

}  // namespace qpm
