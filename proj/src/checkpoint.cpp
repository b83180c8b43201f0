#include "cvqa/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>

#include "cvqa/errors.hpp"

namespace cvqa::ad {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'V', 'Q', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw IntegrityError("checkpoint " + path.string() + ": truncated header");
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter> params,
                     const nlohmann::json& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  std::set<std::string> names;
  std::size_t offset = 0;
  for (const Parameter& p : params) {
    if (!names.insert(p.name).second) throw UsageError("save_checkpoint: duplicate parameter name " + p.name);
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}, {"count", p.value.size()}});
    offset += p.value.size();
  }
  const std::string manifest = nlohmann::json{{"meta", meta}, {"tensors", tensors}}.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IntegrityError("cannot open " + path.string() + " for writing");
  os.write(kMagic.data(), kMagic.size());
  write_pod<std::uint32_t>(os, kVersion);
  write_pod<std::uint64_t>(os, manifest.size());
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  std::vector<float> buf;
  for (const Parameter& p : params) {
    buf.assign(p.value.values().begin(), p.value.values().end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IntegrityError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IntegrityError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IntegrityError("checkpoint " + path.string() + ": bad magic");
  }
  if (const auto version = read_pod<std::uint32_t>(is, path); version != kVersion) {
    throw IntegrityError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto manifest_len = read_pod<std::uint64_t>(is, path);
  std::string manifest(manifest_len, '\0');
  if (!is.read(manifest.data(), static_cast<std::streamsize>(manifest_len))) {
    throw IntegrityError("checkpoint " + path.string() + ": truncated manifest");
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("checkpoint " + path.string() + ": manifest is not JSON: " + e.what());
  }

  std::vector<float> payload;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(float) != 0) throw IntegrityError("checkpoint " + path.string() + ": ragged payload");
    payload.resize(rest.size() / sizeof(float));
    std::memcpy(payload.data(), rest.data(), rest.size());
  }

  Checkpoint ck;
  ck.meta = doc.value("meta", nlohmann::json::object());
  for (const auto& t : doc.at("tensors")) {
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (count != numel(shape) || offset + count > payload.size()) {
      throw IntegrityError("checkpoint " + path.string() + ": tensor " + t.at("name").get<std::string>() +
                           " does not fit the payload");
    }
    std::vector<double> values(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                               payload.begin() + static_cast<std::ptrdiff_t>(offset + count));
    ck.params.push_back(Parameter{t.at("name").get<std::string>(), Array(shape, std::move(values)), true});
  }
  return ck;
}

}  // namespace cvqa::ad
