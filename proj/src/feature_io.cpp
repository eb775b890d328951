#include "emosup/feature_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "emosup/errors.hpp"
#include "json.hpp"

namespace emosup {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'C', 'M', 'F'};

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) |
           (v >> 24);
  }
  return v;
}

void put_u32(std::string* out, std::uint32_t v) {
  v = to_little(v);
  char b[4];
  std::memcpy(b, &v, 4);
  out->append(b, 4);
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return to_little(v);
}

}  // namespace

void write_text_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
  if (!out) throw LoadError("write failed for " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_feature_file(const fs::path& path, std::span<const Vector> vectors) {
  require(!vectors.empty(), "write_feature_file: no vectors");
  const auto dim = vectors.front().size();
  require(dim > 0, "write_feature_file: zero dimension");
  std::string buf(kMagic, 4);
  put_u32(&buf, static_cast<std::uint32_t>(dim));
  for (const auto& v : vectors) {
    require(v.size() == dim, "write_feature_file: non-uniform dimensions");
    for (Eigen::Index i = 0; i < dim; ++i) {
      const float f = static_cast<float>(v(i));
      put_u32(&buf, std::bit_cast<std::uint32_t>(f));
    }
  }
  write_text_file(path, buf);
}

std::vector<Vector> read_feature_file(const fs::path& path) {
  const std::string buf = read_text_file(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw LoadError(path.string() + ": not a PCMF feature file");
  }
  const std::uint32_t dim = get_u32(buf.data() + 4);
  const std::size_t payload = buf.size() - 8;
  if (dim == 0 || payload == 0 || payload % (4ull * dim) != 0) {
    throw LoadError(path.string() + ": payload size inconsistent with dim " +
                    std::to_string(dim));
  }
  const std::size_t n = payload / (4ull * dim);
  std::vector<Vector> out(n, Vector(dim));
  const char* p = buf.data() + 8;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::uint32_t i = 0; i < dim; ++i, p += 4) {
      out[k](i) = static_cast<double>(std::bit_cast<float>(get_u32(p)));
    }
  }
  return out;
}

FeatureManifest read_feature_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  FeatureManifest m;
  try {
    m.dim = j.at("dim").get<int>();
    for (const auto& s : j.at("samples")) {
      m.samples.push_back({s.at("id").get<std::string>(),
                           s.at("identity").get<std::string>(),
                           s.at("emotion").get<std::string>(),
                           s.at("feature_file").get<std::string>()});
    }
    if (j.contains("text_embeddings")) {
      for (const auto& [k, v] : j.at("text_embeddings").items()) {
        m.text_embeddings[k] = v.get<std::string>();
      }
    }
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": malformed feature manifest: " + e.what());
  }
  if (m.dim <= 0) throw LoadError(path.string() + ": dim must be positive");
  return m;
}

void write_feature_manifest(const fs::path& path, const FeatureManifest& m) {
  json j;
  j["dim"] = m.dim;
  j["samples"] = json::array();
  for (const auto& s : m.samples) {
    j["samples"].push_back({{"id", s.id},
                            {"identity", s.identity},
                            {"emotion", s.emotion},
                            {"feature_file", s.feature_file}});
  }
  j["text_embeddings"] = json::object();
  for (const auto& [k, v] : m.text_embeddings) j["text_embeddings"][k] = v;
  write_text_file(path, j.dump(2) + "\n");
}

std::vector<Vector> load_feature_set(const fs::path& path) {
  if (path.extension() != ".json") return read_feature_file(path);
  const FeatureManifest m = read_feature_manifest(path);
  std::vector<Vector> out;
  for (const auto& s : m.samples) {
    auto vs = read_feature_file(path.parent_path() / s.feature_file);
    for (auto& v : vs) {
      if (v.size() != m.dim) {
        throw LoadError(s.feature_file + ": dim " + std::to_string(v.size()) +
                        " != manifest dim " + std::to_string(m.dim));
      }
      out.push_back(std::move(v));
    }
  }
  return out;
}

}  // namespace emosup
