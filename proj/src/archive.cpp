#include "fsit/archive.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "fsit/errors.hpp"

namespace fsit {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'I', 'T', 'A', 'R', 'C', '1'};

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& in, const std::filesystem::path& path) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("truncated archive " + path.string());
  return v;
}

std::string get_string(std::istream& in, std::uint64_t n, const std::filesystem::path& path) {
  if (n > (1ull << 32)) throw DataError("corrupt archive " + path.string());
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("truncated archive " + path.string());
  return s;
}

}  // namespace

const Tensor<float>& TensorArchive::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("archive has no tensor '" + name + "'");
  return it->second;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const std::filesystem::path tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(kMagic, sizeof kMagic);
    const std::string meta = archive.metadata.dump();
    put<std::uint64_t>(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint64_t>(out, archive.tensors.size());
    for (const auto& [name, t] : archive.tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) put<std::int32_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move archive into place at " + path.string() + ": " + ec.message());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open archive " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw DataError("not an archive: " + path.string());
  TensorArchive a;
  try {
    a.metadata = nlohmann::json::parse(get_string(in, get<std::uint64_t>(in, path), path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt archive metadata in " + path.string() + ": " + e.what());
  }
  const auto count = get<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = get_string(in, get<std::uint32_t>(in, path), path);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw DataError("corrupt archive " + path.string());
    Shape shape(rank);
    for (auto& d : shape) {
      d = get<std::int32_t>(in, path);
      if (d < 0) throw DataError("corrupt archive " + path.string());
    }
    Tensor<float> t(shape);
    if (!in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float))))
      throw DataError("truncated archive " + path.string());
    a.tensors.emplace(std::move(name), std::move(t));
  }
  return a;
}

}  // namespace fsit
