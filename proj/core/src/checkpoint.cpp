#include "g3dk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace g3dk {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");

constexpr char kMagic[4] = {'G', '3', 'D', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("checkpoint truncated while reading " + what);
  }
  return v;
}

}  // namespace

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second].second;
}

const Tensor* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second].second;
}

Tensor& ParamStore::at(const std::string& name) {
  Tensor* t = find(name);
  if (!t) throw std::out_of_range("no parameter named " + name);
  return *t;
}

std::int64_t ParamStore::total_scalars() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

void save_checkpoint(const std::string& path, const ParamStore& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  for (const auto& [name, t] : params.items()) {
    write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape) write_pod(os, static_cast<std::uint64_t>(e));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("write failed for checkpoint: " + path);
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("bad checkpoint magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  ParamStore store;
  while (true) {
    std::uint32_t name_len = 0;
    if (!is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len))) break;  // clean EOF
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint truncated in name");
    const auto rank = read_pod<std::uint32_t>(is, "rank of " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(static_cast<std::int64_t>(read_pod<std::uint64_t>(is, "extent of " + name)));
    }
    Tensor t{shape};
    if (!is.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)))) {
      throw std::runtime_error("checkpoint truncated in payload of " + name);
    }
    store.add(name, std::move(t));
  }
  return store;
}

}  // namespace g3dk
