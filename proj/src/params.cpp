#include "fsdet/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "fsdet/image.hpp"

namespace fsdet {

ag::Var ParamStore::add(std::string name, Tensor init, bool frozen) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  ag::Var v(std::move(init), !frozen);
  params_.push_back({std::move(name), v, frozen});
  return v;
}

ag::Var ParamStore::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.var;
  throw std::out_of_range("unknown parameter " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return true;
  return false;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().size();
  return n;
}

Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng, double gain) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / std::max(fan_in, 1)));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

namespace {

constexpr char kMagic[8] = {'F', 'S', 'D', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("truncated checkpoint");
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string take_string(std::istream& in) {
  const auto n = take<std::uint64_t>(in);
  if (n > (1ull << 32)) throw DataError("corrupt checkpoint string");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, Checkpoint::kVersion);
  put<std::uint64_t>(out, ckpt.iteration);
  put_string(out, ckpt.metadata);
  put<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put_string(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  const auto version = take<std::uint32_t>(in);
  if (version != Checkpoint::kVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.iteration = take<std::uint64_t>(in);
  ckpt.metadata = take_string(in);
  const auto count = take<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = take_string(in);
    const auto rank = take<std::uint32_t>(in);
    if (rank > 8) throw DataError("corrupt checkpoint tensor rank");
    std::vector<int> shape(rank);
    for (auto& d : shape) d = take<std::int32_t>(in);
    Tensor t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw DataError("truncated checkpoint tensor " + name);
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

Checkpoint snapshot(const ParamStore& store, std::uint64_t iteration, std::string metadata) {
  Checkpoint ckpt;
  ckpt.iteration = iteration;
  ckpt.metadata = std::move(metadata);
  for (const auto& p : store.entries()) ckpt.tensors.emplace_back(p.name, p.var.value());
  return ckpt;
}

void restore(ParamStore& store, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
  for (auto& p : store.entries()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint lacks parameter " + p.name);
    if (!it->second->same_shape(p.var.value())) {
      throw DataError("checkpoint shape mismatch for " + p.name + ": " + it->second->shape_string() +
                      " vs " + p.var.value().shape_string());
    }
    p.var.mutable_value() = *it->second;
  }
}

}  // namespace fsdet
