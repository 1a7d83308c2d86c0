#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fsdet/autograd.hpp"

namespace fsdet {

using Rng = std::mt19937_64;

struct Parameter {
  std::string name;
  ag::Var var;
  bool frozen = false;
};

/// Named, ordered collection of trainable tensors. Frozen parameters never
/// record gradients.
class ParamStore {
 public:
  ag::Var add(std::string name, Tensor init, bool frozen = false);
  ag::Var get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter>& entries() noexcept { return params_; }
  const std::vector<Parameter>& entries() const noexcept { return params_; }

  void zero_grad();
  std::size_t parameter_count() const;

 private:
  std::vector<Parameter> params_;
};

/// He-normal initialiser for a weight tensor with the given fan-in.
Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng, double gain = 1.0);

/// Versioned binary checkpoint: named tensors with shapes plus an iteration
/// counter and a free-form metadata string.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::uint64_t iteration = 0;
  std::string metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint snapshot(const ParamStore& store, std::uint64_t iteration, std::string metadata);
/// Copies tensors into same-named parameters; shapes must agree and every
/// parameter must be present.
void restore(ParamStore& store, const Checkpoint& ckpt);

}  // namespace fsdet
