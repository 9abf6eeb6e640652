#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "g3dk/tensor.hpp"

namespace g3dk {

/// Named parameter collection with stable (insertion) order, so that
/// gradient reduction and checkpoint layout are deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  Tensor& at(const std::string& name);

  std::size_t count() const { return items_.size(); }
  std::int64_t total_scalars() const;

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Checkpoint file: magic "G3DK", u32 version, then per tensor a record of
/// u32 name length, name bytes, u32 rank, u64 extents, and the payload as
/// little-endian 64-bit floats.
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

}  // namespace g3dk
