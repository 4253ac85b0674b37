#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "seqvc/tensor.hpp"

namespace seqvc {

// Named, path-addressable trainable tensors ("encoder.layer0.mha.wq").
// Entries are shared handles: copying a ParamTree aliases storage, clone()
// copies values.
class ParamTree {
 public:
  // Registers a new parameter; duplicate paths are a ContractError.
  Tensor& add(const std::string& path, Tensor value);

  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  Tensor& at(const std::string& path);
  const Tensor& at(const std::string& path) const;

  const std::map<std::string, Tensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;

  std::vector<std::string> paths_with_prefix(std::string_view prefix) const;

  ParamTree clone() const;
  void zero_grad();
  void set_requires_grad(bool flag);

  // Copies values (not handles) from `source` for every path under `prefix`.
  // Missing paths or shape mismatches raise ContractError naming the path.
  void copy_from(const ParamTree& source, std::string_view prefix);

 private:
  std::map<std::string, Tensor> entries_;
};

bool has_prefix(std::string_view path, std::string_view prefix);

// True when every tensor under `prefix` holds bit-identical values in both trees.
bool bit_equal(const ParamTree& a, const ParamTree& b, std::string_view prefix = "");
// Largest absolute elementwise difference over paths under `prefix`.
double max_abs_difference(const ParamTree& a, const ParamTree& b, std::string_view prefix = "");

}  // namespace seqvc
