#include "seqvc/param_tree.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "seqvc/errors.hpp"

namespace seqvc {

bool has_prefix(std::string_view path, std::string_view prefix) {
  return path.substr(0, prefix.size()) == prefix;
}

Tensor& ParamTree::add(const std::string& path, Tensor value) {
  if (path.empty()) throw ContractError("ParamTree::add: empty path");
  auto [it, inserted] = entries_.emplace(path, std::move(value));
  if (!inserted) throw ContractError("ParamTree::add: duplicate path " + path);
  return it->second;
}

Tensor& ParamTree::at(const std::string& path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ContractError("ParamTree: no parameter at " + path);
  return it->second;
}

const Tensor& ParamTree::at(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ContractError("ParamTree: no parameter at " + path);
  return it->second;
}

std::size_t ParamTree::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

std::vector<std::string> ParamTree::paths_with_prefix(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [path, _] : entries_) {
    if (has_prefix(path, prefix)) out.push_back(path);
  }
  return out;
}

ParamTree ParamTree::clone() const {
  ParamTree copy;
  for (const auto& [path, t] : entries_) copy.entries_.emplace(path, t.clone());
  return copy;
}

void ParamTree::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

void ParamTree::set_requires_grad(bool flag) {
  for (auto& [_, t] : entries_) t.set_requires_grad(flag);
}

void ParamTree::copy_from(const ParamTree& source, std::string_view prefix) {
  for (auto& [path, t] : entries_) {
    if (!has_prefix(path, prefix)) continue;
    auto it = source.entries_.find(path);
    if (it == source.entries_.end()) {
      throw ContractError("parameter transfer: source has no parameter at " + path);
    }
    if (it->second.shape() != t.shape()) {
      throw ContractError("parameter transfer: shape mismatch at " + path + ": source " +
                          shape_str(it->second.shape()) + " vs target " + shape_str(t.shape()));
    }
  }
  for (auto& [path, t] : entries_) {
    if (!has_prefix(path, prefix)) continue;
    const auto src = source.entries_.at(path).data();
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
}

bool bit_equal(const ParamTree& a, const ParamTree& b, std::string_view prefix) {
  const auto pa = a.paths_with_prefix(prefix);
  const auto pb = b.paths_with_prefix(prefix);
  if (pa != pb) return false;
  for (const auto& path : pa) {
    const Tensor& x = a.at(path);
    const Tensor& y = b.at(path);
    if (x.shape() != y.shape()) return false;
    if (std::memcmp(x.data().data(), y.data().data(), x.numel() * sizeof(double)) != 0) return false;
  }
  return true;
}

double max_abs_difference(const ParamTree& a, const ParamTree& b, std::string_view prefix) {
  double worst = 0.0;
  for (const auto& path : a.paths_with_prefix(prefix)) {
    const auto x = a.at(path).data();
    const auto y = b.at(path).data();
    if (x.size() != y.size()) throw ContractError("max_abs_difference: shape mismatch at " + path);
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::fabs(x[i] - y[i]));
  }
  return worst;
}

}  // namespace seqvc
