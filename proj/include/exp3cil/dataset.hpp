#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "exp3cil/error.hpp"

namespace exp3cil {

struct Sample {
  std::vector<double> x;
  int label = 0;

  bool operator==(const Sample&) const = default;
};

struct LabeledDataset {
  std::size_t dim = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  bool operator==(const LabeledDataset&) const = default;

  void add(Sample s) {
    if (s.x.size() != dim) {
      throw Error(ErrorCode::kShape, "sample has " + std::to_string(s.x.size()) +
                                         " features, dataset expects " + std::to_string(dim));
    }
    if (s.label < 0) throw Error(ErrorCode::kLabel, "negative class id");
    samples.push_back(std::move(s));
  }

  /// Ascending distinct class ids.
  std::vector<int> classes() const {
    std::vector<int> out;
    for (const auto& s : samples) out.push_back(s.label);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  std::map<int, std::size_t> class_counts() const {
    std::map<int, std::size_t> counts;
    for (const auto& s : samples) ++counts[s.label];
    return counts;
  }

  std::vector<Sample> of_class(int label) const {
    std::vector<Sample> out;
    for (const auto& s : samples) {
      if (s.label == label) out.push_back(s);
    }
    return out;
  }
};

inline LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.dim != b.dim) throw Error(ErrorCode::kShape, "cannot concatenate datasets of different dim");
  LabeledDataset out = a;
  out.samples.insert(out.samples.end(), b.samples.begin(), b.samples.end());
  return out;
}

}  // namespace exp3cil
