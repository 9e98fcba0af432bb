#pragma once

#include "fmfi/common.hpp"
#include "fmfi/pointcloud.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fmfi {

/// One radar window paired with the teacher's embedding of the matching
/// camera frame. Labels are present only in the labeled evaluation pool.
struct PairedSample {
  PointFrame frame;
  std::vector<double> teacher;
  std::optional<std::string> label;
  std::int64_t timestamp_ms = 0;

  friend bool operator==(const PairedSample&, const PairedSample&) = default;
};

using Dataset = std::vector<PairedSample>;

struct Split {
  Dataset validation;
  Dataset test;
};

/// Orders by timestamp (stable) and cuts once: the first `ratio` of the
/// timeline is validation, the remainder test. No randomness, so adjacent
/// frames never straddle the two sides except at the single cut.
inline Split split_by_time(const Dataset& data, double ratio = 0.9) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(ErrorKind::Usage, "split ratio must lie in [0, 1]");
  Dataset sorted = data;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const PairedSample& a, const PairedSample& b) { return a.timestamp_ms < b.timestamp_ms; });
  const auto cut = static_cast<std::size_t>(ratio * static_cast<double>(sorted.size()));
  Split s;
  s.validation.assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(cut));
  s.test.assign(sorted.begin() + static_cast<std::ptrdiff_t>(cut), sorted.end());
  return s;
}

}  // namespace fmfi
