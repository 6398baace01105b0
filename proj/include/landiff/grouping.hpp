#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "landiff/common.hpp"

namespace landiff {

// Splits feature frames into overlapping groups. The first frame of each
// group is the I-frame (I query tokens); every later frame is a P-frame
// (P query tokens each).
struct FrameGroupPlan {
  int64_t group_size = 0;  // T: frames per full group
  int64_t iframe_queries = 0;
  int64_t pframe_queries = 0;
  int64_t overlap_frames = 0;
  int64_t feature_frames = 0;
  std::vector<std::pair<int64_t, int64_t>> groups;  // inclusive (start, end)

  int64_t frames_in_group(size_t g) const { return groups[g].second - groups[g].first + 1; }

  int64_t tokens_in_group(size_t g) const {
    return iframe_queries + (frames_in_group(g) - 1) * pframe_queries;
  }

  int64_t total_tokens() const {
    int64_t n = 0;
    for (size_t g = 0; g < groups.size(); ++g) n += tokens_in_group(g);
    return n;
  }
};

inline FrameGroupPlan plan_groups(int64_t feature_frames, int64_t T, int64_t I, int64_t P,
                                  double overlap_ratio = 0.2) {
  if (feature_frames <= 0) throw config_error("plan_groups: no feature frames");
  if (T < 1) throw config_error("plan_groups: group size must be >= 1");
  if (!(I >= P && P >= 1)) throw config_error("plan_groups: need I >= P >= 1");
  if (overlap_ratio < 0 || overlap_ratio >= 1)
    throw config_error("plan_groups: overlap ratio must be in [0,1)");

  FrameGroupPlan plan;
  plan.group_size = T;
  plan.iframe_queries = I;
  plan.pframe_queries = P;
  plan.overlap_frames = int64_t(std::llround(overlap_ratio * double(T)));
  plan.feature_frames = feature_frames;
  const int64_t step = T - plan.overlap_frames;
  if (step < 1) throw config_error("plan_groups: overlap leaves no forward step");

  int64_t start = 0;
  while (true) {
    const int64_t end = std::min(start + T, feature_frames) - 1;
    plan.groups.emplace_back(start, end);
    if (end >= feature_frames - 1) break;
    start += step;
  }
  return plan;
}

}  // namespace landiff
