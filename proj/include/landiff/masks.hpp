#pragma once

#include <cstdint>
#include <vector>

#include "landiff/common.hpp"
#include "landiff/grouping.hpp"
#include "landiff/tensor.hpp"

namespace landiff {

// Frame-causal attention masks for one tokenizer group.
//
// Encoder rows/cols cover [features ∥ queries] in frame order:
//   - a feature in frame j attends features of frames <= j (never queries);
//   - a query of frame j attends features of frames <= j, and (when
//     query_to_query is on, the default) queries of frames <= j.
// Decoder rows/cols cover [mask tokens ∥ quantized queries]:
//   - a mask token of frame j attends mask tokens of frames <= j and query
//     tokens of frames <= j (its own frame included);
//   - query rows exist as keys for the mask tokens; as queries they see the
//     queries of frames <= j (keeps every row reachable).
struct AttentionMaskSpec {
  BoolMask encoder_mask;
  BoolMask decoder_mask;
  std::vector<int64_t> encoder_frame_of;  // frame index per encoder row/col
  std::vector<int64_t> decoder_frame_of;
  int64_t n_features = 0;  // leading feature (or mask-token) positions
  int64_t n_queries = 0;
};

// Query count for frame `f` (0-based within the group).
inline int64_t queries_for_frame(int64_t f, int64_t I, int64_t P) { return f == 0 ? I : P; }

inline AttentionMaskSpec build_group_masks(int64_t frames, int64_t features_per_frame, int64_t I,
                                           int64_t P, bool query_to_query = true) {
  if (frames < 1 || features_per_frame < 1) throw config_error("build_group_masks: empty group");
  AttentionMaskSpec spec;
  spec.n_features = frames * features_per_frame;
  spec.n_queries = I + (frames - 1) * P;

  // frame_of over [features ∥ queries]
  for (int64_t f = 0; f < frames; ++f)
    for (int64_t i = 0; i < features_per_frame; ++i) spec.encoder_frame_of.push_back(f);
  for (int64_t f = 0; f < frames; ++f)
    for (int64_t q = 0; q < queries_for_frame(f, I, P); ++q) spec.encoder_frame_of.push_back(f);
  spec.decoder_frame_of = spec.encoder_frame_of;

  const int64_t n = spec.n_features + spec.n_queries;
  spec.encoder_mask = BoolMask(n, n);
  spec.decoder_mask = BoolMask(n, n);
  for (int64_t r = 0; r < n; ++r) {
    const bool r_is_query = r >= spec.n_features;
    const int64_t rf = spec.encoder_frame_of[size_t(r)];
    for (int64_t c = 0; c < n; ++c) {
      const bool c_is_query = c >= spec.n_features;
      const int64_t cf = spec.encoder_frame_of[size_t(c)];
      const bool causal = cf <= rf;

      bool enc;
      if (!r_is_query)
        enc = !c_is_query && causal;  // features never attend queries
      else
        enc = causal && (!c_is_query || query_to_query);
      spec.encoder_mask.set(r, c, enc);

      // Decoder: mask tokens occupy the feature slots.
      bool dec;
      if (!r_is_query)
        dec = causal;  // mask tokens see mask tokens and queries of frames <= j
      else
        dec = c_is_query && causal;
      spec.decoder_mask.set(r, c, dec);
    }
  }
  spec.encoder_mask.validate();
  spec.decoder_mask.validate();
  return spec;
}

// Masks for a full-size group of the plan.
inline AttentionMaskSpec build_masks(const FrameGroupPlan& plan, int64_t features_per_frame,
                                     bool query_to_query = true) {
  return build_group_masks(plan.group_size, features_per_frame, plan.iframe_queries,
                           plan.pframe_queries, query_to_query);
}

}  // namespace landiff
