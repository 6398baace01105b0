#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "landiff/common.hpp"
#include "landiff/grouping.hpp"

namespace landiff {

// 1D discrete token sequence produced by the tokenizer, with enough layout
// metadata to reconstruct per-group segments.
struct TokenStream {
  std::vector<int64_t> ids;
  int64_t vocab = 0;
  int64_t feature_frame_count = 0;
  int64_t group_size = 0;        // plan T
  int64_t iframe_queries = 0;    // plan I
  int64_t pframe_queries = 0;    // plan P
  int64_t overlap_frames = 0;

  FrameGroupPlan plan() const {
    FrameGroupPlan p = plan_groups(feature_frame_count, group_size, iframe_queries,
                                   pframe_queries, 0.0);
    // Rebuild with the stored overlap rather than a ratio.
    p.groups.clear();
    p.overlap_frames = overlap_frames;
    const int64_t step = group_size - overlap_frames;
    if (step < 1) throw config_error("TokenStream: overlap leaves no forward step");
    int64_t start = 0;
    while (true) {
      const int64_t end = std::min(start + group_size, feature_frame_count) - 1;
      p.groups.emplace_back(start, end);
      if (end >= feature_frame_count - 1) break;
      start += step;
    }
    return p;
  }

  void validate() const {
    if (vocab < 1) throw config_error("TokenStream: empty vocab");
    for (int64_t id : ids)
      if (id < 0 || id >= vocab) throw config_error("TokenStream: id out of range");
    if (int64_t(ids.size()) != plan().total_tokens())
      throw config_error("TokenStream: id count does not match plan");
  }

  // Offset of group g's tokens within ids.
  int64_t group_offset(size_t g) const {
    const FrameGroupPlan p = plan();
    int64_t off = 0;
    for (size_t i = 0; i < g; ++i) off += p.tokens_in_group(i);
    return off;
  }
};

inline TokenStream make_token_stream(std::vector<int64_t> ids, const FrameGroupPlan& plan,
                                     int64_t vocab) {
  TokenStream ts;
  ts.ids = std::move(ids);
  ts.vocab = vocab;
  ts.feature_frame_count = plan.feature_frames;
  ts.group_size = plan.group_size;
  ts.iframe_queries = plan.iframe_queries;
  ts.pframe_queries = plan.pframe_queries;
  ts.overlap_frames = plan.overlap_frames;
  ts.validate();
  return ts;
}

// File codec ("LDTK"): u32 version, plan fields, id count, ids as
// little-endian u16.
inline void save_token_stream(const std::string& path, const TokenStream& ts) {
  ts.validate();
  if (ts.vocab > 0xFFFF) throw config_error("save_token_stream: vocab too large for u16 ids");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  os.write("LDTK", 4);
  auto put_u32 = [&](uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  put_u32(1);
  put_u32(uint32_t(ts.group_size));
  put_u32(uint32_t(ts.iframe_queries));
  put_u32(uint32_t(ts.pframe_queries));
  put_u32(uint32_t(ts.overlap_frames));
  put_u32(uint32_t(ts.vocab));
  put_u32(uint32_t(ts.feature_frame_count));
  put_u32(uint32_t(ts.ids.size()));
  for (int64_t id : ts.ids) {
    const uint16_t v = uint16_t(id);
    os.write(reinterpret_cast<const char*>(&v), 2);
  }
  if (!os) throw io_error("write failed: " + path);
}

inline TokenStream load_token_stream(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "LDTK") throw io_error("not a token stream file: " + path);
  auto get_u32 = [&]() {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw io_error("token stream file: truncated");
    return v;
  };
  const uint32_t version = get_u32();
  if (version != 1) throw io_error("unsupported token stream version");
  TokenStream ts;
  ts.group_size = get_u32();
  ts.iframe_queries = get_u32();
  ts.pframe_queries = get_u32();
  ts.overlap_frames = get_u32();
  ts.vocab = get_u32();
  ts.feature_frame_count = get_u32();
  const uint32_t count = get_u32();
  ts.ids.resize(count);
  for (auto& id : ts.ids) {
    uint16_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 2);
    if (!is) throw io_error("token stream file: truncated");
    id = v;
  }
  ts.validate();
  return ts;
}

}  // namespace landiff
