#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "landiff/common.hpp"
#include "landiff/rng.hpp"
#include "landiff/tensor.hpp"

namespace landiff {

// ---------------------------------------------------------------------------
// Caption grammar: "<count> <color> <shape> <verb> <direction>" over a small
// closed vocabulary. Word order inside each group is the id order.

namespace grammar {

inline const std::vector<std::string>& words() {
  static const std::vector<std::string> w = {
      // counts (0-2)
      "one", "two", "three",
      // colors (3-12), intensity decreasing
      "white", "ivory", "bright", "silver", "gray", "slate", "dim", "pale", "faint", "dusky",
      // shapes (13-22)
      "square", "cross", "disc", "ring", "hbar", "vbar", "diamond", "corner", "tee", "dot",
      // verbs (23-26)
      "sit", "drift", "slide", "bounce",
      // directions (27-35)
      "still", "left", "right", "up", "down", "upleft", "upright", "downleft", "downright"};
  return w;
}

constexpr int kCountBase = 0, kNumCounts = 3;
constexpr int kColorBase = 3, kNumColors = 10;
constexpr int kShapeBase = 13, kNumShapes = 10;
constexpr int kVerbBase = 23, kNumVerbs = 4;
constexpr int kDirBase = 27, kNumDirs = 9;

inline int vocab_size() { return int(words().size()); }

inline const std::array<real, 10>& color_intensity() {
  static const std::array<real, 10> v = {real(1.0),  real(0.95), real(0.85), real(0.75),
                                         real(0.65), real(0.55), real(0.45), real(0.35),
                                         real(0.25), real(0.15)};
  return v;
}

inline int word_id(const std::string& w) {
  const auto& ws = words();
  for (int i = 0; i < int(ws.size()); ++i)
    if (ws[size_t(i)] == w) return i;
  throw config_error("unknown caption word: " + w);
}

}  // namespace grammar

struct Caption {
  std::vector<int> token_ids;
  std::string raw_text;
};

inline Caption make_caption(const std::vector<int>& ids) {
  Caption c;
  c.token_ids = ids;
  std::ostringstream os;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= grammar::vocab_size())
      throw config_error("caption token id out of range");
    if (i) os << ' ';
    os << grammar::words()[size_t(ids[i])];
  }
  c.raw_text = os.str();
  return c;
}

inline Caption parse_caption(const std::string& text) {
  std::istringstream is(text);
  std::vector<int> ids;
  std::string w;
  while (is >> w) ids.push_back(grammar::word_id(w));
  return make_caption(ids);
}

// ---------------------------------------------------------------------------
// Scene description. All shapes in a clip share kind/color/size and move with
// one velocity so the single-template caption stays faithful.

enum class ShapeKind : int {
  kSquare = 0,
  kCross,
  kDisc,
  kRing,
  kHBar,
  kVBar,
  kDiamond,
  kCorner,
  kTee,
  kDot
};

struct SceneSpec {
  ShapeKind kind = ShapeKind::kSquare;
  int color = 0;  // index into grammar::color_intensity()
  int size = 7;
  int vx = 0;  // pixels/frame, +x = right
  int vy = 0;  // pixels/frame, +y = down
  bool bounce = false;
  // Top-left corners; empty = auto-place from the clip seed.
  std::vector<std::array<int, 2>> positions = {{-1, -1}};
};

struct VideoClip {
  int64_t n_frames = 0, height = 0, width = 0, channels = 1;
  int fps = 8;
  std::vector<real> frames;  // n_frames*height*width*channels, values in [0,1]
  Caption caption;
  SceneSpec scene;
  uint64_t seed = 0;

  real& px(int64_t t, int64_t y, int64_t x) {
    return frames[size_t(((t * height + y) * width + x) * channels)];
  }
  real px(int64_t t, int64_t y, int64_t x) const {
    return frames[size_t(((t * height + y) * width + x) * channels)];
  }
};

struct ControlConditions {
  std::optional<int64_t> frame_count;
  std::optional<real> motion_score;
};

constexpr int kClipFrames = 20;
constexpr int kClipSize = 32;
constexpr int kClipFps = 8;

namespace detail {

inline std::vector<std::array<int, 2>> shape_stencil(ShapeKind kind, int s) {
  std::vector<std::array<int, 2>> cells;
  const int h = s / 2;
  auto inside = [&](int dy, int dx) -> bool {
    const int ry = dy - h, rx = dx - h;
    switch (kind) {
      case ShapeKind::kSquare:
        return true;
      case ShapeKind::kCross:
        return dy == h || dx == h;
      case ShapeKind::kDisc:
        return ry * ry + rx * rx <= h * h;
      case ShapeKind::kRing: {
        const int inner = h >= 2 ? (h - 2) * (h - 2) : -1;
        const int r2 = ry * ry + rx * rx;
        return r2 <= h * h && r2 > inner;
      }
      case ShapeKind::kHBar:
        return dy == h - 1 || dy == h;
      case ShapeKind::kVBar:
        return dx == h - 1 || dx == h;
      case ShapeKind::kDiamond:
        return std::abs(ry) + std::abs(rx) <= h;
      case ShapeKind::kCorner:
        return dy == s - 1 || dx == 0;
      case ShapeKind::kTee:
        return dy == 0 || dx == h;
      case ShapeKind::kDot:
        return (dy == h - 1 || dy == h) && (dx == h - 1 || dx == h);
    }
    return false;
  };
  for (int dy = 0; dy < s; ++dy)
    for (int dx = 0; dx < s; ++dx)
      if (inside(dy, dx)) cells.push_back({dy, dx});
  return cells;
}

inline int reflect_coord(int start, int v, int t, int limit) {
  if (limit <= 0) return 0;
  long q = long(start) + long(v) * t;
  const long period = 2L * limit;
  long m = q % period;
  if (m < 0) m += period;
  return int(m <= limit ? m : period - m);
}

}  // namespace detail

inline void validate_scene(const SceneSpec& spec) {
  const int n = int(spec.positions.size());
  if (n < 1 || n > 3) throw config_error("scene: shape count must be 1..3");
  if (spec.color < 0 || spec.color >= grammar::kNumColors)
    throw config_error("scene: color index out of range");
  if (spec.size != 5 && spec.size != 7 && spec.size != 9)
    throw config_error("scene: size must be 5, 7 or 9");
  const int ax = std::abs(spec.vx), ay = std::abs(spec.vy);
  const bool speed_ok = (ax == 0 && ay == 0) || (ax == ay && (ax == 1 || ax == 2)) ||
                        (ax == 0 && (ay == 1 || ay == 2)) || (ay == 0 && (ax == 1 || ax == 2));
  if (!speed_ok) throw config_error("scene: velocity outside grammar");
  if (spec.bounce) {
    if (n != 1) throw config_error("scene: bounce allows a single shape only");
    if (spec.vx == 0 && spec.vy == 0) throw config_error("scene: bounce requires motion");
  }
}

// Caption implied by a scene; rendering keeps this faithful by construction.
inline Caption scene_caption(const SceneSpec& spec) {
  std::vector<int> ids;
  ids.push_back(grammar::kCountBase + int(spec.positions.size()) - 1);
  ids.push_back(grammar::kColorBase + spec.color);
  ids.push_back(grammar::kShapeBase + int(spec.kind));
  int verb;
  if (spec.bounce)
    verb = 3;
  else if (spec.vx == 0 && spec.vy == 0)
    verb = 0;
  else if (std::max(std::abs(spec.vx), std::abs(spec.vy)) == 1)
    verb = 1;
  else
    verb = 2;
  ids.push_back(grammar::kVerbBase + verb);
  int dir = 0;
  if (spec.vx != 0 || spec.vy != 0) {
    const int sx = (spec.vx > 0) - (spec.vx < 0);
    const int sy = (spec.vy > 0) - (spec.vy < 0);
    if (sy == 0)
      dir = sx < 0 ? 1 : 2;
    else if (sx == 0)
      dir = sy < 0 ? 3 : 4;
    else if (sy < 0)
      dir = sx < 0 ? 5 : 6;
    else
      dir = sx < 0 ? 7 : 8;
  }
  ids.push_back(grammar::kDirBase + dir);
  return make_caption(ids);
}

// Deterministic renderer. Non-bouncing shapes move on a torus; placement
// (explicit or auto) must keep shapes toroidally separated, which shared
// velocity then preserves for the whole clip.
inline VideoClip gen_clip(uint64_t seed, SceneSpec spec, int n_frames = kClipFrames,
                          int height = kClipSize, int width = kClipSize) {
  validate_scene(spec);
  if (n_frames < 1) throw config_error("gen_clip: need at least one frame");

  const int s = spec.size;
  // Auto-place shapes marked (-1,-1): rejection-sample corners with toroidal
  // L-inf separation > size, falling back to a fixed lattice.
  Rng rng(Rng::derive(seed, "placement"));
  std::vector<std::array<int, 2>> placed;
  for (auto& pos : spec.positions) {
    if (pos[0] >= 0) {
      placed.push_back(pos);
      continue;
    }
    auto far_enough = [&](int x, int y) {
      for (const auto& p : placed) {
        int dx = std::abs(x - p[0]);
        int dy = std::abs(y - p[1]);
        dx = std::min(dx, width - dx);
        dy = std::min(dy, height - dy);
        if (std::max(dx, dy) <= s) return false;
      }
      return true;
    };
    bool ok = false;
    for (int tries = 0; tries < 200 && !ok; ++tries) {
      const int x = spec.bounce ? rng.index(width - s + 1) : rng.index(width);
      const int y = spec.bounce ? rng.index(height - s + 1) : rng.index(height);
      if (far_enough(x, y)) {
        pos = {x, y};
        placed.push_back(pos);
        ok = true;
      }
    }
    if (!ok) {
      static const std::array<std::array<int, 2>, 4> lattice = {
          {{2, 2}, {18, 2}, {2, 18}, {18, 18}}};
      for (const auto& cand : lattice)
        if (far_enough(cand[0], cand[1])) {
          pos = cand;
          placed.push_back(pos);
          ok = true;
          break;
        }
    }
    if (!ok) throw config_error("gen_clip: could not place shapes without contact");
  }
  if (spec.bounce)
    for (const auto& p : spec.positions)
      if (p[0] < 0 || p[1] < 0 || p[0] > width - s || p[1] > height - s)
        throw config_error("gen_clip: bounce shape must start fully inside the frame");

  VideoClip clip;
  clip.n_frames = n_frames;
  clip.height = height;
  clip.width = width;
  clip.channels = 1;
  clip.fps = kClipFps;
  clip.seed = seed;
  clip.scene = spec;
  clip.caption = scene_caption(spec);
  clip.frames.assign(size_t(n_frames) * height * width, real(0));

  const auto stencil = detail::shape_stencil(spec.kind, s);
  const real intensity = grammar::color_intensity()[size_t(spec.color)];
  for (int t = 0; t < n_frames; ++t) {
    for (const auto& pos : spec.positions) {
      int cx, cy;
      if (spec.bounce) {
        cx = detail::reflect_coord(pos[0], spec.vx, t, width - s);
        cy = detail::reflect_coord(pos[1], spec.vy, t, height - s);
      } else {
        cx = int(((long(pos[0]) + long(spec.vx) * t) % width + width) % width);
        cy = int(((long(pos[1]) + long(spec.vy) * t) % height + height) % height);
      }
      for (const auto& cell : stencil) {
        const int y = (cy + cell[0]) % height;
        const int x = (cx + cell[1]) % width;
        clip.px(t, y, x) = std::max(clip.px(t, y, x), intensity);
      }
    }
  }
  return clip;
}

// Mean absolute inter-frame pixel difference scaled by 1/0.05 and clamped.
inline real motion_score(const VideoClip& clip) {
  if (clip.n_frames < 2) throw std::invalid_argument("motion_score: need at least two frames");
  const int64_t per_frame = clip.height * clip.width * clip.channels;
  double acc = 0;
  for (int64_t t = 0; t + 1 < clip.n_frames; ++t) {
    const real* a = clip.frames.data() + t * per_frame;
    const real* b = a + per_frame;
    for (int64_t i = 0; i < per_frame; ++i) acc += std::abs(double(b[i]) - double(a[i]));
  }
  acc /= double((clip.n_frames - 1) * per_frame);
  return real(std::clamp(acc / 0.05, 0.0, 1.0));
}

inline ControlConditions clip_conditions(const VideoClip& clip) {
  ControlConditions cc;
  cc.frame_count = clip.n_frames;
  cc.motion_score = motion_score(clip);
  return cc;
}

// ---------------------------------------------------------------------------
// Frozen semantic-feature extractor: per-patch isometric projection plus a
// fixed per-position offset, with temporal subsampling. Rows are ordered
// t-major, then y, then x.

struct GridMeta {
  int patch = 4;
  int temporal_stride = 2;
  int64_t t_f = 0, h_f = 0, w_f = 0;
  int64_t dim = 32;
};

struct SemanticFeatureGrid {
  Tensor values;  // (t_f*h_f*w_f) x dim
  GridMeta meta;

  int64_t cell_index(int64_t t, int64_t y, int64_t x) const {
    return (t * meta.h_f + y) * meta.w_f + x;
  }
};

class FeatureExtractor {
 public:
  static constexpr uint64_t kFrozenSeed = 0xFEE1DULL;

  FeatureExtractor(int patch = 4, int64_t dim = 32, int temporal_stride = 2)
      : patch_(patch), dim_(dim), stride_(temporal_stride) {
    const int64_t in_dim = int64_t(patch) * patch;
    if (dim_ < in_dim) throw config_error("FeatureExtractor: dim must be >= patch area");
    // Orthonormal columns via Gram-Schmidt on a frozen gaussian draw, so the
    // patch map is an isometry.
    Rng rng(Rng::derive(kFrozenSeed, "projection"));
    proj_.assign(size_t(dim_ * in_dim), real(0));
    for (int64_t c = 0; c < in_dim; ++c) {
      std::vector<double> col(static_cast<size_t>(dim_));
      double norm = 0;
      while (true) {
        for (auto& v : col) v = rng.gaussian();
        for (int64_t prev = 0; prev < c; ++prev) {
          double dot = 0;
          for (int64_t r = 0; r < dim_; ++r)
            dot += col[size_t(r)] * double(proj_[size_t(r * in_dim + prev)]);
          for (int64_t r = 0; r < dim_; ++r)
            col[size_t(r)] -= dot * double(proj_[size_t(r * in_dim + prev)]);
        }
        norm = 0;
        for (double v : col) norm += v * v;
        norm = std::sqrt(norm);
        if (norm > 1e-6) break;
      }
      for (int64_t r = 0; r < dim_; ++r) proj_[size_t(r * in_dim + c)] = real(col[size_t(r)] / norm);
    }
  }

  GridMeta meta_for(const VideoClip& clip) const {
    if (clip.height % patch_ != 0 || clip.width % patch_ != 0)
      throw config_error("extract_features: frame size not divisible by patch size");
    GridMeta m;
    m.patch = patch_;
    m.temporal_stride = stride_;
    m.t_f = (clip.n_frames + stride_ - 1) / stride_;
    m.h_f = clip.height / patch_;
    m.w_f = clip.width / patch_;
    m.dim = dim_;
    return m;
  }

  SemanticFeatureGrid extract(const VideoClip& clip) const {
    const GridMeta m = meta_for(clip);
    SemanticFeatureGrid grid;
    grid.meta = m;
    grid.values = zeros({m.t_f * m.h_f * m.w_f, m.dim});
    const int64_t in_dim = int64_t(patch_) * patch_;
    std::vector<real> patch_px(static_cast<size_t>(in_dim));
    for (int64_t tf = 0; tf < m.t_f; ++tf) {
      const int64_t t = tf * stride_;
      for (int64_t py = 0; py < m.h_f; ++py)
        for (int64_t px = 0; px < m.w_f; ++px) {
          for (int64_t dy = 0; dy < patch_; ++dy)
            for (int64_t dx = 0; dx < patch_; ++dx)
              patch_px[size_t(dy * patch_ + dx)] =
                  clip.px(t, py * patch_ + dy, px * patch_ + dx);
          const int64_t row = grid.cell_index(tf, py, px);
          const std::vector<real>& off = position_offset(py, px);
          for (int64_t d = 0; d < dim_; ++d) {
            double acc = double(off[size_t(d)]);
            for (int64_t i = 0; i < in_dim; ++i)
              acc += double(proj_[size_t(d * in_dim + i)]) * double(patch_px[size_t(i)]);
            grid.values.at(row, d) = real(acc);
          }
        }
    }
    check_finite(grid.values, "extract_features");
    return grid;
  }

  const std::vector<real>& position_offset(int64_t py, int64_t px) const {
    const uint64_t key = uint64_t(py) << 32 | uint64_t(px);
    auto it = offsets_.find(key);
    if (it != offsets_.end()) return it->second;
    Rng rng(Rng::derive(kFrozenSeed, "offset", key));
    std::vector<real> off(static_cast<size_t>(dim_));
    for (auto& v : off) v = real(rng.gaussian() * 0.5);
    return offsets_.emplace(key, std::move(off)).first->second;
  }

  int patch() const { return patch_; }
  int64_t dim() const { return dim_; }
  int temporal_stride() const { return stride_; }

 private:
  int patch_;
  int64_t dim_;
  int stride_;
  std::vector<real> proj_;  // dim x (patch*patch), orthonormal columns
  mutable std::unordered_map<uint64_t, std::vector<real>> offsets_;
};

inline const FeatureExtractor& default_extractor() {
  static const FeatureExtractor ex;
  return ex;
}

inline SemanticFeatureGrid extract_features(const VideoClip& clip) {
  return default_extractor().extract(clip);
}

// ---------------------------------------------------------------------------
// Random scenes and corpus batches

inline SceneSpec random_scene(Rng& rng) {
  SceneSpec spec;
  spec.kind = ShapeKind(rng.index(grammar::kNumShapes));
  spec.color = rng.index(grammar::kNumColors);
  spec.size = 5 + 2 * rng.index(3);
  const int motion = rng.index(4);  // 0 static, 1 drift, 2 slide, 3 bounce
  if (motion > 0) {
    static const std::array<std::array<int, 2>, 8> dirs = {
        {{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {-1, -1}, {1, -1}, {-1, 1}, {1, 1}}};
    const auto d = dirs[size_t(rng.index(8))];
    const int speed = motion == 1 ? 1 : 2;
    spec.vx = d[0] * (motion == 3 ? 1 + rng.index(2) : speed);
    spec.vy = d[1] * (motion == 3 ? 1 + rng.index(2) : speed);
    spec.bounce = motion == 3;
  }
  const int count = spec.bounce ? 1 : 1 + rng.index(3);
  spec.positions.assign(size_t(count), {-1, -1});
  return spec;
}

inline std::vector<VideoClip> gen_corpus(int count, uint64_t seed) {
  std::vector<VideoClip> clips;
  clips.reserve(size_t(count));
  for (int i = 0; i < count; ++i) {
    const uint64_t clip_seed = Rng::derive(seed, "clip", uint64_t(i));
    Rng rng(Rng::derive(clip_seed, "scene"));
    clips.push_back(gen_clip(clip_seed, random_scene(rng)));
  }
  return clips;
}

inline uint64_t clip_hash(const VideoClip& clip) {
  uint64_t h = fnv1a64(clip.frames.data(), clip.frames.size() * sizeof(real));
  h = fnv1a64(clip.caption.raw_text.data(), clip.caption.raw_text.size(), h);
  return h;
}

// ---------------------------------------------------------------------------
// Corpus file ("LDCP"): per-clip header (seed, scene, caption) followed by
// raw little-endian f64 frame bytes. Pixels are stored exactly, so a loaded
// corpus round-trips bit-for-bit.

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw io_error("corpus file: truncated");
  return v;
}

}  // namespace detail

inline void save_corpus(const std::string& path, const std::vector<VideoClip>& clips) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  os.write("LDCP", 4);
  detail::put<uint32_t>(os, 1);  // version
  detail::put<uint32_t>(os, uint32_t(clips.size()));
  for (const auto& c : clips) {
    detail::put<uint64_t>(os, c.seed);
    detail::put<int32_t>(os, int32_t(c.scene.kind));
    detail::put<int32_t>(os, c.scene.color);
    detail::put<int32_t>(os, c.scene.size);
    detail::put<int32_t>(os, c.scene.vx);
    detail::put<int32_t>(os, c.scene.vy);
    detail::put<uint8_t>(os, c.scene.bounce ? 1 : 0);
    detail::put<uint32_t>(os, uint32_t(c.scene.positions.size()));
    for (const auto& p : c.scene.positions) {
      detail::put<int32_t>(os, p[0]);
      detail::put<int32_t>(os, p[1]);
    }
    detail::put<uint32_t>(os, uint32_t(c.caption.raw_text.size()));
    os.write(c.caption.raw_text.data(), std::streamsize(c.caption.raw_text.size()));
    detail::put<int32_t>(os, c.fps);
    detail::put<int64_t>(os, c.n_frames);
    detail::put<int64_t>(os, c.height);
    detail::put<int64_t>(os, c.width);
    detail::put<int64_t>(os, c.channels);
    for (real v : c.frames) detail::put<double>(os, double(v));
  }
  if (!os) throw io_error("write failed: " + path);
}

inline std::vector<VideoClip> load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "LDCP") throw io_error("not a corpus file: " + path);
  const uint32_t version = detail::get<uint32_t>(is);
  if (version != 1) throw io_error("unsupported corpus version");
  const uint32_t count = detail::get<uint32_t>(is);
  std::vector<VideoClip> clips(count);
  for (auto& c : clips) {
    c.seed = detail::get<uint64_t>(is);
    c.scene.kind = ShapeKind(detail::get<int32_t>(is));
    c.scene.color = detail::get<int32_t>(is);
    c.scene.size = detail::get<int32_t>(is);
    c.scene.vx = detail::get<int32_t>(is);
    c.scene.vy = detail::get<int32_t>(is);
    c.scene.bounce = detail::get<uint8_t>(is) != 0;
    c.scene.positions.resize(detail::get<uint32_t>(is));
    for (auto& p : c.scene.positions) {
      p[0] = detail::get<int32_t>(is);
      p[1] = detail::get<int32_t>(is);
    }
    std::string text(detail::get<uint32_t>(is), '\0');
    is.read(text.data(), std::streamsize(text.size()));
    if (!is) throw io_error("corpus file: truncated");
    c.caption = parse_caption(text);
    c.fps = detail::get<int32_t>(is);
    c.n_frames = detail::get<int64_t>(is);
    c.height = detail::get<int64_t>(is);
    c.width = detail::get<int64_t>(is);
    c.channels = detail::get<int64_t>(is);
    const int64_t n = c.n_frames * c.height * c.width * c.channels;
    if (n <= 0 || n > (int64_t(1) << 32)) throw io_error("corpus file: implausible clip size");
    c.frames.resize(size_t(n));
    for (auto& v : c.frames) v = real(detail::get<double>(is));
  }
  return clips;
}

}  // namespace landiff
