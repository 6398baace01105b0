#pragma once
// Denoising detokenizer: a transformer epsilon-predictor over perceptual
// latents, conditioned on decoded semantic features through a half-depth,
// zero-initialized control branch while the main network stays frozen.
// Long timelines are produced chunk by chunk, each chunk prompted by the
// previous one. Also houses the lossless space-to-depth pixel codec and a
// 1D Gaussian-mixture toy that validates the DDPM loop on its own.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "landiff/checkpoint.hpp"
#include "landiff/common.hpp"
#include "landiff/corpus.hpp"
#include "landiff/optim.hpp"
#include "landiff/rng.hpp"
#include "landiff/tensor.hpp"
#include "landiff/transformer.hpp"

namespace landiff {

// ---------------------------------------------------------------------------
// Noise schedule

struct DiffusionSchedule {
  int64_t steps = 0;
  std::vector<real> betas;
  std::vector<real> alphas_cum;  // running product of (1 - beta)
};

inline DiffusionSchedule make_schedule(int64_t steps, real beta_min, real beta_max) {
  if (steps < 2) throw config_error("make_schedule: need at least 2 steps");
  if (!(beta_min > real(0)) || !(beta_max < real(1)) || beta_max < beta_min)
    throw config_error("make_schedule: betas must satisfy 0 < min <= max < 1");
  DiffusionSchedule s;
  s.steps = steps;
  s.betas.resize(size_t(steps));
  s.alphas_cum.resize(size_t(steps));
  real prod = 1;
  for (int64_t t = 0; t < steps; ++t) {
    s.betas[size_t(t)] = beta_min + (beta_max - beta_min) * real(t) / real(steps - 1);
    prod *= real(1) - s.betas[size_t(t)];
    s.alphas_cum[size_t(t)] = prod;
  }
  return s;
}

// x_t = sqrt(abar)*x + sqrt(1-abar)*eps. Gradients flow through both inputs.
inline Tensor add_noise_alpha(const Tensor& v, real alpha_bar, const Tensor& eps) {
  detail::require_same_shape(v, eps, "add_noise");
  if (!(alpha_bar >= real(0)) || !(alpha_bar <= real(1)))
    throw config_error("add_noise: alpha_bar outside [0, 1]");
  return add(scale(v, std::sqrt(alpha_bar)), scale(eps, std::sqrt(real(1) - alpha_bar)));
}

inline Tensor add_noise(const Tensor& v, const DiffusionSchedule& sched, int64_t t,
                        const Tensor& eps) {
  if (t < 0 || t >= sched.steps) throw config_error("add_noise: step index out of range");
  return add_noise_alpha(v, sched.alphas_cum[size_t(t)], eps);
}

// ---------------------------------------------------------------------------
// Perceptual latent codec: an exact space-to-depth bijection. Folding pixels
// into channels keeps the denoiser's sequence short without introducing any
// reconstruction error of its own.

struct LatentMeta {
  int64_t spatial = 4;
  int64_t temporal = 2;
  int64_t video_frames = 0, height = 0, width = 0, channels = 1;
  int fps = kClipFps;
};

struct PerceptualLatent {
  Tensor values;  // (t_l*h_l*w_l) x d_l, frame-major rows
  LatentMeta meta;
  int64_t t_l = 0, h_l = 0, w_l = 0, d_l = 0;

  int64_t rows() const { return t_l * h_l * w_l; }
  int64_t row_index(int64_t t, int64_t y, int64_t x) const { return (t * h_l + y) * w_l + x; }
};

inline PerceptualLatent latent_encode(const VideoClip& clip, int64_t spatial = 4,
                                      int64_t temporal = 2) {
  if (spatial < 1 || temporal < 1) throw config_error("latent_encode: factors must be >= 1");
  if (clip.n_frames % temporal != 0 || clip.height % spatial != 0 || clip.width % spatial != 0)
    throw config_error("latent_encode: clip dims not divisible by folding factors");
  PerceptualLatent lat;
  lat.meta = {spatial,   temporal,    clip.n_frames, clip.height,
              clip.width, clip.channels, clip.fps};
  lat.t_l = clip.n_frames / temporal;
  lat.h_l = clip.height / spatial;
  lat.w_l = clip.width / spatial;
  lat.d_l = clip.channels * spatial * spatial * temporal;
  lat.values = zeros({lat.rows(), lat.d_l}, /*requires_grad=*/false);
  auto& out = *lat.values.data;
  for (int64_t t = 0; t < clip.n_frames; ++t)
    for (int64_t y = 0; y < clip.height; ++y)
      for (int64_t x = 0; x < clip.width; ++x)
        for (int64_t c = 0; c < clip.channels; ++c) {
          const int64_t row = lat.row_index(t / temporal, y / spatial, x / spatial);
          const int64_t ch =
              (((t % temporal) * spatial + y % spatial) * spatial + x % spatial) * clip.channels +
              c;
          out[size_t(row * lat.d_l + ch)] =
              clip.frames[size_t(((t * clip.height + y) * clip.width + x) * clip.channels + c)];
        }
  return lat;
}

inline VideoClip latent_decode(const PerceptualLatent& lat) {
  const auto& m = lat.meta;
  if (lat.values.shape != Shape{lat.rows(), lat.d_l})
    throw config_error("latent_decode: value grid does not match meta dims");
  VideoClip clip;
  clip.n_frames = m.video_frames;
  clip.height = m.height;
  clip.width = m.width;
  clip.channels = m.channels;
  clip.fps = m.fps;
  clip.frames.assign(size_t(m.video_frames * m.height * m.width * m.channels), real(0));
  const auto& in = *lat.values.data;
  for (int64_t t = 0; t < m.video_frames; ++t)
    for (int64_t y = 0; y < m.height; ++y)
      for (int64_t x = 0; x < m.width; ++x)
        for (int64_t c = 0; c < m.channels; ++c) {
          const int64_t row = lat.row_index(t / m.temporal, y / m.spatial, x / m.spatial);
          const int64_t ch =
              (((t % m.temporal) * m.spatial + y % m.spatial) * m.spatial + x % m.spatial) *
                  m.channels +
              c;
          clip.frames[size_t(((t * m.height + y) * m.width + x) * m.channels + c)] =
              in[size_t(row * lat.d_l + ch)];
        }
  return clip;
}

// ---------------------------------------------------------------------------
// Semantic upsampler: learned channel expansion followed by a pixelshuffle
// rearrangement into space, with nearest-index repeat across time. Output
// rows align one-to-one with a (t_latent x h_f*s x w_f*s) grid.

inline Tensor upsample_semantic(const Tensor& feat, int64_t t_f, int64_t h_f, int64_t w_f,
                                const Linear& channel_map, int64_t s, int64_t t_latent) {
  if (feat.shape.size() != 2 || feat.shape[0] != t_f * h_f * w_f)
    throw config_error("upsample_semantic: feature rows do not match grid dims");
  if (s < 1) throw config_error("upsample_semantic: shuffle factor must be >= 1");
  if (t_latent < t_f || t_latent % t_f != 0)
    throw config_error("upsample_semantic: latent frames must be a multiple of feature frames");
  Tensor mapped = channel_map(feat);
  if (mapped.shape[1] % (s * s) != 0)
    throw config_error("upsample_semantic: mapped channels not divisible by factor^2");
  const int64_t c_out = mapped.shape[1] / (s * s);
  Tensor stacked = mapped;
  if (s > 1) {
    // Channel block b = dy*s + dx becomes the (dy, dx) sub-pixel plane.
    std::vector<Tensor> blocks;
    for (int64_t b = 0; b < s * s; ++b) blocks.push_back(slice_cols(mapped, b * c_out, c_out));
    stacked = concat_rows(blocks);
  }
  const int64_t cells = h_f * w_f;
  const int64_t h_out = h_f * s, w_out = w_f * s;
  const int64_t repeat = t_latent / t_f;
  std::vector<int64_t> ids;
  ids.reserve(size_t(t_latent * h_out * w_out));
  for (int64_t t = 0; t < t_latent; ++t)
    for (int64_t y = 0; y < h_out; ++y)
      for (int64_t x = 0; x < w_out; ++x) {
        const int64_t block = (y % s) * s + x % s;
        ids.push_back(block * cells + ((t / repeat) * h_f + y / s) * w_f + x / s);
      }
  return gather_rows(stacked, ids);
}

// ---------------------------------------------------------------------------
// Per-row conditioning handed to an epsilon model. `tau` is what the network
// sees; `alpha_bar` is what the noising actually used (clean rows carry 1).
// The two are decoupled so a clean prompt can be conditioned at tau=0.999.

struct TimeConditioning {
  std::vector<real> tau;
  std::vector<real> alpha_bar;
  int64_t t_frames = 0, h_cells = 0, w_cells = 0;  // row grid; ignored by row models
  int64_t t_start = 0;  // absolute frame index of row 0, keeps positions
                        // consistent across streaming chunks
};

inline TimeConditioning grid_times(real tau, real alpha_bar, int64_t t_frames, int64_t h_cells,
                                   int64_t w_cells, int64_t t_start = 0) {
  TimeConditioning tc;
  const size_t rows = size_t(t_frames * h_cells * w_cells);
  tc.tau.assign(rows, tau);
  tc.alpha_bar.assign(rows, alpha_bar);
  tc.t_frames = t_frames;
  tc.h_cells = h_cells;
  tc.w_cells = w_cells;
  tc.t_start = t_start;
  return tc;
}

struct EpsilonModel {
  virtual ~EpsilonModel() = default;
  // x: rows to denoise; cond: semantic feature rows over the same time span
  // (null when the model is unconditional). Returns the predicted noise.
  virtual Tensor predict(const Tensor& x, const TimeConditioning& tc,
                         const Tensor* cond) const = 0;
};

// Sinusoid features of the conditioning scalar at octave frequencies.
inline Tensor time_features(const std::vector<real>& tau, int64_t width) {
  if (width < 2 || width % 2 != 0)
    throw config_error("time_features: width must be even and >= 2");
  const int64_t rows = int64_t(tau.size());
  Tensor out = zeros({rows, width}, /*requires_grad=*/false);
  auto& d = *out.data;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t k = 0; k < width / 2; ++k) {
      const real arg = std::ldexp(tau[size_t(r)], int(k));  // 2^k * tau
      d[size_t(r * width + 2 * k)] = std::sin(arg);
      d[size_t(r * width + 2 * k + 1)] = std::cos(arg);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Video denoiser

struct DiffusionConfig {
  int64_t latent_dim = 32;   // channels of the perceptual latent
  int64_t cond_dim = 32;     // channels of the decoded semantic features
  int64_t hidden = 128;
  int64_t mlp_hidden = 256;
  int64_t n_layers = 8;      // main depth; must be even to grow a control branch
  int n_heads = 4;
  int64_t time_feat = 16;
  int64_t spatial_factor = 1;  // latent cells per feature cell, per axis
  real rope_theta = real(10000);
  int64_t steps = 50;
  real beta_min = real(0.002);
  real beta_max = real(0.25);

  DiffusionSchedule schedule() const { return make_schedule(steps, beta_min, beta_max); }

  void to_meta(std::map<std::string, std::string>& meta, const std::string& prefix) const {
    meta_set(meta, prefix + "latent_dim", latent_dim);
    meta_set(meta, prefix + "cond_dim", cond_dim);
    meta_set(meta, prefix + "hidden", hidden);
    meta_set(meta, prefix + "mlp_hidden", mlp_hidden);
    meta_set(meta, prefix + "n_layers", n_layers);
    meta_set(meta, prefix + "n_heads", int64_t(n_heads));
    meta_set(meta, prefix + "time_feat", time_feat);
    meta_set(meta, prefix + "spatial_factor", spatial_factor);
    meta_set(meta, prefix + "rope_theta", double(rope_theta));
    meta_set(meta, prefix + "steps", steps);
    meta_set(meta, prefix + "beta_min", double(beta_min));
    meta_set(meta, prefix + "beta_max", double(beta_max));
  }

  static DiffusionConfig from_meta(const Checkpoint& ck, const std::string& prefix) {
    DiffusionConfig c;
    c.latent_dim = ck.meta_i64(prefix + "latent_dim");
    c.cond_dim = ck.meta_i64(prefix + "cond_dim");
    c.hidden = ck.meta_i64(prefix + "hidden");
    c.mlp_hidden = ck.meta_i64(prefix + "mlp_hidden");
    c.n_layers = ck.meta_i64(prefix + "n_layers");
    c.n_heads = int(ck.meta_i64(prefix + "n_heads"));
    c.time_feat = ck.meta_i64(prefix + "time_feat");
    c.spatial_factor = ck.meta_i64(prefix + "spatial_factor");
    c.rope_theta = real(ck.meta_f64(prefix + "rope_theta"));
    c.steps = ck.meta_i64(prefix + "steps");
    c.beta_min = real(ck.meta_f64(prefix + "beta_min"));
    c.beta_max = real(ck.meta_f64(prefix + "beta_max"));
    return c;
  }
};

// Trainable copy of the main network's first half. Its per-layer outputs pass
// zero-initialized projections and are added to the matching main-layer
// outputs, so an untrained branch cannot change the main network's behaviour.
struct ControlBranch {
  TransformerStack stack;               // copies of main layers 0..M-1, no final norm
  std::vector<Linear> zero_projections;  // one per copied layer
  Linear upsample_map;                   // learned channel expansion for the features
  Linear condition_injector;             // zero-initialized entry into the branch input
};

class VideoDenoiser final : public EpsilonModel {
 public:
  VideoDenoiser(const DiffusionConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
    if (cfg.n_layers < 1) throw config_error("denoiser: need at least one layer");
    if (cfg.latent_dim < 1 || cfg.cond_dim < 1 || cfg.hidden < 1)
      throw config_error("denoiser: dims must be positive");
    Rng rng(Rng::derive(seed, "denoiser"));
    in_embed_ = Linear(reg_main_, "main.in", cfg.latent_dim, cfg.hidden, rng);
    time_fc1_ = Linear(reg_main_, "main.time.fc1", cfg.time_feat, cfg.hidden, rng);
    time_fc2_ = Linear(reg_main_, "main.time.fc2", cfg.hidden, cfg.hidden, rng);
    stack_ = TransformerStack(reg_main_, "main.stack", int(cfg.n_layers), cfg.hidden,
                              cfg.mlp_hidden, cfg.n_heads, rng, /*with_final_ln=*/true);
    out_head_ = Linear(reg_main_, "main.out", cfg.hidden, cfg.latent_dim, rng);
  }

  const DiffusionConfig& config() const { return cfg_; }
  bool has_control() const { return has_control_; }
  // Once the branch exists the main weights are frozen: they are excluded
  // from every optimizer, which is what keeps their checksums invariant.
  bool main_frozen() const { return has_control_; }
  ParamRegistry& main_params() { return reg_main_; }
  const ParamRegistry& main_params() const { return reg_main_; }
  ParamRegistry& branch_params() { return reg_branch_; }
  const ParamRegistry& branch_params() const { return reg_branch_; }
  const ControlBranch& control() const {
    if (!has_control_) throw config_error("denoiser: control branch not built");
    return branch_;
  }

  uint64_t main_checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& it : reg_main_.items())
      h = fnv1a64(it.tensor.data->data(), it.tensor.data->size() * sizeof(real), h);
    return h;
  }

  const ControlBranch& build_control_branch() {
    if (has_control_) throw config_error("denoiser: control branch already built");
    if (cfg_.n_layers % 2 != 0)
      throw config_error("denoiser: control branch needs an even main layer count");
    const int m = int(cfg_.n_layers / 2);
    Rng rng(Rng::derive(seed_, "branch"));
    branch_.stack = TransformerStack(reg_branch_, "branch.stack", m, cfg_.hidden, cfg_.mlp_hidden,
                                     cfg_.n_heads, rng, /*with_final_ln=*/false);
    copy_main_half_into_branch();
    for (int i = 0; i < m; ++i)
      branch_.zero_projections.push_back(Linear::zero_init(
          reg_branch_, "branch.zero" + std::to_string(i), cfg_.hidden, cfg_.hidden));
    branch_.upsample_map =
        Linear(reg_branch_, "branch.upsample", cfg_.cond_dim,
               cfg_.cond_dim * cfg_.spatial_factor * cfg_.spatial_factor, rng);
    branch_.condition_injector =
        Linear::zero_init(reg_branch_, "branch.inject", cfg_.cond_dim, cfg_.hidden);
    has_control_ = true;
    return branch_;
  }

  Tensor predict(const Tensor& x, const TimeConditioning& tc, const Tensor* cond) const override {
    const int64_t rows = x.shape.empty() ? 0 : x.shape[0];
    if (x.shape.size() != 2 || x.shape[1] != cfg_.latent_dim)
      throw config_error("denoiser: input rows must have latent_dim columns");
    if (int64_t(tc.tau.size()) != rows || int64_t(tc.alpha_bar.size()) != rows)
      throw config_error("denoiser: time conditioning size mismatch");
    if (tc.t_frames * tc.h_cells * tc.w_cells != rows)
      throw config_error("denoiser: grid dims do not cover the input rows");
    if (has_control_ && cond == nullptr)
      throw config_error("denoiser: control branch requires semantic features");
    if (!has_control_ && cond != nullptr)
      throw config_error("denoiser: semantic features given but no control branch");

    Tensor temb = time_fc2_(gelu(time_fc1_(time_features(tc.tau, cfg_.time_feat))));
    Tensor h0 = add(in_embed_(x), temb);

    const BoolMask mask = BoolMask::all_true(rows, rows);
    std::vector<std::array<int64_t, 3>> coords;
    coords.reserve(size_t(rows));
    for (int64_t t = 0; t < tc.t_frames; ++t)
      for (int64_t y = 0; y < tc.h_cells; ++y)
        for (int64_t x_ = 0; x_ < tc.w_cells; ++x_)
          coords.push_back({tc.t_start + t, y, x_});
    const RopePositions rope = RopePositions::rope3d(std::move(coords), cfg_.rope_theta);

    std::vector<Tensor> taps;
    if (has_control_) {
      const int64_t s = cfg_.spatial_factor;
      if (tc.h_cells % s != 0 || tc.w_cells % s != 0)
        throw config_error("denoiser: grid not divisible by the spatial factor");
      const int64_t cells_f = (tc.h_cells / s) * (tc.w_cells / s);
      if (cond->shape.size() != 2 || cond->shape[1] != cfg_.cond_dim ||
          cond->shape[0] % cells_f != 0)
        throw config_error("denoiser: semantic feature rows do not fit the grid");
      const int64_t t_f = cond->shape[0] / cells_f;
      if (t_f < 1 || tc.t_frames % t_f != 0)
        throw config_error("denoiser: feature frames do not divide the latent frames");
      Tensor up = upsample_semantic(*cond, t_f, tc.h_cells / s, tc.w_cells / s,
                                    branch_.upsample_map, s, tc.t_frames);
      Tensor b = add(h0, branch_.condition_injector(up));
      for (size_t i = 0; i < branch_.stack.blocks.size(); ++i) {
        b = branch_.stack.blocks[i].forward(b, mask, rope);
        taps.push_back(branch_.zero_projections[i](b));
      }
    }

    Tensor h = h0;
    for (size_t i = 0; i < stack_.blocks.size(); ++i) {
      h = stack_.blocks[i].forward(h, mask, rope);
      if (i < taps.size()) h = add(h, taps[i]);
    }
    return out_head_(layer_norm(h, stack_.lnf_g, stack_.lnf_b));
  }

 private:
  void copy_main_half_into_branch() {
    // Deep copy by name: branch.stack.blockI.* takes its values from
    // main.stack.blockI.*.
    auto main_named = reg_main_.named_tensors();
    for (const auto& it : reg_branch_.items()) {
      const std::string suffix = it.name.substr(std::string("branch").size());
      const std::string want = "main" + suffix;
      bool found = false;
      for (const auto& [name, tensor] : main_named) {
        if (name != want) continue;
        if (tensor.shape != it.tensor.shape)
          throw config_error("denoiser: branch/main shape mismatch at " + it.name);
        std::copy(tensor.data->begin(), tensor.data->end(), it.tensor.data->begin());
        found = true;
        break;
      }
      if (!found) throw config_error("denoiser: no main twin for " + it.name);
    }
  }

  DiffusionConfig cfg_;
  uint64_t seed_ = 0;
  ParamRegistry reg_main_;
  ParamRegistry reg_branch_;
  Linear in_embed_, time_fc1_, time_fc2_, out_head_;
  TransformerStack stack_;
  ControlBranch branch_;
  bool has_control_ = false;
};

// ---------------------------------------------------------------------------
// Plain denoising loss

inline Tensor diffusion_loss_at(const EpsilonModel& model, const DiffusionSchedule& sched,
                                const Tensor& v, int64_t t, const Tensor& eps, const Tensor* cond,
                                int64_t t_frames, int64_t h_cells, int64_t w_cells,
                                int64_t t_start = 0) {
  Tensor noisy = add_noise(v, sched, t, eps);
  const real abar = sched.alphas_cum[size_t(t)];
  const TimeConditioning tc = grid_times(abar, abar, t_frames, h_cells, w_cells, t_start);
  return mse(model.predict(noisy, tc, cond), eps);
}

inline Tensor diffusion_loss(const EpsilonModel& model, const DiffusionSchedule& sched,
                             const Tensor& v, const Tensor* cond, int64_t t_frames,
                             int64_t h_cells, int64_t w_cells, Rng& rng, int64_t t_start = 0) {
  const int64_t t = int64_t(rng.below(uint64_t(sched.steps)));
  Tensor eps = randn(v.shape, rng);
  return diffusion_loss_at(model, sched, v, t, eps, cond, t_frames, h_cells, w_cells, t_start);
}

// ---------------------------------------------------------------------------
// Chunk-wise streaming

struct ChunkPlan {
  int64_t chunk_len = 4;  // L latent frames; generation advances by L/2
  real prompt_time_value = real(0.999);
  real prompt_mask_ratio = real(0.2);

  int64_t half() const { return chunk_len / 2; }

  void validate() const {
    if (chunk_len < 2 || chunk_len % 2 != 0)
      throw config_error("chunk plan: chunk length must be even and >= 2");
    if (!(prompt_mask_ratio >= real(0)) || prompt_mask_ratio >= real(1))
      throw config_error("chunk plan: mask ratio must lie in [0, 1)");
    if (!(prompt_time_value > real(0)) || prompt_time_value > real(1))
      throw config_error("chunk plan: prompt time value must lie in (0, 1]");
  }
};

// Everything random about one streaming step, separable for tests.
struct StreamingDraws {
  int64_t chunk_start = 0;  // latent frame where the prompt half begins
  int64_t t = 0;            // schedule index used on the target half
  Tensor eps;               // noise for the target half
  std::vector<int64_t> masked_rows;  // prompt-local rows zeroed before the forward
};

inline StreamingDraws draw_streaming_batch(const PerceptualLatent& v, const ChunkPlan& plan,
                                           const DiffusionSchedule& sched, Rng& rng) {
  plan.validate();
  if (plan.chunk_len > v.t_l)
    throw config_error("streaming: chunk longer than the latent timeline");
  StreamingDraws d;
  d.chunk_start = int64_t(rng.below(uint64_t(v.t_l - plan.chunk_len + 1)));
  d.t = int64_t(rng.below(uint64_t(sched.steps)));
  const int64_t half_rows = plan.half() * v.h_l * v.w_l;
  d.eps = randn({half_rows, v.d_l}, rng);
  const int64_t n_mask = int64_t(std::floor(double(plan.prompt_mask_ratio) * double(half_rows)));
  std::vector<int64_t> idx(static_cast<size_t>(half_rows));
  std::iota(idx.begin(), idx.end(), int64_t(0));
  for (int64_t i = 0; i < n_mask; ++i)
    std::swap(idx[size_t(i)], idx[size_t(i + int64_t(rng.below(uint64_t(half_rows - i))))]);
  d.masked_rows.assign(idx.begin(), idx.begin() + n_mask);
  std::sort(d.masked_rows.begin(), d.masked_rows.end());
  return d;
}

// The prompt half enters clean (conditioned at prompt_time_value, partially
// zero-masked); only the target half is noised, and only its rows carry loss.
// `cond_rows`, when given, must span the full timeline at one feature frame
// per latent frame.
inline Tensor streaming_loss_at(const EpsilonModel& model, const DiffusionSchedule& sched,
                                const PerceptualLatent& v, const Tensor* cond_rows,
                                const ChunkPlan& plan, const StreamingDraws& d) {
  plan.validate();
  if (d.chunk_start < 0 || d.chunk_start + plan.chunk_len > v.t_l)
    throw config_error("streaming: chunk outside the latent timeline");
  if (d.t < 0 || d.t >= sched.steps) throw config_error("streaming: step index out of range");
  const int64_t cells = v.h_l * v.w_l;
  const int64_t half_rows = plan.half() * cells;
  if (d.eps.shape != Shape{half_rows, v.d_l})
    throw config_error("streaming: noise shape mismatch");

  Tensor prompt = slice_rows(v.values, d.chunk_start * cells, half_rows);
  if (!d.masked_rows.empty()) {
    Tensor keep = full({half_rows, v.d_l}, real(1));
    for (int64_t r : d.masked_rows) {
      if (r < 0 || r >= half_rows) throw config_error("streaming: masked row out of range");
      std::fill_n(keep.data->begin() + r * v.d_l, v.d_l, real(0));
    }
    prompt = mul(prompt, keep);
  }
  Tensor target = slice_rows(v.values, (d.chunk_start + plan.half()) * cells, half_rows);
  Tensor noisy = add_noise(target, sched, d.t, d.eps);
  Tensor x = concat_rows({prompt, noisy});

  const real abar = sched.alphas_cum[size_t(d.t)];
  TimeConditioning tc;
  tc.t_frames = plan.chunk_len;
  tc.h_cells = v.h_l;
  tc.w_cells = v.w_l;
  tc.t_start = d.chunk_start;
  tc.tau.assign(size_t(half_rows), plan.prompt_time_value);
  tc.tau.insert(tc.tau.end(), size_t(half_rows), abar);
  tc.alpha_bar.assign(size_t(half_rows), real(1));
  tc.alpha_bar.insert(tc.alpha_bar.end(), size_t(half_rows), abar);

  Tensor cond_chunk;
  const Tensor* cond_ptr = nullptr;
  if (cond_rows != nullptr) {
    if (cond_rows->shape.size() != 2 || cond_rows->shape[0] % v.t_l != 0)
      throw config_error("streaming: feature rows must align with latent frames");
    const int64_t cells_f = cond_rows->shape[0] / v.t_l;
    cond_chunk = slice_rows(*cond_rows, d.chunk_start * cells_f, plan.chunk_len * cells_f);
    cond_ptr = &cond_chunk;
  }

  Tensor pred = model.predict(x, tc, cond_ptr);
  return mse(slice_rows(pred, half_rows, half_rows), d.eps);
}

inline Tensor streaming_train_batch(const EpsilonModel& model, const DiffusionSchedule& sched,
                                    const PerceptualLatent& v, const Tensor* cond_rows,
                                    const ChunkPlan& plan, Rng& rng) {
  return streaming_loss_at(model, sched, v, cond_rows, plan,
                           draw_streaming_batch(v, plan, sched, rng));
}

// ---------------------------------------------------------------------------
// Ancestral sampling

// Denoises `target_frames` fresh latent frames from pure noise. When a clean
// prompt is given it is prepended to every forward pass at the prompt time
// value but never noised or returned. `t_start` is the absolute frame index
// of the first input row (the prompt when present).
inline Tensor denoise_chunk(const EpsilonModel& model, const DiffusionSchedule& sched,
                            const Tensor* cond_rows, const Tensor* prompt_rows,
                            int64_t target_frames, int64_t h_cells, int64_t w_cells, int64_t dim,
                            int64_t t_start, real prompt_time_value, Rng& rng) {
  if (target_frames < 1) throw config_error("denoise: need at least one target frame");
  NoGradGuard no_grad;
  const int64_t cells = h_cells * w_cells;
  int64_t prompt_frames = 0;
  if (prompt_rows != nullptr) {
    if (prompt_rows->shape.size() != 2 || prompt_rows->shape[1] != dim ||
        prompt_rows->shape[0] % cells != 0)
      throw config_error("denoise: prompt rows do not fit the grid");
    prompt_frames = prompt_rows->shape[0] / cells;
  }
  const int64_t half_rows = prompt_frames * cells;
  const int64_t target_rows = target_frames * cells;

  Tensor x = randn({target_rows, dim}, rng);
  for (int64_t t = sched.steps - 1; t >= 0; --t) {
    const real abar = sched.alphas_cum[size_t(t)];
    TimeConditioning tc;
    tc.t_frames = prompt_frames + target_frames;
    tc.h_cells = h_cells;
    tc.w_cells = w_cells;
    tc.t_start = t_start;
    tc.tau.assign(size_t(half_rows), prompt_time_value);
    tc.tau.insert(tc.tau.end(), size_t(target_rows), abar);
    tc.alpha_bar.assign(size_t(half_rows), real(1));
    tc.alpha_bar.insert(tc.alpha_bar.end(), size_t(target_rows), abar);

    Tensor full_x = prompt_rows ? concat_rows({*prompt_rows, x}) : x;
    Tensor eps_hat = model.predict(full_x, tc, cond_rows);
    if (prompt_rows) eps_hat = slice_rows(eps_hat, half_rows, target_rows);

    const real beta = sched.betas[size_t(t)];
    const real alpha = real(1) - beta;
    x = scale(sub(x, scale(eps_hat, beta / std::sqrt(real(1) - abar))),
              real(1) / std::sqrt(alpha));
    if (t > 0) {
      const real abar_prev = sched.alphas_cum[size_t(t - 1)];
      const real sigma = std::sqrt((real(1) - abar_prev) / (real(1) - abar) * beta);
      x = add(x, scale(randn({target_rows, dim}, rng), sigma));
    }
  }
  return x;
}

struct LongSampleResult {
  Tensor latents;  // (t_total*h*w) x dim
  int64_t denoise_calls = 0;
};

// First chunk from scratch (up to L frames), then repeated half-chunk
// extensions, each prompted by the last L/2 generated frames. `cond_rows`
// spans the full timeline at one feature frame per latent frame.
inline LongSampleResult generate_long_latents(const EpsilonModel& model,
                                              const DiffusionSchedule& sched,
                                              const Tensor& cond_rows, int64_t t_total,
                                              int64_t h_cells, int64_t w_cells, int64_t dim,
                                              const ChunkPlan& plan, Rng& rng) {
  plan.validate();
  if (t_total < 1) throw config_error("generate: empty latent timeline");
  if (cond_rows.shape.size() != 2 || cond_rows.shape[0] % t_total != 0)
    throw config_error("generate: feature rows must align with latent frames");
  const int64_t cells_f = cond_rows.shape[0] / t_total;
  const int64_t cells = h_cells * w_cells;

  LongSampleResult res;
  const int64_t first = std::min(plan.chunk_len, t_total);
  Tensor cond0 = slice_rows(cond_rows, 0, first * cells_f);
  res.latents = denoise_chunk(model, sched, &cond0, nullptr, first, h_cells, w_cells, dim, 0,
                              plan.prompt_time_value, rng);
  res.denoise_calls = 1;

  int64_t covered = first;
  while (covered < t_total) {
    const int64_t fresh = std::min(plan.half(), t_total - covered);
    const int64_t p0 = covered - plan.half();
    Tensor prompt = slice_rows(res.latents, p0 * cells, plan.half() * cells);
    Tensor cond_chunk = slice_rows(cond_rows, p0 * cells_f, (plan.half() + fresh) * cells_f);
    Tensor next = denoise_chunk(model, sched, &cond_chunk, &prompt, fresh, h_cells, w_cells, dim,
                                p0, plan.prompt_time_value, rng);
    res.latents = concat_rows({res.latents, next});
    covered += fresh;
    ++res.denoise_calls;
  }
  return res;
}

// ---------------------------------------------------------------------------
// 1D Gaussian-mixture toy: checks the full DDPM loop (loss, training,
// ancestral sampling) on a target whose moments are known in closed form.

struct GmmSpec {
  real w0 = real(0.3), mean0 = real(-1), std0 = real(0.5);
  real w1 = real(0.7), mean1 = real(3), std1 = real(0.5);

  real mean() const { return w0 * mean0 + w1 * mean1; }
  real variance() const {
    const real second =
        w0 * (mean0 * mean0 + std0 * std0) + w1 * (mean1 * mean1 + std1 * std1);
    return second - mean() * mean();
  }
  real sample(Rng& rng) const {
    return rng.uniform() < double(w0) ? mean0 + std0 * real(rng.gaussian())
                                      : mean1 + std1 * real(rng.gaussian());
  }
};

class GmmDenoiser final : public EpsilonModel {
 public:
  GmmDenoiser(int64_t hidden, int64_t time_feat, uint64_t seed) : time_feat_(time_feat) {
    Rng rng(Rng::derive(seed, "gmm"));
    fc1_ = Linear(reg_, "gmm.fc1", 1 + time_feat, hidden, rng);
    fc2_ = Linear(reg_, "gmm.fc2", hidden, hidden, rng);
    fc3_ = Linear(reg_, "gmm.fc3", hidden, 1, rng);
  }

  Tensor predict(const Tensor& x, const TimeConditioning& tc, const Tensor* cond) const override {
    if (cond != nullptr) throw config_error("gmm denoiser is unconditional");
    if (x.shape.size() != 2 || x.shape[1] != 1)
      throw config_error("gmm denoiser: expects single-column rows");
    if (int64_t(tc.tau.size()) != x.shape[0])
      throw config_error("gmm denoiser: time conditioning size mismatch");
    Tensor f = concat_cols({x, time_features(tc.tau, time_feat_)});
    return fc3_(gelu(fc2_(gelu(fc1_(f)))));
  }

  ParamRegistry& params() { return reg_; }

 private:
  ParamRegistry reg_;
  Linear fc1_, fc2_, fc3_;
  int64_t time_feat_ = 16;
};

struct GmmTrainConfig {
  int64_t steps = 500;
  int64_t batch = 256;
  int64_t hidden = 64;
  int64_t time_feat = 16;
  int64_t sched_steps = 50;
  real beta_min = real(0.002), beta_max = real(0.25);
  real peak_lr = real(2e-3);
  real weight_decay = real(0);
  int64_t warmup = 25;
  int64_t sample_count = 4000;
  uint64_t seed = 7;
};

struct GmmTrainResult {
  std::shared_ptr<GmmDenoiser> model;
  std::vector<real> loss_history;
  real sample_mean = 0;
  real sample_variance = 0;
};

inline GmmTrainResult train_gmm_toy(const GmmSpec& spec, const GmmTrainConfig& cfg = {}) {
  const DiffusionSchedule sched = make_schedule(cfg.sched_steps, cfg.beta_min, cfg.beta_max);
  GmmTrainResult res;
  res.model = std::make_shared<GmmDenoiser>(cfg.hidden, cfg.time_feat, cfg.seed);
  Rng rng(Rng::derive(cfg.seed, "gmmtrain"));

  AdamWConfig ocfg;
  ocfg.peak_lr = double(cfg.peak_lr);
  ocfg.weight_decay = double(cfg.weight_decay);
  ocfg.total_steps = cfg.steps;
  ocfg.warmup_steps = cfg.warmup;
  AdamW optim(res.model->params().trainable(), ocfg);

  for (int64_t step = 0; step < cfg.steps; ++step) {
    // Per-row schedule index: every batch element gets its own noise level.
    Tensor x0 = zeros({cfg.batch, 1});
    for (int64_t r = 0; r < cfg.batch; ++r) x0.at(r, 0) = spec.sample(rng);
    TimeConditioning tc;
    tc.t_frames = cfg.batch;
    tc.h_cells = tc.w_cells = 1;
    Tensor sq_ab = zeros({cfg.batch, 1});
    Tensor sq_rest = zeros({cfg.batch, 1});
    for (int64_t r = 0; r < cfg.batch; ++r) {
      const real abar = sched.alphas_cum[rng.below(uint64_t(sched.steps))];
      tc.tau.push_back(abar);
      tc.alpha_bar.push_back(abar);
      sq_ab.at(r, 0) = std::sqrt(abar);
      sq_rest.at(r, 0) = std::sqrt(real(1) - abar);
    }
    Tensor eps = randn({cfg.batch, 1}, rng);
    Tensor noisy = add(mul(x0, sq_ab), mul(eps, sq_rest));
    Tensor loss = mse(res.model->predict(noisy, tc, nullptr), eps);
    res.loss_history.push_back(scalar_value(loss));
    optim.zero_grad();
    backward(loss);
    optim.step();
  }

  Tensor samples = denoise_chunk(*res.model, sched, nullptr, nullptr,
                                 /*target_frames=*/cfg.sample_count, 1, 1, 1, 0, real(0.999),
                                 rng);
  double acc = 0, acc2 = 0;
  for (int64_t r = 0; r < cfg.sample_count; ++r) {
    const double v = double(samples.at(r, 0));
    acc += v;
    acc2 += v * v;
  }
  res.sample_mean = real(acc / double(cfg.sample_count));
  res.sample_variance = real(acc2 / double(cfg.sample_count) - double(res.sample_mean) *
                                                                   double(res.sample_mean));
  return res;
}

// ---------------------------------------------------------------------------
// Video training: the main network first learns plain unconditional
// denoising, then is frozen while the control branch learns to steer it from
// semantic features, mixing whole-window losses with streaming chunk losses.

struct DiffusionTrainConfig {
  int64_t main_steps = 400;
  int64_t branch_steps = 600;
  real peak_lr = real(1e-3);
  real weight_decay = real(1e-4);
  int64_t warmup = 50;
  real final_lr_factor = real(0.1);
  real streaming_fraction = real(0.5);
  ChunkPlan plan;
  int64_t crop_frames = 4;  // latent frames per plain-loss window
  uint64_t seed = 3;
};

struct DiffusionTrainResult {
  std::shared_ptr<VideoDenoiser> model;
  std::vector<real> main_loss;
  std::vector<real> branch_loss;
};

inline DiffusionTrainResult train_video_denoiser(const std::vector<PerceptualLatent>& latents,
                                                 const std::vector<Tensor>& cond_rows,
                                                 const DiffusionConfig& cfg,
                                                 const DiffusionTrainConfig& tcfg) {
  if (latents.empty()) throw config_error("train denoiser: empty corpus");
  if (cond_rows.size() != latents.size())
    throw config_error("train denoiser: need one feature grid per latent clip");
  for (const auto& lat : latents)
    if (lat.d_l != cfg.latent_dim)
      throw config_error("train denoiser: latent channels do not match the config");
  const DiffusionSchedule sched = cfg.schedule();
  DiffusionTrainResult res;
  res.model = std::make_shared<VideoDenoiser>(cfg, tcfg.seed);
  Rng rng(Rng::derive(tcfg.seed, "difftrain"));

  const auto run_phase = [&](int64_t steps, bool conditioned, std::vector<real>& history) {
    if (steps <= 0) return;
    AdamWConfig ocfg;
    ocfg.peak_lr = double(tcfg.peak_lr);
    ocfg.weight_decay = double(tcfg.weight_decay);
    ocfg.total_steps = steps;
    ocfg.warmup_steps = std::min(tcfg.warmup, steps);
    ocfg.final_lr_factor = double(tcfg.final_lr_factor);
    AdamW optim(conditioned ? res.model->branch_params().trainable()
                            : res.model->main_params().trainable(),
                ocfg);
    for (int64_t step = 0; step < steps; ++step) {
      const size_t i = size_t(rng.below(latents.size()));
      const PerceptualLatent& lat = latents[i];
      const int64_t cells = lat.h_l * lat.w_l;
      try {
        Tensor loss;
        const bool stream = conditioned && lat.t_l >= tcfg.plan.chunk_len &&
                            rng.uniform() < double(tcfg.streaming_fraction);
        if (stream) {
          loss = streaming_train_batch(*res.model, sched, lat, &cond_rows[i], tcfg.plan, rng);
        } else {
          const int64_t crop = std::min(tcfg.crop_frames, lat.t_l);
          const int64_t f0 = int64_t(rng.below(uint64_t(lat.t_l - crop + 1)));
          Tensor window = slice_rows(lat.values, f0 * cells, crop * cells);
          Tensor cond_window;
          const Tensor* cond = nullptr;
          if (conditioned) {
            const int64_t cells_f = cond_rows[i].shape[0] / lat.t_l;
            cond_window = slice_rows(cond_rows[i], f0 * cells_f, crop * cells_f);
            cond = &cond_window;
          }
          loss = diffusion_loss(*res.model, sched, window, cond, crop, lat.h_l, lat.w_l, rng, f0);
        }
        history.push_back(scalar_value(loss));
        optim.zero_grad();
        backward(loss);
        optim.step();
      } catch (const numeric_error& e) {
        throw numeric_error(std::string(e.what()) + " (denoiser step " + std::to_string(step) +
                            ")");
      }
    }
  };

  run_phase(tcfg.main_steps, /*conditioned=*/false, res.main_loss);
  res.model->build_control_branch();
  run_phase(tcfg.branch_steps, /*conditioned=*/true, res.branch_loss);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpointing

inline void save_video_denoiser(const std::string& path, const VideoDenoiser& model,
                                uint64_t seed = 0,
                                std::map<std::string, std::string> extra_meta = {}) {
  std::map<std::string, std::string> meta = std::move(extra_meta);
  meta_set(meta, "kind", std::string("diffusion"));
  model.config().to_meta(meta, "diff.");
  meta_set(meta, "diff.has_control", model.has_control());
  meta_set(meta, "diff.seed", int64_t(seed));
  auto tensors = model.main_params().named_tensors();
  auto branch = model.branch_params().named_tensors();
  tensors.insert(tensors.end(), branch.begin(), branch.end());
  save_checkpoint(path, tensors, meta);
}

struct LoadedDenoiser {
  DiffusionConfig cfg;
  std::shared_ptr<VideoDenoiser> model;
  std::map<std::string, std::string> meta;
};

inline LoadedDenoiser load_video_denoiser(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta_str("kind") != "diffusion")
    throw io_error("checkpoint at " + path + " is not a diffusion model");
  LoadedDenoiser out;
  out.meta = ck.meta;
  out.cfg = DiffusionConfig::from_meta(ck, "diff.");
  out.model = std::make_shared<VideoDenoiser>(out.cfg, uint64_t(ck.meta_i64("diff.seed")));
  if (ck.meta_bool("diff.has_control")) out.model->build_control_branch();
  out.model->main_params().load_values(ck);
  out.model->branch_params().load_values(ck);
  return out;
}

}  // namespace landiff
