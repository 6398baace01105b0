#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "landiff/checkpoint.hpp"
#include "landiff/codebook.hpp"
#include "landiff/common.hpp"
#include "landiff/corpus.hpp"
#include "landiff/grouping.hpp"
#include "landiff/masks.hpp"
#include "landiff/optim.hpp"
#include "landiff/rng.hpp"
#include "landiff/tensor.hpp"
#include "landiff/token_stream.hpp"
#include "landiff/transformer.hpp"

namespace landiff {

struct TokenizerConfig {
  int64_t feat_dim = 32;
  int64_t hidden = 128;
  int64_t mlp_hidden = 512;
  int n_layers = 4;  // encoder and decoder depth each
  int n_heads = 4;
  int64_t vocab = 64;
  int64_t d_code = 8;
  int64_t group_size = 5;
  int64_t iframe_queries = 12;
  int64_t pframe_queries = 4;
  double overlap_ratio = 0.2;
  bool query_to_query = true;
  real rope_theta = real(10000);

  FrameGroupPlan plan_for(int64_t feature_frames) const {
    return plan_groups(feature_frames, group_size, iframe_queries, pframe_queries, overlap_ratio);
  }

  void to_meta(std::map<std::string, std::string>& meta, const std::string& prefix) const {
    meta_set(meta, prefix + "feat_dim", feat_dim);
    meta_set(meta, prefix + "hidden", hidden);
    meta_set(meta, prefix + "mlp_hidden", mlp_hidden);
    meta_set(meta, prefix + "n_layers", int64_t(n_layers));
    meta_set(meta, prefix + "n_heads", int64_t(n_heads));
    meta_set(meta, prefix + "vocab", vocab);
    meta_set(meta, prefix + "d_code", d_code);
    meta_set(meta, prefix + "group_size", group_size);
    meta_set(meta, prefix + "iframe_queries", iframe_queries);
    meta_set(meta, prefix + "pframe_queries", pframe_queries);
    meta_set(meta, prefix + "overlap_ratio", overlap_ratio);
    meta_set(meta, prefix + "query_to_query", query_to_query);
    meta_set(meta, prefix + "rope_theta", double(rope_theta));
  }

  static TokenizerConfig from_meta(const Checkpoint& ck, const std::string& prefix) {
    TokenizerConfig c;
    c.feat_dim = ck.meta_i64(prefix + "feat_dim");
    c.hidden = ck.meta_i64(prefix + "hidden");
    c.mlp_hidden = ck.meta_i64(prefix + "mlp_hidden");
    c.n_layers = int(ck.meta_i64(prefix + "n_layers"));
    c.n_heads = int(ck.meta_i64(prefix + "n_heads"));
    c.vocab = ck.meta_i64(prefix + "vocab");
    c.d_code = ck.meta_i64(prefix + "d_code");
    c.group_size = ck.meta_i64(prefix + "group_size");
    c.iframe_queries = ck.meta_i64(prefix + "iframe_queries");
    c.pframe_queries = ck.meta_i64(prefix + "pframe_queries");
    c.overlap_ratio = ck.meta_f64(prefix + "overlap_ratio");
    c.query_to_query = ck.meta_bool(prefix + "query_to_query");
    c.rope_theta = real(ck.meta_f64(prefix + "rope_theta"));
    return c;
  }
};

// Query-token transformer encoder/decoder around the quantizer. The encoder
// runs per group over [features ∥ queries] with the frame-causal mask and
// keeps the query rows; the decoder runs over [mask tokens ∥ quantized
// queries] and keeps the mask-token rows.
class TokenizerModel {
 public:
  TokenizerModel(TokenizerConfig cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(Rng::derive(seed, "tokenizer-init"));
    const real qs = real(1.0 / std::sqrt(double(cfg.hidden)));
    enc_in_ = Linear(reg_, "enc.in", cfg.feat_dim, cfg.hidden, rng);
    q_iframe_ = reg_.create("enc.q_iframe", {cfg.iframe_queries, cfg.hidden}, rng, qs);
    q_pframe_ = reg_.create("enc.q_pframe", {cfg.pframe_queries, cfg.hidden}, rng, qs);
    encoder_ = TransformerStack(reg_, "enc", cfg.n_layers, cfg.hidden, cfg.mlp_hidden,
                                cfg.n_heads, rng, cfg.n_layers > 0);
    enc_out_ = Linear(reg_, "enc.out", cfg.hidden, cfg.d_code, rng);
    dec_in_ = Linear(reg_, "dec.in", cfg.d_code, cfg.hidden, rng);
    mask_embed_ = reg_.create("dec.mask_embed", {1, cfg.hidden}, rng, qs);
    decoder_ = TransformerStack(reg_, "dec", cfg.n_layers, cfg.hidden, cfg.mlp_hidden,
                                cfg.n_heads, rng, cfg.n_layers > 0);
    dec_out_ = Linear(reg_, "dec.out", cfg.hidden, cfg.feat_dim, rng);
  }

  const TokenizerConfig& config() const { return cfg_; }
  ParamRegistry& params() { return reg_; }
  const ParamRegistry& params() const { return reg_; }

  // Query rows of every group, concatenated in frame order: (total_tokens x d_code).
  Tensor encode(const SemanticFeatureGrid& grid, const FrameGroupPlan& plan) const {
    check_grid(grid, plan);
    const int64_t fpf = grid.meta.h_f * grid.meta.w_f;
    std::vector<Tensor> parts;
    for (size_t g = 0; g < plan.groups.size(); ++g) {
      const auto [s, e] = plan.groups[g];
      const int64_t gf = e - s + 1;
      Tensor feats = enc_in_(slice_rows(grid.values, s * fpf, gf * fpf));
      std::vector<Tensor> qparts = {q_iframe_};
      for (int64_t f = 1; f < gf; ++f) qparts.push_back(q_pframe_);
      Tensor x = concat_rows({feats, concat_rows(qparts)});
      const AttentionMaskSpec masks = group_masks(gf, fpf);
      const RopePositions rope = group_rope(gf, grid.meta);
      Tensor h = encoder_.forward(x, masks.encoder_mask, rope);
      parts.push_back(enc_out_(slice_rows(h, gf * fpf, masks.n_queries)));
    }
    return parts.size() == 1 ? parts[0] : concat_rows(parts);
  }

  // Decodes quantized query rows back to a feature grid tensor. Frames
  // covered by several groups take the output of the latest group (it
  // conditions on the most context).
  Tensor decode_rows(const Tensor& zq, const FrameGroupPlan& plan, const GridMeta& meta) const {
    if (zq.cols() != cfg_.d_code) throw config_error("decode_rows: code width mismatch");
    if (zq.rows() != plan.total_tokens())
      throw config_error("decode_rows: token count does not match plan");
    const int64_t fpf = meta.h_f * meta.w_f;
    std::vector<Tensor> contributions;
    int64_t offset = 0;
    for (size_t g = 0; g < plan.groups.size(); ++g) {
      const auto [s, e] = plan.groups[g];
      const int64_t gf = e - s + 1;
      const int64_t n_q = plan.tokens_in_group(g);
      Tensor qh = dec_in_(slice_rows(zq, offset, n_q));
      offset += n_q;
      Tensor masks_in = gather_rows(mask_embed_, std::vector<int64_t>(size_t(gf * fpf), 0));
      Tensor x = concat_rows({masks_in, qh});
      const AttentionMaskSpec masks = group_masks(gf, fpf);
      const RopePositions rope = group_rope(gf, meta);
      Tensor h = decoder_.forward(x, masks.decoder_mask, rope);
      Tensor out_g = dec_out_(slice_rows(h, 0, gf * fpf));
      const bool last = g + 1 == plan.groups.size();
      const int64_t keep_end = last ? e : std::min(e, plan.groups[g + 1].first - 1);
      contributions.push_back(slice_rows(out_g, 0, (keep_end - s + 1) * fpf));
    }
    return contributions.size() == 1 ? contributions[0] : concat_rows(contributions);
  }

  SemanticFeatureGrid decode(const TokenStream& ts, const Codebook& cb,
                             const GridMeta& meta) const {
    ts.validate();
    if (ts.vocab != cb.vocab) throw config_error("decode: stream vocab != codebook vocab");
    NoGradGuard ng;
    Tensor zq = zeros({int64_t(ts.ids.size()), cb.d_code});
    for (size_t i = 0; i < ts.ids.size(); ++i) {
      const real* c = cb.code(ts.ids[i]);
      std::copy(c, c + cb.d_code, zq.data->begin() + int64_t(i) * cb.d_code);
    }
    SemanticFeatureGrid grid;
    grid.meta = meta;
    grid.values = decode_rows(zq, ts.plan(), meta);
    return grid;
  }

  AttentionMaskSpec group_masks(int64_t frames, int64_t fpf) const {
    return build_group_masks(frames, fpf, cfg_.iframe_queries, cfg_.pframe_queries,
                             cfg_.query_to_query);
  }

 private:
  void check_grid(const SemanticFeatureGrid& grid, const FrameGroupPlan& plan) const {
    if (grid.meta.dim != cfg_.feat_dim) throw config_error("encode: feature dim mismatch");
    if (plan.feature_frames != grid.meta.t_f)
      throw config_error("encode: plan does not cover the grid's frames");
    if (grid.values.rows() != grid.meta.t_f * grid.meta.h_f * grid.meta.w_f)
      throw config_error("encode: grid row count inconsistent with meta");
  }

  // Positions: features/mask tokens at (t, y, x); query slot q of frame t at
  // (t, q, W_f) — the off-grid w coordinate separates queries from features.
  RopePositions group_rope(int64_t frames, const GridMeta& meta) const {
    std::vector<std::array<int64_t, 3>> coords;
    for (int64_t t = 0; t < frames; ++t)
      for (int64_t y = 0; y < meta.h_f; ++y)
        for (int64_t x = 0; x < meta.w_f; ++x) coords.push_back({t, y, x});
    for (int64_t t = 0; t < frames; ++t) {
      const int64_t nq = queries_for_frame(t, cfg_.iframe_queries, cfg_.pframe_queries);
      for (int64_t q = 0; q < nq; ++q) coords.push_back({t, q, meta.w_f});
    }
    return RopePositions::rope3d(std::move(coords), cfg_.rope_theta);
  }

  TokenizerConfig cfg_;
  ParamRegistry reg_;
  Linear enc_in_, enc_out_, dec_in_, dec_out_;
  Tensor q_iframe_, q_pframe_, mask_embed_;
  TransformerStack encoder_, decoder_;

  friend struct TokenizerTestAccess;
};

// Test hook: lets identity-head configurations be constructed explicitly.
struct TokenizerTestAccess {
  static Linear& enc_out(TokenizerModel& m) { return m.enc_out_; }
  static Linear& dec_out(TokenizerModel& m) { return m.dec_out_; }
  static Linear& enc_in(TokenizerModel& m) { return m.enc_in_; }
  static Linear& dec_in(TokenizerModel& m) { return m.dec_in_; }
  static Tensor& mask_embed(TokenizerModel& m) { return m.mask_embed_; }
  static Tensor& q_iframe(TokenizerModel& m) { return m.q_iframe_; }
  static Tensor& q_pframe(TokenizerModel& m) { return m.q_pframe_; }
};

struct QuantizeOut {
  TokenStream stream;
  Tensor zq;
  int64_t zero_norm_rows = 0;
};

inline QuantizeOut quantize(const Tensor& z, Codebook& cb, const FrameGroupPlan& plan) {
  Assignment a = assign_codes(z, cb);
  cb.zero_norm_inputs += a.zero_norm_rows;
  QuantizeOut out;
  out.stream = make_token_stream(a.ids, plan, cb.vocab);
  out.zq = quantized_rows(z, cb, a.ids);
  out.zero_norm_rows = a.zero_norm_rows;
  return out;
}

// L2-norm reconstruction plus stop-gradient commitment term.
inline Tensor tokenizer_loss(const Tensor& f, const Tensor& f_hat, const Tensor& z,
                             const Tensor& zq, real lambda_rec = real(1),
                             real lambda_commit = real(1)) {
  Tensor loss = scale(l2_norm(sub(f_hat, f)), lambda_rec);
  if (lambda_commit != real(0))
    loss = add(loss, scale(l2_norm(sub(detach(zq), z)), lambda_commit));
  return loss;
}

// ---------------------------------------------------------------------------
// Training

struct TokenizerTrainConfig {
  int64_t steps = 2000;
  double peak_lr = 1e-3;
  double weight_decay = 1e-4;
  int64_t warmup_steps = 100;
  uint64_t seed = 1;
  real lambda_rec = real(1);
  real lambda_commit = real(1);
  bool model_ema = false;    // EMA of network weights, applied at save time
  double model_ema_decay = 0.8;
  bool codebook_grad = false;  // direct gradient to codes instead of EMA stats
};

struct TokenizerTrainResult {
  std::shared_ptr<TokenizerModel> model;
  Codebook codebook;
  std::vector<double> loss_history;
  std::vector<double> i_frame_mse;  // per-step reconstruction error on I frames
  std::vector<double> p_frame_mse;
  double init_recon_mse = 0;
  double final_recon_mse = 0;
};

// Mean reconstruction MSE over a corpus with the current weights/codebook.
inline double tokenizer_recon_mse(const TokenizerModel& model, const Codebook& cb,
                                  const std::vector<SemanticFeatureGrid>& grids) {
  NoGradGuard ng;
  double acc = 0;
  for (const auto& grid : grids) {
    const FrameGroupPlan plan = model.config().plan_for(grid.meta.t_f);
    Tensor z = model.encode(grid, plan);
    Assignment a = assign_codes(z, cb);
    Tensor zq = quantized_rows(z, cb, a.ids);
    Tensor f_hat = model.decode_rows(zq, plan, grid.meta);
    acc += double(scalar_value(mse(f_hat, grid.values)));
  }
  return acc / double(grids.size());
}

// Frame f's class under the decode tiling: the group that owns f in the
// output starts at f iff f is that group's I-frame.
inline std::vector<uint8_t> iframe_flags(const FrameGroupPlan& plan) {
  std::vector<uint8_t> flags(size_t(plan.feature_frames), 0);
  for (const auto& [s, e] : plan.groups)
    if (s < plan.feature_frames) flags[size_t(s)] = 1;
  return flags;
}

inline TokenizerTrainResult train_tokenizer(const std::vector<VideoClip>& corpus,
                                            const TokenizerConfig& cfg,
                                            const TokenizerTrainConfig& tcfg) {
  if (corpus.empty()) throw config_error("train_tokenizer: empty corpus");
  TokenizerTrainResult res;
  res.model = std::make_shared<TokenizerModel>(cfg, tcfg.seed);
  TokenizerModel& model = *res.model;

  Rng cb_rng(Rng::derive(tcfg.seed, "codebook"));
  res.codebook = init_codebook(cfg.vocab, cfg.d_code, cb_rng);
  Codebook& cb = res.codebook;

  std::vector<SemanticFeatureGrid> grids;
  grids.reserve(corpus.size());
  for (const auto& clip : corpus) grids.push_back(extract_features(clip));

  // Optional direct-gradient codebook: codes become a trainable table and the
  // EMA/reseeding machinery stays off.
  Tensor code_table;
  if (tcfg.codebook_grad) {
    code_table = make_tensor({cfg.vocab, cfg.d_code}, cb.codes, /*requires_grad=*/true);
    model.params().add("codebook.table", code_table, true);
  }

  AdamWConfig ocfg;
  ocfg.peak_lr = tcfg.peak_lr;
  ocfg.weight_decay = tcfg.weight_decay;
  ocfg.total_steps = tcfg.steps;
  ocfg.warmup_steps = std::min(tcfg.warmup_steps, tcfg.steps);
  AdamW optim(model.params().trainable(), ocfg);

  WeightEma ema;
  if (tcfg.model_ema) ema = WeightEma(model.params(), tcfg.model_ema_decay);

  res.init_recon_mse = tokenizer_recon_mse(model, cb, grids);

  Rng reseed_rng(Rng::derive(tcfg.seed, "reseed"));
  for (int64_t step = 0; step < tcfg.steps; ++step) {
    const SemanticFeatureGrid& grid = grids[size_t(step % int64_t(grids.size()))];
    const FrameGroupPlan plan = cfg.plan_for(grid.meta.t_f);
    try {
      Tensor z = model.encode(grid, plan);
      if (tcfg.codebook_grad)
        std::copy(code_table.data->begin(), code_table.data->end(), cb.codes.begin());
      Assignment a = assign_codes(z, cb);
      cb.zero_norm_inputs += a.zero_norm_rows;
      Tensor zq = quantized_rows(z, cb, a.ids);
      Tensor f_hat = model.decode_rows(zq, plan, grid.meta);
      Tensor loss = tokenizer_loss(grid.values, f_hat, z, zq, tcfg.lambda_rec,
                                   tcfg.lambda_commit);
      if (tcfg.codebook_grad)
        loss = add(loss, l2_norm(sub(gather_rows(code_table, a.ids), detach(z))));
      res.loss_history.push_back(double(scalar_value(loss)));

      optim.zero_grad();
      backward(loss);
      optim.step();

      if (tcfg.codebook_grad) {
        for (int64_t k = 0; k < cb.vocab; ++k) {
          std::copy(code_table.data->begin() + k * cb.d_code,
                    code_table.data->begin() + (k + 1) * cb.d_code, cb.code(k));
          cb.normalize_code(k);
          std::copy(cb.code(k), cb.code(k) + cb.d_code,
                    code_table.data->begin() + k * cb.d_code);
        }
      } else {
        ema_update(cb, a.ids, detach(z), reseed_rng);
      }
      if (tcfg.model_ema) ema.update();

      // Per-frame-type reconstruction error under the decode tiling.
      const auto flags = iframe_flags(plan);
      const int64_t fpf = grid.meta.h_f * grid.meta.w_f;
      double i_acc = 0, p_acc = 0;
      int64_t i_n = 0, p_n = 0;
      for (int64_t f = 0; f < plan.feature_frames; ++f) {
        double frame_acc = 0;
        for (int64_t r = f * fpf; r < (f + 1) * fpf; ++r)
          for (int64_t c = 0; c < grid.meta.dim; ++c) {
            const double d = double(f_hat.at(r, c)) - double(grid.values.at(r, c));
            frame_acc += d * d;
          }
        frame_acc /= double(fpf * grid.meta.dim);
        if (flags[size_t(f)]) {
          i_acc += frame_acc;
          ++i_n;
        } else {
          p_acc += frame_acc;
          ++p_n;
        }
      }
      res.i_frame_mse.push_back(i_n ? i_acc / double(i_n) : 0.0);
      res.p_frame_mse.push_back(p_n ? p_acc / double(p_n) : 0.0);
    } catch (const numeric_error& e) {
      throw numeric_error("train_tokenizer: diverged at step " + std::to_string(step) + ": " +
                          e.what());
    }
  }

  if (tcfg.model_ema) ema.copy_to_params();
  res.final_recon_mse = tokenizer_recon_mse(model, cb, grids);
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_tokenizer(const std::string& path, const TokenizerModel& model,
                           const Codebook& cb,
                           std::map<std::string, std::string> extra_meta = {}) {
  auto tensors = model.params().named_tensors();
  tensors.emplace_back("codebook.codes",
                       make_tensor({cb.vocab, cb.d_code}, cb.codes));
  tensors.emplace_back("codebook.ema_counts", make_tensor({cb.vocab}, cb.ema_counts));
  tensors.emplace_back("codebook.ema_sums",
                       make_tensor({cb.vocab, cb.d_code}, cb.ema_sums));
  std::map<std::string, std::string> meta = std::move(extra_meta);
  model.config().to_meta(meta, "tok.");
  meta_set(meta, "tok.codebook_decay", double(cb.decay));
  meta_set(meta, "kind", std::string("tokenizer"));
  save_checkpoint(path, tensors, meta);
}

struct LoadedTokenizer {
  TokenizerConfig cfg;
  std::shared_ptr<TokenizerModel> model;
  Codebook codebook;
  std::map<std::string, std::string> meta;
};

inline LoadedTokenizer load_tokenizer(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.count("kind") && ck.meta.at("kind") != "tokenizer")
    throw io_error("checkpoint is not a tokenizer: " + path);
  LoadedTokenizer lt;
  lt.cfg = TokenizerConfig::from_meta(ck, "tok.");
  lt.model = std::make_shared<TokenizerModel>(lt.cfg, /*seed=*/0);
  lt.model->params().load_values(ck);
  lt.codebook.vocab = lt.cfg.vocab;
  lt.codebook.d_code = lt.cfg.d_code;
  lt.codebook.decay = real(ck.meta_f64("tok.codebook_decay"));
  lt.codebook.codes = *ck.require("codebook.codes").data;
  lt.codebook.ema_counts = *ck.require("codebook.ema_counts").data;
  lt.codebook.ema_sums = *ck.require("codebook.ema_sums").data;
  lt.meta = ck.meta;
  return lt;
}

}  // namespace landiff
