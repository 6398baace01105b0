#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "landiff/checkpoint.hpp"
#include "landiff/common.hpp"
#include "landiff/corpus.hpp"
#include "landiff/grouping.hpp"
#include "landiff/optim.hpp"
#include "landiff/rng.hpp"
#include "landiff/tensor.hpp"
#include "landiff/token_stream.hpp"
#include "landiff/transformer.hpp"

namespace landiff {

struct LmConfig {
  int64_t code_vocab = 64;  // K; EOS=K, BOS=K+1, PAD=K+2; logits cover K+1 classes
  int64_t hidden = 128;
  int64_t mlp_hidden = 512;
  int n_layers = 4;
  int n_heads = 4;
  int64_t mc_hidden = 64;          // micro-conditioner width
  int64_t max_feature_frames = 64;  // frame-count buckets 0..max, then the null bucket
  int64_t max_caption_len = 8;
  int64_t max_tokens = 512;
  // Token-stream layout, needed to rebuild a plan around sampled ids.
  int64_t group_size = 5;
  int64_t iframe_queries = 12;
  int64_t pframe_queries = 4;
  double overlap_ratio = 0.2;
  int temporal_stride = 2;  // video frames -> feature frames
  real rope_theta = real(10000);

  int64_t eos_id() const { return code_vocab; }
  int64_t bos_id() const { return code_vocab + 1; }
  int64_t logit_classes() const { return code_vocab + 1; }

  int64_t feature_frames_for(int64_t video_frames) const {
    return (video_frames + temporal_stride - 1) / temporal_stride;
  }

  FrameGroupPlan plan_for(int64_t feature_frames) const {
    return plan_groups(feature_frames, group_size, iframe_queries, pframe_queries, overlap_ratio);
  }

  void to_meta(std::map<std::string, std::string>& meta, const std::string& prefix) const {
    meta_set(meta, prefix + "code_vocab", code_vocab);
    meta_set(meta, prefix + "hidden", hidden);
    meta_set(meta, prefix + "mlp_hidden", mlp_hidden);
    meta_set(meta, prefix + "n_layers", int64_t(n_layers));
    meta_set(meta, prefix + "n_heads", int64_t(n_heads));
    meta_set(meta, prefix + "mc_hidden", mc_hidden);
    meta_set(meta, prefix + "max_feature_frames", max_feature_frames);
    meta_set(meta, prefix + "max_caption_len", max_caption_len);
    meta_set(meta, prefix + "max_tokens", max_tokens);
    meta_set(meta, prefix + "group_size", group_size);
    meta_set(meta, prefix + "iframe_queries", iframe_queries);
    meta_set(meta, prefix + "pframe_queries", pframe_queries);
    meta_set(meta, prefix + "overlap_ratio", overlap_ratio);
    meta_set(meta, prefix + "temporal_stride", int64_t(temporal_stride));
    meta_set(meta, prefix + "rope_theta", double(rope_theta));
  }

  static LmConfig from_meta(const Checkpoint& ck, const std::string& prefix) {
    LmConfig c;
    c.code_vocab = ck.meta_i64(prefix + "code_vocab");
    c.hidden = ck.meta_i64(prefix + "hidden");
    c.mlp_hidden = ck.meta_i64(prefix + "mlp_hidden");
    c.n_layers = int(ck.meta_i64(prefix + "n_layers"));
    c.n_heads = int(ck.meta_i64(prefix + "n_heads"));
    c.mc_hidden = ck.meta_i64(prefix + "mc_hidden");
    c.max_feature_frames = ck.meta_i64(prefix + "max_feature_frames");
    c.max_caption_len = ck.meta_i64(prefix + "max_caption_len");
    c.max_tokens = ck.meta_i64(prefix + "max_tokens");
    c.group_size = ck.meta_i64(prefix + "group_size");
    c.iframe_queries = ck.meta_i64(prefix + "iframe_queries");
    c.pframe_queries = ck.meta_i64(prefix + "pframe_queries");
    c.overlap_ratio = ck.meta_f64(prefix + "overlap_ratio");
    c.temporal_stride = int(ck.meta_i64(prefix + "temporal_stride"));
    c.rope_theta = real(ck.meta_f64(prefix + "rope_theta"));
    return c;
  }
};

// Conditions after dropout: a missing optional selects the learned null slot.
struct LmConditions {
  std::optional<Caption> caption;
  std::optional<int64_t> frame_count;  // video frames
  std::optional<real> motion;
};

inline LmConditions lm_conditions(const Caption& caption, const ControlConditions& cc) {
  LmConditions c;
  c.caption = caption;
  c.frame_count = cc.frame_count;
  c.motion = cc.motion_score;
  return c;
}

// Independently nulls text/motion/frames. Draw order is fixed: text first,
// then motion, then frames.
inline LmConditions drop_conditions(const Caption& caption, const ControlConditions& cc, Rng& rng,
                                    double p_text = 0.1, double p_motion = 0.5,
                                    double p_frames = 0.5) {
  LmConditions c = lm_conditions(caption, cc);
  if (rng.bernoulli(p_text)) c.caption.reset();
  if (rng.bernoulli(p_motion)) c.motion.reset();
  if (rng.bernoulli(p_frames)) c.frame_count.reset();
  return c;
}

// Sequence layout: [text slots ∥ frames slot ∥ motion slot ∥ BOS ∥ body (∥ EOS)].
// A nulled caption occupies a single null text slot.
struct LmSequence {
  LmConditions conds;
  std::vector<int64_t> body;
  bool has_eos = false;

  int64_t text_slots() const {
    return conds.caption ? int64_t(conds.caption->token_ids.size()) : 1;
  }
  int64_t prefix_len() const { return text_slots() + 2 + 1; }
  int64_t seq_len() const { return prefix_len() + int64_t(body.size()) + (has_eos ? 1 : 0); }
  // Model inputs exclude the terminal EOS (it is only ever a target).
  int64_t input_len() const { return prefix_len() + int64_t(body.size()); }

  std::vector<int64_t> position_ids() const {
    std::vector<int64_t> pos(static_cast<size_t>(input_len()));
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = int64_t(i);
    return pos;
  }
};

inline LmSequence format_sequence(const LmConditions& conds, const std::vector<int64_t>& body,
                                  bool with_eos, int64_t max_caption_len = 8) {
  if (conds.caption && int64_t(conds.caption->token_ids.size()) > max_caption_len)
    throw config_error("format_sequence: caption over max length");
  if (conds.caption && conds.caption->token_ids.empty())
    throw config_error("format_sequence: empty caption (use the null slot instead)");
  LmSequence seq;
  seq.conds = conds;
  seq.body = body;
  seq.has_eos = with_eos;
  return seq;
}

inline LmSequence format_sequence(const Caption& caption, const ControlConditions& cc,
                                  const TokenStream& tokens, int64_t max_caption_len = 8) {
  return format_sequence(lm_conditions(caption, cc), tokens.ids, /*with_eos=*/true,
                         max_caption_len);
}

inline LmSequence format_sequence(const Caption& caption, const ControlConditions& cc,
                                  int64_t max_caption_len = 8) {
  return format_sequence(lm_conditions(caption, cc), {}, /*with_eos=*/false, max_caption_len);
}

// ---------------------------------------------------------------------------

class LmModel {
 public:
  LmModel(LmConfig cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(Rng::derive(seed, "lm-init"));
    const real es = real(1.0 / std::sqrt(double(cfg.hidden)));
    const real ms = real(1.0 / std::sqrt(double(cfg.mc_hidden)));
    // Text slots: grammar words plus one learned null row (last).
    text_table_ = reg_.create("lm.text_table", {grammar::vocab_size() + 1, cfg.hidden}, rng, es);
    token_table_ = reg_.create("lm.token_table", {cfg.code_vocab + 3, cfg.hidden}, rng, es);
    frames_table_ =
        reg_.create("lm.mc.frames_table", {cfg.max_feature_frames + 2, cfg.mc_hidden}, rng, ms);
    motion_null_ = reg_.create("lm.mc.motion_null", {1, cfg.mc_hidden}, rng, ms);
    motion_fc1_ = Linear(reg_, "lm.mc.motion_fc1", 1, cfg.mc_hidden, rng);
    motion_fc2_ = Linear(reg_, "lm.mc.motion_fc2", cfg.mc_hidden, cfg.mc_hidden, rng);
    frames_proj_ = Linear(reg_, "lm.mc.frames_proj", cfg.mc_hidden, cfg.hidden, rng);
    motion_proj_ = Linear(reg_, "lm.mc.motion_proj", cfg.mc_hidden, cfg.hidden, rng);
    stack_ = TransformerStack(reg_, "lm", cfg.n_layers, cfg.hidden, cfg.mlp_hidden, cfg.n_heads,
                              rng);
    head_ = Linear(reg_, "lm.head", cfg.hidden, cfg.logit_classes(), rng);
  }

  const LmConfig& config() const { return cfg_; }
  ParamRegistry& params() { return reg_; }
  const ParamRegistry& params() const { return reg_; }

  // Logits for every input position: (input_len x (K+1)).
  Tensor logits(const LmSequence& seq) const {
    Tensor x = embed_sequence(seq);
    const int64_t n = x.rows();
    const BoolMask mask = BoolMask::causal(n);
    Tensor h = stack_.forward(x, mask, RopePositions::rope1d(seq.position_ids(), cfg_.rope_theta));
    return head_(h);
  }

  // Targets/weights aligned with logits rows: position i predicts token i+1;
  // only body and EOS predictions carry weight.
  void loss_layout(const LmSequence& seq, std::vector<int64_t>& targets,
                   std::vector<real>& weights) const {
    if (!seq.has_eos) throw config_error("loss_layout: training sequence must end in EOS");
    const int64_t n = seq.input_len();
    targets.assign(size_t(n), 0);
    weights.assign(size_t(n), real(0));
    const int64_t bos_pos = seq.prefix_len() - 1;
    for (size_t i = 0; i < seq.body.size(); ++i) {
      targets[size_t(bos_pos + int64_t(i))] = seq.body[i];
      weights[size_t(bos_pos + int64_t(i))] = real(1);
    }
    targets[size_t(bos_pos + int64_t(seq.body.size()))] = cfg_.eos_id();
    weights[size_t(bos_pos + int64_t(seq.body.size()))] = real(1);
  }

  int64_t loss_positions(const LmSequence& seq) const { return int64_t(seq.body.size()) + 1; }

 private:
  Tensor embed_sequence(const LmSequence& seq) const {
    if (seq.conds.caption && int64_t(seq.conds.caption->token_ids.size()) > cfg_.max_caption_len)
      throw config_error("embed_sequence: caption over max length");
    // Text rows
    std::vector<int64_t> text_ids;
    if (seq.conds.caption)
      for (int id : seq.conds.caption->token_ids) text_ids.push_back(id);
    else
      text_ids.push_back(grammar::vocab_size());  // null slot
    Tensor text_rows = gather_rows(text_table_, text_ids);

    // Frames slot: bucketed feature-frame count, null bucket last.
    int64_t bucket;
    if (seq.conds.frame_count) {
      const int64_t ff = cfg_.feature_frames_for(*seq.conds.frame_count);
      bucket = std::min(ff, cfg_.max_feature_frames);
    } else {
      bucket = cfg_.max_feature_frames + 1;
    }
    Tensor frames_row = frames_proj_(gather_rows(frames_table_, {bucket}));

    // Motion slot: scalar MLP or the learned null vector.
    Tensor motion_mc;
    if (seq.conds.motion) {
      if (*seq.conds.motion < real(0) || *seq.conds.motion > real(1))
        throw config_error("embed_sequence: motion score outside [0,1]");
      Tensor m = make_tensor({1, 1}, {*seq.conds.motion});
      motion_mc = motion_fc2_(gelu(motion_fc1_(m)));
    } else {
      motion_mc = motion_null_;
    }
    Tensor motion_row = motion_proj_(motion_mc);

    std::vector<int64_t> tok_ids = {cfg_.bos_id()};
    for (int64_t id : seq.body) {
      if (id < 0 || id >= cfg_.code_vocab) throw config_error("embed_sequence: body id out of range");
      tok_ids.push_back(id);
    }
    Tensor tok_rows = gather_rows(token_table_, tok_ids);
    return concat_rows({text_rows, frames_row, motion_row, tok_rows});
  }

  LmConfig cfg_;
  ParamRegistry reg_;
  Tensor text_table_, token_table_, frames_table_, motion_null_;
  Linear motion_fc1_, motion_fc2_, frames_proj_, motion_proj_, head_;
  TransformerStack stack_;
};

// Mean cross-entropy over body+EOS positions, pooled across the batch.
inline Tensor lm_loss(const LmModel& model, const std::vector<LmSequence>& batch) {
  if (batch.empty()) throw config_error("lm_loss: empty batch");
  int64_t total = 0;
  for (const auto& seq : batch) total += model.loss_positions(seq);
  Tensor loss;
  bool first = true;
  for (const auto& seq : batch) {
    std::vector<int64_t> targets;
    std::vector<real> weights;
    model.loss_layout(seq, targets, weights);
    Tensor ce = cross_entropy_rows(model.logits(seq), targets, weights);
    Tensor weighted = scale(ce, real(double(model.loss_positions(seq)) / double(total)));
    loss = first ? weighted : add(loss, weighted);
    first = false;
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Sampling

// Multinomial draw from logits; temperature 0 picks the argmax (lowest index
// on ties). No top-k/top-p truncation anywhere.
inline int64_t sample_from_logits(const std::vector<double>& logits, double temperature,
                                  Rng& rng) {
  if (temperature <= 0) {
    int64_t best = 0;
    for (size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[size_t(best)]) best = int64_t(i);
    return best;
  }
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double z = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    z += p[i];
  }
  const double u = rng.uniform() * z;
  double acc = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return int64_t(i);
  }
  return int64_t(p.size()) - 1;
}

// Smallest feature-frame count whose plan emits exactly `count` tokens.
inline std::optional<int64_t> infer_feature_frames(int64_t count, const LmConfig& cfg) {
  for (int64_t f = 1; f <= cfg.max_feature_frames; ++f)
    if (cfg.plan_for(f).total_tokens() == count) return f;
  return std::nullopt;
}

struct SampleResult {
  std::vector<int64_t> ids;
  std::optional<TokenStream> stream;  // set when ids fit a plan
  bool truncated = false;             // max_tokens hit before EOS
  bool frame_count_mismatch = false;  // frames condition set and count differs
  int64_t implied_feature_frames = 0;
};

// Classifier-free guidance over the text condition: the unconditional branch
// replaces the caption with the null slot; motion/frames stay as given.
// s==0 and s==1 short-circuit to the single relevant branch so they are
// bit-identical to unguided sampling.
inline SampleResult sample_cfg(const LmModel& model, const LmConditions& conds, double scale,
                               Rng& rng, int64_t max_tokens = 0, double temperature = 1.0) {
  if (scale < 0) throw config_error("sample_cfg: negative guidance scale");
  const LmConfig& cfg = model.config();
  if (max_tokens <= 0) max_tokens = cfg.max_tokens;
  NoGradGuard ng;

  LmConditions uncond = conds;
  uncond.caption.reset();
  const bool need_cond = scale != 0.0;
  const bool need_uncond = scale != 1.0;

  SampleResult out;
  std::vector<int64_t> body;
  const int64_t classes = cfg.logit_classes();
  for (int64_t step = 0; step < max_tokens; ++step) {
    std::vector<double> mix(size_t(classes), 0.0);
    std::vector<double> lc, lu;
    if (need_cond) {
      Tensor lg = model.logits(format_sequence(conds, body, false, cfg.max_caption_len));
      lc.resize(size_t(classes));
      for (int64_t c = 0; c < classes; ++c) lc[size_t(c)] = double(lg.at(lg.rows() - 1, c));
    }
    if (need_uncond) {
      Tensor lg = model.logits(format_sequence(uncond, body, false, cfg.max_caption_len));
      lu.resize(size_t(classes));
      for (int64_t c = 0; c < classes; ++c) lu[size_t(c)] = double(lg.at(lg.rows() - 1, c));
    }
    if (scale == 0.0)
      mix = lu;
    else if (scale == 1.0)
      mix = lc;
    else
      for (int64_t c = 0; c < classes; ++c)
        mix[size_t(c)] = lu[size_t(c)] + scale * (lc[size_t(c)] - lu[size_t(c)]);

    const int64_t id = sample_from_logits(mix, temperature, rng);
    if (id == cfg.eos_id()) {
      out.ids = body;
      break;
    }
    body.push_back(id);
    if (step + 1 == max_tokens) {
      out.ids = body;
      out.truncated = true;
    }
  }

  const auto frames = infer_feature_frames(int64_t(out.ids.size()), cfg);
  if (frames && !out.truncated) {
    out.implied_feature_frames = *frames;
    out.stream = make_token_stream(out.ids, cfg.plan_for(*frames), cfg.code_vocab);
  }
  if (conds.frame_count) {
    const int64_t expect = cfg.plan_for(cfg.feature_frames_for(*conds.frame_count)).total_tokens();
    out.frame_count_mismatch = int64_t(out.ids.size()) != expect;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct LmExample {
  Caption caption;
  ControlConditions cc;
  TokenStream tokens;
};

struct LmTrainConfig {
  int64_t steps = 3000;
  double peak_lr = 1e-3;
  double weight_decay = 1e-4;
  int64_t warmup_steps = 100;
  uint64_t seed = 2;
  double p_drop_text = 0.1;
  double p_drop_motion = 0.5;
  double p_drop_frames = 0.5;
  // Early stop once the clean-condition full-batch loss drops below this
  // (0 disables). Checked every eval_every steps.
  double target_loss = 0.0;
  int64_t eval_every = 25;
};

struct LmTrainResult {
  std::shared_ptr<LmModel> model;
  std::vector<double> loss_history;
  std::vector<std::pair<int64_t, double>> clean_loss_history;
  int64_t steps_run = 0;
  double final_clean_loss = 0;
};

inline double lm_clean_loss(const LmModel& model, const std::vector<LmExample>& corpus) {
  NoGradGuard ng;
  std::vector<LmSequence> batch;
  for (const auto& ex : corpus)
    batch.push_back(format_sequence(ex.caption, ex.cc, ex.tokens,
                                    model.config().max_caption_len));
  return double(scalar_value(lm_loss(model, batch)));
}

inline LmTrainResult train_lm(const std::vector<LmExample>& corpus, const LmConfig& cfg,
                              const LmTrainConfig& tcfg) {
  if (corpus.empty()) throw config_error("train_lm: empty corpus");
  for (const auto& ex : corpus) {
    ex.tokens.validate();
    if (ex.tokens.vocab != cfg.code_vocab)
      throw config_error("train_lm: token vocab differs from model vocab");
  }
  LmTrainResult res;
  res.model = std::make_shared<LmModel>(cfg, tcfg.seed);
  LmModel& model = *res.model;

  AdamWConfig ocfg;
  ocfg.peak_lr = tcfg.peak_lr;
  ocfg.weight_decay = tcfg.weight_decay;
  ocfg.total_steps = tcfg.steps;
  ocfg.warmup_steps = std::min(tcfg.warmup_steps, tcfg.steps);
  AdamW optim(model.params().trainable(), ocfg);

  Rng drop_rng(Rng::derive(tcfg.seed, "cond-drop"));
  for (int64_t step = 0; step < tcfg.steps; ++step) {
    try {
      std::vector<LmSequence> batch;
      for (const auto& ex : corpus) {
        LmConditions conds = drop_conditions(ex.caption, ex.cc, drop_rng, tcfg.p_drop_text,
                                             tcfg.p_drop_motion, tcfg.p_drop_frames);
        batch.push_back(format_sequence(conds, ex.tokens.ids, true, cfg.max_caption_len));
      }
      Tensor loss = lm_loss(model, batch);
      res.loss_history.push_back(double(scalar_value(loss)));
      optim.zero_grad();
      backward(loss);
      optim.step();
    } catch (const numeric_error& e) {
      throw numeric_error("train_lm: diverged at step " + std::to_string(step) + ": " + e.what());
    }
    res.steps_run = step + 1;
    if (tcfg.target_loss > 0 && (step + 1) % tcfg.eval_every == 0) {
      const double clean = lm_clean_loss(model, corpus);
      res.clean_loss_history.emplace_back(step + 1, clean);
      if (clean < tcfg.target_loss) break;
    }
  }
  res.final_clean_loss = lm_clean_loss(model, corpus);
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_lm(const std::string& path, const LmModel& model,
                    std::map<std::string, std::string> extra_meta = {}) {
  std::map<std::string, std::string> meta = std::move(extra_meta);
  model.config().to_meta(meta, "lm.");
  meta_set(meta, "kind", std::string("lm"));
  save_checkpoint(path, model.params().named_tensors(), meta);
}

struct LoadedLm {
  LmConfig cfg;
  std::shared_ptr<LmModel> model;
  std::map<std::string, std::string> meta;
};

inline LoadedLm load_lm(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.count("kind") && ck.meta.at("kind") != "lm")
    throw io_error("checkpoint is not a language model: " + path);
  LoadedLm lm;
  lm.cfg = LmConfig::from_meta(ck, "lm.");
  lm.model = std::make_shared<LmModel>(lm.cfg, 0);
  lm.model->params().load_values(ck);
  lm.meta = ck.meta;
  return lm;
}

}  // namespace landiff
