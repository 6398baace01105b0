#pragma once
// End-to-end orchestration. Training stages run in dependency order
// (data -> tokenizer -> {LM, diffusion}) against an artifact directory whose
// manifest records the config hash per stage, so stale or mixed-config
// pipelines are rejected instead of silently producing garbage. Also home to
// the token->video generation wrappers and the evaluation report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "landiff/config.hpp"
#include "landiff/corpus.hpp"
#include "landiff/diffusion.hpp"
#include "landiff/lm.hpp"
#include "landiff/token_stream.hpp"
#include "landiff/tokenizer.hpp"

namespace landiff {

// ---------------------------------------------------------------------------
// Stages and artifact layout

enum class Stage { kGenData, kTokenizer, kLm, kDiffusion };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kGenData: return "gen-data";
    case Stage::kTokenizer: return "train-tokenizer";
    case Stage::kLm: return "train-lm";
    case Stage::kDiffusion: return "train-diffusion";
  }
  throw config_error("stage_name: bad stage value");
}

inline Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::kGenData, Stage::kTokenizer, Stage::kLm, Stage::kDiffusion})
    if (name == stage_name(s)) return s;
  throw config_error("unknown stage: " + name);
}

struct RunPaths {
  std::string dir = "artifacts";
  std::string corpus() const { return dir + "/corpus.ldcp"; }
  std::string heldout() const { return dir + "/heldout.ldcp"; }
  std::string tokenizer() const { return dir + "/tokenizer.ldf"; }
  std::string lm() const { return dir + "/lm.ldf"; }
  std::string diffusion() const { return dir + "/diffusion.ldf"; }
  std::string manifest() const { return dir + "/manifest.txt"; }
};

// Per-stage RNG roots, derived from the single run seed.
inline uint64_t stage_seed(const RunConfig& cfg, Stage s) {
  return Rng::derive(cfg.seed, "stage", uint64_t(s) + 1);
}

// One "stage -> config hash" line per completed stage.
struct Manifest {
  std::map<std::string, std::string> stage_hash;

  static Manifest load(const std::string& path) {
    Manifest m;
    std::ifstream in(path);
    if (!in) return m;  // absent manifest = nothing recorded yet
    std::string line;
    if (!std::getline(in, line) || line != "landiff-manifest v1")
      throw io_error("manifest: bad header in " + path);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw io_error("manifest: bad line: " + line);
      m.stage_hash[line.substr(0, sp)] = line.substr(sp + 1);
    }
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("manifest: cannot write " + path);
    out << "landiff-manifest v1\n";
    for (const auto& [k, v] : stage_hash) out << k << " " << v << "\n";
  }
};

namespace detail {

inline void require_artifact(const std::string& path, const std::string& producer,
                             const std::string& consumer) {
  if (!std::filesystem::exists(path))
    throw dependency_error(consumer + " requires " + path + "; run " + producer + " first");
}

// A prerequisite stage must be recorded in the manifest with the current
// config hash; anything else means the pipeline mixes configurations.
inline void require_stage_hash(const Manifest& m, Stage s, const std::string& want) {
  const auto it = m.stage_hash.find(stage_name(s));
  if (it == m.stage_hash.end())
    throw dependency_error(std::string("manifest has no record of stage ") + stage_name(s) +
                           "; run it first");
  if (it->second != want)
    throw config_error(std::string("stage ") + stage_name(s) + " was built with config hash " +
                       it->second + " but the current config hashes to " + want);
}

inline void require_meta_hash(const std::map<std::string, std::string>& meta,
                              const std::string& path, const std::string& want) {
  const auto it = meta.find("config_hash");
  if (it == meta.end()) throw config_error("artifact lacks a config hash: " + path);
  if (it->second != want)
    throw config_error("artifact " + path + " carries config hash " + it->second +
                       " but the current config hashes to " + want);
}

// Tokenize one clip with a frozen tokenizer. The codebook is taken by value:
// assignment bookkeeping must not leak into the caller's copy.
inline TokenStream tokenize_clip(const TokenizerModel& model, Codebook cb,
                                 const VideoClip& clip) {
  NoGradGuard ng;
  const SemanticFeatureGrid grid = extract_features(clip);
  const FrameGroupPlan plan = model.config().plan_for(grid.meta.t_f);
  Tensor z = model.encode(grid, plan);
  return quantize(z, cb, plan).stream;
}

inline VideoClip crop_clip(const VideoClip& clip, int64_t frames) {
  if (frames < 1 || frames > clip.n_frames) throw config_error("crop_clip: bad frame count");
  VideoClip out = clip;
  out.n_frames = frames;
  out.frames.resize(size_t(frames * clip.height * clip.width * clip.channels));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage runner

struct StageOutcome {
  bool skipped = false;  // already recorded under this config hash
  std::vector<std::string> artifacts;
  // Filled by the stages that measure something worth surfacing.
  std::map<std::string, double> stats;
};

inline StageOutcome run_stage(Stage st, const RunConfig& cfg, const RunPaths& paths,
                              bool force = false) {
  if (cfg.preset == "paper-metadata" )
    throw config_error("preset paper-metadata is rate-arithmetic only and has no runnable "
                       "stages; use preset desk");
  std::filesystem::create_directories(paths.dir);
  const std::string hash = config_hash(cfg);
  Manifest manifest = Manifest::load(paths.manifest());

  StageOutcome out;
  const auto recorded = manifest.stage_hash.find(stage_name(st));
  const bool same = recorded != manifest.stage_hash.end() && recorded->second == hash;

  switch (st) {
    case Stage::kGenData: {
      out.artifacts = {paths.corpus(), paths.heldout()};
      if (same && !force && std::filesystem::exists(paths.corpus()) &&
          std::filesystem::exists(paths.heldout())) {
        out.skipped = true;
        return out;
      }
      if (cfg.corpus_clips < 1 || cfg.heldout_clips < 1)
        throw config_error("gen-data: corpus and held-out sizes must be positive");
      const uint64_t seed = stage_seed(cfg, st);
      save_corpus(paths.corpus(), gen_corpus(int(cfg.corpus_clips), Rng::derive(seed, "train")));
      save_corpus(paths.heldout(),
                  gen_corpus(int(cfg.heldout_clips), Rng::derive(seed, "heldout")));
      break;
    }

    case Stage::kTokenizer: {
      out.artifacts = {paths.tokenizer()};
      if (same && !force && std::filesystem::exists(paths.tokenizer())) {
        out.skipped = true;
        return out;
      }
      detail::require_artifact(paths.corpus(), "gen-data", "train-tokenizer");
      detail::require_stage_hash(manifest, Stage::kGenData, hash);
      const auto corpus = load_corpus(paths.corpus());
      TokenizerTrainConfig tcfg = cfg.tok_train;
      tcfg.seed = stage_seed(cfg, st);
      TokenizerTrainResult res = train_tokenizer(corpus, cfg.tok, tcfg);
      std::map<std::string, std::string> meta;
      meta["config_hash"] = hash;
      meta_set(meta, "train.init_mse", res.init_recon_mse);
      meta_set(meta, "train.final_mse", res.final_recon_mse);
      save_tokenizer(paths.tokenizer(), *res.model, res.codebook, std::move(meta));
      out.stats["init_mse"] = res.init_recon_mse;
      out.stats["final_mse"] = res.final_recon_mse;
      break;
    }

    case Stage::kLm: {
      out.artifacts = {paths.lm()};
      if (same && !force && std::filesystem::exists(paths.lm())) {
        out.skipped = true;
        return out;
      }
      detail::require_artifact(paths.corpus(), "gen-data", "train-lm");
      detail::require_artifact(paths.tokenizer(), "train-tokenizer", "train-lm");
      detail::require_stage_hash(manifest, Stage::kGenData, hash);
      detail::require_stage_hash(manifest, Stage::kTokenizer, hash);
      const LoadedTokenizer tok = load_tokenizer(paths.tokenizer());
      detail::require_meta_hash(tok.meta, paths.tokenizer(), hash);
      const auto corpus = load_corpus(paths.corpus());
      std::vector<LmExample> examples;
      for (const auto& clip : corpus)
        examples.push_back({clip.caption, clip_conditions(clip),
                            detail::tokenize_clip(*tok.model, tok.codebook, clip)});
      LmTrainConfig tcfg = cfg.lm_train;
      tcfg.seed = stage_seed(cfg, st);
      LmTrainResult res = train_lm(examples, cfg.lm, tcfg);
      std::map<std::string, std::string> meta;
      meta["config_hash"] = hash;
      meta_set(meta, "train.final_clean_loss", res.final_clean_loss);
      meta_set(meta, "train.steps_run", res.steps_run);
      save_lm(paths.lm(), *res.model, std::move(meta));
      out.stats["final_clean_loss"] = res.final_clean_loss;
      out.stats["steps_run"] = double(res.steps_run);
      break;
    }

    case Stage::kDiffusion: {
      out.artifacts = {paths.diffusion()};
      if (same && !force && std::filesystem::exists(paths.diffusion())) {
        out.skipped = true;
        return out;
      }
      detail::require_artifact(paths.corpus(), "gen-data", "train-diffusion");
      detail::require_artifact(paths.tokenizer(), "train-tokenizer", "train-diffusion");
      detail::require_stage_hash(manifest, Stage::kGenData, hash);
      detail::require_stage_hash(manifest, Stage::kTokenizer, hash);
      const LoadedTokenizer tok = load_tokenizer(paths.tokenizer());
      detail::require_meta_hash(tok.meta, paths.tokenizer(), hash);
      const auto corpus = load_corpus(paths.corpus());
      // Condition on the tokenizer's *reconstructed* features: that is all
      // the generation path will ever have.
      std::vector<PerceptualLatent> latents;
      std::vector<Tensor> conds;
      for (const auto& clip : corpus) {
        latents.push_back(latent_encode(clip));
        const TokenStream ts = detail::tokenize_clip(*tok.model, tok.codebook, clip);
        GridMeta meta = extract_features(clip).meta;
        conds.push_back(tok.model->decode(ts, tok.codebook, meta).values);
      }
      DiffusionTrainConfig tcfg = cfg.diff_train;
      tcfg.seed = stage_seed(cfg, st);
      DiffusionTrainResult res = train_video_denoiser(latents, conds, cfg.diff, tcfg);
      std::map<std::string, std::string> meta;
      meta["config_hash"] = hash;
      if (!res.main_loss.empty())
        meta_set(meta, "train.last_main_loss", double(res.main_loss.back()));
      if (!res.branch_loss.empty())
        meta_set(meta, "train.last_branch_loss", double(res.branch_loss.back()));
      save_video_denoiser(paths.diffusion(), *res.model, tcfg.seed, std::move(meta));
      if (!res.branch_loss.empty()) out.stats["last_branch_loss"] = double(res.branch_loss.back());
      break;
    }
  }

  manifest.stage_hash[stage_name(st)] = hash;
  manifest.save(paths.manifest());
  return out;
}

// ---------------------------------------------------------------------------
// Generation: token stream -> semantic features -> denoised latents -> pixels

struct GenerationSpec {
  int64_t sample_steps = 12;       // fresh schedule length for sampling
  std::optional<ChunkPlan> plan;   // set -> chunked long-form generation
  uint64_t seed = 0;
};

struct GeneratedVideo {
  VideoClip clip;
  int64_t denoise_calls = 0;
};

inline GeneratedVideo detokenize_video(const TokenizerModel& tok, const Codebook& cb,
                                       const VideoDenoiser& den, const TokenStream& ts,
                                       const GenerationSpec& spec) {
  ts.validate();
  const TokenizerConfig& tcfg = tok.config();
  const DiffusionConfig& dcfg = den.config();

  GridMeta meta;  // desk clip geometry; patch/stride defaults match the extractor
  meta.t_f = ts.feature_frame_count;
  meta.h_f = kClipSize / meta.patch;
  meta.w_f = kClipSize / meta.patch;
  meta.dim = tcfg.feat_dim;

  LatentMeta lmeta;
  lmeta.video_frames = meta.t_f * meta.temporal_stride;
  lmeta.height = kClipSize;
  lmeta.width = kClipSize;
  lmeta.channels = 1;
  lmeta.fps = kClipFps;
  const int64_t h_l = lmeta.height / lmeta.spatial;
  const int64_t w_l = lmeta.width / lmeta.spatial;
  const int64_t d_l = lmeta.spatial * lmeta.spatial * lmeta.temporal * lmeta.channels;
  const int64_t t_l = lmeta.video_frames / lmeta.temporal;
  if (dcfg.latent_dim != d_l)
    throw config_error("generate: denoiser latent width " + std::to_string(dcfg.latent_dim) +
                       " does not match the pixel codec's " + std::to_string(d_l));
  if (t_l != meta.t_f)
    throw config_error("generate: latent frames (" + std::to_string(t_l) +
                       ") must match token feature frames (" + std::to_string(meta.t_f) + ")");

  NoGradGuard ng;
  const SemanticFeatureGrid grid = tok.decode(ts, cb, meta);
  const DiffusionSchedule sched =
      make_schedule(spec.sample_steps, dcfg.beta_min, dcfg.beta_max);
  Rng rng(Rng::derive(spec.seed, "denoise"));

  GeneratedVideo out;
  PerceptualLatent lat;
  lat.meta = lmeta;
  lat.t_l = t_l;
  lat.h_l = h_l;
  lat.w_l = w_l;
  lat.d_l = d_l;
  if (spec.plan) {
    LongSampleResult res = generate_long_latents(den, sched, grid.values, t_l, h_l, w_l, d_l,
                                                 *spec.plan, rng);
    lat.values = res.latents;
    out.denoise_calls = res.denoise_calls;
  } else {
    lat.values = denoise_chunk(den, sched, &grid.values, nullptr, t_l, h_l, w_l, d_l, 0,
                               ChunkPlan{}.prompt_time_value, rng);
    out.denoise_calls = 1;
  }
  out.clip = latent_decode(lat);
  for (real& v : out.clip.frames) v = std::clamp(v, real(0), real(1));
  return out;
}

struct TextToVideoResult {
  SampleResult sample;     // token stream + sampling diagnostics
  GeneratedVideo video;    // empty clip when the sample fits no plan
  bool decoded = false;
};

inline TextToVideoResult generate_from_conditions(const LmModel& lm, const TokenizerModel& tok,
                                                  const Codebook& cb, const VideoDenoiser& den,
                                                  const LmConditions& conds, double cfg_scale,
                                                  double temperature,
                                                  const GenerationSpec& spec) {
  TextToVideoResult out;
  Rng lm_rng(Rng::derive(spec.seed, "lm-sample"));
  out.sample = sample_cfg(lm, conds, cfg_scale, lm_rng, 0, temperature);
  if (out.sample.stream) {
    out.video = detokenize_video(tok, cb, den, *out.sample.stream, spec);
    out.decoded = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

inline double clip_mse(const VideoClip& a, const VideoClip& b) {
  if (a.frames.size() != b.frames.size() || a.n_frames != b.n_frames)
    throw config_error("clip_mse: shape mismatch");
  double acc = 0;
  for (size_t i = 0; i < a.frames.size(); ++i) {
    const double d = double(a.frames[i]) - double(b.frames[i]);
    acc += d * d;
  }
  return acc / double(a.frames.size());
}

// Peak-1 PSNR, capped so identical inputs stay finite.
inline double psnr(const VideoClip& a, const VideoClip& b) {
  return 10.0 * std::log10(1.0 / std::max(clip_mse(a, b), 1e-12));
}

// exp(entropy) of the empirical code-usage distribution: K when uniform over
// K codes, 1 when a single code absorbs everything.
inline double usage_perplexity(const std::vector<int64_t>& counts) {
  int64_t total = 0;
  for (int64_t c : counts) {
    if (c < 0) throw config_error("usage_perplexity: negative count");
    total += c;
  }
  if (total == 0) throw config_error("usage_perplexity: no assignments");
  double entropy = 0;
  for (int64_t c : counts) {
    if (c == 0) continue;
    const double p = double(c) / double(total);
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw config_error("pearson: length mismatch");
  const size_t n = xs.size();
  if (n < 2) return 0;
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) mx += xs[i], my += ys[i];
  mx /= double(n), my /= double(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0;
  return sxy / std::sqrt(sxx * syy);
}

// Mean per-pixel |delta| between adjacent frames, split into pairs that cross
// a generation-call boundary and pairs that do not.
struct SeamStats {
  double seam_mean = 0;
  double inchunk_mean = 0;
  int64_t seam_pairs = 0;
  int64_t inchunk_pairs = 0;
};

inline SeamStats seam_stats(const VideoClip& clip, const std::vector<int64_t>& seam_pair_index) {
  SeamStats st;
  const int64_t per_frame = clip.height * clip.width * clip.channels;
  const std::set<int64_t> seams(seam_pair_index.begin(), seam_pair_index.end());
  for (int64_t t = 0; t + 1 < clip.n_frames; ++t) {
    const real* a = clip.frames.data() + t * per_frame;
    const real* b = a + per_frame;
    double acc = 0;
    for (int64_t i = 0; i < per_frame; ++i) acc += std::abs(double(b[i]) - double(a[i]));
    acc /= double(per_frame);
    if (seams.count(t)) {
      st.seam_mean += acc;
      ++st.seam_pairs;
    } else {
      st.inchunk_mean += acc;
      ++st.inchunk_pairs;
    }
  }
  if (st.seam_pairs) st.seam_mean /= double(st.seam_pairs);
  if (st.inchunk_pairs) st.inchunk_mean /= double(st.inchunk_pairs);
  return st;
}

// Video-frame pair indices (pair t = frames t,t+1) that straddle chunk
// boundaries when `t_total` latent frames are generated under `plan`.
inline std::vector<int64_t> seam_pairs_for(const ChunkPlan& plan, int64_t t_total,
                                           int64_t temporal) {
  std::vector<int64_t> pairs;
  int64_t covered = std::min(plan.chunk_len, t_total);
  while (covered < t_total) {
    pairs.push_back(covered * temporal - 1);
    covered += std::min(plan.half(), t_total - covered);
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  // Tokenizer reconstruction on held-out clips.
  double feature_recon_mse = 0;
  double untrained_baseline_mse = 0;
  double mse_improvement = 0;  // baseline / trained
  // Codebook usage across held-out streams.
  double codebook_perplexity = 0;
  int64_t codes_used = 0;
  int64_t codebook_size = 0;
  // Full-pipeline pixel fidelity on held-out clips.
  double pixel_psnr = 0;
  // Condition fidelity, probed with training conditions.
  double frame_count_match_rate = 0;
  double motion_correlation = 0;
  int64_t motion_rank_correct = 0;
  int64_t motion_rank_total = 0;
  // Chunked-generation continuity.
  double seam_mean_delta = 0;
  double inchunk_mean_delta = 0;
  int64_t seam_denoise_calls = 0;

  std::string text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    os << "feature_recon_mse        " << feature_recon_mse << "\n"
       << "untrained_baseline_mse   " << untrained_baseline_mse << "\n"
       << "mse_improvement          " << mse_improvement << "x\n"
       << "codebook_perplexity      " << codebook_perplexity << " (codes used " << codes_used
       << "/" << codebook_size << ")\n"
       << "pixel_psnr               " << pixel_psnr << " dB\n"
       << "frame_count_match_rate   " << frame_count_match_rate << "\n"
       << "motion_correlation       " << motion_correlation << "\n"
       << "motion_rank_order        " << motion_rank_correct << "/" << motion_rank_total << "\n"
       << "seam_mean_delta          " << seam_mean_delta << "\n"
       << "inchunk_mean_delta       " << inchunk_mean_delta << "\n"
       << "seam_denoise_calls       " << seam_denoise_calls << "\n";
    return os.str();
  }
};

namespace detail {

inline void check_finite(const EvalReport& r) {
  for (double v : {r.feature_recon_mse, r.untrained_baseline_mse, r.mse_improvement,
                   r.codebook_perplexity, r.pixel_psnr, r.frame_count_match_rate,
                   r.motion_correlation, r.seam_mean_delta, r.inchunk_mean_delta})
    if (!std::isfinite(v)) throw numeric_error("evaluate: non-finite metric in report");
}

}  // namespace detail

inline EvalReport evaluate(const LoadedTokenizer& tok, const LoadedLm& lm,
                           const LoadedDenoiser& den, const std::vector<VideoClip>& corpus,
                           const std::vector<VideoClip>& heldout, const RunConfig& cfg) {
  if (heldout.empty()) throw config_error("evaluate: empty held-out set");
  if (corpus.empty()) throw config_error("evaluate: empty training corpus (needed for probes)");
  NoGradGuard ng;
  EvalReport r;
  const uint64_t eval_seed = Rng::derive(cfg.seed, "eval");

  // Tokenizer reconstruction, against the match-initialized untrained model.
  std::vector<SemanticFeatureGrid> grids;
  for (const auto& clip : heldout) grids.push_back(extract_features(clip));
  r.feature_recon_mse = tokenizer_recon_mse(*tok.model, tok.codebook, grids);
  {
    const uint64_t tseed = stage_seed(cfg, Stage::kTokenizer);
    TokenizerModel base(tok.cfg, tseed);
    Rng cb_rng(Rng::derive(tseed, "codebook"));
    const Codebook base_cb = init_codebook(tok.cfg.vocab, tok.cfg.d_code, cb_rng);
    r.untrained_baseline_mse = tokenizer_recon_mse(base, base_cb, grids);
  }
  r.mse_improvement = r.feature_recon_mse > 0
                          ? r.untrained_baseline_mse / r.feature_recon_mse
                          : std::numeric_limits<double>::max();

  // Codebook usage across held-out streams.
  std::vector<int64_t> counts(size_t(tok.codebook.vocab), 0);
  std::vector<TokenStream> held_streams;
  for (const auto& clip : heldout) {
    held_streams.push_back(detail::tokenize_clip(*tok.model, tok.codebook, clip));
    for (int64_t id : held_streams.back().ids) ++counts[size_t(id)];
  }
  r.codebook_perplexity = usage_perplexity(counts);
  r.codes_used = int64_t(std::count_if(counts.begin(), counts.end(),
                                       [](int64_t c) { return c > 0; }));
  r.codebook_size = tok.codebook.vocab;

  // Full-pipeline reconstruction PSNR on held-out clips.
  {
    double acc = 0;
    for (size_t i = 0; i < heldout.size(); ++i) {
      GenerationSpec spec;
      spec.sample_steps = cfg.sample_steps;
      spec.seed = Rng::derive(eval_seed, "psnr", uint64_t(i));
      const GeneratedVideo gen =
          detokenize_video(*tok.model, tok.codebook, *den.model, held_streams[i], spec);
      acc += psnr(heldout[i], gen.clip);
    }
    r.pixel_psnr = acc / double(heldout.size());
  }

  // Condition fidelity: resample training conditions and compare.
  {
    const size_t probes = std::min<size_t>(corpus.size(), 8);
    int64_t matched = 0;
    std::vector<double> want, got;
    for (size_t i = 0; i < probes; ++i) {
      const VideoClip& clip = corpus[i];
      const LmConditions conds = lm_conditions(clip.caption, clip_conditions(clip));
      Rng rng(Rng::derive(eval_seed, "probe", uint64_t(i)));
      const SampleResult res =
          sample_cfg(*lm.model, conds, double(cfg.cfg_scale), rng, 0, double(cfg.lm_temperature));
      if (!res.frame_count_mismatch) ++matched;
      if (!res.stream) continue;
      GenerationSpec spec;
      spec.sample_steps = cfg.sample_steps;
      spec.seed = Rng::derive(eval_seed, "probe-video", uint64_t(i));
      const GeneratedVideo gen =
          detokenize_video(*tok.model, tok.codebook, *den.model, *res.stream, spec);
      want.push_back(double(*conds.motion));
      got.push_back(double(motion_score(gen.clip)));
    }
    r.frame_count_match_rate = probes ? double(matched) / double(probes) : 0.0;
    r.motion_correlation = pearson(want, got);
  }

  // Motion rank-order: caption-free sampling at the two extremes of the
  // motion condition; the decoded videos should order the same way.
  {
    r.motion_rank_total = cfg.eval_seeds;
    for (int64_t s = 0; s < cfg.eval_seeds; ++s) {
      double measured[2] = {0, 0};
      bool ok = true;
      for (int m = 0; m < 2; ++m) {
        LmConditions conds;
        conds.frame_count = kClipFrames;
        conds.motion = real(m);
        Rng rng(Rng::derive(eval_seed, "rank", uint64_t(2 * s + m)));
        const SampleResult res = sample_cfg(*lm.model, conds, 1.0, rng, 0, 1.0);
        if (!res.stream) {
          ok = false;
          break;
        }
        GenerationSpec spec;
        spec.sample_steps = cfg.sample_steps;
        spec.seed = Rng::derive(eval_seed, "rank-video", uint64_t(2 * s + m));
        const GeneratedVideo gen =
            detokenize_video(*tok.model, tok.codebook, *den.model, *res.stream, spec);
        measured[m] = double(motion_score(gen.clip));
      }
      if (ok && measured[1] > measured[0]) ++r.motion_rank_correct;
    }
  }

  // Seam continuity: chunked generation over a 16-frame crop of a training
  // clip (two latent chunks -> two seams).
  {
    const ChunkPlan plan = cfg.diff_train.plan;
    const VideoClip probe = detail::crop_clip(corpus[0], 16);
    const TokenStream ts = detail::tokenize_clip(*tok.model, tok.codebook, probe);
    GenerationSpec spec;
    spec.sample_steps = cfg.sample_steps;
    spec.plan = plan;
    spec.seed = Rng::derive(eval_seed, "seam");
    const GeneratedVideo gen =
        detokenize_video(*tok.model, tok.codebook, *den.model, ts, spec);
    const auto seams = seam_pairs_for(plan, ts.feature_frame_count, 2);
    const SeamStats st = seam_stats(gen.clip, seams);
    r.seam_mean_delta = st.seam_mean;
    r.inchunk_mean_delta = st.inchunk_mean;
    r.seam_denoise_calls = gen.denoise_calls;
  }

  detail::check_finite(r);
  return r;
}

}  // namespace landiff
