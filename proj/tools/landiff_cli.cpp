// Command-line front end: data generation, the three training stages,
// tokenize/detokenize round trips, text-to-video generation, rate reporting,
// and evaluation. Exit codes: 0 ok, 2 configuration problem, 3 missing
// prerequisite artifact, 4 numeric divergence.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "landiff/pipeline.hpp"
#include "landiff/pngdump.hpp"
#include "landiff/rate.hpp"

namespace {

using namespace landiff;

RunConfig load_run_config(const std::string& config_path) {
  RunConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw config_error("cannot open config file: " + config_path);
    std::ostringstream ss;
    ss << in.rdbuf();
    cfg = parse_run_config(ss.str());
  } else {
    reconcile_run_config(cfg);
  }
  if (const char* env = std::getenv("LANDIFF_SEED")) {
    try {
      cfg.seed = detail::parse_u64(env);
    } catch (const std::exception&) {
      throw config_error(std::string("LANDIFF_SEED is not an integer: ") + env);
    }
  }
  return cfg;
}

void report_stage(const StageOutcome& out, const char* name) {
  if (out.skipped) {
    std::printf("%s: up to date for this config; pass --force to rerun\n", name);
    return;
  }
  std::printf("%s: done\n", name);
  for (const auto& a : out.artifacts) std::printf("  wrote %s\n", a.c_str());
  for (const auto& [k, v] : out.stats) std::printf("  %s = %g\n", k.c_str(), v);
}

// The three model checkpoints must agree on the config they were built from.
void check_same_hash(const std::map<std::string, std::string>& a, const std::string& pa,
                     const std::map<std::string, std::string>& b, const std::string& pb) {
  const auto ia = a.find("config_hash");
  const auto ib = b.find("config_hash");
  if (ia == a.end() || ib == b.end()) return;  // hand-built checkpoints carry no hash
  if (ia->second != ib->second)
    throw config_error("checkpoints disagree on config: " + pa + " has " + ia->second + ", " +
                       pb + " has " + ib->second);
}

void save_single_clip(const std::string& path, const VideoClip& clip) {
  save_corpus(path, {clip});
}

struct GenerateArgs {
  std::string caption;
  int64_t frames = kClipFrames;
  double motion = -1;  // <0: condition unset
  double scale = -1;   // <0: take from config
  double temperature = -1;
  uint64_t seed = 0;
  bool seed_set = false;
  int64_t steps = 0;
  std::string out, png_dir;
};

void add_generate_flags(CLI::App* cmd, GenerateArgs& g, bool with_caption = true) {
  if (with_caption)
    cmd->add_option("--caption", g.caption, "five-word scene caption")->required();
  cmd->add_option("--frames", g.frames, "video frames to request");
  cmd->add_option("--motion", g.motion, "motion condition in [0,1]");
  cmd->add_option("--scale", g.scale, "guidance scale (default from config)");
  cmd->add_option("--temperature", g.temperature, "sampling temperature");
  cmd->add_option("--seed", g.seed, "sampling seed (default: run seed)")
      ->each([&g](const std::string&) { g.seed_set = true; });
  cmd->add_option("--steps", g.steps, "denoising steps (default from config)");
  cmd->add_option("--out", g.out, "write the video as a one-clip corpus file");
  cmd->add_option("--png-dir", g.png_dir, "also dump frames as PNGs");
}

int run_generate(const RunConfig& cfg, const RunPaths& paths, const GenerateArgs& g,
                 bool long_form) {
  detail::require_artifact(paths.tokenizer(), "train-tokenizer", "generate");
  detail::require_artifact(paths.lm(), "train-lm", "generate");
  detail::require_artifact(paths.diffusion(), "train-diffusion", "generate");
  const LoadedTokenizer tok = load_tokenizer(paths.tokenizer());
  const LoadedLm lm = load_lm(paths.lm());
  const LoadedDenoiser den = load_video_denoiser(paths.diffusion());
  check_same_hash(tok.meta, paths.tokenizer(), lm.meta, paths.lm());
  check_same_hash(tok.meta, paths.tokenizer(), den.meta, paths.diffusion());

  LmConditions conds;
  conds.caption = parse_caption(g.caption);
  conds.frame_count = g.frames;
  if (g.motion >= 0) conds.motion = real(g.motion);

  GenerationSpec spec;
  spec.sample_steps = g.steps > 0 ? g.steps : cfg.sample_steps;
  spec.seed = g.seed_set ? g.seed : cfg.seed;
  if (long_form) spec.plan = cfg.diff_train.plan;

  const double scale = g.scale >= 0 ? g.scale : double(cfg.cfg_scale);
  const double temp = g.temperature >= 0 ? g.temperature : double(cfg.lm_temperature);
  const TextToVideoResult res = generate_from_conditions(
      *lm.model, *tok.model, tok.codebook, *den.model, conds, scale, temp, spec);

  std::printf("sampled %zu tokens%s\n", res.sample.ids.size(),
              res.sample.truncated ? " (truncated before end-of-stream)" : "");
  if (res.sample.frame_count_mismatch)
    std::printf("note: token count does not match the requested frame count\n");
  if (!res.decoded)
    throw numeric_error("sampled token stream fits no feature-frame plan; nothing to decode");

  std::printf("decoded %lld frames of %lldx%lld in %lld denoising call%s\n",
              (long long)res.video.clip.n_frames, (long long)res.video.clip.height,
              (long long)res.video.clip.width, (long long)res.video.denoise_calls,
              res.video.denoise_calls == 1 ? "" : "s");
  if (!g.out.empty()) {
    save_single_clip(g.out, res.video.clip);
    std::printf("wrote %s\n", g.out.c_str());
  }
  if (!g.png_dir.empty()) {
    dump_clip_frames(res.video.clip, g.png_dir);
    std::printf("wrote PNG frames to %s\n", g.png_dir.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coarse-to-fine text-to-video pipeline"};
  app.require_subcommand(1);

  std::string config_path, artifacts_dir = "artifacts";
  app.add_option("--config", config_path, "run configuration file")->configurable(false);
  app.add_option("--artifacts", artifacts_dir, "artifact directory (default: artifacts)");

  bool force = false;
  auto* gen_data = app.add_subcommand("gen-data", "render the synthetic clip corpus");
  auto* train_tok = app.add_subcommand("train-tokenizer", "train the semantic tokenizer");
  auto* train_lm_cmd = app.add_subcommand("train-lm", "train the token language model");
  auto* train_diff = app.add_subcommand("train-diffusion", "train the streaming detokenizer");
  for (auto* c : {gen_data, train_tok, train_lm_cmd, train_diff})
    c->add_flag("--force", force, "rerun even if up to date");

  auto* tokenize_cmd = app.add_subcommand("tokenize", "clip -> semantic token stream");
  std::string tk_corpus, tk_out;
  int64_t tk_index = 0;
  tokenize_cmd->add_option("--corpus", tk_corpus, "clip corpus file")->required();
  tokenize_cmd->add_option("--index", tk_index, "clip index within the corpus");
  tokenize_cmd->add_option("--out", tk_out, "output token-stream file")->required();

  auto* detok_cmd = app.add_subcommand("detokenize", "token stream -> video");
  std::string dt_tokens;
  GenerateArgs dt;
  bool dt_chunked = false;
  detok_cmd->add_option("--tokens", dt_tokens, "token-stream file")->required();
  detok_cmd->add_option("--steps", dt.steps, "denoising steps (default from config)");
  detok_cmd->add_option("--seed", dt.seed, "denoising seed (default: run seed)")
      ->each([&dt](const std::string&) { dt.seed_set = true; });
  detok_cmd->add_flag("--chunked", dt_chunked, "stream chunk-by-chunk");
  detok_cmd->add_option("--out", dt.out, "write the video as a one-clip corpus file");
  detok_cmd->add_option("--png-dir", dt.png_dir, "also dump frames as PNGs");

  auto* sample_cmd = app.add_subcommand("sample-lm", "sample a token stream from text");
  GenerateArgs sl;
  std::string sl_out;
  add_generate_flags(sample_cmd, sl);
  sample_cmd->add_option("--tokens-out", sl_out, "write the sampled stream");

  auto* generate_cmd = app.add_subcommand("generate", "text -> video");
  GenerateArgs gn;
  add_generate_flags(generate_cmd, gn);

  auto* genlong_cmd = app.add_subcommand("generate-long", "text -> video, chunked streaming");
  GenerateArgs gl;
  add_generate_flags(genlong_cmd, gl);

  auto* rate_cmd = app.add_subcommand("rate-report", "token-budget and compression arithmetic");
  std::string rate_preset = "paper";
  RateConfig rc;
  std::string rc_fps, rc_ffr, rc_nominal, rc_reference;  // rationals: "2", "1/4", "2.5"
  rate_cmd->add_option("--preset", rate_preset, "paper | desk")
      ->check(CLI::IsMember({"paper", "desk"}));
  rate_cmd->add_option("--fps", rc_fps, "pixel frames per second (integer, fraction or decimal)");
  rate_cmd->add_option("--width", rc.width, "frame width");
  rate_cmd->add_option("--height", rc.height, "frame height");
  rate_cmd->add_option("--group-size", rc.group_size, "frames per group");
  rate_cmd->add_option("--iframe-tokens", rc.iframe_tokens,
                       "tokens for the first frame of a group");
  rate_cmd->add_option("--pframe-tokens", rc.pframe_tokens, "tokens for each later frame");
  rate_cmd->add_option("--feature-frame-rate", rc_ffr, "feature frames per second");
  rate_cmd->add_option("--vocab", rc.vocab, "codebook size");
  rate_cmd->add_option("--nominal-tps", rc_nominal,
                       "headline token rate (0 = use the derived rate)");
  rate_cmd->add_option("--reference-tps", rc_reference,
                       "reference token rate for the sequence-length ratio");

  auto* eval_cmd = app.add_subcommand("eval", "evaluation report over the held-out set");

  try {
    app.parse(argc, argv);

    const RunPaths paths{artifacts_dir};
    if (*rate_cmd) {
      // Explicit flags override the chosen preset field-by-field.
      RateConfig base = rate_preset == "desk" ? RateConfig::desk_preset()
                                              : RateConfig::paper_preset();
      if (rate_cmd->count("--fps")) base.pixel_fps = Rational::parse(rc_fps);
      if (rate_cmd->count("--width")) base.width = rc.width;
      if (rate_cmd->count("--height")) base.height = rc.height;
      if (rate_cmd->count("--group-size")) base.group_size = rc.group_size;
      if (rate_cmd->count("--iframe-tokens")) base.iframe_tokens = rc.iframe_tokens;
      if (rate_cmd->count("--pframe-tokens")) base.pframe_tokens = rc.pframe_tokens;
      if (rate_cmd->count("--feature-frame-rate"))
        base.feature_frame_rate = Rational::parse(rc_ffr);
      if (rate_cmd->count("--vocab")) base.vocab = rc.vocab;
      if (rate_cmd->count("--nominal-tps"))
        base.nominal_tokens_per_second = Rational::parse(rc_nominal);
      if (rate_cmd->count("--reference-tps"))
        base.reference_tokens_per_second = Rational::parse(rc_reference);
      base.validate();
      std::printf("%s", rate_report(base).c_str());
      return 0;
    }

    const RunConfig cfg = load_run_config(config_path);

    if (*gen_data) {
      report_stage(run_stage(Stage::kGenData, cfg, paths, force), "gen-data");
    } else if (*train_tok) {
      report_stage(run_stage(Stage::kTokenizer, cfg, paths, force), "train-tokenizer");
    } else if (*train_lm_cmd) {
      report_stage(run_stage(Stage::kLm, cfg, paths, force), "train-lm");
    } else if (*train_diff) {
      report_stage(run_stage(Stage::kDiffusion, cfg, paths, force), "train-diffusion");
    } else if (*tokenize_cmd) {
      detail::require_artifact(paths.tokenizer(), "train-tokenizer", "tokenize");
      const LoadedTokenizer tok = load_tokenizer(paths.tokenizer());
      const auto clips = load_corpus(tk_corpus);
      if (tk_index < 0 || size_t(tk_index) >= clips.size())
        throw config_error("tokenize: clip index out of range");
      const TokenStream ts =
          detail::tokenize_clip(*tok.model, tok.codebook, clips[size_t(tk_index)]);
      save_token_stream(tk_out, ts);
      std::printf("wrote %zu tokens (%lld feature frames) to %s\n", ts.ids.size(),
                  (long long)ts.feature_frame_count, tk_out.c_str());
    } else if (*detok_cmd) {
      detail::require_artifact(paths.tokenizer(), "train-tokenizer", "detokenize");
      detail::require_artifact(paths.diffusion(), "train-diffusion", "detokenize");
      const LoadedTokenizer tok = load_tokenizer(paths.tokenizer());
      const LoadedDenoiser den = load_video_denoiser(paths.diffusion());
      check_same_hash(tok.meta, paths.tokenizer(), den.meta, paths.diffusion());
      const TokenStream ts = load_token_stream(dt_tokens);
      GenerationSpec spec;
      spec.sample_steps = dt.steps > 0 ? dt.steps : cfg.sample_steps;
      spec.seed = dt.seed_set ? dt.seed : cfg.seed;
      if (dt_chunked) spec.plan = cfg.diff_train.plan;
      const GeneratedVideo gen =
          detokenize_video(*tok.model, tok.codebook, *den.model, ts, spec);
      std::printf("decoded %lld frames in %lld denoising call%s\n",
                  (long long)gen.clip.n_frames, (long long)gen.denoise_calls,
                  gen.denoise_calls == 1 ? "" : "s");
      if (!dt.out.empty()) {
        save_single_clip(dt.out, gen.clip);
        std::printf("wrote %s\n", dt.out.c_str());
      }
      if (!dt.png_dir.empty()) {
        dump_clip_frames(gen.clip, dt.png_dir);
        std::printf("wrote PNG frames to %s\n", dt.png_dir.c_str());
      }
    } else if (*sample_cmd) {
      detail::require_artifact(paths.lm(), "train-lm", "sample-lm");
      const LoadedLm lm = load_lm(paths.lm());
      LmConditions conds;
      conds.caption = parse_caption(sl.caption);
      conds.frame_count = sl.frames;
      if (sl.motion >= 0) conds.motion = real(sl.motion);
      const double scale = sl.scale >= 0 ? sl.scale : double(cfg.cfg_scale);
      const double temp = sl.temperature >= 0 ? sl.temperature : double(cfg.lm_temperature);
      Rng rng(Rng::derive(sl.seed_set ? sl.seed : cfg.seed, "lm-sample"));
      const SampleResult res = sample_cfg(*lm.model, conds, scale, rng, 0, temp);
      std::printf("sampled %zu tokens%s%s\n", res.ids.size(),
                  res.truncated ? " (truncated)" : "",
                  res.frame_count_mismatch ? " (frame-count mismatch)" : "");
      if (res.stream) {
        std::printf("stream spans %lld feature frames\n",
                    (long long)res.stream->feature_frame_count);
        if (!sl_out.empty()) {
          save_token_stream(sl_out, *res.stream);
          std::printf("wrote %s\n", sl_out.c_str());
        }
      } else if (!sl_out.empty()) {
        throw numeric_error("sampled token stream fits no feature-frame plan; not writing " +
                            sl_out);
      }
    } else if (*generate_cmd) {
      return run_generate(cfg, paths, gn, /*long_form=*/false);
    } else if (*genlong_cmd) {
      return run_generate(cfg, paths, gl, /*long_form=*/true);
    } else if (*eval_cmd) {
      detail::require_artifact(paths.corpus(), "gen-data", "eval");
      detail::require_artifact(paths.heldout(), "gen-data", "eval");
      detail::require_artifact(paths.tokenizer(), "train-tokenizer", "eval");
      detail::require_artifact(paths.lm(), "train-lm", "eval");
      detail::require_artifact(paths.diffusion(), "train-diffusion", "eval");
      const LoadedTokenizer tok = load_tokenizer(paths.tokenizer());
      const LoadedLm lm = load_lm(paths.lm());
      const LoadedDenoiser den = load_video_denoiser(paths.diffusion());
      check_same_hash(tok.meta, paths.tokenizer(), lm.meta, paths.lm());
      check_same_hash(tok.meta, paths.tokenizer(), den.meta, paths.diffusion());
      const EvalReport rep = evaluate(tok, lm, den, load_corpus(paths.corpus()),
                                      load_corpus(paths.heldout()), cfg);
      std::printf("%s", rep.text().c_str());
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const io_error& e) {
    std::fprintf(stderr, "file error: %s\n", e.what());
    return 2;
  } catch (const dependency_error& e) {
    std::fprintf(stderr, "dependency error: %s\n", e.what());
    return 3;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numeric divergence: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
