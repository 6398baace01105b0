#pragma once
// Run configuration: one flat key=value file with [section] headers drives
// every pipeline stage. A single schema table defines the known keys, so
// parsing, serialization, and the config hash can never drift apart, and
// unknown or duplicate keys are hard errors.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "landiff/common.hpp"
#include "landiff/diffusion.hpp"
#include "landiff/lm.hpp"
#include "landiff/tokenizer.hpp"

namespace landiff {

struct RunConfig {
  uint64_t seed = 1;
  std::string preset = "desk";  // "desk" trains; "paper-metadata" only reports rates
  int64_t corpus_clips = 16;
  int64_t heldout_clips = 4;

  TokenizerConfig tok;
  TokenizerTrainConfig tok_train;

  LmConfig lm;
  LmTrainConfig lm_train;
  real cfg_scale = real(6.5);
  real lm_temperature = real(1);

  DiffusionConfig diff;
  DiffusionTrainConfig diff_train;
  int64_t sample_steps = 12;  // schedule length used at generation time

  int64_t eval_seeds = 10;  // seeds for the motion rank-order probe
};

namespace detail {

inline std::string fmt_i64(int64_t v) { return std::to_string(v); }
inline std::string fmt_u64(uint64_t v) { return std::to_string(v); }
inline std::string fmt_bool(bool v) { return v ? "1" : "0"; }
// Shortest decimal form that parses back to exactly the same double.
inline std::string fmt_real(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::stod(buf) == v) break;
  }
  return buf;
}

inline int64_t parse_i64(const std::string& s) {
  size_t used = 0;
  const int64_t v = std::stoll(s, &used);
  if (used != s.size()) throw config_error("config: not an integer: " + s);
  return v;
}
inline uint64_t parse_u64(const std::string& s) {
  size_t used = 0;
  const uint64_t v = std::stoull(s, &used);
  if (used != s.size()) throw config_error("config: not an integer: " + s);
  return v;
}
inline double parse_real(const std::string& s) {
  size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw config_error("config: not a number: " + s);
  return v;
}
inline bool parse_bool(const std::string& s) {
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  throw config_error("config: not a boolean: " + s);
}

struct ConfigField {
  std::string key;  // "section.key"
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
  using C = RunConfig;
  using F = ConfigField;
  static const std::vector<ConfigField> fields = {
      F{"run.seed", [](const C& c) { return fmt_u64(c.seed); },
        [](C& c, const std::string& v) { c.seed = parse_u64(v); }},
      F{"run.preset", [](const C& c) { return c.preset; },
        [](C& c, const std::string& v) {
          if (v != "desk" && v != "paper-metadata")
            throw config_error("config: unknown preset: " + v);
          c.preset = v;
        }},

      F{"corpus.clips", [](const C& c) { return fmt_i64(c.corpus_clips); },
        [](C& c, const std::string& v) { c.corpus_clips = parse_i64(v); }},
      F{"corpus.heldout_clips", [](const C& c) { return fmt_i64(c.heldout_clips); },
        [](C& c, const std::string& v) { c.heldout_clips = parse_i64(v); }},

      F{"tokenizer.vocab", [](const C& c) { return fmt_i64(c.tok.vocab); },
        [](C& c, const std::string& v) { c.tok.vocab = parse_i64(v); }},
      F{"tokenizer.d_code", [](const C& c) { return fmt_i64(c.tok.d_code); },
        [](C& c, const std::string& v) { c.tok.d_code = parse_i64(v); }},
      F{"tokenizer.hidden", [](const C& c) { return fmt_i64(c.tok.hidden); },
        [](C& c, const std::string& v) { c.tok.hidden = parse_i64(v); }},
      F{"tokenizer.mlp_hidden", [](const C& c) { return fmt_i64(c.tok.mlp_hidden); },
        [](C& c, const std::string& v) { c.tok.mlp_hidden = parse_i64(v); }},
      F{"tokenizer.n_layers", [](const C& c) { return fmt_i64(c.tok.n_layers); },
        [](C& c, const std::string& v) { c.tok.n_layers = int(parse_i64(v)); }},
      F{"tokenizer.n_heads", [](const C& c) { return fmt_i64(c.tok.n_heads); },
        [](C& c, const std::string& v) { c.tok.n_heads = int(parse_i64(v)); }},
      F{"tokenizer.group_size", [](const C& c) { return fmt_i64(c.tok.group_size); },
        [](C& c, const std::string& v) { c.tok.group_size = parse_i64(v); }},
      F{"tokenizer.iframe_queries", [](const C& c) { return fmt_i64(c.tok.iframe_queries); },
        [](C& c, const std::string& v) { c.tok.iframe_queries = parse_i64(v); }},
      F{"tokenizer.pframe_queries", [](const C& c) { return fmt_i64(c.tok.pframe_queries); },
        [](C& c, const std::string& v) { c.tok.pframe_queries = parse_i64(v); }},
      F{"tokenizer.overlap_ratio", [](const C& c) { return fmt_real(c.tok.overlap_ratio); },
        [](C& c, const std::string& v) { c.tok.overlap_ratio = parse_real(v); }},
      F{"tokenizer.query_to_query", [](const C& c) { return fmt_bool(c.tok.query_to_query); },
        [](C& c, const std::string& v) { c.tok.query_to_query = parse_bool(v); }},
      F{"tokenizer.steps", [](const C& c) { return fmt_i64(c.tok_train.steps); },
        [](C& c, const std::string& v) { c.tok_train.steps = parse_i64(v); }},
      F{"tokenizer.peak_lr", [](const C& c) { return fmt_real(c.tok_train.peak_lr); },
        [](C& c, const std::string& v) { c.tok_train.peak_lr = parse_real(v); }},
      F{"tokenizer.weight_decay", [](const C& c) { return fmt_real(c.tok_train.weight_decay); },
        [](C& c, const std::string& v) { c.tok_train.weight_decay = parse_real(v); }},
      F{"tokenizer.warmup_steps", [](const C& c) { return fmt_i64(c.tok_train.warmup_steps); },
        [](C& c, const std::string& v) { c.tok_train.warmup_steps = parse_i64(v); }},
      F{"tokenizer.lambda_rec", [](const C& c) { return fmt_real(double(c.tok_train.lambda_rec)); },
        [](C& c, const std::string& v) { c.tok_train.lambda_rec = real(parse_real(v)); }},
      F{"tokenizer.lambda_commit",
        [](const C& c) { return fmt_real(double(c.tok_train.lambda_commit)); },
        [](C& c, const std::string& v) { c.tok_train.lambda_commit = real(parse_real(v)); }},
      F{"tokenizer.model_ema", [](const C& c) { return fmt_bool(c.tok_train.model_ema); },
        [](C& c, const std::string& v) { c.tok_train.model_ema = parse_bool(v); }},
      F{"tokenizer.model_ema_decay",
        [](const C& c) { return fmt_real(c.tok_train.model_ema_decay); },
        [](C& c, const std::string& v) { c.tok_train.model_ema_decay = parse_real(v); }},
      F{"tokenizer.codebook_grad", [](const C& c) { return fmt_bool(c.tok_train.codebook_grad); },
        [](C& c, const std::string& v) { c.tok_train.codebook_grad = parse_bool(v); }},

      F{"lm.hidden", [](const C& c) { return fmt_i64(c.lm.hidden); },
        [](C& c, const std::string& v) { c.lm.hidden = parse_i64(v); }},
      F{"lm.mlp_hidden", [](const C& c) { return fmt_i64(c.lm.mlp_hidden); },
        [](C& c, const std::string& v) { c.lm.mlp_hidden = parse_i64(v); }},
      F{"lm.n_layers", [](const C& c) { return fmt_i64(c.lm.n_layers); },
        [](C& c, const std::string& v) { c.lm.n_layers = int(parse_i64(v)); }},
      F{"lm.n_heads", [](const C& c) { return fmt_i64(c.lm.n_heads); },
        [](C& c, const std::string& v) { c.lm.n_heads = int(parse_i64(v)); }},
      F{"lm.mc_hidden", [](const C& c) { return fmt_i64(c.lm.mc_hidden); },
        [](C& c, const std::string& v) { c.lm.mc_hidden = parse_i64(v); }},
      F{"lm.max_feature_frames", [](const C& c) { return fmt_i64(c.lm.max_feature_frames); },
        [](C& c, const std::string& v) { c.lm.max_feature_frames = parse_i64(v); }},
      F{"lm.max_caption_len", [](const C& c) { return fmt_i64(c.lm.max_caption_len); },
        [](C& c, const std::string& v) { c.lm.max_caption_len = parse_i64(v); }},
      F{"lm.max_tokens", [](const C& c) { return fmt_i64(c.lm.max_tokens); },
        [](C& c, const std::string& v) { c.lm.max_tokens = parse_i64(v); }},
      F{"lm.steps", [](const C& c) { return fmt_i64(c.lm_train.steps); },
        [](C& c, const std::string& v) { c.lm_train.steps = parse_i64(v); }},
      F{"lm.peak_lr", [](const C& c) { return fmt_real(c.lm_train.peak_lr); },
        [](C& c, const std::string& v) { c.lm_train.peak_lr = parse_real(v); }},
      F{"lm.weight_decay", [](const C& c) { return fmt_real(c.lm_train.weight_decay); },
        [](C& c, const std::string& v) { c.lm_train.weight_decay = parse_real(v); }},
      F{"lm.warmup_steps", [](const C& c) { return fmt_i64(c.lm_train.warmup_steps); },
        [](C& c, const std::string& v) { c.lm_train.warmup_steps = parse_i64(v); }},
      F{"lm.p_drop_text", [](const C& c) { return fmt_real(c.lm_train.p_drop_text); },
        [](C& c, const std::string& v) { c.lm_train.p_drop_text = parse_real(v); }},
      F{"lm.p_drop_motion", [](const C& c) { return fmt_real(c.lm_train.p_drop_motion); },
        [](C& c, const std::string& v) { c.lm_train.p_drop_motion = parse_real(v); }},
      F{"lm.p_drop_frames", [](const C& c) { return fmt_real(c.lm_train.p_drop_frames); },
        [](C& c, const std::string& v) { c.lm_train.p_drop_frames = parse_real(v); }},
      F{"lm.target_loss", [](const C& c) { return fmt_real(c.lm_train.target_loss); },
        [](C& c, const std::string& v) { c.lm_train.target_loss = parse_real(v); }},
      F{"lm.eval_every", [](const C& c) { return fmt_i64(c.lm_train.eval_every); },
        [](C& c, const std::string& v) { c.lm_train.eval_every = parse_i64(v); }},
      F{"lm.cfg_scale", [](const C& c) { return fmt_real(double(c.cfg_scale)); },
        [](C& c, const std::string& v) { c.cfg_scale = real(parse_real(v)); }},
      F{"lm.temperature", [](const C& c) { return fmt_real(double(c.lm_temperature)); },
        [](C& c, const std::string& v) { c.lm_temperature = real(parse_real(v)); }},

      F{"diffusion.hidden", [](const C& c) { return fmt_i64(c.diff.hidden); },
        [](C& c, const std::string& v) { c.diff.hidden = parse_i64(v); }},
      F{"diffusion.mlp_hidden", [](const C& c) { return fmt_i64(c.diff.mlp_hidden); },
        [](C& c, const std::string& v) { c.diff.mlp_hidden = parse_i64(v); }},
      F{"diffusion.n_layers", [](const C& c) { return fmt_i64(c.diff.n_layers); },
        [](C& c, const std::string& v) { c.diff.n_layers = parse_i64(v); }},
      F{"diffusion.n_heads", [](const C& c) { return fmt_i64(c.diff.n_heads); },
        [](C& c, const std::string& v) { c.diff.n_heads = int(parse_i64(v)); }},
      F{"diffusion.time_feat", [](const C& c) { return fmt_i64(c.diff.time_feat); },
        [](C& c, const std::string& v) { c.diff.time_feat = parse_i64(v); }},
      F{"diffusion.steps", [](const C& c) { return fmt_i64(c.diff.steps); },
        [](C& c, const std::string& v) { c.diff.steps = parse_i64(v); }},
      F{"diffusion.beta_min", [](const C& c) { return fmt_real(double(c.diff.beta_min)); },
        [](C& c, const std::string& v) { c.diff.beta_min = real(parse_real(v)); }},
      F{"diffusion.beta_max", [](const C& c) { return fmt_real(double(c.diff.beta_max)); },
        [](C& c, const std::string& v) { c.diff.beta_max = real(parse_real(v)); }},
      F{"diffusion.main_steps", [](const C& c) { return fmt_i64(c.diff_train.main_steps); },
        [](C& c, const std::string& v) { c.diff_train.main_steps = parse_i64(v); }},
      F{"diffusion.branch_steps", [](const C& c) { return fmt_i64(c.diff_train.branch_steps); },
        [](C& c, const std::string& v) { c.diff_train.branch_steps = parse_i64(v); }},
      F{"diffusion.peak_lr", [](const C& c) { return fmt_real(double(c.diff_train.peak_lr)); },
        [](C& c, const std::string& v) { c.diff_train.peak_lr = real(parse_real(v)); }},
      F{"diffusion.weight_decay",
        [](const C& c) { return fmt_real(double(c.diff_train.weight_decay)); },
        [](C& c, const std::string& v) { c.diff_train.weight_decay = real(parse_real(v)); }},
      F{"diffusion.warmup_steps", [](const C& c) { return fmt_i64(c.diff_train.warmup); },
        [](C& c, const std::string& v) { c.diff_train.warmup = parse_i64(v); }},
      F{"diffusion.streaming_fraction",
        [](const C& c) { return fmt_real(double(c.diff_train.streaming_fraction)); },
        [](C& c, const std::string& v) {
          c.diff_train.streaming_fraction = real(parse_real(v));
        }},
      F{"diffusion.chunk_len", [](const C& c) { return fmt_i64(c.diff_train.plan.chunk_len); },
        [](C& c, const std::string& v) { c.diff_train.plan.chunk_len = parse_i64(v); }},
      F{"diffusion.prompt_time_value",
        [](const C& c) { return fmt_real(double(c.diff_train.plan.prompt_time_value)); },
        [](C& c, const std::string& v) {
          c.diff_train.plan.prompt_time_value = real(parse_real(v));
        }},
      F{"diffusion.prompt_mask_ratio",
        [](const C& c) { return fmt_real(double(c.diff_train.plan.prompt_mask_ratio)); },
        [](C& c, const std::string& v) {
          c.diff_train.plan.prompt_mask_ratio = real(parse_real(v));
        }},
      F{"diffusion.crop_frames", [](const C& c) { return fmt_i64(c.diff_train.crop_frames); },
        [](C& c, const std::string& v) { c.diff_train.crop_frames = parse_i64(v); }},
      F{"diffusion.sample_steps", [](const C& c) { return fmt_i64(c.sample_steps); },
        [](C& c, const std::string& v) { c.sample_steps = parse_i64(v); }},

      F{"eval.seeds", [](const C& c) { return fmt_i64(c.eval_seeds); },
        [](C& c, const std::string& v) { c.eval_seeds = parse_i64(v); }},
  };
  return fields;
}

inline std::string strip(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

// The tokenizer's fixed dims and derived couplings that are not free knobs:
// the LM must speak the tokenizer's stream layout and the diffusion model
// must accept the tokenizer's feature channels.
inline void reconcile_run_config(RunConfig& cfg) {
  cfg.lm.code_vocab = cfg.tok.vocab;
  cfg.lm.group_size = cfg.tok.group_size;
  cfg.lm.iframe_queries = cfg.tok.iframe_queries;
  cfg.lm.pframe_queries = cfg.tok.pframe_queries;
  cfg.lm.overlap_ratio = cfg.tok.overlap_ratio;
  cfg.diff.cond_dim = cfg.tok.feat_dim;
}

inline std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    const std::string sec = f.key.substr(0, f.key.find('.'));
    if (sec != section) {
      if (!section.empty()) os << "\n";
      os << "[" << sec << "]\n";
      section = sec;
    }
    os << f.key.substr(sec.size() + 1) << " = " << f.get(cfg) << "\n";
  }
  return os.str();
}

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  std::set<std::string> seen;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = detail::strip(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw config_error("config line " + std::to_string(line_no) +
                                              ": unterminated section header");
      section = detail::strip(t.substr(1, t.size() - 2));
      if (section.empty())
        throw config_error("config line " + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::strip(t.substr(0, eq));
    const std::string value = detail::strip(t.substr(eq + 1));
    if (section.empty())
      throw config_error("config line " + std::to_string(line_no) + ": key outside any section");
    const std::string full = section + "." + key;
    if (!seen.insert(full).second)
      throw config_error("config: duplicate key " + full);
    bool matched = false;
    for (const auto& f : detail::config_fields()) {
      if (f.key != full) continue;
      f.set(cfg, value);
      matched = true;
      break;
    }
    if (!matched) throw config_error("config: unknown key " + full);
  }
  reconcile_run_config(cfg);
  return cfg;
}

// Stable digest of the canonical serialization; artifacts record it so a
// pipeline mixing configs is caught at load time.
inline std::string config_hash(const RunConfig& cfg) {
  const std::string text = serialize_run_config(cfg);
  const uint64_t h = fnv1a64(text.data(), text.size());
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

}  // namespace landiff
