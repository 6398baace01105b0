#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "landiff/common.hpp"
#include "landiff/rng.hpp"
#include "landiff/tensor.hpp"

namespace landiff {

// Vector-quantization codebook with cosine-similarity assignment and
// exponential-moving-average updates. Codes are kept unit-norm.
struct Codebook {
  int64_t vocab = 0;
  int64_t d_code = 0;
  real decay = real(0.8);
  real reseed_floor = real(1e-3);
  std::vector<real> codes;       // vocab x d_code, unit rows
  std::vector<real> ema_counts;  // vocab
  std::vector<real> ema_sums;    // vocab x d_code
  int64_t zero_norm_inputs = 0;  // degenerate rows mapped to code 0

  real* code(int64_t k) { return codes.data() + k * d_code; }
  const real* code(int64_t k) const { return codes.data() + k * d_code; }

  void normalize_code(int64_t k) {
    real* c = code(k);
    double n = 0;
    for (int64_t j = 0; j < d_code; ++j) n += double(c[j]) * double(c[j]);
    n = std::sqrt(n);
    if (n < 1e-12) {
      c[0] = real(1);
      for (int64_t j = 1; j < d_code; ++j) c[j] = real(0);
      return;
    }
    for (int64_t j = 0; j < d_code; ++j) c[j] = real(double(c[j]) / n);
  }
};

inline Codebook init_codebook(int64_t vocab, int64_t d_code, Rng& rng, real decay = real(0.8)) {
  if (vocab < 1 || d_code < 1) throw config_error("init_codebook: bad sizes");
  Codebook cb;
  cb.vocab = vocab;
  cb.d_code = d_code;
  cb.decay = decay;
  cb.codes.resize(size_t(vocab * d_code));
  for (auto& v : cb.codes) v = real(rng.gaussian());
  for (int64_t k = 0; k < vocab; ++k) cb.normalize_code(k);
  cb.ema_counts.assign(size_t(vocab), real(1));
  cb.ema_sums = cb.codes;
  return cb;
}

struct Assignment {
  std::vector<int64_t> ids;
  int64_t zero_norm_rows = 0;
};

// Cosine argmax per row; ties and zero-norm rows resolve to the lowest index.
inline Assignment assign_codes(const Tensor& z, const Codebook& cb) {
  if (z.cols() != cb.d_code) throw config_error("assign_codes: feature width != code width");
  Assignment out;
  out.ids.resize(size_t(z.rows()));
  for (int64_t r = 0; r < z.rows(); ++r) {
    double norm = 0;
    for (int64_t j = 0; j < cb.d_code; ++j) norm += double(z.at(r, j)) * double(z.at(r, j));
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      out.ids[size_t(r)] = 0;
      ++out.zero_norm_rows;
      continue;
    }
    int64_t best = 0;
    double best_sim = -2;
    for (int64_t k = 0; k < cb.vocab; ++k) {
      double dot = 0;
      const real* c = cb.code(k);
      for (int64_t j = 0; j < cb.d_code; ++j) dot += double(z.at(r, j)) * double(c[j]);
      const double sim = dot / norm;
      if (sim > best_sim) {
        best_sim = sim;
        best = k;
      }
    }
    out.ids[size_t(r)] = best;
  }
  return out;
}

// Quantized rows: the selected (unit-norm) code vectors, with the
// straight-through gradient path into z.
inline Tensor quantized_rows(const Tensor& z, const Codebook& cb,
                             const std::vector<int64_t>& ids) {
  std::vector<real> values(size_t(z.rows() * cb.d_code));
  for (int64_t r = 0; r < z.rows(); ++r) {
    const real* c = cb.code(ids[size_t(r)]);
    std::copy(c, c + cb.d_code, values.begin() + r * cb.d_code);
  }
  return straight_through(z, values);
}

// EMA update. Unassigned codes keep their direction (counts and sums shrink
// by the same factor); codes whose count falls below the floor are reseeded
// from random batch rows.
inline void ema_update(Codebook& cb, const std::vector<int64_t>& ids, const Tensor& batch,
                       Rng& rng) {
  if (int64_t(ids.size()) != batch.rows()) throw config_error("ema_update: ids/batch mismatch");
  std::vector<double> counts(size_t(cb.vocab), 0.0);
  std::vector<double> sums(size_t(cb.vocab * cb.d_code), 0.0);
  for (int64_t r = 0; r < batch.rows(); ++r) {
    const int64_t k = ids[size_t(r)];
    if (k < 0 || k >= cb.vocab) throw config_error("ema_update: id out of range");
    counts[size_t(k)] += 1.0;
    for (int64_t j = 0; j < cb.d_code; ++j)
      sums[size_t(k * cb.d_code + j)] += double(batch.at(r, j));
  }
  const double d = double(cb.decay);
  for (int64_t k = 0; k < cb.vocab; ++k) {
    cb.ema_counts[size_t(k)] =
        real(d * double(cb.ema_counts[size_t(k)]) + (1.0 - d) * counts[size_t(k)]);
    for (int64_t j = 0; j < cb.d_code; ++j) {
      auto& s = cb.ema_sums[size_t(k * cb.d_code + j)];
      s = real(d * double(s) + (1.0 - d) * sums[size_t(k * cb.d_code + j)]);
    }
    const double c = std::max(double(cb.ema_counts[size_t(k)]), 1e-9);
    for (int64_t j = 0; j < cb.d_code; ++j)
      cb.code(k)[j] = real(double(cb.ema_sums[size_t(k * cb.d_code + j)]) / c);
    cb.normalize_code(k);
  }
  if (batch.rows() > 0) {
    for (int64_t k = 0; k < cb.vocab; ++k) {
      if (cb.ema_counts[size_t(k)] < cb.reseed_floor) {
        const int64_t r = int64_t(rng.below(uint64_t(batch.rows())));
        for (int64_t j = 0; j < cb.d_code; ++j) cb.code(k)[j] = batch.at(r, j);
        cb.normalize_code(k);
        cb.ema_counts[size_t(k)] = real(1);
        for (int64_t j = 0; j < cb.d_code; ++j)
          cb.ema_sums[size_t(k * cb.d_code + j)] = cb.code(k)[j];
      }
    }
  }
}

}  // namespace landiff
