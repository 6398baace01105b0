#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "landiff/checkpoint.hpp"
#include "landiff/common.hpp"
#include "landiff/rng.hpp"
#include "landiff/tensor.hpp"

namespace landiff {

// Named parameter store shared by every model. Entries keep their buffers
// shared with the module that registered them, so loading a checkpoint or
// running an optimizer step mutates the live model.
class ParamRegistry {
 public:
  struct Item {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor create(const std::string& name, Shape shape, Rng& rng, real stddev) {
    Tensor t = randn(std::move(shape), rng, stddev, /*requires_grad=*/true);
    return add(name, t, true);
  }

  Tensor create_const(const std::string& name, Shape shape, real value, bool trainable = true) {
    Tensor t = full(std::move(shape), value, /*requires_grad=*/trainable);
    return add(name, t, trainable);
  }

  // Non-trained state that still belongs in checkpoints (codebook, EMA stats).
  Tensor create_buffer(const std::string& name, Shape shape) {
    Tensor t = zeros(std::move(shape), /*requires_grad=*/false);
    return add(name, t, false);
  }

  Tensor add(const std::string& name, Tensor t, bool trainable) {
    for (const auto& it : items_)
      if (it.name == name) throw config_error("duplicate parameter name: " + name);
    items_.push_back({name, t, trainable && t.requires_grad});
    return t;
  }

  const std::vector<Item>& items() const { return items_; }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const auto& it : items_)
      if (it.trainable) out.push_back(it.tensor);
    return out;
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& it : items_) n += it.tensor.numel();
    return n;
  }

  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& it : items_) out.emplace_back(it.name, it.tensor);
    return out;
  }

  // Copies checkpoint values into the registered buffers (by name, shape-checked).
  void load_values(const Checkpoint& ck) {
    for (auto& it : items_) {
      const Tensor& src = ck.require(it.name);
      if (src.shape != it.tensor.shape)
        throw io_error("checkpoint: shape mismatch for " + it.name);
      std::copy(src.data->begin(), src.data->end(), it.tensor.data->begin());
    }
  }

  // Copies values from a registry with identical layout (frozen twins, EMA).
  void copy_values_from(const ParamRegistry& other) {
    if (other.items_.size() != items_.size())
      throw config_error("copy_values_from: registries differ");
    for (size_t i = 0; i < items_.size(); ++i) {
      if (other.items_[i].name != items_[i].name ||
          other.items_[i].tensor.shape != items_[i].tensor.shape)
        throw config_error("copy_values_from: layout mismatch at " + items_[i].name);
      std::copy(other.items_[i].tensor.data->begin(), other.items_[i].tensor.data->end(),
                items_[i].tensor.data->begin());
    }
  }

 private:
  std::vector<Item> items_;
};

// Exponential moving average of a registry's trainable values.
class WeightEma {
 public:
  WeightEma() = default;
  WeightEma(const ParamRegistry& reg, double decay) : decay_(decay) {
    for (const auto& it : reg.items())
      if (it.trainable) tracked_.push_back(it.tensor);
    for (const auto& t : tracked_) shadow_.push_back(*t.data);
  }

  void update() {
    for (size_t i = 0; i < tracked_.size(); ++i) {
      const auto& v = *tracked_[i].data;
      auto& s = shadow_[i];
      for (size_t j = 0; j < s.size(); ++j)
        s[j] = real(decay_ * double(s[j]) + (1.0 - decay_) * double(v[j]));
    }
  }

  // Swaps shadow values into the live parameters (e.g. before saving).
  void copy_to_params() const {
    for (size_t i = 0; i < tracked_.size(); ++i) *tracked_[i].data = shadow_[i];
  }

 private:
  double decay_ = 0.8;
  std::vector<Tensor> tracked_;
  std::vector<std::vector<real>> shadow_;
};

// ---------------------------------------------------------------------------

struct Linear {
  Tensor w;  // (in x out)
  Tensor b;
  bool has_bias = true;

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
         bool bias = true)
      : has_bias(bias) {
    w = reg.create(prefix + ".w", {in, out}, rng, real(1.0 / std::sqrt(double(in))));
    if (bias) b = reg.create_const(prefix + ".b", {out}, real(0));
  }

  // Weights start at exactly zero: the layer contributes nothing until it
  // has been trained (used by the control branch).
  static Linear zero_init(ParamRegistry& reg, const std::string& prefix, int64_t in, int64_t out) {
    Linear l;
    l.w = reg.create_const(prefix + ".w", {in, out}, real(0));
    l.b = reg.create_const(prefix + ".b", {out}, real(0));
    l.has_bias = true;
    return l;
  }

  Tensor operator()(const Tensor& x) const {
    Tensor y = matmul(x, w);
    return has_bias ? add_rowwise(y, b) : y;
  }
};

// Position encodings handed to attention; rotations are applied to the
// projected q/k rows.
struct RopePositions {
  enum class Kind { kNone, k1D, k3D };
  Kind kind = Kind::kNone;
  std::vector<int64_t> pos_1d;
  std::vector<std::array<int64_t, 3>> coords_3d;
  real theta = real(10000);

  static RopePositions none() { return {}; }

  static RopePositions rope1d(std::vector<int64_t> pos, real theta = real(10000)) {
    RopePositions r;
    r.kind = Kind::k1D;
    r.pos_1d = std::move(pos);
    r.theta = theta;
    return r;
  }

  static RopePositions rope3d(std::vector<std::array<int64_t, 3>> coords,
                              real theta = real(10000)) {
    RopePositions r;
    r.kind = Kind::k3D;
    r.coords_3d = std::move(coords);
    r.theta = theta;
    return r;
  }

  Tensor apply(const Tensor& x) const {
    switch (kind) {
      case Kind::kNone:
        return x;
      case Kind::k1D:
        return apply_rope_1d(x, pos_1d, theta);
      case Kind::k3D: {
        // The axis-factored rotation needs a width divisible by 6; rotate the
        // largest prefix and pass the tail through.
        const int64_t d = x.cols();
        const int64_t rot = d - d % 6;
        if (rot == d) return apply_rope_3d(x, coords_3d, theta);
        if (rot == 0) return x;
        return concat_cols(
            {apply_rope_3d(slice_cols(x, 0, rot), coords_3d, theta), slice_cols(x, rot, d - rot)});
      }
    }
    return x;
  }
};

// Pre-LN transformer block: x += Wo·attn(LN(x)); x += MLP(LN(x)).
struct TransformerBlock {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Linear wq, wk, wv, wo, fc1, fc2;
  int n_heads = 1;

  TransformerBlock() = default;
  TransformerBlock(ParamRegistry& reg, const std::string& prefix, int64_t hidden,
                   int64_t mlp_hidden, int heads, Rng& rng)
      : n_heads(heads) {
    ln1_g = reg.create_const(prefix + ".ln1.g", {hidden}, real(1));
    ln1_b = reg.create_const(prefix + ".ln1.b", {hidden}, real(0));
    ln2_g = reg.create_const(prefix + ".ln2.g", {hidden}, real(1));
    ln2_b = reg.create_const(prefix + ".ln2.b", {hidden}, real(0));
    wq = Linear(reg, prefix + ".wq", hidden, hidden, rng);
    wk = Linear(reg, prefix + ".wk", hidden, hidden, rng);
    wv = Linear(reg, prefix + ".wv", hidden, hidden, rng);
    wo = Linear(reg, prefix + ".wo", hidden, hidden, rng);
    fc1 = Linear(reg, prefix + ".fc1", hidden, mlp_hidden, rng);
    fc2 = Linear(reg, prefix + ".fc2", mlp_hidden, hidden, rng);
  }

  Tensor forward(const Tensor& x, const BoolMask& mask, const RopePositions& rope) const {
    Tensor h = layer_norm(x, ln1_g, ln1_b);
    Tensor q = rope.apply(wq(h));
    Tensor k = rope.apply(wk(h));
    Tensor v = wv(h);
    Tensor attended = add(x, wo(masked_attention(q, k, v, mask, n_heads)));
    Tensor m = layer_norm(attended, ln2_g, ln2_b);
    return add(attended, fc2(gelu(fc1(m))));
  }
};

// Block stack with an optional final layer norm. A stack built with zero
// layers and final_ln=false is the identity, which the passthrough configs
// rely on.
struct TransformerStack {
  std::vector<TransformerBlock> blocks;
  Tensor lnf_g, lnf_b;
  bool final_ln = true;

  TransformerStack() = default;
  TransformerStack(ParamRegistry& reg, const std::string& prefix, int n_layers, int64_t hidden,
                   int64_t mlp_hidden, int heads, Rng& rng, bool with_final_ln = true)
      : final_ln(with_final_ln) {
    for (int l = 0; l < n_layers; ++l)
      blocks.emplace_back(reg, prefix + ".block" + std::to_string(l), hidden, mlp_hidden, heads,
                          rng);
    if (final_ln) {
      lnf_g = reg.create_const(prefix + ".lnf.g", {hidden}, real(1));
      lnf_b = reg.create_const(prefix + ".lnf.b", {hidden}, real(0));
    }
  }

  Tensor forward(const Tensor& x, const BoolMask& mask, const RopePositions& rope) const {
    Tensor h = x;
    for (const auto& b : blocks) h = b.forward(h, mask, rope);
    return final_ln ? layer_norm(h, lnf_g, lnf_b) : h;
  }
};

}  // namespace landiff
