// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "f3lab/autodiff.hpp"
#include "f3lab/binary_io.hpp"
#include "f3lab/rng.hpp"
#include "f3lab/tensor.hpp"

namespace f3lab {

struct ConfigError : Error {
  using Error::Error;
};

struct ModelConfig {
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t vocab = 32;
  std::size_t answers = 8;
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t width = 32;
  std::size_t ffn_width = 64;
  std::size_t max_question_len = 8;
  std::uint64_t seed = 0;

  std::size_t visual_tokens() const { return (image_height / patch) * (image_width / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t head_width() const { return width / heads; }
  Shape image_shape() const { return {image_height, image_width, channels}; }

  void validate() const {
    if (patch == 0 || image_height % patch || image_width % patch || image_height == 0 || image_width == 0) {
      throw ConfigError("image size must be a positive multiple of the patch size");
    }
    if (!channels || !vocab || !answers || !layers || !heads || !width || !ffn_width || !max_question_len) {
      throw ConfigError("model extents must be >= 1");
    }
    if (width % heads) throw ConfigError("width must be divisible by heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Question token ids, 1 <= length <= max_question_len.
struct TokenSeq {
  std::vector<std::size_t> ids;

  std::size_t size() const { return ids.size(); }

  void validate(const ModelConfig& cfg) const {
    if (ids.empty()) throw ConfigError("question must contain at least one token");
    if (ids.size() > cfg.max_question_len) throw ConfigError("question longer than max_question_len");
    for (auto id : ids) {
      if (id >= cfg.vocab) throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }

  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

struct LayerParams {
  Tensor wq, wk, wv, wo;
  Tensor w1, b1, w2, b2;
};

struct ModelParams {
  Tensor patch_w, patch_b;
  Tensor token_embed, position_embed, slot;
  std::vector<LayerParams> layers;
  Tensor head_w, head_b;

  /// Visits every parameter tensor in a fixed order.
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(self.patch_w);
    f(self.patch_b);
    f(self.token_embed);
    f(self.position_embed);
    f(self.slot);
    for (auto& l : self.layers) {
      f(l.wq);
      f(l.wk);
      f(l.wv);
      f(l.wo);
      f(l.w1);
      f(l.b1);
      f(l.w2);
      f(l.b2);
    }
    f(self.head_w);
    f(self.head_b);
  }
  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    std::vector<const Tensor*> ta, tb;
    a.for_each([&](const Tensor& t) { ta.push_back(&t); });
    b.for_each([&](const Tensor& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
      if (!(*ta[i] == *tb[i])) return false;
    }
    return true;
  }
};

/// Attention of the answer slot over the visual tokens, shape (L, H, M).
class AttentionTensor {
 public:
  AttentionTensor() = default;
  explicit AttentionTensor(Tensor values) : values_(std::move(values)) {
    if (values_.rank() != 3) throw ShapeError("attention tensor must have shape (L, H, M)");
  }

  std::size_t layers() const { return values_.dim(0); }
  std::size_t heads() const { return values_.dim(1); }
  std::size_t tokens() const { return values_.dim(2); }
  double at(std::size_t l, std::size_t h, std::size_t m) const {
    return values_[(l * heads() + h) * tokens() + m];
  }
  const Tensor& values() const { return values_; }

  /// Each (layer, head) row rescaled to sum to one over the visual tokens.
  AttentionTensor normalize_over_tokens() const {
    Tensor out = values_;
    const std::size_t m = tokens();
    for (std::size_t r = 0; r < layers() * heads(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += out[r * m + j];
      if (!(s > 0.0)) throw NumericError("cannot normalize an all-zero attention row");
      for (std::size_t j = 0; j < m; ++j) out[r * m + j] /= s;
    }
    return AttentionTensor(std::move(out));
  }

  /// (L, M) projection taking the maximum over heads.
  Tensor max_over_heads() const {
    Tensor out({layers(), tokens()});
    for (std::size_t l = 0; l < layers(); ++l) {
      for (std::size_t m = 0; m < tokens(); ++m) {
        double v = at(l, 0, m);
        for (std::size_t h = 1; h < heads(); ++h) v = std::max(v, at(l, h, m));
        out.at(l, m) = v;
      }
    }
    return out;
  }

  friend bool operator==(const AttentionTensor& a, const AttentionTensor& b) { return a.values_ == b.values_; }

 private:
  Tensor values_;
};

class Model {
 public:
  Model(ModelConfig config, ModelParams params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
  }

  /// Seeded initialization.
  static Model init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, {0x4d4f44454cull}));
    auto normal = [&](Shape shape, double stddev) {
      Tensor t(std::move(shape));
      for (double& v : t.data()) v = stddev * rng.normal();
      return t;
    };
    const double d = static_cast<double>(cfg.width);
    ModelParams p;
    p.patch_w = normal({cfg.patch_dim(), cfg.width}, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
    p.patch_b = normal({cfg.width}, 0.1);
    p.token_embed = normal({cfg.vocab, cfg.width}, 0.5);
    p.position_embed = normal({cfg.max_question_len, cfg.width}, 0.1);
    p.slot = normal({1, cfg.width}, 0.5);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerParams lp;
      lp.wq = normal({cfg.width, cfg.width}, 1.0 / std::sqrt(d));
      lp.wk = normal({cfg.width, cfg.width}, 1.0 / std::sqrt(d));
      lp.wv = normal({cfg.width, cfg.width}, 1.0 / std::sqrt(d));
      lp.wo = normal({cfg.width, cfg.width}, 0.5 / std::sqrt(d));
      lp.w1 = normal({cfg.width, cfg.ffn_width}, 1.0 / std::sqrt(d));
      lp.b1 = Tensor({cfg.ffn_width});
      lp.w2 = normal({cfg.ffn_width, cfg.width}, 0.5 / std::sqrt(static_cast<double>(cfg.ffn_width)));
      lp.b2 = Tensor({cfg.width});
      p.layers.push_back(std::move(lp));
    }
    p.head_w = normal({cfg.width, cfg.answers}, 1.0 / std::sqrt(d));
    p.head_b = Tensor({cfg.answers});
    return Model(cfg, std::move(p));
  }

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }

  friend bool operator==(const Model& a, const Model& b) {
    return a.config_ == b.config_ && a.params_ == b.params_;
  }

 private:
  ModelConfig config_;
  ModelParams params_;
};

// ---------------------------------------------------------------------------
// Tape-level forward pass

struct BoundLayer {
  ad::Var wq, wk, wv, wo, w1, b1, w2, b2;
};

struct BoundParams {
  ad::Var patch_w, patch_b, token_embed, position_embed, slot;
  std::vector<BoundLayer> layers;
  ad::Var head_w, head_b;
  std::vector<ad::Var> all;  // in ModelParams::for_each order
};

inline BoundParams bind(ad::Tape& tape, const ModelParams& p, bool requires_grad) {
  BoundParams b;
  auto put = [&](const Tensor& t) {
    ad::Var v = tape.leaf(t, requires_grad);
    b.all.push_back(v);
    return v;
  };
  b.patch_w = put(p.patch_w);
  b.patch_b = put(p.patch_b);
  b.token_embed = put(p.token_embed);
  b.position_embed = put(p.position_embed);
  b.slot = put(p.slot);
  for (const auto& l : p.layers) {
    BoundLayer bl;
    bl.wq = put(l.wq);
    bl.wk = put(l.wk);
    bl.wv = put(l.wv);
    bl.wo = put(l.wo);
    bl.w1 = put(l.w1);
    bl.b1 = put(l.b1);
    bl.w2 = put(l.w2);
    bl.b2 = put(l.b2);
    b.layers.push_back(bl);
  }
  b.head_w = put(p.head_w);
  b.head_b = put(p.head_b);
  return b;
}

/// Flat pixel index of patch-major, (y, x, channel)-minor layout.
inline std::vector<std::size_t> patch_index(const ModelConfig& cfg) {
  std::vector<std::size_t> idx;
  idx.reserve(cfg.visual_tokens() * cfg.patch_dim());
  const std::size_t grid_w = cfg.image_width / cfg.patch;
  for (std::size_t t = 0; t < cfg.visual_tokens(); ++t) {
    const std::size_t pr = t / grid_w, pc = t % grid_w;
    for (std::size_t y = 0; y < cfg.patch; ++y) {
      for (std::size_t x = 0; x < cfg.patch; ++x) {
        for (std::size_t c = 0; c < cfg.channels; ++c) {
          idx.push_back(((pr * cfg.patch + y) * cfg.image_width + (pc * cfg.patch + x)) * cfg.channels + c);
        }
      }
    }
  }
  return idx;
}

inline void check_image(const ModelConfig& cfg, const Tensor& image) {
  if (image.shape() != cfg.image_shape()) {
    throw ShapeError("image shape " + shape_str(image.shape()) + " does not match model " + shape_str(cfg.image_shape()));
  }
}

/// Visual tokens [M x d]: one linear projection per flattened patch.
inline ad::Var encode_image(const ModelConfig& cfg, const BoundParams& p, const ad::Var& image) {
  check_image(cfg, image.value());
  ad::Var patches = ad::gather(image, patch_index(cfg), {cfg.visual_tokens(), cfg.patch_dim()});
  return ad::add(ad::matmul(patches, p.patch_w), p.patch_b);
}

struct ForwardVars {
  ad::Var logits;                  // (1, K_ans)
  ad::Var attention;               // (L*H, M), rows ordered layer-major
  std::vector<ad::Var> slot_rows;  // per (layer, head): full (1, M+N+1) softmax row of the answer slot
};

/// Sequence is [visual tokens; question tokens; answer slot]. The answer slot's
/// attention row in each layer yields the cross-modal attention. No mask: the slot
/// is the only position that is read out.
inline ForwardVars forward(const ModelConfig& cfg, const BoundParams& p, const ad::Var& image, const TokenSeq& q) {
  q.validate(cfg);
  const std::size_t m = cfg.visual_tokens();
  const std::size_t n = q.size();
  const std::size_t s = m + n + 1;
  const std::size_t dh = cfg.head_width();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  ad::Var visual = encode_image(cfg, p, image);
  ad::Var text = ad::add(ad::gather_rows(p.token_embed, q.ids), ad::slice(p.position_embed, 0, n, 0, cfg.width));
  ad::Var x = ad::concat_rows({visual, text, p.slot});

  ForwardVars out;
  std::vector<ad::Var> att_rows;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const BoundLayer& lp = p.layers[l];
    const bool last = l + 1 == cfg.layers;
    // The last layer only feeds the answer slot, so only its query row is needed.
    ad::Var xq = last ? ad::slice(x, s - 1, s, 0, cfg.width) : x;
    ad::Var qm = ad::matmul(xq, lp.wq);
    ad::Var km = ad::matmul(x, lp.wk);
    ad::Var vm = ad::matmul(x, lp.wv);
    std::vector<ad::Var> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::size_t c0 = h * dh, c1 = c0 + dh;
      ad::Var qh = ad::slice(qm, 0, qm.value().rows(), c0, c1);
      ad::Var kh = ad::slice(km, 0, s, c0, c1);
      ad::Var vh = ad::slice(vm, 0, s, c0, c1);
      ad::Var probs = ad::softmax(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_dh), 1);
      const std::size_t slot_row = probs.value().rows() - 1;
      ad::Var row = ad::slice(probs, slot_row, slot_row + 1, 0, s);
      out.slot_rows.push_back(row);
      att_rows.push_back(ad::slice(row, 0, 1, 0, m));
      heads.push_back(ad::matmul(probs, vh));
    }
    x = ad::add(xq, ad::matmul(ad::concat_cols(heads), lp.wo));
    ad::Var hidden = ad::tanh(ad::add(ad::matmul(x, lp.w1), lp.b1));
    x = ad::add(x, ad::add(ad::matmul(hidden, lp.w2), lp.b2));
  }
  out.attention = ad::concat_rows(att_rows);
  ad::Var slot_state = ad::slice(x, x.value().rows() - 1, x.value().rows(), 0, cfg.width);
  out.logits = ad::add(ad::matmul(slot_state, p.head_w), p.head_b);
  return out;
}

inline AttentionTensor to_attention(const ModelConfig& cfg, const Tensor& rows) {
  return AttentionTensor(rows.reshaped({cfg.layers, cfg.heads, cfg.visual_tokens()}));
}

inline std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (t[i] > t[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Value-level API

struct Prediction {
  Tensor logits;
  AttentionTensor attention;
  std::size_t answer = 0;
};

inline Prediction predict(const Model& model, const Tensor& image, const TokenSeq& q) {
  ad::Tape tape;
  BoundParams p = bind(tape, model.params(), false);
  ForwardVars f = forward(model.config(), p, tape.constant(image), q);
  Prediction out;
  out.logits = f.logits.value();
  out.attention = to_attention(model.config(), f.attention.value());
  out.answer = argmax(out.logits);
  return out;
}

inline Tensor encode_image(const Model& model, const Tensor& image) {
  ad::Tape tape;
  BoundParams p = bind(tape, model.params(), false);
  return encode_image(model.config(), p, tape.constant(image)).value();
}

/// Builds a scalar loss from the forward outputs; `image` is the differentiated input.
using LossSpec = std::function<ad::Var(ad::Tape&, const ForwardVars&, const ad::Var& image)>;

namespace loss {

inline LossSpec constant(double c) {
  return [c](ad::Tape& t, const ForwardVars&, const ad::Var&) { return t.constant(Tensor::scalar(c)); };
}

/// Cross-entropy of the answer logits against the label.
inline LossSpec lvlm(std::size_t label) {
  return [label](ad::Tape&, const ForwardVars& f, const ad::Var&) { return ad::cross_entropy(f.logits, label); };
}

/// lvlm_loss(x') - c * ||x - x'||_2.
inline LossSpec carlini_wagner(std::size_t label, Tensor clean, double c) {
  return [label, clean = std::move(clean), c](ad::Tape& t, const ForwardVars& f, const ad::Var& image) {
    ad::Var dist = ad::l2_norm(ad::sub(image, t.constant(clean)));
    return ad::sub(ad::cross_entropy(f.logits, label), ad::scale(dist, c));
  };
}

}  // namespace loss

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
  Tensor logits;
};

inline LossAndGrad loss_and_grad(const Model& model, const Tensor& image, const TokenSeq& q, const LossSpec& spec) {
  ad::Tape tape;
  BoundParams p = bind(tape, model.params(), false);
  ad::Var x = tape.leaf(image, true);
  ForwardVars f = forward(model.config(), p, x, q);
  ad::Var l = spec(tape, f, x);
  tape.backward(l);
  return {l.value().item(), tape.grad(x), f.logits.value()};
}

/// Gradient of the selected loss with respect to the input pixels.
inline Tensor input_grad(const Model& model, const Tensor& image, const TokenSeq& q, const LossSpec& spec) {
  return loss_and_grad(model, image, q, spec).grad;
}

inline double lvlm_loss(const Model& model, const Tensor& image, const TokenSeq& q, std::size_t label) {
  if (label >= model.config().answers) throw ConfigError("answer label out of range");
  ad::Tape tape;
  BoundParams p = bind(tape, model.params(), false);
  ForwardVars f = forward(model.config(), p, tape.constant(image), q);
  return ad::cross_entropy(f.logits, label).value().item();
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_model(const Model& model) {
  const ModelConfig& c = model.config();
  ByteWriter w;
  for (std::size_t v : {c.image_height, c.image_width, c.channels, c.patch, c.vocab, c.answers, c.layers, c.heads,
                        c.width, c.ffn_width, c.max_question_len}) {
    w.u64(v);
  }
  w.u64(c.seed);
  std::uint64_t count = 0;
  model.params().for_each([&](const Tensor&) { ++count; });
  w.u64(count);
  model.params().for_each([&](const Tensor& t) { w.tensor(t); });
  return seal("F3MD", kCheckpointVersion, w.bytes());
}

inline Model deserialize_model(std::string_view bytes) {
  const std::string payload = unseal(bytes, "F3MD", kCheckpointVersion, "checkpoint");
  ByteReader r(payload);
  ModelConfig c;
  for (std::size_t* f : {&c.image_height, &c.image_width, &c.channels, &c.patch, &c.vocab, &c.answers, &c.layers,
                         &c.heads, &c.width, &c.ffn_width, &c.max_question_len}) {
    *f = r.u64();
  }
  c.seed = r.u64();
  c.validate();
  Model shaped = Model::init(c);
  std::uint64_t count = r.u64();
  std::uint64_t expected = 0;
  shaped.params().for_each([&](const Tensor&) { ++expected; });
  if (count != expected) throw CorruptFileError("corrupt checkpoint: parameter count mismatch");
  shaped.params().for_each([&](Tensor& t) {
    Tensor loaded = r.tensor();
    if (loaded.shape() != t.shape()) throw CorruptFileError("corrupt checkpoint: parameter shape mismatch");
    t = std::move(loaded);
  });
  return shaped;
}

inline void save_model(const Model& model, const std::string& path) { write_file(path, serialize_model(model)); }
inline Model load_model(const std::string& path) { return deserialize_model(read_file(path)); }

}  // namespace f3lab
