#pragma once

// Bidirectional transformer over token grids with a [MASK] input token and
// optional class conditioning. Pre-layernorm blocks, learned positional
// embeddings, output head over the K codebook ids (never [MASK]).

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskgit/errors.hpp"
#include "maskgit/ops.hpp"
#include "maskgit/random.hpp"
#include "maskgit/tape.hpp"
#include "maskgit/tensor.hpp"
#include "maskgit/token_grid.hpp"

namespace maskgit {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int embed_dim = 64;
  int hidden_dim = 256;
  int grid_h = 8;
  int grid_w = 8;
  int vocab = 64;        // K; the [MASK] input id is K
  int num_classes = 0;   // 0 = unconditional
  double dropout = 0.1;

  int seq_len() const noexcept { return grid_h * grid_w; }
  TokenId mask_id() const noexcept { return vocab; }

  void validate() const {
    if (layers < 0 || heads < 1 || embed_dim < 1 || hidden_dim < 1) {
      throw InvalidArgument("model dimensions must be positive");
    }
    if (embed_dim % heads != 0) throw InvalidArgument("embed_dim must be divisible by heads");
    if (grid_h < 1 || grid_w < 1) throw InvalidArgument("sequence length must be >= 1");
    if (vocab < 1) throw InvalidArgument("vocabulary size must be >= 1");
    if (num_classes < 0) throw InvalidArgument("num_classes must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout must be in [0, 1)");
  }

  /// 24 layers, 8 heads, 768/3072, 16x16 tokens, K = 1024.
  static ModelConfig imagenet_scale() {
    return ModelConfig{24, 8, 768, 3072, 16, 16, 1024, 1000, 0.1};
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},       {"heads", c.heads},
                     {"embed_dim", c.embed_dim}, {"hidden_dim", c.hidden_dim},
                     {"grid_h", c.grid_h},       {"grid_w", c.grid_w},
                     {"vocab", c.vocab},         {"num_classes", c.num_classes},
                     {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("grid_h").get_to(c.grid_h);
  j.at("grid_w").get_to(c.grid_w);
  j.at("vocab").get_to(c.vocab);
  j.at("num_classes").get_to(c.num_classes);
  j.at("dropout").get_to(c.dropout);
  c.validate();
}

/// Flat, ordered parameter registry. Order and names depend only on the
/// config, so checkpoints written by one run load in another.
template <typename T>
struct ModelParams {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  std::size_t size() const noexcept { return tensors.size(); }

  std::size_t index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw InvalidArgument("unknown parameter '" + name + "'");
  }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

/// Parameter names and shapes in registry order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const auto h = static_cast<std::size_t>(c.hidden_dim);
  const auto k = static_cast<std::size_t>(c.vocab);
  std::vector<std::pair<std::string, Shape>> out;
  out.push_back({"tok_emb", {k + 1, d}});
  out.push_back({"pos_emb", {static_cast<std::size_t>(c.seq_len()), d}});
  if (c.num_classes > 0) out.push_back({"cls_emb", {static_cast<std::size_t>(c.num_classes), d}});
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gamma", {d}});
    out.push_back({p + "ln1.beta", {d}});
    out.push_back({p + "attn.wq", {d, d}});
    out.push_back({p + "attn.bq", {d}});
    out.push_back({p + "attn.wk", {d, d}});
    out.push_back({p + "attn.bk", {d}});
    out.push_back({p + "attn.wv", {d, d}});
    out.push_back({p + "attn.bv", {d}});
    out.push_back({p + "attn.wo", {d, d}});
    out.push_back({p + "attn.bo", {d}});
    out.push_back({p + "ln2.gamma", {d}});
    out.push_back({p + "ln2.beta", {d}});
    out.push_back({p + "mlp.w1", {d, h}});
    out.push_back({p + "mlp.b1", {h}});
    out.push_back({p + "mlp.w2", {h, d}});
    out.push_back({p + "mlp.b2", {d}});
  }
  out.push_back({"ln_f.gamma", {d}});
  out.push_back({"ln_f.beta", {d}});
  out.push_back({"head.w", {d, k}});
  out.push_back({"head.b", {k}});
  return out;
}

/// Group a parameter belongs to, with the layer index stripped
/// ("blocks.3.attn.wq" -> "attn.wq").
inline std::string parameter_group(const std::string& name) {
  if (name.rfind("blocks.", 0) == 0) {
    const auto dot = name.find('.', 7);
    return name.substr(dot + 1);
  }
  return name;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Truncated normal (stddev 0.02, cut at 2 stddev) for weights and
/// embeddings; zeros for biases; unit gain, zero bias for layernorms.
template <typename T>
ModelParams<T> init_params(const ModelConfig& c, Rng& rng) {
  c.validate();
  ModelParams<T> p;
  for (auto& [name, shape] : parameter_layout(c)) {
    Tensor<T> t(shape);
    const std::string group = parameter_group(name);
    const bool zero = ends_with(group, ".beta") || group == "attn.bq" || group == "attn.bk" ||
                      group == "attn.bv" || group == "attn.bo" || group == "mlp.b1" ||
                      group == "mlp.b2" || group == "head.b";
    if (ends_with(group, ".gamma")) {
      t.fill(T{1});
    } else if (!zero) {
      for (T& v : t.data()) v = static_cast<T>(truncated_normal(rng, 0.02));
    }
    p.names.push_back(name);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

template <typename T>
struct Model {
  ModelConfig config;
  ModelParams<T> params;

  static Model random(const ModelConfig& c, Rng& rng) { return Model{c, init_params<T>(c, rng)}; }

  template <typename U>
  Model<U> cast() const {
    return Model<U>{config, params.template cast<U>()};
  }
};

struct ForwardOptions {
  bool training = false;         // enables dropout
  std::uint64_t dropout_seed = 0;
  std::uint64_t step = 0;
};

/// Model input ids for a grid: masked positions become the [MASK] id.
inline std::vector<TokenId> model_input(const TokenGrid& grid, const ModelConfig& c) {
  if (static_cast<int>(grid.size()) != c.seq_len()) {
    throw InvalidArgument("grid has " + std::to_string(grid.size()) +
                          " tokens but the model expects " + std::to_string(c.seq_len()));
  }
  grid.validate(c.vocab);
  std::vector<TokenId> ids(grid.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = grid.mask[i] ? c.mask_id() : grid.tokens[i];
  return ids;
}

/// Logits [batch * N x K] for a batch of input-id sequences laid end to end.
/// `class_ids` is empty for unconditional models, one id per sequence
/// otherwise (added to every position's embedding).
template <typename T>
Var forward(GradTape<T>& tape, const Model<T>& model, std::span<const TokenId> inputs,
            std::span<const int> class_ids, const ForwardOptions& opts = {}) {
  const ModelConfig& c = model.config;
  const auto n = static_cast<std::size_t>(c.seq_len());
  if (inputs.empty() || inputs.size() % n != 0) {
    throw InvalidArgument("input length " + std::to_string(inputs.size()) +
                          " is not a multiple of the sequence length " + std::to_string(n));
  }
  const std::size_t batch = inputs.size() / n;
  for (TokenId id : inputs) {
    if (id < 0 || id > c.mask_id()) throw InvalidArgument("input id " + std::to_string(id) + " out of range");
  }
  if (c.num_classes == 0 && !class_ids.empty()) {
    throw InvalidArgument("unconditional model given a class id");
  }
  if (c.num_classes > 0) {
    if (class_ids.size() != batch) throw InvalidArgument("class-conditional model needs one class id per sequence");
    for (int cid : class_ids) {
      if (cid < 0 || cid >= c.num_classes) {
        throw InvalidArgument("class id " + std::to_string(cid) + " outside [0, " +
                              std::to_string(c.num_classes) + ")");
      }
    }
  }

  const auto& ps = model.params;
  std::size_t slot = 0;
  auto next = [&]() { const std::size_t s = slot++; return tape.parameter(s, ps.tensors[s]); };
  const double drop = opts.training ? c.dropout : 0.0;
  auto drop_key = [&](std::uint64_t site) {
    return CounterRng::make(opts.dropout_seed, site, opts.step);
  };

  const Var tok = next();
  const Var pos = next();
  Var x = gather_rows(tape, tok, inputs);
  std::vector<TokenId> pos_ids(inputs.size());
  for (std::size_t i = 0; i < pos_ids.size(); ++i) pos_ids[i] = static_cast<TokenId>(i % n);
  x = add(tape, x, gather_rows<T>(tape, pos, pos_ids));
  if (c.num_classes > 0) {
    const Var cls = next();
    std::vector<TokenId> cls_ids(inputs.size());
    for (std::size_t i = 0; i < cls_ids.size(); ++i) cls_ids[i] = class_ids[i / n];
    x = add(tape, x, gather_rows<T>(tape, cls, cls_ids));
  }
  x = dropout(tape, x, drop, drop_key(0));

  for (int l = 0; l < c.layers; ++l) {
    const Var ln1g = next(), ln1b = next();
    const Var wq = next(), bq = next(), wk = next(), bk = next();
    const Var wv = next(), bv = next(), wo = next(), bo = next();
    const Var ln2g = next(), ln2b = next();
    const Var w1 = next(), b1 = next(), w2 = next(), b2 = next();

    const Var h = layernorm(tape, x, ln1g, ln1b);
    const Var q = add_bias(tape, matmul(tape, h, wq), bq);
    const Var k = add_bias(tape, matmul(tape, h, wk), bk);
    const Var v = add_bias(tape, matmul(tape, h, wv), bv);
    const Var a = attention(tape, q, k, v, batch, n, static_cast<std::size_t>(c.heads));
    Var proj = add_bias(tape, matmul(tape, a, wo), bo);
    proj = dropout(tape, proj, drop, drop_key(2 * static_cast<std::uint64_t>(l) + 1));
    x = add(tape, x, proj);

    const Var h2 = layernorm(tape, x, ln2g, ln2b);
    const Var m = gelu(tape, add_bias(tape, matmul(tape, h2, w1), b1));
    Var out = add_bias(tape, matmul(tape, m, w2), b2);
    out = dropout(tape, out, drop, drop_key(2 * static_cast<std::uint64_t>(l) + 2));
    x = add(tape, x, out);
  }
  const Var lnfg = next(), lnfb = next();
  const Var hw = next(), hb = next();
  x = layernorm(tape, x, lnfg, lnfb);
  return add_bias(tape, matmul(tape, x, hw), hb);
}

/// Inference logits [N x K] for one grid.
template <typename T>
Tensor<T> predict_logits(const Model<T>& model, const TokenGrid& grid,
                         std::optional<int> class_id = std::nullopt) {
  GradTape<T> tape(false);
  const auto ids = model_input(grid, model.config);
  std::vector<int> cls;
  if (class_id) cls.push_back(*class_id);
  const Var logits = forward(tape, model, ids, cls);
  return tape.value(logits);
}

/// Mean label-smoothed cross-entropy over masked positions, averaged per
/// sequence and then over the batch. Unmasked positions are never read.
template <typename T>
Var mvtm_loss(GradTape<T>& tape, Var logits, std::span<const TokenId> targets,
              std::span<const std::uint8_t> mask, std::size_t seq_len, double smoothing) {
  if (targets.size() != mask.size() || seq_len == 0 || mask.size() % seq_len != 0) {
    throw InvalidArgument("mvtm_loss: targets and mask must cover whole sequences");
  }
  const std::size_t batch = mask.size() / seq_len;
  std::vector<T> weights(mask.size(), T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < seq_len; ++i) count += mask[b * seq_len + i] ? 1 : 0;
    if (count == 0) throw InvalidArgument("mvtm_loss: sequence " + std::to_string(b) + " has an empty mask");
    const T w = T{1} / static_cast<T>(count * batch);
    for (std::size_t i = 0; i < seq_len; ++i) {
      if (mask[b * seq_len + i]) weights[b * seq_len + i] = w;
    }
  }
  return weighted_cross_entropy<T>(tape, logits, targets, weights, smoothing);
}

}  // namespace maskgit
