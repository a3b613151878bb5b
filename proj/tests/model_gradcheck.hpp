#pragma once

// Finite-difference check of the full MVTM loss, per parameter group.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "maskgit/model.hpp"

namespace maskgit::testing {

struct LossInputs {
  std::vector<TokenId> inputs;   // with [MASK] ids
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
  std::vector<int> classes;
  double smoothing = 0.1;
  ForwardOptions forward{true, 99, 7};
};

inline LossInputs random_loss_inputs(const ModelConfig& c, std::size_t batch, Rng& rng) {
  LossInputs in;
  const auto n = static_cast<std::size_t>(c.seq_len());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto t = static_cast<TokenId>(uniform_index(rng, static_cast<std::size_t>(c.vocab)));
      const bool m = i == 0 || uniform01(rng) < 0.5;
      in.targets.push_back(t);
      in.mask.push_back(m ? 1 : 0);
      in.inputs.push_back(m ? c.mask_id() : t);
    }
    if (c.num_classes > 0) in.classes.push_back(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(c.num_classes))));
  }
  return in;
}

inline double model_loss(const Model<double>& model, const LossInputs& in) {
  GradTape<double> tape(false);
  const Var logits = forward(tape, model, in.inputs, in.classes, in.forward);
  return tape.value(mvtm_loss(tape, logits, in.targets, in.mask,
                              static_cast<std::size_t>(model.config.seq_len()), in.smoothing))
      .item();
}

inline std::vector<Tensor<double>> model_gradients(const Model<double>& model, const LossInputs& in) {
  GradTape<double> tape(true);
  const Var logits = forward(tape, model, in.inputs, in.classes, in.forward);
  return tape.backward(mvtm_loss(tape, logits, in.targets, in.mask,
                                 static_cast<std::size_t>(model.config.seq_len()), in.smoothing));
}

struct GroupCheck {
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
};

/// Checks `per_group` randomly chosen coordinates of every parameter group
/// (all of them if the group is smaller). Embedding tables are sampled from
/// rows the inputs actually touch. Relative error uses a 1e-6 floor.
inline std::map<std::string, GroupCheck> check_model_gradients(Model<double> model, const LossInputs& in,
                                                               std::size_t per_group, Rng& rng,
                                                               double step = 1e-5) {
  const auto grads = model_gradients(model, in);
  std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> candidates;
  const std::set<TokenId> used_tokens(in.inputs.begin(), in.inputs.end());
  const std::set<int> used_classes(in.classes.begin(), in.classes.end());
  for (std::size_t s = 0; s < model.params.size(); ++s) {
    const std::string& name = model.params.names[s];
    const Tensor<double>& t = model.params.tensors[s];
    auto& list = candidates[parameter_group(name)];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::size_t row = i / t.cols();
      if (name == "tok_emb" && !used_tokens.count(static_cast<TokenId>(row))) continue;
      if (name == "cls_emb" && !used_classes.count(static_cast<int>(row))) continue;
      list.push_back({s, i});
    }
  }
  std::map<std::string, GroupCheck> out;
  for (auto& [group, list] : candidates) {
    for (std::size_t i = 0; i < std::min(per_group, list.size()); ++i) {
      std::swap(list[i], list[i + uniform_index(rng, list.size() - i)]);
    }
    GroupCheck& gc = out[group];
    for (std::size_t i = 0; i < std::min(per_group, list.size()); ++i) {
      const auto [s, idx] = list[i];
      double& p = model.params.tensors[s][idx];
      const double orig = p;
      p = orig + step;
      const double up = model_loss(model, in);
      p = orig - step;
      const double down = model_loss(model, in);
      p = orig;
      const double fd = (up - down) / (2 * step);
      const double a = grads[s][idx];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6});
      gc.max_relative_error = std::max(gc.max_relative_error, rel);
      ++gc.coordinates;
    }
  }
  return out;
}

}  // namespace maskgit::testing
