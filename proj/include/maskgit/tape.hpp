#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskgit/errors.hpp"
#include "maskgit/tensor.hpp"

namespace maskgit {

/// Handle to a node recorded on a GradTape.
struct Var {
  std::size_t id = 0;
};

/// Records operations in execution order and replays them in reverse to
/// accumulate gradients. One tape per thread; a tape may be backpropagated
/// once. A non-recording tape evaluates values only and keeps no closures or
/// saved activations.
template <typename T>
class GradTape {
 public:
  // Receives the output gradient and one accumulator per input; an
  // accumulator is null when that input does not need a gradient.
  using BackwardFn = std::function<void(const GradTape&, const Tensor<T>&,
                                        std::span<Tensor<T>* const>)>;

  explicit GradTape(bool recording = true) : recording_(recording) {}

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  GradTape(GradTape&&) = default;
  GradTape& operator=(GradTape&&) = default;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor<T> value) {
    Node node;
    node.owned = std::move(value);
    return append(std::move(node));
  }

  /// Leaf that references an external parameter tensor. The tensor must
  /// outlive the tape. Its gradient is reported under `slot`.
  Var parameter(std::size_t slot, const Tensor<T>& value) {
    Node node;
    node.external = &value;
    node.slot = static_cast<std::ptrdiff_t>(slot);
    node.requires_grad = recording_;
    return append(std::move(node));
  }

  const Tensor<T>& value(Var v) const {
    const Node& node = nodes_.at(v.id);
    return node.external ? *node.external : node.owned;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Appends an op result. `op` names the kernel in diagnostics. Non-finite
  /// results raise NumericError immediately.
  Var push(const char* op, Tensor<T> value, std::vector<Var> inputs,
           BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
    if (consumed_) {
      throw TapeError("cannot record on a tape that was already backpropagated");
    }
    Node node;
    node.owned = std::move(value);
    bool needs = false;
    if (recording_) {
      for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    }
    node.requires_grad = needs;
    if (needs) {
      node.inputs = std::move(inputs);
      node.backward = std::move(backward);
    }
    return append(std::move(node));
  }

  /// Reverse-mode sweep from a scalar loss. Returns one gradient per
  /// parameter slot seen on the tape; slots never registered stay empty.
  std::vector<Tensor<T>> backward(Var loss) {
    if (!recording_) throw TapeError("backward on a non-recording tape");
    if (consumed_) {
      throw TapeError("backward called twice without re-recording the forward");
    }
    if (value(loss).size() != 1) {
      throw TapeError("backward requires a scalar loss, got shape " +
                      shape_string(value(loss).shape()));
    }
    consumed_ = true;

    std::size_t slots = 0;
    for (const Node& node : nodes_) {
      if (node.slot >= 0) {
        slots = std::max(slots, static_cast<std::size_t>(node.slot) + 1);
      }
    }
    std::vector<Tensor<T>> param_grads(slots);
    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    grads[loss.id] = Tensor<T>(value(loss).shape(), T{1});

    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!grads[i] || !node.requires_grad) continue;
      if (node.slot >= 0) {
        Tensor<T>& acc = param_grads[static_cast<std::size_t>(node.slot)];
        if (acc.empty()) {
          acc = std::move(*grads[i]);
        } else {
          auto dst = acc.data();
          auto src = grads[i]->data();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
        grads[i].reset();
        continue;
      }
      if (!node.backward) continue;
      std::vector<Tensor<T>*> accs(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const Var in = node.inputs[k];
        if (!nodes_[in.id].requires_grad) continue;
        if (!grads[in.id]) grads[in.id] = Tensor<T>(value(in).shape(), T{0});
        accs[k] = &*grads[in.id];
      }
      node.backward(*this, *grads[i], accs);
      grads[i].reset();
      node.backward = nullptr;
    }
    for (std::size_t s = 0; s < slots; ++s) {
      if (param_grads[s].empty()) {
        for (const Node& node : nodes_) {
          if (node.slot == static_cast<std::ptrdiff_t>(s)) {
            param_grads[s] = Tensor<T>(node.external->shape(), T{0});
            break;
          }
        }
      }
    }
    return param_grads;
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    std::ptrdiff_t slot = -1;
    bool requires_grad = false;
    std::vector<Var> inputs;
    BackwardFn backward;
  };

  Var append(Node node) {
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  bool recording_;
  bool consumed_ = false;
  std::deque<Node> nodes_;  // deque: value() references stay valid
};

}  // namespace maskgit
