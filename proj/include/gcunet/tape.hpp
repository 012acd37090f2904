#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gcunet/tensor.hpp"

namespace gcunet {

// Reverse-mode tape. Ops executed while a tape is active append a backward
// closure; backward(loss) replays closures in reverse, accumulating into
// .grad() buffers. One tape per scalar-type is active per thread at a time.
template <class S>
class GradTape {
 public:
  struct Node {
    const char* op;
    std::function<void()> fn;
  };

  static GradTape*& active() {
    thread_local GradTape* t = nullptr;
    return t;
  }

  void record(const char* op, std::function<void()> fn) {
    nodes_.push_back(Node{op, std::move(fn)});
  }

  size_t size() const { return nodes_.size(); }

  // Name of the op whose backward closure is currently running; used by the
  // gradient corruption hook below.
  static const char*& current_op() {
    thread_local const char* op = "";
    return op;
  }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      current_op() = it->op;
      it->fn();
    }
    current_op() = "";
    nodes_.clear();
  }

 private:
  std::vector<Node> nodes_;
};

template <class S>
class TapeScope {
 public:
  TapeScope() {
    prev_ = GradTape<S>::active();
    GradTape<S>::active() = &tape_;
  }
  ~TapeScope() { GradTape<S>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  GradTape<S>& tape() { return tape_; }

 private:
  GradTape<S> tape_;
  GradTape<S>* prev_;
};

// Negative-control hook: when `op` matches the running backward closure, all
// gradient contributions it accumulates are scaled. Lets tests prove the
// finite-difference comparison actually detects a wrong adjoint.
struct GradCorruption {
  static std::string& op() {
    static std::string s;
    return s;
  }
  static double& scale() {
    static double v = 1.5;
    return v;
  }
  static bool active_for(const char* current) { return !op().empty() && op() == current; }
};

// All backward closures add gradient through this helper so the corruption
// hook sees every path.
template <class S>
inline void accumulate_grad(const std::shared_ptr<TensorData<S>>& node, int64_t index, S amount) {
  if (GradCorruption::active_for(GradTape<S>::current_op()))
    amount = static_cast<S>(amount * GradCorruption::scale());
  node->ensure_grad();
  node->g[static_cast<size_t>(index)] += amount;
}

template <class S>
inline bool tape_active() {
  return GradTape<S>::active() != nullptr;
}

// True when an op with these inputs must record a backward node.
template <class S>
inline bool needs_tape(std::initializer_list<const Tensor<S>*> inputs) {
  if (!tape_active<S>()) return false;
  for (const Tensor<S>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <class S>
inline void record_node(const Tensor<S>& out, const char* op, std::function<void()> fn) {
  const_cast<Tensor<S>&>(out).set_requires_grad(true);
  GradTape<S>::active()->record(op, std::move(fn));
}

// Seeds d(loss)/d(loss) = 1 and consumes the active tape.
template <class S>
inline void backward(const Tensor<S>& loss) {
  if (!tape_active<S>()) fail(ErrorKind::usage, "backward() called with no active tape");
  if (loss.numel() != 1)
    fail(ErrorKind::usage, "backward() expects a scalar loss, got shape " + shape_str(loss.shape()));
  if (!std::isfinite(static_cast<double>(loss.values()[0])))
    fail(ErrorKind::numeric, "backward() called on non-finite loss");
  auto node = loss.node();
  node->ensure_grad();
  node->g[0] += S(1);
  GradTape<S>::active()->run_backward();
}

}  // namespace gcunet
