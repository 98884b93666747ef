#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "odgen/tensor.hpp"

namespace odgen::nn {

// ===== reverse-mode tape ===================================================
//
// A Graph owns a topologically ordered list of nodes; every op appends one.
// backward() walks the list in reverse, so gradients are always accumulated
// in a fixed order (this is what makes training bit-reproducible on a given
// build).  Graphs are cheap, single-use objects: build, read values,
// backward, drop.

struct Node;
using NodeP = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily; empty means "no gradient reached this node"
  std::vector<NodeP> inputs;
  std::function<void(Node&)> backward_fn;  // null for leaves
  bool needs_grad = false;
  // non-null for parameter leaves: gradients are flushed here after backward
  struct Param* param = nullptr;

  Tensor& grad_buf() {
    if (grad.empty()) grad = Tensor::zeros(value.dims());
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
  // seed for backward; adds (so multiple loss terms can seed the same node)
  void add_grad(const Tensor& g) {
    if (!g.same_dims(value)) throw OdError::dimension("seed grad shape mismatch");
    grad_buf().flat() += g.flat();
  }
  void add_grad(double s) {
    if (value.size() != 1) throw OdError::dimension("scalar seed on non-scalar node");
    grad_buf().data()[0] += s;
  }
  double scalar() const {
    if (value.size() != 1) throw OdError::dimension("scalar() on non-scalar node");
    return value.data()[0];
  }
};

// Trainable (or frozen) parameter.  Lives in a ParamStore, referenced by
// layers; graphs attach to it via Graph::param().  grad_accum collects
// gradients across the per-sample graphs of a batch.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad_accum;
  Tensor adam_m, adam_v;  // empty until the optimizer touches them
  bool trainable = true;
  bool apply_decay = true;  // weight decay skips biases and norm scales

  void zero_grad() {
    if (!grad_accum.empty()) grad_accum.flat().setZero();
  }
};

class Graph {
 public:
  // constant leaf (no gradient)
  NodeP constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    order_.push_back(n);
    return n;
  }

  // differentiable leaf (for inputs we want gradients on, e.g. gradchecks)
  NodeP input(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->needs_grad = true;
    order_.push_back(n);
    return n;
  }

  // parameter leaf; shares the Param's storage (no copy)
  NodeP param(Param& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;
    n->needs_grad = p.trainable;
    n->param = &p;
    order_.push_back(n);
    return n;
  }

  // interior node produced by an op
  NodeP make(Tensor v, std::vector<NodeP> inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
      if (in->needs_grad) {
        n->needs_grad = true;
        break;
      }
    if (n->needs_grad) n->backward_fn = std::move(bw);
    order_.push_back(n);
    return n;
  }

  // Seed the root with d(root)/d(root) = 1 and sweep.  root must be scalar.
  void backward(const NodeP& root) {
    root->add_grad(1.0);
    backward_seeded();
  }

  // Sweep using whatever seeds callers have already placed with add_grad().
  void backward_seeded() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node& n = **it;
      if (n.backward_fn && n.has_grad() && n.needs_grad) n.backward_fn(n);
    }
    flush_param_grads();
  }

  size_t node_count() const { return order_.size(); }

 private:
  void flush_param_grads() {
    for (const auto& n : order_) {
      if (n->param && n->param->trainable && n->has_grad()) {
        Param& p = *n->param;
        if (p.grad_accum.empty()) p.grad_accum = Tensor::zeros(p.value.dims());
        p.grad_accum.flat() += n->grad.flat();
      }
    }
  }

  std::vector<NodeP> order_;
};

// ===== parameter registry ==================================================

class ParamStore {
 public:
  Param& create(const std::string& name, std::vector<int> dims) {
    if (index_.count(name)) throw OdError::state("duplicate parameter name: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Tensor::zeros(std::move(dims));
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *items_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw OdError::state("unknown parameter: " + name);
    return *items_[it->second];
  }

  size_t size() const { return items_.size(); }
  Param& operator[](size_t i) { return *items_[i]; }
  const Param& operator[](size_t i) const { return *items_[i]; }

  void zero_grads() {
    for (auto& p : items_) p->zero_grad();
  }

  int64_t scalar_count() const {
    int64_t c = 0;
    for (const auto& p : items_) c += p->value.size();
    return c;
  }

 private:
  std::vector<std::unique_ptr<Param>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// ===== optimizer ===========================================================

// AdamW with decoupled weight decay.  step() consumes grad_accum (scaled by
// `grad_scale`, typically 1/batch) and zeroes it.
class AdamW {
 public:
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;

  void step(ParamStore& ps, double grad_scale = 1.0);

  int64_t t = 0;  // update count; serialized with checkpoints
};

}  // namespace odgen::nn
