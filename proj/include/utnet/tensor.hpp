#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "utnet/base.hpp"
#include "utnet/rng.hpp"

namespace utnet {

class Graph;

// Dense f64 tensor, row-major. Values are immutable once an op has produced
// them; the data buffer is shared, so copies are cheap handles. `grad` is
// only populated on requires_grad leaves after Graph::backward.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;
  bool requires_grad = false;
  int node_id = -1;       // position on the recording tape, -1 if off-tape
  uint64_t tape_epoch = 0;

  Tensor() = default;

  static Tensor zeros(const Shape& s) {
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<double>>(size_t(utnet::numel(s)), 0.0);
    return t;
  }

  static Tensor full(const Shape& s, double v) {
    Tensor t = zeros(s);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from(const Shape& s, std::vector<double> values) {
    if (int64_t(values.size()) != utnet::numel(s))
      throw ShapeError("from(): " + shape_str(s) + " needs " +
                       std::to_string(utnet::numel(s)) + " values, got " +
                       std::to_string(values.size()));
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  static Tensor randn(const Shape& s, SplitMix64& rng, double stddev = 1.0) {
    Tensor t = zeros(s);
    for (double& v : *t.data) v = rng.normal() * stddev;
    return t;
  }

  // Marks this tensor as a trainable leaf and allocates its grad buffer.
  Tensor& set_requires_grad() {
    requires_grad = true;
    if (!grad) grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
    return *this;
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
  }

  int64_t numel() const { return data ? int64_t(data->size()) : 0; }
  int dim(int i) const { return shape[size_t(i)]; }
  int ndim() const { return int(shape.size()); }
  bool defined() const { return bool(data); }

  double& at(int64_t i) { return (*data)[size_t(i)]; }
  double at(int64_t i) const { return (*data)[size_t(i)]; }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }

  double scalar() const {
    if (numel() != 1)
      throw ShapeError("scalar() on tensor of shape " + shape_str(shape));
    return (*data)[0];
  }
};

// Reverse-mode tape. Nodes are appended in forward order, so the list is
// acyclic by construction; backward walks it once in reverse.
class Graph {
 public:
  struct Node {
    const char* op = "";
    std::vector<int> inputs;
    int64_t out_size = 0;
    // Receives this node's output gradient, accumulates into input buffers.
    std::function<void(Graph&, const std::vector<double>&)> backward;
    std::shared_ptr<std::vector<double>> grad;  // leaf: aliases Tensor::grad
    bool is_leaf = false;
  };

  Graph() : epoch_(next_epoch()++) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  uint64_t epoch() const { return epoch_; }
  size_t size() const { return nodes_.size(); }
  const Node& node(int i) const { return nodes_[size_t(i)]; }
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  // True when `t`'s node id refers to this tape.
  bool on_tape(const Tensor& t) const {
    return t.node_id >= 0 && t.tape_epoch == epoch_;
  }

  // Registers `t` as a leaf if needed; returns its node id, or -1 for
  // constants that carry no gradient.
  int input_id(const Tensor& t) {
    if (on_tape(t)) return t.node_id;
    if (!t.requires_grad) return -1;
    const void* key = t.data.get();
    auto it = leaf_ids_.find(key);
    if (it != leaf_ids_.end()) return it->second;
    Node n;
    n.op = "leaf";
    n.out_size = t.numel();
    n.grad = t.grad;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    int id = int(nodes_.size()) - 1;
    leaf_ids_.emplace(key, id);
    return id;
  }

  int push(const char* op, std::vector<int> inputs, int64_t out_size,
           std::function<void(Graph&, const std::vector<double>&)> bw) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.out_size = out_size;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  // Gradient buffer of node `id`, allocated as zeros on first touch.
  std::vector<double>& grad_buf(int id) {
    Node& n = nodes_[size_t(id)];
    if (!n.grad)
      n.grad = std::make_shared<std::vector<double>>(size_t(n.out_size), 0.0);
    return *n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates through the tape in reverse
  // insertion order, visiting each node at most once. Leaf gradients
  // accumulate across calls; internal scratch is per-call.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw Error("backward: loss must be scalar, got shape " +
                  shape_str(loss.shape));
    if (!on_tape(loss))
      throw Error("backward: loss is not on the active graph");
    grad_buf(loss.node_id)[0] += 1.0;
    for (int i = loss.node_id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.grad) continue;  // does not influence the loss
      if (n.backward) n.backward(*this, *n.grad);
      if (!n.is_leaf) n.grad.reset();  // free scratch as we go
    }
  }

  // Drops all recorded nodes (saved activations included). Leaf tensors and
  // their grad buffers are unaffected. Stale node ids are invalidated via a
  // fresh epoch.
  void clear() {
    nodes_.clear();
    leaf_ids_.clear();
    epoch_ = next_epoch()++;
  }

  // ---- active-graph scope ----
  static Graph*& current() {
    thread_local Graph* g = nullptr;
    return g;
  }

 private:
  static uint64_t& next_epoch() {
    thread_local uint64_t e = 1;
    return e;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> leaf_ids_;
  uint64_t epoch_;
  bool recording_ = true;
};

// RAII activation of a graph: ops record onto Graph::current() while in
// scope; with no active graph ops run as pure functions.
struct GraphScope {
  Graph* prev;
  explicit GraphScope(Graph& g) : prev(Graph::current()) {
    Graph::current() = &g;
  }
  ~GraphScope() { Graph::current() = prev; }
};

struct NoGradScope {
  Graph* prev;
  NoGradScope() : prev(Graph::current()) { Graph::current() = nullptr; }
  ~NoGradScope() { Graph::current() = prev; }
};

namespace detail {

// Whether the op on these inputs must be recorded.
inline Graph* recording_graph(std::initializer_list<const Tensor*> inputs) {
  Graph* g = Graph::current();
  if (!g || !g->recording()) return nullptr;
  for (const Tensor* t : inputs)
    if (t->requires_grad || g->on_tape(*t)) return g;
  return nullptr;
}

inline void nan_scan(const Tensor& t, const char* op) {
  if (!nan_checks_enabled()) return;
  for (double v : *t.data)
    if (!std::isfinite(v)) throw NonFiniteError(op);
}

}  // namespace detail

// Convenience wrapper used by every op: runs the forward fn, scans the
// output, and records the backward closure when a graph is active.
template <typename Backward>
inline Tensor record_op(const char* op, std::initializer_list<const Tensor*> inputs,
                        Tensor out, Backward&& make_backward) {
  detail::nan_scan(out, op);
  if (Graph* g = detail::recording_graph(inputs)) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor* t : inputs) ids.push_back(g->input_id(*t));
    auto bw = make_backward(ids);
    out.node_id = g->push(op, std::move(ids), out.numel(), std::move(bw));
    out.tape_epoch = g->epoch();
  }
  return out;
}

// Accumulates `src` into node `id`'s gradient buffer if it tracks gradient.
inline void accumulate_grad(Graph& g, int id, const std::vector<double>& src) {
  if (id < 0) return;
  auto& dst = g.grad_buf(id);
  for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace utnet
