#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "cmil/tensor.hpp"

namespace cmil {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; invalidated when the tape dies.
template <typename T>
class Value {
 public:
  Value() : tape_(nullptr), idx_(-1) {}
  Value(Tape<T>* tape, int idx) : tape_(tape), idx_(idx) {}

  Tape<T>* tape() const { return tape_; }
  int idx() const { return idx_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  const std::vector<T>& data() const;
  const std::vector<T>& grad() const;
  std::size_t size() const { return data().size(); }

  // Scalar payload (throws unless numel == 1).
  T item() const {
    if (size() != 1) fail("item: value has " + std::to_string(size()) + " elements");
    return data()[0];
  }

 private:
  Tape<T>* tape_;
  int idx_;
};

// Records a forward computation in execution order; node i's inputs always
// have indices < i, so a reverse index sweep is a valid reverse topological
// order for backpropagation.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  struct Node {
    const char* op;
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until the backward sweep reaches this node
    bool requires_grad = false;
    BackwardFn backward;
    std::vector<int> parents;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // --- leaves ------------------------------------------------------------

  Value<T> leaf(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != numel(shape))
      fail("leaf: data length " + std::to_string(data.size()) +
           " does not match shape " + shape_str(shape));
    Node n;
    n.op = "leaf";
    n.shape = std::move(shape);
    n.data = std::move(data);
    n.requires_grad = requires_grad && grad_enabled_;
    nodes_.push_back(std::move(n));
    return Value<T>(this, int(nodes_.size()) - 1);
  }

  Value<T> constant(Shape shape, std::vector<T> data) {
    return leaf(std::move(shape), std::move(data), false);
  }

  Value<T> scalar(T v) { return leaf(Shape{}, {v}, false); }

  // Leaf bound to an external tensor; backward() flushes the node gradient
  // into tensor.grad.
  Value<T> param(Tensor<T>& t) {
    Value<T> v = leaf(t.shape, t.data, true);
    if (v.tape()->nodes_[v.idx()].requires_grad)
      bindings_.emplace_back(v.idx(), &t);
    return v;
  }

  // --- op emission --------------------------------------------------------

  Value<T> emit(const char* op, Shape shape, std::vector<T> data,
                std::vector<int> parents, BackwardFn fn) {
    if (data.size() != numel(shape))
      fail(std::string(op) + ": result length does not match shape " + shape_str(shape));
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.data = std::move(data);
    n.parents = std::move(parents);
    if (grad_enabled_) {
      for (int p : n.parents)
        if (nodes_[p].requires_grad) { n.requires_grad = true; break; }
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Value<T>(this, int(nodes_.size()) - 1);
  }

  // --- backward -----------------------------------------------------------

  void backward(Value<T> root) {
    if (root.tape() != this) fail("backward: root is not on this tape");
    if (backwarded_) fail("backward: already called on this tape");
    if (root.size() != 1) fail("backward: root must be scalar, got shape " +
                               shape_str(root.shape()));
    backwarded_ = true;
    grad_of(root.idx())[0] = T(1);
    for (int i = root.idx(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.grad.empty() && n.backward) n.backward(*this);
    }
    for (auto& [idx, tensor] : bindings_) {
      Node& n = nodes_[idx];
      if (n.grad.empty()) continue;
      if (tensor->grad.size() != tensor->data.size()) tensor->zero_grad();
      for (std::size_t k = 0; k < n.grad.size(); ++k) tensor->grad[k] += n.grad[k];
    }
  }

  // --- node access --------------------------------------------------------

  Node& node(int i) { return nodes_[i]; }
  const Node& node(int i) const { return nodes_[i]; }
  std::size_t num_nodes() const { return nodes_.size(); }

  const std::vector<T>& data_of(int i) const { return nodes_[i].data; }

  // Lazily sized gradient accumulator.
  std::vector<T>& grad_of(int i) {
    Node& n = nodes_[i];
    if (n.grad.empty()) n.grad.assign(numel(n.shape), T(0));
    return n.grad;
  }

  bool wants_grad(int i) const { return nodes_[i].requires_grad; }

  // When disabled, no backward closures are recorded (cheap forward-only
  // evaluation for finite differences).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  // Optional event log; ops append notes for degenerate inputs (all-zero
  // selections, zero-norm cosines) instead of crashing.
  void set_event_log(std::vector<std::string>* log) { events_ = log; }
  void note(const std::string& msg) {
    if (events_) events_->push_back(msg);
  }

  void dump(std::ostream& os) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      os << i << "\t" << nodes_[i].op << "\t" << shape_str(nodes_[i].shape);
      if (!nodes_[i].parents.empty()) {
        os << "\t<-";
        for (int p : nodes_[i].parents) os << " " << p;
      }
      os << "\n";
    }
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::pair<int, Tensor<T>*>> bindings_;
  bool grad_enabled_ = true;
  bool backwarded_ = false;
  std::vector<std::string>* events_ = nullptr;
};

template <typename T>
const Shape& Value<T>::shape() const { return tape_->node(idx_).shape; }

template <typename T>
const std::vector<T>& Value<T>::data() const { return tape_->node(idx_).data; }

template <typename T>
const std::vector<T>& Value<T>::grad() const { return tape_->node(idx_).grad; }

}  // namespace cmil
