#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "octloc/common.hpp"

namespace octloc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// One node of the dynamically built computation graph. Ops allocate a node
// per result, remember their parents, and install a backprop closure that
// reads this node's grad and accumulates into the parents' grads. Reduction
// loops everywhere run in a fixed left-to-right order so repeated runs are
// bitwise identical.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily during backward
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;
  bool requires_grad = false;
  std::string name;  // nonempty for parameters

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> data);
  // Gradient-carrying leaf.
  static Tensor param(Shape shape, std::vector<double> data, std::string name);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim(std::size_t i) const;
  std::vector<double>& values();
  const std::vector<double>& values() const;
  // Gradient accumulated by the last backward(); empty if untouched.
  const std::vector<double>& grad() const;
  void clear_grad();
  bool requires_grad() const;
  const std::string& name() const;
  double scalar() const;  // numel() == 1

  std::shared_ptr<TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

// Topologically ordered view of the graph below a root: parents always
// precede children. backward() seeds d(root)/d(root) = 1 and replays the
// node closures in exact reverse order.
struct Tape {
  std::vector<TensorNode*> order;
  static Tape build(const Tensor& root);
};

void backward(const Tensor& loss);  // loss must be scalar

// Central-difference check of backward() for a scalar-valued function of x.
// Returns the max over elements of |analytic - numeric| / max(|a|, |n|, 1).
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  double h = 1e-5);

// Multiply-accumulate counter. Ops report into the thread-local active
// counter (if any) under the current scope path, e.g. "blk0/hosa1/attn".
class FlopCounter {
 public:
  void add_macs(uint64_t n);
  const std::map<std::string, uint64_t>& by_scope() const { return macs_; }
  uint64_t total() const;
  uint64_t scoped_total(std::string_view prefix) const;

  static FlopCounter* active();

  // Installs the counter for the current thread for the lifetime of the
  // object.
  class Activation {
   public:
    explicit Activation(FlopCounter& c);
    ~Activation();
    Activation(const Activation&) = delete;
    Activation& operator=(const Activation&) = delete;

   private:
    FlopCounter* previous_;
  };

  // Pushes a label (may contain '/') onto the active counter's scope path.
  // No-op when no counter is active.
  class Scope {
   public:
    explicit Scope(std::string label);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    FlopCounter* counter_;
  };

 private:
  void push(std::string label);
  void pop();
  std::map<std::string, uint64_t> macs_;
  std::vector<std::string> stack_;
  std::string path_;
};

// Deterministic normal(0, std) truncated at +/- 2 std.
std::vector<double> truncated_normal(std::size_t n, double stddev,
                                     uint64_t seed);

}  // namespace octloc
