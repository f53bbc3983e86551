#include "octloc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_set>

namespace octloc {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  return full(std::move(shape), 0.0);
}

Tensor Tensor::full(Shape shape, double v) {
  auto node = std::make_shared<TensorNode>();
  node->value.assign(shape_numel(shape), v);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (data.size() != shape_numel(shape))
    throw ShapeError("Tensor::from: data size does not match shape " +
                     shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::param(Shape shape, std::vector<double> data, std::string name) {
  Tensor t = from(std::move(shape), std::move(data));
  t.node()->requires_grad = true;
  t.node()->name = std::move(name);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::size_t Tensor::dim(std::size_t i) const { return node_->shape.at(i); }
std::vector<double>& Tensor::values() { return node_->value; }
const std::vector<double>& Tensor::values() const { return node_->value; }
const std::vector<double>& Tensor::grad() const { return node_->grad; }
void Tensor::clear_grad() { node_->grad.clear(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
const std::string& Tensor::name() const { return node_->name; }

double Tensor::scalar() const {
  if (numel() != 1) throw ShapeError("Tensor::scalar: tensor is not scalar");
  return node_->value[0];
}

Tape Tape::build(const Tensor& root) {
  Tape tape;
  if (!root.defined()) throw DataError("Tape::build: undefined tensor");
  // Iterative post-order DFS over parent links; a node is emitted after all
  // of its parents, giving a parents-first topological order. Traversal
  // follows the parents vectors only, so the order is deterministic.
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next].get();
      ++next;
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      tape.order.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw DataError("backward: undefined tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // graph of constants, nothing to do
  Tape tape = Tape::build(loss);
  for (TensorNode* node : tape.order)
    if (node->requires_grad) node->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->requires_grad && node->backprop) node->backprop(*node);
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  double h) {
  if (!x.requires_grad())
    throw DataError("grad_check: input must be a parameter");
  Tensor y = f(x);
  if (y.numel() != 1) throw ShapeError("grad_check: f must return a scalar");
  x.clear_grad();
  backward(y);
  std::vector<double> analytic(x.numel(), 0.0);
  if (!x.grad().empty()) analytic = x.grad();

  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = x.values()[i];
    x.values()[i] = saved + h;
    const double up = f(x).scalar();
    x.values()[i] = saved - h;
    const double dn = f(x).scalar();
    x.values()[i] = saved;
    const double numeric = (up - dn) / (2.0 * h);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), 1.0});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

namespace {
thread_local FlopCounter* g_active_counter = nullptr;
}

void FlopCounter::add_macs(uint64_t n) {
  macs_[path_] += n;
}

uint64_t FlopCounter::total() const {
  uint64_t t = 0;
  for (const auto& [scope, n] : macs_) t += n;
  return t;
}

uint64_t FlopCounter::scoped_total(std::string_view prefix) const {
  uint64_t t = 0;
  for (const auto& [scope, n] : macs_)
    if (scope.size() >= prefix.size() &&
        std::string_view(scope).substr(0, prefix.size()) == prefix)
      t += n;
  return t;
}

FlopCounter* FlopCounter::active() { return g_active_counter; }

FlopCounter::Activation::Activation(FlopCounter& c) {
  previous_ = g_active_counter;
  g_active_counter = &c;
}

FlopCounter::Activation::~Activation() { g_active_counter = previous_; }

FlopCounter::Scope::Scope(std::string label) : counter_(g_active_counter) {
  if (counter_) counter_->push(std::move(label));
}

FlopCounter::Scope::~Scope() {
  if (counter_) counter_->pop();
}

void FlopCounter::push(std::string label) {
  stack_.push_back(std::move(label));
  if (!path_.empty()) path_ += '/';
  path_ += stack_.back();
}

void FlopCounter::pop() {
  const std::string& last = stack_.back();
  path_.resize(path_.size() - last.size());
  if (!path_.empty()) path_.pop_back();  // trailing '/'
  stack_.pop_back();
}

std::vector<double> truncated_normal(std::size_t n, double stddev,
                                     uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> out(n);
  for (double& v : out) {
    do {
      v = dist(rng);
    } while (std::abs(v) > 2.0 * stddev);
  }
  return out;
}

}  // namespace octloc
