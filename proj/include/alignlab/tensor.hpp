#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace alignlab {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tape;

// Dense row-major tensor of doubles with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage, which is what
// lets a parameter registered in a model be updated in place by the
// optimizer. Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  // Matrix views of the shape; a 1-d tensor of length n is a 1 x n row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero buffer on first use.
  // Grad storage belongs to the shared handle, so these are usable on const
  // handles captured by backward closures.
  std::span<double> mutable_grad() const;
  void zero_grad() const;
  void clear_grad() const;

  // Position on the active tape, or -1 for leaves and untracked values.
  std::int64_t node_id() const;

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::int64_t node_id = -1;
    const Tape* tape = nullptr;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

// Records differentiable operations in execution order. Constructing a Tape
// makes it the active tape for the current thread until it is destroyed;
// operations executed while no tape is active are not recorded.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  // Called by operations. Marks `output` as requiring grad and assigns its
  // node id. The backward closure reads output.grad() and accumulates into
  // the grads of whichever inputs require them.
  void record(const std::vector<Tensor>& inputs, Tensor& output, BackwardFn fn);

  std::size_t size() const { return entries_.size(); }

  // Reverse sweep from `loss`. Intermediate grads are reset at the start of
  // every call; leaf grads accumulate across calls until zeroed.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

// Backward through the tape that produced `loss`.
void backward(const Tensor& loss);

}  // namespace alignlab
