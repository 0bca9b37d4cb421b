#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mbias::ad {

/// Dense row-major tensor of doubles. Rank 0 (scalar), 1 or 2 in practice.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_, std::vector<double> data_);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1 && shape.empty(); }

  /// Rows/cols view of a rank-1 or rank-2 tensor; a vector is one row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double item() const;
};

std::string shape_string(const std::vector<std::size_t>& shape);

/// Assigns every named parameter tensor a contiguous slice of one flat vector.
class ParameterLayout {
 public:
  struct Slot {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
  };

  /// Returns the slot index.
  std::size_t add(std::string name, std::vector<std::size_t> shape);

  const Slot& slot(std::size_t i) const { return slots_.at(i); }
  std::size_t num_slots() const { return slots_.size(); }
  std::size_t total_size() const { return total_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  std::vector<Slot> slots_;
  std::size_t total_ = 0;
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

/// Append-only record of primitive ops for one forward pass. Single use:
/// backward() consumes the tape and a second call throws.
class Tape {
 public:
  /// `params` is the flat parameter vector parameter leaves read from. It must
  /// outlive the tape and must not change while the tape is in use.
  explicit Tape(std::span<const double> params);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(const ParameterLayout::Slot& slot);
  Var parameter(std::size_t offset, std::vector<std::size_t> shape);
  Var constant(Tensor value);

  /// [m x k] * [k x n] -> [m x n]
  Var matmul(Var a, Var b);
  /// Adds a length-n bias row to every row of an [m x n] input.
  Var add_bias(Var x, Var bias);
  Var relu(Var x);
  /// Row-wise log-softmax of [m x n] logits.
  Var log_softmax(Var x);
  /// Mean negative log-likelihood of `targets` under row-wise log-probabilities.
  /// With weights: sum(w_i * nll_i) / sum(w_i).
  Var nll_loss(Var logp, std::span<const int> targets, std::span<const double> weights = {});

  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double k);
  Var sum(Var x);
  /// sum_i k_i * x_i over scalar nodes.
  Var weighted_sum(std::span<const Var> xs, std::span<const double> k);

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Reverse sweep from a scalar root. Returns d(root)/d(params) as a flat
  /// vector the size of the parameter vector, zero where unused.
  std::vector<double> backward(Var root);

 private:
  enum class Op {
    kParameter,
    kConstant,
    kMatmul,
    kAddBias,
    kRelu,
    kLogSoftmax,
    kNll,
    kAdd,
    kMul,
    kScale,
    kSum,
    kWeightedSum,
  };

  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    Tensor value;
    std::size_t param_offset = 0;
    std::vector<int> targets;
    std::vector<double> coeffs;  // nll sample weights, scale factor, or weighted_sum coefficients
  };

  Var push(Node node);
  void check_owned(Var v, const char* op) const;
  static const char* op_name(Op op);

  std::span<const double> params_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace mbias::ad
