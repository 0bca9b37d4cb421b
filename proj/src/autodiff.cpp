#include "mbias/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "mbias/errors.hpp"

namespace mbias::ad {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  if (product(shape) != data.size()) {
    throw ContractViolation("tensor shape " + shape_string(shape) + " does not match " +
                            std::to_string(data.size()) + " elements");
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  const auto n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape[0];
  if (rank() <= 1) return 1;
  throw ContractViolation("rows() on rank-" + std::to_string(rank()) + " tensor");
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape[1];
  if (rank() == 1) return shape[0];
  if (rank() == 0) return 1;
  throw ContractViolation("cols() on rank-" + std::to_string(rank()) + " tensor");
}

double Tensor::item() const {
  if (data.size() != 1) throw ContractViolation("item() on tensor of shape " + shape_string(shape));
  return data[0];
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t ParameterLayout::add(std::string name, std::vector<std::size_t> shape) {
  Slot s;
  s.name = std::move(name);
  s.size = product(shape);
  s.shape = std::move(shape);
  s.offset = total_;
  total_ += s.size;
  slots_.push_back(std::move(s));
  return slots_.size() - 1;
}

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractViolation("value() on an unbound Var");
  return tape->value(*this);
}

Tape::Tape(std::span<const double> params) : params_(params) {}

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::kParameter: return "parameter";
    case Op::kConstant: return "constant";
    case Op::kMatmul: return "matmul";
    case Op::kAddBias: return "add_bias";
    case Op::kRelu: return "relu";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kNll: return "nll_loss";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kSum: return "sum";
    case Op::kWeightedSum: return "weighted_sum";
  }
  return "?";
}

void Tape::check_owned(Var v, const char* op) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw ContractViolation(std::string(op) + ": input does not belong to this tape");
  }
  if (consumed_) throw ContractViolation(std::string(op) + ": tape already consumed by backward()");
}

Var Tape::push(Node node) {
  const std::size_t id = nodes_.size();
  if (!all_finite(node.value.data)) {
    throw NumericError(std::string("non-finite value produced by ") + op_name(node.op) + " (op " +
                           std::to_string(id) + ")",
                       id);
  }
  nodes_.push_back(std::move(node));
  return Var{this, id};
}

const Tensor& Tape::value(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw ContractViolation("value(): foreign Var");
  return nodes_[v.id].value;
}

Var Tape::parameter(const ParameterLayout::Slot& slot) { return parameter(slot.offset, slot.shape); }

Var Tape::parameter(std::size_t offset, std::vector<std::size_t> shape) {
  if (consumed_) throw ContractViolation("parameter: tape already consumed by backward()");
  const auto n = product(shape);
  if (offset + n > params_.size()) {
    throw ContractViolation("parameter slice [" + std::to_string(offset) + ", " +
                            std::to_string(offset + n) + ") exceeds parameter vector of length " +
                            std::to_string(params_.size()));
  }
  Node node{Op::kParameter, {}, Tensor(std::move(shape), {params_.begin() + offset, params_.begin() + offset + n}),
            offset, {}, {}};
  return push(std::move(node));
}

Var Tape::constant(Tensor value) {
  if (consumed_) throw ContractViolation("constant: tape already consumed by backward()");
  return push(Node{Op::kConstant, {}, std::move(value), 0, {}, {}});
}

Var Tape::matmul(Var a, Var b) {
  check_owned(a, "matmul");
  check_owned(b, "matmul");
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0]) {
    throw ContractViolation("matmul: incompatible shapes " + shape_string(A.shape) + " and " +
                            shape_string(B.shape));
  }
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &B.data[p * n];
      double* orow = &out.data[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return push(Node{Op::kMatmul, {a.id, b.id}, std::move(out), 0, {}, {}});
}

Var Tape::add_bias(Var x, Var bias) {
  check_owned(x, "add_bias");
  check_owned(bias, "add_bias");
  const Tensor& X = value(x);
  const Tensor& b = value(bias);
  if (X.rank() != 2 || b.numel() != X.shape[1]) {
    throw ContractViolation("add_bias: bias " + shape_string(b.shape) + " does not match input " +
                            shape_string(X.shape));
  }
  Tensor out = X;
  const std::size_t n = X.shape[1];
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i % n];
  return push(Node{Op::kAddBias, {x.id, bias.id}, std::move(out), 0, {}, {}});
}

Var Tape::relu(Var x) {
  check_owned(x, "relu");
  Tensor out = value(x);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return push(Node{Op::kRelu, {x.id}, std::move(out), 0, {}, {}});
}

Var Tape::log_softmax(Var x) {
  check_owned(x, "log_softmax");
  const Tensor& X = value(x);
  if (X.rank() != 2 && X.rank() != 1) {
    throw ContractViolation("log_softmax: expected rank 1 or 2, got " + shape_string(X.shape));
  }
  Tensor out = X;
  const std::size_t rows = X.rows(), cols = X.cols();
  for (std::size_t i = 0; i < rows; ++i) {
    double* row = &out.data[i * cols];
    const double mx = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) row[j] -= lse;
  }
  return push(Node{Op::kLogSoftmax, {x.id}, std::move(out), 0, {}, {}});
}

Var Tape::nll_loss(Var logp, std::span<const int> targets, std::span<const double> weights) {
  check_owned(logp, "nll_loss");
  const Tensor& L = value(logp);
  const std::size_t rows = L.rows(), cols = L.cols();
  if (targets.size() != rows) {
    throw ContractViolation("nll_loss: " + std::to_string(targets.size()) + " targets for " +
                            std::to_string(rows) + " rows");
  }
  if (!weights.empty() && weights.size() != rows) {
    throw ContractViolation("nll_loss: weight count does not match batch size");
  }
  if (rows == 0) throw ContractViolation("nll_loss: empty batch");
  double total = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= cols) {
      throw ContractViolation("nll_loss: target " + std::to_string(targets[i]) + " outside [0, " +
                              std::to_string(cols) + ")");
    }
    const double w = weights.empty() ? 1.0 : weights[i];
    total -= w * L.data[i * cols + static_cast<std::size_t>(targets[i])];
    wsum += w;
  }
  if (!(wsum > 0.0)) throw ContractViolation("nll_loss: sample weights must have a positive sum");
  std::vector<double> w(rows, 1.0);
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  for (double& v : w) v /= wsum;
  Node node{Op::kNll, {logp.id}, Tensor::scalar(total / wsum), 0,
            std::vector<int>(targets.begin(), targets.end()), std::move(w)};
  return push(std::move(node));
}

Var Tape::add(Var a, Var b) {
  check_owned(a, "add");
  check_owned(b, "add");
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.shape != B.shape) {
    throw ContractViolation("add: shape mismatch " + shape_string(A.shape) + " vs " + shape_string(B.shape));
  }
  Tensor out = A;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
  return push(Node{Op::kAdd, {a.id, b.id}, std::move(out), 0, {}, {}});
}

Var Tape::mul(Var a, Var b) {
  check_owned(a, "mul");
  check_owned(b, "mul");
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.shape != B.shape) {
    throw ContractViolation("mul: shape mismatch " + shape_string(A.shape) + " vs " + shape_string(B.shape));
  }
  Tensor out = A;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
  return push(Node{Op::kMul, {a.id, b.id}, std::move(out), 0, {}, {}});
}

Var Tape::scale(Var x, double k) {
  check_owned(x, "scale");
  Tensor out = value(x);
  for (double& v : out.data) v *= k;
  return push(Node{Op::kScale, {x.id}, std::move(out), 0, {}, {k}});
}

Var Tape::sum(Var x) {
  check_owned(x, "sum");
  const Tensor& X = value(x);
  const double s = std::accumulate(X.data.begin(), X.data.end(), 0.0);
  return push(Node{Op::kSum, {x.id}, Tensor::scalar(s), 0, {}, {}});
}

Var Tape::weighted_sum(std::span<const Var> xs, std::span<const double> k) {
  if (xs.size() != k.size() || xs.empty()) {
    throw ContractViolation("weighted_sum: need one coefficient per input and at least one input");
  }
  double s = 0.0;
  std::vector<std::size_t> ids;
  ids.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    check_owned(xs[i], "weighted_sum");
    const Tensor& X = value(xs[i]);
    if (X.numel() != 1) throw ContractViolation("weighted_sum: inputs must be scalars");
    s += k[i] * X.data[0];
    ids.push_back(xs[i].id);
  }
  return push(Node{Op::kWeightedSum, std::move(ids), Tensor::scalar(s), 0, {},
                   std::vector<double>(k.begin(), k.end())});
}

std::vector<double> Tape::backward(Var root) {
  if (consumed_) throw ContractViolation("backward: tape already consumed");
  if (root.tape != this || root.id >= nodes_.size()) throw ContractViolation("backward: foreign root");
  if (nodes_[root.id].value.numel() != 1) {
    throw ContractViolation("backward: root must be scalar, got shape " +
                            shape_string(nodes_[root.id].value.shape));
  }
  consumed_ = true;

  std::vector<std::vector<double>> adj(root.id + 1);
  adj[root.id] = {1.0};
  std::vector<double> grad(params_.size(), 0.0);

  auto acc = [&](std::size_t id) -> std::vector<double>& {
    auto& a = adj[id];
    if (a.empty()) a.assign(nodes_[id].value.numel(), 0.0);
    return a;
  };

  for (std::size_t id = root.id + 1; id-- > 0;) {
    if (adj[id].empty()) continue;
    const Node& node = nodes_[id];
    const std::vector<double> dy = std::move(adj[id]);
    adj[id].clear();

    switch (node.op) {
      case Op::kParameter:
        for (std::size_t i = 0; i < dy.size(); ++i) grad[node.param_offset + i] += dy[i];
        break;
      case Op::kConstant:
        break;
      case Op::kMatmul: {
        const Tensor& A = nodes_[node.inputs[0]].value;
        const Tensor& B = nodes_[node.inputs[1]].value;
        const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
        auto& da = acc(node.inputs[0]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += dy[i * n + j] * B.data[p * n + j];
            da[i * k + p] += s;
          }
        auto& db = acc(node.inputs[1]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A.data[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * dy[i * n + j];
          }
        break;
      }
      case Op::kAddBias: {
        auto& dx = acc(node.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        auto& db = acc(node.inputs[1]);
        const std::size_t n = db.size();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i % n] += dy[i];
        break;
      }
      case Op::kRelu: {
        const Tensor& X = nodes_[node.inputs[0]].value;
        auto& dx = acc(node.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i)
          if (X.data[i] > 0.0) dx[i] += dy[i];
        break;
      }
      case Op::kLogSoftmax: {
        const Tensor& Y = node.value;
        const std::size_t rows = Y.rows(), cols = Y.cols();
        auto& dx = acc(node.inputs[0]);
        for (std::size_t i = 0; i < rows; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < cols; ++j) s += dy[i * cols + j];
          for (std::size_t j = 0; j < cols; ++j)
            dx[i * cols + j] += dy[i * cols + j] - std::exp(Y.data[i * cols + j]) * s;
        }
        break;
      }
      case Op::kNll: {
        const Tensor& L = nodes_[node.inputs[0]].value;
        const std::size_t cols = L.cols();
        auto& dx = acc(node.inputs[0]);
        for (std::size_t i = 0; i < node.targets.size(); ++i)
          dx[i * cols + static_cast<std::size_t>(node.targets[i])] -= dy[0] * node.coeffs[i];
        break;
      }
      case Op::kAdd: {
        for (std::size_t in : node.inputs) {
          auto& dx = acc(in);
          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& A = nodes_[node.inputs[0]].value;
        const Tensor& B = nodes_[node.inputs[1]].value;
        {
          auto& da = acc(node.inputs[0]);
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * B.data[i];
        }
        {
          auto& db = acc(node.inputs[1]);
          for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * A.data[i];
        }
        break;
      }
      case Op::kScale: {
        auto& dx = acc(node.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * node.coeffs[0];
        break;
      }
      case Op::kSum: {
        auto& dx = acc(node.inputs[0]);
        for (double& v : dx) v += dy[0];
        break;
      }
      case Op::kWeightedSum: {
        for (std::size_t i = 0; i < node.inputs.size(); ++i) acc(node.inputs[i])[0] += dy[0] * node.coeffs[i];
        break;
      }
    }
  }

  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("non-finite gradient at parameter index " + std::to_string(i), root.id);
    }
  }
  return grad;
}

}  // namespace mbias::ad
