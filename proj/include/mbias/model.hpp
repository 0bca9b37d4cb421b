#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mbias/autodiff.hpp"

namespace mbias {

struct MlpSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;  // empty = multinomial logistic regression
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const MlpSpec&) const = default;
};

/// Row-major matrix view into the flat parameter vector.
template <typename T>
struct MatrixView {
  std::span<T> data;
  std::size_t rows = 0;
  std::size_t cols = 0;

  T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Model parameters: one flat vector, with per-layer weight/bias views into it.
class Parameters {
 public:
  Parameters() = default;
  explicit Parameters(const MlpSpec& spec);

  const MlpSpec& spec() const { return spec_; }
  const ad::ParameterLayout& layout() const { return layout_; }
  std::size_t num_layers() const { return layout_.num_slots() / 2; }

  std::span<double> flat() { return flat_; }
  std::span<const double> flat() const { return flat_; }
  std::vector<double>& flat_vector() { return flat_; }

  /// Layer `i` weights, shape [fan_in x fan_out].
  MatrixView<double> weights(std::size_t layer);
  MatrixView<const double> weights(std::size_t layer) const;
  std::span<double> bias(std::size_t layer);
  std::span<const double> bias(std::size_t layer) const;

  bool operator==(const Parameters& o) const { return spec_ == o.spec_ && flat_ == o.flat_; }

 private:
  MlpSpec spec_;
  ad::ParameterLayout layout_;
  std::vector<double> flat_;
};

/// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
Parameters init_mlp(const MlpSpec& spec);

/// Records the MLP forward pass (affine -> ReLU -> ... -> affine) on `tape`.
/// The tape must have been built over `params.flat()`.
ad::Var forward(const Parameters& params, const ad::Tensor& batch, ad::Tape& tape);

/// Tape-free forward for evaluation. Returns [B x C] logits.
ad::Tensor predict_logits(const Parameters& params, const ad::Tensor& batch);

/// Argmax per row, ties to the lowest class index.
std::vector<int> argmax_rows(const ad::Tensor& logits);

/// Versioned JSON checkpoint. Doubles are written as shortest round-trip
/// decimal so a save/load cycle is bit-exact.
void save_parameters(const Parameters& params, const std::filesystem::path& path);
Parameters load_parameters(const std::filesystem::path& path);

}  // namespace mbias
