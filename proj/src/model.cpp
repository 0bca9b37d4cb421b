#include "mbias/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mbias/errors.hpp"
#include "mbias/rng.hpp"

namespace mbias {

namespace {
constexpr int kCheckpointVersion = 1;
}

void MlpSpec::validate() const {
  if (input_dim == 0) throw ContractViolation("MlpSpec: input_dim must be positive");
  if (num_classes < 2) throw ContractViolation("MlpSpec: num_classes must be at least 2");
  for (auto h : hidden_dims)
    if (h == 0) throw ContractViolation("MlpSpec: hidden layer widths must be positive");
}

Parameters::Parameters(const MlpSpec& spec) : spec_(spec) {
  spec_.validate();
  std::size_t fan_in = spec_.input_dim;
  std::vector<std::size_t> widths = spec_.hidden_dims;
  widths.push_back(spec_.num_classes);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    layout_.add("W" + std::to_string(i), {fan_in, widths[i]});
    layout_.add("b" + std::to_string(i), {widths[i]});
    fan_in = widths[i];
  }
  flat_.assign(layout_.total_size(), 0.0);
}

MatrixView<double> Parameters::weights(std::size_t layer) {
  const auto& s = layout_.slot(2 * layer);
  return {std::span<double>(flat_).subspan(s.offset, s.size), s.shape[0], s.shape[1]};
}

MatrixView<const double> Parameters::weights(std::size_t layer) const {
  const auto& s = layout_.slot(2 * layer);
  return {std::span<const double>(flat_).subspan(s.offset, s.size), s.shape[0], s.shape[1]};
}

std::span<double> Parameters::bias(std::size_t layer) {
  const auto& s = layout_.slot(2 * layer + 1);
  return std::span<double>(flat_).subspan(s.offset, s.size);
}

std::span<const double> Parameters::bias(std::size_t layer) const {
  const auto& s = layout_.slot(2 * layer + 1);
  return std::span<const double>(flat_).subspan(s.offset, s.size);
}

Parameters init_mlp(const MlpSpec& spec) {
  Parameters p(spec);
  Rng rng(derive_seed(spec.seed, "mlp-init"));
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    auto w = p.weights(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
  }
  return p;
}

ad::Var forward(const Parameters& params, const ad::Tensor& batch, ad::Tape& tape) {
  const auto& spec = params.spec();
  if (batch.rank() != 2 || batch.shape[1] != spec.input_dim) {
    throw ContractViolation("forward: batch shape " + ad::shape_string(batch.shape) +
                            " does not match input_dim " + std::to_string(spec.input_dim));
  }
  ad::Var h = tape.constant(batch);
  const auto& layout = params.layout();
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    ad::Var w = tape.parameter(layout.slot(2 * l));
    ad::Var b = tape.parameter(layout.slot(2 * l + 1));
    h = tape.add_bias(tape.matmul(h, w), b);
    if (l + 1 < params.num_layers()) h = tape.relu(h);
  }
  return h;
}

ad::Tensor predict_logits(const Parameters& params, const ad::Tensor& batch) {
  const auto& spec = params.spec();
  if (batch.rank() != 2 || batch.shape[1] != spec.input_dim) {
    throw ContractViolation("predict_logits: batch shape " + ad::shape_string(batch.shape) +
                            " does not match input_dim " + std::to_string(spec.input_dim));
  }
  const std::size_t rows = batch.shape[0];
  std::vector<double> h = batch.data;
  std::size_t width = spec.input_dim;
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    const auto w = params.weights(l);
    const auto b = params.bias(l);
    std::vector<double> out(rows * w.cols);
    for (std::size_t i = 0; i < rows; ++i) {
      double* orow = &out[i * w.cols];
      for (std::size_t j = 0; j < w.cols; ++j) orow[j] = b[j];
      for (std::size_t p = 0; p < width; ++p) {
        const double x = h[i * width + p];
        if (x == 0.0) continue;
        for (std::size_t j = 0; j < w.cols; ++j) orow[j] += x * w(p, j);
      }
      if (l + 1 < params.num_layers())
        for (std::size_t j = 0; j < w.cols; ++j) orow[j] = orow[j] > 0.0 ? orow[j] : 0.0;
    }
    h = std::move(out);
    width = w.cols;
  }
  return ad::Tensor::matrix(rows, width, std::move(h));
}

std::vector<int> argmax_rows(const ad::Tensor& logits) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  std::vector<int> out(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

void save_parameters(const Parameters& params, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "mbias-parameters";
  j["version"] = kCheckpointVersion;
  j["spec"] = {{"input_dim", params.spec().input_dim},
               {"hidden_dims", params.spec().hidden_dims},
               {"num_classes", params.spec().num_classes},
               {"seed", params.spec().seed}};
  j["flat"] = std::vector<double>(params.flat().begin(), params.flat().end());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os << j.dump() << '\n';
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Parameters load_parameters(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "mbias-parameters" || j.value("version", 0) != kCheckpointVersion) {
    throw IoError("unsupported checkpoint format in " + path.string());
  }
  MlpSpec spec;
  spec.input_dim = j["spec"]["input_dim"].get<std::size_t>();
  spec.hidden_dims = j["spec"]["hidden_dims"].get<std::vector<std::size_t>>();
  spec.num_classes = j["spec"]["num_classes"].get<std::size_t>();
  spec.seed = j["spec"]["seed"].get<std::uint64_t>();
  Parameters p(spec);
  auto flat = j["flat"].get<std::vector<double>>();
  if (flat.size() != p.flat().size()) {
    throw IoError("checkpoint " + path.string() + " has " + std::to_string(flat.size()) +
                  " values, spec requires " + std::to_string(p.flat().size()));
  }
  p.flat_vector() = std::move(flat);
  return p;
}

}  // namespace mbias
