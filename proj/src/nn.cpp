#include "qpm/nn.hpp"

#include <cmath>

#include "qpm/error.hpp"
#include "qpm/ops.hpp"

namespace qpm {

Var ParameterStore::add_parameter(const std::string& name, Tensor init) {
  if (parameters_.count(name) || buffers_.count(name)) {
    throw ConfigError("duplicate parameter name: " + name);
  }
  Var v(std::move(init), true);
  parameters_.emplace(name, v);
  return v;
}

std::shared_ptr<Tensor> ParameterStore::add_buffer(const std::string& name, Tensor init) {
  if (parameters_.count(name) || buffers_.count(name)) {
    throw ConfigError("duplicate buffer name: " + name);
  }
  auto b = std::make_shared<Tensor>(std::move(init));
  buffers_.emplace(name, b);
  return b;
}

std::vector<std::pair<std::string, Tensor>> ParameterStore::snapshot() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(parameters_.size() + buffers_.size());
  for (const auto& [name, v] : parameters_) out.emplace_back(name, v.value());
  for (const auto& [name, b] : buffers_) out.emplace_back(name, *b);
  return out;
}

std::size_t ParameterStore::load(const std::vector<std::pair<std::string, Tensor>>& tensors,
                                 const std::string& prefix) {
  std::size_t loaded = 0;
  for (const auto& [name, t] : tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    Tensor* dst = nullptr;
    if (auto it = parameters_.find(name); it != parameters_.end()) {
      dst = &it->second.mutable_value();
    } else if (auto jt = buffers_.find(name); jt != buffers_.end()) {
      dst = jt->second.get();
    } else {
      continue;
    }
    if (dst->shape() != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(dst->shape()));
    }
    *dst = t;
    ++loaded;
  }
  return loaded;
}

void ParameterStore::zero_grad() {
  for (auto& [name, v] : parameters_) {
    Var p = v;
    p.zero_grad();
  }
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Conv2d::Conv2d(ParameterStore& store, const std::string& name, int in, int out, int kernel,
               int stride_, int pad_, bool with_bias, std::mt19937_64& rng)
    : stride(stride_), pad(pad_) {
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in) * kernel * kernel));
  weight = store.add_parameter(name + ".weight",
                               normal_tensor({out, in, kernel, kernel}, stddev, rng));
  if (with_bias) bias = store.add_parameter(name + ".bias", Tensor({out}, 0.0));
}

Var Conv2d::operator()(const Var& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

BatchNorm::BatchNorm(ParameterStore& store, const std::string& name, int channels) {
  gamma = store.add_parameter(name + ".gamma", Tensor({channels}, 1.0));
  beta = store.add_parameter(name + ".beta", Tensor({channels}, 0.0));
  running_mean = store.add_buffer(name + ".running_mean", Tensor({channels}, 0.0));
  running_var = store.add_buffer(name + ".running_var", Tensor({channels}, 1.0));
  tracked = store.add_buffer(name + ".tracked", Tensor({1}, 0.0));
}

Var BatchNorm::operator()(const Var& x, Mode mode) const {
  const bool training = mode == Mode::train;
  if (training) (*tracked)[0] += 1.0;
  return ops::batch_norm(x, gamma, beta, *running_mean, *running_var, training, momentum, eps);
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, double stddev,
               bool with_bias, std::mt19937_64& rng) {
  weight = store.add_parameter(name + ".weight", normal_tensor({out, in}, stddev, rng));
  if (with_bias) bias = store.add_parameter(name + ".bias", Tensor({out}, 0.0));
}

Var Linear::operator()(const Var& x) const { return ops::linear(x, weight, bias); }

PartLinear::PartLinear(ParameterStore& store, const std::string& name, int parts, int in, int out,
                       double stddev, std::mt19937_64& rng) {
  weight = store.add_parameter(name + ".weight", normal_tensor({parts, out, in}, stddev, rng));
  bias = store.add_parameter(name + ".bias", Tensor({parts, out}, 0.0));
}

Var PartLinear::operator()(const Var& x) const { return ops::part_linear(x, weight, bias); }

}  // namespace qpm
