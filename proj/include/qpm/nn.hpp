#pragma once

#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "qpm/autograd.hpp"

namespace qpm {

/// Named trainable parameters and non-trainable buffers of a model.
/// Names are dotted paths such as "part.embed.weight".
class ParameterStore {
 public:
  Var add_parameter(const std::string& name, Tensor init);
  std::shared_ptr<Tensor> add_buffer(const std::string& name, Tensor init);

  const std::map<std::string, Var>& parameters() const { return parameters_; }
  const std::map<std::string, std::shared_ptr<Tensor>>& buffers() const { return buffers_; }

  /// Parameters followed by buffers, each in name order.
  std::vector<std::pair<std::string, Tensor>> snapshot() const;
  /// Overwrites every entry whose name is in `tensors` and starts with `prefix`.
  /// Shapes must match. Returns the number of tensors loaded.
  std::size_t load(const std::vector<std::pair<std::string, Tensor>>& tensors,
                   const std::string& prefix = "");
  void zero_grad();

 private:
  std::map<std::string, Var> parameters_;
  std::map<std::string, std::shared_ptr<Tensor>> buffers_;
};

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);

enum class Mode { train, eval };

struct Conv2d {
  Var weight;
  Var bias;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  /// He-normal weights (fan-in).
  Conv2d(ParameterStore& store, const std::string& name, int in, int out, int kernel, int stride,
         int pad, bool with_bias, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
};

struct BatchNorm {
  Var gamma;
  Var beta;
  std::shared_ptr<Tensor> running_mean;
  std::shared_ptr<Tensor> running_var;
  /// Number of training-mode forward passes seen; 0 means uncalibrated.
  std::shared_ptr<Tensor> tracked;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  BatchNorm(ParameterStore& store, const std::string& name, int channels);
  bool calibrated() const { return tracked && (*tracked)[0] > 0.0; }
  /// Training mode mutates the running statistics.
  Var operator()(const Var& x, Mode mode) const;
};

struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in, int out, double stddev,
         bool with_bias, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
};

/// K independent affine maps, one per part.
struct PartLinear {
  Var weight;
  Var bias;

  PartLinear() = default;
  PartLinear(ParameterStore& store, const std::string& name, int parts, int in, int out,
             double stddev, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
};

}  // namespace qpm
