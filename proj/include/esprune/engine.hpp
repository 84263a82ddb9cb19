#ifndef ESPRUNE_ENGINE_HPP_
#define ESPRUNE_ENGINE_HPP_

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "esprune/arch.hpp"
#include "esprune/data.hpp"
#include "esprune/tensor.hpp"

namespace esprune {

/// Trainable parameters of one layer. Conv: weight (filters, in, kh, kw);
/// fully_connected: weight (outputs, in_features); batch_norm: weight is the
/// per-channel scale and bias the shift. Parameterless layers hold empty
/// tensors, as does the bias of a layer with `bias == false`.
template <typename Scalar>
struct LayerParams {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <typename Scalar>
struct Model {
  ArchSpec arch;
  std::vector<LayerParams<Scalar>> params;
};

/// Expected weight and bias shapes of a layer given its input shape.
/// Empty shapes denote absent tensors.
std::pair<Shape, Shape> param_shapes(const LayerSpec& layer, const FeatureShape& in);

/// Throws ShapeError when a parameter tensor disagrees with the arch.
template <typename Scalar>
void check_params(const Model<Scalar>& model);

/// Fresh model: uniform(-b, b) weights with b = sqrt(6 / fan_in), zero
/// biases, unit batch-norm scale.
template <typename Scalar>
Model<Scalar> init_model(const ArchSpec& arch, std::uint64_t seed);

template <typename To, typename From>
Model<To> cast_model(const Model<From>& model) {
  Model<To> out{model.arch, {}};
  out.params.reserve(model.params.size());
  for (const auto& p : model.params) {
    out.params.push_back({p.weight.template cast<To>(), p.bias.template cast<To>()});
  }
  return out;
}

/// Batch of dataset images as an (n, c, h, w) tensor.
template <typename Scalar>
Tensor<Scalar> gather_batch(const Dataset& data, std::span<const int> indices);

/// Output of every layer, indexed by layer id.
template <typename Scalar>
std::vector<Tensor<Scalar>> forward_all(const Model<Scalar>& model,
                                        const Tensor<Scalar>& batch);

/// Final layer output flattened to (batch, features).
template <typename Scalar>
Tensor<Scalar> forward(const Model<Scalar>& model, const Tensor<Scalar>& batch);

template <typename Scalar>
struct Gradients {
  std::vector<LayerParams<Scalar>> params;
  Tensor<Scalar> input;
};

/// Mean softmax cross-entropy of (batch, classes) scores. Fills `dscores`
/// with the derivative when given.
template <typename Scalar>
Scalar softmax_cross_entropy(const Tensor<Scalar>& scores, std::span<const int> labels,
                             Tensor<Scalar>* dscores = nullptr);

/// Loss of one batch and, when `grads` is given, its derivatives with respect
/// to every parameter and to the batch itself.
template <typename Scalar>
Scalar loss_and_gradients(const Model<Scalar>& model, const Tensor<Scalar>& batch,
                          std::span<const int> labels, Gradients<Scalar>* grads);

/// w <- w - learning_rate * dw for every parameter.
template <typename Scalar>
void sgd_step(Model<Scalar>& model, const Gradients<Scalar>& grads,
              Scalar learning_rate);

struct TrainConfig {
  int epochs = 0;
  double learning_rate = 0.1;
  int batch_size = 64;
  std::uint64_t seed = 0;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(int layer, long step, const std::string& what)
      : std::runtime_error(what), layer_(layer), step_(step) {}
  int layer() const { return layer_; }
  long step() const { return step_; }

 private:
  int layer_;
  long step_;
};

/// Plain minibatch SGD on softmax cross-entropy. The shuffle order is a pure
/// function of `config.seed`.
template <typename Scalar>
Model<Scalar> train(Model<Scalar> model, const Dataset& data, const TrainConfig& config);

/// Argmax class per sample; ties go to the lowest class index.
template <typename Scalar>
std::vector<int> predict(const Model<Scalar>& model, const Dataset& data,
                         int batch_size = 64);

/// Fraction of misclassified samples.
template <typename Scalar>
double error_rate(const Model<Scalar>& model, const Dataset& data, int batch_size = 64);

}  // namespace esprune

#endif  // ESPRUNE_ENGINE_HPP_
