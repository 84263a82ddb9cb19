#include "esprune/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "esprune/random.hpp"

namespace esprune {

namespace {

constexpr double kBatchNormEpsilon = 1e-5;

template <typename Scalar>
using Matrix = typename Tensor<Scalar>::Matrix;

template <typename Scalar>
using Vector = typename Tensor<Scalar>::Vector;

template <typename Scalar>
struct ForwardCache {
  std::vector<Matrix<Scalar>> columns;               // conv im2col
  std::vector<std::vector<Eigen::Index>> argmax;     // max pool
  std::vector<Tensor<Scalar>> normalized;            // batch norm x-hat
  std::vector<Vector<Scalar>> inv_std;               // batch norm
};

template <typename Scalar>
void im2col(const Scalar* x, const FeatureShape& in, const LayerSpec& l, int out_h,
            int out_w, Matrix<Scalar>& cols, Eigen::Index col_offset) {
  const int kh = l.kernel_h, kw = l.kernel_w;
  for (int c = 0; c < in.channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        Scalar* row = cols.row((c * kh + i) * kw + j).data() + col_offset;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * l.stride - l.padding + i;
          Scalar* dst = row + oy * out_w;
          if (iy < 0 || iy >= in.height) {
            std::fill(dst, dst + out_w, Scalar(0));
            continue;
          }
          const Scalar* src = x + (c * in.height + iy) * in.width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * l.stride - l.padding + j;
            dst[ox] = (ix >= 0 && ix < in.width) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, Eigen::Index col_offset, const FeatureShape& in,
            const LayerSpec& l, int out_h, int out_w, Scalar* dx) {
  const int kh = l.kernel_h, kw = l.kernel_w;
  for (int c = 0; c < in.channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const Scalar* row = cols.row((c * kh + i) * kw + j).data() + col_offset;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * l.stride - l.padding + i;
          if (iy < 0 || iy >= in.height) continue;
          Scalar* dst = dx + (c * in.height + iy) * in.width;
          const Scalar* src = row + oy * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * l.stride - l.padding + j;
            if (ix >= 0 && ix < in.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

Shape nchw(int n, const FeatureShape& s) { return {n, s.channels, s.height, s.width}; }

template <typename Scalar>
class Graph {
 public:
  Graph(const Model<Scalar>& model, const Tensor<Scalar>& batch)
      : model_(model), arch_(model.arch), batch_(batch) {
    shapes_ = propagate_shapes(arch_);
    if (batch.rank() != 4 || batch.dim(1) != arch_.input.channels ||
        batch.dim(2) != arch_.input.height || batch.dim(3) != arch_.input.width) {
      throw ShapeError(-1, "batch " + shape_to_string(batch.shape()) +
                               " does not match input shape");
    }
    n_ = batch.dim(0);
  }

  std::vector<Tensor<Scalar>> run(ForwardCache<Scalar>* cache) {
    const int count = static_cast<int>(arch_.layers.size());
    outputs_.assign(count, Tensor<Scalar>());
    if (cache) {
      cache->columns.assign(count, Matrix<Scalar>());
      cache->argmax.assign(count, {});
      cache->normalized.assign(count, Tensor<Scalar>());
      cache->inv_std.assign(count, Vector<Scalar>());
    }
    for (int id = 0; id < count; ++id) outputs_[id] = forward_layer(id, cache);
    return std::move(outputs_);
  }

  const std::vector<FeatureShape>& shapes() const { return shapes_; }

 private:
  const Tensor<Scalar>& input(int id, std::size_t k = 0) const {
    const auto& inputs = arch_.layers[id].inputs;
    return inputs.empty() ? batch_ : outputs_[inputs[k]];
  }

  FeatureShape in_shape(int id) const {
    const auto& inputs = arch_.layers[id].inputs;
    return inputs.empty() ? arch_.input : shapes_[inputs.front()];
  }

  Tensor<Scalar> forward_layer(int id, ForwardCache<Scalar>* cache) {
    const LayerSpec& l = arch_.layers[id];
    const LayerParams<Scalar>& p = model_.params[id];
    const FeatureShape in = in_shape(id);
    const FeatureShape out = shapes_[id];
    const Tensor<Scalar>& x = input(id);
    Tensor<Scalar> y(nchw(n_, out));
    const Eigen::Index in_plane = Eigen::Index{in.height} * in.width;
    const Eigen::Index out_plane = Eigen::Index{out.height} * out.width;

    switch (l.kind) {
      case LayerKind::conv: {
        const Eigen::Index k = Eigen::Index{in.channels} * l.kernel_h * l.kernel_w;
        Matrix<Scalar> cols(k, n_ * out_plane);
        for (int n = 0; n < n_; ++n) {
          im2col(x.data() + n * in.size(), in, l, out.height, out.width, cols,
                 n * out_plane);
        }
        Matrix<Scalar> z = p.weight.matrix(out.channels, k) * cols;
        if (l.bias) z.colwise() += p.bias.vec();
        auto ym = y.matrix(Eigen::Index{n_} * out.channels, out_plane);
        for (int n = 0; n < n_; ++n) {
          ym.middleRows(Eigen::Index{n} * out.channels, out.channels) =
              z.middleCols(n * out_plane, out_plane);
        }
        if (cache) cache->columns[id] = std::move(cols);
        break;
      }
      case LayerKind::batch_norm: {
        const auto xm = x.matrix(Eigen::Index{n_} * in.channels, in_plane);
        Tensor<Scalar> xhat(nchw(n_, out));
        auto hm = xhat.matrix(Eigen::Index{n_} * in.channels, in_plane);
        auto ym = y.matrix(Eigen::Index{n_} * in.channels, in_plane);
        Vector<Scalar> inv_std(in.channels);
        const Scalar m = static_cast<Scalar>(Eigen::Index{n_} * in_plane);
        for (int c = 0; c < in.channels; ++c) {
          Scalar mean = 0;
          for (int n = 0; n < n_; ++n) mean += xm.row(Eigen::Index{n} * in.channels + c).sum();
          mean /= m;
          Scalar var = 0;
          for (int n = 0; n < n_; ++n) {
            var += (xm.row(Eigen::Index{n} * in.channels + c).array() - mean).square().sum();
          }
          var /= m;
          const Scalar is = Scalar(1) / std::sqrt(var + Scalar(kBatchNormEpsilon));
          inv_std[c] = is;
          for (int n = 0; n < n_; ++n) {
            const Eigen::Index r = Eigen::Index{n} * in.channels + c;
            hm.row(r) = (xm.row(r).array() - mean) * is;
            ym.row(r) = hm.row(r).array() * p.weight[c] + p.bias[c];
          }
        }
        if (cache) {
          cache->normalized[id] = std::move(xhat);
          cache->inv_std[id] = std::move(inv_std);
        }
        break;
      }
      case LayerKind::relu:
        y.vec() = x.vec().cwiseMax(Scalar(0));
        break;
      case LayerKind::max_pool:
      case LayerKind::avg_pool: {
        const bool is_max = l.kind == LayerKind::max_pool;
        std::vector<Eigen::Index> argmax;
        if (is_max && cache) argmax.resize(y.size());
        const Scalar scale = Scalar(1) / static_cast<Scalar>(l.kernel_h * l.kernel_w);
        Eigen::Index o = 0;
        for (int plane = 0; plane < n_ * in.channels; ++plane) {
          const Eigen::Index base = plane * in_plane;
          for (int oy = 0; oy < out.height; ++oy) {
            for (int ox = 0; ox < out.width; ++ox, ++o) {
              Eigen::Index best_at = base + Eigen::Index{oy * l.stride} * in.width + ox * l.stride;
              Scalar acc = is_max ? x[best_at] : Scalar(0);
              for (int i = 0; i < l.kernel_h; ++i) {
                for (int j = 0; j < l.kernel_w; ++j) {
                  const Eigen::Index at =
                      base + Eigen::Index{oy * l.stride + i} * in.width + ox * l.stride + j;
                  if (is_max) {
                    if (x[at] > acc) {
                      acc = x[at];
                      best_at = at;
                    }
                  } else {
                    acc += x[at];
                  }
                }
              }
              y[o] = is_max ? acc : acc * scale;
              if (is_max && cache) argmax[o] = best_at;
            }
          }
        }
        if (cache) cache->argmax[id] = std::move(argmax);
        break;
      }
      case LayerKind::global_pool:
        y.vec() = x.matrix(Eigen::Index{n_} * in.channels, in_plane).rowwise().mean();
        break;
      case LayerKind::fully_connected: {
        const auto xm = x.matrix(n_, in.size());
        auto ym = y.matrix(n_, out.channels);
        ym.noalias() = xm * p.weight.matrix(out.channels, in.size()).transpose();
        if (l.bias) ym.rowwise() += p.bias.vec().transpose();
        break;
      }
      case LayerKind::residual_add:
        y.vec() = x.vec();
        for (std::size_t k = 1; k < l.inputs.size(); ++k) y.vec() += input(id, k).vec();
        break;
      case LayerKind::concat: {
        auto ym = y.matrix(Eigen::Index{n_} * out.channels, out_plane);
        int offset = 0;
        for (std::size_t k = 0; k < l.inputs.size(); ++k) {
          const int channels = shapes_[l.inputs[k]].channels;
          const auto xm = input(id, k).matrix(Eigen::Index{n_} * channels, out_plane);
          for (int n = 0; n < n_; ++n) {
            ym.middleRows(Eigen::Index{n} * out.channels + offset, channels) =
                xm.middleRows(Eigen::Index{n} * channels, channels);
          }
          offset += channels;
        }
        break;
      }
      case LayerKind::shortcut:
        for (int n = 0; n < n_; ++n) {
          for (int c = 0; c < in.channels; ++c) {
            const int target = l.channel_map[c];
            if (target < 0) continue;
            for (int oy = 0; oy < out.height; ++oy) {
              for (int ox = 0; ox < out.width; ++ox) {
                y.at(n, target, oy, ox) = x.at(n, c, oy * l.stride, ox * l.stride);
              }
            }
          }
        }
        break;
    }
    return y;
  }

  const Model<Scalar>& model_;
  const ArchSpec& arch_;
  const Tensor<Scalar>& batch_;
  std::vector<FeatureShape> shapes_;
  std::vector<Tensor<Scalar>> outputs_;
  int n_ = 0;
};

template <typename Scalar>
void backward(const Model<Scalar>& model, const Tensor<Scalar>& batch,
              const std::vector<FeatureShape>& shapes,
              const std::vector<Tensor<Scalar>>& outputs, const ForwardCache<Scalar>& cache,
              Tensor<Scalar> dscores, Gradients<Scalar>& grads) {
  const ArchSpec& arch = model.arch;
  const int count = static_cast<int>(arch.layers.size());
  const int batch_size = batch.dim(0);
  std::vector<Tensor<Scalar>> douts(count);
  douts[count - 1] = Tensor<Scalar>(outputs[count - 1].shape(), std::move(dscores.vec()));
  grads.input = Tensor<Scalar>(batch.shape());
  grads.params.assign(count, LayerParams<Scalar>());
  for (int id = 0; id < count; ++id) {
    const auto& p = model.params[id];
    if (!p.weight.empty()) grads.params[id].weight = Tensor<Scalar>(p.weight.shape());
    if (!p.bias.empty()) grads.params[id].bias = Tensor<Scalar>(p.bias.shape());
  }

  const auto grad_of = [&](int producer) -> Tensor<Scalar>& {
    if (producer < 0) return grads.input;
    if (douts[producer].empty()) douts[producer] = Tensor<Scalar>(outputs[producer].shape());
    return douts[producer];
  };

  for (int id = count - 1; id >= 0; --id) {
    if (douts[id].empty()) continue;
    const LayerSpec& l = arch.layers[id];
    const LayerParams<Scalar>& p = model.params[id];
    LayerParams<Scalar>& g = grads.params[id];
    const Tensor<Scalar>& dy = douts[id];
    const int first = l.inputs.empty() ? -1 : l.inputs.front();
    const Tensor<Scalar>& x = first < 0 ? batch : outputs[first];
    const FeatureShape in = first < 0 ? arch.input : shapes[first];
    const FeatureShape out = shapes[id];
    const Eigen::Index in_plane = Eigen::Index{in.height} * in.width;
    const Eigen::Index out_plane = Eigen::Index{out.height} * out.width;

    switch (l.kind) {
      case LayerKind::conv: {
        const Eigen::Index k = Eigen::Index{in.channels} * l.kernel_h * l.kernel_w;
        const auto dym = dy.matrix(Eigen::Index{batch_size} * out.channels, out_plane);
        Matrix<Scalar> dz(out.channels, batch_size * out_plane);
        for (int n = 0; n < batch_size; ++n) {
          dz.middleCols(n * out_plane, out_plane) =
              dym.middleRows(Eigen::Index{n} * out.channels, out.channels);
        }
        const Matrix<Scalar>& cols = cache.columns[id];
        g.weight.matrix(out.channels, k).noalias() += dz * cols.transpose();
        if (l.bias) g.bias.vec() += dz.rowwise().sum();
        const Matrix<Scalar> dcols = p.weight.matrix(out.channels, k).transpose() * dz;
        Tensor<Scalar>& dx = grad_of(first);
        for (int n = 0; n < batch_size; ++n) {
          col2im(dcols, n * out_plane, in, l, out.height, out.width,
                 dx.data() + n * in.size());
        }
        break;
      }
      case LayerKind::batch_norm: {
        const Tensor<Scalar>& xhat = cache.normalized[id];
        const auto hm = xhat.matrix(Eigen::Index{batch_size} * in.channels, in_plane);
        const auto dym = dy.matrix(Eigen::Index{batch_size} * in.channels, in_plane);
        auto dxm = grad_of(first).matrix(Eigen::Index{batch_size} * in.channels, in_plane);
        const Scalar m = static_cast<Scalar>(Eigen::Index{batch_size} * in_plane);
        for (int c = 0; c < in.channels; ++c) {
          Scalar sum_dy = 0, sum_dy_xhat = 0;
          for (int n = 0; n < batch_size; ++n) {
            const Eigen::Index r = Eigen::Index{n} * in.channels + c;
            sum_dy += dym.row(r).sum();
            sum_dy_xhat += dym.row(r).dot(hm.row(r));
          }
          g.weight[c] += sum_dy_xhat;
          g.bias[c] += sum_dy;
          const Scalar scale = p.weight[c] * cache.inv_std[id][c] / m;
          for (int n = 0; n < batch_size; ++n) {
            const Eigen::Index r = Eigen::Index{n} * in.channels + c;
            dxm.row(r).array() +=
                scale * (m * dym.row(r).array() - sum_dy - hm.row(r).array() * sum_dy_xhat);
          }
        }
        break;
      }
      case LayerKind::relu: {
        const Tensor<Scalar>& y = outputs[id];
        grad_of(first).vec().array() +=
            (y.vec().array() > Scalar(0)).select(dy.vec().array(), Scalar(0));
        break;
      }
      case LayerKind::max_pool: {
        Tensor<Scalar>& dx = grad_of(first);
        const auto& argmax = cache.argmax[id];
        for (Eigen::Index o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
        break;
      }
      case LayerKind::avg_pool: {
        Tensor<Scalar>& dx = grad_of(first);
        const Scalar scale = Scalar(1) / static_cast<Scalar>(l.kernel_h * l.kernel_w);
        Eigen::Index o = 0;
        for (int plane = 0; plane < batch_size * in.channels; ++plane) {
          const Eigen::Index base = plane * in_plane;
          for (int oy = 0; oy < out.height; ++oy) {
            for (int ox = 0; ox < out.width; ++ox, ++o) {
              const Scalar share = dy[o] * scale;
              for (int i = 0; i < l.kernel_h; ++i) {
                for (int j = 0; j < l.kernel_w; ++j) {
                  dx[base + Eigen::Index{oy * l.stride + i} * in.width + ox * l.stride + j] +=
                      share;
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::global_pool: {
        auto dxm = grad_of(first).matrix(Eigen::Index{batch_size} * in.channels, in_plane);
        dxm.colwise() += dy.vec() / static_cast<Scalar>(in_plane);
        break;
      }
      case LayerKind::fully_connected: {
        const auto xm = x.matrix(batch_size, in.size());
        const auto dym = dy.matrix(batch_size, out.channels);
        g.weight.matrix(out.channels, in.size()).noalias() += dym.transpose() * xm;
        if (l.bias) g.bias.vec() += dym.colwise().sum().transpose();
        grad_of(first).matrix(batch_size, in.size()).noalias() +=
            dym * p.weight.matrix(out.channels, in.size());
        break;
      }
      case LayerKind::residual_add:
        for (int producer : l.inputs) grad_of(producer).vec() += dy.vec();
        break;
      case LayerKind::concat: {
        const auto dym = dy.matrix(Eigen::Index{batch_size} * out.channels, out_plane);
        int offset = 0;
        for (int producer : l.inputs) {
          const int channels = shapes[producer].channels;
          auto dxm = grad_of(producer).matrix(Eigen::Index{batch_size} * channels, out_plane);
          for (int n = 0; n < batch_size; ++n) {
            dxm.middleRows(Eigen::Index{n} * channels, channels) +=
                dym.middleRows(Eigen::Index{n} * out.channels + offset, channels);
          }
          offset += channels;
        }
        break;
      }
      case LayerKind::shortcut: {
        Tensor<Scalar>& dx = grad_of(first);
        for (int n = 0; n < batch_size; ++n) {
          for (int c = 0; c < in.channels; ++c) {
            const int target = l.channel_map[c];
            if (target < 0) continue;
            for (int oy = 0; oy < out.height; ++oy) {
              for (int ox = 0; ox < out.width; ++ox) {
                dx.at(n, c, oy * l.stride, ox * l.stride) += dy.at(n, target, oy, ox);
              }
            }
          }
        }
        break;
      }
    }
  }
}

}  // namespace

std::pair<Shape, Shape> param_shapes(const LayerSpec& layer, const FeatureShape& in) {
  switch (layer.kind) {
    case LayerKind::conv:
      return {{layer.filters, in.channels, layer.kernel_h, layer.kernel_w},
              layer.bias ? Shape{layer.filters} : Shape{}};
    case LayerKind::fully_connected:
      return {{layer.filters, static_cast<int>(in.size())},
              layer.bias ? Shape{layer.filters} : Shape{}};
    case LayerKind::batch_norm:
      return {{in.channels}, {in.channels}};
    default:
      return {{}, {}};
  }
}

template <typename Scalar>
void check_params(const Model<Scalar>& model) {
  const auto shapes = propagate_shapes(model.arch);
  if (model.params.size() != model.arch.layers.size()) {
    throw ShapeError(-1, "model has " + std::to_string(model.params.size()) +
                             " parameter sets for " +
                             std::to_string(model.arch.layers.size()) + " layers");
  }
  for (int id = 0; id < static_cast<int>(model.arch.layers.size()); ++id) {
    const auto [weight, bias] =
        param_shapes(model.arch.layers[id], input_shape_of(model.arch, shapes, id));
    const auto& p = model.params[id];
    if (p.weight.shape() != weight || p.bias.shape() != bias) {
      throw ShapeError(id, "parameters " + shape_to_string(p.weight.shape()) + "/" +
                               shape_to_string(p.bias.shape()) + " expected " +
                               shape_to_string(weight) + "/" + shape_to_string(bias));
    }
  }
}

template <typename Scalar>
Model<Scalar> init_model(const ArchSpec& arch, std::uint64_t seed) {
  const auto shapes = propagate_shapes(arch);
  Rng rng(seed);
  Model<Scalar> model{arch, {}};
  for (int id = 0; id < static_cast<int>(arch.layers.size()); ++id) {
    const LayerSpec& l = arch.layers[id];
    const auto [weight, bias] = param_shapes(l, input_shape_of(arch, shapes, id));
    LayerParams<Scalar> p;
    if (!weight.empty()) p.weight = Tensor<Scalar>(weight);
    if (!bias.empty()) p.bias = Tensor<Scalar>(bias);
    if (l.kind == LayerKind::batch_norm) {
      p.weight.vec().setOnes();
    } else if (!weight.empty()) {
      const double fan_in = static_cast<double>(shape_size(weight) / weight.front());
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index i = 0; i < p.weight.size(); ++i) {
        p.weight[i] = static_cast<Scalar>(dist(rng));
      }
    }
    model.params.push_back(std::move(p));
  }
  return model;
}

template <typename Scalar>
Tensor<Scalar> gather_batch(const Dataset& data, std::span<const int> indices) {
  const Eigen::Index features = Eigen::Index{data.channels()} * data.height() * data.width();
  Tensor<Scalar> batch({static_cast<int>(indices.size()), data.channels(), data.height(),
                        data.width()});
  const auto src = data.images.matrix(data.size(), features);
  auto dst = batch.matrix(static_cast<Eigen::Index>(indices.size()), features);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    dst.row(i) = src.row(indices[i]).template cast<Scalar>();
  }
  return batch;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> forward_all(const Model<Scalar>& model,
                                        const Tensor<Scalar>& batch) {
  Graph<Scalar> graph(model, batch);
  return graph.run(nullptr);
}

template <typename Scalar>
Tensor<Scalar> forward(const Model<Scalar>& model, const Tensor<Scalar>& batch) {
  auto outputs = forward_all(model, batch);
  Tensor<Scalar>& last = outputs.back();
  const int n = batch.dim(0);
  const int features = static_cast<int>(last.size() / std::max(n, 1));
  return Tensor<Scalar>({n, features}, std::move(last.vec()));
}

template <typename Scalar>
Scalar softmax_cross_entropy(const Tensor<Scalar>& scores, std::span<const int> labels,
                             Tensor<Scalar>* dscores) {
  const int n = scores.dim(0);
  const int classes = scores.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("label count does not match batch size");
  }
  const auto s = scores.matrix(n, classes);
  Matrix<Scalar> d(n, classes);
  Scalar loss = 0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) +
                                  " out of range for " + std::to_string(classes) +
                                  " classes");
    }
    const Scalar top = s.row(i).maxCoeff();
    const auto shifted = (s.row(i).array() - top).eval();
    const Scalar log_sum = std::log(shifted.exp().sum());
    loss += log_sum - shifted[labels[i]];
    d.row(i) = (shifted - log_sum).exp();
    d(i, labels[i]) -= Scalar(1);
  }
  if (dscores) {
    *dscores = Tensor<Scalar>({n, classes});
    dscores->matrix(n, classes) = d / static_cast<Scalar>(n);
  }
  return loss / static_cast<Scalar>(n);
}

template <typename Scalar>
Scalar loss_and_gradients(const Model<Scalar>& model, const Tensor<Scalar>& batch,
                          std::span<const int> labels, Gradients<Scalar>* grads) {
  Graph<Scalar> graph(model, batch);
  ForwardCache<Scalar> cache;
  auto outputs = graph.run(grads ? &cache : nullptr);
  const int n = batch.dim(0);
  const Tensor<Scalar>& last = outputs.back();
  const Tensor<Scalar> scores({n, static_cast<int>(last.size() / n)}, last.vec());
  if (!grads) return softmax_cross_entropy<Scalar>(scores, labels);
  Tensor<Scalar> dscores;
  const Scalar loss = softmax_cross_entropy(scores, labels, &dscores);
  backward(model, batch, graph.shapes(), outputs, cache, std::move(dscores), *grads);
  return loss;
}

template <typename Scalar>
void sgd_step(Model<Scalar>& model, const Gradients<Scalar>& grads, Scalar learning_rate) {
  for (std::size_t id = 0; id < model.params.size(); ++id) {
    auto& p = model.params[id];
    const auto& g = grads.params[id];
    if (!p.weight.empty()) p.weight.vec() -= learning_rate * g.weight.vec();
    if (!p.bias.empty()) p.bias.vec() -= learning_rate * g.bias.vec();
  }
}

template <typename Scalar>
Model<Scalar> train(Model<Scalar> model, const Dataset& data, const TrainConfig& config) {
  if (config.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(config.learning_rate > 0)) throw std::invalid_argument("learning rate must be > 0");
  if (config.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (config.epochs == 0 || data.size() == 0) return model;

  Rng rng(config.seed);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const Scalar rate = static_cast<Scalar>(config.learning_rate);
  long step = 0;
  Gradients<Scalar> grads;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < data.size(); start += config.batch_size) {
      const int count = std::min(config.batch_size, data.size() - start);
      const std::span<const int> idx(order.data() + start, count);
      const Tensor<Scalar> batch = gather_batch<Scalar>(data, idx);
      std::vector<int> labels(count);
      for (int i = 0; i < count; ++i) labels[i] = data.labels[idx[i]];
      const Scalar loss = loss_and_gradients(model, batch, labels, &grads);
      if (!std::isfinite(static_cast<double>(loss))) {
        const auto outputs = forward_all(model, batch);
        int bad = static_cast<int>(outputs.size()) - 1;
        for (int id = 0; id < static_cast<int>(outputs.size()); ++id) {
          if (!outputs[id].all_finite()) {
            bad = id;
            break;
          }
        }
        throw TrainingError(bad, step,
                            "non-finite loss at step " + std::to_string(step) +
                                "; first non-finite output at layer " +
                                std::to_string(bad) + " (" + model.arch.layers[bad].name +
                                ")");
      }
      sgd_step(model, grads, rate);
      ++step;
    }
  }
  return model;
}

template <typename Scalar>
std::vector<int> predict(const Model<Scalar>& model, const Dataset& data, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<int> idx;
  for (int start = 0; start < data.size(); start += batch_size) {
    const int count = std::min(batch_size, data.size() - start);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<Scalar> scores = forward(model, gather_batch<Scalar>(data, idx));
    const int classes = scores.dim(1);
    for (int i = 0; i < count; ++i) {
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        if (scores[Eigen::Index{i} * classes + c] > scores[Eigen::Index{i} * classes + best]) {
          best = c;
        }
      }
      out.push_back(best);
    }
  }
  return out;
}

template <typename Scalar>
double error_rate(const Model<Scalar>& model, const Dataset& data, int batch_size) {
  if (data.size() == 0) throw DataError("error rate of an empty dataset");
  const std::vector<int> predicted = predict(model, data, batch_size);
  int wrong = 0;
  for (int i = 0; i < data.size(); ++i) wrong += predicted[i] != data.labels[i];
  return static_cast<double>(wrong) / data.size();
}

#define ESPRUNE_INSTANTIATE(Scalar)                                                      \
  template void check_params(const Model<Scalar>&);                                     \
  template Model<Scalar> init_model<Scalar>(const ArchSpec&, std::uint64_t);            \
  template Tensor<Scalar> gather_batch<Scalar>(const Dataset&, std::span<const int>);   \
  template std::vector<Tensor<Scalar>> forward_all(const Model<Scalar>&,                \
                                                   const Tensor<Scalar>&);              \
  template Tensor<Scalar> forward(const Model<Scalar>&, const Tensor<Scalar>&);         \
  template Scalar softmax_cross_entropy(const Tensor<Scalar>&, std::span<const int>,    \
                                       Tensor<Scalar>*);                                \
  template Scalar loss_and_gradients(const Model<Scalar>&, const Tensor<Scalar>&,       \
                                     std::span<const int>, Gradients<Scalar>*);         \
  template void sgd_step(Model<Scalar>&, const Gradients<Scalar>&, Scalar);             \
  template Model<Scalar> train(Model<Scalar>, const Dataset&, const TrainConfig&);      \
  template std::vector<int> predict(const Model<Scalar>&, const Dataset&, int);         \
  template double error_rate(const Model<Scalar>&, const Dataset&, int);

ESPRUNE_INSTANTIATE(float)
ESPRUNE_INSTANTIATE(double)

#undef ESPRUNE_INSTANTIATE

}  // namespace esprune
