#pragma once

// Minimal dense network core with hand-written backpropagation. Everything is
// double precision and single-threaded so seeded runs are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coe/error.hpp"
#include "coe/matrix.hpp"

namespace coe::nn {

enum class Activation { none, relu };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "none"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "none") return Activation::none;
  throw InvalidInput("unknown activation '" + s + "'");
}

struct DenseLayer {
  Matrix weights;  ///< out × in
  std::vector<double> bias;
  Activation activation = Activation::none;

  [[nodiscard]] std::size_t in() const noexcept { return weights.cols(); }
  [[nodiscard]] std::size_t out() const noexcept { return weights.rows(); }
};

/// Counts scalar multiplies performed by forward passes.
struct OpCounter {
  std::uint64_t multiplies = 0;
};

class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer> layers, std::uint64_t seed = 0)
      : layers_(std::move(layers)), seed_(seed) {
    require(!layers_.empty(), "Mlp: no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      require(l.bias.size() == l.out(), "Mlp: bias length != layer output width");
      if (i > 0) require(l.in() == layers_[i - 1].out(), "Mlp: layer dims do not chain");
    }
  }

  /// He-initialized network over `dims` (input, hidden..., output). Hidden
  /// layers use `hidden`, the last layer `output`.
  static Mlp build(std::span<const std::size_t> dims, std::uint64_t seed,
                   Activation hidden = Activation::relu, Activation output = Activation::none) {
    require(dims.size() >= 2, "Mlp::build: need at least input and output dims");
    std::mt19937_64 rng(seed);
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      require(dims[i] > 0 && dims[i + 1] > 0, "Mlp::build: zero-width layer");
      DenseLayer l{Matrix(dims[i + 1], dims[i]), std::vector<double>(dims[i + 1], 0.0),
                   i + 2 == dims.size() ? output : hidden};
      std::normal_distribution<double> init(0.0, std::sqrt(2.0 / static_cast<double>(dims[i])));
      for (double& w : l.weights.flat()) w = init(rng);
      layers.push_back(std::move(l));
    }
    return Mlp(std::move(layers), seed);
  }

  static Mlp build(std::initializer_list<std::size_t> dims, std::uint64_t seed,
                   Activation hidden = Activation::relu, Activation output = Activation::none) {
    return build(std::span<const std::size_t>(dims.begin(), dims.size()), seed, hidden, output);
  }

  [[nodiscard]] const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  /// Mutable access invalidates outstanding forward caches.
  std::vector<DenseLayer>& mutable_layers() noexcept {
    ++generation_;
    return layers_;
  }

  [[nodiscard]] std::size_t input_dim() const { return layers_.front().in(); }
  [[nodiscard]] std::size_t output_dim() const { return layers_.back().out(); }
  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] std::uint64_t generation() const noexcept { return generation_; }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
    return n;
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      const auto& x = a.layers_[i];
      const auto& y = b.layers_[i];
      if (!(x.weights == y.weights) || x.bias != y.bias || x.activation != y.activation)
        return false;
    }
    return true;
  }

 private:
  std::vector<DenseLayer> layers_;
  std::uint64_t seed_ = 0;
  std::uint64_t generation_ = 0;
};

namespace detail {

inline Matrix dense_forward(const DenseLayer& l, const Matrix& in, Matrix* pre,
                            OpCounter* counter) {
  const std::size_t rows = in.rows();
  const std::size_t n_in = l.in();
  const std::size_t n_out = l.out();
  Matrix out(rows, n_out);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.row(r).data();
    for (std::size_t o = 0; o < n_out; ++o) {
      const double* w = l.weights.row(o).data();
      double acc = l.bias[o];
      for (std::size_t i = 0; i < n_in; ++i) acc += w[i] * x[i];
      out(r, o) = acc;
    }
  }
  if (counter) counter->multiplies += static_cast<std::uint64_t>(rows * n_in * n_out);
  if (pre) *pre = out;
  if (l.activation == Activation::relu)
    for (double& v : out.flat()) v = v > 0.0 ? v : 0.0;
  return out;
}

}  // namespace detail

/// Intermediates recorded by `forward` and consumed by `backward`.
struct ForwardCache {
  const Mlp* owner = nullptr;
  std::uint64_t generation = 0;
  std::vector<Matrix> inputs;  ///< input to each layer
  std::vector<Matrix> pre;     ///< pre-activation of each layer
  Matrix output;               ///< logits
};

inline ForwardCache forward(const Mlp& mlp, const Matrix& batch, OpCounter* counter = nullptr) {
  require(batch.cols() == mlp.input_dim(),
          "forward: batch width " + std::to_string(batch.cols()) + " != input dim " +
              std::to_string(mlp.input_dim()));
  ForwardCache cache;
  cache.owner = &mlp;
  cache.generation = mlp.generation();
  const auto& layers = mlp.layers();
  cache.inputs.reserve(layers.size());
  cache.pre.resize(layers.size());
  Matrix current = batch;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    cache.inputs.push_back(current);
    current = detail::dense_forward(layers[i], cache.inputs.back(), &cache.pre[i], counter);
  }
  cache.output = std::move(current);
  return cache;
}

/// Inference-only forward; numerically identical to `forward(...).output`.
inline Matrix apply(const Mlp& mlp, const Matrix& batch, OpCounter* counter = nullptr) {
  require(batch.cols() == mlp.input_dim(), "apply: batch width != input dim");
  Matrix current = batch;
  for (const auto& l : mlp.layers()) current = detail::dense_forward(l, current, nullptr, counter);
  return current;
}

/// Parameter-shaped gradient buffers.
struct Gradients {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> bias;

  static Gradients zeros_like(const Mlp& mlp) {
    Gradients g;
    for (const auto& l : mlp.layers()) {
      g.weights.emplace_back(l.out(), l.in(), 0.0);
      g.bias.emplace_back(l.out(), 0.0);
    }
    return g;
  }

  void add(const Gradients& other, double scale = 1.0) {
    require(other.weights.size() == weights.size(), "Gradients::add: layer count mismatch");
    for (std::size_t i = 0; i < weights.size(); ++i) {
      require(other.weights[i].size() == weights[i].size(), "Gradients::add: shape mismatch");
      auto dst = weights[i].flat();
      auto src = other.weights[i].flat();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
      for (std::size_t k = 0; k < bias[i].size(); ++k) bias[i][k] += scale * other.bias[i][k];
    }
  }

  [[nodiscard]] bool all_zero() const {
    for (const auto& w : weights)
      for (double v : w.flat())
        if (v != 0.0) return false;
    for (const auto& b : bias)
      for (double v : b)
        if (v != 0.0) return false;
    return true;
  }
};

struct BackwardResult {
  Gradients grads;
  Matrix input_grad;
};

/// Backpropagates `upstream` (dLoss/dLogits) through the cached forward pass.
inline BackwardResult backward(const Mlp& mlp, const ForwardCache& cache, const Matrix& upstream) {
  require(cache.owner == &mlp && cache.generation == mlp.generation(),
          "backward: stale forward cache");
  require(upstream.rows() == cache.output.rows() && upstream.cols() == cache.output.cols(),
          "backward: upstream gradient shape != output shape");
  const auto& layers = mlp.layers();
  BackwardResult res{Gradients::zeros_like(mlp), Matrix()};
  Matrix grad = upstream;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& l = layers[li];
    if (l.activation == Activation::relu) {
      auto g = grad.flat();
      auto z = cache.pre[li].flat();
      for (std::size_t k = 0; k < g.size(); ++k)
        if (z[k] <= 0.0) g[k] = 0.0;
    }
    const Matrix& in = cache.inputs[li];
    Matrix& dw = res.grads.weights[li];
    auto& db = res.grads.bias[li];
    Matrix din(in.rows(), l.in(), 0.0);
    for (std::size_t r = 0; r < in.rows(); ++r) {
      const double* x = in.row(r).data();
      double* dx = din.row(r).data();
      for (std::size_t o = 0; o < l.out(); ++o) {
        const double go = grad(r, o);
        if (go == 0.0) continue;
        db[o] += go;
        double* dwo = dw.row(o).data();
        const double* w = l.weights.row(o).data();
        for (std::size_t i = 0; i < l.in(); ++i) {
          dwo[i] += go * x[i];
          dx[i] += go * w[i];
        }
      }
    }
    grad = std::move(din);
  }
  res.input_grad = std::move(grad);
  return res;
}

/// Row-wise softmax, stabilized by subtracting the row max.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

/// Floor applied inside log() so exact zeros give a large finite loss.
inline constexpr double kProbFloor = 1e-12;

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;  ///< gradient w.r.t. the logits that produced `probs`
};

/// Σ_j w_j · (−log p_j[y_j]) with the fused softmax/CE logit gradient
/// w_j · (p_j − onehot(y_j)).
inline LossAndGrad weighted_cross_entropy(const Matrix& probs, std::span<const std::size_t> targets,
                                          std::span<const double> weights) {
  require(probs.rows() == targets.size() && targets.size() == weights.size(),
          "weighted_cross_entropy: length mismatch");
  double wsum = 0.0;
  for (double w : weights) {
    require(w >= 0.0, "weighted_cross_entropy: negative weight");
    wsum += w;
  }
  require(wsum > 0.0, "weighted_cross_entropy: weights sum to zero");
  LossAndGrad out{0.0, Matrix(probs.rows(), probs.cols(), 0.0)};
  for (std::size_t j = 0; j < probs.rows(); ++j) {
    require(targets[j] < probs.cols(), "weighted_cross_entropy: target out of range");
    const double w = weights[j];
    if (w == 0.0) continue;
    out.loss += w * -std::log(std::max(probs(j, targets[j]), kProbFloor));
    for (std::size_t c = 0; c < probs.cols(); ++c) out.grad(j, c) = w * probs(j, c);
    out.grad(j, targets[j]) -= w;
  }
  return out;
}

struct SgdState {
  double learning_rate = 0.05;
  double momentum = 0.9;
  Gradients velocity;  ///< lazily shaped on the first step

  SgdState() = default;
  SgdState(double lr, double mu) : learning_rate(lr), momentum(mu) {
    require(lr > 0.0, "SgdState: learning rate must be positive");
    require(mu >= 0.0 && mu < 1.0, "SgdState: momentum must be in [0,1)");
  }
};

/// v ← μv + g; p ← p − lr·v.
inline void sgd_step(Mlp& mlp, const Gradients& grads, SgdState& state) {
  const auto& ref = mlp.layers();
  require(grads.weights.size() == ref.size(), "sgd_step: gradient layer count mismatch");
  for (std::size_t i = 0; i < ref.size(); ++i)
    require(grads.weights[i].rows() == ref[i].out() && grads.weights[i].cols() == ref[i].in() &&
                grads.bias[i].size() == ref[i].out(),
            "sgd_step: gradient shape mismatch");
  if (state.velocity.weights.empty()) state.velocity = Gradients::zeros_like(mlp);
  auto& layers = mlp.mutable_layers();
  const double mu = state.momentum;
  const double lr = state.learning_rate;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto p = layers[i].weights.flat();
    auto v = state.velocity.weights[i].flat();
    auto g = grads.weights[i].flat();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = mu * v[k] + g[k];
      p[k] -= lr * v[k];
    }
    auto& pb = layers[i].bias;
    auto& vb = state.velocity.bias[i];
    const auto& gb = grads.bias[i];
    for (std::size_t k = 0; k < pb.size(); ++k) {
      vb[k] = mu * vb[k] + gb[k];
      pb[k] -= lr * vb[k];
    }
  }
}

/// Largest |ga − gn| / max(|ga|, |gn|, 1e-8) over every parameter of every
/// network, where gn is a central difference of `objective`.
inline double max_relative_error(std::span<Mlp* const> nets, const std::function<double()>& objective,
                                 std::span<const Gradients> analytic, double epsilon = 1e-5) {
  require(nets.size() == analytic.size(), "max_relative_error: nets/grads count mismatch");
  double worst = 0.0;
  auto check = [&](double& param, double ga) {
    const double saved = param;
    param = saved + epsilon;
    const double plus = objective();
    param = saved - epsilon;
    const double minus = objective();
    param = saved;
    const double gn = (plus - minus) / (2.0 * epsilon);
    const double denom = std::max({std::abs(ga), std::abs(gn), 1e-8});
    worst = std::max(worst, std::abs(ga - gn) / denom);
  };
  for (std::size_t n = 0; n < nets.size(); ++n) {
    auto& layers = nets[n]->mutable_layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto w = layers[i].weights.flat();
      auto gw = analytic[n].weights[i].flat();
      for (std::size_t k = 0; k < w.size(); ++k) check(w[k], gw[k]);
      for (std::size_t k = 0; k < layers[i].bias.size(); ++k)
        check(layers[i].bias[k], analytic[n].bias[i][k]);
    }
  }
  return worst;
}

/// Maps logits to (loss, dLoss/dLogits).
using LogitLoss = std::function<LossAndGrad(const Matrix& logits)>;

inline double gradient_check(Mlp& mlp, const LogitLoss& loss_fn, const Matrix& batch,
                             double epsilon = 1e-5) {
  const auto cache = forward(mlp, batch);
  const auto lg = loss_fn(cache.output);
  const auto analytic = backward(mlp, cache, lg.grad).grads;
  Mlp* nets[] = {&mlp};
  return max_relative_error(nets, [&] { return loss_fn(apply(mlp, batch)).loss; },
                            std::span<const Gradients>(&analytic, 1), epsilon);
}

// Checkpoint text format, one token stream:
//   coe-mlp 1
//   seed <u64>
//   layers <count>
//   then per layer: dense <in> <out> <relu|none>, followed by out*in weights
//   (row-major) and out biases, all as C99 hexfloats for exact round-trip.
inline void save_mlp(std::ostream& os, const Mlp& mlp) {
  os << "coe-mlp 1\nseed " << mlp.seed() << "\nlayers " << mlp.layers().size() << '\n';
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%a", v);
    os << buf;
  };
  for (const auto& l : mlp.layers()) {
    os << "dense " << l.in() << ' ' << l.out() << ' ' << to_string(l.activation) << '\n';
    for (std::size_t o = 0; o < l.out(); ++o) {
      for (std::size_t i = 0; i < l.in(); ++i) {
        if (i) os << ' ';
        put(l.weights(o, i));
      }
      os << '\n';
    }
    for (std::size_t o = 0; o < l.out(); ++o) {
      if (o) os << ' ';
      put(l.bias[o]);
    }
    os << '\n';
  }
}

inline Mlp load_mlp(std::istream& is) {
  std::string tok;
  auto expect = [&](const char* word) {
    require(static_cast<bool>(is >> tok) && tok == word,
            std::string("checkpoint: expected '") + word + "'");
  };
  auto read_size = [&] {
    std::size_t v = 0;
    require(static_cast<bool>(is >> v), "checkpoint: expected integer");
    return v;
  };
  auto read_double = [&] {
    require(static_cast<bool>(is >> tok), "checkpoint: truncated parameter data");
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    require(end && *end == '\0', "checkpoint: bad number '" + tok + "'");
    return v;
  };
  expect("coe-mlp");
  require(read_size() == 1, "checkpoint: unsupported version");
  expect("seed");
  std::uint64_t seed = 0;
  require(static_cast<bool>(is >> seed), "checkpoint: bad seed");
  expect("layers");
  const std::size_t count = read_size();
  std::vector<DenseLayer> layers;
  for (std::size_t li = 0; li < count; ++li) {
    expect("dense");
    const std::size_t in = read_size();
    const std::size_t out = read_size();
    require(static_cast<bool>(is >> tok), "checkpoint: missing activation");
    DenseLayer l{Matrix(out, in), std::vector<double>(out), activation_from_string(tok)};
    for (double& w : l.weights.flat()) w = read_double();
    for (double& b : l.bias) b = read_double();
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers), seed);
}

}  // namespace coe::nn
