#pragma once

// Small feedforward networks over a flat parameter vector, with a hand-written
// reverse pass for exactly this topology, a finite-difference checker and
// SGD/Adam.

#include "ctrl/common.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ctrl {

enum class Activation { identity, tanh, relu, sigmoid, gauss, softplus };

std::string activation_name(Activation a);
Activation parse_activation(const std::string& s);

/// Layer l maps dims[l] -> dims[l+1]. Its parameters occupy one contiguous
/// block laid out as [W (out x in, column-major), b (out)].
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<int> dims, Activation hidden, Activation output);

  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  int num_layers() const { return static_cast<int>(dims_.size()) - 1; }
  int num_params() const { return static_cast<int>(params_.size()); }
  const std::vector<int>& dims() const { return dims_; }
  Activation hidden_activation() const { return hidden_; }
  Activation output_activation() const { return output_; }

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  void set_params(const Vec& p);

  /// Glorot-uniform weights, zero biases.
  void init_glorot(Rng& rng);

  // Views of layer l's weight matrix and bias inside a parameter vector.
  Eigen::Map<const Mat> weight(const Vec& p, int layer) const;
  Eigen::Map<const Vec> bias(const Vec& p, int layer) const;
  Eigen::Map<Mat> weight(Vec& p, int layer) const;
  Eigen::Map<Vec> bias(Vec& p, int layer) const;

  Vec forward(const Vec& input) const;

  /// Activations kept for the reverse pass; columns are batch items.
  struct Tape {
    std::vector<Mat> pre;   // per layer, before activation
    std::vector<Mat> post;  // post[0] is the input
  };
  Mat forward_batch(const Mat& inputs) const;
  Mat forward_batch(const Mat& inputs, Tape& tape) const;

  /// Adds d<upstream, out>/dparams into param_grad (length num_params) and
  /// returns d<upstream, out>/dinput (one column per batch item).
  Mat backward_batch(const Tape& tape, const Mat& upstream, Vec& param_grad) const;

  /// Single-input convenience: returns the parameter gradient.
  Vec backward(const Vec& input, const Vec& upstream, Vec* input_grad = nullptr) const;

 private:
  std::vector<int> dims_{1, 1};
  std::vector<int> offsets_;
  Activation hidden_ = Activation::tanh;
  Activation output_ = Activation::identity;
  Vec params_;
};

Mat apply_activation(Activation a, const Mat& z);
/// Elementwise derivative given pre-activation z and output y.
Mat activation_derivative(Activation a, const Mat& z, const Mat& y);

struct GradientReport {
  Vec analytic;
  Vec numeric;
  std::vector<int> coordinates;
  double max_rel_error = 0.0;
};

/// value(params, grad*) returns the loss and, when grad is non-null, writes the
/// analytic gradient.
using LossFn = std::function<double(const Vec& params, Vec* grad)>;

/// Central differences with step h on at most max_coords evenly spaced
/// coordinates.
GradientReport check_gradient(const LossFn& loss, const Vec& params, double h = 1e-5,
                              int max_coords = 200);

struct OptimizerState {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vec m, v;
  long long t = 0;

  static OptimizerState sgd(double lr);
  static OptimizerState adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
};

/// Descent step in place. Throws DivergenceError("diverged") on a non-finite
/// gradient.
void optimizer_step(OptimizerState& state, Vec& params, const Vec& grad);

// Binary parameter blob: "CTRLMLP1", u32 layer count L, L+1 u32 dims,
// u8 hidden activation, u8 output activation, u64 param count, f64 params.
// Everything little-endian.
void write_mlp(std::ostream& out, const Mlp& net);
Mlp read_mlp(std::istream& in);
void save_mlp(const std::string& path, const Mlp& net);
Mlp load_mlp(const std::string& path);

}  // namespace ctrl
