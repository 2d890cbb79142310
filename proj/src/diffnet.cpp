#include "ctrl/diffnet.hpp"

#include "ctrl/binio.hpp"

#include <cmath>
#include <fstream>

namespace ctrl {

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::gauss: return "gauss";
    case Activation::softplus: return "softplus";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  for (auto a : {Activation::identity, Activation::tanh, Activation::relu, Activation::sigmoid,
                 Activation::gauss, Activation::softplus}) {
    if (activation_name(a) == s) return a;
  }
  throw ConfigError("unknown activation '" + s + "'");
}

Mat apply_activation(Activation a, const Mat& z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::tanh: return z.array().tanh().matrix();
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::sigmoid: return z.unaryExpr([](double x) { return sigmoid(x); });
    case Activation::gauss: return (-z.array().square()).exp().matrix();
    case Activation::softplus: return z.unaryExpr([](double x) { return softplus(x); });
  }
  return z;
}

Mat activation_derivative(Activation a, const Mat& z, const Mat& y) {
  switch (a) {
    case Activation::identity: return Mat::Ones(z.rows(), z.cols());
    case Activation::tanh: return (1.0 - y.array().square()).matrix();
    case Activation::relu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::sigmoid: return (y.array() * (1.0 - y.array())).matrix();
    case Activation::gauss: return (-2.0 * z.array() * y.array()).matrix();
    case Activation::softplus: return z.unaryExpr([](double x) { return sigmoid(x); });
  }
  return z;
}

Mlp::Mlp(std::vector<int> dims, Activation hidden, Activation output)
    : dims_(std::move(dims)), hidden_(hidden), output_(output) {
  if (dims_.size() < 2) throw std::invalid_argument("Mlp needs at least input and output dims");
  for (int d : dims_) {
    if (d < 1) throw std::invalid_argument("Mlp layer dims must be positive");
  }
  int total = 0;
  for (int l = 0; l < num_layers(); ++l) {
    offsets_.push_back(total);
    total += (dims_[l] + 1) * dims_[l + 1];
  }
  params_ = Vec::Zero(total);
}

void Mlp::set_params(const Vec& p) {
  if (p.size() != params_.size()) throw std::invalid_argument("Mlp parameter length mismatch");
  params_ = p;
}

void Mlp::init_glorot(Rng& rng) {
  for (int l = 0; l < num_layers(); ++l) {
    const double lim = std::sqrt(6.0 / (dims_[l] + dims_[l + 1]));
    auto w = weight(params_, l);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = lim * (2.0 * uniform01(rng) - 1.0);
    bias(params_, l).setZero();
  }
}

Eigen::Map<const Mat> Mlp::weight(const Vec& p, int l) const {
  return {p.data() + offsets_[l], dims_[l + 1], dims_[l]};
}
Eigen::Map<const Vec> Mlp::bias(const Vec& p, int l) const {
  return {p.data() + offsets_[l] + dims_[l] * dims_[l + 1], dims_[l + 1]};
}
Eigen::Map<Mat> Mlp::weight(Vec& p, int l) const {
  return {p.data() + offsets_[l], dims_[l + 1], dims_[l]};
}
Eigen::Map<Vec> Mlp::bias(Vec& p, int l) const {
  return {p.data() + offsets_[l] + dims_[l] * dims_[l + 1], dims_[l + 1]};
}

Vec Mlp::forward(const Vec& input) const {
  if (input.size() != input_dim()) throw std::invalid_argument("Mlp input dimension mismatch");
  return forward_batch(Mat(input)).col(0);
}

Mat Mlp::forward_batch(const Mat& inputs) const {
  Tape tape;
  return forward_batch(inputs, tape);
}

Mat Mlp::forward_batch(const Mat& inputs, Tape& tape) const {
  if (inputs.rows() != input_dim()) throw std::invalid_argument("Mlp input dimension mismatch");
  tape.pre.assign(static_cast<size_t>(num_layers()), Mat());
  tape.post.assign(static_cast<size_t>(num_layers()) + 1, Mat());
  tape.post[0] = inputs;
  for (int l = 0; l < num_layers(); ++l) {
    Mat z = weight(params_, l) * tape.post[static_cast<size_t>(l)];
    z.colwise() += bias(params_, l);
    const Activation act = (l + 1 == num_layers()) ? output_ : hidden_;
    tape.post[static_cast<size_t>(l) + 1] = apply_activation(act, z);
    tape.pre[static_cast<size_t>(l)] = std::move(z);
  }
  return tape.post.back();
}

Mat Mlp::backward_batch(const Tape& tape, const Mat& upstream, Vec& param_grad) const {
  if (upstream.rows() != output_dim() || upstream.cols() != tape.post.back().cols()) {
    throw std::invalid_argument("Mlp upstream shape mismatch");
  }
  if (param_grad.size() != num_params()) throw std::invalid_argument("Mlp gradient length mismatch");
  Mat delta = upstream;
  for (int l = num_layers() - 1; l >= 0; --l) {
    const auto L = static_cast<size_t>(l);
    const Activation act = (l + 1 == num_layers()) ? output_ : hidden_;
    delta.array() *= activation_derivative(act, tape.pre[L], tape.post[L + 1]).array();
    weight(param_grad, l).noalias() += delta * tape.post[L].transpose();
    bias(param_grad, l) += delta.rowwise().sum();
    delta = weight(params_, l).transpose() * delta;
  }
  return delta;
}

Vec Mlp::backward(const Vec& input, const Vec& upstream, Vec* input_grad) const {
  Tape tape;
  forward_batch(Mat(input), tape);
  Vec g = Vec::Zero(num_params());
  Mat dx = backward_batch(tape, Mat(upstream), g);
  if (input_grad) *input_grad = dx.col(0);
  return g;
}

GradientReport check_gradient(const LossFn& loss, const Vec& params, double h, int max_coords) {
  GradientReport rep;
  Vec full;
  const double f0 = loss(params, &full);
  if (!std::isfinite(f0)) throw std::invalid_argument("check_gradient: loss is not finite");
  const int n = static_cast<int>(params.size());
  const int m = std::min(n, max_coords);
  for (int k = 0; k < m; ++k) {
    rep.coordinates.push_back(m == n ? k : static_cast<int>((static_cast<long long>(k) * n) / m));
  }
  rep.analytic.resize(m);
  rep.numeric.resize(m);
  Vec p = params;
  for (int k = 0; k < m; ++k) {
    const int i = rep.coordinates[static_cast<size_t>(k)];
    p[i] = params[i] + h;
    const double fp = loss(p, nullptr);
    p[i] = params[i] - h;
    const double fm = loss(p, nullptr);
    p[i] = params[i];
    rep.analytic[k] = full[i];
    rep.numeric[k] = (fp - fm) / (2.0 * h);
    const double a = rep.analytic[k], nn = rep.numeric[k];
    rep.max_rel_error = std::max(rep.max_rel_error, std::abs(a - nn) / (std::abs(a) + std::abs(nn) + 1e-8));
  }
  return rep;
}

OptimizerState OptimizerState::sgd(double lr) {
  OptimizerState s;
  s.kind = Kind::sgd;
  s.learning_rate = lr;
  return s;
}

OptimizerState OptimizerState::adam(double lr, double beta1, double beta2, double eps) {
  OptimizerState s;
  s.kind = Kind::adam;
  s.learning_rate = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  return s;
}

void optimizer_step(OptimizerState& s, Vec& params, const Vec& grad) {
  if (grad.size() != params.size()) throw std::invalid_argument("optimizer_step length mismatch");
  if (!grad.allFinite()) throw DivergenceError("diverged");
  if (!(s.learning_rate > 0)) throw std::invalid_argument("learning rate must be > 0");
  if (s.kind == OptimizerState::Kind::sgd) {
    params -= s.learning_rate * grad;
    return;
  }
  if (s.m.size() != params.size()) {
    s.m = Vec::Zero(params.size());
    s.v = Vec::Zero(params.size());
    s.t = 0;
  }
  ++s.t;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  params.array() -= s.learning_rate * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

namespace {
constexpr char kMagic[8] = {'C', 'T', 'R', 'L', 'M', 'L', 'P', '1'};
}

void write_mlp(std::ostream& out, const Mlp& net) {
  out.write(kMagic, 8);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(net.num_layers()));
  for (int d : net.dims()) binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(net.hidden_activation()));
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(net.output_activation()));
  binio::put<std::uint64_t>(out, static_cast<std::uint64_t>(net.num_params()));
  for (Eigen::Index i = 0; i < net.params().size(); ++i) binio::put_f64(out, net.params()[i]);
  if (!out) throw IoError("failed writing network parameters");
}

Mlp read_mlp(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kMagic, 8)) throw IoError("not a network blob (bad magic)");
  const auto layers = binio::get<std::uint32_t>(in);
  if (layers < 1 || layers > 64) throw IoError("implausible layer count in network blob");
  std::vector<int> dims;
  for (std::uint32_t i = 0; i <= layers; ++i) dims.push_back(static_cast<int>(binio::get<std::uint32_t>(in)));
  const auto hidden = binio::get<std::uint8_t>(in);
  const auto output = binio::get<std::uint8_t>(in);
  if (hidden > 5 || output > 5) throw IoError("unknown activation tag in network blob");
  Mlp net(dims, static_cast<Activation>(hidden), static_cast<Activation>(output));
  const auto count = binio::get<std::uint64_t>(in);
  if (count != static_cast<std::uint64_t>(net.num_params())) throw IoError("parameter count mismatch in network blob");
  Vec p(net.num_params());
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = binio::get_f64(in);
  net.set_params(p);
  return net;
}

void save_mlp(const std::string& path, const Mlp& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_mlp(out, net);
}

Mlp load_mlp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_mlp(in);
}

}  // namespace ctrl
