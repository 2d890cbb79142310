#pragma once

// Low-rank transition model P(s'|s,a) ∝ g(<phi(s,a), mu(s')>) p(s') with a
// fixed base measure p, plus the exact tabular instantiation.

#include "ctrl/diffnet.hpp"
#include "ctrl/mdp.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ctrl {

class BaseMeasure {
 public:
  enum class Kind { uniform_discrete, uniform_box, gaussian };

  static BaseMeasure uniform_discrete(int cardinality);
  static BaseMeasure uniform_box(Vec low, Vec high);
  static BaseMeasure gaussian(Vec mean, Vec std);
  /// Uniform over a discrete set or a box.
  static BaseMeasure uniform_over(const Space& space);

  Kind kind() const { return kind_; }
  double log_density(const Vec& x) const;
  double density(const Vec& x) const { return std::exp(log_density(x)); }
  Vec sample(Rng& rng) const;

  std::string describe() const;
  static BaseMeasure parse(const std::string& text);

 private:
  Kind kind_ = Kind::uniform_discrete;
  int cardinality_ = 1;
  Vec a_, b_;  // box low/high or gaussian mean/std
};

enum class Positivity { softplus_on_inner, elementwise_nonneg };

std::string positivity_name(Positivity p);
Positivity parse_positivity(const std::string& s);

/// Network input for a point: one-hot for discrete spaces, coordinates
/// rescaled to [-1, 1] for boxes.
int encoded_dim(const Space& space);
void encode_into(const Space& space, const Vec& point, double* out);

struct LowRankConfig {
  int d = 32;
  std::vector<int> phi_hidden{32, 32};
  std::vector<int> mu_hidden{32, 32};
  Activation hidden_activation = Activation::tanh;
  Activation mu_output = Activation::identity;
  bool bounded_phi = true;
  Positivity positivity = Positivity::softplus_on_inner;
  double temperature = 0.2;
};

struct ConditionalDensity {
  double density = 0.0;
  double log_density = 0.0;
  double log_z = 0.0;
};

struct LossGrad {
  double value = 0.0;
  Vec grad;
};

class LowRankModel {
 public:
  LowRankModel(Space state, Space action, Space next, BaseMeasure base, const LowRankConfig& cfg,
               Rng& rng);
  /// Builds a model from explicit networks (used by checkpoints and tests).
  LowRankModel(Space state, Space action, Space next, BaseMeasure base, Mlp phi_net, Mlp mu_net,
               bool bounded_phi, Positivity positivity, double temperature);

  /// phi = e_(s,a), mu(s')_(s,a) = |S| P(s'|s,a), p uniform, identity link.
  static LowRankModel tabular_factorization(const TabularMdp& mdp);

  const Space& state_space() const { return state_; }
  const Space& action_space() const { return action_; }
  const Space& next_space() const { return next_; }
  const BaseMeasure& base_measure() const { return base_; }
  int d() const { return phi_net_.output_dim(); }
  bool bounded_phi() const { return bounded_; }
  Positivity positivity() const { return positivity_; }
  double temperature() const { return temperature_; }
  const Mlp& phi_net() const { return phi_net_; }
  const Mlp& mu_net() const { return mu_net_; }

  int num_params() const { return phi_net_.num_params() + mu_net_.num_params(); }
  int num_phi_params() const { return phi_net_.num_params(); }
  /// [phi params, mu params].
  Vec params() const;
  void set_params(const Vec& p);

  /// True when (state, action) is encoded jointly as one one-hot index.
  bool joint_discrete() const { return state_.is_discrete() && action_.is_discrete(); }
  int sa_input_dim() const { return phi_net_.input_dim(); }
  int next_input_dim() const { return mu_net_.input_dim(); }
  Vec encode_sa(const Vec& s, const Vec& a) const;
  Vec encode_next(const Vec& s_next) const;

  /// Feature map after the optional norm bound; columns are inputs.
  Mat phi_batch(const Mat& encoded_sa) const;
  Mat mu_batch(const Mat& encoded_next) const;
  Vec phi(const Vec& s, const Vec& a) const;
  Vec mu(const Vec& s_next) const;

  /// Link argument: inner/T in softplus mode, inner itself otherwise.
  double link_arg(double inner) const;
  double log_link(double z) const;
  /// d log g(z) / dz.
  double dlog_link(double z) const;
  double link(double z) const;

  double log_score(const Vec& s, const Vec& a, const Vec& s_next) const;
  double unnormalized_score(const Vec& s, const Vec& a, const Vec& s_next) const;

  ConditionalDensity conditional_density_exact(const Vec& s, const Vec& a, const Vec& s_next) const;
  /// Z estimated as the mean of g(z(y_j)) over K draws y_j ~ p.
  ConditionalDensity conditional_density_mc(const Vec& s, const Vec& a, const Vec& s_next, int K,
                                            Rng& rng) const;
  /// Exactly normalized (S*A) x S' table; discrete spaces only.
  Mat density_table() const;

  /// Optional linear reward head r(s,a) = <phi(s,a), theta_r>.
  std::optional<Vec> reward_head;

 private:
  Space state_, action_, next_;
  BaseMeasure base_;
  Mlp phi_net_, mu_net_;
  bool bounded_ = true;
  Positivity positivity_ = Positivity::softplus_on_inner;
  double temperature_ = 1.0;
};

/// One Monte-Carlo normalizer sample y_1..y_K ~ p shared across many
/// (s, a) queries, so scoring a batch or a grid costs one mu pass.
class SharedNormalizer {
 public:
  SharedNormalizer(const LowRankModel& model, int K, Rng& rng);
  double log_z(const Vec& s, const Vec& a) const;
  /// log g(z(s,a,s')) + log p(s') - log Zhat(s,a).
  double log_density(const Vec& s, const Vec& a, const Vec& s_next) const;
  /// Log densities of many next states for one (s,a), columns of `next`.
  Vec log_density_many(const Vec& s, const Vec& a, const std::vector<Vec>& next) const;

 private:
  const LowRankModel& model_;
  Mat mu_;
};

/// Forward pass over deduplicated inputs with the reverse pass needed by every
/// loss on the model. Losses address inputs by column index.
class ScoreGraph {
 public:
  ScoreGraph(const LowRankModel& model, Mat sa_inputs, Mat next_inputs);

  const Mat& phi() const { return phi_; }
  const Mat& mu() const { return mu_; }
  int num_sa() const { return static_cast<int>(phi_.cols()); }
  int num_next() const { return static_cast<int>(mu_.cols()); }
  /// Link argument for the pair (sa column i, next column j).
  double z(int i, int j) const;

  /// Reverse pass given dL/dphi (d x num_sa) and dL/dmu (d x num_next).
  Vec backward(const Mat& d_phi, const Mat& d_mu) const;

  /// Accumulates dL/dz for pair (i, j) into d_phi / d_mu.
  void add_pair_grad(int i, int j, double dz, Mat& d_phi, Mat& d_mu) const;

 private:
  const LowRankModel& model_;
  Mlp::Tape phi_tape_, mu_tape_;
  Mat phi_raw_, phi_, mu_;
  double scale_ = 1.0;
};

/// Collects points once per distinct discrete value; continuous points get a
/// column each.
class InputTable {
 public:
  InputTable(const LowRankModel& model, bool sa_side) : model_(model), sa_side_(sa_side) {}
  int add(const Vec& s, const Vec& a);  // sa side
  int add(const Vec& s_next);           // next side
  Mat matrix() const;
  int size() const { return static_cast<int>(columns_.size()); }

 private:
  const LowRankModel& model_;
  bool sa_side_;
  std::vector<Vec> columns_;
  std::vector<int> index_;  // discrete key -> column
};

/// (1/n) sum_i (log Zhat_i)^2 with Zhat_i = mean_j g(z(s_i, a_i, y_ij)), y_ij ~ p.
/// stratified (discrete next space only) replaces the draws with the exact
/// expectation under p.
LossGrad normalization_regularizer(const LowRankModel& model,
                                   const std::vector<std::pair<Vec, Vec>>& sa_batch, int K,
                                   bool stratified, Rng& rng);

/// Monte-Carlo E_p ||mu(s')||^2 (exact expectation when stratified).
LossGrad mu_norm_regularizer(const LowRankModel& model, int K, bool stratified, Rng& rng);

/// Checkpoint: text header ("ctrl-model v1", key: value lines, "end") then the
/// phi and mu network blobs.
void save_model(const std::string& path, const LowRankModel& model);
LowRankModel load_model(const std::string& path);

}  // namespace ctrl
