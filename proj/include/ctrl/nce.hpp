#pragma once

// Noise-contrastive estimation for the low-rank model: binary and ranking
// losses, noise distributions (including the replay/random mixture),
// batch construction and the minibatch trainer.

#include "ctrl/environments.hpp"
#include "ctrl/lowrank.hpp"

#include <string>
#include <vector>

namespace ctrl {

/// h = r / (r + K) with r = score_ratio * exp(-gamma).
double h_value(double score_ratio, double gamma, int K);

/// One positive (x = next state, u = (state, action)) per row with K negatives
/// and the noise log-densities of every point.
struct NceBatch {
  std::vector<Vec> states, actions, next;
  std::vector<std::vector<Vec>> negatives;
  Vec log_q_pos;  // n
  Mat log_q_neg;  // n x K
  int K = 0;

  int size() const { return static_cast<int>(next.size()); }
  /// Throws std::invalid_argument("noise support violation") on q = 0.
  void validate() const;
};

/// Loss and derivatives with respect to the per-row log-ratios
/// a_i = log f(x_i|u_i) - log q(x_i) and B_ij = log f(y_ij|u_i) - log q(y_ij).
struct LogitLoss {
  double loss = 0.0;
  Vec da;
  Mat dB;
  double dgamma = 0.0;
};

LogitLoss ranking_loss_logits(const Vec& a, const Mat& B);
LogitLoss binary_loss_logits(const Vec& a, const Mat& B, double gamma);

struct NceLoss {
  double loss = 0.0;
  Vec grad;  // w.r.t. model params
  double dgamma = 0.0;
};

NceLoss ranking_loss(const NceBatch& batch, const LowRankModel& model);
NceLoss binary_loss(const NceBatch& batch, const LowRankModel& model, double gamma);

/// Losses for a discrete conditional table log f (u x x) when negatives are
/// summarized by per-row outcome counts (n x x). Used by the consistency sweep,
/// where K can be large without changing the cost.
struct GroupedLoss {
  double loss = 0.0;
  Mat d_logf;
  double dgamma = 0.0;
};

GroupedLoss ranking_loss_grouped(const Mat& log_f, const Vec& log_q,
                                 const std::vector<ConditionalSample>& data, const Mat& neg_counts);
GroupedLoss binary_loss_grouped(const Mat& log_f, const Vec& log_q,
                                const std::vector<ConditionalSample>& data, const Mat& neg_counts,
                                double gamma, int K);

/// Axis-aligned Gaussian KDE truncated to a box: each kernel is renormalized
/// by its mass inside the box, so samples and density agree exactly.
class TruncatedKde {
 public:
  TruncatedKde() = default;
  /// Uses at most max_centers evenly spaced points; Silverman bandwidth.
  TruncatedKde(const std::vector<Vec>& points, const Space& box, int max_centers = 512);

  Vec sample(Rng& rng) const;
  double log_density(const Vec& x) const;
  Vec log_density_batch(const Mat& queries) const;
  const Vec& bandwidth() const { return h_; }
  int num_centers() const { return static_cast<int>(centers_.cols()); }

 private:
  Mat centers_;
  Vec h_, log_mass_, low_, high_;
};

class NoiseDistribution {
 public:
  enum class Kind { base_measure, uniform, replay_mixture };

  static NoiseDistribution from_base(BaseMeasure base);
  static NoiseDistribution uniform(const Space& space);
  /// mix * q_buffer + (1 - mix) * q_random. The buffer part counts visits on
  /// discrete spaces and uses a truncated KDE on boxes. The random part is a
  /// KDE / Laplace-smoothed count over random_pool when given, else uniform.
  /// An empty buffer falls back to uniform with a warning.
  static NoiseDistribution replay_mixture(const Space& space, const std::vector<Vec>& buffer_states,
                                          const std::vector<Vec>& random_pool, double mix = 0.5);

  Kind kind() const { return kind_; }
  Vec sample(Rng& rng) const;
  double log_density(const Vec& x) const;
  std::vector<double> log_density_batch(const std::vector<Vec>& xs) const;
  double mix() const { return mix_; }

 private:
  struct Component {
    bool uniform = true;
    Vec counts;  // discrete probabilities
    TruncatedKde kde;
  };
  Vec sample_component(const Component& c, Rng& rng) const;
  std::vector<double> component_log_density(const Component& c, const std::vector<Vec>& xs) const;

  Kind kind_ = Kind::uniform;
  Space space_ = Space::discrete(1);
  BaseMeasure base_ = BaseMeasure::uniform_discrete(1);
  double mix_ = 0.5;
  Component buffer_, random_;
};

/// K fresh negatives per transition, with noise densities attached.
NceBatch build_batch(const std::vector<Transition>& data, const NoiseDistribution& noise, int K, Rng& rng);

struct NceConfig {
  enum class Objective { binary, ranking };
  Objective objective = Objective::ranking;
  int K = 16;
  double gamma_param = 0.0;
  double marginal_weight = 1.0;
  double mu_norm_weight = 1e-3;
  int batch_size = 256;
  int marginal_samples = 16;
  /// Exact expectation in the regularizers (discrete spaces only).
  bool stratified = false;
  double learning_rate = 3e-4;

  void validate() const;
};

std::string objective_name(NceConfig::Objective o);
NceConfig::Objective parse_objective(const std::string& s);

struct NceTraceRow {
  int step = 0;
  double loss = 0.0;
  double marginal_reg = 0.0;
  double mu_reg = 0.0;
};

struct NceTrainResult {
  std::vector<NceTraceRow> trace;
  double gamma_param = 0.0;
};

/// Minibatch descent on NCE loss + weighted regularizers. The optimizer state
/// is carried by the caller so retraining warm-starts the moments too. For the
/// binary objective gamma is optimized jointly and returned.
NceTrainResult train_representation(const std::vector<Transition>& data, LowRankModel& model,
                                    const NceConfig& config, const NoiseDistribution& noise,
                                    OptimizerState& optimizer, int steps, Rng& rng);

void write_nce_trace(const std::string& path, const std::vector<NceTraceRow>& trace);

}  // namespace ctrl
