#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "wadg/data.hpp"
#include "wadg/model.hpp"
#include "wadg/tape.hpp"

namespace wadg {

// ---------------------------------------------------------------------------
// Classification and Wasserstein terms

/// Mean over the batch of -log softmax(logits)[label].
Var classification_loss(Var logits, std::span<const int> labels);
double classification_loss(const Tensor& logits, std::span<const int> labels);

/// mean(scores_i) - mean(scores_j), signed.
Var pairwise_w1_estimate(Var scores_i, Var scores_j);
double pairwise_w1_estimate(const Tensor& scores_i, const Tensor& scores_j);

/// Critics bound to a tape, in the same slot order as ModelBundle::critics.
struct CriticVars {
  std::vector<MlpVars> heads;
  CriticMode mode = CriticMode::PerPair;

  const MlpVars& for_pair(std::size_t pair_id) const;
};

CriticVars bind_critics(Tape& tape, const ModelBundle& bundle, bool trainable);

/// Sum over unordered domain pairs i < j of the (i, j) critic's W1 estimate.
/// In shared mode every pair uses the one critic.
Var adversarial_loss(const CriticVars& critics, std::span<const Var> features_per_domain);
double adversarial_loss(const ModelBundle& bundle, std::span<const Tensor> features_per_domain);

/// mean_k (||grad D(t_k x_i[k] + (1 - t_k) x_j[k])|| - 1)^2 over the first
/// min(N_i, N_j) rows. Differentiable with respect to the critic parameters.
Var gradient_penalty(const MlpVars& critic, const Tensor& features_i, const Tensor& features_j,
                     std::span<const double> mix);
Var gradient_penalty(const MlpVars& critic, const Tensor& features_i, const Tensor& features_j, std::mt19937_64& rng);
double gradient_penalty(const ModelBundle& bundle, const Tensor& features_i, const Tensor& features_j,
                        std::optional<std::size_t> pair_id, std::span<const double> mix);

// ---------------------------------------------------------------------------
// Multi-similarity metric learning

struct MsHyperParams {
  double lambda_center = 0.5;
  double epsilon = 1e-5;
  double alpha = 2.0;
  double beta = 40.0;

  void validate() const;
};

/// Which threshold the positive mining condition compares against.
enum class PositiveRule {
  MaxNegative,  // S_ij <= max_{y_k != y_i} S_ik + eps
  LiteralMin,   // S_ij <= min_{y_k != y_i} S_ik + eps
};

struct SimilarityMatrix {
  Tensor S;  // [N x N]
  std::vector<int> labels;
  std::vector<std::size_t> domain_ids;

  std::size_t size() const { return labels.size(); }
};

/// S = E E^T for L2-normalized rows; throws if a row norm is off by > 1e-6.
SimilarityMatrix similarity_matrix(const Tensor& embeddings, std::vector<int> labels,
                                   std::vector<std::size_t> domain_ids = {});
Var similarity(Var embeddings);

struct MinedPairs {
  std::vector<std::vector<std::size_t>> positives;  // P_i per anchor
  std::vector<std::vector<std::size_t>> negatives;  // N_i per anchor

  std::size_t num_pairs() const;
  std::size_t active_anchors() const;
  friend bool operator==(const MinedPairs&, const MinedPairs&) = default;
};

/// For anchor i with both same-class (k != i) and other-class candidates:
/// negative j kept iff S_ij >= min_{same} S_ik - eps, positive j kept iff
/// S_ij <= max_{other} S_ik + eps (or min under PositiveRule::LiteralMin).
/// Anchors lacking either candidate kind get two empty sets.
MinedPairs mine_pairs(const Tensor& S, std::span<const int> labels, const MsHyperParams& params,
                      PositiveRule rule = PositiveRule::MaxNegative);

/// exp(beta (S_ij - lambda)) / (1 + sum_{k in N_i} exp(beta (S_ik - lambda))).
double negative_pair_weight(const Tensor& S, std::size_t i, std::size_t j, std::span<const std::size_t> negatives,
                            const MsHyperParams& params);
/// 1 / (exp(alpha (S_ij - lambda)) + sum_{k in P_i} exp(-alpha (S_ik - S_ij))), k = j included.
double positive_pair_weight(const Tensor& S, std::size_t i, std::size_t j, std::span<const std::size_t> positives,
                            const MsHyperParams& params);

struct MsLossValue {
  double value = 0.0;
  std::size_t active_anchors = 0;  // anchors with at least one mined pair
  bool no_valid_anchors = false;   // value defined as 0
};

MsLossValue multi_similarity_loss(const Tensor& S, const MinedPairs& mined, const MsHyperParams& params);
Var multi_similarity_loss(Var S, const MinedPairs& mined, const MsHyperParams& params);

/// 2 / (1 + exp(-delta p)) - 1.
double lambda_d_schedule(double progress, double delta = 10.0);

// ---------------------------------------------------------------------------
// Full objective

struct ObjectiveConfig {
  double lambda_d = 0.0;
  double lambda_s = 0.0;
  double gp_coefficient = 10.0;
  bool adversarial_active = true;  // false skips the L_D term entirely
  bool metric_active = true;       // false skips the L_MS term entirely
  bool build_critic_scalar = true;
  MsHyperParams ms;
  PositiveRule positive_rule = PositiveRule::MaxNegative;
};

struct LossBreakdown {
  double classification = 0.0;
  std::optional<double> adversarial;  // L_D; empty when inactive or < 2 domains
  std::optional<double> metric;       // L_MS; empty when inactive
  std::optional<double> penalty;      // summed over critic pairs
  std::size_t active_anchors = 0;
  bool single_domain_warning = false;
  bool no_anchor_warning = false;
};

struct BundleVars {
  std::size_t embed_layer = 2;
  MlpVars extractor;
  MlpVars classifier;
  CriticVars critics;
};

BundleVars bind_bundle(Tape& tape, const ModelBundle& bundle, bool train_extractor_classifier, bool train_critics);

struct Objective {
  Var min_scalar;                   // L_C + lambda_d L_D + lambda_s L_MS
  std::optional<Var> critic_scalar; // L_D - gp * penalty, to be ascended
  LossBreakdown breakdown;
};

/// Builds both scalars of the min-max objective on `tape`. The critic scalar
/// sees the features as constants, so its gradient flows to theta_d only.
/// Pass `rng` to add the gradient penalty; without it the critic scalar is L_D.
Objective total_objective(Tape& tape, const BundleVars& vars, const MixedBatch& batch, const ObjectiveConfig& config,
                          std::mt19937_64* rng);

/// Critic-step scalar from fixed per-domain features: L_D - gp * sum of penalties.
struct CriticObjective {
  Var value;
  double adversarial = 0.0;
  double penalty = 0.0;
};
CriticObjective critic_objective(Tape& tape, const CriticVars& critics, std::span<const Tensor> features_per_domain,
                                 double gp_coefficient, std::mt19937_64* rng);

}  // namespace wadg
