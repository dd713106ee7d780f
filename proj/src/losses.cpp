#include "wadg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace wadg {

Var classification_loss(Var logits, std::span<const int> labels) {
  const Tensor& v = logits.value();
  if (v.rank() != 2) throw ShapeError("logits must be a matrix, got " + shape_str(v.shape()));
  const std::size_t batch = v.rows(), classes = v.cols();
  if (batch == 0) throw std::invalid_argument("classification loss on an empty batch");
  if (labels.size() != batch)
    throw ShapeError("logits " + shape_str(v.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  std::vector<std::size_t> picks(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    picks[i] = i * classes + static_cast<std::size_t>(labels[i]);
  }
  return mean(sub(log_sum_exp_rows(logits), gather(logits, picks)));
}

double classification_loss(const Tensor& logits, std::span<const int> labels) {
  Tape tape(false);
  return classification_loss(tape.constant(logits), labels).value().item();
}

Var pairwise_w1_estimate(Var scores_i, Var scores_j) {
  if (scores_i.value().empty() || scores_j.value().empty())
    throw std::invalid_argument("W1 estimate needs two non-empty score batches");
  return sub(mean(scores_i), mean(scores_j));
}

double pairwise_w1_estimate(const Tensor& scores_i, const Tensor& scores_j) {
  Tape tape(false);
  return pairwise_w1_estimate(tape.constant(scores_i), tape.constant(scores_j)).value().item();
}

const MlpVars& CriticVars::for_pair(std::size_t pair_id) const {
  if (mode == CriticMode::Shared) return heads.at(0);
  if (pair_id >= heads.size())
    throw std::out_of_range("pair id " + std::to_string(pair_id) + " out of range (" + std::to_string(heads.size()) +
                            " critics)");
  return heads[pair_id];
}

CriticVars bind_critics(Tape& tape, const ModelBundle& bundle, bool trainable) {
  CriticVars cv;
  cv.mode = bundle.critic_mode;
  for (const auto& c : bundle.critics) cv.heads.push_back(bind(tape, c, trainable));
  return cv;
}

Var adversarial_loss(const CriticVars& critics, std::span<const Var> features_per_domain) {
  const std::size_t m = features_per_domain.size();
  if (m < 2) throw std::invalid_argument("adversarial loss needs at least 2 domains, got " + std::to_string(m));
  if (critics.mode == CriticMode::PerPair && critics.heads.size() != pair_count(m))
    throw std::invalid_argument(std::to_string(critics.heads.size()) + " critic heads for " + std::to_string(m) +
                                " domains");
  std::optional<Var> total;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const MlpVars& head = critics.for_pair(pair_index(i, j, m));
      Var est = pairwise_w1_estimate(forward_critic(head, features_per_domain[i]),
                                     forward_critic(head, features_per_domain[j]));
      total = total ? add(*total, est) : est;
    }
  }
  return *total;
}

double adversarial_loss(const ModelBundle& bundle, std::span<const Tensor> features_per_domain) {
  Tape tape(false);
  CriticVars cv = bind_critics(tape, bundle, false);
  std::vector<Var> feats;
  for (const auto& f : features_per_domain) feats.push_back(tape.constant(f));
  return adversarial_loss(cv, feats).value().item();
}

Var gradient_penalty(const MlpVars& critic, const Tensor& features_i, const Tensor& features_j,
                     std::span<const double> mix) {
  if (features_i.rank() != 2 || features_j.rank() != 2 || features_i.cols() != features_j.cols())
    throw ShapeError("gradient penalty feature batches " + shape_str(features_i.shape()) + " vs " +
                     shape_str(features_j.shape()));
  const std::size_t n = std::min(features_i.rows(), features_j.rows());
  if (n == 0) throw std::invalid_argument("gradient penalty needs non-empty batches");
  if (mix.size() < n) throw std::invalid_argument("not enough interpolation coefficients");
  const std::size_t d = features_i.cols();
  Tensor xhat(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c)
      xhat.at(r, c) = mix[r] * features_i.at(r, c) + (1.0 - mix[r]) * features_j.at(r, c);
  Tape& tape = *critic.weights.front().tape;
  Var g = critic_input_gradient(critic, tape.constant(std::move(xhat)));
  Var dev = add_scalar(sqrt(sum_rows(mul(g, g))), -1.0);
  return mean(mul(dev, dev));
}

Var gradient_penalty(const MlpVars& critic, const Tensor& features_i, const Tensor& features_j,
                     std::mt19937_64& rng) {
  const std::size_t n = std::min(features_i.rows(), features_j.rows());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> mix(n);
  for (double& t : mix) t = unit(rng);
  return gradient_penalty(critic, features_i, features_j, mix);
}

double gradient_penalty(const ModelBundle& bundle, const Tensor& features_i, const Tensor& features_j,
                        std::optional<std::size_t> pair_id, std::span<const double> mix) {
  Tape tape(false);
  MlpVars critic = bind(tape, bundle.critic_for(pair_id), false);
  return gradient_penalty(critic, features_i, features_j, mix).value().item();
}

// ---------------------------------------------------------------------------

void MsHyperParams::validate() const {
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be > 0");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be >= 0");
  if (!(lambda_center >= -1.0 && lambda_center <= 1.0)) throw std::invalid_argument("lambda must lie in [-1, 1]");
}

SimilarityMatrix similarity_matrix(const Tensor& embeddings, std::vector<int> labels,
                                   std::vector<std::size_t> domain_ids) {
  if (embeddings.rank() != 2) throw ShapeError("embeddings must be a matrix");
  if (labels.size() != embeddings.rows())
    throw ShapeError("embeddings " + shape_str(embeddings.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    double ss = 0.0;
    for (double v : embeddings.row(i)) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-6)
      throw std::invalid_argument("embedding row " + std::to_string(i) + " is not L2-normalized (norm " +
                                  std::to_string(std::sqrt(ss)) + ")");
  }
  return SimilarityMatrix{kernels::matmul(embeddings, kernels::transpose(embeddings)), std::move(labels),
                          std::move(domain_ids)};
}

Var similarity(Var embeddings) { return matmul(embeddings, transpose(embeddings)); }

std::size_t MinedPairs::num_pairs() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < positives.size(); ++i) n += positives[i].size() + negatives[i].size();
  return n;
}

std::size_t MinedPairs::active_anchors() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < positives.size(); ++i) n += (!positives[i].empty() || !negatives[i].empty()) ? 1 : 0;
  return n;
}

MinedPairs mine_pairs(const Tensor& S, std::span<const int> labels, const MsHyperParams& params, PositiveRule rule) {
  const std::size_t n = labels.size();
  if (S.rank() != 2 || S.rows() != n || S.cols() != n)
    throw ShapeError("similarity " + shape_str(S.shape()) + " vs " + std::to_string(n) + " labels");
  MinedPairs mined;
  mined.positives.resize(n);
  mined.negatives.resize(n);
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double min_same = inf, min_other = inf, max_other = -inf;
    bool has_same = false, has_other = false;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      const double s = S.at(i, k);
      if (labels[k] == labels[i]) {
        has_same = true;
        min_same = std::min(min_same, s);
      } else {
        has_other = true;
        min_other = std::min(min_other, s);
        max_other = std::max(max_other, s);
      }
    }
    if (!has_same || !has_other) continue;
    const double neg_threshold = min_same - params.epsilon;
    const double pos_threshold = (rule == PositiveRule::MaxNegative ? max_other : min_other) + params.epsilon;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      const double s = S.at(i, k);
      if (labels[k] == labels[i]) {
        if (s <= pos_threshold) mined.positives[i].push_back(k);
      } else if (s >= neg_threshold) {
        mined.negatives[i].push_back(k);
      }
    }
  }
  return mined;
}

namespace {

void require_member(std::span<const std::size_t> set, std::size_t j, const char* what) {
  if (std::find(set.begin(), set.end(), j) == set.end())
    throw std::invalid_argument(std::string("index ") + std::to_string(j) + " is not in the " + what + " set");
}

}  // namespace

double negative_pair_weight(const Tensor& S, std::size_t i, std::size_t j, std::span<const std::size_t> negatives,
                            const MsHyperParams& params) {
  require_member(negatives, j, "negative");
  std::vector<double> terms{0.0};
  for (auto k : negatives) terms.push_back(params.beta * (S.at(i, k) - params.lambda_center));
  return std::exp(params.beta * (S.at(i, j) - params.lambda_center) - kernels::log_sum_exp(terms));
}

double positive_pair_weight(const Tensor& S, std::size_t i, std::size_t j, std::span<const std::size_t> positives,
                            const MsHyperParams& params) {
  require_member(positives, j, "positive");
  const double sij = S.at(i, j);
  std::vector<double> terms{params.alpha * (sij - params.lambda_center)};
  for (auto k : positives) terms.push_back(-params.alpha * (S.at(i, k) - sij));
  return std::exp(-kernels::log_sum_exp(terms));
}

MsLossValue multi_similarity_loss(const Tensor& S, const MinedPairs& mined, const MsHyperParams& params) {
  Tape tape(false);
  const double v = multi_similarity_loss(tape.constant(S), mined, params).value().item();
  const std::size_t active = mined.active_anchors();
  return MsLossValue{v, active, active == 0};
}

Var multi_similarity_loss(Var S, const MinedPairs& mined, const MsHyperParams& params) {
  params.validate();
  Tape& tape = *S.tape;
  const std::size_t n = S.value().rows();
  if (mined.positives.size() > n || mined.negatives.size() != mined.positives.size())
    throw ShapeError("mined pairs do not match the similarity matrix");
  std::optional<Var> total;
  std::size_t active = 0;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mined.positives.size(); ++i) {
    const auto& pos = mined.positives[i];
    const auto& neg = mined.negatives[i];
    if (pos.empty() && neg.empty()) continue;
    ++active;
    if (!pos.empty()) {
      idx.clear();
      for (auto k : pos) idx.push_back(i * n + k);
      Var arg = scale(add_scalar(gather(S, idx), -params.lambda_center), -params.alpha);
      Var term = scale(log1p_sum_exp(arg), 1.0 / params.alpha);
      total = total ? add(*total, term) : term;
    }
    if (!neg.empty()) {
      idx.clear();
      for (auto k : neg) idx.push_back(i * n + k);
      Var arg = scale(add_scalar(gather(S, idx), -params.lambda_center), params.beta);
      Var term = scale(log1p_sum_exp(arg), 1.0 / params.beta);
      total = total ? add(*total, term) : term;
    }
  }
  if (!total) return tape.constant(Tensor::scalar(0.0));
  return scale(*total, 1.0 / static_cast<double>(active));
}

double lambda_d_schedule(double progress, double delta) {
  if (!(progress >= 0.0 && progress <= 1.0)) throw std::invalid_argument("training progress must lie in [0, 1]");
  return 2.0 / (1.0 + std::exp(-delta * progress)) - 1.0;
}

// ---------------------------------------------------------------------------

BundleVars bind_bundle(Tape& tape, const ModelBundle& bundle, bool train_extractor_classifier, bool train_critics) {
  BundleVars v;
  v.embed_layer = bundle.embed_layer;
  v.extractor = bind(tape, bundle.extractor, train_extractor_classifier);
  v.classifier = bind(tape, bundle.classifier, train_extractor_classifier);
  v.critics = bind_critics(tape, bundle, train_critics);
  return v;
}

CriticObjective critic_objective(Tape& tape, const CriticVars& critics, std::span<const Tensor> features_per_domain,
                                 double gp_coefficient, std::mt19937_64* rng) {
  const std::size_t m = features_per_domain.size();
  std::vector<Var> feats;
  for (const auto& f : features_per_domain) feats.push_back(tape.constant(f));
  Var ld = adversarial_loss(critics, feats);
  CriticObjective out{ld, ld.value().item(), 0.0};
  if (rng == nullptr || gp_coefficient == 0.0) return out;
  std::optional<Var> pen;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      Var p = gradient_penalty(critics.for_pair(pair_index(i, j, m)), features_per_domain[i], features_per_domain[j],
                               *rng);
      pen = pen ? add(*pen, p) : p;
    }
  out.penalty = pen->value().item();
  out.value = sub(ld, scale(*pen, gp_coefficient));
  return out;
}

Objective total_objective(Tape& tape, const BundleVars& vars, const MixedBatch& batch, const ObjectiveConfig& config,
                          std::mt19937_64* rng) {
  Var x = tape.constant(batch.features);
  Var z = forward_features(vars.extractor, x);
  ClassifierOutput out = forward_logits(vars.classifier, vars.embed_layer, z);
  Var lc = classification_loss(out.logits, batch.labels);

  Objective obj{lc, std::nullopt, {}};
  obj.breakdown.classification = lc.value().item();
  Var total = lc;

  if (config.adversarial_active) {
    std::vector<std::vector<std::size_t>> rows;
    for (std::size_t d = 0; d < batch.num_domains; ++d) {
      auto r = batch.rows_of(d);
      if (!r.empty()) rows.push_back(std::move(r));
    }
    if (rows.size() < 2 || rows.size() != batch.num_domains) {
      obj.breakdown.single_domain_warning = true;
    } else {
      std::vector<Var> feats;
      std::vector<Tensor> feat_values;
      for (const auto& r : rows) {
        feats.push_back(select_rows(z, r));
        feat_values.push_back(feats.back().value());
      }
      Var ld = adversarial_loss(vars.critics, feats);
      obj.breakdown.adversarial = ld.value().item();
      if (config.lambda_d != 0.0) total = add(total, scale(ld, config.lambda_d));
      if (config.build_critic_scalar) {
        CriticObjective co = critic_objective(tape, vars.critics, feat_values, config.gp_coefficient, rng);
        obj.critic_scalar = co.value;
        if (rng != nullptr && config.gp_coefficient != 0.0) obj.breakdown.penalty = co.penalty;
      }
    }
  }

  if (config.metric_active) {
    Var s = similarity(out.embeddings);
    MinedPairs mined = mine_pairs(s.value(), batch.labels, config.ms, config.positive_rule);
    Var lms = multi_similarity_loss(s, mined, config.ms);
    obj.breakdown.metric = lms.value().item();
    obj.breakdown.active_anchors = mined.active_anchors();
    obj.breakdown.no_anchor_warning = obj.breakdown.active_anchors == 0;
    if (config.lambda_s != 0.0) total = add(total, scale(lms, config.lambda_s));
  }

  obj.min_scalar = total;
  return obj;
}

}  // namespace wadg
