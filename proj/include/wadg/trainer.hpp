#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "wadg/data.hpp"
#include "wadg/losses.hpp"
#include "wadg/model.hpp"

namespace wadg {

enum class AblationMode { DeepAll, NoLD, NoLMS, WadgAll };

std::string to_string(AblationMode mode);  // deep-all, no-ld, no-lms, wadg-all
AblationMode ablation_mode_from_string(const std::string& s);
bool uses_adversarial(AblationMode mode);
bool uses_metric(AblationMode mode);
inline constexpr AblationMode kAllAblationModes[] = {AblationMode::DeepAll, AblationMode::NoLD, AblationMode::NoLMS,
                                                     AblationMode::WadgAll};

enum class LipschitzMode { GradientPenalty, WeightClipping };
std::string to_string(LipschitzMode mode);
LipschitzMode lipschitz_mode_from_string(const std::string& s);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  double learning_rate = 5e-4;
  double critic_learning_rate = 5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t epochs = 100;
  std::size_t batch_per_domain = 20;
  double lambda_s = 0.1;
  double delta = 10.0;
  std::size_t critic_steps = 5;
  LipschitzMode lipschitz = LipschitzMode::GradientPenalty;
  double gp_coefficient = 10.0;
  double clip_value = 0.01;
  MsHyperParams ms;
  PositiveRule positive_rule = PositiveRule::MaxNegative;
  AblationMode mode = AblationMode::WadgAll;
  CriticMode critic_mode = CriticMode::PerPair;
  std::uint64_t seed = 0;
  std::size_t patience = 20;
  double validation_fraction = 0.1;
  std::vector<std::size_t> extractor_hidden{64, 64};
  std::size_t feature_dim = 32;
  std::vector<std::size_t> classifier_hidden{32, 32};
  std::vector<std::size_t> critic_hidden{64, 64};
  std::size_t embed_layer = 2;

  void validate() const;
  BundleSpec bundle_spec(std::size_t n_inputs, std::size_t num_classes, std::size_t num_sources) const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Keys absent from `j` keep their value in `base`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct AdamConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction over all tensors of one Mlp.
class Adam {
 public:
  Adam(const Mlp& like, AdamConfig config);
  /// direction +1 descends along the gradient, -1 ascends.
  void step(Mlp& params, const Mlp& grads, double direction = 1.0);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  Mlp m_, v_;
  std::size_t t_ = 0;
};

struct MetricsRecord {
  std::size_t epoch = 0;
  double loss_c = 0.0;
  std::optional<double> loss_d;   // empty: term inactive
  std::optional<double> loss_ms;  // empty: term inactive
  std::optional<double> penalty;  // empty: no critic steps taken
  double source_val_acc = 0.0;
  std::optional<double> target_acc;
  double lambda_d = 0.0;
  double wall_seconds = 0.0;

  /// Equality over every field except wall_seconds.
  bool same_run_values(const MetricsRecord& other) const;
};

nlohmann::json to_json(const MetricsRecord& r);
MetricsRecord metrics_record_from_json(const nlohmann::json& j);
void write_metrics_jsonl(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_jsonl(const std::filesystem::path& path);

struct CriticStepResult {
  bool ran = false;
  double adversarial = 0.0;
  double penalty = 0.0;
};

/// One training run's mutable state: parameters, optimizer moments, RNG.
class Trainer {
 public:
  Trainer(ModelBundle bundle, TrainConfig config);

  /// Adam ascent on L_D - gp * penalty over theta_d only. Skipped in modes
  /// without the adversarial term and for batches with fewer than 2 domains.
  CriticStepResult critic_step(const MixedBatch& batch);

  /// Adam descent on L_C + lambda_d L_D + lambda_s L_MS over theta_f and
  /// theta_c with lambda_d = lambda_d_schedule(progress).
  LossBreakdown joint_step(const MixedBatch& batch, double progress);

  double lambda_d_at(double progress) const;
  const ModelBundle& bundle() const { return bundle_; }
  ModelBundle& bundle() { return bundle_; }
  const TrainConfig& config() const { return config_; }

 private:
  ModelBundle bundle_;
  TrainConfig config_;
  Adam adam_f_, adam_c_;
  std::vector<Adam> adam_d_;
  std::mt19937_64 gp_rng_;
};

/// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
double evaluate_accuracy(const ModelBundle& bundle, const DomainDataset& data);

struct TrainResult {
  ModelBundle final_bundle;
  ModelBundle best_bundle;
  std::vector<MetricsRecord> records;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  bool early_stopped = false;
  std::optional<double> final_target_acc;
  std::optional<double> best_target_acc;
};

using EpochCallback = std::function<void(const MetricsRecord&)>;

/// Runs Algorithm-1 style alternation over epochs: per batch, critic_steps
/// critic ascents then one joint descent. A validation_fraction of every
/// source is held out for early stopping; `target` (if given) is only
/// evaluated for reporting and never influences training.
TrainResult train(const std::vector<DomainDataset>& sources, const TrainConfig& config,
                  const DomainDataset* target = nullptr, const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationOptions {
  std::size_t n_seeds = 3;
  std::vector<std::string> targets;  // empty: every domain
  std::vector<AblationMode> modes{std::begin(kAllAblationModes), std::end(kAllAblationModes)};
  std::filesystem::path out_dir;     // empty: nothing persisted
  std::optional<std::size_t> max_new_runs;  // stop after this many new runs
  std::size_t threads = 1;
};

struct AblationCell {
  std::string target;
  AblationMode mode = AblationMode::WadgAll;
  double mean_acc = 0.0;
  double sd_acc = 0.0;  // sample standard deviation, 0 for one seed
  std::size_t n_seeds = 0;
};

struct AblationRun {
  std::string target;
  AblationMode mode = AblationMode::WadgAll;
  std::uint64_t seed = 0;
  double target_acc = 0.0;       // final model
  double best_target_acc = 0.0;  // best source-validation checkpoint
  double source_val_acc = 0.0;
  std::size_t epochs_run = 0;
};

struct AblationResult {
  std::vector<AblationCell> grid;
  std::vector<AblationRun> runs;
  std::size_t runs_executed = 0;
  std::size_t runs_skipped = 0;
  bool complete = false;
};

/// Trains every (target, mode, seed) cell with seeds base.seed + s, s < n_seeds.
/// With an out_dir, each finished run is appended to runs.jsonl (and skipped
/// when found there on a later call) and grid.csv is rewritten after every run.
AblationResult run_ablation_suite(const std::vector<DomainDataset>& datasets, const TrainConfig& base,
                                  const AblationOptions& options);

std::vector<AblationCell> summarize_runs(const std::vector<AblationRun>& runs, const std::vector<std::string>& targets,
                                         const std::vector<AblationMode>& modes);
void write_grid_csv(const std::filesystem::path& path, const std::vector<AblationCell>& grid);

/// CSV with columns domain_id,label,e0..e{d-1}: classifier embeddings of every row.
void dump_embeddings(const ModelBundle& bundle, const std::vector<DomainDataset>& datasets,
                     const std::filesystem::path& path);

}  // namespace wadg
