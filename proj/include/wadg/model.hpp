#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wadg/tape.hpp"
#include "wadg/tensor.hpp"

namespace wadg {

enum class Activation { Relu };

struct MlpSpec {
  std::vector<std::size_t> layer_widths;  // input first, output last
  Activation activation = Activation::Relu;

  void validate() const;
  std::size_t num_layers() const { return layer_widths.size() - 1; }
  std::size_t input_width() const { return layer_widths.front(); }
  std::size_t output_width() const { return layer_widths.back(); }
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

/// Fully connected network: hidden layers use the spec's activation, the
/// last layer is linear.
struct Mlp {
  MlpSpec spec;
  std::vector<Linear> layers;

  void check_consistent() const;
  std::size_t parameter_count() const;
  friend bool operator==(const Mlp& a, const Mlp& b) { return a.layers_equal(b); }

 private:
  bool layers_equal(const Mlp& other) const;
};

/// Weights ~ N(0, 1/fan_in), biases zero; deterministic in (spec, seed).
Mlp init_params(const MlpSpec& spec, std::uint64_t seed);

/// Same shape as `like`, every entry zero.
Mlp zeros_like(const Mlp& like);

/// An Mlp whose parameters live on a tape as leaves.
struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

MlpVars bind(Tape& tape, const Mlp& mlp, bool trainable);

struct MlpTrace {
  Var output;
  std::vector<Var> pre_activations;  // one per layer
  std::vector<Var> hidden;           // post-activation output of each hidden layer
};

MlpTrace mlp_forward(const MlpVars& vars, Var x);

/// Reads the gradients of the bound parameters after Tape::backward().
Mlp collect_grads(const Tape& tape, const MlpVars& vars, const Mlp& like);

// ---------------------------------------------------------------------------
// The three networks

enum class CriticMode {
  PerPair,  // one scalar critic per unordered source-domain pair
  Shared,   // one critic for all pairs, the literal pairwise sum
};

std::string to_string(CriticMode mode);
CriticMode critic_mode_from_string(const std::string& s);

/// Number of unordered pairs among m domains.
std::size_t pair_count(std::size_t num_domains);
/// Index of the unordered pair (i, j), i < j, in row-major upper-triangle order.
std::size_t pair_index(std::size_t i, std::size_t j, std::size_t num_domains);

struct BundleSpec {
  MlpSpec extractor;
  MlpSpec classifier;
  MlpSpec critic;
  std::size_t embed_layer = 2;
  CriticMode critic_mode = CriticMode::PerPair;
  std::size_t num_domains = 2;

  void validate() const;
};

/// Desk-scale widths: n-64-64-32 extractor, 32-32-32-K classifier tapped at
/// its second layer, 32-64-64-1 critics.
BundleSpec default_bundle_spec(std::size_t n_inputs, std::size_t num_classes, std::size_t num_domains);

struct ModelBundle {
  Mlp extractor;             // theta_f
  Mlp classifier;            // theta_c
  std::vector<Mlp> critics;  // theta_d, one per pair or a single shared one
  std::size_t embed_layer = 2;
  CriticMode critic_mode = CriticMode::PerPair;
  std::size_t num_domains = 2;

  void validate() const;
  const Mlp& critic_for(std::optional<std::size_t> pair_id) const;
  std::size_t critic_slot(std::optional<std::size_t> pair_id) const;

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

/// Initializes all networks from one seed (components "init.extractor",
/// "init.classifier", "init.critic.<k>").
ModelBundle make_bundle(const BundleSpec& spec, std::uint64_t seed);

// Traced forwards.
Var forward_features(const MlpVars& theta_f, Var x);

struct ClassifierOutput {
  Var logits;
  Var embeddings;  // embed_layer activation, rows L2-normalized
};
ClassifierOutput forward_logits(const MlpVars& theta_c, std::size_t embed_layer, Var z);
Var forward_critic(const MlpVars& critic, Var z);

/// Row-wise gradient of a scalar-output critic with respect to its input,
/// built from traced operations so it can itself be differentiated with
/// respect to the critic parameters. ReLU masks are held constant.
Var critic_input_gradient(const MlpVars& critic, Var z);

// Untraced forwards: pure functions of their arguments.
Tensor forward_features(const Mlp& theta_f, const Tensor& x);
struct ClassifierValues {
  Tensor logits;
  Tensor embeddings;
};
ClassifierValues forward_logits(const Mlp& theta_c, std::size_t embed_layer, const Tensor& z);
Tensor forward_critic(const ModelBundle& bundle, const Tensor& z, std::optional<std::size_t> pair_id);

// ---------------------------------------------------------------------------
// Checkpoints

/// JSON document: {"format": "wadg-checkpoint/1", "embed_layer", "critic_mode",
/// "num_domains", "specs": {name: widths}, "tensors": {name: {"shape", "data"}}}.
/// Tensor names are "<net>.<layer>.weight|bias" with net in extractor,
/// classifier, critic<k>. Doubles are written in shortest round-trip form.
void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace wadg
