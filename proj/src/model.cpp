#include "wadg/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"

#include "wadg/seeds.hpp"

namespace wadg {

void MlpSpec::validate() const {
  if (layer_widths.size() < 2) throw std::invalid_argument("MLP needs at least 2 widths");
  for (auto w : layer_widths)
    if (w < 1) throw std::invalid_argument("MLP widths must be >= 1");
}

void Mlp::check_consistent() const {
  spec.validate();
  if (layers.size() != spec.num_layers())
    throw ShapeError("MLP has " + std::to_string(layers.size()) + " layers, spec wants " +
                     std::to_string(spec.num_layers()));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Shape w{spec.layer_widths[l], spec.layer_widths[l + 1]};
    const Shape b{spec.layer_widths[l + 1]};
    if (layers[l].weight.shape() != w || layers[l].bias.shape() != b)
      throw ShapeError("layer " + std::to_string(l) + " has weight " + shape_str(layers[l].weight.shape()) +
                       " bias " + shape_str(layers[l].bias.shape()) + ", expected " + shape_str(w) + " " +
                       shape_str(b));
  }
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

bool Mlp::layers_equal(const Mlp& other) const {
  if (spec.layer_widths != other.spec.layer_widths || layers.size() != other.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l)
    if (layers[l].weight != other.layers[l].weight || layers[l].bias != other.layers[l].bias) return false;
  return true;
}

Mlp init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Mlp mlp{spec, {}};
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    Tensor w(Shape{in, out});
    for (double& v : w.data()) v = dist(rng);
    mlp.layers.push_back(Linear{std::move(w), Tensor(Shape{out}, 0.0)});
  }
  return mlp;
}

Mlp zeros_like(const Mlp& like) {
  Mlp z{like.spec, {}};
  for (const auto& l : like.layers) z.layers.push_back(Linear{Tensor(l.weight.shape()), Tensor(l.bias.shape())});
  return z;
}

MlpVars bind(Tape& tape, const Mlp& mlp, bool trainable) {
  MlpVars vars;
  for (const auto& l : mlp.layers) {
    vars.weights.push_back(tape.leaf(l.weight, trainable));
    vars.biases.push_back(tape.leaf(l.bias, trainable));
  }
  return vars;
}

MlpTrace mlp_forward(const MlpVars& vars, Var x) {
  if (vars.weights.empty()) throw std::invalid_argument("forward through an empty MLP");
  const auto& w0 = vars.weights.front().shape();
  if (x.shape().size() != 2 || x.shape()[1] != w0[0])
    throw ShapeError("MLP input " + shape_str(x.shape()) + " does not match first layer " + shape_str(w0));
  MlpTrace trace;
  Var h = x;
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    Var pre = add_row(matmul(h, vars.weights[l]), vars.biases[l]);
    trace.pre_activations.push_back(pre);
    if (l + 1 < vars.weights.size()) {
      h = relu(pre);
      trace.hidden.push_back(h);
    } else {
      trace.output = pre;
    }
  }
  return trace;
}

Mlp collect_grads(const Tape& tape, const MlpVars& vars, const Mlp& like) {
  Mlp g{like.spec, {}};
  for (std::size_t l = 0; l < vars.weights.size(); ++l)
    g.layers.push_back(Linear{tape.grad(vars.weights[l]), tape.grad(vars.biases[l])});
  return g;
}

std::string to_string(CriticMode mode) { return mode == CriticMode::PerPair ? "per-pair" : "shared"; }

CriticMode critic_mode_from_string(const std::string& s) {
  if (s == "per-pair") return CriticMode::PerPair;
  if (s == "shared") return CriticMode::Shared;
  throw std::invalid_argument("unknown critic mode '" + s + "' (expected per-pair or shared)");
}

std::size_t pair_count(std::size_t num_domains) { return num_domains * (num_domains - (num_domains > 0)) / 2; }

std::size_t pair_index(std::size_t i, std::size_t j, std::size_t num_domains) {
  if (!(i < j && j < num_domains))
    throw std::out_of_range("invalid domain pair (" + std::to_string(i) + ", " + std::to_string(j) + ") for " +
                            std::to_string(num_domains) + " domains");
  // Pairs before row i: sum_{r<i} (m - 1 - r).
  return i * (2 * num_domains - i - 1) / 2 + (j - i - 1);
}

void BundleSpec::validate() const {
  extractor.validate();
  classifier.validate();
  critic.validate();
  if (classifier.input_width() != extractor.output_width())
    throw ShapeError("classifier input width does not match extractor output width");
  if (critic.input_width() != extractor.output_width())
    throw ShapeError("critic input width does not match extractor output width");
  if (critic.output_width() != 1) throw ShapeError("critic must have a scalar output");
  if (embed_layer < 1 || embed_layer >= classifier.num_layers())
    throw std::invalid_argument("embed_layer " + std::to_string(embed_layer) + " is not a hidden layer of the classifier");
}

BundleSpec default_bundle_spec(std::size_t n_inputs, std::size_t num_classes, std::size_t num_domains) {
  BundleSpec s;
  s.extractor = MlpSpec{{n_inputs, 64, 64, 32}};
  s.classifier = MlpSpec{{32, 32, 32, num_classes}};
  s.critic = MlpSpec{{32, 64, 64, 1}};
  s.embed_layer = 2;
  s.critic_mode = CriticMode::PerPair;
  s.num_domains = num_domains;
  return s;
}

void ModelBundle::validate() const {
  extractor.check_consistent();
  classifier.check_consistent();
  if (classifier.spec.input_width() != extractor.spec.output_width())
    throw ShapeError("classifier input width does not match extractor output width");
  if (embed_layer < 1 || embed_layer >= classifier.spec.num_layers())
    throw std::invalid_argument("embed_layer " + std::to_string(embed_layer) + " is not a hidden layer of the classifier");
  const std::size_t want = critic_mode == CriticMode::PerPair ? pair_count(num_domains) : 1;
  if (critics.size() != want)
    throw std::invalid_argument("bundle has " + std::to_string(critics.size()) + " critics, expected " +
                                std::to_string(want));
  for (const auto& c : critics) {
    c.check_consistent();
    if (c.spec.input_width() != extractor.spec.output_width() || c.spec.output_width() != 1)
      throw ShapeError("critic shape does not match extractor output / scalar score");
  }
}

std::size_t ModelBundle::critic_slot(std::optional<std::size_t> pair_id) const {
  if (critic_mode == CriticMode::Shared) return 0;
  if (!pair_id) throw std::invalid_argument("per-pair critic mode requires a pair id");
  if (*pair_id >= critics.size())
    throw std::out_of_range("pair id " + std::to_string(*pair_id) + " out of range (" +
                            std::to_string(critics.size()) + " critics)");
  return *pair_id;
}

const Mlp& ModelBundle::critic_for(std::optional<std::size_t> pair_id) const { return critics[critic_slot(pair_id)]; }

ModelBundle make_bundle(const BundleSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelBundle b;
  b.extractor = init_params(spec.extractor, derive_seed(seed, "init.extractor"));
  b.classifier = init_params(spec.classifier, derive_seed(seed, "init.classifier"));
  const std::size_t n = spec.critic_mode == CriticMode::PerPair ? pair_count(spec.num_domains) : 1;
  for (std::size_t k = 0; k < n; ++k)
    b.critics.push_back(init_params(spec.critic, derive_seed(seed, "init.critic." + std::to_string(k))));
  b.embed_layer = spec.embed_layer;
  b.critic_mode = spec.critic_mode;
  b.num_domains = spec.num_domains;
  return b;
}

Var forward_features(const MlpVars& theta_f, Var x) { return mlp_forward(theta_f, x).output; }

ClassifierOutput forward_logits(const MlpVars& theta_c, std::size_t embed_layer, Var z) {
  MlpTrace t = mlp_forward(theta_c, z);
  if (embed_layer < 1 || embed_layer > t.hidden.size())
    throw std::invalid_argument("embed_layer " + std::to_string(embed_layer) + " is not a hidden layer");
  return ClassifierOutput{t.output, normalize_rows(t.hidden[embed_layer - 1])};
}

Var forward_critic(const MlpVars& critic, Var z) { return mlp_forward(critic, z).output; }

Var critic_input_gradient(const MlpVars& critic, Var z) {
  MlpTrace t = mlp_forward(critic, z);
  Tape& tape = *z.tape;
  const std::size_t batch = z.shape()[0];
  const std::size_t last = critic.weights.size() - 1;
  if (tape.value(critic.weights[last]).shape()[1] != 1)
    throw ShapeError("critic_input_gradient needs a scalar-output critic");
  // d score / d h_last = ones[B x 1] * W_last^T
  Var delta = matmul(tape.constant(Tensor(Shape{batch, 1}, 1.0)), transpose(critic.weights[last]));
  for (std::size_t l = last; l-- > 0;) {
    const Tensor& pre = t.pre_activations[l].value();
    Tensor mask(pre.shape());
    for (std::size_t i = 0; i < pre.size(); ++i) mask[i] = pre[i] > 0.0 ? 1.0 : 0.0;
    delta = matmul(mul(delta, tape.constant(std::move(mask))), transpose(critic.weights[l]));
  }
  return delta;
}

Tensor forward_features(const Mlp& theta_f, const Tensor& x) {
  Tape tape(false);
  return forward_features(bind(tape, theta_f, false), tape.constant(x)).value();
}

ClassifierValues forward_logits(const Mlp& theta_c, std::size_t embed_layer, const Tensor& z) {
  Tape tape(false);
  auto out = forward_logits(bind(tape, theta_c, false), embed_layer, tape.constant(z));
  return ClassifierValues{out.logits.value(), out.embeddings.value()};
}

Tensor forward_critic(const ModelBundle& bundle, const Tensor& z, std::optional<std::size_t> pair_id) {
  const Mlp& critic = bundle.critic_for(pair_id);
  Tape tape(false);
  return forward_critic(bind(tape, critic, false), tape.constant(z)).value();
}

// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

void put_mlp(json& tensors, const std::string& name, const Mlp& mlp) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& layer = mlp.layers[l];
    tensors[name + "." + std::to_string(l) + ".weight"] = {{"shape", layer.weight.shape()},
                                                          {"data", layer.weight.storage()}};
    tensors[name + "." + std::to_string(l) + ".bias"] = {{"shape", layer.bias.shape()}, {"data", layer.bias.storage()}};
  }
}

Tensor get_tensor(const json& tensors, const std::string& key) {
  if (!tensors.contains(key)) throw std::runtime_error("checkpoint is missing tensor '" + key + "'");
  const auto& t = tensors.at(key);
  return Tensor(t.at("shape").get<Shape>(), t.at("data").get<std::vector<double>>());
}

Mlp get_mlp(const json& tensors, const std::string& name, const std::vector<std::size_t>& widths) {
  Mlp mlp{MlpSpec{widths}, {}};
  for (std::size_t l = 0; l + 1 < widths.size(); ++l)
    mlp.layers.push_back(Linear{get_tensor(tensors, name + "." + std::to_string(l) + ".weight"),
                                get_tensor(tensors, name + "." + std::to_string(l) + ".bias")});
  mlp.check_consistent();
  return mlp;
}

}  // namespace

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  bundle.validate();
  json doc;
  doc["format"] = "wadg-checkpoint/1";
  doc["embed_layer"] = bundle.embed_layer;
  doc["critic_mode"] = to_string(bundle.critic_mode);
  doc["num_domains"] = bundle.num_domains;
  doc["specs"] = {{"extractor", bundle.extractor.spec.layer_widths},
                  {"classifier", bundle.classifier.spec.layer_widths},
                  {"critic", bundle.critics.empty() ? std::vector<std::size_t>{} : bundle.critics.front().spec.layer_widths},
                  {"num_critics", bundle.critics.size()}};
  json tensors = json::object();
  put_mlp(tensors, "extractor", bundle.extractor);
  put_mlp(tensors, "classifier", bundle.classifier);
  for (std::size_t k = 0; k < bundle.critics.size(); ++k) put_mlp(tensors, "critic" + std::to_string(k), bundle.critics[k]);
  doc["tensors"] = std::move(tensors);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << doc.dump() << '\n';
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  json doc = json::parse(in);
  if (doc.value("format", "") != "wadg-checkpoint/1") throw std::runtime_error("unrecognized checkpoint format");
  const auto& specs = doc.at("specs");
  const auto& tensors = doc.at("tensors");
  ModelBundle b;
  b.embed_layer = doc.at("embed_layer").get<std::size_t>();
  b.critic_mode = critic_mode_from_string(doc.at("critic_mode").get<std::string>());
  b.num_domains = doc.at("num_domains").get<std::size_t>();
  b.extractor = get_mlp(tensors, "extractor", specs.at("extractor").get<std::vector<std::size_t>>());
  b.classifier = get_mlp(tensors, "classifier", specs.at("classifier").get<std::vector<std::size_t>>());
  const auto critic_widths = specs.at("critic").get<std::vector<std::size_t>>();
  const auto n = specs.at("num_critics").get<std::size_t>();
  for (std::size_t k = 0; k < n; ++k) b.critics.push_back(get_mlp(tensors, "critic" + std::to_string(k), critic_widths));
  b.validate();
  return b;
}

}  // namespace wadg
