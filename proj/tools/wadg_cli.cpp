// wadg: dataset generation, training, ablation grids and embedding export.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "wadg/cli_config.hpp"
#include "wadg/data.hpp"
#include "wadg/model.hpp"
#include "wadg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wadg;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_doubles(const std::string& text, const std::string& what) {
  std::vector<double> out;
  for (const auto& item : split(text, ',')) {
    try {
      out.push_back(parse_double(item));
    } catch (const std::exception&) {
      throw ConfigError(what + ": malformed number '" + item + "'");
    }
  }
  return out;
}

// Options shared by train and ablate that map onto TrainConfig keys.
struct TrainFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void add(CLI::App* app, bool with_target) {
    app->add_option("--config", config_path, "JSON config file (lowest precedence layer)");
    auto flag = [&](const std::string& name, const std::string& key, const std::string& help) {
      auto* slot = &values.emplace_back(key, std::string{});
      options.emplace_back(key, app->add_option(name, slot->second, help + " [" + key + "]"));
    };
    values.reserve(16);
    flag("--manifest", "manifest", "Dataset manifest.json");
    if (with_target) flag("--target", "target", "Held-out target domain id");
    flag("--mode", "mode", "deep-all | no-ld | no-lms | wadg-all");
    flag("--seed", "seed", "Master seed");
    flag("--epochs", "epochs", "Training epochs");
    flag("--lr", "learning_rate", "Adam learning rate for extractor and classifier");
    flag("--critic-lr", "critic_learning_rate", "Adam learning rate for critics");
    flag("--batch", "batch_per_domain", "Rows per source domain in each batch");
    flag("--lambda-s", "lambda_s", "Metric loss weight");
    flag("--critic-steps", "critic_steps", "Critic ascents per joint step");
    flag("--critic-mode", "critic_mode", "per-pair | shared");
    flag("--lipschitz", "lipschitz", "gradient-penalty | weight-clipping");
    flag("--patience", "patience", "Early-stopping patience in epochs");
    app->add_option("--set", sets, "Any config key as key=value (repeatable)");
  }

  cli::RunSettings resolve() const {
    std::vector<json> layers;
    if (!config_path.empty()) layers.push_back(cli::load_config_file(config_path));
    layers.push_back(cli::env_layer(cli::process_env()));
    std::vector<std::pair<std::string, std::string>> given;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
      given.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    for (std::size_t i = 0; i < options.size(); ++i)
      if (options[i].second->count() > 0) given.emplace_back(values[i].first, values[i].second);
    layers.push_back(cli::text_layer(given, "command line"));
    return cli::resolve(layers);
  }
};

LoadedDataset load_manifest(const std::optional<std::string>& manifest) {
  if (!manifest) throw ConfigError("no manifest given (--manifest, WADG_MANIFEST or config file)");
  return load_dataset(*manifest);
}

int cmd_generate(const std::string& benchmark, const std::string& angles, std::size_t n, double noise,
                 std::optional<std::uint64_t> seed_flag, const std::string& shifts, int classes, double sd,
                 const fs::path& out) {
  std::uint64_t seed = 0;
  if (auto env = cli::process_env()(cli::env_var_name("seed")))
    seed = cli::text_layer({{"seed", *env}}, "WADG_SEED").at("seed").get<std::uint64_t>();
  if (seed_flag) seed = *seed_flag;

  DatasetManifest manifest;
  manifest.benchmark = benchmark;
  manifest.seed = seed;
  std::vector<DomainDataset> data;
  if (benchmark == "rotated-moons") {
    if (angles.empty()) throw CLI::RequiredError("--angles");
    const auto a = parse_doubles(angles, "--angles");
    data = gen_rotated_moons(a, n, noise, seed);
    manifest.K = 2;
    manifest.generator = {{"angles", a}, {"samples_per_domain", n}, {"noise_sd", noise}};
  } else if (benchmark == "blobs") {
    if (shifts.empty()) throw CLI::RequiredError("--shifts");
    std::vector<std::vector<double>> s;
    for (const auto& v : split(shifts, ';')) s.push_back(parse_doubles(v, "--shifts"));
    data = gen_shifted_blobs(s, classes, n, sd, seed);
    manifest.K = classes;
    manifest.generator = {{"shifts", s}, {"samples_per_domain", n}, {"blob_sd", sd}};
  } else {
    throw ConfigError("unknown benchmark '" + benchmark + "' (rotated-moons or blobs)");
  }
  manifest.n = data.front().width();
  std::cout << save_dataset(out, manifest, data).string() << '\n';
  return 0;
}

int cmd_train(const TrainFlags& flags, const fs::path& out, bool quiet) {
  cli::RunSettings run = flags.resolve();
  if (!run.target) throw ConfigError("no target domain given (--target, WADG_TARGET or config file)");
  const LoadedDataset loaded = load_manifest(run.manifest);
  const auto& ids = loaded.manifest.domains;
  if (std::find(ids.begin(), ids.end(), *run.target) == ids.end())
    throw ConfigError("target '" + *run.target + "' not in manifest");
  run.manifest = fs::absolute(*run.manifest).lexically_normal().string();

  fs::create_directories(out);
  std::ofstream(out / "resolved_config.json") << cli::snapshot(run).dump(2) << '\n';

  const DomainSplit split = split_leave_one_out(loaded.domains, *run.target);
  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot write " + (out / "metrics.jsonl").string());
  const TrainResult result = train(split.sources, run.config, &split.target, [&](const MetricsRecord& r) {
    metrics << to_json(r).dump() << '\n';
    metrics.flush();
    if (!quiet)
      std::cerr << "epoch " << r.epoch << " loss_c " << r.loss_c << " val " << r.source_val_acc << " target "
                << r.target_acc.value_or(0.0) << '\n';
  });
  save_checkpoint(result.final_bundle, out / "checkpoint.json");
  save_checkpoint(result.best_bundle, out / "best_checkpoint.json");
  std::cout << "target " << *run.target << " mode " << to_string(run.config.mode) << " final_acc "
            << result.final_target_acc.value_or(0.0) << " best_acc " << result.best_target_acc.value_or(0.0)
            << " epochs " << result.records.size() << '\n';
  return 0;
}

int cmd_ablate(const TrainFlags& flags, std::size_t seeds, const std::string& targets, const std::string& modes,
               std::size_t threads, std::optional<std::size_t> max_runs, const fs::path& out) {
  cli::RunSettings run = flags.resolve();
  const LoadedDataset loaded = load_manifest(run.manifest);
  if (loaded.domains.size() < 3) throw ConfigError("ablation needs a manifest with at least 3 domains");
  AblationOptions opts;
  opts.n_seeds = seeds;
  opts.out_dir = out;
  opts.threads = threads;
  opts.max_new_runs = max_runs;
  opts.targets = split(targets, ',');
  for (const auto& t : opts.targets)
    if (std::find(loaded.manifest.domains.begin(), loaded.manifest.domains.end(), t) == loaded.manifest.domains.end())
      throw ConfigError("target '" + t + "' not in manifest");
  if (!modes.empty()) {
    opts.modes.clear();
    for (const auto& m : split(modes, ',')) opts.modes.push_back(ablation_mode_from_string(m));
  }
  run.manifest = fs::absolute(*run.manifest).lexically_normal().string();
  fs::create_directories(out);
  std::ofstream(out / "resolved_config.json") << cli::snapshot(run).dump(2) << '\n';

  const AblationResult result = run_ablation_suite(loaded.domains, run.config, opts);
  for (const auto& c : result.grid)
    std::cout << c.target << ' ' << to_string(c.mode) << ' ' << c.mean_acc << " +- " << c.sd_acc << " (n=" << c.n_seeds
              << ")\n";
  std::cout << "runs executed " << result.runs_executed << ", skipped " << result.runs_skipped
            << (result.complete ? ", grid complete\n" : ", grid incomplete\n");
  return 0;
}

int cmd_dump(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out) {
  const ModelBundle bundle = load_checkpoint(checkpoint);
  const LoadedDataset loaded = load_dataset(manifest);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  dump_embeddings(bundle, loaded.domains, out);
  std::cout << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wasserstein adversarial domain generalization lab"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "Generate a synthetic multi-domain dataset");
  std::string benchmark, angles, shifts;
  std::size_t n = 600;
  double noise = 0.1, sd = 0.5;
  int classes = 3;
  std::uint64_t gen_seed = 0;
  fs::path gen_out;
  gen->add_option("--benchmark", benchmark, "rotated-moons | blobs")->required();
  gen->add_option("--angles", angles, "Comma-separated rotation angles in degrees (rotated-moons)");
  gen->add_option("--n", n, "Samples per domain")->capture_default_str();
  gen->add_option("--noise", noise, "Gaussian noise sd (rotated-moons)")->capture_default_str();
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "Master seed (default WADG_SEED or 0)");
  gen->add_option("--shifts", shifts, "Per-domain shift vectors, e.g. '0,0;1,0;0,1' (blobs)");
  gen->add_option("--classes", classes, "Number of classes (blobs)")->capture_default_str();
  gen->add_option("--sd", sd, "Blob standard deviation (blobs)")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train one leave-one-domain-out run");
  TrainFlags train_flags;
  train_flags.add(tr, true);
  fs::path train_out;
  bool quiet = false;
  tr->add_option("--out", train_out, "Output directory")->required();
  tr->add_flag("--quiet", quiet, "No per-epoch progress on stderr");

  auto* ab = app.add_subcommand("ablate", "Run the target x mode x seed ablation grid");
  TrainFlags ablate_flags;
  ablate_flags.add(ab, false);
  std::size_t seeds = 3, threads = 1, max_runs = 0;
  std::string targets, modes;
  fs::path ablate_out;
  ab->add_option("--seeds", seeds, "Seeds per cell (seed, seed+1, ...)")->capture_default_str();
  ab->add_option("--targets", targets, "Comma-separated target domains (default all)");
  ab->add_option("--modes", modes, "Comma-separated modes (default all four)");
  ab->add_option("--threads", threads, "Parallel runs")->capture_default_str();
  auto* max_runs_opt = ab->add_option("--max-runs", max_runs, "Stop after this many new runs (resume later)");
  ab->add_option("--out", ablate_out, "Output directory (runs.jsonl, grid.csv)")->required();

  auto* dump = app.add_subcommand("dump-embeddings", "Write classifier embeddings of every dataset row");
  fs::path ckpt, dump_manifest, dump_out;
  dump->add_option("--checkpoint", ckpt, "checkpoint.json")->required();
  dump->add_option("--manifest", dump_manifest, "Dataset manifest.json")->required();
  dump->add_option("--out", dump_out, "Output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed())
      return cmd_generate(benchmark, angles, n, noise, gen_seed_opt->count() ? std::optional(gen_seed) : std::nullopt,
                          shifts, classes, sd, gen_out);
    if (tr->parsed()) return cmd_train(train_flags, train_out, quiet);
    if (ab->parsed())
      return cmd_ablate(ablate_flags, seeds, targets, modes, threads,
                        max_runs_opt->count() ? std::optional(max_runs) : std::nullopt, ablate_out);
    if (dump->parsed()) return cmd_dump(ckpt, dump_manifest, dump_out);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    // ConfigError and ShapeError derive from invalid_argument: bad input, not a crash.
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
