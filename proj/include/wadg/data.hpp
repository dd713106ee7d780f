#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "wadg/tensor.hpp"

namespace wadg {

struct DomainDataset {
  std::string domain_id;
  Tensor features;          // [N x n]
  std::vector<int> labels;  // N entries in [0, K)

  std::size_t rows() const { return labels.size(); }
  std::size_t width() const { return features.cols(); }
  /// Throws unless shapes agree, N >= 1, labels lie in [0, K) and features are finite.
  void validate(int num_classes) const;
};

/// Two interleaved half circles per domain, each domain rotated about the
/// moons' centroid by its angle in degrees. Classes are balanced
/// (class 0 gets the extra row when samples_per_domain is odd). Domain ids
/// are "dom<angle>".
std::vector<DomainDataset> gen_rotated_moons(std::span<const double> angles_deg, std::size_t samples_per_domain,
                                             double noise_sd, std::uint64_t seed);

/// K isotropic Gaussian blobs with centers 3*(cos 2πc/K, sin 2πc/K, 0, ...);
/// domain i adds shift i to every row. Domain ids are "dom<i>".
std::vector<DomainDataset> gen_shifted_blobs(const std::vector<std::vector<double>>& domain_shifts, int num_classes,
                                             std::size_t samples_per_domain, double blob_sd, std::uint64_t seed);

/// Class centers used by gen_shifted_blobs.
std::vector<double> blob_center(int cls, int num_classes, std::size_t width);

struct DomainSplit {
  std::vector<DomainDataset> sources;
  DomainDataset target;
};

DomainSplit split_leave_one_out(const std::vector<DomainDataset>& datasets, const std::string& target_domain_id);

/// Deterministic hold-out of round(fraction * N) rows (at least 1, at most
/// N - 1) from one dataset.
std::pair<DomainDataset, DomainDataset> split_holdout(const DomainDataset& data, double fraction, std::uint64_t seed);

DomainDataset concat_datasets(const std::vector<DomainDataset>& parts, const std::string& domain_id);

struct MixedBatch {
  Tensor features;                      // [B x n]
  std::vector<int> labels;              // B
  std::vector<std::size_t> domain_ids;  // B, index into the source list
  std::size_t num_domains = 0;

  std::size_t size() const { return labels.size(); }
  /// Row indices of the batch that came from source d, in batch order.
  std::vector<std::size_t> rows_of(std::size_t d) const;
};

/// Draws `per_domain` rows from every source without replacement, concatenated
/// in source order. An epoch ends when the smallest source cannot fill a
/// whole sub-batch; the leftover rows of that epoch are dropped.
class EpochSampler {
 public:
  EpochSampler(const std::vector<DomainDataset>& sources, std::size_t per_domain, std::uint64_t seed);

  /// Next batch of the current epoch, or nullopt when the epoch is exhausted.
  /// The following call starts a freshly shuffled epoch.
  std::optional<MixedBatch> next();
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }

 private:
  void reshuffle();

  const std::vector<DomainDataset>* sources_;
  std::size_t per_domain_;
  std::size_t batches_per_epoch_;
  std::size_t cursor_ = 0;
  bool fresh_ = true;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> order_;
};

// ---------------------------------------------------------------------------
// On-disk format: one CSV per domain (header f0..f{n-1},label) and a JSON
// manifest {benchmark, domains[], n, K, seed, generator, files{domain: {path, rows}}}.

struct DatasetFile {
  std::string path;  // relative to the manifest directory
  std::size_t rows = 0;
};

struct DatasetManifest {
  std::string benchmark;
  std::vector<std::string> domains;
  std::size_t n = 0;
  int K = 0;
  std::uint64_t seed = 0;
  nlohmann::json generator = nlohmann::json::object();
  std::map<std::string, DatasetFile> files;
};

class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes the CSVs and manifest.json into `dir` and returns the manifest path.
std::filesystem::path save_dataset(const std::filesystem::path& dir, DatasetManifest manifest,
                                   const std::vector<DomainDataset>& datasets);

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<DomainDataset> domains;
};

LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

void write_csv(const std::filesystem::path& path, const DomainDataset& data);
DomainDataset read_csv(const std::filesystem::path& path, const std::string& domain_id);

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);
double parse_double(std::string_view text);

}  // namespace wadg
