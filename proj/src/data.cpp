#include "wadg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "wadg/seeds.hpp"

namespace wadg {

void DomainDataset::validate(int num_classes) const {
  if (labels.empty()) throw std::invalid_argument("domain '" + domain_id + "' is empty");
  if (features.rank() != 2 || features.rows() != labels.size())
    throw ShapeError("domain '" + domain_id + "': features " + shape_str(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("domain '" + domain_id + "': label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
  if (!features.all_finite()) throw std::invalid_argument("domain '" + domain_id + "' has non-finite features");
}

std::vector<DomainDataset> gen_rotated_moons(std::span<const double> angles_deg, std::size_t samples_per_domain,
                                             double noise_sd, std::uint64_t seed) {
  if (angles_deg.size() < 3) throw std::invalid_argument("rotated moons need at least 3 angles");
  if (!(noise_sd >= 0.0)) throw std::invalid_argument("noise_sd must be >= 0");
  if (samples_per_domain < 2) throw std::invalid_argument("need at least 2 samples per domain");
  constexpr double cx = 0.5, cy = 0.25;  // centroid of the two moons
  std::vector<DomainDataset> out;
  for (std::size_t d = 0; d < angles_deg.size(); ++d) {
    std::mt19937_64 rng(derive_seed(seed, "moons." + std::to_string(d)));
    std::uniform_real_distribution<double> arc(0.0, std::numbers::pi);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double theta = angles_deg[d] * std::numbers::pi / 180.0;
    const double c = std::cos(theta), s = std::sin(theta);
    const std::size_t n0 = (samples_per_domain + 1) / 2;
    DomainDataset ds{"dom" + format_double(angles_deg[d]), Tensor(Shape{samples_per_domain, 2}), {}};
    for (std::size_t i = 0; i < samples_per_domain; ++i) {
      const int label = i < n0 ? 0 : 1;
      const double t = arc(rng);
      double x = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
      double y = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
      x += noise_sd * noise(rng) - cx;
      y += noise_sd * noise(rng) - cy;
      ds.features.at(i, 0) = c * x - s * y;
      ds.features.at(i, 1) = s * x + c * y;
      ds.labels.push_back(label);
    }
    out.push_back(std::move(ds));
  }
  return out;
}

std::vector<double> blob_center(int cls, int num_classes, std::size_t width) {
  std::vector<double> c(width, 0.0);
  const double phi = 2.0 * std::numbers::pi * cls / num_classes;
  if (width == 1) {
    c[0] = 3.0 * cls;
  } else {
    c[0] = 3.0 * std::cos(phi);
    c[1] = 3.0 * std::sin(phi);
  }
  return c;
}

std::vector<DomainDataset> gen_shifted_blobs(const std::vector<std::vector<double>>& domain_shifts, int num_classes,
                                             std::size_t samples_per_domain, double blob_sd, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("shifted blobs need K >= 2");
  if (domain_shifts.empty()) throw std::invalid_argument("shifted blobs need at least one domain");
  if (!(blob_sd >= 0.0)) throw std::invalid_argument("blob_sd must be >= 0");
  const std::size_t width = domain_shifts.front().size();
  if (width == 0) throw std::invalid_argument("shift vectors must be non-empty");
  const auto K = static_cast<std::size_t>(num_classes);
  if (samples_per_domain < K) throw std::invalid_argument("need at least one sample per class");

  std::vector<DomainDataset> out;
  for (std::size_t d = 0; d < domain_shifts.size(); ++d) {
    if (domain_shifts[d].size() != width) throw std::invalid_argument("shift vectors differ in length");
    std::mt19937_64 rng(derive_seed(seed, "blobs." + std::to_string(d)));
    std::normal_distribution<double> noise(0.0, 1.0);
    DomainDataset ds{"dom" + std::to_string(d), Tensor(Shape{samples_per_domain, width}), {}};
    std::size_t row = 0;
    for (std::size_t c = 0; c < K; ++c) {
      const std::size_t count = samples_per_domain / K + (c < samples_per_domain % K ? 1 : 0);
      const auto center = blob_center(static_cast<int>(c), num_classes, width);
      for (std::size_t i = 0; i < count; ++i, ++row) {
        for (std::size_t k = 0; k < width; ++k)
          ds.features.at(row, k) = center[k] + domain_shifts[d][k] + blob_sd * noise(rng);
        ds.labels.push_back(static_cast<int>(c));
      }
    }
    out.push_back(std::move(ds));
  }
  return out;
}

DomainSplit split_leave_one_out(const std::vector<DomainDataset>& datasets, const std::string& target_domain_id) {
  DomainSplit split;
  bool found = false;
  for (const auto& d : datasets) {
    if (d.domain_id == target_domain_id && !found) {
      split.target = d;
      found = true;
    } else {
      split.sources.push_back(d);
    }
  }
  if (!found) throw std::invalid_argument("unknown domain id '" + target_domain_id + "'");
  return split;
}

std::pair<DomainDataset, DomainDataset> split_holdout(const DomainDataset& data, double fraction, std::uint64_t seed) {
  const std::size_t n = data.rows();
  if (n < 2) throw std::invalid_argument("cannot hold out rows from domain '" + data.domain_id + "' with < 2 rows");
  auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  held = std::clamp<std::size_t>(held, 1, n - 1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> keep(perm.begin() + static_cast<std::ptrdiff_t>(held), perm.end());
  std::vector<std::size_t> hold(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(held));
  std::sort(keep.begin(), keep.end());
  std::sort(hold.begin(), hold.end());
  auto take = [&](const std::vector<std::size_t>& idx) {
    DomainDataset part{data.domain_id, kernels::select_rows(data.features, idx), {}};
    for (auto i : idx) part.labels.push_back(data.labels[i]);
    return part;
  };
  return {take(keep), take(hold)};
}

DomainDataset concat_datasets(const std::vector<DomainDataset>& parts, const std::string& domain_id) {
  if (parts.empty()) throw std::invalid_argument("nothing to concatenate");
  const std::size_t width = parts.front().width();
  std::vector<double> data;
  DomainDataset out{domain_id, {}, {}};
  for (const auto& p : parts) {
    if (p.width() != width) throw ShapeError("cannot concatenate datasets of different widths");
    data.insert(data.end(), p.features.data().begin(), p.features.data().end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.features = Tensor(Shape{out.labels.size(), width}, std::move(data));
  return out;
}

std::vector<std::size_t> MixedBatch::rows_of(std::size_t d) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < domain_ids.size(); ++i)
    if (domain_ids[i] == d) rows.push_back(i);
  return rows;
}

EpochSampler::EpochSampler(const std::vector<DomainDataset>& sources, std::size_t per_domain, std::uint64_t seed)
    : sources_(&sources), per_domain_(per_domain), rng_(seed) {
  if (sources.empty()) throw std::invalid_argument("sampler needs at least one source");
  if (per_domain == 0) throw std::invalid_argument("per-domain batch size must be >= 1");
  std::size_t smallest = sources.front().rows();
  for (const auto& s : sources) {
    if (s.rows() < per_domain)
      throw std::invalid_argument("source '" + s.domain_id + "' has " + std::to_string(s.rows()) +
                                  " rows, fewer than the per-domain batch " + std::to_string(per_domain));
    smallest = std::min(smallest, s.rows());
  }
  batches_per_epoch_ = smallest / per_domain;
}

void EpochSampler::reshuffle() {
  order_.clear();
  for (const auto& s : *sources_) {
    std::vector<std::size_t> perm(s.rows());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng_);
    order_.push_back(std::move(perm));
  }
  cursor_ = 0;
  fresh_ = false;
}

std::optional<MixedBatch> EpochSampler::next() {
  if (fresh_) reshuffle();
  if (cursor_ >= batches_per_epoch_) {
    fresh_ = true;
    return std::nullopt;
  }
  const auto& sources = *sources_;
  const std::size_t width = sources.front().width();
  const std::size_t m = sources.size();
  MixedBatch batch;
  batch.num_domains = m;
  batch.features = Tensor(Shape{m * per_domain_, width});
  std::size_t row = 0;
  for (std::size_t d = 0; d < m; ++d) {
    for (std::size_t k = 0; k < per_domain_; ++k, ++row) {
      const std::size_t src = order_[d][cursor_ * per_domain_ + k];
      for (std::size_t c = 0; c < width; ++c) batch.features.at(row, c) = sources[d].features.at(src, c);
      batch.labels.push_back(sources[d].labels[src]);
      batch.domain_ids.push_back(d);
    }
  }
  ++cursor_;
  return batch;
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("cannot format double");
  return std::string(buf, ptr);
}

double parse_double(std::string_view text) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    throw DataFormatError("malformed number '" + std::string(text) + "'");
  return v;
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

void write_csv(const std::filesystem::path& path, const DomainDataset& data) {
  if (!data.features.all_finite())
    throw std::invalid_argument("refusing to save domain '" + data.domain_id + "': non-finite features");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t n = data.width();
  for (std::size_t k = 0; k < n; ++k) out << 'f' << k << ',';
  out << "label\n";
  for (std::size_t i = 0; i < data.rows(); ++i) {
    for (std::size_t k = 0; k < n; ++k) out << format_double(data.features.at(i, k)) << ',';
    out << data.labels[i] << '\n';
  }
}

DomainDataset read_csv(const std::filesystem::path& path, const std::string& domain_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("domain '" + domain_id + "': missing file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataFormatError("domain '" + domain_id + "': empty file");
  const auto header = split_commas(line);
  if (header.size() < 2 || header.back() != "label")
    throw DataFormatError("domain '" + domain_id + "': malformed header");
  const std::size_t n = header.size() - 1;
  for (std::size_t k = 0; k < n; ++k)
    if (header[k] != "f" + std::to_string(k)) throw DataFormatError("domain '" + domain_id + "': malformed header");
  std::vector<double> values;
  DomainDataset ds{domain_id, {}, {}};
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != n + 1)
      throw DataFormatError("domain '" + domain_id + "': line " + std::to_string(lineno) + " has " +
                            std::to_string(cells.size()) + " cells");
    for (std::size_t k = 0; k < n; ++k) values.push_back(parse_double(cells[k]));
    int label = 0;
    auto [ptr, ec] = std::from_chars(cells[n].data(), cells[n].data() + cells[n].size(), label);
    if (ec != std::errc{} || ptr != cells[n].data() + cells[n].size())
      throw DataFormatError("domain '" + domain_id + "': bad label on line " + std::to_string(lineno));
    ds.labels.push_back(label);
  }
  ds.features = Tensor(Shape{ds.labels.size(), n}, std::move(values));
  return ds;
}

std::filesystem::path save_dataset(const std::filesystem::path& dir, DatasetManifest manifest,
                                   const std::vector<DomainDataset>& datasets) {
  if (datasets.empty()) throw std::invalid_argument("no datasets to save");
  for (const auto& d : datasets) {
    if (!d.features.all_finite())
      throw std::invalid_argument("refusing to save domain '" + d.domain_id + "': non-finite features");
    d.validate(manifest.K);
  }
  std::filesystem::create_directories(dir);
  manifest.domains.clear();
  manifest.files.clear();
  manifest.n = datasets.front().width();
  for (const auto& d : datasets) {
    const std::string file = d.domain_id + ".csv";
    write_csv(dir / file, d);
    manifest.domains.push_back(d.domain_id);
    manifest.files[d.domain_id] = DatasetFile{file, d.rows()};
  }
  nlohmann::json doc;
  doc["benchmark"] = manifest.benchmark;
  doc["domains"] = manifest.domains;
  doc["n"] = manifest.n;
  doc["K"] = manifest.K;
  doc["seed"] = manifest.seed;
  doc["generator"] = manifest.generator;
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [id, f] : manifest.files) files[id] = {{"path", f.path}, {"rows", f.rows}};
  doc["files"] = std::move(files);
  const auto path = dir / "manifest.json";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  return path;
}

LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataFormatError("missing manifest " + manifest_path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataFormatError("malformed manifest: " + std::string(e.what()));
  }
  LoadedDataset out;
  auto& m = out.manifest;
  try {
    m.benchmark = doc.at("benchmark").get<std::string>();
    m.domains = doc.at("domains").get<std::vector<std::string>>();
    m.n = doc.at("n").get<std::size_t>();
    m.K = doc.at("K").get<int>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.generator = doc.at("generator");
    for (const auto& [id, f] : doc.at("files").items())
      m.files[id] = DatasetFile{f.at("path").get<std::string>(), f.at("rows").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw DataFormatError("malformed manifest: " + std::string(e.what()));
  }
  const auto base = manifest_path.parent_path();
  for (const auto& id : m.domains) {
    const auto it = m.files.find(id);
    if (it == m.files.end()) throw DataFormatError("domain '" + id + "': no file entry in manifest");
    DomainDataset ds = read_csv(base / it->second.path, id);
    if (ds.rows() != it->second.rows)
      throw DataFormatError("domain '" + id + "': manifest says " + std::to_string(it->second.rows) +
                            " rows, file has " + std::to_string(ds.rows()));
    if (ds.width() != m.n)
      throw DataFormatError("domain '" + id + "': width " + std::to_string(ds.width()) + " != manifest n " +
                            std::to_string(m.n));
    ds.validate(m.K);
    out.domains.push_back(std::move(ds));
  }
  return out;
}

}  // namespace wadg
