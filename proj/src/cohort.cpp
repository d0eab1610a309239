#include "twinseg/cohort.hpp"

#include "twinseg/checkpoint.hpp"
#include "twinseg/preprocess.hpp"
#include "twinseg/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace twinseg {

namespace {

struct Site {
  const char* name;
  std::array<double, 3> prevalence;
  double radius;  // at a 32^3 native grid
  std::array<double, kNumModalities> shift;
  double noise;
  std::size_t native_extent;  // 0: cohort extent
};

// Tumour-type and scanner heterogeneity per site. Meningioma and low-grade
// glioma sites frequently lack the core or enhancing compartments; the
// metastasis site has small lesions; paediatric and low-grade sites come
// from different grid sizes and are resampled during preprocessing.
constexpr std::array<Site, 9> kSites = {{
    {"Hospital1", {1.0, 0.95, 0.90}, 6.0, {0.00, 0.00, 0.00, 0.00}, 0.20, 0},
    {"Hospital2", {1.0, 0.55, 0.50}, 5.0, {0.10, -0.10, 0.05, 0.00}, 0.20, 0},
    {"Hospital3", {1.0, 0.90, 0.90}, 4.0, {0.00, 0.10, 0.00, -0.10}, 0.25, 0},
    {"Hospital4", {1.0, 0.80, 0.60}, 5.0, {-0.10, 0.00, 0.10, 0.05}, 0.20, 24},
    {"Hospital5", {1.0, 0.90, 0.80}, 6.0, {0.05, 0.05, -0.10, 0.10}, 0.25, 0},
    {"Hospital6", {1.0, 0.95, 0.85}, 6.0, {0.00, -0.05, 0.00, 0.05}, 0.20, 0},
    {"Hospital7", {1.0, 0.95, 0.85}, 6.5, {0.05, 0.00, 0.05, 0.00}, 0.15, 0},
    {"Hospital8", {1.0, 1.00, 0.95}, 7.0, {0.00, 0.10, 0.00, 0.00}, 0.20, 0},
    {"Hospital9", {1.0, 0.80, 0.30}, 5.0, {-0.05, -0.10, 0.10, 0.10}, 0.20, 40},
}};

// Modality permutations applied to the contrast table for the strongly
// non-IID cohort; every client gets a different column order.
constexpr std::array<std::array<std::size_t, 4>, 9> kPermutations = {{
    {0, 1, 2, 3},
    {1, 0, 3, 2},
    {2, 3, 0, 1},
    {3, 2, 1, 0},
    {1, 2, 3, 0},
    {2, 0, 3, 1},
    {3, 0, 1, 2},
    {0, 3, 2, 1},
    {2, 1, 0, 3},
}};

const char* split_name(int s) { return s == 0 ? "train" : s == 1 ? "val" : "test"; }

}  // namespace

std::vector<std::size_t> scaled_counts(double scale, std::size_t min_count, std::vector<std::string>* notes) {
  if (!(scale > 0.0)) throw std::invalid_argument("cohort: scale must be positive");
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < kSiteCounts.size(); ++k) {
    const auto raw = static_cast<std::size_t>(std::llround(static_cast<double>(kSiteCounts[k]) * scale));
    if (raw < min_count && notes)
      notes->push_back(std::string(kSites[k].name) + ": scaled count " + std::to_string(raw) + " clamped to " +
                       std::to_string(min_count));
    out.push_back(std::max(raw, min_count));
  }
  return out;
}

CohortSpec CohortSpec::sites(std::size_t extent, double scale, std::size_t min_count) {
  CohortSpec spec;
  spec.extent = extent;
  const auto counts = scaled_counts(scale, min_count, &spec.notes);
  for (std::size_t k = 0; k < kSites.size(); ++k) {
    const auto& s = kSites[k];
    ClientSpec c;
    c.name = s.name;
    c.sample_count = counts[k];
    c.prevalence = s.prevalence;
    c.native_extent = s.native_extent;
    const double grid = static_cast<double>(s.native_extent ? s.native_extent : extent);
    c.radius = s.radius * grid / 32.0;
    c.intensity_shift = s.shift;
    c.noise = s.noise;
    c.seed = 1000 + k;
    spec.clients.push_back(c);
  }
  return spec;
}

CohortSpec CohortSpec::strongly_noniid(std::size_t extent, double scale, std::size_t min_count) {
  CohortSpec spec = sites(extent, scale, min_count);
  const Signature base = default_signature();
  for (std::size_t k = 0; k < spec.clients.size(); ++k) {
    auto& c = spec.clients[k];
    for (std::size_t cls = 0; cls < kNumClasses; ++cls)
      for (std::size_t m = 0; m < kNumModalities; ++m) c.signature[cls][m] = base[cls][kPermutations[k][m]];
    c.prevalence = {1.0, 1.0, 1.0};
    c.intensity_shift = {0.0, 0.0, 0.0, 0.0};
  }
  spec.notes.push_back("strongly non-IID: per-client modality permutation of the contrast table");
  return spec;
}

void CohortSpec::validate() const {
  if (extent < 4) throw std::invalid_argument("cohort.extent: must be at least 4");
  if (clients.empty()) throw std::invalid_argument("cohort.clients: at least one client required");
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const auto& c = clients[k];
    const std::string at = "cohort.clients[" + std::to_string(k) + "]";
    if (c.name.empty()) throw std::invalid_argument(at + ".name: must not be empty");
    if (c.sample_count < 3) throw std::invalid_argument(at + ".sample_count: at least 3 needed for a 3-way split");
    for (double p : c.prevalence)
      if (!(p >= 0.0) || p > 1.0) throw std::invalid_argument(at + ".prevalence: entries must lie in [0,1]");
    if (!(c.radius >= 0.0)) throw std::invalid_argument(at + ".radius: must be non-negative");
    if (!(c.noise >= 0.0)) throw std::invalid_argument(at + ".noise: must be non-negative");
    for (std::size_t j = 0; j < k; ++j)
      if (clients[j].name == c.name) throw std::invalid_argument(at + ".name: duplicate '" + c.name + "'");
  }
}

SplitSizes split_sizes(std::size_t n) {
  if (n < 3) throw std::invalid_argument("split: need at least 3 subjects, got " + std::to_string(n));
  const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n))));
  return {n - 2 * held, held, held};
}

std::vector<ClientDataset> partition_noniid(const CohortSpec& cohort, std::uint64_t seed) {
  cohort.validate();
  std::vector<ClientDataset> out;
  for (std::size_t k = 0; k < cohort.clients.size(); ++k) {
    const auto& spec = cohort.clients[k];
    ClientDataset ds;
    ds.client_id = k;
    ds.name = spec.name;
    const std::size_t n = spec.sample_count;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = derive_rng({seed, k, spec.seed, 4});
    // Fisher-Yates with explicit draws; std::shuffle is implementation-defined
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    const auto sizes = split_sizes(n);
    for (std::size_t j = 0; j < n; ++j) {
      Volume v = preprocess(generate_phantom(spec, k, order[j], cohort.extent, seed), cohort.extent);
      if (j < sizes.train)
        ds.train.push_back(std::move(v));
      else if (j < sizes.train + sizes.val)
        ds.val.push_back(std::move(v));
      else
        ds.test.push_back(std::move(v));
    }
    out.push_back(std::move(ds));
  }
  return out;
}

std::string cohort_manifest(const std::vector<ClientDataset>& clients, const std::string& config_hash) {
  nlohmann::ordered_json doc;
  doc["config_hash"] = config_hash;
  doc["clients"] = nlohmann::ordered_json::array();
  for (const auto& c : clients) {
    nlohmann::ordered_json entry = {{"client_id", c.client_id}, {"name", c.name}, {"n_k", c.n_k()}};
    for (int s = 0; s < 3; ++s) {
      const auto& split = s == 0 ? c.train : s == 1 ? c.val : c.test;
      auto ids = nlohmann::ordered_json::array();
      for (const auto& v : split) ids.push_back(v.subject_id);
      entry[split_name(s)] = ids;
    }
    doc["clients"].push_back(entry);
  }
  return doc.dump(2) + "\n";
}

void save_cohort_cache(const std::filesystem::path& dir, const std::vector<ClientDataset>& clients,
                       const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  ParameterStore store;
  char key[64];
  for (const auto& c : clients)
    for (int s = 0; s < 3; ++s) {
      const auto& split = s == 0 ? c.train : s == 1 ? c.val : c.test;
      for (std::size_t i = 0; i < split.size(); ++i) {
        std::snprintf(key, sizeof(key), "c%03zu/%s/%05zu/", c.client_id, split_name(s), i);
        const auto& v = split[i];
        store.add(std::string(key) + "image", v.image.clone(), EntryKind::buffer);
        std::vector<double> labels(v.label.data.begin(), v.label.data.end());
        const auto& e = v.label.extent;
        store.add(std::string(key) + "label", Tensor(Shape{e[0], e[1], e[2]}, std::move(labels)), EntryKind::buffer);
      }
    }
  save_checkpoint(store, dir / "cohort.ckpt", config_hash);
  std::ofstream(dir / "manifest.json") << cohort_manifest(clients, config_hash);
}

std::vector<ClientDataset> load_cohort_cache(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cohort cache: missing manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  const auto store = load_checkpoint(dir / "cohort.ckpt");
  std::vector<ClientDataset> out;
  char key[64];
  for (const auto& entry : manifest.at("clients")) {
    ClientDataset ds;
    ds.client_id = entry.at("client_id").get<std::size_t>();
    ds.name = entry.at("name").get<std::string>();
    for (int s = 0; s < 3; ++s) {
      auto& split = s == 0 ? ds.train : s == 1 ? ds.val : ds.test;
      const auto& ids = entry.at(split_name(s));
      for (std::size_t i = 0; i < ids.size(); ++i) {
        std::snprintf(key, sizeof(key), "c%03zu/%s/%05zu/", ds.client_id, split_name(s), i);
        Volume v;
        v.subject_id = ids[i].get<std::string>();
        v.image = store.at(std::string(key) + "image").clone();
        const auto& lab = store.at(std::string(key) + "label");
        v.label = LabelMap({lab.size(0), lab.size(1), lab.size(2)});
        for (std::size_t j = 0; j < lab.numel(); ++j) v.label.data[j] = static_cast<std::uint8_t>(lab[j]);
        v.preprocessed = true;
        split.push_back(std::move(v));
      }
    }
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace twinseg
