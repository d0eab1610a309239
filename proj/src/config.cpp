#include "twinseg/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace twinseg {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::invalid_argument("config field '" + path + "': " + what);
}

const json& field(const json& obj, const std::string& parent, const char* key) {
  const std::string path = parent.empty() ? key : parent + "." + key;
  if (!obj.contains(key)) fail(path, "missing");
  return obj.at(key);
}

std::string path_of(const std::string& parent, const char* key) { return parent.empty() ? key : parent + "." + key; }

std::size_t get_count(const json& obj, const std::string& parent, const char* key) {
  const auto& v = field(obj, parent, key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    fail(path_of(parent, key), "expected a non-negative integer");
  return v.get<std::size_t>();
}

double get_number(const json& obj, const std::string& parent, const char* key) {
  const auto& v = field(obj, parent, key);
  if (!v.is_number()) fail(path_of(parent, key), "expected a number");
  return v.get<double>();
}

bool get_bool(const json& obj, const std::string& parent, const char* key) {
  const auto& v = field(obj, parent, key);
  if (!v.is_boolean()) fail(path_of(parent, key), "expected true or false");
  return v.get<bool>();
}

std::string get_string(const json& obj, const std::string& parent, const char* key) {
  const auto& v = field(obj, parent, key);
  if (!v.is_string()) fail(path_of(parent, key), "expected a string");
  return v.get<std::string>();
}

void reject_unknown(const json& given, const json& known, const std::string& parent) {
  if (!given.is_object()) fail(parent.empty() ? "<root>" : parent, "expected an object");
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = parent.empty() ? it.key() : parent + "." + it.key();
    if (parent.empty() && it.key() == "preset") continue;
    if (!known.contains(it.key())) fail(path, "unknown field");
    if (known.at(it.key()).is_object()) reject_unknown(it.value(), known.at(it.key()), path);
  }
}

const char* schedule_name(DtSchedule s) { return s == DtSchedule::final_round ? "final" : "per-round"; }
const char* start_name(DtStart s) { return s == DtStart::global ? "global" : "previous-twin"; }
const char* kind_name(CohortKind k) { return k == CohortKind::sites ? "sites" : "strongly-noniid"; }

}  // namespace

std::vector<std::string> preset_names() { return {"desk", "desk-ci", "noniid", "paper"}; }

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.preset = name;
  // the small desk network needs a larger step than the 1e-4 default to
  // converge within ten rounds
  if (name != "paper") c.learning_rate = 1e-3;
  if (name == "desk") {
    c.output_dir = "runs/desk";
  } else if (name == "desk-ci") {
    c.local_epochs = 2;
    c.output_dir = "runs/desk-ci";
  } else if (name == "noniid") {
    c.cohort.kind = CohortKind::strongly_noniid;
    c.local_epochs = 2;
    c.output_dir = "runs/noniid";
  } else if (name == "paper") {
    c.model = ModelConfig::paper();
    c.cohort.scale = 1.0;
    c.batch_size = 1;
    c.output_dir = "runs/paper";
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    fail("preset", "unknown preset '" + name + "' (known: " + known + ")");
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (rounds < 1) fail("rounds", "must be at least 1");
  if (local_epochs < 1) fail("local_epochs", "must be at least 1");
  if (batch_size < 1) fail("batch_size", "must be at least 1");
  if (!(learning_rate > 0.0)) fail("learning_rate", "must be positive");
  if (dt_epochs < 1) fail("dt.epochs", "must be at least 1");
  if (eval_split != "val" && eval_split != "test") fail("eval_split", "must be 'val' or 'test'");
  if (!(cohort.scale > 0.0)) fail("cohort.scale", "must be positive");
  if (cohort.min_count < 3) fail("cohort.min_count", "must be at least 3 (one subject per split)");
  if (!(augment.probability >= 0.0 && augment.probability <= 1.0)) fail("augment.probability", "must lie in [0,1]");
  if (!(augment.min_scale > 0.0 && augment.min_scale <= augment.max_scale)) fail("augment.min_scale", "must be positive and <= max_scale");
  if (!(augment.max_rotation_deg >= 0.0)) fail("augment.max_rotation_deg", "must be non-negative");
  if (!(augment.max_noise_sigma >= 0.0)) fail("augment.max_noise_sigma", "must be non-negative");
  if (augment.elastic && augment.elastic_grid < 2) fail("augment.elastic_grid", "must be at least 2");
  try {
    twinseg::validate(model);
  } catch (const std::invalid_argument& e) {
    fail("model", e.what());
  }
  const auto spec = cohort_spec();
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    fail("cohort", e.what());
  }
  if (!(participation > 0.0) || participation > 1.0) fail("participation.fraction", "must lie in (0,1]");
  for (std::size_t id : dropped_clients)
    if (id >= spec.clients.size())
      fail("participation.dropped", "client id " + std::to_string(id) + " does not exist");
  const auto m = static_cast<std::size_t>(std::llround(participation * static_cast<double>(spec.clients.size())));
  if (m == 0) fail("participation.fraction", "selects no client");
}

CohortSpec ExperimentConfig::cohort_spec() const {
  return cohort.kind == CohortKind::sites ? CohortSpec::sites(model.input_extent, cohort.scale, cohort.min_count)
                                           : CohortSpec::strongly_noniid(model.input_extent, cohort.scale, cohort.min_count);
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.model = model;
  t.epochs = local_epochs;
  t.batch_size = batch_size;
  t.adam.lr = learning_rate;
  t.loss = loss;
  t.augment = augment;
  return t;
}

ParticipationPolicy ExperimentConfig::participation_policy() const {
  ParticipationPolicy p;
  p.fraction = participation;
  p.seed = seed;
  p.dropped = dropped_clients;
  return p;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["rounds"] = c.rounds;
  j["local_epochs"] = c.local_epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["loss"] = std::string(loss_mode_name(c.loss));
  j["model"] = {{"in_modalities", c.model.in_modalities},
                {"num_classes", c.model.num_classes},
                {"base_channels", c.model.base_channels},
                {"encoder_levels", c.model.encoder_levels},
                {"input_extent", c.model.input_extent},
                {"vit",
                 {{"patch_size", c.model.vit.patch_size},
                  {"embed_dim", c.model.vit.embed_dim},
                  {"heads", c.model.vit.heads},
                  {"layers", c.model.vit.layers},
                  {"mlp_ratio", c.model.vit.mlp_ratio}}}};
  j["cohort"] = {{"kind", kind_name(c.cohort.kind)}, {"scale", c.cohort.scale}, {"min_count", c.cohort.min_count}};
  j["participation"] = {{"fraction", c.participation}, {"dropped", c.dropped_clients}};
  j["dt"] = {{"epochs", c.dt_epochs}, {"schedule", schedule_name(c.dt_schedule)}, {"start", start_name(c.dt_start)}};
  j["augment"] = {{"enabled", c.augment.enabled},
                  {"probability", c.augment.probability},
                  {"max_rotation_deg", c.augment.max_rotation_deg},
                  {"min_scale", c.augment.min_scale},
                  {"max_scale", c.augment.max_scale},
                  {"max_noise_sigma", c.augment.max_noise_sigma},
                  {"max_bias_coefficient", c.augment.max_bias_coefficient},
                  {"elastic", c.augment.elastic},
                  {"elastic_sigma", c.augment.elastic_sigma},
                  {"elastic_grid", c.augment.elastic_grid}};
  j["eval_split"] = c.eval_split;
  j["execution"] = {{"mode", c.execution == Execution::serial ? "serial" : "parallel"}, {"threads", c.threads}};
  j["output_dir"] = c.output_dir;
  return j;
}

ExperimentConfig config_from_json(const nlohmann::json& input) {
  const json doc = input;
  std::string name = "desk";
  if (doc.is_object() && doc.contains("preset")) {
    if (!doc.at("preset").is_string()) fail("preset", "expected a string");
    name = doc.at("preset").get<std::string>();
  }
  ExperimentConfig c = preset(name);
  json merged = to_json(c);
  reject_unknown(doc, merged, "");
  merged.merge_patch(doc);

  c.seed = get_count(merged, "", "seed");
  c.rounds = get_count(merged, "", "rounds");
  c.local_epochs = get_count(merged, "", "local_epochs");
  c.batch_size = get_count(merged, "", "batch_size");
  c.learning_rate = get_number(merged, "", "learning_rate");
  try {
    c.loss = parse_loss_mode(get_string(merged, "", "loss"));
  } catch (const std::invalid_argument&) {
    fail("loss", "expected 'dice' or 'dice+ce'");
  }

  const auto& m = merged.at("model");
  c.model.in_modalities = get_count(m, "model", "in_modalities");
  c.model.num_classes = get_count(m, "model", "num_classes");
  c.model.base_channels = get_count(m, "model", "base_channels");
  c.model.encoder_levels = get_count(m, "model", "encoder_levels");
  c.model.input_extent = get_count(m, "model", "input_extent");
  const auto& v = m.at("vit");
  c.model.vit.patch_size = get_count(v, "model.vit", "patch_size");
  c.model.vit.embed_dim = get_count(v, "model.vit", "embed_dim");
  c.model.vit.heads = get_count(v, "model.vit", "heads");
  c.model.vit.layers = get_count(v, "model.vit", "layers");
  c.model.vit.mlp_ratio = get_count(v, "model.vit", "mlp_ratio");
  if (c.model.in_modalities != kNumModalities) fail("model.in_modalities", "the phantom cohort has 4 modalities");
  if (c.model.num_classes != kNumClasses) fail("model.num_classes", "the phantom cohort has 4 classes");

  const auto& co = merged.at("cohort");
  const auto kind = get_string(co, "cohort", "kind");
  if (kind == "sites")
    c.cohort.kind = CohortKind::sites;
  else if (kind == "strongly-noniid")
    c.cohort.kind = CohortKind::strongly_noniid;
  else
    fail("cohort.kind", "expected 'sites' or 'strongly-noniid'");
  c.cohort.scale = get_number(co, "cohort", "scale");
  c.cohort.min_count = get_count(co, "cohort", "min_count");

  const auto& p = merged.at("participation");
  c.participation = get_number(p, "participation", "fraction");
  const auto& dropped = field(p, "participation", "dropped");
  if (!dropped.is_array()) fail("participation.dropped", "expected an array of client ids");
  c.dropped_clients.clear();
  for (const auto& id : dropped) {
    if (!id.is_number_unsigned()) fail("participation.dropped", "expected non-negative integers");
    c.dropped_clients.push_back(id.get<std::size_t>());
  }

  const auto& dt = merged.at("dt");
  c.dt_epochs = get_count(dt, "dt", "epochs");
  const auto schedule = get_string(dt, "dt", "schedule");
  if (schedule == "final")
    c.dt_schedule = DtSchedule::final_round;
  else if (schedule == "per-round")
    c.dt_schedule = DtSchedule::per_round;
  else
    fail("dt.schedule", "expected 'final' or 'per-round'");
  const auto start = get_string(dt, "dt", "start");
  if (start == "global")
    c.dt_start = DtStart::global;
  else if (start == "previous-twin")
    c.dt_start = DtStart::previous_twin;
  else
    fail("dt.start", "expected 'global' or 'previous-twin'");

  const auto& a = merged.at("augment");
  c.augment.enabled = get_bool(a, "augment", "enabled");
  c.augment.probability = get_number(a, "augment", "probability");
  c.augment.max_rotation_deg = get_number(a, "augment", "max_rotation_deg");
  c.augment.min_scale = get_number(a, "augment", "min_scale");
  c.augment.max_scale = get_number(a, "augment", "max_scale");
  c.augment.max_noise_sigma = get_number(a, "augment", "max_noise_sigma");
  c.augment.max_bias_coefficient = get_number(a, "augment", "max_bias_coefficient");
  c.augment.elastic = get_bool(a, "augment", "elastic");
  c.augment.elastic_sigma = get_number(a, "augment", "elastic_sigma");
  c.augment.elastic_grid = get_count(a, "augment", "elastic_grid");

  c.eval_split = get_string(merged, "", "eval_split");
  const auto& ex = merged.at("execution");
  const auto mode = get_string(ex, "execution", "mode");
  if (mode == "serial")
    c.execution = Execution::serial;
  else if (mode == "parallel")
    c.execution = Execution::parallel;
  else
    fail("execution.mode", "expected 'serial' or 'parallel'");
  c.threads = get_count(ex, "execution", "threads");
  c.output_dir = get_string(merged, "", "output_dir");
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, true);  // comments allowed
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(doc);
}

std::string config_hash(const ExperimentConfig& config) {
  json j = to_json(config);
  j.erase("output_dir");
  j.erase("execution");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace twinseg
