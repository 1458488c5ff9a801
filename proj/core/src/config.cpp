#include "omniret/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace omniret {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

json tasks_to_json(const std::vector<TaskSpec>& tasks) {
  json arr = json::array();
  for (const TaskSpec& t : tasks) {
    arr.push_back({{"name", t.name},
                   {"query", t.query_modalities},
                   {"target", t.target_modality},
                   {"composed", t.composed},
                   {"shift", t.class_shift}});
  }
  return arr;
}

std::vector<TaskSpec> tasks_from_json(const json& arr, const std::string& key) {
  if (!arr.is_array()) throw std::invalid_argument("config: " + key + " must be an array");
  std::vector<TaskSpec> out;
  for (const json& j : arr) {
    static const std::set<std::string> allowed = {"name", "query", "target", "composed",
                                                  "shift"};
    for (const auto& [k, _] : j.items()) {
      if (!allowed.count(k))
        throw std::invalid_argument("config: unknown task field '" + k + "' in " + key);
    }
    TaskSpec t;
    t.name = j.at("name").get<std::string>();
    t.query_modalities = j.at("query").get<std::vector<std::string>>();
    t.target_modality = j.at("target").get<std::string>();
    t.composed = j.value("composed", false);
    t.class_shift = j.value("shift", std::size_t{0});
    out.push_back(std::move(t));
  }
  return out;
}

/// Tracks which keys a parse consumed so leftovers can be reported.
class KeyReader {
 public:
  explicit KeyReader(const json& j) : j_(j) {
    if (!j.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& target) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    try {
      target = it->get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument(std::string("config: bad value type for key '") + key + "'");
    }
  }

  void get_tasks(const char* key, std::vector<TaskSpec>& target) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    target = tasks_from_json(*it, key);
  }

  void get_dims3(const char* key, std::array<std::size_t, 3>& target) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    auto v = it->get<std::vector<std::size_t>>();
    if (v.size() != 3)
      throw std::invalid_argument(std::string("config: key '") + key + "' needs 3 entries");
    std::copy(v.begin(), v.end(), target.begin());
  }

  void reject_unknown() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key))
        throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::set<std::string> seen_;
};

void read_stage(KeyReader& r, const std::string& prefix, StageConfig& s) {
  r.get((prefix + ".steps").c_str(), s.steps);
  r.get((prefix + ".lr").c_str(), s.lr);
  r.get((prefix + ".min_lr").c_str(), s.min_lr);
  r.get((prefix + ".warmup").c_str(), s.warmup);
  r.get((prefix + ".accum").c_str(), s.accum);
  r.get((prefix + ".tasks_per_batch").c_str(), s.tasks_per_batch);
  r.get((prefix + ".batch_size").c_str(), s.batch_size);
}

void write_stage(ordered_json& j, const std::string& prefix, const StageConfig& s) {
  j[prefix + ".steps"] = s.steps;
  j[prefix + ".lr"] = s.lr;
  j[prefix + ".min_lr"] = s.min_lr;
  j[prefix + ".warmup"] = s.warmup;
  j[prefix + ".accum"] = s.accum;
  j[prefix + ".tasks_per_batch"] = s.tasks_per_batch;
  j[prefix + ".batch_size"] = s.batch_size;
}

}  // namespace

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig cfg;
  cfg.settings = RunSettings::desk_default();
  if (name == "desk") return cfg;
  if (name == "paper") {
    RunSettings& s = cfg.settings;
    s.model.latents = 64;
    s.model.references = 128;
    s.model.projections = 4096;
    s.model.heads = 8;
    s.train.stage1 = StageConfig{1000, 5e-4, 1e-4, 100, 1, 6, 2048};
    s.train.stage2 = StageConfig{6000, 1e-4, 0.0, 0, 2, 4, 3072};
    return cfg;
  }
  throw std::invalid_argument("unknown preset '" + name + "' (expected desk or paper)");
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  cfg.settings = RunSettings::desk_default();
  RunSettings& s = cfg.settings;
  KeyReader r(j);

  r.get("seed", s.seed);
  r.get("out", s.out_dir);

  r.get("data.classes", s.data.classes);
  r.get("data.per_class", s.data.per_class);
  r.get("data.modalities", s.data.modalities);
  r.get("data.tokens_per_item", s.data.tokens_per_item);
  r.get("data.enc_dim", s.data.enc_dim);
  r.get("data.noise_scale", s.data.noise_scale);
  r.get_dims3("data.video_grid", s.data.video_grid);
  r.get("data.holdout_per_class", s.data.holdout_per_class);

  r.get("model.dim", s.model.dim);
  r.get("model.heads", s.model.heads);
  r.get("model.latents", s.model.latents);
  r.get("model.references", s.model.references);
  r.get("model.projections", s.model.projections);
  r.get("model.t_max", s.model.t_max);
  r.get("model.max_slots", s.model.max_slots);
  r.get_dims3("model.video_target", s.model.video_target);
  std::string pooling = s.model.pooling == Pooling::kAswp ? "aswp" : "mean";
  r.get("model.pooling", pooling);
  if (pooling == "aswp") {
    s.model.pooling = Pooling::kAswp;
  } else if (pooling == "mean") {
    s.model.pooling = Pooling::kMean;
  } else {
    throw std::invalid_argument("config: model.pooling must be 'aswp' or 'mean'");
  }

  r.get("loss.tau", s.loss.tau);
  r.get("loss.beta", s.loss.beta);
  r.get("loss.eta", s.loss.eta);
  r.get("loss.mu1", s.loss.mu1);
  r.get("loss.mu2", s.loss.mu2);
  r.get("loss.gamma", s.loss.gamma);
  r.get("loss.diversity_dropout", s.loss.diversity_dropout);
  r.get("loss.triplet_raw_cosine", s.loss.triplet_raw_cosine);

  read_stage(r, "train.stage1", s.train.stage1);
  read_stage(r, "train.stage2", s.train.stage2);
  r.get("train.weight_decay", s.train.weight_decay);
  r.get("train.adam_beta1", s.train.adam_beta1);
  r.get("train.adam_beta2", s.train.adam_beta2);
  r.get("train.adam_eps", s.train.adam_eps);
  r.get("train.datasets_per_task", s.train.datasets_per_task);
  r.get("train.shards_per_task", s.train.shards_per_task);
  r.get("train.eval_k", s.train.eval_k);
  r.get("train.log_every", s.train.log_every);

  r.get_tasks("tasks.stage1", s.stage1_tasks);
  r.get_tasks("tasks.stage2", s.stage2_tasks);

  r.reject_unknown();

  // Model and dataset modalities come from one key.
  s.model.modalities = s.data.modalities;
  s.model.enc_dim = s.data.enc_dim;
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config: cannot open file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return from_json_text(buf.str());
}

std::string RunConfig::to_json_text() const {
  const RunSettings& s = settings;
  ordered_json j;
  j["seed"] = s.seed;
  j["out"] = s.out_dir;
  j["data.classes"] = s.data.classes;
  j["data.per_class"] = s.data.per_class;
  j["data.modalities"] = s.data.modalities;
  j["data.tokens_per_item"] = s.data.tokens_per_item;
  j["data.enc_dim"] = s.data.enc_dim;
  j["data.noise_scale"] = s.data.noise_scale;
  j["data.video_grid"] = s.data.video_grid;
  j["data.holdout_per_class"] = s.data.holdout_per_class;
  j["model.dim"] = s.model.dim;
  j["model.heads"] = s.model.heads;
  j["model.latents"] = s.model.latents;
  j["model.references"] = s.model.references;
  j["model.projections"] = s.model.projections;
  j["model.t_max"] = s.model.t_max;
  j["model.max_slots"] = s.model.max_slots;
  j["model.video_target"] = s.model.video_target;
  j["model.pooling"] = s.model.pooling == Pooling::kAswp ? "aswp" : "mean";
  j["loss.tau"] = s.loss.tau;
  j["loss.beta"] = s.loss.beta;
  j["loss.eta"] = s.loss.eta;
  j["loss.mu1"] = s.loss.mu1;
  j["loss.mu2"] = s.loss.mu2;
  j["loss.gamma"] = s.loss.gamma;
  j["loss.diversity_dropout"] = s.loss.diversity_dropout;
  j["loss.triplet_raw_cosine"] = s.loss.triplet_raw_cosine;
  write_stage(j, "train.stage1", s.train.stage1);
  write_stage(j, "train.stage2", s.train.stage2);
  j["train.weight_decay"] = s.train.weight_decay;
  j["train.adam_beta1"] = s.train.adam_beta1;
  j["train.adam_beta2"] = s.train.adam_beta2;
  j["train.adam_eps"] = s.train.adam_eps;
  j["train.datasets_per_task"] = s.train.datasets_per_task;
  j["train.shards_per_task"] = s.train.shards_per_task;
  j["train.eval_k"] = s.train.eval_k;
  j["train.log_every"] = s.train.log_every;
  j["tasks.stage1"] = tasks_to_json(s.stage1_tasks);
  j["tasks.stage2"] = tasks_to_json(s.stage2_tasks);
  return j.dump(2);
}

}  // namespace omniret
