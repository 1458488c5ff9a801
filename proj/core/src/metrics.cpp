#include "omniret/metrics.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace omniret {

std::string metric_to_jsonl(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["stage"] = r.stage;
  j["task"] = r.task;
  j["metric"] = r.metric;
  j["value"] = r.value;
  j["seed"] = r.seed;
  return j.dump();
}

struct JsonlFileSink::Impl {
  std::ofstream os;
};

JsonlFileSink::JsonlFileSink(const std::string& path) : impl_(new Impl) {
  impl_->os.open(path, std::ios::trunc);
  if (!impl_->os) {
    delete impl_;
    throw std::runtime_error("metrics: cannot open for writing: " + path);
  }
}

JsonlFileSink::~JsonlFileSink() { delete impl_; }

void JsonlFileSink::write(const MetricRecord& r) {
  impl_->os << metric_to_jsonl(r) << '\n';
  impl_->os.flush();
}

std::vector<MetricRecord> read_metrics_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("metrics: cannot open: " + path);
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    MetricRecord r;
    r.step = j.at("step").get<std::uint64_t>();
    r.stage = j.at("stage").get<int>();
    r.task = j.at("task").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace omniret
