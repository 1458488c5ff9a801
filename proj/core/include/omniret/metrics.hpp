#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace omniret {

struct MetricRecord {
  std::uint64_t step = 0;
  int stage = 0;
  std::string task;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

/// One JSON object per line with keys in the fixed order
/// {step, stage, task, metric, value, seed}.
std::string metric_to_jsonl(const MetricRecord& r);

class MetricSink {
 public:
  virtual ~MetricSink() = default;
  virtual void write(const MetricRecord& r) = 0;
};

/// Buffers records in memory (tests, eval reports).
class CollectingSink : public MetricSink {
 public:
  void write(const MetricRecord& r) override { records_.push_back(r); }
  const std::vector<MetricRecord>& records() const { return records_; }

 private:
  std::vector<MetricRecord> records_;
};

/// Appends JSON Lines to a file, flushed per record.
class JsonlFileSink : public MetricSink {
 public:
  explicit JsonlFileSink(const std::string& path);
  ~JsonlFileSink() override;
  void write(const MetricRecord& r) override;

 private:
  struct Impl;
  Impl* impl_;
};

std::vector<MetricRecord> read_metrics_file(const std::string& path);

}  // namespace omniret
