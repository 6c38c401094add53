#pragma once

// Append-only run record, serialized as step,seed,series,value CSV.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "divrl/error.hpp"

namespace divrl::run {

inline constexpr int kLogSchemaVersion = 1;

struct LogRow {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::string series;
  double value = 0.0;

  bool operator==(const LogRow&) const = default;
};

inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(std::uint64_t seed) { append(0, seed, "schema_version", kLogSchemaVersion); }

  void append(std::int64_t step, std::uint64_t seed, std::string series, double value) {
    const auto key = std::make_pair(seed, series);
    const auto it = last_step_.find(key);
    DIVRL_REQUIRE(it == last_step_.end() || it->second <= step, ContractViolation,
                  "log steps must not decrease within series '" + series + "'");
    last_step_[key] = step;
    rows_.push_back(LogRow{step, seed, std::move(series), value});
  }

  const std::vector<LogRow>& rows() const { return rows_; }

  /// Values of one series in row order.
  std::vector<double> series(const std::string& name) const {
    std::vector<double> out;
    for (const auto& r : rows_)
      if (r.series == name) out.push_back(r.value);
    return out;
  }
  std::vector<std::int64_t> steps(const std::string& name) const {
    std::vector<std::int64_t> out;
    for (const auto& r : rows_)
      if (r.series == name) out.push_back(r.step);
    return out;
  }

  std::string to_csv() const {
    std::string out = "step,seed,series,value\n";
    for (const auto& r : rows_) {
      out += std::to_string(r.step) + "," + std::to_string(r.seed) + "," + r.series + "," + format_value(r.value) + "\n";
    }
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write log '" + path + "'");
    f << to_csv();
  }

  /// Parses CSV text; a missing or different schema_version is a SchemaError.
  static RunLog from_csv(const std::string& text, const std::string& origin = "<log>") {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "step,seed,series,value")
      throw SchemaError(origin + ": missing header 'step,seed,series,value'");
    RunLog log;
    bool versioned = false;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string f[4];
      for (int k = 0; k < 4; ++k) {
        if (!std::getline(ls, f[k], k < 3 ? ',' : '\n'))
          throw SchemaError(origin + ":" + std::to_string(lineno) + ": expected 4 fields");
      }
      LogRow r;
      try {
        r.step = std::stoll(f[0]);
        r.seed = std::stoull(f[1]);
        r.series = f[2];
        r.value = std::stod(f[3]);
      } catch (const std::exception&) {
        throw SchemaError(origin + ":" + std::to_string(lineno) + ": malformed row");
      }
      if (r.series == "schema_version") {
        if (static_cast<int>(r.value) != kLogSchemaVersion)
          throw SchemaError(origin + ": schema_version " + f[3] + " (expected " + std::to_string(kLogSchemaVersion) + ")");
        versioned = true;
      }
      log.last_step_[std::make_pair(r.seed, r.series)] = r.step;
      log.rows_.push_back(std::move(r));
    }
    if (!versioned) throw SchemaError(origin + ": no schema_version row");
    return log;
  }

  static RunLog read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read log '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return from_csv(ss.str(), path);
  }

 private:
  std::vector<LogRow> rows_;
  std::map<std::pair<std::uint64_t, std::string>, std::int64_t> last_step_;
};

}  // namespace divrl::run
