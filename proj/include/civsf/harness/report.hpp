#pragma once

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "civsf/errors.hpp"

namespace civsf {

struct ReportRow {
  std::string framework;
  std::string metric;
  std::string key;    // horizon bucket, region, corruption level, ...
  std::string value;  // as printed
};

// Results keyed by (framework, metric, key). Rendered as one aligned block
// per metric with a column per framework, or as long-format CSV.
class ReportTable {
 public:
  ReportTable() = default;
  explicit ReportTable(std::string title) : title_(std::move(title)) {}

  const std::string& title() const { return title_; }
  const std::vector<ReportRow>& rows() const { return rows_; }
  void add_note(std::string line) { notes_.push_back(std::move(line)); }
  const std::vector<std::string>& notes() const { return notes_; }

  void add(std::string framework, std::string metric, std::string key, std::string value) {
    for (auto& r : rows_)
      if (r.framework == framework && r.metric == metric && r.key == key) {
        r.value = std::move(value);
        return;
      }
    rows_.push_back({std::move(framework), std::move(metric), std::move(key), std::move(value)});
  }

  void add(std::string framework, std::string metric, std::string key, double value,
           int precision = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << value;
    add(std::move(framework), std::move(metric), std::move(key), os.str());
  }

  const std::string& cell(const std::string& framework, const std::string& metric,
                          const std::string& key) const {
    for (const auto& r : rows_)
      if (r.framework == framework && r.metric == metric && r.key == key) return r.value;
    throw RangeError("no cell (" + framework + ", " + metric + ", " + key + ")");
  }

  std::string to_text() const {
    std::ostringstream os;
    if (!title_.empty()) os << title_ << "\n";
    for (const auto& n : notes_) os << "# " << n << "\n";
    for (const auto& metric : unique([](const ReportRow& r) { return r.metric; })) {
      std::vector<std::string> fws, keys;
      for (const auto& r : rows_) {
        if (r.metric != metric) continue;
        if (std::find(fws.begin(), fws.end(), r.framework) == fws.end()) fws.push_back(r.framework);
        if (std::find(keys.begin(), keys.end(), r.key) == keys.end()) keys.push_back(r.key);
      }
      std::size_t kw = metric.size();
      for (const auto& k : keys) kw = std::max(kw, k.size());
      std::vector<std::size_t> cw;
      for (const auto& f : fws) {
        std::size_t w = f.size();
        for (const auto& r : rows_)
          if (r.metric == metric && r.framework == f) w = std::max(w, r.value.size());
        cw.push_back(w);
      }
      os << "\n" << std::left << std::setw(static_cast<int>(kw)) << metric;
      for (std::size_t i = 0; i < fws.size(); ++i)
        os << "  " << std::right << std::setw(static_cast<int>(cw[i])) << fws[i];
      os << "\n";
      for (const auto& k : keys) {
        os << std::left << std::setw(static_cast<int>(kw)) << k;
        for (std::size_t i = 0; i < fws.size(); ++i) {
          std::string v = "-";
          for (const auto& r : rows_)
            if (r.metric == metric && r.framework == fws[i] && r.key == k) v = r.value;
          os << "  " << std::right << std::setw(static_cast<int>(cw[i])) << v;
        }
        os << "\n";
      }
    }
    return os.str();
  }

  std::string to_csv() const {
    std::ostringstream os;
    for (const auto& n : notes_) os << "# " << n << "\n";
    os << "framework,metric,key,value\n";
    for (const auto& r : rows_)
      os << r.framework << "," << r.metric << "," << quote(r.key) << "," << r.value << "\n";
    return os.str();
  }

 private:
  template <typename F>
  std::vector<std::string> unique(F f) const {
    std::vector<std::string> out;
    for (const auto& r : rows_) {
      auto v = f(r);
      if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    }
    return out;
  }

  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += (c == '"') ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  }

  std::string title_;
  std::vector<std::string> notes_;
  std::vector<ReportRow> rows_;
};

inline constexpr const char* kReferenceLabel = "paper reference — not reproduced";

// Published numbers, copied verbatim as printed.
inline ReportTable render_reference_tables() {
  ReportTable t(std::string("Published reference numbers (") + kReferenceLabel + ")");
  t.add_note(std::string("label: ") + kReferenceLabel);

  const char* buckets[] = {"0 - 25 days", "25 - 50 days", "50 - 100 days",
                           "More than 100 days"};
  const char* soil_fc[4][2] = {
      {"0.0406", "0.0179"}, {"0.0429", "0.0184"}, {"0.0549", "0.0189"}, {"0.0678", "0.0204"}};
  for (int i = 0; i < 4; ++i) {
    t.add("SM-VSF", "soil forecast MAE", buckets[i], std::string(soil_fc[i][0]));
    t.add("CI-VSF", "soil forecast MAE", buckets[i], std::string(soil_fc[i][1]));
  }

  const char* fws[] = {"SM-MR", "MM-MR", "SM-VSF", "CI-VSF"};
  const char* regions[] = {"All", "T11SKA", "T15TUH", "T14SKC", "T16SBF", "T10SEJ", "T14RQT"};
  const char* soil_est[7][4] = {
      {"0.0615", "0.0458", "0.0483", "0.0282"}, {"0.1113", "0.0847", "0.1121", "0.0695"},
      {"0.1283", "0.1365", "0.1181", "0.0834"}, {"0.1159", "0.1275", "0.1312", "0.0958"},
      {"0.0821", "0.0631", "0.0895", "0.0544"}, {"0.1003", "0.0718", "0.1011", "0.0587"},
      {"0.0815", "0.0579", "0.0658", "0.0558"}};
  // "All" is in-region testing; the tile rows hold each tile out of training.
  for (int r = 0; r < 7; ++r)
    for (int f = 0; f < 4; ++f)
      t.add(fws[f], r == 0 ? "soil estimate MAE" : "soil estimate MAE (held-out region)",
            regions[r], std::string(soil_est[r][f]));

  const char* f1[] = {"0.5331", "0.5789", "0.5731", "0.6233"};
  for (int f = 0; f < 4; ++f) t.add(fws[f], "crop macro-F1", "Average", std::string(f1[f]));

  const char* levels[] = {"50%", "70%", "90%"};
  const char* missing[3][4] = {{"792.68", "788.94", "362.02", "326.43"},
                               {"820.46", "814.75", "394.32", "337.79"},
                               {"826.23", "820.43", "404.32", "343.88"}};
  for (int r = 0; r < 3; ++r)
    for (int f = 0; f < 4; ++f)
      t.add(fws[f], "missing image MSE", levels[r], std::string(missing[r][f]));

  const char* future[4][2] = {
      {"340.13", "237.21"}, {"591.54", "278.83"}, {"1093.62", "358.23"}, {"1112.84", "457.27"}};
  for (int i = 0; i < 4; ++i) {
    t.add("SM-VSF", "future image MSE", buckets[i], std::string(future[i][0]));
    t.add("CI-VSF", "future image MSE", buckets[i], std::string(future[i][1]));
  }
  return t;
}

}  // namespace civsf
