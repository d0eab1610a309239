#include "twinseg/report.hpp"

#include <cstdio>
#include <optional>

namespace twinseg {

namespace {

std::string header(const std::string& hash) { return "# config_hash=" + hash + "\n"; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

nlohmann::ordered_json opt(const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nullptr; }

nlohmann::ordered_json counts_json(const BinaryCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
}

}  // namespace

double mean_client_dice(const std::vector<MetricsReport>& reports) {
  double s = 0.0;
  for (const auto& r : reports) s += r.mean_foreground_dice;
  return reports.empty() ? 0.0 : s / static_cast<double>(reports.size());
}

double mean_client_iou(const std::vector<MetricsReport>& reports) {
  double s = 0.0;
  for (const auto& r : reports) s += r.mean_foreground_iou;
  return reports.empty() ? 0.0 : s / static_cast<double>(reports.size());
}

nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["client"] = r.client;
  j["subjects"] = r.subjects;
  j["mean_foreground_dice"] = r.mean_foreground_dice;
  j["mean_foreground_iou"] = r.mean_foreground_iou;
  j["sensitivity"] = opt(r.micro.sensitivity);
  j["specificity"] = opt(r.micro.specificity);
  j["subregions"] = {{"ET", {{"dice", r.subregions.et_dice}, {"iou", r.subregions.et_iou}}},
                     {"TC", {{"dice", r.subregions.tc_dice}, {"iou", r.subregions.tc_iou}}},
                     {"WT", {{"dice", r.subregions.wt_dice}, {"iou", r.subregions.wt_iou}}}};
  j["classes"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < kNumClasses; ++c)
    j["classes"].push_back({{"class", kClassNames[c]},
                            {"dice", r.dice[c]},
                            {"iou", r.iou[c]},
                            {"auc", opt(r.auc[c])},
                            {"sensitivity", opt(r.per_class[c].sensitivity)},
                            {"specificity", opt(r.per_class[c].specificity)},
                            {"counts", counts_json(r.counts[c])}});
  j["tumour_counts"] = counts_json(r.tumour);
  return j;
}

std::string metrics_json(const std::vector<MetricsReport>& reports, const std::string& model,
                         const std::string& config_hash) {
  nlohmann::ordered_json doc;
  doc["config_hash"] = config_hash;
  doc["model"] = model;
  doc["mean_client_dice"] = mean_client_dice(reports);
  doc["mean_client_iou"] = mean_client_iou(reports);
  doc["clients"] = nlohmann::ordered_json::array();
  for (const auto& r : reports) doc["clients"].push_back(report_json(r));
  return doc.dump(2) + "\n";
}

std::string per_class_csv(const std::vector<MetricsReport>& reports, const std::string& config_hash) {
  std::string out = header(config_hash) + "client,class,dice,iou,auc,sensitivity,specificity\n";
  for (const auto& r : reports)
    for (std::size_t c = 0; c < kNumClasses; ++c)
      out += r.client + "," + kClassNames[c] + "," + fmt(r.dice[c]) + "," + fmt(r.iou[c]) + "," + fmt(r.auc[c]) +
             "," + fmt(r.per_class[c].sensitivity) + "," + fmt(r.per_class[c].specificity) + "\n";
  return out;
}

std::string client_summary_csv(const std::vector<MetricsReport>& reports, const std::string& config_hash) {
  std::string out = header(config_hash) +
                    "client,et_dice,tc_dice,wt_dice,et_iou,tc_iou,wt_iou,mean_fg_dice,mean_fg_iou,sensitivity,"
                    "specificity\n";
  for (const auto& r : reports) {
    const auto& s = r.subregions;
    out += r.client + "," + fmt(s.et_dice) + "," + fmt(s.tc_dice) + "," + fmt(s.wt_dice) + "," + fmt(s.et_iou) +
           "," + fmt(s.tc_iou) + "," + fmt(s.wt_iou) + "," + fmt(r.mean_foreground_dice) + "," +
           fmt(r.mean_foreground_iou) + "," + fmt(r.micro.sensitivity) + "," + fmt(r.micro.specificity) + "\n";
  }
  return out;
}

std::string plot_long_csv(const std::vector<MetricsReport>& global, const std::vector<MetricsReport>& dt,
                          const std::string& config_hash) {
  std::string out = header(config_hash) + "client,model,metric,class,value\n";
  auto emit = [&](const std::vector<MetricsReport>& reports, const char* model) {
    for (const auto& r : reports)
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        const std::string prefix = r.client + "," + model + ",";
        const std::string cls = std::string(",") + kClassNames[c] + ",";
        out += prefix + "dice" + cls + fmt(r.dice[c]) + "\n";
        out += prefix + "iou" + cls + fmt(r.iou[c]) + "\n";
        if (r.auc[c]) out += prefix + "auc" + cls + fmt(*r.auc[c]) + "\n";
      }
  };
  emit(global, "global");
  emit(dt, "dt");
  return out;
}

std::string roc_csv(const std::vector<MetricsReport>& global, const std::vector<MetricsReport>& dt,
                    const std::string& config_hash, std::size_t max_points) {
  std::string out = header(config_hash) + "client,model,class,fpr,tpr\n";
  auto emit = [&](const std::vector<MetricsReport>& reports, const char* model) {
    for (const auto& r : reports)
      for (std::size_t c = 0; c < kNumClasses; ++c) {
        const auto& pts = r.roc[c].points;
        if (!r.roc[c].auc) continue;
        const std::size_t n = pts.size();
        const std::size_t keep = std::min(n, std::max<std::size_t>(2, max_points));
        for (std::size_t i = 0; i < keep; ++i) {
          const std::size_t j = keep == 1 ? 0 : i * (n - 1) / (keep - 1);
          out += r.client + "," + model + "," + kClassNames[c] + "," + fmt(pts[j].first) + "," + fmt(pts[j].second) +
                 "\n";
        }
      }
  };
  emit(global, "global");
  emit(dt, "dt");
  return out;
}

std::string round_curve_csv(const std::vector<std::vector<MetricsReport>>& per_round, const std::string& config_hash) {
  std::string out = header(config_hash) + "round,mean_fg_dice,mean_fg_iou\n";
  for (std::size_t r = 0; r < per_round.size(); ++r)
    out += std::to_string(r) + "," + fmt(mean_client_dice(per_round[r])) + "," + fmt(mean_client_iou(per_round[r])) +
           "\n";
  return out;
}

}  // namespace twinseg
