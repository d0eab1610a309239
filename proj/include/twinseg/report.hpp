#pragma once

#include "twinseg/metrics.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace twinseg {

// Every CSV starts with a "# config_hash=<hash>" line; JSON documents carry
// a "config_hash" member. Absent values are empty CSV fields / JSON null.

nlohmann::ordered_json report_json(const MetricsReport& report);
/// {"config_hash", "model", "clients": [...]} for one model family.
std::string metrics_json(const std::vector<MetricsReport>& reports, const std::string& model,
                         const std::string& config_hash);

/// client,class,dice,iou,auc,sensitivity,specificity; clients x classes rows.
std::string per_class_csv(const std::vector<MetricsReport>& reports, const std::string& config_hash);

/// client,et_dice,tc_dice,wt_dice,et_iou,tc_iou,wt_iou,mean_fg_dice,mean_fg_iou,sensitivity,specificity
std::string client_summary_csv(const std::vector<MetricsReport>& reports, const std::string& config_hash);

/// Long format for plotting: client,model,metric,class,value.
std::string plot_long_csv(const std::vector<MetricsReport>& global, const std::vector<MetricsReport>& dt,
                          const std::string& config_hash);

/// client,model,class,fpr,tpr with each curve thinned to at most
/// `max_points` points (end points always kept).
std::string roc_csv(const std::vector<MetricsReport>& global, const std::vector<MetricsReport>& dt,
                    const std::string& config_hash, std::size_t max_points = 101);

/// round,mean_fg_dice,mean_fg_iou over clients, one row per stored round.
std::string round_curve_csv(const std::vector<std::vector<MetricsReport>>& per_round, const std::string& config_hash);

/// Unweighted mean over clients of the mean foreground Dice.
double mean_client_dice(const std::vector<MetricsReport>& reports);
double mean_client_iou(const std::vector<MetricsReport>& reports);

}  // namespace twinseg
