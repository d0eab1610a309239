#pragma once

#include "twinseg/volume.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace twinseg {

/// Per-voxel argmax of logits[C,D,H,W] (or [1,C,D,H,W]); ties go to the
/// lowest class.
LabelMap predict_labels(const Tensor& logits);

struct BinaryCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  BinaryCounts& operator+=(const BinaryCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const BinaryCounts&) const = default;
};

/// One-vs-rest counts per class.
using ConfusionCounts = std::array<BinaryCounts, kNumClasses>;

ConfusionCounts confusion_counts(const LabelMap& pred, const LabelMap& gt);
/// Counts for an arbitrary class subset treated as the positive label.
BinaryCounts binary_counts(const LabelMap& pred, const LabelMap& gt, std::span<const std::uint8_t> positive);

/// 2TP / (2TP+FP+FN); 1.0 when the class is absent from both volumes.
double dice_from(const BinaryCounts& c);
/// TP / (TP+FP+FN); 1.0 when the class is absent from both volumes.
double iou_from(const BinaryCounts& c);

double dice_score(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls);
double iou_score(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls);

struct SensSpec {
  std::optional<double> sensitivity;  // absent without positive ground truth
  std::optional<double> specificity;  // absent without negative ground truth
};

SensSpec sens_spec_from(const BinaryCounts& c);
/// Tumour (classes 1-3) against background.
SensSpec sensitivity_specificity(const LabelMap& pred, const LabelMap& gt);
BinaryCounts tumour_counts(const LabelMap& pred, const LabelMap& gt);

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (FPR, TPR), from (0,0) to (1,1)
  std::optional<double> auc;                      // absent for single-class ground truth
};

/// Threshold sweep over the distinct scores in descending order;
/// trapezoidal area.
RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// One-vs-rest ROC of class `cls` from probabilities[C,D,H,W] (or [1,C,...]).
RocCurve roc_auc(const Tensor& probabilities, const LabelMap& gt, std::uint8_t cls);

struct Subregions {
  // enhancing tumour {3}, tumour core {2,3}, whole tumour {1,2,3}
  double et_dice = 1.0, tc_dice = 1.0, wt_dice = 1.0;
  double et_iou = 1.0, tc_iou = 1.0, wt_iou = 1.0;
};

Subregions composite_subregions(const LabelMap& pred, const LabelMap& gt);

struct CompositeCounts {
  BinaryCounts et, tc, wt;
};
CompositeCounts composite_counts(const LabelMap& pred, const LabelMap& gt);
Subregions subregions_from(const CompositeCounts& c);

/// Pooled voxel-level evaluation of one model on one client's subjects.
struct MetricsReport {
  std::string client;
  std::size_t subjects = 0;
  ConfusionCounts counts{};
  BinaryCounts tumour{};
  CompositeCounts composite{};
  std::array<double, kNumClasses> dice{};
  std::array<double, kNumClasses> iou{};
  Subregions subregions;
  SensSpec micro;  // tumour vs background
  std::array<SensSpec, kNumClasses> per_class;
  std::array<std::optional<double>, kNumClasses> auc;
  std::array<RocCurve, kNumClasses> roc;
  double mean_foreground_dice = 0.0;  // classes 1-3
  double mean_foreground_iou = 0.0;
};

/// Accumulates predictions subject by subject, then derives every metric
/// from the summed counts and the pooled probabilities.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::string client = "") : client_(std::move(client)) {}

  /// probabilities[C,D,H,W] (or [1,C,...]) of one subject.
  void add(const Tensor& probabilities, const LabelMap& gt);
  MetricsReport report() const;

 private:
  std::string client_;
  std::size_t subjects_ = 0;
  ConfusionCounts counts_{};
  BinaryCounts tumour_{};
  CompositeCounts composite_{};
  std::array<std::vector<double>, kNumClasses> scores_;
  std::vector<std::uint8_t> labels_;
};

struct ComparisonRow {
  std::string client;
  double global_dice = 0.0, dt_dice = 0.0, delta_dice = 0.0;
  double global_iou = 0.0, dt_iou = 0.0, delta_iou = 0.0;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
  double mean_delta_dice = 0.0;
  double mean_delta_iou = 0.0;
  std::size_t dice_non_negative = 0;  // clients with delta_dice >= 0
};

/// Per-client mean foreground Dice/IoU of the global model against each
/// client's digital twin. Reports are matched by client name, in order.
ComparisonTable compare_global_vs_dt(const std::vector<MetricsReport>& global, const std::vector<MetricsReport>& dt);
ComparisonTable compare_rows(std::vector<ComparisonRow> rows);

std::string comparison_csv(const ComparisonTable& table, const std::string& config_hash);

}  // namespace twinseg
