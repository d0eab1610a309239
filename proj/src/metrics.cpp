#include "twinseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace twinseg {

namespace {

struct ClassView {
  std::size_t classes, voxels;
  const double* data;
};

ClassView class_view(const Tensor& t, const char* op) {
  std::size_t offset = 0;
  if (t.dim() == 5) {
    if (t.size(0) != 1) throw std::invalid_argument(std::string(op) + ": expected a single subject");
    offset = 1;
  } else if (t.dim() != 4) {
    throw std::invalid_argument(std::string(op) + ": expected [C,D,H,W], got " + shape_string(t.shape()));
  }
  const std::size_t C = t.size(offset);
  return {C, t.numel() / C, t.data()};
}

void require_same_extent(const LabelMap& pred, const LabelMap& gt) {
  if (pred.extent != gt.extent || pred.size() != gt.size())
    throw std::invalid_argument("metrics: prediction and ground truth differ in extent");
}

BinaryCounts count_mask(const LabelMap& pred, const LabelMap& gt, auto&& positive) {
  require_same_extent(pred, gt);
  BinaryCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = positive(pred.data[i]), g = positive(gt.data[i]);
    if (p && g)
      ++c.tp;
    else if (p)
      ++c.fp;
    else if (g)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

}  // namespace

LabelMap predict_labels(const Tensor& logits) {
  const auto v = class_view(logits, "predict_labels");
  const auto& s = logits.shape();
  const std::size_t off = s.size() - 3;
  LabelMap out({s[off], s[off + 1], s[off + 2]});
  for (std::size_t i = 0; i < v.voxels; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < v.classes; ++c)
      if (v.data[c * v.voxels + i] > v.data[best * v.voxels + i]) best = c;
    out.data[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

ConfusionCounts confusion_counts(const LabelMap& pred, const LabelMap& gt) {
  require_same_extent(pred, gt);
  ConfusionCounts out{};
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto p = pred.data[i], g = gt.data[i];
    if (p >= kNumClasses || g >= kNumClasses) throw std::invalid_argument("metrics: label out of range");
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const bool pc = p == c, gc = g == c;
      auto& k = out[c];
      if (pc && gc)
        ++k.tp;
      else if (pc)
        ++k.fp;
      else if (gc)
        ++k.fn;
      else
        ++k.tn;
    }
  }
  return out;
}

BinaryCounts binary_counts(const LabelMap& pred, const LabelMap& gt, std::span<const std::uint8_t> positive) {
  return count_mask(pred, gt, [&](std::uint8_t v) { return std::find(positive.begin(), positive.end(), v) != positive.end(); });
}

double dice_from(const BinaryCounts& c) {
  const auto denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

double iou_from(const BinaryCounts& c) {
  const auto denom = c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double dice_score(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls) {
  return dice_from(count_mask(pred, gt, [cls](std::uint8_t v) { return v == cls; }));
}

double iou_score(const LabelMap& pred, const LabelMap& gt, std::uint8_t cls) {
  return iou_from(count_mask(pred, gt, [cls](std::uint8_t v) { return v == cls; }));
}

SensSpec sens_spec_from(const BinaryCounts& c) {
  SensSpec s;
  if (c.tp + c.fn > 0) s.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0) s.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return s;
}

BinaryCounts tumour_counts(const LabelMap& pred, const LabelMap& gt) {
  return count_mask(pred, gt, [](std::uint8_t v) { return v != background; });
}

SensSpec sensitivity_specificity(const LabelMap& pred, const LabelMap& gt) {
  return sens_spec_from(tumour_counts(pred, gt));
}

RocCurve roc_curve(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("roc: scores and labels differ in length");
  std::size_t P = 0;
  for (auto p : positive) P += p ? 1 : 0;
  const std::size_t Nn = positive.size() - P;
  RocCurve out;
  out.points.emplace_back(0.0, 0.0);
  if (P == 0 || Nn == 0) return out;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t tp = 0, fp = 0;
  double area = 0.0, last_fpr = 0.0, last_tpr = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == threshold; ++i) (positive[order[i]] ? tp : fp) += 1;
    const double fpr = static_cast<double>(fp) / static_cast<double>(Nn);
    const double tpr = static_cast<double>(tp) / static_cast<double>(P);
    area += (fpr - last_fpr) * (tpr + last_tpr) / 2.0;
    out.points.emplace_back(fpr, tpr);
    last_fpr = fpr;
    last_tpr = tpr;
  }
  out.auc = area;
  return out;
}

RocCurve roc_auc(const Tensor& probabilities, const LabelMap& gt, std::uint8_t cls) {
  const auto v = class_view(probabilities, "roc_auc");
  if (v.voxels != gt.size()) throw std::invalid_argument("roc_auc: probabilities and labels differ in extent");
  if (cls >= v.classes) throw std::invalid_argument("roc_auc: class out of range");
  std::vector<std::uint8_t> positive(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) positive[i] = gt.data[i] == cls;
  return roc_curve({v.data + cls * v.voxels, v.voxels}, positive);
}

CompositeCounts composite_counts(const LabelMap& pred, const LabelMap& gt) {
  return {count_mask(pred, gt, [](std::uint8_t v) { return v == enhancing_tumor; }),
          count_mask(pred, gt, [](std::uint8_t v) { return v == tumor_core || v == enhancing_tumor; }),
          count_mask(pred, gt, [](std::uint8_t v) { return v != background; })};
}

Subregions subregions_from(const CompositeCounts& c) {
  return {dice_from(c.et), dice_from(c.tc), dice_from(c.wt), iou_from(c.et), iou_from(c.tc), iou_from(c.wt)};
}

Subregions composite_subregions(const LabelMap& pred, const LabelMap& gt) {
  return subregions_from(composite_counts(pred, gt));
}

void MetricsAccumulator::add(const Tensor& probabilities, const LabelMap& gt) {
  const auto v = class_view(probabilities, "metrics");
  if (v.classes != kNumClasses || v.voxels != gt.size())
    throw std::invalid_argument("metrics: probabilities " + shape_string(probabilities.shape()) +
                                " do not match the label map");
  const LabelMap pred = predict_labels(probabilities);
  const auto cc = confusion_counts(pred, gt);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    counts_[c] += cc[c];
    scores_[c].insert(scores_[c].end(), v.data + c * v.voxels, v.data + (c + 1) * v.voxels);
  }
  tumour_ += tumour_counts(pred, gt);
  const auto comp = composite_counts(pred, gt);
  composite_.et += comp.et;
  composite_.tc += comp.tc;
  composite_.wt += comp.wt;
  labels_.insert(labels_.end(), gt.data.begin(), gt.data.end());
  ++subjects_;
}

MetricsReport MetricsAccumulator::report() const {
  MetricsReport r;
  r.client = client_;
  r.subjects = subjects_;
  r.counts = counts_;
  r.tumour = tumour_;
  r.composite = composite_;
  r.subregions = subregions_from(composite_);
  r.micro = sens_spec_from(tumour_);
  std::vector<std::uint8_t> positive(labels_.size());
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    r.dice[c] = dice_from(counts_[c]);
    r.iou[c] = iou_from(counts_[c]);
    r.per_class[c] = sens_spec_from(counts_[c]);
    for (std::size_t i = 0; i < labels_.size(); ++i) positive[i] = labels_[i] == c;
    r.roc[c] = roc_curve(scores_[c], positive);
    r.auc[c] = r.roc[c].auc;
  }
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    r.mean_foreground_dice += r.dice[c] / static_cast<double>(kNumClasses - 1);
    r.mean_foreground_iou += r.iou[c] / static_cast<double>(kNumClasses - 1);
  }
  return r;
}

ComparisonTable compare_rows(std::vector<ComparisonRow> rows) {
  ComparisonTable t;
  for (auto& row : rows) {
    row.delta_dice = row.dt_dice - row.global_dice;
    row.delta_iou = row.dt_iou - row.global_iou;
    t.mean_delta_dice += row.delta_dice;
    t.mean_delta_iou += row.delta_iou;
    if (row.delta_dice >= 0.0) ++t.dice_non_negative;
  }
  if (!rows.empty()) {
    t.mean_delta_dice /= static_cast<double>(rows.size());
    t.mean_delta_iou /= static_cast<double>(rows.size());
  }
  t.rows = std::move(rows);
  return t;
}

ComparisonTable compare_global_vs_dt(const std::vector<MetricsReport>& global, const std::vector<MetricsReport>& dt) {
  if (global.size() != dt.size())
    throw std::invalid_argument("compare: " + std::to_string(global.size()) + " global reports vs " +
                                std::to_string(dt.size()) + " digital-twin reports");
  std::vector<ComparisonRow> rows;
  for (std::size_t k = 0; k < global.size(); ++k) {
    if (global[k].client != dt[k].client)
      throw std::invalid_argument("compare: client mismatch at row " + std::to_string(k) + ": '" + global[k].client +
                                  "' vs '" + dt[k].client + "'");
    rows.push_back({global[k].client, global[k].mean_foreground_dice, dt[k].mean_foreground_dice, 0.0,
                    global[k].mean_foreground_iou, dt[k].mean_foreground_iou, 0.0});
  }
  return compare_rows(std::move(rows));
}

std::string comparison_csv(const ComparisonTable& table, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\n";
  out += "client,global_mean_fg_dice,dt_mean_fg_dice,delta_dice,global_mean_fg_iou,dt_mean_fg_iou,delta_iou\n";
  char line[256];
  for (const auto& r : table.rows) {
    std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%+.6f,%.6f,%.6f,%+.6f\n", r.client.c_str(), r.global_dice,
                  r.dt_dice, r.delta_dice, r.global_iou, r.dt_iou, r.delta_iou);
    out += line;
  }
  std::snprintf(line, sizeof(line), "mean,,,%+.6f,,,%+.6f\n", table.mean_delta_dice, table.mean_delta_iou);
  out += line;
  return out;
}

}  // namespace twinseg
