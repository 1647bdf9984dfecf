#pragma once

#include <json.hpp>

#include <array>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "covidscreen/core/labels.hpp"

namespace covidscreen::metrics {

struct ScoredExample {
  std::string image_id;
  Label true_label = Label::kNormal;
  double score = 0.0;  // probability of the positive (COVID) class
  Label predicted_label = Label::kNormal;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // (0,0) ... (1,1), non-decreasing
  double auc = 0.0;
};

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

// 2pr / (p + r); zero when p + r == 0.
double f_measure(double precision, double recall);

// Threshold sweep over the distinct scores (descending). Equal scores form a
// single step, so ties contribute a diagonal segment and the trapezoidal area
// gives them half credit. Throws SingleClassInput unless both classes occur.
RocCurve roc_auc(std::span<const double> scores, std::span<const bool> positive);
RocCurve roc_auc(std::span<const ScoredExample> scored, Label positive_class);

Confusion confusion_at(std::span<const double> scores, std::span<const bool> positive,
                       double threshold = 0.5);

enum class EvalMode { kCT3, kCXRBinary };

struct ClassMetrics {
  double precision = 0.0, recall = 0.0, f_measure = 0.0;
  std::size_t support = 0;
};

struct EvalReport {
  EvalMode mode = EvalMode::kCT3;
  Label positive_class = Label::kCovid19;
  std::size_t n = 0;
  Confusion confusion;  // positive class vs rest at threshold 0.5
  double precision = 0.0;
  double recall = 0.0;
  double f_measure = 0.0;
  double accuracy = 0.0;
  double auc = 0.0;
  RocCurve roc;
  // Three-class view (argmax predictions), populated in kCT3 mode.
  std::array<std::array<std::size_t, 3>, 3> confusion3{};  // [true][predicted]
  std::array<ClassMetrics, 3> per_class{};
  double macro_precision = 0.0, macro_recall = 0.0, macro_f_measure = 0.0;
  double accuracy3 = 0.0;
  // Fraction of each subgroup predicted positive, keyed by label name.
  std::map<std::string, double> subgroup_fp_rate;
  std::vector<ScoredExample> examples;
};

EvalReport build_report(std::vector<ScoredExample> scored, EvalMode mode,
                        Label positive_class = Label::kCovid19);

// Fraction of `subgroup` members predicted positive (score >= 0.5). Throws
// EmptySubgroup when no member is present.
double false_positive_analysis(const EvalReport& report, Label subgroup);

// Table with columns Precision, Recall, F-measure, AUC, Accuracy.
std::string format_table(const EvalReport& report, const std::string& row_name);
nlohmann::json report_to_json(const EvalReport& report);
// One "fpr tpr" pair per line.
std::string roc_points_text(const RocCurve& roc);

}  // namespace covidscreen::metrics
