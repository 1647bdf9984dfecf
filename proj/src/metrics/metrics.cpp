#include "covidscreen/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "covidscreen/core/error.hpp"

namespace covidscreen::metrics {

double f_measure(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

RocCurve roc_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw ShapeMismatch("scores and labels differ in length");
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  const std::size_t n_neg = positive.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw SingleClassInput("ROC needs at least one positive and one negative example");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw InvalidArgument("non-finite score");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve roc;
  roc.points.push_back({0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  double area2 = 0.0;  // twice the area, in (fp, tp) count units
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t dtp = 0, dfp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      positive[order[j]] ? ++dtp : ++dfp;
      ++j;
    }
    area2 += static_cast<double>(dfp) * static_cast<double>(2 * tp + dtp);
    tp += dtp;
    fp += dfp;
    roc.points.push_back({static_cast<double>(fp) / static_cast<double>(n_neg),
                          static_cast<double>(tp) / static_cast<double>(n_pos)});
    i = j;
  }
  roc.auc = area2 / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
  return roc;
}

RocCurve roc_auc(std::span<const ScoredExample> scored, Label positive_class) {
  std::vector<double> scores;
  std::vector<char> pos;
  for (const auto& e : scored) {
    scores.push_back(e.score);
    pos.push_back(e.true_label == positive_class);
  }
  std::unique_ptr<bool[]> flags(new bool[pos.size()]);
  for (std::size_t i = 0; i < pos.size(); ++i) flags[i] = pos[i] != 0;
  return roc_auc(scores, std::span<const bool>(flags.get(), pos.size()));
}

Confusion confusion_at(std::span<const double> scores, std::span<const bool> positive,
                       double threshold) {
  if (scores.size() != positive.size()) throw ShapeMismatch("scores and labels differ in length");
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (predicted && positive[i]) ++c.tp;
    else if (predicted) ++c.fp;
    else if (positive[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
}

}  // namespace

EvalReport build_report(std::vector<ScoredExample> scored, EvalMode mode, Label positive_class) {
  if (scored.empty()) throw EmptySplit("no scored examples to evaluate");
  EvalReport r;
  r.mode = mode;
  r.positive_class = positive_class;
  r.n = scored.size();

  std::vector<double> scores;
  std::unique_ptr<bool[]> pos(new bool[scored.size()]);
  for (std::size_t i = 0; i < scored.size(); ++i) {
    scores.push_back(scored[i].score);
    pos[i] = scored[i].true_label == positive_class;
  }
  const std::span<const bool> positive(pos.get(), scored.size());
  r.confusion = confusion_at(scores, positive, 0.5);
  r.precision = ratio(r.confusion.tp, r.confusion.tp + r.confusion.fp);
  r.recall = ratio(r.confusion.tp, r.confusion.tp + r.confusion.fn);
  r.f_measure = f_measure(r.precision, r.recall);
  r.accuracy = ratio(r.confusion.tp + r.confusion.tn, r.n);
  try {
    r.roc = roc_auc(scores, positive);
    r.auc = r.roc.auc;
  } catch (const SingleClassInput&) {
    // AUC is undefined on single-class test sets; the report still carries
    // the threshold metrics.
    r.auc = std::nan("");
  }

  if (mode == EvalMode::kCT3) {
    for (const auto& e : scored) {
      ++r.confusion3[label_index(e.true_label)][label_index(e.predicted_label)];
    }
    std::size_t correct = 0;
    int classes = 0;
    for (int k = 0; k < 3; ++k) {
      std::size_t tp = r.confusion3[k][k];
      std::size_t pred = 0, truth = 0;
      for (int j = 0; j < 3; ++j) {
        pred += r.confusion3[j][k];
        truth += r.confusion3[k][j];
      }
      correct += tp;
      auto& m = r.per_class[k];
      m.support = truth;
      m.precision = ratio(tp, pred);
      m.recall = ratio(tp, truth);
      m.f_measure = f_measure(m.precision, m.recall);
      if (truth > 0 || pred > 0) {
        ++classes;
        r.macro_precision += m.precision;
        r.macro_recall += m.recall;
        r.macro_f_measure += m.f_measure;
      }
    }
    if (classes > 0) {
      r.macro_precision /= classes;
      r.macro_recall /= classes;
      r.macro_f_measure /= classes;
    }
    r.accuracy3 = ratio(correct, r.n);
  }

  for (Label label : kAllLabels) {
    if (label == positive_class) continue;
    std::size_t members = 0, flagged = 0;
    for (const auto& e : scored) {
      if (e.true_label != label) continue;
      ++members;
      flagged += e.score >= 0.5 ? 1 : 0;
    }
    if (members > 0) r.subgroup_fp_rate[std::string(to_string(label))] = ratio(flagged, members);
  }
  r.examples = std::move(scored);
  return r;
}

double false_positive_analysis(const EvalReport& report, Label subgroup) {
  std::size_t members = 0, flagged = 0;
  for (const auto& e : report.examples) {
    if (e.true_label != subgroup) continue;
    ++members;
    flagged += e.score >= 0.5 ? 1 : 0;
  }
  if (members == 0) {
    throw EmptySubgroup("no " + std::string(to_string(subgroup)) + " examples in the report");
  }
  return ratio(flagged, members);
}

std::string format_table(const EvalReport& report, const std::string& row_name) {
  char buf[256];
  std::ostringstream os;
  std::snprintf(buf, sizeof buf, "%-28s %-10s %-10s %-10s %-10s %-10s\n", "Method", "Precision",
                "Recall", "F-measure", "AUC", "Accuracy");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-28s %-10.3f %-10.3f %-10.3f %-10.3f %-10.3f\n",
                row_name.c_str(), report.precision, report.recall, report.f_measure, report.auc,
                report.accuracy);
  os << buf;
  return os.str();
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["mode"] = r.mode == EvalMode::kCT3 ? "ct3" : "cxr_binary";
  j["positive_class"] = std::string(to_string(r.positive_class));
  j["n"] = r.n;
  j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn},
                    {"fn", r.confusion.fn}};
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f_measure"] = r.f_measure;
  j["accuracy"] = r.accuracy;
  j["auc"] = std::isfinite(r.auc) ? nlohmann::json(r.auc) : nlohmann::json(nullptr);
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& p : r.roc.points) roc.push_back({p.fpr, p.tpr});
  j["roc_points"] = roc;
  if (r.mode == EvalMode::kCT3) {
    j["confusion3"] = r.confusion3;
    j["macro"] = {{"precision", r.macro_precision},
                  {"recall", r.macro_recall},
                  {"f_measure", r.macro_f_measure}};
    j["accuracy3"] = r.accuracy3;
    nlohmann::json per = nlohmann::json::object();
    for (Label label : kAllLabels) {
      const auto& m = r.per_class[label_index(label)];
      per[std::string(to_string(label))] = {{"precision", m.precision},
                                            {"recall", m.recall},
                                            {"f_measure", m.f_measure},
                                            {"support", m.support}};
    }
    j["per_class"] = per;
  }
  j["subgroup_fp_rate"] = r.subgroup_fp_rate;
  return j;
}

std::string roc_points_text(const RocCurve& roc) {
  std::ostringstream os;
  char buf[64];
  for (const auto& p : roc.points) {
    std::snprintf(buf, sizeof buf, "%.9f %.9f\n", p.fpr, p.tpr);
    os << buf;
  }
  return os.str();
}

}  // namespace covidscreen::metrics
