#include "mmfal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

namespace mmfal {

using json = nlohmann::json;

std::vector<PatientPrediction> aggregate_patient(
    const std::vector<std::pair<const MultiModalSample*, PredictionState>>& predictions, Aggregation rule) {
  struct Acc {
    PredictionState sum;
    std::size_t n = 0;
    FibrosisStage truth = FibrosisStage::F0;
  };
  std::map<std::string, Acc> groups;
  for (const auto& [sample, state] : predictions) {
    auto& g = groups[sample->patient_id];
    g.truth = sample->stage;
    ++g.n;
    if (rule == Aggregation::MeanProbability) {
      for (std::size_t i = 0; i < kNumStages; ++i) g.sum.p[i] += state.p[i];
    } else {
      g.sum.p[static_cast<std::size_t>(ordinal(state.argmax()))] += 1.0;
    }
  }
  std::vector<PatientPrediction> out;
  out.reserve(groups.size());
  for (auto& [id, g] : groups) {
    PatientPrediction p{id, g.sum, FibrosisStage::F0, g.truth};
    for (auto& v : p.state.p) v /= static_cast<double>(g.n);
    p.predicted = p.state.argmax();
    out.push_back(std::move(p));
  }
  return out;
}

double accuracy(const std::vector<PatientPrediction>& preds) {
  if (preds.empty()) throw UndefinedMetric("accuracy of an empty prediction list");
  const auto correct = std::count_if(preds.begin(), preds.end(), [](const auto& p) { return p.predicted == p.truth; });
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw ArgumentError("rank_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetric("AUC undefined without both positives and negatives");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Count, for every positive, the negatives strictly below it plus half of
  // the negatives tied with it. Working with counts instead of mid-ranks
  // keeps the result an exact ratio of integers (up to the final division).
  double wins = 0.0;  // in half-units
  std::size_t negatives_below = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t pos_in_tie = 0, neg_in_tie = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      positive[order[j]] ? ++pos_in_tie : ++neg_in_tie;
      ++j;
    }
    wins += static_cast<double>(pos_in_tie) * (2.0 * static_cast<double>(negatives_below) + static_cast<double>(neg_in_tie));
    negatives_below += neg_in_tie;
    i = j;
  }
  return wins / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double ovr_auc(const std::vector<PatientPrediction>& preds, FibrosisStage stage) {
  std::vector<double> scores;
  std::vector<bool> positive;
  scores.reserve(preds.size());
  positive.reserve(preds.size());
  const auto k = static_cast<std::size_t>(ordinal(stage));
  for (const auto& p : preds) {
    scores.push_back(p.state.p[k]);
    positive.push_back(p.truth == stage);
  }
  try {
    return rank_auc(scores, positive);
  } catch (const UndefinedMetric&) {
    throw UndefinedMetric("AUC for stage " + std::string(to_string(stage)) +
                          " undefined: test set lacks positives or negatives");
  }
}

double macro_auc(const std::vector<PatientPrediction>& preds, bool skip_degenerate) {
  double total = 0.0;
  int used = 0;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    try {
      total += ovr_auc(preds, stage_from_ordinal(static_cast<int>(s)));
      ++used;
    } catch (const UndefinedMetric&) {
      if (!skip_degenerate) throw;
    }
  }
  if (used == 0) throw UndefinedMetric("macro AUC undefined: no stage has both positives and negatives");
  return total / used;
}

EvalReport evaluate(const std::vector<PatientPrediction>& preds, double labeled_fraction, bool skip_degenerate) {
  EvalReport r;
  r.accuracy = accuracy(preds);
  r.n_test_patients = preds.size();
  r.labeled_fraction = labeled_fraction;
  for (const auto& p : preds) ++r.stage_counts[static_cast<std::size_t>(ordinal(p.truth))];
  double total = 0.0;
  int used = 0;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    try {
      r.stage_auc[s] = ovr_auc(preds, stage_from_ordinal(static_cast<int>(s)));
      total += r.stage_auc[s];
      ++used;
    } catch (const UndefinedMetric&) {
      if (!skip_degenerate) throw;
      r.stage_auc[s] = std::numeric_limits<double>::quiet_NaN();
    }
  }
  if (used == 0) throw UndefinedMetric("macro AUC undefined: no stage has both positives and negatives");
  r.macro_auc = total / used;
  return r;
}

void to_json(json& j, const EvalReport& r) {
  j = json{{"accuracy", r.accuracy},
           {"macro_auc", r.macro_auc},
           {"d", r.labeled_fraction},
           {"n_test_patients", r.n_test_patients}};
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string suffix = "f" + std::to_string(s);
    j["auc_" + suffix] = std::isnan(r.stage_auc[s]) ? json(nullptr) : json(r.stage_auc[s]);
    j["counts_" + suffix] = r.stage_counts[s];
  }
}

void from_json(const json& j, EvalReport& r) {
  r = EvalReport{};
  r.accuracy = j.at("accuracy");
  r.macro_auc = j.at("macro_auc");
  r.labeled_fraction = j.at("d");
  r.n_test_patients = j.at("n_test_patients");
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string suffix = "f" + std::to_string(s);
    const auto& a = j.at("auc_" + suffix);
    r.stage_auc[s] = a.is_null() ? std::numeric_limits<double>::quiet_NaN() : a.get<double>();
    r.stage_counts[s] = j.value("counts_" + suffix, std::size_t{0});
  }
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

}  // namespace mmfal
