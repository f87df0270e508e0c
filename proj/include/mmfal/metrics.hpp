#pragma once

#include "mmfal/dataset.hpp"
#include "mmfal/fusion_net.hpp"

#include <json.hpp>

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace mmfal {

struct PatientPrediction {
  std::string patient_id;
  PredictionState state;
  FibrosisStage predicted = FibrosisStage::F0;
  FibrosisStage truth = FibrosisStage::F0;
};

enum class Aggregation { MeanProbability, MajorityVote };

/// Groups tuple predictions by patient (output sorted by patient_id).
/// MeanProbability averages the probability vectors; MajorityVote counts
/// per-tuple argmax votes and normalizes the counts. Ties go to the lower
/// stage either way.
std::vector<PatientPrediction> aggregate_patient(
    const std::vector<std::pair<const MultiModalSample*, PredictionState>>& predictions,
    Aggregation rule = Aggregation::MeanProbability);

/// Fraction of patients whose predicted stage equals the truth. Throws
/// UndefinedMetric on empty input.
double accuracy(const std::vector<PatientPrediction>& preds);

/// One-vs-rest AUC of score p_stage via rank sums with half credit for ties.
/// Throws UndefinedMetric when the stage has no positives or no negatives.
double ovr_auc(const std::vector<PatientPrediction>& preds, FibrosisStage stage);

/// Rank-based AUC on raw scores/labels; the primitive behind ovr_auc.
double rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

/// Unweighted mean of the five one-vs-rest AUCs. With `skip_degenerate`,
/// stages lacking positives or negatives are left out of the mean instead of
/// raising.
double macro_auc(const std::vector<PatientPrediction>& preds, bool skip_degenerate = false);

struct EvalReport {
  double accuracy = 0.0;
  std::array<double, kNumStages> stage_auc{};
  double macro_auc = 0.0;
  std::array<std::size_t, kNumStages> stage_counts{};
  double labeled_fraction = 1.0;
  std::size_t n_test_patients = 0;
};

EvalReport evaluate(const std::vector<PatientPrediction>& preds, double labeled_fraction, bool skip_degenerate = false);

/// Fixed field names: accuracy, auc_f0..auc_f4, macro_auc, d, n_test_patients
/// (plus counts_f0..counts_f4).
void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

/// Percent with two decimals, e.g. 24/34 → "70.59".
std::string format_percent(double fraction);

}  // namespace mmfal
