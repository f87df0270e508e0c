#pragma once

#include "mmfal/dataset.hpp"
#include "mmfal/metrics.hpp"
#include "mmfal/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mmfal {

/// Index into the pool's tuple list; also the stable tie-break order.
using TupleId = std::size_t;

/// Active-learning bookkeeping over a fixed list of tuples. Each tuple is
/// either unlabeled (in X(t)) or labeled with a revealed stage.
class CandidatePool {
 public:
  CandidatePool() = default;
  explicit CandidatePool(std::vector<MultiModalSample> tuples);

  const std::vector<MultiModalSample>& tuples() const { return tuples_; }
  const MultiModalSample& tuple(TupleId id) const { return tuples_.at(id); }
  std::size_t initial_size() const { return tuples_.size(); }
  std::size_t unlabeled_count() const { return unlabeled_count_; }
  std::size_t labeled_count() const { return labels_.size(); }
  bool empty() const { return unlabeled_count_ == 0; }
  bool is_unlabeled(TupleId id) const { return id < tuples_.size() && state_[id] == 0; }

  /// Unlabeled ids in ascending order.
  std::vector<TupleId> unlabeled() const;
  const std::map<TupleId, FibrosisStage>& labeled() const { return labels_; }
  int iteration() const { return iteration_; }
  /// d(t) = |labeled| / initial pool size.
  double labeled_fraction() const;

  /// S^L(t): per modality, the sample ids still referenced by some
  /// unlabeled tuple.
  std::map<ModalityKind, std::set<std::string>> index_sets() const;
  /// Π_L |S^L(0)| summed per patient, i.e. the product cardinality at t = 0.
  std::size_t product_cardinality() const;

  /// Moves `ids` to the labeled set. Throws ArgumentError on unknown,
  /// already-labeled or repeated ids (pool unchanged).
  void label(const std::vector<TupleId>& ids, const std::vector<FibrosisStage>& stages);
  void advance() { ++iteration_; }
  void restore_iteration(int t) { iteration_ = t; }

 private:
  std::vector<MultiModalSample> tuples_;
  std::vector<std::uint8_t> state_;  // 0 unlabeled, 1 labeled
  std::size_t unlabeled_count_ = 0;
  std::map<TupleId, FibrosisStage> labels_;
  int iteration_ = 0;
};

enum class QueryStrategy { Random, Entropy, EntropyDropout };

std::string_view to_string(QueryStrategy s);
QueryStrategy parse_strategy(std::string_view token);

struct QueryConfig {
  QueryStrategy strategy = QueryStrategy::EntropyDropout;
  /// Tuples per iteration; 0 means 5% of the initial pool (at least 1).
  std::size_t n_query = 0;
  /// MC-dropout passes for ESD.
  int n_mc = 10;
  /// Class-stratified seed set size as a fraction of the pool (default 5%),
  /// used when seed_size is 0.
  double seed_fraction = 0.05;
  std::size_t seed_size = 0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t resolved_n_query(std::size_t pool_size) const;
  std::size_t resolved_seed_size(std::size_t pool_size) const;
};

void to_json(nlohmann::json& j, const QueryConfig& c);
void from_json(const nlohmann::json& j, QueryConfig& c);

struct Schedule {
  /// Stop after this many query rounds (negative: no limit).
  int max_iterations = -1;
  /// Upper bound on d: a round is skipped if its batch would push d past it.
  double max_budget = 1.0;
  /// Labeling one tuple reveals the patient's stage and labels all of that
  /// patient's tuples.
  bool propagate_patient_labels = false;
  /// Re-initialize the model before each round instead of fine-tuning.
  bool retrain_from_scratch = false;
  /// Average AUC over the stages that are present instead of failing.
  bool skip_degenerate_auc = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const Schedule& s);
void from_json(const nlohmann::json& j, Schedule& s);

/// H(P) = −Σ p log p in nats, 0·log 0 = 0.
double entropy(const PredictionState& p);

/// Class-stratified random seed set (largest-remainder allocation of
/// `seed_size` over stages by tuple count); labels revealed from the tuples.
CandidatePool init_pool(std::vector<MultiModalSample> tuples, std::size_t seed_size, Rng& rng);

/// min(n_query, |X(t)|) distinct unlabeled ids, uniformly without
/// replacement. Throws PoolExhausted on an empty pool.
std::vector<TupleId> select_random(const CandidatePool& pool, std::size_t n_query, Rng& rng);

/// Top n_query candidates by entropy; ties keep ascending id order.
std::vector<TupleId> select_by_entropy(const std::vector<TupleId>& candidates,
                                       const std::vector<PredictionState>& states, std::size_t n_query);

/// ES: deterministic forward on every unlabeled tuple.
std::vector<TupleId> select_entropy(const CandidatePool& pool, const Trainer& trainer, std::size_t n_query);

/// ESD: entropy of the mean of n_mc dropout predictions. Tuple k draws its
/// masks from an RNG seeded with derive_seed(mc_seed, k), so the result does
/// not depend on evaluation order.
std::vector<TupleId> select_entropy_dropout(const CandidatePool& pool, const Trainer& trainer, std::size_t n_query,
                                            int n_mc, std::uint64_t mc_seed);

/// Supplies stages for queried tuples.
class Oracle {
 public:
  virtual ~Oracle() = default;
  /// Returns one stage per id, or throws OracleTimeout.
  virtual std::vector<FibrosisStage> label(const CandidatePool& pool, const std::vector<TupleId>& ids) = 0;
};

/// Reads the ground truth carried by each tuple.
class SimulatedOracle final : public Oracle {
 public:
  std::vector<FibrosisStage> label(const CandidatePool& pool, const std::vector<TupleId>& ids) override;
};

/// Validates ids, asks the oracle, then labels and advances t. On any error
/// the pool is unchanged. With `propagate_patient_labels` every tuple of a
/// labeled patient is labeled too.
void apply_labels(CandidatePool& pool, const std::vector<TupleId>& ids, Oracle& oracle,
                  bool propagate_patient_labels = false);

struct ALRecord {
  int t = 0;
  double d = 0.0;
  std::size_t n_labeled = 0;
  QueryStrategy strategy = QueryStrategy::Random;
  double accuracy = 0.0;
  double macro_auc = 0.0;
  double wall_time_s = 0.0;
  std::vector<TupleId> selected;
  EvalReport eval;
};

struct ALHistory {
  std::vector<ALRecord> records;

  /// Highest macro AUC; earliest record on ties. Throws if empty.
  const ALRecord& best() const;
  /// Record whose d is closest to `d` (earliest on ties).
  const ALRecord& at_budget(double d) const;

  /// Columns t,d,n_labeled,strategy,accuracy,macro_auc,wall_time_s. With
  /// `include_wall_time` false the wall_time_s cells read NA so the file is
  /// a pure function of config and seeds.
  void write_csv(const std::filesystem::path& path, bool include_wall_time = false) const;
};

void to_json(nlohmann::json& j, const ALRecord& r);
void from_json(const nlohmann::json& j, ALRecord& r);

struct ALSetup {
  const std::vector<MultiModalSample>* train_tuples = nullptr;
  const std::vector<MultiModalSample>* test_tuples = nullptr;
  const ImageStore* images = nullptr;
  ModelConfig model;
  TrainConfig train;
  QueryConfig query;
  Schedule schedule;
  /// nullptr selects the simulated oracle.
  Oracle* oracle = nullptr;
  /// When set, model/optimizer/pool state is written here after every
  /// round, and `resume` continues from it.
  std::filesystem::path checkpoint_dir;
  bool resume = false;
  /// Called after each recorded round (progress, live status).
  std::function<void(const ALRecord&, const CandidatePool&)> on_record;
};

struct ALResult {
  ALHistory history;
  std::unique_ptr<FusionNet> model;
  bool completed = true;
};

/// Seed → train → evaluate, then repeat select → label → fine-tune →
/// evaluate until the pool is exhausted, max_iterations rounds ran or the
/// next batch would exceed max_budget.
ALResult run_al_loop(const ALSetup& setup);

/// Evaluates `trainer`'s model on tuples at patient level.
EvalReport evaluate_tuples(const Trainer& trainer, const std::vector<MultiModalSample>& tuples, double d,
                           bool skip_degenerate = false);

}  // namespace mmfal
