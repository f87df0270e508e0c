#include "mmfal/active_learning.hpp"

#include "mmfal/checkpoint.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mmfal {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// CandidatePool
// ---------------------------------------------------------------------------

CandidatePool::CandidatePool(std::vector<MultiModalSample> tuples)
    : tuples_(std::move(tuples)), state_(tuples_.size(), 0), unlabeled_count_(tuples_.size()) {}

std::vector<TupleId> CandidatePool::unlabeled() const {
  std::vector<TupleId> out;
  out.reserve(unlabeled_count_);
  for (TupleId i = 0; i < state_.size(); ++i) {
    if (state_[i] == 0) out.push_back(i);
  }
  return out;
}

double CandidatePool::labeled_fraction() const {
  if (tuples_.empty()) return 0.0;
  return static_cast<double>(labels_.size()) / static_cast<double>(tuples_.size());
}

std::map<ModalityKind, std::set<std::string>> CandidatePool::index_sets() const {
  std::map<ModalityKind, std::set<std::string>> sets;
  for (TupleId i = 0; i < tuples_.size(); ++i) {
    if (state_[i] != 0) continue;
    for (const auto& [m, s] : tuples_[i].parts) sets[m].insert(s.sample_id);
  }
  return sets;
}

std::size_t CandidatePool::product_cardinality() const {
  // Per patient the initial tuples are the full product of its index sets.
  std::map<std::string, std::map<ModalityKind, std::set<std::string>>> per_patient;
  for (const auto& t : tuples_) {
    for (const auto& [m, s] : t.parts) per_patient[t.patient_id][m].insert(s.sample_id);
  }
  std::size_t total = 0;
  for (const auto& [pid, sets] : per_patient) {
    std::size_t product = 1;
    for (const auto& [m, ids] : sets) product *= ids.size();
    total += product;
  }
  return total;
}

void CandidatePool::label(const std::vector<TupleId>& ids, const std::vector<FibrosisStage>& stages) {
  if (ids.size() != stages.size()) throw ArgumentError("label: ids and stages differ in length");
  std::set<TupleId> seen;
  for (TupleId id : ids) {
    if (id >= tuples_.size()) throw ArgumentError("unknown tuple id " + std::to_string(id));
    if (state_[id] != 0) throw ArgumentError("tuple " + std::to_string(id) + " is already labeled");
    if (!seen.insert(id).second) throw ArgumentError("tuple " + std::to_string(id) + " selected twice");
  }
  for (std::size_t k = 0; k < ids.size(); ++k) {
    state_[ids[k]] = 1;
    labels_.emplace(ids[k], stages[k]);
  }
  unlabeled_count_ -= ids.size();
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

std::string_view to_string(QueryStrategy s) {
  switch (s) {
    case QueryStrategy::Random: return "RAND";
    case QueryStrategy::Entropy: return "ES";
    case QueryStrategy::EntropyDropout: return "ESD";
  }
  return "?";
}

QueryStrategy parse_strategy(std::string_view token) {
  if (token == "RAND") return QueryStrategy::Random;
  if (token == "ES") return QueryStrategy::Entropy;
  if (token == "ESD") return QueryStrategy::EntropyDropout;
  throw ParseError("unknown query strategy '" + std::string(token) + "' (expected RAND, ES or ESD)");
}

void QueryConfig::validate() const {
  if (strategy == QueryStrategy::EntropyDropout && n_mc < 2) throw ConfigError("ESD needs n_mc >= 2");
  if (!(seed_fraction > 0.0 && seed_fraction <= 1.0)) throw ConfigError("seed_fraction must lie in (0, 1]");
}

std::size_t QueryConfig::resolved_n_query(std::size_t pool_size) const {
  if (n_query > 0) return n_query;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(0.05 * static_cast<double>(pool_size) + 1e-9)));
}

std::size_t QueryConfig::resolved_seed_size(std::size_t pool_size) const {
  if (seed_size > 0) return seed_size;
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(seed_fraction * static_cast<double>(pool_size) + 1e-9)));
}

void to_json(json& j, const QueryConfig& c) {
  j = json{{"strategy", std::string(to_string(c.strategy))},
           {"n_query", c.n_query},
           {"n_mc", c.n_mc},
           {"seed_fraction", c.seed_fraction},
           {"seed_size", c.seed_size},
           {"seed", c.seed}};
}

void from_json(const json& j, QueryConfig& c) {
  c = QueryConfig{};
  if (!j.is_object()) throw SchemaError("query config must be an object");
  try {
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.n_query = j.value("n_query", c.n_query);
    c.n_mc = j.value("n_mc", c.n_mc);
    c.seed_fraction = j.value("seed_fraction", c.seed_fraction);
    c.seed_size = j.value("seed_size", c.seed_size);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("query config: ") + e.what());
  }
}

void Schedule::validate() const {
  if (!(max_budget > 0.0 && max_budget <= 1.0)) throw ConfigError("max_budget must lie in (0, 1]");
}

void to_json(json& j, const Schedule& s) {
  j = json{{"max_iterations", s.max_iterations},
           {"max_budget", s.max_budget},
           {"propagate_patient_labels", s.propagate_patient_labels},
           {"retrain_from_scratch", s.retrain_from_scratch},
           {"skip_degenerate_auc", s.skip_degenerate_auc}};
}

void from_json(const json& j, Schedule& s) {
  s = Schedule{};
  if (!j.is_object()) throw SchemaError("schedule must be an object");
  try {
    s.max_iterations = j.value("max_iterations", s.max_iterations);
    s.max_budget = j.value("max_budget", s.max_budget);
    s.propagate_patient_labels = j.value("propagate_patient_labels", s.propagate_patient_labels);
    s.retrain_from_scratch = j.value("retrain_from_scratch", s.retrain_from_scratch);
    s.skip_degenerate_auc = j.value("skip_degenerate_auc", s.skip_degenerate_auc);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("schedule: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Query strategies
// ---------------------------------------------------------------------------

double entropy(const PredictionState& p) {
  double h = 0.0;
  for (double v : p.p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

CandidatePool init_pool(std::vector<MultiModalSample> tuples, std::size_t seed_size, Rng& rng) {
  if (seed_size < 1 || seed_size > tuples.size()) {
    throw ArgumentError("seed_size must lie in [1, " + std::to_string(tuples.size()) + "], got " +
                        std::to_string(seed_size));
  }
  CandidatePool pool(std::move(tuples));
  const auto& all = pool.tuples();

  std::array<std::vector<TupleId>, kNumStages> by_stage;
  for (TupleId i = 0; i < all.size(); ++i) by_stage[static_cast<std::size_t>(ordinal(all[i].stage))].push_back(i);

  // Largest-remainder apportionment of the seed over stages.
  std::array<std::size_t, kNumStages> quota{};
  std::array<double, kNumStages> remainder{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const double exact = static_cast<double>(seed_size) * static_cast<double>(by_stage[s].size()) /
                         static_cast<double>(all.size());
    quota[s] = static_cast<std::size_t>(std::floor(exact));
    remainder[s] = exact - static_cast<double>(quota[s]);
    assigned += quota[s];
  }
  std::array<std::size_t, kNumStages> order{0, 1, 2, 3, 4};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < seed_size; k = (k + 1) % kNumStages) {
    const std::size_t s = order[k];
    if (quota[s] < by_stage[s].size()) {
      ++quota[s];
      ++assigned;
    }
  }

  std::vector<TupleId> seed;
  std::vector<FibrosisStage> stages;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    auto ids = by_stage[s];
    shuffle_in_place(ids, rng);
    for (std::size_t k = 0; k < quota[s]; ++k) {
      seed.push_back(ids[k]);
      stages.push_back(all[ids[k]].stage);
    }
  }
  pool.label(seed, stages);
  return pool;
}

std::vector<TupleId> select_random(const CandidatePool& pool, std::size_t n_query, Rng& rng) {
  if (pool.empty()) throw PoolExhausted("candidate pool is empty");
  auto ids = pool.unlabeled();
  const std::size_t n = std::min(n_query, ids.size());
  // Partial Fisher-Yates: the first n slots become a uniform sample.
  for (std::size_t i = 0; i < n; ++i) std::swap(ids[i], ids[i + uniform_index(rng, ids.size() - i)]);
  ids.resize(n);
  return ids;
}

std::vector<TupleId> select_by_entropy(const std::vector<TupleId>& candidates,
                                       const std::vector<PredictionState>& states, std::size_t n_query) {
  if (candidates.empty()) throw PoolExhausted("candidate pool is empty");
  if (candidates.size() != states.size()) throw ArgumentError("select_by_entropy: size mismatch");
  std::vector<std::pair<double, TupleId>> scored;
  scored.reserve(candidates.size());
  for (std::size_t k = 0; k < candidates.size(); ++k) scored.emplace_back(entropy(states[k]), candidates[k]);
  const std::size_t n = std::min(n_query, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                    [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::vector<TupleId> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.push_back(scored[k].second);
  return out;
}

namespace {

std::vector<const MultiModalSample*> pointers(const CandidatePool& pool, const std::vector<TupleId>& ids) {
  std::vector<const MultiModalSample*> out;
  out.reserve(ids.size());
  for (TupleId id : ids) out.push_back(&pool.tuple(id));
  return out;
}

}  // namespace

std::vector<TupleId> select_entropy(const CandidatePool& pool, const Trainer& trainer, std::size_t n_query) {
  if (pool.empty()) throw PoolExhausted("candidate pool is empty");
  const auto ids = pool.unlabeled();
  std::vector<PredictionState> states;
  states.reserve(ids.size());
  for (const auto& f : trainer.fused_vectors(pointers(pool, ids))) states.push_back(trainer.model().classify(f));
  return select_by_entropy(ids, states, n_query);
}

std::vector<TupleId> select_entropy_dropout(const CandidatePool& pool, const Trainer& trainer, std::size_t n_query,
                                            int n_mc, std::uint64_t mc_seed) {
  if (n_mc < 2) throw ArgumentError("ESD needs n_mc >= 2");
  if (pool.empty()) throw PoolExhausted("candidate pool is empty");
  const auto ids = pool.unlabeled();
  const auto fused = trainer.fused_vectors(pointers(pool, ids));
  std::vector<PredictionState> states;
  states.reserve(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    Rng rng(derive_seed(mc_seed, ids[k]));
    states.push_back(predict_mc_from_fused(trainer.model(), fused[k], n_mc, rng));
  }
  return select_by_entropy(ids, states, n_query);
}

std::vector<FibrosisStage> SimulatedOracle::label(const CandidatePool& pool, const std::vector<TupleId>& ids) {
  std::vector<FibrosisStage> out;
  out.reserve(ids.size());
  for (TupleId id : ids) out.push_back(pool.tuple(id).stage);
  return out;
}

void apply_labels(CandidatePool& pool, const std::vector<TupleId>& ids, Oracle& oracle, bool propagate_patient_labels) {
  std::set<TupleId> seen;
  for (TupleId id : ids) {
    if (!pool.is_unlabeled(id)) {
      throw ArgumentError(id < pool.initial_size() ? "tuple " + std::to_string(id) + " is already labeled"
                                                   : "unknown tuple id " + std::to_string(id));
    }
    if (!seen.insert(id).second) throw ArgumentError("tuple " + std::to_string(id) + " selected twice");
  }
  const auto stages = oracle.label(pool, ids);
  if (stages.size() != ids.size()) throw ArgumentError("oracle returned the wrong number of labels");

  if (!propagate_patient_labels) {
    pool.label(ids, stages);
  } else {
    std::map<std::string, FibrosisStage> revealed;
    for (std::size_t k = 0; k < ids.size(); ++k) revealed.emplace(pool.tuple(ids[k]).patient_id, stages[k]);
    std::vector<TupleId> all_ids;
    std::vector<FibrosisStage> all_stages;
    for (TupleId id : pool.unlabeled()) {
      auto it = revealed.find(pool.tuple(id).patient_id);
      if (it == revealed.end()) continue;
      all_ids.push_back(id);
      all_stages.push_back(it->second);
    }
    pool.label(all_ids, all_stages);
  }
  pool.advance();
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

const ALRecord& ALHistory::best() const {
  if (records.empty()) throw UndefinedMetric("empty AL history");
  const ALRecord* best = &records.front();
  for (const auto& r : records) {
    if (r.macro_auc > best->macro_auc) best = &r;
  }
  return *best;
}

const ALRecord& ALHistory::at_budget(double d) const {
  if (records.empty()) throw UndefinedMetric("empty AL history");
  const ALRecord* best = &records.front();
  for (const auto& r : records) {
    if (std::abs(r.d - d) < std::abs(best->d - d)) best = &r;
  }
  return *best;
}

void ALHistory::write_csv(const std::filesystem::path& path, bool include_wall_time) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "t,d,n_labeled,strategy,accuracy,macro_auc,wall_time_s\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%zu,%s,%.17g,%.17g,", r.t, r.d, r.n_labeled,
                  std::string(to_string(r.strategy)).c_str(), r.accuracy, r.macro_auc);
    out << buf;
    if (include_wall_time) {
      std::snprintf(buf, sizeof buf, "%.3f", r.wall_time_s);
      out << buf;
    } else {
      out << "NA";
    }
    out << '\n';
  }
}

void to_json(json& j, const ALRecord& r) {
  j = json{{"t", r.t},
           {"d", r.d},
           {"n_labeled", r.n_labeled},
           {"strategy", std::string(to_string(r.strategy))},
           {"accuracy", r.accuracy},
           {"macro_auc", r.macro_auc},
           {"wall_time_s", r.wall_time_s},
           {"selected", r.selected},
           {"eval", r.eval}};
}

void from_json(const json& j, ALRecord& r) {
  r.t = j.at("t");
  r.d = j.at("d");
  r.n_labeled = j.at("n_labeled");
  r.strategy = parse_strategy(j.at("strategy").get<std::string>());
  r.accuracy = j.at("accuracy");
  r.macro_auc = j.at("macro_auc");
  r.wall_time_s = j.at("wall_time_s");
  r.selected = j.at("selected").get<std::vector<TupleId>>();
  r.eval = j.at("eval").get<EvalReport>();
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

EvalReport evaluate_tuples(const Trainer& trainer, const std::vector<MultiModalSample>& tuples, double d,
                           bool skip_degenerate) {
  const auto states = trainer.predict(tuples);
  std::vector<std::pair<const MultiModalSample*, PredictionState>> pairs;
  pairs.reserve(tuples.size());
  for (std::size_t i = 0; i < tuples.size(); ++i) pairs.emplace_back(&tuples[i], states[i]);
  return evaluate(aggregate_patient(pairs), d, skip_degenerate);
}

namespace {

constexpr const char* kStateFile = "al_state.json";
constexpr const char* kModelFile = "al_model.ckpt";

std::vector<LabeledExample> labeled_examples(const CandidatePool& pool) {
  std::vector<LabeledExample> out;
  out.reserve(pool.labeled_count());
  for (const auto& [id, stage] : pool.labeled()) out.push_back({&pool.tuple(id), stage});
  return out;
}

std::string rng_text(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

json pool_fingerprint(const std::vector<MultiModalSample>& tuples) {
  return {{"size", tuples.size()},
          {"first", tuples.empty() ? "" : tuples.front().key()},
          {"last", tuples.empty() ? "" : tuples.back().key()}};
}

void save_state(const ALSetup& setup, const CandidatePool& pool, const ALHistory& history, Trainer& trainer,
                const Rng& query_rng) {
  const auto& dir = setup.checkpoint_dir;
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / (std::string(kModelFile) + ".tmp"), trainer.model(), setup.images->normalization(),
                  &trainer.optimizer());
  json labeled = json::array();
  for (const auto& [id, stage] : pool.labeled()) labeled.push_back({id, std::string(to_string(stage))});
  json state = {{"version", 1},
                {"t", pool.iteration()},
                {"labeled", labeled},
                {"records", history.records},
                {"trainer_rng", trainer.rng_state()},
                {"query_rng", rng_text(query_rng)},
                {"pool", pool_fingerprint(pool.tuples())}};
  {
    std::ofstream out(dir / (std::string(kStateFile) + ".tmp"), std::ios::binary | std::ios::trunc);
    out << state.dump(1);
    if (!out) throw IoError("cannot write AL state to " + dir.string());
  }
  std::filesystem::rename(dir / (std::string(kModelFile) + ".tmp"), dir / kModelFile);
  std::filesystem::rename(dir / (std::string(kStateFile) + ".tmp"), dir / kStateFile);
}

}  // namespace

ALResult run_al_loop(const ALSetup& setup) {
  if (!setup.train_tuples || !setup.test_tuples || !setup.images) throw ArgumentError("ALSetup is incomplete");
  if (setup.train_tuples->empty()) throw ArgumentError("empty training pool");
  setup.model.validate();
  setup.train.validate();
  setup.query.validate();
  setup.schedule.validate();

  SimulatedOracle simulated;
  Oracle& oracle = setup.oracle ? *setup.oracle : static_cast<Oracle&>(simulated);
  const auto started = std::chrono::steady_clock::now();
  double time_offset = 0.0;
  auto elapsed = [&] {
    return time_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  ALResult result;
  Rng query_rng(setup.query.seed);
  CandidatePool pool;
  std::unique_ptr<Trainer> trainer;

  const bool resuming = setup.resume && !setup.checkpoint_dir.empty() &&
                        std::filesystem::exists(setup.checkpoint_dir / kStateFile);
  if (resuming) {
    std::ifstream in(setup.checkpoint_dir / kStateFile);
    const json state = json::parse(in);
    if (state.at("pool") != pool_fingerprint(*setup.train_tuples)) {
      throw ConfigError("checkpoint in " + setup.checkpoint_dir.string() + " belongs to a different pool");
    }
    pool = CandidatePool(*setup.train_tuples);
    std::vector<TupleId> ids;
    std::vector<FibrosisStage> stages;
    for (const auto& entry : state.at("labeled")) {
      ids.push_back(entry.at(0).get<TupleId>());
      stages.push_back(parse_stage(entry.at(1).get<std::string>()));
    }
    pool.label(ids, stages);
    pool.restore_iteration(state.at("t").get<int>());
    result.history.records = state.at("records").get<std::vector<ALRecord>>();
    if (!result.history.records.empty()) time_offset = result.history.records.back().wall_time_s;

    auto loaded = load_checkpoint(setup.checkpoint_dir / kModelFile);
    result.model = std::move(loaded.model);
    trainer = std::make_unique<Trainer>(*result.model, *setup.images, setup.train);
    if (loaded.optimizer) trainer->optimizer().restore(loaded.optimizer->steps(), loaded.optimizer->moments());
    trainer->restore_rng_state(state.at("trainer_rng").get<std::string>());
    std::istringstream qs(state.at("query_rng").get<std::string>());
    qs >> query_rng;
  } else {
    pool = init_pool(*setup.train_tuples, setup.query.resolved_seed_size(setup.train_tuples->size()), query_rng);
    result.model = std::make_unique<FusionNet>(setup.model);
    trainer = std::make_unique<Trainer>(*result.model, *setup.images, setup.train);
  }

  auto record_round = [&](std::vector<TupleId> selected) {
    trainer->train(labeled_examples(pool));
    ALRecord r;
    r.t = pool.iteration();
    r.d = pool.labeled_fraction();
    r.n_labeled = pool.labeled_count();
    r.strategy = setup.query.strategy;
    r.eval = evaluate_tuples(*trainer, *setup.test_tuples, r.d, setup.schedule.skip_degenerate_auc);
    r.accuracy = r.eval.accuracy;
    r.macro_auc = r.eval.macro_auc;
    r.selected = std::move(selected);
    r.wall_time_s = elapsed();
    result.history.records.push_back(r);
    if (!setup.checkpoint_dir.empty()) save_state(setup, pool, result.history, *trainer, query_rng);
    if (setup.on_record) setup.on_record(result.history.records.back(), pool);
  };

  if (!resuming) {
    std::vector<TupleId> seed;
    for (const auto& [id, stage] : pool.labeled()) seed.push_back(id);
    record_round(std::move(seed));
  }

  const std::size_t n_query = setup.query.resolved_n_query(pool.initial_size());
  while (!pool.empty()) {
    if (setup.schedule.max_iterations >= 0 && pool.iteration() >= setup.schedule.max_iterations) break;
    const std::size_t next = pool.labeled_count() + std::min(n_query, pool.unlabeled_count());
    if (static_cast<double>(next) / static_cast<double>(pool.initial_size()) > setup.schedule.max_budget + 1e-12) break;

    std::vector<TupleId> selected;
    switch (setup.query.strategy) {
      case QueryStrategy::Random: selected = select_random(pool, n_query, query_rng); break;
      case QueryStrategy::Entropy: selected = select_entropy(pool, *trainer, n_query); break;
      case QueryStrategy::EntropyDropout:
        selected = select_entropy_dropout(pool, *trainer, n_query, setup.query.n_mc,
                                          derive_seed(setup.query.seed, static_cast<std::uint64_t>(pool.iteration())));
        break;
    }
    apply_labels(pool, selected, oracle, setup.schedule.propagate_patient_labels);

    if (setup.schedule.retrain_from_scratch) {
      const std::string rng_state = trainer->rng_state();
      trainer.reset();
      result.model = std::make_unique<FusionNet>(setup.model);
      trainer = std::make_unique<Trainer>(*result.model, *setup.images, setup.train);
      trainer->restore_rng_state(rng_state);
    }
    record_round(std::move(selected));
  }
  return result;
}

}  // namespace mmfal
