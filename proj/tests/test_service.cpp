#include "mmfal/annotation_service.hpp"
#include "mmfal/synthetic.hpp"
#include "support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <future>
#include <thread>

using namespace mmfal;
using mmfal::testing::TempDir;
using json = nlohmann::json;

namespace {

template <typename Pred>
bool wait_until(Pred pred, std::chrono::seconds limit = std::chrono::seconds(60)) {
  const auto end = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < end) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return false;
}

json get_json(httplib::Client& cli, const std::string& path) {
  auto res = cli.Get(path);
  REQUIRE(res);
  REQUIRE(res->status == 200);
  return json::parse(res->body);
}

int post_label(httplib::Client& cli, const std::string& body) {
  auto res = cli.Post("/api/v1/labels", body, "application/json");
  REQUIRE(res);
  return res->status;
}

std::string label_body(const std::string& id, const std::string& stage) {
  return json{{"query_id", id}, {"stage", stage}}.dump();
}

struct LiveFixture {
  TempDir dir{"svc"};
  DatasetIndex index;
  std::vector<MultiModalSample> train, test;
  ImageStore images{{16, 16}, Normalization::identity()};

  LiveFixture() {
    SyntheticSpec spec;
    spec.stage_patient_counts = {3, 3, 3, 3, 3};
    spec.image_size = 16;
    for (auto& m : spec.modalities) {
      m.images_min = 1;
      m.images_max = 2;
    }
    index = generate_synthetic(spec, 21, dir.path() / "data");
    const auto split = stratified_patient_split(index, 0.67, 21);
    train = build_tuples(index, {ModalityKind::LSTE, ModalityKind::LUS}, split.train);
    test = build_tuples(index, {ModalityKind::LSTE, ModalityKind::LUS}, split.test);
  }

  ALSetup setup(LiveOracle& oracle) const {
    ALSetup s;
    s.train_tuples = &train;
    s.test_tuples = &test;
    s.images = &images;
    s.model.backbone = "tiny";
    s.model.reduced_channels = 8;
    s.model.se_ratio = 4;
    s.model.freeze_backbone = true;
    s.model.modalities = {ModalityKind::LSTE, ModalityKind::LUS};
    s.train.epochs = 1;
    s.query.strategy = QueryStrategy::Random;
    s.query.n_query = 3;
    s.query.seed = 5;
    s.schedule.max_iterations = 2;
    s.schedule.skip_degenerate_auc = true;
    s.oracle = &oracle;
    s.on_record = [&oracle](const ALRecord& r, const CandidatePool& p) { oracle.record(r, p); };
    return s;
  }
};

}  // namespace

TEST_CASE("live labeling over HTTP drives the loop one round per batch") {
  LiveFixture fx;
  LiveOracle oracle;
  ServiceOptions opts;
  opts.port = 0;
  AnnotationService service(oracle, opts);
  service.set_images(fx.index);
  service.start();
  REQUIRE(service.port() > 0);
  httplib::Client cli("127.0.0.1", service.port());

  auto status = get_json(cli, "/api/v1/status");
  CHECK(status.at("iteration") == 0);
  CHECK(status.at("pending_count") == 0);
  CHECK(status.at("last_metrics").is_null());
  CHECK(get_json(cli, "/api/v1/queries").empty());

  auto loop = std::async(std::launch::async, [&] {
    auto result = run_al_loop(fx.setup(oracle));
    oracle.finish();
    return result.history;
  });

  json batch;
  REQUIRE(wait_until([&] {
    batch = get_json(cli, "/api/v1/queries");
    return !batch.empty();
  }));
  REQUIRE(batch.size() == 3);
  status = get_json(cli, "/api/v1/status");
  CHECK(status.at("iteration") == 0);
  CHECK(status.at("pending_count") == 3);
  CHECK(status.at("waiting") == true);
  CHECK_FALSE(status.at("last_metrics").is_null());

  for (const auto& q : batch) {
    CHECK(q.at("iteration") == 0);
    CHECK(q.at("query_id").get<std::string>().rfind("t0-", 0) == 0);
    REQUIRE(q.at("images").size() == 2);
    CHECK(q.at("images")[0].at("modality") == "LSTE");
    CHECK(q.at("images")[1].at("modality") == "LUS");
  }

  // Image bytes match the file on disk.
  const auto sample = batch[0].at("images")[0].at("sample_id").get<std::string>();
  auto img = cli.Get(batch[0].at("images")[0].at("url").get<std::string>());
  REQUIRE(img);
  CHECK(img->status == 200);
  CHECK(img->get_header_value("Content-Type") == "image/png");
  CHECK(img->body == mmfal::testing::read_file(fx.index.sample(sample).source_path));
  CHECK(cli.Get("/api/v1/images/nope")->status == 404);

  const auto first = batch[0].at("query_id").get<std::string>();
  CHECK(post_label(cli, label_body("t9-999", "F1")) == 404);
  CHECK(post_label(cli, "{not json") == 400);
  CHECK(post_label(cli, json{{"query_id", first}}.dump()) == 400);
  CHECK(post_label(cli, label_body(first, "F5")) == 400);
  CHECK(post_label(cli, label_body(first, "F2")) == 200);
  CHECK(post_label(cli, label_body(first, "F3")) == 409);
  CHECK(get_json(cli, "/api/v1/status").at("pending_count") == 2);
  CHECK(get_json(cli, "/api/v1/queries").size() == 2);

  for (std::size_t i = 1; i < batch.size(); ++i) {
    CHECK(post_label(cli, label_body(batch[i].at("query_id"), "F0")) == 200);
  }

  // The next batch belongs to exactly the next iteration.
  json next;
  REQUIRE(wait_until([&] {
    next = get_json(cli, "/api/v1/queries");
    return !next.empty();
  }));
  for (const auto& q : next) CHECK(q.at("iteration") == 1);
  status = get_json(cli, "/api/v1/status");
  CHECK(status.at("iteration") == 1);
  CHECK(post_label(cli, label_body(first, "F2")) == 409);

  for (const auto& q : next) CHECK(post_label(cli, label_body(q.at("query_id"), "F4")) == 200);
  const auto history = loop.get();
  REQUIRE(history.records.size() == 3);
  CHECK(history.records[1].n_labeled - history.records[0].n_labeled >= 3);
  status = get_json(cli, "/api/v1/status");
  CHECK(status.at("finished") == true);
  CHECK(status.at("iteration") == 2);
  CHECK(status.at("d") == doctest::Approx(history.records.back().d));
  service.stop();
}

TEST_CASE("shutdown unblocks a waiting loop") {
  LiveFixture fx;
  LiveOracle oracle;
  auto loop = std::async(std::launch::async, [&] { return run_al_loop(fx.setup(oracle)); });
  REQUIRE(wait_until([&] { return oracle.status().waiting; }));
  oracle.shutdown();
  CHECK_THROWS_AS(loop.get(), OracleTimeout);
}

TEST_CASE("label timeout raises and leaves the pool untouched") {
  const auto index = mmfal::testing::stage_count_index({2, 2, 2, 2, 2});
  const auto tuples = build_tuples(index, {ModalityKind::LUS}, index.patient_ids());
  CandidatePool pool(tuples);
  LiveOracle oracle(std::chrono::milliseconds(50));
  CHECK_THROWS_AS(oracle.label(pool, {0, 1}), OracleTimeout);
  CHECK(pool.labeled_count() == 0);
  CHECK(oracle.pending().empty());
  CHECK(oracle.status().pending_count == 0);
}

TEST_CASE("bearer token guards the API") {
  LiveOracle oracle;
  ServiceOptions opts;
  opts.port = 0;
  opts.token = "s3cret";
  AnnotationService service(oracle, opts);
  service.start();
  httplib::Client cli("127.0.0.1", service.port());
  CHECK(cli.Get("/api/v1/status")->status == 401);
  CHECK(cli.Get("/api/v1/status", {{"Authorization", "Bearer wrong"}})->status == 401);
  CHECK(cli.Get("/api/v1/status", {{"Authorization", "Bearer s3cret"}})->status == 200);
}

TEST_CASE("binding a busy port fails loudly") {
  LiveOracle oracle;
  ServiceOptions opts;
  opts.port = 0;
  AnnotationService first(oracle, opts);
  first.start();
  opts.port = first.port();
  AnnotationService second(oracle, opts);
  CHECK_THROWS_AS(second.start(), IoError);
}
