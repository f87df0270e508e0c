#include "mmfal/dataset.hpp"
#include "mmfal/image.hpp"
#include "mmfal/synthetic.hpp"
#include "support.hpp"

#include <doctest.h>

#include <map>
#include <set>

using namespace mmfal;
using mmfal::testing::TempDir;
using mmfal::testing::write_file;

TEST_CASE("modality and stage tokens round-trip") {
  for (auto m : kAllModalities) CHECK(parse_modality(to_string(m)) == m);
  for (int s = 0; s < 5; ++s) {
    const auto stage = stage_from_ordinal(s);
    CHECK(ordinal(stage) == s);
    CHECK(parse_stage(to_string(stage)) == stage);
  }
  CHECK_THROWS_AS(parse_modality("CT"), ParseError);
  CHECK_THROWS_AS(parse_stage("F5"), ParseError);
  CHECK_THROWS_AS(stage_from_ordinal(5), ArgumentError);
  CHECK_THROWS_AS(stage_from_ordinal(-1), ArgumentError);
}

TEST_CASE("dataset index rejects duplicates and stage conflicts") {
  DatasetIndex index;
  ImageSample s{"a", "P1", ModalityKind::LUS, "/x.png", std::nullopt};
  index.add(s, FibrosisStage::F1);
  CHECK_THROWS_AS(index.add(s, FibrosisStage::F1), UniquenessError);
  ImageSample t{"b", "P1", ModalityKind::LUS, "/y.png", std::nullopt};
  CHECK_THROWS_AS(index.add(t, FibrosisStage::F2), SchemaError);
  index.add(t, FibrosisStage::F1);
  CHECK(index.patient("P1").count(ModalityKind::LUS) == 2);
  CHECK(index.num_samples() == 2);
  CHECK(index.sample("b").source_path == "/y.png");
  CHECK_THROWS_AS(index.sample("zzz"), ArgumentError);
  CHECK(index.incomplete_patients({ModalityKind::LUS, ModalityKind::LSTE}) == std::vector<std::string>{"P1"});
}

TEST_CASE("manifest loading") {
  TempDir dir("manifest");
  const auto path = dir / "manifest.jsonl";

  SUBCASE("valid records, blank lines, relative paths") {
    write_file(path,
               R"({"sample_id":"s1","patient_id":"P1","modality":"LSTE","stage":"F2","path":"img/a.png","roi":[1,2,3,4]})"
               "\n\n"
               R"({"sample_id":"s2","patient_id":"P1","modality":"LUS","stage":"F2","path":"/abs/b.png"})"
               "\n");
    const auto index = load_manifest(path);
    CHECK(index.num_samples() == 2);
    CHECK(index.patient("P1").stage == FibrosisStage::F2);
    const auto& s1 = index.sample("s1");
    CHECK(s1.source_path == dir.path() / "img/a.png");
    REQUIRE(s1.roi.has_value());
    CHECK(s1.roi->width == 3);
    CHECK(index.sample("s2").source_path == "/abs/b.png");
  }

  SUBCASE("errors name the offending line") {
    auto expect_error = [&](const std::string& text, const std::string& fragment) {
      write_file(path, text);
      try {
        load_manifest(path);
        FAIL("expected an error");
      } catch (const Error& e) {
        CHECK(std::string(e.what()).find(fragment) != std::string::npos);
      }
    };
    const std::string ok =
        R"({"sample_id":"s1","patient_id":"P1","modality":"LUS","stage":"F0","path":"a.png"})"
        "\n";
    expect_error(ok + R"({"sample_id":"s2","patient_id":"P1","modality":"LUS","path":"a.png"})", "line 2");
    expect_error(ok + R"({"sample_id":"s2","patient_id":"P1","modality":"MRI","stage":"F0","path":"a.png"})", "line 2");
    expect_error(ok + ok, "line 2");
    expect_error(ok + R"({"sample_id":"s3","patient_id":"P1","modality":"LUS","stage":"F3","path":"a.png"})", "line 2");
    expect_error(R"({"sample_id":"s1","patient_id":"P1","modality":"LSTE","stage":"F0","path":"a.png"})", "roi");
    expect_error("{not json", "line 1");
  }

  SUBCASE("missing fields use the right error types") {
    write_file(path, R"({"patient_id":"P1","modality":"LUS","stage":"F0","path":"a.png"})");
    CHECK_THROWS_AS(load_manifest(path), SchemaError);
    write_file(path, R"({"sample_id":"s","patient_id":"P1","modality":"LUS","stage":"F9","path":"a.png"})");
    CHECK_THROWS_AS(load_manifest(path), ParseError);
    write_file(path, R"({"sample_id":"s","patient_id":"P1","modality":"LUS","stage":"F1","path":"a.png"})"
                     "\n"
                     R"({"sample_id":"s","patient_id":"P2","modality":"LUS","stage":"F1","path":"a.png"})");
    CHECK_THROWS_AS(load_manifest(path), UniquenessError);
  }

  SUBCASE("write then load round-trips") {
    const auto index = mmfal::testing::make_index({ModalityKind::LSTE, ModalityKind::LUS}, {{2, 1}, {1, 3}},
                                                  {FibrosisStage::F0, FibrosisStage::F4});
    write_manifest(index, path);
    const auto back = load_manifest(path);
    CHECK(back.num_samples() == index.num_samples());
    CHECK(back.patient_ids() == index.patient_ids());
    CHECK(back.sample("P001_LSTE_1").roi->width == 8);
    CHECK(back.patient("P002").stage == FibrosisStage::F4);
  }
}

TEST_CASE("stratified split arithmetic") {
  const auto index = mmfal::testing::stage_count_index({41, 51, 31, 27, 18});
  const auto split = stratified_patient_split(index, 0.8, 3);
  CHECK(split.train.size() == 131);
  CHECK(split.test.size() == 37);

  // Per-stage floor(count × fraction), independently computed.
  std::map<FibrosisStage, int> train_by_stage;
  for (const auto& id : split.train) ++train_by_stage[index.patient(id).stage];
  const std::array<int, 5> expected{32, 40, 24, 21, 14};
  for (int s = 0; s < 5; ++s) CHECK(train_by_stage[stage_from_ordinal(s)] == expected[static_cast<std::size_t>(s)]);

  std::set<std::string> all(split.train.begin(), split.train.end());
  for (const auto& id : split.test) CHECK(all.insert(id).second);
  CHECK(all.size() == 168);

  CHECK(stratified_patient_split(index, 0.8, 3).test == split.test);
  CHECK(stratified_patient_split(index, 0.8, 4).test != split.test);
  CHECK_THROWS_AS(stratified_patient_split(index, 1.0, 0), ArgumentError);
  CHECK_THROWS_AS(stratified_patient_split(index, 0.0, 0), ArgumentError);

  for (double frac : {0.1, 0.25, 0.5, 0.7, 0.9}) {
    const auto s = stratified_patient_split(index, frac, 1);
    int want = 0;
    for (int c : {41, 51, 31, 27, 18}) want += static_cast<int>(std::floor(c * frac + 1e-9));
    CHECK(static_cast<int>(s.train.size()) == want);
  }
}

TEST_CASE("tuple construction is the per-patient Cartesian product") {
  using M = ModalityKind;
  const auto index = mmfal::testing::make_index({M::LSTE, M::LUS, M::LSTQ}, {{2, 3, 1}, {1, 0, 2}, {4, 2, 2}},
                                                {FibrosisStage::F0, FibrosisStage::F1, FibrosisStage::F2});
  const auto ids = index.patient_ids();
  const auto tuples = build_tuples(index, {M::LSTE, M::LUS}, ids);
  CHECK(tuples.size() == 2 * 3 + 4 * 2);  // P002 has no LUS
  CHECK(count_tuples(index, {M::LSTE, M::LUS}, ids) == tuples.size());
  CHECK(build_tuples(index, {M::LSTE, M::LUS, M::LSTQ}, ids).size() == 2 * 3 * 1 + 4 * 2 * 2);
  CHECK(tuples.front().modalities() == std::vector<M>{M::LSTE, M::LUS});
  CHECK(tuples.front().parts[0].second.sample_id == "P001_LSTE_0");
  CHECK(tuples.front().parts[1].second.sample_id == "P001_LUS_0");
  CHECK(tuples[1].parts[1].second.sample_id == "P001_LUS_1");  // last modality varies fastest
  for (const auto& t : tuples) CHECK(t.stage == index.patient(t.patient_id).stage);
  CHECK_THROWS_AS(build_tuples(index, {M::LSTE, M::LSTE}, ids), ArgumentError);
  CHECK_THROWS_AS(build_tuples(index, {}, ids), ArgumentError);
}

TEST_CASE("image preprocessing") {
  TempDir dir("image");
  // 3-channel 10×12 image with a distinct value per pixel.
  std::vector<std::uint8_t> rgb(10 * 12 * 3);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 12; ++x)
      for (int c = 0; c < 3; ++c) rgb[static_cast<std::size_t>((y * 12 + x) * 3 + c)] = static_cast<std::uint8_t>(y * 20 + x + c * 3);
  write_png(dir / "rgb.png", 10, 12, 3, rgb);

  const RawImage raw = read_image(dir / "rgb.png");
  CHECK(raw.height == 10);
  CHECK(raw.width == 12);
  CHECK(raw.channels == 3);
  CHECK(raw.pixels[0] == doctest::Approx(0.0));
  CHECK(raw.pixels[2] == doctest::Approx(6.0 / 255.0));  // channel order survives the round trip

  SUBCASE("roi crop at native size is exact") {
    const auto t = preprocess(raw, RoiBox{2, 3, 4, 5}, {5, 4}, Normalization::identity());
    CHECK(t.shape() == Shape{3, 5, 4});
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 4; ++x)
        CHECK(t.at(1, y, x) == doctest::Approx(((y + 3) * 20 + (x + 2) + 3) / 255.0));
  }
  SUBCASE("normalization constants") {
    const auto t = preprocess(raw, RoiBox{0, 0, 1, 1}, {1, 1}, Normalization{});
    CHECK(t.at(0, 0, 0) == doctest::Approx((0.0 - 0.485) / 0.229));
    CHECK(t.at(2, 0, 0) == doctest::Approx((6.0 / 255.0 - 0.406) / 0.225));
  }
  SUBCASE("resize to target") {
    const auto t = preprocess(raw, std::nullopt, {224, 224}, Normalization{});
    CHECK(t.shape() == Shape{3, 224, 224});
    CHECK(t.all_finite());
  }
  SUBCASE("roi outside the image") {
    CHECK_THROWS_AS(preprocess(raw, RoiBox{8, 0, 5, 5}, {4, 4}, Normalization{}), BoundsError);
    CHECK_THROWS_AS(preprocess(raw, RoiBox{0, 0, 0, 5}, {4, 4}, Normalization{}), BoundsError);
  }
  SUBCASE("grayscale is replicated") {
    std::vector<std::uint8_t> gray(6 * 6, 128);
    write_png(dir / "gray.png", 6, 6, 1, gray);
    const auto t = preprocess(read_image(dir / "gray.png"), std::nullopt, {6, 6}, Normalization::identity());
    for (int c = 0; c < 3; ++c) CHECK(t.at(c, 2, 2) == doctest::Approx(128.0 / 255.0));
  }
  SUBCASE("undecodable file") {
    write_file(dir / "junk.png", "definitely not a png");
    CHECK_THROWS_AS(read_image(dir / "junk.png"), DecodeError);
    CHECK_THROWS_AS(read_image(dir / "missing.png"), DecodeError);
  }
}

TEST_CASE("synthetic generator") {
  TempDir a("syn_a"), b("syn_b");
  SyntheticSpec spec;
  spec.stage_patient_counts = {3, 2, 2, 2, 1};
  spec.image_size = 16;
  const auto ia = generate_synthetic(spec, 5, a.path());
  const auto ib = generate_synthetic(spec, 5, b.path());

  CHECK(ia.patients().size() == 10);
  const auto counts = ia.stage_patient_counts();
  CHECK(counts == std::array<std::size_t, 5>{3, 2, 2, 2, 1});
  CHECK(mmfal::testing::read_file(a / "manifest.jsonl") == mmfal::testing::read_file(b / "manifest.jsonl"));
  for (const auto& p : ia.patients()) {
    CHECK(p.has_all({ModalityKind::LSTE, ModalityKind::SSTE, ModalityKind::LSTQ, ModalityKind::LUS}));
    for (const auto& [m, samples] : p.samples) {
      for (const auto& s : samples) {
        const auto other = ib.sample(s.sample_id).source_path;
        CHECK(mmfal::testing::read_file(s.source_path) == mmfal::testing::read_file(other));
        if (m == ModalityKind::LSTE || m == ModalityKind::SSTE) {
          REQUIRE(s.roi.has_value());
          CHECK(s.roi->width == 16);
        }
      }
    }
  }
  CHECK(ia.patient("P001").count(ModalityKind::LSTE) == 5);
  CHECK(ia.patient("P001").count(ModalityKind::LUS) == 7);

  TempDir c("syn_c");
  const auto ic = generate_synthetic(spec, 6, c.path());
  CHECK(mmfal::testing::read_file(a / "manifest.jsonl") != mmfal::testing::read_file(c / "manifest.jsonl"));
}

TEST_CASE("synthetic spec JSON round-trip and validation") {
  SyntheticSpec spec;
  spec.pixel_noise = 0.2;
  spec.modalities[1].code = {2, 1, 0, 1, 2};
  const nlohmann::json j = spec;
  const auto back = j.get<SyntheticSpec>();
  CHECK(back.pixel_noise == 0.2);
  CHECK(back.modalities[1].code == spec.modalities[1].code);
  CHECK(nlohmann::json(back) == j);

  TempDir dir("syn_bad");
  SyntheticSpec bad;
  bad.image_size = 0;
  CHECK_THROWS_AS(generate_synthetic(bad, 0, dir.path()), ConfigError);
}

TEST_CASE("noiseless synthetic data: modality pairs separate every stage") {
  // Nearest-class-mean on the mean ROI intensity of each modality. Each
  // modality alone maps stages to non-injective codes; the joint code
  // (LSTE, LSTQ) is injective, so the pair classifies every patient.
  TempDir dir("syn_ncm");
  SyntheticSpec spec = SyntheticSpec{}.noiseless();
  spec.stage_patient_counts = {4, 4, 4, 4, 4};
  spec.image_size = 16;
  const auto index = generate_synthetic(spec, 2, dir.path());
  const ImageStore store({16, 16}, Normalization::identity());

  auto mean_level = [&](const PatientRecord& p, ModalityKind m) {
    double total = 0.0;
    int n = 0;
    for (const auto& s : p.samples.at(m)) {
      const auto& t = store.get(s);
      for (double v : t.values()) total += v;
      n += static_cast<int>(t.size());
    }
    return total / n;
  };
  auto accuracy_with = [&](const std::vector<ModalityKind>& mods) {
    std::map<FibrosisStage, std::vector<double>> centroid;
    std::map<FibrosisStage, int> count;
    for (const auto& p : index.patients()) {
      auto& c = centroid[p.stage];
      c.resize(mods.size(), 0.0);
      for (std::size_t k = 0; k < mods.size(); ++k) c[k] += mean_level(p, mods[k]);
      ++count[p.stage];
    }
    for (auto& [s, c] : centroid)
      for (auto& v : c) v /= count[s];
    int correct = 0;
    for (const auto& p : index.patients()) {
      double best = 1e300;
      FibrosisStage pick = FibrosisStage::F0;
      for (const auto& [s, c] : centroid) {
        double d = 0.0;
        for (std::size_t k = 0; k < mods.size(); ++k) d += std::pow(mean_level(p, mods[k]) - c[k], 2);
        if (d < best - 1e-12) {
          best = d;
          pick = s;
        }
      }
      correct += pick == p.stage;
    }
    return static_cast<double>(correct) / static_cast<double>(index.patients().size());
  };
  CHECK(accuracy_with({ModalityKind::LSTE, ModalityKind::LSTQ}) == 1.0);
  CHECK(accuracy_with({ModalityKind::LSTE}) < 1.0);
  CHECK(accuracy_with({ModalityKind::LSTQ}) < 1.0);
}
