#include "mmfal/attention.hpp"
#include "mmfal/backbone.hpp"
#include "mmfal/checkpoint.hpp"
#include "mmfal/fusion_net.hpp"
#include "mmfal/optimizer.hpp"
#include "mmfal/synthetic.hpp"
#include "mmfal/trainer.hpp"
#include "support.hpp"

#include <doctest.h>

#include <functional>

using namespace mmfal;
using mmfal::testing::relative_error;
using mmfal::testing::TempDir;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(s);
  for (auto& v : t.values()) v = scale * standard_normal(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

/// Worst relative error between analytic input/parameter gradients of
/// L = <g, layer(x)> and central differences.
double layer_gradient_error(Layer& layer, Tensor x, Rng& rng) {
  const Shape out_shape = layer.output_shape(x.shape());
  const Tensor g = random_tensor(out_shape, rng);
  NamedParameters params;
  layer.parameters("", params);
  zero_grads(params);
  Saved saved;
  layer.forward(x, &saved);
  const Tensor grad_in = layer.backward(g, *saved);
  auto loss = [&] { return dot(g, layer.forward(x, nullptr)); };
  double worst = 0.0;
  auto probe = [&](double& v, double analytic) {
    const double keep = v, h = 1e-5;
    v = keep + h;
    const double up = loss();
    v = keep - h;
    const double down = loss();
    v = keep;
    worst = std::max(worst, relative_error(analytic, (up - down) / (2 * h)));
  };
  for (std::size_t i = 0; i < x.size(); ++i) probe(x.data()[i], grad_in.data()[i]);
  for (auto& [name, p] : params)
    if (p->trainable)
      for (std::size_t i = 0; i < p->value.size(); ++i) probe(p->value.data()[i], p->grad.data()[i]);
  return worst;
}

/// Direct convolution by definition.
Tensor naive_conv(const Conv2d& conv, const Tensor& x, int k, int stride, int pad) {
  const Shape os = conv.output_shape(x.shape());
  Tensor y(os);
  const auto& w = conv.weight().value;
  for (int o = 0; o < os.c; ++o)
    for (int oy = 0; oy < os.h; ++oy)
      for (int ox = 0; ox < os.w; ++ox) {
        double s = 0.0;
        for (int i = 0; i < x.shape().c; ++i)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= x.shape().h || ix >= x.shape().w) continue;
              s += w.at(o, (i * k + ky) * k + kx, 0) * x.at(i, iy, ix);
            }
        y.at(o, oy, ox) = s;
      }
  return y;
}

}  // namespace

TEST_CASE("conv2d matches direct convolution and its gradients") {
  Rng rng(1);
  struct Case {
    int in, out, k, stride, pad;
    bool bias;
  };
  for (const Case c : {Case{3, 4, 3, 1, 1, false}, Case{2, 3, 3, 2, 1, false}, Case{4, 2, 1, 1, 0, false},
                       Case{3, 2, 7, 2, 3, false}, Case{2, 5, 1, 2, 0, false}}) {
    Conv2d conv(c.in, c.out, c.k, c.stride, c.pad, c.bias);
    conv.initialize(rng);
    const Tensor x = random_tensor({c.in, 9, 8}, rng);
    CHECK(max_abs_diff(conv.forward(x, nullptr), naive_conv(conv, x, c.k, c.stride, c.pad)) < 1e-12);
    CHECK(layer_gradient_error(conv, x, rng) < 1e-6);
  }
  Conv2d biased(3, 4, 1, 1, 0, true);
  biased.initialize(rng);
  for (auto& v : biased.bias().value.values()) v = standard_normal(rng);
  CHECK(layer_gradient_error(biased, random_tensor({3, 5, 5}, rng), rng) < 1e-6);
}

TEST_CASE("layer gradients") {
  Rng rng(2);
  SUBCASE("linear") {
    Linear fc(6, 4);
    fc.initialize(rng);
    CHECK(layer_gradient_error(fc, random_tensor({6, 1, 1}, rng), rng) < 1e-6);
  }
  SUBCASE("max pool") {
    MaxPool2d pool(3, 2, 1);
    CHECK(pool.output_shape({2, 8, 8}) == Shape{2, 4, 4});
    CHECK(layer_gradient_error(pool, random_tensor({2, 8, 8}, rng), rng) < 1e-6);
  }
  SUBCASE("frozen batch norm passes gradient through its scale") {
    FrozenBatchNorm bn(3);
    CHECK(layer_gradient_error(bn, random_tensor({3, 4, 4}, rng), rng) < 1e-6);
  }
  SUBCASE("global average pool") {
    GlobalAvgPool gap;
    CHECK(layer_gradient_error(gap, random_tensor({5, 3, 2}, rng), rng) < 1e-6);
  }
  SUBCASE("tiny backbone end to end") {
    auto bb = make_backbone("tiny");
    bb->initialize(rng);
    const Tensor x = random_tensor({3, 16, 16}, rng);
    CHECK(bb->output_shape(x.shape()) == Shape{32, 2, 2});
    const Tensor g = random_tensor({32, 2, 2}, rng);
    NamedParameters params;
    bb->parameters("", params);
    zero_grads(params);
    Saved saved;
    bb->forward(x, &saved);
    bb->backward(g, *saved);
    auto loss = [&] { return dot(g, bb->forward(x, nullptr)); };
    double worst = 0.0;
    int probes = 0;
    for (auto& [name, p] : params) {
      for (std::size_t i = 0; i < p->value.size(); i += 7, ++probes) {
        double& v = p->value.data()[i];
        const double keep = v;
        v = keep + 1e-5;
        const double up = loss();
        v = keep - 1e-5;
        const double down = loss();
        v = keep;
        worst = std::max(worst, relative_error(p->grad.data()[i], (up - down) / 2e-5, 1e-5));
      }
    }
    CHECK(probes > 100);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("backbone registry and shapes") {
  CHECK(make_backbone("tiny")->stride() == 8);
  CHECK(make_backbone("linear")->out_channels() == 32);
  CHECK_THROWS_AS(make_backbone("vgg16"), ConfigError);
  auto rn = make_backbone("resnet50");
  CHECK(rn->output_shape({3, 224, 224}) == Shape{2048, 7, 7});
  CHECK(rn->output_shape({3, 64, 96}) == Shape{2048, 2, 3});
  CHECK_THROWS_AS(rn->output_shape({3, 100, 100}), ConfigError);
  CHECK_THROWS_AS(rn->output_shape({1, 224, 224}), ConfigError);

  NamedParameters params;
  rn->parameters("", params);
  std::size_t count = 0;
  bool has_downsample = false;
  for (auto& [name, p] : params) {
    if (p->trainable) count += p->value.size();
    has_downsample = has_downsample || name == "layer1.0.downsample.0.weight";
  }
  CHECK(has_downsample);
  // Convolution weights of torchvision's ResNet-50 trunk (fc excluded, batch
  // norm folded and frozen).
  CHECK(count == 23454912);
}

TEST_CASE("squeeze-excitation") {
  Rng rng(4);
  SqueezeExcite se(8, 2);
  se.initialize(rng);
  const Tensor f = random_tensor({8, 3, 3}, rng);
  const Tensor a = se.attention(f);
  CHECK(a.shape() == Shape{8, 1, 1});
  for (double v : a.values()) CHECK((v > 0.0 && v < 1.0));
  const Tensor out = se.forward(f, nullptr);
  for (int c = 0; c < 8; ++c) CHECK(out.at(c, 1, 2) == doctest::Approx(a.at(c, 0, 0) * f.at(c, 1, 2)));
  CHECK_THROWS_AS(SqueezeExcite(10, 4), ConfigError);
}

TEST_CASE("softmax and prediction states") {
  const std::array<double, 5> logits{1000.0, 1001.0, 999.0, -1e4, 0.0};
  const auto p = softmax(logits);
  CHECK(p.sum() == doctest::Approx(1.0));
  CHECK(p.argmax() == FibrosisStage::F1);
  for (double v : p.p) CHECK(std::isfinite(v));
  PredictionState tie;
  tie.p = {0.1, 0.35, 0.35, 0.1, 0.1};
  CHECK(tie.argmax() == FibrosisStage::F1);
}

TEST_CASE("model config validation and JSON") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.modalities = {};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.modalities = {ModalityKind::LUS, ModalityKind::LUS};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.reduced_channels = 250;  // not divisible by se_ratio 16
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  c.backbone = "tiny";
  c.modalities = {ModalityKind::LSTE, ModalityKind::LSTQ};
  const nlohmann::json j = c;
  CHECK(j.at("num_classes") == 5);
  const auto back = j.get<ModelConfig>();
  CHECK(back.backbone == "tiny");
  CHECK(back.modalities == c.modalities);
  auto j6 = j;
  j6["num_classes"] = 6;
  CHECK_THROWS_AS(j6.get<ModelConfig>(), ConfigError);
}

TEST_CASE("fusion net streams, dropout and MC prediction") {
  Rng rng(8);
  ModelConfig c;
  c.backbone = "tiny";
  c.reduced_channels = 16;
  c.se_ratio = 4;
  c.modalities = {ModalityKind::LSTE, ModalityKind::LUS};
  FusionNet net(c);
  CHECK(net.num_streams() == 2);
  CHECK(net.fused_size() == 32);
  std::vector<Tensor> images{random_tensor({3, 16, 16}, rng), random_tensor({3, 16, 16}, rng)};
  const auto p = net.forward(images);
  CHECK(p.sum() == doctest::Approx(1.0));
  CHECK(net.forward(images).p == p.p);

  std::vector<Tensor> wrong{images[0]};
  CHECK_THROWS(net.forward(wrong));

  // Same init seed, same weights.
  FusionNet twin(c);
  CHECK(twin.forward(images).p == p.p);
  auto c2 = c;
  c2.init_seed = 1;
  CHECK(FusionNet(c2).forward(images).p != p.p);

  // MC dropout: mean of n_mc stochastic heads, reproducible from the RNG.
  std::vector<Tensor> embeddings;
  for (std::size_t s = 0; s < 2; ++s) embeddings.push_back(net.embed(s, net.extract_features(s, images[s])));
  const Tensor fused = FusionNet::fuse(embeddings);
  Rng a(5), b(5);
  const auto mc = predict_mc_from_fused(net, fused, 6, a);
  PredictionState manual;
  for (int k = 0; k < 6; ++k) {
    const auto q = net.classify(fused, &b);
    for (std::size_t i = 0; i < 5; ++i) manual.p[i] += q.p[i] / 6.0;
  }
  for (std::size_t i = 0; i < 5; ++i) CHECK(mc.p[i] == doctest::Approx(manual.p[i]).epsilon(1e-12));
  CHECK(mc.sum() == doctest::Approx(1.0));
  CHECK_THROWS_AS(predict_mc_from_fused(net, fused, 0, a), ArgumentError);

  // Inverted dropout keeps the expected logit: averaging many masks
  // approaches the deterministic logits.
  Tensor mean_logits({5, 1, 1});
  Rng r(9);
  const int draws = 20000;
  for (int k = 0; k < draws; ++k) {
    Tensor l = net.logits(fused, &r);
    for (std::size_t i = 0; i < 5; ++i) mean_logits.data()[i] += l.data()[i] / draws;
  }
  CHECK(max_abs_diff(mean_logits, net.logits(fused)) < 0.05);

  auto c0 = c;
  c0.dropout = 0.0;
  FusionNet det(c0);
  Rng x(1);
  CHECK(det.classify(fused, &x).p == det.classify(fused).p);
}

TEST_CASE("frozen backbone excludes backbone parameters from training") {
  ModelConfig c;
  c.backbone = "tiny";
  c.reduced_channels = 16;
  c.se_ratio = 4;
  c.freeze_backbone = true;
  FusionNet net(c);
  for (auto& [name, p] : net.trainable_parameters()) CHECK(name.find("backbone") == std::string::npos);
  c.freeze_backbone = false;
  FusionNet open(c);
  bool found = false;
  for (auto& [name, p] : open.trainable_parameters()) found = found || name.find("backbone") != std::string::npos;
  CHECK(found);
}

TEST_CASE("adam matches a hand-computed step") {
  Parameter p(Shape{2, 1, 1});
  p.value.data()[0] = 1.0;
  p.value.data()[1] = -2.0;
  p.grad.data()[0] = 0.5;
  p.grad.data()[1] = -4.0;
  NamedParameters params{{"w", &p}};
  Adam adam(AdamConfig{0.1, 0.9, 0.999, 1e-8});
  adam.step(params);
  // After one step m̂ = g and v̂ = g², so the update is lr·g/(|g| + eps).
  CHECK(p.value.data()[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)));
  CHECK(p.value.data()[1] == doctest::Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-8)));
  adam.step(params, 0.5);
  const double m = 0.9 * 0.1 * 0.5 + 0.1 * 0.25;
  const double v = 0.999 * 0.001 * 0.25 + 0.001 * 0.0625;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  CHECK(p.value.data()[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8)));
  CHECK(adam.steps() == 2);
}

TEST_CASE("tensor archive and checkpoints round-trip bit for bit") {
  TempDir dir("ckpt");
  Rng rng(10);
  TensorArchive archive;
  archive.meta = {{"k", 1}};
  archive.tensors.emplace_back("a", random_tensor({2, 3, 4}, rng));
  archive.tensors.emplace_back("b", Tensor(Shape{1, 1, 1}, std::vector<double>{-0.0}));
  write_archive(dir / "x.bin", archive);
  const auto back = read_archive(dir / "x.bin");
  CHECK(back.meta == archive.meta);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].second == archive.tensors[0].second);
  CHECK(std::signbit(back.tensors[1].second.data()[0]));

  mmfal::testing::write_file(dir / "bad.bin", "NOTANARCHIVE");
  CHECK_THROWS_AS(read_archive(dir / "bad.bin"), DecodeError);

  ModelConfig c;
  c.backbone = "tiny";
  c.reduced_channels = 16;
  c.se_ratio = 4;
  c.se_residual = true;
  c.modalities = {ModalityKind::LSTQ, ModalityKind::LSTE};
  c.init_seed = 77;
  FusionNet net(c);
  Adam adam;
  auto params = net.trainable_parameters();
  for (auto& [n, p] : params)
    for (auto& g : p->grad.values()) g = standard_normal(rng);
  adam.step(params);
  save_checkpoint(dir / "model.ckpt", net, Normalization{}, &adam, {{"note", "x"}});

  const auto loaded = load_checkpoint(dir / "model.ckpt");
  CHECK(loaded.model->config().modalities == c.modalities);
  CHECK(loaded.model->config().se_residual);
  CHECK(loaded.normalization == Normalization{});
  CHECK(loaded.extra.at("note") == "x");
  auto a = net.parameters();
  auto b = loaded.model->parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second->value == b[i].second->value);
  }
  REQUIRE(loaded.optimizer);
  CHECK(loaded.optimizer->steps() == 1);
  for (const auto& [name, mom] : adam.moments()) {
    CHECK(loaded.optimizer->moments().at(name).m == mom.m);
    CHECK(loaded.optimizer->moments().at(name).v == mom.v);
  }

  // Loading weights into a mismatched model fails loudly.
  auto other = c;
  other.reduced_channels = 32;
  FusionNet wrong(other);
  CHECK_THROWS(load_parameters(wrong.parameters(), read_archive(dir / "model.ckpt"), "", true));
}

TEST_CASE("pretrained backbone weights load into every stream") {
  TempDir dir("weights");
  Rng rng(12);
  auto bb = make_backbone("tiny");
  bb->initialize(rng);
  TensorArchive archive;
  NamedParameters params;
  bb->parameters("", params);
  for (auto& [name, p] : params) archive.tensors.emplace_back(name, p->value);
  write_archive(dir / "tiny.bin", archive);

  ModelConfig c;
  c.backbone = "tiny";
  c.reduced_channels = 16;
  c.se_ratio = 4;
  c.modalities = {ModalityKind::LSTE, ModalityKind::LUS};
  c.backbone_weights = (dir / "tiny.bin").string();
  FusionNet net(c);
  for (std::size_t s = 0; s < 2; ++s) {
    NamedParameters loaded;
    net.backbone(s).parameters("", loaded);
    for (std::size_t i = 0; i < loaded.size(); ++i) CHECK(loaded[i].second->value == params[i].second->value);
  }
}

TEST_CASE("trainer learns a separable synthetic task and resumes exactly") {
  TempDir dir("trainer");
  SyntheticSpec spec = SyntheticSpec{}.noiseless();
  spec.stage_patient_counts = {4, 4, 4, 4, 4};
  spec.image_size = 16;
  const auto index = generate_synthetic(spec, 3, dir.path() / "data");
  const std::vector<ModalityKind> mods{ModalityKind::LSTE, ModalityKind::LSTQ};
  const auto tuples = build_tuples(index, mods, index.patient_ids());
  const ImageStore images({16, 16}, Normalization::identity());

  ModelConfig c;
  c.backbone = "tiny";
  c.reduced_channels = 32;
  c.se_ratio = 4;
  c.dropout = 0.2;
  c.freeze_backbone = true;
  c.modalities = mods;
  TrainConfig t;
  t.learning_rate = 5e-3;
  t.epochs = 3;
  t.batch_size = 8;

  std::vector<LabeledExample> examples;
  for (const auto& x : tuples) examples.push_back({&x, x.stage});

  FusionNet net(c);
  Trainer trainer(net, images, t);
  const double first = trainer.train(examples, 1);
  const double later = trainer.train(examples, 5);
  CHECK(later < first);
  const auto preds = trainer.predict(tuples);
  int correct = 0;
  for (std::size_t i = 0; i < tuples.size(); ++i) correct += preds[i].argmax() == tuples[i].stage;
  CHECK(static_cast<double>(correct) / static_cast<double>(tuples.size()) > 0.9);

  // Checkpoint mid-training, continue both copies, compare bit for bit.
  save_checkpoint(dir / "mid.ckpt", net, images.normalization(), &trainer.optimizer());
  const std::string rng_state = trainer.rng_state();
  trainer.train(examples, 2);

  auto loaded = load_checkpoint(dir / "mid.ckpt");
  Trainer resumed(*loaded.model, images, t);
  resumed.optimizer().restore(loaded.optimizer->steps(), loaded.optimizer->moments());
  resumed.restore_rng_state(rng_state);
  resumed.train(examples, 2);
  auto a = net.parameters();
  auto b = loaded.model->parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second->value == b[i].second->value);
}

TEST_CASE("unfrozen training updates the backbone") {
  TempDir dir("unfrozen");
  SyntheticSpec spec;
  spec.stage_patient_counts = {1, 1, 1, 1, 1};
  spec.image_size = 16;
  const auto index = generate_synthetic(spec, 4, dir.path());
  const auto tuples = build_tuples(index, {ModalityKind::LUS}, index.patient_ids());
  const ImageStore images({16, 16}, Normalization::identity());
  ModelConfig c;
  c.backbone = "tiny";
  c.reduced_channels = 16;
  c.se_ratio = 4;
  c.modalities = {ModalityKind::LUS};
  FusionNet net(c);
  NamedParameters bb;
  net.backbone(0).parameters("", bb);
  const Tensor before = bb[0].second->value;
  Trainer trainer(net, images, TrainConfig{1e-3, 1, 4, 0});
  std::vector<LabeledExample> ex;
  for (const auto& x : tuples) ex.push_back({&x, x.stage});
  trainer.train(ex);
  CHECK(max_abs_diff(before, bb[0].second->value) > 0.0);
}
