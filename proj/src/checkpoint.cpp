#include "mmfal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mmfal {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "tensor archives assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'M', 'F', 'A', 'L', 'T', 'A', '1'};

}  // namespace

const Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  json header;
  header["meta"] = archive.meta;
  header["tensors"] = json::array();
  for (const auto& [name, t] : archive.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", {t.channels(), t.height(), t.width()}}});
  }
  const std::string text = header.dump();
  const std::uint64_t length = text.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : archive.tensors) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw IoError("short write to " + path.string());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DecodeError(path.string() + " is not a tensor archive");
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || length > (1ULL << 32)) throw DecodeError("corrupt archive header in " + path.string());
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw DecodeError("corrupt archive header in " + path.string() + ": " + e.what());
  }
  TensorArchive archive;
  archive.meta = header.value("meta", json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto& s = entry.at("shape");
    Tensor t(Shape{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()});
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw DecodeError("truncated tensor '" + entry.at("name").get<std::string>() + "' in " + path.string());
    archive.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return archive;
}

void load_parameters(const NamedParameters& params, const TensorArchive& archive, const std::string& prefix,
                     bool strict) {
  for (const auto& [name, p] : params) {
    const Tensor* t = archive.find(prefix + name);
    if (!t) {
      if (strict) throw DecodeError("archive is missing tensor '" + prefix + name + "'");
      continue;
    }
    if (t->shape() != p->value.shape()) {
      throw DecodeError("tensor '" + prefix + name + "' has shape " + to_string(t->shape()) + ", expected " +
                        to_string(p->value.shape()));
    }
    p->value = *t;
  }
}

void load_backbone_weights(Backbone& backbone, const std::filesystem::path& path) {
  NamedParameters params;
  backbone.parameters("", params);
  load_parameters(params, read_archive(path));
}

void save_checkpoint(const std::filesystem::path& path, FusionNet& model, const Normalization& norm,
                     const Adam* optimizer, json extra) {
  TensorArchive archive;
  archive.meta["kind"] = "mmfal-checkpoint";
  archive.meta["model_config"] = model.config();
  archive.meta["normalization"] = {{"mean", norm.mean}, {"std", norm.std}};
  archive.meta["resize_interpolation"] = kResizeInterpolation;
  archive.meta["extra"] = std::move(extra);
  for (const auto& [name, p] : model.parameters()) archive.tensors.emplace_back(name, p->value);
  if (optimizer) {
    const auto& c = optimizer->config();
    archive.meta["adam"] = {{"steps", optimizer->steps()},
                            {"learning_rate", c.learning_rate},
                            {"beta1", c.beta1},
                            {"beta2", c.beta2},
                            {"epsilon", c.epsilon}};
    for (const auto& [name, mo] : optimizer->moments()) {
      archive.tensors.emplace_back("adam.m." + name, mo.m);
      archive.tensors.emplace_back("adam.v." + name, mo.v);
    }
  }
  write_archive(path, archive);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorArchive archive = read_archive(path);
  if (archive.meta.value("kind", "") != "mmfal-checkpoint") throw DecodeError(path.string() + " is not a model checkpoint");

  LoadedCheckpoint out;
  out.model = std::make_unique<FusionNet>(archive.meta.at("model_config").get<ModelConfig>(), false);
  load_parameters(out.model->parameters(), archive);
  const auto& n = archive.meta.at("normalization");
  out.normalization.mean = n.at("mean");
  out.normalization.std = n.at("std");
  out.extra = archive.meta.value("extra", json::object());

  if (archive.meta.contains("adam")) {
    const auto& a = archive.meta.at("adam");
    AdamConfig c{a.at("learning_rate"), a.at("beta1"), a.at("beta2"), a.at("epsilon")};
    out.optimizer = std::make_unique<Adam>(c);
    std::map<std::string, Adam::Moments> moments;
    for (const auto& [name, t] : archive.tensors) {
      if (name.rfind("adam.m.", 0) == 0) moments[name.substr(7)].m = t;
      if (name.rfind("adam.v.", 0) == 0) moments[name.substr(7)].v = t;
    }
    out.optimizer->restore(a.at("steps").get<long long>(), std::move(moments));
  }
  return out;
}

}  // namespace mmfal
