// Compares the ResNet-50 trunk against reference activations:
//   resnet50_parity <weights archive> <archive with "x" and "y">
#include "mmfal/checkpoint.hpp"

#include <cmath>
#include <cstdio>

int main(int argc, char** argv) {
  if (argc != 3) {
    std::fprintf(stderr, "usage: %s WEIGHTS IO\n", argv[0]);
    return 2;
  }
  auto backbone = mmfal::make_backbone("resnet50");
  mmfal::load_backbone_weights(*backbone, argv[1]);
  const auto io = mmfal::read_archive(argv[2]);
  const auto y = backbone->forward(*io.find("x"), nullptr);
  const auto& ref = *io.find("y");
  if (y.shape() != ref.shape()) {
    std::printf("shape %s, expected %s\n", mmfal::to_string(y.shape()).c_str(), mmfal::to_string(ref.shape()).c_str());
    return 1;
  }
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    diff = std::max(diff, std::abs(y.data()[i] - ref.data()[i]));
    scale = std::max(scale, std::abs(ref.data()[i]));
  }
  const bool ok = diff <= 1e-9 * std::max(scale, 1.0);
  std::printf("max abs diff %.3g (max |y| %.3g): %s\n", diff, scale, ok ? "ok" : "MISMATCH");
  return ok ? 0 : 1;
}
