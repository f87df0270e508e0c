#include "mmfal/plot.hpp"

#include "mmfal/experiment.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mmfal {

namespace {

constexpr int kWidth = 800;
constexpr int kHeight = 520;
constexpr int kLeft = 70;
constexpr int kRight = 30;
constexpr int kTop = 50;
constexpr int kBottom = 60;

const cv::Scalar kAucColor(180, 90, 20);   // BGR
const cv::Scalar kAccColor(40, 40, 200);
const cv::Scalar kAxisColor(60, 60, 60);
const cv::Scalar kGridColor(225, 225, 225);

void text(cv::Mat& img, const std::string& s, cv::Point at, double scale = 0.45, cv::Scalar color = kAxisColor) {
  cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, scale, color, 1, cv::LINE_AA);
}

}  // namespace

void write_learning_curve(const ALHistory& history, const std::filesystem::path& path, const std::string& title) {
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  const int plot_w = kWidth - kLeft - kRight;
  const int plot_h = kHeight - kTop - kBottom;

  double d_max = 0.0;
  for (const auto& r : history.records) d_max = std::max(d_max, r.d);
  d_max = d_max > 0.0 ? std::min(1.0, std::ceil(d_max * 10.0 - 1e-9) / 10.0) : 1.0;

  auto px = [&](double d, double v) {
    return cv::Point(kLeft + static_cast<int>(std::lround(d / d_max * plot_w)),
                     kTop + plot_h - static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * plot_h)));
  };

  for (int k = 0; k <= 10; ++k) {
    const double v = k / 10.0;
    cv::line(img, px(0.0, v), px(d_max, v), kGridColor, 1);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    text(img, buf, px(0.0, v) + cv::Point(-40, 5));
  }
  const int d_ticks = static_cast<int>(std::lround(d_max * 10.0));
  for (int k = 0; k <= d_ticks; ++k) {
    const double d = k / 10.0;
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.0f%%", d * 100.0);
    text(img, buf, px(d, 0.0) + cv::Point(-14, 22));
  }
  cv::rectangle(img, px(0.0, 1.0), px(d_max, 0.0), kAxisColor, 1);
  text(img, "labeled fraction d", cv::Point(kLeft + plot_w / 2 - 70, kHeight - 12), 0.5);
  text(img, title, cv::Point(kLeft, 30), 0.6);

  auto polyline = [&](auto value, const cv::Scalar& color) {
    std::vector<cv::Point> pts;
    for (const auto& r : history.records) pts.push_back(px(r.d, value(r)));
    if (pts.size() > 1) cv::polylines(img, pts, false, color, 2, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(img, p, 3, color, cv::FILLED, cv::LINE_AA);
  };
  polyline([](const ALRecord& r) { return r.macro_auc; }, kAucColor);
  polyline([](const ALRecord& r) { return r.accuracy; }, kAccColor);

  // Legend.
  cv::line(img, cv::Point(kWidth - 200, 25), cv::Point(kWidth - 175, 25), kAucColor, 2);
  text(img, "macro AUC", cv::Point(kWidth - 168, 30));
  cv::line(img, cv::Point(kWidth - 200, 42), cv::Point(kWidth - 175, 42), kAccColor, 2);
  text(img, "accuracy", cv::Point(kWidth - 168, 47));

  if (!history.records.empty()) {
    const auto& best = history.best();
    const cv::Point p = px(best.d, best.macro_auc);
    cv::circle(img, p, 7, kAucColor, 2, cv::LINE_AA);
    const std::string label = format_auc_at(best.macro_auc, best.d);
    int baseline = 0;
    const cv::Size size = cv::getTextSize(label, cv::FONT_HERSHEY_SIMPLEX, 0.5, 1, &baseline);
    const int x = std::clamp(p.x - size.width / 2, kLeft + 4, kWidth - kRight - size.width - 4);
    const int y = p.y - 16 - size.height > kTop ? p.y - 16 : p.y + 16 + size.height;
    cv::rectangle(img, cv::Point(x - 3, y - size.height - 3), cv::Point(x + size.width + 3, y + baseline),
                  cv::Scalar(255, 255, 255), cv::FILLED);
    text(img, label, cv::Point(x, y), 0.5, kAucColor);
  }

  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write plot " + path.string());
}

}  // namespace mmfal
