// AP-vs-iteration curves drawn with OpenCV primitives.

#include <algorithm>
#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "twopc/cli.hpp"

namespace twopc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

const cv::Scalar kPalette[] = {{200, 80, 30}, {40, 40, 220}, {40, 160, 40}, {160, 40, 160}, {20, 150, 200},
                               {90, 90, 90}};

void draw_chart(const std::vector<Series>& series, const std::string& title, const fs::path& path) {
  constexpr int kW = 800, kH = 500, kLeft = 70, kRight = 180, kTop = 40, kBottom = 50;
  cv::Mat img(kH, kW, CV_8UC3, cv::Scalar(255, 255, 255));
  double xmax = 1, ymax = 0.05;
  for (const auto& s : series) {
    for (double x : s.x) xmax = std::max(xmax, x);
    for (double y : s.y) ymax = std::max(ymax, y);
  }
  ymax = std::min(1.0, std::ceil(ymax * 10.0 + 0.5) / 10.0);
  const int pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto px = [&](double x) { return kLeft + static_cast<int>(x / xmax * pw); };
  auto py = [&](double y) { return kTop + ph - static_cast<int>(y / ymax * ph); };
  const cv::Scalar black(0, 0, 0), grid(220, 220, 220);
  for (int i = 0; i <= 5; ++i) {
    const double y = ymax * i / 5;
    cv::line(img, {kLeft, py(y)}, {kLeft + pw, py(y)}, grid, 1);
    cv::putText(img, cv::format("%.2f", y), {8, py(y) + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1, cv::LINE_AA);
    const double x = xmax * i / 5;
    cv::putText(img, cv::format("%.0f", x), {px(x) - 15, kTop + ph + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1,
                cv::LINE_AA);
  }
  cv::rectangle(img, {kLeft, kTop}, {kLeft + pw, kTop + ph}, black, 1);
  cv::putText(img, title, {kLeft, 28}, cv::FONT_HERSHEY_SIMPLEX, 0.7, black, 2, cv::LINE_AA);
  cv::putText(img, "iteration", {kLeft + pw / 2 - 30, kH - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5, black, 1, cv::LINE_AA);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto color = kPalette[k % std::size(kPalette)];
    const auto& s = series[k];
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts.emplace_back(px(s.x[i]), py(s.y[i]));
    if (pts.size() > 1) cv::polylines(img, pts, false, color, 2, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(img, p, 3, color, cv::FILLED, cv::LINE_AA);
    const int ly = kTop + 20 + static_cast<int>(k) * 22;
    cv::line(img, {kLeft + pw + 10, ly - 4}, {kLeft + pw + 30, ly - 4}, color, 2);
    cv::putText(img, s.label.substr(0, 20), {kLeft + pw + 35, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1,
                cv::LINE_AA);
  }
  if (!cv::imwrite(path.string(), img)) throw DataError("cannot write " + path.string());
}

}  // namespace

std::vector<fs::path> plot_curves(const std::vector<fs::path>& logs, const fs::path& out_dir) {
  static const std::pair<const char*, const char*> kMetrics[] = {
      {"ap50", "AP50"}, {"ap_l", "AP50 large"}, {"ap_m", "AP50 medium"}, {"ap_s", "AP50 small"}};
  std::vector<std::vector<Series>> charts(std::size(kMetrics));
  for (const auto& log : logs) {
    std::ifstream in(log);
    if (!in) throw DataError("cannot open metrics log: " + log.string());
    std::string label = log.parent_path().filename().string();
    if (label.empty()) label = log.stem().string();
    for (auto& c : charts) c.push_back({label, {}, {}});
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::parse_error&) {
        throw DataError(log.string() + ":" + std::to_string(line_no) + ": not a JSON record");
      }
      if (!rec.contains("ap50")) continue;
      const double x = rec.at("iter").get<double>() + 1;
      for (std::size_t m = 0; m < std::size(kMetrics); ++m) {
        if (!rec.contains(kMetrics[m].first)) continue;
        charts[m].back().x.push_back(x);
        charts[m].back().y.push_back(rec[kMetrics[m].first].get<double>());
      }
    }
  }
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (std::size_t m = 0; m < std::size(kMetrics); ++m) {
    const auto path = out_dir / (std::string(kMetrics[m].first) + ".png");
    draw_chart(charts[m], kMetrics[m].second, path);
    written.push_back(path);
  }
  return written;
}

}  // namespace twopc
