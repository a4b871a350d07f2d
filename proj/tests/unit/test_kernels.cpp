#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "twopc/kernels.hpp"

using namespace twopc;
namespace k = twopc::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1, 1);
  return v;
}

void require_close(const std::vector<double>& a, const std::vector<double>& b, double tol = 1e-10) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == doctest::Approx(b[i]).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_CASE("parallel conv matches the serial reference on random geometries") {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    k::ConvGeometry g{1 + rng.uniform_int(5), 3 + rng.uniform_int(12), 3 + rng.uniform_int(12), 1 + rng.uniform_int(6),
                      rng.uniform_int(2) ? 3 : 1, 1 + rng.uniform_int(2), 0};
    g.pad = g.kernel == 3 ? rng.uniform_int(2) : 0;
    CAPTURE(trial);
    const auto in = random_vec(g.input_size(), rng);
    const auto w = random_vec(g.weight_size(), rng);
    const auto b = random_vec(g.out_channels, rng);
    std::vector<double> out(g.output_size()), ref(g.output_size());
    k::conv2d_forward(g, in, w, b, out);
    k::reference::conv2d_forward(g, in, w, b, ref);
    require_close(out, ref);

    const auto gout = random_vec(g.output_size(), rng);
    std::vector<double> gin(g.input_size()), gin_ref(g.input_size());
    auto gw = random_vec(g.weight_size(), rng);  // backward accumulates into weight/bias gradients
    auto gw_ref = gw;
    std::vector<double> gb(g.out_channels, 0.5), gb_ref(g.out_channels, 0.5);
    k::conv2d_backward(g, in, w, gout, gin, gw, gb);
    k::reference::conv2d_backward(g, in, w, gout, gin_ref, gw_ref, gb_ref);
    require_close(gin, gin_ref);
    require_close(gw, gw_ref);
    require_close(gb, gb_ref);
  }
}

TEST_CASE("conv backward is the adjoint of conv forward") {
  Rng rng(5);
  k::ConvGeometry g{3, 9, 7, 4, 3, 2, 1};
  const auto x = random_vec(g.input_size(), rng);
  const auto w = random_vec(g.weight_size(), rng);
  const std::vector<double> zero_bias(g.out_channels, 0.0);
  const auto y = random_vec(g.output_size(), rng);
  std::vector<double> ax(g.output_size()), aty(g.input_size()), gw(g.weight_size()), gb(g.out_channels);
  k::conv2d_forward(g, x, w, zero_bias, ax);
  k::conv2d_backward(g, x, w, y, aty, gw, gb);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < ax.size(); ++i) lhs += ax[i] * y[i];
  for (std::size_t i = 0; i < aty.size(); ++i) rhs += x[i] * aty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("parallel linear matches the serial reference") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    k::LinearGeometry g{1 + rng.uniform_int(9), 1 + rng.uniform_int(40), 1 + rng.uniform_int(20)};
    const auto in = random_vec(static_cast<std::size_t>(g.rows) * g.in_features, rng);
    const auto w = random_vec(static_cast<std::size_t>(g.in_features) * g.out_features, rng);
    const auto b = random_vec(g.out_features, rng);
    std::vector<double> out(static_cast<std::size_t>(g.rows) * g.out_features), ref(out.size());
    k::linear_forward(g, in, w, b, out);
    k::reference::linear_forward(g, in, w, b, ref);
    require_close(out, ref);
    const auto gout = random_vec(out.size(), rng);
    std::vector<double> gin(in.size()), gin_ref(in.size()), gw(w.size(), 0.0), gw_ref(w.size(), 0.0),
        gb(b.size(), 0.0), gb_ref(b.size(), 0.0);
    k::linear_backward(g, in, w, gout, gin, gw, gb);
    k::reference::linear_backward(g, in, w, gout, gin_ref, gw_ref, gb_ref);
    require_close(gin, gin_ref);
    require_close(gw, gw_ref);
    require_close(gb, gb_ref);
  }
}

TEST_CASE("parallel RoIAlign matches the serial reference, including boxes at the border") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    k::RoiAlignGeometry g{1 + rng.uniform_int(4), 4 + rng.uniform_int(12), 4 + rng.uniform_int(12), 7, 2, 0.125};
    const auto feat = random_vec(static_cast<std::size_t>(g.channels) * g.height * g.width, rng);
    std::vector<Box> rois;
    const double W = g.width / g.spatial_scale, H = g.height / g.spatial_scale;
    for (int r = 0; r < 1 + rng.uniform_int(6); ++r) {
      const double x1 = rng.uniform(-2, W - 2), y1 = rng.uniform(-2, H - 2);
      rois.push_back({x1, y1, x1 + rng.uniform(0.5, W), y1 + rng.uniform(0.5, H)});
    }
    std::vector<double> out(rois.size() * g.roi_size()), ref(out.size());
    k::roi_align_forward(g, feat, rois, out);
    k::reference::roi_align_forward(g, feat, rois, ref);
    require_close(out, ref);
    const auto gout = random_vec(out.size(), rng);
    std::vector<double> gf(feat.size(), 0.25), gf_ref(feat.size(), 0.25);
    k::roi_align_backward(g, rois, gout, gf);
    k::reference::roi_align_backward(g, rois, gout, gf_ref);
    require_close(gf, gf_ref);
  }
}

TEST_CASE("RoIAlign of a constant map is that constant") {
  k::RoiAlignGeometry g{2, 8, 8, 7, 2, 0.125};
  std::vector<double> feat(2 * 8 * 8, 0.75);
  const std::vector<Box> rois{{3, 5, 40, 33}, {0, 0, 64, 64}};
  std::vector<double> out(rois.size() * g.roi_size());
  k::roi_align_forward(g, feat, rois, out);
  for (double v : out) CHECK(v == doctest::Approx(0.75));
}
