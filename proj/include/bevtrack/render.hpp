#pragma once

// Static top-down images: feature grids as PPM via a PCA projection to RGB,
// box records as SVG. Forward (+x) points up and left (+y) points left.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "bevtrack/error.hpp"
#include "bevtrack/geometry.hpp"
#include "bevtrack/numerics/tensor.hpp"
#include "bevtrack/tracker.hpp"

namespace bev {

struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

// Principal axes of the cell vectors, strongest first. Each axis is signed so
// that its largest-magnitude component is positive (first index on ties), which
// makes the projection independent of the eigensolver's sign choice.
inline Eigen::MatrixXd principal_axes(const Eigen::MatrixXd& x, int k) {
  const Eigen::Index c = x.cols();
  Eigen::MatrixXd axes = Eigen::MatrixXd::Zero(c, k);
  if (x.rows() == 0 || c == 0) return axes;
  const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw DomainError("eigen decomposition failed");
  for (int j = 0; j < k && j < c; ++j) {
    Eigen::VectorXd v = es.eigenvectors().col(c - 1 - j);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < c; ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0.0) v = -v;
    axes.col(j) = v;
  }
  return axes;
}

// Grid cell (row r = x bin, col c = y bin) lands at image row R-1-r, column W-1-c.
inline Image render_grid(const FeatureGrid& g, const std::vector<std::uint8_t>* valid = nullptr, int pixels_per_cell = 8) {
  if (g.empty()) throw DimensionError("cannot render an empty grid");
  if (valid && valid->size() != g.cells()) throw DimensionError("mask size does not match the grid");
  if (pixels_per_cell < 1) throw DomainError("pixels per cell must be positive");
  auto is_valid = [&](std::size_t i) { return !valid || (*valid)[i] != 0; };

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < g.cells(); ++i)
    if (is_valid(i)) rows.push_back(i);
  const auto c = static_cast<Eigen::Index>(g.channels);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), c);
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (Eigen::Index j = 0; j < c; ++j)
      x(static_cast<Eigen::Index>(k), j) = g.values[rows[k] * g.channels + static_cast<std::size_t>(j)];

  // one channel is shown as grey, otherwise the top three components as RGB
  Eigen::MatrixXd proj;
  if (c == 1) {
    proj = x.replicate(1, 3);
  } else {
    const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
    proj = centred * principal_axes(x, 3);
  }
  std::vector<std::array<std::uint8_t, 3>> colour(g.cells(), {0, 0, 0});
  if (proj.rows() > 0) {
    const Eigen::RowVectorXd lo = proj.colwise().minCoeff(), hi = proj.colwise().maxCoeff();
    for (Eigen::Index k = 0; k < proj.rows(); ++k)
      for (int ch = 0; ch < 3; ++ch) {
        const double span = hi(ch) - lo(ch);
        const double t = span > 1e-12 ? (proj(k, ch) - lo(ch)) / span : 0.5;
        colour[rows[static_cast<std::size_t>(k)]][static_cast<std::size_t>(ch)] =
            static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
      }
  }

  Image img;
  img.width = static_cast<int>(g.width) * pixels_per_cell;
  img.height = static_cast<int>(g.height) * pixels_per_cell;
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int py = 0; py < img.height; ++py)
    for (int px = 0; px < img.width; ++px) {
      const std::size_t r = g.height - 1 - static_cast<std::size_t>(py / pixels_per_cell);
      const std::size_t col = g.width - 1 - static_cast<std::size_t>(px / pixels_per_cell);
      const auto& rgb = colour[r * g.width + col];
      std::copy(rgb.begin(), rgb.end(), img.rgb.begin() + (static_cast<std::ptrdiff_t>(py) * img.width + px) * 3);
    }
  return img;
}

inline void write_ppm(std::ostream& os, const Image& img) {
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  write_ppm(f, img);
}

// ---- records as SVG ----------------------------------------------------------

// Evenly spread hues by the golden ratio; id -1 is grey.
inline std::string track_colour(int id) {
  if (id < 0) return "#808080";
  const double h = std::fmod(static_cast<double>(id) * 0.618033988749895, 1.0) * 6.0;
  const double f = h - std::floor(h);
  const double v = 0.9, s = 0.75;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (static_cast<int>(h)) {
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    case 5: r = v, g = p, b = q; break;
    default: break;
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(r * 255)),
                static_cast<int>(std::lround(g * 255)), static_cast<int>(std::lround(b * 255)));
  return buf;
}

// One polygon per box footprint and one polyline per track id seen in more
// than one frame. `frame` restricts the drawing to a single frame.
inline std::string render_records_svg(const std::vector<TrackRecord>& recs, const BevGridSpec& grid,
                                      std::optional<int> frame = std::nullopt, double pixels_per_metre = 12.0) {
  grid.validate();
  const double w = (grid.y_max - grid.y_min) * pixels_per_metre, h = (grid.x_max - grid.x_min) * pixels_per_metre;
  auto px = [&](double y) { return (grid.y_max - y) * pixels_per_metre; };
  auto py = [&](double x) { return (grid.x_max - x) * pixels_per_metre; };
  char buf[128];
  std::ostringstream os;
  std::snprintf(buf, sizeof buf, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\">\n", w, h);
  os << buf;
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\" stroke=\"black\"/>\n";
  std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"4\" fill=\"black\"/>\n", px(0.0), py(0.0));
  os << buf;

  std::map<int, std::vector<const TrackRecord*>> by_id;
  for (const auto& r : recs) {
    if (frame && r.frame != *frame) continue;
    const Box3 b = r.box();
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    os << "<polygon fill=\"none\" stroke=\"" << track_colour(r.track_id) << "\" points=\"";
    const double corners[4][2] = {{1, 1}, {1, -1}, {-1, -1}, {-1, 1}};
    for (int k = 0; k < 4; ++k) {
      const double lx = corners[k][0] * b.length / 2, ly = corners[k][1] * b.width / 2;
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", k ? " " : "", px(b.center.y() + s * lx + c * ly),
                    py(b.center.x() + c * lx - s * ly));
      os << buf;
    }
    os << "\"/>\n";
    if (r.track_id >= 0) by_id[r.track_id].push_back(&r);
  }
  for (auto& [id, rs] : by_id) {
    if (rs.size() < 2) continue;
    std::stable_sort(rs.begin(), rs.end(), [](const auto* a, const auto* b) { return a->frame < b->frame; });
    os << "<polyline fill=\"none\" stroke=\"" << track_colour(id) << "\" points=\"";
    for (std::size_t k = 0; k < rs.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", k ? " " : "", px(rs[k]->anchor[1]), py(rs[k]->anchor[0]));
      os << buf;
    }
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace bev
