#include "planeformer/mask.hpp"

#include <bit>
#include <stdexcept>

namespace pf {

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto word : bits_) n += std::popcount(word);
  return n;
}

std::vector<std::int64_t> Mask::rle_counts() const {
  std::vector<std::int64_t> counts;
  bool current = false;  // runs start with zeros
  std::int64_t run = 0;
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      const bool v = get(y, x);
      if (v == current) {
        ++run;
      } else {
        counts.push_back(run);
        current = v;
        run = 1;
      }
    }
  }
  counts.push_back(run);
  return counts;
}

Mask Mask::from_rle(int height, int width,
                    const std::vector<std::int64_t>& counts) {
  Mask m(height, width);
  std::int64_t pos = 0;
  bool current = false;
  for (auto c : counts) {
    if (c < 0) throw std::invalid_argument("rle: negative run length");
    if (current) {
      for (std::int64_t i = 0; i < c; ++i) {
        const std::int64_t p = pos + i;
        m.set(static_cast<int>(p / width), static_cast<int>(p % width), true);
      }
    }
    pos += c;
    current = !current;
  }
  if (pos != static_cast<std::int64_t>(m.pixel_count()))
    throw std::invalid_argument("rle: run lengths do not cover the raster");
  return m;
}

namespace {

// Bilinear sample of a binary mask at continuous pixel coordinates, where the
// value of pixel (x, y) sits at its center (x + 0.5, y + 0.5). Zero outside.
double sample_bilinear(const Mask& mask, double sx, double sy) {
  const double gx = sx - 0.5;
  const double gy = sy - 0.5;
  const int x0 = static_cast<int>(std::floor(gx));
  const int y0 = static_cast<int>(std::floor(gy));
  const double fx = gx - x0;
  const double fy = gy - y0;
  double v = 0.0;
  for (int dy = 0; dy <= 1; ++dy) {
    const int y = y0 + dy;
    if (y < 0 || y >= mask.height()) continue;
    const double wy = dy ? fy : 1.0 - fy;
    for (int dx = 0; dx <= 1; ++dx) {
      const int x = x0 + dx;
      if (x < 0 || x >= mask.width()) continue;
      const double wx = dx ? fx : 1.0 - fx;
      if (mask.get(y, x)) v += wx * wy;
    }
  }
  return v;
}

bool invert_homography(const Mat3& h, Mat3* out) {
  const double det = h.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-15) return false;
  *out = h.inverse();
  return true;
}

}  // namespace

WarpedGrid warp_and_downsample_mask(const Mask& mask, const Homography& h,
                                    int dst_height, int dst_width,
                                    int grid_rows, int grid_cols) {
  if (grid_rows <= 0 || grid_cols <= 0 || dst_height <= 0 || dst_width <= 0)
    throw std::invalid_argument("warp_and_downsample_mask: bad grid size");
  WarpedGrid out;
  out.values = Eigen::MatrixXd::Zero(grid_rows, grid_cols);

  Mat3 hinv;
  if (!invert_homography(h.h, &hinv)) {
    out.degenerate = true;
    return out;
  }

  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(grid_rows, grid_cols);
  Eigen::MatrixXd areas = Eigen::MatrixXd::Zero(grid_rows, grid_cols);
  for (int y = 0; y < dst_height; ++y) {
    const int cell_r = static_cast<int>(static_cast<std::int64_t>(y) * grid_rows / dst_height);
    for (int x = 0; x < dst_width; ++x) {
      const int cell_c = static_cast<int>(static_cast<std::int64_t>(x) * grid_cols / dst_width);
      const Vec3 src = hinv * Vec3(x + 0.5, y + 0.5, 1.0);
      double v = 0.0;
      if (std::abs(src.z()) > 1e-12) {
        v = sample_bilinear(mask, src.x() / src.z(), src.y() / src.z());
      }
      sums(cell_r, cell_c) += v;
      areas(cell_r, cell_c) += 1.0;
    }
  }
  for (int r = 0; r < grid_rows; ++r)
    for (int c = 0; c < grid_cols; ++c)
      out.values(r, c) = areas(r, c) > 0 ? sums(r, c) / areas(r, c) : 0.0;
  return out;
}

Mask warp_mask_binary(const Mask& mask, const Homography& h, int dst_height,
                      int dst_width) {
  Mask out(dst_height, dst_width);
  Mat3 hinv;
  if (!invert_homography(h.h, &hinv)) return out;
  for (int y = 0; y < dst_height; ++y) {
    for (int x = 0; x < dst_width; ++x) {
      const Vec3 src = hinv * Vec3(x + 0.5, y + 0.5, 1.0);
      if (std::abs(src.z()) <= 1e-12) continue;
      if (sample_bilinear(mask, src.x() / src.z(), src.y() / src.z()) >= 0.5)
        out.set(y, x, true);
    }
  }
  return out;
}

}  // namespace pf
