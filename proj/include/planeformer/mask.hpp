#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "planeformer/geometry.hpp"

namespace pf {

// Binary raster, bit-packed row-major.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width)
      : height_(height), width_(width),
        bits_((static_cast<std::size_t>(height) * width + 63) / 64, 0) {}

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height_) * width_;
  }

  bool get(int y, int x) const {
    const std::size_t i = static_cast<std::size_t>(y) * width_ + x;
    return (bits_[i >> 6] >> (i & 63)) & 1u;
  }

  void set(int y, int x, bool v) {
    const std::size_t i = static_cast<std::size_t>(y) * width_ + x;
    if (v)
      bits_[i >> 6] |= (std::uint64_t{1} << (i & 63));
    else
      bits_[i >> 6] &= ~(std::uint64_t{1} << (i & 63));
  }

  std::size_t count() const;
  bool empty() const { return count() == 0; }

  bool operator==(const Mask& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           bits_ == other.bits_;
  }

  // Row-major run-length encoding, starting with a run of zeros.
  std::vector<std::int64_t> rle_counts() const;
  static Mask from_rle(int height, int width,
                       const std::vector<std::int64_t>& counts);

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint64_t> bits_;
};

// Real-valued grid produced by warping a mask; `degenerate` is set when the
// homography was not invertible and the grid is all zeros.
struct WarpedGrid {
  Eigen::MatrixXd values;  // rows x cols in [0, 1]
  bool degenerate = false;
};

// Inverse-warps `mask` (source view) into the destination pixel grid implied
// by `h` (src pixel -> dst pixel), sampling bilinearly with zero padding, then
// area-averages the dst_height x dst_width full-resolution result down to a
// grid_rows x grid_cols grid.
WarpedGrid warp_and_downsample_mask(const Mask& mask, const Homography& h,
                                    int dst_height, int dst_width,
                                    int grid_rows, int grid_cols);

// Full-resolution binary warp of `mask` into the destination grid (used by
// scene-level evaluation): a dst pixel is set when the bilinear sample of the
// source mask at its preimage is >= 0.5.
Mask warp_mask_binary(const Mask& mask, const Homography& h, int dst_height,
                      int dst_width);

}  // namespace pf
