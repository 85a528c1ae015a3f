#pragma once

#include <Eigen/Core>

#include <cstddef>

namespace valler {

/// T frames of dimension F, one frame per row.
using FrameMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A latent sequence z (or a reconstruction / residual of it).
struct LatentSeq {
  FrameMatrix frames;

  LatentSeq() = default;
  explicit LatentSeq(FrameMatrix f) : frames(std::move(f)) {}
  LatentSeq(std::size_t length, std::size_t dim)
      : frames(FrameMatrix::Zero(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(dim))) {}

  std::size_t length() const noexcept { return static_cast<std::size_t>(frames.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(frames.cols()); }
  bool all_finite() const { return frames.allFinite(); }

  friend bool operator==(const LatentSeq& a, const LatentSeq& b) {
    return a.frames.rows() == b.frames.rows() && a.frames.cols() == b.frames.cols() &&
           a.frames == b.frames;
  }
};

}  // namespace valler
