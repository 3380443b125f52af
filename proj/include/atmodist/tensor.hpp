#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "atmodist/error.hpp"

namespace atmodist {

/// Cache-line aligned allocation. Eigen peels unaligned heads off vectorised
/// loops, so a buffer's address would otherwise decide the rounding of the
/// results; fixed alignment keeps runs bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename S>
using aligned_vector = std::vector<S, AlignedAllocator<S>>;

/// Dense rank-4 activation tensor in channel-major [channel, batch, height, width] order.
///
/// Channel-major layout lets a convolution be a single GEMM over the whole
/// batch: the im2col matrix has one column per (sample, y, x) and the product
/// with the [out, in*k*k] weight matrix lands directly in this layout.
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int batch, int height, int width, S fill = S(0))
      : c_(channels), n_(batch), h_(height), w_(width),
        data_(static_cast<std::size_t>(channels) * batch * height * width, fill) {}

  int channels() const noexcept { return c_; }
  int batch() const noexcept { return n_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  /// Elements per channel row (batch * height * width).
  std::size_t row_size() const noexcept { return static_cast<std::size_t>(n_) * h_ * w_; }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> flat() noexcept { return data_; }
  std::span<const S> flat() const noexcept { return data_; }
  aligned_vector<S>& storage() noexcept { return data_; }
  const aligned_vector<S>& storage() const noexcept { return data_; }

  S& operator()(int c, int n, int y, int x) noexcept { return data_[index(c, n, y, x)]; }
  S operator()(int c, int n, int y, int x) const noexcept { return data_[index(c, n, y, x)]; }

  std::size_t index(int c, int n, int y, int x) const noexcept {
    assert(c >= 0 && c < c_ && n >= 0 && n < n_ && y >= 0 && y < h_ && x >= 0 && x < w_);
    return ((static_cast<std::size_t>(c) * n_ + n) * h_ + y) * w_ + x;
  }

  bool same_shape(const Tensor& o) const noexcept {
    return c_ == o.c_ && n_ == o.n_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_string() const {
    return "[" + std::to_string(c_) + "," + std::to_string(n_) + "," + std::to_string(h_) + "," +
           std::to_string(w_) + "]";
  }

 private:
  int c_ = 0, n_ = 0, h_ = 0, w_ = 0;
  aligned_vector<S> data_;
};

/// Concatenate two tensors of equal shape along the batch axis.
template <typename S>
Tensor<S> concat_batch(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width())
    throw InputError("concat_batch: " + a.shape_string() + " vs " + b.shape_string());
  Tensor<S> out(a.channels(), a.batch() + b.batch(), a.height(), a.width());
  const std::size_t ra = a.row_size(), rb = b.row_size();
  for (int c = 0; c < a.channels(); ++c) {
    std::copy_n(a.data() + c * ra, ra, out.data() + c * (ra + rb));
    std::copy_n(b.data() + c * rb, rb, out.data() + c * (ra + rb) + ra);
  }
  return out;
}

/// Split along the batch axis at `first` samples.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> split_batch(const Tensor<S>& t, int first) {
  Tensor<S> a(t.channels(), first, t.height(), t.width());
  Tensor<S> b(t.channels(), t.batch() - first, t.height(), t.width());
  const std::size_t ra = a.row_size(), rb = b.row_size();
  for (int c = 0; c < t.channels(); ++c) {
    std::copy_n(t.data() + c * (ra + rb), ra, a.data() + c * ra);
    std::copy_n(t.data() + c * (ra + rb) + ra, rb, b.data() + c * rb);
  }
  return {std::move(a), std::move(b)};
}

/// Stack two tensors of equal shape along the channel axis.
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.batch() != b.batch() || a.height() != b.height() || a.width() != b.width())
    throw InputError("concat_channels: " + a.shape_string() + " vs " + b.shape_string());
  Tensor<S> out(a.channels() + b.channels(), a.batch(), a.height(), a.width());
  std::copy(a.storage().begin(), a.storage().end(), out.data());
  std::copy(b.storage().begin(), b.storage().end(), out.data() + a.size());
  return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& t, int first) {
  Tensor<S> a(first, t.batch(), t.height(), t.width());
  Tensor<S> b(t.channels() - first, t.batch(), t.height(), t.width());
  std::copy_n(t.data(), a.size(), a.data());
  std::copy_n(t.data() + a.size(), b.size(), b.data());
  return {std::move(a), std::move(b)};
}

/// A single multi-channel image patch stored [height, width, channel].
template <typename S>
struct Patch {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<S> values;

  Patch() = default;
  Patch(int h, int w, int c, S fill = S(0))
      : height(h), width(w), channels(c), values(static_cast<std::size_t>(h) * w * c, fill) {}

  S& at(int y, int x, int c) noexcept { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  S at(int y, int x, int c) const noexcept {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const Patch& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

/// Pack patches into a channel-major batch tensor.
template <typename S, typename P>
Tensor<S> to_batch(std::span<const P* const> patches) {
  if (patches.empty()) throw InputError("to_batch: empty batch");
  const auto& p0 = *patches.front();
  Tensor<S> t(p0.channels, static_cast<int>(patches.size()), p0.height, p0.width);
  for (int n = 0; n < t.batch(); ++n) {
    const auto& p = *patches[n];
    if (!p.same_shape(p0)) throw InputError("to_batch: patches of different shapes");
    for (int y = 0; y < p.height; ++y)
      for (int x = 0; x < p.width; ++x)
        for (int c = 0; c < p.channels; ++c) t(c, n, y, x) = static_cast<S>(p.at(y, x, c));
  }
  return t;
}

template <typename S, typename P>
Tensor<S> to_batch(const std::vector<P>& patches) {
  std::vector<const P*> ptrs;
  ptrs.reserve(patches.size());
  for (const auto& p : patches) ptrs.push_back(&p);
  return to_batch<S, P>(std::span<const P* const>(ptrs));
}

template <typename S>
Tensor<S> to_batch(const Patch<S>& patch) {
  const Patch<S>* one = &patch;
  return to_batch<S, Patch<S>>(std::span<const Patch<S>* const>(&one, 1));
}

/// Unpack sample `n` of a batch tensor into a patch.
template <typename P, typename S>
P from_batch(const Tensor<S>& t, int n) {
  P p(t.height(), t.width(), t.channels());
  for (int y = 0; y < t.height(); ++y)
    for (int x = 0; x < t.width(); ++x)
      for (int c = 0; c < t.channels(); ++c)
        p.at(y, x, c) = static_cast<typename decltype(p.values)::value_type>(t(c, n, y, x));
  return p;
}

}  // namespace atmodist
