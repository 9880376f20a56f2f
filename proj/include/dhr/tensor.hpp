#ifndef DHR_TENSOR_HPP
#define DHR_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dhr/error.hpp"

namespace dhr {

// Dense H x W scalar field, row-major.
template <class T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(std::size_t height, std::size_t width, T fill = T{})
      : height_(height), width_(width), values_(height * width, fill) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  T& operator()(std::size_t y, std::size_t x) { return values_[y * width_ + x]; }
  const T& operator()(std::size_t y, std::size_t x) const { return values_[y * width_ + x]; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }

  template <class U>
  bool same_shape(const Grid<U>& other) const noexcept {
    return height_ == other.height() && width_ == other.width();
  }

  template <class U>
  Grid<U> cast() const {
    Grid<U> out(height_, width_);
    std::transform(values_.begin(), values_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Grid&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> values_;
};

// Dense C x H x W tensor, channel-major then row-major.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(std::size_t channels, std::size_t height, std::size_t width, T fill = T{})
      : channels_(channels), height_(height), width_(width), values_(channels * height * width, fill) {}

  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t plane_size() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  T& operator()(std::size_t c, std::size_t y, std::size_t x) {
    return values_[(c * height_ + y) * width_ + x];
  }
  const T& operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return values_[(c * height_ + y) * width_ + x];
  }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  std::span<T> channel(std::size_t c) { return std::span<T>(values_).subspan(c * plane_size(), plane_size()); }
  std::span<const T> channel(std::size_t c) const {
    return std::span<const T>(values_).subspan(c * plane_size(), plane_size());
  }

  template <class U>
  bool same_shape(const Tensor<U>& other) const noexcept {
    return channels_ == other.channels() && height_ == other.height() && width_ == other.width();
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(channels_, height_, width_);
    std::transform(values_.begin(), values_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> values_;
};

// RGB raster, three channels in [-1, 1]. Values are only clamped on export.
template <class T>
class BasicImage : public Tensor<T> {
 public:
  BasicImage() = default;
  BasicImage(std::size_t height, std::size_t width, T fill = T{}) : Tensor<T>(3, height, width, fill) {}
  explicit BasicImage(Tensor<T> pixels) : Tensor<T>(std::move(pixels)) {
    if (this->channels() != 3) throw ArgumentError("image requires exactly 3 channels");
  }

  template <class U>
  BasicImage<U> cast() const {
    return BasicImage<U>(Tensor<T>::template cast<U>());
  }
};

using Image = BasicImage<float>;

// Binary H x W map: 1 = in-domain, 0 = out-of-domain.
class DomainMask {
 public:
  DomainMask() = default;
  DomainMask(std::size_t height, std::size_t width, std::uint8_t fill = 1) : bits_(height, width, fill ? 1 : 0) {}

  static DomainMask from_grid(const Grid<std::uint8_t>& bits) {
    DomainMask m(bits.height(), bits.width());
    for (std::size_t i = 0; i < bits.size(); ++i) m.bits_[i] = bits[i] ? 1 : 0;
    return m;
  }

  std::size_t height() const noexcept { return bits_.height(); }
  std::size_t width() const noexcept { return bits_.width(); }
  std::size_t size() const noexcept { return bits_.size(); }

  std::uint8_t operator()(std::size_t y, std::size_t x) const { return bits_(y, x); }
  std::uint8_t operator[](std::size_t i) const { return bits_[i]; }
  void set(std::size_t y, std::size_t x, bool in_domain) { bits_(y, x) = in_domain ? 1 : 0; }
  void set(std::size_t i, bool in_domain) { bits_[i] = in_domain ? 1 : 0; }

  std::size_t count_in() const {
    std::size_t n = 0;
    for (auto b : bits_.values()) n += b;
    return n;
  }
  std::size_t count_out() const { return size() - count_in(); }

  const Grid<std::uint8_t>& bits() const noexcept { return bits_; }

  bool operator==(const DomainMask&) const = default;

 private:
  Grid<std::uint8_t> bits_;
};

// Bit-exact 64-bit FNV-1a over raw bytes; used for golden checksums and cache keys.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 1099511628211ull;
    }
  }
  template <class T>
  void update(std::span<const T> values) {
    update(values.data(), values.size_bytes());
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::uint64_t digest() const noexcept { return hash_; }

 private:
  std::uint64_t hash_ = 14695981039346656037ull;
};

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

template <class T>
std::uint64_t checksum(std::span<T> values) {
  Fnv1a h;
  h.update(values.data(), values.size_bytes());
  return h.digest();
}

}  // namespace dhr

#endif  // DHR_TENSOR_HPP
