#ifndef DHR_LATENT_HPP
#define DHR_LATENT_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dhr/error.hpp"

namespace dhr {

enum class LatentSpace { Z, W, Wplus };

inline std::string_view to_string(LatentSpace s) {
  switch (s) {
    case LatentSpace::Z: return "Z";
    case LatentSpace::W: return "W";
    case LatentSpace::Wplus: return "Wplus";
  }
  return "?";
}

inline LatentSpace parse_latent_space(std::string_view s) {
  if (s == "Z") return LatentSpace::Z;
  if (s == "W") return LatentSpace::W;
  if (s == "Wplus" || s == "W+") return LatentSpace::Wplus;
  throw ArgumentError("unknown latent space '" + std::string(s) + "'");
}

// A point in Z, W or W+. Z and W codes have one row; W+ has one row per
// style-consuming generator layer.
template <class T>
class BasicLatentCode {
 public:
  BasicLatentCode() = default;

  BasicLatentCode(LatentSpace space, std::size_t rows, std::size_t dim, std::vector<T> values)
      : space_(space), rows_(rows), dim_(dim), values_(std::move(values)) {
    if (values_.size() != rows_ * dim_) throw ArgumentError("latent values do not match rows x dim");
    if (space_ != LatentSpace::Wplus && rows_ != 1) throw ArgumentError("Z/W latent codes have exactly one row");
    if (!std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); }))
      throw ArgumentError("latent code has non-finite entries");
  }

  static BasicLatentCode vector(LatentSpace space, std::vector<T> values) {
    auto dim = values.size();
    return BasicLatentCode(space, 1, dim, std::move(values));
  }

  static BasicLatentCode zeros(LatentSpace space, std::size_t rows, std::size_t dim) {
    return BasicLatentCode(space, rows, dim, std::vector<T>(rows * dim, T(0)));
  }

  LatentSpace space() const noexcept { return space_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t dim() const noexcept { return dim_; }

  std::span<const T> row(std::size_t r) const { return std::span<const T>(values_).subspan(r * dim_, dim_); }
  std::span<T> row(std::size_t r) { return std::span<T>(values_).subspan(r * dim_, dim_); }
  std::span<const T> values() const noexcept { return values_; }
  std::span<T> values() noexcept { return values_; }

  // W -> W+ by row replication.
  BasicLatentCode lifted(std::size_t n_layers) const {
    if (space_ == LatentSpace::Wplus) {
      if (rows_ != n_layers) throw ConfigurationError("W+ code row count does not match generator");
      return *this;
    }
    if (space_ != LatentSpace::W) throw ArgumentError("only W codes can be lifted to W+");
    std::vector<T> out;
    out.reserve(n_layers * dim_);
    for (std::size_t r = 0; r < n_layers; ++r) out.insert(out.end(), values_.begin(), values_.end());
    return BasicLatentCode(LatentSpace::Wplus, n_layers, dim_, std::move(out));
  }

  template <class U>
  BasicLatentCode<U> cast() const {
    std::vector<U> v(values_.begin(), values_.end());
    return BasicLatentCode<U>(space_, rows_, dim_, std::move(v));
  }

  bool operator==(const BasicLatentCode&) const = default;

 private:
  LatentSpace space_ = LatentSpace::W;
  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<T> values_;
};

using LatentCode = BasicLatentCode<float>;

}  // namespace dhr

#endif  // DHR_LATENT_HPP
