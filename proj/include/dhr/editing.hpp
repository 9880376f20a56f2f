#ifndef DHR_EDITING_HPP
#define DHR_EDITING_HPP

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "dhr/archive.hpp"
#include "dhr/error.hpp"
#include "dhr/generator.hpp"

namespace dhr {

// A latent offset. Stored as given; unit_norm only records whether it was
// normalized by its producer.
struct EditDirection {
  std::string name;
  LatentSpace space = LatentSpace::W;
  std::size_t rows = 1;
  std::size_t dim = 0;
  std::vector<float> values;
  bool unit_norm = false;

  void validate() const {
    if (space == LatentSpace::Z) throw ArgumentError("edit directions live in W or W+");
    if (space == LatentSpace::W && rows != 1) throw ArgumentError("W direction must have one row");
    if (values.size() != rows * dim) throw ArgumentError("direction values do not match rows x dim");
    for (float v : values)
      if (!std::isfinite(v)) throw ArgumentError("direction has non-finite entries");
  }

  bool operator==(const EditDirection&) const = default;
};

inline void save_direction(const std::filesystem::path& path, const EditDirection& d) {
  d.validate();
  Archive ar;
  ar.kind = "direction";
  ar.meta = {{"name", d.name}, {"space", to_string(d.space)}, {"d_latent", d.dim}, {"unit_norm", d.unit_norm}};
  ar.arrays["values"] = {{d.rows, d.dim}, d.values};
  write_archive(path, ar);
}

inline EditDirection load_direction(const std::filesystem::path& path) {
  auto ar = expect_kind(read_archive(path), "direction");
  const auto& v = ar.array("values");
  if (v.shape.size() != 2) throw IoError("direction array must be 2-D");
  EditDirection d{ar.meta.value("name", std::string()), parse_latent_space(ar.meta.at("space").get<std::string>()),
                  v.shape[0], v.shape[1], v.values, ar.meta.value("unit_norm", false)};
  if (ar.meta.at("d_latent").get<std::size_t>() != d.dim) throw IoError("direction d_latent disagrees with its array");
  d.validate();
  return d;
}

// w + alpha * d. A W direction is added to every row of a W+ code.
inline LatentCode edit_latent(const LatentCode& w, const EditDirection& d, double alpha) {
  d.validate();
  if (d.dim != w.dim()) throw ArgumentError("direction dimension " + std::to_string(d.dim) + " != latent " + std::to_string(w.dim()));
  if (w.space() == LatentSpace::Z) throw ArgumentError("cannot edit a Z code");
  if (d.space == LatentSpace::Wplus && (w.space() != LatentSpace::Wplus || d.rows != w.rows()))
    throw ArgumentError("W+ direction rows do not match the latent");
  std::vector<float> out(w.values().begin(), w.values().end());
  const auto a = static_cast<float>(alpha);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t j = 0; j < w.dim(); ++j) out[r * w.dim() + j] += a * d.values[(d.rows == 1 ? 0 : r) * d.dim + j];
  return LatentCode(w.space(), w.rows(), w.dim(), std::move(out));
}

// Frozen outputs of one refinement: tuned generator, latent, feature, mask.
struct RefinedArtifacts {
  GeneratorState state;
  LatentCode w;
  FeatureMap feature;
  DomainMask mask_feat;
};

inline Image edit(const RefinedArtifacts& r, const EditDirection& d, double alpha) {
  return synthesize_with_injection(r.state, edit_latent(r.w, d, alpha), r.feature, r.mask_feat);
}

}  // namespace dhr

#endif  // DHR_EDITING_HPP
