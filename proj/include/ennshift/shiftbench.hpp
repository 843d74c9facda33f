#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ennshift/enn.hpp"
#include "ennshift/random.hpp"
#include "ennshift/tensor.hpp"

namespace ennshift {

inline constexpr std::size_t kImageSize = 16;

struct ImageDataset {
  Tensor images;            // [n, 1, 16, 16], values in [0, 1]
  std::vector<int> labels;  // [n]
  std::string split;        // train, val, test, ood, adversarial, corrupted
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return labels.size(); }
  ImageDataset subset(std::span<const std::size_t> rows) const;
};

// Oriented sinusoidal gratings: class c has orientation pi * c / classes,
// random phase, fixed spatial frequency, additive Gaussian pixel noise. Each
// image draws its contrast (amplitude) uniformly from the given range, so a
// dataset mixes easy and ambiguous examples.
struct GratingParams {
  double frequency = 0.18;  // cycles per pixel
  double amplitude_min = 0.02;
  double amplitude_max = 0.3;
  double noise_sigma = 0.05;
};

ImageDataset generate_dataset(std::size_t n, std::size_t classes, std::uint64_t seed,
                              const GratingParams& params = {});

// Reads an IDX image file (magic 0x00000803) and, when given, an IDX label
// file (magic 0x00000801). Pixels are scaled to [0, 1] and area-resampled to
// 16x16.
ImageDataset load_idx(const std::filesystem::path& images,
                      const std::filesystem::path& labels = {});

// Area-averaging resample of one h x w plane to out_h x out_w.
std::vector<float> resample_area(std::span<const float> plane, std::size_t h, std::size_t w,
                                 std::size_t out_h, std::size_t out_w);

// --- corruptions --------------------------------------------------------

enum class Corruption {
  gaussian_noise,
  shot_noise,
  impulse_noise,
  defocus_blur,
  motion_blur,
  contrast,
  brightness,
  pixelate,
};

inline constexpr int kSeverityLevels = 5;

const std::vector<Corruption>& all_corruptions();
const char* to_string(Corruption c);
Corruption corruption_from_string(const std::string& name);

// Per-severity parameter for each corruption type. Strictly monotone in
// severity (increasing, except shot noise whose photon count decreases).
//   gaussian_noise  sigma          0.04 0.08 0.12 0.18 0.26
//   shot_noise      photons/unit   60   25   12   5    3
//   impulse_noise   flip fraction  0.03 0.06 0.09 0.17 0.27
//   defocus_blur    disk radius    1.0  1.5  2.0  2.5  3.0
//   motion_blur     kernel length  2    3    5    7    9
//   contrast        factor         0.75 0.6  0.45 0.3  0.2
//   brightness      offset         0.1  0.2  0.3  0.4  0.5
//   pixelate        block size     2    3    4    5    6
const std::array<double, kSeverityLevels>& severity_table(Corruption c);
double severity_parameter(Corruption c, int severity);

// Applies one corruption with an explicit parameter to a single h x w plane
// in place, clamping to [0, 1].
void apply_corruption(std::span<float> plane, std::size_t h, std::size_t w, Corruption c,
                      double parameter, Rng& rng);

// Labels and ordering are preserved. Severity is 1..5.
ImageDataset corrupt(const ImageDataset& data, const std::string& type, int severity,
                     std::uint64_t seed);

// --- OOD and adversarial splits -----------------------------------------

struct OodSplit {
  ImageDataset in_dist;  // labels remapped to positions within in_dist classes
  ImageDataset ood;      // labels keep their original class ids
};

// `in_dist` must be a strict, non-empty subset of [0, all_classes).
OodSplit make_ood_split(std::size_t all_classes, const std::vector<int>& in_dist,
                        const ImageDataset& data);

// Keeps exactly the examples (with labels in class_subset) that the
// class-restricted reference model misclassifies. An empty result records a
// warning in the provenance instead of failing.
ImageDataset make_adversarial_split(std::shared_ptr<const EnnModel> reference,
                                    const ImageDataset& test,
                                    const std::vector<int>& class_subset,
                                    std::size_t n_index = kDefaultPredictiveIndices,
                                    std::uint64_t seed = 0);

// Argmax with ties broken toward the lowest class id.
std::vector<int> predicted_labels(std::span<const double> probs, std::size_t classes);

}  // namespace ennshift
