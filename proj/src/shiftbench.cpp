#include "ennshift/shiftbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "ennshift/errors.hpp"

namespace ennshift {

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(path.string() + ": truncated IDX header at byte offset " +
                      std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void clamp_unit(std::span<float> plane) {
  for (float& v : plane) v = std::clamp(v, 0.0f, 1.0f);
}

// Convolution with a normalized kernel of offsets, edges replicated.
void blur(std::span<float> plane, std::size_t h, std::size_t w,
          const std::vector<std::pair<int, int>>& offsets) {
  const std::vector<float> src(plane.begin(), plane.end());
  const int ih = static_cast<int>(h), iw = static_cast<int>(w);
  for (int i = 0; i < ih; ++i) {
    for (int j = 0; j < iw; ++j) {
      double acc = 0.0;
      for (auto [di, dj] : offsets) {
        const int y = std::clamp(i + di, 0, ih - 1);
        const int x = std::clamp(j + dj, 0, iw - 1);
        acc += src[static_cast<std::size_t>(y * iw + x)];
      }
      plane[static_cast<std::size_t>(i * iw + j)] =
          static_cast<float>(acc / static_cast<double>(offsets.size()));
    }
  }
}

}  // namespace

ImageDataset ImageDataset::subset(std::span<const std::size_t> rows) const {
  const std::size_t width = images.numel() / images.dim(0);
  std::vector<float> data(rows.size() * width);
  std::vector<int> picked(rows.size());
  auto src = images.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw ContractError("dataset row out of range");
    std::copy_n(src.data() + rows[i] * width, width, data.data() + i * width);
    picked[i] = labels[rows[i]];
  }
  ImageDataset out;
  Shape shape = images.shape();
  shape[0] = rows.size();
  if (!rows.empty()) out.images = Tensor(std::move(shape), std::move(data));
  out.labels = std::move(picked);
  out.split = split;
  out.provenance = provenance;
  return out;
}

ImageDataset generate_dataset(std::size_t n, std::size_t classes, std::uint64_t seed,
                              const GratingParams& params) {
  if (classes == 0 || classes > 10) {
    throw ContractError("grating generator supports 1..10 classes, got " +
                        std::to_string(classes));
  }
  if (n == 0) throw ContractError("generate_dataset: n must be positive");
  if (!(params.amplitude_min >= 0.0 && params.amplitude_min <= params.amplitude_max)) {
    throw ContractError("generate_dataset: amplitude range must satisfy 0 <= min <= max");
  }
  Rng order_rng(derive_seed(seed, 1));
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  for (std::size_t i = n - 1; i > 0; --i) {
    std::swap(labels[i], labels[order_rng.below(i + 1)]);
  }

  constexpr std::size_t pixels = kImageSize * kImageSize;
  std::vector<float> data(n * pixels);
  const double center = (static_cast<double>(kImageSize) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 1000 + i));
    const double theta = std::numbers::pi * labels[i] / static_cast<double>(classes);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amplitude = rng.uniform(params.amplitude_min, params.amplitude_max);
    const double ct = std::cos(theta), st = std::sin(theta);
    float* img = data.data() + i * pixels;
    for (std::size_t y = 0; y < kImageSize; ++y) {
      for (std::size_t x = 0; x < kImageSize; ++x) {
        const double u = (static_cast<double>(x) - center) * ct +
                         (static_cast<double>(y) - center) * st;
        double v =
            0.5 + amplitude * std::sin(2.0 * std::numbers::pi * params.frequency * u + phase);
        v += params.noise_sigma * rng.normal();
        img[y * kImageSize + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  ImageDataset out;
  out.images = Tensor({n, 1, kImageSize, kImageSize}, std::move(data));
  out.labels = std::move(labels);
  out.split = "generated";
  out.provenance = {{"generator", "grating"},
                    {"n", n},
                    {"classes", classes},
                    {"seed", seed},
                    {"frequency", params.frequency},
                    {"amplitude_min", params.amplitude_min},
                    {"amplitude_max", params.amplitude_max},
                    {"noise_sigma", params.noise_sigma}};
  return out;
}

std::vector<float> resample_area(std::span<const float> plane, std::size_t h, std::size_t w,
                                 std::size_t out_h, std::size_t out_w) {
  std::vector<float> out(out_h * out_w, 0.0f);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      double acc = 0.0;
      for (auto y = static_cast<std::size_t>(y0); y < h && static_cast<double>(y) < y1; ++y) {
        const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        for (auto x = static_cast<std::size_t>(x0); x < w && static_cast<double>(x) < x1; ++x) {
          const double wx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          acc += wy * wx * plane[y * w + x];
        }
      }
      out[oy * out_w + ox] = static_cast<float>(acc / (sy * sx));
    }
  }
  return out;
}

ImageDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const std::vector<unsigned char> bytes = read_file(images);
  if (bytes.empty()) throw FormatError(images.string() + ": empty IDX file at byte offset 0");
  const std::uint32_t magic = read_be32(bytes, 0, images);
  if (magic != kIdxImageMagic) {
    std::ostringstream os;
    os << images.string() << ": bad IDX image magic 0x" << std::hex << magic
       << " at byte offset 0";
    throw FormatError(os.str());
  }
  const std::size_t n = read_be32(bytes, 4, images);
  const std::size_t rows = read_be32(bytes, 8, images);
  const std::size_t cols = read_be32(bytes, 12, images);
  if (n == 0 || rows == 0 || cols == 0) {
    throw FormatError(images.string() + ": zero dimension in IDX header at byte offset 4");
  }
  const std::size_t pixels = rows * cols;
  if (bytes.size() < 16 + n * pixels) {
    throw FormatError(images.string() + ": truncated IDX payload at byte offset " +
                      std::to_string(bytes.size()) + " (expected " +
                      std::to_string(16 + n * pixels) + " bytes)");
  }
  std::vector<float> data;
  data.reserve(n * kImageSize * kImageSize);
  std::vector<float> plane(pixels);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) {
      plane[p] = static_cast<float>(bytes[16 + i * pixels + p]) / 255.0f;
    }
    if (rows == kImageSize && cols == kImageSize) {
      data.insert(data.end(), plane.begin(), plane.end());
    } else {
      const std::vector<float> r = resample_area(plane, rows, cols, kImageSize, kImageSize);
      data.insert(data.end(), r.begin(), r.end());
    }
  }

  std::vector<int> label_values(n, 0);
  if (!labels.empty()) {
    const std::vector<unsigned char> lb = read_file(labels);
    if (lb.empty()) throw FormatError(labels.string() + ": empty IDX file at byte offset 0");
    const std::uint32_t lmagic = read_be32(lb, 0, labels);
    if (lmagic != kIdxLabelMagic) {
      std::ostringstream os;
      os << labels.string() << ": bad IDX label magic 0x" << std::hex << lmagic
         << " at byte offset 0";
      throw FormatError(os.str());
    }
    const std::size_t ln = read_be32(lb, 4, labels);
    if (ln != n) {
      throw FormatError(labels.string() + ": label count " + std::to_string(ln) +
                        " differs from image count at byte offset 4");
    }
    if (lb.size() < 8 + n) {
      throw FormatError(labels.string() + ": truncated IDX payload at byte offset " +
                        std::to_string(lb.size()));
    }
    for (std::size_t i = 0; i < n; ++i) label_values[i] = lb[8 + i];
  }

  ImageDataset out;
  out.images = Tensor({n, 1, kImageSize, kImageSize}, std::move(data));
  out.labels = std::move(label_values);
  out.split = "external";
  out.provenance = {{"source", "idx"},
                    {"images", images.filename().string()},
                    {"labels", labels.empty() ? std::string() : labels.filename().string()},
                    {"original_rows", rows},
                    {"original_cols", cols}};
  return out;
}

// --- corruptions ---------------------------------------------------------

const std::vector<Corruption>& all_corruptions() {
  static const std::vector<Corruption> all{
      Corruption::gaussian_noise, Corruption::shot_noise,  Corruption::impulse_noise,
      Corruption::defocus_blur,   Corruption::motion_blur, Corruption::contrast,
      Corruption::brightness,     Corruption::pixelate};
  return all;
}

const char* to_string(Corruption c) {
  switch (c) {
    case Corruption::gaussian_noise: return "gaussian_noise";
    case Corruption::shot_noise: return "shot_noise";
    case Corruption::impulse_noise: return "impulse_noise";
    case Corruption::defocus_blur: return "defocus_blur";
    case Corruption::motion_blur: return "motion_blur";
    case Corruption::contrast: return "contrast";
    case Corruption::brightness: return "brightness";
    case Corruption::pixelate: return "pixelate";
  }
  return "?";
}

Corruption corruption_from_string(const std::string& name) {
  for (Corruption c : all_corruptions()) {
    if (name == to_string(c)) return c;
  }
  throw ContractError("unknown corruption type '" + name + "'");
}

const std::array<double, kSeverityLevels>& severity_table(Corruption c) {
  static const std::array<double, kSeverityLevels> gaussian{0.04, 0.08, 0.12, 0.18, 0.26};
  static const std::array<double, kSeverityLevels> shot{60, 25, 12, 5, 3};
  static const std::array<double, kSeverityLevels> impulse{0.03, 0.06, 0.09, 0.17, 0.27};
  static const std::array<double, kSeverityLevels> defocus{1.0, 1.5, 2.0, 2.5, 3.0};
  static const std::array<double, kSeverityLevels> motion{2, 3, 5, 7, 9};
  static const std::array<double, kSeverityLevels> contrast{0.75, 0.6, 0.45, 0.3, 0.2};
  static const std::array<double, kSeverityLevels> brightness{0.1, 0.2, 0.3, 0.4, 0.5};
  static const std::array<double, kSeverityLevels> pixelate{2, 3, 4, 5, 6};
  switch (c) {
    case Corruption::gaussian_noise: return gaussian;
    case Corruption::shot_noise: return shot;
    case Corruption::impulse_noise: return impulse;
    case Corruption::defocus_blur: return defocus;
    case Corruption::motion_blur: return motion;
    case Corruption::contrast: return contrast;
    case Corruption::brightness: return brightness;
    case Corruption::pixelate: return pixelate;
  }
  throw ContractError("unknown corruption");
}

double severity_parameter(Corruption c, int severity) {
  if (severity < 1 || severity > kSeverityLevels) {
    throw ContractError("severity must be in 1..5, got " + std::to_string(severity));
  }
  return severity_table(c)[static_cast<std::size_t>(severity - 1)];
}

void apply_corruption(std::span<float> plane, std::size_t h, std::size_t w, Corruption c,
                      double parameter, Rng& rng) {
  if (plane.size() != h * w) throw DimensionError("apply_corruption: plane size mismatch");
  switch (c) {
    case Corruption::gaussian_noise:
      if (parameter <= 0.0) break;
      for (float& v : plane) v = static_cast<float>(v + parameter * rng.normal());
      break;
    case Corruption::shot_noise:
      for (float& v : plane) {
        v = static_cast<float>(static_cast<double>(rng.poisson(v * parameter)) / parameter);
      }
      break;
    case Corruption::impulse_noise:
      for (float& v : plane) {
        if (rng.uniform() < parameter) v = rng.uniform() < 0.5 ? 0.0f : 1.0f;
      }
      break;
    case Corruption::defocus_blur: {
      std::vector<std::pair<int, int>> disk;
      const int r = static_cast<int>(std::ceil(parameter));
      for (int di = -r; di <= r; ++di) {
        for (int dj = -r; dj <= r; ++dj) {
          if (di * di + dj * dj <= parameter * parameter) disk.emplace_back(di, dj);
        }
      }
      blur(plane, h, w, disk);
      break;
    }
    case Corruption::motion_blur: {
      // Horizontal streak of `parameter` pixels ending at the current pixel.
      std::vector<std::pair<int, int>> line;
      const int len = static_cast<int>(parameter);
      for (int k = 0; k < len; ++k) line.emplace_back(0, -k);
      blur(plane, h, w, line);
      break;
    }
    case Corruption::contrast: {
      double mean = 0.0;
      for (float v : plane) mean += v;
      mean /= static_cast<double>(plane.size());
      for (float& v : plane) v = static_cast<float>((v - mean) * parameter + mean);
      break;
    }
    case Corruption::brightness:
      for (float& v : plane) v = static_cast<float>(v + parameter);
      break;
    case Corruption::pixelate: {
      const auto block = static_cast<std::size_t>(parameter);
      for (std::size_t by = 0; by < h; by += block) {
        for (std::size_t bx = 0; bx < w; bx += block) {
          const std::size_t ey = std::min(h, by + block), ex = std::min(w, bx + block);
          double acc = 0.0;
          for (std::size_t y = by; y < ey; ++y) {
            for (std::size_t x = bx; x < ex; ++x) acc += plane[y * w + x];
          }
          const auto mean = static_cast<float>(acc / static_cast<double>((ey - by) * (ex - bx)));
          for (std::size_t y = by; y < ey; ++y) {
            for (std::size_t x = bx; x < ex; ++x) plane[y * w + x] = mean;
          }
        }
      }
      break;
    }
  }
  clamp_unit(plane);
}

ImageDataset corrupt(const ImageDataset& data, const std::string& type, int severity,
                     std::uint64_t seed) {
  const Corruption c = corruption_from_string(type);
  const double parameter = severity_parameter(c, severity);
  const Shape& shape = data.images.shape();
  const std::size_t h = shape[2], w = shape[3], planes = shape[0] * shape[1];
  std::vector<float> pixels(data.images.data().begin(), data.images.data().end());
  for (std::size_t p = 0; p < planes; ++p) {
    Rng rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(c) * 16 +
                                              static_cast<std::uint64_t>(severity)),
                        p));
    apply_corruption(std::span<float>(pixels).subspan(p * h * w, h * w), h, w, c, parameter,
                     rng);
  }
  ImageDataset out;
  out.images = Tensor(shape, std::move(pixels));
  out.labels = data.labels;
  out.split = "corrupted";
  out.provenance = {{"source_split", data.split},
                    {"corruption", type},
                    {"severity", severity},
                    {"parameter", parameter},
                    {"seed", seed}};
  return out;
}

// --- splits --------------------------------------------------------------

OodSplit make_ood_split(std::size_t all_classes, const std::vector<int>& in_dist,
                        const ImageDataset& data) {
  std::vector<int> position(all_classes, -1);
  for (std::size_t i = 0; i < in_dist.size(); ++i) {
    const int c = in_dist[i];
    if (c < 0 || static_cast<std::size_t>(c) >= all_classes || position[c] != -1) {
      throw ContractError("in-distribution classes must be distinct ids below " +
                          std::to_string(all_classes));
    }
    position[static_cast<std::size_t>(c)] = static_cast<int>(i);
  }
  if (in_dist.empty() || in_dist.size() >= all_classes) {
    throw ContractError("in-distribution classes must be a strict non-empty subset");
  }
  std::vector<std::size_t> in_rows, ood_rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int y = data.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= all_classes) {
      throw ContractError("label " + std::to_string(y) + " outside the class range");
    }
    (position[static_cast<std::size_t>(y)] >= 0 ? in_rows : ood_rows).push_back(i);
  }
  OodSplit out{data.subset(in_rows), data.subset(ood_rows)};
  for (int& y : out.in_dist.labels) y = position[static_cast<std::size_t>(y)];
  std::vector<int> ood_classes;
  for (std::size_t c = 0; c < all_classes; ++c) {
    if (position[c] < 0) ood_classes.push_back(static_cast<int>(c));
  }
  out.in_dist.split = data.split;
  out.in_dist.provenance["in_dist_classes"] = in_dist;
  out.ood.split = "ood";
  out.ood.provenance["ood_classes"] = ood_classes;
  return out;
}

std::vector<int> predicted_labels(std::span<const double> probs, std::size_t classes) {
  std::vector<int> out(probs.size() / classes);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const double* row = probs.data() + n * classes;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

ImageDataset make_adversarial_split(std::shared_ptr<const EnnModel> reference,
                                    const ImageDataset& test,
                                    const std::vector<int>& class_subset, std::size_t n_index,
                                    std::uint64_t seed) {
  const std::string reference_id = reference->id();
  const std::shared_ptr<EnnModel> restricted = restrict_classes(std::move(reference), class_subset);
  std::vector<char> in_subset(restricted->num_classes(), 0);
  for (int c : class_subset) in_subset[static_cast<std::size_t>(c)] = 1;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int y = test.labels[i];
    if (y >= 0 && static_cast<std::size_t>(y) < in_subset.size() &&
        in_subset[static_cast<std::size_t>(y)]) {
      candidates.push_back(i);
    }
  }
  std::vector<std::size_t> kept;
  std::size_t evaluated = 0;
  if (!candidates.empty()) {
    const ImageDataset pool = test.subset(candidates);
    const std::vector<double> probs = marginal_probs(*restricted, pool.images, n_index, seed);
    const std::vector<int> pred = predicted_labels(probs, restricted->num_classes());
    evaluated = candidates.size();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (pred[i] != pool.labels[i]) kept.push_back(candidates[i]);
    }
  }
  ImageDataset out = test.subset(kept);
  out.split = "adversarial";
  out.provenance = {{"reference_model", reference_id},
                    {"class_subset", class_subset},
                    {"candidates", evaluated},
                    {"kept", kept.size()}};
  if (kept.empty()) {
    out.provenance["warning"] = "reference model classifies every candidate correctly";
  }
  return out;
}

}  // namespace ennshift
