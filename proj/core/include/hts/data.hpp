#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hts/image.hpp"
#include "hts/model.hpp"
#include "hts/rng.hpp"
#include "hts/training.hpp"

namespace hts::data {

using image::Image;

/// Age intervals in class-index order.
inline constexpr std::array<std::pair<int, int>, 8> kAgeGroups = {
    {{0, 2}, {4, 6}, {8, 12}, {15, 20}, {25, 32}, {38, 43}, {48, 53}, {60, 100}}};

/// "lo-hi", e.g. "25-32".
std::string age_group_name(int group);
/// Inverse of age_group_name; FormatError for anything else.
int parse_age_group(const std::string& text);

enum class Gender { f, m, u };
char gender_code(Gender g);
Gender parse_gender(const std::string& text);

struct Detection {
  double x = 0, y = 0, w = 0, h = 0;
  double confidence = 0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct ManifestRow {
  std::string path;
  std::optional<int> age_group;
  std::optional<Gender> gender;
  std::optional<Detection> detection;

  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

inline constexpr std::string_view kManifestHeader = "path,age_group,gender,box_x,box_y,box_w,box_h,confidence";

/// Empty cells are missing values. Errors carry the line number.
std::vector<ManifestRow> read_manifest(std::istream& in);
void write_manifest(std::ostream& out, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);

/// Class index of a row for `task`: the age group, or 0 = f / 1 = m.
/// ContractError when the row lacks that label.
int task_label(const ManifestRow& row, model::Task task);

struct FilterReport {
  std::size_t input = 0;
  std::size_t no_gender = 0;
  std::size_t gender_u = 0;
  std::size_t no_age = 0;
  std::size_t no_face = 0;
  /// Rows whose image could not be read; listed in missing_paths.
  std::size_t missing_file = 0;
  /// Rows with more than one detection above threshold. Informational, the
  /// best box is kept and the row is not dropped.
  std::size_t multi_face = 0;
  std::size_t retained = 0;
  std::vector<std::string> missing_paths;

  std::size_t discarded() const { return no_gender + gender_u + no_age + no_face + missing_file; }
  /// input == retained + discarded().
  bool conserved() const { return input == retained + discarded(); }
  /// One "key: value" line per count, then the missing paths.
  std::string to_text() const;
};

struct FilterResult {
  std::vector<ManifestRow> rows;
  FilterReport report;
};

/// Label stage: drops missing gender, then gender u, then missing age. Each
/// dropped row is counted under its first reason only.
FilterResult filter_rows(const std::vector<ManifestRow>& rows);

/// Candidate faces in an image. The row is passed so that detectors can read
/// boxes stored in the manifest.
using Detector = std::function<std::vector<Detection>(const Image&, const ManifestRow&)>;

/// One box covering the whole image at confidence 1.
Detector whole_image_detector();
/// The row's stored detection, or nothing when the row has none.
Detector manifest_box_detector();

struct FaceCrop {
  Image face;
  Detection box;
  /// Detections above threshold, including the chosen one.
  std::size_t candidates = 0;
};

/// Crops the highest-confidence detection strictly above `threshold` from a
/// copy of `img`. Box coordinates are rounded to whole pixels. nullopt when
/// nothing clears the threshold. A box with w or h <= 0, a confidence outside
/// [0, 1] or a box outside the image is a ContractError.
std::optional<FaceCrop> detect_and_crop(const Image& img, const ManifestRow& row, const Detector& detector,
                                        double threshold = 0.9);

struct PreprocessOptions {
  std::size_t size = 224;
  double threshold = 0.9;
};

struct PreprocessResult {
  std::vector<ManifestRow> rows;
  std::vector<Image> faces;  // one per row, size x size
  FilterReport report;
};

/// Returns nullopt when the image for a row cannot be read.
using ImageSource = std::function<std::optional<Image>(const ManifestRow&)>;

/// Reads `root / row.path`; missing or unreadable files give nullopt.
ImageSource file_image_source(const std::filesystem::path& root);

/// Full pipeline: filter_rows, then per row load -> resize to size x size ->
/// detect_and_crop -> resize the face back to size x size.
PreprocessResult preprocess(const std::vector<ManifestRow>& rows, const ImageSource& source,
                            const Detector& detector, const PreprocessOptions& options = {});

/// Manifest with the removal counts of the reference dataset: 19370 rows of
/// which 779 lack gender, 1099 are gender u, 1252 lack age and 185 carry a
/// detection at confidence 0.85. All rows point at `image_path`; boxes fit
/// a `size` x `size` image. Row order is shuffled with `seed`.
std::vector<ManifestRow> reference_fixture(const std::string& image_path, std::size_t size, std::uint64_t seed = 0);

/// Per sample: x / 255, minus the sample mean, divided by the sample's
/// population standard deviation (at least 1e-7). Input is [B x H x W x C].
template <typename T>
Tensor<T> normalize_batch(const Tensor<T>& batch);

struct AugmentConfig {
  double flip_probability = 0.5;
  double transpose_probability = 0.5;
  /// Per-channel multiplicative scale drawn uniformly from this range.
  double saturation_lo = 0.8;
  double saturation_hi = 1.2;
  /// Rotation in degrees drawn uniformly from this range.
  double rotation_lo = -15.0;
  double rotation_hi = 15.0;
  std::uint64_t seed = 0;

  /// Probabilities zero, ranges collapsed onto the identity.
  static AugmentConfig identity();
  void validate() const;
};

/// Flip, transpose, per-channel saturation and rotation, each decided
/// independently, then clamped to [0, 255]. Transpose needs a square image.
Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng);

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
  Dataset subset(const std::vector<std::size_t>& ids) const;
};

/// Reads every row's image from `root`, resized to size x size.
Dataset load_dataset(const std::vector<ManifestRow>& rows, const std::filesystem::path& root, model::Task task,
                     std::size_t size);

/// Indices 0..n-1 in consecutive groups of batch_size (last one short),
/// shuffled first when a seed is given.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::optional<std::uint64_t> shuffle_seed);

struct BatchOptions {
  std::size_t batch_size = 32;
  std::optional<std::uint64_t> shuffle_seed;
  /// Applied per sample with an Rng seeded from (augment->seed, sample index).
  std::optional<AugmentConfig> augment;
};

/// Stacks, optionally augments, and normalizes. Empty dataset gives no batches.
template <typename T>
std::vector<train::Batch<T>> make_batches(const Dataset& dataset, const BatchOptions& options);

struct SynthOptions {
  std::size_t n = 64;
  std::size_t classes = 8;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  model::Task task = model::Task::age8;
  /// Gaussian pixel noise on the 0-255 scale.
  double noise = 24.0;
};

struct SynthDataset {
  Dataset dataset;
  std::vector<ManifestRow> rows;  // paths "img_00000.ppm", ...
};

/// Class c gets a class-specific oriented grating, a bright square in a
/// class-specific cell (jittered) and a colour cast, plus noise. Classes are
/// balanced: sample i has class i % classes. Pixel values are integers so the
/// images survive a PPM round trip unchanged.
SynthDataset synthesize_dataset(const SynthOptions& options);

/// Writes every image as root / row.path and the manifest as root / "manifest.csv".
void write_dataset(const std::filesystem::path& root, const SynthDataset& synth);

struct Histogram {
  double lo = 0, hi = 0;
  std::vector<std::size_t> counts;
};

/// Equal-width bins over [lo, hi]; the range defaults to the data min/max.
/// The top edge falls in the last bin, values outside are clamped in.
template <typename T>
Histogram intensity_histogram(const Tensor<T>& batch, std::size_t bins, std::optional<std::pair<double, double>> range = {});

/// Columns: bin,before_lo,before_hi,before_count,after_lo,after_hi,after_count.
void write_histogram_csv(std::ostream& out, const Histogram& before, const Histogram& after);

}  // namespace hts::data
