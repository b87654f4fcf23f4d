#include "hts/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <tuple>

namespace hts::data {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return cells;
}

double parse_double(const std::string& cell, const char* field, std::size_t line_no) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
    throw FormatError("manifest line " + std::to_string(line_no) + ": bad " + field + " '" + cell + "'");
  }
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

int box_coord(double v) { return static_cast<int>(std::lround(v)); }

}  // namespace

std::string age_group_name(int group) {
  if (group < 0 || group >= static_cast<int>(kAgeGroups.size())) {
    throw ContractError("age group index " + std::to_string(group) + " out of range");
  }
  const auto [lo, hi] = kAgeGroups[static_cast<std::size_t>(group)];
  return std::to_string(lo) + "-" + std::to_string(hi);
}

int parse_age_group(const std::string& text) {
  for (std::size_t g = 0; g < kAgeGroups.size(); ++g) {
    if (age_group_name(static_cast<int>(g)) == text) return static_cast<int>(g);
  }
  throw FormatError("unknown age group '" + text + "'");
}

char gender_code(Gender g) {
  switch (g) {
    case Gender::f:
      return 'f';
    case Gender::m:
      return 'm';
    case Gender::u:
      return 'u';
  }
  return '?';
}

Gender parse_gender(const std::string& text) {
  if (text == "f") return Gender::f;
  if (text == "m") return Gender::m;
  if (text == "u") return Gender::u;
  throw FormatError("unknown gender '" + text + "'");
}

std::vector<ManifestRow> read_manifest(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("manifest is empty, expected a header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) throw FormatError("manifest header mismatch: '" + line + "'");

  std::vector<ManifestRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 8) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": expected 8 cells, got " +
                        std::to_string(cells.size()));
    }
    ManifestRow row;
    row.path = cells[0];
    if (row.path.empty()) throw FormatError("manifest line " + std::to_string(line_no) + ": empty path");
    try {
      if (!cells[1].empty()) row.age_group = parse_age_group(cells[1]);
      if (!cells[2].empty()) row.gender = parse_gender(cells[2]);
    } catch (const FormatError& e) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    const std::size_t filled = static_cast<std::size_t>(
        std::count_if(cells.begin() + 3, cells.end(), [](const std::string& c) { return !c.empty(); }));
    if (filled == 5) {
      Detection d;
      d.x = parse_double(cells[3], "box_x", line_no);
      d.y = parse_double(cells[4], "box_y", line_no);
      d.w = parse_double(cells[5], "box_w", line_no);
      d.h = parse_double(cells[6], "box_h", line_no);
      d.confidence = parse_double(cells[7], "confidence", line_no);
      if (d.confidence < 0 || d.confidence > 1) {
        throw FormatError("manifest line " + std::to_string(line_no) + ": confidence outside [0, 1]");
      }
      row.detection = d;
    } else if (filled != 0) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": detection needs all five cells or none");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_manifest(std::ostream& out, const std::vector<ManifestRow>& rows) {
  out << kManifestHeader << '\n';
  for (const auto& row : rows) {
    if (row.path.empty() || row.path.find_first_of(",\r\n") != std::string::npos) {
      throw FormatError("manifest path '" + row.path + "' is empty or contains a separator");
    }
    out << row.path << ',';
    if (row.age_group) out << age_group_name(*row.age_group);
    out << ',';
    if (row.gender) out << gender_code(*row.gender);
    if (row.detection) {
      const auto& d = *row.detection;
      out << ',' << format_double(d.x) << ',' << format_double(d.y) << ',' << format_double(d.w) << ','
          << format_double(d.h) << ',' << format_double(d.confidence);
    } else {
      out << ",,,,,";
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing manifest");
}

std::vector<ManifestRow> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_manifest(in);
}

void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_manifest(out, rows);
}

int task_label(const ManifestRow& row, model::Task task) {
  if (task == model::Task::age8) {
    if (!row.age_group) throw ContractError("row '" + row.path + "' has no age group");
    return *row.age_group;
  }
  if (!row.gender || *row.gender == Gender::u) throw ContractError("row '" + row.path + "' has no usable gender");
  return *row.gender == Gender::m ? 1 : 0;
}

std::string FilterReport::to_text() const {
  std::ostringstream s;
  s << "input: " << input << '\n'
    << "no_gender: " << no_gender << '\n'
    << "gender_u: " << gender_u << '\n'
    << "no_age: " << no_age << '\n'
    << "no_face: " << no_face << '\n'
    << "multi_face: " << multi_face << '\n'
    << "missing_file: " << missing_file << '\n'
    << "discarded: " << discarded() << '\n'
    << "retained: " << retained << '\n';
  for (const auto& p : missing_paths) s << "missing: " << p << '\n';
  return s.str();
}

FilterResult filter_rows(const std::vector<ManifestRow>& rows) {
  FilterResult out;
  out.report.input = rows.size();
  for (const auto& row : rows) {
    if (!row.gender) {
      ++out.report.no_gender;
    } else if (*row.gender == Gender::u) {
      ++out.report.gender_u;
    } else if (!row.age_group) {
      ++out.report.no_age;
    } else {
      out.rows.push_back(row);
    }
  }
  out.report.retained = out.rows.size();
  return out;
}

Detector whole_image_detector() {
  return [](const Image& img, const ManifestRow&) {
    return std::vector<Detection>{
        {0, 0, static_cast<double>(image::width(img)), static_cast<double>(image::height(img)), 1.0}};
  };
}

Detector manifest_box_detector() {
  return [](const Image&, const ManifestRow& row) {
    return row.detection ? std::vector<Detection>{*row.detection} : std::vector<Detection>{};
  };
}

std::optional<FaceCrop> detect_and_crop(const Image& img, const ManifestRow& row, const Detector& detector,
                                        double threshold) {
  const auto detections = detector(img, row);
  const Detection* best = nullptr;
  std::size_t candidates = 0;
  for (const auto& d : detections) {
    if (!(d.confidence >= 0 && d.confidence <= 1)) {
      throw ContractError("detector returned confidence " + format_double(d.confidence) + " for '" + row.path + "'");
    }
    if (!(d.w > 0 && d.h > 0)) throw ContractError("detector returned a degenerate box for '" + row.path + "'");
    if (d.confidence > threshold) {
      ++candidates;
      if (!best || d.confidence > best->confidence) best = &d;
    }
  }
  if (!best) return std::nullopt;
  const int x = box_coord(best->x), y = box_coord(best->y);
  const int w = std::max(1, box_coord(best->w)), h = std::max(1, box_coord(best->h));
  if (x < 0 || y < 0) throw ContractError("detection box for '" + row.path + "' starts outside the image");
  FaceCrop out{image::crop(img, static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                           static_cast<std::size_t>(w), static_cast<std::size_t>(h)),
               *best, candidates};
  return out;
}

ImageSource file_image_source(const std::filesystem::path& root) {
  return [root](const ManifestRow& row) -> std::optional<Image> {
    const auto path = root / row.path;
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) return std::nullopt;
    try {
      return image::load_image(path);
    } catch (const IoError&) {
      return std::nullopt;
    }
  };
}

PreprocessResult preprocess(const std::vector<ManifestRow>& rows, const ImageSource& source,
                            const Detector& detector, const PreprocessOptions& options) {
  if (options.size == 0) throw ConfigError("preprocess size must be positive");
  auto filtered = filter_rows(rows);
  PreprocessResult out;
  out.report = filtered.report;
  for (auto& row : filtered.rows) {
    auto img = source(row);
    if (!img) {
      ++out.report.missing_file;
      out.report.missing_paths.push_back(row.path);
      continue;
    }
    const Image working = image::resize_bilinear(*img, options.size, options.size);
    auto crop = detect_and_crop(working, row, detector, options.threshold);
    if (!crop) {
      ++out.report.no_face;
      continue;
    }
    if (crop->candidates > 1) ++out.report.multi_face;
    out.faces.push_back(image::resize_bilinear(crop->face, options.size, options.size));
    out.rows.push_back(std::move(row));
  }
  out.report.retained = out.rows.size();
  return out;
}

std::vector<ManifestRow> reference_fixture(const std::string& image_path, std::size_t size, std::uint64_t seed) {
  if (size < 4) throw ConfigError("fixture image size must be at least 4");
  const double margin = std::floor(static_cast<double>(size) / 8);
  const double side = static_cast<double>(size) - 2 * margin;
  const Detection good{margin, margin, side, side, 0.99};
  const Detection weak{margin, margin, side, side, 0.85};

  std::vector<ManifestRow> rows;
  auto add = [&](std::size_t count, auto make) {
    for (std::size_t i = 0; i < count; ++i) rows.push_back(make(i));
  };
  // Some rows fail several checks; only the first reason may count.
  add(779, [&](std::size_t i) {
    return ManifestRow{image_path, i % 4 == 0 ? std::nullopt : std::optional<int>(static_cast<int>(i % 8)),
                       std::nullopt, i % 5 == 0 ? weak : good};
  });
  add(1099, [&](std::size_t i) {
    return ManifestRow{image_path, i % 3 == 0 ? std::nullopt : std::optional<int>(static_cast<int>(i % 8)),
                       Gender::u, i % 7 == 0 ? weak : good};
  });
  add(1252, [&](std::size_t i) {
    return ManifestRow{image_path, std::nullopt, i % 2 ? Gender::m : Gender::f, i % 6 == 0 ? weak : good};
  });
  add(185, [&](std::size_t i) {
    return ManifestRow{image_path, static_cast<int>(i % 8), i % 2 ? Gender::m : Gender::f, weak};
  });
  add(16055, [&](std::size_t i) {
    return ManifestRow{image_path, static_cast<int>(i % 8), i % 2 ? Gender::m : Gender::f, good};
  });
  Rng rng(seed);
  rng.shuffle(std::span<ManifestRow>(rows));
  return rows;
}

template <typename T>
Tensor<T> normalize_batch(const Tensor<T>& batch) {
  if (batch.rank() != 4) throw DimensionError("normalize_batch expects B x H x W x C, got " + shape_string(batch.shape()));
  const std::size_t b = batch.dim(0);
  const std::size_t n = batch.size() / b;
  Tensor<T> out(batch.shape());
  for (std::size_t s = 0; s < b; ++s) {
    const T* x = &batch[s * n];
    T* y = &out[s * n];
    // Centre on the raw scale, where the sum of integer intensities is exact,
    // so a constant sample centres to exactly zero.
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += static_cast<double>(x[i]);
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (static_cast<double>(x[i]) - mean) / 255.0;
      var += d * d;
    }
    const double sd = std::max(std::sqrt(var / static_cast<double>(n)), 1e-7);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<T>((static_cast<double>(x[i]) - mean) / 255.0 / sd);
  }
  return out;
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.flip_probability = 0;
  c.transpose_probability = 0;
  c.saturation_lo = c.saturation_hi = 1;
  c.rotation_lo = c.rotation_hi = 0;
  return c;
}

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0 && p <= 1)) throw ConfigError(std::string(name) + " must be in [0, 1]");
  };
  prob(flip_probability, "flip probability");
  prob(transpose_probability, "transpose probability");
  auto range = [](double lo, double hi, const char* name) {
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) {
      throw ConfigError(std::string(name) + " range must be finite with lo <= hi");
    }
  };
  range(saturation_lo, saturation_hi, "saturation");
  range(rotation_lo, rotation_hi, "rotation");
  if (saturation_lo < 0) throw ConfigError("saturation scale must be non-negative");
}

Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = image::channels(img);
  // Draw every decision up front so the stream position does not depend on outcomes.
  const bool flip = rng.bernoulli(cfg.flip_probability);
  const bool trans = rng.bernoulli(cfg.transpose_probability);
  std::vector<double> scale(c);
  for (auto& s : scale) s = rng.uniform(cfg.saturation_lo, cfg.saturation_hi);
  const double angle = rng.uniform(cfg.rotation_lo, cfg.rotation_hi);

  Image out = flip ? image::flip_horizontal(img) : img;
  if (trans) {
    if (image::height(out) != image::width(out)) throw ContractError("transpose augmentation needs a square image");
    out = image::transpose(out);
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(out[i] * scale[i % c]);
  out = image::rotate(out, angle);
  image::clamp(out, 0.0f, 255.0f);
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& ids) const {
  Dataset out;
  out.images.reserve(ids.size());
  out.labels.reserve(ids.size());
  for (std::size_t id : ids) {
    if (id >= size()) throw ContractError("dataset index " + std::to_string(id) + " out of range");
    out.images.push_back(images[id]);
    out.labels.push_back(labels[id]);
  }
  return out;
}

Dataset load_dataset(const std::vector<ManifestRow>& rows, const std::filesystem::path& root, model::Task task,
                     std::size_t size) {
  Dataset out;
  for (const auto& row : rows) {
    out.labels.push_back(task_label(row, task));
    out.images.push_back(image::resize_bilinear(image::load_image(root / row.path), size, size));
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw ContractError("batch size must be at least 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(std::span<std::size_t>(order));
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  return out;
}

template <typename T>
std::vector<train::Batch<T>> make_batches(const Dataset& dataset, const BatchOptions& options) {
  if (dataset.images.size() != dataset.labels.size()) throw ContractError("dataset images and labels differ in count");
  if (options.augment) options.augment->validate();
  std::vector<train::Batch<T>> out;
  for (const auto& ids : batch_indices(dataset.size(), options.batch_size, options.shuffle_seed)) {
    const Shape& first = dataset.images[ids.front()].shape();
    Shape shape{ids.size()};
    shape.insert(shape.end(), first.begin(), first.end());
    Tensor<T> raw(shape);
    const std::size_t per = shape_size(first);
    std::vector<int> labels;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const Image* img = &dataset.images[ids[k]];
      Image augmented;
      if (options.augment) {
        Rng rng(mix_seed(options.augment->seed, ids[k]));
        augmented = augment(*img, *options.augment, rng);
        img = &augmented;
      }
      if (img->shape() != first) throw DimensionError("dataset images differ in shape");
      std::copy(img->data().begin(), img->data().end(), raw.data().begin() + static_cast<std::ptrdiff_t>(k * per));
      labels.push_back(dataset.labels[ids[k]]);
    }
    out.push_back({normalize_batch(raw), std::move(labels)});
  }
  return out;
}

SynthDataset synthesize_dataset(const SynthOptions& o) {
  const std::size_t max_classes = o.task == model::Task::age8 ? 8 : 2;
  if (o.classes < 2 || o.classes > max_classes) {
    throw ConfigError("synthetic class count must be in [2, " + std::to_string(max_classes) + "]");
  }
  if (o.n < o.classes) throw ContractError("need at least one sample per class");
  if (o.size < 8) throw ConfigError("synthetic image size must be at least 8");
  if (!(o.noise >= 0)) throw ConfigError("synthetic noise must be non-negative");

  const double s = static_cast<double>(o.size);
  const double period = s / 4;
  const double side = std::floor(s / 4);
  const double cell = s / 3;
  SynthDataset out;
  for (std::size_t i = 0; i < o.n; ++i) {
    const std::size_t c = i % o.classes;
    Rng rng(mix_seed(o.seed, i));
    const double frac = static_cast<double>(c) / static_cast<double>(o.classes);
    const double theta = std::numbers::pi * frac;
    const double phase = rng.uniform(-0.5, 0.5);
    const double sx = (static_cast<double>(c % 3) + 0.5) * cell - side / 2 + rng.uniform(-s / 16, s / 16);
    const double sy = (static_cast<double>(c / 3) + 0.5) * cell - side / 2 + rng.uniform(-s / 16, s / 16);
    Image img(Shape{o.size, o.size, 3});
    for (std::size_t r = 0; r < o.size; ++r) {
      for (std::size_t col = 0; col < o.size; ++col) {
        const double x = static_cast<double>(col), y = static_cast<double>(r);
        double v = 96 + 40 * std::sin(2 * std::numbers::pi * (x * std::cos(theta) + y * std::sin(theta)) / period + phase);
        if (x >= sx && x < sx + side && y >= sy && y < sy + side) v += 80;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double cast = 40 * std::cos(2 * std::numbers::pi * (frac + static_cast<double>(ch) / 3));
          img[(r * o.size + col) * 3 + ch] =
              static_cast<float>(std::clamp(std::round(v + cast + rng.normal(0, o.noise)), 0.0, 255.0));
        }
      }
    }
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.ppm", i);
    ManifestRow row{name, {}, {}, Detection{0, 0, s, s, 1.0}};
    const int ci = static_cast<int>(c);
    const std::size_t round = i / o.classes;
    if (o.task == model::Task::age8) {
      row.age_group = ci;
      row.gender = round % 2 ? Gender::m : Gender::f;
    } else {
      row.gender = ci == 1 ? Gender::m : Gender::f;
      row.age_group = static_cast<int>(round % kAgeGroups.size());
    }
    out.dataset.images.push_back(std::move(img));
    out.dataset.labels.push_back(ci);
    out.rows.push_back(std::move(row));
  }
  return out;
}

void write_dataset(const std::filesystem::path& root, const SynthDataset& synth) {
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  for (std::size_t i = 0; i < synth.rows.size(); ++i) image::save_image(root / synth.rows[i].path, synth.dataset.images[i]);
  save_manifest(root / "manifest.csv", synth.rows);
}

template <typename T>
Histogram intensity_histogram(const Tensor<T>& batch, std::size_t bins, std::optional<std::pair<double, double>> range) {
  if (bins == 0) throw ContractError("histogram needs at least one bin");
  Histogram h;
  if (range) {
    std::tie(h.lo, h.hi) = *range;
    if (!(h.lo <= h.hi)) throw ContractError("histogram range must have lo <= hi");
  } else if (!batch.empty()) {
    const auto [mn, mx] = std::minmax_element(batch.data().begin(), batch.data().end());
    h.lo = static_cast<double>(*mn);
    h.hi = static_cast<double>(*mx);
  }
  h.counts.assign(bins, 0);
  const double width = h.hi - h.lo;
  for (T v : batch.data()) {
    std::size_t b = 0;
    if (width > 0) {
      const double pos = (static_cast<double>(v) - h.lo) / width * static_cast<double>(bins);
      b = static_cast<std::size_t>(std::clamp(std::floor(pos), 0.0, static_cast<double>(bins - 1)));
    }
    ++h.counts[b];
  }
  return h;
}

void write_histogram_csv(std::ostream& out, const Histogram& before, const Histogram& after) {
  if (before.counts.size() != after.counts.size()) throw ContractError("histograms differ in bin count");
  const std::size_t bins = before.counts.size();
  auto edge = [bins](const Histogram& h, std::size_t i) {
    return h.lo + (h.hi - h.lo) * static_cast<double>(i) / static_cast<double>(bins);
  };
  out << "bin,before_lo,before_hi,before_count,after_lo,after_hi,after_count\n";
  for (std::size_t i = 0; i < bins; ++i) {
    out << i << ',' << format_double(edge(before, i)) << ',' << format_double(edge(before, i + 1)) << ','
        << before.counts[i] << ',' << format_double(edge(after, i)) << ',' << format_double(edge(after, i + 1)) << ','
        << after.counts[i] << '\n';
  }
}

#define HTS_INSTANTIATE(T)                                                                          \
  template Tensor<T> normalize_batch<T>(const Tensor<T>&);                                          \
  template std::vector<train::Batch<T>> make_batches<T>(const Dataset&, const BatchOptions&);       \
  template Histogram intensity_histogram<T>(const Tensor<T>&, std::size_t,                          \
                                            std::optional<std::pair<double, double>>);

HTS_INSTANTIATE(float)
HTS_INSTANTIATE(double)

#undef HTS_INSTANTIATE

}  // namespace hts::data
