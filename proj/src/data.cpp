#include "metadistil/data.hpp"

#include "metadistil/error.hpp"
#include "metadistil/io.hpp"
#include "metadistil/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace metadistil {

void Dataset::validate() const {
  if (labels.empty()) throw ConfigError("dataset is empty");
  if (features.rank() != 2 || features.shape()[0] != labels.size()) {
    throw ShapeError("features " + to_string(features.shape()) + " do not match " + std::to_string(labels.size()) +
                     " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
      throw ConfigError("label " + std::to_string(y) + " outside [0, " + std::to_string(class_count) + ")");
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Matrix rows(static_cast<Eigen::Index>(indices.size()), features.cols());
  Labels ys;
  ys.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = features.matrix().row(static_cast<Eigen::Index>(indices[i]));
    ys.push_back(labels.at(indices[i]));
  }
  return Dataset{Tensor({indices.size(), dimension()}, std::move(rows)), std::move(ys), class_count};
}

Dataset make_blobs(std::size_t per_class, std::size_t class_count,
                   const std::vector<std::vector<double>>& centers, double spread, std::uint64_t seed) {
  if (centers.size() != class_count || class_count == 0) {
    throw ConfigError("make_blobs needs one center per class");
  }
  if (!(spread > 0.0)) throw ConfigError("blob spread must be positive");
  if (per_class == 0) throw ConfigError("make_blobs needs at least one point per class");
  const std::size_t d = centers.front().size();
  for (const auto& c : centers) {
    if (c.size() != d || d == 0) throw ConfigError("blob centers must share a positive dimension");
  }

  Rng rng(seed);
  const std::size_t n = per_class * class_count;
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  Labels y(n);
  for (std::size_t k = 0; k < class_count; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto row = static_cast<Eigen::Index>(k * per_class + i);
      for (std::size_t j = 0; j < d; ++j) {
        x(row, static_cast<Eigen::Index>(j)) = centers[k][j] + spread * rng.normal();
      }
      y[static_cast<std::size_t>(row)] = static_cast<int>(k);
    }
  }
  return Dataset{Tensor({n, d}, std::move(x)), std::move(y), class_count};
}

std::vector<std::vector<double>> circle_centers(std::size_t count, double radius) {
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < count; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(count);
    out.push_back({radius * std::cos(angle), radius * std::sin(angle)});
  }
  return out;
}

Dataset make_spirals(std::size_t per_class, double turns, double noise, std::uint64_t seed) {
  if (!(turns > 0.0)) throw ConfigError("spiral turns must be positive");
  if (noise < 0.0) throw ConfigError("spiral noise must be non-negative");
  if (per_class == 0) throw ConfigError("make_spirals needs at least one point per class");

  Rng rng(seed);
  const std::size_t n = 2 * per_class;
  Matrix x(static_cast<Eigen::Index>(n), 2);
  Labels y(n);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(per_class);
      const double angle = 2.0 * std::numbers::pi * turns * t + std::numbers::pi * static_cast<double>(k);
      const double radius = 0.1 + t;
      const auto row = static_cast<Eigen::Index>(k * per_class + i);
      x(row, 0) = radius * std::cos(angle) + noise * rng.normal();
      x(row, 1) = radius * std::sin(angle) + noise * rng.normal();
      y[static_cast<std::size_t>(row)] = static_cast<int>(k);
    }
  }
  return Dataset{Tensor({n, 2}, std::move(x)), std::move(y), 2};
}

SplitFractions SplitFractions::from_quiz_fraction(double quiz_fraction, double dev, double test) {
  const double portion = 1.0 - dev - test;
  return {portion * (1.0 - quiz_fraction), portion * quiz_fraction, dev, test};
}

void SplitFractions::validate() const {
  for (double f : {train, quiz, dev, test}) {
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
  }
  if (std::abs(train + quiz + dev + test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
}

namespace {

constexpr std::uint64_t kMaxSplitAttempts = 1000;
constexpr std::size_t kBalanceMinRows = 50;
constexpr double kBalanceTolerance = 0.10;

bool balanced(const Dataset& source, const IndexList& perm, std::array<std::size_t, 4> sizes) {
  const std::size_t classes = source.class_count;
  std::vector<double> reference(classes, 0.0);
  for (int y : source.labels) reference[static_cast<std::size_t>(y)] += 1.0;
  for (auto& r : reference) r /= static_cast<double>(source.size());

  std::size_t start = 0;
  for (std::size_t len : sizes) {
    if (len >= kBalanceMinRows) {
      std::vector<double> share(classes, 0.0);
      for (std::size_t i = start; i < start + len; ++i) share[static_cast<std::size_t>(source.labels[perm[i]])] += 1.0;
      for (std::size_t k = 0; k < classes; ++k) {
        if (std::abs(share[k] / static_cast<double>(len) - reference[k]) > kBalanceTolerance) return false;
      }
    }
    start += len;
  }
  return true;
}

}  // namespace

SplitSet split_dataset(const Dataset& source, const SplitFractions& fractions, std::uint64_t seed) {
  source.validate();
  fractions.validate();
  const std::size_t n = source.size();
  const auto count = [n](double f) { return static_cast<std::size_t>(std::llround(f * static_cast<double>(n))); };

  const std::size_t n_test = count(fractions.test);
  const std::size_t n_dev = count(fractions.dev);
  if (n_test + n_dev >= n) throw ConfigError("dev and test splits leave no training data");
  const std::size_t portion = n - n_test - n_dev;
  const double quiz_share = fractions.quiz / (fractions.train + fractions.quiz);
  const auto n_quiz = static_cast<std::size_t>(std::llround(quiz_share * static_cast<double>(portion)));
  const std::size_t n_train = portion - std::min(n_quiz, portion);
  if (n_test == 0 || n_dev == 0 || n_quiz == 0 || n_train == 0) {
    throw ConfigError("a split would be empty for " + std::to_string(n) + " samples");
  }

  // Redraw (deterministically) while any split of 50+ rows drifts more than
  // 10 points from the source label distribution.
  IndexList perm(n);
  for (std::uint64_t attempt = 0;; ++attempt) {
    if (attempt == kMaxSplitAttempts) throw ConfigError("no balanced split found; labels too skewed");
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(attempt == 0 ? seed : derive_seed(seed, attempt));
    rng.shuffle(std::span<std::size_t>(perm));
    if (balanced(source, perm, {n_train, n_quiz, n_dev, n_test})) break;
  }

  SplitSet out;
  auto take = [&](std::size_t begin, std::size_t len) { return IndexList(perm.begin() + begin, perm.begin() + begin + len); };
  out.train_indices = take(0, n_train);
  out.quiz_indices = take(n_train, n_quiz);
  out.dev_indices = take(n_train + n_quiz, n_dev);
  out.test_indices = take(n_train + n_quiz + n_dev, n_test);

  out.train = source.subset(out.train_indices);
  out.quiz = source.subset(out.quiz_indices);
  out.dev = source.subset(out.dev_indices);
  out.test = source.subset(out.test_indices);

  std::vector<char> seen(source.class_count, 0);
  for (int y : out.train.labels) seen[static_cast<std::size_t>(y)] = 1;
  for (std::size_t k = 0; k < seen.size(); ++k) {
    if (!seen[k]) throw ConfigError("training split is missing class " + std::to_string(k));
  }
  return out;
}

std::vector<IndexList> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  IndexList perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, epoch));
  rng.shuffle(std::span<std::size_t>(perm));

  std::vector<IndexList> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return out;
}

std::string to_csv(const Dataset& data) {
  std::ostringstream os;
  const std::size_t d = data.dimension();
  for (std::size_t j = 0; j < d; ++j) os << 'x' << j << ',';
  os << "label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      os << io::format_double(data.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) << ',';
    }
    os << data.labels[i] << '\n';
  }
  return os.str();
}

Dataset from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset CSV is empty");
  const auto header = io::split(io::trim(line), ',');
  if (header.size() < 2 || header.back() != "label") throw FormatError("dataset CSV header must end with 'label'");
  const std::size_t d = header.size() - 1;

  std::vector<double> values;
  Labels labels;
  int max_label = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    const auto cells = io::split(io::trim(line), ',');
    if (cells.size() != d + 1) throw FormatError("dataset CSV line " + std::to_string(line_no) + " has wrong width");
    for (std::size_t j = 0; j < d; ++j) values.push_back(io::parse_double(cells[j]));
    const auto y = io::parse_int(cells[d]);
    if (y < 0) throw FormatError("negative label on line " + std::to_string(line_no));
    labels.push_back(static_cast<int>(y));
    max_label = std::max(max_label, static_cast<int>(y));
  }
  if (labels.empty()) throw FormatError("dataset CSV has no rows");
  Dataset out{Tensor({labels.size(), d}, values), std::move(labels), static_cast<std::size_t>(max_label + 1)};
  out.validate();
  return out;
}

void write_csv(const Dataset& data, const std::filesystem::path& path) { io::write_atomic(path, to_csv(data)); }

Dataset read_csv(const std::filesystem::path& path) { return from_csv(io::read_file(path)); }

}  // namespace metadistil
