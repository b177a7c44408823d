#pragma once

// Synthetic classification tasks, train/quiz/dev/test splitting, batching.

#include "metadistil/nn.hpp"
#include "metadistil/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace metadistil {

using IndexList = std::vector<std::size_t>;

struct Dataset {
  Tensor features;  // [n x d]
  Labels labels;    // n entries in [0, class_count)
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dimension() const { return features.shape().at(1); }
  void validate() const;

  /// Rows in the given order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Gaussian clusters of `per_class` points around each center, stddev `spread`.
Dataset make_blobs(std::size_t per_class, std::size_t class_count,
                   const std::vector<std::vector<double>>& centers, double spread, std::uint64_t seed);

/// `count` points evenly spaced on a circle of the given radius.
std::vector<std::vector<double>> circle_centers(std::size_t count, double radius);

/// Two interleaved spirals with isotropic Gaussian noise. Radius grows
/// linearly with angle from 0.1 to 1.1 over `turns` revolutions.
Dataset make_spirals(std::size_t per_class, double turns, double noise, std::uint64_t seed);

struct SplitFractions {
  double train = 0.72;
  double quiz = 0.08;
  double dev = 0.10;
  double test = 0.10;

  /// Dev and test first, then the remaining training portion cut so that
  /// quiz / (train + quiz) = quiz_fraction.
  static SplitFractions from_quiz_fraction(double quiz_fraction, double dev, double test);
  void validate() const;
};

struct SplitSet {
  Dataset train;
  Dataset quiz;
  Dataset dev;
  Dataset test;
  // Source row of every split row.
  IndexList train_indices;
  IndexList quiz_indices;
  IndexList dev_indices;
  IndexList test_indices;
};

/// Seeded random partition (not stratified). Rejects empty splits and a
/// training split that misses a class.
SplitSet split_dataset(const Dataset& source, const SplitFractions& fractions, std::uint64_t seed);

/// Shuffled index batches for one epoch; the last batch may be short.
std::vector<IndexList> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch);

/// CSV with header x0,...,x{d-1},label.
void write_csv(const Dataset& data, const std::filesystem::path& path);
Dataset read_csv(const std::filesystem::path& path);
std::string to_csv(const Dataset& data);
Dataset from_csv(const std::string& text);

}  // namespace metadistil
