#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "covidscreen/data/manifest.hpp"

namespace covidscreen::data {

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;

  double operator[](Split s) const {
    return s == Split::kTrain ? train : s == Split::kVal ? val : test;
  }
};

struct SplitAssignment {
  std::map<std::string, Split> by_id;
  SplitCounts counts{};  // counts[split][label]
};

// Per-class split with largest-remainder rounding of the requested ratios, so
// each class lands within one record of its exact share. With
// `group_by_patient`, whole patients are assigned and no patient spans two
// splits (class shares are then matched greedily). Pure in its arguments.
SplitAssignment stratified_split(std::span<const ImageRecord> records, const SplitRatios& ratios,
                                 std::uint64_t seed, bool group_by_patient);

// Largest-remainder integer targets for n items.
std::array<std::size_t, 3> split_targets(std::size_t n, const SplitRatios& ratios);

void apply_split(DatasetManifest& manifest, const SplitAssignment& assignment);

// Appends records to the manifest and assigns them to `split` (used to add
// extra other-pneumonia images to a test set).
void append_to_split(DatasetManifest& manifest, std::span<const ImageRecord> records, Split split);

}  // namespace covidscreen::data
