#include "covidscreen/data/split.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "covidscreen/core/error.hpp"
#include "covidscreen/core/random.hpp"

namespace covidscreen::data {
namespace {

void check_ratios(const SplitRatios& ratios) {
  for (Split s : kAllSplits) {
    if (!(ratios[s] >= 0.0)) throw InvalidArgument("split ratios must be non-negative");
  }
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw InvalidArgument("split ratios must sum to 1");
  }
}

int requested_splits(const SplitRatios& ratios) {
  int k = 0;
  for (Split s : kAllSplits) k += ratios[s] > 0.0 ? 1 : 0;
  return k;
}

struct Group {
  std::string patient_id;
  std::vector<const ImageRecord*> members;
};

}  // namespace

std::array<std::size_t, 3> split_targets(std::size_t n, const SplitRatios& ratios) {
  std::array<std::size_t, 3> target{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (Split s : kAllSplits) {
    const double exact = ratios[s] * static_cast<double>(n);
    target[split_index(s)] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[split_index(s)] = exact - static_cast<double>(target[split_index(s)]);
    assigned += target[split_index(s)];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) {
    ++target[order[k % 3]];
  }
  return target;
}

SplitAssignment stratified_split(std::span<const ImageRecord> records, const SplitRatios& ratios,
                                 std::uint64_t seed, bool group_by_patient) {
  check_ratios(ratios);
  SplitAssignment out;

  // Canonical order so the result does not depend on input ordering.
  std::vector<const ImageRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const ImageRecord* a, const ImageRecord* b) { return a->image_id < b->image_id; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->image_id == sorted[i - 1]->image_id) {
      throw DuplicateId("duplicate image_id '" + sorted[i]->image_id + "'");
    }
  }

  // Bucket units (single records or whole patients) by class.
  std::array<std::vector<Group>, 3> by_class;
  if (group_by_patient) {
    std::map<std::string, Group> patients;
    for (const ImageRecord* r : sorted) {
      auto& g = patients[r->patient_id];
      g.patient_id = r->patient_id;
      g.members.push_back(r);
    }
    for (auto& [id, g] : patients) {
      std::array<std::size_t, 3> votes{};
      for (const ImageRecord* r : g.members) ++votes[label_index(r->label)];
      const auto majority = std::max_element(votes.begin(), votes.end()) - votes.begin();
      by_class[majority].push_back(std::move(g));
    }
  } else {
    for (const ImageRecord* r : sorted) {
      by_class[label_index(r->label)].push_back(Group{r->image_id, {r}});
    }
  }

  const int needed = requested_splits(ratios);
  for (Label label : kAllLabels) {
    auto& units = by_class[label_index(label)];
    std::size_t n = 0;
    for (const auto& g : units) n += g.members.size();
    if (n == 0) continue;
    if (n < static_cast<std::size_t>(needed)) {
      throw InsufficientRecords("class " + std::string(to_string(label)) + " has " +
                                std::to_string(n) + " records for " + std::to_string(needed) +
                                " splits");
    }
    auto rng = Rng::derive(seed, {static_cast<std::uint64_t>(label_index(label))});
    rng.shuffle(units.begin(), units.end());

    const auto target = split_targets(n, ratios);
    std::array<std::size_t, 3> filled{};
    for (const auto& g : units) {
      // Largest remaining deficit wins; ties go to the earlier split.
      int best = -1;
      long long best_deficit = 0;
      for (int s = 0; s < 3; ++s) {
        if (ratios[kAllSplits[s]] <= 0.0) continue;
        const long long deficit =
            static_cast<long long>(target[s]) - static_cast<long long>(filled[s]);
        if (best < 0 || deficit > best_deficit) {
          best = s;
          best_deficit = deficit;
        }
      }
      for (const ImageRecord* r : g.members) {
        out.by_id[r->image_id] = kAllSplits[best];
        ++out.counts[best][label_index(r->label)];
        ++filled[best];
      }
    }
  }
  return out;
}

void apply_split(DatasetManifest& manifest, const SplitAssignment& assignment) {
  for (const auto& r : manifest.records) {
    auto it = assignment.by_id.find(r.image_id);
    if (it != assignment.by_id.end()) manifest.splits[r.image_id] = it->second;
  }
}

void append_to_split(DatasetManifest& manifest, std::span<const ImageRecord> records,
                     Split split) {
  for (const auto& r : records) {
    const bool exists = std::any_of(manifest.records.begin(), manifest.records.end(),
                                    [&](const ImageRecord& e) { return e.image_id == r.image_id; });
    if (exists) throw DuplicateId("duplicate image_id '" + r.image_id + "'");
    manifest.records.push_back(r);
    manifest.splits[r.image_id] = split;
  }
}

}  // namespace covidscreen::data
