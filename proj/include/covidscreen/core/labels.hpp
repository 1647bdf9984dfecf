#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace covidscreen {

enum class Label { kCovid19 = 0, kOtherPneumonia = 1, kNormal = 2 };
enum class Modality { kCT, kCXR };
enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

inline constexpr int kNumClasses = 3;
inline constexpr std::array<Label, 3> kAllLabels = {Label::kCovid19, Label::kOtherPneumonia,
                                                    Label::kNormal};
inline constexpr std::array<Split, 3> kAllSplits = {Split::kTrain, Split::kVal, Split::kTest};

// Canonical spellings are the upper-case forms; parsing also accepts the
// lower-case aliases used on the command line and in HTTP queries.
std::string_view to_string(Label label);
std::string_view to_string(Modality modality);
std::string_view to_string(Split split);

std::optional<Label> parse_label(std::string_view text);
std::optional<Modality> parse_modality(std::string_view text);
std::optional<Split> parse_split(std::string_view text);

inline int label_index(Label label) { return static_cast<int>(label); }
inline int split_index(Split split) { return static_cast<int>(split); }

}  // namespace covidscreen
