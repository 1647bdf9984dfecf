#include "covidscreen/core/labels.hpp"

#include <algorithm>
#include <cctype>

namespace covidscreen {
namespace {

std::string upper(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  std::replace(out.begin(), out.end(), '-', '_');
  return out;
}

}  // namespace

std::string_view to_string(Label label) {
  switch (label) {
    case Label::kCovid19: return "COVID19";
    case Label::kOtherPneumonia: return "OTHER_PNEUMONIA";
    case Label::kNormal: return "NORMAL";
  }
  return "UNKNOWN";
}

std::string_view to_string(Modality modality) {
  return modality == Modality::kCT ? "CT" : "CXR";
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "TRAIN";
    case Split::kVal: return "VAL";
    case Split::kTest: return "TEST";
  }
  return "UNKNOWN";
}

std::optional<Label> parse_label(std::string_view text) {
  const std::string key = upper(text);
  if (key == "COVID19" || key == "COVID_19" || key == "COVID") return Label::kCovid19;
  if (key == "OTHER_PNEUMONIA" || key == "PNEUMONIA") return Label::kOtherPneumonia;
  if (key == "NORMAL") return Label::kNormal;
  return std::nullopt;
}

std::optional<Modality> parse_modality(std::string_view text) {
  const std::string key = upper(text);
  if (key == "CT") return Modality::kCT;
  if (key == "CXR") return Modality::kCXR;
  return std::nullopt;
}

std::optional<Split> parse_split(std::string_view text) {
  const std::string key = upper(text);
  if (key == "TRAIN") return Split::kTrain;
  if (key == "VAL" || key == "VALIDATION") return Split::kVal;
  if (key == "TEST") return Split::kTest;
  return std::nullopt;
}

}  // namespace covidscreen
