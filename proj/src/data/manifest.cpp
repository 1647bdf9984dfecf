#include "covidscreen/data/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "covidscreen/core/error.hpp"

namespace covidscreen::data {
namespace {

constexpr const char* kHeader = "image_id,path,label,patient_id,modality,split";

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(current);
      current.clear();
    } else {
      current.push_back(ch);
    }
  }
  fields.push_back(current);
  return fields;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

Label resolve_label(const std::string& text, const LoadOptions& options, std::size_t line_no) {
  if (auto it = options.label_aliases.find(text); it != options.label_aliases.end()) {
    return it->second;
  }
  if (auto label = parse_label(text)) return *label;
  throw UnknownLabel("line " + std::to_string(line_no) + ": unknown label '" + text + "'");
}

void check_field(const std::string& field) {
  if (field.find_first_of(",\n\r") != std::string::npos) {
    throw InvalidArgument("manifest field contains a separator: '" + field + "'");
  }
}

}  // namespace

std::filesystem::path DatasetManifest::resolve(const ImageRecord& record) const {
  return record.path.is_absolute() ? record.path : root / record.path;
}

std::optional<Split> DatasetManifest::split_of(const std::string& image_id) const {
  auto it = splits.find(image_id);
  if (it == splits.end()) return std::nullopt;
  return it->second;
}

std::vector<ImageRecord> DatasetManifest::in_split(Split split) const {
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    if (split_of(r.image_id) == split) out.push_back(r);
  }
  return out;
}

bool DatasetManifest::fully_assigned() const {
  return std::all_of(records.begin(), records.end(),
                     [this](const ImageRecord& r) { return splits.contains(r.image_id); });
}

SplitCounts count_splits(const DatasetManifest& manifest) {
  SplitCounts counts{};
  for (const auto& r : manifest.records) {
    if (auto s = manifest.split_of(r.image_id)) ++counts[split_index(*s)][label_index(r.label)];
  }
  return counts;
}

DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& root,
                               const LoadOptions& options) {
  DatasetManifest manifest;
  manifest.root = root;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (!header_seen) {
      if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
      if (trim(line) != kHeader) {
        throw ManifestParseError("manifest header must be '" + std::string(kHeader) + "'");
      }
      header_seen = true;
      continue;
    }
    auto fields = split_fields(line);
    if (fields.size() != 6) {
      throw ManifestParseError("line " + std::to_string(line_no) + ": expected 6 fields, got " +
                               std::to_string(fields.size()));
    }
    for (auto& f : fields) f = trim(f);
    ImageRecord record;
    record.image_id = fields[0];
    if (record.image_id.empty()) {
      throw ManifestParseError("line " + std::to_string(line_no) + ": empty image_id");
    }
    if (!seen.insert(record.image_id).second) {
      throw DuplicateId("duplicate image_id '" + record.image_id + "' at line " +
                        std::to_string(line_no));
    }
    record.path = fields[1];
    record.label = resolve_label(fields[2], options, line_no);
    record.patient_id = fields[3].empty() ? record.image_id : fields[3];
    auto modality = parse_modality(fields[4]);
    if (!modality) {
      throw ManifestParseError("line " + std::to_string(line_no) + ": unknown modality '" +
                               fields[4] + "'");
    }
    record.modality = *modality;
    if (!fields[5].empty()) {
      auto split = parse_split(fields[5]);
      if (!split) {
        throw ManifestParseError("line " + std::to_string(line_no) + ": unknown split '" +
                                 fields[5] + "'");
      }
      manifest.splits[record.image_id] = *split;
    }
    if (options.check_files && !std::filesystem::exists(manifest.resolve(record))) {
      throw MissingFile("image file not found: " + manifest.resolve(record).string());
    }
    manifest.records.push_back(std::move(record));
  }
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw MissingFile("manifest not found: " + path.string());
  return parse_manifest(in, path.parent_path(), options);
}

std::string serialize_manifest(const DatasetManifest& manifest) {
  std::ostringstream os;
  os << kHeader << '\n';
  for (const auto& r : manifest.records) {
    const std::string path = r.path.generic_string();
    check_field(r.image_id);
    check_field(path);
    check_field(r.patient_id);
    os << r.image_id << ',' << path << ',' << to_string(r.label) << ',' << r.patient_id << ','
       << to_string(r.modality) << ',';
    if (auto s = manifest.split_of(r.image_id)) os << to_string(*s);
    os << '\n';
  }
  return os.str();
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write manifest: " + path.string());
  out << serialize_manifest(manifest);
}

DatasetManifest index_directory(const std::filesystem::path& root, Modality modality,
                                const LoadOptions& options) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw MissingFile("dataset root not found: " + root.string());
  DatasetManifest manifest;
  manifest.root = root;
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  std::set<std::string> seen;
  for (const auto& dir : class_dirs) {
    const std::string name = dir.filename().string();
    const Label label = resolve_label(name, options, 0);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      ImageRecord r;
      const std::string stem = file.stem().string();
      r.image_id = name + "/" + file.filename().string();
      if (!seen.insert(r.image_id).second) throw DuplicateId("duplicate image id " + r.image_id);
      r.path = fs::relative(file, root);
      r.label = label;
      const auto cut = stem.find('_');
      r.patient_id = cut == std::string::npos || cut == 0 ? stem : stem.substr(0, cut);
      r.modality = modality;
      manifest.records.push_back(std::move(r));
    }
  }
  return manifest;
}

}  // namespace covidscreen::data
