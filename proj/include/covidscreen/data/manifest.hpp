#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "covidscreen/core/labels.hpp"

namespace covidscreen::data {

struct ImageRecord {
  std::string image_id;
  std::filesystem::path path;  // relative to the manifest root unless absolute
  Label label = Label::kNormal;
  std::string patient_id;
  Modality modality = Modality::kCT;
  // Filled in by validation; zero when unknown.
  int width = 0;
  int height = 0;
  int bit_depth = 0;
};

// Flat table of images. Records without an entry in `splits` are unassigned.
struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::map<std::string, Split> splits;
  std::filesystem::path root;

  std::filesystem::path resolve(const ImageRecord& record) const;
  std::optional<Split> split_of(const std::string& image_id) const;
  std::vector<ImageRecord> in_split(Split split) const;
  bool fully_assigned() const;
};

// counts[split][label]
using SplitCounts = std::array<std::array<std::size_t, 3>, 3>;
SplitCounts count_splits(const DatasetManifest& manifest);

struct LoadOptions {
  bool check_files = true;
  // Extra label spellings accepted by adapter manifests (e.g. "CT_NonCOVID").
  std::map<std::string, Label> label_aliases;
};

// CSV with header `image_id,path,label,patient_id,modality,split`. Throws
// MissingFile, DuplicateId, UnknownLabel or ManifestParseError.
DatasetManifest load_manifest(const std::filesystem::path& path, const LoadOptions& options = {});
DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& root,
                               const LoadOptions& options = {});

// Canonical serialization: header, rows in record order, LF line endings.
std::string serialize_manifest(const DatasetManifest& manifest);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Builds an unassigned manifest from the `<root>/<class>/<image>` layout. The
// patient id is the file stem up to the first '_' (the whole stem otherwise).
DatasetManifest index_directory(const std::filesystem::path& root, Modality modality,
                                const LoadOptions& options = {});

}  // namespace covidscreen::data
