#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "covidscreen/core/labels.hpp"

struct sqlite3;

namespace covidscreen::service {

enum class Triage { kUnreviewed, kConfirmPositive, kConfirmNegative, kNeedsReview };

std::string_view to_string(Triage t);
std::optional<Triage> parse_triage(std::string_view text);

struct CaseRecord {
  std::string case_id;
  std::string image_sha256;
  Modality modality = Modality::kCT;
  std::string model_version;
  // Label name -> probability, in the model's class order.
  std::vector<std::pair<std::string, double>> probabilities;
  Label predicted_label = Label::kNormal;
  Triage triage = Triage::kUnreviewed;
  std::string triage_note;
  std::string reviewer;
  std::string created_at;  // ISO-8601 UTC, millisecond resolution
  std::string updated_at;
  std::string triaged_at;  // empty until the first review action
};

nlohmann::json to_json(const CaseRecord& c);

struct CaseQuery {
  std::optional<Triage> triage;
  std::size_t limit = 50;
  std::size_t offset = 0;
};

struct CasePage {
  std::vector<CaseRecord> cases;  // newest first
  std::size_t total = 0;          // matching cases before pagination
};

// Single-file SQLite store (WAL journal) for cases, content-addressed source
// images and rendered overlays. All calls are serialized on one connection.
class CaseStore {
 public:
  explicit CaseStore(const std::filesystem::path& path);
  ~CaseStore();
  CaseStore(const CaseStore&) = delete;
  CaseStore& operator=(const CaseStore&) = delete;

  // Stores the bytes under their SHA-256 (idempotent) and returns the digest.
  std::string put_image(std::string_view bytes);
  std::optional<std::string> image(const std::string& sha256);

  void insert(const CaseRecord& c);
  std::optional<CaseRecord> get(const std::string& case_id);
  // Latest case with the same image, modality and model version.
  std::optional<CaseRecord> find_prediction(const std::string& sha256, Modality modality,
                                            const std::string& model_version);
  std::optional<CaseRecord> set_triage(const std::string& case_id, Triage decision, const std::string& note,
                                       const std::string& reviewer);
  CasePage list(const CaseQuery& query);

  std::optional<std::string> cam(const std::string& key);
  void put_cam(const std::string& key, const std::string& case_id, std::string_view png);

 private:
  void exec(const char* sql);

  std::mutex mutex_;
  sqlite3* db_ = nullptr;
};

std::string utc_now();

}  // namespace covidscreen::service
