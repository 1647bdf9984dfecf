#include "covidscreen/service/case_store.hpp"

#include <sqlite3.h>

#include <chrono>
#include <cstdio>
#include <ctime>

#include "covidscreen/core/error.hpp"
#include "covidscreen/nn/checkpoint.hpp"

namespace covidscreen::service {

std::string_view to_string(Triage t) {
  switch (t) {
    case Triage::kUnreviewed: return "UNREVIEWED";
    case Triage::kConfirmPositive: return "CONFIRM_POSITIVE";
    case Triage::kConfirmNegative: return "CONFIRM_NEGATIVE";
    case Triage::kNeedsReview: return "NEEDS_REVIEW";
  }
  return "UNREVIEWED";
}

std::optional<Triage> parse_triage(std::string_view text) {
  for (Triage t : {Triage::kUnreviewed, Triage::kConfirmPositive, Triage::kConfirmNegative, Triage::kNeedsReview}) {
    if (text == to_string(t)) return t;
  }
  return std::nullopt;
}

nlohmann::json to_json(const CaseRecord& c) {
  nlohmann::json probs = nlohmann::json::object();
  for (const auto& [name, p] : c.probabilities) probs[name] = p;
  return {{"case_id", c.case_id},
          {"image_sha256", c.image_sha256},
          {"modality", std::string(to_string(c.modality))},
          {"model_version", c.model_version},
          {"probabilities", probs},
          {"predicted_label", std::string(to_string(c.predicted_label))},
          {"triage", std::string(to_string(c.triage))},
          {"triage_note", c.triage_note},
          {"reviewer", c.reviewer},
          {"created_at", c.created_at},
          {"updated_at", c.updated_at},
          {"triaged_at", c.triaged_at.empty() ? nlohmann::json() : nlohmann::json(c.triaged_at)}};
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

namespace {

class Statement {
 public:
  Statement(sqlite3* db, const char* sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK) {
      throw Error(std::string("case store: ") + sqlite3_errmsg(db));
    }
  }
  ~Statement() { sqlite3_finalize(stmt_); }

  Statement& bind(int i, std::string_view text) {
    sqlite3_bind_text(stmt_, i, text.data(), static_cast<int>(text.size()), SQLITE_TRANSIENT);
    return *this;
  }
  Statement& bind_blob(int i, std::string_view bytes) {
    sqlite3_bind_blob64(stmt_, i, bytes.data(), bytes.size(), SQLITE_TRANSIENT);
    return *this;
  }
  Statement& bind(int i, std::int64_t v) {
    sqlite3_bind_int64(stmt_, i, v);
    return *this;
  }

  bool step() {
    const int rc = sqlite3_step(stmt_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    throw Error(std::string("case store: ") + sqlite3_errmsg(db_));
  }

  std::string text(int col) const {
    const auto* p = reinterpret_cast<const char*>(sqlite3_column_text(stmt_, col));
    return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col))) : std::string();
  }
  std::string blob(int col) const {
    const auto* p = static_cast<const char*>(sqlite3_column_blob(stmt_, col));
    return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col))) : std::string();
  }
  std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_, col); }

 private:
  sqlite3* db_;
  sqlite3_stmt* stmt_ = nullptr;
};

constexpr const char* kCaseColumns =
    "case_id, image_sha256, modality, model_version, probabilities, predicted_label, triage, triage_note, "
    "reviewer, created_at, updated_at, triaged_at";

CaseRecord read_case(const Statement& s) {
  CaseRecord c;
  c.case_id = s.text(0);
  c.image_sha256 = s.text(1);
  c.modality = parse_modality(s.text(2)).value_or(Modality::kCT);
  c.model_version = s.text(3);
  for (const auto& e : nlohmann::json::parse(s.text(4))) {
    c.probabilities.emplace_back(e.at(0).get<std::string>(), e.at(1).get<double>());
  }
  c.predicted_label = parse_label(s.text(5)).value_or(Label::kNormal);
  c.triage = parse_triage(s.text(6)).value_or(Triage::kUnreviewed);
  c.triage_note = s.text(7);
  c.reviewer = s.text(8);
  c.created_at = s.text(9);
  c.updated_at = s.text(10);
  c.triaged_at = s.text(11);
  return c;
}

}  // namespace

CaseStore::CaseStore(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (sqlite3_open(path.c_str(), &db_) != SQLITE_OK) {
    const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
    sqlite3_close(db_);
    throw Error("cannot open case store " + path.string() + ": " + msg);
  }
  sqlite3_busy_timeout(db_, 5000);
  exec("PRAGMA journal_mode=WAL");
  exec("PRAGMA synchronous=NORMAL");
  exec(
      "CREATE TABLE IF NOT EXISTS images (sha256 TEXT PRIMARY KEY, bytes BLOB NOT NULL);"
      "CREATE TABLE IF NOT EXISTS cases ("
      "  seq INTEGER PRIMARY KEY AUTOINCREMENT, case_id TEXT UNIQUE NOT NULL,"
      "  image_sha256 TEXT NOT NULL REFERENCES images(sha256), modality TEXT NOT NULL,"
      "  model_version TEXT NOT NULL, probabilities TEXT NOT NULL, predicted_label TEXT NOT NULL,"
      "  triage TEXT NOT NULL, triage_note TEXT NOT NULL DEFAULT '', reviewer TEXT NOT NULL DEFAULT '',"
      "  created_at TEXT NOT NULL, updated_at TEXT NOT NULL, triaged_at TEXT NOT NULL DEFAULT '');"
      "CREATE INDEX IF NOT EXISTS cases_triage ON cases(triage, seq);"
      "CREATE INDEX IF NOT EXISTS cases_image ON cases(image_sha256, modality, model_version);"
      "CREATE TABLE IF NOT EXISTS triage_events ("
      "  case_id TEXT NOT NULL, decision TEXT NOT NULL, note TEXT NOT NULL, reviewer TEXT NOT NULL,"
      "  at TEXT NOT NULL);"
      "CREATE TABLE IF NOT EXISTS cams (key TEXT PRIMARY KEY, case_id TEXT NOT NULL, png BLOB NOT NULL);");
}

CaseStore::~CaseStore() { sqlite3_close(db_); }

void CaseStore::exec(const char* sql) {
  char* err = nullptr;
  if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
    const std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    throw Error("case store: " + msg);
  }
}

std::string CaseStore::put_image(std::string_view bytes) {
  const std::string sha = nn::sha256_hex(bytes.data(), bytes.size());
  std::lock_guard lock(mutex_);
  Statement(db_, "INSERT OR IGNORE INTO images (sha256, bytes) VALUES (?1, ?2)").bind(1, sha).bind_blob(2, bytes).step();
  return sha;
}

std::optional<std::string> CaseStore::image(const std::string& sha256) {
  std::lock_guard lock(mutex_);
  Statement s(db_, "SELECT bytes FROM images WHERE sha256 = ?1");
  s.bind(1, sha256);
  if (!s.step()) return std::nullopt;
  return s.blob(0);
}

void CaseStore::insert(const CaseRecord& c) {
  nlohmann::json probs = nlohmann::json::array();
  for (const auto& [name, p] : c.probabilities) probs.push_back({name, p});
  std::lock_guard lock(mutex_);
  Statement s(db_,
              "INSERT INTO cases (case_id, image_sha256, modality, model_version, probabilities, predicted_label,"
              " triage, triage_note, reviewer, created_at, updated_at, triaged_at)"
              " VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12)");
  s.bind(1, c.case_id)
      .bind(2, c.image_sha256)
      .bind(3, to_string(c.modality))
      .bind(4, c.model_version)
      .bind(5, probs.dump())
      .bind(6, to_string(c.predicted_label))
      .bind(7, to_string(c.triage))
      .bind(8, c.triage_note)
      .bind(9, c.reviewer)
      .bind(10, c.created_at)
      .bind(11, c.updated_at)
      .bind(12, c.triaged_at);
  s.step();
}

std::optional<CaseRecord> CaseStore::get(const std::string& case_id) {
  std::lock_guard lock(mutex_);
  Statement s(db_, (std::string("SELECT ") + kCaseColumns + " FROM cases WHERE case_id = ?1").c_str());
  s.bind(1, case_id);
  if (!s.step()) return std::nullopt;
  return read_case(s);
}

std::optional<CaseRecord> CaseStore::find_prediction(const std::string& sha256, Modality modality,
                                                     const std::string& model_version) {
  std::lock_guard lock(mutex_);
  Statement s(db_, (std::string("SELECT ") + kCaseColumns +
                    " FROM cases WHERE image_sha256 = ?1 AND modality = ?2 AND model_version = ?3"
                    " ORDER BY seq DESC LIMIT 1")
                       .c_str());
  s.bind(1, sha256).bind(2, to_string(modality)).bind(3, model_version);
  if (!s.step()) return std::nullopt;
  return read_case(s);
}

std::optional<CaseRecord> CaseStore::set_triage(const std::string& case_id, Triage decision,
                                                const std::string& note, const std::string& reviewer) {
  {
    std::lock_guard lock(mutex_);
    const std::string now = utc_now();
    exec("BEGIN IMMEDIATE");
    try {
      Statement u(db_,
                  "UPDATE cases SET triage = ?2, triage_note = ?3, reviewer = ?4, updated_at = ?5, triaged_at = ?5"
                  " WHERE case_id = ?1");
      u.bind(1, case_id).bind(2, to_string(decision)).bind(3, note).bind(4, reviewer).bind(5, now);
      u.step();
      if (sqlite3_changes(db_) == 0) {
        exec("ROLLBACK");
        return std::nullopt;
      }
      Statement e(db_, "INSERT INTO triage_events (case_id, decision, note, reviewer, at) VALUES (?1, ?2, ?3, ?4, ?5)");
      e.bind(1, case_id).bind(2, to_string(decision)).bind(3, note).bind(4, reviewer).bind(5, now);
      e.step();
      exec("COMMIT");
    } catch (...) {
      exec("ROLLBACK");
      throw;
    }
  }
  return get(case_id);
}

CasePage CaseStore::list(const CaseQuery& query) {
  std::lock_guard lock(mutex_);
  CasePage page;
  const std::string where = query.triage ? " WHERE triage = ?1" : "";
  {
    Statement c(db_, ("SELECT COUNT(*) FROM cases" + where).c_str());
    if (query.triage) c.bind(1, to_string(*query.triage));
    c.step();
    page.total = static_cast<std::size_t>(c.integer(0));
  }
  Statement s(db_, (std::string("SELECT ") + kCaseColumns + " FROM cases" + where +
                    " ORDER BY seq DESC LIMIT ?2 OFFSET ?3")
                       .c_str());
  if (query.triage) s.bind(1, to_string(*query.triage));
  s.bind(2, static_cast<std::int64_t>(query.limit)).bind(3, static_cast<std::int64_t>(query.offset));
  while (s.step()) page.cases.push_back(read_case(s));
  return page;
}

std::optional<std::string> CaseStore::cam(const std::string& key) {
  std::lock_guard lock(mutex_);
  Statement s(db_, "SELECT png FROM cams WHERE key = ?1");
  s.bind(1, key);
  if (!s.step()) return std::nullopt;
  return s.blob(0);
}

void CaseStore::put_cam(const std::string& key, const std::string& case_id, std::string_view png) {
  std::lock_guard lock(mutex_);
  Statement(db_, "INSERT OR IGNORE INTO cams (key, case_id, png) VALUES (?1, ?2, ?3)")
      .bind(1, key)
      .bind(2, case_id)
      .bind_blob(3, png)
      .step();
}

}  // namespace covidscreen::service
