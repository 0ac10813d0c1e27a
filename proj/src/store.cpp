#include "store.hpp"

#include <sqlite3.h>

#include "tbve/error.hpp"
#include "tbve/io.hpp"

namespace tbve::store {

Database::Database(const std::filesystem::path& path) {
    if (sqlite3_open(path.c_str(), &db_) != SQLITE_OK) {
        const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
        sqlite3_close(db_);
        throw Error("cannot open database " + path.string() + ": " + msg);
    }
    sqlite3_busy_timeout(db_, 5000);
    exec("PRAGMA journal_mode=WAL");
    exec("PRAGMA foreign_keys=ON");
}

Database::~Database() { sqlite3_close(db_); }

void Database::exec(const std::string& sql) {
    char* err = nullptr;
    if (sqlite3_exec(db_, sql.c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
        const std::string msg = err ? err : "unknown error";
        sqlite3_free(err);
        throw Error("sql error: " + msg);
    }
}

Statement::Statement(Database& db, const std::string& sql) : db_(db.handle()) {
    check(sqlite3_prepare_v2(db_, sql.c_str(), -1, &stmt_, nullptr));
}

Statement::~Statement() { sqlite3_finalize(stmt_); }

void Statement::check(int rc) const {
    if (rc != SQLITE_OK && rc != SQLITE_ROW && rc != SQLITE_DONE) throw Error(std::string("sql error: ") + sqlite3_errmsg(db_));
}

Statement& Statement::bind(const std::string& v) {
    check(sqlite3_bind_text(stmt_, next_++, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT));
    return *this;
}

Statement& Statement::bind(std::int64_t v) {
    check(sqlite3_bind_int64(stmt_, next_++, v));
    return *this;
}

Statement& Statement::bind(std::nullopt_t) {
    check(sqlite3_bind_null(stmt_, next_++));
    return *this;
}

Statement& Statement::bind(const std::optional<std::string>& v) { return v ? bind(*v) : bind(std::nullopt); }

bool Statement::step() {
    const int rc = sqlite3_step(stmt_);
    check(rc);
    return rc == SQLITE_ROW;
}

void Statement::run() {
    while (step()) {
    }
}

std::string Statement::text(int col) const {
    const auto* p = sqlite3_column_text(stmt_, col);
    return p ? std::string(reinterpret_cast<const char*>(p), static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col)))
             : std::string();
}

std::optional<std::string> Statement::optional_text(int col) const {
    if (sqlite3_column_type(stmt_, col) == SQLITE_NULL) return std::nullopt;
    return text(col);
}

std::int64_t Statement::integer(int col) const { return sqlite3_column_int64(stmt_, col); }

BlobStore::BlobStore(std::filesystem::path root) : root_(std::move(root)) { std::filesystem::create_directories(root_); }

std::filesystem::path BlobStore::path(const std::string& hash) const {
    if (hash.size() != 64 || hash.find_first_not_of("0123456789abcdef") != std::string::npos)
        throw InvalidInput("malformed blob reference");
    return root_ / hash.substr(0, 2) / hash;
}

std::string BlobStore::put(std::span<const std::uint8_t> bytes) {
    const std::string hash = io::sha256_hex(bytes);
    const auto p = path(hash);
    if (!std::filesystem::exists(p)) {
        std::filesystem::create_directories(p.parent_path());
        io::write_file_atomic(p, bytes);
    }
    return hash;
}

std::vector<std::uint8_t> BlobStore::get(const std::string& hash) const { return io::read_file(path(hash)); }

bool BlobStore::contains(const std::string& hash) const { return std::filesystem::exists(path(hash)); }

}  // namespace tbve::store
