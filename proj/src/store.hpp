#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

struct sqlite3;
struct sqlite3_stmt;

namespace tbve::store {

// Thin RAII layer over one SQLite connection. Not thread-safe; callers
// serialize access.
class Database {
public:
    explicit Database(const std::filesystem::path& path);
    ~Database();
    Database(const Database&) = delete;
    Database& operator=(const Database&) = delete;

    void exec(const std::string& sql);
    sqlite3* handle() { return db_; }

private:
    sqlite3* db_ = nullptr;
};

class Statement {
public:
    Statement(Database& db, const std::string& sql);
    ~Statement();
    Statement(const Statement&) = delete;
    Statement& operator=(const Statement&) = delete;

    // Binds are 1-based, in order of appearance.
    Statement& bind(const std::string& v);
    Statement& bind(std::int64_t v);
    Statement& bind(std::nullopt_t);
    Statement& bind(const std::optional<std::string>& v);

    // True while a row is available.
    bool step();
    void run();  // step to completion

    std::string text(int col) const;
    std::optional<std::string> optional_text(int col) const;
    std::int64_t integer(int col) const;

private:
    void check(int rc) const;
    sqlite3* db_;
    sqlite3_stmt* stmt_ = nullptr;
    int next_ = 1;
};

// Content-addressed files under <root>/<first two hex>/<sha256>. Writes go
// through a temp file and a rename, so a blob is either absent or complete.
class BlobStore {
public:
    explicit BlobStore(std::filesystem::path root);

    std::string put(std::span<const std::uint8_t> bytes);
    std::vector<std::uint8_t> get(const std::string& hash) const;
    std::filesystem::path path(const std::string& hash) const;
    bool contains(const std::string& hash) const;

private:
    std::filesystem::path root_;
};

}  // namespace tbve::store
