#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

#include "tbve/error.hpp"

namespace tbve {

struct ServiceConfig {
    std::filesystem::path data_dir = "data";
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    int workers = 1;
    std::string embedder;  // subprocess command; empty selects the statistics provider

    // Overrides from TBVE_DATA_DIR, TBVE_HOST, TBVE_PORT, TBVE_WORKERS and
    // TBVE_EMBEDDER where set.
    static ServiceConfig from_env(ServiceConfig base);
    static ServiceConfig from_env() { return from_env(ServiceConfig{}); }
};

// Startup failures: unusable data directory, port in use, ...
class ServiceError : public Error {
public:
    using Error::Error;
};

enum class JobState { queued, running, done, failed };
std::string to_string(JobState s);
JobState parse_job_state(std::string_view s);
// queued -> running -> {done, failed}; queued -> failed when a job cannot start.
bool is_forward_transition(JobState from, JobState to);

// REST service under /v1 over a data directory holding service.db (SQLite
// metadata), blobs/ (content-addressed audio, features, checkpoints, results)
// and lexicon.txt. Edits and syntheses run as jobs on a fixed worker pool.
class Service {
public:
    explicit Service(ServiceConfig config);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds and starts serving in the background; returns the bound port.
    int start();
    // Stops accepting requests, lets running jobs finish and joins the
    // workers. Jobs still queued stay queued and resume on the next start.
    void stop();
    // Blocks until stop() has completed.
    void wait();

    int port() const;
    const ServiceConfig& config() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace tbve
