#include "tbve/service.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <mutex>
#include <thread>

#include "store.hpp"
#include "tbve/corpus.hpp"
#include "tbve/editing.hpp"
#include "tbve/io.hpp"
// After Eigen: <resolv.h> defines a _res macro that collides with Eigen.
#include "httplib.h"
#include "json.hpp"

namespace tbve {

using nlohmann::json;
namespace fs = std::filesystem;

ServiceConfig ServiceConfig::from_env(ServiceConfig base) {
    const auto get = [](const char* name) -> std::optional<std::string> {
        const char* v = std::getenv(name);
        if (!v || !*v) return std::nullopt;
        return std::string(v);
    };
    const auto number = [](const std::string& name, const std::string& v) {
        try {
            std::size_t used = 0;
            const int n = std::stoi(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return n;
        } catch (const std::exception&) {
            throw InvalidInput(name + " must be an integer, got '" + v + "'");
        }
    };
    if (auto v = get("TBVE_DATA_DIR")) base.data_dir = *v;
    if (auto v = get("TBVE_HOST")) base.host = *v;
    if (auto v = get("TBVE_PORT")) base.port = number("TBVE_PORT", *v);
    if (auto v = get("TBVE_WORKERS")) base.workers = number("TBVE_WORKERS", *v);
    if (auto v = get("TBVE_EMBEDDER")) base.embedder = *v;
    return base;
}

std::string to_string(JobState s) {
    switch (s) {
        case JobState::queued: return "queued";
        case JobState::running: return "running";
        case JobState::done: return "done";
        case JobState::failed: return "failed";
    }
    return "?";
}

JobState parse_job_state(std::string_view s) {
    if (s == "queued") return JobState::queued;
    if (s == "running") return JobState::running;
    if (s == "done") return JobState::done;
    if (s == "failed") return JobState::failed;
    throw InvalidInput("unknown job state '" + std::string(s) + "'");
}

bool is_forward_transition(JobState from, JobState to) {
    switch (from) {
        case JobState::queued: return to == JobState::running || to == JobState::failed;
        case JobState::running: return to == JobState::done || to == JobState::failed;
        default: return false;
    }
}

namespace {

std::string now_iso() {
    const auto now = std::chrono::system_clock::now();
    const auto secs = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                  tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

// An HTTP-level failure with its status code.
struct HttpError : std::runtime_error {
    int status;
    HttpError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", {{"status", status}, {"message", message}}}});
}

json parse_body(const httplib::Request& req) {
    try {
        return json::parse(req.body);
    } catch (const json::exception& e) {
        throw HttpError(400, std::string("request body is not valid JSON: ") + e.what());
    }
}

struct Loaded {
    std::string id;
    std::unique_ptr<AcousticModel> model;
};

enum class JobKind { edit, synthesize };

}  // namespace

struct Service::Impl {
    ServiceConfig cfg;
    store::Database db;
    std::mutex db_mu;  // single writer (and reader) of the connection
    store::BlobStore blobs;
    Lexicon lexicon;
    std::unique_ptr<EmbeddingProvider> provider;
    BaselineVocoder vocoder;
    FrameSpec spec;

    std::mutex state_mu;  // guards the snapshots below
    std::shared_ptr<const Corpus> corpus;
    std::shared_ptr<Loaded> active;
    std::mutex upload_mu;  // serializes recording and checkpoint uploads

    std::mutex queue_mu;
    std::condition_variable queue_cv;
    std::deque<std::string> queue;
    bool stopping = false;
    std::vector<std::thread> workers;

    httplib::Server http;
    std::thread listener;
    int bound_port = 0;
    std::mutex stop_mu;
    std::condition_variable stop_cv;
    bool stopped = false;
    bool started = false;

    explicit Impl(ServiceConfig c)
        : cfg(std::move(c)),
          db((fs::create_directories(cfg.data_dir), cfg.data_dir / "service.db")),
          blobs(cfg.data_dir / "blobs") {
        if (cfg.workers < 1) throw InvalidInput("worker count must be at least 1");
        const auto lex_path = cfg.data_dir / "lexicon.txt";
        if (!fs::exists(lex_path)) throw ServiceError("no lexicon.txt in data directory " + cfg.data_dir.string());
        lexicon = Lexicon::load(lex_path);
        if (cfg.embedder.empty()) provider = std::make_unique<StatisticsEmbeddingProvider>();
        else provider = std::make_unique<SubprocessEmbeddingProvider>(cfg.embedder);
        db.exec(R"(
            CREATE TABLE IF NOT EXISTS recordings (
                id TEXT PRIMARY KEY, content_hash TEXT UNIQUE NOT NULL, speaker_id TEXT NOT NULL,
                transcript TEXT NOT NULL, manifest TEXT NOT NULL, audio_blob TEXT NOT NULL,
                feature_blob TEXT NOT NULL, embedding TEXT NOT NULL, created_at TEXT NOT NULL);
            CREATE TABLE IF NOT EXISTS checkpoints (
                id TEXT PRIMARY KEY, blob TEXT NOT NULL, config TEXT NOT NULL, step INTEGER NOT NULL,
                uploaded_at TEXT NOT NULL);
            CREATE TABLE IF NOT EXISTS settings (key TEXT PRIMARY KEY, value TEXT NOT NULL);
            CREATE TABLE IF NOT EXISTS jobs (
                id TEXT PRIMARY KEY, kind TEXT NOT NULL, request TEXT NOT NULL, state TEXT NOT NULL,
                checkpoint_id TEXT, result TEXT, audio_blob TEXT, error_stage TEXT, error_detail TEXT,
                user_error INTEGER, created_at TEXT NOT NULL, started_at TEXT, finished_at TEXT);
        )");
        // SO_REUSEADDR only: with SO_REUSEPORT a second instance would share
        // the port instead of failing.
        http.set_socket_options([](socket_t sock) {
            int yes = 1;
            setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
        });
        load_corpus();
        restore_active();
        recover_jobs();
        routes();
    }

    // --- persistence -------------------------------------------------------

    CorpusEntry entry_from_row(const std::string& manifest, const std::string& audio_blob,
                               const std::string& feature_blob, const std::string& embedding) const {
        CorpusEntry e;
        e.record = manifest_record_from_json(json::parse(manifest));
        e.record.audio_path = blobs.path(audio_blob).string();
        e.phones = text_to_phones(e.record.text, lexicon);
        e.features = decode_tbvf(blobs.get(feature_blob));
        e.alignment = ingest_alignment(e.record, e.features, e.phones, lexicon);
        const auto v = json::parse(embedding).get<std::vector<float>>();
        if (v.size() != kEmbeddingDim) throw Error("stored embedding has the wrong size");
        std::copy(v.begin(), v.end(), e.embedding.begin());
        e.audio_sha256 = audio_blob;
        return e;
    }

    void load_corpus() {
        auto c = std::make_shared<Corpus>(lexicon);
        std::lock_guard lock(db_mu);
        store::Statement s(db, "SELECT manifest, audio_blob, feature_blob, embedding FROM recordings ORDER BY rowid");
        while (s.step()) c->add(entry_from_row(s.text(0), s.text(1), s.text(2), s.text(3)));
        corpus = std::move(c);
    }

    std::optional<std::string> setting(const std::string& key) {
        std::lock_guard lock(db_mu);
        store::Statement s(db, "SELECT value FROM settings WHERE key = ?");
        s.bind(key);
        if (!s.step()) return std::nullopt;
        return s.text(0);
    }

    std::shared_ptr<Loaded> load_checkpoint_blob(const std::string& id, const std::string& blob) {
        auto ck = decode_checkpoint(blobs.get(blob));
        auto l = std::make_shared<Loaded>();
        l->id = id;
        l->model = std::move(ck.model);
        return l;
    }

    void restore_active() {
        const auto id = setting("active_checkpoint");
        if (!id) return;
        std::string blob;
        {
            std::lock_guard lock(db_mu);
            store::Statement s(db, "SELECT blob FROM checkpoints WHERE id = ?");
            s.bind(*id);
            if (!s.step()) return;
            blob = s.text(0);
        }
        active = load_checkpoint_blob(*id, blob);
    }

    void recover_jobs() {
        std::lock_guard lock(db_mu);
        // A job that was running when the process died cannot resume.
        store::Statement fail(db,
                              "UPDATE jobs SET state = 'failed', error_stage = 'service', error_detail = "
                              "'interrupted by a service restart', user_error = 0, finished_at = ? "
                              "WHERE state = 'running'");
        fail.bind(now_iso()).run();
        store::Statement s(db, "SELECT id FROM jobs WHERE state = 'queued' ORDER BY rowid");
        while (s.step()) queue.push_back(s.text(0));
    }

    // Moves a job forward; refuses any transition that is not forward.
    void transition(const std::string& id, JobState to, const std::function<void(store::Database&)>& extra = {}) {
        std::lock_guard lock(db_mu);
        db.exec("BEGIN IMMEDIATE");
        try {
            store::Statement s(db, "SELECT state FROM jobs WHERE id = ?");
            s.bind(id);
            if (!s.step()) throw Error("unknown job " + id);
            const auto from = parse_job_state(s.text(0));
            if (!is_forward_transition(from, to))
                throw Error("job " + id + ": illegal transition " + to_string(from) + " -> " + to_string(to));
            store::Statement u(db, "UPDATE jobs SET state = ? WHERE id = ?");
            u.bind(to_string(to)).bind(id).run();
            if (extra) extra(db);
            db.exec("COMMIT");
        } catch (...) {
            db.exec("ROLLBACK");
            throw;
        }
    }

    // --- jobs ----------------------------------------------------------------

    std::string create_job(JobKind kind, const json& request) {
        std::string id;
        {
            std::lock_guard lock(db_mu);
            store::Statement n(db, "SELECT COALESCE(MAX(rowid), 0) + 1 FROM jobs");
            n.step();
            char buf[32];
            std::snprintf(buf, sizeof buf, "job-%06lld", static_cast<long long>(n.integer(0)));
            id = buf;
            store::Statement s(db, "INSERT INTO jobs (id, kind, request, state, created_at) VALUES (?, ?, ?, 'queued', ?)");
            s.bind(id).bind(std::string(kind == JobKind::edit ? "edit" : "synthesize")).bind(request.dump()).bind(now_iso());
            s.run();
        }
        {
            std::lock_guard lock(queue_mu);
            queue.push_back(id);
        }
        queue_cv.notify_one();
        return id;
    }

    void run_job(const std::string& id) {
        std::string kind, request;
        {
            std::lock_guard lock(db_mu);
            store::Statement s(db, "SELECT kind, request FROM jobs WHERE id = ?");
            s.bind(id);
            if (!s.step()) return;
            kind = s.text(0);
            request = s.text(1);
        }
        // Snapshots taken at job start: a checkpoint swap or a new upload
        // does not affect a job already running.
        std::shared_ptr<Loaded> model;
        std::shared_ptr<const Corpus> snapshot;
        {
            std::lock_guard lock(state_mu);
            model = active;
            snapshot = corpus;
        }
        if (!model) {
            transition(id, JobState::failed, [&](store::Database& d) {
                store::Statement s(d, "UPDATE jobs SET error_stage = 'service', error_detail = 'no active checkpoint', "
                                      "user_error = 0, finished_at = ? WHERE id = ?");
                s.bind(now_iso()).bind(id).run();
            });
            return;
        }
        transition(id, JobState::running, [&](store::Database& d) {
            store::Statement s(d, "UPDATE jobs SET started_at = ?, checkpoint_id = ? WHERE id = ?");
            s.bind(now_iso()).bind(model->id).bind(id).run();
        });
        const auto fail = [&](const std::string& stage, const std::string& detail, bool user_error) {
            transition(id, JobState::failed, [&](store::Database& d) {
                store::Statement s(d, "UPDATE jobs SET error_stage = ?, error_detail = ?, user_error = ?, "
                                      "finished_at = ? WHERE id = ?");
                s.bind(stage).bind(detail).bind(std::int64_t{user_error}).bind(now_iso()).bind(id).run();
            });
        };
        try {
            const EditContext ctx{*model->model, *snapshot, *provider, vocoder, spec, model->id};
            json result;
            std::string audio;
            if (kind == "edit") {
                const auto r = edit(edit_request_from_json(json::parse(request)), ctx);
                result = sidecar(r);
                audio = blobs.put(encode_wav(r.audio));
            } else {
                const auto r = synthesize_text(tts_request_from_json(json::parse(request)), ctx);
                result = sidecar(r, snapshot->lexicon());
                audio = blobs.put(encode_wav(r.audio));
            }
            result["audio_sha256"] = audio;
            transition(id, JobState::done, [&](store::Database& d) {
                store::Statement s(d, "UPDATE jobs SET result = ?, audio_blob = ?, finished_at = ? WHERE id = ?");
                s.bind(result.dump()).bind(audio).bind(now_iso()).bind(id).run();
            });
        } catch (const StageError& e) {
            fail(e.stage(), e.detail(), e.user_error());
        } catch (const InvalidInput& e) {
            fail("request", e.what(), true);
        } catch (const std::exception& e) {
            fail("worker", e.what(), false);
        }
    }

    void worker_loop() {
        for (;;) {
            std::string id;
            {
                std::unique_lock lock(queue_mu);
                queue_cv.wait(lock, [&] { return stopping || !queue.empty(); });
                if (stopping) return;
                id = queue.front();
                queue.pop_front();
            }
            try {
                run_job(id);
            } catch (const std::exception& e) {
                std::fprintf(stderr, "job %s: %s\n", id.c_str(), e.what());
            }
        }
    }

    json job_json(store::Statement& s, bool full) const {
        // Columns: id, kind, request, state, checkpoint_id, result, error_stage,
        // error_detail, user_error, created_at, started_at, finished_at
        json j{{"id", s.text(0)},
               {"kind", s.text(1)},
               {"state", s.text(3)},
               {"checkpoint_id", s.optional_text(4) ? json(*s.optional_text(4)) : json(nullptr)},
               {"created_at", s.text(9)},
               {"started_at", s.optional_text(10) ? json(*s.optional_text(10)) : json(nullptr)},
               {"finished_at", s.optional_text(11) ? json(*s.optional_text(11)) : json(nullptr)}};
        if (full) j["request"] = json::parse(s.text(2));
        const auto state = parse_job_state(s.text(3));
        if (state == JobState::done && full) j["result"] = json::parse(s.text(5));
        if (state == JobState::failed)
            j["error"] = {{"stage", s.text(6)}, {"detail", s.text(7)}, {"user_error", s.integer(8) != 0}};
        return j;
    }

    static constexpr const char* kJobColumns =
        "SELECT id, kind, request, state, checkpoint_id, result, error_stage, error_detail, user_error, "
        "created_at, started_at, finished_at FROM jobs";

    // --- recordings ----------------------------------------------------------

    json recording_json(const CorpusEntry& e) const {
        json words = json::array();
        for (std::size_t w = 0; w < e.phones.words.size(); ++w) {
            const auto span = e.alignment.spans[w];
            words.push_back({{"index", w},
                             {"text", e.phones.words[w]},
                             {"start_frame", span.start},
                             {"end_frame", span.end},
                             {"start_sample", span.start * static_cast<std::size_t>(spec.hop)},
                             {"end_sample", span.end * static_cast<std::size_t>(spec.hop)}});
        }
        std::vector<std::string> phones;
        for (auto p : e.phones.phones) phones.push_back(lexicon.name(p));
        return {{"id", e.record.id},
                {"speaker_id", e.record.speaker_id},
                {"transcript", e.record.text},
                {"phones", phones},
                {"durations_frames", e.alignment.phone_durations},
                {"words", words},
                {"frames", e.features.frames()},
                {"hop", spec.hop},
                {"sample_rate", spec.sample_rate},
                {"audio_sha256", e.audio_sha256},
                {"embedding", std::vector<float>(e.embedding.begin(), e.embedding.end())}};
    }

    std::shared_ptr<const Corpus> corpus_snapshot() {
        std::lock_guard lock(state_mu);
        return corpus;
    }

    void post_recording(const httplib::Request& req, httplib::Response& res) {
        if (!req.is_multipart_form_data() || !req.has_file("audio") || !req.has_file("manifest"))
            throw HttpError(400, "expected multipart/form-data with 'audio' (WAV) and 'manifest' (JSON) parts");
        const std::string audio_bytes = req.get_file_value("audio").content;
        const std::string manifest_text = req.get_file_value("manifest").content;
        ManifestRecord record;
        AudioClip audio;
        try {
            record = manifest_record_from_json(json::parse(manifest_text));
            audio = decode_wav(as_bytes(audio_bytes));
        } catch (const json::exception& e) {
            throw HttpError(400, std::string("manifest is not valid JSON: ") + e.what());
        } catch (const InvalidInput& e) {
            throw HttpError(400, e.what());
        }
        if (record.id.empty() || record.id.find('/') != std::string::npos)
            throw HttpError(400, "manifest id must be non-empty and contain no '/'");
        if (audio.sample_rate != spec.sample_rate)
            throw HttpError(400, "audio must be sampled at " + std::to_string(spec.sample_rate) + " Hz");
        record.audio_path.clear();
        const std::string canonical = to_json(record).dump();
        const std::string content_hash = io::sha256_hex(as_bytes(audio_bytes + "\n" + canonical));

        std::lock_guard upload(upload_mu);
        {
            std::lock_guard lock(db_mu);
            store::Statement s(db, "SELECT id, content_hash FROM recordings WHERE id = ? OR content_hash = ?");
            s.bind(record.id).bind(content_hash);
            while (s.step()) {
                if (s.text(1) == content_hash) {
                    send_json(res, 200, recording_json(corpus_snapshot()->at(s.text(0))));
                    return;
                }
                throw HttpError(409, "recording '" + record.id + "' already exists with different content");
            }
        }
        CorpusEntry entry;
        try {
            entry = prepare_entry(record, audio, lexicon, *provider, spec);
        } catch (const InvalidInput& e) {
            throw HttpError(422, e.what());
        }
        const std::string audio_blob = blobs.put(as_bytes(audio_bytes));
        const std::string feature_blob = blobs.put(encode_tbvf(entry.features));
        entry.record.audio_path = blobs.path(audio_blob).string();
        entry.audio_sha256 = audio_blob;
        {
            std::lock_guard lock(db_mu);
            store::Statement s(db, "INSERT INTO recordings (id, content_hash, speaker_id, transcript, manifest, "
                                   "audio_blob, feature_blob, embedding, created_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)");
            s.bind(record.id).bind(content_hash).bind(record.speaker_id).bind(record.text).bind(canonical);
            s.bind(audio_blob).bind(feature_blob);
            s.bind(json(std::vector<float>(entry.embedding.begin(), entry.embedding.end())).dump()).bind(now_iso());
            s.run();
        }
        const json body = recording_json(entry);
        {
            std::lock_guard lock(state_mu);
            auto next = std::make_shared<Corpus>(*corpus);
            next->add(std::move(entry));
            corpus = std::move(next);
        }
        send_json(res, 201, body);
    }

    // --- checkpoints ---------------------------------------------------------

    json checkpoint_json(const std::string& id, const std::string& config, std::int64_t step,
                         const std::string& uploaded_at, const std::string& active_id) const {
        const auto c = json::parse(config);
        return {{"id", id},
                {"embedding_mode", c.value("embedding_mode", "none")},
                {"ref_mode", c.value("ref_mode", "none")},
                {"step", step},
                {"uploaded_at", uploaded_at},
                {"active", id == active_id}};
    }

    std::string active_id() {
        std::lock_guard lock(state_mu);
        return active ? active->id : std::string();
    }

    void post_checkpoint(const httplib::Request& req, httplib::Response& res) {
        const std::string bytes =
            req.is_multipart_form_data() && req.has_file("checkpoint") ? req.get_file_value("checkpoint").content : req.body;
        if (bytes.empty()) throw HttpError(400, "empty checkpoint upload");
        Checkpoint ck;
        try {
            ck = decode_checkpoint(as_bytes(bytes));
        } catch (const Error& e) {
            throw HttpError(422, e.what());
        }
        if (ck.model->config().phone_inventory != lexicon.inventory())
            throw HttpError(422, "checkpoint phone inventory does not match the service lexicon");
        const std::string blob = blobs.put(as_bytes(bytes));
        const std::string id = "ckpt-" + blob.substr(0, 12);
        const std::string config = to_json(ck.model->config()).dump();
        std::lock_guard upload(upload_mu);
        std::lock_guard lock(db_mu);
        store::Statement s(db, "SELECT config, step, uploaded_at FROM checkpoints WHERE id = ?");
        s.bind(id);
        if (s.step()) {
            send_json(res, 200, checkpoint_json(id, s.text(0), s.integer(1), s.text(2), active_id()));
            return;
        }
        const std::string at = now_iso();
        store::Statement ins(db, "INSERT INTO checkpoints (id, blob, config, step, uploaded_at) VALUES (?, ?, ?, ?, ?)");
        ins.bind(id).bind(blob).bind(config).bind(static_cast<std::int64_t>(ck.step)).bind(at).run();
        send_json(res, 201, checkpoint_json(id, config, static_cast<std::int64_t>(ck.step), at, active_id()));
    }

    void activate_checkpoint(const std::string& id, httplib::Response& res) {
        std::string blob, config, at;
        std::int64_t step = 0;
        {
            std::lock_guard lock(db_mu);
            store::Statement s(db, "SELECT blob, config, step, uploaded_at FROM checkpoints WHERE id = ?");
            s.bind(id);
            if (!s.step()) throw HttpError(404, "unknown checkpoint '" + id + "'");
            blob = s.text(0);
            config = s.text(1);
            step = s.integer(2);
            at = s.text(3);
        }
        auto loaded = load_checkpoint_blob(id, blob);
        {
            std::lock_guard lock(db_mu);
            store::Statement s(db, "INSERT OR REPLACE INTO settings (key, value) VALUES ('active_checkpoint', ?)");
            s.bind(id).run();
        }
        {
            std::lock_guard lock(state_mu);
            active = std::move(loaded);
        }
        send_json(res, 200, checkpoint_json(id, config, step, at, id));
    }

    // --- routing -------------------------------------------------------------

    template <typename F>
    auto guarded(F f) {
        return [this, f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const HttpError& e) {
                send_error(res, e.status, e.what());
            } catch (const InvalidInput& e) {
                send_error(res, 400, e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, e.what());
            }
        };
    }

    void routes() {
        http.Get("/v1/health", guarded([this](const httplib::Request&, httplib::Response& res) {
            const auto c = corpus_snapshot();
            const auto a = active_id();
            send_json(res, 200,
                      {{"status", "ok"},
                       {"active_checkpoint", a.empty() ? json(nullptr) : json(a)},
                       {"workers", cfg.workers},
                       {"recordings", c->entries().size()},
                       {"embedding_provider", provider->name()}});
        }));

        http.Post("/v1/recordings", guarded([this](const httplib::Request& req, httplib::Response& res) {
            post_recording(req, res);
        }));
        http.Get("/v1/recordings", guarded([this](const httplib::Request&, httplib::Response& res) {
            json list = json::array();
            std::lock_guard lock(db_mu);
            store::Statement s(db, "SELECT id, speaker_id, transcript, created_at FROM recordings ORDER BY rowid");
            while (s.step())
                list.push_back({{"id", s.text(0)}, {"speaker_id", s.text(1)}, {"transcript", s.text(2)}, {"created_at", s.text(3)}});
            send_json(res, 200, {{"recordings", list}});
        }));
        http.Get(R"(/v1/recordings/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto c = corpus_snapshot();
            const std::string id = req.matches[1];
            if (!c->contains(id)) throw HttpError(404, "unknown recording '" + id + "'");
            send_json(res, 200, recording_json(c->at(id)));
        }));
        http.Get(R"(/v1/recordings/([^/]+)/audio)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto c = corpus_snapshot();
            const std::string id = req.matches[1];
            if (!c->contains(id)) throw HttpError(404, "unknown recording '" + id + "'");
            const auto bytes = blobs.get(c->at(id).audio_sha256);
            res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "audio/wav");
        }));

        http.Post("/v1/edits", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto request = edit_request_from_json(parse_body(req));
            if (!corpus_snapshot()->contains(request.utterance_id))
                throw HttpError(404, "unknown recording '" + request.utterance_id + "'");
            if (active_id().empty()) throw HttpError(409, "no active checkpoint");
            const auto id = create_job(JobKind::edit, to_json(request));
            res.set_header("Location", "/v1/edits/" + id);
            send_json(res, 202, {{"id", id}, {"kind", "edit"}, {"state", "queued"}});
        }));
        http.Post("/v1/synthesize", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto request = tts_request_from_json(parse_body(req));
            if (!corpus_snapshot()->contains(request.reference_id))
                throw HttpError(404, "unknown recording '" + request.reference_id + "'");
            if (active_id().empty()) throw HttpError(409, "no active checkpoint");
            const auto id = create_job(JobKind::synthesize, to_json(request));
            res.set_header("Location", "/v1/edits/" + id);
            send_json(res, 202, {{"id", id}, {"kind", "synthesize"}, {"state", "queued"}});
        }));
        http.Get("/v1/edits", guarded([this](const httplib::Request&, httplib::Response& res) {
            json list = json::array();
            std::lock_guard lock(db_mu);
            store::Statement s(db, std::string(kJobColumns) + " ORDER BY rowid");
            while (s.step()) list.push_back(job_json(s, false));
            send_json(res, 200, {{"jobs", list}});
        }));
        http.Get(R"(/v1/edits/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lock(db_mu);
            store::Statement s(db, std::string(kJobColumns) + " WHERE id = ?");
            s.bind(std::string(req.matches[1]));
            if (!s.step()) throw HttpError(404, "unknown job '" + std::string(req.matches[1]) + "'");
            send_json(res, 200, job_json(s, true));
        }));
        http.Get(R"(/v1/edits/([^/]+)/audio)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::string blob;
            {
                std::lock_guard lock(db_mu);
                store::Statement s(db, "SELECT state, audio_blob FROM jobs WHERE id = ?");
                s.bind(std::string(req.matches[1]));
                if (!s.step()) throw HttpError(404, "unknown job '" + std::string(req.matches[1]) + "'");
                if (s.text(0) != "done") throw HttpError(409, "job is " + s.text(0) + ", no audio yet");
                blob = s.text(1);
            }
            const auto bytes = blobs.get(blob);
            res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "audio/wav");
        }));

        http.Post("/v1/checkpoints", guarded([this](const httplib::Request& req, httplib::Response& res) {
            post_checkpoint(req, res);
        }));
        http.Get("/v1/checkpoints", guarded([this](const httplib::Request&, httplib::Response& res) {
            const auto a = active_id();
            json list = json::array();
            std::lock_guard lock(db_mu);
            store::Statement s(db, "SELECT id, config, step, uploaded_at FROM checkpoints ORDER BY rowid");
            while (s.step()) list.push_back(checkpoint_json(s.text(0), s.text(1), s.integer(2), s.text(3), a));
            send_json(res, 200, {{"checkpoints", list}, {"active", a.empty() ? json(nullptr) : json(a)}});
        }));
        http.Post(R"(/v1/checkpoints/([^/]+)/activate)",
                  guarded([this](const httplib::Request& req, httplib::Response& res) {
                      activate_checkpoint(req.matches[1], res);
                  }));
        http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) send_error(res, res.status, "no such endpoint");
        });
    }

    int start() {
        if (started) throw ServiceError("service already started");
        bound_port = cfg.port == 0 ? http.bind_to_any_port(cfg.host) : (http.bind_to_port(cfg.host, cfg.port) ? cfg.port : -1);
        if (bound_port < 0)
            throw ServiceError("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port) + " (address in use?)");
        started = true;
        for (int i = 0; i < cfg.workers; ++i) workers.emplace_back([this] { worker_loop(); });
        listener = std::thread([this] { http.listen_after_bind(); });
        http.wait_until_ready();
        return bound_port;
    }

    void stop() {
        std::lock_guard guard(stop_mu);
        if (stopped) return;
        if (started) {
            http.stop();
            if (listener.joinable()) listener.join();
        }
        {
            std::lock_guard lock(queue_mu);
            stopping = true;
        }
        queue_cv.notify_all();
        for (auto& w : workers) w.join();
        workers.clear();
        stopped = true;
        stop_cv.notify_all();
    }

    void wait() {
        std::unique_lock lock(stop_mu);
        stop_cv.wait(lock, [&] { return stopped; });
    }
};

Service::Service(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}
Service::~Service() { impl_->stop(); }
int Service::start() { return impl_->start(); }
void Service::stop() { impl_->stop(); }
void Service::wait() { impl_->wait(); }
int Service::port() const { return impl_->bound_port; }
const ServiceConfig& Service::config() const { return impl_->cfg; }

}  // namespace tbve
