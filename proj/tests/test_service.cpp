#include <gtest/gtest.h>

#include <cstdlib>

#include "support.hpp"
#include "tbve/editing.hpp"
#include "tbve/io.hpp"
#include "service_client.hpp"

using namespace tbve;
using namespace tbve::testing;

namespace {

struct ServiceFixture {
    ToyCorpus toy;
    std::unique_ptr<AcousticModel> model;

    ServiceFixture() {
        ToyCorpusOptions o;
        o.utterances = 3;
        o.min_words = o.max_words = 4;
        o.seed = 31;
        toy = make_toy_corpus(o);
        model = std::make_unique<AcousticModel>(fixtures::small_config(toy.lexicon));
        model->set_normalization(fixtures::features_of(fixtures::training_set(toy)));
    }

    const ToyUtterance& utt(std::size_t i) const { return toy.utterances[i]; }

    // The corpus exactly as the service sees it: features from the PCM16 upload.
    Corpus served_corpus() const {
        const StatisticsEmbeddingProvider provider;
        Corpus c(toy.lexicon);
        for (const auto& u : toy.utterances)
            c.add(prepare_entry(u.record, decode_wav(encode_wav(u.audio)), toy.lexicon, provider));
        return c;
    }

    json edit_body(std::size_t utterance, std::size_t i, std::size_t j, const std::string& text, int seed = 0) const {
        return {{"utterance_id", utt(utterance).record.id}, {"word_span", {i, j}}, {"replacement_text", text}, {"seed", seed}};
    }

    std::string word(std::size_t utterance, std::size_t w) const {
        return text_to_phones(utt(utterance).record.text, toy.lexicon).words[w];
    }
};

std::string sha(const std::string& body) {
    return io::sha256_hex({reinterpret_cast<const std::uint8_t*>(body.data()), body.size()});
}

}  // namespace

TEST(JobStates, OnlyForwardTransitions) {
    using S = JobState;
    EXPECT_TRUE(is_forward_transition(S::queued, S::running));
    EXPECT_TRUE(is_forward_transition(S::running, S::done));
    EXPECT_TRUE(is_forward_transition(S::running, S::failed));
    EXPECT_TRUE(is_forward_transition(S::queued, S::failed));
    EXPECT_FALSE(is_forward_transition(S::running, S::queued));
    EXPECT_FALSE(is_forward_transition(S::done, S::failed));
    EXPECT_FALSE(is_forward_transition(S::failed, S::done));
    EXPECT_FALSE(is_forward_transition(S::done, S::done));
    EXPECT_FALSE(is_forward_transition(S::queued, S::done));
    for (auto s : {S::queued, S::running, S::done, S::failed}) EXPECT_EQ(parse_job_state(to_string(s)), s);
    EXPECT_TRUE(monotone({"queued", "queued", "running", "done", "done"}));
    EXPECT_FALSE(monotone({"running", "queued"}));
    EXPECT_FALSE(monotone({"done", "failed"}));
}

TEST(ServiceConfig, EnvironmentOverrides) {
    ::setenv("TBVE_PORT", "9123", 1);
    ::setenv("TBVE_WORKERS", "3", 1);
    ::setenv("TBVE_DATA_DIR", "/tmp/x", 1);
    const auto c = ServiceConfig::from_env();
    EXPECT_EQ(c.port, 9123);
    EXPECT_EQ(c.workers, 3);
    EXPECT_EQ(c.data_dir, "/tmp/x");
    ::setenv("TBVE_PORT", "80x", 1);
    EXPECT_THROW(ServiceConfig::from_env(), InvalidInput);
    ::unsetenv("TBVE_PORT");
    ::unsetenv("TBVE_WORKERS");
    ::unsetenv("TBVE_DATA_DIR");
}

TEST(Service, RefusesDataDirWithoutLexiconAndBusyPort) {
    ServiceConfig cfg;
    cfg.data_dir = fresh_dir("tbve_svc_nolex");
    EXPECT_THROW(Service{cfg}, ServiceError);

    const ServiceFixture f;
    LiveService first("tbve_svc_port_a", f.toy);
    std::ofstream(cfg.data_dir / "lexicon.txt") << f.toy.lexicon_text;
    cfg.port = first.service->port();
    Service second(cfg);
    EXPECT_THROW(second.start(), ServiceError);
}

TEST(Service, HealthAndUnknownRoutes) {
    const ServiceFixture f;
    LiveService s("tbve_svc_health", f.toy);
    const auto h = s.get_json("/v1/health");
    EXPECT_EQ(h["status"], "ok");
    EXPECT_TRUE(h["active_checkpoint"].is_null());
    EXPECT_EQ(h["recordings"], 0);
    auto r = s.client->Get("/v1/nothing");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 404);
    EXPECT_EQ(s.client->Get("/v1/edits/job-999999")->status, 404);
    EXPECT_EQ(s.client->Get("/v1/recordings/none")->status, 404);
    EXPECT_EQ(s.client->Get("/v1/recordings/none/audio")->status, 404);
}

TEST(Service, RecordingUploadIsIdempotentAndByteExact) {
    const ServiceFixture f;
    LiveService s("tbve_svc_rec", f.toy);
    const auto& u = f.utt(0);
    const auto wav = encode_wav(u.audio);
    auto first = s.upload(u);
    ASSERT_TRUE(first);
    ASSERT_EQ(first->status, 201) << first->body;
    const auto rec = json::parse(first->body);
    EXPECT_EQ(rec["id"], u.record.id);
    EXPECT_EQ(rec["transcript"], u.record.text);
    EXPECT_EQ(rec["words"].size(), text_to_phones(u.record.text, f.toy.lexicon).word_count());
    EXPECT_EQ(rec["words"][1]["start_sample"], rec["words"][1]["start_frame"].get<int>() * 200);
    EXPECT_EQ(rec["embedding"].size(), 32u);

    auto again = s.upload(u);
    EXPECT_EQ(again->status, 200);
    EXPECT_EQ(json::parse(again->body)["id"], u.record.id);

    auto audio = s.client->Get("/v1/recordings/" + u.record.id + "/audio");
    ASSERT_EQ(audio->status, 200);
    EXPECT_EQ(audio->get_header_value("Content-Type"), "audio/wav");
    EXPECT_EQ(audio->body, std::string(wav.begin(), wav.end()));
    // Identical bytes are stored once.
    EXPECT_TRUE(fs::exists(s.dir / "blobs" / sha(audio->body).substr(0, 2) / sha(audio->body)));

    auto list = s.get_json("/v1/recordings");
    EXPECT_EQ(list["recordings"].size(), 1u);

    // Same id, different content.
    auto changed = u.record;
    changed.speaker_id = "spk9";
    EXPECT_EQ(s.upload(wav, changed)->status, 409);
}

TEST(Service, RecordingUploadErrors) {
    const ServiceFixture f;
    LiveService s("tbve_svc_rec_err", f.toy);
    const auto& u = f.utt(1);
    auto bad_align = u.record;
    bad_align.durations_frames.back() += 3;
    auto r = s.upload(encode_wav(u.audio), bad_align);
    ASSERT_EQ(r->status, 422);
    EXPECT_NE(r->body.find("alignment/feature length mismatch"), std::string::npos);

    const std::vector<std::uint8_t> junk{'R', 'I', 'F', 'F', 0, 1, 2};
    EXPECT_EQ(s.upload(junk, u.record)->status, 400);
    EXPECT_EQ(s.client->Post("/v1/recordings", "{}", "application/json")->status, 400);
    httplib::MultipartFormDataItems items{{"audio", "x", "a.wav", "audio/wav"}, {"manifest", "{not json", "m", "application/json"}};
    EXPECT_EQ(s.client->Post("/v1/recordings", items)->status, 400);
    EXPECT_EQ(s.get_json("/v1/health")["recordings"], 0);
}

TEST(Service, CheckpointUploadListAndActivate) {
    const ServiceFixture f;
    LiveService s("tbve_svc_ckpt", f.toy);
    auto corrupt = s.client->Post("/v1/checkpoints", "definitely not a checkpoint", "application/octet-stream");
    EXPECT_EQ(corrupt->status, 422);

    auto bytes = encode_checkpoint(*f.model, nullptr, 5, "", nullptr);
    auto wrong_schema = bytes;
    wrong_schema[8] = 99;  // schema integer follows the 8-byte magic
    auto v = s.client->Post("/v1/checkpoints", std::string(wrong_schema.begin(), wrong_schema.end()), "application/octet-stream");
    EXPECT_EQ(v->status, 422);
    EXPECT_NE(v->body.find("schema"), std::string::npos);
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    EXPECT_EQ(s.client->Post("/v1/checkpoints", std::string(flipped.begin(), flipped.end()), "application/octet-stream")->status, 422);

    auto a = s.upload_checkpoint(*f.model, 5);
    ASSERT_EQ(a->status, 201) << a->body;
    AcousticModel other(fixtures::small_config(f.toy.lexicon, EmbeddingMode::utterance, RefMode::standard));
    auto b = s.upload_checkpoint(other, 7);
    ASSERT_EQ(b->status, 201);
    EXPECT_EQ(s.upload_checkpoint(*f.model, 5)->status, 200);

    const std::string ida = json::parse(a->body)["id"], idb = json::parse(b->body)["id"];
    auto list = s.get_json("/v1/checkpoints");
    ASSERT_EQ(list["checkpoints"].size(), 2u);
    EXPECT_EQ(list["checkpoints"][0]["id"], ida);
    EXPECT_EQ(list["checkpoints"][1]["id"], idb);
    EXPECT_EQ(list["checkpoints"][1]["embedding_mode"], "utterance");
    EXPECT_EQ(list["checkpoints"][1]["ref_mode"], "standard");
    EXPECT_TRUE(list["active"].is_null());

    EXPECT_EQ(s.client->Post("/v1/checkpoints/ckpt-nope/activate")->status, 404);
    EXPECT_EQ(s.client->Post("/v1/checkpoints/" + idb + "/activate")->status, 200);
    EXPECT_EQ(s.get_json("/v1/checkpoints")["active"], idb);
    EXPECT_EQ(s.get_json("/v1/health")["active_checkpoint"], idb);

    // A checkpoint built for another lexicon cannot be served.
    auto cfg = fixtures::small_config(f.toy.lexicon);
    cfg.phone_inventory.push_back("EXTRA");
    AcousticModel foreign(cfg);
    EXPECT_EQ(s.upload_checkpoint(foreign)->status, 422);
}

TEST(Service, EditJobLifecycle) {
    const ServiceFixture f;
    LiveService s("tbve_svc_edit", f.toy);
    ASSERT_EQ(s.upload(f.utt(0))->status, 201);
    const auto body = f.edit_body(0, 1, 3, f.word(1, 0) + " " + f.word(2, 1), 4);

    EXPECT_EQ(s.client->Post("/v1/edits", body.dump(), "application/json")->status, 409);
    const std::string ckpt = s.activate(*f.model);
    ASSERT_FALSE(ckpt.empty());
    auto unknown = body;
    unknown["utterance_id"] = "nobody";
    EXPECT_EQ(s.client->Post("/v1/edits", unknown.dump(), "application/json")->status, 404);
    EXPECT_EQ(s.client->Post("/v1/edits", "{", "application/json")->status, 400);
    auto extra = body;
    extra["bogus"] = 1;
    EXPECT_EQ(s.client->Post("/v1/edits", extra.dump(), "application/json")->status, 400);

    auto posted = s.client->Post("/v1/edits", body.dump(), "application/json");
    ASSERT_EQ(posted->status, 202) << posted->body;
    const std::string id = json::parse(posted->body)["id"];
    EXPECT_EQ(posted->get_header_value("Location"), "/v1/edits/" + id);
    std::vector<std::string> states;
    const auto job = s.wait_job(id, &states);
    ASSERT_EQ(job["state"], "done") << job.dump();
    EXPECT_TRUE(monotone(states));
    EXPECT_EQ(job["checkpoint_id"], ckpt);
    EXPECT_EQ(job["result"]["config_echo"]["checkpoint_id"], ckpt);
    EXPECT_TRUE(job["result"]["metrics"].contains("speaker_cosine"));
    EXPECT_EQ(job["request"]["word_span"], json::array({1, 3}));

    auto audio = s.client->Get("/v1/edits/" + id + "/audio");
    ASSERT_EQ(audio->status, 200);
    EXPECT_EQ(audio->get_header_value("Content-Type"), "audio/wav");
    EXPECT_EQ(sha(audio->body), job["result"]["audio_sha256"]);

    // The job reproduces the library call on the same checkpoint bit for bit.
    const auto bytes = encode_checkpoint(*f.model, nullptr, 0, "", nullptr);
    auto local = decode_checkpoint(bytes);
    const auto corpus = f.served_corpus();
    const StatisticsEmbeddingProvider provider;
    const BaselineVocoder vocoder;
    const auto direct = edit(edit_request_from_json(body), {*local.model, corpus, provider, vocoder, FrameSpec{}, ckpt});
    const auto wav = encode_wav(direct.audio);
    EXPECT_EQ(audio->body, std::string(wav.begin(), wav.end()));

    const auto jobs = s.get_json("/v1/edits");
    ASSERT_EQ(jobs["jobs"].size(), 1u);
    EXPECT_FALSE(jobs["jobs"][0].contains("result"));
}

TEST(Service, FailedJobsCarryTheStage) {
    const ServiceFixture f;
    LiveService s("tbve_svc_fail", f.toy);
    ASSERT_EQ(s.upload(f.utt(0))->status, 201);
    ASSERT_FALSE(s.activate(*f.model).empty());
    auto oov = s.client->Post("/v1/edits", f.edit_body(0, 1, 2, "zyzzyva").dump(), "application/json");
    ASSERT_EQ(oov->status, 202);
    const std::string id = json::parse(oov->body)["id"];
    const auto job = s.wait_job(id);
    ASSERT_EQ(job["state"], "failed");
    EXPECT_EQ(job["error"]["stage"], "plan_edit");
    EXPECT_TRUE(job["error"]["user_error"].get<bool>());
    EXPECT_EQ(s.client->Get("/v1/edits/" + id + "/audio")->status, 409);

    auto span = s.client->Post("/v1/edits", f.edit_body(0, 3, 40, "x").dump(), "application/json");
    EXPECT_EQ(s.wait_job(json::parse(span->body)["id"])["error"]["stage"], "plan_edit");
    auto mode = f.edit_body(0, 1, 2, f.word(0, 1));
    mode["embedding_mode"] = "speaker";
    auto m = s.client->Post("/v1/edits", mode.dump(), "application/json");
    EXPECT_EQ(s.wait_job(json::parse(m->body)["id"])["error"]["stage"], "conditioning");
}

TEST(Service, ConcurrentJobsOnOneRecordingAreIndependent) {
    const ServiceFixture f;
    LiveService s("tbve_svc_conc", f.toy, 2);
    ASSERT_EQ(s.upload(f.utt(0))->status, 201);
    const std::string ckpt = s.activate(*f.model);
    const auto a = f.edit_body(0, 1, 3, f.word(1, 0) + " " + f.word(1, 1), 1);
    const auto b = f.edit_body(0, 1, 2, f.word(2, 2), 2);
    const std::string ida = json::parse(s.client->Post("/v1/edits", a.dump(), "application/json")->body)["id"];
    const std::string idb = json::parse(s.client->Post("/v1/edits", b.dump(), "application/json")->body)["id"];
    std::vector<std::string> sa, sb;
    json ja, jb;
    std::thread ta([&] { ja = s.wait_job(ida, &sa); });
    std::thread tb([&] { jb = s.wait_job(idb, &sb); });
    ta.join();
    tb.join();
    ASSERT_EQ(ja["state"], "done");
    ASSERT_EQ(jb["state"], "done");
    EXPECT_TRUE(monotone(sa));
    EXPECT_TRUE(monotone(sb));
    EXPECT_NE(ja["result"]["audio_sha256"], jb["result"]["audio_sha256"]);

    // Each matches its own single-threaded library result.
    auto local = decode_checkpoint(encode_checkpoint(*f.model, nullptr, 0, "", nullptr));
    const auto corpus = f.served_corpus();
    const StatisticsEmbeddingProvider provider;
    const BaselineVocoder vocoder;
    const EditContext ctx{*local.model, corpus, provider, vocoder, FrameSpec{}, ckpt};
    for (const auto& [req, job] : {std::pair{a, ja}, std::pair{b, jb}}) {
        const auto wav = encode_wav(edit(edit_request_from_json(req), ctx).audio);
        EXPECT_EQ(job["result"]["audio_sha256"], io::sha256_hex(wav));
    }
}

TEST(Service, SynthesizeFromText) {
    const ServiceFixture f;
    LiveService s("tbve_svc_tts", f.toy);
    ASSERT_EQ(s.upload(f.utt(0))->status, 201);
    ASSERT_FALSE(s.activate(*f.model).empty());
    const json body{{"reference_recording", f.utt(0).record.id}, {"text", f.word(1, 0)}, {"seed", 3}};
    auto missing = body;
    missing["reference_recording"] = "nobody";
    EXPECT_EQ(s.client->Post("/v1/synthesize", missing.dump(), "application/json")->status, 404);

    std::vector<std::string> bodies;
    for (int i = 0; i < 2; ++i) {
        auto r = s.client->Post("/v1/synthesize", body.dump(), "application/json");
        ASSERT_EQ(r->status, 202);
        const std::string id = json::parse(r->body)["id"];
        const auto job = s.wait_job(id);
        ASSERT_EQ(job["state"], "done") << job.dump();
        EXPECT_EQ(job["kind"], "synthesize");
        bodies.push_back(s.client->Get("/v1/edits/" + id + "/audio")->body);
    }
    EXPECT_EQ(bodies[0], bodies[1]);
    const auto clip = decode_wav({reinterpret_cast<const std::uint8_t*>(bodies[0].data()), bodies[0].size()});
    EXPECT_GT(clip.size(), 0u);
    EXPECT_GT(rms(clip.samples), 0.0);
}

TEST(Service, StateSurvivesRestartAndStopDrainsRunningJobs) {
    const ServiceFixture f;
    std::string ckpt, done_id;
    std::vector<std::string> ids;
    fs::path dir;
    {
        LiveService s("tbve_svc_restart", f.toy);
        dir = s.dir;
        for (std::size_t i = 0; i < 3; ++i) ASSERT_EQ(s.upload(f.utt(i))->status, 201);
        ckpt = s.activate(*f.model);
        for (int k = 0; k < 4; ++k) {
            auto r = s.client->Post("/v1/edits", f.edit_body(k % 3, 1, 3, f.word(0, 1), k).dump(), "application/json");
            ids.push_back(json::parse(r->body)["id"]);
        }
        // Wait until the first job is running, then stop mid-flight.
        for (;;) {
            const std::string st = s.get_json("/v1/edits/" + ids[0])["state"];
            if (st != "queued") break;
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
        s.service->stop();
    }
    ServiceConfig cfg;
    cfg.data_dir = dir;
    cfg.port = 0;
    {
        Service inspect(cfg);
        httplib::Client c("127.0.0.1", inspect.start());
        const auto jobs = json::parse(c.Get("/v1/edits")->body)["jobs"];
        ASSERT_EQ(jobs.size(), 4u);
        // The job that was running when stop() came in was allowed to finish.
        EXPECT_EQ(jobs[0]["state"], "done") << jobs[0].dump();
        EXPECT_EQ(json::parse(c.Get("/v1/health")->body)["active_checkpoint"], ckpt);
        EXPECT_EQ(json::parse(c.Get("/v1/health")->body)["recordings"], 3);
        for (const auto& id : ids) {
            std::string state;
            for (int tries = 0; tries < 20000; ++tries) {
                state = json::parse(c.Get("/v1/edits/" + id)->body)["state"];
                if (state == "done" || state == "failed") break;
                std::this_thread::sleep_for(std::chrono::milliseconds(5));
            }
            EXPECT_EQ(state, "done") << id;
        }
    }
}
