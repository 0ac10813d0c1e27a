#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"
#include "tbve/editing.hpp"
#include "tbve/error.hpp"
#include "tbve/io.hpp"

using namespace tbve;

namespace {

struct Fixture {
    ToyCorpus toy;
    Corpus corpus;
    StatisticsEmbeddingProvider provider;
    BaselineVocoder vocoder;
    std::unique_ptr<AcousticModel> model;

    explicit Fixture(EmbeddingMode e = EmbeddingMode::none, RefMode r = RefMode::none) {
        ToyCorpusOptions o;
        o.utterances = 3;
        o.min_words = o.max_words = 4;
        o.seed = 21;
        toy = make_toy_corpus(o);
        corpus = fixtures::corpus_of(toy);
        model = std::make_unique<AcousticModel>(fixtures::small_config(toy.lexicon, e, r));
        const auto set = make_training_set(corpus);
        model->set_normalization(fixtures::features_of(set));
    }
    EditContext context() { return {*model, corpus, provider, vocoder, FrameSpec{}, "test"}; }
    const CorpusEntry& entry() const { return corpus.entries().begin()->second; }
    EditRequest request(std::size_t i, std::size_t j, std::string text) const {
        EditRequest r;
        r.utterance_id = entry().record.id;
        r.word_begin = i;
        r.word_end = j;
        r.replacement_text = std::move(text);
        return r;
    }
    // Text of tokens [i, j) of the entry.
    std::string words(std::size_t i, std::size_t j) const {
        std::string s;
        for (std::size_t w = i; w < j; ++w) s += (s.empty() ? "" : " ") + entry().phones.words[w];
        return s;
    }
    std::vector<int> durations(std::size_t i, std::size_t j) const {
        const auto& e = entry();
        const auto first = e.phones.phones_of_word(i).first, last = e.phones.phones_of_word(j - 1).second;
        return {e.alignment.phone_durations.begin() + static_cast<std::ptrdiff_t>(first),
                e.alignment.phone_durations.begin() + static_cast<std::ptrdiff_t>(last)};
    }
};

AudioClip ramp(std::size_t n, float scale) {
    AudioClip c;
    for (std::size_t i = 0; i < n; ++i) c.samples.push_back(scale * std::sin(0.01f * static_cast<float>(i)));
    return c;
}

AudioClip constant(std::size_t n, float v) {
    AudioClip c;
    c.samples.assign(n, v);
    return c;
}

}  // namespace

TEST(Crossfade, GainsAreComplementaryForBothShapes) {
    for (auto shape : {FadeShape::linear, FadeShape::raised_cosine})
        for (std::size_t n : {1u, 2u, 7u, 160u}) {
            for (std::size_t k = 0; k < n; ++k) {
                const double g = fade_gain(k, n, shape);
                EXPECT_GT(g, 0.0);
                EXPECT_LT(g, 1.0);
                // Mirror symmetry: the fade-out at k equals the fade-in at n-1-k.
                EXPECT_NEAR(g + fade_gain(n - 1 - k, n, shape), 1.0, 1e-12);
                if (k) EXPECT_GT(g, fade_gain(k - 1, n, shape));
            }
        }
    EXPECT_EQ(CrossfadeConfig{}.fade_samples(16000), 160u);
    EXPECT_THROW((CrossfadeConfig{-1.0}).validate(), InvalidInput);
}

TEST(Splice, EqualDcSignalsStayConstantThroughTheFades) {
    for (auto shape : {FadeShape::linear, FadeShape::raised_cosine}) {
        const auto original = constant(4000, 1.0f), region = constant(3000, 1.0f);
        const auto out = splice(original, region, {1000, 2000, 800, 2200}, {10.0, shape});
        ASSERT_EQ(out.size(), 4000u - 1000u + 1400u);
        for (float s : out.samples) EXPECT_NEAR(s, 1.0f, 1e-7);
    }
}

TEST(Splice, ZeroFadeIsHardConcatenation) {
    const auto original = ramp(1000, 0.5f), region = ramp(600, -0.25f);
    const auto out = splice(original, region, {300, 500, 100, 400}, {0.0});
    ASSERT_EQ(out.size(), 300u + 300u + 500u);
    for (std::size_t i = 0; i < 300; ++i) EXPECT_EQ(out.samples[i], original.samples[i]);
    for (std::size_t i = 0; i < 300; ++i) EXPECT_EQ(out.samples[300 + i], region.samples[100 + i]);
    for (std::size_t i = 0; i < 500; ++i) EXPECT_EQ(out.samples[600 + i], original.samples[500 + i]);
}

TEST(Splice, ResplicingExtractedAudioIsIdentity) {
    const auto original = ramp(5000, 0.7f);
    for (auto shape : {FadeShape::linear, FadeShape::raised_cosine}) {
        const auto out = splice(original, original, {1200, 3100, 1200, 3100}, {10.0, shape});
        ASSERT_EQ(out.size(), original.size());
        for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.samples[i], original.samples[i], 1e-6);
    }
}

TEST(Splice, LocalityAndEdgeRules) {
    const auto original = ramp(4000, 0.6f), region = ramp(4000, -0.6f);
    const CrossfadeConfig cfg{10.0, FadeShape::raised_cosine};
    const auto out = splice(original, region, {1500, 2500, 1500, 2500}, cfg);
    for (std::size_t i = 0; i < out.size(); ++i)
        if (i < 1500 - 160 || i >= 2500 + 160) EXPECT_EQ(out.samples[i], original.samples[i]) << i;
    // Utterance edges get no fade.
    const auto start = splice(original, region, {0, 800, 0, 800}, cfg);
    for (std::size_t i = 0; i < 800; ++i) EXPECT_EQ(start.samples[i], region.samples[i]);
    const auto end = splice(original, region, {3500, 4000, 3500, 4000}, cfg);
    for (std::size_t i = 3500; i < 4000; ++i) EXPECT_EQ(end.samples[i], region.samples[i]);
    // Segments shorter than the fade.
    EXPECT_THROW(splice(original, region, {100, 2000, 1000, 2000}, cfg), InvalidInput);
    EXPECT_THROW(splice(original, region, {1000, 3900, 1000, 2000}, cfg), InvalidInput);
    EXPECT_THROW(splice(original, region, {1000, 2000, 100, 2000}, cfg), InvalidInput);
    EXPECT_THROW(splice(original, region, {1000, 2000, 1000, 3950}, cfg), InvalidInput);
    EXPECT_THROW(splice(original, region, {2000, 1000, 1000, 2000}, cfg), InvalidInput);
}

TEST(PlanEdit, NoOpAndFullWordCases) {
    Fixture f;
    const auto& e = f.entry();
    const auto noop = plan_edit(f.request(2, 2, ""), e.phones, e.alignment, f.corpus.lexicon());
    EXPECT_TRUE(noop.no_op);
    EXPECT_EQ(noop.replacement_phone_count(), 0u);
    EXPECT_TRUE(noop.original_region.empty());
    EXPECT_EQ(noop.phones, e.phones);

    const auto lex = f.corpus.lexicon();
    const auto one = text_to_phones("MOON", lex);
    const WordAlignment al = ingest_alignment(std::vector<int>{3, 7, 4}, 14, one);
    EditRequest r;
    r.word_begin = 0;
    r.word_end = 1;
    r.replacement_text = "SEAT";
    const auto full = plan_edit(r, one, al, lex);
    EXPECT_EQ(full.original_region, (FrameRange{0, 14}));
    EXPECT_EQ(full.predicted, std::vector<bool>(3, true));
    EXPECT_EQ(full.durations, std::vector<int>(3, 0));
}

TEST(PlanEdit, ReplacementKeepsContextDurations) {
    Fixture f;
    const auto& e = f.entry();
    ASSERT_GE(e.phones.word_count(), 4u);
    const auto plan = plan_edit(f.request(1, 3, "shoe ten calm"), e.phones, e.alignment, f.corpus.lexicon());
    const auto [b0, b1] = e.phones.phones_of_word(1);
    const auto e1 = e.phones.phones_of_word(2).second;
    const auto repl = text_to_phones("SHOE TEN CALM", f.corpus.lexicon());

    // Hand-built expectation.
    std::vector<int> expected(e.alignment.phone_durations.begin(), e.alignment.phone_durations.begin() + b0);
    expected.insert(expected.end(), repl.size(), 0);
    expected.insert(expected.end(), e.alignment.phone_durations.begin() + e1, e.alignment.phone_durations.end());
    EXPECT_EQ(plan.durations, expected);
    EXPECT_EQ(plan.replace_begin, b0);
    EXPECT_EQ(plan.replace_end, b0 + repl.size());
    for (std::size_t i = 0; i < plan.phones.size(); ++i)
        EXPECT_EQ(plan.predicted[i], i >= plan.replace_begin && i < plan.replace_end);
    EXPECT_EQ(plan.original_region, e.alignment.frames_of_phones(b0, e1));
    EXPECT_EQ(plan.phones.word_count(), e.phones.word_count() + 1);
    EXPECT_EQ(plan.phones.words[1], "SHOE");
    EXPECT_EQ(plan.phones.words[4], e.phones.words[3]);
    (void)b1;
}

TEST(PlanEdit, Errors) {
    Fixture f;
    const auto& e = f.entry();
    const auto& lex = f.corpus.lexicon();
    EXPECT_THROW(plan_edit(f.request(0, 1, "zebra"), e.phones, e.alignment, lex), OovError);
    EXPECT_THROW(plan_edit(f.request(0, 99, "moon"), e.phones, e.alignment, lex), InvalidInput);
    EXPECT_THROW(plan_edit(f.request(3, 2, "moon"), e.phones, e.alignment, lex), InvalidInput);
    const auto del = plan_edit(f.request(1, 2, ""), e.phones, e.alignment, lex);
    EXPECT_FALSE(del.no_op);
    EXPECT_EQ(del.replacement_phone_count(), 0u);
    EXPECT_EQ(del.phones.word_count(), e.phones.word_count() - 1);
    const auto ins = plan_edit(f.request(1, 1, "moon"), e.phones, e.alignment, lex);
    EXPECT_TRUE(ins.original_region.empty());
    EXPECT_EQ(ins.replacement_phone_count(), 3u);
}

TEST(SynthesizeEdit, SelfEditConservesFramesAndLeaksNoContext) {
    Fixture f;
    const auto& e = f.entry();
    const auto plan = plan_edit(f.request(1, 3, f.words(1, 3)), e.phones, e.alignment, f.corpus.lexicon());
    const auto bundle = condition_on(f.context(), e);
    const auto s = synthesize_edit(plan, bundle, *f.model, e.features, f.durations(1, 3));
    EXPECT_EQ(s.fine.frames(), e.features.frames());
    EXPECT_EQ(s.durations, e.alignment.phone_durations);
    EXPECT_EQ(s.region, plan.original_region);

    const auto source = f.model->to_model(e.features);
    for (Eigen::Index t = 0; t < source.rows(); ++t) {
        if (s.region.contains(static_cast<std::size_t>(t))) {
            EXPECT_TRUE(s.inputs.context.row(t).isZero(0.0));
            EXPECT_TRUE(s.inputs.frame_masked[static_cast<std::size_t>(t)]);
        } else {
            EXPECT_EQ(s.inputs.context.row(t), source.row(t));
        }
    }
    // The decoder really sees those columns.
    ag::NoGradGuard g;
    const auto out = f.model->forward(s.inputs, {});
    const auto l = f.model->layout();
    EXPECT_EQ(out.decoder_input.value().middleCols(l.context, 19), s.inputs.context);
    EXPECT_EQ(f.model->from_model(out.decoded.fine.value()), s.fine);
}

TEST(SynthesizeEdit, FrameBudgetUsesPredictedReplacementDurations) {
    Fixture f;
    const auto& e = f.entry();
    const auto plan = plan_edit(f.request(1, 2, "moon"), e.phones, e.alignment, f.corpus.lexicon());
    const auto bundle = condition_on(f.context(), e);
    const auto s = synthesize_edit(plan, bundle, *f.model, e.features);
    std::size_t context = 0, replaced = 0;
    for (std::size_t i = 0; i < plan.phones.size(); ++i) (plan.predicted[i] ? replaced : context) += s.durations[i];
    EXPECT_EQ(context, e.features.frames() - plan.original_region.size());
    EXPECT_EQ(s.fine.frames(), context + replaced);
    EXPECT_EQ(s.region.size(), replaced);

    EXPECT_THROW(synthesize_edit(plan, bundle, *f.model, e.features, std::vector<int>{0, 0, 0}), InvalidInput);
    EXPECT_THROW(synthesize_edit(plan, bundle, *f.model, e.features, std::vector<int>{1, 2}), InvalidInput);
}

TEST(SynthesizeEdit, UtteranceEmbeddingComesFromTheOriginal) {
    Fixture f(EmbeddingMode::utterance, RefMode::standard);
    const auto& e = f.entry();
    const auto bundle = condition_on(f.context(), e);
    ASSERT_TRUE(bundle.embedding.has_value());
    EXPECT_EQ(*bundle.embedding, embed_utterance(e.features, f.provider).vector);
    ASSERT_TRUE(bundle.reference.has_value());
    EXPECT_EQ(bundle.reference->vector, f.model->reference_encode(e.features, false, nullptr).vector);

    Fixture g(EmbeddingMode::speaker, RefMode::none);
    const auto sb = condition_on(g.context(), g.entry());
    EXPECT_EQ(*sb.embedding, g.corpus.speaker_embedding(g.entry().record.speaker_id).vector);
    EXPECT_FALSE(sb.reference.has_value());
}

TEST(SynthesizeEdit, ReferenceCanSkipTheReplacedWords) {
    Fixture f(EmbeddingMode::none, RefMode::variational);
    const auto& e = f.entry();
    auto r = f.request(1, 3, "moon calm");
    r.reference_unedited_only = true;
    const auto plan = plan_edit(r, e.phones, e.alignment, f.corpus.lexicon());
    auto kept = e.features.slice({0, plan.original_region.start});
    kept.append(e.features.slice({plan.original_region.end, e.features.frames()}));
    const auto result = edit(r, f.context());
    ASSERT_TRUE(result.bundle.reference.has_value());
    EXPECT_EQ(result.bundle.reference->vector, f.model->reference_encode(kept, false, nullptr).vector);
    EXPECT_NE(result.bundle.reference->vector, f.model->reference_encode(e.features, false, nullptr).vector);
    EXPECT_EQ(edit_request_from_json(to_json(r)).reference_unedited_only, true);

    // An insertion removes nothing, so the full utterance is used.
    EXPECT_EQ(condition_on(f.context(), e, {4, 4}).reference->vector, condition_on(f.context(), e).reference->vector);
    EXPECT_THROW(condition_on(f.context(), e, {0, e.features.frames()}), InvalidInput);
}

TEST(Edit, NoOpReturnsVocodedOriginalBitExactly) {
    Fixture f;
    auto r = f.request(2, 2, "");
    r.seed = 77;
    const auto result = edit(r, f.context());
    EXPECT_EQ(result.audio.samples, f.vocoder.synthesize(f.entry().features, 77).samples);
    EXPECT_EQ(result.boundary_begin, result.boundary_end);
}

TEST(Edit, TwoWordReplacementShapeAndDeterminism) {
    Fixture f;
    auto r = f.request(1, 3, "moon calm");
    r.seed = 5;
    const auto a = edit(r, f.context());
    const auto b = edit(r, f.context());
    EXPECT_EQ(a.audio.samples, b.audio.samples);
    EXPECT_LT(a.boundary_begin, a.boundary_end);
    EXPECT_LE(a.boundary_end, a.audio.size());
    const std::size_t hop = 200;
    const std::size_t vocoded = f.entry().features.frames() * hop;
    EXPECT_EQ(a.audio.size(), vocoded - a.original_region.size() * hop + a.region_fine.frames() * hop);
    EXPECT_EQ(a.boundary_end - a.boundary_begin, a.region_fine.frames() * hop);
    EXPECT_EQ(a.region_coarse.frames(), a.region_fine.frames());
    EXPECT_TRUE(a.metrics.speaker_cosine.has_value());
    for (float s : a.audio.samples) ASSERT_TRUE(std::isfinite(s));

    // Splice locality against the vocoded original.
    const auto base = f.vocoder.synthesize(f.entry().features, 5);
    const std::size_t fade = 160, a0 = a.original_region.start * hop, b0 = a.original_region.end * hop;
    for (std::size_t i = 0; i + fade < a0; ++i) ASSERT_EQ(a.audio.samples[i], base.samples[i]);
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(a.boundary_end) - static_cast<std::ptrdiff_t>(b0);
    for (std::size_t i = b0 + fade; i < base.size(); ++i)
        ASSERT_EQ(a.audio.samples[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + shift)], base.samples[i]);
}

TEST(Edit, SelfEditWithForcedDurationsHasMetrics) {
    Fixture f;
    auto r = f.request(1, 3, f.words(1, 3));
    r.replacement_durations = f.durations(1, 3);
    const auto res = edit(r, f.context());
    EXPECT_EQ(res.audio.size(), f.entry().features.frames() * 200);
    ASSERT_TRUE(res.metrics.mcd_db.has_value());
    EXPECT_TRUE(std::isfinite(*res.metrics.mcd_db));
    EXPECT_TRUE(res.metrics.vuv_error_rate.has_value());
    EXPECT_TRUE(res.metrics.boundary_discontinuity.has_value());
}

TEST(Edit, DeletionAndInsertionUseTheSamePath) {
    Fixture f;
    const auto del = edit(f.request(1, 2, ""), f.context());
    EXPECT_EQ(del.boundary_begin, del.boundary_end);
    EXPECT_EQ(del.audio.size(), (f.entry().features.frames() - del.original_region.size()) * 200);
    EXPECT_FALSE(del.metrics.mcd_db.has_value());
    const auto ins = edit(f.request(2, 2, "knee"), f.context());
    EXPECT_GT(ins.audio.size(), f.entry().features.frames() * 200);
}

TEST(Edit, ErrorsAreTaggedWithTheirStage) {
    Fixture f;
    auto expect_stage = [&](const EditRequest& r, const std::string& stage, bool user) {
        try {
            edit(r, f.context());
            ADD_FAILURE() << "expected " << stage;
        } catch (const StageError& e) {
            EXPECT_EQ(e.stage(), stage);
            EXPECT_EQ(e.user_error(), user);
        }
    };
    expect_stage(f.request(0, 1, "zebra"), "plan_edit", true);
    auto unknown = f.request(0, 1, "moon");
    unknown.utterance_id = "nobody";
    expect_stage(unknown, "plan_edit", true);
    auto modes = f.request(0, 1, "moon");
    modes.embedding_mode = EmbeddingMode::utterance;
    expect_stage(modes, "conditioning", true);
    auto transcript = f.request(0, 1, "moon");
    transcript.original_transcript = "something else";
    expect_stage(transcript, "plan_edit", true);
    auto fade = f.request(1, 2, "moon");
    fade.crossfade.fade_ms = 5000;
    expect_stage(fade, "splice", true);
}

TEST(Edit, RawFusionUsesTheRecording) {
    Fixture f;
    const auto dir = std::filesystem::temp_directory_path() / "tbve_raw_fusion";
    std::filesystem::create_directories(dir);
    auto entry = f.entry();
    const auto& u = *std::find_if(f.toy.utterances.begin(), f.toy.utterances.end(),
                                  [&](const ToyUtterance& t) { return t.record.id == entry.record.id; });
    entry.record.audio_path = (dir / "raw.wav").string();
    write_wav(entry.record.audio_path, u.audio);
    f.corpus.add(entry);
    auto r = f.request(2, 2, "");
    r.fuse_raw = true;
    const auto noop = edit(r, f.context());
    EXPECT_EQ(noop.audio.samples, read_wav(entry.record.audio_path).samples);
    r = f.request(1, 2, "moon");
    r.fuse_raw = true;
    const auto res = edit(r, f.context());
    const std::size_t a = res.original_region.start * 200 + 300;
    for (std::size_t i = 0; i + 160 < a; ++i) ASSERT_EQ(res.audio.samples[i], noop.audio.samples[i]);
}

TEST(EditRequest, JsonRoundTripAndValidation) {
    const auto j = nlohmann::json::parse(R"({"utterance_id": "u1", "word_span": [1, 3],
        "replacement_text": "moon calm", "embedding_mode": "utterance", "ref_mode": "variational",
        "crossfade_ms": 5, "seed": 9})");
    const auto r = edit_request_from_json(j);
    EXPECT_EQ(r.word_begin, 1u);
    EXPECT_EQ(r.word_end, 3u);
    EXPECT_EQ(*r.embedding_mode, EmbeddingMode::utterance);
    EXPECT_EQ(*r.ref_mode, RefMode::variational);
    EXPECT_EQ(r.crossfade.fade_ms, 5.0);
    EXPECT_EQ(r.crossfade.shape, FadeShape::raised_cosine);
    EXPECT_EQ(to_json(edit_request_from_json(to_json(r))), to_json(r));
    EXPECT_THROW(edit_request_from_json({{"utterance_id", "u"}, {"word_span", {2, 1}}}), InvalidInput);
    EXPECT_THROW(edit_request_from_json({{"utterance_id", "u"}}), InvalidInput);
    EXPECT_THROW(edit_request_from_json({{"utterance_id", "u"}, {"word_span", {0, 1}}, {"extra", 1}}), InvalidInput);
    EXPECT_THROW(edit_request_from_json({{"utterance_id", "u"}, {"word_span", {0, 1}}, {"crossfade_ms", -2}}),
                 InvalidInput);
}

TEST(EditResult, SidecarCarriesTheContract) {
    Fixture f;
    const auto res = edit(f.request(1, 2, "moon"), f.context());
    const auto dir = std::filesystem::temp_directory_path() / "tbve_sidecar";
    std::filesystem::create_directories(dir);
    write_edit_result(dir / "edit.wav", res);
    EXPECT_EQ(read_wav(dir / "edit.wav").samples.size(), res.audio.size());
    const auto bytes = io::read_file(dir / "edit.json");
    const auto j = nlohmann::json::parse(std::string(bytes.begin(), bytes.end()));
    EXPECT_EQ(j["boundaries_samples"][0], res.boundary_begin);
    EXPECT_EQ(j["boundaries_samples"][1], res.boundary_end);
    EXPECT_EQ(j["durations"].get<std::vector<int>>(), res.durations);
    EXPECT_EQ(region_metrics_from_json(j["metrics"]), res.metrics);
    EXPECT_EQ(j["config_echo"]["checkpoint_id"], "test");
    EXPECT_EQ(j["config_echo"]["request"]["replacement_text"], "moon");
}
