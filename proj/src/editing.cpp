#include "tbve/editing.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "tbve/error.hpp"
#include "tbve/io.hpp"

namespace tbve {

using ag::Matrix;

std::string to_string(FadeShape s) { return s == FadeShape::linear ? "linear" : "raised_cosine"; }

FadeShape parse_fade_shape(std::string_view s) {
    if (s == "linear") return FadeShape::linear;
    if (s == "raised_cosine") return FadeShape::raised_cosine;
    throw InvalidInput("unknown fade shape '" + std::string(s) + "'");
}

void CrossfadeConfig::validate() const {
    if (!std::isfinite(fade_ms) || fade_ms < 0.0) throw InvalidInput("crossfade length must be >= 0 ms");
}

std::size_t CrossfadeConfig::fade_samples(int sample_rate) const {
    validate();
    return static_cast<std::size_t>(std::lround(fade_ms * 1e-3 * sample_rate));
}

double fade_gain(std::size_t k, std::size_t n, FadeShape shape) {
    // Sampled at bin centres so neither end reaches exactly 0 or 1.
    const double x = (static_cast<double>(k) + 0.5) / static_cast<double>(n);
    if (shape == FadeShape::linear) return x;
    return 0.5 - 0.5 * std::cos(std::numbers::pi * x);
}

nlohmann::json to_json(const EditRequest& r) {
    nlohmann::json j{{"utterance_id", r.utterance_id},
                     {"word_span", {r.word_begin, r.word_end}},
                     {"replacement_text", r.replacement_text},
                     {"crossfade_ms", r.crossfade.fade_ms},
                     {"crossfade_shape", to_string(r.crossfade.shape)},
                     {"seed", r.seed},
                     {"fuse_raw", r.fuse_raw}};
    if (!r.original_transcript.empty()) j["original_transcript"] = r.original_transcript;
    if (r.embedding_mode) j["embedding_mode"] = to_string(*r.embedding_mode);
    if (r.ref_mode) j["ref_mode"] = to_string(*r.ref_mode);
    if (r.replacement_durations) j["replacement_durations"] = *r.replacement_durations;
    if (r.reference_unedited_only) j["reference_unedited_only"] = true;
    return j;
}

EditRequest edit_request_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidInput("edit request must be a JSON object");
    EditRequest r;
    bool has_id = false, has_span = false;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "utterance_id") {
                r.utterance_id = value.get<std::string>();
                has_id = true;
            } else if (key == "word_span") {
                const auto span = value.get<std::vector<std::int64_t>>();
                if (span.size() != 2 || span[0] < 0 || span[1] < span[0])
                    throw InvalidInput("word_span must be [i, j] with 0 <= i <= j");
                r.word_begin = static_cast<std::size_t>(span[0]);
                r.word_end = static_cast<std::size_t>(span[1]);
                has_span = true;
            } else if (key == "replacement_text") r.replacement_text = value.get<std::string>();
            else if (key == "original_transcript") r.original_transcript = value.get<std::string>();
            else if (key == "embedding_mode") r.embedding_mode = parse_embedding_mode(value.get<std::string>());
            else if (key == "ref_mode") r.ref_mode = parse_ref_mode(value.get<std::string>());
            else if (key == "crossfade_ms") r.crossfade.fade_ms = value.get<double>();
            else if (key == "crossfade_shape") r.crossfade.shape = parse_fade_shape(value.get<std::string>());
            else if (key == "seed") r.seed = value.get<std::uint64_t>();
            else if (key == "fuse_raw") r.fuse_raw = value.get<bool>();
            else if (key == "reference_unedited_only") r.reference_unedited_only = value.get<bool>();
            else if (key == "replacement_durations") r.replacement_durations = value.get<std::vector<int>>();
            else throw InvalidInput("unknown edit request key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("bad edit request: ") + e.what());
    }
    if (!has_id) throw InvalidInput("edit request needs utterance_id");
    if (!has_span) throw InvalidInput("edit request needs word_span");
    r.crossfade.validate();
    return r;
}

namespace {

// Tokens [first, last) as a standalone sequence.
PhoneSequence slice_words(const PhoneSequence& s, std::size_t first, std::size_t last) {
    PhoneSequence out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const auto w = s.word_index[i];
        if (w < first || w >= last) continue;
        out.phones.push_back(s.phones[i]);
        out.word_index.push_back(w - first);
        out.is_word_boundary.push_back(s.is_word_boundary[i]);
    }
    out.words.assign(s.words.begin() + static_cast<std::ptrdiff_t>(first),
                     s.words.begin() + static_cast<std::ptrdiff_t>(last));
    return out;
}

std::size_t phone_position(const PhoneSequence& s, std::size_t word) {
    return word < s.word_count() ? s.phones_of_word(word).first : s.size();
}

}  // namespace

EditPlan plan_edit(const EditRequest& request, const PhoneSequence& phones, const WordAlignment& alignment,
                   const Lexicon& lexicon) {
    const std::size_t n = phones.word_count();
    if (request.word_begin > request.word_end || request.word_end > n)
        throw InvalidInput("word span [" + std::to_string(request.word_begin) + ", " +
                           std::to_string(request.word_end) + ") out of range for " + std::to_string(n) +
                           " tokens");
    if (alignment.phone_durations.size() != phones.size())
        throw AlignmentError("alignment does not cover the phone sequence");
    const PhoneSequence replacement = text_to_phones(request.replacement_text, lexicon);

    EditPlan plan;
    plan.original_phone_begin = phone_position(phones, request.word_begin);
    plan.original_phone_end = request.word_end > request.word_begin
                                  ? phones.phones_of_word(request.word_end - 1).second
                                  : plan.original_phone_begin;
    plan.original_region = alignment.frames_of_phones(plan.original_phone_begin, plan.original_phone_end);
    plan.no_op = request.word_begin == request.word_end && replacement.empty();

    plan.phones = concat(concat(slice_words(phones, 0, request.word_begin), replacement),
                         slice_words(phones, request.word_end, n));
    plan.replace_begin = plan.original_phone_begin;
    plan.replace_end = plan.replace_begin + replacement.size();

    const auto& d = alignment.phone_durations;
    plan.durations.assign(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(plan.original_phone_begin));
    plan.durations.insert(plan.durations.end(), replacement.size(), 0);
    plan.durations.insert(plan.durations.end(), d.begin() + static_cast<std::ptrdiff_t>(plan.original_phone_end),
                          d.end());
    plan.predicted.assign(plan.phones.size(), false);
    for (std::size_t i = plan.replace_begin; i < plan.replace_end; ++i) plan.predicted[i] = true;
    return plan;
}

Synthesis synthesize_edit(const EditPlan& plan, const ConditioningBundle& bundle, AcousticModel& model,
                          const VocoderFeatures& original, const std::optional<std::vector<int>>& forced_durations) {
    const std::size_t p = plan.phones.size();
    if (p == 0) throw InvalidInput("edit leaves no phones to synthesize");
    if (plan.durations.size() != p || plan.predicted.size() != p) throw InvalidInput("inconsistent edit plan");
    bundle.validate();
    if (bundle.embedding_mode != model.config().embedding_mode || bundle.ref_mode != model.config().ref_mode)
        throw InvalidInput("conditioning bundle does not match the model");

    const std::size_t a = plan.original_region.start, b = plan.original_region.end;
    const std::size_t t_orig = original.frames();
    const auto& d = plan.durations;
    const auto context_frames = [&](std::size_t first, std::size_t last) {
        return std::accumulate(d.begin() + static_cast<std::ptrdiff_t>(first),
                               d.begin() + static_cast<std::ptrdiff_t>(last), std::size_t{0});
    };
    if (context_frames(0, plan.replace_begin) != a || context_frames(plan.replace_end, p) != t_orig - b ||
        b > t_orig)
        throw AlignmentError("alignment/feature length mismatch");

    ag::NoGradGuard no_grad;
    const nn::Mode mode{};
    const auto encodings = model.encode_phones(plan.phones.phones, plan.predicted, mode);
    const auto variance = model.predict_variance(encodings, mode);

    Synthesis out;
    out.durations = d;
    const std::size_t r = plan.replacement_phone_count();
    if (forced_durations) {
        if (forced_durations->size() != r)
            throw InvalidInput("forced durations need one entry per replacement phone (" + std::to_string(r) + ")");
        for (std::size_t i = 0; i < r; ++i) {
            if ((*forced_durations)[i] < 0) throw InvalidInput("forced durations must be >= 0");
            out.durations[plan.replace_begin + i] = (*forced_durations)[i];
        }
    } else {
        // A phone that is spoken gets at least one frame.
        const auto q = quantize_durations(variance.log_duration.value());
        for (std::size_t i = plan.replace_begin; i < plan.replace_end; ++i) out.durations[i] = std::max(q[i], 1);
    }
    const std::size_t region_frames =
        std::accumulate(out.durations.begin() + static_cast<std::ptrdiff_t>(plan.replace_begin),
                        out.durations.begin() + static_cast<std::ptrdiff_t>(plan.replace_end), std::size_t{0});
    if (r > 0 && region_frames == 0) throw InvalidInput("empty plan region for a non-empty replacement");
    out.region = {a, a + region_frames};
    const std::size_t frames = a + region_frames + (t_orig - b);
    if (frames == 0) throw InvalidInput("edit leaves no frames to synthesize");

    // Ground-truth f0 for context phones, prediction for the replacement.
    const std::vector<int> prefix(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(plan.replace_begin));
    const std::vector<int> suffix(d.begin() + static_cast<std::ptrdiff_t>(plan.replace_end), d.end());
    auto f0 = phone_log_f0(original.slice({0, a}), prefix);
    for (std::size_t i = plan.replace_begin; i < plan.replace_end; ++i)
        f0.push_back(std::max(0.0, variance.log_f0.value()(static_cast<Eigen::Index>(i), 0)));
    const auto f0_suffix = phone_log_f0(original.slice({b, t_orig}), suffix);
    f0.insert(f0.end(), f0_suffix.begin(), f0_suffix.end());

    const Matrix source = model.to_model(original);
    auto& in = out.inputs;
    in.phone_ids = plan.phones.phones;
    in.phone_masked = plan.predicted;
    in.durations = out.durations;
    in.phone_log_f0 = std::move(f0);
    in.context = Matrix::Zero(static_cast<Eigen::Index>(frames), source.cols());
    in.context.topRows(static_cast<Eigen::Index>(a)) = source.topRows(static_cast<Eigen::Index>(a));
    in.context.bottomRows(static_cast<Eigen::Index>(t_orig - b)) = source.bottomRows(static_cast<Eigen::Index>(t_orig - b));
    in.frame_masked.assign(frames, false);
    for (std::size_t t = out.region.start; t < out.region.end; ++t) in.frame_masked[t] = true;
    in.conditioning.embedding = bundle.embedding;
    if (bundle.reference) in.conditioning.reference_encoding = bundle.reference->vector;

    const auto fwd = model.forward(in, mode);
    out.fine = model.from_model(fwd.decoded.fine.value());
    out.coarse = model.from_model(fwd.decoded.coarse.value());
    return out;
}

AudioClip splice(const AudioClip& original, const AudioClip& region, const SpliceCut& cut,
                 const CrossfadeConfig& cfg) {
    if (original.sample_rate != region.sample_rate) throw InvalidInput("splice clips differ in sample rate");
    const std::size_t n = original.size(), l = region.size();
    if (cut.a > cut.b || cut.b > n) throw InvalidInput("splice cut points outside the original clip");
    if (cut.begin > cut.end || cut.end > l) throw InvalidInput("splice cut points outside the region clip");
    const std::size_t f = cfg.fade_samples(original.sample_rate);
    const std::size_t left = cut.a == 0 ? 0 : f;
    const std::size_t right = cut.b == n ? 0 : f;
    if (left > cut.a || right > n - cut.b) throw InvalidInput("crossfade longer than the original segment");
    if (left > cut.begin || right > l - cut.end) throw InvalidInput("crossfade longer than the region margin");

    AudioClip out;
    out.sample_rate = original.sample_rate;
    out.samples.reserve(cut.a + (cut.end - cut.begin) + (n - cut.b));
    const auto& o = original.samples;
    const auto& s = region.samples;
    out.samples.insert(out.samples.end(), o.begin(), o.begin() + static_cast<std::ptrdiff_t>(cut.a - left));
    for (std::size_t k = 0; k < left; ++k) {
        const double g = fade_gain(k, left, cfg.shape);
        out.samples.push_back(static_cast<float>((1.0 - g) * o[cut.a - left + k] + g * s[cut.begin - left + k]));
    }
    out.samples.insert(out.samples.end(), s.begin() + static_cast<std::ptrdiff_t>(cut.begin),
                       s.begin() + static_cast<std::ptrdiff_t>(cut.end));
    for (std::size_t k = 0; k < right; ++k) {
        const double g = fade_gain(k, right, cfg.shape);
        out.samples.push_back(static_cast<float>((1.0 - g) * s[cut.end + k] + g * o[cut.b + k]));
    }
    out.samples.insert(out.samples.end(), o.begin() + static_cast<std::ptrdiff_t>(cut.b + right), o.end());
    return out;
}

namespace {

nlohmann::json vector_json(const EmbeddingVector& v) { return std::vector<float>(v.begin(), v.end()); }

nlohmann::json bundle_json(const ConditioningBundle& b) {
    nlohmann::json j{{"embedding_mode", to_string(b.embedding_mode)}, {"ref_mode", to_string(b.ref_mode)}};
    if (b.embedding) j["embedding"] = vector_json(*b.embedding);
    if (b.reference) j["reference"] = vector_json(b.reference->vector);
    return j;
}

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const InvalidInput& e) {
        throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

}  // namespace

nlohmann::json sidecar(const EditResult& r) {
    return {{"utterance_id", r.utterance_id},
            {"boundaries_samples", {r.boundary_begin, r.boundary_end}},
            {"original_region_frames", {r.original_region.start, r.original_region.end}},
            {"durations", r.durations},
            {"metrics", to_json(r.metrics)},
            {"conditioning", bundle_json(r.bundle)},
            {"config_echo", r.config_echo}};
}

void write_edit_result(const std::filesystem::path& wav_path, const EditResult& r) {
    const auto wav = encode_wav(r.audio);
    io::write_file_atomic(wav_path, wav);
    auto json_path = wav_path;
    json_path.replace_extension(".json");
    io::write_text_atomic(json_path, sidecar(r).dump(2) + "\n");
}

ConditioningBundle condition_on(const EditContext& ctx, const CorpusEntry& entry, FrameRange reference_exclude) {
    ConditioningBundle b;
    b.embedding_mode = ctx.model.config().embedding_mode;
    b.ref_mode = ctx.model.config().ref_mode;
    if (b.embedding_mode == EmbeddingMode::utterance)
        b.embedding = embed_utterance(entry.features, ctx.provider).vector;
    else if (b.embedding_mode == EmbeddingMode::speaker)
        b.embedding = ctx.corpus.speaker_embedding(entry.record.speaker_id).vector;
    if (b.ref_mode != RefMode::none) {
        const auto& f = entry.features;
        if (reference_exclude.empty()) {
            b.reference = ctx.model.reference_encode(f, false, nullptr);
        } else {
            if (reference_exclude.end > f.frames()) throw InvalidInput("reference exclusion outside the recording");
            auto kept = f.slice({0, reference_exclude.start});
            kept.append(f.slice({reference_exclude.end, f.frames()}));
            if (kept.empty()) throw InvalidInput("no unedited frames left for the reference encoder");
            b.reference = ctx.model.reference_encode(kept, false, nullptr);
        }
    }
    return b;
}

EditResult edit(const EditRequest& request, const EditContext& ctx) {
    const int hop = ctx.spec.hop;
    const auto& entry = stage("plan_edit", [&]() -> const CorpusEntry& {
        const auto& e = ctx.corpus.at(request.utterance_id);
        if (!request.original_transcript.empty() && request.original_transcript != e.record.text)
            throw InvalidInput("original transcript does not match recording '" + request.utterance_id + "'");
        return e;
    });
    const EditPlan plan =
        stage("plan_edit", [&] { return plan_edit(request, entry.phones, entry.alignment, ctx.corpus.lexicon()); });

    const ConditioningBundle bundle = stage("conditioning", [&] {
        const auto& cfg = ctx.model.config();
        if (request.embedding_mode && *request.embedding_mode != cfg.embedding_mode)
            throw InvalidInput("request embedding_mode " + to_string(*request.embedding_mode) +
                               " does not match the checkpoint (" + to_string(cfg.embedding_mode) + ")");
        if (request.ref_mode && *request.ref_mode != cfg.ref_mode)
            throw InvalidInput("request ref_mode " + to_string(*request.ref_mode) +
                               " does not match the checkpoint (" + to_string(cfg.ref_mode) + ")");
        return condition_on(ctx, entry, request.reference_unedited_only ? plan.original_region : FrameRange{});
    });

    EditResult result;
    result.utterance_id = request.utterance_id;
    result.original_region = plan.original_region;
    result.bundle = bundle;
    result.config_echo = {{"request", to_json(request)},
                          {"checkpoint_id", ctx.checkpoint_id},
                          {"embedding_mode", to_string(bundle.embedding_mode)},
                          {"ref_mode", to_string(bundle.ref_mode)},
                          {"provider", ctx.provider.name()},
                          {"hop", hop}};

    const std::size_t t_orig = entry.features.frames();
    // Frame index -> sample index in the clip being fused into. The
    // vocoder centres frame t at t * hop + hop / 2 and the analysis window
    // at t * hop + window / 2, so raw audio is shifted by (window - hop) / 2.
    const std::size_t shift = request.fuse_raw ? static_cast<std::size_t>((ctx.spec.window - hop) / 2) : 0;
    AudioClip base = stage("vocode", [&] {
        if (!request.fuse_raw) return ctx.vocoder.synthesize(entry.features, request.seed);
        AudioClip raw = read_wav(entry.record.audio_path);
        if (raw.sample_rate != ctx.spec.sample_rate) throw InvalidInput("recording sample rate differs from the model");
        return raw;
    });
    const auto to_sample = [&](std::size_t frame) -> std::size_t {
        if (frame == 0) return 0;
        if (frame == t_orig) return base.size();
        return frame * static_cast<std::size_t>(hop) + shift;
    };

    if (plan.no_op) {
        result.audio = std::move(base);
        result.boundary_begin = result.boundary_end = to_sample(plan.original_region.start);
        result.durations = entry.alignment.phone_durations;
        return result;
    }

    const Synthesis synth = stage("synthesize", [&] {
        return synthesize_edit(plan, bundle, ctx.model, entry.features, request.replacement_durations);
    });
    result.durations = synth.durations;
    result.region_fine = synth.fine.slice(synth.region);
    result.region_coarse = synth.coarse.slice(synth.region);

    const AudioClip generated = stage("vocode", [&] { return ctx.vocoder.synthesize(synth.fine, request.seed); });
    result.audio = stage("splice", [&] {
        SpliceCut cut;
        cut.a = to_sample(plan.original_region.start);
        cut.b = to_sample(plan.original_region.end);
        // Extraction uses the synthesis durations: the replacement occupies
        // exactly synth.region in the generated utterance.
        cut.begin = synth.region.start * static_cast<std::size_t>(hop);
        cut.end = synth.region.end * static_cast<std::size_t>(hop);
        result.boundary_begin = cut.a;
        result.boundary_end = cut.a + (cut.end - cut.begin);
        return splice(base, generated, cut, request.crossfade);
    });
    result.metrics = stage("evaluate", [&] { return evaluate_edit(result, ctx.corpus, ctx.provider); });
    return result;
}

nlohmann::json to_json(const TtsRequest& r) {
    nlohmann::json j{{"reference_recording", r.reference_id}, {"text", r.text}, {"seed", r.seed}};
    if (r.embedding_mode) j["embedding_mode"] = to_string(*r.embedding_mode);
    if (r.ref_mode) j["ref_mode"] = to_string(*r.ref_mode);
    return j;
}

TtsRequest tts_request_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidInput("synthesis request must be a JSON object");
    TtsRequest r;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "reference_recording") r.reference_id = value.get<std::string>();
            else if (key == "text") r.text = value.get<std::string>();
            else if (key == "seed") r.seed = value.get<std::uint64_t>();
            else if (key == "embedding_mode") r.embedding_mode = parse_embedding_mode(value.get<std::string>());
            else if (key == "ref_mode") r.ref_mode = parse_ref_mode(value.get<std::string>());
            else throw InvalidInput("unknown synthesis request key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed synthesis request: ") + e.what());
    }
    if (r.reference_id.empty()) throw InvalidInput("synthesis request needs reference_recording");
    if (r.text.empty()) throw InvalidInput("synthesis request needs text");
    return r;
}

nlohmann::json sidecar(const TtsResult& r, const Lexicon& lexicon) {
    std::vector<std::string> names;
    for (auto id : r.phones.phones) names.push_back(lexicon.name(id));
    return {{"phones", names},
            {"words", r.phones.words},
            {"durations", r.durations},
            {"samples", r.audio.size()},
            {"conditioning", bundle_json(r.bundle)},
            {"config_echo", r.config_echo}};
}

TtsResult synthesize_text(const TtsRequest& request, const EditContext& ctx) {
    const auto& entry = stage("plan_edit", [&]() -> const CorpusEntry& { return ctx.corpus.at(request.reference_id); });
    const EditPlan plan = stage("plan_edit", [&] {
        EditPlan p;
        p.phones = text_to_phones(request.text, ctx.corpus.lexicon());
        if (p.phones.empty()) throw InvalidInput("synthesis text has no phones");
        p.durations.assign(p.phones.size(), 0);
        p.predicted.assign(p.phones.size(), true);
        p.replace_end = p.phones.size();
        // Nothing of the reference survives as context.
        p.original_region = {0, entry.features.frames()};
        return p;
    });
    TtsResult result;
    result.phones = plan.phones;
    result.bundle = stage("conditioning", [&] {
        const auto& cfg = ctx.model.config();
        if (request.embedding_mode && *request.embedding_mode != cfg.embedding_mode)
            throw InvalidInput("request embedding_mode does not match the checkpoint (" + to_string(cfg.embedding_mode) + ")");
        if (request.ref_mode && *request.ref_mode != cfg.ref_mode)
            throw InvalidInput("request ref_mode does not match the checkpoint (" + to_string(cfg.ref_mode) + ")");
        return condition_on(ctx, entry);
    });
    result.config_echo = {{"request", to_json(request)},
                          {"checkpoint_id", ctx.checkpoint_id},
                          {"embedding_mode", to_string(result.bundle.embedding_mode)},
                          {"ref_mode", to_string(result.bundle.ref_mode)},
                          {"provider", ctx.provider.name()},
                          {"hop", ctx.spec.hop}};
    const Synthesis synth = stage("synthesize", [&] { return synthesize_edit(plan, result.bundle, ctx.model, entry.features); });
    result.durations = synth.durations;
    result.audio = stage("vocode", [&] { return ctx.vocoder.synthesize(synth.fine, request.seed); });
    return result;
}

}  // namespace tbve
