#include "tbve/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dsp.hpp"
#include "tbve/corpus.hpp"
#include "tbve/editing.hpp"
#include "tbve/error.hpp"

namespace tbve {

namespace {

constexpr std::pair<const char*, std::optional<double> RegionMetrics::*> kFields[] = {
    {"mcd_db", &RegionMetrics::mcd_db},
    {"f0_rmse_hz", &RegionMetrics::f0_rmse_hz},
    {"vuv_error_rate", &RegionMetrics::vuv_error_rate},
    {"speaker_cosine", &RegionMetrics::speaker_cosine},
    {"boundary_discontinuity", &RegionMetrics::boundary_discontinuity},
};

void require_same_length(const VocoderFeatures& a, const VocoderFeatures& b) {
    if (a.frames() != b.frames())
        throw InvalidInput("regions differ in length (" + std::to_string(a.frames()) + " vs " +
                           std::to_string(b.frames()) + " frames)");
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

nlohmann::json to_json(const RegionMetrics& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, field] : kFields) j[name] = optional_json(m.*field);
    return j;
}

RegionMetrics region_metrics_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidInput("metrics must be a JSON object");
    RegionMetrics m;
    for (const auto& [key, value] : j.items()) {
        const auto it = std::find_if(std::begin(kFields), std::end(kFields),
                                     [&](const auto& f) { return key == f.first; });
        if (it == std::end(kFields)) throw InvalidInput("unknown metric '" + key + "'");
        if (value.is_null()) continue;
        if (!value.is_number()) throw InvalidInput("metric '" + key + "' must be a number or null");
        m.*(it->second) = value.get<double>();
    }
    return m;
}

double mcd(const VocoderFeatures& pred, const VocoderFeatures& ref) {
    require_same_length(pred, ref);
    if (pred.empty()) throw InvalidInput("mcd needs at least one frame");
    const double k = 10.0 / std::numbers::ln10 * std::sqrt(2.0);
    double total = 0.0;
    for (std::size_t t = 0; t < pred.frames(); ++t) {
        double sq = 0.0;
        for (std::size_t d = kMfccCol + 1; d < kMfccCol + kMfccDim; ++d) {
            const double diff = static_cast<double>(pred.at(t, d)) - ref.at(t, d);
            sq += diff * diff;
        }
        total += k * std::sqrt(sq);
    }
    return total / static_cast<double>(pred.frames());
}

F0Comparison f0_rmse_and_vuv(const VocoderFeatures& pred, const VocoderFeatures& ref) {
    require_same_length(pred, ref);
    if (pred.empty()) throw InvalidInput("f0 comparison needs at least one frame");
    std::size_t both = 0, disagree = 0;
    double sq = 0.0;
    for (std::size_t t = 0; t < pred.frames(); ++t) {
        const bool vp = pred.f0(t) > 0.0f, vr = ref.f0(t) > 0.0f;
        if (vp != vr) ++disagree;
        if (vp && vr) {
            const double e = static_cast<double>(pred.f0(t)) - ref.f0(t);
            sq += e * e;
            ++both;
        }
    }
    F0Comparison out;
    out.vuv_error_rate = static_cast<double>(disagree) / static_cast<double>(pred.frames());
    if (both > 0) out.rmse_hz = std::sqrt(sq / static_cast<double>(both));
    return out;
}

double speaker_cosine(const VocoderFeatures& edited, const VocoderFeatures& unedited,
                      const EmbeddingProvider& provider) {
    if (edited.empty() || unedited.empty()) throw InvalidInput("speaker cosine needs non-empty regions");
    const auto a = embed_utterance(edited, provider).vector;
    const auto b = embed_utterance(unedited, provider).vector;
    return cosine_similarity(a, b);
}

std::vector<double> spectral_flux(const AudioClip& audio, const FluxConfig& cfg) {
    if (cfg.frame < 2 || cfg.hop < 1) throw InvalidInput("bad flux analysis parameters");
    const auto frame = static_cast<std::size_t>(cfg.frame), hop = static_cast<std::size_t>(cfg.hop);
    if (audio.size() < frame) return {};
    const std::size_t count = 1 + (audio.size() - frame) / hop;
    const std::size_t nfft = dsp::next_pow2(frame);
    const auto window = dsp::hann(frame);
    std::vector<double> x(frame), previous, current(nfft / 2 + 1), flux;
    flux.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        for (std::size_t i = 0; i < frame; ++i) x[i] = window[i] * audio.samples[k * hop + i];
        const auto spectrum = dsp::rfft(x, nfft);
        for (std::size_t i = 0; i < current.size(); ++i) current[i] = std::abs(spectrum[i]);
        if (!previous.empty()) {
            double sq = 0.0;
            for (std::size_t i = 0; i < current.size(); ++i) sq += (current[i] - previous[i]) * (current[i] - previous[i]);
            flux.push_back(std::sqrt(sq));
        }
        previous = current;
    }
    return flux;
}

bool boundary_is_interior(const AudioClip& audio, std::size_t boundary, const FluxConfig& cfg) {
    const auto half = static_cast<std::size_t>(std::lround(cfg.window_ms * 1e-3 * audio.sample_rate));
    return boundary >= half && boundary + half <= audio.size();
}

double boundary_discontinuity(const AudioClip& audio, std::span<const std::size_t> boundaries,
                              const FluxConfig& cfg) {
    if (boundaries.empty()) throw InvalidInput("no boundaries to score");
    for (auto b : boundaries)
        if (!boundary_is_interior(audio, b, cfg))
            throw InvalidInput("boundary at sample " + std::to_string(b) + " is too close to the clip edge");
    const auto flux = spectral_flux(audio, cfg);
    if (flux.empty()) throw InvalidInput("clip too short for flux analysis");

    auto sorted = flux;
    const auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
    std::nth_element(sorted.begin(), mid, sorted.end());
    double baseline = *mid;
    // Mostly-silent clips have a zero median; fall back to the mean.
    if (baseline <= 0.0) {
        for (double f : flux) baseline += f;
        baseline /= static_cast<double>(flux.size());
    }
    if (baseline <= 0.0) return 0.0;

    const double half = cfg.window_ms * 1e-3 * audio.sample_rate;
    double worst = 0.0;
    for (auto b : boundaries) {
        for (std::size_t k = 0; k < flux.size(); ++k) {
            // Entry k sits between the centres of frames k and k + 1.
            const double centre = (static_cast<double>(k) + 0.5) * cfg.hop + 0.5 * cfg.frame;
            if (std::abs(centre - static_cast<double>(b)) <= half) worst = std::max(worst, flux[k] / baseline);
        }
    }
    return worst;
}

RegionMetrics evaluate_edit(const EditResult& result, const Corpus& corpus, const EmbeddingProvider& provider) {
    const auto& original = corpus.at(result.utterance_id).features;
    RegionMetrics m;
    if (result.original_region.end > original.frames()) throw InvalidInput("edit region outside the original");
    const VocoderFeatures reference = original.slice(result.original_region);
    if (!result.region_fine.empty() && result.region_fine.frames() == reference.frames()) {
        m.mcd_db = mcd(result.region_fine, reference);
        const auto f0 = f0_rmse_and_vuv(result.region_fine, reference);
        m.f0_rmse_hz = f0.rmse_hz;
        m.vuv_error_rate = f0.vuv_error_rate;
    }
    if (!result.region_fine.empty()) m.speaker_cosine = speaker_cosine(result.region_fine, original, provider);

    std::vector<std::size_t> interior;
    for (auto b : {result.boundary_begin, result.boundary_end})
        if (boundary_is_interior(result.audio, b) && std::find(interior.begin(), interior.end(), b) == interior.end())
            interior.push_back(b);
    if (!interior.empty()) m.boundary_discontinuity = boundary_discontinuity(result.audio, interior);
    return m;
}

nlohmann::json metrics_record(const std::string& edit_id, const RegionMetrics& m) {
    return {{"edit_id", edit_id},
            {"mcd_db", optional_json(m.mcd_db)},
            {"f0_rmse_hz", optional_json(m.f0_rmse_hz)},
            {"vuv_error", optional_json(m.vuv_error_rate)},
            {"speaker_cosine", optional_json(m.speaker_cosine)},
            {"boundary_score", optional_json(m.boundary_discontinuity)}};
}

MetricSummary summarize(std::span<const RegionMetrics> metrics) {
    MetricSummary s;
    s.edits = metrics.size();
    for (const auto& [name, field] : kFields) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& m : metrics)
            if (m.*field) {
                sum += *(m.*field);
                ++n;
            }
        if (n > 0) s.mean.*field = sum / static_cast<double>(n);
    }
    return s;
}

std::string export_embeddings(const Corpus& corpus, const EmbeddingProvider& provider) {
    std::ostringstream os;
    os.precision(9);
    os << "utterance_id,speaker_id";
    for (std::size_t i = 0; i < kEmbeddingDim; ++i) os << ",e" << i;
    os << "\n";
    for (const auto& [id, entry] : corpus.entries()) {
        const auto v = embed_utterance(entry.features, provider).vector;
        os << id << "," << entry.record.speaker_id;
        for (float x : v) os << "," << x;
        os << "\n";
    }
    return os.str();
}

}  // namespace tbve
