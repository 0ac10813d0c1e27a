#include "tbve/features.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsp.hpp"
#include "tbve/error.hpp"
#include "tbve/io.hpp"
#include "tbve/rng.hpp"

namespace tbve {

void FrameSpec::validate() const {
    if (sample_rate <= 0) throw InvalidInput("sample rate must be positive");
    if (hop <= 0 || hop > window) throw InvalidInput("frame spec requires 0 < hop <= window");
    if (window > 4 * hop) throw InvalidInput("frame spec requires window <= 4 * hop");
}

std::size_t FrameSpec::frame_count(std::size_t num_samples) const {
    if (num_samples < static_cast<std::size_t>(window))
        throw TooShortError("audio too short: " + std::to_string(num_samples) +
                            " samples is less than one analysis window of " +
                            std::to_string(window));
    return 1 + (num_samples - static_cast<std::size_t>(window)) / static_cast<std::size_t>(hop);
}

VocoderFeatures VocoderFeatures::slice(const FrameRange& r) const {
    if (r.start > r.end || r.end > frames_) throw InvalidInput("frame range out of bounds");
    VocoderFeatures out(r.size());
    std::copy(data_.begin() + static_cast<std::ptrdiff_t>(r.start * kFeatureDim),
              data_.begin() + static_cast<std::ptrdiff_t>(r.end * kFeatureDim), out.data_.begin());
    return out;
}

void VocoderFeatures::append(const VocoderFeatures& other) {
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    frames_ += other.frames_;
}

void validate(const VocoderFeatures& f) {
    for (std::size_t t = 0; t < f.frames(); ++t) {
        auto fr = f.frame(t);
        for (float v : fr)
            if (!std::isfinite(v)) throw InvalidInput("features contain non-finite values");
        if (fr[kF0Col] < 0.0f) throw InvalidInput("negative f0");
        for (std::size_t b = 0; b < kPeriodicityDim; ++b) {
            const float p = fr[kPeriodicityCol + b];
            if (p < 0.0f || p > 1.0f) throw InvalidInput("periodicity outside [0, 1]");
        }
    }
}

namespace {

struct PitchEstimate {
    double f0 = 0.0;       // 0 when unvoiced
    std::size_t lag = 0;   // best integer lag, 0 when the frame is silent
};

// Normalized autocorrelation over the f0 search band. Cross terms come from
// an FFT autocorrelation, the per-lag energies from prefix sums.
PitchEstimate estimate_pitch(const std::vector<double>& x, int sample_rate) {
    const std::size_t n = x.size();
    const auto lag_min = static_cast<std::size_t>(std::floor(sample_rate / dsp::kF0Max));
    auto lag_max = static_cast<std::size_t>(std::ceil(sample_rate / dsp::kF0Min));
    lag_max = std::min(lag_max, n / 2);
    if (lag_min + 2 > lag_max) return {};

    std::vector<double> prefix(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[i] * x[i];
    if (prefix[n] <= 1e-12) return {};

    const std::size_t nfft = dsp::next_pow2(2 * n);
    auto spec = dsp::rfft(x, nfft);
    for (auto& c : spec) c = std::norm(c);
    const auto ac = dsp::irfft(spec);

    std::vector<double> r(lag_max + 2, 0.0);
    for (std::size_t lag = lag_min - 1; lag <= lag_max + 1 && lag < n; ++lag) {
        const double e0 = prefix[n - lag];
        const double e1 = prefix[n] - prefix[lag];
        const double denom = std::sqrt(e0 * e1);
        r[lag] = denom > 1e-12 ? ac[lag] / denom : 0.0;
    }

    double best = -1.0;
    for (std::size_t lag = lag_min; lag <= lag_max; ++lag) best = std::max(best, r[lag]);

    // Smallest local maximum close to the global peak; avoids octave-down errors.
    std::size_t pick = 0;
    for (std::size_t lag = lag_min; lag <= lag_max; ++lag) {
        if (r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1] && r[lag] >= 0.9 * best) {
            pick = lag;
            break;
        }
    }
    if (pick == 0) return {};

    PitchEstimate est;
    est.lag = pick;
    if (r[pick] < dsp::kVoicingThreshold) return est;

    const double a = r[pick - 1], b = r[pick], c = r[pick + 1];
    const double curv = a - 2.0 * b + c;
    const double delta = std::abs(curv) > 1e-12 ? std::clamp(0.5 * (a - c) / curv, -0.5, 0.5) : 0.0;
    est.f0 = std::clamp(sample_rate / (static_cast<double>(pick) + delta), dsp::kF0Min, dsp::kF0Max);
    return est;
}

double correlation_at(const std::vector<double>& x, std::size_t lag) {
    const std::size_t n = x.size();
    if (lag == 0 || lag >= n) return 0.0;
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) {
        xy += x[i] * x[i + lag];
        xx += x[i] * x[i];
        yy += x[i + lag] * x[i + lag];
    }
    const double denom = std::sqrt(xx * yy);
    return denom > 1e-12 ? xy / denom : 0.0;
}

}  // namespace

VocoderFeatures extract_features(const AudioClip& audio, const FrameSpec& spec) {
    spec.validate();
    validate(audio);
    if (audio.sample_rate != spec.sample_rate)
        throw InvalidInput("audio sample rate does not match frame spec");
    const std::size_t frames = spec.frame_count(audio.size());
    const auto win = static_cast<std::size_t>(spec.window);
    const auto hop = static_cast<std::size_t>(spec.hop);

    const std::size_t nfft = dsp::next_pow2(win);
    const std::size_t band_nfft = dsp::next_pow2(2 * win);
    const auto window = dsp::hann(win);
    const auto bank = dsp::mel_bank(nfft, spec.sample_rate);
    const auto dct = dsp::dct_basis();
    std::vector<int> band_table(band_nfft);
    for (std::size_t k = 0; k < band_nfft; ++k) {
        const std::size_t bin = k <= band_nfft / 2 ? k : band_nfft - k;
        band_table[k] = dsp::band_of_bin(bin, band_nfft, spec.sample_rate);
    }

    VocoderFeatures out(frames);
    std::vector<double> x(win), windowed(win);
    for (std::size_t t = 0; t < frames; ++t) {
        const float* src = audio.samples.data() + t * hop;
        const double mean = std::accumulate(src, src + win, 0.0) / static_cast<double>(win);
        for (std::size_t i = 0; i < win; ++i) {
            x[i] = src[i] - mean;
            windowed[i] = src[i] * window[i];
        }
        auto frame = out.frame(t);

        const auto pitch = estimate_pitch(x, spec.sample_rate);
        frame[kF0Col] = static_cast<float>(pitch.f0);

        if (pitch.lag > 0) {
            auto full = dsp::rfft(x, band_nfft);
            for (std::size_t b = 0; b < kPeriodicityDim; ++b) {
                std::vector<dsp::Complex> banded(full.size());
                for (std::size_t k = 0; k < full.size(); ++k)
                    if (band_table[k] == static_cast<int>(b)) banded[k] = full[k];
                auto y = dsp::irfft(banded);
                y.resize(win);
                double r = 0.0;
                for (std::size_t lag = pitch.lag - 1; lag <= pitch.lag + 1; ++lag)
                    r = std::max(r, correlation_at(y, lag));
                frame[kPeriodicityCol + b] = static_cast<float>(std::clamp(r, 0.0, 1.0));
            }
        }

        auto spectrum = dsp::rfft(windowed, nfft);
        std::vector<double> log_mel(dsp::kMelBands);
        for (int m = 0; m < dsp::kMelBands; ++m) {
            double e = 0.0;
            for (std::size_t k = 0; k < bank.bins; ++k) e += bank.weights[m][k] * std::norm(spectrum[k]);
            log_mel[m] = std::log1p(e / dsp::kMelFloor);
        }
        for (std::size_t k = 0; k < kMfccDim; ++k) {
            double c = 0.0;
            for (int m = 0; m < dsp::kMelBands; ++m) c += dct[k][m] * log_mel[m];
            frame[kMfccCol + k] = static_cast<float>(c);
        }
    }
    return out;
}

VocoderFeatures mask_frames(const VocoderFeatures& features, std::span<const FrameRange> ranges) {
    std::vector<FrameRange> sorted;
    for (const auto& r : ranges) {
        if (r.start > r.end || r.end > features.frames())
            throw InvalidInput("mask range out of bounds");
        if (!r.empty()) sorted.push_back(r);
    }
    std::sort(sorted.begin(), sorted.end(),
              [](const FrameRange& a, const FrameRange& b) { return a.start < b.start; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i].start < sorted[i - 1].end)
            throw InvalidInput("mask ranges overlap");
    }
    VocoderFeatures out = features;
    for (const auto& r : sorted)
        for (std::size_t t = r.start; t < r.end; ++t) std::ranges::fill(out.frame(t), 0.0f);
    return out;
}

AudioClip synthesize_baseline(const VocoderFeatures& features, const FrameSpec& spec,
                              std::uint64_t seed) {
    spec.validate();
    validate(features);
    const std::size_t frames = features.frames();
    const auto hop = static_cast<std::size_t>(spec.hop);
    const std::size_t total = frames * hop;
    AudioClip out;
    out.sample_rate = spec.sample_rate;
    out.samples.assign(total, 0.0f);
    if (frames == 0) return out;

    // Analysis constants, so that envelopes map back to sample power.
    const auto win = static_cast<std::size_t>(spec.window);
    const std::size_t analysis_nfft = dsp::next_pow2(win);
    const auto analysis_window = dsp::hann(win);
    double window_energy = 0.0;
    for (double w : analysis_window) window_energy += w * w;
    const auto bank = dsp::mel_bank(analysis_nfft, spec.sample_rate);
    const auto dct = dsp::dct_basis();

    // Excitation: phase-continuous unit-power pulse train plus hashed noise.
    std::vector<double> pulses(total, 0.0);
    double phase = 0.0;
    for (std::size_t n = 0; n < total; ++n) {
        const double f0 = features.f0(n / hop);
        if (f0 <= 0.0) continue;
        phase += f0 / spec.sample_rate;
        if (phase >= 1.0) {
            phase -= std::floor(phase);
            pulses[n] = std::sqrt(spec.sample_rate / f0);
        }
    }

    const std::size_t seg = 2 * hop;
    const std::size_t nfft = dsp::next_pow2(2 * seg);
    const auto synth_window = dsp::hann(seg);
    std::vector<int> bin_band(nfft / 2 + 1);
    for (std::size_t k = 0; k <= nfft / 2; ++k)
        bin_band[k] = dsp::band_of_bin(k, nfft, spec.sample_rate);

    std::vector<double> pulse_seg(seg), noise_seg(seg);
    std::vector<double> bin_power(bank.bins);
    std::vector<double> mel_norm(dsp::kMelBands);
    for (int m = 0; m < dsp::kMelBands; ++m)
        mel_norm[m] = std::accumulate(bank.weights[m].begin(), bank.weights[m].end(), 0.0);

    for (std::size_t t = 0; t < frames; ++t) {
        auto frame = features.frame(t);

        // Envelope: inverse DCT to mel log-energies, spread back to bins.
        std::vector<double> mel_energy(dsp::kMelBands);
        bool silent = true;
        for (int m = 0; m < dsp::kMelBands; ++m) {
            double l = 0.0;
            for (std::size_t k = 0; k < kMfccDim; ++k) l += dct[k][m] * frame[kMfccCol + k];
            mel_energy[m] = std::max(0.0, dsp::kMelFloor * std::expm1(l));
            if (mel_energy[m] > 0.0) silent = false;
        }
        if (silent) continue;
        for (std::size_t k = 0; k < bank.bins; ++k) {
            double num = 0.0, den = 0.0;
            for (int m = 0; m < dsp::kMelBands; ++m) {
                const double w = bank.weights[m][k];
                if (w <= 0.0) continue;
                num += w * mel_energy[m] / mel_norm[m];
                den += w;
            }
            bin_power[k] = den > 0.0 ? num / den : 0.0;
        }

        const auto start = static_cast<std::ptrdiff_t>(t * hop) - static_cast<std::ptrdiff_t>(hop / 2);
        for (std::size_t i = 0; i < seg; ++i) {
            const std::ptrdiff_t n = start + static_cast<std::ptrdiff_t>(i);
            const bool inside = n >= 0 && n < static_cast<std::ptrdiff_t>(total);
            pulse_seg[i] = inside ? pulses[static_cast<std::size_t>(n)] : 0.0;
            noise_seg[i] = inside ? hashed_normal(seed, static_cast<std::uint64_t>(n)) : 0.0;
        }
        const auto P = dsp::rfft(pulse_seg, nfft);
        const auto N = dsp::rfft(noise_seg, nfft);
        const bool voiced = frame[kF0Col] > 0.0f;

        std::vector<dsp::Complex> mixed(nfft);
        for (std::size_t k = 0; k < nfft; ++k) {
            const std::size_t bin = k <= nfft / 2 ? k : nfft - k;
            const double p = voiced ? frame[kPeriodicityCol + bin_band[bin]] : 0.0;
            // Map synthesis bin onto the analysis grid for the envelope.
            const double pos = static_cast<double>(bin) * analysis_nfft / nfft;
            const auto lo = std::min(static_cast<std::size_t>(pos), bank.bins - 1);
            const auto hi = std::min(lo + 1, bank.bins - 1);
            const double frac = pos - static_cast<double>(lo);
            const double power = (1.0 - frac) * bin_power[lo] + frac * bin_power[hi];
            const double gain = std::sqrt(power / window_energy);
            mixed[k] = gain * (std::sqrt(p) * P[k] + std::sqrt(1.0 - p) * N[k]);
        }
        const auto y = dsp::irfft(mixed);
        for (std::size_t i = 0; i < seg; ++i) {
            const std::ptrdiff_t n = start + static_cast<std::ptrdiff_t>(i);
            if (n < 0 || n >= static_cast<std::ptrdiff_t>(total)) continue;
            out.samples[static_cast<std::size_t>(n)] += static_cast<float>(synth_window[i] * y[i]);
        }
    }
    for (auto& s : out.samples) s = std::clamp(s, -1.0f, 1.0f);
    return out;
}

std::vector<std::uint8_t> encode_tbvf(const VocoderFeatures& f) {
    io::ByteWriter w;
    w.text("TBVF");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(f.frames()));
    w.u32(static_cast<std::uint32_t>(kFeatureDim));
    w.f32s(f.data());
    return w.take();
}

VocoderFeatures decode_tbvf(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    if (r.remaining() < 16 || r.text(4) != "TBVF") throw InvalidInput("not a TBVF feature file");
    const auto version = r.u32();
    if (version != 1) throw InvalidInput("unsupported TBVF version " + std::to_string(version));
    const auto frames = r.u32();
    const auto dim = r.u32();
    if (dim != kFeatureDim) throw InvalidInput("TBVF feature dimension must be 19");
    if (r.remaining() != static_cast<std::size_t>(frames) * dim * sizeof(float))
        throw InvalidInput("TBVF payload size does not match header");
    VocoderFeatures f(frames);
    r.f32s(f.data());
    return f;
}

void write_tbvf(const std::filesystem::path& path, const VocoderFeatures& f) {
    io::write_file_atomic(path, encode_tbvf(f));
}

VocoderFeatures read_tbvf(const std::filesystem::path& path) {
    return decode_tbvf(io::read_file(path));
}

double f0_to_log(double hz) { return std::log1p(std::max(0.0, hz)); }
double log_to_f0(double v) { return std::max(0.0, std::expm1(v)); }

}  // namespace tbve
