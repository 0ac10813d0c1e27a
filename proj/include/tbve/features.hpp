#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tbve/audio.hpp"

namespace tbve {

// Per-frame layout: [f0 | 13 MFCC | 5 periodicity bands].
inline constexpr std::size_t kFeatureDim = 19;
inline constexpr std::size_t kMfccDim = 13;
inline constexpr std::size_t kPeriodicityDim = 5;
inline constexpr std::size_t kF0Col = 0;
inline constexpr std::size_t kMfccCol = 1;
inline constexpr std::size_t kPeriodicityCol = 14;

struct FrameSpec {
    int hop = 200;
    int window = 800;
    int sample_rate = 16000;

    // Throws InvalidInput unless 0 < hop <= window <= 4 * hop.
    void validate() const;
    // 1 + floor((n - window) / hop); throws TooShortError if n < window.
    std::size_t frame_count(std::size_t num_samples) const;
};

// Half-open [start, end) over frame indices.
struct FrameRange {
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - start; }
    bool empty() const { return end == start; }
    bool contains(std::size_t t) const { return t >= start && t < end; }
    bool operator==(const FrameRange&) const = default;
};

class VocoderFeatures {
public:
    VocoderFeatures() = default;
    explicit VocoderFeatures(std::size_t frames) : frames_(frames), data_(frames * kFeatureDim) {}

    std::size_t frames() const { return frames_; }
    bool empty() const { return frames_ == 0; }

    std::span<float> frame(std::size_t t) { return {data_.data() + t * kFeatureDim, kFeatureDim}; }
    std::span<const float> frame(std::size_t t) const {
        return {data_.data() + t * kFeatureDim, kFeatureDim};
    }
    float& at(std::size_t t, std::size_t d) { return data_[t * kFeatureDim + d]; }
    float at(std::size_t t, std::size_t d) const { return data_[t * kFeatureDim + d]; }
    float& f0(std::size_t t) { return at(t, kF0Col); }
    float f0(std::size_t t) const { return at(t, kF0Col); }

    // Frame-major storage, T * 19 floats.
    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    VocoderFeatures slice(const FrameRange& r) const;
    void append(const VocoderFeatures& other);

    bool operator==(const VocoderFeatures&) const = default;

private:
    std::size_t frames_ = 0;
    std::vector<float> data_;
};

// Finite values, f0 >= 0, periodicity in [0, 1]. Throws InvalidInput.
void validate(const VocoderFeatures& f);

// Autocorrelation f0 (50-500 Hz, unvoiced below 0.3 peak correlation),
// banded periodicity over 5 log-spaced bands, 13 MFCCs from 40 mel bands.
// Mel log-energies are log(1 + E / floor), so digital silence maps to
// all-zero features and all-zero features vocode back to silence.
VocoderFeatures extract_features(const AudioClip& audio, const FrameSpec& spec);

// Zeros every dimension of the frames inside `ranges`. Ranges must lie
// within [0, T) and must not overlap each other.
VocoderFeatures mask_frames(const VocoderFeatures& features, std::span<const FrameRange> ranges);

// Pulse-plus-noise source-filter synthesis. Output has T * hop samples.
// Noise is a pure function of (seed, sample index).
AudioClip synthesize_baseline(const VocoderFeatures& features, const FrameSpec& spec,
                              std::uint64_t seed = 0);

// Pluggable waveform generator; the baseline synthesizer is the default.
class Vocoder {
public:
    virtual ~Vocoder() = default;
    virtual AudioClip synthesize(const VocoderFeatures& features, std::uint64_t seed) const = 0;
};

class BaselineVocoder final : public Vocoder {
public:
    explicit BaselineVocoder(FrameSpec spec = {}) : spec_(spec) {}
    AudioClip synthesize(const VocoderFeatures& features, std::uint64_t seed) const override {
        return synthesize_baseline(features, spec_, seed);
    }

private:
    FrameSpec spec_;
};

// TBVF: "TBVF", u32 version=1, u32 T, u32 D=19, T*D little-endian f32.
std::vector<std::uint8_t> encode_tbvf(const VocoderFeatures& f);
VocoderFeatures decode_tbvf(std::span<const std::uint8_t> bytes);
void write_tbvf(const std::filesystem::path& path, const VocoderFeatures& f);
VocoderFeatures read_tbvf(const std::filesystem::path& path);

// f0 as the model sees it: log(1 + f0).
double f0_to_log(double hz);
double log_to_f0(double v);

}  // namespace tbve
