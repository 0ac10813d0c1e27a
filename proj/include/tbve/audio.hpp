#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tbve {

struct AudioClip {
    std::vector<float> samples;  // in [-1, 1]
    int sample_rate = 16000;

    std::size_t size() const { return samples.size(); }
    double duration_seconds() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

// Throws InvalidInput on non-finite samples or a non-positive rate.
void validate(const AudioClip& clip);

// WAV, PCM16, mono. Anything else is rejected with InvalidInput.
AudioClip decode_wav(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_wav(const AudioClip& clip);

AudioClip read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

double rms(std::span<const float> samples);

}  // namespace tbve
