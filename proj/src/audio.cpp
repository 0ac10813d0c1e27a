#include "tbve/audio.hpp"

#include <algorithm>
#include <cmath>

#include "tbve/error.hpp"
#include "tbve/io.hpp"

namespace tbve {

void validate(const AudioClip& clip) {
    if (clip.sample_rate <= 0) throw InvalidInput("sample rate must be positive");
    for (float s : clip.samples)
        if (!std::isfinite(s)) throw InvalidInput("audio contains non-finite samples");
}

AudioClip decode_wav(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    if (r.remaining() < 12 || r.text(4) != "RIFF") throw InvalidInput("not a RIFF file");
    r.u32();
    if (r.text(4) != "WAVE") throw InvalidInput("not a WAVE file");

    bool have_fmt = false;
    int rate = 0;
    while (r.remaining() >= 8) {
        const std::string id = r.text(4);
        const std::uint32_t size = r.u32();
        if (id == "fmt ") {
            if (size < 16) throw InvalidInput("bad fmt chunk");
            const auto format = r.u16();
            const auto channels = r.u16();
            rate = static_cast<int>(r.u32());
            r.u32();  // byte rate
            r.u16();  // block align
            const auto bits = r.u16();
            r.skip(size - 16 + (size & 1));
            if (format != 1 || bits != 16) throw InvalidInput("WAV must be PCM16");
            if (channels != 1) throw InvalidInput("WAV must be mono");
            if (rate <= 0) throw InvalidInput("WAV sample rate must be positive");
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw InvalidInput("WAV data chunk before fmt chunk");
            const std::size_t n = std::min<std::size_t>(size, r.remaining()) / 2;
            AudioClip clip;
            clip.sample_rate = rate;
            clip.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) clip.samples[i] = r.i16() / 32768.0f;
            return clip;
        } else {
            r.skip(std::min<std::size_t>(size + (size & 1), r.remaining()));
        }
    }
    throw InvalidInput("WAV has no data chunk");
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip) {
    const auto n = static_cast<std::uint32_t>(clip.samples.size());
    io::ByteWriter w;
    w.text("RIFF");
    w.u32(36 + 2 * n);
    w.text("WAVE");
    w.text("fmt ");
    w.u32(16);
    const std::uint8_t fmt_head[] = {1, 0, 1, 0};  // PCM, mono
    w.bytes(fmt_head);
    w.u32(static_cast<std::uint32_t>(clip.sample_rate));
    w.u32(static_cast<std::uint32_t>(clip.sample_rate) * 2);
    const std::uint8_t fmt_tail[] = {2, 0, 16, 0};  // block align, bits
    w.bytes(fmt_tail);
    w.text("data");
    w.u32(2 * n);
    for (float s : clip.samples) {
        // Same scale as decode so PCM16 input survives a round trip exactly.
        const long v = std::lround(static_cast<double>(std::clamp(s, -1.0f, 1.0f)) * 32768.0);
        const auto q = static_cast<std::int16_t>(std::clamp(v, -32768L, 32767L));
        const std::uint8_t b[] = {static_cast<std::uint8_t>(q & 0xFF),
                                  static_cast<std::uint8_t>((q >> 8) & 0xFF)};
        w.bytes(b);
    }
    return w.take();
}

AudioClip read_wav(const std::filesystem::path& path) { return decode_wav(io::read_file(path)); }

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
    io::write_file_atomic(path, encode_wav(clip));
}

double rms(std::span<const float> samples) {
    if (samples.empty()) return 0.0;
    double acc = 0.0;
    for (float s : samples) acc += static_cast<double>(s) * s;
    return std::sqrt(acc / static_cast<double>(samples.size()));
}

}  // namespace tbve
