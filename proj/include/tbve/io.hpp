#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tbve/error.hpp"

namespace tbve::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

// Append-only little-endian byte writer.
class ByteWriter {
public:
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void text(std::string_view s) {
        bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    }
    void u32(std::uint32_t v) { pod(v); }
    void u64(std::uint64_t v) { pod(v); }
    void f32(float v) { pod(v); }
    void f32s(std::span<const float> v) {
        bytes({reinterpret_cast<const std::uint8_t*>(v.data()), v.size_bytes()});
    }

    const std::vector<std::uint8_t>& data() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    template <typename T>
    void pod(T v) {
        std::uint8_t tmp[sizeof(T)];
        std::memcpy(tmp, &v, sizeof(T));
        bytes(tmp);
    }
    std::vector<std::uint8_t> buf_;
};

// Bounds-checked reader; every overrun throws InvalidInput.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n);
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    std::string text(std::size_t n) {
        auto b = bytes(n);
        return {reinterpret_cast<const char*>(b.data()), b.size()};
    }
    std::uint32_t u32() { return pod<std::uint32_t>(); }
    std::uint64_t u64() { return pod<std::uint64_t>(); }
    std::uint16_t u16() { return pod<std::uint16_t>(); }
    std::int16_t i16() { return pod<std::int16_t>(); }
    float f32() { return pod<float>(); }
    void f32s(std::span<float> out) {
        auto b = bytes(out.size_bytes());
        std::memcpy(out.data(), b.data(), b.size());
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }
    void skip(std::size_t n) { bytes(n); }

private:
    void need(std::size_t n) const {
        if (n > data_.size() - pos_) throw InvalidInput("truncated binary data");
    }
    template <typename T>
    T pod() {
        auto b = bytes(sizeof(T));
        T v;
        std::memcpy(&v, b.data(), sizeof(T));
        return v;
    }
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

std::uint64_t fnv1a64(std::span<const std::uint8_t> data);
std::string sha256_hex(std::span<const std::uint8_t> data);

}  // namespace tbve::io
