#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdscl/core.hpp"

// Minimal RIFF/WAVE io. Ingestion accepts exactly one shape of file:
// 16-bit PCM, mono, 16000 Hz. Anything else is rejected explicitly,
// there is no silent resampling or channel mixing.

namespace pdscl {

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16le(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

inline void put_u16le(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

}  // namespace detail

inline Waveform read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open wav file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw std::runtime_error("not a RIFF/WAVE file: " + path);

    // Walk chunks for fmt and data.
    std::size_t pos = 12;
    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data_ptr = nullptr;
    std::uint32_t data_len = 0;
    while (pos + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
        const std::uint32_t len = detail::read_u32le(bytes.data() + pos + 4);
        if (pos + 8 + len > bytes.size()) break;
        if (std::memcmp(id, "fmt ", 4) == 0 && len >= 16) {
            const unsigned char* f = bytes.data() + pos + 8;
            format = detail::read_u16le(f);
            channels = detail::read_u16le(f + 2);
            rate = detail::read_u32le(f + 4);
            bits = detail::read_u16le(f + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data_ptr = bytes.data() + pos + 8;
            data_len = len;
        }
        pos += 8 + len + (len & 1);  // chunks are word aligned
    }
    if (!have_fmt || data_ptr == nullptr)
        throw std::runtime_error("wav file missing fmt/data chunk: " + path);
    if (format != 1 || bits != 16)
        throw std::runtime_error("wav must be 16-bit PCM: " + path);
    if (channels != 1)
        throw std::runtime_error("wav must be mono, got " + std::to_string(channels) +
                                 " channels: " + path);
    if (rate != 16000)
        throw std::runtime_error("wav must be 16000 Hz, got " + std::to_string(rate) +
                                 " Hz: " + path);

    Waveform w;
    w.sample_rate = 16000;
    const std::size_t n = data_len / 2;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int16_t v =
            static_cast<std::int16_t>(detail::read_u16le(data_ptr + 2 * i));
        w.samples[i] = static_cast<double>(v) / 32768.0;
    }
    return w;
}

inline void write_wav(const std::string& path, const Waveform& w) {
    if (w.sample_rate != 16000)
        throw std::invalid_argument("write_wav expects 16000 Hz waveforms");
    std::vector<unsigned char> out;
    const std::uint32_t data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
    out.reserve(44 + data_len);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    detail::put_u32le(out, 36 + data_len);
    out.insert(out.end(), {'W', 'A', 'V', 'E'});
    out.insert(out.end(), {'f', 'm', 't', ' '});
    detail::put_u32le(out, 16);
    detail::put_u16le(out, 1);                        // PCM
    detail::put_u16le(out, 1);                        // mono
    detail::put_u32le(out, 16000);                    // sample rate
    detail::put_u32le(out, 16000 * 2);                // byte rate
    detail::put_u16le(out, 2);                        // block align
    detail::put_u16le(out, 16);                       // bits per sample
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    detail::put_u32le(out, data_len);
    for (double x : w.samples) {
        const double clamped = x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x);
        const auto v = static_cast<std::int16_t>(std::lrint(clamped * 32767.0));
        detail::put_u16le(out, static_cast<std::uint16_t>(v));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write wav file: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("short write on wav file: " + path);
}

}  // namespace pdscl
