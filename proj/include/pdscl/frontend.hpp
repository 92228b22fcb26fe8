#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdscl/core.hpp"
#include "pdscl/rng.hpp"  // kPi

// Deterministic audio frontend: duration standardization (repeat padding /
// truncation to 8 s at 16 kHz), 128-band log-Mel filterbank over 25 ms
// Hann windows with 10 ms shift, then a fixed affine normalization.
// Identical input always yields bit-identical output.

namespace pdscl {

struct FrontendConfig {
    std::size_t target_samples = 128000;  // 8 s at 16 kHz
    double window_ms = 25.0;              // 400 samples
    double hop_ms = 10.0;                 // 160 samples
    std::size_t n_mels = 128;
    std::size_t fft_size = 512;
    double fmin_hz = 0.0;
    double fmax_hz = 8000.0;
    double norm_mean = -4.27;
    double norm_std = 4.57;
    double log_floor = 1e-10;

    std::size_t window_samples(int sample_rate = 16000) const {
        return static_cast<std::size_t>(std::lround(window_ms * sample_rate / 1000.0));
    }
    std::size_t hop_samples(int sample_rate = 16000) const {
        return static_cast<std::size_t>(std::lround(hop_ms * sample_rate / 1000.0));
    }
};

inline Waveform standardize_duration(const Waveform& w, std::size_t target_samples) {
    if (w.samples.empty()) throw std::invalid_argument("standardize_duration: empty waveform");
    if (w.sample_rate != 16000)
        throw std::invalid_argument("standardize_duration: expected 16000 Hz input");
    Waveform out;
    out.sample_rate = w.sample_rate;
    out.samples.resize(target_samples);
    const std::size_t n = w.samples.size();
    if (n >= target_samples) {
        std::copy_n(w.samples.begin(), target_samples, out.samples.begin());
    } else {
        // repeat padding: out[i] = in[i mod n]
        for (std::size_t i = 0; i < target_samples; ++i) out.samples[i] = w.samples[i % n];
    }
    return out;
}

// In-place iterative radix-2 FFT with precomputed twiddles. 512 points per
// frame is small enough that a table-driven plain implementation beats
// pulling in an FFT library, and keeps the output bit-stable everywhere.
class Fft {
public:
    explicit Fft(std::size_t n) : n_(n) {
        if (n < 2 || (n & (n - 1)) != 0)
            throw std::invalid_argument("Fft: size must be a power of two >= 2");
        twiddle_re_.resize(n / 2);
        twiddle_im_.resize(n / 2);
        for (std::size_t k = 0; k < n / 2; ++k) {
            const double ang = -2.0 * kPi * static_cast<double>(k) / static_cast<double>(n);
            twiddle_re_[k] = std::cos(ang);
            twiddle_im_[k] = std::sin(ang);
        }
    }

    std::size_t size() const { return n_; }

    void transform(std::vector<double>& re, std::vector<double>& im) const {
        const std::size_t n = n_;
        for (std::size_t i = 1, j = 0; i < n; ++i) {
            std::size_t bit = n >> 1;
            for (; j & bit; bit >>= 1) j ^= bit;
            j ^= bit;
            if (i < j) {
                std::swap(re[i], re[j]);
                std::swap(im[i], im[j]);
            }
        }
        for (std::size_t len = 2; len <= n; len <<= 1) {
            const std::size_t stride = n / len;
            for (std::size_t i = 0; i < n; i += len) {
                for (std::size_t k = 0; k < len / 2; ++k) {
                    const double wr = twiddle_re_[k * stride];
                    const double wi = twiddle_im_[k * stride];
                    const std::size_t a = i + k;
                    const std::size_t b = i + k + len / 2;
                    const double tr = re[b] * wr - im[b] * wi;
                    const double ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
        }
    }

private:
    std::size_t n_;
    std::vector<double> twiddle_re_;
    std::vector<double> twiddle_im_;
};

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// One triangular filter, nonzero on a contiguous FFT-bin range.
struct MelFilter {
    std::size_t first_bin = 0;
    std::vector<double> weights;
};

namespace detail {

// Integral over [a,b] of the line through (x0,y0)-(x1,y1), clipped to [x0,x1].
inline double clipped_line_integral(double x0, double y0, double x1, double y1, double a,
                                    double b) {
    if (x1 <= x0) return 0.0;
    const double lo = std::max(a, x0);
    const double hi = std::min(b, x1);
    if (hi <= lo) return 0.0;
    const double slope = (y1 - y0) / (x1 - x0);
    const double ylo = y0 + slope * (lo - x0);
    const double yhi = y0 + slope * (hi - x0);
    return 0.5 * (ylo + yhi) * (hi - lo);
}

}  // namespace detail

// HTK-scale triangular mel filterbank. Each filter weight is the unit
// triangle averaged over the FFT bin's frequency span rather than sampled
// at the bin center; with 128 filters against 31.25 Hz wide bins a
// center-sampled bank would leave the narrow low-frequency filters empty.
inline std::vector<MelFilter> build_mel_filterbank(std::size_t n_mels, std::size_t fft_size,
                                                   int sample_rate, double fmin_hz,
                                                   double fmax_hz) {
    const std::size_t n_bins = fft_size / 2 + 1;
    const double bin_width = static_cast<double>(sample_rate) / static_cast<double>(fft_size);
    const double mel_lo = hz_to_mel(fmin_hz);
    const double mel_hi = hz_to_mel(fmax_hz);
    std::vector<double> edges(n_mels + 2);
    for (std::size_t m = 0; m < n_mels + 2; ++m)
        edges[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(m) /
                                          static_cast<double>(n_mels + 1));

    std::vector<MelFilter> bank(n_mels);
    for (std::size_t m = 0; m < n_mels; ++m) {
        const double fl = edges[m], fc = edges[m + 1], fr = edges[m + 2];
        std::vector<double> dense(n_bins, 0.0);
        for (std::size_t k = 0; k < n_bins; ++k) {
            const double a = (static_cast<double>(k) - 0.5) * bin_width;
            const double b = (static_cast<double>(k) + 0.5) * bin_width;
            const double area = detail::clipped_line_integral(fl, 0.0, fc, 1.0, a, b) +
                                detail::clipped_line_integral(fc, 1.0, fr, 0.0, a, b);
            dense[k] = area / bin_width;
        }
        std::size_t first = 0;
        while (first < n_bins && dense[first] <= 0.0) ++first;
        std::size_t last = n_bins;
        while (last > first && dense[last - 1] <= 0.0) --last;
        MelFilter f;
        f.first_bin = first;
        f.weights.assign(dense.begin() + static_cast<std::ptrdiff_t>(first),
                         dense.begin() + static_cast<std::ptrdiff_t>(last));
        bank[m] = std::move(f);
    }
    return bank;
}

inline Spectrogram compute_log_mel(const Waveform& w, const FrontendConfig& cfg = {}) {
    if (w.samples.size() != cfg.target_samples)
        throw std::invalid_argument("compute_log_mel: waveform not standardized to " +
                                    std::to_string(cfg.target_samples) + " samples");
    if (w.sample_rate != 16000)
        throw std::invalid_argument("compute_log_mel: expected 16000 Hz input");
    const std::size_t win = cfg.window_samples(w.sample_rate);
    const std::size_t hop = cfg.hop_samples(w.sample_rate);
    if (cfg.fft_size < win)
        throw std::invalid_argument("compute_log_mel: fft_size smaller than window");
    const std::size_t n_frames = 1 + (w.samples.size() - win) / hop;
    const std::size_t n_bins = cfg.fft_size / 2 + 1;

    // periodic Hann
    std::vector<double> window(win);
    for (std::size_t i = 0; i < win; ++i)
        window[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) /
                                         static_cast<double>(win));

    const auto bank =
        build_mel_filterbank(cfg.n_mels, cfg.fft_size, w.sample_rate, cfg.fmin_hz, cfg.fmax_hz);
    const Fft fft(cfg.fft_size);

    Spectrogram spec;
    spec.values = Matrix(n_frames, cfg.n_mels);
    std::vector<double> re(cfg.fft_size), im(cfg.fft_size), power(n_bins);
    for (std::size_t t = 0; t < n_frames; ++t) {
        const double* src = w.samples.data() + t * hop;
        for (std::size_t i = 0; i < win; ++i) re[i] = src[i] * window[i];
        std::fill(re.begin() + static_cast<std::ptrdiff_t>(win), re.end(), 0.0);
        std::fill(im.begin(), im.end(), 0.0);
        fft.transform(re, im);
        for (std::size_t k = 0; k < n_bins; ++k) power[k] = re[k] * re[k] + im[k] * im[k];
        double* out = spec.values.row(t);
        for (std::size_t m = 0; m < cfg.n_mels; ++m) {
            const MelFilter& f = bank[m];
            double e = 0.0;
            for (std::size_t k = 0; k < f.weights.size(); ++k)
                e += f.weights[k] * power[f.first_bin + k];
            out[m] = std::log(std::max(e, cfg.log_floor));
        }
    }
    return spec;
}

inline Spectrogram normalize_spectrogram(const Spectrogram& s, double mean = -4.27,
                                         double stddev = 4.57) {
    if (stddev <= 0.0) throw std::invalid_argument("normalize_spectrogram: std must be > 0");
    Spectrogram out;
    out.values = Matrix(s.values.rows, s.values.cols);
    for (std::size_t i = 0; i < s.values.data.size(); ++i)
        out.values.data[i] = (s.values.data[i] - mean) / stddev;
    return out;
}

// ---------------------------------------------------------------------------
// Feature cache file: 16-byte header (magic "PDSF", u32 version, u32 frames,
// u32 mels) followed by row-major little-endian doubles.
// ---------------------------------------------------------------------------

inline void save_feature_cache(const std::string& path, const Spectrogram& s) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write feature cache: " + path);
    const char magic[4] = {'P', 'D', 'S', 'F'};
    const std::uint32_t version = 1;
    const std::uint32_t frames = static_cast<std::uint32_t>(s.values.rows);
    const std::uint32_t mels = static_cast<std::uint32_t>(s.values.cols);
    f.write(magic, 4);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&frames), 4);
    f.write(reinterpret_cast<const char*>(&mels), 4);
    f.write(reinterpret_cast<const char*>(s.values.data.data()),
            static_cast<std::streamsize>(s.values.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("short write on feature cache: " + path);
}

inline Spectrogram load_feature_cache(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open feature cache: " + path);
    char magic[4];
    std::uint32_t version = 0, frames = 0, mels = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&frames), 4);
    f.read(reinterpret_cast<char*>(&mels), 4);
    if (!f || std::memcmp(magic, "PDSF", 4) != 0)
        throw std::runtime_error("bad feature cache magic: " + path);
    if (version != 1)
        throw std::runtime_error("unsupported feature cache version " + std::to_string(version) +
                                 ": " + path);
    Spectrogram s;
    s.values = Matrix(frames, mels);
    f.read(reinterpret_cast<char*>(s.values.data.data()),
           static_cast<std::streamsize>(s.values.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated feature cache: " + path);
    return s;
}

}  // namespace pdscl
