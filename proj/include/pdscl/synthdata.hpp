#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdscl/core.hpp"
#include "pdscl/rng.hpp"
#include "pdscl/wav.hpp"

// Seeded synthetic two-domain lung-sound corpus. The acoustic models are
// deliberately crude (breath-modulated low-pass noise, sustained sines for
// wheezes, damped clicks for crackles); the point is a controllable
// domain/patient confound structure, not realism. Every clip is generated
// from an RNG stream derived from (seed, sample_id), so generation order
// and parallelism never change the output.

namespace pdscl {

struct CorpusConfig {
    std::size_t n_patients = 40;
    double mobile_fraction = 0.5;  // fraction of patients that also have mobile clips
    std::size_t clips_per_patient_per_domain = 6;
    double abnormal_fraction = 0.5;
    std::uint64_t seed = 1;
    double duration_min_s = 3.0;
    double duration_max_s = 12.0;
};

// Fixed per patient across all of that patient's clips; this is the
// patient-specific variability the contrastive loss has to cancel.
struct PatientProfile {
    std::string patient_id;
    double breath_rate_hz = 0.3;  // in [0.2, 0.5]
    double spectral_tilt = 0.0;   // in [-1, 1], scales the base low-pass cutoff
    double gain_db = 0.0;         // in [-8, 8]
};

inline PatientProfile make_patient_profile(const std::string& patient_id, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "profile/" + patient_id));
    PatientProfile p;
    p.patient_id = patient_id;
    p.breath_rate_hz = rng.uniform(0.2, 0.5);
    p.spectral_tilt = rng.uniform(-1.0, 1.0);
    p.gain_db = rng.uniform(-8.0, 8.0);
    return p;
}

struct SynthClip {
    Waveform wave;
    FineLabel fine = FineLabel::normal;
};

namespace synthdetail {

constexpr int kSampleRate = 16000;

inline double rms(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s / static_cast<double>(x.size()));
}

inline void one_pole_lowpass(std::vector<double>& x, double cutoff_hz, int order = 1) {
    const double a = std::exp(-2.0 * kPi * cutoff_hz / kSampleRate);
    for (int pass = 0; pass < order; ++pass) {
        double y = 0.0;
        for (double& v : x) {
            y = (1.0 - a) * v + a * y;
            v = y;
        }
    }
}

inline void one_pole_highpass(std::vector<double>& x, double cutoff_hz, int order = 1) {
    const double a = 1.0 / (1.0 + 2.0 * kPi * cutoff_hz / kSampleRate);
    for (int pass = 0; pass < order; ++pass) {
        double y = 0.0, prev = 0.0;
        for (double& v : x) {
            y = a * (y + v - prev);
            prev = v;
            v = y;
        }
    }
}

inline void add_wheeze(std::vector<double>& x, double base_rms, Rng& rng) {
    const int n_tones = 1 + static_cast<int>(rng.uniform_int(3));
    for (int t = 0; t < n_tones; ++t) {
        const double freq = rng.uniform(200.0, 800.0);
        const double phase = rng.uniform(0.0, 2.0 * kPi);
        const double amp = base_rms * 1.2 * rng.uniform(0.7, 1.3);
        const double w = 2.0 * kPi * freq / kSampleRate;
        for (std::size_t k = 0; k < x.size(); ++k)
            x[k] += amp * std::sin(w * static_cast<double>(k) + phase);
    }
}

// Transient clicks: a damped tone in the 0.6-2.4 kHz band plus a very short
// wideband spike whose energy reaches well past 4 kHz. The spike is what a
// stethoscope keeps and the mobile band-pass destroys, which is the
// cross-device asymmetry the training methods have to cope with.
inline void add_crackles(std::vector<double>& x, double base_rms, double duration_s, Rng& rng) {
    const double rate = rng.uniform(8.0, 20.0);  // clicks per second
    const int n_clicks = static_cast<int>(std::lround(rate * duration_s));
    const std::size_t click_len = 48;  // 3 ms
    if (x.size() <= click_len) return;
    for (int c = 0; c < n_clicks; ++c) {
        const std::size_t pos = rng.uniform_int(x.size() - click_len);
        const double freq = rng.uniform(600.0, 2400.0);
        const double amp = base_rms * 6.0 * rng.uniform(0.8, 1.2);
        const double w = 2.0 * kPi * freq / kSampleRate;
        for (std::size_t k = 0; k < click_len; ++k)
            x[pos + k] += amp * std::exp(-static_cast<double>(k) / 12.0) *
                          std::sin(w * static_cast<double>(k));
    }
}

}  // namespace synthdetail

inline SynthClip synth_clip(Label cls, const PatientProfile& prof, Domain domain, Rng& rng,
                            double duration_min_s = 3.0, double duration_max_s = 12.0) {
    using namespace synthdetail;
    const double duration_s = rng.uniform(duration_min_s, duration_max_s);
    const std::size_t n = static_cast<std::size_t>(std::lround(duration_s * kSampleRate));

    SynthClip clip;
    clip.fine = FineLabel::normal;
    if (cls == Label::abnormal) {
        const double u = rng.uniform();
        clip.fine = u < 0.4 ? FineLabel::crackle : (u < 0.8 ? FineLabel::wheeze : FineLabel::both);
    }

    // breath-rate amplitude-modulated low-pass noise, shaped by the
    // patient's tilt and gain
    std::vector<double> x(n);
    for (double& v : x) v = rng.normal();
    one_pole_lowpass(x, 250.0 * std::pow(2.0, prof.spectral_tilt));
    const double gain = 0.06 * std::pow(10.0, prof.gain_db / 20.0);
    const double breath_phase = rng.uniform(0.0, 2.0 * kPi);
    for (std::size_t k = 0; k < n; ++k) {
        const double ph = 2.0 * kPi * prof.breath_rate_hz * static_cast<double>(k) / kSampleRate +
                          breath_phase;
        const double env = 0.2 + 0.8 * std::pow(0.5 - 0.5 * std::cos(ph), 1.5);
        x[k] *= gain * env;
    }

    const double base = rms(x);
    if (clip.fine == FineLabel::wheeze || clip.fine == FineLabel::both)
        add_wheeze(x, base, rng);
    if (clip.fine == FineLabel::crackle || clip.fine == FineLabel::both)
        add_crackles(x, base, duration_s, rng);

    if (domain == Domain::mobile) {
        one_pole_highpass(x, 100.0, 1);
        one_pole_lowpass(x, 4000.0, 1);
        const double noise_rms = rms(x) / 10.0;  // 20 dB SNR
        for (double& v : x) v += noise_rms * rng.normal();
        for (double& v : x) v *= std::pow(10.0, -4.0 / 20.0);  // mobile gain offset
    }

    clip.wave.sample_rate = kSampleRate;
    clip.wave.samples = std::move(x);
    return clip;
}

struct CorpusPaths {
    std::string wav_dir;
    std::string metadata_csv;
};

// Writes 16 kHz mono 16-bit PCM WAVs plus a metadata CSV whose paths are
// relative to the CSV location. Counts are exact: every patient gets
// clips_per_patient_per_domain stethoscope clips with
// round(clips * abnormal_fraction) abnormal among them, and the first
// round(n_patients * mobile_fraction) patients get the same in the mobile
// domain, mirroring the device structure where mobile patients are a
// subset of stethoscope patients.
inline CorpusPaths generate_corpus(const CorpusConfig& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    const fs::path root(out_dir);
    const fs::path wav_dir = root / "wav";
    std::error_code ec;
    fs::create_directories(wav_dir, ec);
    if (ec) throw std::runtime_error("generate_corpus: cannot create " + wav_dir.string());

    const std::size_t n_mobile =
        static_cast<std::size_t>(std::lround(cfg.mobile_fraction * static_cast<double>(cfg.n_patients)));
    const std::size_t n_ab_per =
        static_cast<std::size_t>(std::lround(cfg.abnormal_fraction *
                                             static_cast<double>(cfg.clips_per_patient_per_domain)));

    std::ostringstream csv;
    csv << "sample_id,path,fine_label,label,patient_id,domain\n";

    for (std::size_t p = 0; p < cfg.n_patients; ++p) {
        char pid[16];
        std::snprintf(pid, sizeof(pid), "p%03zu", p);
        const PatientProfile prof = make_patient_profile(pid, cfg.seed);
        const bool has_mobile = p < n_mobile;
        for (Domain dom : {Domain::stethoscope, Domain::mobile}) {
            if (dom == Domain::mobile && !has_mobile) continue;
            for (std::size_t c = 0; c < cfg.clips_per_patient_per_domain; ++c) {
                const Label cls = c < n_ab_per ? Label::abnormal : Label::normal;
                std::ostringstream sid;
                sid << pid << '_' << (dom == Domain::mobile ? "mobile" : "steth") << '_';
                sid << (c < 10 ? "0" : "") << c;
                const std::string sample_id = sid.str();
                Rng rng(derive_seed(cfg.seed, sample_id));
                SynthClip clip =
                    synth_clip(cls, prof, dom, rng, cfg.duration_min_s, cfg.duration_max_s);
                const std::string rel = "wav/" + sample_id + ".wav";
                write_wav((root / rel).string(), clip.wave);
                csv << sample_id << ',' << rel << ',' << to_string(clip.fine) << ','
                    << to_string(cls) << ',' << pid << ',' << to_string(dom) << '\n';
            }
        }
    }

    const fs::path csv_path = root / "metadata.csv";
    std::ofstream f(csv_path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("generate_corpus: cannot write " + csv_path.string());
    f << csv.str();
    if (!f) throw std::runtime_error("generate_corpus: short write on " + csv_path.string());

    return {wav_dir.string(), csv_path.string()};
}

// Strict metadata reader: exact header, exact enum strings, every file must
// exist. Relative paths are resolved against the CSV's directory.
inline std::vector<SampleMeta> load_metadata(const std::string& csv_path) {
    std::ifstream f(csv_path);
    if (!f) throw std::runtime_error("cannot open metadata csv: " + csv_path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("empty metadata csv: " + csv_path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "sample_id,path,fine_label,label,patient_id,domain")
        throw std::runtime_error("metadata csv has unexpected header: '" + line + "'");

    const std::filesystem::path base = std::filesystem::path(csv_path).parent_path();
    std::vector<SampleMeta> index;
    std::size_t row = 1;
    while (std::getline(f, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        const std::string where = "metadata csv row " + std::to_string(row);
        if (fields.size() != 6)
            throw std::runtime_error(where + ": expected 6 columns, got " +
                                     std::to_string(fields.size()));
        SampleMeta m;
        m.sample_id = fields[0];
        std::filesystem::path p(fields[1]);
        if (p.is_relative()) p = base / p;
        m.path = p.string();
        try {
            m.fine_label = fine_label_from_string(fields[2]);
            m.label = label_from_string(fields[3]);
            m.domain = domain_from_string(fields[5]);
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(where + ": " + e.what());
        }
        m.patient_id = fields[4];
        if (!std::filesystem::exists(m.path))
            throw std::runtime_error(where + ": missing file " + m.path);
        index.push_back(std::move(m));
    }
    if (index.empty()) throw std::runtime_error("empty dataset: " + csv_path);

    const ValidationReport report = validate_dataset(index);
    if (!report.passes()) {
        std::ostringstream msg;
        msg << "metadata validation failed:";
        for (const auto& id : report.duplicate_ids) msg << " duplicate sample_id " << id << ';';
        for (const auto& path : report.missing_files) msg << " missing file " << path << ';';
        for (const auto& id : report.label_contradictions)
            msg << " label/fine-label contradiction in " << id << ';';
        for (const auto& id : report.empty_patient_ids) msg << " empty patient_id in " << id << ';';
        throw std::runtime_error(msg.str());
    }
    return index;
}

}  // namespace pdscl
