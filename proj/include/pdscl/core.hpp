#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace pdscl {

// Dense row-major matrix of doubles. All numerical code in this project
// works on flat storage with plain loops.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    bool empty() const { return data.empty(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// Two-class task: normal=0, abnormal=1, fixed everywhere.
enum class Label : int { normal = 0, abnormal = 1 };

enum class FineLabel : int { normal = 0, crackle = 1, wheeze = 2, both = 3 };

enum class Domain : int { stethoscope = 0, mobile = 1 };

inline Label label_of_fine(FineLabel f) {
    return f == FineLabel::normal ? Label::normal : Label::abnormal;
}

inline const char* to_string(Label l) { return l == Label::normal ? "normal" : "abnormal"; }

inline const char* to_string(FineLabel f) {
    switch (f) {
        case FineLabel::normal: return "normal";
        case FineLabel::crackle: return "crackle";
        case FineLabel::wheeze: return "wheeze";
        case FineLabel::both: return "both";
    }
    return "?";
}

inline const char* to_string(Domain d) { return d == Domain::stethoscope ? "stethoscope" : "mobile"; }

inline Label label_from_string(const std::string& s) {
    if (s == "normal") return Label::normal;
    if (s == "abnormal") return Label::abnormal;
    throw std::invalid_argument("unknown label string: '" + s + "'");
}

inline FineLabel fine_label_from_string(const std::string& s) {
    if (s == "normal") return FineLabel::normal;
    if (s == "crackle") return FineLabel::crackle;
    if (s == "wheeze") return FineLabel::wheeze;
    if (s == "both") return FineLabel::both;
    throw std::invalid_argument("unknown fine label string: '" + s + "'");
}

inline Domain domain_from_string(const std::string& s) {
    if (s == "stethoscope") return Domain::stethoscope;
    if (s == "mobile") return Domain::mobile;
    throw std::invalid_argument("unknown domain string: '" + s + "'");
}

// One recording's metadata. Immutable value object.
struct SampleMeta {
    std::string sample_id;
    std::string path;
    Label label = Label::normal;
    FineLabel fine_label = FineLabel::normal;
    std::string patient_id;
    Domain domain = Domain::stethoscope;
};

// Raw audio. After ingestion sample_rate is always 16000.
struct Waveform {
    std::vector<double> samples;
    int sample_rate = 16000;
};

// Log-Mel feature matrix, frames x mels.
struct Spectrogram {
    Matrix values;

    std::size_t frames() const { return values.rows; }
    std::size_t mels() const { return values.cols; }
};

// Per-batch metadata used by the losses: class indices, patient ids and
// domain ids, all of length N.
struct BatchMeta {
    std::vector<int> labels;       // 0=normal, 1=abnormal
    std::vector<std::string> patient_ids;
    std::vector<int> domain_ids;   // 0=stethoscope, 1=mobile

    std::size_t size() const { return labels.size(); }

    bool consistent() const {
        return patient_ids.size() == labels.size() && domain_ids.size() == labels.size();
    }
};

inline BatchMeta make_batch_meta(std::span<const SampleMeta> samples) {
    BatchMeta m;
    m.labels.reserve(samples.size());
    m.patient_ids.reserve(samples.size());
    m.domain_ids.reserve(samples.size());
    for (const auto& s : samples) {
        m.labels.push_back(static_cast<int>(s.label));
        m.patient_ids.push_back(s.patient_id);
        m.domain_ids.push_back(static_cast<int>(s.domain));
    }
    return m;
}

// Report-style dataset validation: never aborts, collects every problem.
struct ValidationReport {
    std::vector<std::string> duplicate_ids;
    std::vector<std::string> missing_files;
    std::vector<std::string> label_contradictions;
    std::vector<std::string> empty_patient_ids;

    bool passes() const {
        return duplicate_ids.empty() && missing_files.empty() &&
               label_contradictions.empty() && empty_patient_ids.empty();
    }
};

inline ValidationReport validate_dataset(std::span<const SampleMeta> index) {
    ValidationReport report;
    std::unordered_set<std::string> seen;
    for (const auto& s : index) {
        if (!seen.insert(s.sample_id).second) report.duplicate_ids.push_back(s.sample_id);
        if (!s.path.empty() && !std::filesystem::exists(s.path))
            report.missing_files.push_back(s.path);
        const bool fine_is_normal = s.fine_label == FineLabel::normal;
        const bool label_is_normal = s.label == Label::normal;
        if (fine_is_normal != label_is_normal)
            report.label_contradictions.push_back(s.sample_id);
        if (s.patient_id.empty()) report.empty_patient_ids.push_back(s.sample_id);
    }
    return report;
}

}  // namespace pdscl
