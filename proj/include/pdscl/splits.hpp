#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pdscl/core.hpp"
#include "pdscl/rng.hpp"

// Leave-subject-out k-fold cross-validation. All recordings of a patient
// fall entirely inside or entirely outside a fold; validation sets contain
// mobile-domain recordings only, and a held-out patient's stethoscope
// clips are dropped for that fold rather than leaking into training.

namespace pdscl {

struct FoldAssignment {
    std::map<std::string, int> fold_of_patient;
    int k = 0;
};

inline FoldAssignment make_folds(std::span<const std::string> patient_ids, int k,
                                 std::uint64_t seed) {
    if (k <= 0) throw std::invalid_argument("make_folds: k must be positive");
    std::vector<std::string> patients(patient_ids.begin(), patient_ids.end());
    std::sort(patients.begin(), patients.end());
    patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
    if (patients.size() < static_cast<std::size_t>(k))
        throw std::invalid_argument("make_folds: fewer patients (" +
                                    std::to_string(patients.size()) + ") than folds (" +
                                    std::to_string(k) + ")");
    Rng rng(derive_seed(seed, "folds"));
    rng.shuffle(patients);
    FoldAssignment fa;
    fa.k = k;
    for (std::size_t i = 0; i < patients.size(); ++i)
        fa.fold_of_patient[patients[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    return fa;
}

// train: every sample (both domains) of patients outside the fold.
// val: mobile samples of patients inside the fold.
inline std::pair<std::vector<SampleMeta>, std::vector<SampleMeta>> fold_partition(
    std::span<const SampleMeta> index, const FoldAssignment& fa, int fold) {
    if (fold < 0 || fold >= fa.k)
        throw std::invalid_argument("fold_partition: fold index out of range");
    std::vector<SampleMeta> train, val;
    for (const auto& s : index) {
        const auto it = fa.fold_of_patient.find(s.patient_id);
        if (it == fa.fold_of_patient.end())
            throw std::invalid_argument("fold_partition: patient '" + s.patient_id +
                                        "' has no fold assignment");
        if (it->second != fold) {
            train.push_back(s);
        } else if (s.domain == Domain::mobile) {
            val.push_back(s);
        }
        // held-out patients' stethoscope clips are discarded entirely
    }
    return {std::move(train), std::move(val)};
}

inline void write_fold_manifest(const std::string& path, const FoldAssignment& fa) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write fold manifest: " + path);
    f << "patient_id,fold\n";
    for (const auto& [patient, fold] : fa.fold_of_patient) f << patient << ',' << fold << '\n';
    if (!f) throw std::runtime_error("short write on fold manifest: " + path);
}

}  // namespace pdscl
