#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kpu/model/student.hpp"
#include "kpu/teachers/teacher.hpp"

namespace kpu {

struct LossWeights {
    double lambda1 = 1.0;    // global cosine
    double lambda2 = 0.9;    // grid cosine
    double lambda3 = 0.1;    // grid smooth-L1
    double lambda_rec = 1.0; // reconstruction term in the total
    double smooth_l1_beta = 1.0;

    void validate() const;
    bool operator==(const LossWeights&) const = default;
};

/// mean over rows of (1 - cos) along the last axis; degenerate rows count as 1.
template <typename T>
Tensor<T> cos_loss(const Tensor<T>& a, const Tensor<T>& b);

/// lambda1 cos(x1, x2) + lambda2 cos(V1, V2) + lambda3 smoothL1(V1, V2).
/// The global term is dropped when either side has no global feature.
template <typename T>
Tensor<T> l_align(const FeatureSet<T>& pred, const FeatureSet<T>& target, const LossWeights& w);

/// L_t2s + L_s2t + lambda L_rec.
template <typename T>
Tensor<T> l_total(const Tensor<T>& s2t, const Tensor<T>& t2s, const Tensor<T>& rec, double lambda);

struct ObjectiveFlags {
    bool unification_on = true;    // L_t2s
    bool reconstruction_on = true; // L_rec
};

/// One teacher's loss terms, each averaged over that teacher's batch.
template <typename T>
struct TeacherTerms {
    std::string id;
    Tensor<T> s2t;
    std::optional<Tensor<T>> t2s;
    std::optional<Tensor<T>> rec;
};

/// Runs the student once per image of the teacher's batch and builds every enabled term on the active tape.
/// Teacher features enter as constants.
template <typename T>
TeacherTerms<T> teacher_terms(const StudentModel<T>& model, const Teacher<T>& teacher,
                              const std::vector<Tensor<T>>& images, const LossWeights& w,
                              const ObjectiveFlags& flags);

struct LossBreakdown {
    struct Entry {
        std::string id;
        double weight = 0.0;
        bool active = false;
        double s2t = 0.0;
        double t2s = 0.0;
        double rec = 0.0;
    };
    std::vector<Entry> per_teacher;
    double l_s2t = 0.0;
    double l_t2s = 0.0;
    double l_rec = 0.0;
    double l_kpu = 0.0;
};

template <typename T>
struct ObjectiveValue {
    Tensor<T> total;
    Tensor<T> l_s2t, l_t2s, l_rec;
    LossBreakdown breakdown;
};

/// Weighted sums over teachers (weights from the weighting strategy; 1/T for equal),
/// then L_KPU. `terms` holds only active teachers; `ids`/`weights` cover all of them.
template <typename T>
ObjectiveValue<T> combine_terms(const std::vector<TeacherTerms<T>>& terms, const std::vector<std::string>& ids,
                                const std::vector<double>& weights, const LossWeights& w);

// Single-image, equal-weight forms of the three loss families.
template <typename T>
Tensor<T> l_s2t(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers, const Tensor<T>& image,
                const LossWeights& w);
template <typename T>
Tensor<T> l_t2s(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers, const Tensor<T>& image,
                const LossWeights& w);
template <typename T>
Tensor<T> l_rec(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers, const Tensor<T>& image,
                const LossWeights& w);

} // namespace kpu
