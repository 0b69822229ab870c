#include "kpu/objective/losses.hpp"

#include <cmath>
#include <map>

namespace kpu {

void LossWeights::validate() const {
    for (double v : {lambda1, lambda2, lambda3, lambda_rec, smooth_l1_beta})
        if (!std::isfinite(v)) throw ConfigError("loss_weights: all weights must be finite");
    if (!(smooth_l1_beta > 0.0)) throw ConfigError("loss_weights: smooth_l1_beta must be positive");
}

template <typename T>
Tensor<T> cos_loss(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("cos_loss: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    return add_scalar(scale(mean(row_cosine(a, b)), T(-1)), T(1));
}

template <typename T>
Tensor<T> l_align(const FeatureSet<T>& pred, const FeatureSet<T>& target, const LossWeights& w) {
    if (!comparable(pred.space, target.space))
        throw Error("l_align: cannot compare " + pred.space.str() + " with " + target.space.str());
    if (pred.grid.shape() != target.grid.shape())
        throw ShapeError("l_align: grid shapes " + to_string(pred.grid.shape()) + " vs " +
                         to_string(target.grid.shape()));
    Tensor<T> loss = add(scale(cos_loss(pred.grid, target.grid), T(w.lambda2)),
                         scale(smooth_l1(pred.grid, target.grid, T(w.smooth_l1_beta)), T(w.lambda3)));
    if (pred.global && target.global) loss = add(scale(cos_loss(*pred.global, *target.global), T(w.lambda1)), loss);
    return loss;
}

template <typename T>
Tensor<T> l_total(const Tensor<T>& s2t, const Tensor<T>& t2s, const Tensor<T>& rec, double lambda) {
    return add(add(t2s, s2t), scale(rec, T(lambda)));
}

namespace {

template <typename T>
Tensor<T> batch_mean(const std::vector<Tensor<T>>& per_image) {
    Tensor<T> acc = per_image.front();
    for (std::size_t i = 1; i < per_image.size(); ++i) acc = add(acc, per_image[i]);
    return per_image.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(per_image.size()));
}

template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& values, const std::vector<double>& weights) {
    std::optional<Tensor<T>> acc;
    for (std::size_t i = 0; i < values.size(); ++i) {
        Tensor<T> term = scale(values[i], static_cast<T>(weights[i]));
        acc = acc ? add(*acc, term) : term;
    }
    return acc ? *acc : Tensor<T>::scalar(T(0));
}

} // namespace

template <typename T>
TeacherTerms<T> teacher_terms(const StudentModel<T>& model, const Teacher<T>& teacher,
                              const std::vector<Tensor<T>>& images, const LossWeights& w,
                              const ObjectiveFlags& flags) {
    if (images.empty()) throw Error("teacher_terms: empty batch for '" + teacher.id() + "'");
    const std::string& id = teacher.id();
    const TeacherSpec& spec = teacher.spec();
    std::vector<Tensor<T>> s2t, t2s, rec;
    for (const auto& image : images) {
        const FeatureSet<T> target = teacher.forward(image);
        const StudentOutput<T> out = model.forward(image);
        s2t.push_back(l_align(model.project_s2t(id, out), target, w));
        if (flags.unification_on || flags.reconstruction_on) {
            const FeatureSet<T> unified =
                model.project_t2s(id, target, out.canonical.height(), out.canonical.width());
            if (flags.unification_on) t2s.push_back(l_align(out.canonical, unified, w));
            if (flags.reconstruction_on)
                rec.push_back(l_align(target, model.reconstruct(id, unified, spec.height, spec.width), w));
        }
    }
    TeacherTerms<T> terms{id, batch_mean(s2t), std::nullopt, std::nullopt};
    if (!t2s.empty()) terms.t2s = batch_mean(t2s);
    if (!rec.empty()) terms.rec = batch_mean(rec);
    return terms;
}

template <typename T>
ObjectiveValue<T> combine_terms(const std::vector<TeacherTerms<T>>& terms, const std::vector<std::string>& ids,
                                const std::vector<double>& weights, const LossWeights& w) {
    if (ids.size() != weights.size()) throw Error("combine_terms: ids and weights differ in length");
    std::map<std::string, double> weight_of;
    for (std::size_t i = 0; i < ids.size(); ++i) weight_of[ids[i]] = weights[i];

    std::vector<Tensor<T>> s2t, t2s, rec;
    std::vector<double> ws, wt, wr;
    for (const auto& t : terms) {
        const double wi = weight_of.at(t.id);
        s2t.push_back(t.s2t);
        ws.push_back(wi);
        if (t.t2s) {
            t2s.push_back(*t.t2s);
            wt.push_back(wi);
        }
        if (t.rec) {
            rec.push_back(*t.rec);
            wr.push_back(wi);
        }
    }
    ObjectiveValue<T> v;
    v.l_s2t = weighted_sum(s2t, ws);
    v.l_t2s = weighted_sum(t2s, wt);
    v.l_rec = weighted_sum(rec, wr);
    v.total = l_total(v.l_s2t, v.l_t2s, v.l_rec, w.lambda_rec);

    for (std::size_t i = 0; i < ids.size(); ++i) {
        LossBreakdown::Entry e{ids[i], weights[i], false, 0.0, 0.0, 0.0};
        for (const auto& t : terms) {
            if (t.id != ids[i]) continue;
            e.active = true;
            e.s2t = static_cast<double>(t.s2t.item());
            if (t.t2s) e.t2s = static_cast<double>(t.t2s->item());
            if (t.rec) e.rec = static_cast<double>(t.rec->item());
        }
        v.breakdown.per_teacher.push_back(e);
    }
    v.breakdown.l_s2t = static_cast<double>(v.l_s2t.item());
    v.breakdown.l_t2s = static_cast<double>(v.l_t2s.item());
    v.breakdown.l_rec = static_cast<double>(v.l_rec.item());
    v.breakdown.l_kpu = static_cast<double>(v.total.item());
    return v;
}

namespace {

enum class Family { s2t, t2s, rec };

template <typename T>
Tensor<T> equal_average(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers, const Tensor<T>& image,
                        const LossWeights& w, Family family) {
    const ObjectiveFlags flags{family == Family::t2s, family == Family::rec};
    std::vector<Tensor<T>> parts;
    for (const auto& t : teachers) {
        TeacherTerms<T> terms = teacher_terms(model, t, {image}, w, flags);
        if (family == Family::s2t) parts.push_back(terms.s2t);
        else parts.push_back(family == Family::t2s ? *terms.t2s : *terms.rec);
    }
    return weighted_sum(parts, std::vector<double>(parts.size(), 1.0 / static_cast<double>(parts.size())));
}

} // namespace

template <typename T>
Tensor<T> l_s2t(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers, const Tensor<T>& image,
                const LossWeights& w) {
    return equal_average(model, teachers, image, w, Family::s2t);
}

template <typename T>
Tensor<T> l_t2s(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers, const Tensor<T>& image,
                const LossWeights& w) {
    return equal_average(model, teachers, image, w, Family::t2s);
}

template <typename T>
Tensor<T> l_rec(const StudentModel<T>& model, const std::vector<Teacher<T>>& teachers, const Tensor<T>& image,
                const LossWeights& w) {
    return equal_average(model, teachers, image, w, Family::rec);
}

#define KPU_INSTANTIATE(T)                                                                                      \
    template Tensor<T> cos_loss(const Tensor<T>&, const Tensor<T>&);                                            \
    template Tensor<T> l_align(const FeatureSet<T>&, const FeatureSet<T>&, const LossWeights&);                 \
    template Tensor<T> l_total(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);                   \
    template TeacherTerms<T> teacher_terms(const StudentModel<T>&, const Teacher<T>&,                           \
                                           const std::vector<Tensor<T>>&, const LossWeights&,                   \
                                           const ObjectiveFlags&);                                              \
    template ObjectiveValue<T> combine_terms(const std::vector<TeacherTerms<T>>&,                               \
                                             const std::vector<std::string>&, const std::vector<double>&,       \
                                             const LossWeights&);                                               \
    template Tensor<T> l_s2t(const StudentModel<T>&, const std::vector<Teacher<T>>&, const Tensor<T>&,          \
                             const LossWeights&);                                                               \
    template Tensor<T> l_t2s(const StudentModel<T>&, const std::vector<Teacher<T>>&, const Tensor<T>&,          \
                             const LossWeights&);                                                               \
    template Tensor<T> l_rec(const StudentModel<T>&, const std::vector<Teacher<T>>&, const Tensor<T>&,          \
                             const LossWeights&);

KPU_INSTANTIATE(float)
KPU_INSTANTIATE(double)
#undef KPU_INSTANTIATE

} // namespace kpu
