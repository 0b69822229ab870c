#include "kpu/gradcheck/suite.hpp"

#include "kpu/data/synth.hpp"
#include "kpu/model/student.hpp"
#include "kpu/objective/losses.hpp"
#include "kpu/teachers/teacher.hpp"
#include "kpu/train/trainer.hpp"

namespace kpu {

namespace {

using D = double;
using Fn = std::function<Tensor<D>()>;

class SuiteBuilder {
public:
    explicit SuiteBuilder(const GradCheckConfig& cfg) : cfg_(cfg), rng_(0x67726164ull) {}

    Tensor<D> leaf(Shape shape, double lo = -1.0, double hi = 1.0) {
        std::vector<D> v(numel(shape));
        for (auto& x : v) x = rng_.uniform(lo, hi);
        return Tensor<D>(std::move(shape), std::move(v), true);
    }

    /// sum(out * R) with a fixed random R, so every output entry carries a distinct weight.
    Fn project(std::function<Tensor<D>()> out) {
        Tensor<D> probe;
        {
            NoTapeScope<D> no_tape;
            const Tensor<D> sample = out();
            std::vector<D> r(sample.size());
            for (auto& x : r) x = rng_.uniform(-1.0, 1.0);
            probe = Tensor<D>(sample.shape(), r);
        }
        return [out, probe] { return sum(mul(out(), probe)); };
    }

    void check(const std::string& name, const Fn& f, const NamedTensors<D>& params, std::size_t max_entries = 0) {
        result_.cases.push_back({name, grad_check<D>(f, params, cfg_.step, cfg_.tolerance, max_entries)});
        const auto& r = result_.cases.back().report;
        if (!r.passed) result_.passed = false;
        if (r.worst > result_.worst || result_.worst_case.empty()) {
            result_.worst = r.worst;
            result_.worst_case = name;
            result_.worst_param = r.worst_param;
        }
    }

    void op(const std::string& name, std::function<Tensor<D>()> out, const NamedTensors<D>& inputs) {
        check("op:" + name, project(std::move(out)), inputs);
    }

    void layer(const std::string& name, std::function<Tensor<D>()> out, NamedTensors<D> params,
               const NamedTensors<D>& inputs = {}) {
        for (const auto& i : inputs) params.push_back(i);
        check("layer:" + name, project(std::move(out)), params);
    }

    CounterRng& rng() { return rng_; }
    GradSuiteResult take() { return std::move(result_); }

private:
    GradCheckConfig cfg_;
    CounterRng rng_;
    GradSuiteResult result_;
};

void operator_cases(SuiteBuilder& s) {
    auto a = s.leaf({3, 4}), b = s.leaf({4, 5}), c = s.leaf({3, 4});
    s.op("matmul", [=] { return matmul(a, b); }, {{"a", a}, {"b", b}});
    auto a3 = s.leaf({2, 3, 4});
    s.op("matmul_batched", [=] { return matmul(a3, b); }, {{"a", a3}, {"b", b}});
    s.op("transpose", [=] { return transpose(a); }, {{"a", a}});
    s.op("add", [=] { return add(a, c); }, {{"a", a}, {"b", c}});
    s.op("sub", [=] { return sub(a, c); }, {{"a", a}, {"b", c}});
    s.op("mul", [=] { return mul(a, c); }, {{"a", a}, {"b", c}});
    s.op("scale", [=] { return scale(a, 1.7); }, {{"a", a}});
    s.op("add_scalar", [=] { return add_scalar(a, 0.3); }, {{"a", a}});
    auto g = s.leaf({1});
    s.op("mul_scalar", [=] { return mul_scalar(a, g); }, {{"a", a}, {"s", g}});
    auto row = s.leaf({4});
    s.op("broadcast_to", [=] { return broadcast_to(row, {3, 4}); }, {{"a", row}});
    s.op("sum", [=] { return sum(a); }, {{"a", a}});
    s.op("mean", [=] { return mean(a); }, {{"a", a}});
    s.op("mean_leading", [=] { return mean_leading(a3); }, {{"a", a3}});
    auto c2 = s.leaf({2, 4});
    s.op("concat_rows", [=] { return concat<D>({a, c2}, 0); }, {{"a", a}, {"b", c2}});
    auto c3 = s.leaf({3, 2});
    s.op("concat_last", [=] { return concat<D>({a, c3}, 1); }, {{"a", a}, {"b", c3}});
    s.op("slice_rows", [=] { return slice(a, 0, 1, 3); }, {{"a", a}});
    s.op("slice_last", [=] { return slice(a, 1, 1, 3); }, {{"a", a}});
    s.op("reshape", [=] { return reshape(a, {2, 6}); }, {{"a", a}});
    s.op("softmax", [=] { return softmax(a); }, {{"a", a}});
    s.op("gelu", [=] { return gelu(scale(a, 2.0)); }, {{"a", a}});
    s.op("relu", [=] { return relu(a); }, {{"a", a}});
    auto pos = s.leaf({3, 4}, 0.5, 2.0);
    s.op("sqrt", [=] { return sqrt(pos); }, {{"a", pos}});
    s.op("square", [=] { return square(a); }, {{"a", a}});
    s.op("layer_norm", [=] { return layer_norm(a); }, {{"a", a}});
    auto x = s.leaf({2, 5, 5}), w = s.leaf({3, 2, 3, 3}), bias = s.leaf({3});
    s.op("conv2d_stride1", [=] { return conv2d(x, w, bias, 1, 1); }, {{"x", x}, {"w", w}, {"b", bias}});
    s.op("conv2d_stride2", [=] { return conv2d(x, w, bias, 2, 1); }, {{"x", x}, {"w", w}, {"b", bias}});
    auto grid = s.leaf({3, 3, 2});
    s.op("bilinear_up", [=] { return bilinear_resize(grid, 5, 4); }, {{"grid", grid}});
    s.op("bilinear_down", [=] { return bilinear_resize(grid, 2, 2); }, {{"grid", grid}});
    s.op("row_cosine", [=] { return row_cosine(a, c); }, {{"a", a}, {"b", c}});
    // Differences spread over both the quadratic and linear regimes.
    auto big = s.leaf({3, 4}, -3.0, 3.0);
    s.op("smooth_l1", [=] { return smooth_l1(big, c, 1.0); }, {{"a", big}, {"b", c}});
    s.op("cos_loss", [=] { return cos_loss(a, c); }, {{"a", a}, {"b", c}});
}

void layer_cases(SuiteBuilder& s) {
    auto& rng = s.rng();
    auto x = s.leaf({5, 6});
    {
        nn::Linear<D> lin(6, 4, rng);
        NamedTensors<D> p;
        lin.collect(p, "linear");
        s.layer("linear", [=] { return lin(x); }, p, {{"x", x}});
    }
    {
        nn::LayerNorm<D> ln(6);
        NamedTensors<D> p;
        ln.collect(p, "norm");
        // Non-trivial affine parameters.
        for (auto& [n, t] : p)
            for (auto& v : t.mutable_data()) v += rng.uniform(-0.5, 0.5);
        s.layer("layer_norm", [=] { return ln(x); }, p, {{"x", x}});
    }
    {
        nn::MlpHead<D> head(6, 3, rng);
        NamedTensors<D> p;
        head.collect(p, "mlp");
        s.layer("mlp_head", [=] { return head(x); }, p, {{"x", x}});
    }
    {
        nn::SelfAttention<D> attn(6, 2, rng);
        NamedTensors<D> p;
        attn.collect(p, "attn");
        s.layer("self_attention", [=] { return attn(x); }, p, {{"x", x}});
    }
    {
        auto kv = s.leaf({3, 6});
        nn::CrossAttentionBlock<D> block(6, 3, 0.7, rng);
        NamedTensors<D> p;
        block.collect(p, "cross");
        s.layer("cross_attention", [=] { return block(x, kv); }, p, {{"q", x}, {"kv", kv}});
    }
    {
        auto img = s.leaf({3, 6, 6});
        nn::Conv2d<D> conv(3, 4, 3, 2, rng);
        NamedTensors<D> p;
        conv.collect(p, "conv");
        s.layer("conv2d", [=] { return conv(img); }, p, {{"x", img}});
        nn::PatchEmbed<D> embed(3, 3, 5, rng);
        NamedTensors<D> pe;
        embed.collect(pe, "patch");
        s.layer("patch_embed", [=] { return embed(img); }, pe, {{"x", img}});
    }
    {
        nn::VitBlock<D> block(6, 2, 2, rng);
        NamedTensors<D> p;
        block.collect(p, "vit");
        s.layer("vit_block", [=] { return block(x); }, p, {{"x", x}});
    }
    {
        AdapterConfig ac{2, {2, 4, 8}, 0.5, 4, 4};
        auto img = s.leaf({3, 8, 8}, 0.0, 1.0);
        nn::SpatialPrior<D> spm(ac, 3, 6, rng);
        NamedTensors<D> p;
        spm.collect(p, "spm");
        s.layer("spatial_prior",
                [=] {
                    std::vector<Tensor<D>> flat;
                    for (const auto& m : spm(img)) flat.push_back(reshape(m, {m.size()}));
                    return concat<D>(flat, 0);
                },
                p, {{"x", img}});
    }
    {
        auto c = s.leaf({4, 6});
        nn::InteractionBlock<D> block(6, 2, 0.6, rng);
        NamedTensors<D> p;
        block.collect(p, "interact");
        s.layer("injector", [=] { return block.inject(x, c); }, p, {{"x", x}, {"c", c}});
        s.layer("extractor", [=] { return block.extract(c, x); }, p, {{"x", x}, {"c", c}});
    }
}

void graph_case(SuiteBuilder& s, std::size_t max_entries) {
    const TrainConfig cfg = grad_toy_config();
    std::vector<Teacher<D>> teachers;
    for (const auto& spec : cfg.zoo) teachers.push_back(build_teacher<D>(spec, cfg.backbone));
    StudentModel<D> model(cfg.backbone, cfg.adapter, 11);
    for (const auto& spec : cfg.zoo) model.add_teacher(spec.id, spec.geometry());
    sentinel_init_student(teachers.front(), model);
    TrainablePolicy everything{false, true, true};
    model.apply_policy(everything);

    std::vector<std::vector<Tensor<D>>> batches;
    for (const auto& spec : cfg.zoo) batches.push_back(generate_batch<D>(cfg.data, stream_batch_index(spec.id, 0), spec.batch_size));
    std::vector<std::string> ids;
    for (const auto& t : teachers) ids.push_back(t.id());
    const std::vector<double> weights(teachers.size(), 1.0 / static_cast<double>(teachers.size()));

    Fn f = [=] {
        std::vector<TeacherTerms<D>> terms;
        for (std::size_t i = 0; i < teachers.size(); ++i)
            terms.push_back(teacher_terms(model, teachers[i], batches[i], cfg.loss_weights, ObjectiveFlags{}));
        return combine_terms(terms, ids, weights, cfg.loss_weights).total;
    };
    s.check("graph:l_kpu", f, model.parameters(), max_entries);
}

} // namespace

TrainConfig grad_toy_config() {
    TrainConfig c;
    c.backbone = BackboneConfig{8, 4, 2, 8, 2, 3, 2, true};
    c.adapter = AdapterConfig{2, {2, 4, 8}, 0.5, 4, 4};
    c.zoo = {TeacherSpec{"sentinel", 8, 2, 2, true, 1.0, TeacherArch::tiny_vit, 101, 8, 8, 1, true},
             TeacherSpec{"wide", 6, 4, 4, false, 3.0, TeacherArch::tiny_conv, 202, 8, 8, 1, false}};
    c.data.height = c.data.width = 8;
    return c;
}

GradSuiteResult run_grad_suite(const GradCheckConfig& config) {
    SuiteBuilder s(config);
    operator_cases(s);
    layer_cases(s);
    graph_case(s, config.max_entries);
    return s.take();
}

} // namespace kpu
