#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "mtdgp/architecture.hpp"
#include "mtdgp/core/rng.hpp"

#include "fd_check.hpp"

using namespace mtdgp;
namespace ad = mtdgp::ad;

namespace {

ModelSpec small_mmdgp() {
    ModelSpec spec;
    spec.variant = Variant::mMDGP;
    spec.tasks = 2;
    spec.input_dim = 2;
    spec.output_dim = 1;
    spec.shared_units = {3};
    spec.task_units = {{2}, {2}};
    spec.inducing_count = 4;
    return spec;
}

InitRecipe toy_recipe(RngStream& s, Index tasks, Index d, Index n) {
    InitRecipe recipe;
    for (Index t = 0; t < tasks; ++t)
        recipe.task_inputs.push_back(draw_standard_normal(s, n, d));
    return recipe;
}

// Randomize the variational state so structural identities are tested away
// from the symmetric init.
void scramble_posteriors(Model& model, RngStream& s) {
    auto scramble = [&](SparseGPUnit& u) {
        u.posterior.mean.unconstrained() =
            0.5 * draw_standard_normal(s, u.num_inducing(), u.output_dim());
        for (ad::Parameter& l : u.posterior.chol_cov) {
            Matrix raw = 0.3 * draw_standard_normal(s, u.num_inducing(), u.num_inducing());
            raw.diagonal().array() = raw.diagonal().array().abs() + 0.2;
            l = ad::Parameter::from_unconstrained(l.name(), std::move(raw),
                                                  ad::Constraint::tril_cov);
        }
    };
    for (SparseGPUnit& u : model.shared_layer) scramble(u);
    for (auto& layer : model.task_layers)
        for (SparseGPUnit& u : layer) scramble(u);
    for (SparseGPUnit& u : model.heads) scramble(u);
    if (model.coreg_head) {
        CoregionalHead& h = *model.coreg_head;
        h.posterior.mean.unconstrained() =
            0.5 * draw_standard_normal(s, h.num_inducing(), h.output_dim());
        for (ad::Parameter& l : h.posterior.chol_cov) {
            Matrix raw = 0.3 * draw_standard_normal(s, h.num_inducing(), h.num_inducing());
            raw.diagonal().array() = raw.diagonal().array().abs() + 0.2;
            l = ad::Parameter::from_unconstrained(l.name(), std::move(raw),
                                                  ad::Constraint::tril_cov);
        }
    }
}

std::vector<Index> iota_ids(Index n) {
    std::vector<Index> ids(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = i;
    return ids;
}

// Dense-matrix oracle for the coregionalized head: explicit Gram matrices
// with B[t,t'] scaling, generic inverse, analytic marginalization of q(U).
std::pair<Matrix, Matrix> coreg_oracle(const CoregionalHead& h, const Matrix& x, Index task) {
    const Index m = h.num_inducing();
    const Index n = x.rows();
    Matrix w = h.task_cov.mixing.constrained();
    Matrix kappa = h.task_cov.task_diag.constrained();
    Matrix b = w * w.transpose();
    b.diagonal() += kappa.col(0);

    Matrix z = h.inducing.constrained();
    Matrix base_zz = matern52_ard(h.base_kernel, z, z);
    Matrix base_zx = matern52_ard(h.base_kernel, z, x);
    Matrix kzz(m, m), kzx(m, n);
    for (Index i = 0; i < m; ++i) {
        for (Index j = 0; j < m; ++j)
            kzz(i, j) = b(h.inducing_tasks[static_cast<size_t>(i)],
                          h.inducing_tasks[static_cast<size_t>(j)]) *
                        base_zz(i, j);
        for (Index j = 0; j < n; ++j)
            kzx(i, j) = b(h.inducing_tasks[static_cast<size_t>(i)], task) * base_zx(i, j);
    }
    kzz.diagonal().array() += kGramJitter;
    double sigma2 = h.base_kernel.signal_variance.constrained()(0, 0);
    double prior = b(task, task) * sigma2;

    Matrix a = kzx.transpose() * kzz.inverse();  // N x M
    Matrix mean = a * h.posterior.mean.constrained();
    Matrix vars(n, h.output_dim());
    for (Index d = 0; d < h.output_dim(); ++d) {
        Matrix l = h.posterior.chol_cov[static_cast<size_t>(d)].constrained();
        Matrix cov = a * (l * l.transpose() - kzz) * a.transpose();
        vars.col(d) = cov.diagonal().array() + prior;
    }
    return {mean, vars};
}

}  // namespace

TEST_CASE("spec: latent width follows the variant structure") {
    ModelSpec spec = small_mmdgp();
    spec.shared_units = {3};
    spec.task_units = {{2}, {2}};
    REQUIRE(spec.latent_width(0) == 5);
    REQUIRE(spec.latent_width(1) == 5);

    spec.variant = Variant::sMDGP;
    spec.task_units.clear();
    REQUIRE(spec.latent_width(0) == 3);

    spec.variant = Variant::iDGP;
    spec.shared_units.clear();
    spec.task_units = {{2}, {4}};
    REQUIRE(spec.latent_width(0) == 2);
    REQUIRE(spec.latent_width(1) == 4);

    spec.variant = Variant::iGP;
    REQUIRE(spec.latent_width(0) == spec.input_dim);
}

TEST_CASE("spec: validation rejects structurally invalid combinations") {
    ModelSpec spec = small_mmdgp();
    REQUIRE_NOTHROW(spec.validate());

    SECTION("sMDGP admits no task units") {
        spec.variant = Variant::sMDGP;
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
        spec.task_units.clear();
        REQUIRE_NOTHROW(spec.validate());
    }
    SECTION("iDGP admits no shared units") {
        spec.variant = Variant::iDGP;
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
        spec.shared_units.clear();
        REQUIRE_NOTHROW(spec.validate());
    }
    SECTION("mMDGP needs both layers") {
        spec.shared_units.clear();
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
        spec = small_mmdgp();
        spec.task_units[1].clear();
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
    }
    SECTION("cMDGP needs equal shared dims") {
        spec.variant = Variant::cMDGP;
        spec.task_units.clear();
        spec.shared_units = {2, 3};
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
        spec.shared_units = {2, 2};
        REQUIRE_NOTHROW(spec.validate());
    }
    SECTION("task list length must match task count") {
        spec.task_units = {{2}};
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
    }
    SECTION("degenerate sizes") {
        spec.tasks = 0;
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
        spec = small_mmdgp();
        spec.inducing_count = 0;
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
        spec = small_mmdgp();
        spec.shared_units = {0};
        REQUIRE_THROWS_AS(spec.validate(), InvalidSpec);
    }
}

TEST_CASE("build: mMDGP wiring, unit ids, and parameter names") {
    RngStream s(301, 0);
    ModelSpec spec = small_mmdgp();
    InitRecipe recipe = toy_recipe(s, spec.tasks, spec.input_dim, 12);
    Model model = build_model(spec, recipe, s);

    REQUIRE(model.shared_layer.size() == 1);
    REQUIRE(model.task_layers.size() == 2);
    REQUIRE(model.heads.size() == 2);
    REQUIRE(model.likelihood_noise.size() == 2);
    REQUIRE_FALSE(model.coreg_head.has_value());

    // head inputs live in Lambda^t space
    REQUIRE(model.heads[0].input_dim() == 5);
    REQUIRE(model.heads[0].output_dim() == 1);
    REQUIRE(model.shared_layer[0].output_dim() == 3);
    REQUIRE(model.task_layers[0][0].output_dim() == 2);

    // unit ids unique (they key the reparameterization noise)
    std::set<std::uint64_t> uids;
    for (const SparseGPUnit& u : model.shared_layer) uids.insert(u.uid);
    for (const auto& layer : model.task_layers)
        for (const SparseGPUnit& u : layer) uids.insert(u.uid);
    for (const SparseGPUnit& u : model.heads) uids.insert(u.uid);
    REQUIRE(uids.size() == 5);

    // parameter names unique (they key checkpoints)
    std::set<std::string> names;
    for (ad::Parameter* p : model.parameters()) names.insert(p->name());
    REQUIRE(names.size() == model.parameters().size());

    // inner layers start at the prior with an identity-projection mean
    REQUIRE(model.shared_layer[0].mean_kind == MeanFunctionKind::linear);
    REQUIRE(max_abs(model.shared_layer[0].posterior.mean.constrained()) < 1e-12);
    REQUIRE(model.heads[0].mean_kind == MeanFunctionKind::zero);
}

TEST_CASE("build: same stream state gives an identical model") {
    ModelSpec spec = small_mmdgp();
    RngStream s1(302, 7);
    InitRecipe recipe = toy_recipe(s1, spec.tasks, spec.input_dim, 10);
    RngStream b1(303, 1), b2(303, 1);
    Model m1 = build_model(spec, recipe, b1);
    Model m2 = build_model(spec, recipe, b2);
    auto p1 = m1.parameters(), p2 = m2.parameters();
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i) {
        REQUIRE(p1[i]->name() == p2[i]->name());
        REQUIRE((p1[i]->unconstrained() - p2[i]->unconstrained()).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("build: variant structure for the remaining variants") {
    RngStream s(304, 0);

    SECTION("iGP: one single-layer unit per task over the raw inputs") {
        ModelSpec spec;
        spec.variant = Variant::iGP;
        spec.tasks = 3;
        spec.input_dim = 2;
        spec.inducing_count = 4;
        InitRecipe recipe = toy_recipe(s, 3, 2, 9);
        Model model = build_model(spec, recipe, s);
        REQUIRE(model.shared_layer.empty());
        REQUIRE(model.task_layers.empty());
        REQUIRE(model.heads.size() == 3);
        REQUIRE(model.heads[2].input_dim() == 2);
    }
    SECTION("cGP: coregionalized head with round-robin inducing labels") {
        ModelSpec spec;
        spec.variant = Variant::cGP;
        spec.tasks = 2;
        spec.input_dim = 2;
        spec.inducing_count = 5;
        spec.coregional_rank = 2;
        InitRecipe recipe = toy_recipe(s, 2, 2, 9);
        Model model = build_model(spec, recipe, s);
        REQUIRE(model.heads.empty());
        REQUIRE(model.coreg_head.has_value());
        REQUIRE(model.coreg_head->input_dim() == 2);
        REQUIRE(model.coreg_head->task_cov.mixing.rows() == 2);
        REQUIRE(model.coreg_head->task_cov.mixing.cols() == 2);
        std::vector<Index> expect = {0, 1, 0, 1, 0};
        REQUIRE(model.coreg_head->inducing_tasks == expect);
    }
    SECTION("cMDGP: shared latents, mixing weights, coreg head over latent dim") {
        ModelSpec spec;
        spec.variant = Variant::cMDGP;
        spec.tasks = 2;
        spec.input_dim = 3;
        spec.shared_units = {2, 2};
        spec.inducing_count = 4;
        InitRecipe recipe = toy_recipe(s, 2, 3, 8);
        Model model = build_model(spec, recipe, s);
        REQUIRE(model.shared_layer.size() == 2);
        REQUIRE(model.coreg_head.has_value());
        REQUIRE(model.coreg_head->input_dim() == 2);
        REQUIRE(model.latent_mixing.has_value());
        REQUIRE(model.latent_mixing->rows() == 2);
        REQUIRE(model.latent_mixing->cols() == 2);
        REQUIRE(max_abs(model.latent_mixing->constrained() - Matrix::Ones(2, 2)) == 0.0);
    }
    SECTION("bernoulli models carry no observation-noise parameters") {
        ModelSpec spec;
        spec.variant = Variant::iGP;
        spec.tasks = 2;
        spec.input_dim = 1;
        spec.inducing_count = 3;
        spec.likelihood = Likelihood::bernoulli;
        InitRecipe recipe = toy_recipe(s, 2, 1, 6);
        Model model = build_model(spec, recipe, s);
        REQUIRE(model.likelihood_noise.empty());
    }
}

TEST_CASE("inducing sites: k-means is deterministic and tracks the data") {
    RngStream s(305, 0);
    Matrix pts = draw_standard_normal(s, 60, 2);
    pts.array() += 5.0;  // shifted cluster
    RngStream k1(306, 0), k2(306, 0);
    Matrix c1 = detail::kmeans_sites(pts, 6, k1);
    Matrix c2 = detail::kmeans_sites(pts, 6, k2);
    REQUIRE(max_abs(c1 - c2) == 0.0);
    REQUIRE(c1.rows() == 6);
    // centroids live inside the data's bounding box
    REQUIRE(c1.minCoeff() >= pts.minCoeff());
    REQUIRE(c1.maxCoeff() <= pts.maxCoeff());

    // more sites than points still yields the right count
    Matrix few = draw_standard_normal(s, 3, 2);
    Matrix c3 = detail::kmeans_sites(few, 5, k1);
    REQUIRE(c3.rows() == 5);
}

TEST_CASE("propagate: iGP reduces to the unit's conditional marginals") {
    RngStream s(307, 0);
    ModelSpec spec;
    spec.variant = Variant::iGP;
    spec.tasks = 2;
    spec.input_dim = 2;
    spec.inducing_count = 4;
    InitRecipe recipe = toy_recipe(s, 2, 2, 10);
    Model model = build_model(spec, recipe, s);
    scramble_posteriors(model, s);

    Matrix x = draw_standard_normal(s, 6, 2);
    RngStream prop(308, 0);
    PropagateResult r = propagate(model, x, 1, prop, 5);
    REQUIRE(r.means.size() == 1);  // no latent noise: single-sample semantics

    auto [mean, var] = conditional_marginals(model.heads[1], x);
    REQUIRE(max_abs(r.means[0] - mean) < 1e-14);
    REQUIRE(max_abs(r.variances[0] - var) < 1e-14);
}

TEST_CASE("propagate: fixed stream state gives identical samples") {
    RngStream s(309, 0);
    ModelSpec spec = small_mmdgp();
    InitRecipe recipe = toy_recipe(s, spec.tasks, spec.input_dim, 10);
    Model model = build_model(spec, recipe, s);
    scramble_posteriors(model, s);

    Matrix x = draw_standard_normal(s, 5, 2);
    RngStream p1(310, 4), p2(310, 4);
    PropagateResult r1 = propagate(model, x, 0, p1, 3);
    PropagateResult r2 = propagate(model, x, 0, p2, 3);
    REQUIRE(r1.means.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        REQUIRE(max_abs(r1.means[i] - r2.means[i]) == 0.0);
        REQUIRE(max_abs(r1.variances[i] - r2.variances[i]) == 0.0);
    }
    // distinct samples differ
    REQUIRE(max_abs(r1.means[0] - r1.means[1]) > 1e-6);
}

TEST_CASE("propagate: zero-noise hook matches the deterministic latent path") {
    RngStream s(311, 0);
    ModelSpec spec = small_mmdgp();
    InitRecipe recipe = toy_recipe(s, spec.tasks, spec.input_dim, 10);
    Model model = build_model(spec, recipe, s);
    scramble_posteriors(model, s);

    const Index task = 1;
    Matrix x = draw_standard_normal(s, 5, 2);
    RngStream prop(312, 0);
    PropagateResult r = propagate(model, x, task, prop, 2, /*zero_eps=*/true);
    REQUIRE(max_abs(r.means[0] - r.means[1]) == 0.0);  // noise suppressed

    // oracle: latent means column-stacked shared-first, then the head
    Matrix g = conditional_marginals(model.shared_layer[0], x).first;
    Matrix h = conditional_marginals(model.task_layers[task][0], x).first;
    Matrix lambda(x.rows(), g.cols() + h.cols());
    lambda.leftCols(g.cols()) = g;
    lambda.rightCols(h.cols()) = h;
    auto [mean, var] = conditional_marginals(model.heads[task], lambda);
    REQUIRE(max_abs(r.means[0] - mean) < 1e-12);
    REQUIRE(max_abs(r.variances[0] - var) < 1e-12);
}

TEST_CASE("propagate: sample s equals a single-sample call on the derived sub-stream") {
    RngStream s(313, 0);
    ModelSpec spec = small_mmdgp();
    InitRecipe recipe = toy_recipe(s, spec.tasks, spec.input_dim, 8);
    Model model = build_model(spec, recipe, s);
    scramble_posteriors(model, s);

    Matrix x = draw_standard_normal(s, 4, 2);
    RngStream root(314, 9);
    const Index task = 0;

    ad::Tape tape;
    ad::ParamBinding binding(tape);
    BoundModel bm = bind_model(binding, model);
    ad::Var xv = tape.constant(x);
    std::vector<Index> ids = iota_ids(4);
    auto samples = propagate_samples(bm, task, xv, ids, root, 3);

    RngStream task_stream = root.child(static_cast<std::uint64_t>(task));
    for (int k = 0; k < 3; ++k) {
        UnitMarginals one = propagate_one_sample(bm, task, xv, ids,
                                                 task_stream.child(static_cast<std::uint64_t>(k)));
        REQUIRE(max_abs(samples[static_cast<size_t>(k)].mean.value() - one.mean.value()) == 0.0);
        REQUIRE(max_abs(samples[static_cast<size_t>(k)].variance.value() - one.variance.value()) ==
                0.0);
    }
}

TEST_CASE("propagate: per-point noise is batch independent") {
    RngStream s(315, 0);
    ModelSpec spec = small_mmdgp();
    InitRecipe recipe = toy_recipe(s, spec.tasks, spec.input_dim, 10);
    Model model = build_model(spec, recipe, s);
    scramble_posteriors(model, s);

    Matrix x = draw_standard_normal(s, 8, 2);
    RngStream root(316, 2);

    ad::Tape tape;
    ad::ParamBinding binding(tape);
    BoundModel bm = bind_model(binding, model);
    auto full = propagate_samples(bm, 0, tape.constant(x), iota_ids(8), root, 2);

    // same datapoints presented as a sub-batch, ids preserved
    std::vector<Index> sub_ids = {2, 5, 7};
    Matrix x_sub(3, 2);
    for (size_t i = 0; i < sub_ids.size(); ++i)
        x_sub.row(static_cast<Index>(i)) = x.row(sub_ids[i]);
    auto part = propagate_samples(bm, 0, tape.constant(x_sub), sub_ids, root, 2);

    for (size_t k = 0; k < 2; ++k) {
        Matrix fm = full[k].mean.value(), fv = full[k].variance.value();
        Matrix pm = part[k].mean.value(), pv = part[k].variance.value();
        for (size_t i = 0; i < sub_ids.size(); ++i) {
            REQUIRE(std::abs(fm(sub_ids[i], 0) - pm(static_cast<Index>(i), 0)) < 1e-12);
            REQUIRE(std::abs(fv(sub_ids[i], 0) - pv(static_cast<Index>(i), 0)) < 1e-12);
        }
    }
}

TEST_CASE("coreg head: marginals match the dense-matrix oracle") {
    RngStream s(317, 0);
    ModelSpec spec;
    spec.variant = Variant::cGP;
    spec.tasks = 3;
    spec.input_dim = 2;
    spec.inducing_count = 6;
    spec.coregional_rank = 2;
    InitRecipe recipe = toy_recipe(s, 3, 2, 12);
    Model model = build_model(spec, recipe, s);
    scramble_posteriors(model, s);
    // move the task covariance off its symmetric init
    model.coreg_head->task_cov.mixing.set_constrained(
        0.6 * draw_standard_normal(s, 3, 2));

    Matrix x = draw_standard_normal(s, 5, 2);
    for (Index task = 0; task < 3; ++task) {
        RngStream prop(318, static_cast<std::uint64_t>(task));
        PropagateResult r = propagate(model, x, task, prop, 1);
        auto [mean, var] = coreg_oracle(*model.coreg_head, x, task);
        REQUIRE(max_abs(r.means[0] - mean) < 1e-8);
        REQUIRE(max_abs(r.variances[0] - var) < 1e-8);
    }
}

TEST_CASE("cMDGP: zero-noise propagation mixes latents with the task weights") {
    RngStream s(319, 0);
    ModelSpec spec;
    spec.variant = Variant::cMDGP;
    spec.tasks = 2;
    spec.input_dim = 2;
    spec.shared_units = {2, 2};
    spec.inducing_count = 4;
    InitRecipe recipe = toy_recipe(s, 2, 2, 10);
    recipe.head_lengthscale = 1.5;
    Model model = build_model(spec, recipe, s);
    scramble_posteriors(model, s);
    Matrix w(2, 2);
    w << 1.3, -0.4, 0.2, 0.9;
    model.latent_mixing->set_constrained(w);
    // the built head sites sit at near-collapsed initial latent means; spread
    // them so the generic-inverse oracle is well conditioned
    model.coreg_head->inducing.set_constrained(draw_standard_normal(s, 4, 2));

    const Index task = 1;
    Matrix x = draw_standard_normal(s, 4, 2);
    RngStream prop(320, 0);
    PropagateResult r = propagate(model, x, task, prop, 1, /*zero_eps=*/true);

    Matrix g0 = conditional_marginals(model.shared_layer[0], x).first;
    Matrix g1 = conditional_marginals(model.shared_layer[1], x).first;
    Matrix mixed = w(task, 0) * g0 + w(task, 1) * g1;
    auto [mean, var] = coreg_oracle(*model.coreg_head, mixed, task);
    REQUIRE(max_abs(r.means[0] - mean) < 1e-8);
    REQUIRE(max_abs(r.variances[0] - var) < 1e-8);
}

TEST_CASE("propagate: input checks") {
    RngStream s(321, 0);
    ModelSpec spec = small_mmdgp();
    InitRecipe recipe = toy_recipe(s, spec.tasks, spec.input_dim, 8);
    Model model = build_model(spec, recipe, s);
    Matrix x = draw_standard_normal(s, 3, 2);
    RngStream prop(322, 0);
    REQUIRE_THROWS_AS(propagate(model, x, 2, prop, 1), TaskIndexOutOfRange);
    REQUIRE_THROWS_AS(propagate(model, x, -1, prop, 1), TaskIndexOutOfRange);
    REQUIRE_THROWS_AS(propagate(model, x, 0, prop, 0), InvalidSpec);

    ad::Tape tape;
    ad::ParamBinding binding(tape);
    BoundModel bm = bind_model(binding, model);
    std::vector<Index> short_ids = {0, 1};
    REQUIRE_THROWS_AS(propagate_one_sample(bm, 0, tape.constant(x), short_ids, prop),
                      ShapeMismatch);
}

TEST_CASE("ard report: per-task latent partition with provenance flags") {
    RngStream s(323, 0);
    ModelSpec spec = small_mmdgp();
    InitRecipe recipe = toy_recipe(s, spec.tasks, spec.input_dim, 10);
    Model model = build_model(spec, recipe, s);

    // distinguishable head weights
    Matrix w0(5, 1);
    w0 << 0.9, 0.8, 0.7, 0.2, 0.1;
    model.heads[0].kernel.ard_weights.set_constrained(w0);

    auto report = ard_report(model);
    REQUIRE(report.size() == 2);
    REQUIRE(report[0].size() == 5);
    for (int i = 0; i < 3; ++i) {
        REQUIRE(report[0][static_cast<size_t>(i)].unit == "g0");
        REQUIRE(report[0][static_cast<size_t>(i)].shared);
    }
    for (int i = 3; i < 5; ++i) {
        REQUIRE(report[0][static_cast<size_t>(i)].unit == "h0_0");
        REQUIRE_FALSE(report[0][static_cast<size_t>(i)].shared);
    }
    REQUIRE(report[0][0].dim == "g0[0]");
    REQUIRE(report[0][4].dim == "h0_0[1]");
    for (int i = 0; i < 5; ++i)
        REQUIRE(report[0][static_cast<size_t>(i)].weight ==
                Catch::Approx(w0(i, 0)).margin(1e-12));

    SECTION("unsupported for coregionalized heads") {
        ModelSpec cspec;
        cspec.variant = Variant::cGP;
        cspec.tasks = 2;
        cspec.input_dim = 2;
        cspec.inducing_count = 3;
        InitRecipe crecipe = toy_recipe(s, 2, 2, 8);
        Model cmodel = build_model(cspec, crecipe, s);
        REQUIRE_THROWS_AS(ard_report(cmodel), UnsupportedVariant);
    }
}

TEST_CASE("variant and likelihood names round-trip") {
    for (Variant v : {Variant::mMDGP, Variant::sMDGP, Variant::cMDGP, Variant::iDGP,
                      Variant::iGP, Variant::cGP})
        REQUIRE(variant_from_name(variant_name(v)) == v);
    REQUIRE(likelihood_from_name("gaussian") == Likelihood::gaussian);
    REQUIRE(likelihood_from_name("bernoulli") == Likelihood::bernoulli);
    REQUIRE_THROWS_AS(variant_from_name("mdgp"), ConfigError);
    REQUIRE_THROWS_AS(likelihood_from_name("poisson"), ConfigError);
}
