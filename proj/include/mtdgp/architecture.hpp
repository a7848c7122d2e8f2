#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtdgp/ad/parameter.hpp"
#include "mtdgp/ad/tape.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/core/rng.hpp"
#include "mtdgp/errors.hpp"
#include "mtdgp/kernels.hpp"
#include "mtdgp/svgp.hpp"

namespace mtdgp {

enum class Variant { mMDGP, sMDGP, cMDGP, iDGP, iGP, cGP };
enum class Likelihood { gaussian, bernoulli };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::mMDGP: return "mMDGP";
        case Variant::sMDGP: return "sMDGP";
        case Variant::cMDGP: return "cMDGP";
        case Variant::iDGP: return "iDGP";
        case Variant::iGP: return "iGP";
        case Variant::cGP: return "cGP";
    }
    throw Error("unknown variant");
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "mMDGP") return Variant::mMDGP;
    if (s == "sMDGP") return Variant::sMDGP;
    if (s == "cMDGP") return Variant::cMDGP;
    if (s == "iDGP") return Variant::iDGP;
    if (s == "iGP") return Variant::iGP;
    if (s == "cGP") return Variant::cGP;
    throw ConfigError("unknown variant '" + s + "'");
}

inline std::string likelihood_name(Likelihood l) {
    return l == Likelihood::gaussian ? "gaussian" : "bernoulli";
}

inline Likelihood likelihood_from_name(const std::string& s) {
    if (s == "gaussian") return Likelihood::gaussian;
    if (s == "bernoulli") return Likelihood::bernoulli;
    throw ConfigError("unknown likelihood '" + s + "'");
}

// Structural description of a model. Unit lists are interpreted per variant:
// deep variants read shared_units/task_units; iGP and cGP ignore them; cMDGP
// reads shared_units only and requires equal latent dims (its task mixing is
// a weighted sum of same-shaped latent blocks).
struct ModelSpec {
    Variant variant = Variant::mMDGP;
    Index tasks = 1;
    Index input_dim = 1;
    Index output_dim = 1;
    std::vector<Index> shared_units;             // latent dims D^G, length I
    std::vector<std::vector<Index>> task_units;  // per task, latent dims D^H
    Index inducing_count = 100;
    Index coregional_rank = 1;
    Likelihood likelihood = Likelihood::gaussian;

    bool uses_shared_layer() const {
        return variant == Variant::mMDGP || variant == Variant::sMDGP ||
               variant == Variant::cMDGP;
    }
    bool uses_task_layers() const {
        return variant == Variant::mMDGP || variant == Variant::iDGP;
    }
    bool coregionalized() const {
        return variant == Variant::cMDGP || variant == Variant::cGP;
    }
    bool single_layer() const { return variant == Variant::iGP || variant == Variant::cGP; }

    Index shared_width() const {
        Index w = 0;
        for (Index d : shared_units) w += d;
        return w;
    }
    Index task_width(Index t) const {
        if (!uses_task_layers() || task_units.empty()) return 0;
        Index w = 0;
        for (Index d : task_units[static_cast<size_t>(t)]) w += d;
        return w;
    }
    // width of the head input Lambda^t
    Index latent_width(Index t) const {
        switch (variant) {
            case Variant::mMDGP: return shared_width() + task_width(t);
            case Variant::sMDGP: return shared_width();
            case Variant::iDGP: return task_width(t);
            case Variant::cMDGP: return shared_units.empty() ? 0 : shared_units[0];
            case Variant::iGP:
            case Variant::cGP: return input_dim;
        }
        throw Error("unknown variant");
    }

    void validate() const {
        if (tasks < 1) throw InvalidSpec("tasks must be >= 1");
        if (input_dim < 1) throw InvalidSpec("input_dim must be >= 1");
        if (output_dim < 1) throw InvalidSpec("output_dim must be >= 1");
        if (inducing_count < 1) throw InvalidSpec("inducing_count must be >= 1");
        for (Index d : shared_units)
            if (d < 1) throw InvalidSpec("shared unit dims must be >= 1");
        if (!task_units.empty() && static_cast<Index>(task_units.size()) != tasks)
            throw InvalidSpec("task_units must list one entry per task (" +
                              std::to_string(tasks) + " tasks, got " +
                              std::to_string(task_units.size()) + ")");
        for (const auto& ju : task_units)
            for (Index d : ju)
                if (d < 1) throw InvalidSpec("task unit dims must be >= 1");

        switch (variant) {
            case Variant::mMDGP:
                if (shared_units.empty())
                    throw InvalidSpec("mMDGP needs at least one shared unit");
                if (task_units.empty())
                    throw InvalidSpec("mMDGP needs task units for every task");
                for (Index t = 0; t < tasks; ++t)
                    if (task_units[static_cast<size_t>(t)].empty())
                        throw InvalidSpec("mMDGP needs at least one task unit for task " +
                                          std::to_string(t));
                break;
            case Variant::sMDGP:
                if (shared_units.empty())
                    throw InvalidSpec("sMDGP needs at least one shared unit");
                for (const auto& ju : task_units)
                    if (!ju.empty())
                        throw InvalidSpec("sMDGP does not admit task-specific units");
                break;
            case Variant::iDGP:
                if (!shared_units.empty())
                    throw InvalidSpec("iDGP does not admit shared units");
                if (task_units.empty())
                    throw InvalidSpec("iDGP needs task units for every task");
                for (Index t = 0; t < tasks; ++t)
                    if (task_units[static_cast<size_t>(t)].empty())
                        throw InvalidSpec("iDGP needs at least one task unit for task " +
                                          std::to_string(t));
                break;
            case Variant::cMDGP:
                if (shared_units.empty())
                    throw InvalidSpec("cMDGP needs at least one shared unit");
                for (Index d : shared_units)
                    if (d != shared_units[0])
                        throw InvalidSpec(
                            "cMDGP shared units must have equal dims (mixing is a "
                            "weighted sum of latent blocks)");
                if (coregional_rank < 1) throw InvalidSpec("coregional_rank must be >= 1");
                break;
            case Variant::iGP:
                break;
            case Variant::cGP:
                if (coregional_rank < 1) throw InvalidSpec("coregional_rank must be >= 1");
                break;
        }
    }
};

// Initialization recipe: kernel scales, symmetry breaking between shared and
// task-specific kernels, and the inducing-site strategy.
struct InitRecipe {
    double inner_lengthscale = 10.0;
    double shared_variance = 1.0;
    double task_variance = 0.5;  // differs from shared_variance to break symmetry
    double head_lengthscale = 10.0;
    double head_variance = 1.0;
    double inner_noise = 1e-6;       // white-noise variance on inner-layer kernels
    double likelihood_noise = 1e-6;  // initial observation noise (gaussian)
    bool kmeans_inducing = true;     // false: uniform random rows
    std::vector<Matrix> task_inputs;  // per-task training inputs for inducing sites
};

// The coregionalized head used by cMDGP and cGP: one sparse GP over all
// tasks with kernel B[t,t'] * k_base(x,x') and fixed task labels on the
// inducing points.
struct CoregionalHead {
    KernelParams base_kernel;
    CoregionalParams task_cov;
    ad::Parameter inducing;             // M x D_head
    std::vector<Index> inducing_tasks;  // length M
    VariationalGaussian posterior;      // M x P
    mutable long variance_clamps = 0;

    Index num_inducing() const { return inducing.rows(); }
    Index input_dim() const { return inducing.cols(); }
    Index output_dim() const { return posterior.output_dim(); }

    void validate(Index tasks) const {
        if (static_cast<Index>(inducing_tasks.size()) != inducing.rows())
            throw InvalidSpec("coregional head: task label count != inducing rows");
        for (Index t : inducing_tasks)
            if (t < 0 || t >= tasks)
                throw TaskIndexOutOfRange("coregional head: inducing task label out of range");
        if (posterior.mean.rows() != inducing.rows())
            throw InvalidSpec("coregional head: posterior rows != inducing rows");
        if (base_kernel.input_dim() != inducing.cols())
            throw InvalidSpec("coregional head: kernel dimension != inducing columns");
    }

    void collect_parameters(std::vector<ad::Parameter*>& out) {
        out.push_back(&inducing);
        out.push_back(&posterior.mean);
        for (ad::Parameter& l : posterior.chol_cov) out.push_back(&l);
        out.push_back(&base_kernel.signal_variance);
        out.push_back(&base_kernel.ard_weights);
        if (base_kernel.noise_jitter) out.push_back(&*base_kernel.noise_jitter);
        out.push_back(&task_cov.mixing);
        out.push_back(&task_cov.task_diag);
    }
};

struct Model {
    ModelSpec spec;
    std::vector<SparseGPUnit> shared_layer;              // g_i
    std::vector<std::vector<SparseGPUnit>> task_layers;  // h_j^t
    std::vector<SparseGPUnit> heads;                     // f^t (ARD-headed variants)
    std::optional<CoregionalHead> coreg_head;            // cMDGP / cGP
    std::optional<ad::Parameter> latent_mixing;          // cMDGP: T x I weights w_i^t
    std::vector<ad::Parameter> likelihood_noise;         // per task sigma^2_lik (gaussian)

    // Stable parameter order; checkpoints and the optimizer both rely on it.
    std::vector<ad::Parameter*> parameters() {
        std::vector<ad::Parameter*> out;
        for (SparseGPUnit& u : shared_layer) u.collect_parameters(out);
        for (auto& layer : task_layers)
            for (SparseGPUnit& u : layer) u.collect_parameters(out);
        for (SparseGPUnit& u : heads) u.collect_parameters(out);
        if (coreg_head) coreg_head->collect_parameters(out);
        if (latent_mixing) out.push_back(&*latent_mixing);
        for (ad::Parameter& p : likelihood_noise) out.push_back(&p);
        return out;
    }

    void validate() const {
        spec.validate();
        for (const SparseGPUnit& u : shared_layer) u.validate();
        for (const auto& layer : task_layers)
            for (const SparseGPUnit& u : layer) u.validate();
        for (const SparseGPUnit& u : heads) u.validate();
        if (spec.coregionalized()) {
            if (!coreg_head) throw InvalidSpec("coregionalized variant without its head");
            coreg_head->validate(spec.tasks);
            if (coreg_head->input_dim() != spec.latent_width(0))
                throw InvalidSpec("coregional head input dim != latent width");
        } else {
            if (static_cast<Index>(heads.size()) != spec.tasks)
                throw InvalidSpec("expected one head per task");
            for (Index t = 0; t < spec.tasks; ++t)
                if (heads[static_cast<size_t>(t)].input_dim() != spec.latent_width(t))
                    throw InvalidSpec("head " + std::to_string(t) +
                                      " input dim != latent width");
        }
        if (spec.variant == Variant::cMDGP) {
            if (!latent_mixing || latent_mixing->rows() != spec.tasks ||
                latent_mixing->cols() != static_cast<Index>(spec.shared_units.size()))
                throw InvalidSpec("cMDGP latent mixing must be T x I");
        }
        if (spec.likelihood == Likelihood::gaussian &&
            static_cast<Index>(likelihood_noise.size()) != spec.tasks)
            throw InvalidSpec("expected one likelihood noise per task");
    }
};

namespace detail {

// Lloyd's k-means on (subsampled) rows; the standard inducing-site recipe.
inline Matrix kmeans_sites(const Matrix& points, Index k, RngStream& stream, int iters = 25) {
    const Index n = points.rows();
    const Index d = points.cols();
    if (n == 0) return draw_standard_normal(stream, k, d);

    // subsample for speed on large inputs
    Matrix pool;
    const Index cap = 2048;
    if (n > cap) {
        pool.resize(cap, d);
        for (Index i = 0; i < cap; ++i)
            pool.row(i) = points.row(static_cast<Index>(stream.uniform_index(
                static_cast<std::uint64_t>(n))));
    } else {
        pool = points;
    }
    const Index m = pool.rows();

    Matrix centers(k, d);
    for (Index i = 0; i < k; ++i) {
        if (i < m) {
            centers.row(i) = pool.row(i % m);
        } else {  // more sites than points: jittered repeats
            centers.row(i) = pool.row(i % m) +
                             1e-3 * draw_standard_normal(stream, 1, d).row(0);
        }
    }
    if (m <= k) return centers;

    std::vector<Index> assign(static_cast<size_t>(m), 0);
    for (int it = 0; it < iters; ++it) {
        for (Index i = 0; i < m; ++i) {
            double best = (pool.row(i) - centers.row(0)).squaredNorm();
            Index arg = 0;
            for (Index c = 1; c < k; ++c) {
                double dist = (pool.row(i) - centers.row(c)).squaredNorm();
                if (dist < best) {
                    best = dist;
                    arg = c;
                }
            }
            assign[static_cast<size_t>(i)] = arg;
        }
        Matrix sums = Matrix::Zero(k, d);
        std::vector<Index> counts(static_cast<size_t>(k), 0);
        for (Index i = 0; i < m; ++i) {
            sums.row(assign[static_cast<size_t>(i)]) += pool.row(i);
            counts[static_cast<size_t>(assign[static_cast<size_t>(i)])] += 1;
        }
        for (Index c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] > 0)
                centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<size_t>(c)]);
            else  // empty cluster: reseed at a random point
                centers.row(c) = pool.row(static_cast<Index>(stream.uniform_index(
                    static_cast<std::uint64_t>(m))));
        }
    }
    return centers;
}

inline Matrix random_row_sites(const Matrix& points, Index k, RngStream& stream, Index d) {
    const Index n = points.rows();
    if (n == 0) return draw_standard_normal(stream, k, d);
    Matrix sites(k, d);
    for (Index i = 0; i < k; ++i) {
        Index r = static_cast<Index>(stream.uniform_index(static_cast<std::uint64_t>(n)));
        sites.row(i) = points.row(r);
        if (i >= n)  // avoid exact duplicates once rows must repeat
            sites.row(i) += 1e-3 * draw_standard_normal(stream, 1, d).row(0);
    }
    return sites;
}

inline Matrix inducing_sites(const Matrix& points, Index k, const InitRecipe& recipe,
                             RngStream& stream, Index d) {
    return recipe.kmeans_inducing ? kmeans_sites(points, k, stream)
                                  : random_row_sites(points, k, stream, d);
}

// Fixed linear mean for inner layers: the zero-padded / truncated identity,
// mapping input coordinates onto latent coordinates.
inline LinearMean identity_mean(Index in_dim, Index out_dim) {
    LinearMean lm;
    lm.projection = Matrix::Zero(in_dim, out_dim);
    for (Index i = 0; i < std::min(in_dim, out_dim); ++i) lm.projection(i, i) = 1.0;
    lm.offset = Matrix::Zero(1, out_dim);
    return lm;
}

}  // namespace detail

inline Model build_model(const ModelSpec& spec, const InitRecipe& recipe, RngStream& stream) {
    spec.validate();
    if (!recipe.task_inputs.empty() &&
        static_cast<Index>(recipe.task_inputs.size()) != spec.tasks)
        throw InvalidSpec("init recipe: task_inputs must list one matrix per task");

    Matrix pooled(0, spec.input_dim);
    for (const Matrix& x : recipe.task_inputs) {
        if (x.cols() != spec.input_dim)
            throw InvalidSpec("init recipe: task inputs have wrong column count");
        Matrix grown(pooled.rows() + x.rows(), spec.input_dim);
        grown.topRows(pooled.rows()) = pooled;
        grown.bottomRows(x.rows()) = x;
        pooled = std::move(grown);
    }
    auto task_pool = [&](Index t) -> const Matrix& {
        if (!recipe.task_inputs.empty() &&
            recipe.task_inputs[static_cast<size_t>(t)].rows() > 0)
            return recipe.task_inputs[static_cast<size_t>(t)];
        return pooled;
    };

    Model model;
    model.spec = spec;
    const Index m = spec.inducing_count;
    std::uint64_t uid = 1;

    if (spec.uses_shared_layer()) {
        for (size_t i = 0; i < spec.shared_units.size(); ++i) {
            const Index dim = spec.shared_units[i];
            std::string name = "g" + std::to_string(i);
            KernelParams k = KernelParams::make(name, spec.input_dim, recipe.shared_variance,
                                                recipe.inner_lengthscale, recipe.inner_noise);
            Matrix z = detail::inducing_sites(pooled, m, recipe, stream, spec.input_dim);
            model.shared_layer.push_back(
                make_unit(name, uid++, std::move(k), std::move(z), dim,
                          MeanFunctionKind::linear,
                          detail::identity_mean(spec.input_dim, dim), PosteriorInit::prior));
        }
    }

    if (spec.uses_task_layers()) {
        model.task_layers.resize(static_cast<size_t>(spec.tasks));
        for (Index t = 0; t < spec.tasks; ++t) {
            const auto& dims = spec.task_units[static_cast<size_t>(t)];
            for (size_t j = 0; j < dims.size(); ++j) {
                std::string name = "h" + std::to_string(t) + "_" + std::to_string(j);
                KernelParams k = KernelParams::make(name, spec.input_dim,
                                                    recipe.task_variance,
                                                    recipe.inner_lengthscale,
                                                    recipe.inner_noise);
                Matrix z = detail::inducing_sites(task_pool(t), m, recipe, stream,
                                                  spec.input_dim);
                model.task_layers[static_cast<size_t>(t)].push_back(
                    make_unit(name, uid++, std::move(k), std::move(z), dims[j],
                              MeanFunctionKind::linear,
                              detail::identity_mean(spec.input_dim, dims[j]),
                              PosteriorInit::prior));
            }
        }
    }

    // deterministic latent outputs (conditional means) at given input sites;
    // used to place head inducing points in Lambda^t space
    auto latent_means_at = [&](Index t, const Matrix& sites) {
        std::vector<Matrix> blocks;
        for (SparseGPUnit& u : model.shared_layer)
            blocks.push_back(conditional_marginals(u, sites).first);
        if (spec.uses_task_layers())
            for (SparseGPUnit& u : model.task_layers[static_cast<size_t>(t)])
                blocks.push_back(conditional_marginals(u, sites).first);
        Index width = 0;
        for (const Matrix& b : blocks) width += b.cols();
        Matrix lambda(sites.rows(), width);
        Index at = 0;
        for (const Matrix& b : blocks) {
            lambda.middleCols(at, b.cols()) = b;
            at += b.cols();
        }
        return lambda;
    };

    if (spec.coregionalized()) {
        const Index head_dim = spec.latent_width(0);
        Matrix base_sites = detail::inducing_sites(pooled, m, recipe, stream, spec.input_dim);
        Matrix z;
        if (spec.variant == Variant::cGP) {
            z = base_sites;
        } else {  // cMDGP: mixed shared latents with unit initial mixing weights
            std::vector<Matrix> blocks;
            for (SparseGPUnit& u : model.shared_layer)
                blocks.push_back(conditional_marginals(u, base_sites).first);
            z = Matrix::Zero(m, head_dim);
            for (const Matrix& b : blocks) z += b;
        }
        CoregionalHead head;
        head.base_kernel = KernelParams::make("coreg_head", head_dim, recipe.head_variance,
                                              recipe.head_lengthscale);
        head.task_cov = CoregionalParams::make("coreg_head", spec.tasks,
                                               spec.coregional_rank, 0.5, 0.5);
        head.inducing = ad::Parameter("coreg_head.inducing", std::move(z));
        head.inducing_tasks.resize(static_cast<size_t>(m));
        for (Index i = 0; i < m; ++i)
            head.inducing_tasks[static_cast<size_t>(i)] = i % spec.tasks;
        head.posterior = VariationalGaussian::make_isotropic("coreg_head", m,
                                                             spec.output_dim, 1e-5);
        model.coreg_head = std::move(head);
        if (spec.variant == Variant::cMDGP) {
            model.latent_mixing = ad::Parameter(
                "latent_mixing",
                Matrix::Ones(spec.tasks, static_cast<Index>(spec.shared_units.size())));
        }
    } else {
        for (Index t = 0; t < spec.tasks; ++t) {
            std::string name = "f" + std::to_string(t);
            const Index head_dim = spec.latent_width(t);
            KernelParams k = KernelParams::make(name, head_dim, recipe.head_variance,
                                                recipe.head_lengthscale);
            Matrix base_sites = detail::inducing_sites(task_pool(t), m, recipe, stream,
                                                       spec.input_dim);
            Matrix z = spec.single_layer() ? base_sites : latent_means_at(t, base_sites);
            model.heads.push_back(make_unit(name, uid++, std::move(k), std::move(z),
                                            spec.output_dim, MeanFunctionKind::zero, {},
                                            PosteriorInit::small_noise));
        }
    }

    if (spec.likelihood == Likelihood::gaussian) {
        for (Index t = 0; t < spec.tasks; ++t)
            model.likelihood_noise.emplace_back(
                "lik_noise[" + std::to_string(t) + "]",
                Matrix::Constant(1, 1, recipe.likelihood_noise), ad::Constraint::positive);
    }

    model.validate();
    return model;
}

// ---- tape binding and propagation ----

struct BoundCoregHead {
    const CoregionalHead* head = nullptr;
    KernelVars base;
    CoregionalVars cov;
    ad::Var b_mat;  // T x T task covariance
    ad::Var z;
    ad::Var l_kzz;
    ad::Var delta;  // q mean (zero mean function)
    std::vector<ad::Var> l_s;
};

struct BoundModel {
    const Model* model = nullptr;
    std::vector<BoundUnit> shared;
    std::vector<std::vector<BoundUnit>> task_units;
    std::vector<BoundUnit> heads;
    std::optional<BoundCoregHead> coreg;
    ad::Var mixing;                  // cMDGP only
    std::vector<ad::Var> lik_noise;  // constrained sigma^2_lik per task
};

inline BoundModel bind_model(ad::ParamBinding& binding, const Model& model) {
    model.validate();
    BoundModel bm;
    bm.model = &model;
    for (const SparseGPUnit& u : model.shared_layer) bm.shared.push_back(bind_unit(binding, u));
    bm.task_units.resize(model.task_layers.size());
    for (size_t t = 0; t < model.task_layers.size(); ++t)
        for (const SparseGPUnit& u : model.task_layers[t])
            bm.task_units[t].push_back(bind_unit(binding, u));
    for (const SparseGPUnit& u : model.heads) bm.heads.push_back(bind_unit(binding, u));
    if (model.coreg_head) {
        const CoregionalHead& h = *model.coreg_head;
        BoundCoregHead bc;
        bc.head = &h;
        bc.base = bind_kernel(binding, h.base_kernel);
        bc.cov = bind_coregional(binding, h.task_cov);
        bc.b_mat = task_covariance(bc.cov);
        bc.z = binding.bind(h.inducing);
        ad::Var base_zz = matern52_ard(bc.base, bc.z, bc.z, true);
        ad::Var kzz = ad::mul(ad::gather_outer(bc.b_mat, h.inducing_tasks, h.inducing_tasks),
                              base_zz);
        bc.l_kzz = ad::cholesky(kzz, kGramJitter);
        bc.delta = binding.bind(h.posterior.mean);
        for (const ad::Parameter& l : h.posterior.chol_cov)
            bc.l_s.push_back(binding.bind(l));
        bm.coreg = std::move(bc);
    }
    if (model.latent_mixing) bm.mixing = binding.bind(*model.latent_mixing);
    for (const ad::Parameter& p : model.likelihood_noise)
        bm.lik_noise.push_back(binding.bind(p));
    return bm;
}

// Marginals of the coregionalized head for points that all belong to `task`.
inline UnitMarginals coreg_marginals(const BoundCoregHead& bc, ad::Var inputs, Index task) {
    const CoregionalHead& h = *bc.head;
    const Index n = inputs.rows();
    std::vector<Index> point_tasks(static_cast<size_t>(n), task);
    ad::Var base_zx = matern52_ard(bc.base, bc.z, inputs, false);
    ad::Var kzx = ad::mul(ad::gather_outer(bc.b_mat, h.inducing_tasks, point_tasks), base_zx);
    ad::Var b_tt = ad::element(bc.b_mat, task, task);
    ad::Var prior_diag = ad::broadcast_scalar(ad::mul(b_tt, bc.base.signal_variance), n, 1);
    return conditional_core(bc.l_kzz, kzx, prior_diag, bc.delta, bc.l_s, {},
                            &h.variance_clamps);
}

namespace detail {

// Reparameterization noise for one unit: pure in (stream, unit uid, point
// ids), so the same datapoint sees the same draw in any batch.
inline Matrix unit_eps(const RngStream& stream, std::uint64_t uid,
                       const std::vector<Index>& ids, Index p) {
    RngStream s = stream.child(uid);
    Matrix eps(static_cast<Index>(ids.size()), p);
    for (size_t i = 0; i < ids.size(); ++i)
        for (Index d = 0; d < p; ++d)
            eps(static_cast<Index>(i), d) = s.normal_at(
                static_cast<std::uint64_t>(ids[i]) * static_cast<std::uint64_t>(p) +
                static_cast<std::uint64_t>(d));
    return eps;
}

}  // namespace detail

// One doubly stochastic pass for one task: draw latent outputs with noise
// from `stream`, concatenate Lambda^t, and return the head's marginals.
// zero_eps forces the deterministic path (latent means), the test hook.
inline UnitMarginals propagate_one_sample(const BoundModel& bm, Index task, ad::Var inputs,
                                          const std::vector<Index>& point_ids,
                                          const RngStream& stream, bool zero_eps = false) {
    const Model& model = *bm.model;
    if (task < 0 || task >= model.spec.tasks)
        throw TaskIndexOutOfRange("propagate: task " + std::to_string(task) + " of " +
                                  std::to_string(model.spec.tasks));
    if (static_cast<Index>(point_ids.size()) != inputs.rows())
        throw ShapeMismatch("propagate: one point id per input row");

    const Variant variant = model.spec.variant;
    if (variant == Variant::iGP)
        return conditional_marginals(bm.heads[static_cast<size_t>(task)], inputs);
    if (variant == Variant::cGP) return coreg_marginals(*bm.coreg, inputs, task);

    auto draw = [&](const BoundUnit& b) {
        const Index p = b.unit->output_dim();
        Matrix eps = zero_eps ? Matrix::Zero(inputs.rows(), p)
                              : detail::unit_eps(stream, b.unit->uid, point_ids, p);
        return sample_with_eps(b, inputs, eps);
    };

    if (variant == Variant::cMDGP) {
        ad::Var mixed;
        for (size_t i = 0; i < bm.shared.size(); ++i) {
            ad::Var g = draw(bm.shared[i]);
            ad::Var w = ad::element(bm.mixing, task, static_cast<Index>(i));
            ad::Var term = ad::scale(g, w);
            mixed = mixed.valid() ? ad::add(mixed, term) : term;
        }
        return coreg_marginals(*bm.coreg, mixed, task);
    }

    std::vector<ad::Var> blocks;
    for (const BoundUnit& b : bm.shared) blocks.push_back(draw(b));
    if (model.spec.uses_task_layers())
        for (const BoundUnit& b : bm.task_units[static_cast<size_t>(task)])
            blocks.push_back(draw(b));
    ad::Var lambda = blocks.size() == 1 ? blocks[0]
                                        : ad::concat_cols(std::span<const ad::Var>(blocks));
    return conditional_marginals(bm.heads[static_cast<size_t>(task)], lambda);
}

// S doubly stochastic passes. Sample s uses stream.child(task).child(s), so a
// single-sample call with that exact sub-stream reproduces sample s. Single-
// layer variants have no latent noise and return one entry.
inline std::vector<UnitMarginals> propagate_samples(const BoundModel& bm, Index task,
                                                    ad::Var inputs,
                                                    const std::vector<Index>& point_ids,
                                                    const RngStream& stream, int samples,
                                                    bool zero_eps = false) {
    if (samples < 1) throw InvalidSpec("propagate: mc_samples must be >= 1");
    std::vector<UnitMarginals> out;
    if (bm.model->spec.single_layer()) {
        out.push_back(propagate_one_sample(bm, task, inputs, point_ids, stream, zero_eps));
        return out;
    }
    RngStream task_stream = stream.child(static_cast<std::uint64_t>(task));
    out.reserve(static_cast<size_t>(samples));
    for (int s = 0; s < samples; ++s)
        out.push_back(propagate_one_sample(bm, task, inputs, point_ids,
                                           task_stream.child(static_cast<std::uint64_t>(s)),
                                           zero_eps));
    return out;
}

// Plain-matrix propagation on a scratch tape; point ids are positional.
struct PropagateResult {
    std::vector<Matrix> means;
    std::vector<Matrix> variances;
};

inline PropagateResult propagate(const Model& model, const Matrix& inputs, Index task,
                                 RngStream& stream, int mc_samples, bool zero_eps = false) {
    require_finite(inputs, "propagate: inputs");
    ad::Tape tape;
    ad::ParamBinding binding(tape);
    BoundModel bm = bind_model(binding, model);
    std::vector<Index> ids(static_cast<size_t>(inputs.rows()));
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<Index>(i);
    auto samples = propagate_samples(bm, task, tape.constant(inputs), ids, stream, mc_samples,
                                     zero_eps);
    PropagateResult result;
    for (const UnitMarginals& m : samples) {
        result.means.push_back(m.mean.value());
        result.variances.push_back(m.variance.value());
    }
    return result;
}

// ---- ARD reporting ----

struct ArdEntry {
    std::string unit;   // e.g. "g0" or "h1_0"
    std::string dim;    // e.g. "g0[2]"
    double weight = 0.0;
    bool shared = false;
};

// Head ARD weights grouped by the Lambda^t column partition, one list per
// task. Only meaningful when heads carry ARD kernels over latent columns.
inline std::vector<std::vector<ArdEntry>> ard_report(const Model& model) {
    const Variant v = model.spec.variant;
    if (v != Variant::mMDGP && v != Variant::sMDGP && v != Variant::iDGP)
        throw UnsupportedVariant("ard_report: variant " + variant_name(v) +
                                 " has no per-latent ARD head");
    std::vector<std::vector<ArdEntry>> report;
    for (Index t = 0; t < model.spec.tasks; ++t) {
        const SparseGPUnit& head = model.heads[static_cast<size_t>(t)];
        Matrix w = head.kernel.ard_weights.constrained();
        std::vector<ArdEntry> entries;
        Index at = 0;
        auto emit = [&](const SparseGPUnit& u, bool shared) {
            for (Index d = 0; d < u.output_dim(); ++d) {
                ArdEntry e;
                e.unit = u.name;
                e.dim = u.name + "[" + std::to_string(d) + "]";
                e.weight = w(at, 0);
                e.shared = shared;
                entries.push_back(std::move(e));
                ++at;
            }
        };
        for (const SparseGPUnit& u : model.shared_layer) emit(u, true);
        if (model.spec.uses_task_layers())
            for (const SparseGPUnit& u : model.task_layers[static_cast<size_t>(t)])
                emit(u, false);
        if (at != w.rows())
            throw InvalidSpec("ard_report: head weight count does not match latent columns");
        report.push_back(std::move(entries));
    }
    return report;
}

}  // namespace mtdgp
