#pragma once

// L2-regularized logistic probes on last-token activations, layer selection,
// cross-category evaluation and PCA projection.

#include "steerkit/data.hpp"

#include <Eigen/Dense>

#include <iostream>

namespace steerkit {

inline constexpr double kDecisionThreshold = 0.5;
inline constexpr double kProbClamp = 1e-12;

struct ProbeModel {
    int layer = 1;
    std::vector<double> w;
    double b = 0.0;
    double lambda = 1.0;
    // training metadata
    int iterations = 0;
    double final_loss = 0.0;
    std::uint64_t seed = 0;
    double val_accuracy = 0.0;
    bool degenerate = false; // single-class training set

    std::size_t dim() const { return w.size(); }

    void validate() const {
        if (!all_finite(std::span<const double>(w)) || !std::isfinite(b))
            fail(ErrorKind::Data, "probe: non-finite parameters");
        if (!(lambda >= 0.0)) fail(ErrorKind::Data, "probe: lambda must be >= 0");
    }
};

struct TrainSettings {
    double lambda = 1.0;
    int max_iterations = 5000;
    double tolerance = 1e-6; // on the gradient infinity-norm
    std::string step_rule = "backtracking";
    std::uint64_t seed = 0;

    void validate() const {
        if (!(tolerance > 0.0)) fail(ErrorKind::Config, "train: tolerance must be > 0");
        if (max_iterations < 1) fail(ErrorKind::Config, "train: max_iterations must be >= 1");
        if (!(lambda >= 0.0)) fail(ErrorKind::Config, "train: lambda must be >= 0");
        if (step_rule != "backtracking") fail(ErrorKind::Config, "train: unknown step rule '" + step_rule + "'");
    }
};

/// Numerically stable logistic function.
inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(1 + e^x) without overflow or cancellation.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// log sigmoid(z), with the probability clamped to [kProbClamp, 1 - kProbClamp].
/// Computed in log space; forming 1 - p directly loses digits for large |z|.
inline double clamped_log_sigmoid(double z) {
    static const double lo = std::log(kProbClamp), hi = std::log1p(-kProbClamp);
    return std::clamp(-softplus(-z), lo, hi);
}

inline double logit(const ProbeModel& m, std::span<const float> a) {
    if (a.size() != m.w.size()) fail(ErrorKind::Runtime, "probe: dimension mismatch");
    return dot(std::span<const double>(m.w), a) + m.b;
}

/// yhat = sigma(w.a + b): probability that the activation is unbiased.
inline double predict(const ProbeModel& m, const Activation& a) {
    if (a.layer != m.layer)
        fail(ErrorKind::Runtime,
             "probe: layer mismatch (probe " + std::to_string(m.layer) + ", activation " + std::to_string(a.layer) + ")");
    return sigmoid(logit(m, a.values));
}

inline int predicted_label(double yhat) { return yhat >= kDecisionThreshold ? 1 : 0; }

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad_w;
    double grad_b = 0.0;
};

/// Mean cross-entropy plus lambda * ||w||^2 (bias unregularized). Probabilities
/// inside the logs are clamped to [1e-12, 1 - 1e-12].
inline LossGrad loss_and_grad(const ProbeModel& m, std::span<const LabeledActivation> batch) {
    if (batch.empty()) fail(ErrorKind::Runtime, "loss_and_grad: empty batch");
    const std::size_t d = m.w.size();
    LossGrad out;
    out.grad_w.assign(d, 0.0);
    double data = 0.0;
    for (const auto& s : batch) {
        if (s.activation.dim() != d) fail(ErrorKind::Runtime, "loss_and_grad: dimension mismatch");
        const double z = logit(m, s.activation.values);
        const double p = sigmoid(z);
        const double y = s.y();
        data -= y * clamped_log_sigmoid(z) + (1.0 - y) * clamped_log_sigmoid(-z);
        const double r = p - y;
        for (std::size_t i = 0; i < d; ++i) out.grad_w[i] += r * s.activation.values[i];
        out.grad_b += r;
    }
    const double n = static_cast<double>(batch.size());
    double reg = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        out.grad_w[i] = out.grad_w[i] / n + 2.0 * m.lambda * m.w[i];
        reg += m.w[i] * m.w[i];
    }
    out.grad_b /= n;
    out.loss = data / n + m.lambda * reg;
    return out;
}

/// Fraction of items whose thresholded prediction equals the label (ties -> 1).
inline double evaluate(const ProbeModel& m, std::span<const LabeledActivation> data) {
    if (data.empty()) fail(ErrorKind::Runtime, "evaluate: empty dataset");
    std::size_t correct = 0;
    for (const auto& s : data)
        if (predicted_label(predict(m, s.activation)) == s.y()) ++correct;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Full-batch gradient descent with Armijo backtracking. Deterministic; the
/// loss never increases across accepted steps.
inline ProbeModel train(std::span<const LabeledActivation> train_set, std::span<const LabeledActivation> val_set,
                        int layer, const TrainSettings& settings, std::vector<double>* loss_trace = nullptr) {
    settings.validate();
    if (train_set.empty() || val_set.empty()) fail(ErrorKind::Runtime, "train: train and validation sets must be nonempty");
    const std::size_t d = train_set.front().activation.dim();
    for (const auto* set : {&train_set, &val_set})
        for (const auto& s : *set) {
            if (s.activation.layer != layer) fail(ErrorKind::Runtime, "train: activation from a different layer");
            if (s.activation.dim() != d) fail(ErrorKind::Runtime, "train: dimension mismatch");
        }

    ProbeModel m;
    m.layer = layer;
    m.w.assign(d, 0.0);
    m.lambda = settings.lambda;
    m.seed = settings.seed;
    const auto ones = std::count_if(train_set.begin(), train_set.end(), [](const auto& s) { return s.y() == 1; });
    m.degenerate = ones == 0 || ones == static_cast<std::ptrdiff_t>(train_set.size());
    if (m.degenerate) std::cerr << "warning: probe training set for layer " << layer << " has a single class\n";

    LossGrad cur = loss_and_grad(m, train_set);
    if (loss_trace) loss_trace->push_back(cur.loss);
    double step = 1.0;
    int it = 0;
    for (; it < settings.max_iterations; ++it) {
        double gmax = std::abs(cur.grad_b), gsq = cur.grad_b * cur.grad_b;
        for (const double g : cur.grad_w) {
            gmax = std::max(gmax, std::abs(g));
            gsq += g * g;
        }
        if (gmax <= settings.tolerance) break;

        ProbeModel next = m;
        LossGrad cand;
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            for (std::size_t i = 0; i < d; ++i) next.w[i] = m.w[i] - step * cur.grad_w[i];
            next.b = m.b - step * cur.grad_b;
            cand = loss_and_grad(next, train_set);
            if (cand.loss <= cur.loss - 1e-4 * step * gsq) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break; // step underflow: at numerical optimum
        m = std::move(next);
        cur = std::move(cand);
        if (loss_trace) loss_trace->push_back(cur.loss);
        step = std::min(step * 2.0, 1e6);
    }
    m.iterations = it;
    m.final_loss = cur.loss;
    m.val_accuracy = evaluate(m, val_set);
    return m;
}

using LayerAccuracyCurve = std::map<int, double>;

/// argmax accuracy; ties resolve to the shallowest layer.
inline int select_layer_from_accuracies(const LayerAccuracyCurve& acc) {
    if (acc.empty()) fail(ErrorKind::Runtime, "select_layer: no layers");
    int best = acc.begin()->first;
    double best_acc = acc.begin()->second;
    for (const auto& [l, a] : acc)
        if (a > best_acc) {
            best = l;
            best_acc = a;
        }
    return best;
}

struct LayerSelection {
    int layer = 1;
    LayerAccuracyCurve accuracies;
};

/// Evaluates each layer's probe on that layer's selection set.
inline LayerSelection select_layer(const std::map<int, ProbeModel>& models,
                                   const std::map<int, std::vector<LabeledActivation>>& selection_sets,
                                   std::optional<int> n_layers = std::nullopt) {
    if (n_layers)
        for (int l = 1; l <= *n_layers; ++l)
            if (!models.contains(l)) fail(ErrorKind::Runtime, "select_layer: missing probe for layer " + std::to_string(l));
    LayerSelection sel;
    for (const auto& [l, m] : models) {
        const auto it = selection_sets.find(l);
        if (it == selection_sets.end()) fail(ErrorKind::Runtime, "select_layer: missing selection set for layer " + std::to_string(l));
        sel.accuracies[l] = evaluate(m, it->second);
    }
    sel.layer = select_layer_from_accuracies(sel.accuracies);
    return sel;
}

/// M[i][j] = accuracy of model i on validation set j.
inline std::vector<std::vector<double>> cross_category_matrix(std::span<const ProbeModel> models,
                                                              std::span<const std::vector<LabeledActivation>> val_sets) {
    if (models.empty()) fail(ErrorKind::Runtime, "cross_category_matrix: no models");
    const int layer = models.front().layer;
    for (const auto& m : models)
        if (m.layer != layer) fail(ErrorKind::Runtime, "cross_category_matrix: models from different layers");
    std::vector<std::vector<double>> out(models.size(), std::vector<double>(val_sets.size()));
    for (std::size_t i = 0; i < models.size(); ++i)
        for (std::size_t j = 0; j < val_sets.size(); ++j) out[i][j] = evaluate(models[i], val_sets[j]);
    return out;
}

struct PcaResult {
    std::vector<std::vector<double>> points;     // n x k
    std::vector<double> explained_variance_ratio; // k
    std::vector<std::vector<double>> components; // k x d, unit norm
    std::vector<double> mean;                    // d
    std::vector<double> eigenvalues;             // k

    std::vector<double> project(std::span<const double> x) const {
        std::vector<double> p(components.size(), 0.0);
        for (std::size_t c = 0; c < components.size(); ++c)
            for (std::size_t i = 0; i < x.size(); ++i) p[c] += (x[i] - mean[i]) * components[c][i];
        return p;
    }
};

/// Mean-centered covariance eigendecomposition. Components are sorted by
/// decreasing variance; each is signed so its first nonzero coordinate is positive.
inline PcaResult pca_project(std::span<const Activation> acts, int k = 2) {
    if (acts.size() < 2) fail(ErrorKind::Runtime, "pca: need at least 2 points");
    const auto d = static_cast<Eigen::Index>(acts.front().dim());
    if (k < 1 || k > d) fail(ErrorKind::Runtime, "pca: k must be in [1, dim]");
    const auto n = static_cast<Eigen::Index>(acts.size());
    Eigen::MatrixXd X(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto& a = acts[static_cast<std::size_t>(r)];
        if (static_cast<Eigen::Index>(a.dim()) != d) fail(ErrorKind::Runtime, "pca: dimension mismatch");
        for (Eigen::Index c = 0; c < d; ++c) X(r, c) = a.values[static_cast<std::size_t>(c)];
    }
    const Eigen::RowVectorXd mu = X.colwise().mean();
    X.rowwise() -= mu;
    const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) fail(ErrorKind::Runtime, "pca: eigendecomposition failed");

    // Eigen returns ascending eigenvalues.
    const Eigen::VectorXd evals = eig.eigenvalues().cwiseMax(0.0);
    const double total = evals.sum();
    PcaResult out;
    out.mean.assign(mu.data(), mu.data() + d);
    for (int c = 0; c < k; ++c) {
        const Eigen::Index col = d - 1 - c;
        Eigen::VectorXd v = eig.eigenvectors().col(col);
        for (Eigen::Index i = 0; i < d; ++i)
            if (std::abs(v(i)) > 1e-12) {
                if (v(i) < 0) v = -v;
                break;
            }
        out.components.emplace_back(v.data(), v.data() + d);
        out.eigenvalues.push_back(evals(col));
        out.explained_variance_ratio.push_back(total > 0 ? evals(col) / total : 0.0);
    }
    out.points.reserve(acts.size());
    for (Eigen::Index r = 0; r < n; ++r) {
        std::vector<double> p(static_cast<std::size_t>(k));
        for (int c = 0; c < k; ++c) {
            double s = 0.0;
            for (Eigen::Index i = 0; i < d; ++i) s += X(r, i) * out.components[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
            p[static_cast<std::size_t>(c)] = s;
        }
        out.points.push_back(std::move(p));
    }
    return out;
}

inline ordered_json to_json(const ProbeModel& m) {
    ordered_json j;
    j["layer"] = m.layer;
    j["dim"] = m.dim();
    j["w"] = m.w;
    j["b"] = m.b;
    j["lambda"] = m.lambda;
    j["seed"] = m.seed;
    j["val_accuracy"] = m.val_accuracy;
    j["iterations"] = m.iterations;
    j["final_loss"] = m.final_loss;
    return j;
}

inline ProbeModel probe_from_json(const json& j) {
    try {
        ProbeModel m;
        m.layer = j.at("layer").get<int>();
        m.w = j.at("w").get<std::vector<double>>();
        if (j.at("dim").get<std::size_t>() != m.w.size()) fail(ErrorKind::Data, "probe: dim does not match w");
        m.b = j.at("b").get<double>();
        m.lambda = j.at("lambda").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.val_accuracy = j.at("val_accuracy").get<double>();
        m.iterations = j.value("iterations", 0);
        m.final_loss = j.value("final_loss", 0.0);
        m.validate();
        return m;
    } catch (const json::exception& e) {
        fail(ErrorKind::Data, std::string("probe file: ") + e.what());
    }
}

inline void save_probe(const std::filesystem::path& path, const ProbeModel& m) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Runtime, "cannot write " + path.string());
    os << to_json(m).dump(2) << '\n';
}

inline ProbeModel load_probe(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Data, "cannot open probe file " + path.string());
    try {
        return probe_from_json(json::parse(is));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::Data, "probe file " + path.string() + ": " + e.what());
    }
}

} // namespace steerkit
