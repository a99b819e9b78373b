#pragma once

// Debiasing steering vectors: mean activation difference over contrast pairs,
// plus the similarity and robustness analyses built on it.

#include "steerkit/data.hpp"

#include <concepts>

namespace steerkit {

struct SteeringVector {
    int layer = 1;
    std::vector<double> v;
    std::size_t n_pairs = 0;
    std::vector<std::string> categories;
    std::uint64_t seed = 0;

    std::size_t dim() const { return v.size(); }

    void validate() const {
        if (n_pairs < 1) fail(ErrorKind::Data, "dsv: n_pairs must be >= 1");
        if (!all_finite(std::span<const double>(v))) fail(ErrorKind::Data, "dsv: non-finite entries");
    }
};

/// Activations of one contrast pair at a single layer.
struct ActivationPair {
    Activation positive; // unbiased completion
    Activation negative; // biased completion
    std::string category;
};

/// Anything that maps a prompt to its last-token activation at a layer.
template <typename P>
concept ActivationProvider = requires(const P& p, const std::string& prompt, int layer) {
    { p.activation(prompt, layer) } -> std::convertible_to<Activation>;
};

struct ModelActivations {
    const Model& model;

    Activation activation(const std::string& prompt, int layer) const {
        auto r = model.forward(encode(prompt), {{layer, HookAction::read()}});
        return std::move(r.captured.at(layer));
    }
};

/// v = mean(a(P+) - a(P-)), accumulated in double over the given order.
inline SteeringVector compute_dsv(std::span<const ActivationPair> pairs, std::uint64_t seed = 0) {
    if (pairs.empty()) fail(ErrorKind::Runtime, "compute_dsv: empty pair list");
    SteeringVector sv;
    sv.layer = pairs.front().positive.layer;
    sv.seed = seed;
    const std::size_t d = pairs.front().positive.dim();
    sv.v.assign(d, 0.0);
    std::set<std::string> cats;
    for (const auto& p : pairs) {
        if (p.positive.dim() != d || p.negative.dim() != d) fail(ErrorKind::Runtime, "compute_dsv: dimension mismatch");
        if (p.positive.layer != sv.layer || p.negative.layer != sv.layer)
            fail(ErrorKind::Runtime, "compute_dsv: activations from different layers");
        for (std::size_t i = 0; i < d; ++i)
            sv.v[i] += static_cast<double>(p.positive.values[i]) - static_cast<double>(p.negative.values[i]);
        if (!p.category.empty()) cats.insert(p.category);
    }
    for (auto& x : sv.v) x /= static_cast<double>(pairs.size());
    sv.n_pairs = pairs.size();
    sv.categories.assign(cats.begin(), cats.end());
    return sv;
}

template <ActivationProvider P>
std::vector<ActivationPair> extract_pairs(std::span<const ContrastPair> pairs, const P& provider, int layer) {
    std::vector<ActivationPair> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs)
        out.push_back({provider.activation(p.positive, layer), provider.activation(p.negative, layer), p.category});
    return out;
}

template <ActivationProvider P>
SteeringVector compute_dsv(std::span<const ContrastPair> pairs, const P& provider, int layer, std::uint64_t seed = 0) {
    if (pairs.empty()) fail(ErrorKind::Runtime, "compute_dsv: empty pair list");
    const auto acts = extract_pairs(pairs, provider, layer);
    return compute_dsv(std::span<const ActivationPair>(acts), seed);
}

inline SteeringVector compute_dsv(std::span<const ContrastPair> pairs, const Model& model, int layer,
                                  std::uint64_t seed = 0) {
    return compute_dsv(pairs, ModelActivations{model}, layer, seed);
}

using SimilarityMatrix = std::vector<std::vector<double>>;

/// Symmetric cosine matrix with unit diagonal; zero-norm vectors are rejected.
inline SimilarityMatrix dsv_similarity_matrix(std::span<const SteeringVector> dsvs) {
    for (const auto& s : dsvs)
        if (norm(std::span<const double>(s.v)) == 0.0) fail(ErrorKind::Runtime, "dsv similarity: zero-norm DSV");
    const std::size_t n = dsvs.size();
    SimilarityMatrix m(n, std::vector<double>(n, 1.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) m[i][j] = m[j][i] = cosine(dsvs[i].v, dsvs[j].v);
    return m;
}

/// Per-category DSVs (in map order) and their cosine matrix.
inline std::pair<std::vector<SteeringVector>, SimilarityMatrix>
dsv_similarity_matrix(const std::map<std::string, std::vector<ActivationPair>>& per_category) {
    if (per_category.size() < 2) fail(ErrorKind::Runtime, "dsv similarity: need at least 2 categories");
    std::vector<SteeringVector> dsvs;
    for (const auto& [cat, pairs] : per_category) {
        auto sv = compute_dsv(std::span<const ActivationPair>(pairs));
        sv.categories = {cat};
        dsvs.push_back(std::move(sv));
    }
    auto m = dsv_similarity_matrix(std::span<const SteeringVector>(dsvs));
    return {std::move(dsvs), std::move(m)};
}

template <ActivationProvider P>
std::pair<std::vector<SteeringVector>, SimilarityMatrix>
dsv_similarity_matrix(const std::map<std::string, std::vector<ContrastPair>>& per_category, const P& provider, int layer) {
    std::map<std::string, std::vector<ActivationPair>> acts;
    for (const auto& [cat, pairs] : per_category) acts[cat] = extract_pairs(std::span<const ContrastPair>(pairs), provider, layer);
    return dsv_similarity_matrix(acts);
}

/// Seeded subsample of `per_category` pairs from every category in the pool.
inline std::vector<ActivationPair> stratified_subsample(std::span<const ActivationPair> pool, std::size_t per_category,
                                                        std::uint64_t seed) {
    std::map<std::string, std::vector<std::size_t>> by_cat;
    for (std::size_t i = 0; i < pool.size(); ++i) by_cat[pool[i].category].push_back(i);
    std::vector<ActivationPair> out;
    for (auto& [cat, idx] : by_cat) {
        if (per_category > idx.size())
            fail(ErrorKind::Runtime, "robustness: size " + std::to_string(per_category) + " exceeds pool of category '" +
                                         cat + "' (" + std::to_string(idx.size()) + ")");
        Rng rng(derive_seed(seed, fnv1a(std::span<const char>(cat.data(), cat.size()))));
        rng.shuffle(idx);
        for (std::size_t i = 0; i < per_category; ++i) out.push_back(pool[idx[i]]);
    }
    return out;
}

struct RobustnessRow {
    std::size_t size = 0; // per category
    std::uint64_t seed = 0;
    double cosine_to_full = 0.0;
    SteeringVector dsv;
};

struct RobustnessReport {
    SteeringVector full;
    std::vector<RobustnessRow> rows;

    /// Smallest pairwise cosine between the DSVs of different seeds at `size`.
    double min_inter_seed_cosine(std::size_t size) const {
        double best = 1.0;
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = i + 1; j < rows.size(); ++j)
                if (rows[i].size == size && rows[j].size == size && rows[i].seed != rows[j].seed)
                    best = std::min(best, cosine(rows[i].dsv.v, rows[j].dsv.v));
        return best;
    }
};

/// DSVs from seeded per-category subsamples, compared with the full-pool DSV.
inline RobustnessReport robustness_sweep(std::span<const ActivationPair> pool, std::span<const std::size_t> sizes,
                                         std::span<const std::uint64_t> seeds) {
    if (pool.empty()) fail(ErrorKind::Runtime, "robustness: empty pool");
    RobustnessReport rep;
    rep.full = compute_dsv(pool);
    for (const auto size : sizes)
        for (const auto seed : seeds) {
            const auto sub = stratified_subsample(pool, size, seed);
            RobustnessRow row{size, seed, 0.0, compute_dsv(std::span<const ActivationPair>(sub), seed)};
            row.cosine_to_full = cosine(row.dsv.v, rep.full.v);
            rep.rows.push_back(std::move(row));
        }
    return rep;
}

template <ActivationProvider P>
RobustnessReport robustness_sweep(std::span<const ContrastPair> pool, std::span<const std::size_t> sizes,
                                  std::span<const std::uint64_t> seeds, const P& provider, int layer) {
    const auto acts = extract_pairs(pool, provider, layer);
    return robustness_sweep(std::span<const ActivationPair>(acts), sizes, seeds);
}

/// Synthetic contrast pairs: positive ~ unbiased cluster, negative ~ biased cluster.
inline std::vector<ActivationPair> synth_pairs(const SyntheticSpec& spec, int n, int layer = 1,
                                               const std::string& category = "synthetic") {
    auto pos = synth_sample(spec, n, BiasLabel::Unbiased, layer);
    auto neg = synth_sample(spec, n, BiasLabel::Biased, layer);
    std::vector<ActivationPair> out;
    for (int i = 0; i < n; ++i)
        out.push_back({std::move(pos[static_cast<std::size_t>(i)]), std::move(neg[static_cast<std::size_t>(i)]), category});
    return out;
}

inline ordered_json to_json(const SteeringVector& s) {
    ordered_json j;
    j["layer"] = s.layer;
    j["dim"] = s.dim();
    j["v"] = s.v;
    j["n_pairs"] = s.n_pairs;
    j["categories"] = s.categories;
    j["seed"] = s.seed;
    return j;
}

inline SteeringVector dsv_from_json(const json& j) {
    try {
        SteeringVector s;
        s.layer = j.at("layer").get<int>();
        s.v = j.at("v").get<std::vector<double>>();
        if (j.at("dim").get<std::size_t>() != s.v.size()) fail(ErrorKind::Data, "dsv: dim does not match v");
        s.n_pairs = j.at("n_pairs").get<std::size_t>();
        s.categories = j.at("categories").get<std::vector<std::string>>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.validate();
        return s;
    } catch (const json::exception& e) {
        fail(ErrorKind::Data, std::string("dsv file: ") + e.what());
    }
}

inline void save_dsv(const std::filesystem::path& path, const SteeringVector& s) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Runtime, "cannot write " + path.string());
    os << to_json(s).dump(2) << '\n';
}

inline SteeringVector load_dsv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Data, "cannot open dsv file " + path.string());
    try {
        return dsv_from_json(json::parse(is));
    } catch (const json::parse_error& e) {
        fail(ErrorKind::Data, "dsv file " + path.string() + ": " + e.what());
    }
}

} // namespace steerkit
