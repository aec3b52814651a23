#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "msense/cca.hpp"
#include "msense/error.hpp"
#include "msense/masking.hpp"
#include "msense/tensor.hpp"

namespace msense {

/// Training-set embeddings per sensor for similarity search. With CCA
/// enabled, every ordered sensor pair (a, b) carries a projection of view a
/// into the space it shares with view b; searches run on the available
/// sensors' embeddings projected toward the first missing sensor.
struct Gallery {
    std::vector<std::int64_t> ids;
    std::vector<Tensor> embeddings;  // per sensor, [N×d_s]
    bool use_cca = false;
    std::map<std::pair<std::size_t, std::size_t>, CcaResult> cca;
    // Gallery rows projected per ordered pair, [N×components].
    std::map<std::pair<std::size_t, std::size_t>, std::vector<Eigen::VectorXd>> projected;

    std::size_t size() const { return ids.size(); }
    std::size_t sensors() const { return embeddings.size(); }
};

inline Gallery build_gallery(std::vector<Tensor> embeddings, std::vector<std::int64_t> ids,
                             const ExemplarOptions& options = {}) {
    Gallery g;
    if (embeddings.empty()) throw DimensionError("gallery needs at least one sensor");
    for (const auto& e : embeddings) {
        if (e.rank() != 2 || e.dim(0) != ids.size()) throw DimensionError("gallery embeddings must be [N×d] per sensor");
    }
    g.ids = std::move(ids);
    g.embeddings = std::move(embeddings);
    g.use_cca = options.use_cca;
    if (!g.use_cca) return g;
    for (std::size_t a = 0; a < g.sensors(); ++a) {
        for (std::size_t b = 0; b < g.sensors(); ++b) {
            if (a == b) continue;
            const std::size_t width = std::min(g.embeddings[a].dim(1), g.embeddings[b].dim(1));
            std::size_t comps = options.cca_components ? options.cca_components : std::max<std::size_t>(1, width / 2);
            comps = std::min(comps, width);
            auto fit = cca_fit(g.embeddings[a], g.embeddings[b], comps);
            std::vector<Eigen::VectorXd> rows;
            rows.reserve(g.size());
            const std::size_t d = g.embeddings[a].dim(1);
            for (std::size_t i = 0; i < g.size(); ++i) {
                rows.push_back(fit.project_a({g.embeddings[a].data() + i * d, d}));
            }
            g.cca.emplace(std::make_pair(a, b), std::move(fit));
            g.projected.emplace(std::make_pair(a, b), std::move(rows));
        }
    }
    return g;
}

struct ExemplarMatch {
    std::size_t index = 0;
    double similarity = 0.0;
};

namespace detail {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

/// Search vector for gallery row `row` (or for the query when row is npos).
inline std::vector<double> exemplar_key(const Gallery& g, const std::vector<std::vector<double>>& query,
                                        const MaskVector& availability, std::size_t row) {
    std::size_t target = g.sensors();
    for (std::size_t s = 0; s < availability.size(); ++s) {
        if (!availability[s]) {
            target = s;
            break;
        }
    }
    std::vector<double> key;
    for (std::size_t s = 0; s < g.sensors(); ++s) {
        if (!availability[s]) continue;
        const std::size_t d = g.embeddings[s].dim(1);
        const double* src = row == static_cast<std::size_t>(-1) ? query[s].data() : g.embeddings[s].data() + row * d;
        if (g.use_cca && target < g.sensors()) {
            const auto pair = std::make_pair(s, target);
            Eigen::VectorXd p = row == static_cast<std::size_t>(-1) ? g.cca.at(pair).project_a({src, d})
                                                                    : g.projected.at(pair)[row];
            key.insert(key.end(), p.data(), p.data() + p.size());
        } else {
            key.insert(key.end(), src, src + d);
        }
    }
    return key;
}

/// Nearest gallery row by cosine similarity over the available sensors;
/// ties resolve to the lowest row.
inline ExemplarMatch exemplar_search(const Gallery& g, const std::vector<std::vector<double>>& query,
                                     const MaskVector& availability) {
    if (g.size() == 0) throw DataError("exemplar search over an empty gallery");
    if (availability.size() != g.sensors() || query.size() != g.sensors()) {
        throw DimensionError("exemplar query must cover every gallery sensor");
    }
    if (!availability.any()) throw NoInformationError("exemplar search with no available sensor");
    for (std::size_t s = 0; s < g.sensors(); ++s) {
        if (availability[s] && query[s].size() != g.embeddings[s].dim(1)) {
            throw DimensionError("exemplar query embedding width mismatch");
        }
    }
    const auto q = exemplar_key(g, query, availability, static_cast<std::size_t>(-1));
    ExemplarMatch best{0, -2.0};
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double sim = detail::cosine(q, exemplar_key(g, query, availability, i));
        if (sim > best.similarity) best = {i, sim};
    }
    return best;
}

/// Replaces the embeddings of unavailable sensors with those of the nearest
/// gallery sample. Returns the filled embeddings and the match.
inline std::pair<std::vector<std::vector<double>>, ExemplarMatch> exemplar_lookup(
    std::vector<std::vector<double>> embeddings, const MaskVector& availability, const Gallery& g) {
    if (!availability.any()) throw NoInformationError("exemplar lookup with no available sensor");
    if (availability.full()) return {std::move(embeddings), ExemplarMatch{static_cast<std::size_t>(-1), 1.0}};
    const auto match = exemplar_search(g, embeddings, availability);
    for (std::size_t s = 0; s < g.sensors(); ++s) {
        if (availability[s]) continue;
        const std::size_t d = g.embeddings[s].dim(1);
        const double* src = g.embeddings[s].data() + match.index * d;
        embeddings[s].assign(src, src + d);
    }
    return {std::move(embeddings), match};
}

}  // namespace msense
