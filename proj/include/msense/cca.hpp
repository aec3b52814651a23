#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "msense/error.hpp"
#include "msense/tensor.hpp"

namespace msense {

/// Linear CCA between two views. Projections map centered rows of a view
/// into the shared space: shared = (x − mean) · projection.
struct CcaResult {
    Eigen::VectorXd mean_a, mean_b;
    Eigen::MatrixXd projection_a;  // d_a × components
    Eigen::MatrixXd projection_b;  // d_b × components
    std::vector<double> correlations;
    bool regularized = false;
    std::string warning;

    Eigen::VectorXd project_a(std::span<const double> x) const { return project(x, mean_a, projection_a); }
    Eigen::VectorXd project_b(std::span<const double> x) const { return project(x, mean_b, projection_b); }

private:
    static Eigen::VectorXd project(std::span<const double> x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& proj) {
        if (static_cast<Eigen::Index>(x.size()) != mean.size()) throw DimensionError("CCA projection width mismatch");
        Eigen::Map<const Eigen::VectorXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
        return proj.transpose() * (v - mean);
    }
};

namespace detail {

inline Eigen::MatrixXd to_matrix(const Tensor& t) {
    if (t.rank() != 2) throw DimensionError("CCA views must be [N×d] matrices");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at(i, j);
    return m;
}

// Symmetric inverse square root; eigenvalues are floored at `floor`.
inline Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& c) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    const Eigen::VectorXd inv = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Whitens both views, then takes the SVD of the whitened cross-covariance.
/// A nearly singular covariance receives a larger ridge and a warning.
inline CcaResult cca_fit(const Tensor& view_a, const Tensor& view_b, std::size_t components,
                         double ridge = 1e-10) {
    const Eigen::MatrixXd a = detail::to_matrix(view_a);
    const Eigen::MatrixXd b = detail::to_matrix(view_b);
    if (a.rows() != b.rows()) throw DimensionError("CCA views need the same number of rows");
    if (a.rows() < 2) throw DimensionError("CCA needs at least two rows");
    const auto da = static_cast<std::size_t>(a.cols()), db = static_cast<std::size_t>(b.cols());
    if (components == 0 || components > std::min(da, db)) {
        throw ParameterError("CCA components must lie in [1," + std::to_string(std::min(da, db)) + "], got " +
                             std::to_string(components));
    }

    CcaResult res;
    res.mean_a = a.colwise().mean().transpose();
    res.mean_b = b.colwise().mean().transpose();
    const Eigen::MatrixXd ac = a.rowwise() - res.mean_a.transpose();
    const Eigen::MatrixXd bc = b.rowwise() - res.mean_b.transpose();
    const double scale = 1.0 / static_cast<double>(a.rows() - 1);
    Eigen::MatrixXd caa = scale * ac.transpose() * ac;
    Eigen::MatrixXd cbb = scale * bc.transpose() * bc;
    const Eigen::MatrixXd cab = scale * ac.transpose() * bc;

    auto regularize = [&](Eigen::MatrixXd& c, const char* which) {
        const double level = std::max(c.trace() / static_cast<double>(c.rows()), 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c, Eigen::EigenvaluesOnly);
        const double smallest = es.eigenvalues().minCoeff();
        double eps = ridge * level;
        if (smallest <= 1e-10 * level) {
            eps = std::max(eps, 1e-6 * level);
            res.regularized = true;
            res.warning += std::string(res.warning.empty() ? "" : "; ") + "view " + which +
                           " covariance is rank deficient; ridge " + std::to_string(eps) + " applied";
        }
        c.diagonal().array() += eps;
    };
    regularize(caa, "a");
    regularize(cbb, "b");

    const Eigen::MatrixXd wa = detail::inverse_sqrt(caa);
    const Eigen::MatrixXd wb = detail::inverse_sqrt(cbb);
    const Eigen::MatrixXd m = wa * cab * wb;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto c = static_cast<Eigen::Index>(components);
    res.projection_a = wa * svd.matrixU().leftCols(c);
    res.projection_b = wb * svd.matrixV().leftCols(c);
    for (Eigen::Index k = 0; k < c; ++k) {
        res.correlations.push_back(std::clamp(svd.singularValues()(k), 0.0, 1.0));
    }
    return res;
}

}  // namespace msense
