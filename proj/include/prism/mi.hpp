#pragma once

#include <cmath>
#include <vector>

#include "prism/tensor.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Exact information measures on small discrete joint distributions. These are
// definition-level references (natural log throughout); the learned relevance
// estimator elsewhere in the library is trained to mimic a decision derived
// from them, never to call them at inference time.
// ---------------------------------------------------------------------------

/// Validated joint distribution over an a x b outcome grid.
class DiscreteJoint {
public:
    explicit DiscreteJoint(Tensor<double> table) : table_(std::move(table)) {
        PRISM_CHECK_SHAPE(table_.ndim() == 2, "joint table must be rank 2");
        double s = 0;
        for (int64_t i = 0; i < table_.numel(); ++i) {
            PRISM_CHECK_VALUE(table_[i] >= 0.0, "joint table has a negative entry");
            s += table_[i];
        }
        PRISM_CHECK_VALUE(std::abs(s - 1.0) <= 1e-12, "joint table must sum to 1");
    }

    const Tensor<double>& table() const { return table_; }
    int64_t rows() const { return table_.dim(0); }
    int64_t cols() const { return table_.dim(1); }

    std::vector<double> row_marginal() const {
        std::vector<double> p(size_t(rows()), 0.0);
        for (int64_t i = 0; i < rows(); ++i)
            for (int64_t j = 0; j < cols(); ++j) p[size_t(i)] += table_.at(i, j);
        return p;
    }

    std::vector<double> col_marginal() const {
        std::vector<double> p(size_t(cols()), 0.0);
        for (int64_t i = 0; i < rows(); ++i)
            for (int64_t j = 0; j < cols(); ++j) p[size_t(j)] += table_.at(i, j);
        return p;
    }

private:
    Tensor<double> table_;
};

/// Shannon entropy in nats of a normalized marginal; 0 log 0 := 0.
inline double entropy(const std::vector<double>& marginal) {
    double s = 0;
    for (double p : marginal) {
        PRISM_CHECK_VALUE(p >= 0.0, "entropy: negative probability");
        s += p;
    }
    PRISM_CHECK_VALUE(std::abs(s - 1.0) <= 1e-12, "entropy: marginal must sum to 1");
    double h = 0;
    for (double p : marginal)
        if (p > 0) h -= p * std::log(p);
    return h;
}

/// I(X;Y) = sum p(x,y) log[p(x,y) / (p(x)p(y))] in nats; zero cells skipped.
inline double mutual_information(const DiscreteJoint& joint) {
    const auto pr = joint.row_marginal();
    const auto pc = joint.col_marginal();
    double mi = 0;
    for (int64_t i = 0; i < joint.rows(); ++i)
        for (int64_t j = 0; j < joint.cols(); ++j) {
            const double pij = joint.table().at(i, j);
            if (pij > 0) mi += pij * std::log(pij / (pr[size_t(i)] * pc[size_t(j)]));
        }
    return mi;
}

/// NMI = 2 I / (H(X) + H(Y)), in [0, 1]; defined as 0 when both marginals are
/// point masses.
inline double normalized_mi(const DiscreteJoint& joint) {
    const double hx = entropy(joint.row_marginal());
    const double hy = entropy(joint.col_marginal());
    if (hx + hy == 0.0) return 0.0;
    return 2.0 * mutual_information(joint) / (hx + hy);
}

/// Mean of per-feature MI values (the relevance surrogate for the intractable
/// multivariate dependency).
inline double max_relevance(const std::vector<double>& per_feature_mi) {
    PRISM_CHECK_VALUE(!per_feature_mi.empty(), "max_relevance: empty input");
    double s = 0;
    for (double v : per_feature_mi) s += v;
    return s / double(per_feature_mi.size());
}

}  // namespace prism
