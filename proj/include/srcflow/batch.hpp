#pragma once

#include <span>
#include <vector>

#include "srcflow/autograd.hpp"
#include "srcflow/tokenfield.hpp"

namespace srcflow {

/// Stacks equally shaped fields row-wise into a (batch * N) x c matrix.
template <class T>
ag::Mat<T> stack_fields(std::span<const TokenField> fields) {
    if (fields.empty()) throw Error("empty batch");
    const Eigen::Index n = fields.front().tokens(), c = fields.front().channels();
    ag::Mat<T> out(n * static_cast<Eigen::Index>(fields.size()), c);
    for (std::size_t b = 0; b < fields.size(); ++b) {
        if (fields[b].tokens() != n || fields[b].channels() != c) throw Error("shape mismatch");
        out.middleRows(static_cast<Eigen::Index>(b) * n, n) = fields[b].data().template cast<T>();
    }
    return out;
}

/// Inverse of stack_fields; throws NumericalError on non-finite entries.
template <class T>
std::vector<TokenField> unstack_fields(const ag::Mat<T>& m, int batch) {
    if (!m.allFinite()) throw NumericalError("numerical overflow");
    const Eigen::Index n = m.rows() / batch;
    std::vector<TokenField> out;
    out.reserve(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) out.emplace_back(Matrix(m.middleRows(b * n, n).template cast<double>()));
    return out;
}

}  // namespace srcflow
