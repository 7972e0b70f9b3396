#pragma once

// Central finite-difference oracle for the reverse-mode engine.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rfcnet/autograd.hpp"

namespace rfcnet::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;  // "<input>[<index>]" of the worst element
    std::size_t checked = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor); the floor keeps entries whose
/// true gradient is ~0 from dominating through round-off.
inline double rel_error(double analytic, double numeric, double floor = 1e-5) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares d loss / d input from backward() against central differences for
/// every element of every listed input. `loss` must rebuild the graph each call.
inline GradCheckResult check_gradients(const std::function<Var<double>()>& loss,
                                       const std::vector<std::pair<std::string, Var<double>*>>& inputs,
                                       double eps = 1e-5) {
    for (auto& [name, v] : inputs) v->zero_grad();
    loss().backward();
    std::vector<Tensor<double>> analytic;
    for (auto& [name, v] : inputs) {
        analytic.push_back(v->grad().empty() ? Tensor<double>(v->shape()) : v->grad());
    }

    GradCheckResult result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& [name, v] = inputs[k];
        auto& values = v->mutable_value();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + eps;
            const double plus = loss().value()[0];
            values[i] = orig - eps;
            const double minus = loss().value()[0];
            values[i] = orig;
            const double numeric = (plus - minus) / (2.0 * eps);
            const double err = rel_error(analytic[k][i], numeric);
            ++result.checked;
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[k][i]) +
                               " numeric=" + std::to_string(numeric);
            }
        }
    }
    for (auto& [name, v] : inputs) v->zero_grad();
    return result;
}

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Tensor<double> t(s);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

}  // namespace rfcnet::testing
