#pragma once

#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ad/tensor.hpp"
#include "common/rng.hpp"

namespace testutil {

using tsyn::ad::Tensor;

// Central finite differences against reverse-mode gradients for every
// element of every parameter. `fn` must rebuild the graph from the params'
// current values on each call.
inline void check_gradients(std::vector<Tensor> params, const std::function<Tensor()>& fn, double rel_tol = 1e-5,
                            double h_base = 1e-5) {
    Tensor loss = fn();
    for (auto& p : params) p.zero_grad();
    tsyn::ad::backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) analytic.push_back(p.grad());

    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        for (std::int64_t i = 0; i < p.size(); ++i) {
            const double orig = p.data()[i];
            const double h = h_base * std::max(1.0, std::abs(orig));
            p.data()[i] = orig + h;
            const double up = fn().item();
            p.data()[i] = orig - h;
            const double down = fn().item();
            p.data()[i] = orig;
            const double fd = (up - down) / (2 * h);
            const double an = analytic[pi][static_cast<size_t>(i)];
            const double denom = std::max({1e-8, std::abs(an), std::abs(fd)});
            INFO("param ", pi, " element ", i, " analytic ", an, " fd ", fd);
            CHECK(std::abs(an - fd) / denom < rel_tol);
        }
    }
}

inline Tensor random_tensor(tsyn::ad::Shape shape, tsyn::Rng& rng, double scale = 1.0, bool param = true) {
    std::vector<double> v(tsyn::ad::numel(shape));
    for (auto& x : v) x = rng.normal() * scale;
    return param ? Tensor::param(shape, std::move(v)) : Tensor::from_vec(shape, std::move(v));
}

// unique scratch directory under the system tmp dir
inline std::filesystem::path tmp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("tsyn_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string read_file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(static_cast<bool>(in));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace testutil
