#pragma once

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace testutil {

inline std::filesystem::path fixtures() { return STEERKIT_FIXTURES; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("steerkit_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline steerkit::ModelConfig small_config(std::uint64_t seed = 1, int max_seq_len = 512) {
    steerkit::ModelConfig c;
    c.n_layers = 4;
    c.hidden_dim = 64;
    c.n_heads = 4;
    c.max_seq_len = max_seq_len;
    c.seed = seed;
    return c;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
}

inline steerkit::SyntheticSpec planted(int dim, double separation, double noise, std::uint64_t seed) {
    steerkit::SyntheticSpec s;
    s.dim = dim;
    s.direction = steerkit::random_unit_vector(dim, seed ^ 0x5eedULL);
    s.separation = separation;
    s.noise = noise;
    s.seed = seed;
    return s;
}

} // namespace testutil
