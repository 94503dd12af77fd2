#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "prefdiff/prefdiff.hpp"

namespace testutil {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        std::string name = info ? std::string(info->test_suite_name()) + "_" + info->name() : "prefdiff_test";
        for (char& c : name)
            if (c == '/') c = '_';
        path_ = fs::temp_directory_path() / ("prefdiff_" + name);
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string str() const { return path_.string(); }
    std::string operator/(const std::string& rel) const { return (path_ / rel).string(); }

private:
    fs::path path_;
};

inline std::string slurp(const std::string& path) { return prefdiff::read_text_file(path); }

/// Policy whose logits are identical for every token.
inline prefdiff::ParameterStore uniform_policy(std::size_t vocab = 64) {
    auto store = prefdiff::init_model(prefdiff::ModelKind::policy, prefdiff::Vocab{vocab},
                                      prefdiff::BackboneConfig{1, 8, 2, 32}, 3);
    for (double& v : store.get("lm_head.w").data()) v = 0.0;
    for (double& v : store.get("lm_head.b").data()) v = 0.0;
    return store;
}

inline prefdiff::TokenSequence seq(std::initializer_list<prefdiff::TokenId> ids) {
    return prefdiff::response_seq(std::vector<prefdiff::TokenId>(ids));
}

inline prefdiff::TokenSequence query(std::initializer_list<prefdiff::TokenId> ids) {
    return prefdiff::query_seq(std::vector<prefdiff::TokenId>(ids));
}

} // namespace testutil
