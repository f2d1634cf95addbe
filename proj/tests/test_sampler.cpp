// Copyright (C) 2026 The M2R2 Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "m2r2/sampler.hpp"

using namespace m2r2;

namespace {

// Annotation-only recording with contiguous actions of the given lengths.
Recording scripted(const std::vector<int>& lengths, const std::vector<std::string>& activities = {}) {
    Recording r;
    r.id = "scripted";
    r.labels = LabelSet({"pick", "insert", "remove", "place"}, {"USB", "peg"});
    int t = 0;
    for (std::size_t k = 0; k < lengths.size(); ++k) {
        const std::string act = activities.empty() ? r.labels.activities()[k % 4] : activities[k];
        r.annotations.push_back({t, t + lengths[k], act, k % 2 ? "peg" : "USB"});
        t += lengths[k];
    }
    for (int i = 0; i < t; ++i) r.camera_timestamps.push_back(0.1 * i);
    return r;
}

}  // namespace

TEST_CASE("window bounds") {
    auto b = window_bounds({50, 90, "pick", "USB"}, 30, 1000);
    CHECK(b.lo == 20);
    CHECK(b.hi == 120);
    b = window_bounds({10, 40, "pick", "USB"}, 30, 1000);
    CHECK(b.lo == 0);
    CHECK(b.hi == 70);
    b = window_bounds({980, 1000, "pick", "USB"}, 30, 1000);
    CHECK(b.hi == 1000);
}

TEST_CASE("allocate counts") {
    CHECK(allocate_counts({30, 40, 30}, 100) == std::array<int, 3>{30, 40, 30});
    CHECK(allocate_counts({30, 970, 30}, 100) == std::array<int, 3>{3, 94, 3});
    CHECK(allocate_counts({0, 50, 50}, 100) == std::array<int, 3>{0, 50, 50});
    CHECK(allocate_counts({1, 10000, 1}, 100) == std::array<int, 3>{1, 98, 1});
    CHECK_THROWS_AS(allocate_counts({0, 0, 0}, 100), std::invalid_argument);
}

TEST_CASE("smoothed boundaries") {
    auto s = smooth_boundaries({0, 0, 1, 0, 0}, 1.0);
    const double expect[] = {0.1353, 0.6065, 1.0, 0.6065, 0.1353};
    for (int i = 0; i < 5; ++i) CHECK(s[i] == doctest::Approx(expect[i]).epsilon(1e-4));
    auto sharp = smooth_boundaries({0, 1, 0, 0, 1}, 1e-6);
    CHECK(sharp == std::vector<double>{0, 1, 0, 0, 1});
    CHECK_THROWS(smooth_boundaries({1}, 0.0));
}

TEST_CASE("interior segment spans three actions with two marks") {
    auto rec = scripted({60, 40, 60});
    SamplerConfig cfg;
    auto w = sample_window(rec, 1, cfg);
    REQUIRE(w.frame_indices.size() == 100);
    CHECK(w.frame_indices.front() >= 30);
    CHECK(w.frame_indices.back() < 130);
    CHECK(std::set<int>(w.frame_indices.begin(), w.frame_indices.end()).size() == 100);
    int ones = 0;
    for (int b : w.boundary) ones += b;
    CHECK(ones == 2);
    CHECK(w.ordered_labels == std::vector<std::string>{"pick USB", "insert peg", "remove USB"});
    CHECK(w.sentence ==
          "First, the robot does pick USB. Next, it performs insert peg. Finally, the machine executes remove USB.");
}

TEST_CASE("first segment has a single mark") {
    auto rec = scripted({40, 60, 60});
    auto w = sample_window(rec, 0, SamplerConfig{});
    int ones = 0;
    for (int b : w.boundary) ones += b;
    CHECK(ones == 1);
    CHECK(w.ordered_labels.size() == 2);
    CHECK(w.sentence == "First, the robot does pick USB. Finally, the machine executes insert peg.");
}

TEST_CASE("boundary mark is the first sampled index at or after the transition") {
    auto rec = scripted({60, 200, 60});
    auto w = sample_window(rec, 1, SamplerConfig{});
    for (std::size_t j = 0; j < w.boundary.size(); ++j) {
        if (!w.boundary[j]) continue;
        const int f = w.frame_indices[j];
        CHECK((f >= 60 && (j == 0 || w.frame_indices[j - 1] < 60 || f >= 260)));
    }
}

TEST_CASE("short windows repeat frames to reach the window size") {
    auto rec = scripted({8, 10, 8});
    auto w = sample_window(rec, 1, SamplerConfig{});
    CHECK(w.frame_indices.size() == 100);
    CHECK(std::is_sorted(w.frame_indices.begin(), w.frame_indices.end()));
    CHECK(std::set<int>(w.frame_indices.begin(), w.frame_indices.end()).size() == 26);
}

TEST_CASE("sampling is deterministic per seed") {
    auto rec = scripted({50, 120, 50, 70});
    SamplerConfig cfg;
    cfg.seed = 5;
    auto a = sample_window(rec, 2, cfg);
    auto b = sample_window(rec, 2, cfg);
    CHECK(a.to_json() == b.to_json());
    cfg.seed = 6;
    CHECK(sample_window(rec, 2, cfg).frame_indices != a.frame_indices);
}

TEST_CASE("sample_window errors") {
    Recording empty = scripted({});
    empty.camera_timestamps = {0.0};
    CHECK_THROWS_AS(sample_window(empty, 0, SamplerConfig{}), DataError);
    auto rec = scripted({10, 10});
    CHECK_THROWS_AS(sample_window(rec, 5, SamplerConfig{}), std::out_of_range);
    SamplerConfig bad;
    bad.window_size = 2;
    CHECK_THROWS(sample_window(rec, 0, bad));
}

TEST_CASE("order sentences") {
    CHECK(order_sentence({"pick USB", "insert USB", "remove USB"}) ==
          "First, the robot does pick USB. Next, it performs insert USB. Finally, the machine executes remove USB.");
    CHECK(order_sentence({"pick USB"}) == "The robot does pick USB.");
    CHECK(order_sentence({"a", "b", "c"}) != order_sentence({"b", "a", "c"}));
    CHECK_THROWS(order_sentence({}));
}

TEST_CASE("shuffled order differs from the original") {
    nn::Rng rng(1);
    const std::vector<std::string> labels{"pick USB", "insert USB", "remove USB"};
    for (int i = 0; i < 20; ++i) {
        auto s = shuffled_order(labels, rng);
        REQUIRE(s.has_value());
        CHECK(*s != labels);
        CHECK(std::multiset<std::string>(s->begin(), s->end()) ==
              std::multiset<std::string>(labels.begin(), labels.end()));
    }
    CHECK_FALSE(shuffled_order({"pick USB"}, rng).has_value());
    CHECK_FALSE(shuffled_order({"a", "a"}, rng).has_value());
}
