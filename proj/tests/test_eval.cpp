// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <vector>

#include "common/metric_oracles.hpp"
#include "common/testutil.hpp"
#include "mgrec/eval.hpp"
#include "mgrec/quant.hpp"
#include "mgrec/synth.hpp"

using namespace mgrec;

namespace {

RankedPrediction pred(const std::string& user, std::vector<std::string> candidates,
                      const std::string& truth) {
    RankedPrediction p;
    p.user = user;
    p.candidates = std::move(candidates);
    p.truth = truth;
    return p;
}

}  // namespace

TEST_CASE("hits_at_k") {
    CHECK(hits_at_k({pred("u", {"a", "b", "t"}, "t")}, 5) == 1.0);
    CHECK(hits_at_k({pred("u", {"a", "b"}, "t")}, 5) == 0.0);
    // ranks {1, 6, 3} -> 2/3
    const std::vector<RankedPrediction> preds = {
        pred("u1", {"t1", "x", "x2", "x3", "x4", "x5"}, "t1"),
        pred("u2", {"a", "b", "c", "d", "e", "t2"}, "t2"),
        pred("u3", {"a", "b", "t3"}, "t3"),
    };
    CHECK(hits_at_k(preds, 5) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("ndcg_at_k") {
    CHECK(ndcg_at_k({pred("u", {"t"}, "t")}, 5) == doctest::Approx(1.0));
    CHECK(ndcg_at_k({pred("u", {"a", "b", "t"}, "t")}, 5) ==
          doctest::Approx(1.0 / std::log2(4.0)));  // rank 3 -> 0.5
    CHECK(ndcg_at_k({pred("u", {"a", "b", "c", "d", "e", "f", "t"}, "t")}, 5) == 0.0);  // rank 7
}

TEST_CASE("mrr") {
    CHECK(mrr({pred("u", {"a", "t"}, "t")}) == doctest::Approx(0.5));
    CHECK(mrr({pred("u", {"a", "b"}, "t")}) == 0.0);
    const std::vector<RankedPrediction> preds = {
        pred("u1", {"t1"}, "t1"),
        pred("u2", {"a", "b", "c", "t2"}, "t2"),
        pred("u3", {"a"}, "t3"),
    };
    CHECK(mrr(preds) == doctest::Approx((1.0 + 0.25 + 0.0) / 3.0));
}

TEST_CASE("ami: identities and degenerate labelings") {
    CHECK(ami({0, 0, 1, 1, 2, 2}, {0, 0, 1, 1, 2, 2}) == doctest::Approx(1.0).epsilon(1e-9));
    // Relabeled but identical partition.
    CHECK(ami({0, 0, 1, 1, 2, 2}, {5, 5, 9, 9, 7, 7}) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(ami({0, 0, 0, 0}, {0, 1, 0, 1}) == 0.0);  // constant labeling
    CHECK(ami({1, 1, 1}, {2, 2, 2}) == 0.0);        // both constant
    CHECK_THROWS_AS(ami({0, 1}, {0}), Error);
    CHECK_THROWS_AS(ami({}, {}), Error);
}

TEST_CASE("ami: matches the independent closed-form oracle") {
    const std::vector<int> a = {0, 0, 1, 1};
    const std::vector<int> b = {0, 1, 0, 1};
    CHECK(ami(a, b) == doctest::Approx(testutil::oracle_ami(a, b)).epsilon(1e-9));

    Rng rng(17);
    for (int trial = 0; trial < 120; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_index(19));
        std::vector<int> la(n), lb(n);
        const int ka = 1 + static_cast<int>(rng.uniform_index(5));
        const int kb = 1 + static_cast<int>(rng.uniform_index(5));
        for (int i = 0; i < n; ++i) {
            la[i] = static_cast<int>(rng.uniform_index(ka));
            lb[i] = static_cast<int>(rng.uniform_index(kb));
        }
        const double got = ami(la, lb);
        const double want = testutil::oracle_ami(la, lb);
        CHECK(std::abs(got - want) < 1e-9);
        // Symmetry.
        CHECK(std::abs(ami(la, lb) - ami(lb, la)) < 1e-12);
    }
}

TEST_CASE("first_level_labels") {
    SemanticIdMap m;
    m.modality = "txt";
    m.levels = 2;
    m.codebook_size = 256;
    m.entries["item"] = {{214, 250}, 0};
    m.rebuild_collision_index();
    CHECK(first_level_labels(m) == std::vector<int>{214});
    CHECK(first_level_labels(m, {"item"}) == std::vector<int>{214});

    SUBCASE("exact recovery: zero noise, one level, K = cluster count") {
        SynthConfig sc;
        sc.n_items = 160;
        sc.n_users = 10;
        sc.dims = {{"txt", 8}};
        sc.clusters_per_modality = {{"txt", 8}};
        sc.noise_sigma = 0.0;
        sc.seed = 23;
        const SynthItems items = gen_items(sc);
        QuantConfig qc;
        qc.levels = 1;
        qc.codebook_size = 8;
        qc.seed = 23;
        const TrainedQuantizer q = train_quantizer(items.tables.at("txt"), qc);
        const SemanticIdMap map = assign_ids(q, items.tables.at("txt"));
        std::vector<std::string> order;
        std::vector<int> truth;
        for (const auto& [id, cluster] : items.labels.at("txt")) {
            order.push_back(id);
            truth.push_back(cluster);
        }
        CHECK(ami(first_level_labels(map, order), truth) == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("prediction_overlap modes") {
    const auto a1 = pred("u1", {"x", "t1"}, "t1");
    const auto b1 = pred("u1", {"y", "t1"}, "t1");
    SUBCASE("identical lists agree in both modes") {
        const std::vector<RankedPrediction> a = {a1};
        CHECK(prediction_overlap(a, a, OverlapMode::kHits) == 1.0);
        CHECK(prediction_overlap(a, a, OverlapMode::kTop1) == 1.0);
    }
    SUBCASE("disjoint top-1 but agreeing hits separate the modes") {
        const std::vector<RankedPrediction> a = {a1};
        const std::vector<RankedPrediction> b = {b1};
        CHECK(prediction_overlap(a, b, OverlapMode::kHits) == 1.0);
        CHECK(prediction_overlap(a, b, OverlapMode::kTop1) == 0.0);
    }
    SUBCASE("both-miss counts as agreement in hits mode") {
        const std::vector<RankedPrediction> a = {pred("u1", {"x"}, "t")};
        const std::vector<RankedPrediction> b = {pred("u1", {"y"}, "t")};
        CHECK(prediction_overlap(a, b, OverlapMode::kHits) == 1.0);
    }
    SUBCASE("random paired sets match the hand-count oracle") {
        Rng rng(29);
        for (int trial = 0; trial < 20; ++trial) {
            auto a = testutil::random_predictions(rng);
            auto b = a;
            for (auto& p : b) {
                rng.shuffle(p.candidates);  // same users, same truths, new rankings
            }
            CHECK(prediction_overlap(a, b, OverlapMode::kHits) ==
                  doctest::Approx(testutil::oracle_overlap_hits(a, b, 5)));
            CHECK(prediction_overlap(a, b, OverlapMode::kTop1) ==
                  doctest::Approx(testutil::oracle_overlap_top1(a, b)));
        }
    }
}

TEST_CASE("partial_hits") {
    SemanticIdMap txt;
    txt.modality = "txt";
    txt.levels = 2;
    txt.codebook_size = 16;
    // Truth and the predicted item share textual codes but differ visually
    // (the map disambiguates them with suffixes).
    txt.entries["truth"] = {{0, 2}, 0};
    txt.entries["pred"] = {{0, 2}, 1};
    txt.entries["other"] = {{5, 5}, 0};
    txt.rebuild_collision_index();

    SUBCASE("correct text block counts as a slice hit") {
        const std::vector<RankedPrediction> preds = {pred("u", {"pred", "other"}, "truth")};
        CHECK(partial_hits(preds, txt, 5) == 1.0);
        CHECK(hits_at_k(preds, 5) == 0.0);  // the full item was missed
    }
    SUBCASE("a full hit is a hit under every slice") {
        const std::vector<RankedPrediction> preds = {pred("u", {"truth"}, "truth")};
        CHECK(hits_at_k(preds, 5) == 1.0);
        CHECK(partial_hits(preds, txt, 5) == 1.0);
    }
    SUBCASE("slice hits dominate full hits on random instances") {
        Rng rng(31);
        for (int trial = 0; trial < 30; ++trial) {
            auto preds = testutil::random_predictions(rng);
            SemanticIdMap slice;
            slice.modality = "txt";
            slice.levels = 1;
            slice.codebook_size = 4;
            std::map<std::vector<int>, int> suffixes;
            std::map<std::string, std::vector<int>> oracle_codes;
            for (int i = 0; i < 21; ++i) {
                const std::string id = "i" + std::to_string(i);
                SidEntry e;
                e.codes = {static_cast<int>(rng.uniform_index(4))};
                e.suffix = suffixes[e.codes]++;
                oracle_codes[id] = e.codes;
                slice.entries[id] = std::move(e);
            }
            slice.rebuild_collision_index();
            const double sliced = partial_hits(preds, slice, 5);
            CHECK(sliced >= hits_at_k(preds, 5));
            CHECK(sliced == doctest::Approx(testutil::oracle_partial_hits(preds, oracle_codes, 5)));
        }
    }
}

TEST_CASE("metric battery: 100 random small instances match brute force exactly") {
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        const auto preds = testutil::random_predictions(rng);
        for (const int k : {1, 3, 5, 7}) {
            CHECK(hits_at_k(preds, k) == testutil::oracle_hits(preds, k));
            CHECK(ndcg_at_k(preds, k) == doctest::Approx(testutil::oracle_ndcg(preds, k)).epsilon(1e-12));
        }
        CHECK(mrr(preds) == doctest::Approx(testutil::oracle_mrr(preds)).epsilon(1e-12));
    }
}

TEST_CASE("metric monotonicity invariants") {
    Rng rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        const auto preds = testutil::random_predictions(rng);
        double prev_hits = 0.0;
        for (int k = 1; k <= 21; ++k) {
            const double h = hits_at_k(preds, k);
            CHECK(h >= prev_hits);  // nondecreasing in k
            CHECK(ndcg_at_k(preds, k) <= h + 1e-12);
            prev_hits = h;
        }
        CHECK(mrr(preds) <= prev_hits + 1e-12);  // mrr <= hits at full depth
    }
}

TEST_CASE("predictions file round trip") {
    testutil::TempDir tmp("preds");
    const std::vector<RankedPrediction> preds = {pred("u1", {"a", "b"}, "b"),
                                                 pred("u2", {}, "z")};
    save_predictions(preds, tmp.file("p.jsonl"));
    const auto back = load_predictions(tmp.file("p.jsonl"));
    REQUIRE(back.size() == 2);
    CHECK(back[0].candidates == std::vector<std::string>{"a", "b"});
    CHECK(back[1].candidates.empty());
    CHECK(back[1].truth == "z");
}
