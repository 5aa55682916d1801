// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "common/testutil.hpp"
#include "mgrec/formats.hpp"
#include "mgrec/rng.hpp"

using namespace mgrec;
using testutil::TempDir;
using testutil::write_text;

TEST_CASE("load_embeddings: single record") {
    TempDir tmp("emb1");
    write_text(tmp.file("e.jsonl"),
               R"({"item_id":"i0","modality":"txt","vector":[1.0,0.0]})" "\n");
    const EmbeddingTable t = load_embeddings(tmp.file("e.jsonl"));
    CHECK(t.dim == 2);
    CHECK(t.rows.size() == 1);
    CHECK(t.modality == "txt");
    CHECK(t.rows.at("i0")[0] == 1.0f);
}

TEST_CASE("load_embeddings: duplicate item id fails") {
    TempDir tmp("emb2");
    write_text(tmp.file("e.jsonl"),
               R"({"item_id":"i0","modality":"txt","vector":[1.0]})" "\n"
               R"({"item_id":"i0","modality":"txt","vector":[2.0]})" "\n");
    CHECK_THROWS_AS(load_embeddings(tmp.file("e.jsonl")), FormatError);
}

TEST_CASE("load_embeddings: malformed record reports the line") {
    TempDir tmp("emb3");
    write_text(tmp.file("e.jsonl"),
               R"({"item_id":"i0","modality":"txt","vector":[1.0]})" "\n"
               "not json\n");
    CHECK_THROWS_WITH_AS(load_embeddings(tmp.file("e.jsonl")),
                         doctest::Contains(":2:"), FormatError);
}

TEST_CASE("load_embeddings: dimension mismatch and non-finite rejected") {
    TempDir tmp("emb4");
    write_text(tmp.file("dim.jsonl"),
               R"({"item_id":"i0","modality":"txt","vector":[1.0,2.0]})" "\n"
               R"({"item_id":"i1","modality":"txt","vector":[1.0]})" "\n");
    CHECK_THROWS_WITH_AS(load_embeddings(tmp.file("dim.jsonl")),
                         doctest::Contains("dimension mismatch"), FormatError);
    write_text(tmp.file("nan.jsonl"),
               R"({"item_id":"i0","modality":"txt","vector":[1e400]})" "\n");
    CHECK_THROWS_AS(load_embeddings(tmp.file("nan.jsonl")), FormatError);
}

TEST_CASE("embeddings round-trip is bit-exact (jsonl and binary)") {
    TempDir tmp("embrt");
    Rng rng(11);
    EmbeddingTable t;
    t.modality = "txt";
    t.dim = 7;
    for (int i = 0; i < 100; ++i) {
        VectorF v(7);
        for (int d = 0; d < 7; ++d) v[d] = static_cast<float>(rng.normal(0.0, 3.0));
        t.rows.emplace("item" + std::to_string(i), v);
    }

    save_embeddings(t, tmp.file("e.jsonl"));
    const EmbeddingTable back = load_embeddings(tmp.file("e.jsonl"));
    REQUIRE(back.rows.size() == t.rows.size());
    CHECK(back.dim == t.dim);
    for (const auto& [id, v] : t.rows) {
        const VectorF& w = back.rows.at(id);
        for (int d = 0; d < 7; ++d) CHECK(v[d] == w[d]);  // exact
    }

    save_embeddings_binary(t, tmp.file("e.bin"));
    const EmbeddingTable bin = load_embeddings_binary(tmp.file("e.bin"), "txt");
    REQUIRE(bin.rows.size() == t.rows.size());
    for (const auto& [id, v] : t.rows) {
        const VectorF& w = bin.rows.at(id);
        for (int d = 0; d < 7; ++d) CHECK(v[d] == w[d]);
    }

    SUBCASE("truncated binary file is a corrupt-file error") {
        std::string bytes = testutil::read_bytes(tmp.file("e.bin"));
        bytes.resize(bytes.size() / 2);
        write_text(tmp.file("trunc.bin"), bytes);
        CHECK_THROWS_AS(load_embeddings_binary(tmp.file("trunc.bin"), "txt"), CorruptFileError);
    }
}

namespace {

std::string interactions_text(const std::vector<std::tuple<std::string, std::string, double>>& ev) {
    std::string text;
    for (const auto& [user, item, ts] : ev) {
        text += R"({"user_id":")" + user + R"(","item_id":")" + item +
                R"(","ts":)" + std::to_string(ts) + "}\n";
    }
    return text;
}

}  // namespace

TEST_CASE("load_interactions: user below the minimum is dropped") {
    TempDir tmp("int1");
    std::vector<std::tuple<std::string, std::string, double>> events;
    for (int i = 0; i < 4; ++i) events.emplace_back("u_small", "i" + std::to_string(i), i);
    for (int i = 0; i < 5; ++i) events.emplace_back("u_big", "i" + std::to_string(i), i);
    write_text(tmp.file("x.jsonl"), interactions_text(events));
    const InteractionDataset d = load_interactions(tmp.file("x.jsonl"), 5, /*filter_items=*/false);
    CHECK(d.histories.count("u_big") == 1);
    CHECK(d.histories.count("u_small") == 0);
}

TEST_CASE("load_interactions: events sorted by timestamp") {
    TempDir tmp("int2");
    write_text(tmp.file("x.jsonl"),
               interactions_text({{"u", "a", 3}, {"u", "b", 1}, {"u", "c", 2}}));
    const InteractionDataset d = load_interactions(tmp.file("x.jsonl"), 1, false);
    CHECK(d.histories.at("u") == std::vector<std::string>{"b", "c", "a"});
    CHECK(d.timestamps.at("u") == std::vector<double>{1, 2, 3});
}

TEST_CASE("load_interactions: tie timestamps keep file order") {
    TempDir tmp("int3");
    write_text(tmp.file("x.jsonl"),
               interactions_text({{"u", "a", 1}, {"u", "b", 1}, {"u", "c", 1}}));
    const InteractionDataset d = load_interactions(tmp.file("x.jsonl"), 1, false);
    CHECK(d.histories.at("u") == std::vector<std::string>{"a", "b", "c"});
}

namespace {

/// Independent fixed-point filter: deletes violating users/items in any order
/// until stable; the surviving event set is unique, so a naive loop suffices.
std::map<std::string, std::vector<std::string>> brute_force_filter(
    std::map<std::string, std::vector<std::string>> histories, std::size_t min_n,
    bool filter_items) {
    bool changed = true;
    while (changed) {
        changed = false;
        for (auto it = histories.begin(); it != histories.end();) {
            if (it->second.size() < min_n) {
                it = histories.erase(it);
                changed = true;
            } else {
                ++it;
            }
        }
        if (!filter_items) break;
        std::map<std::string, std::size_t> item_count;
        for (const auto& [u, h] : histories) {
            for (const auto& i : h) ++item_count[i];
        }
        for (auto& [u, h] : histories) {
            const auto before = h.size();
            std::erase_if(h, [&](const std::string& i) { return item_count[i] < min_n; });
            if (h.size() != before) changed = true;
        }
    }
    return histories;
}

}  // namespace

TEST_CASE("load_interactions: fixed-point user+item filtering matches brute force") {
    TempDir tmp("int4");
    Rng rng(99);
    std::vector<std::tuple<std::string, std::string, double>> events;
    std::map<std::string, std::vector<std::string>> raw;
    for (int u = 0; u < 10; ++u) {
        const std::string user = "u" + std::to_string(u);
        const int n = 3 + static_cast<int>(rng.uniform_index(8));
        for (int t = 0; t < n; ++t) {
            const std::string item = "i" + std::to_string(rng.uniform_index(12));
            events.emplace_back(user, item, t);
            raw[user].push_back(item);
        }
    }
    write_text(tmp.file("x.jsonl"), interactions_text(events));

    const auto expected = brute_force_filter(raw, 3, true);
    const InteractionDataset got = load_interactions(tmp.file("x.jsonl"), 3, true);
    REQUIRE(got.histories.size() == expected.size());
    for (const auto& [user, hist] : expected) {
        CHECK(got.histories.at(user) == hist);
    }

    SUBCASE("filtering is a fixed point") {
        TempDir tmp2("int5");
        save_interactions(got, tmp2.file("y.jsonl"));
        const InteractionDataset again = load_interactions(tmp2.file("y.jsonl"), 3, true);
        CHECK(again.histories == got.histories);
    }
}

TEST_CASE("load_interactions: everything filtered away is an error") {
    TempDir tmp("int6");
    write_text(tmp.file("x.jsonl"), interactions_text({{"u", "a", 1}, {"u", "b", 2}}));
    CHECK_THROWS_AS(load_interactions(tmp.file("x.jsonl"), 5, true), FormatError);
}

TEST_CASE("split_leave_last_out: five-item history") {
    InteractionDataset d;
    d.histories["u"] = {"a", "b", "c", "d", "e"};
    const InteractionDataset s = split_leave_last_out(std::move(d));
    const UserSplit& split = s.splits.at("u");
    CHECK(split.test_target == 4);   // e
    CHECK(split.val_target == 3);    // d
    CHECK(split.train_targets == std::vector<int>{1, 2});  // b, c
}

TEST_CASE("split_leave_last_out: length-3 history has no training examples") {
    InteractionDataset d;
    d.histories["u"] = {"a", "b", "c"};
    const InteractionDataset s = split_leave_last_out(std::move(d));
    CHECK(s.splits.at("u").train_targets.empty());
    CHECK(s.splits.at("u").val_target == 1);
    CHECK(s.splits.at("u").test_target == 2);
}

TEST_CASE("split_leave_last_out: too-short history fails") {
    InteractionDataset d;
    d.histories["u"] = {"a", "b"};
    CHECK_THROWS_AS(split_leave_last_out(std::move(d)), FormatError);
}

TEST_CASE("split_leave_last_out: counting over random histories") {
    // One test and one validation target per user; a history of length n
    // yields n - 3 training targets (targets 2..n-2 need a nonempty input).
    Rng rng(5);
    InteractionDataset d;
    std::size_t expected_train = 0;
    for (int u = 0; u < 50; ++u) {
        const int n = 3 + static_cast<int>(rng.uniform_index(15));
        std::vector<std::string> hist;
        for (int i = 0; i < n; ++i) hist.push_back("i" + std::to_string(i));
        d.histories["u" + std::to_string(u)] = hist;
        expected_train += static_cast<std::size_t>(n - 3);
    }
    const InteractionDataset s = split_leave_last_out(std::move(d));
    std::size_t train = 0, val = 0, test = 0;
    for (const auto& [user, split] : s.splits) {
        train += split.train_targets.size();
        val += split.val_target >= 0 ? 1 : 0;
        test += split.test_target >= 0 ? 1 : 0;
    }
    CHECK(train == expected_train);
    CHECK(val == 50);
    CHECK(test == 50);
}

TEST_CASE("sidmap round trip and invariants") {
    TempDir tmp("sid");
    SemanticIdMap m;
    m.modality = "txt";
    m.levels = 2;
    m.codebook_size = 8;
    m.entries["i0"] = {{1, 2}, 0};
    m.entries["i1"] = {{1, 2}, 1};
    m.entries["i2"] = {{3, 4}, 0};
    m.rebuild_collision_index();
    m.check_invariants();
    CHECK(m.has_collision({1, 2}));
    CHECK(!m.has_collision({3, 4}));

    save_sidmap(m, tmp.file("s.jsonl"));
    const SemanticIdMap back = load_sidmap(tmp.file("s.jsonl"), "", 8);
    CHECK(back.entries.size() == 3);
    CHECK(back.entries.at("i1").suffix == 1);
    CHECK(back.levels == 2);

    SUBCASE("duplicate (codes, suffix) rejected") {
        SemanticIdMap bad = m;
        bad.entries["i3"] = {{1, 2}, 1};
        CHECK_THROWS_AS(bad.check_invariants(), FormatError);
    }
}

TEST_CASE("checkpoint container: round trip, truncation, version, kind") {
    TempDir tmp("ckpt");
    io::Writer w;
    w.put_string("hello");
    w.put_f64(3.25);
    w.put_u64(42);
    io::save_checkpoint(tmp.file("a.ckpt"), "demo", w.bytes());

    const std::string payload = io::load_checkpoint(tmp.file("a.ckpt"), "demo");
    io::Reader r(payload);
    CHECK(r.get_string() == "hello");
    CHECK(r.get_f64() == 3.25);
    CHECK(r.get_u64() == 42);
    CHECK(r.at_end());

    SUBCASE("wrong kind") {
        CHECK_THROWS_AS(io::load_checkpoint(tmp.file("a.ckpt"), "other"), FormatError);
    }
    SUBCASE("truncated file") {
        std::string bytes = testutil::read_bytes(tmp.file("a.ckpt"));
        bytes.resize(bytes.size() - 6);
        write_text(tmp.file("b.ckpt"), bytes);
        CHECK_THROWS_AS(io::load_checkpoint(tmp.file("b.ckpt"), "demo"), CorruptFileError);
    }
    SUBCASE("corrupted payload byte") {
        std::string bytes = testutil::read_bytes(tmp.file("a.ckpt"));
        bytes[bytes.size() - 7] ^= 0x40;
        write_text(tmp.file("c.ckpt"), bytes);
        CHECK_THROWS_AS(io::load_checkpoint(tmp.file("c.ckpt"), "demo"), CorruptFileError);
    }
    SUBCASE("version mismatch") {
        std::string bytes = testutil::read_bytes(tmp.file("a.ckpt"));
        bytes[4] = 9;  // format version field
        write_text(tmp.file("d.ckpt"), bytes);
        CHECK_THROWS_AS(io::load_checkpoint(tmp.file("d.ckpt"), "demo"), VersionMismatchError);
    }
}

TEST_CASE("writer/reader matrix round trip is bit-exact") {
    Rng rng(3);
    Matrix m(5, 4);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = rng.normal();
    io::Writer w;
    w.put_matrix(m);
    io::Reader rd(w.bytes());
    const Matrix back = rd.get_matrix();
    CHECK((back - m).cwiseAbs().maxCoeff() == 0.0);
}
