// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <map>
#include <set>
#include <vector>

#include "common/testutil.hpp"
#include "mgrec/rng.hpp"
#include "mgrec/sid.hpp"

using namespace mgrec;

namespace {

SemanticIdMap make_map(const std::string& modality, int levels, int k,
                       const std::map<std::string, SidEntry>& entries) {
    SemanticIdMap m;
    m.modality = modality;
    m.levels = levels;
    m.codebook_size = k;
    m.entries = entries;
    m.rebuild_collision_index();
    m.check_invariants();
    return m;
}

}  // namespace

TEST_CASE("vocab: bijective round trip over every token") {
    const TokenVocab vocab({{"txt", 2, 16}, {"img", 3, 8}}, /*suffixes=*/3, /*separators=*/1);
    std::set<std::string> names;
    for (int t = 0; t < vocab.size(); ++t) {
        const TokenInfo& info = vocab.info(t);
        names.insert(vocab.name(t));
        switch (info.kind) {
            case TokenInfo::Kind::kCode:
                CHECK(vocab.code_token(info.modality, info.level, info.code) == t);
                break;
            case TokenInfo::Kind::kSuffix:
                CHECK(vocab.suffix(info.index) == t);
                break;
            case TokenInfo::Kind::kSep:
                CHECK(vocab.sep(info.index) == t);
                break;
            default:
                break;
        }
    }
    CHECK(names.size() == static_cast<std::size_t>(vocab.size()));  // names unique
    CHECK(vocab.size() == 6 + 1 + 3 + 2 * 16 + 3 * 8);
    CHECK(vocab.name(vocab.code_token("txt", 1, 7)) == "<txt-1-7>");

    SUBCASE("separator count matches the modality count") {
        const SemanticIdMap a = make_map("txt", 1, 4, {{"i", {{0}, 0}}});
        const SemanticIdMap b = make_map("img", 1, 4, {{"i", {{1}, 0}}});
        const SemanticIdMap c = make_map("aud", 1, 4, {{"i", {{2}, 0}}});
        CHECK(TokenVocab::build({&a}).n_separators() == 0);
        CHECK(TokenVocab::build({&a, &b}).n_separators() == 1);
        CHECK(TokenVocab::build({&a, &b, &c}).n_separators() == 2);
    }
    SUBCASE("payload round trip") {
        testutil::TempDir tmp("vocab");
        save_vocab(vocab, tmp.file("v.ckpt"));
        const TokenVocab back = load_vocab(tmp.file("v.ckpt"));
        REQUIRE(back.size() == vocab.size());
        for (int t = 0; t < vocab.size(); ++t) CHECK(back.name(t) == vocab.name(t));
        vocab.save_json(tmp.file("v.json"));
        CHECK(testutil::read_bytes(tmp.file("v.json")).find("<txt-1-7>") != std::string::npos);
    }
}

TEST_CASE("fuse_embeddings") {
    EmbeddingTable txt;
    txt.modality = "txt";
    txt.dim = 2;
    txt.rows["a"] = (VectorF(2) << 3.0f, 4.0f).finished();
    EmbeddingTable img;
    img.modality = "img";
    img.dim = 3;
    img.rows["a"] = (VectorF(3) << 0.0f, 2.0f, 0.0f).finished();

    SUBCASE("concatenation of normalized blocks") {
        const EmbeddingTable fused = fuse_embeddings({&txt, &img}, {{"txt", 1.0}, {"img", 1.0}});
        CHECK(fused.dim == 5);
        CHECK(fused.modality == "fused");
        const VectorF& v = fused.rows.at("a");
        CHECK(v[0] == doctest::Approx(0.6f));
        CHECK(v[1] == doctest::Approx(0.8f));
        CHECK(v[3] == doctest::Approx(1.0f));
    }
    SUBCASE("scales control the block energy") {
        Rng rng(31);
        EmbeddingTable t2, i2;
        t2.modality = "txt";
        t2.dim = 6;
        i2.modality = "img";
        i2.dim = 6;
        for (int i = 0; i < 500; ++i) {
            VectorF a(6), b(6);
            for (int d = 0; d < 6; ++d) {
                a[d] = static_cast<float>(rng.normal());
                b[d] = static_cast<float>(rng.normal());
            }
            const std::string id = "i" + std::to_string(i);
            t2.rows[id] = a;
            i2.rows[id] = b;
        }
        const EmbeddingTable fused = fuse_embeddings({&t2, &i2}, {{"txt", 10.0}, {"img", 1.0}});
        double txt_energy = 0.0, img_energy = 0.0;
        for (const auto& [id, v] : fused.rows) {
            txt_energy += v.head(6).squaredNorm();
            img_energy += v.tail(6).squaredNorm();
        }
        CHECK(txt_energy / img_energy == doctest::Approx(100.0).epsilon(1e-3));
    }
    SUBCASE("single modality: normalized identity") {
        const EmbeddingTable fused = fuse_embeddings({&txt}, {{"txt", 1.0}});
        CHECK(fused.dim == 2);
        CHECK(fused.rows.at("a")[0] == doctest::Approx(0.6f));
    }
    SUBCASE("item-set mismatch rejected") {
        EmbeddingTable extra = img;
        extra.rows["b"] = (VectorF(3) << 1.0f, 0.0f, 0.0f).finished();
        CHECK_THROWS_AS(fuse_embeddings({&txt, &extra}, {}), Error);
    }
}

TEST_CASE("item_tokens: block layouts per strategy") {
    const SemanticIdMap txt = make_map("txt", 2, 256, {{"item", {{214, 250}, 0}}});
    const SemanticIdMap img = make_map("img", 2, 256, {{"item", {{40, 80}, 0}}});
    const TokenVocab vocab = TokenVocab::build({&txt, &img});
    const SidMapsByModality maps = {{"txt", &txt}, {"img", &img}};

    FusionStrategy lfpp{FusionKind::kLatePlus, {"txt", "img"}};
    FusionStrategy lf{FusionKind::kLate, {"txt", "img"}};

    SUBCASE("lf++ inserts the separator between modality blocks") {
        const auto tokens =
            item_tokens("item", lfpp, maps, vocab, SuffixPolicy::kOmitUnambiguous);
        const std::vector<int> expected = {
            vocab.code_token("txt", 1, 214), vocab.code_token("txt", 2, 250), vocab.sep(1),
            vocab.code_token("img", 1, 40), vocab.code_token("img", 2, 80)};
        CHECK(tokens == expected);
    }
    SUBCASE("lf concatenates with no separator") {
        const auto tokens = item_tokens("item", lf, maps, vocab, SuffixPolicy::kOmitUnambiguous);
        const std::vector<int> expected = {
            vocab.code_token("txt", 1, 214), vocab.code_token("txt", 2, 250),
            vocab.code_token("img", 1, 40), vocab.code_token("img", 2, 80)};
        CHECK(tokens == expected);
    }
    SUBCASE("suffix tokens always emitted by default") {
        const auto tokens = item_tokens("item", lf, maps, vocab);
        const std::vector<int> expected = {
            vocab.code_token("txt", 1, 214), vocab.code_token("txt", 2, 250), vocab.suffix(0),
            vocab.code_token("img", 1, 40), vocab.code_token("img", 2, 80), vocab.suffix(0)};
        CHECK(tokens == expected);
    }
    SUBCASE("missing item") {
        CHECK_THROWS_AS(item_tokens("nope", lf, maps, vocab), Error);
    }
}

TEST_CASE("item_tokens: early fusion uses the fused stream") {
    const SemanticIdMap fused = make_map("fused", 1, 8, {{"item", {{3}, 0}}});
    const TokenVocab vocab = TokenVocab::build({&fused});
    const FusionStrategy ef{FusionKind::kEarly, {"fused"}};
    const auto tokens = item_tokens("item", ef, {{"fused", &fused}}, vocab,
                                    SuffixPolicy::kOmitUnambiguous);
    CHECK(tokens == std::vector<int>{vocab.code_token("fused", 1, 3)});
}

TEST_CASE("item_tokens: suffix omission only when unambiguous") {
    const SemanticIdMap txt = make_map(
        "txt", 1, 8, {{"a", {{1}, 0}}, {"b", {{1}, 1}}, {"c", {{2}, 0}}});
    const TokenVocab vocab = TokenVocab::build({&txt});
    const FusionStrategy uni{FusionKind::kLate, {"txt"}};
    const SidMapsByModality maps = {{"txt", &txt}};
    // "a" collides with "b", so both keep their suffix; "c" drops it.
    CHECK(item_tokens("a", uni, maps, vocab, SuffixPolicy::kOmitUnambiguous) ==
          std::vector<int>{vocab.code_token("txt", 1, 1), vocab.suffix(0)});
    CHECK(item_tokens("b", uni, maps, vocab, SuffixPolicy::kOmitUnambiguous) ==
          std::vector<int>{vocab.code_token("txt", 1, 1), vocab.suffix(1)});
    CHECK(item_tokens("c", uni, maps, vocab, SuffixPolicy::kOmitUnambiguous) ==
          std::vector<int>{vocab.code_token("txt", 1, 2)});
}

TEST_CASE("lf++ sequences alternate strictly by block") {
    Rng rng(8);
    std::map<std::string, SidEntry> txt_entries, img_entries;
    for (int i = 0; i < 60; ++i) {
        const std::string id = "i" + std::to_string(100 + i);
        txt_entries[id] = {{static_cast<int>(rng.uniform_index(4)),
                            static_cast<int>(rng.uniform_index(4))}, 0};
        img_entries[id] = {{static_cast<int>(rng.uniform_index(4)),
                            static_cast<int>(rng.uniform_index(4))}, 0};
    }
    // Deduplicate collisions via suffixes.
    std::map<std::vector<int>, int> seen_t, seen_i;
    for (auto& [id, e] : txt_entries) e.suffix = seen_t[e.codes]++;
    for (auto& [id, e] : img_entries) e.suffix = seen_i[e.codes]++;
    const SemanticIdMap txt = make_map("txt", 2, 4, txt_entries);
    const SemanticIdMap img = make_map("img", 2, 4, img_entries);
    const TokenVocab vocab = TokenVocab::build({&txt, &img});
    const FusionStrategy lfpp{FusionKind::kLatePlus, {"txt", "img"}};
    const SidMapsByModality maps = {{"txt", &txt}, {"img", &img}};

    std::set<std::vector<int>> distinct;
    for (const auto& [id, entry] : txt_entries) {
        const auto tokens = item_tokens(id, lfpp, maps, vocab);
        distinct.insert(tokens);
        const int sep = vocab.sep(1);
        const auto sep_it = std::find(tokens.begin(), tokens.end(), sep);
        REQUIRE(sep_it != tokens.end());
        for (auto it = tokens.begin(); it != sep_it; ++it) {
            const TokenInfo& info = vocab.info(*it);
            if (info.kind == TokenInfo::Kind::kCode) CHECK(info.modality == "txt");
        }
        for (auto it = sep_it + 1; it != tokens.end(); ++it) {
            const TokenInfo& info = vocab.info(*it);
            if (info.kind == TokenInfo::Kind::kCode) CHECK(info.modality == "img");
        }
    }
    // Injectivity over items.
    CHECK(distinct.size() == txt_entries.size());
}

TEST_CASE("build_rec_example") {
    const SemanticIdMap txt = make_map("txt", 1, 8, {{"A", {{1}, 0}}, {"B", {{2}, 0}},
                                                     {"C", {{3}, 0}}});
    const TokenVocab vocab = TokenVocab::build({&txt});
    const FusionStrategy uni{FusionKind::kLate, {"txt"}};
    const SidMapsByModality maps = {{"txt", &txt}};

    SUBCASE("single-item history") {
        const SequenceExample ex =
            build_rec_example({"A"}, "B", uni, maps, vocab, 20, "u1");
        CHECK(ex.source == std::vector<int>{vocab.rec(), vocab.code_token("txt", 1, 1),
                                            vocab.suffix(0), vocab.eos()});
        CHECK(ex.target == std::vector<int>{vocab.code_token("txt", 1, 2), vocab.suffix(0),
                                            vocab.eos()});
        CHECK(ex.task == TaskTag::kRec);
        CHECK(ex.user_id == "u1");
    }
    SUBCASE("history truncated to the most recent items") {
        std::vector<std::string> history(30, "A");
        history.back() = "C";
        const SequenceExample ex = build_rec_example(history, "B", uni, maps, vocab, 20, "u");
        // <rec> + 20 items x 2 tokens + <eos>
        CHECK(ex.source.size() == 1 + 20 * 2 + 1);
        CHECK(ex.source[ex.source.size() - 2] == vocab.suffix(0));
        CHECK(ex.source[ex.source.size() - 3] == vocab.code_token("txt", 1, 3));  // C kept
    }
    SUBCASE("empty history rejected") {
        CHECK_THROWS_AS(build_rec_example({}, "B", uni, maps, vocab, 20, "u"), Error);
    }
    SUBCASE("token count over random histories") {
        Rng rng(5);
        for (int trial = 0; trial < 50; ++trial) {
            const int n = 1 + static_cast<int>(rng.uniform_index(12));
            std::vector<std::string> history;
            const std::vector<std::string> pool = {"A", "B", "C"};
            for (int i = 0; i < n; ++i) history.push_back(pool[rng.uniform_index(3)]);
            const SequenceExample ex = build_rec_example(history, "A", uni, maps, vocab, 8, "u");
            const int kept = std::min(n, 8);
            CHECK(ex.source.size() == static_cast<std::size_t>(1 + kept * 2 + 1));
            CHECK(ex.target.size() == 3);
        }
    }
}

TEST_CASE("build_alignment_examples mirror the item's two blocks") {
    const SemanticIdMap txt = make_map("txt", 2, 256, {{"item", {{214, 250}, 0}}});
    const SemanticIdMap img = make_map("img", 2, 256, {{"item", {{40, 80}, 0}}});
    const TokenVocab vocab = TokenVocab::build({&txt, &img});

    const auto pair = build_alignment_examples("item", txt, img, vocab);
    const SequenceExample& i2t = pair[0];
    const SequenceExample& t2i = pair[1];

    CHECK(i2t.task == TaskTag::kAlignI2T);
    CHECK(i2t.source == std::vector<int>{vocab.align_i2t(), vocab.code_token("img", 1, 40),
                                         vocab.code_token("img", 2, 80), vocab.eos()});
    CHECK(i2t.target == std::vector<int>{vocab.code_token("txt", 1, 214),
                                         vocab.code_token("txt", 2, 250), vocab.eos()});
    CHECK(t2i.task == TaskTag::kAlignT2I);
    CHECK(t2i.target == std::vector<int>{vocab.code_token("img", 1, 40),
                                         vocab.code_token("img", 2, 80), vocab.eos()});

    SUBCASE("missing modality id") {
        const SemanticIdMap img_missing = make_map("img", 2, 256, {{"other", {{1, 1}, 0}}});
        CHECK_THROWS_AS(build_alignment_examples("item", txt, img_missing, vocab), Error);
    }
    SUBCASE("collision suffixes stay out of alignment pairs") {
        const SemanticIdMap txt2 = make_map(
            "txt", 2, 256, {{"item", {{214, 250}, 0}}, {"twin", {{214, 250}, 1}}});
        const SemanticIdMap img2 = make_map(
            "img", 2, 256, {{"item", {{40, 80}, 0}}, {"twin", {{9, 9}, 0}}});
        const TokenVocab v2 = TokenVocab::build({&txt2, &img2});
        const auto pair2 = build_alignment_examples("twin", txt2, img2, v2);
        CHECK(pair2[0].target == std::vector<int>{v2.code_token("txt", 1, 214),
                                                  v2.code_token("txt", 2, 250), v2.eos()});
        CHECK(pair2[0].source == std::vector<int>{v2.align_i2t(), v2.code_token("img", 1, 9),
                                                  v2.code_token("img", 2, 9), v2.eos()});
    }
    SUBCASE("a catalog of n items yields exactly 2n alignment examples") {
        std::map<std::string, SidEntry> te, ie;
        for (int i = 0; i < 17; ++i) {
            te["i" + std::to_string(i)] = {{i % 16, i / 16}, 0};
            ie["i" + std::to_string(i)] = {{(i * 5) % 16, i / 16}, 0};
        }
        const SemanticIdMap t2 = make_map("txt", 2, 16, te);
        const SemanticIdMap i2 = make_map("img", 2, 16, ie);
        const TokenVocab v2 = TokenVocab::build({&t2, &i2});
        std::size_t count = 0;
        for (const auto& [id, e] : te) {
            count += build_alignment_examples(id, t2, i2, v2).size();
        }
        CHECK(count == 34);
    }
}

TEST_CASE("examples file round trip") {
    testutil::TempDir tmp("examples");
    std::vector<SequenceExample> examples;
    SequenceExample a;
    a.task = TaskTag::kAlignI2T;
    a.source = {4, 9, 2};
    a.target = {10, 2};
    a.user_id = "";
    SequenceExample b;
    b.task = TaskTag::kRec;
    b.source = {3, 7, 8, 2};
    b.target = {11, 2};
    b.user_id = "u9";
    examples.push_back(a);
    examples.push_back(b);
    save_examples(examples, tmp.file("e.jsonl"));
    const auto back = load_examples(tmp.file("e.jsonl"));
    REQUIRE(back.size() == 2);
    CHECK(back[0].task == TaskTag::kAlignI2T);
    CHECK(back[0].source == a.source);
    CHECK(back[1].target == b.target);
    CHECK(back[1].user_id == "u9");
}

TEST_CASE("item_target_sequences appends eos and stays injective") {
    std::map<std::string, SidEntry> te, ie;
    Rng rng(77);
    for (int i = 0; i < 40; ++i) {
        te["i" + std::to_string(i)] = {{static_cast<int>(rng.uniform_index(3)),
                                        static_cast<int>(rng.uniform_index(3))}, 0};
        ie["i" + std::to_string(i)] = {{static_cast<int>(rng.uniform_index(3)),
                                        static_cast<int>(rng.uniform_index(3))}, 0};
    }
    std::map<std::vector<int>, int> seen_t, seen_i;
    for (auto& [id, e] : te) e.suffix = seen_t[e.codes]++;
    for (auto& [id, e] : ie) e.suffix = seen_i[e.codes]++;
    const SemanticIdMap txt = make_map("txt", 2, 3, te);
    const SemanticIdMap img = make_map("img", 2, 3, ie);
    const TokenVocab vocab = TokenVocab::build({&txt, &img});
    const FusionStrategy lf{FusionKind::kLate, {"txt", "img"}};
    const auto targets = item_target_sequences(lf, {{"txt", &txt}, {"img", &img}}, vocab);
    CHECK(targets.size() == 40);
    std::set<std::vector<int>> distinct;
    for (const auto& [id, seq] : targets) {
        CHECK(seq.back() == vocab.eos());
        distinct.insert(seq);
    }
    CHECK(distinct.size() == 40);
}
